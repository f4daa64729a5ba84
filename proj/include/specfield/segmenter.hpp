#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "specfield/cube.hpp"
#include "specfield/error.hpp"
#include "specfield/field.hpp"
#include "specfield/hungarian.hpp"
#include "specfield/renderer.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

/// softmax_k of the cosine between the spectrum and endmember k.
inline std::vector<double> cluster_probe(const Spectrum& c, const EndmemberDictionary& e) {
  detail::require_dims(e.band_count(), c.size(), "cluster_probe band count");
  double cn = 0.0;
  for (double v : c.values) cn += v * v;
  if (!(cn > 0.0)) throw NumericError("cluster_probe: zero spectrum (mask empty pixels by opacity first)");
  cn = std::sqrt(cn);
  std::vector<double> cosines(e.endmember_count());
  for (std::size_t k = 0; k < e.endmember_count(); ++k) {
    double dot = 0.0, en = 0.0;
    for (std::size_t b = 0; b < e.band_count(); ++b) {
      dot += e(b, k) * c[b];
      en += e(b, k) * e(b, k);
    }
    if (!(en > 0.0)) throw NumericError("cluster_probe: endmember " + std::to_string(k) + " is zero");
    cosines[k] = dot / (std::sqrt(en) * cn);
  }
  std::vector<double> p(cosines.size());
  detail::softmax_into(cosines, 1.0, p);
  return p;
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct SegmentOptions {
  double opacity_threshold = 0.5;
  bool use_abundance = false;  // argmax of rendered abundance instead of the probe
  std::size_t n_samples = 64;
  unsigned threads = 1;
};

/// Labels from an already rendered image (needs spectral, opacity and, for
/// use_abundance, abundance outputs).
inline LabelMap labels_from_render(const RenderedImage& img, const EndmemberDictionary& e, const SegmentOptions& opt) {
  LabelMap map(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (img.opacity[y * img.width + x] < opt.opacity_threshold) continue;
      std::size_t label = 0;
      if (opt.use_abundance) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < img.endmembers; ++k) {
          if (img.abundance_at(k, y, x) > best) {
            best = img.abundance_at(k, y, x);
            label = k;
          }
        }
      } else {
        const Spectrum c = img.spectral.pixel(y, x);
        label = argmax(cluster_probe(c, e));
      }
      map.at(y, x) = static_cast<std::uint16_t>(label);
    }
  }
  return map;
}

inline LabelMap segment_image(const VoxelField& field, const Camera& cam, double near, double far,
                              const SegmentOptions& opt = {}) {
  RenderOutputs outputs{true, false, opt.use_abundance, true};
  const auto img = render_image(field, cam, near, far, opt.n_samples, nullptr, outputs, opt.threads);
  return labels_from_render(img, field.endmembers(), opt);
}

struct ClassScore {
  std::uint16_t gt_label = 0;
  int pred_label = -1;  // -1 when no cluster was matched
  double iou = 0.0;
  double f1 = 0.0;
};

struct SegmentationScore {
  double miou = 0.0;
  double f1 = 0.0;
  std::vector<ClassScore> per_class;
};

/// Hungarian-matched mIoU and macro F1 over pixels whose ground truth is not
/// background. A background prediction on such a pixel counts as a miss.
inline SegmentationScore score_segmentation(const LabelMap& pred, const LabelMap& gt) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw DimensionError("score_segmentation: prediction is " + std::to_string(pred.width) + "x" +
                         std::to_string(pred.height) + ", ground truth is " + std::to_string(gt.width) + "x" +
                         std::to_string(gt.height));
  }
  std::map<std::uint16_t, std::size_t> gt_ids, pred_ids;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == kBackgroundLabel) continue;
    gt_ids.emplace(gt.labels[i], 0);
    if (pred.labels[i] != kBackgroundLabel) pred_ids.emplace(pred.labels[i], 0);
  }
  if (gt_ids.empty()) throw NumericError("score_segmentation: no labelled ground-truth pixels to score");
  std::size_t n = 0;
  for (auto& [label, id] : gt_ids) id = n++;
  std::size_t m = 0;
  for (auto& [label, id] : pred_ids) id = m++;

  std::vector<double> inter(n * std::max<std::size_t>(m, 1), 0.0), gt_size(n, 0.0), pred_size(m, 0.0);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == kBackgroundLabel) continue;
    const std::size_t g = gt_ids[gt.labels[i]];
    gt_size[g] += 1.0;
    if (pred.labels[i] == kBackgroundLabel) continue;
    const std::size_t p = pred_ids[pred.labels[i]];
    pred_size[p] += 1.0;
    inter[g * m + p] += 1.0;
  }

  auto iou = [&](std::size_t g, std::size_t p) {
    const double i = inter[g * m + p];
    return i / (gt_size[g] + pred_size[p] - i);
  };
  std::vector<int> match(n, -1);
  if (m > 0) {
    std::vector<double> cost(n * m);
    for (std::size_t g = 0; g < n; ++g)
      for (std::size_t p = 0; p < m; ++p) {
        // Equal-IoU matchings are ordered by F1 so the score ignores label order.
        const double f1 = 2.0 * inter[g * m + p] / (gt_size[g] + pred_size[p]);
        cost[g * m + p] = -(iou(g, p) + 1e-9 * f1);
      }
    match = hungarian_assign(cost, n, m);
  }

  std::vector<std::uint16_t> pred_label_of(m);
  for (const auto& [label, id] : pred_ids) pred_label_of[id] = label;
  SegmentationScore s;
  for (const auto& [label, g] : gt_ids) {
    ClassScore c;
    c.gt_label = label;
    if (match[g] >= 0) {
      const auto p = static_cast<std::size_t>(match[g]);
      c.pred_label = pred_label_of[p];
      c.iou = iou(g, p);
      c.f1 = 2.0 * inter[g * m + p] / (gt_size[g] + pred_size[p]);
    }
    s.miou += c.iou;
    s.f1 += c.f1;
    s.per_class.push_back(c);
  }
  s.miou /= static_cast<double>(n);
  s.f1 /= static_cast<double>(n);
  return s;
}

/// Distinct-colour palette for label previews; background is black.
inline std::vector<std::uint8_t> label_preview(const LabelMap& map) {
  static constexpr std::uint8_t palette[][3] = {{230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
                                                {245, 130, 48}, {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
                                                {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {170, 110, 40}};
  std::vector<std::uint8_t> rgb(map.labels.size() * 3, 0);
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    if (map.labels[i] == kBackgroundLabel) continue;
    const auto& c = palette[map.labels[i] % std::size(palette)];
    for (int j = 0; j < 3; ++j) rgb[i * 3 + static_cast<std::size_t>(j)] = c[j];
  }
  return rgb;
}

}  // namespace specfield
