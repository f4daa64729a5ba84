#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "specfield/specfield.hpp"

namespace fs = std::filesystem;
using namespace specfield;

namespace {

struct Common {
  unsigned threads = 0;
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--threads", c.threads, "Worker threads (0: SPECFIELD_THREADS or all cores)");
  cmd->add_flag("--deterministic", c.deterministic, "Ordered gradient reductions (bitwise reproducible)");
  cmd->add_option("--seed", c.seed, "Seed for every random stream");
}

std::string indexed(std::size_t i, const std::string& suffix) {
  std::ostringstream out;
  out << std::setw(3) << std::setfill('0') << i << suffix;
  return out.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void print_resolved(const std::string& command, const std::vector<std::pair<std::string, std::string>>& values) {
  std::cout << "# " << command << " resolved configuration\n";
  for (const auto& [k, v] : values) std::cout << k << " = " << v << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string spec, out;
};

int run_synth(const SynthArgs& a) {
  SceneSpec spec = read_scene(a.spec);
  if (a.common.seed) spec.seed = *a.common.seed;
  spec.validate();
  print_resolved("synth", {{"spec", a.spec},
                           {"out", a.out},
                           {"seed", std::to_string(spec.seed)},
                           {"bands", std::to_string(spec.bands)},
                           {"endmembers", std::to_string(spec.endmembers)},
                           {"n_train", std::to_string(spec.n_train)},
                           {"n_test", std::to_string(spec.n_test)},
                           {"image_size", std::to_string(spec.image_size)},
                           {"threads", std::to_string(resolve_threads(a.common.threads))}});
  const auto gt = build_scene(spec);
  const auto manifest = emit_dataset(gt, a.out, resolve_threads(a.common.threads));
  std::cout << "wrote " << manifest.files.size() << " files to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct InitArgs {
  Common common;
  std::string data, out, method = "vca";
  std::size_t k = 3;
};

int run_init_endmembers(const InitArgs& a) {
  const Dataset ds = load_dataset(a.data);
  const RaySet rays = rays_from_views(ds.train, ds.near, ds.far, ds.response);
  const std::uint64_t seed = a.common.seed.value_or(0);
  print_resolved("init-endmembers",
                 {{"data", a.data}, {"out", a.out}, {"method", a.method}, {"k", std::to_string(a.k)}, {"seed", std::to_string(seed)}});
  EndmemberDictionary e;
  if (a.method == "vca") {
    e = vca_endmembers(rays, a.k, seed);
  } else if (a.method == "random") {
    e = random_endmembers(rays.bands, a.k, seed);
  } else {
    throw UsageError("--method must be vca or random, got '" + a.method + "'");
  }
  write_endmembers(e, a.out);
  if (ds.gt_endmembers && ds.gt_endmembers->endmember_count() == a.k) {
    std::cout << "max spectral angle to reference endmembers: " << match_endmembers(e, *ds.gt_endmembers).max_angle << " rad\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data, out, config, preset = "desk", ablation = "full", resume, adam_state, history, init_endmembers;
  bool save_adam_state = false;
  std::optional<std::size_t> iterations;
  std::vector<std::string> overrides;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = preset(a.preset);
  if (!a.config.empty()) apply_config_file(a.config, cfg);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.iterations) cfg.iterations = *a.iterations;
  if (a.common.seed) cfg.seed = *a.common.seed;
  if (a.common.threads) cfg.threads = a.common.threads;
  if (a.common.deterministic) cfg.deterministic = true;
  cfg = apply_ablation(cfg, a.ablation);
  cfg.validate();
  std::cout << "# train resolved configuration\n"
            << "data = " << a.data << "\nout = " << a.out << "\npreset = " << a.preset << "\nablation = " << a.ablation
            << '\n'
            << cfg.to_text();

  const Dataset ds = load_dataset(a.data);
  RaySet rays = rays_from_views(ds.train, ds.near, ds.far, ds.response);
  VoxelField field;
  std::optional<AdamState> adam;
  if (!a.resume.empty()) {
    field = read_checkpoint(a.resume);
    if (!a.adam_state.empty()) adam = read_adam_state(a.adam_state);
  } else {
    const EndmemberDictionary e =
        a.init_endmembers.empty() ? initial_endmembers(rays, cfg) : read_endmembers(a.init_endmembers);
    field = initial_field(rays.bands, cfg, e);
  }
  Trainer trainer(std::move(field), std::move(rays), ds.response, cfg);
  if (adam) trainer.restore(*adam);
  const auto history = trainer.run([](const LossRecord& r) {
    std::cout << "iter " << r.iteration << " loss " << std::setprecision(8) << r.loss << " lr " << r.learning_rate << '\n';
  });
  VoxelField out = trainer.field();
  if (!cfg.constrained) {
    std::cerr << "warning: unconstrained abundances are not representable in a checkpoint; "
                 "the saved field renders with softmax abundances\n";
  }
  bake_flags(out);
  write_checkpoint(out, a.out);
  write_loss_history(history, a.history.empty() ? a.out + ".loss.txt" : a.history);
  if (a.save_adam_state) write_adam_state(trainer.adam_state(), a.adam_state.empty() ? a.out + ".adam" : a.adam_state);
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  Common common;
  std::string ckpt, poses, out, response;
  std::size_t n_samples = 64;
};

int run_render(const RenderArgs& a) {
  const VoxelField field = read_checkpoint(a.ckpt);
  const PoseFile poses = read_poses(a.poses);
  CameraResponse response =
      a.response.empty() ? default_camera_response(field.band_count()) : read_camera_response(a.response);
  detail::require_dims(field.band_count(), response.bands, "camera response band count");
  response.gamma = GammaPolicy::srgb_gamma;
  const unsigned threads = resolve_threads(a.common.threads);
  print_resolved("render", {{"ckpt", a.ckpt},
                            {"poses", a.poses},
                            {"out", a.out},
                            {"n_samples", std::to_string(a.n_samples)},
                            {"threads", std::to_string(threads)}});
  ensure_dir(a.out);
  const fs::path dir(a.out);
  for (std::size_t i = 0; i < poses.frames.size(); ++i) {
    const auto img = render_image(field, poses.camera(i), poses.near, poses.far, a.n_samples, &response, {}, threads);
    write_cube(img.spectral, (dir / indexed(i, ".hsc")).string());
    std::vector<std::uint8_t> rgb(img.rgb.size());
    std::transform(img.rgb.begin(), img.rgb.end(), rgb.begin(), to_byte);
    write_ppm(rgb, img.width, img.height, (dir / indexed(i, "_rgb.ppm")).string());
    for (std::size_t k = 0; k < img.endmembers; ++k) {
      std::vector<std::uint8_t> plane(img.width * img.height);
      for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = to_byte(img.abundance[k * plane.size() + p]);
      write_pgm(plane, img.width, img.height, (dir / indexed(i, "_abundance" + std::to_string(k) + ".pgm")).string());
    }
    std::vector<std::uint8_t> opacity(img.opacity.size());
    std::transform(img.opacity.begin(), img.opacity.end(), opacity.begin(), to_byte);
    write_pgm(opacity, img.width, img.height, (dir / indexed(i, "_opacity.pgm")).string());
  }
  std::cout << "rendered " << poses.frames.size() << " views to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  Common common;
  std::string ckpt, poses, out;
  std::vector<std::string> gt;
  double opacity_threshold = 0.5;
  bool use_abundance = false;
  std::size_t n_samples = 64;
};

int run_segment(const SegmentArgs& a) {
  const VoxelField field = read_checkpoint(a.ckpt);
  const PoseFile poses = read_poses(a.poses);
  if (!a.gt.empty() && a.gt.size() != poses.frames.size()) {
    throw UsageError("--gt lists " + std::to_string(a.gt.size()) + " label maps for " +
                     std::to_string(poses.frames.size()) + " poses");
  }
  SegmentOptions opt;
  opt.opacity_threshold = a.opacity_threshold;
  opt.use_abundance = a.use_abundance;
  opt.n_samples = a.n_samples;
  opt.threads = resolve_threads(a.common.threads);
  print_resolved("segment", {{"ckpt", a.ckpt},
                             {"poses", a.poses},
                             {"out", a.out},
                             {"opacity_threshold", std::to_string(a.opacity_threshold)},
                             {"mode", a.use_abundance ? "abundance" : "cluster-probe"},
                             {"n_samples", std::to_string(a.n_samples)}});
  ensure_dir(a.out);
  const fs::path dir(a.out);
  double miou = 0.0, f1 = 0.0;
  for (std::size_t i = 0; i < poses.frames.size(); ++i) {
    const LabelMap map = segment_image(field, poses.camera(i), poses.near, poses.far, opt);
    write_labels(map, (dir / indexed(i, ".seg")).string());
    write_ppm(label_preview(map), map.width, map.height, (dir / indexed(i, "_labels.ppm")).string());
    if (!a.gt.empty()) {
      const auto s = score_segmentation(map, read_labels(a.gt[i]));
      std::cout << "view " << i << " miou " << s.miou << " f1 " << s.f1 << '\n';
      miou += s.miou;
      f1 += s.f1;
    }
  }
  if (!a.gt.empty()) {
    const double n = static_cast<double>(poses.frames.size());
    std::cout << "mean miou " << miou / n << " f1 " << f1 / n << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, heatmaps;
  double heatmap_max = 1.0;
  bool per_band = false;
};

std::vector<std::string> cube_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".hsc") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

int run_eval(const EvalArgs& a) {
  print_resolved("eval", {{"pred", a.pred}, {"gt", a.gt}, {"per_band", a.per_band ? "on" : "off"}, {"heatmaps", a.heatmaps}});
  const auto gt_names = cube_names(a.gt);
  const auto pred_names = cube_names(a.pred);
  if (gt_names.empty()) throw UsageError("no .hsc cubes in " + a.gt);
  if (pred_names != gt_names) {
    throw UsageError("cube names differ between " + a.pred + " (" + std::to_string(pred_names.size()) + " files) and " +
                     a.gt + " (" + std::to_string(gt_names.size()) + " files)");
  }
  if (!a.heatmaps.empty()) ensure_dir(a.heatmaps);
  MetricReport mean;
  for (const auto& name : gt_names) {
    const SpectralCube pred = read_cube((fs::path(a.pred) / name).string());
    const SpectralCube gt = read_cube((fs::path(a.gt) / name).string());
    const MetricReport r = evaluate(pred, gt, a.per_band);
    std::cout << name << ' ' << r.to_record() << '\n';
    mean.accumulate(r);
    if (!a.heatmaps.empty()) {
      const auto map = mrae_map(pred, gt);
      write_pgm(map.quantize(0.0, a.heatmap_max), map.width, map.height,
                (fs::path(a.heatmaps) / (fs::path(name).stem().string() + "_mrae.pgm")).string());
    }
  }
  mean.divide(static_cast<double>(gt_names.size()));
  std::cout << "# mean over " << gt_names.size() << " views\n" << mean.to_text() << mean.to_record() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EditArgs {
  std::string ckpt, spectrum, out;
  std::size_t k = 0;
};

int run_edit(const EditArgs& a) {
  print_resolved("edit", {{"ckpt", a.ckpt}, {"k", std::to_string(a.k)}, {"spectrum", a.spectrum}, {"out", a.out}});
  const VoxelField field = read_checkpoint(a.ckpt);
  write_checkpoint(replace_endmember(field, a.k, read_spectrum(a.spectrum)), a.out);
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  Common common;
  std::size_t params = 1200;
  double eps = 1e-3;
  double tolerance = 2e-3;
};

int run_gradcheck(const GradcheckArgs& a) {
  const std::uint64_t seed = a.common.seed.value_or(0);
  print_resolved("gradcheck", {{"seed", std::to_string(seed)},
                               {"params", std::to_string(a.params)},
                               {"eps", std::to_string(a.eps)},
                               {"tolerance", std::to_string(a.tolerance)}});
  const auto prob = make_gradcheck_problem(seed);
  TrainConfig cfg;
  cfg.endmembers = prob.field.endmember_count();
  cfg.n_samples = 32;
  GradcheckOptions opt;
  opt.n_params = a.params;
  opt.eps = a.eps;
  opt.seed = seed;
  opt.tolerance = a.tolerance;
  const auto report = gradcheck(prob.field, prob.data, prob.response, cfg, opt);
  std::cout << report.to_text() << "overall max_rel_error " << report.max_rel_error << '\n';
  if (!report.passed(a.tolerance)) {
    std::cerr << "error: gradient check failed (max relative error " << report.max_rel_error << " > " << a.tolerance
              << ")\n";
    return NumericError("").exit_code();
  }
  return 0;
}

std::string config_keys_text() {
  return "Training config keys (key = value, '#' comments, unknown keys rejected):\n" + TrainConfig{}.to_text();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"specfield: hyperspectral voxel radiance fields with spectral unmixing", "specfield"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "specfield 1.0");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Build a synthetic scene and write a posed dataset");
  c_synth->add_option("--spec", synth.spec, "Scene description file")->required()->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "Output dataset directory")->required();
  add_common(c_synth, synth.common);

  InitArgs init;
  auto* c_init = app.add_subcommand("init-endmembers", "Estimate an initial endmember dictionary from training views");
  c_init->add_option("--data", init.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c_init->add_option("--out", init.out, "Output endmember file")->required();
  c_init->add_option("-k,--endmembers", init.k, "Number of endmembers")->check(CLI::PositiveNumber);
  c_init->add_option("--method", init.method, "vca or random")->check(CLI::IsMember({"vca", "random"}));
  add_common(c_init, init.common);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Fit a field to a dataset");
  c_train->add_option("--data", train.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", train.out, "Output checkpoint (UMF1)")->required();
  c_train->add_option("--config", train.config, "Config file (key = value)")->check(CLI::ExistingFile);
  c_train->add_option("--preset", train.preset, "Base preset: default or desk")->check(CLI::IsMember({"default", "desk"}));
  c_train->add_option("--ablation", train.ablation, "full, no-specular, no-vca, no-rgb, no-scaling or base")
      ->check(CLI::IsMember(ablation_names()));
  c_train->add_option("--iterations", train.iterations, "Override the iteration count");
  c_train->add_option("--set", train.overrides, "Config override key=value (repeatable)");
  c_train->add_option("--init-endmembers", train.init_endmembers, "Initial endmember file")->check(CLI::ExistingFile);
  c_train->add_option("--resume", train.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  c_train->add_option("--adam-state", train.adam_state, "Adam state file to load on resume / write with --save-adam-state");
  c_train->add_flag("--save-adam-state", train.save_adam_state, "Write the optimizer state next to the checkpoint");
  c_train->add_option("--history", train.history, "Loss history file (default: <out>.loss.txt)");
  add_common(c_train, train.common);

  RenderArgs render;
  auto* c_render = app.add_subcommand("render", "Render cubes, RGB previews and abundance maps");
  c_render->add_option("--ckpt", render.ckpt, "Checkpoint (UMF1)")->required()->check(CLI::ExistingFile);
  c_render->add_option("--poses", render.poses, "Pose file")->required()->check(CLI::ExistingFile);
  c_render->add_option("--out", render.out, "Output directory")->required();
  c_render->add_option("--response", render.response, "Camera response file (3 x B)")->check(CLI::ExistingFile);
  c_render->add_option("--n-samples", render.n_samples, "Samples per ray")->check(CLI::PositiveNumber);
  add_common(c_render, render.common);

  SegmentArgs segment;
  auto* c_segment = app.add_subcommand("segment", "Unsupervised material segmentation");
  c_segment->add_option("--ckpt", segment.ckpt, "Checkpoint (UMF1)")->required()->check(CLI::ExistingFile);
  c_segment->add_option("--poses", segment.poses, "Pose file")->required()->check(CLI::ExistingFile);
  c_segment->add_option("--out", segment.out, "Output directory")->required();
  c_segment->add_option("--opacity-threshold", segment.opacity_threshold, "Background below this opacity");
  c_segment->add_flag("--use-abundance", segment.use_abundance, "Label by rendered abundance instead of the probe");
  c_segment->add_option("--n-samples", segment.n_samples, "Samples per ray")->check(CLI::PositiveNumber);
  c_segment->add_option("--gt", segment.gt, "Reference SEG1 maps, one per pose, for scoring")->check(CLI::ExistingFile);
  add_common(c_segment, segment.common);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Compare predicted cubes with reference cubes");
  c_eval->add_option("--pred", eval.pred, "Directory of predicted .hsc cubes")->required();
  c_eval->add_option("--gt", eval.gt, "Directory of reference .hsc cubes")->required();
  c_eval->add_option("--heatmaps", eval.heatmaps, "Write MRAE heatmaps (PGM) here");
  c_eval->add_option("--heatmap-max", eval.heatmap_max, "MRAE mapped to white");
  c_eval->add_flag("--per-band", eval.per_band, "Also report per-band PSNR");

  EditArgs edit;
  auto* c_edit = app.add_subcommand("edit", "Replace one endmember of a checkpoint");
  c_edit->add_option("--ckpt", edit.ckpt, "Input checkpoint")->required()->check(CLI::ExistingFile);
  c_edit->add_option("-k,--index", edit.k, "Endmember index")->required();
  c_edit->add_option("--spectrum", edit.spectrum, "Replacement spectrum (B values)")->required()->check(CLI::ExistingFile);
  c_edit->add_option("--out", edit.out, "Output checkpoint")->required();

  GradcheckArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of the analytic loss gradient");
  c_grad->add_option("--params", grad.params, "Parameters to probe")->check(CLI::PositiveNumber);
  c_grad->add_option("--eps", grad.eps, "Central difference step");
  c_grad->add_option("--tolerance", grad.tolerance, "Maximum relative error");
  add_common(c_grad, grad.common);

  auto* c_manual = app.add_subcommand("manual", "Print the full manual (all subcommands and config keys)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_init->parsed()) return run_init_endmembers(init);
    if (c_train->parsed()) return run_train(train);
    if (c_render->parsed()) return run_render(render);
    if (c_segment->parsed()) return run_segment(segment);
    if (c_eval->parsed()) return run_eval(eval);
    if (c_edit->parsed()) return run_edit(edit);
    if (c_grad->parsed()) return run_gradcheck(grad);
    if (c_manual->parsed()) {
      std::cout << app.help("", CLI::AppFormatMode::Normal);
      for (auto* sub : app.get_subcommands({})) {
        if (sub == c_manual) continue;
        std::cout << "\n" << sub->help();
      }
      std::cout << '\n' << config_keys_text();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
