#pragma once

#include "specfield/error.hpp"
#include "specfield/rng.hpp"
#include "specfield/parallel.hpp"
#include "specfield/speccore.hpp"
#include "specfield/geometry.hpp"
#include "specfield/sh.hpp"
#include "specfield/hungarian.hpp"
#include "specfield/unmix2d.hpp"
#include "specfield/field.hpp"
#include "specfield/cube.hpp"
#include "specfield/renderer.hpp"
#include "specfield/hsio.hpp"
#include "specfield/metrics.hpp"
#include "specfield/segmenter.hpp"
#include "specfield/scenegen.hpp"
#include "specfield/trainer.hpp"
