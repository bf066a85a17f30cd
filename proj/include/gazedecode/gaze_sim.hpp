#pragma once

// Simulated visual search fixations and fixation density maps (FDMs).

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gazedecode/categories.hpp"
#include "gazedecode/errors.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/stimuli.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

struct Fixation {
  double x = 0.0;  // canvas px, [0, 256)
  double y = 0.0;
  double t = 0.0;  // duration, ms, > 0
};

struct FixationLog {
  int participant = 0;
  std::string collage;  // collage reference
  CategoryId target;
  std::vector<Fixation> fixations;  // chronological
};

struct SearchParams {
  int n_fix = 20;
  double p_target = 0.6;
  double jitter_sigma = 6.0;     // px
  double duration_shape = 2.0;   // Gamma shape
  double duration_scale = 100.0; // Gamma scale, ms
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SearchParams, n_fix, p_target, jitter_sigma,
                                                duration_shape, duration_scale)

// Each fixation lands on a uniformly chosen target item with probability
// p_target, otherwise on a uniformly chosen distractor, then gets isotropic
// Gaussian jitter clamped to the canvas. A collage without distractors sends
// every fixation to a target.
inline FixationLog simulate_search(const Collage& collage, const SearchParams& params,
                                   std::uint64_t seed, int participant = 0,
                                   std::string collage_ref = "collage") {
  if (params.n_fix < 1) throw ParameterError("n_fix must be >= 1");
  if (!(params.p_target >= 0.0 && params.p_target <= 1.0))
    throw ParameterError("p_target must be in [0,1]");
  std::vector<const CollageItem*> targets, distractors;
  for (const auto& item : collage.items)
    (item.category == collage.target ? targets : distractors).push_back(&item);
  if (targets.empty()) throw StimulusError("collage has no item of the target category");

  Rng rng(seed);
  const double hi = std::nextafter(static_cast<double>(kCanvasSize), 0.0);
  FixationLog log{participant, std::move(collage_ref), collage.target, {}};
  log.fixations.reserve(static_cast<std::size_t>(params.n_fix));
  for (int i = 0; i < params.n_fix; ++i) {
    const bool on_target = distractors.empty() || rng.bernoulli(params.p_target);
    const auto& pool = on_target ? targets : distractors;
    const CollageItem* item = pool[rng.index(pool.size())];
    Fixation f;
    f.x = std::clamp(item->box.center_x() + params.jitter_sigma * rng.normal(), 0.0, hi);
    f.y = std::clamp(item->box.center_y() + params.jitter_sigma * rng.normal(), 0.0, hi);
    f.t = rng.gamma(params.duration_shape, params.duration_scale);
    log.fixations.push_back(f);
  }
  return log;
}

// JSON Lines, one object per fixation.
inline std::string log_to_jsonl(const FixationLog& log) {
  std::string out;
  for (std::size_t i = 0; i < log.fixations.size(); ++i) {
    const Fixation& f = log.fixations[i];
    const nlohmann::json j = {{"participant", log.participant}, {"collage", log.collage},
                              {"target", log.target.name()}, {"x", f.x}, {"y", f.y},
                              {"t", f.t}, {"idx", i}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline FixationLog log_from_jsonl(const std::string& text) {
  FixationLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t expected_idx = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("fixation log: ") + e.what());
    }
    if (expected_idx == 0) {
      log.participant = j.at("participant").get<int>();
      log.collage = j.at("collage").get<std::string>();
      log.target = CategoryId::from_name(j.at("target").get<std::string>());
    }
    if (j.at("idx").get<std::size_t>() != expected_idx)
      throw FormatError("fixation log out of chronological order");
    ++expected_idx;
    log.fixations.push_back({j.at("x").get<double>(), j.at("y").get<double>(),
                             j.at("t").get<double>()});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Fixation density maps

struct FdmParams {
  std::size_t grid_h = 32;
  std::size_t grid_w = 32;
  double sigma = 8.0;  // px on the canvas
  bool duration_weighted = false;
  bool normalize = true;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FdmParams, grid_h, grid_w, sigma,
                                                duration_weighted, normalize)

struct FixationDensityMap {
  Tensor grid;  // [H', W'], nonnegative
  std::size_t canvas_h = kCanvasSize;
  std::size_t canvas_w = kCanvasSize;
  double sigma = 0.0;
};

inline constexpr double kSplatRadius = 3.0;  // in units of sigma

// Sums truncated Gaussian splats (std sigma, radius 3 sigma) at canvas
// resolution. Amplitude is 1 per fixation, or its duration when
// duration_weighted. Pixel (px, py) is evaluated at its center.
inline Tensor splat_canvas(std::span<const Fixation> fixations, std::size_t canvas_h,
                           std::size_t canvas_w, double sigma, bool duration_weighted) {
  if (!(sigma > 0.0)) throw ParameterError("FDM sigma must be positive");
  Tensor canvas({canvas_h, canvas_w});
  const double radius = kSplatRadius * sigma;
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  for (const Fixation& f : fixations) {
    const double amp = duration_weighted ? f.t : 1.0;
    const long y_lo = std::max(0L, static_cast<long>(std::floor(f.y - radius - 0.5)));
    const long y_hi = std::min(static_cast<long>(canvas_h) - 1,
                               static_cast<long>(std::ceil(f.y + radius - 0.5)));
    const long x_lo = std::max(0L, static_cast<long>(std::floor(f.x - radius - 0.5)));
    const long x_hi = std::min(static_cast<long>(canvas_w) - 1,
                               static_cast<long>(std::ceil(f.x + radius - 0.5)));
    for (long py = y_lo; py <= y_hi; ++py) {
      const double dy = static_cast<double>(py) + 0.5 - f.y;
      for (long px = x_lo; px <= x_hi; ++px) {
        const double dx = static_cast<double>(px) + 0.5 - f.x;
        const double d2 = dx * dx + dy * dy;
        if (d2 > radius * radius) continue;
        canvas(static_cast<std::size_t>(py), static_cast<std::size_t>(px)) +=
            static_cast<float>(amp * std::exp(-d2 * inv_two_var));
      }
    }
  }
  return canvas;
}

// Block average of a canvas down to (grid_h, grid_w); sides must divide.
inline Tensor area_downsample(const Tensor& canvas, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t h = canvas.dim(0), w = canvas.dim(1);
  if (grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0)
    throw DimensionError("FDM grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                         " does not divide canvas " + std::to_string(h) + "x" +
                         std::to_string(w));
  const std::size_t bh = h / grid_h, bw = w / grid_w;
  Tensor grid({grid_h, grid_w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) grid(y / bh, x / bw) += canvas(y, x);
  const float inv_area = 1.0f / static_cast<float>(bh * bw);
  for (float& v : grid.data()) v *= inv_area;
  return grid;
}

// Left-to-right sum in double, so unit-mass checks are not limited by float
// accumulation error over a whole grid.
inline double tensor_sum(const Tensor& t) {
  double total = 0.0;
  for (float v : t.data()) total += static_cast<double>(v);
  return total;
}

inline FixationDensityMap fdm_from_fixations(std::span<const Fixation> fixations,
                                             const FdmParams& params,
                                             std::size_t canvas = kCanvasSize) {
  if (fixations.empty()) throw EmptyInputError("cannot build an FDM from zero fixations");
  const Tensor splats =
      splat_canvas(fixations, canvas, canvas, params.sigma, params.duration_weighted);
  FixationDensityMap fdm{area_downsample(splats, params.grid_h, params.grid_w), canvas, canvas,
                         params.sigma};
  if (params.normalize) {
    const double mass = tensor_sum(fdm.grid);
    if (!(mass > 0.0)) throw DegenerateError("FDM has zero total mass");
    for (float& v : fdm.grid.data()) v = static_cast<float>(static_cast<double>(v) / mass);
  }
  return fdm;
}

inline FixationDensityMap build_fdm(const FixationLog& log, const FdmParams& params = {},
                                    std::size_t canvas = kCanvasSize) {
  return fdm_from_fixations(log.fixations, params, canvas);
}

// Location-free map: every cell 1/(H'*W').
inline FixationDensityMap uniform_fdm(std::size_t grid_h = 32, std::size_t grid_w = 32) {
  if (grid_h == 0 || grid_w == 0) throw DimensionError("empty FDM grid");
  return {Tensor({grid_h, grid_w}, 1.0f / static_cast<float>(grid_h * grid_w)), kCanvasSize,
          kCanvasSize, 0.0};
}

}  // namespace gazedecode
