#pragma once

// Semantic gaze encoder: a fully convolutional feature extractor, gaze
// pooling of its feature maps with a fixation density map, and a softmax
// head producing a class posterior. Sessions over several collages are
// aggregated into one posterior, which can then be pruned to its top-k
// classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "gazedecode/categories.hpp"
#include "gazedecode/errors.hpp"
#include "gazedecode/gaze_sim.hpp"
#include "gazedecode/layers.hpp"
#include "gazedecode/optim.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/stimuli.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

// ---------------------------------------------------------------------------
// Class posterior

class ClassPosterior {
 public:
  ClassPosterior() { probs_.fill(1.0f / static_cast<float>(kNumCategories)); }
  explicit ClassPosterior(const std::array<float, kNumCategories>& probs) : probs_(probs) {}

  static ClassPosterior one_hot(CategoryId c) {
    std::array<float, kNumCategories> p{};
    p[c.index()] = 1.0f;
    return ClassPosterior(p);
  }

  const std::array<float, kNumCategories>& probs() const { return probs_; }
  float operator[](std::size_t i) const { return probs_[i]; }

  double sum() const {
    double total = 0.0;
    for (float p : probs_) total += static_cast<double>(p);
    return total;
  }

  bool valid(double tol = 1e-6) const {
    for (float p : probs_)
      if (!std::isfinite(p) || p < 0.0f || p > 1.0f + tol) return false;
    return std::abs(sum() - 1.0) <= tol;
  }

  // Lowest category id wins ties.
  CategoryId argmax() const {
    return CategoryId(static_cast<int>(std::max_element(probs_.begin(), probs_.end()) -
                                       probs_.begin()));
  }

  double entropy() const {
    double h = 0.0;
    for (float p : probs_)
      if (p > 0.0f) h -= static_cast<double>(p) * std::log(static_cast<double>(p));
    return h;
  }

  std::size_t support() const {
    return static_cast<std::size_t>(
        std::count_if(probs_.begin(), probs_.end(), [](float p) { return p > 0.0f; }));
  }

  // Category ids sorted by decreasing probability, ties by lowest id.
  std::array<int, kNumCategories> ranking() const {
    std::array<int, kNumCategories> order{};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs_[static_cast<std::size_t>(a)] >
                                                probs_[static_cast<std::size_t>(b)]; });
    return order;
  }

  friend bool operator==(const ClassPosterior&, const ClassPosterior&) = default;

 private:
  std::array<float, kNumCategories> probs_{};
};

inline nlohmann::json posterior_to_json(const ClassPosterior& p) {
  nlohmann::json names = nlohmann::json::array();
  for (auto n : kCategoryNames) names.push_back(std::string(n));
  return {{"categories", names}, {"probs", p.probs()}};
}

inline ClassPosterior posterior_from_json(const nlohmann::json& j) {
  return ClassPosterior(j.at("probs").get<std::array<float, kNumCategories>>());
}

// k = kAllClasses keeps the posterior unchanged.
inline constexpr int kAllClasses = static_cast<int>(kNumCategories);

// Keeps the k largest entries (ties by lowest id), zeroes the rest and
// renormalizes. Kept mass already within 1e-6 of one is left as is, which
// makes the operation exactly idempotent.
inline ClassPosterior prune_topk(const ClassPosterior& posterior, int k) {
  if (k < 1 || k > kAllClasses)
    throw ParameterError("top-k must be in [1,10], got " + std::to_string(k));
  if (!posterior.valid()) throw DegenerateError("prune_topk: input is not a valid posterior");
  if (k == kAllClasses) return posterior;
  const auto order = posterior.ranking();
  std::array<float, kNumCategories> kept{};
  double mass = 0.0;
  for (int i = 0; i < k; ++i) {
    const auto c = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    kept[c] = posterior[c];
    mass += static_cast<double>(posterior[c]);
  }
  if (!(mass > 0.0)) throw DegenerateError("prune_topk: all kept entries are zero");
  if (std::abs(mass - 1.0) > 1e-6)
    for (float& p : kept) p = static_cast<float>(static_cast<double>(p) / mass);
  return ClassPosterior(kept);
}

// ---------------------------------------------------------------------------
// Encoder network

inline constexpr std::array<std::size_t, 4> kEncoderChannels = {1, 8, 16, 32};
inline constexpr std::size_t kFeatureChannels = 32;
inline constexpr std::size_t kEncoderStride = 8;  // three stride-2 stages

template <typename T>
struct EncoderModel {
  ParamSet<T> params;

  static std::string conv_k(std::size_t layer) { return "conv" + std::to_string(layer + 1) + ".k"; }
  static std::string conv_b(std::size_t layer) { return "conv" + std::to_string(layer + 1) + ".b"; }

  static EncoderModel zeros() {
    EncoderModel m;
    for (std::size_t l = 0; l < 3; ++l) {
      m.params.values.emplace(conv_k(l), BasicTensor<T>({kEncoderChannels[l + 1],
                                                          kEncoderChannels[l], 3, 3}));
      m.params.values.emplace(conv_b(l), BasicTensor<T>({kEncoderChannels[l + 1]}));
    }
    m.params.values.emplace("head.w", BasicTensor<T>({kFeatureChannels, kNumCategories}));
    m.params.values.emplace("head.b", BasicTensor<T>({kNumCategories}));
    return m;
  }

  // He-normal convolutions, scaled-normal head, zero biases.
  static EncoderModel init(std::uint64_t seed) {
    EncoderModel m = zeros();
    Rng rng(seed, 0x454E43 /* "ENC" */);
    for (std::size_t l = 0; l < 3; ++l) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(kEncoderChannels[l] * 9));
      for (T& w : m.params[conv_k(l)].data()) w = static_cast<T>(rng.normal() * std_dev);
    }
    const double head_std = std::sqrt(1.0 / static_cast<double>(kFeatureChannels));
    for (T& w : m.params["head.w"].data()) w = static_cast<T>(rng.normal() * head_std);
    return m;
  }

  template <typename U>
  EncoderModel<U> cast() const {
    return EncoderModel<U>{params.template cast<U>()};
  }
};

template <typename T>
struct EncoderActivations {
  BasicTensor<T> input;
  std::array<BasicTensor<T>, 3> pre;   // conv outputs before ReLU
  std::array<BasicTensor<T>, 3> post;  // after ReLU; post[2] is the feature map
};

// x: [N, 1, H, W] with H, W divisible by 8.
template <typename T>
EncoderActivations<T> encoder_features(const EncoderModel<T>& model, const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "encoder input");
  if (x.dim(1) != 1) throw DimensionError("encoder input must have one channel");
  if (x.dim(2) % kEncoderStride != 0 || x.dim(3) % kEncoderStride != 0 || x.dim(2) == 0 ||
      x.dim(3) == 0)
    throw DimensionError("encoder input sides must be positive multiples of 8, got " +
                         shape_str(x.shape()));
  EncoderActivations<T> a;
  a.input = x;
  const BasicTensor<T>* cur = &a.input;
  for (std::size_t l = 0; l < 3; ++l) {
    a.pre[l] = conv2d_forward(*cur, model.params[EncoderModel<T>::conv_k(l)],
                              model.params[EncoderModel<T>::conv_b(l)], 2, 1);
    a.post[l] = activation_forward(a.pre[l], Activation::relu);
    cur = &a.post[l];
  }
  return a;
}

template <typename T>
struct EncoderLoss {
  T loss;
  BasicTensor<T> probs;
  Grads<T> grads;
};

// Mean softmax cross-entropy of the global-average-pooled classifier and its
// parameter gradients.
template <typename T>
EncoderLoss<T> encoder_loss_and_grads(const EncoderModel<T>& model, const BasicTensor<T>& x,
                                      std::span<const int> labels, bool want_grads = true) {
  const EncoderActivations<T> a = encoder_features(model, x);
  const BasicTensor<T> pooled = spatial_mean(a.post[2]);
  const BasicTensor<T> logits = linear_forward(pooled, model.params["head.w"], model.params["head.b"]);
  auto sx = softmax_xent(logits, labels);
  EncoderLoss<T> out{sx.loss, std::move(sx.probs), {}};
  if (!want_grads) return out;

  const BasicTensor<T> g_logits = softmax_xent_backward(out.probs, labels);
  auto head = linear_backward(pooled, model.params["head.w"], g_logits);
  out.grads.emplace("head.w", std::move(head.w));
  out.grads.emplace("head.b", std::move(head.b));
  BasicTensor<T> g = spatial_mean_backward(a.post[2].shape(), head.x);
  for (std::size_t l = 3; l-- > 0;) {
    g = activation_backward(a.pre[l], g, Activation::relu);
    const BasicTensor<T>& in = l == 0 ? a.input : a.post[l - 1];
    auto cg = conv2d_backward(in, model.params[EncoderModel<T>::conv_k(l)], g, 2, 1, l > 0);
    out.grads.emplace(EncoderModel<T>::conv_k(l), std::move(cg.k));
    out.grads.emplace(EncoderModel<T>::conv_b(l), std::move(cg.b));
    g = std::move(cg.x);
  }
  return out;
}

// Feature map of one image, [C, H/8, W/8].
struct FeatureMap {
  Tensor data;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

inline FeatureMap extract_features(const EncoderModel<float>& model, const Tensor& image) {
  require_rank(image.shape(), 2, "extract_features image");
  const Tensor x = image.reshaped({1, 1, image.dim(0), image.dim(1)});
  Tensor f = encoder_features(model, x).post[2];
  return {f.reshaped({f.dim(1), f.dim(2), f.dim(3)})};
}

// pooled_c = sum_{y,x} fm[c,y,x] * fdm[y,x]
inline Tensor gaze_pool(const FeatureMap& fm, const FixationDensityMap& fdm) {
  if (fdm.grid.rank() != 2 || fdm.grid.dim(0) != fm.height() || fdm.grid.dim(1) != fm.width())
    throw DimensionError("gaze_pool: FDM " + shape_str(fdm.grid.shape()) +
                         " does not match feature map " + shape_str(fm.data.shape()));
  const std::size_t plane = fm.height() * fm.width();
  Tensor pooled({fm.channels()});
  for (std::size_t c = 0; c < fm.channels(); ++c) {
    const float* f = fm.data.ptr() + c * plane;
    float acc = 0.0f;
    for (std::size_t i = 0; i < plane; ++i) acc += f[i] * fdm.grid[i];
    pooled[c] = acc;
  }
  return pooled;
}

inline Tensor head_logits(const EncoderModel<float>& model, const Tensor& pooled) {
  if (pooled.size() != kFeatureChannels)
    throw DimensionError("classify: pooled vector must have 32 entries");
  return linear_forward(pooled.reshaped({1, kFeatureChannels}), model.params["head.w"],
                        model.params["head.b"]);
}

inline ClassPosterior classify(const EncoderModel<float>& model, const Tensor& pooled) {
  const Tensor probs = softmax_rows(head_logits(model, pooled));
  std::array<float, kNumCategories> p{};
  std::copy(probs.data().begin(), probs.data().end(), p.begin());
  return ClassPosterior(p);
}

// Global-average-pooled posterior of a single exemplar on a 64x64 cell canvas.
inline ClassPosterior classify_exemplar(const EncoderModel<float>& model, const Tensor& exemplar) {
  const FeatureMap fm = extract_features(model, cell_canvas(exemplar));
  return classify(model, gaze_pool(fm, uniform_fdm(fm.height(), fm.width())));
}

// ---------------------------------------------------------------------------
// Session encoding

enum class EncodingMode { local, global };
enum class Aggregation { per_fixation, joint_fdm };

struct StimulusView {
  const FeatureMap* features;
  const FixationLog* log;
};

inline ClassPosterior normalized_mean(std::span<const ClassPosterior> posteriors) {
  std::array<float, kNumCategories> acc{};
  for (const auto& p : posteriors)
    for (std::size_t c = 0; c < kNumCategories; ++c) acc[c] += p[c];
  double total = 0.0;
  for (float v : acc) total += static_cast<double>(v);
  if (!(total > 0.0)) throw DegenerateError("aggregated posterior has zero mass");
  for (float& v : acc) v = static_cast<float>(static_cast<double>(v) / total);
  return ClassPosterior(acc);
}

// Posterior of one collage.
inline ClassPosterior encode_collage(const EncoderModel<float>& model, const FeatureMap& fm,
                                     const FixationLog& log, EncodingMode mode,
                                     Aggregation aggregation, const FdmParams& fdm_params) {
  if (log.fixations.empty()) throw EmptyInputError("fixation log is empty");
  FdmParams p = fdm_params;
  p.grid_h = fm.height();
  p.grid_w = fm.width();
  p.normalize = true;
  const std::size_t canvas = fm.height() * kEncoderStride;
  if (aggregation == Aggregation::joint_fdm) {
    const FixationDensityMap fdm =
        mode == EncodingMode::local ? build_fdm(log, p, canvas) : uniform_fdm(p.grid_h, p.grid_w);
    return classify(model, gaze_pool(fm, fdm));
  }
  std::array<float, kNumCategories> acc{};
  float total_t = 0.0f;
  const FixationDensityMap global = uniform_fdm(p.grid_h, p.grid_w);
  const ClassPosterior global_post = classify(model, gaze_pool(fm, global));
  for (const Fixation& f : log.fixations) {
    if (!(f.t > 0.0)) throw ParameterError("fixation duration must be positive");
    const ClassPosterior post =
        mode == EncodingMode::local
            ? classify(model, gaze_pool(fm, fdm_from_fixations(std::span(&f, 1), p, canvas)))
            : global_post;
    const auto t = static_cast<float>(f.t);
    for (std::size_t c = 0; c < kNumCategories; ++c) acc[c] += t * post[c];
    total_t += t;
  }
  for (float& v : acc) v /= total_t;
  return ClassPosterior(acc);
}

inline ClassPosterior encode_session(const EncoderModel<float>& model,
                                     std::span<const StimulusView> stimuli, EncodingMode mode,
                                     Aggregation aggregation = Aggregation::per_fixation,
                                     const FdmParams& fdm_params = {}) {
  if (stimuli.empty()) throw EmptyInputError("session has no collages");
  std::vector<ClassPosterior> per_collage;
  per_collage.reserve(stimuli.size());
  for (const auto& s : stimuli)
    per_collage.push_back(encode_collage(model, *s.features, *s.log, mode, aggregation, fdm_params));
  return normalized_mean(per_collage);
}

// Convenience overload computing feature maps from the collage canvases.
inline ClassPosterior encode_session(const EncoderModel<float>& model,
                                     std::span<const Collage> collages,
                                     std::span<const FixationLog> logs, EncodingMode mode,
                                     Aggregation aggregation = Aggregation::per_fixation,
                                     const FdmParams& fdm_params = {}) {
  if (collages.size() != logs.size())
    throw DimensionError("encode_session: collage/log count mismatch");
  std::vector<FeatureMap> features;
  features.reserve(collages.size());
  for (const auto& c : collages) features.push_back(extract_features(model, c.canvas));
  std::vector<StimulusView> views;
  for (std::size_t i = 0; i < collages.size(); ++i) views.push_back({&features[i], &logs[i]});
  return encode_session(model, views, mode, aggregation, fdm_params);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch, lr)

struct EncoderTrainReport {
  std::vector<double> epoch_loss;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

inline nlohmann::json to_json(const EncoderTrainReport& r) {
  return {{"epoch_loss", r.epoch_loss},
          {"val_accuracy", r.val_accuracy},
          {"test_accuracy", r.test_accuracy}};
}

// Stacks exemplars onto 64x64 cell canvases: [n, 1, 64, 64].
inline Tensor cell_batch(const LabeledImages& data, std::span<const std::size_t> indices,
                         std::span<const std::pair<int, int>> offsets = {}) {
  const std::size_t plane = kCellSize * kCellSize;
  Tensor x({indices.size(), 1, kCellSize, kCellSize});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto [dx, dy] = offsets.empty() ? std::pair{0, 0} : offsets[i];
    const Tensor canvas = cell_canvas(data.image(indices[i]), dx, dy);
    std::copy(canvas.data().begin(), canvas.data().end(), x.ptr() + i * plane);
  }
  return x;
}

inline double encoder_accuracy(const EncoderModel<float>& model, const LabeledImages& data,
                               std::size_t batch = 128) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const Tensor x = cell_batch(data, idx);
    const auto r = encoder_loss_and_grads(model, x, std::span(data.labels).subspan(start, idx.size()),
                                          false);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = r.probs.ptr() + i * kNumCategories;
      const auto pred = std::max_element(row, row + kNumCategories) - row;
      if (pred == data.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

using EpochCallback = std::function<void(int epoch, double loss)>;

// Trains on exemplars placed on 64x64 cell canvases with +-4 px placement
// jitter, pooling with a uniform map (plain global average pooling).
inline EncoderModel<float> train_encoder(const LabeledImages& train, const TrainConfig& cfg,
                                         std::uint64_t seed, EncoderTrainReport& report,
                                         const EpochCallback& on_epoch = {}) {
  std::array<bool, kNumCategories> seen{};
  for (int l : train.labels) seen[static_cast<std::size_t>(l)] = true;
  if (std::count(seen.begin(), seen.end(), true) < 2)
    throw ParameterError("encoder training needs at least two categories");
  if (cfg.epochs < 1 || cfg.batch < 1) throw ParameterError("epochs and batch must be >= 1");

  const ScopedFlushDenormals ftz;
  EncoderModel<float> model = EncoderModel<float>::init(seed);
  const AdamConfig adam{cfg.lr};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(seed, 0x1000 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch));
      const std::span<const std::size_t> idx(order.data() + start, n);
      std::vector<std::pair<int, int>> offsets(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        offsets[i] = {static_cast<int>(rng.integer(-kItemJitter, kItemJitter)),
                      static_cast<int>(rng.integer(-kItemJitter, kItemJitter))};
        labels[i] = train.labels[idx[i]];
      }
      const auto r = encoder_loss_and_grads(model, cell_batch(train, idx, offsets),
                                            std::span<const int>(labels));
      if (!std::isfinite(r.loss)) throw TrainingError("non-finite encoder loss", epoch);
      loss_sum += static_cast<double>(r.loss) * static_cast<double>(n);
      adam_step(model.params, r.grads, adam);
    }
    const double mean = loss_sum / static_cast<double>(order.size());
    report.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return model;
}

}  // namespace gazedecode
