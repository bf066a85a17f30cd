#pragma once

// Category-conditioned variational autoencoder.
//
//   recognition q(z | x, y):  [x, y] -> hidden (ReLU) -> (mu, log sigma^2)
//   generator   p(x | z, y):  [z, y] -> hidden (ReLU) -> pixel logits
//
// Pixels use a Bernoulli likelihood on [0,1] intensities and the latent prior
// is N(0, I). Training minimizes the negative evidence lower bound with a
// single reparameterized sample per datum.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gazedecode/categories.hpp"
#include "gazedecode/errors.hpp"
#include "gazedecode/gaze_encoder.hpp"
#include "gazedecode/layers.hpp"
#include "gazedecode/optim.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/stimuli.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

struct CvaeArch {
  std::size_t x_dim = kExemplarSize * kExemplarSize;
  std::size_t y_dim = kNumCategories;
  std::size_t hidden = 256;
  std::size_t z_dim = 16;
};

template <typename T>
T kl_diag_gauss(std::span<const T> mu, std::span<const T> log_var) {
  if (mu.size() != log_var.size()) throw DimensionError("kl_diag_gauss: length mismatch");
  T acc{0};
  for (std::size_t j = 0; j < mu.size(); ++j)
    acc += mu[j] * mu[j] + std::exp(log_var[j]) - T{1} - log_var[j];
  return T{0.5} * acc;
}

// z = mu + exp(log_var / 2) * eps
template <typename T>
std::vector<T> reparameterize(std::span<const T> mu, std::span<const T> log_var,
                              std::span<const T> eps) {
  if (mu.size() != log_var.size() || mu.size() != eps.size())
    throw DimensionError("reparameterize: length mismatch");
  std::vector<T> z(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) z[j] = mu[j] + std::exp(T{0.5} * log_var[j]) * eps[j];
  return z;
}

// dz/d(log_var) = exp(log_var / 2) * eps / 2, elementwise.
template <typename T>
std::vector<T> reparameterize_grad_log_var(std::span<const T> log_var, std::span<const T> eps) {
  std::vector<T> g(log_var.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = T{0.5} * std::exp(T{0.5} * log_var[j]) * eps[j];
  return g;
}

template <typename T>
struct CvaeModel {
  CvaeArch arch;
  ParamSet<T> params;

  static CvaeModel zeros(const CvaeArch& arch = {}) {
    CvaeModel m{arch, {}};
    auto add = [&](const std::string& name, Shape s) {
      m.params.values.emplace(name, BasicTensor<T>(std::move(s)));
    };
    add("enc.w1", {arch.x_dim + arch.y_dim, arch.hidden});
    add("enc.b1", {arch.hidden});
    add("enc.w_mu", {arch.hidden, arch.z_dim});
    add("enc.b_mu", {arch.z_dim});
    add("enc.w_lv", {arch.hidden, arch.z_dim});
    add("enc.b_lv", {arch.z_dim});
    add("dec.w1", {arch.z_dim + arch.y_dim, arch.hidden});
    add("dec.b1", {arch.hidden});
    add("dec.w2", {arch.hidden, arch.x_dim});
    add("dec.b2", {arch.x_dim});
    return m;
  }

  static CvaeModel init(std::uint64_t seed, const CvaeArch& arch = {}) {
    CvaeModel m = zeros(arch);
    Rng rng(seed, 0x43564145 /* "CVAE" */);
    auto fill = [&](const std::string& name, double std_dev) {
      for (T& w : m.params[name].data()) w = static_cast<T>(rng.normal() * std_dev);
    };
    const auto fan = [&](const std::string& name) {
      return static_cast<double>(m.params[name].dim(0));
    };
    fill("enc.w1", std::sqrt(2.0 / fan("enc.w1")));
    fill("enc.w_mu", std::sqrt(1.0 / fan("enc.w_mu")));
    fill("enc.w_lv", 0.1 * std::sqrt(1.0 / fan("enc.w_lv")));
    fill("dec.w1", std::sqrt(2.0 / fan("dec.w1")));
    fill("dec.w2", std::sqrt(1.0 / fan("dec.w2")));
    return m;
  }

  static CvaeModel from_params(TensorMap<T> values) {
    CvaeModel m;
    m.arch.x_dim = values.at("dec.w2").dim(1);
    m.arch.hidden = values.at("dec.w2").dim(0);
    m.arch.z_dim = values.at("enc.w_mu").dim(1);
    m.arch.y_dim = values.at("dec.w1").dim(0) - m.arch.z_dim;
    const CvaeModel ref = zeros(m.arch);
    for (const auto& [name, t] : ref.params.values) {
      auto it = values.find(name);
      if (it == values.end()) throw FormatError("CVAE checkpoint lacks " + name);
      require_shape(it->second.shape(), t.shape(), "CVAE parameter " + name);
    }
    m.params.values = std::move(values);
    return m;
  }

  template <typename U>
  CvaeModel<U> cast() const {
    return CvaeModel<U>{arch, params.template cast<U>()};
  }
};

namespace detail {

template <typename T>
BasicTensor<T> hconcat(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  if (b.dim(0) != n) throw DimensionError("hconcat: row count mismatch");
  BasicTensor<T> out({n, da + db});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.ptr() + i * da, a.ptr() + (i + 1) * da, out.ptr() + i * (da + db));
    std::copy(b.ptr() + i * db, b.ptr() + (i + 1) * db, out.ptr() + i * (da + db) + da);
  }
  return out;
}

}  // namespace detail

// Pixel logits of the generator for latent codes z [N, d_z] and conditions
// y [N, d_y].
template <typename T>
BasicTensor<T> decoder_logits(const CvaeModel<T>& m, const BasicTensor<T>& z,
                              const BasicTensor<T>& y) {
  const BasicTensor<T> h = activation_forward(
      linear_forward(detail::hconcat(z, y), m.params["dec.w1"], m.params["dec.b1"]),
      Activation::relu);
  return linear_forward(h, m.params["dec.w2"], m.params["dec.b2"]);
}

template <typename T>
struct ElboTerms {
  T neg_elbo{0};  // batch mean of recon + kl
  T recon{0};     // batch mean Bernoulli negative log-likelihood
  T kl{0};        // batch mean KL to N(0, I)
};

template <typename T>
struct CvaeLoss {
  ElboTerms<T> terms;
  Grads<T> grads;
};

// Negative ELBO of x [N, d_x] under condition y [N, d_y] with frozen noise
// eps [N, d_z], and (optionally) its parameter gradients.
template <typename T>
CvaeLoss<T> cvae_loss_and_grads(const CvaeModel<T>& m, const BasicTensor<T>& x,
                                const BasicTensor<T>& y, const BasicTensor<T>& eps,
                                bool want_grads = true) {
  const CvaeArch& a = m.arch;
  require_rank(x.shape(), 2, "CVAE input");
  const std::size_t n = x.dim(0);
  require_shape(x.shape(), {n, a.x_dim}, "CVAE input");
  require_shape(y.shape(), {n, a.y_dim}, "CVAE condition");
  require_shape(eps.shape(), {n, a.z_dim}, "CVAE noise");

  const BasicTensor<T> enc_in = detail::hconcat(x, y);
  const BasicTensor<T> e_pre = linear_forward(enc_in, m.params["enc.w1"], m.params["enc.b1"]);
  const BasicTensor<T> e = activation_forward(e_pre, Activation::relu);
  const BasicTensor<T> mu = linear_forward(e, m.params["enc.w_mu"], m.params["enc.b_mu"]);
  const BasicTensor<T> lv = linear_forward(e, m.params["enc.w_lv"], m.params["enc.b_lv"]);
  BasicTensor<T> z({n, a.z_dim});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(T{0.5} * lv[i]) * eps[i];
  const BasicTensor<T> dec_in = detail::hconcat(z, y);
  const BasicTensor<T> d_pre = linear_forward(dec_in, m.params["dec.w1"], m.params["dec.b1"]);
  const BasicTensor<T> d = activation_forward(d_pre, Activation::relu);
  const BasicTensor<T> logits = linear_forward(d, m.params["dec.w2"], m.params["dec.b2"]);

  CvaeLoss<T> out;
  for (std::size_t i = 0; i < n; ++i) {
    T recon{0};
    for (std::size_t j = 0; j < a.x_dim; ++j) {
      const T l = logits(i, j);
      recon += softplus(l) - x(i, j) * l;
    }
    const T kl = kl_diag_gauss(std::span<const T>(mu.ptr() + i * a.z_dim, a.z_dim),
                               std::span<const T>(lv.ptr() + i * a.z_dim, a.z_dim));
    out.terms.recon += recon;
    out.terms.kl += kl;
  }
  const T inv_n = T{1} / static_cast<T>(n);
  out.terms.recon *= inv_n;
  out.terms.kl *= inv_n;
  out.terms.neg_elbo = out.terms.recon + out.terms.kl;
  if (!want_grads) return out;

  BasicTensor<T> g_logits(logits.shape());
  for (std::size_t i = 0; i < g_logits.size(); ++i)
    g_logits[i] = (sigmoid(logits[i]) - x[i]) * inv_n;
  auto g_out = linear_backward(d, m.params["dec.w2"], g_logits);
  auto g_d_pre = activation_backward(d_pre, g_out.x, Activation::relu);
  auto g_dec1 = linear_backward(dec_in, m.params["dec.w1"], g_d_pre);

  BasicTensor<T> g_mu({n, a.z_dim}), g_lv({n, a.z_dim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < a.z_dim; ++j) {
      const std::size_t k = i * a.z_dim + j;
      const T g_z = g_dec1.x(i, j);
      const T sd = std::exp(T{0.5} * lv[k]);
      g_mu[k] = g_z + mu[k] * inv_n;
      g_lv[k] = g_z * T{0.5} * sd * eps[k] + T{0.5} * (std::exp(lv[k]) - T{1}) * inv_n;
    }
  }
  auto g_mu_head = linear_backward(e, m.params["enc.w_mu"], g_mu);
  auto g_lv_head = linear_backward(e, m.params["enc.w_lv"], g_lv);
  BasicTensor<T> g_e = g_mu_head.x;
  for (std::size_t i = 0; i < g_e.size(); ++i) g_e[i] += g_lv_head.x[i];
  auto g_e_pre = activation_backward(e_pre, g_e, Activation::relu);
  auto g_enc1 = linear_backward(enc_in, m.params["enc.w1"], g_e_pre, false);

  out.grads.emplace("dec.w2", std::move(g_out.w));
  out.grads.emplace("dec.b2", std::move(g_out.b));
  out.grads.emplace("dec.w1", std::move(g_dec1.w));
  out.grads.emplace("dec.b1", std::move(g_dec1.b));
  out.grads.emplace("enc.w_mu", std::move(g_mu_head.w));
  out.grads.emplace("enc.b_mu", std::move(g_mu_head.b));
  out.grads.emplace("enc.w_lv", std::move(g_lv_head.w));
  out.grads.emplace("enc.b_lv", std::move(g_lv_head.b));
  out.grads.emplace("enc.w1", std::move(g_enc1.w));
  out.grads.emplace("enc.b1", std::move(g_enc1.b));
  return out;
}

// Single-datum ELBO terms; x is any shape with d_x entries, y sums to one.
inline ElboTerms<float> elbo(const CvaeModel<float>& m, const Tensor& x,
                             std::span<const float> y, std::span<const float> eps) {
  const Tensor xb = x.reshaped({1, x.size()});
  const Tensor yb({1, y.size()}, std::vector<float>(y.begin(), y.end()));
  const Tensor eb({1, eps.size()}, std::vector<float>(eps.begin(), eps.end()));
  const ElboTerms<float> t = cvae_loss_and_grads(m, xb, yb, eb, false).terms;
  if (!std::isfinite(t.neg_elbo)) throw NumericError("non-finite ELBO");
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct CvaeTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_recon;
  std::vector<double> epoch_kl;
};

inline nlohmann::json to_json(const CvaeTrainReport& r) {
  return {{"epoch_neg_elbo", r.epoch_loss},
          {"epoch_recon", r.epoch_recon},
          {"epoch_kl", r.epoch_kl}};
}

inline Tensor one_hot_rows(std::span<const int> labels, std::size_t classes) {
  Tensor y({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, static_cast<std::size_t>(labels[i])) = 1.0f;
  return y;
}

inline CvaeModel<float> train_cvae(const LabeledImages& train, const TrainConfig& cfg,
                                   std::uint64_t seed, CvaeTrainReport& report,
                                   const EpochCallback& on_epoch = {}) {
  if (train.size() == 0) throw ParameterError("CVAE training set is empty");
  if (cfg.epochs < 1 || cfg.batch < 1) throw ParameterError("epochs and batch must be >= 1");
  const ScopedFlushDenormals ftz;
  CvaeModel<float> model = CvaeModel<float>::init(seed);
  const CvaeArch& a = model.arch;
  const AdamConfig adam{cfg.lr};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(seed, 0x2000 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    double loss_sum = 0.0, recon_sum = 0.0, kl_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch));
      Tensor x({n, a.x_dim}), eps({n, a.z_dim});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = order[start + i];
        std::copy(train.images.ptr() + src * a.x_dim, train.images.ptr() + (src + 1) * a.x_dim,
                  x.ptr() + i * a.x_dim);
        labels[i] = train.labels[src];
      }
      for (float& e : eps.data()) e = static_cast<float>(rng.normal());
      const auto r = cvae_loss_and_grads(model, x, one_hot_rows(labels, a.y_dim), eps);
      if (!std::isfinite(r.terms.neg_elbo)) throw TrainingError("non-finite CVAE loss", epoch);
      loss_sum += static_cast<double>(r.terms.neg_elbo) * static_cast<double>(n);
      recon_sum += static_cast<double>(r.terms.recon) * static_cast<double>(n);
      kl_sum += static_cast<double>(r.terms.kl) * static_cast<double>(n);
      adam_step(model.params, r.grads, adam);
    }
    const auto total = static_cast<double>(order.size());
    report.epoch_loss.push_back(loss_sum / total);
    report.epoch_recon.push_back(recon_sum / total);
    report.epoch_kl.push_back(kl_sum / total);
    if (on_epoch) on_epoch(epoch, loss_sum / total);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Sampling search targets

enum class SampleMode { soft, mixture };

struct GeneratedImage {
  Tensor pixels;                // [32, 32], strictly inside (0, 1)
  ClassPosterior condition;     // condition vector fed to the generator
  std::vector<float> z;
};

inline void check_condition(const ClassPosterior& c) {
  for (float p : c.probs())
    if (!std::isfinite(p) || p < 0.0f) throw ConditionError("condition has NaN or negative entries");
  if (std::abs(static_cast<double>(c.sum()) - 1.0) > 1e-5)
    throw ConditionError("condition does not sum to one");
}

// Inverse-CDF draw of a category; falls back to the last nonzero entry when
// rounding leaves u above the cumulative sum.
inline CategoryId draw_category(const ClassPosterior& p, Rng& rng) {
  const double u = rng.uniform() * static_cast<double>(p.sum());
  double cum = 0.0;
  int last = 0;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (p[c] <= 0.0f) continue;
    cum += static_cast<double>(p[c]);
    last = static_cast<int>(c);
    if (u < cum) return CategoryId(last);
  }
  return CategoryId(last);
}

inline constexpr std::uint64_t kLatentStream = 0x5A;      // z of sample i
inline constexpr std::uint64_t kMixtureStream = 0x4D49;   // category of sample i

// Draws z ~ N(0, I) per sample. soft: y = condition. mixture: y = one-hot of
// c ~ condition. Sample i uses the same z for a given seed regardless of mode
// or condition.
inline std::vector<GeneratedImage> sample_targets(const CvaeModel<float>& model,
                                                  const ClassPosterior& condition, int n,
                                                  SampleMode mode, std::uint64_t seed) {
  check_condition(condition);
  if (n < 1) throw ParameterError("sample count must be >= 1");
  const CvaeArch& a = model.arch;
  if (a.y_dim != kNumCategories) throw DimensionError("CVAE condition width must be 10");
  std::vector<GeneratedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  const float lo = std::numeric_limits<float>::min();
  const float hi = std::nextafter(1.0f, 0.0f);
  for (int i = 0; i < n; ++i) {
    Rng zr(seed, derive_seed(kLatentStream, static_cast<std::uint64_t>(i)));
    Tensor z({1, a.z_dim});
    for (float& v : z.data()) v = static_cast<float>(zr.normal());
    ClassPosterior y = condition;
    if (mode == SampleMode::mixture) {
      Rng cr(seed, derive_seed(kMixtureStream, static_cast<std::uint64_t>(i)));
      y = ClassPosterior::one_hot(draw_category(condition, cr));
    }
    const Tensor yt({1, kNumCategories}, std::vector<float>(y.probs().begin(), y.probs().end()));
    const Tensor logits = decoder_logits(model, z, yt);
    Tensor pixels({kExemplarSize, kExemplarSize});
    if (logits.size() != pixels.size()) throw DimensionError("CVAE output is not 32x32");
    for (std::size_t k = 0; k < pixels.size(); ++k)
      pixels[k] = std::clamp(sigmoid(logits[k]), lo, hi);
    out.push_back({std::move(pixels), y, z.vec()});
  }
  return out;
}

inline nlohmann::json sample_sidecar(const GeneratedImage& g, SampleMode mode, std::uint64_t seed,
                                     int index) {
  return {{"condition", g.condition.probs()},
          {"mode", mode == SampleMode::soft ? "soft" : "mixture"},
          {"seed", seed},
          {"index", index},
          {"z", g.z}};
}

}  // namespace gazedecode
