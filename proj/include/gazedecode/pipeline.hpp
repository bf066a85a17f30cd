#pragma once

// End-to-end orchestration: configuration, seed plumbing, simulated search
// sessions, oracle scoring of decoded images, and the two experiments
// (recognition and local-vs-global ablation).

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gazedecode/categories.hpp"
#include "gazedecode/errors.hpp"
#include "gazedecode/gaze_encoder.hpp"
#include "gazedecode/gaze_sim.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/stimuli.hpp"
#include "gazedecode/target_decoder.hpp"
#include "gazedecode/tnsr_io.hpp"

namespace gazedecode {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  int train = 500;
  int val = 100;
  int test = 100;
  RenderParams render;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, train, val, test, render)

struct SessionConfig {
  int collages = 5;
  int n_target = 2;
  std::string mode = "local";              // local | global
  std::string aggregation = "per_fixation";  // per_fixation | joint_fdm
  int k = 2;                               // 1..9, or 10 for all
  int samples = 10;
  std::string sample_mode = "soft";        // soft | mixture
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SessionConfig, collages, n_target, mode,
                                                aggregation, k, samples, sample_mode)

struct SimulateConfig {
  std::string category = "Dress";
  int participant = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SimulateConfig, category, participant)

struct DecodeConfig {
  std::string session;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecodeConfig, session)

struct EvaluateConfig {
  int sessions = 500;  // spread evenly over the 10 categories
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvaluateConfig, sessions)

struct AblateConfig {
  int trials = 500;
  bool random_gaze = false;  // every item equally likely to be fixated
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblateConfig, trials, random_gaze)

struct Config {
  std::uint64_t seed = 0;
  DataConfig data;
  TrainConfig encoder{30, 64, 1e-3};
  std::string encoder_role = "both";  // both | pipeline | oracle
  TrainConfig cvae{50, 64, 1e-3};
  SearchParams gaze;
  // Splats wide enough to cover a fixated item; quarter-cell splats only see
  // the garment interior, which the GAP-trained head cannot classify.
  FdmParams fdm{32, 32, 20.0, false, true};
  SessionConfig session;
  SimulateConfig simulate;
  DecodeConfig decode;
  EvaluateConfig evaluate;
  AblateConfig ablate;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Config, seed, data, encoder, encoder_role, cvae, gaze, fdm,
                                                session, simulate, decode, evaluate, ablate)

inline EncodingMode parse_mode(const std::string& s) {
  if (s == "local") return EncodingMode::local;
  if (s == "global") return EncodingMode::global;
  throw ConfigError("session.mode: expected local|global, got '" + s + "'");
}

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "per_fixation") return Aggregation::per_fixation;
  if (s == "joint_fdm") return Aggregation::joint_fdm;
  throw ConfigError("session.aggregation: expected per_fixation|joint_fdm, got '" + s + "'");
}

inline SampleMode parse_sample_mode(const std::string& s) {
  if (s == "soft") return SampleMode::soft;
  if (s == "mixture") return SampleMode::mixture;
  throw ConfigError("session.sample_mode: expected soft|mixture, got '" + s + "'");
}

inline std::string k_label(int k) { return k == kAllClasses ? "all" : std::to_string(k); }

inline int parse_k(const std::string& s) {
  if (s == "all") return kAllClasses;
  try {
    std::size_t used = 0;
    const int k = std::stoi(s, &used);
    if (used == s.size() && k >= 1 && k <= kAllClasses) return k;
  } catch (const std::exception&) {
  }
  throw ConfigError("session.k: expected 1..10 or 'all', got '" + s + "'");
}

inline void validate(const Config& c) {
  auto need = [](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw ConfigError(key + ": " + msg);
  };
  need(c.data.train >= 1 && c.data.val >= 1 && c.data.test >= 1, "data", "counts must be >= 1");
  need(c.encoder.epochs >= 1 && c.encoder.batch >= 1 && c.encoder.lr > 0, "encoder",
       "epochs, batch and lr must be positive");
  need(c.cvae.epochs >= 1 && c.cvae.batch >= 1 && c.cvae.lr > 0, "cvae",
       "epochs, batch and lr must be positive");
  need(c.gaze.n_fix >= 1, "gaze.n_fix", "must be >= 1");
  need(c.gaze.p_target >= 0 && c.gaze.p_target <= 1, "gaze.p_target", "must be in [0,1]");
  need(c.gaze.jitter_sigma >= 0, "gaze.jitter_sigma", "must be >= 0");
  need(c.fdm.sigma > 0, "fdm.sigma", "must be positive");
  need(c.session.collages >= 1, "session.collages", "must be >= 1");
  need(c.session.n_target >= 1 && c.session.n_target <= 16, "session.n_target", "must be in [1,16]");
  need(c.session.k >= 1 && c.session.k <= kAllClasses, "session.k", "must be in [1,10]");
  need(c.session.samples >= 1, "session.samples", "must be >= 1");
  need(c.encoder_role == "both" || c.encoder_role == "pipeline" || c.encoder_role == "oracle",
       "encoder_role", "expected both|pipeline|oracle");
  parse_mode(c.session.mode);
  parse_aggregation(c.session.aggregation);
  parse_sample_mode(c.session.sample_mode);
  need(c.ablate.trials >= 1, "ablate.trials", "must be >= 1");
  need(c.evaluate.sessions >= 1, "evaluate.sessions", "must be >= 1");
}

// ---------------------------------------------------------------------------
// Seed plumbing: every stage draws from its own stream of the master seed.

enum class Stage : std::uint64_t {
  data = 1,
  encoder = 2,
  oracle = 3,
  cvae = 4,
  simulate = 5,
  decode = 6,
  evaluate = 7,
  ablate = 8,
};

inline std::uint64_t stage_seed(std::uint64_t master, Stage stage) {
  return derive_seed(master, static_cast<std::uint64_t>(stage));
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------
// Simulated sessions

struct Session {
  CategoryId target;
  int participant = 0;
  std::vector<Collage> collages;
  std::vector<FixationLog> logs;
};

// p_target giving every item the same fixation probability.
inline double uninformative_p_target(int n_target) {
  return static_cast<double>(n_target) / static_cast<double>(kItemsPerCollage);
}

inline Session simulate_session(CategoryId target, int participant, int n_collages, int n_target,
                                const SearchParams& gaze, const RenderParams& render,
                                std::uint64_t seed) {
  Session s{target, participant, {}, {}};
  for (int j = 0; j < n_collages; ++j) {
    const auto uj = static_cast<std::uint64_t>(j);
    s.collages.push_back(build_collage(target, n_target, derive_seed(seed, uj, 0), render));
    char ref[32];
    std::snprintf(ref, sizeof(ref), "collage_%03d", j);
    s.logs.push_back(simulate_search(s.collages.back(), gaze, derive_seed(seed, uj, 1),
                                     participant, ref));
  }
  return s;
}

struct SessionFeatures {
  std::vector<FeatureMap> maps;
  std::vector<StimulusView> views;
};

inline SessionFeatures session_features(const EncoderModel<float>& model, const Session& s) {
  SessionFeatures f;
  f.maps.reserve(s.collages.size());
  for (const auto& c : s.collages) f.maps.push_back(extract_features(model, c.canvas));
  for (std::size_t i = 0; i < s.collages.size(); ++i) f.views.push_back({&f.maps[i], &s.logs[i]});
  return f;
}

// ---------------------------------------------------------------------------
// Oracle scoring

struct OracleVote {
  CategoryId winner;
  std::array<int, kNumCategories> votes{};
  std::array<double, kNumCategories> mean_probs{};
  double mean_entropy = 0.0;
};

// Majority vote of the oracle's top-1 over the images; ties go to the larger
// mean oracle probability, then to the lowest id.
inline OracleVote oracle_vote(const EncoderModel<float>& oracle,
                              std::span<const GeneratedImage> images) {
  if (images.empty()) throw EmptyInputError("no images to score");
  OracleVote v;
  for (const auto& img : images) {
    const ClassPosterior p = classify_exemplar(oracle, img.pixels);
    ++v.votes[p.argmax().index()];
    for (std::size_t c = 0; c < kNumCategories; ++c) v.mean_probs[c] += p[c];
    v.mean_entropy += p.entropy();
  }
  const auto n = static_cast<double>(images.size());
  for (double& m : v.mean_probs) m /= n;
  v.mean_entropy /= n;
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumCategories; ++c) {
    if (v.votes[c] > v.votes[best] ||
        (v.votes[c] == v.votes[best] && v.mean_probs[c] > v.mean_probs[best]))
      best = c;
  }
  v.winner = CategoryId(static_cast<int>(best));
  return v;
}

// ---------------------------------------------------------------------------
// Statistics

// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi_square_p_value_1dof(double chi2) {
  if (chi2 <= 0.0) return 1.0;
  return std::erfc(std::sqrt(chi2 / 2.0));
}

struct ChiSquare {
  double statistic = 0.0;
  double p_value = 1.0;
  int dof = 1;
};

// Goodness of fit of two observed counts against an even split.
inline ChiSquare chi_square_even_split(double a, double b) {
  const double expected = (a + b) / 2.0;
  if (!(expected > 0.0)) return {};
  const double stat =
      (a - expected) * (a - expected) / expected + (b - expected) * (b - expected) / expected;
  return {stat, chi_square_p_value_1dof(stat), 1};
}

// ---------------------------------------------------------------------------
// Models bundle

struct Models {
  EncoderModel<float> encoder;
  EncoderModel<float> oracle;
  CvaeModel<float> cvae;
};

struct DecodeResult {
  ClassPosterior posterior;  // session posterior before pruning
  ClassPosterior condition;  // after pruning
  std::vector<GeneratedImage> images;
};

inline DecodeResult decode_session(const Models& models, const SessionFeatures& features,
                                   const SessionConfig& cfg, EncodingMode mode,
                                   const FdmParams& fdm, std::uint64_t sample_seed) {
  DecodeResult r;
  r.posterior = encode_session(models.encoder, features.views, mode,
                               parse_aggregation(cfg.aggregation), fdm);
  r.condition = prune_topk(r.posterior, cfg.k);
  r.images = sample_targets(models.cvae, r.condition, cfg.samples,
                            parse_sample_mode(cfg.sample_mode), sample_seed);
  return r;
}

// ---------------------------------------------------------------------------
// Experiment report

struct CategoryTally {
  int trials = 0;
  int correct = 0;
  double rate() const { return trials ? static_cast<double>(correct) / trials : 0.0; }
};

struct ExperimentReport {
  std::string kind;  // "evaluate" | "ablate"
  std::array<CategoryTally, kNumCategories> per_category{};
  std::array<std::array<int, kNumCategories>, kNumCategories> confusion{};  // [true][voted]
  int trials = 0;
  int correct = 0;
  // Ablation only.
  std::array<CategoryTally, kNumCategories> global_per_category{};
  int local_wins = 0;
  int global_wins = 0;
  int ties = 0;
  ChiSquare chi_square;
  std::map<std::string, nlohmann::json> metadata;

  double overall_rate() const { return trials ? static_cast<double>(correct) / trials : 0.0; }
  double local_points() const { return local_wins + 0.5 * ties; }
  double global_points() const { return global_wins + 0.5 * ties; }
  double local_win_rate() const { return trials ? local_points() / trials : 0.0; }
};

inline nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json names = nlohmann::json::array();
  for (auto n : kCategoryNames) names.push_back(std::string(n));
  auto tallies = [&](const std::array<CategoryTally, kNumCategories>& t) {
    nlohmann::json out = nlohmann::json::object();
    for (std::size_t c = 0; c < kNumCategories; ++c)
      out[std::string(kCategoryNames[c])] = {
          {"trials", t[c].trials}, {"correct", t[c].correct}, {"rate", t[c].rate()}};
    return out;
  };
  nlohmann::json j = {
      {"kind", r.kind},
      {"trials", r.trials},
      {"correct", r.correct},
      {"overall_rate", r.overall_rate()},
      {"per_category", tallies(r.per_category)},
      {"confusion", {{"labels", names}, {"matrix", r.confusion}}},
      {"metadata", r.metadata},
  };
  if (r.kind == "ablate") {
    j["global_per_category"] = tallies(r.global_per_category);
    j["local_vs_global"] = {{"local_wins", r.local_wins},
                            {"global_wins", r.global_wins},
                            {"ties", r.ties},
                            {"local_points", r.local_points()},
                            {"global_points", r.global_points()},
                            {"local_win_rate", r.local_win_rate()},
                            {"chi_square", r.chi_square.statistic},
                            {"p_value", r.chi_square.p_value},
                            {"dof", r.chi_square.dof}};
  }
  return j;
}

using ProgressFn = std::function<void(int done, int total)>;

// Recognition analogue: per session, decode with the configured k, let the
// oracle vote over the samples, and compare the vote to the true target.
inline ExperimentReport run_evaluate(const Models& models, const Config& cfg,
                                     const ProgressFn& progress = {}) {
  const int total = cfg.evaluate.sessions;
  std::array<int, kNumCategories> planned{};
  for (int s = 0; s < total; ++s) ++planned[static_cast<std::size_t>(s) % kNumCategories];
  for (std::size_t c = 0; c < kNumCategories; ++c)
    if (planned[c] == 0)
      throw CoverageError("category " + std::string(kCategoryNames[c]) + " has zero sessions");

  const EncodingMode mode = parse_mode(cfg.session.mode);
  const std::uint64_t base = stage_seed(cfg.seed, Stage::evaluate);
  ExperimentReport r;
  r.kind = "evaluate";
  for (int s = 0; s < total; ++s) {
    const CategoryId target(s % static_cast<int>(kNumCategories));
    const int participant = s / static_cast<int>(kNumCategories);
    const std::uint64_t seed = derive_seed(base, static_cast<std::uint64_t>(s));
    const Session session = simulate_session(target, participant, cfg.session.collages,
                                             cfg.session.n_target, cfg.gaze, cfg.data.render,
                                             derive_seed(seed, 0));
    const SessionFeatures f = session_features(models.encoder, session);
    const DecodeResult d = decode_session(models, f, cfg.session, mode, cfg.fdm, derive_seed(seed, 1));
    const OracleVote vote = oracle_vote(models.oracle, d.images);
    auto& tally = r.per_category[target.index()];
    ++tally.trials;
    ++r.trials;
    ++r.confusion[target.index()][vote.winner.index()];
    if (vote.winner == target) {
      ++tally.correct;
      ++r.correct;
    }
    if (progress) progress(s + 1, total);
  }
  r.metadata = {{"command", "evaluate"}, {"seed", cfg.seed}, {"sessions", total},
                {"k", k_label(cfg.session.k)}, {"mode", cfg.session.mode},
                {"samples_per_session", cfg.session.samples}, {"version", kVersion}};
  return r;
}

// Local-vs-global analogue: the same session is decoded in both modes with
// identical latent draws; a mode scores when its oracle vote hits the target,
// ties (both or neither) give half a point each.
inline ExperimentReport run_ablate(const Models& models, const Config& cfg,
                                   const ProgressFn& progress = {}) {
  if (cfg.ablate.trials < 1) throw ConfigError("ablate.trials: must be >= 1");
  SearchParams gaze = cfg.gaze;
  if (cfg.ablate.random_gaze) gaze.p_target = uninformative_p_target(cfg.session.n_target);
  const std::uint64_t base =
      derive_seed(stage_seed(cfg.seed, Stage::ablate), cfg.ablate.random_gaze ? 1 : 0);
  ExperimentReport r;
  r.kind = "ablate";
  for (int t = 0; t < cfg.ablate.trials; ++t) {
    const CategoryId target(t % static_cast<int>(kNumCategories));
    const std::uint64_t seed = derive_seed(base, static_cast<std::uint64_t>(t));
    const Session session =
        simulate_session(target, t / static_cast<int>(kNumCategories), cfg.session.collages,
                         cfg.session.n_target, gaze, cfg.data.render, derive_seed(seed, 0));
    const SessionFeatures f = session_features(models.encoder, session);
    const std::uint64_t sample_seed = derive_seed(seed, 1);
    const DecodeResult local =
        decode_session(models, f, cfg.session, EncodingMode::local, cfg.fdm, sample_seed);
    const DecodeResult global =
        decode_session(models, f, cfg.session, EncodingMode::global, cfg.fdm, sample_seed);
    const OracleVote local_vote = oracle_vote(models.oracle, local.images);
    const bool local_hit = local_vote.winner == target;
    const bool global_hit = oracle_vote(models.oracle, global.images).winner == target;
    ++r.trials;
    ++r.confusion[target.index()][local_vote.winner.index()];
    ++r.per_category[target.index()].trials;
    ++r.global_per_category[target.index()].trials;
    if (local_hit) {
      ++r.correct;
      ++r.per_category[target.index()].correct;
    }
    if (global_hit) ++r.global_per_category[target.index()].correct;
    if (local_hit == global_hit)
      ++r.ties;
    else if (local_hit)
      ++r.local_wins;
    else
      ++r.global_wins;
    if (progress) progress(t + 1, cfg.ablate.trials);
  }
  r.chi_square = chi_square_even_split(r.local_points(), r.global_points());
  r.metadata = {{"command", "ablate"}, {"seed", cfg.seed}, {"trials", cfg.ablate.trials},
                {"k", k_label(cfg.session.k)}, {"random_gaze", cfg.ablate.random_gaze},
                {"p_target", gaze.p_target}, {"samples_per_session", cfg.session.samples},
                {"version", kVersion}};
  return r;
}

// ---------------------------------------------------------------------------
// Artifact tracking: every file a command writes is indexed in
// <out>/MANIFEST.json with its size and FNV-1a 64 hash.

class ArtifactWriter {
 public:
  ArtifactWriter(std::filesystem::path out, std::string command)
      : out_(std::move(out)), command_(std::move(command)) {}

  const std::filesystem::path& out() const { return out_; }

  void write(const std::string& rel, const Bytes& bytes) {
    write_file(out_ / rel, bytes);
    entries_[rel] = {{"command", command_}, {"bytes", bytes.size()},
                     {"fnv1a64", hex(fnv1a64(bytes))}};
  }
  void write(const std::string& rel, const std::string& text) {
    write(rel, Bytes(text.begin(), text.end()));
  }
  void write_json(const std::string& rel, const nlohmann::json& j) { write(rel, dump_json(j)); }

  // Registers files produced elsewhere (e.g. by gen_dataset).
  void record(const std::string& rel) {
    const Bytes b = read_file(out_ / rel);
    entries_[rel] = {{"command", command_}, {"bytes", b.size()}, {"fnv1a64", hex(fnv1a64(b))}};
  }

  void commit() {
    const auto path = out_ / "MANIFEST.json";
    nlohmann::json m = {{"artifacts", nlohmann::json::object()}};
    if (std::filesystem::exists(path)) {
      try {
        m = nlohmann::json::parse(read_file(path));
      } catch (const nlohmann::json::exception&) {
        m = {{"artifacts", nlohmann::json::object()}};
      }
    }
    for (const auto& [rel, e] : entries_) m["artifacts"][rel] = e;
    write_file(path, dump_json(m));
  }

  std::size_t size() const { return entries_.size(); }

 private:
  static std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

  std::filesystem::path out_;
  std::string command_;
  std::map<std::string, nlohmann::json> entries_;
};

// Standard artifact locations under --out.
namespace paths {
inline constexpr const char* kData = "data";
inline constexpr const char* kEncoder = "models/encoder.ckpt";
inline constexpr const char* kOracle = "models/oracle.ckpt";
inline constexpr const char* kCvae = "models/cvae.ckpt";
inline constexpr const char* kSessions = "sessions";
inline constexpr const char* kDecodes = "decodes";
inline constexpr const char* kReports = "reports";
inline constexpr const char* kConfigs = "config";
}  // namespace paths

inline EncoderModel<float> load_encoder(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ConfigError("missing encoder checkpoint " + path.string() + " (run train-encoder)");
  EncoderModel<float> m = EncoderModel<float>::zeros();
  TensorMap<float> loaded = load_checkpoint(path);
  for (auto& [name, t] : m.params.values) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("encoder checkpoint lacks " + name);
    require_shape(it->second.shape(), t.shape(), "encoder parameter " + name);
    t = std::move(it->second);
  }
  return m;
}

inline CvaeModel<float> load_cvae(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ConfigError("missing CVAE checkpoint " + path.string() + " (run train-cvae)");
  return CvaeModel<float>::from_params(load_checkpoint(path));
}

inline Models load_models(const std::filesystem::path& out) {
  return {load_encoder(out / paths::kEncoder), load_encoder(out / paths::kOracle),
          load_cvae(out / paths::kCvae)};
}

}  // namespace gazedecode
