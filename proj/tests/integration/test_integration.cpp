// Properties of the fully trained pipeline. Reads the models and reports the
// acceptance run leaves in <work>/pipeline.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gazedecode/pipeline.hpp"

using namespace gazedecode;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path g_pipeline;

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

const Models& models() {
  static const Models m = load_models(g_pipeline);
  return m;
}

Config trained_config() { return read_json(g_pipeline / "config" / "evaluate.json").get<Config>(); }

std::vector<std::size_t> ranking(const ClassPosterior& p) {
  std::vector<std::size_t> order(kNumCategories);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return order;
}

}  // namespace

TEST(Training, EncoderLossDecreasesOverFirstEpochs) {
  const json r = read_json(g_pipeline / "reports" / "train_encoder_both.json");
  for (const char* role : {"pipeline", "oracle"}) {
    const auto loss = r[role]["epoch_loss"].get<std::vector<double>>();
    ASSERT_GE(loss.size(), 5u);
    for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(loss[e], loss[e - 1]) << role << " epoch " << e;
  }
}

TEST(Training, ReportedAccuracyMatchesCheckpoint) {
  const json r = read_json(g_pipeline / "reports" / "train_encoder_both.json");
  const LabeledImages test = load_split(g_pipeline / "data", "test");
  EXPECT_NEAR(encoder_accuracy(models().encoder, test), r["pipeline"]["test_accuracy"].get<double>(),
              1e-9);
  EXPECT_NEAR(encoder_accuracy(models().oracle, test), r["oracle"]["test_accuracy"].get<double>(),
              1e-9);
}

TEST(Training, OracleIsIndependentOfPipelineEncoder) {
  const ParamSet<float>& a = models().encoder.params;
  const ParamSet<float>& b = models().oracle.params;
  std::size_t equal = 0, total = 0;
  for (const auto& [name, t] : a.values) {
    const Tensor& u = b[name];
    for (std::size_t i = 0; i < t.size(); ++i) {
      equal += t[i] == u[i];
      ++total;
    }
  }
  EXPECT_LT(static_cast<double>(equal) / total, 0.01);
}

TEST(Decoding, OneHotConditionIsRecoveredByOracle) {
  int hits = 0, total = 0;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    const auto images = sample_targets(models().cvae, ClassPosterior::one_hot(CategoryId(static_cast<int>(c))),
                                       20, SampleMode::soft, 1000 + c);
    for (const auto& img : images) {
      hits += classify_exemplar(models().oracle, img.pixels).argmax() == CategoryId(static_cast<int>(c));
      ++total;
    }
  }
  const double rate = static_cast<double>(hits) / total;
  std::printf("one-hot oracle recovery %.3f over %d samples\n", rate, total);
  EXPECT_GE(rate, 0.6);
}

TEST(Decoding, PruningSharpensOracleBelief) {
  // The same sessions decoded with the unpruned posterior and with k=1; the
  // oracle should be more certain about the pruned decodes.
  const Config cfg = trained_config();
  double entropy_all = 0.0, entropy_one = 0.0;
  int n = 0;
  for (int s = 0; s < 20; ++s) {
    const Session session = simulate_session(CategoryId(s % 10), s / 10, cfg.session.collages,
                                             cfg.session.n_target, cfg.gaze, cfg.data.render, 500 + s);
    const SessionFeatures f = session_features(models().encoder, session);
    SessionConfig all = cfg.session, one = cfg.session;
    all.k = kAllClasses;
    one.k = 1;
    const auto mode = EncodingMode::local;
    const DecodeResult da = decode_session(models(), f, all, mode, cfg.fdm, 77 + s);
    const DecodeResult d1 = decode_session(models(), f, one, mode, cfg.fdm, 77 + s);
    entropy_all += oracle_vote(models().oracle, da.images).mean_entropy * da.images.size();
    entropy_one += oracle_vote(models().oracle, d1.images).mean_entropy * d1.images.size();
    n += static_cast<int>(da.images.size());
  }
  ASSERT_GE(n, 200);
  std::printf("mean oracle entropy: k=all %.4f, k=1 %.4f\n", entropy_all / n, entropy_one / n);
  EXPECT_LT(entropy_one, entropy_all);
}

TEST(Encoding, LocalBeatsGlobalTopOne) {
  const Config cfg = trained_config();
  int local = 0, global = 0;
  const int sessions = 500;
  for (int s = 0; s < sessions; ++s) {
    const CategoryId target(s % 10);
    const Session session = simulate_session(target, s / 10, cfg.session.collages,
                                             cfg.session.n_target, cfg.gaze, cfg.data.render,
                                             derive_seed(31337, static_cast<std::uint64_t>(s)));
    const SessionFeatures f = session_features(models().encoder, session);
    const auto agg = parse_aggregation(cfg.session.aggregation);
    local += encode_session(models().encoder, f.views, EncodingMode::local, agg, cfg.fdm).argmax() == target;
    global += encode_session(models().encoder, f.views, EncodingMode::global, agg, cfg.fdm).argmax() == target;
  }
  std::printf("top-1 over %d sessions: local %.3f, global %.3f\n", sessions,
              static_cast<double>(local) / sessions, static_cast<double>(global) / sessions);
  EXPECT_GT(local, global);
}

TEST(Encoding, SecondRankedTargetCapturedWithTopTwo) {
  // Single-collage sessions have a wrong top-1 often enough to collect cases
  // where the target is ranked second. A 2-class condition still leans toward
  // the top class, so recovery means the target shows up among the samples.
  Config cfg = trained_config();
  cfg.session.collages = 1;
  cfg.session.sample_mode = "mixture";
  const auto agg = parse_aggregation(cfg.session.aggregation);
  int cases = 0, k1_wrong = 0, k1_captured = 0, k2_captured = 0, k1_samples = 0, k2_samples = 0;
  for (int s = 0; s < 3000 && cases < 30; ++s) {
    const CategoryId target(s % 10);
    const Session session = simulate_session(target, s / 10, 1, cfg.session.n_target, cfg.gaze,
                                             cfg.data.render, derive_seed(4242, static_cast<std::uint64_t>(s)));
    const SessionFeatures f = session_features(models().encoder, session);
    const ClassPosterior post = encode_session(models().encoder, f.views, EncodingMode::local, agg, cfg.fdm);
    if (ranking(post)[1] != target.index()) continue;
    ++cases;
    const std::uint64_t seed = derive_seed(99, static_cast<std::uint64_t>(s));
    auto target_samples = [&](int k, CategoryId& winner) {
      SessionConfig sc = cfg.session;
      sc.k = k;
      const auto images = decode_session(models(), f, sc, EncodingMode::local, cfg.fdm, seed).images;
      winner = oracle_vote(models().oracle, images).winner;
      int n = 0;
      for (const auto& img : images) n += classify_exemplar(models().oracle, img.pixels).argmax() == target;
      return n;
    };
    CategoryId v1, v2;
    const int n1 = target_samples(1, v1), n2 = target_samples(2, v2);
    k1_wrong += v1 != target;
    k1_captured += n1 > 0;
    k2_captured += n2 > 0;
    k1_samples += n1;
    k2_samples += n2;
  }
  std::printf("second-ranked cases %d: k=1 vote wrong %d; target among samples k=1 %d, k=2 %d; "
              "target samples k=1 %d, k=2 %d\n",
              cases, k1_wrong, k1_captured, k2_captured, k1_samples, k2_samples);
  ASSERT_GE(cases, 10);
  EXPECT_GE(k1_wrong, cases * 9 / 10);
  EXPECT_GE(k2_captured, cases * 8 / 10);
  EXPECT_GT(k2_samples, 2 * k1_samples);
}

TEST(Reports, EvaluateTotalsConsistent) {
  const json r = read_json(g_pipeline / "reports" / "evaluate.json");
  int trials = 0, correct = 0;
  for (const auto& [name, t] : r["per_category"].items()) {
    trials += t["trials"].get<int>();
    correct += t["correct"].get<int>();
  }
  EXPECT_EQ(trials, r["trials"].get<int>());
  EXPECT_EQ(correct, r["correct"].get<int>());
  EXPECT_EQ(r["metadata"]["k"], "2");
  int diagonal = 0;
  for (std::size_t c = 0; c < kNumCategories; ++c) diagonal += r["confusion"]["matrix"][c][c].get<int>();
  EXPECT_EQ(diagonal, correct);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_integration WORK_DIR\n");
    return 2;
  }
  g_pipeline = fs::path(argv[1]) / "pipeline";
  if (!fs::exists(g_pipeline / "MANIFEST.json")) {
    std::fprintf(stderr, "no trained pipeline under %s\n", g_pipeline.c_str());
    return 2;
  }
  return RUN_ALL_TESTS();
}
