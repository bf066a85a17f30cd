// gazedecode: command-line driver for the synthetic gaze-decoding pipeline.
//
//   gazedecode [--config FILE] [--seed N] [--out DIR] <command> [options]
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data or model error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "gazedecode/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gazedecode;
using nlohmann::json;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

Config load_config(const std::string& path) {
  Config cfg;
  if (path.empty()) return cfg;
  if (!fs::exists(path)) throw ConfigError("--config: no such file " + path);
  try {
    const Bytes raw = read_file(path);
    cfg = json::parse(raw.begin(), raw.end()).get<Config>();
  } catch (const json::exception& e) {
    throw ConfigError("--config " + path + ": " + e.what());
  }
  return cfg;
}

template <typename T>
void override_if(const CLI::Option* opt, const T& value, T& target) {
  if (opt != nullptr && opt->count() > 0) target = value;
}

void progress_line(const char* what, int done, int total) {
  if (done == total || done % 50 == 0) std::fprintf(stderr, "%s %d/%d\n", what, done, total);
}

LabeledImages load_split_or_config_error(const fs::path& dir, std::string_view split) {
  if (!fs::exists(dir / (std::string(split) + ".json")))
    throw ConfigError("data: missing " + std::string(split) + " split under " + dir.string() +
                      " (run gen-data)");
  return load_split(dir, split);
}

std::string session_name(const SimulateConfig& s) {
  return s.category + "_p" + std::to_string(s.participant);
}

std::string collage_stem(int j) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "collage_%03d", j);
  return buf;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const Config& cfg, ArtifactWriter& w) {
  DatasetSpec spec;
  spec.train_per_category = cfg.data.train;
  spec.val_per_category = cfg.data.val;
  spec.test_per_category = cfg.data.test;
  spec.seed = stage_seed(cfg.seed, Stage::data);
  spec.render = cfg.data.render;
  const auto manifests = gen_dataset(spec, w.out() / paths::kData);
  std::size_t n = 0;
  for (const auto& m : manifests) {
    w.record(std::string(paths::kData) + "/" + m.split + ".json");
    for (const auto& f : m.files) w.record(std::string(paths::kData) + "/" + f.path);
    n += m.files.size();
  }
  std::fprintf(stderr, "wrote %zu exemplars\n", n);
}

void cmd_train_encoder(const Config& cfg, const std::string& role, ArtifactWriter& w) {
  const fs::path data = w.out() / paths::kData;
  const LabeledImages train = load_split_or_config_error(data, "train");
  const LabeledImages val = load_split_or_config_error(data, "val");
  const LabeledImages test = load_split_or_config_error(data, "test");
  json report = json::object();
  auto run = [&](const char* name, Stage stage, const char* ckpt) {
    EncoderTrainReport r;
    const EncoderModel<float> m =
        train_encoder(train, cfg.encoder, stage_seed(cfg.seed, stage), r, [&](int e, double loss) {
          std::fprintf(stderr, "[%s] epoch %d loss %.6f\n", name, e, loss);
        });
    r.val_accuracy = encoder_accuracy(m, val);
    r.test_accuracy = encoder_accuracy(m, test);
    std::fprintf(stderr, "[%s] val %.4f test %.4f\n", name, r.val_accuracy, r.test_accuracy);
    w.write(ckpt, encode_checkpoint(m.params.values));
    report[name] = to_json(r);
  };
  if (role == "both" || role == "pipeline") run("pipeline", Stage::encoder, paths::kEncoder);
  if (role == "both" || role == "oracle") run("oracle", Stage::oracle, paths::kOracle);
  w.write_json(std::string(paths::kReports) + "/train_encoder_" + role + ".json", report);
}

void cmd_train_cvae(const Config& cfg, ArtifactWriter& w) {
  const LabeledImages train = load_split_or_config_error(w.out() / paths::kData, "train");
  CvaeTrainReport r;
  const CvaeModel<float> m =
      train_cvae(train, cfg.cvae, stage_seed(cfg.seed, Stage::cvae), r, [&](int e, double loss) {
        std::fprintf(stderr, "[cvae] epoch %d neg_elbo %.4f\n", e, loss);
      });
  w.write(paths::kCvae, encode_checkpoint(m.params.values));
  w.write_json(std::string(paths::kReports) + "/train_cvae.json", to_json(r));
}

void cmd_simulate(const Config& cfg, ArtifactWriter& w) {
  const CategoryId target = CategoryId::from_name(cfg.simulate.category);
  const std::uint64_t seed = derive_seed(stage_seed(cfg.seed, Stage::simulate), target.value(),
                                         static_cast<std::uint64_t>(cfg.simulate.participant));
  const Session s = simulate_session(target, cfg.simulate.participant, cfg.session.collages,
                                     cfg.session.n_target, cfg.gaze, cfg.data.render, seed);
  const std::string dir = std::string(paths::kSessions) + "/" + session_name(cfg.simulate);
  json index = {{"target", target.name()},
                {"participant", cfg.simulate.participant},
                {"collages", json::array()}};
  for (std::size_t j = 0; j < s.collages.size(); ++j) {
    const std::string stem = dir + "/" + collage_stem(static_cast<int>(j));
    w.write(stem + ".tnsr", encode_tnsr(s.collages[j].canvas));
    w.write_json(stem + ".json", collage_to_json(s.collages[j]));
    w.write(stem + ".jsonl", log_to_jsonl(s.logs[j]));
    w.write(stem + ".pgm", export_pgm(s.collages[j].canvas));
    index["collages"].push_back(collage_stem(static_cast<int>(j)));
  }
  w.write_json(dir + "/session.json", index);
  std::fprintf(stderr, "session %s: %zu collages\n", dir.c_str(), s.collages.size());
}

struct LoadedSession {
  std::string name;
  Session session;
};

LoadedSession load_session(const fs::path& out, const std::string& ref) {
  if (ref.empty()) throw ConfigError("decode.session: no session given");
  fs::path dir = ref;
  if (!fs::exists(dir / "session.json")) dir = out / paths::kSessions / ref;
  if (!fs::exists(dir / "session.json"))
    throw ConfigError("decode.session: no session.json under " + ref);
  const Bytes raw = read_file(dir / "session.json");
  const json index = json::parse(raw.begin(), raw.end());
  LoadedSession ls{fs::path(dir).lexically_normal().filename().string(), {}};
  if (ls.name.empty()) ls.name = fs::path(dir).parent_path().filename().string();
  ls.session.target = CategoryId::from_name(index.at("target").get<std::string>());
  ls.session.participant = index.at("participant").get<int>();
  for (const auto& stem_j : index.at("collages")) {
    const std::string stem = stem_j.get<std::string>();
    const Bytes meta = read_file(dir / (stem + ".json"));
    ls.session.collages.push_back(
        collage_from_json(json::parse(meta.begin(), meta.end()), load_tnsr(dir / (stem + ".tnsr"))));
    const Bytes log = read_file(dir / (stem + ".jsonl"));
    ls.session.logs.push_back(log_from_jsonl(std::string(log.begin(), log.end())));
  }
  if (ls.session.collages.empty()) throw EmptyInputError("session " + ref + " has no collages");
  for (const auto& l : ls.session.logs)
    if (l.fixations.empty()) throw EmptyInputError("session " + ref + " has an empty fixation log");
  return ls;
}

void cmd_decode(const Config& cfg, ArtifactWriter& w) {
  const Models models = load_models(w.out());
  const LoadedSession ls = load_session(w.out(), cfg.decode.session);
  const EncodingMode mode = parse_mode(cfg.session.mode);
  const SampleMode sample_mode = parse_sample_mode(cfg.session.sample_mode);
  // Independent of k and mode, so decodes of one session share latents.
  const std::uint64_t seed = derive_seed(stage_seed(cfg.seed, Stage::decode), fnv1a64(ls.name));
  const SessionFeatures f = session_features(models.encoder, ls.session);
  const DecodeResult d = decode_session(models, f, cfg.session, mode, cfg.fdm, seed);
  const std::string dir = std::string(paths::kDecodes) + "/" + ls.name + "_" + cfg.session.mode +
                          "_k" + k_label(cfg.session.k);
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "/sample_%03zu", i);
    w.write(dir + stem + ".pgm", export_pgm(d.images[i].pixels));
    w.write_json(dir + stem + ".json",
                 sample_sidecar(d.images[i], sample_mode, seed, static_cast<int>(i)));
  }
  w.write_json(dir + "/posterior.json",
               {{"session", ls.name},
                {"target", ls.session.target.name()},
                {"mode", cfg.session.mode},
                {"k", k_label(cfg.session.k)},
                {"posterior", posterior_to_json(d.posterior)},
                {"condition", posterior_to_json(d.condition)}});
  std::fprintf(stderr, "decoded %zu samples into %s (top-1 %s)\n", d.images.size(), dir.c_str(),
               std::string(d.posterior.argmax().name()).c_str());
}

void cmd_evaluate(const Config& cfg, ArtifactWriter& w) {
  const Models models = load_models(w.out());
  const ExperimentReport r = run_evaluate(models, cfg, [](int d, int t) {
    progress_line("session", d, t);
  });
  w.write_json(std::string(paths::kReports) + "/evaluate.json", report_to_json(r));
  std::fprintf(stderr, "overall recovery %.4f\n", r.overall_rate());
}

void cmd_ablate(const Config& cfg, ArtifactWriter& w) {
  const Models models = load_models(w.out());
  const ExperimentReport r = run_ablate(models, cfg, [](int d, int t) {
    progress_line("trial", d, t);
  });
  const std::string name = cfg.ablate.random_gaze ? "ablate_random_gaze.json" : "ablate.json";
  w.write_json(std::string(paths::kReports) + "/" + name, report_to_json(r));
  std::fprintf(stderr, "local win rate %.4f chi2 %.4f p %.3g\n", r.local_win_rate(),
               r.chi_square.statistic, r.chi_square.p_value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decode search targets from simulated gaze on synthetic garment collages"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "JSON config; flags override its values");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory")->capture_default_str();

  int n_train = 0, n_val = 0, n_test = 0;
  auto* gen = app.add_subcommand("gen-data", "render the exemplar dataset");
  auto* o_train = gen->add_option("--train", n_train, "exemplars per category (train)");
  auto* o_val = gen->add_option("--val", n_val, "exemplars per category (val)");
  auto* o_test = gen->add_option("--test", n_test, "exemplars per category (test)");

  std::string role;
  int enc_epochs = 0, cvae_epochs = 0;
  auto* tenc = app.add_subcommand("train-encoder", "train the pipeline and oracle encoders");
  auto* o_role = tenc->add_option("--role", role, "both (default), pipeline or oracle")
                     ->check(CLI::IsMember({"both", "pipeline", "oracle"}));
  auto* o_enc_epochs = tenc->add_option("--epochs", enc_epochs);
  auto* tcvae = app.add_subcommand("train-cvae", "train the conditional VAE");
  auto* o_cvae_epochs = tcvae->add_option("--epochs", cvae_epochs);

  std::string category;
  int collages = 0, participant = 0, n_target = 0;
  double p_target = 0.0, jitter = 0.0;
  auto* sim = app.add_subcommand("simulate", "build collages and simulated fixation logs");
  auto* o_category = sim->add_option("--category", category, "target category name");
  auto* o_collages = sim->add_option("--collages", collages);
  auto* o_participant = sim->add_option("--participant", participant);
  auto* o_n_target = sim->add_option("--n-target", n_target);
  auto* o_p_target = sim->add_option("--p-target", p_target);
  auto* o_jitter = sim->add_option("--jitter", jitter, "fixation position jitter sigma (px)");

  std::string session, k_str, mode, sample_mode, aggregation;
  int samples = 0;
  auto* dec = app.add_subcommand("decode", "decode a session into images and a posterior");
  auto* o_session = dec->add_option("--session", session, "session directory or name");
  std::vector<CLI::Option*> o_k, o_samples, o_mode, o_sample_mode, o_aggregation;

  int sessions = 0, trials = 0;
  bool random_gaze = false;
  auto* ev = app.add_subcommand("evaluate", "oracle recognition experiment");
  auto* o_sessions = ev->add_option("--sessions", sessions, "total sessions over 10 categories");
  auto* ab = app.add_subcommand("ablate", "local vs global encoding experiment");
  auto* o_trials = ab->add_option("--trials", trials);
  auto* o_random = ab->add_flag("--random-gaze", random_gaze, "fixate every item equally often");

  for (auto* sub : {dec, ev, ab}) {
    o_k.push_back(sub->add_option("--k", k_str, "top-k pruning: 1..9 or all"));
    o_samples.push_back(sub->add_option("--samples", samples, "decoded images per session"));
    o_sample_mode.push_back(sub->add_option("--sample-mode", sample_mode, "soft or mixture"));
    o_aggregation.push_back(
        sub->add_option("--aggregation", aggregation, "per_fixation or joint_fdm"));
  }
  o_mode.push_back(dec->add_option("--mode", mode, "local or global"));
  o_mode.push_back(ev->add_option("--mode", mode, "local or global"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const Timer timer;
  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    Config cfg = load_config(config_path);
    override_if(seed_opt, seed, cfg.seed);
    override_if(o_train, n_train, cfg.data.train);
    override_if(o_val, n_val, cfg.data.val);
    override_if(o_test, n_test, cfg.data.test);
    override_if(o_role, role, cfg.encoder_role);
    override_if(o_enc_epochs, enc_epochs, cfg.encoder.epochs);
    override_if(o_cvae_epochs, cvae_epochs, cfg.cvae.epochs);
    override_if(o_category, category, cfg.simulate.category);
    override_if(o_collages, collages, cfg.session.collages);
    override_if(o_participant, participant, cfg.simulate.participant);
    override_if(o_n_target, n_target, cfg.session.n_target);
    override_if(o_p_target, p_target, cfg.gaze.p_target);
    override_if(o_jitter, jitter, cfg.gaze.jitter_sigma);
    override_if(o_session, session, cfg.decode.session);
    override_if(o_sessions, sessions, cfg.evaluate.sessions);
    override_if(o_trials, trials, cfg.ablate.trials);
    override_if(o_random, random_gaze, cfg.ablate.random_gaze);
    for (auto* o : o_k)
      if (o->count() > 0) cfg.session.k = parse_k(k_str);
    for (auto* o : o_samples) override_if(o, samples, cfg.session.samples);
    for (auto* o : o_mode) override_if(o, mode, cfg.session.mode);
    for (auto* o : o_sample_mode) override_if(o, sample_mode, cfg.session.sample_mode);
    for (auto* o : o_aggregation) override_if(o, aggregation, cfg.session.aggregation);
    validate(cfg);
    if (command == "simulate") {
      try {
        CategoryId::from_name(cfg.simulate.category);
      } catch (const ParameterError&) {
        throw ConfigError("simulate.category: unknown category '" + cfg.simulate.category + "'");
      }
    }

    ArtifactWriter w(out_dir, command);
    std::string cfg_name = command;
    if (command == "train-encoder") cfg_name += "_" + cfg.encoder_role;
    if (command == "ablate" && cfg.ablate.random_gaze) cfg_name += "_random_gaze";
    if (command == "simulate") cfg_name += "_" + session_name(cfg.simulate);
    if (command == "decode")
      cfg_name += "_" + fs::path(cfg.decode.session).lexically_normal().filename().string() + "_" +
                  cfg.session.mode + "_k" + k_label(cfg.session.k);
    w.write_json(std::string(paths::kConfigs) + "/" + cfg_name + ".json", json(cfg));

    if (command == "gen-data") cmd_gen_data(cfg, w);
    else if (command == "train-encoder") cmd_train_encoder(cfg, cfg.encoder_role, w);
    else if (command == "train-cvae") cmd_train_cvae(cfg, w);
    else if (command == "simulate") cmd_simulate(cfg, w);
    else if (command == "decode") cmd_decode(cfg, w);
    else if (command == "evaluate") cmd_evaluate(cfg, w);
    else if (command == "ablate") cmd_ablate(cfg, w);
    w.commit();
    std::fprintf(stderr, "%s: %zu artifacts, %.1f s\n", command.c_str(), w.size(),
                 timer.seconds());
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
