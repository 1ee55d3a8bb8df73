#include "cstalk/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cstalk/error.hpp"
#include "cstalk/evalkit.hpp"
#include "cstalk/trainer.hpp"

namespace cstalk::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 7;
  std::string out;
  int epochs = 0;
  int batch = 0;
  double lr = 0.0;
  std::string ablation;
  std::string emotion;
  CLI::Option* seed_opt = nullptr;
};

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(read_text_file(path));
    if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

nlohmann::json section(const nlohmann::json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : nlohmann::json::object();
}

/// Flag wins over file, file over default.
std::uint64_t resolve_seed(const Common& c, const nlohmann::json& file) {
  if (c.seed_opt->count() > 0) return c.seed;
  return file.value("seed", c.seed);
}

TrainConfig resolve_train(const Common& c, const nlohmann::json& file, Stage stage) {
  nlohmann::json t = section(file, "train");
  if (c.epochs > 0) t["epochs"] = c.epochs;
  if (c.batch > 0) t["batch"] = c.batch;
  if (c.lr > 0.0) t["lr"] = c.lr;
  if (!c.ablation.empty()) t["ablation"] = c.ablation;
  TrainConfig tc = TrainConfig::from_json(t, stage);
  tc.seed = resolve_seed(c, file);
  return tc;
}

void log_resolved(std::ostream& log, const std::string& command, const nlohmann::json& resolved) {
  log << command << " resolved config: " << resolved.dump() << '\n';
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

struct Corpus {
  RigRegistry registry;
  std::vector<LoadedClip> clips;
};

Corpus load_data(const std::string& dir) {
  Corpus c;
  c.registry = RigRegistry::load(fs::path(dir) / "registry.json");
  c.clips = load_corpus(fs::path(dir) / "manifest.json", c.registry);
  return c;
}

std::vector<int> pick_split(const std::string& which, int count) {
  const Split s = split_clips(count);
  if (which == "train") return s.train;
  if (which == "all") {
    std::vector<int> all(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }
  return s.val;
}

RigRegistry registry_or_default(const std::string& path) {
  return path.empty() ? RigRegistry::make_default() : RigRegistry::load(path);
}

// ---- subcommands ----

int gen_synth(const Common& c, std::ostream& out, std::ostream& log) {
  const auto file = load_config(c.config);
  SynthConfig sc = SynthConfig::from_json(section(file, "synth"));
  sc.seed = resolve_seed(c, file);
  log_resolved(log, "gen-synth", {{"seed", sc.seed}, {"out", c.out}, {"synth", sc.to_json()}});
  const auto registry = RigRegistry::make_default();
  make_out_dir(c.out);
  const auto entries = write_corpus(generate_corpus(sc, registry), registry, sc, c.out);
  VertexBasis::make_default(registry, sc.seed).save(fs::path(c.out) / "basis.bin");
  out << "wrote " << entries.size() << " clips, registry.json, manifest.json and basis.bin to " << c.out << '\n';
  return kOk;
}

int train_corr(const Common& c, const std::string& data, std::ostream& out, std::ostream& log) {
  const auto file = load_config(c.config);
  TrainConfig tc = resolve_train(c, file, Stage::correlation);
  if (tc.ablation.no_corr_supervision || tc.ablation.mfcc_encoder)
    throw ConfigError("train-corr accepts only the logits_output ablation");
  auto corpus = load_data(data);
  CorrConfig cc = CorrConfig::from_json(section(file, "corr"));
  cc.rigs = corpus.registry.size();
  if (tc.ablation.logits_output) cc.readout = CorrReadout::logits;
  make_out_dir(c.out);
  tc.metrics_path = (fs::path(c.out) / "metrics.jsonl").string();
  const nlohmann::json resolved = {{"seed", tc.seed}, {"data", data}, {"out", c.out}, {"corr", cc.to_json()}, {"train", tc.to_json()}};
  log_resolved(log, "train-corr", resolved);
  write_text_file(fs::path(c.out) / "config.json", resolved.dump(2) + "\n");

  CorrNet net(cc, tc.seed);
  const auto result = train_correlation(net, corpus.clips, tc);
  save_checkpoint(make_checkpoint(net, corpus.registry.hash(), &result, &tc), fs::path(c.out) / "corrnet.ckpt");
  const auto split = split_clips(static_cast<int>(corpus.clips.size()));
  const auto eval = evaluate_correlation(net, corpus.clips, split.val, tc.val_stride, tc.seed, 1 << 24);
  char line[160];
  std::snprintf(line, sizeof line, "epochs %d, steps %d, held-out accuracy %.4f, random-class accuracy %.4f\n",
                result.epochs_run, result.steps, eval.accuracy, eval.random_accuracy);
  out << line;
  return kOk;
}

int train_gen(const Common& c, const std::string& data, const std::string& corr_path, const std::string& judge_path,
              std::ostream& out, std::ostream& log) {
  const auto file = load_config(c.config);
  TrainConfig tc = resolve_train(c, file, Stage::generation);
  auto corpus = load_data(data);
  const CorrNet corr = corrnet_from(load_checkpoint(corr_path), corpus.registry.hash());
  if (tc.ablation.logits_output != (corr.config().readout == CorrReadout::logits))
    throw ConfigError("the logits_output ablation needs a correlation checkpoint trained with it, and only then");
  std::optional<CorrNet> judge;
  if (!judge_path.empty()) judge.emplace(corrnet_from(load_checkpoint(judge_path), corpus.registry.hash()));
  GenConfig gc = GenConfig::from_json(section(file, "gen"));
  gc.rigs = corpus.registry.size();
  gc.freeze_encoder = !tc.ablation.mfcc_encoder;
  make_out_dir(c.out);
  tc.metrics_path = (fs::path(c.out) / "metrics.jsonl").string();
  const nlohmann::json resolved = {{"seed", tc.seed}, {"data", data}, {"corr", corr_path}, {"judge", judge_path},
                                   {"out", c.out}, {"gen", gc.to_json()}, {"train", tc.to_json()}};
  log_resolved(log, "train-gen", resolved);
  write_text_file(fs::path(c.out) / "config.json", resolved.dump(2) + "\n");

  GenNet gen(gc, tc.seed);
  const auto result = train_generation(gen, corr, corpus.clips, tc, judge ? &*judge : nullptr);
  save_checkpoint(make_checkpoint(gen, corpus.registry.hash(), &result, &tc), fs::path(c.out) / "gennet.ckpt");
  char line[160];
  std::snprintf(line, sizeof line, "epochs %d, steps %d, validation L_R %.6f, emotion match %.4f\n", result.epochs_run,
                result.steps, result.val_lr, result.val_accuracy);
  out << line;
  return kOk;
}

int infer(const Common& c, const std::string& gen_path, const std::string& audio, const std::string& registry_path,
          std::ostream& out, std::ostream& log) {
  const auto registry = registry_or_default(registry_path);
  log_resolved(log, "infer", {{"gen", gen_path}, {"audio", audio}, {"emotion", c.emotion}, {"registry", registry_path}, {"out", c.out}});
  const GenNet gen = gennet_from(load_checkpoint(gen_path), registry.hash());
  const auto emotion = *parse_emotion(c.emotion);
  RigCurveSequence seq = gen.infer_clip(load_wav(audio), emotion);
  seq.registry_hash = registry.hash();
  save_rig_curves(seq, registry, c.out);
  out << "wrote " << seq.frames() << " frames to " << c.out << '\n';
  return kOk;
}

int eval(const std::string& pred, const std::string& gt, const std::string& basis_path, const std::string& registry_path,
         std::ostream& out, std::ostream& log) {
  log_resolved(log, "eval", {{"pred", pred}, {"gt", gt}, {"basis", basis_path}, {"registry", registry_path}});
  const auto registry = registry_or_default(registry_path);
  const auto basis = VertexBasis::load(basis_path);
  const auto p = load_rig_curves(pred, registry);
  const auto g = load_rig_curves(gt, registry);
  char line[96];
  std::snprintf(line, sizeof line, "LVE: %.3f mm, EVE: %.3f mm\n", lve(p, g, basis), eve(p, g, basis));
  out << line;
  return kOk;
}

std::vector<HeatmapItem> clip_items(const CorrNet& corr, const Corpus& corpus, const std::vector<int>& which) {
  const auto feats = clip_features(corr, corpus.clips, which);
  std::vector<HeatmapItem> items;
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto& clip = corpus.clips[static_cast<std::size_t>(which[i])];
    items.push_back({clip.id, clip.emotion, feats[i]});
  }
  return items;
}

int inspect_attn(const Common& c, const std::string& data, const std::string& corr_path, const std::string& split,
                 std::ostream& out, std::ostream& log) {
  log_resolved(log, "inspect-attn", {{"data", data}, {"corr", corr_path}, {"split", split}, {"out", c.out}});
  const auto corpus = load_data(data);
  const CorrNet corr = corrnet_from(load_checkpoint(corr_path), corpus.registry.hash());
  const auto items = clip_items(corr, corpus, pick_split(split, static_cast<int>(corpus.clips.size())));
  const auto written = export_heatmap(items, corpus.registry.names(), c.out);
  out << "wrote " << written.size() << " heatmaps to " << c.out << '\n';
  return kOk;
}

int embed(const Common& c, const std::string& data, const std::string& corr_path, const std::string& split,
          std::ostream& out, std::ostream& log) {
  log_resolved(log, "embed", {{"data", data}, {"corr", corr_path}, {"split", split}, {"out", c.out}});
  const auto corpus = load_data(data);
  const CorrNet corr = corrnet_from(load_checkpoint(corr_path), corpus.registry.hash());
  const auto items = clip_items(corr, corpus, pick_split(split, static_cast<int>(corpus.clips.size())));
  std::vector<Eigen::MatrixXd> feats;
  std::vector<int> labels;
  Eigen::MatrixXd flat(static_cast<Eigen::Index>(items.size()), items.empty() ? 0 : items.front().feature.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    feats.push_back(items[i].feature);
    labels.push_back(index_of(items[i].emotion));
    flat.row(static_cast<Eigen::Index>(i)) = items[i].feature.reshaped().transpose();
  }
  const Eigen::MatrixXd pts = pca_embed(feats);
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < items.size(); ++i)
    rows.push_back({items[i].id, items[i].emotion, pts(static_cast<Eigen::Index>(i), 0), pts(static_cast<Eigen::Index>(i), 1)});
  save_embeddings(rows, c.out);
  out << "wrote " << rows.size() << " points to " << c.out << '\n';
  try {
    const auto full = cluster_distances(flat, labels), plane = cluster_distances(pts, labels);
    char line[200];
    std::snprintf(line, sizeof line, "within/between emotion distance: features %.4f/%.4f, embedding %.4f/%.4f\n",
                  full.within, full.between, plane.within, plane.between);
    out << line;
  } catch (const SizeError&) {
    // Every clip has its own emotion; there are no within-emotion pairs.
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& log) {
  CLI::App app{"Correlation-supervised speech-to-rig animation toolkit", "cstalk"};
  app.require_subcommand(1);
  Common c;
  std::string data, corr, judge, gen, audio, registry, pred, gt, basis, split = "val";

  const std::vector<std::string> ablations = {"no_corr_supervision", "logits_output", "mfcc_encoder"};
  const std::vector<std::string> emotions = {"neutral", "angry", "sad", "surprised", "happy"};
  const std::vector<std::string> splits = {"train", "val", "all"};
  auto add_common = [&](CLI::App* s, bool out_required) {
    s->add_option("--config", c.config, "JSON config file; flags win over its values")->check(CLI::ExistingFile);
    c.seed_opt = s->add_option("--seed", c.seed, "seed for all randomness");
    auto* o = s->add_option("--out", c.out, "output path");
    if (out_required) o->required();
  };
  auto add_train = [&](CLI::App* s) {
    s->add_option("--epochs", c.epochs)->check(CLI::PositiveNumber);
    s->add_option("--batch", c.batch)->check(CLI::PositiveNumber);
    s->add_option("--lr", c.lr)->check(CLI::PositiveNumber);
    s->add_option("--ablation", c.ablation)->check(CLI::IsMember(ablations));
    s->add_option("--data", data, "corpus directory from gen-synth")->required()->check(CLI::ExistingDirectory);
  };

  auto* synth = app.add_subcommand("gen-synth", "write a synthetic corpus and vertex basis");
  add_common(synth, true);

  auto* tcorr = app.add_subcommand("train-corr", "train the correlation classifier");
  add_common(tcorr, true);
  add_train(tcorr);

  auto* tgen = app.add_subcommand("train-gen", "train the generator under correlation supervision");
  add_common(tgen, true);
  add_train(tgen);
  tgen->add_option("--corr", corr, "correlation checkpoint")->required()->check(CLI::ExistingFile);
  tgen->add_option("--judge", judge, "correlation checkpoint scoring emotion match")->check(CLI::ExistingFile);

  auto* inf = app.add_subcommand("infer", "generate rig curves for a WAV file");
  add_common(inf, true);
  inf->add_option("--gen", gen, "generator checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--audio", audio, "16-bit PCM WAV")->required()->check(CLI::ExistingFile);
  inf->add_option("--emotion", c.emotion)->required()->check(CLI::IsMember(emotions));
  inf->add_option("--registry", registry, "registry JSON (default: built-in 116 rigs)")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "LVE and EVE between two rig-CSV files");
  ev->add_option("--pred", pred)->required()->check(CLI::ExistingFile);
  ev->add_option("--gt", gt)->required()->check(CLI::ExistingFile);
  ev->add_option("--basis", basis)->required()->check(CLI::ExistingFile);
  ev->add_option("--registry", registry)->check(CLI::ExistingFile);

  auto* attn = app.add_subcommand("inspect-attn", "export per-clip correlation heatmaps");
  add_common(attn, true);
  attn->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  attn->add_option("--corr", corr)->required()->check(CLI::ExistingFile);
  attn->add_option("--split", split)->check(CLI::IsMember(splits));

  auto* emb = app.add_subcommand("embed", "2-D PCA embedding of clip correlation features");
  add_common(emb, true);
  emb->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  emb->add_option("--corr", corr)->required()->check(CLI::ExistingFile);
  emb->add_option("--split", split)->check(CLI::IsMember(splits));

  std::vector<std::string> argv_store = {"cstalk"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, log);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, log);
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, log);
    log << app.help();
    return kUsage;
  }

  try {
    if (*synth) return gen_synth(c, out, log);
    if (*tcorr) return train_corr(c, data, out, log);
    if (*tgen) return train_gen(c, data, corr, judge, out, log);
    if (*inf) return infer(c, gen, audio, registry, out, log);
    if (*ev) return eval(pred, gt, basis, registry, out, log);
    if (*attn) return inspect_attn(c, data, corr, split, out, log);
    if (*emb) return embed(c, data, corr, split, out, log);
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace cstalk::cli
