#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "cstalk/cli.hpp"
#include "cstalk/rig.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using cstalk::read_text_file;

namespace {

struct Result {
  int code;
  std::string out, log;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, log;
  const int code = cstalk::cli::run(args, out, log);
  return {code, out.str(), log.str()};
}

fs::path scratch() {
  const auto dir = fs::temp_directory_path() / "cstalk_cli_test";
  fs::create_directories(dir);
  return dir;
}

std::string small_config() {
  const auto path = scratch() / "small.json";
  const nlohmann::json cfg = {
      {"synth", {{"clips_per_emotion", 5}, {"min_seconds", 4.0}, {"max_seconds", 4.5}}},
      {"corr", {{"layers", 1}, {"heads", 2}, {"d_model", 8}, {"ffn", 8}, {"hidden", 8}}},
      {"gen", {{"latent", 8}, {"channels", 8}, {"dilations", {1, 2}}, {"emotion_dim", 4}}},
      {"train", {{"batch", 16}, {"threads", 1}}}};
  cstalk::write_text_file(path, cfg.dump());
  return path.string();
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"fly"}).code == 2);
  auto r = cli({"gen-synth", "--out", "x", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.log.find("gen-synth") != std::string::npos);
  CHECK(cli({"eval", "--pred", "missing.csv"}).code == 2);
  CHECK(cli({"infer", "--out", "a.csv", "--emotion", "bored"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("validation errors exit with 1") {
  const auto bad = scratch() / "bad.json";
  cstalk::write_text_file(bad, "{not json");
  CHECK(cli({"gen-synth", "--config", bad.string(), "--out", (scratch() / "never").string()}).code == 1);
  const auto neg = scratch() / "neg.json";
  cstalk::write_text_file(neg, R"({"synth": {"clips_per_emotion": 0}})");
  CHECK(cli({"gen-synth", "--config", neg.string(), "--out", (scratch() / "never").string()}).code == 1);
}

TEST_CASE("end-to-end workflow through the command line") {
  const auto root = scratch();
  const auto cfg = small_config();
  const auto data = (root / "corpus").string(), again = (root / "corpus2").string();
  fs::remove_all(data);
  fs::remove_all(again);

  auto r = cli({"gen-synth", "--config", cfg, "--seed", "7", "--out", data});
  REQUIRE(r.code == 0);
  CHECK(r.log.find("\"seed\":7") != std::string::npos);
  REQUIRE(cli({"gen-synth", "--config", cfg, "--seed", "7", "--out", again}).code == 0);
  for (const auto* name : {"manifest.json", "registry.json", "basis.bin", "clips/sad_003.csv", "clips/sad_003.wav"}) {
    REQUIRE(fs::exists(fs::path(data) / name));
    CHECK(read_text_file(fs::path(data) / name) == read_text_file(fs::path(again) / name));
  }

  const auto corr = (root / "corr").string();
  r = cli({"train-corr", "--config", cfg, "--data", data, "--out", corr, "--epochs", "1", "--lr", "0.001"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("held-out accuracy") != std::string::npos);
  CHECK(fs::exists(fs::path(corr) / "corrnet.ckpt"));
  CHECK(nlohmann::json::parse(read_text_file(fs::path(corr) / "config.json"))["train"]["lr"] == 0.001);
  CHECK(cli({"train-corr", "--config", cfg, "--data", data, "--out", corr, "--ablation", "mfcc_encoder"}).code == 1);

  const auto gen = (root / "gen").string();
  r = cli({"train-gen", "--config", cfg, "--data", data, "--corr", (fs::path(corr) / "corrnet.ckpt").string(), "--out", gen,
           "--epochs", "1", "--ablation", "no_corr_supervision"});
  REQUIRE(r.code == 0);
  std::istringstream metrics(read_text_file(fs::path(gen) / "metrics.jsonl"));
  int lines = 0;
  for (std::string line; std::getline(metrics, line); ++lines) CHECK(nlohmann::json::parse(line)["L_C"] == 0.0);
  CHECK(lines > 1);
  CHECK(cli({"train-gen", "--config", cfg, "--data", data, "--corr", (fs::path(corr) / "corrnet.ckpt").string(), "--out", gen,
             "--epochs", "1", "--ablation", "logits_output"}).code == 1);

  const auto pred = (root / "pred.csv").string();
  r = cli({"infer", "--gen", (fs::path(gen) / "gennet.ckpt").string(), "--audio", (fs::path(data) / "clips/happy_001.wav").string(),
           "--emotion", "happy", "--out", pred});
  REQUIRE(r.code == 0);
  const auto gt = (fs::path(data) / "clips/happy_001.csv").string();
  const auto basis = (fs::path(data) / "basis.bin").string();
  r = cli({"eval", "--pred", gt, "--gt", gt, "--basis", basis});
  REQUIRE(r.code == 0);
  CHECK(r.out == "LVE: 0.000 mm, EVE: 0.000 mm\n");
  r = cli({"eval", "--pred", pred, "--gt", gt, "--basis", basis});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("LVE: ", 0) == 0);

  const auto heat = (root / "heat").string();
  fs::remove_all(heat);
  r = cli({"inspect-attn", "--data", data, "--corr", (fs::path(corr) / "corrnet.ckpt").string(), "--out", heat});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(heat) / "sad_004.csv"));
  CHECK(fs::exists(fs::path(heat) / "mean_sad.csv"));

  const auto emb = (root / "embed.csv").string();
  r = cli({"embed", "--data", data, "--corr", (fs::path(corr) / "corrnet.ckpt").string(), "--out", emb, "--split", "all"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("within/between") != std::string::npos);
  CHECK(read_text_file(emb).rfind("clip_id,emotion,x,y\n", 0) == 0);

  // Rig counts that disagree with the checkpoint are rejected.
  CHECK(cli({"train-gen", "--data", data, "--corr", basis, "--out", gen}).code == 1);
  fs::remove_all(root);
}
