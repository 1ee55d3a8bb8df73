#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cstalk/corrnet.hpp"
#include "cstalk/genet.hpp"
#include "cstalk/synthgen.hpp"
#include "json.hpp"

namespace cstalk {

enum class Stage { correlation, generation };

struct Ablations {
  bool no_corr_supervision = false;  // L_G = L_R
  bool logits_output = false;        // classifier reads the token-mean encoder output
  bool mfcc_encoder = false;         // encoder trained instead of frozen
};

struct TrainConfig {
  Stage stage = Stage::correlation;
  int batch = 64;
  double lr = 0.0;  // 0 selects the stage default
  int epochs = 100;
  std::uint64_t seed = 7;
  Ablations ablation;
  double lambda_c = 1.0;        // weight on L_C
  int patience = 10;            // epochs without validation improvement (correlation stage)
  double target_accuracy = 0.0; // stop once validation and random-class accuracy reach this (0: off)
  double subsample = 1.0;       // fraction of training windows drawn per epoch
  int val_stride = 1;           // keep every n-th validation window
  int max_steps = 0;            // 0: unlimited
  double stop_below_lr = 0.0;   // generation: stop once an epoch's mean L_R is below this
  int threads = 0;              // 0: CSTALK_THREADS or hardware concurrency
  std::string metrics_path;     // JSONL stream, optional

  static constexpr double kCorrelationLr = 1e-5;
  static constexpr double kGenerationLr = 1e-6;

  double learning_rate() const { return lr > 0.0 ? lr : stage == Stage::correlation ? kCorrelationLr : kGenerationLr; }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, Stage stage);
};

Ablations parse_ablation(const std::string& name);

struct TrainResult {
  nlohmann::json metrics = nlohmann::json::array();
  int epochs_run = 0;
  int steps = 0;
  double best_val_loss = 0.0;
  double val_accuracy = 0.0;  // correlation: classification accuracy; generation: emotion-match rate
  double val_lr = 0.0;        // generation only
  std::string rng_state;
};

/// Clip indices with i % 5 == 4 are held out.
struct Split {
  std::vector<int> train;
  std::vector<int> val;
};
Split split_clips(int count);

/// Worker count from CSTALK_THREADS, else hardware concurrency (at least 1).
int default_threads();

/// Windows of the correlation task: emotion windows cut from clips plus an
/// equal number of random windows per class. Throws DataError when emotion
/// classes differ in window count by more than 10%.
struct CorrSample {
  int clip = -1;  // -1 for random windows
  int start = 0;  // start frame, or random window index
  Emotion label = Emotion::neutral;
};
std::vector<CorrSample> correlation_samples(const std::vector<LoadedClip>& clips, const std::vector<int>& which,
                                            int stride, int random_offset);
Eigen::MatrixXd sample_window(const std::vector<LoadedClip>& clips, const CorrSample& s, std::uint64_t random_seed);

/// Stage 1: trains `net` on cross-entropy over 6 classes with Adam. Early
/// stopping restores the best validation parameters. Parameters end on the
/// float32 grid so checkpoints reproduce them exactly.
TrainResult train_correlation(CorrNet& net, const std::vector<LoadedClip>& clips, const TrainConfig& cfg);

/// Held-out evaluation of a trained correlation model.
struct CorrEval {
  double loss = 0.0;
  double accuracy = 0.0;
  double random_accuracy = 0.0;  // share of random windows labeled random
};
CorrEval evaluate_correlation(const CorrNet& net, const std::vector<LoadedClip>& clips, const std::vector<int>& which,
                              int stride, std::uint64_t random_seed, int random_offset);

/// One generation window: clip and window index k (start frame 5k).
struct GenSample {
  int clip = 0;
  int k = 0;
};
std::vector<GenSample> generation_samples(const std::vector<LoadedClip>& clips, const std::vector<int>& which, int stride);
Eigen::MatrixXd generation_features(const LoadedClip& clip, int k);
Eigen::MatrixXd generation_target(const LoadedClip& clip, int k);  // R x 96

/// Stage 2: L_G = L_R + lambda * L_C with `supervisor` frozen (and the encoder
/// unless the mfcc_encoder ablation is set). Throws CompatibilityError when
/// the models disagree on rigs or frames, StateError if a frozen tensor moved.
/// `judge` (default: supervisor) scores the emotion-match rate on validation.
TrainResult train_generation(GenNet& gen, const CorrNet& supervisor, const std::vector<LoadedClip>& clips,
                             const TrainConfig& cfg, const CorrNet* judge = nullptr);

struct GenEval {
  double lr = 0.0;          // mean L_R
  double match_rate = 0.0;  // judge(generated) == target emotion
  int windows = 0;
};
/// Evaluates windows of the given clips. When `visit` is set it receives each
/// (sample, generated R x 96, target R x 96).
GenEval evaluate_generation(const GenNet& gen, const CorrNet& judge, const std::vector<LoadedClip>& clips,
                            const std::vector<GenSample>& samples,
                            const std::function<void(const GenSample&, const Eigen::MatrixXd&, const Eigen::MatrixXd&)>& visit = {});

/// Per-dimension mean and standard deviation of window features.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> feature_stats(const std::vector<LoadedClip>& clips,
                                                          const std::vector<GenSample>& samples);

/// Per clip, the correlation feature averaged over the clip's 96-frame windows.
std::vector<Eigen::MatrixXd> clip_features(const CorrNet& net, const std::vector<LoadedClip>& clips,
                                           const std::vector<int>& which);

// ---- checkpoints ----

struct ModelCheckpoint {
  nlohmann::json header = nlohmann::json::object();  // kind, config, registry_hash, train, rng_state, metrics
  ParamSet params;
};

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
std::string encode_checkpoint(const ModelCheckpoint& ckpt);
/// Throws FormatError (with byte offset) / VersionError; nothing is returned
/// on failure.
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);
ModelCheckpoint decode_checkpoint(const std::string& bytes);

ModelCheckpoint make_checkpoint(const CorrNet& net, std::uint64_t registry_hash, const TrainResult* run = nullptr,
                                const TrainConfig* cfg = nullptr);
ModelCheckpoint make_checkpoint(const GenNet& net, std::uint64_t registry_hash, const TrainResult* run = nullptr,
                                const TrainConfig* cfg = nullptr);
/// Throws CompatibilityError when the checkpoint holds another model kind or,
/// if `registry_hash` is nonzero, was trained against another registry.
CorrNet corrnet_from(const ModelCheckpoint& ckpt, std::uint64_t registry_hash = 0);
GenNet gennet_from(const ModelCheckpoint& ckpt, std::uint64_t registry_hash = 0);

/// Appends one JSON object per line.
void write_metrics_jsonl(const nlohmann::json& lines, const std::filesystem::path& path);

}  // namespace cstalk
