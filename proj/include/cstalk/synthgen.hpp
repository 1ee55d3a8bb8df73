#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cstalk/audio.hpp"
#include "cstalk/emotion.hpp"
#include "cstalk/rig.hpp"
#include "json.hpp"

namespace cstalk {

struct SynthConfig {
  int emotions = kNumEmotions;
  int clips_per_emotion = 100;
  double min_seconds = 4.0;
  double max_seconds = 9.0;
  int factors = 8;
  double noise_sigma = 0.02;
  double noise_smooth_frames = 3.0;  // std of the Gaussian kernel smoothing the noise
  double latent_rms = 0.5;           // per-factor RMS of z over a clip
  double modulation = 0.3;           // audio envelope is 1 + modulation * z
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Per-emotion mixing matrices (R x k, unit columns). Lip and "other" rigs
/// share a common pattern across emotions; eye and forehead rigs are mostly
/// emotion-specific.
std::vector<Eigen::MatrixXd> mixing_matrices(const SynthConfig& cfg, const RigRegistry& registry);

/// Carrier frequency of factor j: 200 Hz to 3000 Hz, log spaced.
double factor_frequency(int j, int factors);

/// Smallest principal angle (degrees) between the column spaces of a and b.
double principal_angle_deg(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct SynthClip {
  std::string id;
  Emotion emotion = Emotion::neutral;
  AudioSignal audio;     // on the PCM16 grid
  RigCurveSequence rigs; // on the 6-decimal grid
  Eigen::MatrixXd latent; // k x T factor signals z(t)
};

/// Clip `index` of the corpus (emotion = index / clips_per_emotion). Each clip
/// has its own RNG stream, so clips can be generated in any order.
SynthClip generate_clip(const SynthConfig& cfg, const RigRegistry& registry,
                        const std::vector<Eigen::MatrixXd>& mixing, int index);

std::vector<SynthClip> generate_corpus(const SynthConfig& cfg, const RigRegistry& registry);

/// Uniform [-1, 1] rig windows smoothed with a 3-frame moving average,
/// labeled random. Window i depends only on (seed, i).
RigWindow random_window(int rigs, std::uint64_t seed, int index, int frames = kWindowFrames);
std::vector<RigWindow> gen_random_windows(int count, std::uint64_t seed, int rigs = kDefaultRigCount);

struct ManifestEntry {
  std::string clip_id;
  std::string rig_csv;  // relative to the manifest
  std::string wav;
  Emotion emotion = Emotion::neutral;
};

/// Top-level JSON array of {clip_id, rig_csv, wav, emotion}.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

/// Writes registry.json, manifest.json, synth.json and clips/<id>.{csv,wav}.
std::vector<ManifestEntry> write_corpus(const std::vector<SynthClip>& clips, const RigRegistry& registry,
                                        const SynthConfig& cfg, const std::filesystem::path& dir);

struct LoadedClip {
  std::string id;
  Emotion emotion = Emotion::neutral;
  AudioSignal audio;
  RigCurveSequence rigs;
};

/// Moves generated clips into the loaded-clip form the trainer consumes.
std::vector<LoadedClip> to_loaded(std::vector<SynthClip>&& clips);

/// Loads every clip listed in a manifest. Rig files are read against `registry`.
std::vector<LoadedClip> load_corpus(const std::filesystem::path& manifest, const RigRegistry& registry);

/// Deterministic 64-bit mix of a seed and a stream index.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cstalk
