#pragma once

#include <cstdint>
#include <vector>

#include "cstalk/audio.hpp"
#include "cstalk/emotion.hpp"
#include "cstalk/ops.hpp"
#include "cstalk/optim.hpp"
#include "cstalk/rig.hpp"
#include "json.hpp"

namespace cstalk {

enum class EncoderKind {
  mfcc_tcn,     // two dilated conv layers over MFCC frames
  precomputed,  // linear projection of imported features
};

struct GenConfig {
  int rigs = 116;
  int frames = 96;
  int feature_dim = 39;
  EncoderKind encoder = EncoderKind::mfcc_tcn;
  int latent = 64;        // encoder output channels
  int channels = 128;     // decoder width
  int kernel = 3;
  std::vector<int> dilations = {1, 2, 4, 8, 16, 32};
  int emotion_dim = 64;
  bool freeze_encoder = true;

  /// Sum of (k - 1) * d + 1 over decoder layers.
  int receptive_field() const;
  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

/// Speech-to-rig generator: encoder, residual TCN decoder with an emotion
/// embedding added to every layer input, and a tanh output head.
class GenNet {
 public:
  GenNet() = default;
  GenNet(GenConfig cfg, std::uint64_t seed);
  /// Adopts existing parameters; throws CompatibilityError on mismatch.
  GenNet(GenConfig cfg, ParamSet params);

  const GenConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  bool empty() const { return params_.size() == 0; }

  /// Per-dimension feature normalization applied before the encoder. Stored as
  /// non-trainable parameters so checkpoints carry it.
  void set_feature_stats(const ad::Matrix& mean, const ad::Matrix& stddev);
  /// True for encoder tensors (frozen unless the config says otherwise).
  bool is_encoder_param(std::size_t slot) const;

  /// features: frames x feature_dim -> frames x latent.
  ad::Var encode(const ad::Matrix& features, const ParamSet& p) const;
  /// latent: frames x latent -> frames x rigs in (-1, 1). Throws DomainError for
  /// the random class.
  ad::Var decode(const ad::Var& latent, Emotion emotion, const ParamSet& p) const;
  ad::Var forward(const ad::Matrix& features, Emotion emotion, const ParamSet& p) const {
    return decode(encode(features, p), emotion, p);
  }

  /// rigs x frames curves for one window.
  ad::Matrix generate(const ad::Matrix& features, Emotion emotion) const;

  /// Whole-clip inference. Windows start every 5 frames; one more window is
  /// aligned to the clip end when needed. Overlaps are blended with tent
  /// weights normalized to sum to one. Output T = floor(30 * len / 16000).
  /// Throws SizeError when the audio is shorter than one window.
  RigCurveSequence infer_clip(const AudioSignal& audio, Emotion emotion, const MfccConfig& mfcc = {}) const;
  /// Same, with precomputed features for the whole clip (hop in samples).
  RigCurveSequence infer_clip(const AudioFeatureSequence& features, int samples, Emotion emotion) const;

 private:
  template <typename WindowFeatures>
  RigCurveSequence stitch(int samples, Emotion emotion, WindowFeatures&& features_at) const;

  GenConfig cfg_;
  ParamSet params_;
};

/// Start frames of the windows used to cover `frames` frames.
std::vector<int> clip_window_starts(int frames, int window = kWindowFrames, int stride = kWindowStrideFrames);

/// frames x windows matrix of blend weights; each row sums to one.
Eigen::MatrixXd blend_weights(int frames, const std::vector<int>& starts, int window = kWindowFrames);

std::string_view to_string(EncoderKind k);

}  // namespace cstalk
