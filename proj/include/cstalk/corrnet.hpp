#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstalk/emotion.hpp"
#include "cstalk/ops.hpp"
#include "cstalk/optim.hpp"
#include "json.hpp"

namespace cstalk {

/// Which representation feeds the classifier head.
enum class CorrReadout {
  scores,  // flattened R x R correlation feature
  logits,  // token mean of the final encoder layer output
};

struct CorrConfig {
  int rigs = 116;
  int frames = 96;
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int ffn = 128;
  int hidden = 128;
  int classes = kNumClasses;
  bool sum_layers = true;     // false: mean over layers
  bool post_softmax = false;  // true: attention weights instead of scaled scores
  CorrReadout readout = CorrReadout::scores;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static CorrConfig from_json(const nlohmann::json& j);
};

/// Transformer encoder over rig tokens. Each rig's frame trace is one token;
/// there is no positional encoding, so permuting rigs permutes the feature.
class CorrNet {
 public:
  CorrNet() = default;
  CorrNet(CorrConfig cfg, std::uint64_t seed);
  /// Adopts existing parameters; throws CompatibilityError if names or shapes
  /// do not match the config.
  CorrNet(CorrConfig cfg, ParamSet params);

  const CorrConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  bool empty() const { return params_.size() == 0; }

  struct Output {
    ad::Var logits;                  // N x classes
    std::vector<ad::Var> features;   // N of R x R
  };

  /// Differentiable forward over windows (each R x frames), using `p` (this
  /// model's params or a clone of them).
  Output forward(const std::vector<ad::Var>& windows, const ParamSet& p) const;
  Output forward(const std::vector<ad::Var>& windows) const { return forward(windows, params_); }

  /// Inference helpers. Throw StateError when the model has no parameters.
  ad::Matrix logits(const ad::Matrix& window) const;
  ad::Matrix feature(const ad::Matrix& window) const;
  Emotion predict(const ad::Matrix& window) const;
  std::vector<Emotion> predict(const std::vector<ad::Matrix>& windows) const;

 private:
  void check_ready() const;
  ad::Var encode(const ad::Var& window, const ParamSet& p, ad::Var* feature) const;

  CorrConfig cfg_;
  ParamSet params_;
};

std::string_view to_string(CorrReadout r);

}  // namespace cstalk
