#include "cstalk/genet.hpp"

#include <cmath>
#include <random>

#include "cstalk/error.hpp"

namespace cstalk {

namespace {

std::string dec(int l, const char* what) { return "dec" + std::to_string(l) + "." + what; }

std::vector<std::tuple<std::string, ad::Index, ad::Index>> layout(const GenConfig& c) {
  std::vector<std::tuple<std::string, ad::Index, ad::Index>> out;
  out.emplace_back("feat.mean", 1, c.feature_dim);
  out.emplace_back("feat.std", 1, c.feature_dim);
  if (c.encoder == EncoderKind::mfcc_tcn) {
    out.emplace_back("enc0.w", c.kernel * c.feature_dim, c.latent);
    out.emplace_back("enc0.b", 1, c.latent);
    out.emplace_back("enc1.w", c.kernel * c.latent, c.latent);
    out.emplace_back("enc1.b", 1, c.latent);
  } else {
    out.emplace_back("enc.w", c.feature_dim, c.latent);
    out.emplace_back("enc.b", 1, c.latent);
  }
  out.emplace_back("emotion", kNumEmotions, c.emotion_dim);
  out.emplace_back("dec.in.w", c.latent, c.channels);
  out.emplace_back("dec.in.b", 1, c.channels);
  for (std::size_t l = 0; l < c.dilations.size(); ++l) {
    const int i = static_cast<int>(l);
    out.emplace_back(dec(i, "emo"), c.emotion_dim, c.channels);
    out.emplace_back(dec(i, "w"), c.kernel * c.channels, c.channels);
    out.emplace_back(dec(i, "b"), 1, c.channels);
  }
  out.emplace_back("out.w", c.channels, c.rigs);
  out.emplace_back("out.b", 1, c.rigs);
  return out;
}

bool is_bias(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0; }

}  // namespace

std::string_view to_string(EncoderKind k) { return k == EncoderKind::mfcc_tcn ? "mfcc_tcn" : "precomputed"; }

int GenConfig::receptive_field() const {
  int rf = 1;
  for (int d : dilations) rf += (kernel - 1) * d;
  return rf;
}

void GenConfig::validate() const {
  if (rigs < 1 || frames < 1 || feature_dim < 1 || latent < 1 || channels < 1 || emotion_dim < 1)
    throw ConfigError("generator config sizes must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("decoder kernel must be odd, got " + std::to_string(kernel));
  if (dilations.empty()) throw ConfigError("decoder needs at least one layer");
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    if (dilations[i] < 1) throw ConfigError("dilations must be >= 1");
    if (i > 0 && dilations[i] <= dilations[i - 1]) throw ConfigError("dilations must be strictly increasing");
  }
}

nlohmann::json GenConfig::to_json() const {
  return {{"rigs", rigs},
          {"frames", frames},
          {"feature_dim", feature_dim},
          {"encoder", std::string(to_string(encoder))},
          {"latent", latent},
          {"channels", channels},
          {"kernel", kernel},
          {"dilations", dilations},
          {"emotion_dim", emotion_dim},
          {"freeze_encoder", freeze_encoder}};
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig c;
  c.rigs = j.value("rigs", c.rigs);
  c.frames = j.value("frames", c.frames);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  const std::string enc = j.value("encoder", std::string("mfcc_tcn"));
  if (enc == "mfcc_tcn") c.encoder = EncoderKind::mfcc_tcn;
  else if (enc == "precomputed") c.encoder = EncoderKind::precomputed;
  else throw ConfigError("unknown encoder '" + enc + "'");
  c.latent = j.value("latent", c.latent);
  c.channels = j.value("channels", c.channels);
  c.kernel = j.value("kernel", c.kernel);
  c.dilations = j.value("dilations", c.dilations);
  c.emotion_dim = j.value("emotion_dim", c.emotion_dim);
  c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
  c.validate();
  return c;
}

GenNet::GenNet(GenConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (const auto& [name, rows, cols] : layout(cfg_)) {
    if (name == "feat.mean") {
      params_.add(name, ad::Matrix::Zero(rows, cols), false);
    } else if (name == "feat.std") {
      params_.add(name, ad::Matrix::Ones(rows, cols), false);
    } else if (name == "emotion") {
      ad::Matrix e(rows, cols);
      for (ad::Index i = 0; i < e.size(); ++i) e.data()[i] = 0.1 * n01(rng);
      params_.add(name, e);
    } else if (is_bias(name)) {
      params_.add(name, ad::Matrix::Zero(rows, cols));
    } else {
      params_.add(name, uniform_fan_in(rows, cols, rows, rng));
    }
  }
  if (cfg_.freeze_encoder)
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (is_encoder_param(i)) params_.set_trainable(i, false);
  round_to_float32(params_);
}

GenNet::GenNet(GenConfig cfg, ParamSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const auto expect = layout(cfg_);
  if (expect.size() != params_.size())
    throw CompatibilityError("generator expects " + std::to_string(expect.size()) + " tensors, got " +
                             std::to_string(params_.size()));
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const auto& [name, rows, cols] = expect[i];
    if (params_.name(i) != name || params_[i].rows() != rows || params_[i].cols() != cols)
      throw CompatibilityError("generator tensor '" + params_.name(i) + "' does not match expected '" + name + "'");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const bool stats = params_.name(i).rfind("feat.", 0) == 0;
    params_.set_trainable(i, !stats && !(cfg_.freeze_encoder && is_encoder_param(i)));
  }
}

bool GenNet::is_encoder_param(std::size_t slot) const { return params_.name(slot).rfind("enc", 0) == 0; }

void GenNet::set_feature_stats(const ad::Matrix& mean, const ad::Matrix& stddev) {
  if (mean.rows() != 1 || mean.cols() != cfg_.feature_dim || stddev.rows() != 1 || stddev.cols() != cfg_.feature_dim)
    throw ShapeError("feature statistics must be 1x" + std::to_string(cfg_.feature_dim));
  params_[params_.index("feat.mean")].mutable_value() = mean;
  params_[params_.index("feat.std")].mutable_value() = stddev.cwiseMax(1e-8);
  round_to_float32(params_);
}

ad::Var GenNet::encode(const ad::Matrix& features, const ParamSet& p) const {
  using namespace ad;
  if (features.rows() != cfg_.frames || features.cols() != cfg_.feature_dim)
    throw ShapeError("encoder input must be " + std::to_string(cfg_.frames) + "x" + std::to_string(cfg_.feature_dim) +
                     ", got " + std::to_string(features.rows()) + "x" + std::to_string(features.cols()));
  const Matrix norm = (features.rowwise() - p.at("feat.mean").value().row(0)).array().rowwise() /
                      p.at("feat.std").value().row(0).array();
  const Var x = constant(norm);
  if (cfg_.encoder == EncoderKind::precomputed) return linear(x, p.at("enc.w"), p.at("enc.b"));
  const Var h = relu(add_row(dilated_conv1d(x, p.at("enc0.w"), 1), p.at("enc0.b")));
  return relu(add_row(dilated_conv1d(h, p.at("enc1.w"), 2), p.at("enc1.b")));
}

ad::Var GenNet::decode(const ad::Var& latent, Emotion emotion, const ParamSet& p) const {
  using namespace ad;
  if (emotion == Emotion::random) throw DomainError("the random class is not a generation target");
  if (latent.cols() != cfg_.latent) throw ShapeError("latent must have " + std::to_string(cfg_.latent) + " channels");
  const Var e = gather_row(p.at("emotion"), index_of(emotion));
  Var h = linear(latent, p.at("dec.in.w"), p.at("dec.in.b"));
  for (std::size_t l = 0; l < cfg_.dilations.size(); ++l) {
    const int i = static_cast<int>(l);
    const Var in = add_row(h, matmul(e, p.at(dec(i, "emo"))));
    h = add(h, relu(add_row(dilated_conv1d(in, p.at(dec(i, "w")), cfg_.dilations[l]), p.at(dec(i, "b")))));
  }
  return tanh(linear(h, p.at("out.w"), p.at("out.b")));
}

ad::Matrix GenNet::generate(const ad::Matrix& features, Emotion emotion) const {
  if (empty()) throw StateError("generator has no parameters");
  return forward(features, emotion, params_).value().transpose();
}

std::vector<int> clip_window_starts(int frames, int window, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + window <= frames; s += stride) starts.push_back(s);
  if (!starts.empty() && starts.back() + window < frames) starts.push_back(frames - window);
  return starts;
}

Eigen::MatrixXd blend_weights(int frames, const std::vector<int>& starts, int window) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(frames, static_cast<Eigen::Index>(starts.size()));
  for (std::size_t k = 0; k < starts.size(); ++k)
    for (int j = 0; j < window; ++j) {
      // Tent peaking mid-window, positive at both ends.
      w(starts[k] + j, static_cast<Eigen::Index>(k)) = std::min(j + 1, window - j);
    }
  for (int t = 0; t < frames; ++t) {
    const double s = w.row(t).sum();
    if (s <= 0.0) throw AlignmentError("frame " + std::to_string(t) + " is not covered by any window");
    w.row(t) /= s;
  }
  return w;
}

template <typename WindowFeatures>
RigCurveSequence GenNet::stitch(int samples, Emotion emotion, WindowFeatures&& features_at) const {
  if (empty()) throw StateError("generator has no parameters");
  if (samples < kWindowSamples)
    throw SizeError("inference needs at least " + std::to_string(kWindowSamples) + " samples, got " +
                    std::to_string(samples));
  const int T = static_cast<int>(30LL * samples / kSampleRate);
  const auto starts = clip_window_starts(T);
  const Eigen::MatrixXd w = blend_weights(T, starts);
  RigCurveSequence out;
  out.values = Eigen::MatrixXd::Zero(cfg_.rigs, T);
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const int f0 = starts[k];
    // First sample of frame f0, rounded up so the window stays inside the clip.
    const int s0 = static_cast<int>((static_cast<long long>(f0) * kSampleRate + 29) / 30);
    const ad::Matrix y = generate(features_at(s0), emotion);
    for (int j = 0; j < kWindowFrames; ++j) {
      const double wj = w(f0 + j, static_cast<Eigen::Index>(k));
      if (wj == 1.0) out.values.col(f0 + j) = y.col(j);
      else out.values.col(f0 + j) += wj * y.col(j);
    }
  }
  return out;
}

RigCurveSequence GenNet::infer_clip(const AudioSignal& audio, Emotion emotion, const MfccConfig& mfcc) const {
  if (cfg_.encoder != EncoderKind::mfcc_tcn) throw ConfigError("this generator expects precomputed features");
  return stitch(audio.size(), emotion, [&](int s0) {
    return window_features(audio.samples.segment(s0, kWindowSamples), mfcc).values;
  });
}

RigCurveSequence GenNet::infer_clip(const AudioFeatureSequence& features, int samples, Emotion emotion) const {
  return stitch(samples, emotion, [&](int s0) {
    const int a = s0 / features.hop;
    const int b = std::min(features.frames(), (s0 + kWindowSamples) / features.hop);
    if (b - a < 2) throw SizeError("feature sequence does not cover the clip");
    AudioFeatureSequence slice;
    slice.hop = features.hop;
    slice.values = features.values.middleRows(a, b - a);
    return align_to_frames(slice, kWindowFrames).values;
  });
}

}  // namespace cstalk
