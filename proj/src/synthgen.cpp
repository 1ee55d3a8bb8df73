#include "cstalk/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/SVD>

#include "cstalk/error.hpp"

namespace cstalk {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kMixingStream = 0x6d6978ULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973ULL;

// Zero-mean two-lobed pulse sampled at frame centers.
Eigen::VectorXd biphasic(int frames) {
  Eigen::VectorXd b(frames);
  for (int i = 0; i < frames; ++i) {
    const double u = (i + 0.5) / frames;
    b[i] = std::sin(2.0 * std::numbers::pi * u) * std::sin(std::numbers::pi * u);
  }
  b.array() -= b.mean();
  return b / b.cwiseAbs().maxCoeff();
}

// Unit-variance Gaussian noise, smoothed along time.
Eigen::MatrixXd smooth_noise(int rows, int frames, double smooth, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  if (smooth <= 0.0) {
    Eigen::MatrixXd out(rows, frames);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = n01(rng);
    return out;
  }
  const int radius = static_cast<int>(std::ceil(3.0 * smooth));
  Eigen::VectorXd kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (smooth * smooth));
  kernel /= kernel.norm();
  Eigen::MatrixXd white(rows, frames + 2 * radius);
  for (Eigen::Index i = 0; i < white.size(); ++i) white.data()[i] = n01(rng);
  Eigen::MatrixXd out(rows, frames);
  for (int t = 0; t < frames; ++t) out.col(t) = white.middleCols(t, 2 * radius + 1) * kernel;
  return out;
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(seed ^ splitmix64(stream)); }

void SynthConfig::validate() const {
  if (emotions < 1 || emotions > kNumEmotions) throw ConfigError("emotions must be in [1, 5]");
  if (clips_per_emotion < 1) throw ConfigError("clips_per_emotion must be >= 1");
  if (!(min_seconds >= 3.2) || max_seconds < min_seconds)
    throw ConfigError("clip length range must satisfy 3.2 <= min <= max seconds");
  if (factors < 1) throw ConfigError("need at least one latent factor");
  if (noise_sigma < 0.0 || noise_smooth_frames < 0.0 || latent_rms <= 0.0) throw ConfigError("invalid noise/latent scale");
  if (modulation <= 0.0 || modulation >= 1.0) throw ConfigError("modulation must be in (0, 1)");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"emotions", emotions},         {"clips_per_emotion", clips_per_emotion},
          {"min_seconds", min_seconds},   {"max_seconds", max_seconds},
          {"factors", factors},           {"noise_sigma", noise_sigma},
          {"noise_smooth_frames", noise_smooth_frames}, {"latent_rms", latent_rms},
          {"modulation", modulation},     {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.emotions = j.value("emotions", c.emotions);
  c.clips_per_emotion = j.value("clips_per_emotion", c.clips_per_emotion);
  c.min_seconds = j.value("min_seconds", c.min_seconds);
  c.max_seconds = j.value("max_seconds", c.max_seconds);
  c.factors = j.value("factors", c.factors);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.noise_smooth_frames = j.value("noise_smooth_frames", c.noise_smooth_frames);
  c.latent_rms = j.value("latent_rms", c.latent_rms);
  c.modulation = j.value("modulation", c.modulation);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::vector<Eigen::MatrixXd> mixing_matrices(const SynthConfig& cfg, const RigRegistry& registry) {
  std::mt19937_64 rng(stream_seed(cfg.seed, kMixingStream));
  std::normal_distribution<double> n01(0.0, 1.0);
  const int R = registry.size(), k = cfg.factors;
  auto gaussian = [&] {
    Eigen::MatrixXd m(R, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
    return m;
  };
  const Eigen::MatrixXd common = gaussian();
  std::vector<Eigen::MatrixXd> out;
  for (int e = 0; e < kNumEmotions; ++e) {
    const Eigen::MatrixXd specific = gaussian();
    Eigen::MatrixXd w(R, k);
    for (int r = 0; r < R; ++r) {
      // (shared weight, emotion weight, region gain)
      double a = 0.0, b = 0.0, g = 0.0;
      switch (registry.region(r)) {
        case Region::lip: a = 0.95, b = 0.3, g = 1.0; break;
        case Region::eye: a = 0.2, b = 1.0, g = 0.6; break;
        case Region::forehead: a = 0.2, b = 1.0, g = 0.6; break;
        case Region::other: a = 0.6, b = 0.6, g = 0.4; break;
      }
      w.row(r) = g * (a * common.row(r) + b * specific.row(r));
    }
    w.colwise().normalize();
    out.push_back(std::move(w));
  }
  out.resize(static_cast<std::size_t>(cfg.emotions));
  return out;
}

double factor_frequency(int j, int factors) {
  if (factors == 1) return 200.0;
  return 200.0 * std::pow(15.0, static_cast<double>(j) / (factors - 1));
}

double principal_angle_deg(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::MatrixXd qa = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd qb = Eigen::HouseholderQR<Eigen::MatrixXd>(b).householderQ() * Eigen::MatrixXd::Identity(b.rows(), b.cols());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(qa.transpose() * qb);
  const double c = std::min(1.0, svd.singularValues().maxCoeff());
  return std::acos(c) * 180.0 / std::numbers::pi;
}

SynthClip generate_clip(const SynthConfig& cfg, const RigRegistry& registry,
                        const std::vector<Eigen::MatrixXd>& mixing, int index) {
  cfg.validate();
  const int total = cfg.emotions * cfg.clips_per_emotion;
  if (index < 0 || index >= total) throw IndexError("clip index " + std::to_string(index) + " outside corpus");
  std::mt19937_64 rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(index) + 1));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  SynthClip clip;
  clip.emotion = static_cast<Emotion>(index / cfg.clips_per_emotion);
  const int within = index % cfg.clips_per_emotion;
  clip.id = std::string(to_string(clip.emotion)) + "_" + (within < 10 ? "00" : within < 100 ? "0" : "") +
            std::to_string(within);

  const int t_lo = static_cast<int>(std::ceil(cfg.min_seconds * kFrameRate));
  const int t_hi = static_cast<int>(std::floor(cfg.max_seconds * kFrameRate));
  // Length depends only on the within-emotion index, so every emotion gets
  // the same window count.
  std::mt19937_64 len_rng(stream_seed(cfg.seed, 0x4c454e0000000000ULL + static_cast<std::uint64_t>(within)));
  const int T = std::uniform_int_distribution<int>(t_lo, t_hi)(len_rng);
  const int k = cfg.factors;

  // Latent factors: back-to-back pulses, factors visited in shuffled rounds so
  // no two overlap and each appears.
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(k, T);
  std::vector<int> order;
  for (int t = 0;;) {
    const int dur = std::uniform_int_distribution<int>(6, 12)(rng);
    const int gap = std::uniform_int_distribution<int>(0, 2)(rng);
    if (t + dur > T) break;
    if (order.empty()) {
      for (int j = 0; j < k; ++j) order.push_back(j);
      std::shuffle(order.begin(), order.end(), rng);
    }
    const int j = order.back();
    order.pop_back();
    const double amp = (u01(rng) < 0.5 ? -1.0 : 1.0) * (0.6 + 0.4 * u01(rng));
    z.row(j).segment(t, dur) = amp * biphasic(dur).transpose();
    t += dur + gap;
  }
  for (int j = 0; j < k; ++j) {
    const double e = z.row(j).squaredNorm();
    if (e > 0.0) z.row(j) *= std::sqrt(T * cfg.latent_rms * cfg.latent_rms / e);
  }
  clip.latent = z;

  std::mt19937_64 noise_rng(stream_seed(cfg.seed ^ kNoiseStream, static_cast<std::uint64_t>(index)));
  const Eigen::MatrixXd& w = mixing[static_cast<std::size_t>(index_of(clip.emotion))];
  Eigen::MatrixXd rig = w * z + cfg.noise_sigma * smooth_noise(registry.size(), T, cfg.noise_smooth_frames, noise_rng);
  clip.rigs.values = canonicalize(rig.cwiseMax(-1.0).cwiseMin(1.0));
  clip.rigs.registry_hash = registry.hash();

  // Tone bank: carrier j is amplitude modulated by 1 + m * z_j, sampled at the
  // audio time of each frame.
  const int len = static_cast<int>((1600LL * T + 2) / 3);
  std::vector<double> phase(static_cast<std::size_t>(k));
  for (auto& p : phase) p = 2.0 * std::numbers::pi * u01(rng);
  const double gain = 0.9 / (k + 1);
  Eigen::VectorXd x(len);
  for (int n = 0; n < len; ++n) {
    const double pos = n * kFrameRate / kSampleRate;
    const int f0 = std::min(static_cast<int>(pos), T - 1);
    const int f1 = std::min(f0 + 1, T - 1);
    const double a = pos - f0;
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      const double zj = z(j, f0) + a * (z(j, f1) - z(j, f0));
      const double env = std::clamp(1.0 + cfg.modulation * zj, 0.0, 2.0);
      s += env * std::sin(2.0 * std::numbers::pi * factor_frequency(j, k) * n / kSampleRate + phase[static_cast<std::size_t>(j)]);
    }
    x[n] = gain * s;
  }
  clip.audio.samples = quantize_pcm16(x);
  return clip;
}

std::vector<SynthClip> generate_corpus(const SynthConfig& cfg, const RigRegistry& registry) {
  cfg.validate();
  const auto mixing = mixing_matrices(cfg, registry);
  std::vector<SynthClip> out;
  for (int i = 0; i < cfg.emotions * cfg.clips_per_emotion; ++i) out.push_back(generate_clip(cfg, registry, mixing, i));
  return out;
}

RigWindow random_window(int rigs, std::uint64_t seed, int index, int frames) {
  std::mt19937_64 rng(stream_seed(seed, 0x72616e64ULL + static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd raw(rigs, frames + 2);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = u(rng);
  RigWindow w;
  w.values = (raw.leftCols(frames) + raw.middleCols(1, frames) + raw.rightCols(frames)) / 3.0;
  w.source_clip = "random_" + std::to_string(index);
  w.label = Emotion::random;
  return w;
}

std::vector<RigWindow> gen_random_windows(int count, std::uint64_t seed, int rigs) {
  if (count < 1) throw ConfigError("random window count must be >= 1");
  std::vector<RigWindow> out;
  for (int i = 0; i < count; ++i) out.push_back(random_window(rigs, seed, i));
  return out;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw SchemaError(path.string() + ": manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  for (const auto& item : j) {
    ManifestEntry m;
    try {
      m.clip_id = item.at("clip_id").get<std::string>();
      m.rig_csv = item.at("rig_csv").get<std::string>();
      m.wav = item.at("wav").get<std::string>();
      const auto name = item.at("emotion").get<std::string>();
      const auto e = parse_emotion(name);
      if (!e || *e == Emotion::random) throw SchemaError("clip '" + m.clip_id + "' has unknown emotion '" + name + "'");
      m.emotion = *e;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(path.string() + ": " + e.what());
    }
    out.push_back(std::move(m));
  }
  return out;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : entries)
    j.push_back({{"clip_id", m.clip_id}, {"rig_csv", m.rig_csv}, {"wav", m.wav}, {"emotion", std::string(to_string(m.emotion))}});
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<ManifestEntry> write_corpus(const std::vector<SynthClip>& clips, const RigRegistry& registry,
                                        const SynthConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "clips");
  registry.save(dir / "registry.json");
  write_text_file(dir / "synth.json", cfg.to_json().dump(2) + "\n");
  std::vector<ManifestEntry> entries;
  for (const auto& c : clips) {
    ManifestEntry m{c.id, "clips/" + c.id + ".csv", "clips/" + c.id + ".wav", c.emotion};
    save_rig_curves(c.rigs, registry, dir / m.rig_csv);
    save_wav(c.audio, dir / m.wav);
    entries.push_back(std::move(m));
  }
  save_manifest(entries, dir / "manifest.json");
  return entries;
}

std::vector<LoadedClip> to_loaded(std::vector<SynthClip>&& clips) {
  std::vector<LoadedClip> out;
  out.reserve(clips.size());
  for (auto& c : clips) out.push_back({std::move(c.id), c.emotion, std::move(c.audio), std::move(c.rigs)});
  clips.clear();
  return out;
}

std::vector<LoadedClip> load_corpus(const std::filesystem::path& manifest, const RigRegistry& registry) {
  const auto base = manifest.parent_path();
  std::vector<LoadedClip> out;
  for (const auto& m : load_manifest(manifest)) {
    LoadedClip c;
    c.id = m.clip_id;
    c.emotion = m.emotion;
    c.rigs = load_rig_curves(base / m.rig_csv, registry);
    c.audio = load_wav(base / m.wav);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace cstalk
