#include "cstalk/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "cstalk/container.hpp"
#include "cstalk/error.hpp"

namespace cstalk {

namespace {

std::uint32_t read_u32(const std::string& b, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + at, 4);
  return v;
}

std::uint16_t read_u16(const std::string& b, std::size_t at) {
  std::uint16_t v;
  std::memcpy(&v, b.data() + at, 2);
  return v;
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u16(std::string& out, std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); }

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

AudioSignal decode_wav(const std::string& b) {
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
    throw FormatError("not a RIFF/WAVE file");
  std::size_t pos = 12;
  int channels = 0, rate = 0, bits = 0;
  bool have_fmt = false;
  const char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::uint32_t len = read_u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > b.size()) {
      // Some writers leave a bogus length on the final data chunk; clip it.
      if (id != "data") throw FormatError("chunk '" + id + "' overruns the file");
    }
    if (id == "fmt ") {
      if (len < 16) throw FormatError("fmt chunk too short");
      std::uint16_t tag = read_u16(b, body);
      channels = read_u16(b, body + 2);
      rate = static_cast<int>(read_u32(b, body + 4));
      bits = read_u16(b, body + 14);
      if (tag == 0xFFFE && len >= 26) tag = read_u16(b, body + 24);  // extensible: sub-format GUID prefix
      if (tag != 1) throw FormatError("unsupported WAV encoding (format tag " + std::to_string(tag) + "); PCM only");
      have_fmt = true;
    } else if (id == "data") {
      data = b.data() + body;
      data_len = std::min<std::size_t>(len, b.size() - body);
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt || data == nullptr) throw FormatError("WAV is missing fmt or data chunk");
  if (channels < 1 || rate <= 0) throw FormatError("invalid channel count or sample rate");
  if (bits != 8 && bits != 16 && bits != 24 && bits != 32)
    throw FormatError("unsupported PCM bit depth " + std::to_string(bits));

  const std::size_t bytes_per_sample = static_cast<std::size_t>(bits / 8);
  const std::size_t frame_bytes = bytes_per_sample * static_cast<std::size_t>(channels);
  const std::size_t frames = data_len / frame_bytes;
  Eigen::VectorXd mono(static_cast<Eigen::Index>(frames));
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (int ch = 0; ch < channels; ++ch) {
      const auto* p = reinterpret_cast<const unsigned char*>(data + f * frame_bytes + static_cast<std::size_t>(ch) * bytes_per_sample);
      double v = 0.0;
      switch (bits) {
        case 8: v = (static_cast<int>(p[0]) - 128) / 128.0; break;
        case 16: v = static_cast<std::int16_t>(p[0] | (p[1] << 8)) / 32768.0; break;
        case 24: {
          std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
          if (s & 0x800000) s |= ~0xFFFFFF;
          v = s / 8388608.0;
          break;
        }
        case 32: {
          std::int32_t s;
          std::memcpy(&s, p, 4);
          v = s / 2147483648.0;
          break;
        }
      }
      acc += v;
    }
    mono(static_cast<Eigen::Index>(f)) = acc / channels;
  }
  AudioSignal out;
  out.samples = rate == kSampleRate ? mono : resample_linear(mono, rate, kSampleRate);
  out.sample_rate = kSampleRate;
  return out;
}

AudioSignal load_wav(const std::filesystem::path& path) {
  try {
    return decode_wav(read_text_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Eigen::VectorXd quantize_pcm16(const Eigen::VectorXd& samples) {
  return samples.unaryExpr([](double v) {
    const double s = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
    return s / 32768.0;
  });
}

std::string encode_wav(const AudioSignal& signal) {
  const auto n = static_cast<std::uint32_t>(signal.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(signal.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(signal.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double s = std::clamp(std::round(signal.samples(i) * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
  }
  return out;
}

void save_wav(const AudioSignal& signal, const std::filesystem::path& path) {
  write_text_file(path, encode_wav(signal));
}

Eigen::VectorXd resample_linear(const Eigen::VectorXd& samples, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw ConfigError("sample rates must be positive");
  const auto n = static_cast<long long>(samples.size());
  if (n == 0) return {};
  const long long out_n = (n * to_rate + from_rate / 2) / from_rate;
  Eigen::VectorXd out(out_n);
  for (long long i = 0; i < out_n; ++i) {
    const double src = static_cast<double>(i) * from_rate / to_rate;
    const auto i0 = static_cast<long long>(std::floor(src));
    if (i0 >= n - 1) {
      out(i) = samples(n - 1);
      continue;
    }
    const double frac = src - static_cast<double>(i0);
    out(i) = samples(i0) * (1.0 - frac) + samples(i0 + 1) * frac;
  }
  return out;
}

int mfcc_frame_count(int samples, const MfccConfig& cfg) {
  if (samples < cfg.frame) return 0;
  return 1 + (samples - cfg.frame) / cfg.hop;
}

Eigen::MatrixXd mel_filterbank(const MfccConfig& cfg, int sample_rate) {
  const int bins = cfg.fft / 2 + 1;
  const double lo = hz_to_mel(cfg.low_hz);
  const double hi = hz_to_mel(cfg.high_hz);
  std::vector<double> edges(static_cast<std::size_t>(cfg.mel_filters) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.mel_filters + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.mel_filters, bins);
  for (int m = 0; m < cfg.mel_filters; ++m) {
    const double left = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double right = edges[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / cfg.fft;
      if (f > left && f <= center) fb(m, k) = (f - left) / (center - left);
      else if (f > center && f < right) fb(m, k) = (right - f) / (right - center);
    }
  }
  return fb;
}

Eigen::MatrixXd power_spectrogram(const AudioSignal& signal, const MfccConfig& cfg) {
  const int frames = mfcc_frame_count(signal.size(), cfg);
  if (frames < 1)
    throw SizeError("signal of " + std::to_string(signal.size()) + " samples is shorter than one " +
                    std::to_string(cfg.frame) + "-sample frame");
  if (cfg.fft < cfg.frame) throw ConfigError("FFT size must cover the frame");
  const int bins = cfg.fft / 2 + 1;
  Eigen::VectorXd window(cfg.frame);
  for (int n = 0; n < cfg.frame; ++n)
    window(n) = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (cfg.frame - 1));

  Eigen::FFT<double> fft;
  std::vector<double> buf(static_cast<std::size_t>(cfg.fft), 0.0);
  std::vector<std::complex<double>> spec;
  Eigen::MatrixXd power(frames, bins);
  for (int f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (int n = 0; n < cfg.frame; ++n)
      buf[static_cast<std::size_t>(n)] = signal.samples(f * cfg.hop + n) * window(n);
    fft.fwd(spec, buf);
    for (int k = 0; k < bins; ++k) power(f, k) = std::norm(spec[static_cast<std::size_t>(k)]);
  }
  return power;
}

Eigen::MatrixXd log_mel_energies(const AudioSignal& signal, const MfccConfig& cfg) {
  const Eigen::MatrixXd power = power_spectrogram(signal, cfg);
  const Eigen::MatrixXd fb = mel_filterbank(cfg, signal.sample_rate);
  return (power * fb.transpose()).unaryExpr([&](double e) { return std::log(std::max(e, cfg.energy_floor)); });
}

Eigen::MatrixXd deltas(const Eigen::MatrixXd& features, int width) {
  const Eigen::Index frames = features.rows();
  double denom = 0.0;
  for (int n = 1; n <= width; ++n) denom += 2.0 * n * n;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(frames, features.cols());
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int n = 1; n <= width; ++n) {
      const Eigen::Index ahead = std::min<Eigen::Index>(t + n, frames - 1);
      const Eigen::Index behind = std::max<Eigen::Index>(t - n, 0);
      out.row(t) += n * (features.row(ahead) - features.row(behind));
    }
  }
  return out / denom;
}

AudioFeatureSequence mfcc(const AudioSignal& signal, const MfccConfig& cfg) {
  const Eigen::MatrixXd logmel = log_mel_energies(signal, cfg);
  const int m = cfg.mel_filters;
  // Orthonormal DCT-II basis, mel_filters x coefficients.
  Eigen::MatrixXd dct(m, cfg.coefficients);
  for (int k = 0; k < cfg.coefficients; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
    for (int i = 0; i < m; ++i) dct(i, k) = scale * std::cos(std::numbers::pi * k * (i + 0.5) / m);
  }
  const Eigen::MatrixXd statics = logmel * dct;
  AudioFeatureSequence out;
  out.hop = cfg.hop;
  if (!cfg.deltas) {
    out.values = statics;
    return out;
  }
  const Eigen::MatrixXd d1 = deltas(statics, cfg.delta_width);
  const Eigen::MatrixXd d2 = deltas(d1, cfg.delta_width);
  out.values.resize(statics.rows(), 3 * cfg.coefficients);
  out.values << statics, d1, d2;
  return out;
}

AudioFeatureSequence align_to_frames(const AudioFeatureSequence& features, int target) {
  const int frames = features.frames();
  if (frames < 2) throw SizeError("alignment needs at least 2 feature frames, got " + std::to_string(frames));
  if (target < 2) throw SizeError("alignment target must be at least 2 frames");
  AudioFeatureSequence out;
  out.hop = features.hop;
  out.values.resize(target, features.dim());
  for (int j = 0; j < target; ++j) {
    const long long num = static_cast<long long>(j) * (frames - 1);
    const long long i0 = num / (target - 1);
    const long long rem = num % (target - 1);
    if (rem == 0) {
      out.values.row(j) = features.values.row(i0);
    } else {
      const double frac = static_cast<double>(rem) / (target - 1);
      // a + f(b - a) stays exact on constant runs and never leaves [a, b].
      out.values.row(j) = features.values.row(i0) + frac * (features.values.row(i0 + 1) - features.values.row(i0));
    }
  }
  return out;
}

int audio_window_count(int samples) {
  if (samples < kWindowSamples) return 0;
  // Largest k with audio_window_start(k) + 51200 <= samples.
  return static_cast<int>(3LL * (samples - kWindowSamples) / 8000) + 1;
}

int audio_window_start(int k) {
  // ceil(k * 5 frames * 16000 / 30)
  return static_cast<int>((8000LL * k + 2) / 3);
}

AudioFeatureSequence window_features(const Eigen::Ref<const Eigen::VectorXd>& window, const MfccConfig& cfg) {
  AudioSignal s;
  s.samples = window;
  return align_to_frames(mfcc(s, cfg), kWindowFrames);
}

std::vector<PairedWindow> pair_windows(const AudioSignal& signal, const RigCurveSequence& seq,
                                       const std::string& clip_id, Emotion label, const MfccConfig& cfg,
                                       bool with_features) {
  const int audio_n = audio_window_count(signal.size());
  const int rig_n = window_count(seq.frames(), kWindowFrames, kWindowStrideFrames);
  if (std::abs(audio_n - rig_n) > 1)
    throw AlignmentError("clip '" + clip_id + "': audio yields " + std::to_string(audio_n) +
                         " windows but rig curves yield " + std::to_string(rig_n));
  const int n = std::min(audio_n, rig_n);
  std::vector<PairedWindow> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    PairedWindow p;
    p.start_sample = audio_window_start(k);
    p.audio.samples = signal.samples.segment(p.start_sample, kWindowSamples);
    p.rig = {seq.values.middleCols(k * kWindowStrideFrames, kWindowFrames), clip_id, k * kWindowStrideFrames, label};
    if (with_features) p.features = window_features(p.audio.samples, cfg);
    out.push_back(std::move(p));
  }
  return out;
}

AudioFeatureSequence load_feature_file(const std::filesystem::path& path) {
  const Container c = load_container(path);
  if (c.arrays.size() != 1) throw FormatError(path.string() + ": feature file must hold exactly one array");
  const auto& a = c.arrays.front();
  if (a.shape.size() != 2) throw FormatError(path.string() + ": feature array must be F x D");
  AudioFeatureSequence out;
  out.values = a.to_matrix();
  out.hop = c.header.value("hop", 160);
  if (!out.values.allFinite()) throw ValidationError(path.string() + ": non-finite feature values");
  return out;
}

void save_feature_file(const AudioFeatureSequence& features, const std::filesystem::path& path) {
  Container c;
  c.header = {{"kind", "features"}, {"hop", features.hop}};
  c.arrays.push_back(NamedArray::from_matrix("features", features.values));
  save_container(c, path);
}

}  // namespace cstalk
