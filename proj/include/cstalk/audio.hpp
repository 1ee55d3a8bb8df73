#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cstalk/rig.hpp"

namespace cstalk {

inline constexpr int kSampleRate = 16000;
inline constexpr int kWindowSamples = 51200;  // 96 frames at 30 fps
inline constexpr int kStrideSamples = 2667;   // nominal; 5 frames is 2666.67 samples

/// Mono samples in [-1, 1].
struct AudioSignal {
  Eigen::VectorXd samples;
  int sample_rate = kSampleRate;

  int size() const { return static_cast<int>(samples.size()); }
};

/// Reads PCM WAV (8/16/24/32-bit integer). Stereo is averaged, other rates are
/// linearly resampled to 16 kHz. Throws FormatError on anything else.
AudioSignal load_wav(const std::filesystem::path& path);
AudioSignal decode_wav(const std::string& bytes);

/// Writes 16-bit PCM mono at the signal's rate.
void save_wav(const AudioSignal& signal, const std::filesystem::path& path);
std::string encode_wav(const AudioSignal& signal);

/// Rounds samples to the 16-bit PCM grid that `save_wav` stores.
Eigen::VectorXd quantize_pcm16(const Eigen::VectorXd& samples);

Eigen::VectorXd resample_linear(const Eigen::VectorXd& samples, int from_rate, int to_rate = kSampleRate);

struct MfccConfig {
  int frame = 400;
  int hop = 160;
  int fft = 512;
  int mel_filters = 26;
  int coefficients = 13;
  bool deltas = true;      // append delta and delta-delta
  int delta_width = 2;
  double low_hz = 0.0;
  double high_hz = 8000.0;
  double energy_floor = 1e-10;

  int dim() const { return deltas ? 3 * coefficients : coefficients; }
};

/// F x D, frame-major.
struct AudioFeatureSequence {
  Eigen::MatrixXd values;
  int hop = 160;

  int frames() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
};

/// 1 + floor((len - frame) / hop), or 0 when the signal is shorter than a frame.
int mfcc_frame_count(int samples, const MfccConfig& cfg = {});

/// mel_filters x (fft / 2 + 1) triangular weights on the HTK mel scale.
Eigen::MatrixXd mel_filterbank(const MfccConfig& cfg = {}, int sample_rate = kSampleRate);

/// F x (fft / 2 + 1) power spectrum of Hamming-windowed frames.
Eigen::MatrixXd power_spectrogram(const AudioSignal& signal, const MfccConfig& cfg = {});

/// F x mel_filters log energies (floored).
Eigen::MatrixXd log_mel_energies(const AudioSignal& signal, const MfccConfig& cfg = {});

/// Regression deltas over the frame axis with edge replication.
Eigen::MatrixXd deltas(const Eigen::MatrixXd& features, int width = 2);

AudioFeatureSequence mfcc(const AudioSignal& signal, const MfccConfig& cfg = {});

/// Linear interpolation on the frame axis; endpoints are copied exactly.
AudioFeatureSequence align_to_frames(const AudioFeatureSequence& features, int target = kWindowFrames);

struct PairedWindow {
  AudioSignal audio;  // 51200 samples
  RigWindow rig;
  AudioFeatureSequence features;  // 96 frames
  int start_sample = 0;
};

/// Number of whole audio windows in a clip, 0 when shorter than one window.
int audio_window_count(int samples);

/// First sample of window k: ceil(k * 16000 * 5 / 30). Steps alternate
/// 2667, 2667, 2666 so window k starts within one sample of rig frame 5k.
int audio_window_start(int k);

/// Cuts matching audio and rig windows from one clip. Audio window k covers
/// [audio_window_start(k), +51200); rig window k starts at frame 5k. Throws
/// AlignmentError when the two counts differ by more than one window.
std::vector<PairedWindow> pair_windows(const AudioSignal& signal, const RigCurveSequence& seq,
                                       const std::string& clip_id = {}, Emotion label = Emotion::neutral,
                                       const MfccConfig& cfg = {}, bool with_features = true);

/// MFCC of one 51200-sample window resampled to 96 frames.
AudioFeatureSequence window_features(const Eigen::Ref<const Eigen::VectorXd>& window, const MfccConfig& cfg = {});

/// Precomputed F x D feature matrix in the checkpoint container layout.
AudioFeatureSequence load_feature_file(const std::filesystem::path& path);
void save_feature_file(const AudioFeatureSequence& features, const std::filesystem::path& path);

}  // namespace cstalk
