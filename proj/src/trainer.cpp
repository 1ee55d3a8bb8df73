#include "cstalk/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "cstalk/container.hpp"
#include "cstalk/error.hpp"

namespace cstalk {

namespace {

constexpr int kChunk = 8;                           // windows per gradient chunk
constexpr std::uint64_t kRandomWindowStream = 0x52414e44ULL;
constexpr int kValRandomOffset = 1 << 24;           // validation random windows never overlap training ones

std::uint64_t random_window_seed(std::uint64_t seed) { return stream_seed(seed, kRandomWindowStream); }

std::string stage_name(Stage s) { return s == Stage::correlation ? "correlation" : "generation"; }

/// Runs f(i) for i in [0, n) on up to `threads` threads; rethrows the first error.
template <typename F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Per-worker parameter copies. Chunks run in waves of `workers`; gradients
/// are folded into the master set in chunk order, so the result does not
/// depend on the worker count.
class ChunkRunner {
 public:
  ChunkRunner(const ParamSet& master, int workers) {
    for (int i = 0; i < std::max(1, workers); ++i) clones_.push_back(master.clone());
  }

  template <typename F>
  void run(ParamSet& master, int chunks, F&& f) {
    for (auto& c : clones_) c.copy_values_from(master);
    const int w = static_cast<int>(clones_.size());
    for (int start = 0; start < chunks; start += w) {
      const int n = std::min(w, chunks - start);
      for (int i = 0; i < n; ++i) clones_[static_cast<std::size_t>(i)].zero_grad();
      parallel_for(n, n, [&](int i) { f(start + i, clones_[static_cast<std::size_t>(i)]); });
      for (int i = 0; i < n; ++i) master.accumulate_grads_from(clones_[static_cast<std::size_t>(i)]);
    }
  }

 private:
  std::vector<ParamSet> clones_;
};

std::vector<ad::Matrix> snapshot(const ParamSet& p) {
  std::vector<ad::Matrix> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back(p[i].value());
  return out;
}

void restore(ParamSet& p, const std::vector<ad::Matrix>& values) {
  for (std::size_t i = 0; i < p.size(); ++i) p[i].mutable_value() = values[i];
}

bool same_bytes(const ad::Matrix& a, const ad::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

class MetricsSink {
 public:
  MetricsSink(const std::string& path, nlohmann::json* history) : history_(history) {
    if (!path.empty()) {
      out_.open(path, std::ios::binary | std::ios::trunc);
      if (!out_) throw IoError("cannot write metrics to " + path);
    }
  }
  void write(const nlohmann::json& line) {
    history_->push_back(line);
    if (out_.is_open()) out_ << line.dump() << '\n';
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  nlohmann::json* history_;
  std::ofstream out_;
};

int argmax_row(const ad::Matrix& m, ad::Index r) {
  ad::Index best;
  m.row(r).maxCoeff(&best);
  return static_cast<int>(best);
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

}  // namespace

// ---- configuration ----

void TrainConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("learning rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("subsample must be in (0, 1]");
  if (val_stride < 1) throw ConfigError("val_stride must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (lambda_c < 0.0) throw ConfigError("lambda_c must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", stage_name(stage)},
          {"batch", batch},
          {"lr", learning_rate()},
          {"epochs", epochs},
          {"seed", seed},
          {"ablation",
           {{"no_corr_supervision", ablation.no_corr_supervision},
            {"logits_output", ablation.logits_output},
            {"mfcc_encoder", ablation.mfcc_encoder}}},
          {"lambda_c", lambda_c},
          {"patience", patience},
          {"target_accuracy", target_accuracy},
          {"subsample", subsample},
          {"val_stride", val_stride},
          {"max_steps", max_steps},
          {"stop_below_lr", stop_below_lr}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    if (a.is_string()) {
      c.ablation = parse_ablation(a.get<std::string>());
    } else {
      c.ablation.no_corr_supervision = a.value("no_corr_supervision", false);
      c.ablation.logits_output = a.value("logits_output", false);
      c.ablation.mfcc_encoder = a.value("mfcc_encoder", false);
    }
  }
  c.lambda_c = j.value("lambda_c", c.lambda_c);
  c.patience = j.value("patience", c.patience);
  c.target_accuracy = j.value("target_accuracy", c.target_accuracy);
  c.subsample = j.value("subsample", c.subsample);
  c.val_stride = j.value("val_stride", c.val_stride);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.stop_below_lr = j.value("stop_below_lr", c.stop_below_lr);
  c.threads = j.value("threads", c.threads);
  c.validate();
  return c;
}

Ablations parse_ablation(const std::string& name) {
  Ablations a;
  if (name == "no_corr_supervision") a.no_corr_supervision = true;
  else if (name == "logits_output") a.logits_output = true;
  else if (name == "mfcc_encoder") a.mfcc_encoder = true;
  else if (!name.empty() && name != "none") throw ConfigError("unknown ablation '" + name + "'");
  return a;
}

Split split_clips(int count) {
  Split s;
  for (int i = 0; i < count; ++i) (i % 5 == 4 ? s.val : s.train).push_back(i);
  return s;
}

int default_threads() {
  if (const char* env = std::getenv("CSTALK_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---- correlation stage ----

std::vector<CorrSample> correlation_samples(const std::vector<LoadedClip>& clips, const std::vector<int>& which,
                                            int stride, int random_offset) {
  std::vector<CorrSample> out;
  std::vector<int> count(kNumEmotions, 0);
  for (int c : which) {
    const auto& clip = clips[static_cast<std::size_t>(c)];
    const int n = window_count(clip.rigs.frames(), kWindowFrames, kWindowStrideFrames);
    for (int k = 0; k < n; k += stride) {
      out.push_back({c, k * kWindowStrideFrames, clip.emotion});
      ++count[static_cast<std::size_t>(index_of(clip.emotion))];
    }
  }
  const int hi = *std::max_element(count.begin(), count.end());
  const int lo = *std::min_element(count.begin(), count.end());
  if (hi == 0) throw DataError("no emotion windows available");
  if (hi - lo > 0.1 * hi)
    throw DataError("emotion classes are imbalanced: window counts range from " + std::to_string(lo) + " to " +
                    std::to_string(hi));
  const int randoms = static_cast<int>(std::lround(std::accumulate(count.begin(), count.end(), 0.0) / kNumEmotions));
  for (int i = 0; i < randoms; ++i) out.push_back({-1, random_offset + i, Emotion::random});
  return out;
}

Eigen::MatrixXd sample_window(const std::vector<LoadedClip>& clips, const CorrSample& s, std::uint64_t random_seed) {
  if (s.clip < 0) {
    const int rigs = clips.empty() ? kDefaultRigCount : clips.front().rigs.rigs();
    return random_window(rigs, random_seed, s.start).values;
  }
  return clips[static_cast<std::size_t>(s.clip)].rigs.values.middleCols(s.start, kWindowFrames);
}

namespace {

struct CorrBatchStats {
  double loss = 0.0;
  int correct = 0;
  int random_total = 0;
  int random_correct = 0;
};

CorrBatchStats eval_corr_samples(const CorrNet& net, const std::vector<LoadedClip>& clips,
                                 const std::vector<CorrSample>& samples, std::uint64_t random_seed, int threads) {
  const int chunks = static_cast<int>((samples.size() + kChunk - 1) / kChunk);
  std::vector<CorrBatchStats> per(static_cast<std::size_t>(chunks));
  parallel_for(chunks, threads, [&](int c) {
    std::vector<ad::Var> windows;
    std::vector<int> labels;
    for (std::size_t i = static_cast<std::size_t>(c) * kChunk; i < std::min(samples.size(), static_cast<std::size_t>(c + 1) * kChunk); ++i) {
      windows.push_back(ad::constant(sample_window(clips, samples[i], random_seed)));
      labels.push_back(index_of(samples[i].label));
    }
    const auto out = net.forward(windows);
    auto& s = per[static_cast<std::size_t>(c)];
    s.loss = ad::cross_entropy_rows(out.logits, labels).item() * static_cast<double>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool ok = argmax_row(out.logits.value(), static_cast<ad::Index>(i)) == labels[i];
      s.correct += ok;
      if (labels[i] == index_of(Emotion::random)) {
        ++s.random_total;
        s.random_correct += ok;
      }
    }
  });
  CorrBatchStats total;
  for (const auto& s : per) {
    total.loss += s.loss;
    total.correct += s.correct;
    total.random_total += s.random_total;
    total.random_correct += s.random_correct;
  }
  return total;
}

}  // namespace

CorrEval evaluate_correlation(const CorrNet& net, const std::vector<LoadedClip>& clips, const std::vector<int>& which,
                              int stride, std::uint64_t random_seed, int random_offset) {
  const auto samples = correlation_samples(clips, which, stride, random_offset);
  const auto s = eval_corr_samples(net, clips, samples, random_window_seed(random_seed), default_threads());
  CorrEval e;
  e.loss = s.loss / static_cast<double>(samples.size());
  e.accuracy = static_cast<double>(s.correct) / static_cast<double>(samples.size());
  e.random_accuracy = s.random_total ? static_cast<double>(s.random_correct) / s.random_total : 0.0;
  return e;
}

TrainResult train_correlation(CorrNet& net, const std::vector<LoadedClip>& clips, const TrainConfig& cfg) {
  cfg.validate();
  if (net.empty()) throw StateError("correlation model has no parameters");
  const Split split = split_clips(static_cast<int>(clips.size()));
  const std::uint64_t rseed = random_window_seed(cfg.seed);
  const auto train = correlation_samples(clips, split.train, 1, 0);
  const auto val = split.val.empty() ? std::vector<CorrSample>{}
                                     : correlation_samples(clips, split.val, cfg.val_stride, kValRandomOffset);
  const int threads = cfg.threads > 0 ? cfg.threads : default_threads();

  std::vector<std::vector<CorrSample>> pools(kNumClasses);
  for (const auto& s : train) pools[static_cast<std::size_t>(index_of(s.label))].push_back(s);
  std::size_t smallest = train.size();
  for (const auto& p : pools) smallest = std::min(smallest, p.size());
  const std::size_t per_class = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.subsample * smallest)));

  TrainResult result;
  MetricsSink sink(cfg.metrics_path, &result.metrics);
  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  const AdamConfig acfg{cfg.learning_rate()};
  ChunkRunner runner(net.params(), threads);
  double best = std::numeric_limits<double>::infinity();
  std::vector<ad::Matrix> best_values = snapshot(net.params());
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<CorrSample> order;
    for (auto& p : pools) {
      std::shuffle(p.begin(), p.end(), rng);
      order.insert(order.end(), p.begin(), p.begin() + static_cast<std::ptrdiff_t>(std::min(per_class, p.size())));
    }
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    int epoch_correct = 0;
    std::size_t seen = 0;
    bool out_of_steps = false;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      const int n = static_cast<int>(b1 - b0);
      const int chunks = (n + kChunk - 1) / kChunk;
      std::vector<double> chunk_loss(static_cast<std::size_t>(chunks), 0.0);
      std::vector<int> chunk_correct(static_cast<std::size_t>(chunks), 0);
      net.params().zero_grad();
      runner.run(net.params(), chunks, [&](int c, ParamSet& p) {
        std::vector<ad::Var> windows;
        std::vector<int> labels;
        for (std::size_t i = b0 + static_cast<std::size_t>(c) * kChunk; i < std::min(b1, b0 + static_cast<std::size_t>(c + 1) * kChunk); ++i) {
          windows.push_back(ad::constant(sample_window(clips, order[i], rseed)));
          labels.push_back(index_of(order[i].label));
        }
        const auto out = net.forward(windows, p);
        const ad::Var loss = ad::cross_entropy_rows(out.logits, labels);
        const double w = static_cast<double>(labels.size()) / n;
        ad::backward(ad::scale(loss, w));
        chunk_loss[static_cast<std::size_t>(c)] = loss.item() * w;
        for (std::size_t i = 0; i < labels.size(); ++i)
          chunk_correct[static_cast<std::size_t>(c)] += argmax_row(out.logits.value(), static_cast<ad::Index>(i)) == labels[i];
      });
      adam_step(net.params(), adam, acfg);
      ++result.steps;
      const double lc = std::accumulate(chunk_loss.begin(), chunk_loss.end(), 0.0);
      const int correct = std::accumulate(chunk_correct.begin(), chunk_correct.end(), 0);
      epoch_loss += lc * n;
      epoch_correct += correct;
      seen += static_cast<std::size_t>(n);
      sink.write({{"stage", "correlation"}, {"kind", "step"}, {"epoch", epoch}, {"step", result.steps},
                  {"L_R", 0.0}, {"L_C", lc}, {"L_G", 0.0 + lc}, {"accuracy", static_cast<double>(correct) / n}});
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
    }
    result.epochs_run = epoch;

    nlohmann::json line = {{"stage", "correlation"}, {"kind", "epoch"}, {"epoch", epoch}, {"step", result.steps},
                           {"L_R", 0.0}, {"L_C", epoch_loss / seen}, {"L_G", 0.0 + epoch_loss / seen},
                           {"accuracy", static_cast<double>(epoch_correct) / seen}};
    double monitored = epoch_loss / seen;
    double val_acc = 0.0, val_random = 0.0;
    if (!val.empty()) {
      const auto s = eval_corr_samples(net, clips, val, rseed, threads);
      monitored = s.loss / val.size();
      val_acc = static_cast<double>(s.correct) / val.size();
      line["val_L_C"] = monitored;
      line["val_accuracy"] = val_acc;
      val_random = s.random_total ? static_cast<double>(s.random_correct) / s.random_total : 0.0;
      line["val_random_accuracy"] = val_random;
    }
    sink.write(line);
    sink.flush();

    if (monitored < best) {
      best = monitored;
      best_values = snapshot(net.params());
      result.val_accuracy = val_acc;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
    if (out_of_steps) break;
    if (cfg.target_accuracy > 0.0 && !val.empty() && val_acc >= cfg.target_accuracy && val_random >= cfg.target_accuracy) {
      // Keep the parameters that met the target.
      best_values = snapshot(net.params());
      result.val_accuracy = val_acc;
      best = std::min(best, monitored);
      break;
    }
  }
  restore(net.params(), best_values);
  round_to_float32(net.params());
  result.best_val_loss = best;
  result.rng_state = rng_state(rng);
  return result;
}

// ---- generation stage ----

std::vector<GenSample> generation_samples(const std::vector<LoadedClip>& clips, const std::vector<int>& which, int stride) {
  std::vector<GenSample> out;
  for (int c : which) {
    const auto& clip = clips[static_cast<std::size_t>(c)];
    const int n = std::min(audio_window_count(clip.audio.size()),
                           window_count(clip.rigs.frames(), kWindowFrames, kWindowStrideFrames));
    for (int k = 0; k < n; k += stride) out.push_back({c, k});
  }
  return out;
}

Eigen::MatrixXd generation_features(const LoadedClip& clip, int k) {
  return window_features(clip.audio.samples.segment(audio_window_start(k), kWindowSamples)).values;
}

Eigen::MatrixXd generation_target(const LoadedClip& clip, int k) {
  return clip.rigs.values.middleCols(k * kWindowStrideFrames, kWindowFrames);
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> feature_stats(const std::vector<LoadedClip>& clips,
                                                          const std::vector<GenSample>& samples) {
  if (samples.empty()) throw DataError("no windows to compute feature statistics from");
  const std::size_t take = std::min<std::size_t>(samples.size(), 256);
  Eigen::MatrixXd sum, sq;
  double rows = 0.0;
  for (std::size_t i = 0; i < take; ++i) {
    const auto& s = samples[i * samples.size() / take];
    const Eigen::MatrixXd f = generation_features(clips[static_cast<std::size_t>(s.clip)], s.k);
    if (sum.size() == 0) {
      sum = Eigen::MatrixXd::Zero(1, f.cols());
      sq = Eigen::MatrixXd::Zero(1, f.cols());
    }
    sum += f.colwise().sum();
    sq += f.array().square().matrix().colwise().sum();
    rows += static_cast<double>(f.rows());
  }
  const Eigen::MatrixXd mean = sum / rows;
  const Eigen::MatrixXd var = (sq / rows - mean.cwiseAbs2()).cwiseMax(0.0);
  return {mean, var.cwiseSqrt().cwiseMax(1e-6)};
}

GenEval evaluate_generation(const GenNet& gen, const CorrNet& judge, const std::vector<LoadedClip>& clips,
                            const std::vector<GenSample>& samples,
                            const std::function<void(const GenSample&, const Eigen::MatrixXd&, const Eigen::MatrixXd&)>& visit) {
  const int n = static_cast<int>(samples.size());
  std::vector<double> lr(static_cast<std::size_t>(n));
  std::vector<int> hit(static_cast<std::size_t>(n));
  std::vector<Eigen::MatrixXd> preds(visit ? static_cast<std::size_t>(n) : 0);
  parallel_for(n, default_threads(), [&](int i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const auto& clip = clips[static_cast<std::size_t>(s.clip)];
    const Eigen::MatrixXd y = gen.generate(generation_features(clip, s.k), clip.emotion);
    const Eigen::MatrixXd target = generation_target(clip, s.k);
    lr[static_cast<std::size_t>(i)] = ad::mse_velocity_loss(ad::constant(Eigen::MatrixXd(y.transpose())), target.transpose()).item();
    hit[static_cast<std::size_t>(i)] = judge.predict(y) == clip.emotion;
    if (visit) preds[static_cast<std::size_t>(i)] = y;
  });
  GenEval e;
  e.windows = n;
  if (n == 0) return e;
  e.lr = std::accumulate(lr.begin(), lr.end(), 0.0) / n;
  e.match_rate = static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / n;
  if (visit)
    for (int i = 0; i < n; ++i) {
      const auto& s = samples[static_cast<std::size_t>(i)];
      visit(s, preds[static_cast<std::size_t>(i)], generation_target(clips[static_cast<std::size_t>(s.clip)], s.k));
    }
  return e;
}

TrainResult train_generation(GenNet& gen, const CorrNet& supervisor, const std::vector<LoadedClip>& clips,
                             const TrainConfig& cfg, const CorrNet* judge) {
  cfg.validate();
  if (gen.empty()) throw StateError("generator has no parameters");
  if (supervisor.empty()) throw StateError("correlation supervisor has no parameters");
  const auto& gc = gen.config();
  const auto& cc = supervisor.config();
  if (gc.rigs != cc.rigs || gc.frames != cc.frames)
    throw CompatibilityError("generator emits " + std::to_string(gc.rigs) + "x" + std::to_string(gc.frames) +
                             " windows but the correlation model expects " + std::to_string(cc.rigs) + "x" +
                             std::to_string(cc.frames));
  if (gc.frames != kWindowFrames) throw CompatibilityError("training windows are 96 frames");
  if (!clips.empty() && clips.front().rigs.rigs() != gc.rigs)
    throw CompatibilityError("corpus has " + std::to_string(clips.front().rigs.rigs()) + " rigs, generator expects " +
                             std::to_string(gc.rigs));
  if (cfg.ablation.mfcc_encoder == gc.freeze_encoder)
    throw ConfigError("the mfcc_encoder ablation and an unfrozen encoder go together");

  const int threads = cfg.threads > 0 ? cfg.threads : default_threads();
  const bool supervise = !cfg.ablation.no_corr_supervision;
  const Split split = split_clips(static_cast<int>(clips.size()));
  const auto train = generation_samples(clips, split.train, 1);
  const auto val = generation_samples(clips, split.val, cfg.val_stride);
  if (train.empty()) throw DataError("no training windows");

  // Frozen copy of the supervisor: no leaf of it requires a gradient.
  CorrNet sup(cc, supervisor.params().clone());
  sup.params().freeze_all();
  const CorrNet& judge_net = judge ? *judge : supervisor;

  ParamSet& P = gen.params();
  const bool default_stats = P.at("feat.mean").value().isZero(0.0) && P.at("feat.std").value().isOnes(0.0);
  if (default_stats) {
    const auto [mean, sd] = feature_stats(clips, train);
    gen.set_feature_stats(mean, sd);
  }
  const auto sup_before = snapshot(sup.params());
  std::vector<std::pair<std::size_t, ad::Matrix>> frozen_before;
  for (std::size_t i = 0; i < P.size(); ++i)
    if (!P.trainable(i)) frozen_before.emplace_back(i, P[i].value());

  std::vector<Eigen::MatrixXf> cache(train.size());
  auto features = [&](std::size_t i) -> Eigen::MatrixXd {
    if (cache[i].size() == 0) {
      const auto& s = train[i];
      cache[i] = generation_features(clips[static_cast<std::size_t>(s.clip)], s.k).cast<float>();
    }
    return cache[i].cast<double>();
  };

  TrainResult result;
  MetricsSink sink(cfg.metrics_path, &result.metrics);
  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  const AdamConfig acfg{cfg.learning_rate()};
  ChunkRunner runner(P, threads);
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  const std::size_t per_epoch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.subsample * train.size())));
  result.best_val_loss = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(all.begin(), all.end(), rng);
    const std::vector<std::size_t> order(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(per_epoch));
    double sum_lr = 0.0, sum_lc = 0.0;
    std::size_t count = 0;
    bool out_of_steps = false;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      const int n = static_cast<int>(b1 - b0);
      const int chunks = (n + kChunk - 1) / kChunk;
      std::vector<Eigen::MatrixXd> feats;
      for (std::size_t i = b0; i < b1; ++i) feats.push_back(features(order[i]));
      std::vector<double> chunk_lr(static_cast<std::size_t>(chunks), 0.0), chunk_lc(static_cast<std::size_t>(chunks), 0.0);
      std::vector<int> chunk_hit(static_cast<std::size_t>(chunks), 0);
      P.zero_grad();
      runner.run(P, chunks, [&](int c, ParamSet& p) {
        std::vector<ad::Var> losses, preds;
        std::vector<int> labels;
        for (std::size_t i = b0 + static_cast<std::size_t>(c) * kChunk; i < std::min(b1, b0 + static_cast<std::size_t>(c + 1) * kChunk); ++i) {
          const auto& s = train[order[i]];
          const auto& clip = clips[static_cast<std::size_t>(s.clip)];
          const ad::Var y = gen.forward(feats[i - b0], clip.emotion, p);
          losses.push_back(ad::mse_velocity_loss(y, generation_target(clip, s.k).transpose()));
          preds.push_back(ad::transpose(y));
          labels.push_back(index_of(clip.emotion));
        }
        const double w = static_cast<double>(labels.size()) / n;
        const ad::Var lr_c = ad::mean(losses);
        ad::Var total = lr_c;
        if (supervise) {
          const auto out = sup.forward(preds);
          const ad::Var lc = ad::cross_entropy_rows(out.logits, labels);
          total = ad::add(lr_c, ad::scale(lc, cfg.lambda_c));
          chunk_lc[static_cast<std::size_t>(c)] = lc.item() * w;
          for (std::size_t i = 0; i < labels.size(); ++i)
            chunk_hit[static_cast<std::size_t>(c)] += argmax_row(out.logits.value(), static_cast<ad::Index>(i)) == labels[i];
        }
        ad::backward(ad::scale(total, w));
        chunk_lr[static_cast<std::size_t>(c)] = lr_c.item() * w;
      });
      adam_step(P, adam, acfg);
      ++result.steps;
      const double lr = std::accumulate(chunk_lr.begin(), chunk_lr.end(), 0.0);
      const double lc = std::accumulate(chunk_lc.begin(), chunk_lc.end(), 0.0);
      sum_lr += lr * n;
      sum_lc += lc * n;
      count += static_cast<std::size_t>(n);
      nlohmann::json line = {{"stage", "generation"}, {"kind", "step"}, {"epoch", epoch}, {"step", result.steps},
                             {"L_R", lr}, {"L_C", lc}, {"L_G", lr + cfg.lambda_c * lc}};
      line["accuracy"] = supervise ? nlohmann::json(static_cast<double>(std::accumulate(chunk_hit.begin(), chunk_hit.end(), 0)) / n)
                                   : nlohmann::json(nullptr);
      sink.write(line);
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
    }
    result.epochs_run = epoch;
    const double seen = static_cast<double>(count);
    nlohmann::json line = {{"stage", "generation"}, {"kind", "epoch"}, {"epoch", epoch}, {"step", result.steps},
                           {"L_R", sum_lr / seen}, {"L_C", sum_lc / seen}, {"L_G", sum_lr / seen + cfg.lambda_c * sum_lc / seen},
                           {"accuracy", nullptr}};
    if (!val.empty()) {
      const auto e = evaluate_generation(gen, judge_net, clips, val);
      line["val_L_R"] = e.lr;
      line["val_match_rate"] = e.match_rate;
      result.val_lr = e.lr;
      result.val_accuracy = e.match_rate;
      result.best_val_loss = std::min(result.best_val_loss, e.lr);
    }
    sink.write(line);
    sink.flush();
    if (out_of_steps) break;
    if (cfg.stop_below_lr > 0.0 && sum_lr / seen < cfg.stop_below_lr) break;
  }

  const auto sup_after = snapshot(sup.params());
  for (std::size_t i = 0; i < sup_after.size(); ++i)
    if (!same_bytes(sup_before[i], sup_after[i]) || !same_bytes(sup_before[i], supervisor.params()[i].value()))
      throw StateError("frozen correlation tensor '" + sup.params().name(i) + "' changed during training");
  for (const auto& [i, before] : frozen_before)
    if (!same_bytes(before, P[i].value())) throw StateError("frozen generator tensor '" + P.name(i) + "' changed during training");

  round_to_float32(P);
  result.rng_state = rng_state(rng);
  return result;
}

std::vector<Eigen::MatrixXd> clip_features(const CorrNet& net, const std::vector<LoadedClip>& clips,
                                           const std::vector<int>& which) {
  std::vector<Eigen::MatrixXd> out(which.size());
  parallel_for(static_cast<int>(which.size()), default_threads(), [&](int i) {
    const auto& clip = clips[static_cast<std::size_t>(which[static_cast<std::size_t>(i)])];
    const int n = window_count(clip.rigs.frames(), kWindowFrames, kWindowStrideFrames);
    if (n == 0) throw DataError("clip '" + clip.id + "' is shorter than one window");
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(clip.rigs.rigs(), clip.rigs.rigs());
    for (int k = 0; k < n; ++k) sum += net.feature(clip.rigs.values.middleCols(k * kWindowStrideFrames, kWindowFrames));
    out[static_cast<std::size_t>(i)] = sum / n;
  });
  return out;
}

// ---- checkpoints ----

std::string encode_checkpoint(const ModelCheckpoint& ckpt) {
  Container c;
  c.header = ckpt.header;
  nlohmann::json trainable = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    c.arrays.push_back(NamedArray::from_matrix(ckpt.params.name(i), ckpt.params[i].value()));
    trainable.push_back(ckpt.params.trainable(i));
  }
  c.header["trainable"] = trainable;
  return encode_container(c);
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  write_text_file(path, encode_checkpoint(ckpt));
}

ModelCheckpoint decode_checkpoint(const std::string& bytes) {
  Container c = decode_container(bytes);
  ModelCheckpoint out;
  const auto trainable = c.header.value("trainable", nlohmann::json::array());
  for (std::size_t i = 0; i < c.arrays.size(); ++i) {
    const bool t = i < trainable.size() ? trainable[i].get<bool>() : true;
    out.params.add(c.arrays[i].name, c.arrays[i].to_matrix(), t);
  }
  c.header.erase("trainable");
  out.header = std::move(c.header);
  return out;
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_text_file(path)); }

namespace {

ModelCheckpoint checkpoint_for(const char* kind, const nlohmann::json& config, const ParamSet& params,
                               std::uint64_t registry_hash, const TrainResult* run, const TrainConfig* cfg) {
  ModelCheckpoint ck;
  ck.header = {{"kind", kind}, {"config", config}, {"registry_hash", registry_hash}};
  if (cfg) ck.header["train"] = cfg->to_json();
  if (run) {
    ck.header["metrics"] = run->metrics;
    ck.header["rng_state"] = run->rng_state;
  }
  ck.params = params.clone();
  return ck;
}

void check_kind(const ModelCheckpoint& ck, const char* kind, std::uint64_t registry_hash) {
  const std::string got = ck.header.value("kind", std::string());
  if (got != kind) throw CompatibilityError(std::string("checkpoint holds a '") + got + "' model, expected '" + kind + "'");
  if (registry_hash != 0 && ck.header.value("registry_hash", std::uint64_t{0}) != registry_hash)
    throw CompatibilityError("checkpoint was trained against a different rig registry");
}

}  // namespace

ModelCheckpoint make_checkpoint(const CorrNet& net, std::uint64_t registry_hash, const TrainResult* run, const TrainConfig* cfg) {
  return checkpoint_for("corrnet", net.config().to_json(), net.params(), registry_hash, run, cfg);
}

ModelCheckpoint make_checkpoint(const GenNet& net, std::uint64_t registry_hash, const TrainResult* run, const TrainConfig* cfg) {
  return checkpoint_for("gennet", net.config().to_json(), net.params(), registry_hash, run, cfg);
}

CorrNet corrnet_from(const ModelCheckpoint& ckpt, std::uint64_t registry_hash) {
  check_kind(ckpt, "corrnet", registry_hash);
  return CorrNet(CorrConfig::from_json(ckpt.header.at("config")), ckpt.params.clone());
}

GenNet gennet_from(const ModelCheckpoint& ckpt, std::uint64_t registry_hash) {
  check_kind(ckpt, "gennet", registry_hash);
  return GenNet(GenConfig::from_json(ckpt.header.at("config")), ckpt.params.clone());
}

void write_metrics_jsonl(const nlohmann::json& lines, const std::filesystem::path& path) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  write_text_file(path, text);
}

}  // namespace cstalk
