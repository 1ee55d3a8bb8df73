#include "cstalk/corrnet.hpp"

#include <cmath>
#include <random>

#include "cstalk/error.hpp"

namespace cstalk {

namespace {

std::string layer_name(int l, const char* what) { return "enc" + std::to_string(l) + "." + what; }

// Parameter names and shapes, in registration order.
std::vector<std::tuple<std::string, ad::Index, ad::Index>> layout(const CorrConfig& c) {
  std::vector<std::tuple<std::string, ad::Index, ad::Index>> out;
  out.emplace_back("in.w", c.frames, c.d_model);
  out.emplace_back("in.b", 1, c.d_model);
  for (int l = 0; l < c.layers; ++l) {
    out.emplace_back(layer_name(l, "qkv.w"), c.d_model, 3 * c.d_model);
    out.emplace_back(layer_name(l, "qkv.b"), 1, 3 * c.d_model);
    out.emplace_back(layer_name(l, "out.w"), c.d_model, c.d_model);
    out.emplace_back(layer_name(l, "out.b"), 1, c.d_model);
    out.emplace_back(layer_name(l, "ln1.g"), 1, c.d_model);
    out.emplace_back(layer_name(l, "ln1.b"), 1, c.d_model);
    out.emplace_back(layer_name(l, "ff1.w"), c.d_model, c.ffn);
    out.emplace_back(layer_name(l, "ff1.b"), 1, c.ffn);
    out.emplace_back(layer_name(l, "ff2.w"), c.ffn, c.d_model);
    out.emplace_back(layer_name(l, "ff2.b"), 1, c.d_model);
    out.emplace_back(layer_name(l, "ln2.g"), 1, c.d_model);
    out.emplace_back(layer_name(l, "ln2.b"), 1, c.d_model);
  }
  const int head_in = c.readout == CorrReadout::scores ? c.rigs * c.rigs : c.d_model;
  out.emplace_back("head.fc1.w", head_in, c.hidden);
  out.emplace_back("head.fc1.b", 1, c.hidden);
  out.emplace_back("head.fc2.w", c.hidden, c.classes);
  out.emplace_back("head.fc2.b", 1, c.classes);
  return out;
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::string t(suffix);
  return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
}

}  // namespace

std::string_view to_string(CorrReadout r) { return r == CorrReadout::scores ? "scores" : "logits"; }

void CorrConfig::validate() const {
  if (rigs < 1 || frames < 1 || layers < 1 || heads < 1 || d_model < 1 || ffn < 1 || hidden < 1)
    throw ConfigError("correlation config sizes must be positive");
  if (d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) + " heads");
  if (classes < 2) throw ConfigError("need at least 2 classes");
}

nlohmann::json CorrConfig::to_json() const {
  return {{"rigs", rigs},         {"frames", frames},           {"layers", layers},
          {"heads", heads},       {"d_model", d_model},         {"ffn", ffn},
          {"hidden", hidden},     {"classes", classes},         {"sum_layers", sum_layers},
          {"post_softmax", post_softmax}, {"readout", std::string(to_string(readout))}};
}

CorrConfig CorrConfig::from_json(const nlohmann::json& j) {
  CorrConfig c;
  c.rigs = j.value("rigs", c.rigs);
  c.frames = j.value("frames", c.frames);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.d_model = j.value("d_model", c.d_model);
  c.ffn = j.value("ffn", c.ffn);
  c.hidden = j.value("hidden", c.hidden);
  c.classes = j.value("classes", c.classes);
  c.sum_layers = j.value("sum_layers", c.sum_layers);
  c.post_softmax = j.value("post_softmax", c.post_softmax);
  const std::string r = j.value("readout", std::string("scores"));
  if (r == "scores") c.readout = CorrReadout::scores;
  else if (r == "logits") c.readout = CorrReadout::logits;
  else throw ConfigError("unknown readout '" + r + "'");
  c.validate();
  return c;
}

CorrNet::CorrNet(CorrConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& [name, rows, cols] : layout(cfg_)) {
    if (ends_with(name, ".g")) params_.add(name, ad::Matrix::Ones(rows, cols));
    else if (ends_with(name, ".b")) params_.add(name, ad::Matrix::Zero(rows, cols));
    else params_.add(name, uniform_fan_in(rows, cols, rows, rng));
  }
  round_to_float32(params_);
}

CorrNet::CorrNet(CorrConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const auto expect = layout(cfg_);
  if (expect.size() != params_.size())
    throw CompatibilityError("correlation model expects " + std::to_string(expect.size()) + " tensors, got " +
                             std::to_string(params_.size()));
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const auto& [name, rows, cols] = expect[i];
    if (params_.name(i) != name || params_[i].rows() != rows || params_[i].cols() != cols)
      throw CompatibilityError("correlation tensor '" + params_.name(i) + "' does not match expected '" + name + "' " +
                               std::to_string(rows) + "x" + std::to_string(cols));
  }
}

ad::Var CorrNet::encode(const ad::Var& window, const ParamSet& p, ad::Var* feature) const {
  using namespace ad;
  const CorrConfig& c = cfg_;
  if (window.rows() != c.rigs || window.cols() != c.frames)
    throw ShapeError("correlation input must be " + std::to_string(c.rigs) + "x" + std::to_string(c.frames) + ", got " +
                     std::to_string(window.rows()) + "x" + std::to_string(window.cols()));
  auto P = [&](int l, const char* what) { return p.at(layer_name(l, what)); };
  const int dh = c.d_model / c.heads;
  Var x = linear(window, p.at("in.w"), p.at("in.b"));
  std::vector<Var> per_layer;
  for (int l = 0; l < c.layers; ++l) {
    Var bias = P(l, "qkv.b");
    // Softmax ignores a per-query constant, so unless the scores are read out
    // the key bias is inert; pin it to zero so it never carries gradient noise.
    if (c.readout != CorrReadout::scores)
      bias = hcat({cols(bias, 0, c.d_model), constant(Matrix::Zero(1, c.d_model)), cols(bias, 2 * c.d_model, c.d_model)});
    const Var qkv = linear(x, P(l, "qkv.w"), bias);
    std::vector<Var> heads, scores;
    for (int h = 0; h < c.heads; ++h) {
      auto a = attention(cols(qkv, h * dh, dh), cols(qkv, c.d_model + h * dh, dh), cols(qkv, 2 * c.d_model + h * dh, dh));
      scores.push_back(c.post_softmax ? a.weights : a.scores);
      heads.push_back(a.output);
    }
    Var s = scores.front();
    for (std::size_t h = 1; h < scores.size(); ++h) s = add(s, scores[h]);
    per_layer.push_back(scale(s, 1.0 / c.heads));
    // The score readout never looks past the last layer's scores.
    if (l + 1 == c.layers && c.readout == CorrReadout::scores) break;
    const Var att = linear(hcat(heads), P(l, "out.w"), P(l, "out.b"));
    x = layer_norm_rows(add(x, att), P(l, "ln1.g"), P(l, "ln1.b"));
    const Var ff = linear(relu(linear(x, P(l, "ff1.w"), P(l, "ff1.b"))), P(l, "ff2.w"), P(l, "ff2.b"));
    x = layer_norm_rows(add(x, ff), P(l, "ln2.g"), P(l, "ln2.b"));
  }
  Var f = per_layer.front();
  for (std::size_t l = 1; l < per_layer.size(); ++l) f = add(f, per_layer[l]);
  if (!c.sum_layers) f = scale(f, 1.0 / c.layers);
  *feature = f;
  return c.readout == CorrReadout::scores ? flatten(f) : row_mean(x);
}

CorrNet::Output CorrNet::forward(const std::vector<ad::Var>& windows, const ParamSet& p) const {
  using namespace ad;
  if (windows.empty()) throw ShapeError("correlation forward: no windows");
  Output out;
  std::vector<Var> rows;
  rows.reserve(windows.size());
  for (const auto& w : windows) {
    Var f;
    rows.push_back(encode(w, p, &f));
    out.features.push_back(f);
  }
  const Var h = relu(linear(rows.size() == 1 ? rows.front() : vcat(rows), p.at("head.fc1.w"), p.at("head.fc1.b")));
  out.logits = linear(h, p.at("head.fc2.w"), p.at("head.fc2.b"));
  return out;
}

void CorrNet::check_ready() const {
  if (empty()) throw StateError("correlation model has no parameters; train or load a checkpoint first");
}

ad::Matrix CorrNet::logits(const ad::Matrix& window) const {
  check_ready();
  return forward({ad::constant(window)}).logits.value();
}

ad::Matrix CorrNet::feature(const ad::Matrix& window) const {
  check_ready();
  return forward({ad::constant(window)}).features.front().value();
}

Emotion CorrNet::predict(const ad::Matrix& window) const {
  ad::Index best;
  logits(window).row(0).maxCoeff(&best);
  return static_cast<Emotion>(best);
}

std::vector<Emotion> CorrNet::predict(const std::vector<ad::Matrix>& windows) const {
  check_ready();
  std::vector<Emotion> out;
  for (const auto& w : windows) out.push_back(predict(w));
  return out;
}

}  // namespace cstalk
