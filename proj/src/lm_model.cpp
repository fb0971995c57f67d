#include <cmath>
#include <sstream>

#include "json.hpp"
#include "satpref/lm.hpp"

namespace satpref {

using nlohmann::json;
namespace ad = autodiff;

namespace {
constexpr double kLayerNormEps = 1e-5;
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto positive = [](const char* name, int v) {
    if (v <= 0) throw std::invalid_argument(std::string("ModelConfig.") + name + " must be positive");
  };
  positive("vocab_size", vocab_size);
  positive("embed_dim", embed_dim);
  positive("num_layers", num_layers);
  positive("num_heads", num_heads);
  positive("context_len", context_len);
  if (embed_dim % num_heads != 0) {
    throw std::invalid_argument("ModelConfig.embed_dim must be divisible by num_heads");
  }
}

std::string ModelConfig::diff(const ModelConfig& o) const {
  std::ostringstream ss;
  auto field = [&](const char* name, auto a, auto b) {
    if (a != b) ss << name << ": " << a << " vs " << b << "; ";
  };
  field("vocab_size", vocab_size, o.vocab_size);
  field("embed_dim", embed_dim, o.embed_dim);
  field("num_layers", num_layers, o.num_layers);
  field("num_heads", num_heads, o.num_heads);
  field("context_len", context_len, o.context_len);
  field("has_value_head", has_value_head, o.has_value_head);
  field("float_width", float_width == FloatWidth::F32 ? 32 : 64, o.float_width == FloatWidth::F32 ? 32 : 64);
  return ss.str();
}

std::string model_config_to_json(const ModelConfig& c) {
  json j = {
      {"vocab_size", c.vocab_size},     {"embed_dim", c.embed_dim},
      {"num_layers", c.num_layers},     {"num_heads", c.num_heads},
      {"context_len", c.context_len},   {"has_value_head", c.has_value_head},
      {"float_width", c.float_width == FloatWidth::F32 ? 32 : 64},
  };
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  json j = json::parse(text);
  ModelConfig c;
  for (auto& [key, v] : j.items()) {
    if (key == "vocab_size") c.vocab_size = v.get<int>();
    else if (key == "embed_dim") c.embed_dim = v.get<int>();
    else if (key == "num_layers") c.num_layers = v.get<int>();
    else if (key == "num_heads") c.num_heads = v.get<int>();
    else if (key == "context_len") c.context_len = v.get<int>();
    else if (key == "has_value_head") c.has_value_head = v.get<bool>();
    else if (key == "float_width") {
      const int w = v.get<int>();
      if (w != 32 && w != 64) throw std::invalid_argument("float_width must be 32 or 64");
      c.float_width = w == 32 ? FloatWidth::F32 : FloatWidth::F64;
    } else if (key == "role") {
      // carried alongside the config in checkpoints
    } else {
      throw std::invalid_argument("unknown model config key '" + key + "'");
    }
  }
  return c;
}

std::string_view to_string(ModelRole r) {
  switch (r) {
    case ModelRole::Sft: return "sft";
    case ModelRole::RefMajor: return "ref_major";
    case ModelRole::RefMinor: return "ref_minor";
    case ModelRole::Policy: return "policy";
    default: return "value_head";
  }
}

std::optional<ModelRole> parse_model_role(std::string_view s) {
  for (auto r : {ModelRole::Sft, ModelRole::RefMajor, ModelRole::RefMinor, ModelRole::Policy, ModelRole::ValueHead}) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// State

Gradients ModelState::zero_gradients() const {
  Gradients g;
  g.reserve(parameters.size());
  for (const auto& p : parameters) g.emplace_back(p.value.rows, p.value.cols);
  return g;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters) n += p.value.size();
  return n;
}

bool ModelState::all_finite() const {
  for (const auto& p : parameters) {
    for (double v : p.value.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void ModelState::quantize_storage() {
  if (config.float_width != FloatWidth::F32) return;
  for (auto& p : parameters) {
    for (double& v : p.value.data) v = static_cast<double>(static_cast<float>(v));
  }
}

namespace {

void add_value_head(ModelState& m) {
  const auto d = static_cast<std::size_t>(m.config.embed_dim);
  m.parameters.push_back({"value_head.weight", Matrix(d, 1)});
  m.parameters.push_back({"value_head.bias", Matrix(1, 1)});
  m.config.has_value_head = true;
}

}  // namespace

ModelState init_model(const ModelConfig& config, ModelRole role, std::uint64_t seed) {
  config.validate();
  ModelState m;
  m.config = config;
  m.config.has_value_head = false;
  m.role = role;
  Rng rng(seed);
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto C = static_cast<std::size_t>(config.context_len);
  const auto L = static_cast<std::size_t>(config.num_layers);
  auto normal = [&](std::size_t r, std::size_t c, double std) {
    Matrix w(r, c);
    for (double& v : w.data) v = std * rng.normal();
    return w;
  };
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(L));
  m.parameters.push_back({"tok_emb", normal(V, d, 0.02)});
  m.parameters.push_back({"pos_emb", normal(C, d, 0.02)});
  for (std::size_t l = 0; l < L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    m.parameters.push_back({p + "ln1.gain", Matrix(1, d, 1.0)});
    m.parameters.push_back({p + "ln1.bias", Matrix(1, d)});
    m.parameters.push_back({p + "attn.qkv.weight", normal(d, 3 * d, 0.02)});
    m.parameters.push_back({p + "attn.qkv.bias", Matrix(1, 3 * d)});
    m.parameters.push_back({p + "attn.out.weight", normal(d, d, proj_std)});
    m.parameters.push_back({p + "attn.out.bias", Matrix(1, d)});
    m.parameters.push_back({p + "ln2.gain", Matrix(1, d, 1.0)});
    m.parameters.push_back({p + "ln2.bias", Matrix(1, d)});
    m.parameters.push_back({p + "mlp.fc.weight", normal(d, 4 * d, 0.02)});
    m.parameters.push_back({p + "mlp.fc.bias", Matrix(1, 4 * d)});
    m.parameters.push_back({p + "mlp.proj.weight", normal(4 * d, d, proj_std)});
    m.parameters.push_back({p + "mlp.proj.bias", Matrix(1, d)});
  }
  m.parameters.push_back({"ln_f.gain", Matrix(1, d, 1.0)});
  m.parameters.push_back({"ln_f.bias", Matrix(1, d)});
  m.parameters.push_back({"lm_head.weight", normal(d, V, 0.02)});
  m.parameters.push_back({"lm_head.bias", Matrix(1, V)});
  if (config.has_value_head) add_value_head(m);
  m.quantize_storage();
  return m;
}

ModelState with_value_head(ModelState model) {
  if (!model.config.has_value_head) add_value_head(model);
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.context_len)) {
    throw std::invalid_argument("forward: sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds context_len " + std::to_string(c.context_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of range");
  }
}

}  // namespace

ForwardPass::ForwardPass(const ModelState& model, std::span<const TokenId> tokens, bool track_gradients)
    : model_(model), tape_(track_gradients) {
  const ModelConfig& c = model.config;
  check_tokens(c, tokens);
  using PL = ParameterLayout;
  params_.reserve(model.parameters.size());
  for (const auto& p : model.parameters) params_.push_back(tape_.parameter(p.value));
  const auto L = static_cast<std::size_t>(c.num_layers);
  const auto heads = static_cast<std::size_t>(c.num_heads);

  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  std::vector<int> ids(tokens.begin(), tokens.end());

  ad::Var x = ad::add(tape_, ad::gather_rows(tape_, params_[PL::kTokenEmbedding], ids),
                      ad::gather_rows(tape_, params_[PL::kPositionEmbedding], positions));
  for (std::size_t l = 0; l < L; ++l) {
    auto P = [&](PL::LayerSlot s) { return params_[PL::layer(l, s)]; };
    ad::Var h = ad::layer_norm(tape_, x, P(PL::kLn1Gain), P(PL::kLn1Bias), kLayerNormEps);
    ad::Var qkv = ad::add_row(tape_, ad::matmul(tape_, h, P(PL::kQkvWeight)), P(PL::kQkvBias));
    ad::Var att = ad::causal_attention(tape_, qkv, heads);
    att = ad::add_row(tape_, ad::matmul(tape_, att, P(PL::kAttnOutWeight)), P(PL::kAttnOutBias));
    x = ad::add(tape_, x, att);
    h = ad::layer_norm(tape_, x, P(PL::kLn2Gain), P(PL::kLn2Bias), kLayerNormEps);
    ad::Var f = ad::gelu(tape_, ad::add_row(tape_, ad::matmul(tape_, h, P(PL::kFcWeight)), P(PL::kFcBias)));
    f = ad::add_row(tape_, ad::matmul(tape_, f, P(PL::kProjWeight)), P(PL::kProjBias));
    x = ad::add(tape_, x, f);
  }
  hidden_ = ad::layer_norm(tape_, x, params_[PL::final_gain(L)], params_[PL::final_bias(L)], kLayerNormEps);
  ad::Var logits = ad::add_row(tape_, ad::matmul(tape_, hidden_, params_[PL::output_weight(L)]),
                               params_[PL::output_bias(L)]);
  logprobs_ = ad::log_softmax(tape_, logits);
  if (c.has_value_head) {
    values_ = ad::add_row(tape_, ad::matmul(tape_, hidden_, params_[PL::value_weight(L)]),
                          params_[PL::value_bias(L)]);
  }
}

const Matrix& ForwardPass::logprobs() const { return tape_.value(logprobs_); }
const Matrix& ForwardPass::hidden() const { return tape_.value(hidden_); }

std::vector<double> ForwardPass::values() const {
  if (!values_) throw std::logic_error("value_estimates: model has no value head");
  return tape_.value(*values_).data;
}

Gradients ForwardPass::backward(const Matrix* d_logprobs, std::span<const double> d_values) {
  if (!tape_.recording()) throw std::logic_error("ForwardPass::backward on a pass without gradient tracking");
  if (used_) throw std::logic_error("ForwardPass::backward called twice");
  used_ = true;
  if (d_logprobs) {
    Matrix& g = tape_.grad(logprobs_);
    if (!g.same_shape(*d_logprobs)) throw std::invalid_argument("backward: d_logprobs shape mismatch");
    g.data = d_logprobs->data;
  }
  if (!d_values.empty()) {
    if (!values_) throw std::logic_error("backward: value gradient given but model has no value head");
    Matrix& g = tape_.grad(*values_);
    if (g.size() != d_values.size()) throw std::invalid_argument("backward: d_values length mismatch");
    std::copy(d_values.begin(), d_values.end(), g.data.begin());
  }
  tape_.backward();
  Gradients out;
  out.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (tape_.has_grad(params_[i])) {
      out.push_back(std::move(tape_.grad(params_[i])));
    } else {
      const Matrix& v = model_.parameters[i].value;
      out.emplace_back(v.rows, v.cols);
    }
  }
  return out;
}

Matrix forward_logprobs(const ModelState& model, std::span<const TokenId> tokens) {
  ForwardPass pass(model, tokens, false);
  return pass.logprobs();
}

std::vector<double> value_estimates(const ModelState& model, std::span<const TokenId> tokens) {
  if (!model.config.has_value_head) throw std::invalid_argument("value_estimates: model has no value head");
  ForwardPass pass(model, tokens, false);
  return pass.values();
}

LogLikelihood log_likelihood(const ModelState& model, const ScoredSequence& seq) {
  if (seq.mask.size() != seq.tokens.size()) throw std::invalid_argument("perplexity: mask length mismatch");
  if (!seq.mask.empty() && seq.mask[0]) throw std::invalid_argument("perplexity: position 0 cannot be scored");
  LogLikelihood ll;
  bool any = false;
  for (bool b : seq.mask) any = any || b;
  if (!any) return ll;
  Matrix lp = forward_logprobs(model, seq.tokens);
  for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
    if (!seq.mask[t]) continue;
    ll.sum += lp(t - 1, static_cast<std::size_t>(seq.tokens[t]));
    ++ll.tokens;
  }
  return ll;
}

double perplexity(const ModelState& model, std::span<const ScoredSequence> dialogues) {
  if (dialogues.empty()) throw std::invalid_argument("perplexity: empty dialogue set");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& d : dialogues) {
    const LogLikelihood ll = log_likelihood(model, d);
    sum += ll.sum;
    n += ll.tokens;
  }
  if (n == 0) throw std::invalid_argument("perplexity: no scored tokens");
  return std::exp(-sum / static_cast<double>(n));
}

double perplexity(const ModelState& model, std::span<const TokenSequence> dialogues) {
  std::vector<ScoredSequence> scored;
  scored.reserve(dialogues.size());
  for (const auto& d : dialogues) {
    ScoredSequence s{d, std::vector<bool>(d.size(), true)};
    if (!s.mask.empty()) s.mask[0] = false;
    scored.push_back(std::move(s));
  }
  return perplexity(model, scored);
}

NllResult nll_and_grads(const ModelState& model, std::span<const TokenId> tokens, const std::vector<bool>& mask) {
  if (mask.size() != tokens.size()) throw std::invalid_argument("nll_and_grads: mask length mismatch");
  if (!mask.empty() && mask[0]) throw std::invalid_argument("nll_and_grads: position 0 has no prefix to predict from");
  NllResult r;
  for (bool b : mask) r.tokens += b ? 1 : 0;
  if (r.tokens == 0) throw std::invalid_argument("nll_and_grads: mask selects no positions");
  ForwardPass pass(model, tokens, true);
  const Matrix& lp = pass.logprobs();
  Matrix d(lp.rows, lp.cols);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) continue;
    const auto tok = static_cast<std::size_t>(tokens[t]);
    r.loss -= lp(t - 1, tok);
    d(t - 1, tok) = -1.0;
  }
  r.gradients = pass.backward(&d, {});
  return r;
}

}  // namespace satpref
