#include <algorithm>
#include <cmath>
#include <numeric>

#include "satpref/lm.hpp"

namespace satpref {

namespace k = autodiff::kernels;

namespace {
constexpr double kLayerNormEps = 1e-5;

std::span<const double> row_of(const Matrix& m, std::size_t r) { return m.row(r); }
}  // namespace

TokenId sample_token(std::span<const double> logprobs, const SamplingParams& params, Rng& rng) {
  if (logprobs.empty()) throw std::invalid_argument("sample_token: empty distribution");
  if (params.greedy) {
    return static_cast<TokenId>(std::max_element(logprobs.begin(), logprobs.end()) - logprobs.begin());
  }
  if (!(params.temperature > 0.0)) throw std::invalid_argument("sample_token: temperature must be positive");
  if (!(params.top_p > 0.0 && params.top_p <= 1.0)) throw std::invalid_argument("sample_token: top_p must be in (0, 1]");
  const std::size_t n = logprobs.size();
  std::vector<double> scaled(n), probs(n);
  for (std::size_t i = 0; i < n; ++i) scaled[i] = logprobs[i] / params.temperature;
  k::log_softmax_row(scaled, probs);
  for (double& p : probs) p = std::exp(p);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < n && mass < params.top_p) mass += probs[order[keep++]];
  std::vector<double> weights(keep);
  for (std::size_t i = 0; i < keep; ++i) weights[i] = probs[order[i]];
  return static_cast<TokenId>(order[rng.categorical(weights)]);
}

IncrementalDecoder::IncrementalDecoder(const ModelState& model) : model_(model) {
  const ModelConfig& c = model.config;
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto C = static_cast<std::size_t>(c.context_len);
  qkv_cache_.assign(static_cast<std::size_t>(c.num_layers), Matrix(C, 3 * d));
  x_.resize(d);
  h_.resize(d);
  att_.resize(d);
  tmp_.resize(d);
  fc_.resize(4 * d);
  hidden_.resize(d);
  logits_.resize(V);
  logprobs_.resize(V);
  probs_.resize(C);
}

std::span<const double> IncrementalDecoder::step(TokenId token) {
  using PL = ParameterLayout;
  const ModelConfig& c = model_.config;
  if (pos_ >= static_cast<std::size_t>(c.context_len)) throw std::out_of_range("IncrementalDecoder: context full");
  if (token < 0 || token >= c.vocab_size) throw std::invalid_argument("IncrementalDecoder: token out of range");
  const auto& P = model_.parameters;
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto heads = static_cast<std::size_t>(c.num_heads);
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto L = static_cast<std::size_t>(c.num_layers);

  auto linear = [](std::span<const double> in, const Matrix& w, const Matrix& b, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    k::row_vec_mat_acc(in, w, out);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += b.data[j];
  };

  auto tok = row_of(P[PL::kTokenEmbedding].value, static_cast<std::size_t>(token));
  auto pos = row_of(P[PL::kPositionEmbedding].value, pos_);
  for (std::size_t j = 0; j < d; ++j) x_[j] = tok[j] + pos[j];

  for (std::size_t l = 0; l < L; ++l) {
    auto W = [&](PL::LayerSlot s) -> const Matrix& { return P[PL::layer(l, s)].value; };
    k::layer_norm_row(x_, W(PL::kLn1Gain).data, W(PL::kLn1Bias).data, kLayerNormEps, h_, nullptr, nullptr);
    Matrix& cache = qkv_cache_[l];
    auto qkv = cache.row(pos_);
    linear(h_, W(PL::kQkvWeight), W(PL::kQkvBias), qkv);
    for (std::size_t h = 0; h < heads; ++h) {
      k::attend_row(std::span<const double>(qkv).subspan(h * hd, hd), cache, d + h * hd, 2 * d + h * hd, hd, pos_,
                    scale, std::span<double>(probs_).subspan(0, pos_ + 1),
                    std::span<double>(att_).subspan(h * hd, hd));
    }
    linear(att_, W(PL::kAttnOutWeight), W(PL::kAttnOutBias), tmp_);
    for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j];
    k::layer_norm_row(x_, W(PL::kLn2Gain).data, W(PL::kLn2Bias).data, kLayerNormEps, h_, nullptr, nullptr);
    linear(h_, W(PL::kFcWeight), W(PL::kFcBias), fc_);
    for (double& v : fc_) v = k::gelu(v);
    linear(fc_, W(PL::kProjWeight), W(PL::kProjBias), tmp_);
    for (std::size_t j = 0; j < d; ++j) x_[j] += tmp_[j];
  }
  k::layer_norm_row(x_, P[PL::final_gain(L)].value.data, P[PL::final_bias(L)].value.data, kLayerNormEps, hidden_,
                    nullptr, nullptr);
  linear(hidden_, P[PL::output_weight(L)].value, P[PL::output_bias(L)].value, logits_);
  k::log_softmax_row(logits_, logprobs_);
  ++pos_;
  return logprobs_;
}

TokenSequence sample(const ModelState& model, std::span<const TokenId> prompt, const SamplingParams& params,
                     std::uint64_t seed, std::optional<TokenId> stop) {
  if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
  const auto limit = static_cast<std::size_t>(model.config.context_len);
  if (prompt.size() > limit) throw std::invalid_argument("sample: prompt exceeds context_len");
  Rng rng(seed);
  IncrementalDecoder dec(model);
  std::span<const double> row;
  for (TokenId t : prompt) row = dec.step(t);
  TokenSequence out;
  for (int i = 0; i < params.max_new_tokens; ++i) {
    const TokenId t = sample_token(row, params, rng);
    out.push_back(t);
    if (stop && t == *stop) break;
    if (i + 1 == params.max_new_tokens || dec.position() >= limit) break;
    row = dec.step(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

void accumulate(Gradients& dst, const Gradients& src, double scale) {
  if (dst.empty()) {
    dst.reserve(src.size());
    for (const auto& g : src) dst.emplace_back(g.rows, g.cols);
  }
  if (dst.size() != src.size()) throw std::invalid_argument("accumulate: gradient count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!dst[i].same_shape(src[i])) throw std::invalid_argument("accumulate: gradient shape mismatch");
    for (std::size_t j = 0; j < dst[i].size(); ++j) dst[i].data[j] += scale * src[i].data[j];
  }
}

void scale_gradients(Gradients& g, double scale) {
  for (auto& m : g) {
    for (double& v : m.data) v *= scale;
  }
}

void optimizer_step(ModelState& model, const Gradients& grads, AdamWState& state, const AdamWConfig& cfg) {
  if (grads.size() != model.parameters.size()) throw std::invalid_argument("optimizer_step: gradient count mismatch");
  if (state.m.empty()) {
    state.m = model.zero_gradients();
    state.v = model.zero_gradients();
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Matrix& p = model.parameters[i].value;
    if (!p.same_shape(grads[i])) throw std::invalid_argument("optimizer_step: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i].data[j];
      double& m = state.m[i].data[j];
      double& v = state.v[i].data[j];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p.data[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.data[j]);
    }
  }
  model.quantize_storage();
}

}  // namespace satpref
