#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "satpref/autodiff.hpp"
#include "satpref/matrix.hpp"
#include "satpref/rng.hpp"
#include "satpref/vocabulary.hpp"

namespace satpref {

enum class FloatWidth { F32, F64 };

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 2;
  int context_len = 256;
  bool has_value_head = false;
  FloatWidth float_width = FloatWidth::F64;

  void validate() const;
  // Field-by-field description of differences, empty when equal.
  std::string diff(const ModelConfig& other) const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(std::string_view text);

enum class ModelRole { Sft, RefMajor, RefMinor, Policy, ValueHead };
std::string_view to_string(ModelRole r);
std::optional<ModelRole> parse_model_role(std::string_view s);

struct NamedTensor {
  std::string name;
  Matrix value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// One gradient matrix per parameter, in parameter order.
using Gradients = std::vector<Matrix>;

// Decoder-only transformer: learned token and position embeddings, pre-norm
// blocks (causal multi-head attention, GELU MLP), final norm, untied output
// projection and an optional linear value head on the final hidden states.
struct ModelState {
  ModelConfig config;
  ModelRole role = ModelRole::Sft;
  std::vector<NamedTensor> parameters;

  Gradients zero_gradients() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  // Rounds every parameter to the configured storage width.
  void quantize_storage();
  friend bool operator==(const ModelState&, const ModelState&) = default;
};

// N(0, 0.02) weights, zero biases, unit norm gains, zero value head.
ModelState init_model(const ModelConfig& config, ModelRole role, std::uint64_t seed);
// Same weights plus a zero-initialized value head (no-op if present).
ModelState with_value_head(ModelState model);

// Index of named parameters inside ModelState::parameters.
struct ParameterLayout {
  static constexpr std::size_t kPerLayer = 12;
  static constexpr std::size_t kTokenEmbedding = 0;
  static constexpr std::size_t kPositionEmbedding = 1;
  enum LayerSlot {
    kLn1Gain, kLn1Bias, kQkvWeight, kQkvBias, kAttnOutWeight, kAttnOutBias,
    kLn2Gain, kLn2Bias, kFcWeight, kFcBias, kProjWeight, kProjBias,
  };
  static std::size_t layer(std::size_t l, LayerSlot slot) { return 2 + l * kPerLayer + slot; }
  static std::size_t final_gain(std::size_t layers) { return 2 + layers * kPerLayer; }
  static std::size_t final_bias(std::size_t layers) { return final_gain(layers) + 1; }
  static std::size_t output_weight(std::size_t layers) { return final_gain(layers) + 2; }
  static std::size_t output_bias(std::size_t layers) { return final_gain(layers) + 3; }
  static std::size_t value_weight(std::size_t layers) { return final_gain(layers) + 4; }
  static std::size_t value_bias(std::size_t layers) { return final_gain(layers) + 5; }
};

// Full teacher-forced pass. With gradients enabled the pass keeps its tape
// and backward() may be called once.
class ForwardPass {
 public:
  ForwardPass(const ModelState& model, std::span<const TokenId> tokens, bool track_gradients);
  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;

  // Row t is log P(next token | tokens[0..t]).
  const Matrix& logprobs() const;
  // Final-layer hidden state (after the final norm), one row per position.
  const Matrix& hidden() const;
  // V(s_t) per position; requires a value head.
  std::vector<double> values() const;

  // Backpropagates upstream gradients of the log-prob rows and of the
  // value outputs (either may be empty) to every parameter.
  Gradients backward(const Matrix* d_logprobs, std::span<const double> d_values);

 private:
  const ModelState& model_;
  autodiff::Tape tape_;
  std::vector<autodiff::Var> params_;
  autodiff::Var logprobs_{};
  autodiff::Var hidden_{};
  std::optional<autodiff::Var> values_;
  bool used_ = false;
};

Matrix forward_logprobs(const ModelState& model, std::span<const TokenId> tokens);
std::vector<double> value_estimates(const ModelState& model, std::span<const TokenId> tokens);

// Tokens plus a per-position flag marking which tokens are scored
// (predicted from their prefix). Position 0 can never be scored.
struct ScoredSequence {
  TokenSequence tokens;
  std::vector<bool> mask;
};

// exp(-(1/|D|) sum log P(w)) over every scored token of the set.
double perplexity(const ModelState& model, std::span<const ScoredSequence> dialogues);
// Every token after the first is scored.
double perplexity(const ModelState& model, std::span<const TokenSequence> dialogues);
// Sum of log-probabilities and count of scored tokens, for aggregation.
struct LogLikelihood {
  double sum = 0.0;
  std::size_t tokens = 0;
};
LogLikelihood log_likelihood(const ModelState& model, const ScoredSequence& seq);

struct NllResult {
  double loss = 0.0;          // -sum over masked positions
  std::size_t tokens = 0;     // masked positions
  Gradients gradients;
};
NllResult nll_and_grads(const ModelState& model, std::span<const TokenId> tokens, const std::vector<bool>& mask);

struct SamplingParams {
  double top_p = 0.85;
  double temperature = 0.7;
  int max_new_tokens = 32;
  bool greedy = false;  // temperature -> 0 limit
};

// Draws one token from a log-probability row under temperature + nucleus rules.
TokenId sample_token(std::span<const double> logprobs, const SamplingParams& params, Rng& rng);

// Incremental decoding with cached keys/values; each step returns the
// log-prob row for the next token.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelState& model);
  std::span<const double> step(TokenId token);
  std::size_t position() const { return pos_; }
  std::span<const double> hidden() const { return hidden_; }

 private:
  const ModelState& model_;
  std::size_t pos_ = 0;
  std::vector<Matrix> qkv_cache_;
  std::vector<double> x_, h_, qkv_, att_, tmp_, fc_, hidden_, logits_, logprobs_, probs_;
};

// Generated continuation of `prompt` (prompt excluded). Stops after `stop`
// is emitted, after max_new_tokens, or at the context limit.
TokenSequence sample(const ModelState& model, std::span<const TokenId> prompt, const SamplingParams& params,
                     std::uint64_t seed, std::optional<TokenId> stop);

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

void optimizer_step(ModelState& model, const Gradients& grads, AdamWState& state, const AdamWConfig& config);

// dst += scale * src, shapes must match.
void accumulate(Gradients& dst, const Gradients& src, double scale = 1.0);
void scale_gradients(Gradients& g, double scale);

// ---------------------------------------------------------------------------
// Checkpoints: "PADP", u32 version, u32 JSON length + JSON header, u32
// tensor count, then per tensor: u32 name length + name, u8 dtype tag
// (1 = f32, 2 = f64), u32 rank, u64 dims, row-major little-endian payload.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ModelState& model);
ModelState deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);
// Refuses a checkpoint whose config differs from `expected`.
ModelState load_checkpoint_into(const std::string& path, const ModelConfig& expected);

}  // namespace satpref
