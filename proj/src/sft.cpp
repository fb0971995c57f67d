#include "satpref/sft.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace satpref {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Base: return "base";
    case Variant::Ucot: return "ucot";
    default: return "coper";
  }
}

std::optional<Variant> parse_variant(std::string_view s) {
  for (auto v : {Variant::Base, Variant::Ucot, Variant::Coper}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::string_view to_string(Match m) { return lexicon::match_tokens()[static_cast<std::size_t>(m)]; }

std::optional<Match> parse_match(std::string_view token) {
  for (auto m : {Match::Matched, Match::PartiallyMatched, Match::NotMatched}) {
    if (to_string(m) == token) return m;
  }
  return std::nullopt;
}

bool CoperRecord::valid() const {
  return !split_tokens(intent).empty() && !split_tokens(reason).empty() && score >= 1 && score <= 5;
}

std::string_view strategy_token(Strategy s) { return lexicon::strategy_tokens()[static_cast<std::size_t>(s)]; }

std::optional<Strategy> strategy_from_token(std::string_view token) {
  for (auto s : all_strategies()) {
    if (strategy_token(s) == token) return s;
  }
  return std::nullopt;
}

std::string_view score_token(int score) {
  if (score < 1 || score > 5) throw std::out_of_range("score_token: score " + std::to_string(score));
  return lexicon::score_tokens()[static_cast<std::size_t>(score - 1)];
}

std::optional<int> score_from_token(std::string_view token) {
  auto toks = lexicon::score_tokens();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] == token) return static_cast<int>(i) + 1;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

std::string join(std::span<const std::string> words, std::size_t from, std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to; ++i) {
    if (!out.empty()) out += ' ';
    out += words[i];
  }
  return out;
}

std::string concat(std::string_view a, std::string_view b) {
  if (a.empty()) return std::string(b);
  if (b.empty()) return std::string(a);
  return std::string(a) + " " + std::string(b);
}

}  // namespace

std::string dialogue_text(const TrainingExample& ex, const PromptConfig& config) {
  const auto words = split_tokens(ex.context);
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == lexicon::kSeeker) starts.push_back(i);
  }
  std::size_t from = 0;
  const auto keep = static_cast<std::size_t>(std::max(0, config.max_context_exchanges));
  if (starts.size() > keep) from = keep == 0 ? words.size() : starts[starts.size() - keep];
  return concat(join(words, from, words.size()), ex.exchange);
}

std::string format_ucot_prompt(std::string_view context) { return concat(context, lexicon::ucot_prompt()); }
std::string format_base_prompt(std::string_view context) { return concat(context, lexicon::base_prompt()); }

std::string format_prompt(std::string_view context, Variant v) {
  return v == Variant::Base ? format_base_prompt(context) : format_ucot_prompt(context);
}

EncodedInput encode_input(const TrainingExample& ex, Variant v, const PromptConfig& config, const Vocabulary& vocab) {
  const std::string dialogue = dialogue_text(ex, config);
  const TokenSequence dialogue_tokens = vocab.encode(dialogue);
  const TokenSequence exchange_tokens = vocab.encode(ex.exchange);
  EncodedInput in;
  in.tokens.push_back(vocab.bos());
  in.tokens.insert(in.tokens.end(), dialogue_tokens.begin(), dialogue_tokens.end());
  in.exchange_end = in.tokens.size();
  in.exchange_begin = in.exchange_end - exchange_tokens.size();
  const TokenSequence prompt = vocab.encode(v == Variant::Base ? lexicon::base_prompt() : lexicon::ucot_prompt());
  in.tokens.insert(in.tokens.end(), prompt.begin(), prompt.end());
  return in;
}

// ---------------------------------------------------------------------------
// CoPeR records

std::string coper_text(const CoperRecord& r) {
  std::ostringstream ss;
  ss << lexicon::kIntentField << ' ' << r.intent << ' ' << lexicon::kStrategyField << ' ' << strategy_token(r.strategy)
     << ' ' << lexicon::kMatchField << ' ' << to_string(r.match) << ' ' << lexicon::kReasonField << ' ' << r.reason
     << ' ' << lexicon::kScoreField << ' ' << score_token(r.score) << ' ' << lexicon::kEos;
  return ss.str();
}

TokenSequence serialize_coper(const CoperRecord& record, const Vocabulary& vocab) {
  if (!record.valid()) throw std::invalid_argument("serialize_coper: invalid record");
  return vocab.encode(coper_text(record));
}

namespace {

std::optional<CoperRecord> parse_record(const std::vector<std::string>& w) {
  // Expected: intent: X+ strategy: S match: M reason: Y+ score: K [<eos>]
  std::size_t i = 0;
  auto expect = [&](std::string_view tok) {
    if (i < w.size() && w[i] == tok) {
      ++i;
      return true;
    }
    return false;
  };
  auto until = [&](std::string_view stop) -> std::optional<std::string> {
    const std::size_t from = i;
    while (i < w.size() && w[i] != stop) ++i;
    if (i == w.size() || i == from) return std::nullopt;
    return join(w, from, i);
  };
  CoperRecord r;
  if (!expect(lexicon::kIntentField)) return std::nullopt;
  auto intent = until(lexicon::kStrategyField);
  if (!intent || !expect(lexicon::kStrategyField) || i >= w.size()) return std::nullopt;
  auto strategy = strategy_from_token(w[i++]);
  if (!strategy || !expect(lexicon::kMatchField) || i >= w.size()) return std::nullopt;
  auto match = parse_match(w[i++]);
  if (!match || !expect(lexicon::kReasonField)) return std::nullopt;
  auto reason = until(lexicon::kScoreField);
  if (!reason || !expect(lexicon::kScoreField) || i >= w.size()) return std::nullopt;
  auto score = score_from_token(w[i++]);
  if (!score) return std::nullopt;
  if (i < w.size() && w[i] == lexicon::kEos) ++i;
  if (i != w.size()) return std::nullopt;
  r.intent = *intent;
  r.strategy = *strategy;
  r.match = *match;
  r.reason = *reason;
  r.score = *score;
  return r;
}

}  // namespace

Prediction parse_prediction(std::span<const TokenId> generated, const Vocabulary& vocab) {
  Prediction p;
  std::vector<std::string> words;
  words.reserve(generated.size());
  for (TokenId t : generated) words.push_back(vocab.token(t));
  for (std::size_t i = words.size(); i-- > 0;) {
    if (auto s = score_from_token(words[i])) {
      p.score = s;
      p.score_position = i;
      break;
    }
  }
  // Anything after the first <eos> is not part of the answer.
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == lexicon::kEos) {
      words.resize(i + 1);
      break;
    }
  }
  p.record = parse_record(words);
  return p;
}

// ---------------------------------------------------------------------------
// Dataset

std::vector<SftItem> build_sft_dataset(std::span<const TrainingExample* const> examples, const RationaleMap& rationales,
                                       Variant variant, const PromptConfig& prompt, const Vocabulary& vocab) {
  std::vector<SftItem> items;
  items.reserve(examples.size());
  const TokenId eos = vocab.eos();
  for (const TrainingExample* ex : examples) {
    SftItem item;
    item.key = ex->key();
    item.gold_score = ex->score;
    EncodedInput in = encode_input(*ex, variant, prompt, vocab);
    item.tokens = std::move(in.tokens);
    item.exchange_begin = in.exchange_begin;
    item.exchange_end = in.exchange_end;
    item.input_len = item.tokens.size();
    TokenSequence target;
    if (variant == Variant::Coper) {
      auto it = rationales.find(item.key);
      if (it == rationales.end()) throw std::invalid_argument("build_sft_dataset: no rationale for " + item.key);
      if (it->second.score != ex->score) {
        throw std::invalid_argument("build_sft_dataset: rationale score disagrees with gold for " + item.key);
      }
      target = serialize_coper(it->second, vocab);
      if (target.empty() || target.back() != eos) throw std::logic_error("serialized record lacks <eos>");
      item.score_position = item.input_len + target.size() - 2;
    } else {
      target = {vocab.id(score_token(ex->score))};
      item.score_position = item.input_len;
    }
    item.tokens.insert(item.tokens.end(), target.begin(), target.end());
    item.mask.assign(item.tokens.size(), false);
    for (std::size_t t = item.input_len; t < item.tokens.size(); ++t) item.mask[t] = true;
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<bool> score_only_mask(const SftItem& item) {
  std::vector<bool> m(item.tokens.size(), false);
  m[item.score_position] = true;
  return m;
}

std::vector<bool> rationale_mask(const SftItem& item) {
  std::vector<bool> m = item.mask;
  m[item.score_position] = false;
  return m;
}

// ---------------------------------------------------------------------------
// Training

void SftConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("sft.lr must be non-negative");
  if (batch < 1) throw std::invalid_argument("sft.batch must be positive");
  if (max_epochs < 0) throw std::invalid_argument("sft.max_epochs must be non-negative");
  if (patience < 0) throw std::invalid_argument("sft.patience must be non-negative");
}

SftConfig sft_config_from_json(std::string_view text) {
  auto j = nlohmann::json::parse(text);
  SftConfig c;
  for (auto& [k, v] : j.items()) {
    if (k == "lr") c.lr = v.get<double>();
    else if (k == "batch") c.batch = v.get<int>();
    else if (k == "max_epochs") c.max_epochs = v.get<int>();
    else if (k == "patience") c.patience = v.get<int>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else throw std::invalid_argument("unknown sft config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::string sft_config_to_json(const SftConfig& c) {
  return nlohmann::json{{"lr", c.lr}, {"batch", c.batch}, {"max_epochs", c.max_epochs}, {"patience", c.patience},
                        {"weight_decay", c.weight_decay}}
      .dump();
}

double mean_nll(const ModelState& model, std::span<const SftItem> items) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& item : items) {
    const LogLikelihood ll = log_likelihood(model, ScoredSequence{item.tokens, item.mask});
    sum -= ll.sum;
    n += ll.tokens;
  }
  if (n == 0) throw std::invalid_argument("mean_nll: no scored tokens");
  return sum / static_cast<double>(n);
}

SftResult train_sft(ModelState model, std::span<const SftItem> train, std::span<const SftItem> valid,
                    const SftConfig& config, std::uint64_t seed, const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty() || valid.empty()) throw std::invalid_argument("train_sft: train and validation sets must be non-empty");
  SftResult result;
  AdamWState opt;
  AdamWConfig adam;
  adam.lr = config.lr;
  adam.weight_decay = config.weight_decay;
  double best = mean_nll(model, valid);
  result.model = model;
  int stale = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(config.batch));
      Gradients grads;
      double loss = 0.0;
      std::size_t tokens = 0;
      for (std::size_t i = b; i < e; ++i) {
        const SftItem& item = train[order[i]];
        NllResult r = nll_and_grads(model, item.tokens, item.mask);
        loss += r.loss;
        tokens += r.tokens;
        accumulate(grads, r.gradients);
      }
      const double step_loss = loss / static_cast<double>(tokens);
      if (!std::isfinite(step_loss)) {
        throw TrainingDiverged("train_sft: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(result.step_losses.size() + 1));
      }
      scale_gradients(grads, 1.0 / static_cast<double>(tokens));
      optimizer_step(model, grads, opt, adam);
      if (!model.all_finite()) {
        throw TrainingDiverged("train_sft: non-finite parameters after step " +
                               std::to_string(result.step_losses.size() + 1));
      }
      result.step_losses.push_back(step_loss);
      epoch_sum += loss;
      epoch_tokens += tokens;
    }
    EpochLoss el{epoch, epoch_sum / static_cast<double>(epoch_tokens), mean_nll(model, valid)};
    result.curve.push_back(el);
    if (on_epoch) on_epoch(el);
    if (el.valid_nll < best) {
      best = el.valid_nll;
      result.model = model;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

int generation_budget(Variant v) { return v == Variant::Coper ? 32 : 1; }

Prediction predict(const ModelState& model, const Vocabulary& vocab, const TrainingExample& ex, Variant v,
                   const PromptConfig& prompt, const SamplingParams& sampling, std::uint64_t seed) {
  EncodedInput in = encode_input(ex, v, prompt, vocab);
  SamplingParams p = sampling;
  p.max_new_tokens = std::min(p.max_new_tokens, generation_budget(v));
  const auto room = static_cast<int>(model.config.context_len) - static_cast<int>(in.tokens.size());
  if (room < 1) throw std::invalid_argument("predict: input does not fit the context window");
  p.max_new_tokens = std::min(p.max_new_tokens, room);
  const TokenSequence out = sample(model, in.tokens, p, seed, vocab.eos());
  return parse_prediction(out, vocab);
}

}  // namespace satpref
