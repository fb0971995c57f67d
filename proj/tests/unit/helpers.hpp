#pragma once

#include "satpref/coper.hpp"
#include "satpref/corpus.hpp"
#include "satpref/lm.hpp"
#include "satpref/sft.hpp"

namespace testing_helpers {

inline satpref::Corpus small_corpus(int conversations, std::uint64_t seed, int exchanges = 3) {
  satpref::GeneratorConfig g;
  g.conversations = conversations;
  g.exchanges_per_conversation = exchanges;
  return satpref::split_corpus(satpref::generate_corpus(g, seed), seed + 1);
}

inline satpref::ModelConfig small_model(const satpref::Vocabulary& vocab, int dim = 16) {
  satpref::ModelConfig c;
  c.vocab_size = static_cast<int>(vocab.size());
  c.embed_dim = dim;
  c.num_layers = 1;
  c.num_heads = 2;
  c.context_len = 160;
  return c;
}

inline std::vector<satpref::SftItem> items_for(const satpref::Corpus& c, satpref::Split split, satpref::Variant v,
                                               const satpref::RationaleMap& rationales = {}) {
  const auto ex = c.in_split(split);
  return satpref::build_sft_dataset(ex, rationales, v, satpref::PromptConfig{}, c.vocabulary);
}

}  // namespace testing_helpers
