#pragma once

#include <array>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockrank/corpus.hpp"
#include "blockrank/layout.hpp"

namespace blockrank {

struct LayoutConfig {
  int chunk_len = 32;
  int query_offset = kDefaultQueryOffset;

  void validate() const;
  nlohmann::json to_json() const;
  static LayoutConfig from_json(const nlohmann::json& j);
};

// Token ids the decoders need.
struct DecodeTokens {
  std::array<int, 10> digits{};
  int quote = -1;
  int close = -1;
};

// Turns retrieval examples into chunk layouts under one vocabulary/template.
class PromptBuilder {
 public:
  PromptBuilder(Vocabulary vocab, TemplateConfig tmpl, LayoutConfig layout);

  // `with_answer` appends the answer target after the scaffold (training).
  ChunkLayout build(const RetrievalExample& example, bool with_answer = true) const;

  // The `:` and `[` tokens whose last occurrences carry the relevance signal.
  std::vector<int> signal_spec() const;
  DecodeTokens decode_tokens() const;

  const Vocabulary& vocab() const { return vocab_; }
  const TemplateConfig& template_config() const { return tmpl_; }
  const LayoutConfig& layout_config() const { return layout_; }

 private:
  Vocabulary vocab_;
  TemplateConfig tmpl_;
  LayoutConfig layout_;
};

}  // namespace blockrank
