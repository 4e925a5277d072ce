#include "blockrank/prompt.hpp"

namespace blockrank {

void LayoutConfig::validate() const {
  if (chunk_len < 1) throw ConfigError("layout.chunk_len must be >= 1");
  if (query_offset < 1) throw ConfigError("layout.query_offset must be >= 1");
}

nlohmann::json LayoutConfig::to_json() const { return {{"chunk_len", chunk_len}, {"query_offset", query_offset}}; }

LayoutConfig LayoutConfig::from_json(const nlohmann::json& j) {
  LayoutConfig c;
  c.chunk_len = j.value("chunk_len", c.chunk_len);
  c.query_offset = j.value("query_offset", c.query_offset);
  c.validate();
  return c;
}

PromptBuilder::PromptBuilder(Vocabulary vocab, TemplateConfig tmpl, LayoutConfig layout)
    : vocab_(std::move(vocab)), tmpl_(std::move(tmpl)), layout_(layout) {
  tmpl_.validate();
  layout_.validate();
}

ChunkLayout PromptBuilder::build(const RetrievalExample& example, bool with_answer) const {
  auto segments = assemble_prompt(example, tmpl_, vocab_);
  if (!with_answer) segments.answer_target.clear();
  const auto spec = signal_spec();
  return build_layout(segments, layout_.chunk_len, layout_.query_offset, spec);
}

std::vector<int> PromptBuilder::signal_spec() const {
  return {vocab_.id(tokens::kColon), vocab_.id(tokens::kOpenBracket)};
}

DecodeTokens PromptBuilder::decode_tokens() const {
  DecodeTokens t;
  for (int d = 0; d < 10; ++d) t.digits[static_cast<std::size_t>(d)] = vocab_.digit_id(d);
  t.quote = vocab_.id(tokens::kQuote);
  t.close = vocab_.id(tokens::kCloseBracket);
  return t;
}

}  // namespace blockrank
