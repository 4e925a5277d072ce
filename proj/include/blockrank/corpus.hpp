#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "blockrank/common.hpp"

namespace blockrank {

namespace tokens {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kColon = ":";
inline constexpr std::string_view kOpenBracket = "[";
inline constexpr std::string_view kQuote = "'";
inline constexpr std::string_view kCloseBracket = "]";
inline constexpr std::string_view kBar = "|";
}  // namespace tokens

// Word-level vocabulary. Reserved tokens occupy the lowest ids with PAD at 0.
class Vocabulary {
 public:
  Vocabulary() = default;

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t reserved_count() const { return reserved_count_; }

  bool contains(std::string_view token) const;
  // Throws Error when the token is unknown.
  int id(std::string_view token) const;
  // Maps unknown tokens to <unk>.
  int id_or_unk(std::string_view token) const;
  const std::string& token(int id) const;
  bool is_reserved(int id) const { return id >= 0 && static_cast<std::size_t>(id) < reserved_count_; }

  int pad_id() const { return 0; }
  int digit_id(int digit) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.id_to_token_ == b.id_to_token_ && a.reserved_count_ == b.reserved_count_;
  }

 private:
  friend Vocabulary build_vocab(std::span<const std::string>, std::span<const std::string>);

  void append(std::string token);

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::size_t reserved_count_ = 0;
};

// Whitespace word-level tokenization of corpus text.
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> words);

// PAD is always placed at id 0; remaining reserved tokens follow in order, then
// corpus tokens in first-appearance order.
Vocabulary build_vocab(std::span<const std::string> corpus_texts, std::span<const std::string> reserved);

struct TemplateConfig {
  // `{query}` marks where the query is spliced when query_in_prefix is set.
  std::string instruction_text =
      "You will be given a query and a list of documents. Each document will be formatted as ID: <id> | "
      "CONTENT: <content> | END ID: <id>. You need to read carefully and understand all of them. The query "
      "is: {query}, and your goal is to find all document(s) from the list that can help answer the query.";
  bool query_in_prefix = true;
  int id_digits = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static TemplateConfig from_json(const nlohmann::json& j);
};

namespace phrases {
inline constexpr std::string_view kId = "ID";
inline constexpr std::string_view kContent = "CONTENT";
inline constexpr std::string_view kEndId = "END ID";
inline constexpr std::string_view kStart = "====== Now let's start! ======";
inline constexpr std::string_view kQuestion =
    "Which document is most relevant to answer the query? Print out the ID of the document.";
inline constexpr std::string_view kQuery = "Query";
inline constexpr std::string_view kPeriod = ".";
inline constexpr std::string_view kFollowing = "The following document(s) can help answer the query";
inline constexpr std::string_view kFinalAnswer = "Final Answer";
}  // namespace phrases

// Specials, digits, template punctuation and every template phrase (including
// the two halves of the instruction text around `{query}`).
std::vector<std::string> default_reserved_tokens(const TemplateConfig& tmpl);

struct Candidate {
  std::string doc_id;
  std::vector<std::string> content;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct RetrievalExample {
  std::vector<std::string> query;
  std::vector<Candidate> candidates;
  std::vector<int> positive_indices;  // sorted ascending

  friend bool operator==(const RetrievalExample&, const RetrievalExample&) = default;
};

struct SyntheticTaskConfig {
  int vocab_size = 256;
  int n_docs = 8;
  int doc_len = 16;
  int query_span_len = 6;
  double distractor_overlap = 0.25;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticTaskConfig from_json(const nlohmann::json& j);
};

// Renders `index` as a zero-padded decimal string of `digits` characters.
std::string format_doc_id(int index, int digits);
// Two digits up to 100 candidates, three beyond.
int id_digits_for(int n_docs);

// Synthetic content tokens are the words "w0".."w<vocab_size-1>".
std::vector<RetrievalExample> generate_synthetic_dataset(const SyntheticTaskConfig& cfg, int n_examples);

nlohmann::json example_to_json(const RetrievalExample& ex);
// `line` is only used to label errors.
RetrievalExample example_from_json(const nlohmann::json& j, std::size_t line = 0);

std::vector<RetrievalExample> ingest_examples(const std::filesystem::path& path);
void write_examples(const std::filesystem::path& path, std::span<const RetrievalExample> examples);

// Teacher-forced candidate list of exactly `n` entries: all positives, then the
// leading negatives, shuffled by `shuffle_seed`, ids reassigned 0..n-1.
RetrievalExample build_candidate_list(const RetrievalExample& example, int n, std::uint64_t shuffle_seed);

// All corpus text (queries and candidate contents) joined per sequence.
std::vector<std::string> corpus_texts(std::span<const RetrievalExample> examples);

struct PromptDocument {
  std::string doc_id;
  std::vector<int> tokens;
};

struct PromptSegments {
  std::vector<int> instruction;
  std::vector<PromptDocument> documents;
  std::vector<int> query;
  std::vector<int> answer_target;  // may be empty at inference
};

PromptSegments assemble_prompt(const RetrievalExample& example, const TemplateConfig& tmpl, const Vocabulary& vocab);

}  // namespace blockrank
