#include "blockrank/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace blockrank {

namespace {

constexpr std::string_view kQueryPlaceholder = "{query}";

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

struct InstructionParts {
  std::string prefix;
  std::string suffix;
  bool has_placeholder = false;
};

InstructionParts split_instruction(const std::string& text) {
  InstructionParts parts;
  const auto pos = text.find(kQueryPlaceholder);
  if (pos == std::string::npos) {
    parts.prefix = trim(text);
    return parts;
  }
  parts.has_placeholder = true;
  parts.prefix = trim(std::string_view(text).substr(0, pos));
  parts.suffix = trim(std::string_view(text).substr(pos + kQueryPlaceholder.size()));
  return parts;
}

bool is_decimal(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.find(std::string(token)) != token_to_id_.end();
}

int Vocabulary::id(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) throw Error("unknown token '" + std::string(token) + "'");
  return it->second;
}

int Vocabulary::id_or_unk(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  if (it != token_to_id_.end()) return it->second;
  return id(tokens::kUnk);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw Error("token id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

int Vocabulary::digit_id(int digit) const {
  if (digit < 0 || digit > 9) throw Error("digit out of range: " + std::to_string(digit));
  return id(std::string(1, static_cast<char>('0' + digit)));
}

void Vocabulary::append(std::string token) {
  const int next = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, next);
  id_to_token_.push_back(std::move(token));
}

nlohmann::json Vocabulary::to_json() const {
  return {{"tokens", id_to_token_}, {"reserved_count", reserved_count_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  for (const auto& t : j.at("tokens")) {
    auto s = t.get<std::string>();
    if (v.contains(s)) throw Error("duplicate token '" + s + "' in vocabulary file");
    v.append(std::move(s));
  }
  v.reserved_count_ = j.at("reserved_count").get<std::size_t>();
  if (v.size() == 0 || v.token(0) != tokens::kPad) throw Error("vocabulary file must start with PAD");
  if (v.reserved_count_ > v.size()) throw Error("vocabulary reserved_count exceeds size");
  return v;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

std::string detokenize(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus_texts, std::span<const std::string> reserved) {
  if (corpus_texts.empty()) throw Error("build_vocab: corpus is empty");

  Vocabulary v;
  v.append(std::string(tokens::kPad));
  for (const auto& r : reserved) {
    if (r == tokens::kPad) continue;
    if (v.contains(r)) throw Error("build_vocab: duplicate reserved token '" + r + "'");
    v.append(r);
  }
  v.reserved_count_ = v.size();

  std::size_t corpus_tokens = 0;
  for (const auto& text : corpus_texts) {
    for (auto& word : tokenize(text)) {
      ++corpus_tokens;
      const auto it = v.token_to_id_.find(word);
      if (it != v.token_to_id_.end()) {
        if (v.is_reserved(it->second))
          throw Error("build_vocab: corpus token '" + word + "' collides with a reserved token");
        continue;
      }
      v.append(std::move(word));
    }
  }
  if (corpus_tokens == 0) throw Error("build_vocab: corpus is empty");
  return v;
}

void TemplateConfig::validate() const {
  if (id_digits < 1 || id_digits > 6) throw ConfigError("template.id_digits must be in [1, 6]");
  if (trim(instruction_text).empty()) throw ConfigError("template.instruction_text must be non-empty");
}

nlohmann::json TemplateConfig::to_json() const {
  return {{"instruction_text", instruction_text}, {"query_in_prefix", query_in_prefix}, {"id_digits", id_digits}};
}

TemplateConfig TemplateConfig::from_json(const nlohmann::json& j) {
  TemplateConfig t;
  t.instruction_text = j.value("instruction_text", t.instruction_text);
  t.query_in_prefix = j.value("query_in_prefix", t.query_in_prefix);
  t.id_digits = j.value("id_digits", t.id_digits);
  t.validate();
  return t;
}

std::vector<std::string> default_reserved_tokens(const TemplateConfig& tmpl) {
  std::vector<std::string> r = {std::string(tokens::kPad), std::string(tokens::kBos), std::string(tokens::kUnk)};
  for (char d = '0'; d <= '9'; ++d) r.emplace_back(1, d);
  for (auto t : {tokens::kColon, tokens::kOpenBracket, tokens::kQuote, tokens::kCloseBracket, tokens::kBar})
    r.emplace_back(t);
  for (auto p : {phrases::kId, phrases::kContent, phrases::kEndId, phrases::kStart, phrases::kQuestion,
                 phrases::kQuery, phrases::kPeriod, phrases::kFollowing, phrases::kFinalAnswer})
    r.emplace_back(p);
  const auto parts = split_instruction(tmpl.instruction_text);
  for (const auto& p : {parts.prefix, parts.suffix}) {
    if (!p.empty() && std::find(r.begin(), r.end(), p) == r.end()) r.push_back(p);
  }
  return r;
}

void SyntheticTaskConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("task.vocab_size must be >= 2");
  if (n_docs < 2) throw ConfigError("task.n_docs must be >= 2");
  if (doc_len < 1) throw ConfigError("task.doc_len must be >= 1");
  if (query_span_len < 1 || query_span_len > doc_len)
    throw ConfigError("task.query_span_len must be in [1, task.doc_len]");
  if (!(distractor_overlap >= 0.0 && distractor_overlap <= 1.0))
    throw ConfigError("task.distractor_overlap must be in [0, 1]");
}

nlohmann::json SyntheticTaskConfig::to_json() const {
  return {{"vocab_size", vocab_size},       {"n_docs", n_docs},
          {"doc_len", doc_len},             {"query_span_len", query_span_len},
          {"distractor_overlap", distractor_overlap}, {"seed", seed}};
}

SyntheticTaskConfig SyntheticTaskConfig::from_json(const nlohmann::json& j) {
  SyntheticTaskConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_docs = j.value("n_docs", c.n_docs);
  c.doc_len = j.value("doc_len", c.doc_len);
  c.query_span_len = j.value("query_span_len", c.query_span_len);
  c.distractor_overlap = j.value("distractor_overlap", c.distractor_overlap);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string format_doc_id(int index, int digits) {
  std::string s = std::to_string(index);
  if (index < 0 || static_cast<int>(s.size()) > digits)
    throw Error("doc index " + std::to_string(index) + " does not fit in " + std::to_string(digits) + " digits");
  return std::string(static_cast<std::size_t>(digits) - s.size(), '0') + s;
}

int id_digits_for(int n_docs) {
  if (n_docs <= 100) return 2;
  if (n_docs <= 1000) return 3;
  throw Error("candidate lists above 1000 documents are not supported");
}

std::vector<RetrievalExample> generate_synthetic_dataset(const SyntheticTaskConfig& cfg, int n_examples) {
  cfg.validate();
  if (n_examples < 0) throw ConfigError("n_examples must be non-negative");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> word(0, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> slot(0, cfg.n_docs - 1);
  std::uniform_int_distribution<int> start(0, cfg.doc_len - cfg.query_span_len);
  std::uniform_int_distribution<int> pick(0, cfg.doc_len - 1);
  const int n_forced = static_cast<int>(std::lround(cfg.distractor_overlap * cfg.doc_len));
  const int digits = id_digits_for(cfg.n_docs);

  auto random_doc = [&] {
    std::vector<std::string> doc(static_cast<std::size_t>(cfg.doc_len));
    for (auto& w : doc) w = "w" + std::to_string(word(rng));
    return doc;
  };

  std::vector<RetrievalExample> out;
  out.reserve(static_cast<std::size_t>(n_examples));
  std::vector<int> positions(static_cast<std::size_t>(cfg.doc_len));
  for (int e = 0; e < n_examples; ++e) {
    RetrievalExample ex;
    const auto positive = random_doc();
    const int s = start(rng);
    ex.query.assign(positive.begin() + s, positive.begin() + s + cfg.query_span_len);
    const int positive_slot = slot(rng);

    for (int k = 0; k < cfg.n_docs; ++k) {
      Candidate c;
      c.doc_id = format_doc_id(k, digits);
      if (k == positive_slot) {
        c.content = positive;
      } else {
        c.content = random_doc();
        std::iota(positions.begin(), positions.end(), 0);
        std::shuffle(positions.begin(), positions.end(), rng);
        for (int f = 0; f < n_forced; ++f)
          c.content[static_cast<std::size_t>(positions[static_cast<std::size_t>(f)])] =
              positive[static_cast<std::size_t>(pick(rng))];
      }
      ex.candidates.push_back(std::move(c));
    }
    ex.positive_indices = {positive_slot};
    out.push_back(std::move(ex));
  }
  return out;
}

nlohmann::json example_to_json(const RetrievalExample& ex) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : ex.candidates) cands.push_back({{"id", c.doc_id}, {"text", detokenize(c.content)}});
  return {{"query", detokenize(ex.query)}, {"candidates", std::move(cands)}, {"positives", ex.positive_indices}};
}

RetrievalExample example_from_json(const nlohmann::json& j, std::size_t line) {
  const std::string where = "line " + std::to_string(line) + ": ";
  if (!j.is_object()) throw Error(where + "expected a JSON object");
  for (const char* field : {"query", "candidates"}) {
    if (!j.contains(field)) throw Error(where + "missing field '" + field + "'");
  }
  RetrievalExample ex;
  try {
    ex.query = tokenize(j.at("query").get<std::string>());
    std::unordered_set<std::string> seen;
    for (const auto& c : j.at("candidates")) {
      Candidate cand;
      cand.doc_id = c.at("id").get<std::string>();
      cand.content = tokenize(c.at("text").get<std::string>());
      if (cand.doc_id.empty()) throw Error("empty candidate id");
      if (!seen.insert(cand.doc_id).second) throw Error("duplicate doc_id '" + cand.doc_id + "'");
      ex.candidates.push_back(std::move(cand));
    }
    if (j.contains("positives")) ex.positive_indices = j.at("positives").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(where + e.what());
  } catch (const Error& e) {
    throw Error(where + e.what());
  }
  if (ex.candidates.empty()) throw Error(where + "candidate list is empty");
  std::sort(ex.positive_indices.begin(), ex.positive_indices.end());
  for (std::size_t i = 0; i < ex.positive_indices.size(); ++i) {
    const int p = ex.positive_indices[i];
    if (p < 0 || static_cast<std::size_t>(p) >= ex.candidates.size())
      throw Error(where + "positive index " + std::to_string(p) + " out of range");
    if (i && ex.positive_indices[i - 1] == p) throw Error(where + "duplicate positive index " + std::to_string(p));
  }
  return ex;
}

std::vector<RetrievalExample> ingest_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<RetrievalExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    out.push_back(example_from_json(j, line_no));
  }
  return out;
}

void write_examples(const std::filesystem::path& path, std::span<const RetrievalExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

RetrievalExample build_candidate_list(const RetrievalExample& example, int n, std::uint64_t shuffle_seed) {
  if (example.positive_indices.empty()) throw Error("build_candidate_list: example has no positives");
  if (n < 1) throw Error("build_candidate_list: N must be >= 1");
  const auto n_pos = static_cast<int>(example.positive_indices.size());
  if (n < n_pos)
    throw Error("build_candidate_list: N=" + std::to_string(n) + " is smaller than the " + std::to_string(n_pos) +
                " positives");
  if (n > static_cast<int>(example.candidates.size()))
    throw Error("build_candidate_list: N=" + std::to_string(n) + " exceeds the " +
                std::to_string(example.candidates.size()) + " available candidates");

  std::vector<std::pair<const Candidate*, bool>> chosen;
  for (int p : example.positive_indices) chosen.emplace_back(&example.candidates[static_cast<std::size_t>(p)], true);
  for (std::size_t i = 0; i < example.candidates.size() && static_cast<int>(chosen.size()) < n; ++i) {
    if (!std::binary_search(example.positive_indices.begin(), example.positive_indices.end(), static_cast<int>(i)))
      chosen.emplace_back(&example.candidates[i], false);
  }

  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(chosen.begin(), chosen.end(), rng);

  RetrievalExample out;
  out.query = example.query;
  const int digits = id_digits_for(n);
  for (int k = 0; k < n; ++k) {
    const auto& [cand, positive] = chosen[static_cast<std::size_t>(k)];
    out.candidates.push_back({format_doc_id(k, digits), cand->content});
    if (positive) out.positive_indices.push_back(k);
  }
  return out;
}

std::vector<std::string> corpus_texts(std::span<const RetrievalExample> examples) {
  std::vector<std::string> out;
  for (const auto& ex : examples) {
    out.push_back(detokenize(ex.query));
    for (const auto& c : ex.candidates) out.push_back(detokenize(c.content));
  }
  return out;
}

PromptSegments assemble_prompt(const RetrievalExample& example, const TemplateConfig& tmpl, const Vocabulary& vocab) {
  PromptSegments seg;
  std::vector<int> query_ids;
  for (const auto& w : example.query) query_ids.push_back(vocab.id_or_unk(w));

  const auto parts = split_instruction(tmpl.instruction_text);
  seg.instruction.push_back(vocab.id(tokens::kBos));
  if (!parts.prefix.empty()) seg.instruction.push_back(vocab.id(parts.prefix));
  if (tmpl.query_in_prefix) seg.instruction.insert(seg.instruction.end(), query_ids.begin(), query_ids.end());
  if (!parts.suffix.empty()) seg.instruction.push_back(vocab.id(parts.suffix));

  const int colon = vocab.id(tokens::kColon);
  const int bar = vocab.id(tokens::kBar);
  auto id_tokens = [&](const std::string& doc_id) {
    if (!is_decimal(doc_id) || static_cast<int>(doc_id.size()) != tmpl.id_digits)
      throw Error("assemble_prompt: doc id '" + doc_id + "' is not a " + std::to_string(tmpl.id_digits) +
                  "-digit zero-padded decimal");
    std::vector<int> ids;
    for (char c : doc_id) ids.push_back(vocab.digit_id(c - '0'));
    return ids;
  };

  for (const auto& cand : example.candidates) {
    PromptDocument doc{cand.doc_id, {}};
    const auto digits = id_tokens(cand.doc_id);
    auto& t = doc.tokens;
    t.push_back(vocab.id(phrases::kId));
    t.push_back(colon);
    t.insert(t.end(), digits.begin(), digits.end());
    t.push_back(bar);
    t.push_back(vocab.id(phrases::kContent));
    t.push_back(colon);
    for (const auto& w : cand.content) t.push_back(vocab.id_or_unk(w));
    t.push_back(bar);
    t.push_back(vocab.id(phrases::kEndId));
    t.push_back(colon);
    t.insert(t.end(), digits.begin(), digits.end());
    seg.documents.push_back(std::move(doc));
  }

  auto& q = seg.query;
  q.push_back(vocab.id(phrases::kStart));
  q.push_back(vocab.id(phrases::kQuestion));
  q.push_back(vocab.id(phrases::kQuery));
  q.push_back(colon);
  q.insert(q.end(), query_ids.begin(), query_ids.end());
  q.push_back(vocab.id(phrases::kPeriod));
  q.push_back(vocab.id(phrases::kFollowing));
  q.push_back(colon);
  q.push_back(vocab.id(phrases::kFinalAnswer));
  q.push_back(colon);
  q.push_back(vocab.id(tokens::kOpenBracket));
  q.push_back(vocab.id(tokens::kQuote));

  if (!example.positive_indices.empty()) {
    const auto& positive = example.candidates.at(static_cast<std::size_t>(example.positive_indices.front()));
    seg.answer_target = id_tokens(positive.doc_id);
    seg.answer_target.push_back(vocab.id(tokens::kQuote));
    seg.answer_target.push_back(vocab.id(tokens::kCloseBracket));
  }
  return seg;
}

}  // namespace blockrank
