#include "icl_lab/tokenizer.hpp"

namespace icl {

Tokenizer::Tokenizer(std::vector<std::string> vocab) {
  add(std::string(kBos));
  add(std::string(kNewline));
  for (const auto& t : vocab) add(t);
}

void Tokenizer::add(const std::string& token) {
  if (token.empty()) throw TokenizationError("tokenizer: empty token in vocabulary");
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<TokenId>(vocab_.size()));
  vocab_.push_back(token);
}

Tokenizer Tokenizer::build(std::span<const std::string> corpus) {
  Tokenizer tok;
  for (const auto& text : corpus) {
    for (const auto& w : split(text)) tok.add(w);
  }
  return tok;
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == '\n') {
      flush();
      out.emplace_back(kNewline);
    } else if (c == ' ' || c == '\t' || c == '\r') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::vector<TokenId> Tokenizer::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split(text)) {
    auto it = index_.find(w);
    if (it == index_.end()) throw TokenizationError("tokenizer: out-of-vocabulary word '" + w + "'");
    ids.push_back(it->second);
  }
  return ids;
}

std::string Tokenizer::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  bool after_newline = true;
  for (TokenId id : ids) {
    const auto& t = token(id);
    if (t == kNewline) {
      out += t;
      after_newline = true;
      continue;
    }
    if (!after_newline) out += ' ';
    out += t;
    after_newline = false;
  }
  return out;
}

TokenId Tokenizer::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw TokenizationError("tokenizer: out-of-vocabulary word '" + std::string(token) + "'");
  return it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || std::size_t(id) >= vocab_.size()) {
    throw TokenizationError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
  }
  return vocab_[std::size_t(id)];
}

}  // namespace icl
