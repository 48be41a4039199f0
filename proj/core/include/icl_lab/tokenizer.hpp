#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "icl_lab/tensor.hpp"

namespace icl {

/// Word-level tokenizer. Words are whitespace-delimited and "\n" is a token
/// of its own; detokenize joins words with single spaces and puts no space
/// around newlines, so canonical corpus strings round-trip.
class Tokenizer {
 public:
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kNewline = "\n";

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}
  /// Adopts a stored vocabulary; specials are added in front if missing.
  explicit Tokenizer(std::vector<std::string> vocab);

  /// Specials, then every word of the corpus in first-appearance order.
  static Tokenizer build(std::span<const std::string> corpus);

  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(TokenId id) const;

  TokenId bos() const { return id(kBos); }
  int size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  /// Splits text into word strings without looking them up.
  static std::vector<std::string> split(std::string_view text);

 private:
  void add(const std::string& token);

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace icl
