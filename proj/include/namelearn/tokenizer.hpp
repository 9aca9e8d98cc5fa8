// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace namelearn {

using TokenId = std::uint32_t;

/// Ordered token list with the reserved specials at fixed ids.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kPad = 3;
  static constexpr std::size_t kNumSpecials = 4;

  /// `words` excludes the specials; duplicates are rejected.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  /// Id of `token`, or <unk>.
  TokenId lookup(std::string_view token) const;
  const std::string& token_at(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// One token per line, UTF-8. Blank lines are ignored.
Vocabulary load_vocabulary(const std::filesystem::path& path);
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);

struct TokenizeResult {
  std::vector<TokenId> ids;
  std::vector<std::string> unknown_words;
};

/// Lowercases ASCII and splits on whitespace and punctuation. Punctuation
/// characters become tokens when the vocabulary has them and are dropped
/// otherwise; unknown words map to <unk>.
TokenizeResult tokenize_detailed(std::string_view text, const Vocabulary& vocab);
std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);

struct PromptTemplate {
  std::string name;
  std::string prefix;
  std::string suffix;
};

/// "a photo of a [CLASS]."
PromptTemplate default_template();
/// Built-in per-dataset templates, keyed by lowercase dataset name.
const std::vector<PromptTemplate>& builtin_templates();
PromptTemplate find_template(std::string_view name);
/// JSON array of {name, prefix, suffix}.
std::vector<PromptTemplate> load_templates(const std::filesystem::path& path);

struct VocabToken {
  TokenId id;
  friend bool operator==(const VocabToken&, const VocabToken&) = default;
};

/// Placeholder mapped to row `slot` of class `class_id` in the learnable table.
struct ClassSlot {
  std::size_t class_id;
  std::size_t slot;
  friend bool operator==(const ClassSlot&, const ClassSlot&) = default;
};

/// Placeholder mapped to a shared learnable context row.
struct ContextSlot {
  std::size_t index;
  friend bool operator==(const ContextSlot&, const ContextSlot&) = default;
};

using TokenItem = std::variant<VocabToken, ClassSlot, ContextSlot>;

struct TokenSequence {
  std::vector<TokenItem> items;  // always exactly context_length long
  std::size_t eos_index = 0;
  std::vector<std::string> unknown_words;
};

/// <bos> prefix [pl_1 .. pl_m] suffix <eos> <pad>...
TokenSequence render_query(const PromptTemplate& tmpl, std::size_t class_id,
                           std::size_t m, const Vocabulary& vocab,
                           std::size_t context_length);

/// Same layout as render_query with the class slots replaced by the tokens
/// of a handcrafted class name.
TokenSequence render_named_query(const PromptTemplate& tmpl,
                                 std::string_view class_name,
                                 const Vocabulary& vocab,
                                 std::size_t context_length);

/// Replaces the first `count` prefix tokens with shared context slots
/// (learnable-context mode). `class_items` fills the class position.
TokenSequence render_context_query(const PromptTemplate& tmpl, std::size_t count,
                                   const std::vector<TokenItem>& class_items,
                                   const Vocabulary& vocab,
                                   std::size_t context_length);

std::string describe(const TokenSequence& seq, const Vocabulary& vocab);

}  // namespace namelearn
