// SPDX-License-Identifier: Apache-2.0
#include "namelearn/tokenizer.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "namelearn/errors.hpp"

namespace namelearn {

namespace {

const char* const kSpecials[Vocabulary::kNumSpecials] = {"<bos>", "<eos>", "<unk>", "<pad>"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_.reserve(kNumSpecials + words.size());
  for (const char* s : kSpecials) tokens_.emplace_back(s);
  tokens_.insert(tokens_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw FormatError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::lookup(std::string_view token) const {
  return find(token).value_or(kUnk);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    words.push_back(line);
  }
  if (words.empty()) throw FormatError("vocabulary file " + path.string() + " is empty");
  return Vocabulary(words);
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write vocabulary file " + path.string());
  for (std::size_t i = Vocabulary::kNumSpecials; i < vocab.size(); ++i) {
    out << vocab.token_at(static_cast<TokenId>(i)) << '\n';
  }
  if (!out) throw FormatError("failed writing vocabulary file " + path.string());
}

TokenizeResult tokenize_detailed(std::string_view text, const Vocabulary& vocab) {
  TokenizeResult result;
  const std::string lower = lowercase(text);
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    const auto id = vocab.find(word);
    if (id) {
      result.ids.push_back(*id);
    } else {
      result.ids.push_back(Vocabulary::kUnk);
      result.unknown_words.push_back(word);
    }
    word.clear();
  };
  for (char c : lower) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      if (auto id = vocab.find(std::string_view(&c, 1))) result.ids.push_back(*id);
    } else {
      word.push_back(c);
    }
  }
  flush();
  return result;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  return tokenize_detailed(text, vocab).ids;
}

PromptTemplate default_template() { return {"default", "a photo of a", "."}; }

const std::vector<PromptTemplate>& builtin_templates() {
  static const std::vector<PromptTemplate> templates = {
      {"default", "a photo of a", "."},
      {"eurosat", "a centered satellite photo of", "."},
      {"stanford_cars", "a photo of a", "."},
      {"flowers", "a photo of a", ", a type of flower."},
      {"oxford_pets", "a photo of a", ", a type of pet."},
      {"ucf101", "a photo of a person doing", "."},
      {"aircraft", "a photo of a", ", a type of aircraft."},
      {"dtd", "", "texture."},
      {"imagenet", "a photo of a", "."},
      {"caltech101", "a photo of a", "."},
      {"food101", "a photo of", ", a type of food."},
      {"sun397", "a photo of a", "."},
  };
  return templates;
}

PromptTemplate find_template(std::string_view name) {
  const std::string key = lowercase(name);
  for (const auto& t : builtin_templates()) {
    if (t.name == key) return t;
  }
  throw ConfigError("unknown prompt template '" + std::string(name) + "'");
}

std::vector<PromptTemplate> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open template file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("template file " + path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw FormatError("template file must hold a JSON array");
  std::vector<PromptTemplate> out;
  for (const auto& entry : doc) {
    try {
      out.push_back({entry.at("name").get<std::string>(), entry.at("prefix").get<std::string>(),
                     entry.at("suffix").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("template entry " + entry.dump() + ": " + e.what());
    }
  }
  return out;
}

namespace {

TokenSequence assemble(const std::vector<TokenItem>& body, std::size_t context_length,
                       std::vector<std::string> unknown) {
  // <bos> body <eos>
  const std::size_t used = body.size() + 2;
  if (used > context_length) {
    throw ConfigError("rendered query needs " + std::to_string(used) +
                      " tokens, context length is " + std::to_string(context_length));
  }
  TokenSequence seq;
  seq.items.reserve(context_length);
  seq.items.emplace_back(VocabToken{Vocabulary::kBos});
  seq.items.insert(seq.items.end(), body.begin(), body.end());
  seq.eos_index = seq.items.size();
  seq.items.emplace_back(VocabToken{Vocabulary::kEos});
  while (seq.items.size() < context_length) seq.items.emplace_back(VocabToken{Vocabulary::kPad});
  seq.unknown_words = std::move(unknown);
  return seq;
}

void append_ids(std::vector<TokenItem>& body, const std::vector<TokenId>& ids) {
  for (TokenId id : ids) body.emplace_back(VocabToken{id});
}

}  // namespace

TokenSequence render_query(const PromptTemplate& tmpl, std::size_t class_id, std::size_t m,
                           const Vocabulary& vocab, std::size_t context_length) {
  if (m == 0) throw ConfigError("render_query: at least one class slot is required");
  std::vector<TokenItem> body;
  append_ids(body, tokenize(tmpl.prefix, vocab));
  for (std::size_t s = 0; s < m; ++s) body.emplace_back(ClassSlot{class_id, s});
  append_ids(body, tokenize(tmpl.suffix, vocab));
  return assemble(body, context_length, {});
}

TokenSequence render_named_query(const PromptTemplate& tmpl, std::string_view class_name,
                                 const Vocabulary& vocab, std::size_t context_length) {
  std::vector<TokenItem> body;
  append_ids(body, tokenize(tmpl.prefix, vocab));
  auto name = tokenize_detailed(class_name, vocab);
  append_ids(body, name.ids);
  append_ids(body, tokenize(tmpl.suffix, vocab));
  return assemble(body, context_length, std::move(name.unknown_words));
}

TokenSequence render_context_query(const PromptTemplate& tmpl, std::size_t count,
                                   const std::vector<TokenItem>& class_items,
                                   const Vocabulary& vocab, std::size_t context_length) {
  const auto prefix = tokenize(tmpl.prefix, vocab);
  if (count > prefix.size()) {
    throw ConfigError("template '" + tmpl.name + "' prefix has " + std::to_string(prefix.size()) +
                      " tokens, cannot place " + std::to_string(count) + " context slots");
  }
  std::vector<TokenItem> body;
  for (std::size_t i = 0; i < count; ++i) body.emplace_back(ContextSlot{i});
  for (std::size_t i = count; i < prefix.size(); ++i) body.emplace_back(VocabToken{prefix[i]});
  body.insert(body.end(), class_items.begin(), class_items.end());
  append_ids(body, tokenize(tmpl.suffix, vocab));
  return assemble(body, context_length, {});
}

std::string describe(const TokenSequence& seq, const Vocabulary& vocab) {
  std::ostringstream out;
  for (std::size_t i = 0; i <= seq.eos_index && i < seq.items.size(); ++i) {
    if (i) out << ' ';
    std::visit(
        [&](const auto& item) {
          using I = std::decay_t<decltype(item)>;
          if constexpr (std::is_same_v<I, VocabToken>) {
            out << vocab.token_at(item.id);
          } else if constexpr (std::is_same_v<I, ClassSlot>) {
            out << "<pl" << item.class_id << '.' << item.slot << '>';
          } else {
            out << "<ctx" << item.index << '>';
          }
        },
        seq.items[i]);
  }
  return out.str();
}

}  // namespace namelearn
