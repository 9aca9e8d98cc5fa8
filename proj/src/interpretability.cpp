// SPDX-License-Identifier: Apache-2.0
#include "namelearn/interpretability.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "namelearn/errors.hpp"
#include "namelearn/io_util.hpp"
#include "namelearn/text_encoder.hpp"

namespace namelearn {

namespace {

std::string normalize_name(const std::string& s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::vector<float> normalized_row(const Tensor<float>& t, std::size_t r) {
  const auto row = t.row(r);
  double n = 0.0;
  for (float v : row) n += static_cast<double>(v) * static_cast<double>(v);
  n = std::sqrt(n);
  if (n == 0.0) throw DegenerateFeatureError("sentence feature has zero norm");
  std::vector<float> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<float>(static_cast<double>(row[i]) / n);
  return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

std::vector<ReferenceEntry> load_reference_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open reference file " + path.string());
  std::vector<ReferenceEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ReferenceEntry e;
    const auto tab = line.find('\t');
    e.name = line.substr(0, tab);
    if (tab != std::string::npos) {
      const std::string count = line.substr(tab + 1);
      std::size_t used = 0;
      try {
        e.count = std::stoull(count, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != count.size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad count '" + count + "'");
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

ReferenceVocabulary encode_reference(std::span<const ReferenceEntry> entries, const PromptTemplate& tmpl,
                                     const FrozenModel<float>& model, const Vocabulary& vocab) {
  ReferenceVocabulary ref;
  std::set<std::string> seen;
  std::vector<TokenSequence> queries;
  for (const auto& e : entries) {
    const std::string key = normalize_name(e.name);
    if (key.empty()) {
      ref.warnings.push_back("empty reference name skipped");
      continue;
    }
    if (!seen.insert(key).second) {
      ref.warnings.push_back("duplicate reference name '" + e.name + "' dropped");
      continue;
    }
    auto q = render_named_query(tmpl, key, vocab, model.config.context_length);
    if (!q.unknown_words.empty()) {
      ref.oov_names.push_back(key);
      ref.warnings.push_back("reference name '" + key + "' has out-of-vocabulary words");
    }
    ref.names.push_back(key);
    ref.counts.push_back(e.count);
    queries.push_back(std::move(q));
  }
  const auto text = encode_class_set<float>(queries, model, nullptr);
  ref.features = Tensor<float>(Shape{ref.names.size(), model.config.joint_dim});
  for (std::size_t r = 0; r < ref.names.size(); ++r) {
    const auto v = normalized_row(text, r);
    std::copy(v.begin(), v.end(), ref.features.row(r).begin());
  }
  return ref;
}

std::vector<float> learned_sentence_feature(const LearnableClassEmbeddings<float>& classes,
                                            std::size_t class_id, const PromptTemplate& tmpl,
                                            const FrozenModel<float>& model, const Vocabulary& vocab) {
  const TokenSequence q = render_query(tmpl, class_id, classes.per_class, vocab, model.config.context_length);
  const auto text = encode_class_set<float>(std::span<const TokenSequence>(&q, 1), model, &classes);
  return normalized_row(text, 0);
}

std::vector<Neighbor> nearest_names(std::span<const float> feature, const ReferenceVocabulary& reference,
                                    std::size_t k) {
  if (k > reference.size()) {
    throw ConfigError("nearest_names: k = " + std::to_string(k) + " exceeds the " +
                      std::to_string(reference.size()) + " reference names");
  }
  if (feature.size() != reference.features.cols()) {
    throw DimensionError("nearest_names: feature of width " + std::to_string(feature.size()) +
                         " against reference width " + std::to_string(reference.features.cols()));
  }
  double norm = std::sqrt(dot(feature, feature));
  if (norm == 0.0) throw DegenerateFeatureError("nearest_names: zero-norm query feature");
  std::vector<Neighbor> all;
  all.reserve(reference.size());
  for (std::size_t r = 0; r < reference.size(); ++r) {
    all.push_back({reference.names[r], dot(feature, reference.features.row(r)) / norm});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.name < b.name;
  });
  all.resize(k);
  return all;
}

std::vector<Neighbor> nearest_names(const LearnableClassEmbeddings<float>& classes, std::size_t class_id,
                                    const ReferenceVocabulary& reference, const PromptTemplate& tmpl,
                                    const FrozenModel<float>& model, const Vocabulary& vocab, std::size_t k) {
  const auto f = learned_sentence_feature(classes, class_id, tmpl, model, vocab);
  return nearest_names(f, reference, k);
}

double self_similarity(const LearnableClassEmbeddings<float>& classes, std::size_t class_id,
                       const std::string& name, const PromptTemplate& tmpl, const FrozenModel<float>& model,
                       const Vocabulary& vocab) {
  const auto learned = learned_sentence_feature(classes, class_id, tmpl, model, vocab);
  const TokenSequence q = render_named_query(tmpl, name, vocab, model.config.context_length);
  const auto text = encode_class_set<float>(std::span<const TokenSequence>(&q, 1), model, nullptr);
  return dot(learned, normalized_row(text, 0));
}

double rarity_similarity_correlation(std::span<const std::size_t> counts, std::span<const double> similarities) {
  if (counts.size() != similarities.size()) {
    throw DimensionError("rarity_similarity_correlation: " + std::to_string(counts.size()) + " counts for " +
                         std::to_string(similarities.size()) + " similarities");
  }
  if (counts.size() < 3) throw ConfigError("rarity_similarity_correlation needs at least 3 classes");
  std::vector<double> x;
  for (std::size_t c : counts) {
    if (c < 1) throw ConfigError("rarity_similarity_correlation: frequency counts must be at least 1");
    x.push_back(std::log10(static_cast<double>(c)));
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(similarities.begin(), similarities.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = similarities[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw NumericError(std::string("correlation undefined: zero variance in ") +
                       (sxx == 0.0 ? "log10(count)" : "similarity"));
  }
  return sxy / std::sqrt(sxx * syy);
}

NeighborReport interpret_classes(const LearnableClassEmbeddings<float>& classes,
                                 const std::vector<std::string>& names,
                                 const std::vector<std::size_t>& counts, const ReferenceVocabulary& reference,
                                 const PromptTemplate& tmpl, const FrozenModel<float>& model,
                                 const Vocabulary& vocab, std::size_t k) {
  if (names.size() != classes.num_classes || counts.size() != classes.num_classes) {
    throw DimensionError("interpret_classes: " + std::to_string(names.size()) + " names and " +
                         std::to_string(counts.size()) + " counts for " + std::to_string(classes.num_classes) +
                         " classes");
  }
  NeighborReport report;
  report.warnings = reference.warnings;
  std::vector<double> sims;
  for (std::size_t c = 0; c < classes.num_classes; ++c) {
    ClassInterpretation ci;
    ci.class_id = c;
    ci.name = names[c];
    ci.frequency_count = counts[c];
    const auto f = learned_sentence_feature(classes, c, tmpl, model, vocab);
    ci.neighbors = nearest_names(f, reference, std::min(k, reference.size()));
    const TokenSequence q = render_named_query(tmpl, names[c], vocab, model.config.context_length);
    const auto text = encode_class_set<float>(std::span<const TokenSequence>(&q, 1), model, nullptr);
    ci.self_similarity = dot(f, normalized_row(text, 0));
    sims.push_back(ci.self_similarity);
    report.classes.push_back(std::move(ci));
  }
  try {
    report.correlation = rarity_similarity_correlation(counts, sims);
  } catch (const Error& e) {
    report.warnings.push_back(e.what());
  }
  return report;
}

std::string neighbor_report_json(const NeighborReport& report) {
  nlohmann::json doc;
  doc["format_version"] = 1;
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : report.classes) {
    nlohmann::json neighbors = nlohmann::json::array();
    for (const auto& n : c.neighbors) neighbors.push_back({{"name", n.name}, {"cosine", n.cosine}});
    classes.push_back({{"class_id", c.class_id},
                       {"name", c.name},
                       {"frequency_count", c.frequency_count},
                       {"self_similarity", c.self_similarity},
                       {"neighbors", neighbors}});
  }
  doc["classes"] = classes;
  doc["rarity_similarity_correlation"] =
      report.correlation ? nlohmann::json(*report.correlation) : nlohmann::json(nullptr);
  doc["warnings"] = report.warnings;
  return doc.dump(2) + "\n";
}

std::string neighbor_report_csv(const NeighborReport& report) {
  std::ostringstream out;
  out << "class_id,name,rank,neighbor,cosine\n";
  for (const auto& c : report.classes) {
    for (std::size_t r = 0; r < c.neighbors.size(); ++r) {
      out << c.class_id << ',' << csv_field(c.name) << ',' << r + 1 << ',' << csv_field(c.neighbors[r].name)
          << ',' << format_real(c.neighbors[r].cosine) << '\n';
    }
  }
  return out.str();
}

std::string rarity_scatter_csv(const NeighborReport& report) {
  std::ostringstream out;
  out << "class_id,name,frequency_count,log10_count,self_similarity\n";
  for (const auto& c : report.classes) {
    out << c.class_id << ',' << csv_field(c.name) << ',' << c.frequency_count << ','
        << (c.frequency_count ? format_real(std::log10(static_cast<double>(c.frequency_count))) : "")
        << ',' << format_real(c.self_similarity) << '\n';
  }
  return out.str();
}

}  // namespace namelearn
