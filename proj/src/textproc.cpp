#include "capmine/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <fstream>
#include <sstream>

#include "capmine/rng.hpp"
#include "json.hpp"

namespace capmine {

namespace {

bool is_word_char(unsigned char c) {
  return std::isalnum(c) != 0 || c >= 0x80;
}

const std::string& word_for_id(const std::map<std::string, int>& m, int id,
                               const char* kind) {
  for (const auto& [word, mapped] : m) {
    if (mapped == id) return word;
  }
  throw ValidationError(std::string("no ") + kind + " word for id " +
                        std::to_string(id));
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (is_word_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<TokenId> LanguageVocab::encode_framed(
    const std::vector<std::string>& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(kBos);
  for (const auto& t : tokens) ids.push_back(id_of(t));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::string> LanguageVocab::decode(const std::vector<TokenId>& ids,
                                               bool keep_specials) const {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id < 0 || id >= size()) {
      throw ValidationError("token id " + std::to_string(id) +
                            " out of vocabulary range");
    }
    if (!keep_specials && id < 4 && id != kUnk) continue;
    out.push_back(id_to_token[static_cast<size_t>(id)]);
  }
  return out;
}

std::pair<LanguageVocab, std::vector<SentenceRecord>> build_vocab(
    const std::vector<SentenceRecord>& sentences, int min_len, int max_len,
    int min_freq) {
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError("build_vocab requires max_len >= min_len >= 1");
  }
  std::vector<SentenceRecord> kept;
  for (const auto& s : sentences) {
    int n = static_cast<int>(s.tokens.size());
    if (n >= min_len && n <= max_len) kept.push_back(s);
  }
  if (kept.empty()) {
    throw EmptyCorpusError("no sentence within length bounds [" +
                           std::to_string(min_len) + ", " +
                           std::to_string(max_len) + "]");
  }

  std::map<std::string, int> freq;
  for (const auto& s : kept) {
    for (const auto& t : s.tokens) ++freq[t];
  }

  std::vector<std::pair<std::string, int>> words(freq.begin(), freq.end());
  std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  LanguageVocab vocab;
  vocab.lang = kept.front().lang;
  vocab.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [word, count] : words) {
    if (count < min_freq) continue;
    vocab.token_to_id[word] = vocab.size();
    vocab.id_to_token.push_back(word);
  }
  return {std::move(vocab), std::move(kept)};
}

void ConceptLexicon::validate() const {
  for (const auto& [w, id] : word_to_relation) {
    if (word_to_category.count(w)) {
      throw ValidationError("lexicon word '" + w + "' is both category and relation");
    }
  }
  for (const auto& [w, id] : word_to_attribute) {
    if (word_to_category.count(w) || word_to_relation.count(w)) {
      throw ValidationError("lexicon word '" + w + "' appears in two kinds");
    }
  }
}

const std::string& ConceptLexicon::category_word(CategoryId id) const {
  return word_for_id(word_to_category, id, "category");
}
const std::string& ConceptLexicon::relation_word(RelationId id) const {
  return word_for_id(word_to_relation, id, "relation");
}
const std::string& ConceptLexicon::attribute_word(AttributeId id) const {
  return word_for_id(word_to_attribute, id, "attribute");
}

ParsedSentence parse_sentence(const SentenceRecord& record,
                              const LanguageVocab& vocab,
                              const ConceptLexicon& lexicon,
                              const ParseOptions& opts) {
  ParsedSentence parsed;
  parsed.sentence_id = record.sentence_id;
  parsed.token_ids = vocab.encode_framed(record.tokens);

  enum class Kind { category, relation };
  struct Salient {
    Kind kind;
    int id;
  };
  std::vector<Salient> salient;

  std::vector<CategoryId> seen;
  for (size_t i = 0; i < record.tokens.size(); ++i) {
    const std::string& w = record.tokens[i];
    if (auto it = lexicon.word_to_category.find(w);
        it != lexicon.word_to_category.end()) {
      salient.push_back({Kind::category, it->second});
      bool duplicate =
          std::find(seen.begin(), seen.end(), it->second) != seen.end();
      if (!duplicate || opts.keep_duplicate_concepts) {
        parsed.concepts.push_back(it->second);
      }
      if (!duplicate) seen.push_back(it->second);
      if (i > 0) {
        auto at = lexicon.word_to_attribute.find(record.tokens[i - 1]);
        if (at != lexicon.word_to_attribute.end()) {
          parsed.attr_pairs.emplace_back(at->second, it->second);
        }
      }
    } else if (auto rt = lexicon.word_to_relation.find(w);
               rt != lexicon.word_to_relation.end()) {
      salient.push_back({Kind::relation, rt->second});
    }
  }

  // cat-rel-cat with nothing salient in between; matched spans are consumed.
  size_t p = 0;
  while (p + 2 < salient.size()) {
    if (salient[p].kind == Kind::category &&
        salient[p + 1].kind == Kind::relation &&
        salient[p + 2].kind == Kind::category) {
      parsed.triplets.push_back(
          {salient[p].id, salient[p + 1].id, salient[p + 2].id});
      p += 3;
    } else {
      p += 1;
    }
  }
  return parsed;
}

GrammarFillers grammar_fillers(const std::string& lang) {
  if (lang == "en") return {"a", "and", "there", "is"};
  return {lang + "a", lang + "and", lang + "there", lang + "is"};
}

SentenceRecord generate_caption(const ImageRecord& image,
                                const ConceptLexicon& lexicon, uint64_t seed,
                                const std::string& sentence_id) {
  if (image.regions.empty()) {
    throw ValidationError("cannot caption image '" + image.image_id +
                          "' with no regions");
  }
  const GrammarFillers filler = grammar_fillers(lexicon.lang);

  std::vector<CategoryId> cats = image.category_set();

  // Attribute pairs and category-level relation triples, deduplicated in
  // appearance order.
  std::vector<std::pair<AttributeId, CategoryId>> attr_pairs;
  for (const auto& r : image.regions) {
    if (!r.attribute) continue;
    std::pair<AttributeId, CategoryId> p{*r.attribute, r.category};
    if (std::find(attr_pairs.begin(), attr_pairs.end(), p) == attr_pairs.end()) {
      attr_pairs.push_back(p);
    }
  }
  std::vector<std::array<int, 3>> triples;
  for (const auto& rel : image.relations) {
    const DetectedRegion* sub = image.find_region(rel.subject_region_id);
    const DetectedRegion* obj = image.find_region(rel.object_region_id);
    if (!sub || !obj) {
      throw ValidationError("relation references unknown region in image '" +
                            image.image_id + "'");
    }
    std::array<int, 3> t{sub->category, rel.relation, obj->category};
    if (std::find(triples.begin(), triples.end(), t) == triples.end()) {
      triples.push_back(t);
    }
  }

  std::map<CategoryId, std::deque<AttributeId>> pending;
  for (const auto& [a, c] : attr_pairs) pending[c].push_back(a);
  std::vector<CategoryId> mentioned;

  auto mention = [&](CategoryId cat) {
    std::vector<std::string> out{filler.a};
    auto it = pending.find(cat);
    if (it != pending.end() && !it->second.empty()) {
      out.push_back(lexicon.attribute_word(it->second.front()));
      it->second.pop_front();
    }
    out.push_back(lexicon.category_word(cat));
    if (std::find(mentioned.begin(), mentioned.end(), cat) == mentioned.end()) {
      mentioned.push_back(cat);
    }
    return out;
  };

  std::vector<std::vector<std::string>> segments;
  for (const auto& t : triples) {
    std::vector<std::string> seg = mention(t[0]);
    seg.push_back(lexicon.relation_word(t[1]));
    auto obj = mention(t[2]);
    seg.insert(seg.end(), obj.begin(), obj.end());
    segments.push_back(std::move(seg));
  }
  for (CategoryId cat : cats) {
    auto it = pending.find(cat);
    while (it != pending.end() && !it->second.empty()) {
      segments.push_back(mention(cat));
    }
  }
  for (CategoryId cat : cats) {
    if (std::find(mentioned.begin(), mentioned.end(), cat) == mentioned.end()) {
      segments.push_back(mention(cat));
    }
  }

  Rng rng(derive_seed(seed, image.image_id));
  rng.shuffle(segments);

  SentenceRecord sentence;
  sentence.sentence_id = sentence_id;
  sentence.lang = lexicon.lang;
  sentence.gt_image_id = image.image_id;
  bool has_relation_clause = !triples.empty();
  if (!has_relation_clause) {
    sentence.tokens.push_back(filler.there);
    sentence.tokens.push_back(filler.is);
  }
  for (size_t s = 0; s < segments.size(); ++s) {
    if (s > 0) sentence.tokens.push_back(filler.and_);
    sentence.tokens.insert(sentence.tokens.end(), segments[s].begin(),
                           segments[s].end());
  }
  return sentence;
}

ConceptLexicon translate_lexicon(const ConceptLexicon& lexicon,
                                 const WordMap& map) {
  auto lookup = [&](const std::string& word) -> const std::string& {
    auto it = map.entries.find(word);
    if (it == map.entries.end()) {
      throw TranslationCollisionError("word map is not total: missing '" +
                                      word + "'");
    }
    if (it->second.empty()) {
      throw ValidationError("word map sends '" + word + "' to empty string");
    }
    return it->second;
  };

  ConceptLexicon out;
  out.lang = map.target_lang;
  auto translate_map = [&](const std::map<std::string, int>& src,
                           std::map<std::string, int>& dst,
                           const char* kind) {
    for (const auto& [word, id] : src) {
      const std::string& target = lookup(word);
      auto [it, inserted] = dst.emplace(target, id);
      if (!inserted && it->second != id) {
        throw TranslationCollisionError(
            std::string("target word '") + target + "' maps two different " +
            kind + " ids " + std::to_string(it->second) + " and " +
            std::to_string(id));
      }
    }
  };
  translate_map(lexicon.word_to_category, out.word_to_category, "category");
  translate_map(lexicon.word_to_relation, out.word_to_relation, "relation");
  translate_map(lexicon.word_to_attribute, out.word_to_attribute, "attribute");
  out.validate();
  return out;
}

ConceptLexicon builtin_lexicon(int n_categories, int n_relations,
                               int n_attributes) {
  static const std::vector<std::string> kCategories = {
      "dog",    "cat",    "ball",   "tree",   "car",      "house",  "bird",
      "horse",  "boat",   "chair",  "table",  "cup",      "bottle", "clock",
      "lamp",   "book",   "shoe",   "hat",    "kite",     "bike",   "bus",
      "train",  "plane",  "bench",  "fence",  "flower",   "rock",   "river",
      "bridge", "tower",  "box",    "bag",    "phone",    "guitar", "drum",
      "apple",  "banana", "pizza",  "cake",   "umbrella"};
  static const std::vector<std::string> kRelations = {
      "chases", "holds", "rides", "pushes", "carries", "bites"};
  static const std::vector<std::string> kAttributes = {"red", "blue", "green",
                                                       "small", "big"};
  if (n_categories < 1 || n_relations < 1 || n_attributes < 0) {
    throw ConfigError("lexicon needs >=1 category, >=1 relation");
  }
  ConceptLexicon lex;
  lex.lang = "en";
  for (int i = 0; i < n_categories; ++i) {
    std::string w = i < static_cast<int>(kCategories.size())
                        ? kCategories[static_cast<size_t>(i)]
                        : "obj" + std::to_string(i);
    lex.word_to_category[w] = i;
  }
  for (int i = 0; i < n_relations; ++i) {
    std::string w = i < static_cast<int>(kRelations.size())
                        ? kRelations[static_cast<size_t>(i)]
                        : "rel" + std::to_string(i);
    lex.word_to_relation[w] = i;
  }
  for (int i = 0; i < n_attributes; ++i) {
    std::string w = i < static_cast<int>(kAttributes.size())
                        ? kAttributes[static_cast<size_t>(i)]
                        : "attr" + std::to_string(i);
    lex.word_to_attribute[w] = i;
  }
  lex.validate();
  return lex;
}

WordMap pseudo_language_map(const ConceptLexicon& lexicon,
                            const std::string& target_lang) {
  WordMap map;
  map.source_lang = lexicon.lang;
  map.target_lang = target_lang;
  auto add = [&](const std::map<std::string, int>& m) {
    for (const auto& [word, id] : m) map.entries[word] = target_lang + word;
  };
  add(lexicon.word_to_category);
  add(lexicon.word_to_relation);
  add(lexicon.word_to_attribute);
  return map;
}

void write_lexicon_tsv(const ConceptLexicon& lexicon, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& [w, id] : lexicon.word_to_category) {
    out << w << '\t' << "category" << '\t' << id << '\n';
  }
  for (const auto& [w, id] : lexicon.word_to_relation) {
    out << w << '\t' << "relation" << '\t' << id << '\n';
  }
  for (const auto& [w, id] : lexicon.word_to_attribute) {
    out << w << '\t' << "attribute" << '\t' << id << '\n';
  }
}

ConceptLexicon read_lexicon_tsv(const std::string& path,
                                const std::string& lang) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  ConceptLexicon lex;
  lex.lang = lang;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word, kind, id_str;
    if (!std::getline(ss, word, '\t') || !std::getline(ss, kind, '\t') ||
        !std::getline(ss, id_str)) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected word<TAB>kind<TAB>id");
    }
    int id = 0;
    try {
      id = std::stoi(id_str);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": bad id '" +
                       id_str + "'");
    }
    if (kind == "category") {
      lex.word_to_category[word] = id;
    } else if (kind == "relation") {
      lex.word_to_relation[word] = id;
    } else if (kind == "attribute") {
      lex.word_to_attribute[word] = id;
    } else {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": unknown kind '" + kind + "'");
    }
  }
  lex.validate();
  return lex;
}

void write_wordmap_tsv(const WordMap& map, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& [src, dst] : map.entries) out << src << '\t' << dst << '\n';
}

WordMap read_wordmap_tsv(const std::string& path,
                         const std::string& source_lang,
                         const std::string& target_lang) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  WordMap map;
  map.source_lang = source_lang;
  map.target_lang = target_lang;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected source<TAB>target");
    }
    map.entries[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return map;
}

void write_vocab_json(const LanguageVocab& vocab, const std::string& path) {
  nlohmann::json j;
  j["lang"] = vocab.lang;
  j["tokens"] = std::vector<std::string>(vocab.id_to_token.begin() + 4,
                                         vocab.id_to_token.end());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump() << '\n';
}

LanguageVocab read_vocab_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  LanguageVocab vocab;
  vocab.lang = j.at("lang").get<std::string>();
  vocab.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& t : j.at("tokens")) {
    std::string word = t.get<std::string>();
    vocab.token_to_id[word] = vocab.size();
    vocab.id_to_token.push_back(word);
  }
  return vocab;
}

}  // namespace capmine
