#pragma once

#include <map>
#include <string>
#include <vector>

#include "capmine/records.hpp"

namespace capmine {

// Word-level vocabulary of one language. Ids 0..3 are reserved for the
// special tokens; retained words get dense ids from 4 up, ordered by
// descending corpus frequency (ties broken lexicographically).
struct LanguageVocab {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;

  std::string lang;
  std::map<std::string, TokenId> token_to_id;
  std::vector<std::string> id_to_token;  // index == id, starts with specials

  int size() const { return static_cast<int>(id_to_token.size()); }

  TokenId id_of(const std::string& word) const {
    auto it = token_to_id.find(word);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  // BOS ... EOS framed encoding.
  std::vector<TokenId> encode_framed(const std::vector<std::string>& tokens) const;

  // Inverse of encoding; special tokens are dropped unless keep_specials.
  std::vector<std::string> decode(const std::vector<TokenId>& ids,
                                  bool keep_specials = false) const;
};

// Maps surface words to detector concept ids. The three maps have disjoint
// key sets; several words may share one id (many-to-one is allowed).
struct ConceptLexicon {
  std::string lang;
  std::map<std::string, CategoryId> word_to_category;
  std::map<std::string, RelationId> word_to_relation;
  std::map<std::string, AttributeId> word_to_attribute;

  void validate() const;

  // Lexicographically smallest word mapped to the id (deterministic inverse).
  const std::string& category_word(CategoryId id) const;
  const std::string& relation_word(RelationId id) const;
  const std::string& attribute_word(AttributeId id) const;
};

struct WordMap {
  std::string source_lang;
  std::string target_lang;
  std::map<std::string, std::string> entries;
};

struct ParsedSentence {
  std::string sentence_id;
  std::vector<TokenId> token_ids;  // BOS ... EOS framed
  std::vector<CategoryId> concepts;  // deduplicated, first-mention order
  std::vector<std::array<int, 3>> triplets;  // (category, relation, category)
  std::vector<std::pair<AttributeId, CategoryId>> attr_pairs;
};

struct ParseOptions {
  // Keep duplicate concept mentions instead of collapsing them to a set.
  bool keep_duplicate_concepts = false;
};

// Lowercases and splits on whitespace/punctuation; punctuation is dropped.
// Bytes >= 0x80 are treated as word characters so UTF-8 words survive.
std::vector<std::string> tokenize(const std::string& text);

// Drops sentences outside [min_len, max_len] tokens, then builds the
// vocabulary over the kept sentences. Words below min_freq encode as UNK.
std::pair<LanguageVocab, std::vector<SentenceRecord>> build_vocab(
    const std::vector<SentenceRecord>& sentences, int min_len, int max_len,
    int min_freq = 1);

// Extracts concepts, relation triplets and attribute-object pairs from a
// sentence. Triplets are maximal category..relation..category patterns with
// no other category/relation word in between, scanned left to right.
ParsedSentence parse_sentence(const SentenceRecord& record,
                              const LanguageVocab& vocab,
                              const ConceptLexicon& lexicon,
                              const ParseOptions& opts = {});

// Emits a templated caption for an image: every category mentioned at least
// once, every category-level relation as "cat rel cat", every attribute as
// "attr cat". parse_sentence recovers those sets exactly. The seed only
// shuffles clause order.
SentenceRecord generate_caption(const ImageRecord& image,
                                const ConceptLexicon& lexicon, uint64_t seed,
                                const std::string& sentence_id);

// Replaces every lexicon key through the map. Two source words may collapse
// onto one target word only when they already share an id.
ConceptLexicon translate_lexicon(const ConceptLexicon& lexicon,
                                 const WordMap& map);

// Built-in English lexicon. Beyond the stock word lists, synthetic words
// (obj40, rel6, ...) are generated.
ConceptLexicon builtin_lexicon(int n_categories, int n_relations,
                               int n_attributes);

// Deterministic pseudo-language: every word prefixed with the language tag.
WordMap pseudo_language_map(const ConceptLexicon& lexicon,
                            const std::string& target_lang);

// Filler words used by the caption templates for a given language.
struct GrammarFillers {
  std::string a, and_, there, is;
};
GrammarFillers grammar_fillers(const std::string& lang);

// lexicon.tsv: "word<TAB>kind<TAB>id" with kind in {category,relation,attribute}.
void write_lexicon_tsv(const ConceptLexicon& lexicon, const std::string& path);
ConceptLexicon read_lexicon_tsv(const std::string& path, const std::string& lang);

// wordmap.tsv: "source_word<TAB>target_word".
void write_wordmap_tsv(const WordMap& map, const std::string& path);
WordMap read_wordmap_tsv(const std::string& path, const std::string& source_lang,
                         const std::string& target_lang);

// vocab.json: {"lang", "tokens": [words in id order starting at id 4]}.
void write_vocab_json(const LanguageVocab& vocab, const std::string& path);
LanguageVocab read_vocab_json(const std::string& path);

}  // namespace capmine
