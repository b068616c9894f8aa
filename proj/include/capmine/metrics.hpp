#pragma once

#include <string>
#include <vector>

#include "capmine/model.hpp"
#include "capmine/textproc.hpp"

namespace capmine {

using TokenList = std::vector<std::string>;
using RefList = std::vector<TokenList>;

// Corpus-level BLEU-n: geometric mean of clipped modified n-gram precisions
// for orders 1..n times the brevity penalty. No smoothing: a zero precision
// at any order gives 0.
double bleu_n(const std::vector<TokenList>& hypotheses,
              const std::vector<RefList>& references, int n);

// Mean over segments of the LCS F-measure, max over references per segment.
double rouge_l(const std::vector<TokenList>& hypotheses,
               const std::vector<RefList>& references, double beta = 1.2);

// Plain CIDEr: TF-IDF n-gram cosine for n = 1..4, averaged and scaled by 10.
// Document frequencies come from the reference corpus. With a single
// segment the IDF degenerates to zero; degenerate_idf reports that.
double cider(const std::vector<TokenList>& hypotheses,
             const std::vector<RefList>& references,
             bool* degenerate_idf = nullptr,
             std::vector<double>* per_segment = nullptr);

struct EvalSegment {
  std::string sentence_id;
  TokenList hyp_tokens;
  TokenList ref_tokens;
  double bleu1 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

struct EvalReport {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double coverage_train = 0.0;
  int n_evaluated = 0;
  bool degenerate_idf = false;
  std::vector<EvalSegment> segments;
};

struct EvalInput {
  std::string sentence_id;
  std::vector<std::vector<double>> regions;  // the true image's regions
  TokenList ref_tokens;
};

// Greedy-decodes every test image and scores the hypotheses against the
// ground-truth sentences.
EvalReport evaluate(const ModelParams& params, const std::vector<EvalInput>& inputs,
                    const LanguageVocab& vocab, double coverage_train);

void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

}  // namespace capmine
