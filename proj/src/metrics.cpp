#include "capmine/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

using nlohmann::json;

namespace capmine {

namespace {

constexpr int kCiderOrders = 4;

void check_corpus(const std::vector<TokenList>& hypotheses,
                  const std::vector<RefList>& references) {
  if (hypotheses.empty()) {
    throw UndefinedMetricError("metric of an empty corpus");
  }
  if (hypotheses.size() != references.size()) {
    throw ConfigError("hypothesis and reference counts differ");
  }
  for (const auto& refs : references) {
    if (refs.empty()) throw ConfigError("segment without references");
  }
}

// n-grams joined on an unprintable separator.
std::map<std::string, int> ngram_counts(const TokenList& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key.push_back('\x1f');
      key += tokens[i + static_cast<size_t>(j)];
    }
    ++counts[key];
  }
  return counts;
}

size_t lcs_length(const TokenList& a, const TokenList& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), curr(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      curr[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                     : std::max(prev[j], curr[j - 1]);
    }
    std::swap(prev, curr);
  }
  return prev[b.size()];
}

}  // namespace

double bleu_n(const std::vector<TokenList>& hypotheses,
              const std::vector<RefList>& references, int n) {
  if (n < 1 || n > 4) throw ConfigError("BLEU order must be in 1..4");
  check_corpus(hypotheses, references);

  std::vector<long> clipped(static_cast<size_t>(n), 0);
  std::vector<long> total(static_cast<size_t>(n), 0);
  long hyp_len = 0, ref_len = 0;

  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const TokenList& hyp = hypotheses[s];
    const RefList& refs = references[s];
    hyp_len += static_cast<long>(hyp.size());

    // closest reference length; ties prefer the shorter one
    long best_ref = static_cast<long>(refs[0].size());
    for (const auto& ref : refs) {
      long len = static_cast<long>(ref.size());
      long d_new = std::labs(len - static_cast<long>(hyp.size()));
      long d_old = std::labs(best_ref - static_cast<long>(hyp.size()));
      if (d_new < d_old || (d_new == d_old && len < best_ref)) best_ref = len;
    }
    ref_len += best_ref;

    for (int order = 1; order <= n; ++order) {
      auto hyp_counts = ngram_counts(hyp, order);
      std::map<std::string, int> max_ref;
      for (const auto& ref : refs) {
        for (const auto& [gram, count] : ngram_counts(ref, order)) {
          max_ref[gram] = std::max(max_ref[gram], count);
        }
      }
      long seg_total = 0, seg_clipped = 0;
      for (const auto& [gram, count] : hyp_counts) {
        seg_total += count;
        auto it = max_ref.find(gram);
        if (it != max_ref.end()) seg_clipped += std::min(count, it->second);
      }
      clipped[static_cast<size_t>(order - 1)] += seg_clipped;
      total[static_cast<size_t>(order - 1)] += seg_total;
    }
  }

  double log_precision = 0.0;
  for (int order = 0; order < n; ++order) {
    if (clipped[static_cast<size_t>(order)] == 0 ||
        total[static_cast<size_t>(order)] == 0) {
      return 0.0;
    }
    log_precision +=
        std::log(static_cast<double>(clipped[static_cast<size_t>(order)]) /
                 static_cast<double>(total[static_cast<size_t>(order)])) /
        n;
  }
  if (hyp_len == 0) return 0.0;
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) /
                                       static_cast<double>(hyp_len));
  return bp * std::exp(log_precision);
}

double rouge_l(const std::vector<TokenList>& hypotheses,
               const std::vector<RefList>& references, double beta) {
  check_corpus(hypotheses, references);
  double beta_sq = beta * beta;
  double sum = 0.0;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const TokenList& hyp = hypotheses[s];
    double best = 0.0;
    for (const auto& ref : references[s]) {
      size_t lcs = lcs_length(hyp, ref);
      if (lcs == 0 || hyp.empty() || ref.empty()) continue;
      double precision = static_cast<double>(lcs) / static_cast<double>(hyp.size());
      double recall = static_cast<double>(lcs) / static_cast<double>(ref.size());
      double f = (1.0 + beta_sq) * precision * recall /
                 (recall + beta_sq * precision);
      best = std::max(best, f);
    }
    sum += best;
  }
  return sum / static_cast<double>(hypotheses.size());
}

double cider(const std::vector<TokenList>& hypotheses,
             const std::vector<RefList>& references, bool* degenerate_idf,
             std::vector<double>* per_segment) {
  check_corpus(hypotheses, references);
  size_t n_docs = references.size();
  if (degenerate_idf) *degenerate_idf = n_docs < 2;

  // document frequency: number of segments whose reference set contains the
  // n-gram, per order
  std::vector<std::map<std::string, int>> df(kCiderOrders);
  for (const auto& refs : references) {
    for (int order = 0; order < kCiderOrders; ++order) {
      std::set<std::string> grams;
      for (const auto& ref : refs) {
        for (const auto& [gram, count] : ngram_counts(ref, order + 1)) {
          grams.insert(gram);
        }
      }
      for (const auto& gram : grams) ++df[static_cast<size_t>(order)][gram];
    }
  }

  auto tfidf = [&](const TokenList& tokens, int order) {
    std::map<std::string, double> vec;
    for (const auto& [gram, count] : ngram_counts(tokens, order + 1)) {
      auto it = df[static_cast<size_t>(order)].find(gram);
      int doc_freq = it == df[static_cast<size_t>(order)].end() ? 0 : it->second;
      double idf = doc_freq > 0
                       ? std::log(static_cast<double>(n_docs) / doc_freq)
                       : 0.0;
      vec[gram] = count * idf;
    }
    return vec;
  };
  auto norm = [](const std::map<std::string, double>& vec) {
    double s = 0.0;
    for (const auto& [gram, w] : vec) s += w * w;
    return std::sqrt(s);
  };

  double corpus_sum = 0.0;
  if (per_segment) per_segment->clear();
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    double order_sum = 0.0;
    for (int order = 0; order < kCiderOrders; ++order) {
      auto hyp_vec = tfidf(hypotheses[s], order);
      double hyp_norm = norm(hyp_vec);
      double ref_avg = 0.0;
      for (const auto& ref : references[s]) {
        auto ref_vec = tfidf(ref, order);
        double ref_norm = norm(ref_vec);
        if (hyp_norm == 0.0 || ref_norm == 0.0) continue;
        double dot = 0.0;
        for (const auto& [gram, w] : hyp_vec) {
          auto it = ref_vec.find(gram);
          if (it != ref_vec.end()) dot += w * it->second;
        }
        ref_avg += dot / (hyp_norm * ref_norm);
      }
      order_sum += ref_avg / static_cast<double>(references[s].size());
    }
    double segment_score = 10.0 * order_sum / kCiderOrders;
    if (per_segment) per_segment->push_back(segment_score);
    corpus_sum += segment_score;
  }
  return corpus_sum / static_cast<double>(hypotheses.size());
}

EvalReport evaluate(const ModelParams& params,
                    const std::vector<EvalInput>& inputs,
                    const LanguageVocab& vocab, double coverage_train) {
  if (inputs.empty()) throw UndefinedMetricError("empty test set");

  EvalReport report;
  report.coverage_train = coverage_train;
  report.n_evaluated = static_cast<int>(inputs.size());

  std::vector<TokenList> hyps;
  std::vector<RefList> refs;
  hyps.reserve(inputs.size());
  refs.reserve(inputs.size());
  for (const auto& input : inputs) {
    auto ids = decode_greedy(params, input.regions, params.config.max_seq_len);
    hyps.push_back(vocab.decode(ids));
    refs.push_back({input.ref_tokens});
  }

  report.bleu1 = bleu_n(hyps, refs, 1);
  report.bleu4 = bleu_n(hyps, refs, 4);
  report.rouge_l = rouge_l(hyps, refs);
  std::vector<double> cider_segments;
  report.cider = cider(hyps, refs, &report.degenerate_idf, &cider_segments);

  for (size_t s = 0; s < inputs.size(); ++s) {
    EvalSegment seg;
    seg.sentence_id = inputs[s].sentence_id;
    seg.hyp_tokens = hyps[s];
    seg.ref_tokens = inputs[s].ref_tokens;
    seg.bleu1 = bleu_n({hyps[s]}, {refs[s]}, 1);
    seg.rouge_l = rouge_l({hyps[s]}, {refs[s]});
    seg.cider = cider_segments[s];
    report.segments.push_back(std::move(seg));
  }
  return report;
}

void write_report(const EvalReport& report, const std::string& path) {
  json j;
  j["bleu1"] = report.bleu1;
  j["bleu4"] = report.bleu4;
  j["rouge_l"] = report.rouge_l;
  j["cider"] = report.cider;
  j["coverage_train"] = report.coverage_train;
  j["n_evaluated"] = report.n_evaluated;
  j["degenerate_idf"] = report.degenerate_idf;
  auto& segments = j["segments"] = json::array();
  for (const auto& seg : report.segments) {
    json s;
    s["sentence_id"] = seg.sentence_id;
    s["hyp_tokens"] = seg.hyp_tokens;
    s["ref_tokens"] = seg.ref_tokens;
    s["bleu1"] = seg.bleu1;
    s["rouge_l"] = seg.rouge_l;
    s["cider"] = seg.cider;
    segments.push_back(std::move(s));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

EvalReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  EvalReport report;
  report.bleu1 = j.at("bleu1").get<double>();
  report.bleu4 = j.at("bleu4").get<double>();
  report.rouge_l = j.at("rouge_l").get<double>();
  report.cider = j.at("cider").get<double>();
  report.coverage_train = j.at("coverage_train").get<double>();
  report.n_evaluated = j.at("n_evaluated").get<int>();
  report.degenerate_idf = j.value("degenerate_idf", false);
  for (const auto& s : j.at("segments")) {
    EvalSegment seg;
    seg.sentence_id = s.at("sentence_id").get<std::string>();
    seg.hyp_tokens = s.at("hyp_tokens").get<TokenList>();
    seg.ref_tokens = s.at("ref_tokens").get<TokenList>();
    seg.bleu1 = s.at("bleu1").get<double>();
    seg.rouge_l = s.at("rouge_l").get<double>();
    seg.cider = s.at("cider").get<double>();
    report.segments.push_back(std::move(seg));
  }
  return report;
}

}  // namespace capmine
