#include <filesystem>
#include <fstream>

#include "capmine/pipeline.hpp"
#include "doctest.h"

using namespace capmine;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

RunConfig small_run(const std::string& out_dir, const std::string& mode,
                    uint64_t seed = 7) {
  RunConfig cfg = RunConfig::from_json_text("{}");
  cfg.paths = RunPaths{};
  cfg.paths.out_dir = out_dir;
  cfg.paths.resolve();
  cfg.mode = mode;
  cfg.seed = seed;
  cfg.corpus.n_images = 80;
  cfg.corpus.n_sentences = 100;
  cfg.train.epochs = 2;
  return cfg;
}

}  // namespace

TEST_CASE("config overrides apply through dotted paths") {
  RunConfig cfg = RunConfig::from_json_text(
      R"({"mode": "ours", "corpus": {"n_images": 10}})",
      {"train.epochs=5", "corpus.n_images=33", "lang=xx",
       "miner.pseudo_min_overlap=2"});
  CHECK(cfg.train.epochs == 5);
  CHECK(cfg.corpus.n_images == 33);
  CHECK(cfg.lang == "xx");
  CHECK(cfg.miner.pseudo_min_overlap == 2);
}

TEST_CASE("unknown modes are rejected") {
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"mode": "nonsense"})"),
                  UsageError);
}

TEST_CASE("gen is idempotent: identical bytes for identical config") {
  auto cfg_a = small_run("/tmp/capmine_pipe_gen_a", "ours");
  auto cfg_b = small_run("/tmp/capmine_pipe_gen_b", "ours");
  fs::remove_all(cfg_a.paths.out_dir);
  fs::remove_all(cfg_b.paths.out_dir);

  auto summary_a = run_gen(cfg_a);
  auto summary_b = run_gen(cfg_b);
  CHECK(summary_a.n_images == 80);
  CHECK(summary_a.n_sentences == 100);
  CHECK(summary_a.category_histogram.size() == 40);

  for (const char* leaf : {"regions.jsonl", "relations.jsonl", "sentences.jsonl",
                           "split.json", "lexicon.tsv"}) {
    CHECK(slurp(cfg_a.paths.corpus_dir + "/" + leaf) ==
          slurp(cfg_b.paths.corpus_dir + "/" + leaf));
  }
}

TEST_CASE("mine in ours mode reports full coverage") {
  auto cfg = small_run("/tmp/capmine_pipe_ours", "ours");
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);
  auto result = run_mine(cfg);
  CHECK(result.report.coverage_mean == 1.0);
  CHECK(result.report.skipped_concepts == 0);
  CHECK(result.report.n_pairs > 0);

  // identical rerun produces identical pairs bytes
  std::string first = slurp(cfg.paths.pairs);
  run_mine(cfg);
  CHECK(slurp(cfg.paths.pairs) == first);
}

TEST_CASE("mine in half_obj mode halves the coverage") {
  auto cfg = small_run("/tmp/capmine_pipe_half", "half_obj");
  cfg.corpus.objects_min = 4;  // even-leaning concept counts
  cfg.corpus.objects_max = 6;
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);
  auto result = run_mine(cfg);
  CHECK(result.report.coverage_mean > 0.40);
  CHECK(result.report.coverage_mean < 0.60);
}

TEST_CASE("pseudo-pair coverage rises with min_overlap, stays below ours") {
  auto cfg = small_run("/tmp/capmine_pipe_pseudo", "baseline_pseudo");
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);

  double last = -1.0;
  for (int overlap : {0, 1, 2}) {
    cfg.miner.pseudo_min_overlap = overlap;
    auto result = run_mine(cfg);
    CHECK(result.report.coverage_mean >= last);
    CHECK(result.report.coverage_mean < 1.0);
    last = result.report.coverage_mean;
  }
}

TEST_CASE("supervised and replace modes keep full coverage") {
  for (const char* mode : {"supervised", "replace_objects_keep_geometry",
                           "replace_objects_donor_geometry"}) {
    auto cfg = small_run(std::string("/tmp/capmine_pipe_") + mode, mode);
    fs::remove_all(cfg.paths.out_dir);
    run_gen(cfg);
    auto result = run_mine(cfg);
    // the gt image realizes every concept of its own caption
    CHECK(result.report.coverage_mean == 1.0);
  }
}

TEST_CASE("train and eval close the loop, resume continues steps") {
  auto cfg = small_run("/tmp/capmine_pipe_train", "ours");
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);
  auto mined = run_mine(cfg);

  auto summary = run_train(cfg);
  CHECK(summary.epoch_loss.size() == 2);
  uint64_t steps_before = summary.steps;

  RunConfig resume_cfg = cfg;
  resume_cfg.resume = true;
  auto resumed = run_train(resume_cfg);
  CHECK(resumed.steps == 2 * steps_before);

  auto report = run_eval(cfg);
  CHECK(report.n_evaluated == static_cast<int>(mined.report.n_sentences > 0
                                                   ? report.n_evaluated
                                                   : 0));
  CHECK(report.coverage_train == 1.0);
  CHECK(fs::exists(cfg.paths.report));
}

TEST_CASE("eval without a checkpoint is a pipeline error") {
  auto cfg = small_run("/tmp/capmine_pipe_nockpt", "ours");
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);
  run_mine(cfg);
  CHECK_THROWS_AS(run_eval(cfg), PipelineError);
}

TEST_CASE("pseudo-language pipeline keeps decoded tokens in target vocab") {
  auto cfg = small_run("/tmp/capmine_pipe_xx", "ours");
  cfg.lang = "xx";
  fs::remove_all(cfg.paths.out_dir);
  run_gen(cfg);

  CorpusSplit split = read_corpus(cfg.paths.corpus_dir);
  for (const auto& s : split.sentences) {
    CHECK(s.lang == "xx");
    for (const auto& t : s.tokens) {
      CHECK(t.rfind("xx", 0) == 0);  // every surface word is target-language
    }
  }
  CHECK(fs::exists(cfg.paths.corpus_dir + "/wordmap.tsv"));

  run_mine(cfg);
  run_train(cfg);
  auto report = run_eval(cfg);
  LanguageVocab vocab = read_vocab_json(cfg.paths.vocab);
  for (const auto& seg : report.segments) {
    for (const auto& t : seg.hyp_tokens) {
      CHECK(vocab.token_to_id.count(t) == 1);
      CHECK(t.rfind("xx", 0) == 0);
    }
  }
}
