#pragma once

#include <map>
#include <string>
#include <vector>

#include "capmine/corpus.hpp"
#include "capmine/metrics.hpp"
#include "capmine/miner.hpp"
#include "capmine/model.hpp"

namespace capmine {

struct RunPaths {
  std::string out_dir = "runs/default";
  std::string corpus_dir;
  std::string pairs;
  std::string vocab;
  std::string checkpoint;
  std::string loss_history;
  std::string mining_report;
  std::string report;
  std::string ablation_report;

  // Fills empty entries from out_dir.
  void resolve();
};

struct TextConfig {
  int min_len = 5;
  int max_len = 26;
  int min_freq = 1;
};

// One flat config drives every subcommand; the master seed derives every
// stage seed, so a run is fully reproducible from this struct alone.
struct RunConfig {
  RunPaths paths;
  std::string lang = "en";
  std::string mode = "ours";
  uint64_t seed = 1;
  double test_fraction = 0.2;
  bool resume = false;
  SynthConfig corpus;
  TextConfig text;
  MinerConfig miner;
  ModelConfig model;
  TrainConfig train;

  static RunConfig from_json_file(const std::string& path,
                                  const std::vector<std::string>& overrides = {});
  static RunConfig from_json_text(const std::string& text,
                                  const std::vector<std::string>& overrides = {});
  void validate_mode() const;
};

extern const std::vector<std::string> kKnownModes;

struct GenSummary {
  int n_images = 0;
  int n_sentences = 0;
  int n_test_pairs = 0;
  int n_train_images = 0;
  int n_train_sentences = 0;
  std::map<CategoryId, int> category_histogram;
};

GenSummary run_gen(const RunConfig& config);

struct MineResult {
  std::vector<TrainingPair> pairs;
  MiningReport report;
};

MineResult run_mine(const RunConfig& config);

struct TrainSummary {
  std::vector<double> epoch_loss;
  uint64_t steps = 0;
  int truncated_sentences = 0;
};

TrainSummary run_train(const RunConfig& config);

EvalReport run_eval(const RunConfig& config);

struct AblationRow {
  std::string mode;
  int min_overlap = -1;  // only for baseline_pseudo rows
  double coverage = 0.0;
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

std::vector<AblationRow> run_ablate(const RunConfig& config);

// Samples as the model consumes them: feature + geometry per region.
std::vector<Sample> pairs_to_samples(const std::vector<TrainingPair>& pairs);
std::vector<double> region_input(const std::vector<double>& feature,
                                 const std::array<double, 5>& geometry);

}  // namespace capmine
