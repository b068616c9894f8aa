#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "capmine/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool has_seed = false;
  std::vector<std::string> overrides;
};

capmine::RunConfig load_config(const CommonArgs& args) {
  using capmine::RunConfig;
  RunConfig cfg = args.config_path.empty()
                      ? RunConfig::from_json_text("{}", args.overrides)
                      : RunConfig::from_json_file(args.config_path, args.overrides);
  if (args.has_seed) cfg.seed = args.seed;
  if (!args.out_dir.empty()) {
    cfg.paths = capmine::RunPaths{};
    cfg.paths.out_dir = args.out_dir;
    cfg.paths.resolve();
  }
  return cfg;
}

// Leftover args of the form --key.path=value become config overrides.
void collect_overrides(const std::vector<std::string>& extras,
                       std::vector<std::string>& overrides) {
  for (const auto& e : extras) {
    if (e.rfind("--", 0) == 0 && e.find('=') != std::string::npos) {
      overrides.push_back(e.substr(2));
    } else {
      throw capmine::UsageError("unrecognized argument '" + e + "'");
    }
  }
}

void cmd_gen(const capmine::RunConfig& cfg) {
  auto summary = capmine::run_gen(cfg);
  std::cout << "corpus: " << summary.n_images << " images, "
            << summary.n_sentences << " sentences\n"
            << "split: " << summary.n_train_images << " train images, "
            << summary.n_train_sentences << " train sentences, "
            << summary.n_test_pairs << " test pairs\n";
  std::cout << "category histogram:";
  for (const auto& [cat, count] : summary.category_histogram) {
    std::cout << ' ' << cat << ':' << count;
  }
  std::cout << '\n' << "wrote " << cfg.paths.corpus_dir << '\n';
}

void cmd_mine(const capmine::RunConfig& cfg) {
  auto result = capmine::run_mine(cfg);
  const auto& r = result.report;
  std::cout << "mode " << r.mode << ": " << r.n_pairs << " pairs from "
            << r.n_sentences << " sentences\n"
            << "coverage mean " << r.coverage_mean << ", skipped concepts "
            << r.skipped_concepts << ", pseudo rejected " << r.pseudo_rejected
            << '\n'
            << "wrote " << cfg.paths.pairs << '\n';
}

void cmd_train(const capmine::RunConfig& cfg) {
  auto summary = capmine::run_train(cfg);
  std::cout << "trained " << summary.epoch_loss.size() << " epochs, "
            << summary.steps << " steps";
  if (!summary.epoch_loss.empty()) {
    std::cout << "; first epoch loss " << summary.epoch_loss.front()
              << ", final " << summary.epoch_loss.back();
  }
  if (summary.truncated_sentences > 0) {
    std::cout << "; truncated " << summary.truncated_sentences
              << " long sentences";
  }
  std::cout << '\n' << "wrote " << cfg.paths.checkpoint << '\n';
}

void cmd_eval(const capmine::RunConfig& cfg) {
  auto report = capmine::run_eval(cfg);
  std::printf(
      "n=%d  BLEU-1 %.4f  BLEU-4 %.4f  ROUGE-L %.4f  CIDEr %.4f  "
      "train-coverage %.4f\n",
      report.n_evaluated, report.bleu1, report.bleu4, report.rouge_l,
      report.cider, report.coverage_train);
  std::cout << "wrote " << cfg.paths.report << '\n';
}

void cmd_ablate(const capmine::RunConfig& cfg) {
  auto rows = capmine::run_ablate(cfg);
  std::printf("%-34s %9s %8s %8s %8s %8s\n", "mode", "coverage", "BLEU-1",
              "BLEU-4", "ROUGE-L", "CIDEr");
  for (const auto& row : rows) {
    std::string label = row.mode;
    if (row.min_overlap >= 0) {
      label += "(min_overlap=" + std::to_string(row.min_overlap) + ")";
    }
    std::printf("%-34s %9.4f %8.4f %8.4f %8.4f %8.4f\n", label.c_str(),
                row.coverage, row.bleu1, row.bleu4, row.rouge_l, row.cider);
  }
  std::cout << "wrote " << cfg.paths.ablation_report << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"object-mining caption pipeline"};
  app.require_subcommand(1);
  app.allow_extras();

  CommonArgs args;
  app.add_option("--config", args.config_path, "JSON run config");
  app.add_option("--out", args.out_dir, "output directory (overrides config)");
  auto* seed_opt = app.add_option("--seed", args.seed, "master seed");

  std::string command;
  for (const char* name : {"gen", "mine", "train", "eval", "ablate"}) {
    auto* sub = app.add_subcommand(name);
    sub->allow_extras();
    sub->fallthrough();
    sub->callback([&command, name]() { command = name; });
  }

  try {
    app.parse(argc, argv);
    args.has_seed = seed_opt->count() > 0;
    for (const auto* sub : app.get_subcommands()) {
      collect_overrides(sub->remaining(), args.overrides);
    }
    collect_overrides(app.remaining(), args.overrides);

    capmine::RunConfig cfg = load_config(args);
    if (command == "gen") {
      cmd_gen(cfg);
    } else if (command == "mine") {
      cmd_mine(cfg);
    } else if (command == "train") {
      cmd_train(cfg);
    } else if (command == "eval") {
      cmd_eval(cfg);
    } else if (command == "ablate") {
      cmd_ablate(cfg);
    }
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const capmine::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const capmine::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const capmine::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const capmine::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const capmine::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
