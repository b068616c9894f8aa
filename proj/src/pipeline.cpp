#include "capmine/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace capmine {

const std::vector<std::string> kKnownModes = {
    "ours",
    "ours_rel",
    "ours_rel_attr",
    "half_obj",
    "baseline_pseudo",
    "supervised",
    "replace_objects_keep_geometry",
    "replace_objects_donor_geometry",
};

void RunPaths::resolve() {
  auto fill = [&](std::string& field, const char* leaf) {
    if (field.empty()) field = out_dir + "/" + leaf;
  };
  fill(corpus_dir, "corpus");
  fill(pairs, "pairs.jsonl");
  fill(vocab, "vocab.json");
  fill(checkpoint, "checkpoint.bin");
  fill(loss_history, "loss_history.json");
  fill(mining_report, "mining_report.json");
  fill(report, "report.json");
  fill(ablation_report, "ablation_report.json");
}

void RunConfig::validate_mode() const {
  if (std::find(kKnownModes.begin(), kKnownModes.end(), mode) ==
      kKnownModes.end()) {
    std::string known;
    for (const auto& m : kKnownModes) known += m + " ";
    throw UsageError("unknown mode '" + mode + "'; expected one of: " + known);
  }
}

namespace {

// Applies "key.path=value" overrides onto the config JSON.
void apply_override(json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override must look like key.path=value, got '" + spec + "'");
  }
  std::string path = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);

  json* node = &j;
  size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos
                                             ? std::string::npos
                                             : dot - start);
    if (key.empty()) throw UsageError("bad override path '" + path + "'");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig config_from_json(json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) apply_override(j, o);

  RunConfig cfg;
  read_field(j, "lang", cfg.lang);
  read_field(j, "mode", cfg.mode);
  read_field(j, "seed", cfg.seed);
  read_field(j, "test_fraction", cfg.test_fraction);
  read_field(j, "resume", cfg.resume);
  read_field(j, "out_dir", cfg.paths.out_dir);

  if (j.contains("paths")) {
    const json& p = j.at("paths");
    read_field(p, "out_dir", cfg.paths.out_dir);
    read_field(p, "corpus_dir", cfg.paths.corpus_dir);
    read_field(p, "pairs", cfg.paths.pairs);
    read_field(p, "vocab", cfg.paths.vocab);
    read_field(p, "checkpoint", cfg.paths.checkpoint);
    read_field(p, "loss_history", cfg.paths.loss_history);
    read_field(p, "mining_report", cfg.paths.mining_report);
    read_field(p, "report", cfg.paths.report);
    read_field(p, "ablation_report", cfg.paths.ablation_report);
  }
  if (j.contains("corpus")) {
    const json& c = j.at("corpus");
    read_field(c, "n_images", cfg.corpus.n_images);
    read_field(c, "n_sentences", cfg.corpus.n_sentences);
    read_field(c, "n_categories", cfg.corpus.n_categories);
    read_field(c, "n_relations", cfg.corpus.n_relations);
    read_field(c, "n_attributes", cfg.corpus.n_attributes);
    read_field(c, "feature_dim", cfg.corpus.feature_dim);
    read_field(c, "feature_noise_sigma", cfg.corpus.feature_noise_sigma);
    read_field(c, "objects_min", cfg.corpus.objects_min);
    read_field(c, "objects_max", cfg.corpus.objects_max);
    read_field(c, "relations_min", cfg.corpus.relations_min);
    read_field(c, "relations_max", cfg.corpus.relations_max);
    read_field(c, "attribute_prob", cfg.corpus.attribute_prob);
    read_field(c, "seed", cfg.corpus.seed);
  }
  if (j.contains("text")) {
    const json& t = j.at("text");
    read_field(t, "min_len", cfg.text.min_len);
    read_field(t, "max_len", cfg.text.max_len);
    read_field(t, "min_freq", cfg.text.min_freq);
  }
  if (j.contains("miner")) {
    const json& m = j.at("miner");
    read_field(m, "use_relations", cfg.miner.use_relations);
    read_field(m, "use_attributes", cfg.miner.use_attributes);
    read_field(m, "coverage_drop", cfg.miner.coverage_drop);
    read_field(m, "pseudo_min_overlap", cfg.miner.pseudo_min_overlap);
    if (m.contains("coverage_drop_mode")) {
      std::string mode = m.at("coverage_drop_mode").get<std::string>();
      if (mode == "substitute") {
        cfg.miner.drop_mode = CoverageDropMode::kSubstitute;
      } else if (mode == "remove") {
        cfg.miner.drop_mode = CoverageDropMode::kRemove;
      } else {
        throw UsageError("coverage_drop_mode must be substitute or remove");
      }
    }
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    read_field(m, "d_model", cfg.model.d_model);
    read_field(m, "n_heads", cfg.model.n_heads);
    read_field(m, "d_ff", cfg.model.d_ff);
    read_field(m, "max_seq_len", cfg.model.max_seq_len);
    read_field(m, "dropout", cfg.model.dropout);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    read_field(t, "batch_size", cfg.train.batch_size);
    read_field(t, "base_lr", cfg.train.base_lr);
    read_field(t, "lr_decay", cfg.train.lr_decay);
    read_field(t, "decay_every", cfg.train.decay_every);
    read_field(t, "epochs", cfg.train.epochs);
    read_field(t, "grad_clip", cfg.train.grad_clip);
  }

  cfg.paths.resolve();
  cfg.validate_mode();
  return cfg;
}

ConceptLexicon lexicon_for_lang(const RunConfig& cfg) {
  ConceptLexicon english = builtin_lexicon(
      cfg.corpus.n_categories, cfg.corpus.n_relations, cfg.corpus.n_attributes);
  if (cfg.lang == "en") return english;
  return translate_lexicon(english, pseudo_language_map(english, cfg.lang));
}

uint64_t stage_seed(const RunConfig& cfg, const char* stage) {
  return derive_seed(cfg.seed, stage);
}

struct MineContext {
  CorpusSplit split;
  ConceptLexicon lexicon;
  LanguageVocab vocab;
  std::vector<ParsedSentence> parsed;          // train sentences, kept order
  std::vector<const SentenceRecord*> records;  // aligned with parsed
};

MineContext load_mine_context(const RunConfig& cfg) {
  MineContext ctx;
  ctx.split = read_corpus(cfg.paths.corpus_dir);
  ctx.lexicon =
      read_lexicon_tsv(cfg.paths.corpus_dir + "/lexicon.tsv", cfg.lang);

  std::vector<SentenceRecord> train_records;
  for (const SentenceRecord* s : ctx.split.train_sentences()) {
    train_records.push_back(*s);
  }
  auto [vocab, kept] = build_vocab(train_records, cfg.text.min_len,
                                   cfg.text.max_len, cfg.text.min_freq);
  ctx.vocab = std::move(vocab);

  for (const auto& record : kept) {
    ctx.parsed.push_back(parse_sentence(record, ctx.vocab, ctx.lexicon));
    ctx.records.push_back(&ctx.split.sentence(record.sentence_id));
  }
  return ctx;
}

}  // namespace

RunConfig RunConfig::from_json_file(const std::string& path,
                                    const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return config_from_json(std::move(j), overrides);
}

RunConfig RunConfig::from_json_text(const std::string& text,
                                    const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return config_from_json(std::move(j), overrides);
}

GenSummary run_gen(const RunConfig& cfg) {
  SynthConfig synth = cfg.corpus;
  if (synth.seed == 0) synth.seed = stage_seed(cfg, "gen");

  ConceptLexicon lexicon = lexicon_for_lang(cfg);
  auto [images, sentences] = generate_corpus(synth, lexicon);
  CorpusSplit split = unpair_split(std::move(images), std::move(sentences),
                                   cfg.test_fraction, stage_seed(cfg, "split"));

  write_corpus(split, cfg.paths.corpus_dir);
  write_lexicon_tsv(lexicon, cfg.paths.corpus_dir + "/lexicon.tsv");
  if (cfg.lang != "en") {
    ConceptLexicon english = builtin_lexicon(
        cfg.corpus.n_categories, cfg.corpus.n_relations, cfg.corpus.n_attributes);
    write_wordmap_tsv(pseudo_language_map(english, cfg.lang),
                      cfg.paths.corpus_dir + "/wordmap.tsv");
  }

  GenSummary summary;
  summary.n_images = static_cast<int>(split.images.size());
  summary.n_sentences = static_cast<int>(split.sentences.size());
  summary.n_test_pairs = static_cast<int>(split.test_pairs.size());
  summary.n_train_images = static_cast<int>(split.train_image_ids.size());
  summary.n_train_sentences = static_cast<int>(split.train_sentence_ids.size());
  for (const auto& img : split.images) {
    for (const auto& r : img.regions) ++summary.category_histogram[r.category];
  }
  return summary;
}

MineResult run_mine(const RunConfig& cfg) {
  cfg.miner.validate();
  MineContext ctx = load_mine_context(cfg);
  const uint64_t mine_seed = stage_seed(cfg, "mine");

  auto train_images = ctx.split.train_images();
  if (train_images.empty()) {
    throw PipelineError("no train images; nothing to index");
  }

  // Donor pool for the supervised-family modes: every non-test image.
  std::set<std::string> test_images;
  for (const auto& [img, sen] : ctx.split.test_pairs) test_images.insert(img);

  MineResult result;
  result.report.mode = cfg.mode;
  result.report.n_sentences = static_cast<int>(ctx.parsed.size());

  const bool is_replace_mode =
      cfg.mode == "replace_objects_keep_geometry" ||
      cfg.mode == "replace_objects_donor_geometry";

  RegionIndex index;
  if (is_replace_mode) {
    std::vector<const ImageRecord*> donors;
    for (const auto& img : ctx.split.images) {
      if (!test_images.count(img.image_id)) donors.push_back(&img);
    }
    index = RegionIndex::build(donors);
  } else {
    index = RegionIndex::build(train_images);
  }

  write_vocab_json(ctx.vocab, cfg.paths.vocab);

  for (size_t i = 0; i < ctx.parsed.size(); ++i) {
    const ParsedSentence& parsed = ctx.parsed[i];
    const SentenceRecord& record = *ctx.records[i];
    Rng rng(derive_seed(mine_seed, parsed.sentence_id));

    if (parsed.concepts.empty()) ++result.report.zero_concept_pairs;
    for (CategoryId concept_id : parsed.concepts) {
      if (!index.has_category(concept_id)) ++result.report.skipped_concepts;
    }

    if (cfg.mode == "ours") {
      result.pairs.push_back(mine_pair(parsed, index, rng));
    } else if (cfg.mode == "ours_rel" || cfg.mode == "ours_rel_attr") {
      MinerConfig mc = cfg.miner;
      mc.use_relations = true;
      mc.use_attributes = cfg.mode == "ours_rel_attr";
      TrainingPair pair = mine_pair_extended(parsed, index, rng, mc);
      for (const auto& m : pair.regions) {
        if (m.provenance == Provenance::kRelationPair) {
          ++result.report.relation_pairs_added;
        }
        if (m.provenance == Provenance::kAttribute) {
          ++result.report.attribute_regions;
        }
      }
      result.pairs.push_back(std::move(pair));
    } else if (cfg.mode == "half_obj") {
      double drop = cfg.miner.coverage_drop > 0.0 ? cfg.miner.coverage_drop : 0.5;
      result.pairs.push_back(degrade_coverage(mine_pair(parsed, index, rng),
                                              drop, index, rng,
                                              cfg.miner.drop_mode));
    } else if (cfg.mode == "baseline_pseudo") {
      const ImageRecord* img =
          mine_pseudo_pair(parsed, train_images, cfg.miner.pseudo_min_overlap);
      if (!img) {
        ++result.report.pseudo_rejected;
        continue;
      }
      result.pairs.push_back(image_as_pair(*img, parsed));
    } else if (cfg.mode == "supervised") {
      if (!record.gt_image_id) {
        throw PipelineError("supervised mode needs gt_image_id on sentence '" +
                            record.sentence_id + "'");
      }
      result.pairs.push_back(
          image_as_pair(ctx.split.image(*record.gt_image_id), parsed));
    } else if (is_replace_mode) {
      if (!record.gt_image_id) {
        throw PipelineError("replace mode needs gt_image_id on sentence '" +
                            record.sentence_id + "'");
      }
      const ImageRecord& image = ctx.split.image(*record.gt_image_id);
      ReplaceResult replaced = replace_objects(
          image, index, rng, cfg.mode == "replace_objects_donor_geometry");
      result.report.singleton_keeps += replaced.singleton_keeps;
      TrainingPair pair;
      pair.sentence_id = parsed.sentence_id;
      pair.token_ids = parsed.token_ids;
      pair.concepts = parsed.concepts;
      pair.regions = std::move(replaced.regions);
      std::vector<CategoryId> cats;
      for (const auto& m : pair.regions) cats.push_back(m.region.category);
      pair.coverage = pair_coverage(cats, pair.concepts);
      result.pairs.push_back(std::move(pair));
    } else {
      throw UsageError("unknown mode '" + cfg.mode + "'");
    }
  }

  result.report.n_pairs = static_cast<int>(result.pairs.size());
  result.report.coverage_mean =
      result.pairs.empty() ? 0.0 : compute_coverage(result.pairs);

  write_pairs(result.pairs, cfg.paths.pairs);
  write_mining_report(result.report, cfg.paths.mining_report);
  return result;
}

std::vector<double> region_input(const std::vector<double>& feature,
                                 const std::array<double, 5>& geometry) {
  std::vector<double> input;
  input.reserve(feature.size() + 5);
  input.insert(input.end(), feature.begin(), feature.end());
  input.insert(input.end(), geometry.begin(), geometry.end());
  return input;
}

std::vector<Sample> pairs_to_samples(const std::vector<TrainingPair>& pairs) {
  std::vector<Sample> samples;
  samples.reserve(pairs.size());
  for (const auto& p : pairs) {
    Sample s;
    s.framed = p.token_ids;
    for (const auto& m : p.regions) {
      s.regions.push_back(region_input(m.region.feature, m.geometry));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

TrainSummary run_train(const RunConfig& cfg) {
  auto pairs = read_pairs(cfg.paths.pairs);
  LanguageVocab vocab = read_vocab_json(cfg.paths.vocab);
  auto samples = pairs_to_samples(pairs);

  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = vocab.size();
  model_cfg.seed = stage_seed(cfg, "model");
  for (const auto& p : pairs) {
    if (!p.regions.empty()) {
      model_cfg.feature_dim =
          static_cast<int>(p.regions.front().region.feature.size());
      break;
    }
  }

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = stage_seed(cfg, "train");

  TrainResult result;
  if (cfg.resume) {
    auto [params, state] = load_checkpoint(cfg.paths.checkpoint, model_cfg);
    result = train_from(std::move(params), std::move(state), samples, train_cfg);
  } else {
    result = train(samples, model_cfg, train_cfg);
  }

  save_checkpoint(result.params, result.state, cfg.paths.checkpoint);
  {
    json j;
    j["epoch_loss"] = result.epoch_loss;
    j["steps"] = result.state.step;
    j["truncated_sentences"] = result.truncated_sentences;
    std::ofstream out(cfg.paths.loss_history);
    if (!out) throw IoError("cannot write '" + cfg.paths.loss_history + "'");
    out << j.dump(2) << '\n';
  }

  TrainSummary summary;
  summary.epoch_loss = result.epoch_loss;
  summary.steps = result.state.step;
  summary.truncated_sentences = result.truncated_sentences;
  return summary;
}

EvalReport run_eval(const RunConfig& cfg) {
  if (!fs::exists(cfg.paths.checkpoint)) {
    throw PipelineError("checkpoint '" + cfg.paths.checkpoint +
                        "' not found; run train first");
  }
  CorpusSplit split = read_corpus(cfg.paths.corpus_dir);
  LanguageVocab vocab = read_vocab_json(cfg.paths.vocab);

  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = vocab.size();
  model_cfg.seed = stage_seed(cfg, "model");
  for (const auto& img : split.images) {
    if (!img.regions.empty()) {
      model_cfg.feature_dim =
          static_cast<int>(img.regions.front().feature.size());
      break;
    }
  }
  auto [params, state] = load_checkpoint(cfg.paths.checkpoint, model_cfg);

  double coverage_train = 0.0;
  if (fs::exists(cfg.paths.mining_report)) {
    coverage_train = read_mining_report(cfg.paths.mining_report).coverage_mean;
  }

  std::vector<EvalInput> inputs;
  for (const auto& [image, sentence] : split.resolved_test_pairs()) {
    EvalInput input;
    input.sentence_id = sentence->sentence_id;
    input.ref_tokens = sentence->tokens;
    for (const auto& r : image->regions) {
      input.regions.push_back(region_input(r.feature, geometry_vector(r)));
    }
    inputs.push_back(std::move(input));
  }

  EvalReport report = evaluate(params, inputs, vocab, coverage_train);
  write_report(report, cfg.paths.report);
  return report;
}

std::vector<AblationRow> run_ablate(const RunConfig& cfg) {
  struct GridEntry {
    std::string mode;
    int min_overlap;
  };
  const std::vector<GridEntry> grid = {
      {"supervised", -1},
      {"replace_objects_keep_geometry", -1},
      {"replace_objects_donor_geometry", -1},
      {"ours", -1},
      {"half_obj", -1},
      {"baseline_pseudo", 0},
      {"baseline_pseudo", 1},
      {"baseline_pseudo", 2},
  };

  run_gen(cfg);

  std::vector<AblationRow> rows;
  for (const auto& entry : grid) {
    RunConfig sub = cfg;
    sub.mode = entry.mode;
    std::string leaf = entry.mode;
    if (entry.min_overlap >= 0) {
      sub.miner.pseudo_min_overlap = entry.min_overlap;
      leaf += "_" + std::to_string(entry.min_overlap);
    }
    std::string sub_dir = cfg.paths.out_dir + "/ablate/" + leaf;
    sub.paths = RunPaths{};
    sub.paths.out_dir = sub_dir;
    sub.paths.corpus_dir = cfg.paths.corpus_dir;  // shared corpus
    sub.paths.resolve();
    std::error_code ec;
    fs::create_directories(sub_dir, ec);
    if (ec) throw IoError("cannot create '" + sub_dir + "'");

    MineResult mined = run_mine(sub);
    run_train(sub);
    EvalReport report = run_eval(sub);

    AblationRow row;
    row.mode = entry.mode;
    row.min_overlap = entry.min_overlap;
    row.coverage = mined.report.coverage_mean;
    row.bleu1 = report.bleu1;
    row.bleu4 = report.bleu4;
    row.rouge_l = report.rouge_l;
    row.cider = report.cider;
    rows.push_back(row);
  }

  json j;
  auto& arr = j["rows"] = json::array();
  for (const auto& row : rows) {
    json r;
    r["mode"] = row.mode;
    if (row.min_overlap >= 0) r["min_overlap"] = row.min_overlap;
    r["coverage"] = row.coverage;
    r["bleu1"] = row.bleu1;
    r["bleu4"] = row.bleu4;
    r["rouge_l"] = row.rouge_l;
    r["cider"] = row.cider;
    arr.push_back(std::move(r));
  }
  std::ofstream out(cfg.paths.ablation_report);
  if (!out) throw IoError("cannot write '" + cfg.paths.ablation_report + "'");
  out << j.dump(2) << '\n';
  return rows;
}

}  // namespace capmine
