#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "capmine/model.hpp"
#include "capmine/rng.hpp"
#include "doctest.h"

using namespace capmine;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 1;
  c.d_ff = 16;
  c.vocab_size = 11;
  c.max_seq_len = 10;
  c.feature_dim = 6;
  c.seed = 3;
  return c;
}

ModelConfig desk_config(int vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.feature_dim = 8;
  c.seed = 5;
  return c;
}

std::vector<std::vector<double>> random_regions(int count, int dim, Rng& rng) {
  std::vector<std::vector<double>> regions;
  for (int i = 0; i < count; ++i) {
    std::vector<double> r(static_cast<size_t>(dim) + 5);
    for (double& v : r) v = rng.uniform();
    regions.push_back(std::move(r));
  }
  return regions;
}

Sample random_sample(const ModelConfig& cfg, int n_regions, int n_tokens,
                     Rng& rng) {
  Sample s;
  s.regions = random_regions(n_regions, cfg.feature_dim, rng);
  s.framed.push_back(1);
  for (int t = 0; t < n_tokens; ++t) {
    s.framed.push_back(
        4 + static_cast<TokenId>(rng.uniform_index(
                static_cast<size_t>(cfg.vocab_size) - 4)));
  }
  s.framed.push_back(2);
  return s;
}

// Batch-mean CE computed through the public forward pass with its own
// softmax arithmetic; the reference the finite differences use.
double batch_loss(const ModelParams& params, const std::vector<Sample>& batch) {
  double loss = 0.0;
  long total = 0;
  for (const auto& s : batch) {
    MatrixD logits = forward(params, s.regions, s.framed);
    for (int t = 0; t < logits.rows; ++t) {
      TokenId target = s.framed[static_cast<size_t>(t) + 1];
      const double* row =
          logits.data.data() + static_cast<size_t>(t) * logits.cols;
      double mx = *std::max_element(row, row + logits.cols);
      double denom = 0.0;
      for (int j = 0; j < logits.cols; ++j) denom += std::exp(row[j] - mx);
      loss -= row[target] - mx - std::log(denom);
      ++total;
    }
  }
  return loss / static_cast<double>(total);
}

}  // namespace

TEST_CASE("init_params is deterministic and validates config") {
  auto a = init_params(tiny_config());
  auto b = init_params(tiny_config());
  for (const auto& [name, t] : a.tensors) {
    CHECK(b.t(name).data == t.data);
  }

  ModelConfig bad = tiny_config();
  bad.d_model = 64;
  bad.n_heads = 5;
  CHECK_THROWS_AS(init_params(bad), ConfigError);

  for (const char* ln : {"enc.ln1.g", "enc.ln2.g", "dec.ln1.g", "dec.ln2.g",
                         "dec.ln3.g"}) {
    for (float v : a.t(ln).data) CHECK(v == 1.0f);
  }
  for (float v : a.t("enc.ln1.b").data) CHECK(v == 0.0f);
}

TEST_CASE("forward produces one logits row per target position") {
  auto params = init_params(tiny_config());
  Rng rng(1);
  auto regions = random_regions(3, 6, rng);

  MatrixD logits = forward(params, regions, {1, 2});  // single-step target
  CHECK(logits.rows == 1);
  CHECK(logits.cols == 11);

  MatrixD longer = forward(params, regions, {1, 5, 6, 7, 2});
  CHECK(longer.rows == 4);
  for (double v : longer.data) CHECK(std::isfinite(v));
}

TEST_CASE("attention rows are probability distributions") {
  auto params = init_params(tiny_config());
  Rng rng(2);
  auto regions = random_regions(4, 6, rng);
  AttentionProbe probe;
  forward_probed(params, regions, {1, 5, 6, 7, 8, 2}, probe);

  for (const MatrixD* m : {&probe.enc_self, &probe.dec_self, &probe.dec_cross}) {
    REQUIRE(m->rows > 0);
    for (int i = 0; i < m->rows; ++i) {
      double sum = 0.0;
      for (int j = 0; j < m->cols; ++j) {
        double p = m->at(i, j);
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  // causal mask: decoder self-attention row t has zero mass beyond t
  int T = probe.dec_self.cols;
  for (int h = 0; h < params.config.n_heads; ++h) {
    for (int t = 0; t < T; ++t) {
      for (int j = t + 1; j < T; ++j) {
        CHECK(probe.dec_self.at(h * T + t, j) == 0.0);
      }
    }
  }
}

TEST_CASE("causal mask: changing a later target never changes earlier logits") {
  auto params = init_params(tiny_config());
  Rng rng(3);
  auto regions = random_regions(2, 6, rng);

  std::vector<TokenId> framed{1, 5, 6, 7, 8, 2};
  MatrixD base = forward(params, regions, framed);
  std::vector<TokenId> perturbed = framed;
  perturbed[4] = 9;  // decoder input position 4; logits rows 0..3 unaffected
  MatrixD changed = forward(params, regions, perturbed);

  for (int t = 0; t < 4; ++t) {
    for (int j = 0; j < base.cols; ++j) {
      CHECK(base.at(t, j) == changed.at(t, j));
    }
  }
  bool row4_differs = false;
  for (int j = 0; j < base.cols; ++j) {
    if (base.at(4, j) != changed.at(4, j)) row4_differs = true;
  }
  CHECK(row4_differs);
}

TEST_CASE("encoder is permutation-equivariant over regions") {
  auto params = init_params(tiny_config());
  Rng rng(4);
  auto regions = random_regions(5, 6, rng);
  std::vector<TokenId> framed{1, 5, 6, 2};

  MatrixD base = forward(params, regions, framed);
  std::vector<std::vector<double>> shuffled{regions[3], regions[0], regions[4],
                                            regions[1], regions[2]};
  MatrixD permuted = forward(params, shuffled, framed);
  for (size_t i = 0; i < base.data.size(); ++i) {
    CHECK(base.data[i] == doctest::Approx(permuted.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("empty region list runs on the learned null token") {
  auto params = init_params(tiny_config());
  MatrixD logits = forward(params, {}, {1, 5, 2});
  CHECK(logits.rows == 2);
  for (double v : logits.data) CHECK(std::isfinite(v));

  Sample s;
  s.framed = {1, 5, 2};
  auto grads = backward(params, {s});
  REQUIRE(grads.count("null_region") == 1);
  double norm = 0.0;
  for (double v : grads.at("null_region")) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("ce_loss of uniform logits is log(vocab)") {
  MatrixD logits(3, 8);
  std::fill(logits.data.begin(), logits.data.end(), 0.7);
  double loss = ce_loss(logits, {4, 5, 6}, 0);
  CHECK(loss == doctest::Approx(std::log(8.0)).epsilon(1e-6));
}

TEST_CASE("ce_loss goes to zero with a growing one-hot margin") {
  double last = 1e9;
  for (double margin : {2.0, 5.0, 10.0, 40.0}) {
    MatrixD logits(1, 6);
    logits.at(0, 3) = margin;
    double loss = ce_loss(logits, {3}, 0);
    CHECK(loss < last);
    last = loss;
  }
  CHECK(last < 1e-8);
}

TEST_CASE("ce_loss matches a hand-computed two-token case") {
  MatrixD logits(2, 3);
  double rows[2][3] = {{0.5, -0.2, 1.0}, {2.0, 0.0, -1.0}};
  for (int t = 0; t < 2; ++t) {
    for (int j = 0; j < 3; ++j) logits.at(t, j) = rows[t][j];
  }
  // independent per-token -log softmax arithmetic
  auto nll = [&](int t, int target) {
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(rows[t][j]);
    return -(rows[t][target] - std::log(denom));
  };
  double expected = (nll(0, 2) + nll(1, 0)) / 2.0;
  CHECK(ce_loss(logits, {2, 0}, 99) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ce_loss with every position padded is an error") {
  MatrixD logits(2, 4);
  CHECK_THROWS_AS(ce_loss(logits, {0, 0}, 0), UndefinedMetricError);
}

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg);

  Rng data_rng(11);
  std::vector<Sample> batch{random_sample(cfg, 3, 4, data_rng),
                            random_sample(cfg, 0, 3, data_rng)};

  double loss = 0.0;
  GradMap grads = backward(params, batch, &loss);
  CHECK(loss == doctest::Approx(batch_loss(params, batch)).epsilon(1e-12));

  auto names = params.trainable_names();
  const double h = 1e-4;
  Rng pick(42);
  int checked = 0;
  double max_rel_err = 0.0;
  for (const auto& name : names) {
    Tensor& tensor = params.t(name);
    size_t per_tensor = std::max<size_t>(3, 220 / names.size() + 1);
    for (size_t k = 0; k < per_tensor; ++k) {
      size_t idx = pick.uniform_index(tensor.size());
      float original = tensor.data[idx];
      float plus = static_cast<float>(static_cast<double>(original) + h);
      float minus = static_cast<float>(static_cast<double>(original) - h);

      tensor.data[idx] = plus;
      double loss_plus = batch_loss(params, batch);
      tensor.data[idx] = minus;
      double loss_minus = batch_loss(params, batch);
      tensor.data[idx] = original;

      double fd = (loss_plus - loss_minus) /
                  (static_cast<double>(plus) - static_cast<double>(minus));
      double analytic = grads.count(name) ? grads.at(name)[idx] : 0.0;
      double rel = std::abs(fd - analytic) /
                   std::max({std::abs(fd), std::abs(analytic), 1e-8});
      max_rel_err = std::max(max_rel_err, rel);
      ++checked;
    }
  }
  CHECK(checked >= 200);
  CHECK(max_rel_err < 1e-3);
}

TEST_CASE("backward rejects an empty batch") {
  auto params = init_params(tiny_config());
  CHECK_THROWS_AS(backward(params, {}), ConfigError);
}

TEST_CASE("unused embedding rows get exactly zero gradient") {
  ModelConfig cfg = tiny_config();
  auto params = init_params(cfg);
  Sample s;
  s.framed = {1, 5, 2};
  Rng rng(7);
  s.regions = random_regions(2, cfg.feature_dim, rng);
  auto grads = backward(params, {s});

  const auto& d_embed = grads.at("tok_embed");
  int d = cfg.d_model;
  for (TokenId id : {0, 3, 4, 6, 7, 8, 9, 10}) {  // never a decoder input
    for (int j = 0; j < d; ++j) {
      CHECK(d_embed[static_cast<size_t>(id) * d + j] == 0.0);
    }
  }
  // null region unused when regions are present
  CHECK(grads.count("null_region") == 0);
}

TEST_CASE("adam first step matches the closed form") {
  ModelConfig cfg = tiny_config();
  auto params = init_params(cfg);
  auto state = AdamState::init(params);

  // w = 0, g = 1, lr = 0.1: update = lr * mhat / (sqrt(vhat) + eps) with
  // mhat = vhat = 1 after bias correction
  auto& bias = params.t("in_proj.b");
  std::fill(bias.data.begin(), bias.data.end(), 0.0f);
  GradMap grads;
  grads["in_proj.b"] = std::vector<double>(bias.size(), 1.0);

  adam_step(params, grads, state, 0.1);
  CHECK(state.step == 1);
  double expected = -0.1 * (1.0 / (1.0 + 1e-8));
  for (float v : bias.data) {
    CHECK(v == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("adam with zero gradients leaves fresh params unchanged") {
  auto params = init_params(tiny_config());
  auto before = params;
  auto state = AdamState::init(params);
  adam_step(params, {}, state, 0.1);
  CHECK(state.step == 1);
  for (const auto& [name, t] : before.tensors) {
    CHECK(params.t(name).data == t.data);
  }
}

TEST_CASE("adam is deterministic from identical states") {
  auto make = []() {
    auto params = init_params(tiny_config());
    auto state = AdamState::init(params);
    GradMap grads;
    grads["out_proj.b"] =
        std::vector<double>(params.t("out_proj.b").size(), 0.3);
    adam_step(params, grads, state, 0.05);
    adam_step(params, grads, state, 0.05);
    return params;
  };
  auto a = make();
  auto b = make();
  for (const auto& [name, t] : a.tensors) CHECK(b.t(name).data == t.data);
}

TEST_CASE("adam rejects non-positive learning rates") {
  auto params = init_params(tiny_config());
  auto state = AdamState::init(params);
  CHECK_THROWS_AS(adam_step(params, {}, state, 0.0), ConfigError);
  CHECK_THROWS_AS(adam_step(params, {}, state, -1.0), ConfigError);
}

TEST_CASE("lr schedule decays by 0.8 every 3 epochs") {
  TrainConfig cfg;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_schedule(2, cfg) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_schedule(3, cfg) == doctest::Approx(4e-4).epsilon(1e-12));
  CHECK(lr_schedule(6, cfg) == doctest::Approx(3.2e-4).epsilon(1e-12));
  CHECK(lr_schedule(29, cfg) ==
        doctest::Approx(5e-4 * std::pow(0.8, 9)).epsilon(1e-12));
  CHECK_THROWS_AS(lr_schedule(-1, cfg), ConfigError);
}

TEST_CASE("a single pair is memorized within 200 steps") {
  ModelConfig cfg = desk_config(16);
  Rng rng(9);
  Sample sample = random_sample(cfg, 3, 6, rng);

  TrainConfig train_cfg;
  train_cfg.batch_size = 1;
  train_cfg.epochs = 200;  // one step per epoch
  train_cfg.base_lr = 0.01;
  train_cfg.lr_decay = 1.0;
  train_cfg.seed = 1;

  TrainResult result = train({sample}, cfg, train_cfg);
  CHECK(result.epoch_loss.back() < 0.05);

  auto decoded = decode_greedy(result.params, sample.regions, 16);
  std::vector<TokenId> expected(sample.framed.begin() + 1, sample.framed.end());
  CHECK(decoded == expected);
}

TEST_CASE("training lowers the loss on a small synthetic set") {
  ModelConfig cfg = desk_config(20);
  Rng rng(31);
  std::vector<Sample> samples;
  for (int i = 0; i < 64; ++i) samples.push_back(random_sample(cfg, 3, 6, rng));

  TrainConfig train_cfg;
  train_cfg.epochs = 30;
  train_cfg.seed = 2;
  TrainResult result = train(samples, cfg, train_cfg);
  REQUIRE(result.epoch_loss.size() == 30);
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
}

TEST_CASE("training is deterministic given identical seeds") {
  ModelConfig cfg = desk_config(14);
  Rng rng(17);
  std::vector<Sample> samples;
  for (int i = 0; i < 12; ++i) samples.push_back(random_sample(cfg, 2, 5, rng));

  TrainConfig train_cfg;
  train_cfg.epochs = 3;
  train_cfg.seed = 4;
  auto a = train(samples, cfg, train_cfg);
  auto b = train(samples, cfg, train_cfg);
  CHECK(a.epoch_loss == b.epoch_loss);
  for (const auto& [name, t] : a.params.tensors) {
    CHECK(b.params.t(name).data == t.data);
  }
}

TEST_CASE("train aborts with the epoch index on non-finite inputs") {
  ModelConfig cfg = desk_config(14);
  Rng rng(17);
  std::vector<Sample> samples{random_sample(cfg, 2, 5, rng)};
  samples[0].regions[0][0] = std::numeric_limits<double>::infinity();
  TrainConfig train_cfg;
  train_cfg.epochs = 3;
  try {
    train(samples, cfg, train_cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("decode_greedy respects max_len and is deterministic") {
  auto params = init_params(desk_config(14));
  Rng rng(3);
  auto regions = random_regions(2, 8, rng);
  auto one = decode_greedy(params, regions, 1);
  CHECK(one.size() <= 1);
  auto a = decode_greedy(params, regions, 10);
  auto b = decode_greedy(params, regions, 10);
  CHECK(a == b);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ModelConfig cfg = tiny_config();
  auto params = init_params(cfg);
  auto state = AdamState::init(params);
  Rng rng(5);
  std::vector<Sample> batch{random_sample(cfg, 2, 4, rng)};
  adam_step(params, backward(params, batch), state, 0.01);

  std::string path = "/tmp/capmine_ckpt_test.bin";
  save_checkpoint(params, state, path);
  auto [loaded, loaded_state] = load_checkpoint(path, cfg);

  for (const auto& [name, t] : params.tensors) {
    CHECK(loaded.t(name).data == t.data);
  }
  for (const auto& [name, t] : state.m) {
    CHECK(loaded_state.m.at(name).data == t.data);
  }
  for (const auto& [name, t] : state.v) {
    CHECK(loaded_state.v.at(name).data == t.data);
  }
  CHECK(loaded_state.step == state.step);
}

TEST_CASE("checkpoint loader names the failure") {
  ModelConfig cfg = tiny_config();
  auto params = init_params(cfg);
  auto state = AdamState::init(params);
  std::string path = "/tmp/capmine_ckpt_bad.bin";
  save_checkpoint(params, state, path);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_checkpoint(path, cfg);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
  }

  save_checkpoint(params, state, path);
  ModelConfig other = cfg;
  other.d_model = 4;
  try {
    load_checkpoint(path, other);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}

TEST_CASE("resumed training continues the step counter") {
  ModelConfig cfg = desk_config(14);
  Rng rng(23);
  std::vector<Sample> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(random_sample(cfg, 2, 5, rng));

  TrainConfig train_cfg;
  train_cfg.batch_size = 4;
  train_cfg.epochs = 1;
  train_cfg.seed = 6;
  auto first = train(samples, cfg, train_cfg);
  CHECK(first.state.step == 2);  // 8 samples / batch 4

  auto resumed = train_from(first.params, first.state, samples, train_cfg);
  CHECK(resumed.state.step == 4);
}
