#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capmine/errors.hpp"
#include "capmine/records.hpp"
#include "capmine/rng.hpp"

namespace capmine {

// Parameters are stored as f32 (the checkpoint payload format); all forward
// and backward arithmetic runs in double so analytic gradients survive a
// finite-difference check.
struct Tensor {
  std::vector<int> shape;  // 1-D or 2-D
  std::vector<float> data;

  static Tensor matrix(int rows, int cols) {
    return {{rows, cols}, std::vector<float>(static_cast<size_t>(rows) *
                                             static_cast<size_t>(cols))};
  }
  static Tensor vec(int n) { return {{n}, std::vector<float>(static_cast<size_t>(n))}; }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  size_t size() const { return data.size(); }
  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
};

// Row-major double matrix used for activations and logits.
struct MatrixD {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  MatrixD() = default;
  MatrixD(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c) {}
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 0;
  int max_seq_len = 32;
  int feature_dim = 64;
  double dropout = 0.0;
  uint64_t seed = 0;

  int region_input_dim() const { return feature_dim + 5; }
  void validate() const;
};

struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  Tensor& t(const std::string& name);
  const Tensor& t(const std::string& name) const;
  // Every tensor except the fixed sinusoidal position table.
  std::vector<std::string> trainable_names() const;
};

using GradMap = std::map<std::string, std::vector<double>>;

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  uint64_t step = 0;

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  static AdamState init(const ModelParams& params);
};

struct TrainConfig {
  int batch_size = 16;
  double base_lr = 5e-4;
  double lr_decay = 0.8;
  int decay_every = 3;
  int epochs = 30;
  double grad_clip = 0.0;  // 0 disables clipping
  uint64_t seed = 0;

  void validate() const;
};

// One training example as the model consumes it.
struct Sample {
  std::vector<std::vector<double>> regions;  // each feature_dim + 5
  std::vector<TokenId> framed;               // BOS ... EOS
};

ModelParams init_params(const ModelConfig& config);

// Teacher-forced logits, one row per target position (framed length - 1).
MatrixD forward(const ModelParams& params,
                const std::vector<std::vector<double>>& regions,
                const std::vector<TokenId>& framed_target);

// Attention probability matrices from one forward pass, stacked per head
// ((heads * q_rows) x kv_rows). Masked entries are exactly 0.
struct AttentionProbe {
  MatrixD enc_self;
  MatrixD dec_self;
  MatrixD dec_cross;
};

MatrixD forward_probed(const ModelParams& params,
                       const std::vector<std::vector<double>>& regions,
                       const std::vector<TokenId>& framed_target,
                       AttentionProbe& probe);

// Mean token-level negative log-likelihood; PAD targets are masked out.
double ce_loss(const MatrixD& logits, const std::vector<TokenId>& targets,
               TokenId pad_id);

// Analytic gradients of the batch-mean CE with respect to every trainable
// tensor. Also returns that loss.
GradMap backward(const ModelParams& params, const std::vector<Sample>& batch,
                 double* out_loss = nullptr);

// Bias-corrected Adam update; increments the step counter.
void adam_step(ModelParams& params, const GradMap& grads, AdamState& state,
               double lr);

double lr_schedule(int epoch, const TrainConfig& config);

struct TrainResult {
  ModelParams params;
  AdamState state;
  std::vector<double> epoch_loss;
  int truncated_sentences = 0;
};

TrainResult train(const std::vector<Sample>& samples,
                  const ModelConfig& model_config,
                  const TrainConfig& train_config);

// Continues from an existing model/optimizer state.
TrainResult train_from(ModelParams params, AdamState state,
                       const std::vector<Sample>& samples,
                       const TrainConfig& train_config);

// Greedy argmax decoding from BOS until EOS or max_len generated tokens.
// Ties resolve to the lowest token id.
std::vector<TokenId> decode_greedy(const ModelParams& params,
                                   const std::vector<std::vector<double>>& regions,
                                   int max_len);

// Binary checkpoint: magic "CAPM", u32 version, u32 tensor count, then per
// tensor u16 name length + name + u8 ndim + u32 dims + f32 payload. Optimizer
// moments are stored under "adam.m." / "adam.v." prefixes, then u64 step.
void save_checkpoint(const ModelParams& params, const AdamState& state,
                     const std::string& path);
std::pair<ModelParams, AdamState> load_checkpoint(const std::string& path,
                                                  const ModelConfig& config);

}  // namespace capmine
