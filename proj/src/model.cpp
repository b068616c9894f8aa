#include "capmine/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace capmine {

namespace {

constexpr double kLnEpsilon = 1e-5;

// ---- dense helpers (double activations, float weights) ----

// C(m x p) = A(m x n) * W(n x p)
void matmul(const double* a, int m, int n, const Tensor& w, double* c) {
  int p = w.cols();
  std::fill(c, c + static_cast<size_t>(m) * p, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * n;
    double* crow = c + static_cast<size_t>(i) * p;
    for (int j = 0; j < n; ++j) {
      double aij = arow[j];
      const float* wrow = w.data.data() + static_cast<size_t>(j) * p;
      for (int t = 0; t < p; ++t) crow[t] += aij * static_cast<double>(wrow[t]);
    }
  }
}

void add_bias(double* c, int m, const Tensor& b) {
  int p = static_cast<int>(b.size());
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * p;
    for (int t = 0; t < p; ++t) crow[t] += static_cast<double>(b.data[t]);
  }
}

std::vector<double>& grad_buffer(GradMap& grads, const std::string& name,
                                 size_t size) {
  auto& g = grads[name];
  if (g.empty()) g.assign(size, 0.0);
  return g;
}

// dX += dY * W^T, dW += X^T * dY, db += colsum(dY)
void linear_backward(const double* x, int m, int n, const Tensor& w,
                     const double* dy, GradMap& grads, const std::string& w_name,
                     const std::string* b_name, double* dx) {
  int p = w.cols();
  auto& dw = grad_buffer(grads, w_name, w.size());
  for (int i = 0; i < m; ++i) {
    const double* xrow = x + static_cast<size_t>(i) * n;
    const double* dyrow = dy + static_cast<size_t>(i) * p;
    for (int j = 0; j < n; ++j) {
      double xij = xrow[j];
      double* dwrow = dw.data() + static_cast<size_t>(j) * p;
      for (int t = 0; t < p; ++t) dwrow[t] += xij * dyrow[t];
    }
  }
  if (b_name) {
    auto& db = grad_buffer(grads, *b_name, static_cast<size_t>(p));
    for (int i = 0; i < m; ++i) {
      const double* dyrow = dy + static_cast<size_t>(i) * p;
      for (int t = 0; t < p; ++t) db[t] += dyrow[t];
    }
  }
  if (dx) {
    for (int i = 0; i < m; ++i) {
      const double* dyrow = dy + static_cast<size_t>(i) * p;
      double* dxrow = dx + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const float* wrow = w.data.data() + static_cast<size_t>(j) * p;
        double s = 0.0;
        for (int t = 0; t < p; ++t) s += dyrow[t] * static_cast<double>(wrow[t]);
        dxrow[j] += s;
      }
    }
  }
}

struct LnCache {
  std::vector<double> x;     // rows x d, pre-norm input
  std::vector<double> xhat;  // rows x d
  std::vector<double> rstd;  // rows
};

std::vector<double> layer_norm(std::vector<double> x, int rows, int d,
                               const Tensor& gain, const Tensor& bias,
                               LnCache& cache) {
  std::vector<double> y(x.size());
  cache.xhat.resize(x.size());
  cache.rstd.resize(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* xrow = x.data() + static_cast<size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xrow[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xrow[j] - mean) * (xrow[j] - mean);
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLnEpsilon);
    cache.rstd[static_cast<size_t>(i)] = rstd;
    for (int j = 0; j < d; ++j) {
      double xh = (xrow[j] - mean) * rstd;
      cache.xhat[static_cast<size_t>(i) * d + j] = xh;
      y[static_cast<size_t>(i) * d + j] =
          static_cast<double>(gain.data[static_cast<size_t>(j)]) * xh +
          static_cast<double>(bias.data[static_cast<size_t>(j)]);
    }
  }
  cache.x = std::move(x);
  return y;
}

std::vector<double> layer_norm_backward(const LnCache& cache, int rows, int d,
                                        const Tensor& gain,
                                        const std::vector<double>& dy,
                                        GradMap& grads,
                                        const std::string& g_name,
                                        const std::string& b_name) {
  auto& dg = grad_buffer(grads, g_name, static_cast<size_t>(d));
  auto& db = grad_buffer(grads, b_name, static_cast<size_t>(d));
  std::vector<double> dx(dy.size());
  for (int i = 0; i < rows; ++i) {
    const double* dyrow = dy.data() + static_cast<size_t>(i) * d;
    const double* xhrow = cache.xhat.data() + static_cast<size_t>(i) * d;
    double rstd = cache.rstd[static_cast<size_t>(i)];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      double dxh = dyrow[j] * static_cast<double>(gain.data[static_cast<size_t>(j)]);
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xhrow[j];
      dg[static_cast<size_t>(j)] += dyrow[j] * xhrow[j];
      db[static_cast<size_t>(j)] += dyrow[j];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    double* dxrow = dx.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      double dxh = dyrow[j] * static_cast<double>(gain.data[static_cast<size_t>(j)]);
      dxrow[j] = rstd * (dxh - mean_dxhat - xhrow[j] * mean_dxhat_xhat);
    }
  }
  return dx;
}

struct AttnCache {
  int q_rows = 0, kv_rows = 0;
  std::vector<double> x_q, x_kv;  // inputs
  std::vector<double> q, k, v;    // rows x d
  std::vector<double> probs;      // heads x q_rows x kv_rows, masked entries 0
  std::vector<double> concat;     // q_rows x d
};

struct AttnWeights {
  const Tensor *wq, *wk, *wv, *wo;
  std::string prefix;  // grad names: prefix + "wq" etc.
};

std::vector<double> attention(std::vector<double> x_q, int q_rows,
                              std::vector<double> x_kv, int kv_rows,
                              const AttnWeights& w, int heads, bool causal,
                              AttnCache& cache) {
  int d = w.wq->cols();
  int dk = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  cache.q_rows = q_rows;
  cache.kv_rows = kv_rows;
  cache.q.resize(static_cast<size_t>(q_rows) * d);
  cache.k.resize(static_cast<size_t>(kv_rows) * d);
  cache.v.resize(static_cast<size_t>(kv_rows) * d);
  matmul(x_q.data(), q_rows, d, *w.wq, cache.q.data());
  matmul(x_kv.data(), kv_rows, d, *w.wk, cache.k.data());
  matmul(x_kv.data(), kv_rows, d, *w.wv, cache.v.data());

  cache.probs.assign(static_cast<size_t>(heads) * q_rows * kv_rows, 0.0);
  cache.concat.assign(static_cast<size_t>(q_rows) * d, 0.0);
  std::vector<double> scores(static_cast<size_t>(kv_rows));
  for (int h = 0; h < heads; ++h) {
    int off = h * dk;
    for (int i = 0; i < q_rows; ++i) {
      int limit = causal ? i + 1 : kv_rows;
      const double* qrow = cache.q.data() + static_cast<size_t>(i) * d + off;
      double max_score = -1e300;
      for (int j = 0; j < limit; ++j) {
        const double* krow = cache.k.data() + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int t = 0; t < dk; ++t) s += qrow[t] * krow[t];
        s *= scale;
        scores[static_cast<size_t>(j)] = s;
        max_score = std::max(max_score, s);
      }
      double denom = 0.0;
      for (int j = 0; j < limit; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - max_score);
        denom += scores[static_cast<size_t>(j)];
      }
      double* prow = cache.probs.data() +
                     (static_cast<size_t>(h) * q_rows + i) * kv_rows;
      double* crow = cache.concat.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < limit; ++j) {
        double p = scores[static_cast<size_t>(j)] / denom;
        prow[j] = p;
        const double* vrow = cache.v.data() + static_cast<size_t>(j) * d + off;
        for (int t = 0; t < dk; ++t) crow[t] += p * vrow[t];
      }
    }
  }

  std::vector<double> out(static_cast<size_t>(q_rows) * d);
  matmul(cache.concat.data(), q_rows, d, *w.wo, out.data());
  cache.x_q = std::move(x_q);
  cache.x_kv = std::move(x_kv);
  return out;
}

// d_xq and d_xkv are accumulated into; pass the same buffer for self-attention.
void attention_backward(const AttnCache& cache, const AttnWeights& w, int heads,
                        const std::vector<double>& d_out, GradMap& grads,
                        std::vector<double>& d_xq, std::vector<double>& d_xkv) {
  int d = w.wq->cols();
  int dk = d / heads;
  int q_rows = cache.q_rows;
  int kv_rows = cache.kv_rows;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<double> d_concat(static_cast<size_t>(q_rows) * d);
  linear_backward(cache.concat.data(), q_rows, d, *w.wo, d_out.data(), grads,
                  w.prefix + "wo", nullptr, nullptr);
  {
    // d_concat = d_out * Wo^T (weight gradient handled above)
    int p = w.wo->cols();
    for (int i = 0; i < q_rows; ++i) {
      const double* dyrow = d_out.data() + static_cast<size_t>(i) * p;
      double* dxrow = d_concat.data() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        const float* wrow = w.wo->data.data() + static_cast<size_t>(j) * p;
        double s = 0.0;
        for (int t = 0; t < p; ++t) s += dyrow[t] * static_cast<double>(wrow[t]);
        dxrow[j] = s;
      }
    }
  }

  std::vector<double> dq(static_cast<size_t>(q_rows) * d, 0.0);
  std::vector<double> dkv_k(static_cast<size_t>(kv_rows) * d, 0.0);
  std::vector<double> dkv_v(static_cast<size_t>(kv_rows) * d, 0.0);
  std::vector<double> dp(static_cast<size_t>(kv_rows));
  for (int h = 0; h < heads; ++h) {
    int off = h * dk;
    for (int i = 0; i < q_rows; ++i) {
      const double* prow = cache.probs.data() +
                           (static_cast<size_t>(h) * q_rows + i) * kv_rows;
      const double* dcrow = d_concat.data() + static_cast<size_t>(i) * d + off;
      // dV and dP
      double dot = 0.0;
      for (int j = 0; j < kv_rows; ++j) {
        const double* vrow = cache.v.data() + static_cast<size_t>(j) * d + off;
        double pij = prow[j];
        double dpij = 0.0;
        for (int t = 0; t < dk; ++t) {
          dpij += dcrow[t] * vrow[t];
        }
        if (pij != 0.0) {
          double* dvrow = dkv_v.data() + static_cast<size_t>(j) * d + off;
          for (int t = 0; t < dk; ++t) dvrow[t] += pij * dcrow[t];
        }
        dp[static_cast<size_t>(j)] = dpij;
        dot += pij * dpij;
      }
      // softmax backward, then the 1/sqrt(dk) score scale
      const double* qrow = cache.q.data() + static_cast<size_t>(i) * d + off;
      double* dqrow = dq.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < kv_rows; ++j) {
        double pij = prow[j];
        if (pij == 0.0) continue;
        double ds = pij * (dp[static_cast<size_t>(j)] - dot) * scale;
        const double* krow = cache.k.data() + static_cast<size_t>(j) * d + off;
        double* dkrow = dkv_k.data() + static_cast<size_t>(j) * d + off;
        for (int t = 0; t < dk; ++t) {
          dqrow[t] += ds * krow[t];
          dkrow[t] += ds * qrow[t];
        }
      }
    }
  }

  linear_backward(cache.x_q.data(), q_rows, d, *w.wq, dq.data(), grads,
                  w.prefix + "wq", nullptr, d_xq.data());
  linear_backward(cache.x_kv.data(), kv_rows, d, *w.wk, dkv_k.data(), grads,
                  w.prefix + "wk", nullptr, d_xkv.data());
  linear_backward(cache.x_kv.data(), kv_rows, d, *w.wv, dkv_v.data(), grads,
                  w.prefix + "wv", nullptr, d_xkv.data());
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

struct FfCache {
  std::vector<double> x;  // rows x d
  std::vector<double> h;  // rows x d_ff, post-ReLU
};

std::vector<double> feed_forward(std::vector<double> x, int rows,
                                 const Tensor& w1, const Tensor& b1,
                                 const Tensor& w2, const Tensor& b2,
                                 FfCache& cache) {
  int d = w1.rows();
  int d_ff = w1.cols();
  cache.h.resize(static_cast<size_t>(rows) * d_ff);
  matmul(x.data(), rows, d, w1, cache.h.data());
  add_bias(cache.h.data(), rows, b1);
  for (double& v : cache.h) v = relu(v);
  std::vector<double> out(static_cast<size_t>(rows) * d);
  matmul(cache.h.data(), rows, d_ff, w2, out.data());
  add_bias(out.data(), rows, b2);
  cache.x = std::move(x);
  return out;
}

std::vector<double> feed_forward_backward(const FfCache& cache, int rows,
                                          const Tensor& w1, const Tensor& w2,
                                          const std::vector<double>& dy,
                                          GradMap& grads,
                                          const std::string& prefix) {
  int d = w1.rows();
  int d_ff = w1.cols();
  std::vector<double> dh(static_cast<size_t>(rows) * d_ff, 0.0);
  const std::string w2_name = prefix + "w2", b2_name = prefix + "b2";
  linear_backward(cache.h.data(), rows, d_ff, w2, dy.data(), grads, w2_name,
                  &b2_name, dh.data());
  for (size_t i = 0; i < dh.size(); ++i) {
    if (cache.h[i] == 0.0) dh[i] = 0.0;
  }
  std::vector<double> dx(static_cast<size_t>(rows) * d, 0.0);
  const std::string w1_name = prefix + "w1", b1_name = prefix + "b1";
  linear_backward(cache.x.data(), rows, d, w1, dh.data(), grads, w1_name,
                  &b1_name, dx.data());
  return dx;
}

// Inverted dropout; mask holds the multiplier applied to each element.
void apply_dropout(std::vector<double>& x, double p, Rng* rng,
                   std::vector<double>& mask) {
  if (p <= 0.0 || rng == nullptr) {
    mask.clear();
    return;
  }
  mask.resize(x.size());
  double keep_scale = 1.0 / (1.0 - p);
  for (size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->uniform() < p ? 0.0 : keep_scale;
    x[i] *= mask[i];
  }
}

void mask_gradient(std::vector<double>& g, const std::vector<double>& mask) {
  if (mask.empty()) return;
  for (size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
}

struct ForwardCache {
  int k = 0;  // encoder rows (1 when the null region stands in)
  int T = 0;  // decoder rows
  bool used_null = false;
  std::vector<double> enc_in;
  std::vector<double> enc_h0;
  AttnCache enc_attn;
  LnCache enc_ln1;
  FfCache enc_ff;
  LnCache enc_ln2;
  std::vector<double> enc_h1;
  std::vector<double> memory;
  std::vector<TokenId> dec_in;
  std::vector<double> dec_emb;
  AttnCache dec_self;
  LnCache dec_ln1;
  std::vector<double> dec_h1;
  AttnCache dec_cross;
  LnCache dec_ln2;
  std::vector<double> dec_h2;
  FfCache dec_ff;
  LnCache dec_ln3;
  std::vector<double> dec_h3;
  std::vector<double> drop_enc_attn, drop_enc_ff;
  std::vector<double> drop_dec_self, drop_dec_cross, drop_dec_ff;
};

MatrixD forward_impl(const ModelParams& params,
                     const std::vector<std::vector<double>>& regions,
                     const std::vector<TokenId>& dec_in, ForwardCache& cache,
                     Rng* dropout_rng) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.d_model;
  const double p_drop = cfg.dropout;

  // encoder input: projected regions, or the learned null-region token
  if (regions.empty()) {
    cache.used_null = true;
    cache.k = 1;
    const Tensor& null_region = params.t("null_region");
    cache.enc_h0.resize(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) {
      cache.enc_h0[static_cast<size_t>(j)] =
          static_cast<double>(null_region.data[static_cast<size_t>(j)]);
    }
  } else {
    cache.used_null = false;
    cache.k = static_cast<int>(regions.size());
    int in_dim = cfg.region_input_dim();
    cache.enc_in.resize(static_cast<size_t>(cache.k) * in_dim);
    for (int i = 0; i < cache.k; ++i) {
      if (static_cast<int>(regions[static_cast<size_t>(i)].size()) != in_dim) {
        throw ConfigError("region input has dimension " +
                          std::to_string(regions[static_cast<size_t>(i)].size()) +
                          ", expected " + std::to_string(in_dim));
      }
      std::copy(regions[static_cast<size_t>(i)].begin(),
                regions[static_cast<size_t>(i)].end(),
                cache.enc_in.begin() + static_cast<size_t>(i) * in_dim);
    }
    cache.enc_h0.resize(static_cast<size_t>(cache.k) * d);
    matmul(cache.enc_in.data(), cache.k, in_dim, params.t("in_proj.w"),
           cache.enc_h0.data());
    add_bias(cache.enc_h0.data(), cache.k, params.t("in_proj.b"));
  }

  // encoder block; regions carry no positional encoding
  AttnWeights enc_w{&params.t("enc.attn.wq"), &params.t("enc.attn.wk"),
                    &params.t("enc.attn.wv"), &params.t("enc.attn.wo"),
                    "enc.attn."};
  auto enc_attn_out = attention(cache.enc_h0, cache.k, cache.enc_h0, cache.k,
                                enc_w, cfg.n_heads, false, cache.enc_attn);
  apply_dropout(enc_attn_out, p_drop, dropout_rng, cache.drop_enc_attn);
  std::vector<double> res(cache.enc_h0);
  for (size_t i = 0; i < res.size(); ++i) res[i] += enc_attn_out[i];
  cache.enc_h1 = layer_norm(std::move(res), cache.k, d, params.t("enc.ln1.g"),
                            params.t("enc.ln1.b"), cache.enc_ln1);

  auto enc_ff_out =
      feed_forward(cache.enc_h1, cache.k, params.t("enc.ff.w1"),
                   params.t("enc.ff.b1"), params.t("enc.ff.w2"),
                   params.t("enc.ff.b2"), cache.enc_ff);
  apply_dropout(enc_ff_out, p_drop, dropout_rng, cache.drop_enc_ff);
  std::vector<double> res2(cache.enc_h1);
  for (size_t i = 0; i < res2.size(); ++i) res2[i] += enc_ff_out[i];
  cache.memory = layer_norm(std::move(res2), cache.k, d, params.t("enc.ln2.g"),
                            params.t("enc.ln2.b"), cache.enc_ln2);

  // decoder
  cache.T = static_cast<int>(dec_in.size());
  if (cache.T < 1) throw ConfigError("decoder needs at least one input token");
  if (cache.T > cfg.max_seq_len) {
    throw ConfigError("sequence length " + std::to_string(cache.T) +
                      " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  cache.dec_in = dec_in;
  const Tensor& tok_embed = params.t("tok_embed");
  const Tensor& pos_table = params.t("pos_table");
  cache.dec_emb.resize(static_cast<size_t>(cache.T) * d);
  for (int t = 0; t < cache.T; ++t) {
    TokenId id = dec_in[static_cast<size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) +
                        " outside vocab of size " + std::to_string(cfg.vocab_size));
    }
    for (int j = 0; j < d; ++j) {
      cache.dec_emb[static_cast<size_t>(t) * d + j] =
          static_cast<double>(tok_embed.at(id, j)) +
          static_cast<double>(pos_table.at(t, j));
    }
  }

  AttnWeights self_w{&params.t("dec.self.wq"), &params.t("dec.self.wk"),
                     &params.t("dec.self.wv"), &params.t("dec.self.wo"),
                     "dec.self."};
  auto self_out = attention(cache.dec_emb, cache.T, cache.dec_emb, cache.T,
                            self_w, cfg.n_heads, true, cache.dec_self);
  apply_dropout(self_out, p_drop, dropout_rng, cache.drop_dec_self);
  std::vector<double> dres(cache.dec_emb);
  for (size_t i = 0; i < dres.size(); ++i) dres[i] += self_out[i];
  cache.dec_h1 = layer_norm(std::move(dres), cache.T, d, params.t("dec.ln1.g"),
                            params.t("dec.ln1.b"), cache.dec_ln1);

  AttnWeights cross_w{&params.t("dec.cross.wq"), &params.t("dec.cross.wk"),
                      &params.t("dec.cross.wv"), &params.t("dec.cross.wo"),
                      "dec.cross."};
  auto cross_out = attention(cache.dec_h1, cache.T, cache.memory, cache.k,
                             cross_w, cfg.n_heads, false, cache.dec_cross);
  apply_dropout(cross_out, p_drop, dropout_rng, cache.drop_dec_cross);
  std::vector<double> dres2(cache.dec_h1);
  for (size_t i = 0; i < dres2.size(); ++i) dres2[i] += cross_out[i];
  cache.dec_h2 = layer_norm(std::move(dres2), cache.T, d, params.t("dec.ln2.g"),
                            params.t("dec.ln2.b"), cache.dec_ln2);

  auto dec_ff_out =
      feed_forward(cache.dec_h2, cache.T, params.t("dec.ff.w1"),
                   params.t("dec.ff.b1"), params.t("dec.ff.w2"),
                   params.t("dec.ff.b2"), cache.dec_ff);
  apply_dropout(dec_ff_out, p_drop, dropout_rng, cache.drop_dec_ff);
  std::vector<double> dres3(cache.dec_h2);
  for (size_t i = 0; i < dres3.size(); ++i) dres3[i] += dec_ff_out[i];
  cache.dec_h3 = layer_norm(std::move(dres3), cache.T, d, params.t("dec.ln3.g"),
                            params.t("dec.ln3.b"), cache.dec_ln3);

  MatrixD logits(cache.T, cfg.vocab_size);
  matmul(cache.dec_h3.data(), cache.T, d, params.t("out_proj.w"),
         logits.data.data());
  add_bias(logits.data.data(), cache.T, params.t("out_proj.b"));
  return logits;
}

// Backpropagates d_logits (T x vocab) through the cached forward pass.
void backward_impl(const ModelParams& params, const ForwardCache& cache,
                   const std::vector<double>& d_logits, GradMap& grads) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.d_model;

  // output projection
  std::vector<double> d_h3(static_cast<size_t>(cache.T) * d, 0.0);
  {
    const std::string w_name = "out_proj.w", b_name = "out_proj.b";
    linear_backward(cache.dec_h3.data(), cache.T, d, params.t(w_name),
                    d_logits.data(), grads, w_name, &b_name, d_h3.data());
  }

  // decoder ln3 + ff
  auto d_res3 = layer_norm_backward(cache.dec_ln3, cache.T, d,
                                    params.t("dec.ln3.g"), d_h3, grads,
                                    "dec.ln3.g", "dec.ln3.b");
  std::vector<double> d_ff_out = d_res3;
  mask_gradient(d_ff_out, cache.drop_dec_ff);
  auto d_h2 = feed_forward_backward(cache.dec_ff, cache.T,
                                    params.t("dec.ff.w1"), params.t("dec.ff.w2"),
                                    d_ff_out, grads, "dec.ff.");
  for (size_t i = 0; i < d_h2.size(); ++i) d_h2[i] += d_res3[i];

  // decoder ln2 + cross attention
  auto d_res2 = layer_norm_backward(cache.dec_ln2, cache.T, d,
                                    params.t("dec.ln2.g"), d_h2, grads,
                                    "dec.ln2.g", "dec.ln2.b");
  std::vector<double> d_cross_out = d_res2;
  mask_gradient(d_cross_out, cache.drop_dec_cross);
  std::vector<double> d_h1(static_cast<size_t>(cache.T) * d, 0.0);
  std::vector<double> d_memory(static_cast<size_t>(cache.k) * d, 0.0);
  AttnWeights cross_w{&params.t("dec.cross.wq"), &params.t("dec.cross.wk"),
                      &params.t("dec.cross.wv"), &params.t("dec.cross.wo"),
                      "dec.cross."};
  attention_backward(cache.dec_cross, cross_w, cfg.n_heads, d_cross_out, grads,
                     d_h1, d_memory);
  for (size_t i = 0; i < d_h1.size(); ++i) d_h1[i] += d_res2[i];

  // decoder ln1 + masked self attention
  auto d_res1 = layer_norm_backward(cache.dec_ln1, cache.T, d,
                                    params.t("dec.ln1.g"), d_h1, grads,
                                    "dec.ln1.g", "dec.ln1.b");
  std::vector<double> d_self_out = d_res1;
  mask_gradient(d_self_out, cache.drop_dec_self);
  std::vector<double> d_emb(static_cast<size_t>(cache.T) * d, 0.0);
  AttnWeights self_w{&params.t("dec.self.wq"), &params.t("dec.self.wk"),
                     &params.t("dec.self.wv"), &params.t("dec.self.wo"),
                     "dec.self."};
  attention_backward(cache.dec_self, self_w, cfg.n_heads, d_self_out, grads,
                     d_emb, d_emb);
  for (size_t i = 0; i < d_emb.size(); ++i) d_emb[i] += d_res1[i];

  // token embedding rows (position table is a fixed buffer)
  {
    auto& d_embed = grad_buffer(grads, "tok_embed", params.t("tok_embed").size());
    for (int t = 0; t < cache.T; ++t) {
      TokenId id = cache.dec_in[static_cast<size_t>(t)];
      double* row = d_embed.data() + static_cast<size_t>(id) * d;
      const double* src = d_emb.data() + static_cast<size_t>(t) * d;
      for (int j = 0; j < d; ++j) row[j] += src[j];
    }
  }

  // encoder ln2 + ff
  auto d_eres2 = layer_norm_backward(cache.enc_ln2, cache.k, d,
                                     params.t("enc.ln2.g"), d_memory, grads,
                                     "enc.ln2.g", "enc.ln2.b");
  std::vector<double> d_eff_out = d_eres2;
  mask_gradient(d_eff_out, cache.drop_enc_ff);
  auto d_eh1 = feed_forward_backward(cache.enc_ff, cache.k,
                                     params.t("enc.ff.w1"), params.t("enc.ff.w2"),
                                     d_eff_out, grads, "enc.ff.");
  for (size_t i = 0; i < d_eh1.size(); ++i) d_eh1[i] += d_eres2[i];

  // encoder ln1 + self attention
  auto d_eres1 = layer_norm_backward(cache.enc_ln1, cache.k, d,
                                     params.t("enc.ln1.g"), d_eh1, grads,
                                     "enc.ln1.g", "enc.ln1.b");
  std::vector<double> d_eattn_out = d_eres1;
  mask_gradient(d_eattn_out, cache.drop_enc_attn);
  std::vector<double> d_h0(static_cast<size_t>(cache.k) * d, 0.0);
  AttnWeights enc_w{&params.t("enc.attn.wq"), &params.t("enc.attn.wk"),
                    &params.t("enc.attn.wv"), &params.t("enc.attn.wo"),
                    "enc.attn."};
  attention_backward(cache.enc_attn, enc_w, cfg.n_heads, d_eattn_out, grads,
                     d_h0, d_h0);
  for (size_t i = 0; i < d_h0.size(); ++i) d_h0[i] += d_eres1[i];

  // region input projection or the null-region token
  if (cache.used_null) {
    auto& d_null = grad_buffer(grads, "null_region", static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) d_null[static_cast<size_t>(j)] += d_h0[static_cast<size_t>(j)];
  } else {
    const std::string w_name = "in_proj.w", b_name = "in_proj.b";
    linear_backward(cache.enc_in.data(), cache.k, cfg.region_input_dim(),
                    params.t(w_name), d_h0.data(), grads, w_name, &b_name,
                    nullptr);
  }
}

// Softmax of a logits row; returns probabilities.
void softmax_row(const double* logits, int n, double* probs) {
  double max_v = logits[0];
  for (int j = 1; j < n; ++j) max_v = std::max(max_v, logits[j]);
  double denom = 0.0;
  for (int j = 0; j < n; ++j) {
    probs[j] = std::exp(logits[j] - max_v);
    denom += probs[j];
  }
  for (int j = 0; j < n; ++j) probs[j] /= denom;
}

int count_loss_tokens(const std::vector<TokenId>& framed, TokenId pad_id) {
  int n = 0;
  for (size_t t = 1; t < framed.size(); ++t) {
    if (framed[t] != pad_id) ++n;
  }
  return n;
}

GradMap backward_batch(const ModelParams& params, const std::vector<Sample>& batch,
                       double* out_loss, Rng* dropout_rng) {
  if (batch.empty()) throw ConfigError("backward on an empty batch");
  constexpr TokenId kPad = 0;

  long total_tokens = 0;
  for (const auto& s : batch) {
    if (s.framed.size() < 2) {
      throw ConfigError("framed target must hold at least BOS and EOS");
    }
    total_tokens += count_loss_tokens(s.framed, kPad);
  }
  if (total_tokens == 0) {
    throw UndefinedMetricError("every target position is PAD");
  }

  GradMap grads;
  double loss = 0.0;
  const int vocab = params.config.vocab_size;
  for (const auto& sample : batch) {
    ForwardCache cache;
    std::vector<TokenId> dec_in(sample.framed.begin(), sample.framed.end() - 1);
    MatrixD logits = forward_impl(params, sample.regions, dec_in, cache,
                                  dropout_rng);
    std::vector<double> d_logits(logits.data.size(), 0.0);
    std::vector<double> probs(static_cast<size_t>(vocab));
    for (int t = 0; t < logits.rows; ++t) {
      TokenId target = sample.framed[static_cast<size_t>(t) + 1];
      if (target == kPad) continue;
      softmax_row(logits.data.data() + static_cast<size_t>(t) * vocab, vocab,
                  probs.data());
      loss -= std::log(std::max(probs[static_cast<size_t>(target)], 1e-300));
      double* drow = d_logits.data() + static_cast<size_t>(t) * vocab;
      for (int j = 0; j < vocab; ++j) {
        drow[j] = probs[static_cast<size_t>(j)] / static_cast<double>(total_tokens);
      }
      drow[target] -= 1.0 / static_cast<double>(total_tokens);
    }
    backward_impl(params, cache, d_logits, grads);
  }

  for (const auto& [name, g] : grads) {
    for (double v : g) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient in tensor '" + name + "'");
      }
    }
  }
  if (out_loss) *out_loss = loss / static_cast<double>(total_tokens);
  return grads;
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (float& v : t.data) {
    v = static_cast<float>(rng.uniform(-bound, bound));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len < 2 ||
      feature_dim <= 0) {
    throw ConfigError("model sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size < 5) {
    throw ConfigError("vocab_size must cover the 4 special ids plus one word");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout outside [0,1)");
  }
}

Tensor& ModelParams::t(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown tensor '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::t(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> ModelParams::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, tensor] : tensors) {
    if (name != "pos_table") names.push_back(name);
  }
  return names;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams params;
  params.config = config;
  const int d = config.d_model;
  const int in_dim = config.region_input_dim();

  auto& t = params.tensors;
  t["in_proj.w"] = Tensor::matrix(in_dim, d);
  t["in_proj.b"] = Tensor::vec(d);
  t["null_region"] = Tensor::vec(d);
  t["tok_embed"] = Tensor::matrix(config.vocab_size, d);
  t["pos_table"] = Tensor::matrix(config.max_seq_len, d);
  for (const char* block : {"enc.attn.", "dec.self.", "dec.cross."}) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      t[std::string(block) + w] = Tensor::matrix(d, d);
    }
  }
  for (const char* block : {"enc.", "dec."}) {
    t[std::string(block) + "ff.w1"] = Tensor::matrix(d, config.d_ff);
    t[std::string(block) + "ff.b1"] = Tensor::vec(config.d_ff);
    t[std::string(block) + "ff.w2"] = Tensor::matrix(config.d_ff, d);
    t[std::string(block) + "ff.b2"] = Tensor::vec(d);
  }
  for (const char* ln : {"enc.ln1.", "enc.ln2.", "dec.ln1.", "dec.ln2.", "dec.ln3."}) {
    t[std::string(ln) + "g"] = Tensor::vec(d);
    t[std::string(ln) + "b"] = Tensor::vec(d);
  }
  t["out_proj.w"] = Tensor::matrix(d, config.vocab_size);
  t["out_proj.b"] = Tensor::vec(config.vocab_size);

  Rng rng(derive_seed(config.seed, "init"));
  // Weight matrices: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is the
  // input dimension of the matmul. Embedding-like tensors use d_model.
  // Fixed fill order keeps equal seeds bit-identical.
  fill_uniform(params.t("in_proj.w"), 1.0 / std::sqrt(double(in_dim)), rng);
  fill_uniform(params.t("null_region"), 1.0 / std::sqrt(double(d)), rng);
  fill_uniform(params.t("tok_embed"), 1.0 / std::sqrt(double(d)), rng);
  for (const char* block : {"enc.attn.", "dec.self.", "dec.cross."}) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      fill_uniform(params.t(std::string(block) + w), 1.0 / std::sqrt(double(d)), rng);
    }
  }
  for (const char* block : {"enc.", "dec."}) {
    fill_uniform(params.t(std::string(block) + "ff.w1"),
                 1.0 / std::sqrt(double(d)), rng);
    fill_uniform(params.t(std::string(block) + "ff.w2"),
                 1.0 / std::sqrt(double(config.d_ff)), rng);
  }
  fill_uniform(params.t("out_proj.w"), 1.0 / std::sqrt(double(d)), rng);
  for (const char* ln : {"enc.ln1.", "enc.ln2.", "dec.ln1.", "dec.ln2.", "dec.ln3."}) {
    auto& gain = params.t(std::string(ln) + "g");
    std::fill(gain.data.begin(), gain.data.end(), 1.0f);
  }

  Tensor& pos = params.t("pos_table");
  for (int p = 0; p < config.max_seq_len; ++p) {
    for (int j = 0; j < d; ++j) {
      double angle = p / std::pow(10000.0, double(2 * (j / 2)) / d);
      pos.at(p, j) = static_cast<float>(j % 2 == 0 ? std::sin(angle)
                                                   : std::cos(angle));
    }
  }
  return params;
}

MatrixD forward(const ModelParams& params,
                const std::vector<std::vector<double>>& regions,
                const std::vector<TokenId>& framed_target) {
  if (framed_target.size() < 2) {
    throw ConfigError("framed target must hold at least BOS and EOS");
  }
  ForwardCache cache;
  std::vector<TokenId> dec_in(framed_target.begin(), framed_target.end() - 1);
  return forward_impl(params, regions, dec_in, cache, nullptr);
}

MatrixD forward_probed(const ModelParams& params,
                       const std::vector<std::vector<double>>& regions,
                       const std::vector<TokenId>& framed_target,
                       AttentionProbe& probe) {
  if (framed_target.size() < 2) {
    throw ConfigError("framed target must hold at least BOS and EOS");
  }
  ForwardCache cache;
  std::vector<TokenId> dec_in(framed_target.begin(), framed_target.end() - 1);
  MatrixD logits = forward_impl(params, regions, dec_in, cache, nullptr);
  auto copy_probs = [&](const AttnCache& c) {
    MatrixD m(params.config.n_heads * c.q_rows, c.kv_rows);
    m.data = c.probs;
    return m;
  };
  probe.enc_self = copy_probs(cache.enc_attn);
  probe.dec_self = copy_probs(cache.dec_self);
  probe.dec_cross = copy_probs(cache.dec_cross);
  return logits;
}

double ce_loss(const MatrixD& logits, const std::vector<TokenId>& targets,
               TokenId pad_id) {
  if (static_cast<int>(targets.size()) != logits.rows) {
    throw ConfigError("logits rows do not match target length");
  }
  std::vector<double> probs(static_cast<size_t>(logits.cols));
  double loss = 0.0;
  int counted = 0;
  for (int t = 0; t < logits.rows; ++t) {
    TokenId target = targets[static_cast<size_t>(t)];
    if (target == pad_id) continue;
    if (target < 0 || target >= logits.cols) {
      throw ConfigError("target id " + std::to_string(target) + " out of range");
    }
    softmax_row(logits.data.data() + static_cast<size_t>(t) * logits.cols,
                logits.cols, probs.data());
    loss -= std::log(std::max(probs[static_cast<size_t>(target)], 1e-300));
    ++counted;
  }
  if (counted == 0) throw UndefinedMetricError("all target positions are PAD");
  return loss / counted;
}

GradMap backward(const ModelParams& params, const std::vector<Sample>& batch,
                 double* out_loss) {
  return backward_batch(params, batch, out_loss, nullptr);
}

AdamState AdamState::init(const ModelParams& params) {
  AdamState state;
  for (const auto& name : params.trainable_names()) {
    const Tensor& t = params.t(name);
    state.m[name] = Tensor{t.shape, std::vector<float>(t.size(), 0.0f)};
    state.v[name] = Tensor{t.shape, std::vector<float>(t.size(), 0.0f)};
  }
  return state;
}

void adam_step(ModelParams& params, const GradMap& grads, AdamState& state,
               double lr) {
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  state.step += 1;
  double bc1 = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.step));

  for (const auto& name : params.trainable_names()) {
    Tensor& theta = params.t(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    const std::vector<double>* g = nullptr;
    if (auto it = grads.find(name); it != grads.end()) {
      if (it->second.size() != theta.size()) {
        throw ConfigError("gradient shape mismatch for tensor '" + name + "'");
      }
      g = &it->second;
    }
    for (size_t i = 0; i < theta.size(); ++i) {
      double gi = g ? (*g)[i] : 0.0;
      double mi = AdamState::kBeta1 * static_cast<double>(m.data[i]) +
                  (1.0 - AdamState::kBeta1) * gi;
      double vi = AdamState::kBeta2 * static_cast<double>(v.data[i]) +
                  (1.0 - AdamState::kBeta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + AdamState::kEpsilon);
      double next = static_cast<double>(theta.data[i]) - update;
      // saturate instead of hitting undefined float narrowing
      if (next > std::numeric_limits<float>::max()) {
        theta.data[i] = std::numeric_limits<float>::infinity();
      } else if (next < std::numeric_limits<float>::lowest()) {
        theta.data[i] = -std::numeric_limits<float>::infinity();
      } else {
        theta.data[i] = static_cast<float>(next);
      }
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size <= 0 || epochs < 0 || decay_every <= 0) {
    throw ConfigError("train config values must be positive");
  }
  if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
  if (lr_decay <= 0.0 || lr_decay > 1.0) throw ConfigError("lr_decay outside (0,1]");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
}

double lr_schedule(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  return config.base_lr * std::pow(config.lr_decay, epoch / config.decay_every);
}

TrainResult train_from(ModelParams params, AdamState state,
                       const std::vector<Sample>& samples,
                       const TrainConfig& train_config) {
  train_config.validate();
  if (samples.empty()) throw ConfigError("no training samples");

  TrainResult result;
  std::vector<Sample> data = samples;
  for (auto& s : data) {
    if (static_cast<int>(s.framed.size()) > params.config.max_seq_len + 1) {
      s.framed.resize(static_cast<size_t>(params.config.max_seq_len) + 1);
      s.framed.back() = 2;  // EOS
      ++result.truncated_sentences;
    }
  }

  bool use_dropout = params.config.dropout > 0.0;
  Rng dropout_rng(derive_seed(train_config.seed, "dropout"));

  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(train_config.seed, "epoch_" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);

    double lr = lr_schedule(epoch, train_config);
    double epoch_loss_sum = 0.0;
    long epoch_tokens = 0;

    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(train_config.batch_size)) {
      size_t end = std::min(order.size(),
                            start + static_cast<size_t>(train_config.batch_size));
      std::vector<Sample> batch;
      batch.reserve(end - start);
      long batch_tokens = 0;
      for (size_t i = start; i < end; ++i) {
        batch.push_back(data[order[i]]);
        batch_tokens += count_loss_tokens(batch.back().framed, 0);
      }
      double batch_loss = 0.0;
      GradMap grads;
      try {
        grads = backward_batch(params, batch, &batch_loss,
                               use_dropout ? &dropout_rng : nullptr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " +
                           std::to_string(epoch));
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      }
      if (train_config.grad_clip > 0.0) {
        double norm_sq = 0.0;
        for (const auto& [name, g] : grads) {
          for (double v : g) norm_sq += v * v;
        }
        double norm = std::sqrt(norm_sq);
        if (norm > train_config.grad_clip) {
          double scale = train_config.grad_clip / norm;
          for (auto& [name, g] : grads) {
            for (double& v : g) v *= scale;
          }
        }
      }
      adam_step(params, grads, state, lr);
      epoch_loss_sum += batch_loss * static_cast<double>(batch_tokens);
      epoch_tokens += batch_tokens;
    }

    double epoch_loss = epoch_tokens > 0
                            ? epoch_loss_sum / static_cast<double>(epoch_tokens)
                            : 0.0;
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
    }
    result.epoch_loss.push_back(epoch_loss);
  }

  result.params = std::move(params);
  result.state = std::move(state);
  return result;
}

TrainResult train(const std::vector<Sample>& samples,
                  const ModelConfig& model_config,
                  const TrainConfig& train_config) {
  ModelParams params = init_params(model_config);
  AdamState state = AdamState::init(params);
  return train_from(std::move(params), std::move(state), samples, train_config);
}

std::vector<TokenId> decode_greedy(const ModelParams& params,
                                   const std::vector<std::vector<double>>& regions,
                                   int max_len) {
  constexpr TokenId kBos = 1, kEos = 2;
  std::vector<TokenId> ids{kBos};
  std::vector<TokenId> generated;
  while (static_cast<int>(generated.size()) < max_len &&
         static_cast<int>(ids.size()) <= params.config.max_seq_len) {
    ForwardCache cache;
    MatrixD logits = forward_impl(params, regions, ids, cache, nullptr);
    const double* row =
        logits.data.data() + static_cast<size_t>(logits.rows - 1) * logits.cols;
    int best = 0;
    for (int j = 1; j < logits.cols; ++j) {
      if (row[j] > row[best]) best = j;  // ties keep the lowest id
    }
    generated.push_back(best);
    ids.push_back(best);
    if (best == kEos) break;
  }
  return generated;
}

namespace {

void write_raw(std::ofstream& out, const void* data, size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_scalar(std::ofstream& out, T value) {
  write_raw(out, &value, sizeof(T));
}

void write_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
  auto name_len = static_cast<uint16_t>(name.size());
  write_scalar(out, name_len);
  write_raw(out, name.data(), name.size());
  auto ndim = static_cast<uint8_t>(t.shape.size());
  write_scalar(out, ndim);
  for (int dim : t.shape) write_scalar(out, static_cast<uint32_t>(dim));
  write_raw(out, t.data.data(), t.data.size() * sizeof(float));
}

template <typename T>
T read_scalar(std::ifstream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ParseError(path + ": truncated checkpoint");
  return value;
}

std::pair<std::string, Tensor> read_tensor(std::ifstream& in,
                                           const std::string& path) {
  auto name_len = read_scalar<uint16_t>(in, path);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  if (!in) throw ParseError(path + ": truncated checkpoint");
  auto ndim = read_scalar<uint8_t>(in, path);
  if (ndim < 1 || ndim > 2) {
    throw ParseError(path + ": tensor '" + name + "' has unsupported rank " +
                     std::to_string(ndim));
  }
  Tensor t;
  size_t total = 1;
  for (int i = 0; i < ndim; ++i) {
    auto dim = read_scalar<uint32_t>(in, path);
    t.shape.push_back(static_cast<int>(dim));
    total *= dim;
  }
  t.data.resize(total);
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(total * sizeof(float)));
  if (!in) throw ParseError(path + ": truncated checkpoint");
  return {std::move(name), std::move(t)};
}

constexpr char kMagic[4] = {'C', 'A', 'P', 'M'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const ModelParams& params, const AdamState& state,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_raw(out, kMagic, 4);
  write_scalar(out, kVersion);
  auto count = static_cast<uint32_t>(params.tensors.size() + state.m.size() +
                                     state.v.size());
  write_scalar(out, count);
  for (const auto& [name, t] : params.tensors) write_tensor(out, name, t);
  for (const auto& [name, t] : state.m) write_tensor(out, "adam.m." + name, t);
  for (const auto& [name, t] : state.v) write_tensor(out, "adam.v." + name, t);
  write_scalar(out, static_cast<uint64_t>(state.step));
  if (!out) throw IoError("failed writing checkpoint to '" + path + "'");
}

std::pair<ModelParams, AdamState> load_checkpoint(const std::string& path,
                                                  const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError(path + ": bad magic");
  }
  auto version = read_scalar<uint32_t>(in, path);
  if (version != kVersion) {
    throw ParseError(path + ": unsupported checkpoint version " +
                     std::to_string(version));
  }

  ModelParams params = init_params(config);
  AdamState state = AdamState::init(params);
  std::map<std::string, bool> seen;
  for (const auto& [name, t] : params.tensors) seen["" + name] = false;
  for (const auto& [name, t] : state.m) seen["adam.m." + name] = false;
  for (const auto& [name, t] : state.v) seen["adam.v." + name] = false;

  auto count = read_scalar<uint32_t>(in, path);
  for (uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = read_tensor(in, path);
    Tensor* target = nullptr;
    if (name.rfind("adam.m.", 0) == 0) {
      auto it = state.m.find(name.substr(7));
      if (it != state.m.end()) target = &it->second;
    } else if (name.rfind("adam.v.", 0) == 0) {
      auto it = state.v.find(name.substr(7));
      if (it != state.v.end()) target = &it->second;
    } else {
      auto it = params.tensors.find(name);
      if (it != params.tensors.end()) target = &it->second;
    }
    if (!target) {
      throw ValidationError(path + ": unexpected tensor '" + name + "'");
    }
    if (target->shape != tensor.shape) {
      throw ValidationError(path + ": shape mismatch for tensor '" + name + "'");
    }
    *target = std::move(tensor);
    seen[name] = true;
  }
  for (const auto& [name, was_seen] : seen) {
    if (!was_seen) {
      throw ValidationError(path + ": missing tensor '" + name + "'");
    }
  }
  state.step = read_scalar<uint64_t>(in, path);
  return {std::move(params), std::move(state)};
}

}  // namespace capmine
