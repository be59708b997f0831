#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "safemerge/rng.hpp"
#include "safemerge/tensor.hpp"

namespace safemerge {

// Pre-norm causal transformer, small enough to train on a laptop. All math
// runs in double internally; checkpoints store F32.
struct ToyLMConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int max_seq = 32;

  void validate() const {
    if (vocab_size < tokens::kReserved) {
      throw ValidationError("vocab_size must be at least " + std::to_string(tokens::kReserved));
    }
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq <= 0) {
      throw ValidationError("ToyLMConfig fields must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ValidationError("d_model must be divisible by n_heads");
    }
  }

  std::map<std::string, std::string> to_metadata() const {
    return {{"vocab_size", std::to_string(vocab_size)},
            {"d_model", std::to_string(d_model)},
            {"n_layers", std::to_string(n_layers)},
            {"n_heads", std::to_string(n_heads)},
            {"max_seq", std::to_string(max_seq)}};
  }

  static ToyLMConfig from_metadata(const std::map<std::string, std::string>& meta) {
    ToyLMConfig cfg;
    auto get = [&](const char* key, int& out) {
      auto it = meta.find(key);
      if (it == meta.end()) throw ValidationError(std::string("metadata missing '") + key + "'");
      out = std::stoi(it->second);
    };
    get("vocab_size", cfg.vocab_size);
    get("d_model", cfg.d_model);
    get("n_layers", cfg.n_layers);
    get("n_heads", cfg.n_heads);
    get("max_seq", cfg.max_seq);
    cfg.validate();
    return cfg;
  }
};

using Logits = std::vector<std::vector<double>>;  // seq x vocab

namespace lm_detail {

inline constexpr double kLnEps = 1e-5;

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  double u = c * (x + a * x * x * x);
  double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * a * x * x);
}

// Parameter container in double precision, mirroring the checkpoint schema.
struct Params {
  struct Layer {
    std::vector<double> ln1_g, ln1_b, wq, wk, wv, wo;
    std::vector<double> ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<double> tok_emb, pos_emb;
  std::vector<Layer> layers;
  std::vector<double> lnf_g, lnf_b, head;

  static Params zeros_like(const ToyLMConfig& cfg) {
    std::size_t d = cfg.d_model, v = cfg.vocab_size, s = cfg.max_seq, h = 4 * d;
    Params p;
    p.tok_emb.assign(v * d, 0.0);
    p.pos_emb.assign(s * d, 0.0);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.ln1_g.assign(d, 0.0);
      l.ln1_b.assign(d, 0.0);
      l.wq.assign(d * d, 0.0);
      l.wk.assign(d * d, 0.0);
      l.wv.assign(d * d, 0.0);
      l.wo.assign(d * d, 0.0);
      l.ln2_g.assign(d, 0.0);
      l.ln2_b.assign(d, 0.0);
      l.w1.assign(d * h, 0.0);
      l.b1.assign(h, 0.0);
      l.w2.assign(h * d, 0.0);
      l.b2.assign(d, 0.0);
    }
    p.lnf_g.assign(d, 0.0);
    p.lnf_b.assign(d, 0.0);
    p.head.assign(d * v, 0.0);
    return p;
  }

  // Named views in the checkpoint schema's lexicographic order-independent
  // form; used for conversion and optimizer loops.
  std::vector<std::pair<std::string, std::vector<double>*>> named() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      out.emplace_back(p + "ln1.g", &l.ln1_g);
      out.emplace_back(p + "ln1.b", &l.ln1_b);
      out.emplace_back(p + "attn.wq", &l.wq);
      out.emplace_back(p + "attn.wk", &l.wk);
      out.emplace_back(p + "attn.wv", &l.wv);
      out.emplace_back(p + "attn.wo", &l.wo);
      out.emplace_back(p + "ln2.g", &l.ln2_g);
      out.emplace_back(p + "ln2.b", &l.ln2_b);
      out.emplace_back(p + "mlp.w1", &l.w1);
      out.emplace_back(p + "mlp.b1", &l.b1);
      out.emplace_back(p + "mlp.w2", &l.w2);
      out.emplace_back(p + "mlp.b2", &l.b2);
    }
    out.emplace_back("ln_f.g", &lnf_g);
    out.emplace_back("ln_f.b", &lnf_b);
    out.emplace_back("head", &head);
    return out;
  }
};

inline std::vector<std::size_t> tensor_shape(const ToyLMConfig& cfg, const std::string& name) {
  std::size_t d = cfg.d_model, v = cfg.vocab_size, s = cfg.max_seq, h = 4 * d;
  auto ends_with = [&](const char* suffix) {
    std::string suf(suffix);
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (name == "tok_emb") return {v, d};
  if (name == "pos_emb") return {s, d};
  if (name == "head") return {d, v};
  if (ends_with("ln1.g") || ends_with("ln1.b") || ends_with("ln2.g") || ends_with("ln2.b") ||
      name == "ln_f.g" || name == "ln_f.b" || ends_with("mlp.b2")) {
    return {d};
  }
  if (ends_with("attn.wq") || ends_with("attn.wk") || ends_with("attn.wv") || ends_with("attn.wo")) {
    return {d, d};
  }
  if (ends_with("mlp.w1")) return {d, h};
  if (ends_with("mlp.b1")) return {h};
  if (ends_with("mlp.w2")) return {h, d};
  throw ValidationError("unknown tensor name '" + name + "'");
}

inline Params params_from_checkpoint(const Checkpoint& ckpt, const ToyLMConfig& cfg) {
  cfg.validate();
  Params p = Params::zeros_like(cfg);
  for (auto& [name, vec] : p.named()) {
    const Tensor& t = ckpt.at(name);
    auto want = tensor_shape(cfg, name);
    if (t.shape != want) {
      throw ValidationError("tensor '" + name + "' has an unexpected shape for this config");
    }
    for (std::size_t i = 0; i < vec->size(); ++i) (*vec)[i] = t.data[i];
  }
  return p;
}

inline Checkpoint params_to_checkpoint(Params& p, const ToyLMConfig& cfg) {
  Checkpoint ckpt;
  ckpt.metadata = cfg.to_metadata();
  for (auto& [name, vec] : p.named()) {
    Tensor t;
    t.shape = tensor_shape(cfg, name);
    t.data.resize(vec->size());
    for (std::size_t i = 0; i < vec->size(); ++i) t.data[i] = static_cast<float>((*vec)[i]);
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

// y[t,j] = sum_i x[t,i] w[i,j]
inline void matmul(const std::vector<double>& x, const std::vector<double>& w,
                   std::vector<double>& y, std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t j = 0; j < out; ++j) y[t * out + j] = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      double xi = x[t * in + i];
      if (xi == 0.0) continue;
      const double* wrow = &w[i * out];
      double* yrow = &y[t * out];
      for (std::size_t j = 0; j < out; ++j) yrow[j] += xi * wrow[j];
    }
  }
}

// dX = dY W^T, dW += X^T dY
inline void matmul_backward(const std::vector<double>& x, const std::vector<double>& w,
                            const std::vector<double>& dy, std::vector<double>& dx,
                            std::vector<double>& dw, std::size_t rows, std::size_t in,
                            std::size_t out) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyrow = &dy[t * out];
    for (std::size_t i = 0; i < in; ++i) {
      const double* wrow = &w[i * out];
      double acc = 0.0;
      for (std::size_t j = 0; j < out; ++j) acc += dyrow[j] * wrow[j];
      dx[t * in + i] = acc;
      double xi = x[t * in + i];
      if (xi != 0.0) {
        double* dwrow = &dw[i * out];
        for (std::size_t j = 0; j < out; ++j) dwrow[j] += xi * dyrow[j];
      }
    }
  }
}

struct LayerCache {
  std::vector<double> x_in;             // T x d, residual stream entering the layer
  std::vector<double> xhat1, rstd1, a1; // layernorm 1
  std::vector<double> q, k, v;          // T x d
  std::vector<double> probs;            // H x T x T attention weights
  std::vector<double> att;              // T x d, concatenated head outputs
  std::vector<double> x_mid;            // after attention residual
  std::vector<double> xhat2, rstd2, a2; // layernorm 2
  std::vector<double> h_pre, h_act;     // T x 4d
};

struct ForwardCache {
  std::size_t T = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final;          // T x d before final layernorm
  std::vector<double> xhatf, rstdf, af; // final layernorm
  std::vector<double> logits;           // T x V
};

inline void layernorm_forward(const std::vector<double>& x, const std::vector<double>& g,
                              const std::vector<double>& b, std::size_t T, std::size_t d,
                              std::vector<double>& xhat, std::vector<double>& rstd,
                              std::vector<double>& y) {
  xhat.resize(T * d);
  rstd.resize(T);
  y.resize(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x[t * d + i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double c = x[t * d + i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[t] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      double xh = (x[t * d + i] - mean) * rs;
      xhat[t * d + i] = xh;
      y[t * d + i] = g[i] * xh + b[i];
    }
  }
}

inline void layernorm_backward(const std::vector<double>& xhat, const std::vector<double>& rstd,
                               const std::vector<double>& g, const std::vector<double>& dy,
                               std::size_t T, std::size_t d, std::vector<double>& dx,
                               std::vector<double>& dg, std::vector<double>& db) {
  dx.assign(T * d, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double dyi = dy[t * d + i];
      double xh = xhat[t * d + i];
      dg[i] += dyi * xh;
      db[i] += dyi;
      double dxh = dyi * g[i];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      double dxh = dy[t * d + i] * g[i];
      dx[t * d + i] = rstd[t] * (dxh - mean_dxhat - xhat[t * d + i] * mean_dxhat_xhat);
    }
  }
}

inline ForwardCache forward_cached(const Params& p, const ToyLMConfig& cfg,
                                   const TokenSeq& seq) {
  std::size_t T = seq.size();
  std::size_t d = cfg.d_model, V = cfg.vocab_size, H = cfg.n_heads, hd = d / H;
  std::size_t hidden = 4 * d;
  if (T == 0) throw ValidationError("forward: empty sequence");
  if (T > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValidationError("forward: sequence longer than max_seq");
  }
  for (int tok : seq) {
    if (tok < 0 || tok >= cfg.vocab_size) throw ValidationError("forward: token id out of range");
  }

  ForwardCache cache;
  cache.T = T;
  std::vector<double> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t * d + i] = p.tok_emb[static_cast<std::size_t>(seq[t]) * d + i] + p.pos_emb[t * d + i];
    }
  }

  double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  cache.layers.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& l = p.layers[li];
    LayerCache& c = cache.layers[li];
    c.x_in = x;
    layernorm_forward(x, l.ln1_g, l.ln1_b, T, d, c.xhat1, c.rstd1, c.a1);
    c.q.resize(T * d);
    c.k.resize(T * d);
    c.v.resize(T * d);
    matmul(c.a1, l.wq, c.q, T, d, d);
    matmul(c.a1, l.wk, c.k, T, d, d);
    matmul(c.a1, l.wv, c.v, T, d, d);
    c.probs.assign(H * T * T, 0.0);
    c.att.assign(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        double* prow = &c.probs[(h * T + t) * T];
        double maxs = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          double s = 0.0;
          for (std::size_t j = 0; j < hd; ++j) {
            s += c.q[t * d + h * hd + j] * c.k[u * d + h * hd + j];
          }
          s *= scale;
          prow[u] = s;
          maxs = std::max(maxs, s);
        }
        double denom = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          prow[u] = std::exp(prow[u] - maxs);
          denom += prow[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          prow[u] /= denom;
          for (std::size_t j = 0; j < hd; ++j) {
            c.att[t * d + h * hd + j] += prow[u] * c.v[u * d + h * hd + j];
          }
        }
      }
    }
    std::vector<double> att_proj(T * d);
    matmul(c.att, l.wo, att_proj, T, d, d);
    c.x_mid.resize(T * d);
    for (std::size_t i = 0; i < T * d; ++i) c.x_mid[i] = x[i] + att_proj[i];

    layernorm_forward(c.x_mid, l.ln2_g, l.ln2_b, T, d, c.xhat2, c.rstd2, c.a2);
    c.h_pre.resize(T * hidden);
    matmul(c.a2, l.w1, c.h_pre, T, d, hidden);
    c.h_act.resize(T * hidden);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < hidden; ++j) {
        c.h_pre[t * hidden + j] += l.b1[j];
        c.h_act[t * hidden + j] = gelu(c.h_pre[t * hidden + j]);
      }
    }
    std::vector<double> mlp_out(T * d);
    matmul(c.h_act, l.w2, mlp_out, T, hidden, d);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < d; ++i) {
        x[t * d + i] = c.x_mid[t * d + i] + mlp_out[t * d + i] + l.b2[i];
      }
    }
  }

  cache.x_final = x;
  layernorm_forward(x, p.lnf_g, p.lnf_b, T, d, cache.xhatf, cache.rstdf, cache.af);
  cache.logits.resize(T * V);
  matmul(cache.af, p.head, cache.logits, T, d, V);
  return cache;
}

// Backpropagates dlogits through the cached forward pass, accumulating into
// grads (which must be zero-initialized via Params::zeros_like).
inline void backward(const Params& p, const ToyLMConfig& cfg, const TokenSeq& seq,
                     const ForwardCache& cache, const std::vector<double>& dlogits,
                     Params& grads) {
  std::size_t T = cache.T;
  std::size_t d = cfg.d_model, V = cfg.vocab_size, H = cfg.n_heads, hd = d / H;
  std::size_t hidden = 4 * d;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> daf(T * d, 0.0);
  matmul_backward(cache.af, p.head, dlogits, daf, grads.head, T, d, V);
  std::vector<double> dx(T * d, 0.0);
  layernorm_backward(cache.xhatf, cache.rstdf, p.lnf_g, daf, T, d, dx, grads.lnf_g, grads.lnf_b);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& l = p.layers[li];
    const LayerCache& c = cache.layers[li];
    auto& gl = grads.layers[li];

    // MLP block: x_out = x_mid + gelu(a2 W1 + b1) W2 + b2
    std::vector<double> dh_act(T * hidden, 0.0);
    matmul_backward(c.h_act, l.w2, dx, dh_act, gl.w2, T, hidden, d);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < d; ++i) gl.b2[i] += dx[t * d + i];
    }
    std::vector<double> dh_pre(T * hidden);
    for (std::size_t i = 0; i < T * hidden; ++i) {
      dh_pre[i] = dh_act[i] * gelu_grad(c.h_pre[i]);
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < hidden; ++j) gl.b1[j] += dh_pre[t * hidden + j];
    }
    std::vector<double> da2(T * d, 0.0);
    matmul_backward(c.a2, l.w1, dh_pre, da2, gl.w1, T, d, hidden);
    std::vector<double> dx_mid_ln(T * d, 0.0);
    layernorm_backward(c.xhat2, c.rstd2, l.ln2_g, da2, T, d, dx_mid_ln, gl.ln2_g, gl.ln2_b);
    std::vector<double> dx_mid(T * d);
    for (std::size_t i = 0; i < T * d; ++i) dx_mid[i] = dx[i] + dx_mid_ln[i];

    // Attention block: x_mid = x_in + (heads(a1)) Wo
    std::vector<double> datt(T * d, 0.0);
    matmul_backward(c.att, l.wo, dx_mid, datt, gl.wo, T, d, d);
    std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* prow = &c.probs[(h * T + t) * T];
        // dP then softmax backward to scores
        std::vector<double> dp(t + 1, 0.0);
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hd; ++j) {
            acc += datt[t * d + h * hd + j] * c.v[u * d + h * hd + j];
          }
          dp[u] = acc;
          for (std::size_t j = 0; j < hd; ++j) {
            dv[u * d + h * hd + j] += prow[u] * datt[t * d + h * hd + j];
          }
        }
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) dot += prow[u] * dp[u];
        for (std::size_t u = 0; u <= t; ++u) {
          double ds = prow[u] * (dp[u] - dot) * scale;
          for (std::size_t j = 0; j < hd; ++j) {
            dq[t * d + h * hd + j] += ds * c.k[u * d + h * hd + j];
            dk[u * d + h * hd + j] += ds * c.q[t * d + h * hd + j];
          }
        }
      }
    }
    std::vector<double> da1(T * d, 0.0), tmp(T * d, 0.0);
    matmul_backward(c.a1, l.wq, dq, da1, gl.wq, T, d, d);
    matmul_backward(c.a1, l.wk, dk, tmp, gl.wk, T, d, d);
    for (std::size_t i = 0; i < T * d; ++i) da1[i] += tmp[i];
    matmul_backward(c.a1, l.wv, dv, tmp, gl.wv, T, d, d);
    for (std::size_t i = 0; i < T * d; ++i) da1[i] += tmp[i];
    std::vector<double> dx_in_ln(T * d, 0.0);
    layernorm_backward(c.xhat1, c.rstd1, l.ln1_g, da1, T, d, dx_in_ln, gl.ln1_g, gl.ln1_b);
    for (std::size_t i = 0; i < T * d; ++i) dx[i] = dx_mid[i] + dx_in_ln[i];
  }

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      grads.tok_emb[static_cast<std::size_t>(seq[t]) * d + i] += dx[t * d + i];
      grads.pos_emb[t * d + i] += dx[t * d + i];
    }
  }
}

// Mean answer-token cross-entropy under teacher forcing; optionally
// accumulates parameter gradients.
inline double ce_loss_params(const Params& p, const ToyLMConfig& cfg,
                             const TokenSeq& question, const TokenSeq& answer,
                             Params* grads) {
  if (answer.empty()) throw ValidationError("ce_loss: empty answer");
  if (question.empty()) throw ValidationError("ce_loss: empty question");
  std::size_t T = question.size() + answer.size();
  if (T > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValidationError("ce_loss: question + answer exceeds max_seq");
  }
  TokenSeq full = question;
  full.insert(full.end(), answer.begin(), answer.end());

  ForwardCache cache = forward_cached(p, cfg, full);
  std::size_t V = cfg.vocab_size;
  std::size_t first = question.size() - 1;  // first position predicting an answer token
  std::size_t count = answer.size();

  double loss = 0.0;
  std::vector<double> dlogits;
  if (grads) dlogits.assign(T * V, 0.0);
  for (std::size_t pos = first; pos < first + count; ++pos) {
    int target = full[pos + 1];
    const double* row = &cache.logits[pos * V];
    double maxv = row[0];
    for (std::size_t j = 1; j < V; ++j) maxv = std::max(maxv, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < V; ++j) denom += std::exp(row[j] - maxv);
    double logz = maxv + std::log(denom);
    loss += logz - row[target];
    if (grads) {
      double inv = 1.0 / static_cast<double>(count);
      for (std::size_t j = 0; j < V; ++j) {
        dlogits[pos * V + j] = std::exp(row[j] - logz) * inv;
      }
      dlogits[pos * V + target] -= inv;
    }
  }
  loss /= static_cast<double>(count);
  if (grads) backward(p, cfg, full, cache, dlogits, *grads);
  return loss;
}

}  // namespace lm_detail

// Deterministic seeded initialization. Layernorm gains start at one, biases at
// zero, matrices at scaled uniform noise keyed by (seed, tensor name, index).
inline Checkpoint init_model(const ToyLMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  lm_detail::Params p = lm_detail::Params::zeros_like(cfg);
  for (auto& [name, vec] : p.named()) {
    auto shape = lm_detail::tensor_shape(cfg, name);
    bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    bool is_bias = (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) ||
                   name.find("mlp.b") != std::string::npos;
    if (is_gain) {
      std::fill(vec->begin(), vec->end(), 1.0);
      continue;
    }
    if (is_bias) continue;  // zeros
    double s;
    if (name == "tok_emb" || name == "pos_emb") {
      s = 0.1;
    } else {
      s = 1.0 / std::sqrt(static_cast<double>(shape[0]));  // fan-in
    }
    for (std::size_t i = 0; i < vec->size(); ++i) {
      (*vec)[i] = s * (2.0 * counter_uniform(seed, name, i) - 1.0);
    }
  }
  return lm_detail::params_to_checkpoint(p, cfg);
}

inline Logits forward(const Checkpoint& ckpt, const ToyLMConfig& cfg, const TokenSeq& seq) {
  lm_detail::Params p = lm_detail::params_from_checkpoint(ckpt, cfg);
  lm_detail::ForwardCache cache = lm_detail::forward_cached(p, cfg, seq);
  Logits out(cache.T, std::vector<double>(cfg.vocab_size));
  for (std::size_t t = 0; t < cache.T; ++t) {
    for (int j = 0; j < cfg.vocab_size; ++j) out[t][j] = cache.logits[t * cfg.vocab_size + j];
  }
  return out;
}

inline double ce_loss(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                      const TokenSeq& question, const TokenSeq& answer) {
  lm_detail::Params p = lm_detail::params_from_checkpoint(ckpt, cfg);
  return lm_detail::ce_loss_params(p, cfg, question, answer, nullptr);
}

// Greedy (temperature-zero) decoding. Exact logit ties pick the lowest token
// id; generation stops at max_new tokens, the context limit, or after
// emitting the end-of-sequence token.
inline TokenSeq greedy_generate(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                                const TokenSeq& prompt, int max_new) {
  if (prompt.empty()) throw ValidationError("greedy_generate: empty prompt");
  if (prompt.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValidationError("greedy_generate: prompt longer than max_seq");
  }
  lm_detail::Params p = lm_detail::params_from_checkpoint(ckpt, cfg);
  TokenSeq seq = prompt;
  TokenSeq generated;
  int budget = std::min<int>(max_new, cfg.max_seq - static_cast<int>(prompt.size()));
  for (int step = 0; step < budget; ++step) {
    lm_detail::ForwardCache cache = lm_detail::forward_cached(p, cfg, seq);
    const double* row = &cache.logits[(cache.T - 1) * cfg.vocab_size];
    int best = 0;
    for (int j = 1; j < cfg.vocab_size; ++j) {
      if (row[j] > row[best]) best = j;
    }
    seq.push_back(best);
    generated.push_back(best);
    if (best == tokens::kEos) break;
  }
  return generated;
}

struct QAPair;      // data.hpp
struct QADataset;   // data.hpp

struct TrainParams {
  double lr = 3e-3;
  int steps = 1000;
  int batch = 32;
};

// Adam trainer over (question, answer) pairs; defined in data.hpp's presence
// via the template to avoid a circular include.
template <typename Dataset>
Checkpoint train(const Checkpoint& ckpt, const ToyLMConfig& cfg, const Dataset& dataset,
                 const TrainParams& hp, std::uint64_t seed) {
  if (dataset.pairs.empty()) throw ValidationError("train: empty dataset");
  if (hp.lr <= 0.0 || hp.batch <= 0 || hp.steps < 0) {
    throw ValidationError("train: hyperparameters must be positive");
  }
  if (hp.steps == 0) return ckpt;

  lm_detail::Params w = lm_detail::params_from_checkpoint(ckpt, cfg);
  lm_detail::Params m = lm_detail::Params::zeros_like(cfg);
  lm_detail::Params v = lm_detail::Params::zeros_like(cfg);
  auto wn = w.named();
  auto mn = m.named();
  auto vn = v.named();

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Rng rng = Rng(seed).substream("train-shuffle");
  std::vector<std::size_t> perm(dataset.pairs.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();  // forces an initial shuffle

  for (int step = 1; step <= hp.steps; ++step) {
    lm_detail::Params g = lm_detail::Params::zeros_like(cfg);
    for (int bi = 0; bi < hp.batch; ++bi) {
      if (cursor >= perm.size()) {
        for (std::size_t i = perm.size(); i > 1; --i) {
          std::size_t j = rng.below(i);
          std::swap(perm[i - 1], perm[j]);
        }
        cursor = 0;
      }
      const auto& pair = dataset.pairs[perm[cursor++]];
      lm_detail::ce_loss_params(w, cfg, pair.question, pair.answer, &g);
    }
    double inv_batch = 1.0 / static_cast<double>(hp.batch);
    auto gn = g.named();
    double bc1 = 1.0 - std::pow(beta1, step);
    double bc2 = 1.0 - std::pow(beta2, step);
    for (std::size_t ti = 0; ti < wn.size(); ++ti) {
      auto& wv = *wn[ti].second;
      auto& gv = *gn[ti].second;
      auto& mv = *mn[ti].second;
      auto& vv = *vn[ti].second;
      for (std::size_t i = 0; i < wv.size(); ++i) {
        double grad = gv[i] * inv_batch;
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * grad;
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * grad * grad;
        double mhat = mv[i] / bc1;
        double vhat = vv[i] / bc2;
        wv[i] -= hp.lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
  return lm_detail::params_to_checkpoint(w, cfg);
}

}  // namespace safemerge
