#pragma once

// Miniature post-LN transformer encoder with an untied MLM head, written out
// with explicit forward caches and analytic backward passes.
//
// Layout per layer: Q/K/V projections (keys carry no bias: a per-row constant
// shift of attention scores is invisible to softmax) -> masked multi-head attention -> output
// projection -> residual + LayerNorm -> GELU FFN -> residual + LayerNorm.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/rng.hpp"

namespace romlab {

enum class Precision { fast32, check64 };

inline const char* precision_name(Precision p) noexcept { return p == Precision::check64 ? "check64" : "fast32"; }
inline Precision parse_precision(const std::string& s) {
  if (s == "fast32") return Precision::fast32;
  if (s == "check64") return Precision::check64;
  throw InvalidConfig("unknown precision '" + s + "'");
}

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int hidden = 32;
  int ffn = 64;
  int vocab_size = 0;
  int max_seq_len = 64;
  double dropout = 0.0;
  Precision precision = Precision::fast32;
  double init_std = 0.02;

  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers < 1) throw InvalidConfig("model.layers must be >= 1");
    if (heads < 1 || hidden < 1 || hidden % heads != 0) throw InvalidConfig("model.hidden must be a multiple of model.heads");
    if (ffn < 1) throw InvalidConfig("model.ffn must be >= 1");
    if (vocab_size < kNumSpecial + 1) throw InvalidConfig("model vocab_size must be >= 6");
    if (max_seq_len < 3) throw InvalidConfig("model.max_seq_len must be >= 3");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidConfig("model.dropout must be in [0, 1)");
    if (!(init_std > 0.0)) throw InvalidConfig("model.init_std must be > 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class LayerParam : std::size_t {
  wq, bq, wk, wv, bv, wo, bo,
  ln1_gain, ln1_bias,
  w1, b1, w2, b2,
  ln2_gain, ln2_bias,
  count
};

struct ParamLayout {
  static constexpr std::size_t token_embedding = 0;
  static constexpr std::size_t position_embedding = 1;
  static constexpr std::size_t embedding_ln_gain = 2;
  static constexpr std::size_t embedding_ln_bias = 3;
  static constexpr std::size_t per_layer = static_cast<std::size_t>(LayerParam::count);

  static constexpr std::size_t layer(int l, LayerParam p) {
    return 4 + static_cast<std::size_t>(l) * per_layer + static_cast<std::size_t>(p);
  }
  static constexpr std::size_t head_weight(int layers) { return 4 + static_cast<std::size_t>(layers) * per_layer; }
  static constexpr std::size_t head_bias(int layers) { return head_weight(layers) + 1; }
  static constexpr std::size_t count(int layers) { return head_weight(layers) + 2; }
};

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

inline std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
  static constexpr const char* layer_names[] = {
      "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
      "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias"};
  const Eigen::Index d = c.hidden, f = c.ffn, v = c.vocab_size;
  std::vector<TensorSpec> specs = {
      {"embeddings.token", v, d},
      {"embeddings.position", c.max_seq_len, d},
      {"embeddings.ln.gain", 1, d},
      {"embeddings.ln.bias", 1, d},
  };
  for (int l = 0; l < c.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const Eigen::Index shapes[][2] = {{d, d}, {1, d}, {d, d}, {d, d}, {1, d}, {d, d}, {1, d},
                                      {1, d}, {1, d}, {d, f}, {1, f}, {f, d}, {1, d}, {1, d}, {1, d}};
    for (std::size_t p = 0; p < ParamLayout::per_layer; ++p)
      specs.push_back({prefix + layer_names[p], shapes[p][0], shapes[p][1]});
  }
  specs.push_back({"mlm.weight", d, v});
  specs.push_back({"mlm.bias", 1, v});
  return specs;
}

// Name with any "layerN." prefix removed; gradient checks group tensors by class.
inline std::string tensor_class(const std::string& name) {
  if (name.rfind("layer", 0) == 0) {
    const auto dot = name.find('.');
    if (dot != std::string::npos) return name.substr(dot + 1);
  }
  return name;
}

template <class T>
struct Parameters {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Matrix<T>> tensors;

  Matrix<T>& operator[](std::size_t i) { return tensors[i]; }
  const Matrix<T>& operator[](std::size_t i) const { return tensors[i]; }
  std::size_t size() const noexcept { return tensors.size(); }

  Matrix<T>& layer(int l, LayerParam p) { return tensors[ParamLayout::layer(l, p)]; }
  const Matrix<T>& layer(int l, LayerParam p) const { return tensors[ParamLayout::layer(l, p)]; }
  Matrix<T>& head_weight() { return tensors[ParamLayout::head_weight(config.layers)]; }
  const Matrix<T>& head_weight() const { return tensors[ParamLayout::head_weight(config.layers)]; }
  Matrix<T>& head_bias() { return tensors[ParamLayout::head_bias(config.layers)]; }
  const Matrix<T>& head_bias() const { return tensors[ParamLayout::head_bias(config.layers)]; }

  static Parameters zeros(const ModelConfig& config) {
    config.validate();
    Parameters p;
    p.config = config;
    for (const auto& s : tensor_specs(config)) {
      p.names.push_back(s.name);
      p.tensors.push_back(Matrix<T>::Zero(s.rows, s.cols));
    }
    return p;
  }

  // Weights and embeddings draw from normal(0, init_std). Biases start at zero and LN gains at one.
  static Parameters initialize(const ModelConfig& config, std::uint64_t seed) {
    Parameters p = zeros(config);
    for (std::size_t t = 0; t < p.size(); ++t) {
      const auto& name = p.names[t];
      const auto cls = tensor_class(name);
      if (cls.ends_with(".gain")) {
        p.tensors[t].setOnes();
      } else if (cls.ends_with(".bias") || cls == "attn.bq" || cls == "attn.bv" ||
                 cls == "attn.bo" || cls == "ffn.b1" || cls == "ffn.b2") {
        p.tensors[t].setZero();
      } else {
        RandomStream rs(seed, Purpose::init, {static_cast<std::uint64_t>(t)});
        for (Eigen::Index i = 0; i < p.tensors[t].size(); ++i)
          p.tensors[t].data()[i] = static_cast<T>(rs.normal(0.0, config.init_std));
      }
    }
    return p;
  }

  void set_zero() {
    for (auto& t : tensors) t.setZero();
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.config.precision = std::is_same_v<U, double> ? Precision::check64 : Precision::fast32;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  Parameters& operator+=(const Parameters& other) {
    for (std::size_t t = 0; t < tensors.size(); ++t) tensors[t] += other.tensors[t];
    return *this;
  }
};

template <class T>
struct LayerNormCache {
  Matrix<T> xhat;
  ColVector<T> inv_std;
};

template <class T>
struct LayerTrace {
  Matrix<T> input;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> attention;  // per head, (n, n)
  Matrix<T> context;
  Matrix<T> attn_dropout;  // empty when dropout is off
  LayerNormCache<T> ln1;
  Matrix<T> h1;
  Matrix<T> ffn_pre;  // z = h1 W1 + b1
  Matrix<T> ffn_act;  // gelu(z)
  Matrix<T> ffn_dropout;
  LayerNormCache<T> ln2;
};

template <class T>
struct ForwardTrace {
  std::vector<TokenId> ids;
  std::vector<bool> key_valid;
  LayerNormCache<T> embedding_ln;
  Matrix<T> embedding_dropout;
  std::vector<LayerTrace<T>> layers;
  Matrix<T> hidden;  // final-layer states h^L, (n, d)

  RowVector<T> pooled() const { return hidden.row(0); }
  std::size_t length() const noexcept { return ids.size(); }
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Matrix<T> layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                             LayerNormCache<T>& cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  Matrix<T> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    cache.inv_std(i) = inv;
    cache.xhat.row(i) = (x.row(i).array() - mean) * inv;
    y.row(i) = cache.xhat.row(i).array() * gain.row(0).array() + bias.row(0).array();
  }
  return y;
}

template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache, const Matrix<T>& gain,
                              Matrix<T>& dgain, Matrix<T>& dbias) {
  const Eigen::Index n = dy.rows();
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Matrix<T> dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVector<T> dxhat = (dy.row(i).array() * gain.row(0).array()).matrix();
    const T mean_dxhat = dxhat.mean();
    const T mean_dxhat_xhat = (dxhat.array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = cache.inv_std(i) *
                (dxhat.array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

template <class T>
T gelu(T z) {
  return T(0.5) * z * (T(1) + std::erf(z * T(0.70710678118654752440)));
}

template <class T>
T gelu_grad(T z) {
  const T cdf = T(0.5) * (T(1) + std::erf(z * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * z * z) * T(0.39894228040143267794);
  return cdf + z * pdf;
}

template <class T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, RandomStream& rs) {
  Matrix<T> mask(rows, cols);
  const T keep_scale = T(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rs.uniform() < rate ? T(0) : keep_scale;
  return mask;
}

template <class T>
void add_row_bias(Matrix<T>& m, const Matrix<T>& bias) {
  m.rowwise() += bias.row(0);
}

}  // namespace detail

// Forward pass over one (possibly [PAD]-padded) sequence. [PAD] keys are
// excluded from every attention row.
template <class T>
ForwardTrace<T> forward(const Parameters<T>& params, std::span<const TokenId> ids, const ForwardOptions& opts = {}) {
  const ModelConfig& c = params.config;
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (n == 0) throw EmptyInput("cannot run the encoder on an empty sequence");
  if (n > c.max_seq_len)
    throw InvalidInput("sequence length " + std::to_string(n) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  for (TokenId id : ids)
    if (id < 0 || id >= c.vocab_size) throw InvalidInput("token id " + std::to_string(id) + " out of range");

  const bool use_dropout = opts.training && c.dropout > 0.0;
  RandomStream drop_rng(opts.dropout_seed, Purpose::dropout);
  const int d = c.hidden, dh = c.head_dim();
  const T scale = T(1) / std::sqrt(T(dh));

  ForwardTrace<T> tr;
  tr.ids.assign(ids.begin(), ids.end());
  tr.key_valid.resize(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) tr.key_valid[j] = ids[j] != kPadId;

  Matrix<T> x(n, d);
  const auto& tok = params[ParamLayout::token_embedding];
  const auto& pos = params[ParamLayout::position_embedding];
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = tok.row(ids[static_cast<std::size_t>(i)]) + pos.row(i);
  Matrix<T> h = detail::layer_norm_forward(x, params[ParamLayout::embedding_ln_gain],
                                           params[ParamLayout::embedding_ln_bias], tr.embedding_ln);
  if (use_dropout) {
    tr.embedding_dropout = detail::dropout_mask<T>(n, d, c.dropout, drop_rng);
    h.array() *= tr.embedding_dropout.array();
  }

  tr.layers.resize(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    auto& lt = tr.layers[static_cast<std::size_t>(l)];
    lt.input = h;
    lt.q = h * params.layer(l, LayerParam::wq);
    detail::add_row_bias(lt.q, params.layer(l, LayerParam::bq));
    lt.k = h * params.layer(l, LayerParam::wk);
    lt.v = h * params.layer(l, LayerParam::wv);
    detail::add_row_bias(lt.v, params.layer(l, LayerParam::bv));

    lt.context.resize(n, d);
    lt.attention.resize(static_cast<std::size_t>(c.heads));
    for (int hd = 0; hd < c.heads; ++hd) {
      Matrix<T> s = lt.q.middleCols(hd * dh, dh) * lt.k.middleCols(hd * dh, dh).transpose();
      s *= scale;
      Matrix<T>& a = lt.attention[static_cast<std::size_t>(hd)];
      a.resize(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        T top = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < n; ++j)
          if (tr.key_valid[static_cast<std::size_t>(j)]) top = std::max(top, s(i, j));
        T total = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const T e = tr.key_valid[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - top) : T(0);
          a(i, j) = e;
          total += e;
        }
        a.row(i) /= total;
      }
      lt.context.middleCols(hd * dh, dh) = a * lt.v.middleCols(hd * dh, dh);
    }

    Matrix<T> o = lt.context * params.layer(l, LayerParam::wo);
    detail::add_row_bias(o, params.layer(l, LayerParam::bo));
    if (use_dropout) {
      lt.attn_dropout = detail::dropout_mask<T>(n, d, c.dropout, drop_rng);
      o.array() *= lt.attn_dropout.array();
    }
    Matrix<T> r1 = h + o;
    lt.h1 = detail::layer_norm_forward(r1, params.layer(l, LayerParam::ln1_gain),
                                       params.layer(l, LayerParam::ln1_bias), lt.ln1);

    lt.ffn_pre = lt.h1 * params.layer(l, LayerParam::w1);
    detail::add_row_bias(lt.ffn_pre, params.layer(l, LayerParam::b1));
    lt.ffn_act = lt.ffn_pre.unaryExpr([](T z) { return detail::gelu(z); });
    Matrix<T> f = lt.ffn_act * params.layer(l, LayerParam::w2);
    detail::add_row_bias(f, params.layer(l, LayerParam::b2));
    if (use_dropout) {
      lt.ffn_dropout = detail::dropout_mask<T>(n, d, c.dropout, drop_rng);
      f.array() *= lt.ffn_dropout.array();
    }
    Matrix<T> r2 = lt.h1 + f;
    h = detail::layer_norm_forward(r2, params.layer(l, LayerParam::ln2_gain), params.layer(l, LayerParam::ln2_bias),
                                   lt.ln2);
  }
  tr.hidden = std::move(h);
  return tr;
}

// Accumulates d(loss)/d(params) given d(loss)/d(final hidden states).
template <class T>
void backward(const Parameters<T>& params, const ForwardTrace<T>& tr, const Matrix<T>& d_hidden, Parameters<T>& grads) {
  const ModelConfig& c = params.config;
  const int dh = c.head_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  const Eigen::Index n = tr.hidden.rows();

  Matrix<T> dh_out = d_hidden;
  for (int l = c.layers - 1; l >= 0; --l) {
    const auto& lt = tr.layers[static_cast<std::size_t>(l)];

    Matrix<T> dr2 = detail::layer_norm_backward(dh_out, lt.ln2, params.layer(l, LayerParam::ln2_gain),
                                                grads.layer(l, LayerParam::ln2_gain),
                                                grads.layer(l, LayerParam::ln2_bias));
    Matrix<T> df = dr2;
    if (lt.ffn_dropout.size() > 0) df.array() *= lt.ffn_dropout.array();
    grads.layer(l, LayerParam::w2).noalias() += lt.ffn_act.transpose() * df;
    grads.layer(l, LayerParam::b2).row(0) += df.colwise().sum();
    Matrix<T> dz = df * params.layer(l, LayerParam::w2).transpose();
    dz.array() *= lt.ffn_pre.unaryExpr([](T z) { return detail::gelu_grad(z); }).array();
    grads.layer(l, LayerParam::w1).noalias() += lt.h1.transpose() * dz;
    grads.layer(l, LayerParam::b1).row(0) += dz.colwise().sum();
    Matrix<T> dh1 = dr2;
    dh1.noalias() += dz * params.layer(l, LayerParam::w1).transpose();

    Matrix<T> dr1 = detail::layer_norm_backward(dh1, lt.ln1, params.layer(l, LayerParam::ln1_gain),
                                                grads.layer(l, LayerParam::ln1_gain),
                                                grads.layer(l, LayerParam::ln1_bias));
    Matrix<T> d_o = dr1;
    if (lt.attn_dropout.size() > 0) d_o.array() *= lt.attn_dropout.array();
    grads.layer(l, LayerParam::wo).noalias() += lt.context.transpose() * d_o;
    grads.layer(l, LayerParam::bo).row(0) += d_o.colwise().sum();
    Matrix<T> dctx = d_o * params.layer(l, LayerParam::wo).transpose();

    Matrix<T> dq(n, c.hidden), dk(n, c.hidden), dv(n, c.hidden);
    for (int hd = 0; hd < c.heads; ++hd) {
      const Matrix<T>& a = lt.attention[static_cast<std::size_t>(hd)];
      const Matrix<T> dctx_h = dctx.middleCols(hd * dh, dh);
      Matrix<T> da = dctx_h * lt.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh) = a.transpose() * dctx_h;
      Matrix<T> ds(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const T dot = (da.row(i).array() * a.row(i).array()).sum();
        ds.row(i) = (a.row(i).array() * (da.row(i).array() - dot)).matrix();
      }
      ds *= scale;
      dq.middleCols(hd * dh, dh) = ds * lt.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh) = ds.transpose() * lt.q.middleCols(hd * dh, dh);
    }

    grads.layer(l, LayerParam::wq).noalias() += lt.input.transpose() * dq;
    grads.layer(l, LayerParam::bq).row(0) += dq.colwise().sum();
    grads.layer(l, LayerParam::wk).noalias() += lt.input.transpose() * dk;
    grads.layer(l, LayerParam::wv).noalias() += lt.input.transpose() * dv;
    grads.layer(l, LayerParam::bv).row(0) += dv.colwise().sum();

    dh_out = dr1;
    dh_out.noalias() += dq * params.layer(l, LayerParam::wq).transpose();
    dh_out.noalias() += dk * params.layer(l, LayerParam::wk).transpose();
    dh_out.noalias() += dv * params.layer(l, LayerParam::wv).transpose();
  }

  if (tr.embedding_dropout.size() > 0) dh_out.array() *= tr.embedding_dropout.array();
  Matrix<T> dx = detail::layer_norm_backward(dh_out, tr.embedding_ln, params[ParamLayout::embedding_ln_gain],
                                             grads[ParamLayout::embedding_ln_gain],
                                             grads[ParamLayout::embedding_ln_bias]);
  auto& dtok = grads[ParamLayout::token_embedding];
  auto& dpos = grads[ParamLayout::position_embedding];
  for (Eigen::Index i = 0; i < n; ++i) {
    dtok.row(tr.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(i) += dx.row(i);
  }
}

// MLM head logits W h + b for every position, shape (n, vocab).
template <class T>
Matrix<T> mlm_logits(const Parameters<T>& params, const ForwardTrace<T>& tr) {
  Matrix<T> logits = tr.hidden * params.head_weight();
  detail::add_row_bias(logits, params.head_bias());
  return logits;
}

template <class T>
struct MlmForwardResult {
  std::vector<Matrix<T>> logits;  // per sequence, (n_b, vocab)
  std::vector<ForwardTrace<T>> traces;
};

namespace detail {
template <class T>
void require_finite(const Parameters<T>& params) {
  for (std::size_t t = 0; t < params.size(); ++t)
    if (!params.tensors[t].allFinite()) throw NumericError("parameter tensor " + params.names[t] + " is not finite");
}
}  // namespace detail

// Batched MLM forward. Sequences are right-padded with [PAD] to the batch
// maximum; padded keys are masked, so real positions do not see padding.
template <class T>
MlmForwardResult<T> forward_mlm(const Parameters<T>& params, const std::vector<std::vector<TokenId>>& batch,
                                bool pad_to_longest = true) {
  detail::require_finite(params);
  std::size_t longest = 0;
  for (const auto& s : batch) longest = std::max(longest, s.size());
  MlmForwardResult<T> out;
  for (const auto& s : batch) {
    std::vector<TokenId> ids = s;
    if (pad_to_longest) ids.resize(longest, kPadId);
    out.traces.push_back(forward(params, ids));
    out.logits.push_back(mlm_logits(params, out.traces.back()));
  }
  return out;
}

// Mean cross-entropy over positions whose label is not `ignore`.
template <class T>
double mlm_loss(const std::vector<Matrix<T>>& logits, const std::vector<std::vector<TokenId>>& labels,
                TokenId ignore = kIgnoreLabel) {
  if (logits.size() != labels.size()) throw InvalidInput("logits and labels differ in batch size");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    for (std::size_t i = 0; i < labels[b].size(); ++i) {
      const TokenId y = labels[b][i];
      if (y == ignore) continue;
      const auto row = logits[b].row(static_cast<Eigen::Index>(i)).template cast<double>();
      const double top = row.maxCoeff();
      const double lse = top + std::log((row.array() - top).exp().sum());
      total += lse - row(y);
      ++count;
    }
  }
  if (count == 0) throw EmptyInput("no masked positions in batch");
  return total / static_cast<double>(count);
}

// Cross-entropy summed over masked rows; scales d(logits) by `grad_scale` and
// backpropagates through the head and encoder. Returns the unscaled sum.
template <class T>
double mlm_loss_backward(const Parameters<T>& params, const ForwardTrace<T>& tr, std::span<const TokenId> labels,
                         T grad_scale, Parameters<T>& grads, Matrix<T>* d_hidden_extra = nullptr) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kIgnoreLabel) rows.push_back(static_cast<Eigen::Index>(i));
  const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index d = params.config.hidden;

  Matrix<T> h(m, d);
  for (Eigen::Index r = 0; r < m; ++r) h.row(r) = tr.hidden.row(rows[static_cast<std::size_t>(r)]);
  Matrix<T> logits = h * params.head_weight();
  detail::add_row_bias(logits, params.head_bias());

  double loss = 0.0;
  Matrix<T> dlogits(m, logits.cols());
  for (Eigen::Index r = 0; r < m; ++r) {
    const TokenId y = labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
    const T top = logits.row(r).maxCoeff();
    RowVector<T> e = (logits.row(r).array() - top).exp().matrix();
    const T total = e.sum();
    loss += static_cast<double>(std::log(total) + top - logits(r, y));
    dlogits.row(r) = e / total;
    dlogits(r, y) -= T(1);
  }
  dlogits *= grad_scale;

  grads.head_weight().noalias() += h.transpose() * dlogits;
  grads.head_bias().row(0) += dlogits.colwise().sum();
  Matrix<T> dh_rows = dlogits * params.head_weight().transpose();

  Matrix<T> d_hidden = Matrix<T>::Zero(tr.hidden.rows(), d);
  for (Eigen::Index r = 0; r < m; ++r) d_hidden.row(rows[static_cast<std::size_t>(r)]) += dh_rows.row(r);
  if (d_hidden_extra) d_hidden += *d_hidden_extra;
  backward(params, tr, d_hidden, grads);
  return loss;
}

// Last-layer [CLS]-row attention averaged over heads, restricted to non-special
// positions and renormalized.
template <class T>
std::vector<double> cls_attention_distribution(const ForwardTrace<T>& tr) {
  if (tr.layers.empty()) throw InvalidInput("trace has no layers");
  const auto& last = tr.layers.back();
  std::vector<double> out;
  for (std::size_t j = 0; j < tr.ids.size(); ++j) {
    if (is_special_id(tr.ids[j])) continue;
    double mean = 0.0;
    for (const auto& a : last.attention) mean += static_cast<double>(a(0, static_cast<Eigen::Index>(j)));
    out.push_back(mean / static_cast<double>(last.attention.size()));
  }
  if (out.empty()) throw EmptyInput("sequence has no non-special tokens");
  double total = 0.0;
  for (double v : out) total += v;
  if (total > 0.0) {
    for (double& v : out) v /= total;
  } else {
    for (double& v : out) v = 1.0 / static_cast<double>(out.size());
  }
  return out;
}

// Final-layer [CLS] state as the text vector.
template <class T>
RowVector<T> encode_text(const Parameters<T>& params, const TokenSequence& seq) {
  return forward(params, seq.ids).pooled();
}

}  // namespace romlab
