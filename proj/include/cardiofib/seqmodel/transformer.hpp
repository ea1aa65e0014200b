#ifndef CARDIOFIB_SEQMODEL_TRANSFORMER_HPP
#define CARDIOFIB_SEQMODEL_TRANSFORMER_HPP

// Transformer autoencoder over padded fiber batches.
//
//   x -> linear(5 -> d) + sinusoidal PE -> dropout
//     -> encoder blocks -> LN   (masked mean of these tokens is the embedding)
//     -> decoder blocks -> LN -> linear(d -> 5)
//
// Blocks are pre-norm: h += drop(MHA(LN(h))); h += drop(FF(LN(h))). The
// decoder runs on the encoded tokens without causal masking. Keys at padded
// positions are excluded from every softmax, and all other operations act
// per token, so padded inputs never reach a valid output.

#include "../binary_format.hpp"
#include "autodiff.hpp"
#include "batch.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace cardiofib::seq {

struct TaeConfig {
  int d_model = 32;
  int heads = 4;
  int ff = 64;
  int encoder_layers = 4;
  int decoder_layers = 4;
  double dropout = 0.1;
  int input = 5;
  int max_length = 591;
  double sentinel = -4.0;

  void validate() const {
    if (d_model < 1 || heads < 1 || ff < 1 || input < 1) throw ConfigError("tae: sizes must be positive");
    if (d_model % heads != 0) throw ConfigError("tae: d_model must be divisible by heads");
    if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("tae: need at least one layer each side");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("tae: dropout must be in [0, 1)");
    if (max_length < 1) throw ConfigError("tae: max_length must be >= 1");
    if (!(std::abs(sentinel) >= 3.0)) throw ConfigError("tae: sentinel must lie outside the standardized range");
  }

  static TaeConfig paper() {
    TaeConfig c;
    c.d_model = 128;
    c.heads = 8;
    c.ff = 512;
    return c;
  }

  io::Json to_json() const {
    return {{"d_model", d_model},   {"heads", heads},   {"ff", ff},
            {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
            {"dropout", dropout},   {"input", input},   {"max_length", max_length},
            {"sentinel", sentinel}};
  }
  static TaeConfig from_json(const io::Json& j) {
    TaeConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.ff = j.value("ff", c.ff);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.dropout = j.value("dropout", c.dropout);
    c.input = j.value("input", c.input);
    c.max_length = j.value("max_length", c.max_length);
    c.sentinel = j.value("sentinel", c.sentinel);
    c.validate();
    return c;
  }
};

/// steps x d table with pe(p, 2i) = sin(p / 10000^(2i/d)) and
/// pe(p, 2i+1) = cos(p / 10000^(2i/d)).
inline Matrix sinusoidal_encoding(int steps, int d) {
  Matrix pe(steps, d);
  for (int p = 0; p < steps; ++p)
    for (int c = 0; c < d; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / d);
      pe(p, c) = c % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
    }
  return pe;
}

struct AttentionWeights {
  ad::Var Wq, bq, Wk, bk, Wv, bv, Wo, bo;
};

/// Multi-head self-attention over a padded batch laid out as
/// (batch*steps) x d. If `probs` is given, every per-sequence, per-head
/// attention matrix is appended to it.
inline ad::Var multi_head_attention(ad::Tape& t, ad::Var x, const AttentionWeights& w, int heads,
                                    const PaddedBatch& layout, std::vector<ad::Var>* probs = nullptr) {
  const Eigen::Index d = t.value(w.Wq).cols();
  if (d % heads != 0) throw ConfigError("attention: width not divisible by heads");
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const ad::Var q = t.add_row(t.matmul(x, w.Wq), w.bq);
  const ad::Var k = t.add_row(t.matmul(x, w.Wk), w.bk);
  const ad::Var v = t.add_row(t.matmul(x, w.Wv), w.bv);
  const int T = layout.steps;
  std::vector<char> valid(T);
  std::vector<ad::Var> rows;
  rows.reserve(layout.batch);
  for (int b = 0; b < layout.batch; ++b) {
    for (int s = 0; s < T; ++s) valid[s] = layout.valid(b, s) ? 1 : 0;
    std::vector<ad::Var> per_head;
    per_head.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      const ad::Var qh = t.slice(q, layout.row(b, 0), T, h * dk, dk);
      const ad::Var kh = t.slice(k, layout.row(b, 0), T, h * dk, dk);
      const ad::Var vh = t.slice(v, layout.row(b, 0), T, h * dk, dk);
      const ad::Var p = t.masked_softmax_rows(t.scale(t.matmul(qh, t.transpose(kh)), scale), valid);
      if (probs) probs->push_back(p);
      per_head.push_back(t.matmul(p, vh));
    }
    rows.push_back(heads == 1 ? per_head[0] : t.concat_cols(per_head));
  }
  const ad::Var joined = layout.batch == 1 ? rows[0] : t.concat_rows(rows);
  return t.add_row(t.matmul(joined, w.Wo), w.bo);
}

enum class Pooling { kMean, kFirst, kMax };

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::kMean;
  if (s == "first") return Pooling::kFirst;
  if (s == "max") return Pooling::kMax;
  throw ConfigError("unknown pooling '" + s + "' (mean|first|max)");
}

struct TaeForward {
  ad::Var encoded;         // (batch*steps) x d after the encoder's final LN
  ad::Var reconstruction;  // (batch*steps) x input
  std::vector<ad::Var> attention;
};

class TaeModel {
 public:
  static constexpr const char* kKind = "tae";

  TaeConfig config;
  ad::ParameterSet params;

  static TaeModel create(const TaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TaeModel m;
    m.config = cfg;
    std::mt19937_64 rng(seed);
    const int d = cfg.d_model;
    auto linear = [&](const std::string& name, int in, int out) {
      m.params.add(name + ".W", uniform_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
      m.params.add(name + ".b", Matrix::Zero(1, out));
    };
    auto norm = [&](const std::string& name) {
      m.params.add(name + ".g", Matrix::Ones(1, d));
      m.params.add(name + ".b", Matrix::Zero(1, d));
    };
    linear("in", cfg.input, d);
    for (const char* side : {"enc", "dec"}) {
      const int depth = std::string(side) == "enc" ? cfg.encoder_layers : cfg.decoder_layers;
      for (int l = 0; l < depth; ++l) {
        const std::string p = side + std::to_string(l);
        norm(p + ".ln1");
        for (const char* proj : {".q", ".k", ".v", ".o"}) linear(p + proj, d, d);
        norm(p + ".ln2");
        linear(p + ".ff1", d, cfg.ff);
        linear(p + ".ff2", cfg.ff, d);
      }
      norm(std::string(side) + ".ln");
    }
    linear("out", d, cfg.input);
    return m;
  }

  static TaeModel from_params(const TaeConfig& cfg, ad::ParameterSet params) {
    TaeModel ref = create(cfg, 0);
    if (ref.params.size() != params.size()) throw DataError("tae: parameter count mismatch");
    for (const auto& p : ref.params.all()) {
      if (!params.contains(p.name)) throw DataError("tae: missing parameter " + p.name);
      const auto& q = params[p.name];
      if (q.value.rows() != p.value.rows() || q.value.cols() != p.value.cols())
        throw DataError("tae: shape mismatch for " + p.name);
    }
    ref.params = std::move(params);
    return ref;
  }

  int min_length() const { return 1; }

  PaddedBatch pad(const std::vector<const Matrix*>& seqs) const {
    for (const Matrix* s : seqs) {
      if (s->rows() == 0) throw DataError("tae: empty fiber");
      if (s->rows() > config.max_length)
        throw DataError("tae: fiber of " + std::to_string(s->rows()) + " points exceeds max_length " +
                        std::to_string(config.max_length));
    }
    return PaddedBatch::from(seqs, config.sentinel);
  }

  TaeForward forward(ad::Binder& bind, const PaddedBatch& batch, const Dropout& drop,
                     bool keep_attention = false) const {
    if (batch.features != config.input) throw DataError("tae: input width mismatch");
    if (batch.steps > config.max_length) throw DataError("tae: batch exceeds max_length");
    ad::Tape& t = bind.tape();
    TaeForward out;
    const Matrix pe_rows = [&] {
      const Matrix pe = sinusoidal_encoding(batch.steps, config.d_model);
      Matrix tiled(batch.data.rows(), config.d_model);
      for (int b = 0; b < batch.batch; ++b) tiled.middleRows(batch.row(b, 0), batch.steps) = pe;
      return tiled;
    }();
    ad::Var h = t.add_const(linear(bind, t.constant(batch.data), "in"), pe_rows);
    h = dropout(t, h, drop);
    for (int l = 0; l < config.encoder_layers; ++l)
      h = block(bind, h, "enc" + std::to_string(l), batch, drop, keep_attention ? &out.attention : nullptr);
    out.encoded = t.layer_norm(h, bind("enc.ln.g"), bind("enc.ln.b"));
    h = out.encoded;
    for (int l = 0; l < config.decoder_layers; ++l)
      h = block(bind, h, "dec" + std::to_string(l), batch, drop, keep_attention ? &out.attention : nullptr);
    h = t.layer_norm(h, bind("dec.ln.g"), bind("dec.ln.b"));
    out.reconstruction = linear(bind, h, "out");
    return out;
  }

  /// Reconstruction MSE over valid positions of standardized fibers.
  ad::Var loss(ad::Binder& bind, const std::vector<const Matrix*>& seqs, const Dropout& drop) const {
    const PaddedBatch batch = pad(seqs);
    const TaeForward f = forward(bind, batch, drop);
    return bind.tape().masked_mse(f.reconstruction, batch.data, batch.row_mask(config.input));
  }

  /// One d_model row per fiber pooled over its valid encoder tokens
  /// (masked mean by default).
  Matrix embed(const std::vector<const Matrix*>& seqs, Pooling pooling = Pooling::kMean) const {
    const PaddedBatch batch = pad(seqs);
    ad::Tape t;
    ad::Binder bind(t, params, nullptr);
    const Matrix& enc = t.value(forward(bind, batch, Dropout{}).encoded);
    Matrix out(batch.batch, config.d_model);
    for (int b = 0; b < batch.batch; ++b) {
      const auto tokens = enc.middleRows(batch.row(b, 0), batch.lengths[b]);
      switch (pooling) {
        case Pooling::kMean: out.row(b) = tokens.colwise().mean(); break;
        case Pooling::kFirst: out.row(b) = tokens.row(0); break;
        case Pooling::kMax: out.row(b) = tokens.colwise().maxCoeff(); break;
      }
    }
    return out;
  }

  /// Reconstructed m x input matrix for each fiber.
  std::vector<Matrix> reconstruct(const std::vector<const Matrix*>& seqs) const {
    const PaddedBatch batch = pad(seqs);
    ad::Tape t;
    ad::Binder bind(t, params, nullptr);
    const Matrix& rec = t.value(forward(bind, batch, Dropout{}).reconstruction);
    std::vector<Matrix> out;
    for (int b = 0; b < batch.batch; ++b) out.push_back(rec.middleRows(batch.row(b, 0), batch.lengths[b]));
    return out;
  }

 private:
  static ad::Var linear(ad::Binder& bind, ad::Var x, const std::string& name) {
    return bind.tape().add_row(bind.tape().matmul(x, bind(name + ".W")), bind(name + ".b"));
  }

  static ad::Var dropout(ad::Tape& t, ad::Var x, const Dropout& drop) {
    if (!drop.active()) return x;
    return t.mul_const(x, drop.mask(t.value(x).rows(), t.value(x).cols()));
  }

  ad::Var block(ad::Binder& bind, ad::Var h, const std::string& p, const PaddedBatch& batch, const Dropout& drop,
                std::vector<ad::Var>* probs) const {
    ad::Tape& t = bind.tape();
    const AttentionWeights w{bind(p + ".q.W"), bind(p + ".q.b"), bind(p + ".k.W"), bind(p + ".k.b"),
                             bind(p + ".v.W"), bind(p + ".v.b"), bind(p + ".o.W"), bind(p + ".o.b")};
    const ad::Var a = t.layer_norm(h, bind(p + ".ln1.g"), bind(p + ".ln1.b"));
    h = t.add(h, dropout(t, multi_head_attention(t, a, w, config.heads, batch, probs), drop));
    const ad::Var n = t.layer_norm(h, bind(p + ".ln2.g"), bind(p + ".ln2.b"));
    const ad::Var f = linear(bind, t.relu(linear(bind, n, p + ".ff1")), p + ".ff2");
    return t.add(h, dropout(t, f, drop));
  }
};

}  // namespace cardiofib::seq

#endif  // CARDIOFIB_SEQMODEL_TRANSFORMER_HPP
