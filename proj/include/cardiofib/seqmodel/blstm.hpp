#ifndef CARDIOFIB_SEQMODEL_BLSTM_HPP
#define CARDIOFIB_SEQMODEL_BLSTM_HPP

// Stacked bidirectional LSTM with a linear head that predicts the final
// `horizon` points of a fiber from the points before them.
//
// Gate weights are fused per layer and direction: W is in x 4H, U is H x 4H,
// b is 1 x 4H, with gate blocks ordered (i, f, g, o).

#include "../binary_format.hpp"
#include "autodiff.hpp"
#include "batch.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cardiofib::seq {

struct BlstmConfig {
  int layers = 2;
  int hidden = 32;
  int input = 5;
  int horizon = 25;

  void validate() const {
    if (layers < 1) throw ConfigError("blstm: layers must be >= 1");
    if (hidden < 1) throw ConfigError("blstm: hidden must be >= 1");
    if (input < 1) throw ConfigError("blstm: input must be >= 1");
    if (horizon < 1) throw ConfigError("blstm: horizon must be >= 1");
  }

  static BlstmConfig paper() { return BlstmConfig{4, 256, 5, 25}; }

  io::Json to_json() const {
    return {{"layers", layers}, {"hidden", hidden}, {"input", input}, {"horizon", horizon}};
  }
  static BlstmConfig from_json(const io::Json& j) {
    BlstmConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.input = j.value("input", c.input);
    c.horizon = j.value("horizon", c.horizon);
    c.validate();
    return c;
  }
};

inline std::string lstm_name(int layer, bool backward, const char* what) {
  return "l" + std::to_string(layer) + (backward ? ".bwd." : ".fwd.") + what;
}

/// One LSTM step for a batch: x is B x in, h and c are B x H.
inline std::pair<ad::Var, ad::Var> lstm_cell(ad::Tape& t, ad::Var x, ad::Var h, ad::Var c, ad::Var W, ad::Var U,
                                             ad::Var b) {
  const Eigen::Index H = t.value(h).cols();
  if (t.value(W).cols() != 4 * H || t.value(U).rows() != H || t.value(U).cols() != 4 * H ||
      t.value(b).cols() != 4 * H || t.value(c).cols() != H || t.value(x).cols() != t.value(W).rows() ||
      t.value(x).rows() != t.value(h).rows() || t.value(c).rows() != t.value(h).rows())
    throw DataError("lstm_cell: dimension mismatch");
  const ad::Var z = t.add_row(t.add(t.matmul(x, W), t.matmul(h, U)), b);
  const ad::Var i = t.sigmoid(t.slice_cols(z, 0, H));
  const ad::Var f = t.sigmoid(t.slice_cols(z, H, H));
  const ad::Var g = t.tanh(t.slice_cols(z, 2 * H, H));
  const ad::Var o = t.sigmoid(t.slice_cols(z, 3 * H, H));
  const ad::Var c2 = t.add(t.mul(f, c), t.mul(i, g));
  const ad::Var h2 = t.mul(o, t.tanh(c2));
  return {h2, c2};
}

struct BlstmForward {
  std::vector<ad::Var> outputs;  // per time step, B x 2H (top layer)
  ad::Var final_state;           // B x 2H: forward h at last valid step, backward h at step 0
};

class BlstmModel {
 public:
  static constexpr const char* kKind = "blstm";

  BlstmConfig config;
  ad::ParameterSet params;

  BlstmModel() = default;

  static BlstmModel create(const BlstmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BlstmModel m;
    m.config = cfg;
    std::mt19937_64 rng(seed);
    const int H = cfg.hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(H));
    for (int l = 0; l < cfg.layers; ++l) {
      const int in = l == 0 ? cfg.input : 2 * H;
      for (bool bwd : {false, true}) {
        m.params.add(lstm_name(l, bwd, "W"), uniform_matrix(in, 4 * H, bound, rng));
        m.params.add(lstm_name(l, bwd, "U"), uniform_matrix(H, 4 * H, bound, rng));
        Matrix b = uniform_matrix(1, 4 * H, bound, rng);
        b.middleCols(H, H).array() += 1.0;
        m.params.add(lstm_name(l, bwd, "b"), std::move(b));
      }
    }
    m.params.add("head.W", uniform_matrix(2 * H, cfg.horizon * cfg.input, 1.0 / std::sqrt(2.0 * H), rng));
    m.params.add("head.b", Matrix::Zero(1, cfg.horizon * cfg.input));
    return m;
  }

  /// Shape check used when parameters come from a checkpoint.
  static BlstmModel from_params(const BlstmConfig& cfg, ad::ParameterSet params) {
    BlstmModel ref = create(cfg, 0);
    if (ref.params.size() != params.size()) throw DataError("blstm: parameter count mismatch");
    for (const auto& p : ref.params.all()) {
      if (!params.contains(p.name)) throw DataError("blstm: missing parameter " + p.name);
      const auto& q = params[p.name];
      if (q.value.rows() != p.value.rows() || q.value.cols() != p.value.cols())
        throw DataError("blstm: shape mismatch for " + p.name);
    }
    ref.params = std::move(params);
    return ref;
  }

  int min_length() const { return config.horizon + 1; }

  /// Runs the stack over a padded batch. Padded steps keep the previous state
  /// by row selection, so they cannot influence any valid output.
  BlstmForward forward(ad::Binder& bind, const PaddedBatch& batch) const {
    if (batch.features != config.input) throw DataError("blstm: input width mismatch");
    ad::Tape& t = bind.tape();
    const int H = config.hidden;
    const int T = batch.steps;
    std::vector<std::vector<char>> masks(T);
    std::vector<ad::Var> inputs(T);
    for (int s = 0; s < T; ++s) {
      masks[s] = batch.step_mask(s);
      inputs[s] = t.constant(batch.step(s));
    }
    BlstmForward out;
    for (int l = 0; l < config.layers; ++l) {
      std::vector<ad::Var> fo(T), bo(T);
      ad::Var finals[2];
      for (bool bwd : {false, true}) {
        const ad::Var W = bind(lstm_name(l, bwd, "W"));
        const ad::Var U = bind(lstm_name(l, bwd, "U"));
        const ad::Var b = bind(lstm_name(l, bwd, "b"));
        ad::Var h = t.constant(Matrix::Zero(batch.batch, H));
        ad::Var c = h;
        for (int k = 0; k < T; ++k) {
          const int s = bwd ? T - 1 - k : k;
          auto [h2, c2] = lstm_cell(t, inputs[s], h, c, W, U, b);
          h = t.select_rows(h2, h, masks[s]);
          c = t.select_rows(c2, c, masks[s]);
          (bwd ? bo : fo)[s] = h;
        }
        finals[bwd ? 1 : 0] = h;
      }
      for (int s = 0; s < T; ++s) inputs[s] = t.concat_cols({fo[s], bo[s]});
      out.final_state = t.concat_cols({finals[0], finals[1]});
    }
    out.outputs = inputs;
    return out;
  }

  /// Head applied to a B x 2H final state; row b is the horizon x input
  /// prediction flattened row-major.
  ad::Var head(ad::Binder& bind, ad::Var final_state) const {
    ad::Tape& t = bind.tape();
    return t.add_row(t.matmul(final_state, bind("head.W")), bind("head.b"));
  }

  /// Pretext objective: first m - horizon points in, last horizon points out.
  ad::Var loss(ad::Binder& bind, const std::vector<const Matrix*>& seqs, const Dropout& /*unused*/) const {
    std::vector<Matrix> inputs;
    Matrix target(static_cast<Eigen::Index>(seqs.size()), config.horizon * config.input);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      auto [in, tgt] = split(*seqs[b]);
      inputs.push_back(std::move(in));
      target.row(b) = Eigen::Map<const Eigen::RowVectorXd>(tgt.data(), tgt.size());
    }
    const PaddedBatch batch = PaddedBatch::from(inputs, 0.0);
    const ad::Var pred = head(bind, forward(bind, batch).final_state);
    return bind.tape().masked_mse(pred, target, Matrix::Ones(target.rows(), target.cols()));
  }

  /// (input, target) of the pretext task for one fiber.
  std::pair<Matrix, Matrix> split(const Matrix& fiber) const {
    if (fiber.rows() < min_length())
      throw DataError("blstm: fiber has " + std::to_string(fiber.rows()) + " points, need at least " +
                      std::to_string(min_length()));
    if (fiber.cols() != config.input) throw DataError("blstm: input width mismatch");
    const Eigen::Index m = fiber.rows();
    return {fiber.topRows(m - config.horizon), fiber.bottomRows(config.horizon)};
  }

  /// horizon x input prediction for one fiber (its final points are ignored).
  Matrix predict_future(const Matrix& fiber) const {
    const Matrix in = split(fiber).first;
    ad::Tape t;
    ad::Binder bind(t, params, nullptr);
    const PaddedBatch batch = PaddedBatch::from(std::vector<Matrix>{in}, 0.0);
    const Matrix flat = t.value(head(bind, forward(bind, batch).final_state));
    Matrix out(config.horizon, config.input);
    Eigen::Map<Eigen::RowVectorXd>(out.data(), out.size()) = flat.row(0);
    return out;
  }

  /// Final top-layer states (B x 2H) of whole fibers.
  Matrix embed(const std::vector<const Matrix*>& seqs) const {
    for (const Matrix* s : seqs)
      if (s->rows() < min_length()) throw DataError("blstm: fiber shorter than model minimum");
    ad::Tape t;
    ad::Binder bind(t, params, nullptr);
    return t.value(forward(bind, PaddedBatch::from(seqs, 0.0)).final_state);
  }
};

}  // namespace cardiofib::seq

#endif  // CARDIOFIB_SEQMODEL_BLSTM_HPP
