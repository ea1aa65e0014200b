#ifndef CARDIOFIB_SEQMODEL_TRAIN_HPP
#define CARDIOFIB_SEQMODEL_TRAIN_HPP

#include "../sequence.hpp"
#include "blstm.hpp"
#include "optim.hpp"
#include "transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace cardiofib::seq {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 30;
  double lr = 1e-3;
  AdamWHyper adam;
  double plateau_factor = 0.1;
  int patience = 3;
  double min_lr = 1e-6;
  std::uint64_t seed = 1;
  bool standardize = true;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(min_lr > 0.0) || !(lr > min_lr)) throw ConfigError("train: need lr > min_lr > 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train: plateau factor must be in (0, 1)");
    if (adam.weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  }

  static TrainConfig paper_blstm() {
    TrainConfig c;
    c.batch_size = 256;
    c.epochs = 100;
    c.lr = 1e-3;
    c.min_lr = 1e-6;
    return c;
  }

  static TrainConfig paper_tae() {
    TrainConfig c;
    c.batch_size = 128;
    c.epochs = 50;
    c.lr = 1e-4;
    c.min_lr = 1e-8;
    return c;
  }

  io::Json to_json() const {
    return {{"batch_size", batch_size},
            {"epochs", epochs},
            {"lr", lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"weight_decay", adam.weight_decay},
            {"plateau_factor", plateau_factor},
            {"patience", patience},
            {"min_lr", min_lr},
            {"seed", seed},
            {"standardize", standardize}};
  }

  static TrainConfig from_json(const io::Json& j) { return from_json(j, TrainConfig()); }

  static TrainConfig from_json(const io::Json& j, TrainConfig c) {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.patience = j.value("patience", c.patience);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.seed = j.value("seed", c.seed);
    c.standardize = j.value("standardize", c.standardize);
    c.validate();
    return c;
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

/// Parameters + configuration + history. Parameter values are kept rounded
/// to float32 so that the on-disk form reproduces them exactly.
struct ModelCheckpoint {
  std::string kind;
  io::Json model_config;
  io::Json train_config;
  ad::ParameterSet params;
  FeatureStats stats;
  bool standardized = true;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  std::string status = "ok";

  /// Applies the training-time preprocessing to a raw fiber.
  Matrix preprocess(const Matrix& raw) const { return standardized ? stats.apply(raw) : raw; }

  void save(const std::string& path) const {
    io::Json tensors = io::Json::array();
    std::string payload;
    for (const auto& p : params.all()) {
      tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
      for (Eigen::Index i = 0; i < p.value.size(); ++i) io::put_f32(payload, static_cast<float>(p.value.data()[i]));
    }
    io::Json hist = io::Json::array();
    for (const auto& e : history)
      hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
    io::Json header{{"kind", kind},           {"model_config", model_config}, {"train_config", train_config},
                    {"tensors", tensors},     {"stats", stats.to_json()},     {"standardized", standardized},
                    {"history", hist},        {"best_epoch", best_epoch},     {"status", status},
                    {"dtype", "f32"}};
    io::write_container(path, header, payload);
  }

  static ModelCheckpoint load(const std::string& path) {
    auto [header, reader] = io::read_container(path);
    ModelCheckpoint ck;
    try {
      ck.kind = header.at("kind").get<std::string>();
      ck.model_config = header.at("model_config");
      ck.train_config = header.value("train_config", io::Json::object());
      ck.stats = FeatureStats::from_json(header.at("stats"));
      ck.standardized = header.value("standardized", true);
      ck.best_epoch = header.value("best_epoch", -1);
      ck.status = header.value("status", std::string("ok"));
      for (const auto& e : header.value("history", io::Json::array()))
        ck.history.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                              e.at("val_loss").get<double>(), e.at("lr").get<double>()});
    } catch (const io::Json::exception& e) {
      throw DataError(path + ": malformed checkpoint header: " + e.what());
    }
    std::size_t element = 0;
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw DataError(path + ": negative tensor shape");
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = reader.finite_f32(element++);
      ck.params.add(t.at("name").get<std::string>(), std::move(m));
    }
    reader.expect_end();
    return ck;
  }
};

inline void round_to_f32(ad::ParameterSet& params) {
  for (auto& p : params.all())
    p.value = p.value.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

template <typename Model>
ModelCheckpoint make_checkpoint(const Model& model, const FeatureStats& stats, bool standardized) {
  ModelCheckpoint ck;
  ck.kind = Model::kKind;
  ck.model_config = model.config.to_json();
  ck.params = model.params;
  round_to_f32(ck.params);
  ck.stats = stats;
  ck.standardized = standardized;
  return ck;
}

inline BlstmModel blstm_from_checkpoint(const ModelCheckpoint& ck) {
  if (ck.kind != BlstmModel::kKind) throw DataError("checkpoint holds a '" + ck.kind + "' model, expected blstm");
  return BlstmModel::from_params(BlstmConfig::from_json(ck.model_config), ck.params);
}

inline TaeModel tae_from_checkpoint(const ModelCheckpoint& ck) {
  if (ck.kind != TaeModel::kKind) throw DataError("checkpoint holds a '" + ck.kind + "' model, expected tae");
  return TaeModel::from_params(TaeConfig::from_json(ck.model_config), ck.params);
}

/// Number of scalar entries a model's loss averages over for these fibers.
inline double loss_entries(const BlstmModel& m, const std::vector<const Matrix*>& seqs) {
  return static_cast<double>(seqs.size()) * m.config.horizon * m.config.input;
}
inline double loss_entries(const TaeModel& m, const std::vector<const Matrix*>& seqs) {
  double n = 0.0;
  for (const Matrix* s : seqs) n += static_cast<double>(s->rows()) * m.config.input;
  return n;
}

inline double model_dropout(const BlstmModel&) { return 0.0; }
inline double model_dropout(const TaeModel& m) { return m.config.dropout; }

/// One optimizer owned alongside a model. Each step is a full forward,
/// backward and AdamW update on the given (already preprocessed) batch.
template <typename Model>
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg)
      : model_(model), adam_(cfg.adam), rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL), lr_(cfg.lr) {}

  double step(const std::vector<const Matrix*>& batch, bool train_mode = true) {
    model_.params.zero_grad();
    ad::Tape tape;
    ad::Binder bind(tape, model_.params, &model_.params);
    const Dropout drop{train_mode ? model_dropout(model_) : 0.0, &rng_};
    const ad::Var loss = model_.loss(bind, batch, drop);
    const double value = tape.value(loss)(0, 0);
    if (!std::isfinite(value)) throw NumericError("non-finite training loss");
    tape.backward(loss);
    adam_.step(model_.params, lr_);
    return value;
  }

  double evaluate(const std::vector<const Matrix*>& seqs, int batch_size) const {
    double total = 0.0, entries = 0.0;
    for (std::size_t lo = 0; lo < seqs.size(); lo += batch_size) {
      const std::vector<const Matrix*> chunk(seqs.begin() + lo,
                                             seqs.begin() + std::min(seqs.size(), lo + batch_size));
      ad::Tape tape;
      ad::Binder bind(tape, model_.params, nullptr);
      const double n = loss_entries(model_, chunk);
      total += tape.value(model_.loss(bind, chunk, Dropout{}))(0, 0) * n;
      entries += n;
    }
    if (entries == 0.0) throw DataError("evaluate: no sequences");
    return total / entries;
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  Model& model_;
  AdamW adam_;
  std::mt19937_64 rng_;
  double lr_;
};

/// Epoch loop with seeded shuffling, per-epoch validation, plateau decay and
/// best-validation retention. `model` is left holding the final-epoch
/// parameters; the returned checkpoint holds the best ones.
template <typename Model>
ModelCheckpoint train_model(Model& model, const std::vector<FeatureSequence>& train,
                            const std::vector<FeatureSequence>& val, const FeatureStats& stats,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("train_model: empty training set");
  if (val.empty()) throw DataError("train_model: empty validation set");
  auto prep = [&](const std::vector<FeatureSequence>& in) {
    std::vector<Matrix> out;
    for (const auto& f : in) {
      if (static_cast<int>(f.size()) < model.min_length())
        throw DataError("train_model: fiber shorter than model minimum");
      out.push_back(cfg.standardize ? stats.apply(f.values) : f.values);
    }
    return out;
  };
  const std::vector<Matrix> tr = prep(train), va = prep(val);
  std::vector<const Matrix*> va_ptr;
  for (const auto& m : va) va_ptr.push_back(&m);

  Trainer<Model> trainer(model, cfg);
  PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.patience, cfg.min_lr);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);

  ModelCheckpoint best = make_checkpoint(model, stats, cfg.standardize);
  best.train_config = cfg.to_json();
  std::vector<EpochRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::string status = "ok";

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0, entries = 0.0;
    const double lr_used = sched.lr();
    trainer.set_lr(lr_used);
    try {
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
        std::vector<const Matrix*> batch;
        for (std::size_t k = lo; k < std::min(order.size(), lo + cfg.batch_size); ++k) batch.push_back(&tr[order[k]]);
        const double n = loss_entries(model, batch);
        sum += trainer.step(batch) * n;
        entries += n;
      }
    } catch (const NumericError& e) {
      status = "diverged at epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    const double val_loss = trainer.evaluate(va_ptr, cfg.batch_size);
    if (!std::isfinite(val_loss)) {
      status = "diverged at epoch " + std::to_string(epoch) + ": non-finite validation loss";
      break;
    }
    history.push_back({epoch, sum / entries, val_loss, lr_used});
    if (val_loss < best_val) {
      best_val = val_loss;
      best = make_checkpoint(model, stats, cfg.standardize);
      best.train_config = cfg.to_json();
      best.best_epoch = epoch;
    }
    sched.step(val_loss);
  }
  best.history = history;
  best.status = status;
  return best;
}

}  // namespace cardiofib::seq

#endif  // CARDIOFIB_SEQMODEL_TRAIN_HPP
