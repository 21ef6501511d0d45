#include "mtsc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <map>
#include <numeric>

#include "mtsc/errors.hpp"
#include "mtsc/ops.hpp"
#include "mtsc/rng.hpp"

namespace mtsc::train {

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.shape().size() != 2) throw DimensionError("cross_entropy expects [B, C] logits");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != B)
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
  std::vector<double> onehot(B * C, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    if (labels[i] >= C)
      throw UsageError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(C) + " classes");
    onehot[i * C + labels[i]] = -1.0 / double(B);
  }
  return ops::sum(ops::mul(ops::log_softmax(logits, 1), Tensor({B, C}, std::move(onehot))));
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad()) continue;
    auto g = params_[k].grad();
    auto x = params_[k].mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

PlateauScheduler::PlateauScheduler(double factor, std::size_t patience) : factor_(factor), patience_(patience) {
  if (!(factor > 0.0 && factor < 1.0)) throw UsageError("plateau factor must lie in (0, 1)");
  if (patience == 0) throw UsageError("plateau patience must be at least 1");
}

double PlateauScheduler::step(double monitored, double lr) {
  if (monitored < best_) {
    best_ = monitored;
    stale_ = 0;
    return lr;
  }
  if (++stale_ < patience_) return lr;
  stale_ = 0;
  ++reductions_;
  return lr * factor_;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw UsageError("learning_rate must be positive");
  if (epochs == 0) throw UsageError("epochs must be at least 1");
  if (batch_size == 0) throw UsageError("batch_size must be at least 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw UsageError("plateau factor must lie in (0, 1)");
  if (plateau_patience == 0) throw UsageError("plateau patience must be at least 1");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw UsageError("validation_fraction must lie in [0, 1)");
  if (stop_at_train_accuracy && !(*stop_at_train_accuracy > 0.0 && *stop_at_train_accuracy <= 1.0))
    throw UsageError("stop_at_train_accuracy must lie in (0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"learning_rate", learning_rate},
                      {"epochs", epochs},
                      {"batch_size", batch_size},
                      {"plateau_factor", plateau_factor},
                      {"plateau_patience", plateau_patience},
                      {"validation_fraction", validation_fraction},
                      {"seed", seed},
                      {"stop_at_train_accuracy", nullptr}};
  if (stop_at_train_accuracy) j["stop_at_train_accuracy"] = *stop_at_train_accuracy;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw UsageError("training config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "plateau_factor") c.plateau_factor = value.get<double>();
      else if (key == "plateau_patience") c.plateau_patience = value.get<std::size_t>();
      else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "stop_at_train_accuracy")
        c.stop_at_train_accuracy = value.is_null() ? std::nullopt : std::optional<double>(value.get<double>());
      else throw UsageError("unknown training option '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::json RunResult::to_json() const {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& e : history)
    h.push_back({{"epoch", e.epoch},
                 {"learning_rate", e.learning_rate},
                 {"train_loss", e.train_loss},
                 {"train_accuracy", e.train_accuracy},
                 {"val_loss", optional_json(e.val_loss)},
                 {"val_accuracy", optional_json(e.val_accuracy)}});
  nlohmann::json j = {{"variant", variant},
                      {"dataset", dataset},
                      {"seed", seed},
                      {"config", config},
                      {"epochs_run", history.size()},
                      {"train_accuracy", train_accuracy},
                      {"val_accuracy", optional_json(val_accuracy)},
                      {"test_accuracy", optional_json(test_accuracy)},
                      {"history", h}};
  if (wall_time_seconds) j["wall_time_seconds"] = *wall_time_seconds;
  return j;
}

RunResult RunResult::from_json(const nlohmann::json& j) {
  RunResult r;
  try {
    r.variant = j.at("variant").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.value("config", nlohmann::json::object());
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.val_accuracy = optional_double(j, "val_accuracy");
    r.test_accuracy = optional_double(j, "test_accuracy");
    r.wall_time_seconds = optional_double(j, "wall_time_seconds");
    for (const auto& e : j.value("history", nlohmann::json::array())) {
      EpochRecord rec;
      rec.epoch = e.at("epoch").get<std::size_t>();
      rec.learning_rate = e.at("learning_rate").get<double>();
      rec.train_loss = e.at("train_loss").get<double>();
      rec.train_accuracy = e.at("train_accuracy").get<double>();
      rec.val_loss = optional_double(e, "val_loss");
      rec.val_accuracy = optional_double(e, "val_accuracy");
      r.history.push_back(rec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("not a run result: ") + e.what());
  }
  return r;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

namespace {

void check_fits(const Model& model, const data::Dataset& ds) {
  const auto& spec = model.spec();
  if (ds.dims != spec.d_dataset)
    throw DimensionError("dataset has " + std::to_string(ds.dims) + " dimensions but the model expects " +
                         std::to_string(spec.d_dataset));
  if (ds.num_classes() > spec.num_classes)
    throw DimensionError("dataset has " + std::to_string(ds.num_classes()) + " classes but the model predicts " +
                         std::to_string(spec.num_classes));
  if (!ds.equal_length()) throw DimensionError("dataset mixes series lengths; pad it first");
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

Evaluation evaluate(const Model& model, const data::Dataset& ds, std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("batch_size must be at least 1");
  check_fits(model, ds);
  NoGradGuard guard;
  Evaluation ev;
  if (ds.size() == 0) return ev;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor logits = model.forward(data::batch_tensor(ds, idx), false);
    auto labels = data::batch_labels(ds, idx);
    loss_sum += cross_entropy(logits, labels).item() * double(idx.size());
    const std::size_t C = logits.shape()[1];
    auto v = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t p = argmax(v.subspan(i * C, C));
      ev.predictions.push_back(p);
      correct += p == labels[i];
    }
  }
  ev.accuracy = double(correct) / double(ds.size());
  ev.loss = loss_sum / double(ds.size());
  return ev;
}

RunResult fit(Model& model, const data::Dataset& train_in, const data::Dataset* val_in, const TrainConfig& cfg) {
  cfg.validate();
  check_fits(model, train_in);
  if (train_in.size() == 0) throw UsageError("training set is empty");
  const auto started = std::chrono::steady_clock::now();

  data::Dataset train = train_in, held;
  const data::Dataset* val = val_in;
  if (!val && cfg.validation_fraction > 0.0) {
    std::tie(train, held) = data::stratified_holdout(train_in, cfg.validation_fraction, cfg.seed);
    if (held.size() > 0) val = &held;
  }
  if (val) check_fits(model, *val);

  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  Adam adam(params);
  PlateauScheduler scheduler(cfg.plateau_factor, cfg.plateau_patience);
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  double lr = cfg.learning_rate;

  RunResult result;
  result.variant = to_string(model.spec().variant);
  result.dataset = train_in.name;
  result.seed = cfg.seed;
  result.config = cfg.to_json();

  auto order = iota(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(start),
                                   order.begin() + std::ptrdiff_t(std::min(order.size(), start + cfg.batch_size)));
      adam.zero_grad();
      Tensor loss = cross_entropy(model.forward(data::batch_tensor(train, idx), true), data::batch_labels(train, idx));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        char rate[32];
        std::snprintf(rate, sizeof rate, "%g", lr);
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                              std::to_string(start) + " (learning rate " + rate + ")");
      }
      backward(loss);
      adam.step(lr);
      loss_sum += value * double(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.train_loss = loss_sum / double(train.size());
    rec.train_accuracy = evaluate(model, train, cfg.batch_size).accuracy;
    double monitored = rec.train_loss;
    if (val) {
      Evaluation ev = evaluate(model, *val, cfg.batch_size);
      rec.val_loss = ev.loss;
      rec.val_accuracy = ev.accuracy;
      monitored = ev.loss;
    }
    result.history.push_back(rec);
    lr = scheduler.step(monitored, lr);
    if (cfg.stop_at_train_accuracy && rec.train_accuracy >= *cfg.stop_at_train_accuracy) break;
  }
  result.train_accuracy = result.history.back().train_accuracy;
  result.val_accuracy = result.history.back().val_accuracy;
  result.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::vector<double> rank_average(const std::vector<std::vector<std::optional<double>>>& accuracy) {
  if (accuracy.empty()) throw UsageError("rank_average needs at least one dataset");
  const std::size_t M = accuracy.front().size();
  if (M == 0) throw UsageError("rank_average needs at least one method");
  std::vector<double> total(M, 0.0);
  for (std::size_t d = 0; d < accuracy.size(); ++d) {
    const auto& row = accuracy[d];
    if (row.size() != M) throw UsageError("rank_average rows differ in length");
    for (std::size_t m = 0; m < M; ++m)
      if (!row[m]) throw UsageError("missing accuracy for dataset " + std::to_string(d) + ", method " + std::to_string(m));
    for (std::size_t m = 0; m < M; ++m) {
      std::size_t better = 0, equal = 0;
      for (std::size_t o = 0; o < M; ++o) {
        better += *row[o] > *row[m];
        equal += *row[o] == *row[m];
      }
      total[m] += double(better) + (double(equal) + 1.0) / 2.0;
    }
  }
  for (auto& t : total) t /= double(accuracy.size());
  return total;
}

Aggregate aggregate(const std::vector<RunResult>& results) {
  Aggregate a;
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> cells;
  for (const auto& r : results) {
    if (!r.test_accuracy) continue;
    if (std::find(a.datasets.begin(), a.datasets.end(), r.dataset) == a.datasets.end()) a.datasets.push_back(r.dataset);
    if (std::find(a.variants.begin(), a.variants.end(), r.variant) == a.variants.end()) a.variants.push_back(r.variant);
    auto& c = cells[{r.dataset, r.variant}];
    c.first += *r.test_accuracy;
    ++c.second;
  }
  std::sort(a.datasets.begin(), a.datasets.end());
  std::sort(a.variants.begin(), a.variants.end());
  bool complete = !a.datasets.empty();
  for (const auto& d : a.datasets) {
    a.mean_accuracy.emplace_back();
    a.runs.emplace_back();
    for (const auto& v : a.variants) {
      auto it = cells.find({d, v});
      if (it == cells.end()) {
        a.mean_accuracy.back().push_back(std::nullopt);
        a.runs.back().push_back(0);
        complete = false;
      } else {
        a.mean_accuracy.back().push_back(it->second.first / double(it->second.second));
        a.runs.back().push_back(it->second.second);
      }
    }
  }
  if (complete) a.rank_average = train::rank_average(a.mean_accuracy);
  return a;
}

nlohmann::json Aggregate::to_json() const {
  nlohmann::json table = nlohmann::json::array();
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    nlohmann::json row = {{"dataset", datasets[d]}, {"mean_test_accuracy", nlohmann::json::object()},
                          {"runs", nlohmann::json::object()}};
    for (std::size_t v = 0; v < variants.size(); ++v) {
      row["mean_test_accuracy"][variants[v]] = optional_json(mean_accuracy[d][v]);
      row["runs"][variants[v]] = runs[d][v];
    }
    table.push_back(row);
  }
  nlohmann::json ranks;
  if (rank_average) {
    ranks = nlohmann::json::object();
    for (std::size_t v = 0; v < variants.size(); ++v) ranks[variants[v]] = (*rank_average)[v];
  }
  return {{"datasets", datasets}, {"variants", variants}, {"table", table}, {"rank_average", ranks}};
}

}  // namespace mtsc::train
