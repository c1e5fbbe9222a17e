#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "fsmn/activation.hpp"
#include "fsmn/batch.hpp"
#include "fsmn/errors.hpp"
#include "fsmn/lm_data.hpp"
#include "fsmn/matrix.hpp"
#include "fsmn/network.hpp"
#include "fsmn/random.hpp"

namespace fsmn {

enum class PlateauReference { BestSoFar, PreviousEpoch };

struct TrainConfig {
  double initial_lr = 0.4;
  /// Keep the rate while validation perplexity improves by at least this much.
  double plateau_threshold = 1.0;
  /// Epochs trained after the plateau trigger, halving the rate before each.
  std::size_t halving_epochs = 6;
  PlateauReference reference = PlateauReference::BestSoFar;
  double momentum = 0.0;
  double weight_decay = 0.0;
  /// Also decay biases and memory taps (off: they are exempt).
  bool decay_all = false;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  std::size_t batch_size = 200;
  std::size_t max_epochs = 20;
  std::uint64_t seed = 1;
  MemoryPath memory_path = MemoryPath::Walk;

  void validate() const {
    if (!(initial_lr > 0)) throw InputError("initial learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw InputError("momentum must lie in [0, 1)");
    if (weight_decay < 0) throw InputError("weight decay must be non-negative");
    if (batch_size == 0) throw InputError("batch size must be at least 1");
    if (clip_norm < 0) throw InputError("clip norm must be non-negative");
  }
};

enum class Phase { Plateau, Halving };

/// Learning-rate schedule: a fixed rate while validation perplexity keeps
/// dropping by at least `plateau_threshold`, then `halving_epochs` more epochs
/// with the rate halved before each, then stop.
struct ScheduleState {
  std::size_t epoch = 0;  // completed epochs
  double lr = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  double last_valid_ppl = std::numeric_limits<double>::infinity();
  Phase phase = Phase::Plateau;
  std::size_t halving_done = 0;  // halving-phase epochs completed
  bool stop = false;

  static ScheduleState start(const TrainConfig& cfg) {
    ScheduleState s;
    s.lr = cfg.initial_lr;
    return s;
  }
};

/// Records one finished epoch's validation perplexity and sets the rate for
/// the next epoch.
inline ScheduleState lr_schedule_update(ScheduleState s, double valid_ppl, const TrainConfig& cfg) {
  if (!std::isfinite(valid_ppl)) throw TrainingError("validation perplexity is not finite");
  ++s.epoch;
  const double reference = cfg.reference == PlateauReference::BestSoFar ? s.best_valid_ppl : s.last_valid_ppl;
  s.best_valid_ppl = std::min(s.best_valid_ppl, valid_ppl);
  s.last_valid_ppl = valid_ppl;
  if (s.stop) return s;
  if (s.phase == Phase::Plateau) {
    if (reference - valid_ppl >= cfg.plateau_threshold) return s;
    s.phase = Phase::Halving;
    if (cfg.halving_epochs == 0) {
      s.stop = true;
      return s;
    }
    s.lr /= 2;
    return s;
  }
  ++s.halving_done;
  if (s.halving_done >= cfg.halving_epochs) {
    s.stop = true;
    return s;
  }
  s.lr /= 2;
  return s;
}

template <typename T>
struct TrainState {
  ScheduleState schedule;
  ModelParams<T> velocity;  // momentum buffers, empty until the first step
};

/// v <- momentum v - lr (g + decay theta);  theta <- theta + v.
/// Biases and memory taps are exempt from decay unless cfg.decay_all.
template <typename T>
void sgd_step(const ModelSpec& spec, ModelParams<T>& params, const ModelParams<T>& grads, TrainState<T>& state,
              const TrainConfig& cfg) {
  std::vector<const Matrix<T>*> g;
  std::vector<std::string> names;
  grads.for_each(spec, [&](const std::string& n, const Matrix<T>& t, TensorRole) {
    g.push_back(&t);
    names.push_back(n);
  });
  double sq = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (T v : g[i]->values()) {
      if (!std::isfinite(v)) throw TrainingError("non-finite gradient in tensor " + names[i]);
      sq += double(v) * double(v);
    }
  }
  T scale = T(1);
  if (cfg.clip_norm > 0 && std::sqrt(sq) > cfg.clip_norm) scale = T(cfg.clip_norm / std::sqrt(sq));

  if (state.velocity.layers.empty()) state.velocity = ModelParams<T>::zeros(spec);
  std::vector<Matrix<T>*> v;
  state.velocity.for_each(spec, [&](const std::string&, Matrix<T>& t, TensorRole) { v.push_back(&t); });

  const T lr = T(state.schedule.lr), mu = T(cfg.momentum), wd = T(cfg.weight_decay);
  std::size_t i = 0;
  params.for_each(spec, [&](const std::string& n, Matrix<T>& theta, TensorRole role) {
    const Matrix<T>& gi = *g.at(i);
    Matrix<T>& vi = *v.at(i);
    ++i;
    if (!theta.same_shape(gi) || !theta.same_shape(vi))
      throw ShapeError("gradient for " + n + " is " + gi.shape_string() + ", parameter is " + theta.shape_string());
    const bool decay = wd != T(0) && (cfg.decay_all || role == TensorRole::Weight || role == TensorRole::Embedding);
    T* pt = theta.data();
    const T* pg = gi.data();
    T* pv = vi.data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      T step = scale * pg[k];
      if (decay) step += wd * pt[k];
      pv[k] = mu * pv[k] - lr * step;
      pt[k] += pv[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { CrossEntropy, Quadratic };

/// Mean per-frame loss and its gradient w.r.t. the logits. Quadratic is
/// 0.5 ||logits - onehot(target)||^2 per frame.
template <typename T>
LossAndGrad<T> frame_loss(const Matrix<T>& logits, std::span<const std::uint32_t> targets, LossKind kind) {
  if (kind == LossKind::CrossEntropy) return softmax_cross_entropy(logits, targets);
  if (targets.size() != logits.cols()) throw ShapeError("quadratic loss: target count mismatch");
  Matrix<T> diff = logits;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] >= logits.rows()) throw InputError("quadratic loss: target out of range");
    diff(targets[t], t) -= T(1);
  }
  double total = 0;
  for (T v : diff.values()) total += 0.5 * double(v) * double(v);
  const T inv = T(1) / T(std::max<std::size_t>(1, logits.cols()));
  for (auto& v : diff.values()) v *= inv;
  return {T(total / double(std::max<std::size_t>(1, logits.cols()))), std::move(diff)};
}

template <typename T>
struct BatchGradient {
  T loss;
  ModelParams<T> grads;
};

template <typename T, typename Batch>
BatchGradient<T> batch_gradient(const ModelSpec& spec, const ModelParams<T>& params, const Batch& batch,
                                MemoryPath path = MemoryPath::Walk, LossKind loss = LossKind::CrossEntropy) {
  auto fwd = forward(spec, params, batch, ForwardOptions{path});
  auto lg = frame_loss(fwd.logits, std::span<const std::uint32_t>(batch.targets), loss);
  return {lg.loss, backward(spec, params, fwd.trace, lg.grad)};
}

// ---------------------------------------------------------------------------
// Evaluation

struct NllTotals {
  double nll = 0;
  std::size_t frames = 0;
};

template <typename T>
NllTotals corpus_nll(const ModelSpec& spec, const ModelParams<T>& params, const Corpus& corpus,
                     std::size_t batch_size = 200, MemoryPath path = MemoryPath::Walk) {
  const auto* proj = spec.projection();
  if (!proj) throw InputError("perplexity needs a token-input model");
  NllTotals tot;
  auto stream = pack_minibatch(corpus, batch_size, std::nullopt, proj->window, static_cast<std::uint32_t>(proj->pad_id()));
  while (auto batch = stream.next()) {
    auto fwd = forward(spec, params, *batch, ForwardOptions{path});
    for (double x : column_nll(fwd.logits, std::span<const std::uint32_t>(batch->targets))) tot.nll += x;
    tot.frames += batch->frames();
  }
  return tot;
}

/// exp(mean negative log-likelihood per token), natural log.
template <typename T>
double perplexity(const ModelSpec& spec, const ModelParams<T>& params, const Corpus& corpus,
                  std::size_t batch_size = 200, MemoryPath path = MemoryPath::Walk) {
  if (corpus.tokens() == 0) throw InputError("perplexity of an empty corpus");
  const auto tot = corpus_nll(spec, params, corpus, batch_size, path);
  return std::exp(tot.nll / double(tot.frames));
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double valid_ppl = 0;
};

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRecord>& history) {
  out << "epoch,lr,train_loss,valid_ppl\n";
  char buf[128];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", h.epoch, h.lr, h.train_loss, h.valid_ppl);
    out << buf;
  }
}

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  TrainState<T> state;
  std::vector<HistoryRecord> history;
  bool diverged = false;
};

template <typename T>
using EpochCallback = std::function<void(const HistoryRecord&, const ModelParams<T>&, const TrainState<T>&)>;

/// Per epoch: one pass over the shuffled training batches, validation
/// perplexity, then the schedule update. On a non-finite validation
/// perplexity the parameters from the end of the previous epoch are returned
/// with `diverged` set.
template <typename T>
TrainResult<T> train_loop(const ModelSpec& spec, ModelParams<T> params, const Corpus& train, const Corpus& valid,
                          const TrainConfig& cfg, const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
  cfg.validate();
  const auto* proj = spec.projection();
  if (!proj) throw InputError("train_loop needs a token-input model");
  if (train.sentences.empty() || valid.sentences.empty()) throw InputError("training and validation splits must be non-empty");
  TrainResult<T> res;
  res.state.schedule = ScheduleState::start(cfg);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !res.state.schedule.stop; ++epoch) {
    const ModelParams<T> last_good = params;
    const TrainState<T> last_state = res.state;
    HistoryRecord rec;
    rec.epoch = epoch;
    rec.lr = res.state.schedule.lr;
    double loss_sum = 0;
    std::size_t frames = 0;
    bool bad = false;
    auto stream = pack_minibatch(train, cfg.batch_size, cfg.seed * 1000003ull + epoch, proj->window,
                                 static_cast<std::uint32_t>(proj->pad_id()));
    while (auto batch = stream.next()) {
      auto bg = batch_gradient(spec, params, *batch, cfg.memory_path);
      if (!std::isfinite(double(bg.loss))) {
        bad = true;
        break;
      }
      loss_sum += double(bg.loss) * double(batch->frames());
      frames += batch->frames();
      try {
        sgd_step(spec, params, bg.grads, res.state, cfg);
      } catch (const TrainingError&) {
        bad = true;
        break;
      }
    }
    rec.train_loss = frames ? loss_sum / double(frames) : 0.0;
    rec.valid_ppl = bad ? std::numeric_limits<double>::quiet_NaN()
                        : perplexity(spec, params, valid, cfg.batch_size, cfg.memory_path);
    if (!std::isfinite(rec.valid_ppl)) {
      res.history.push_back(rec);
      res.diverged = true;
      params = last_good;
      res.state = last_state;
      break;
    }
    res.history.push_back(rec);
    res.state.schedule = lr_schedule_update(res.state.schedule, rec.valid_ppl, cfg);
    if (on_epoch) on_epoch(rec, params, res.state);
  }
  res.params = std::move(params);
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0;
  double max_abs_err = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;

  double max_rel_err() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_err);
    return m;
  }
  bool passed(double threshold) const { return max_rel_err() <= threshold; }
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Check at most this many components per tensor (seeded random subset); 0 = all.
  std::size_t max_components = 0;
  std::uint64_t seed = 7;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  LossKind loss = LossKind::CrossEntropy;
  MemoryPath path = MemoryPath::Walk;
  /// Mutation testing: scale analytic memory-block gradients by 1.001 so a
  /// working checker must report a failure.
  bool inject_fault = false;
};

/// Compares analytic gradients with central differences
/// (L(theta + eps) - L(theta - eps)) / (2 eps) component by component.
template <typename T, typename Batch>
GradCheckReport grad_check(const ModelSpec& spec, const ModelParams<T>& params, const Batch& batch,
                           const GradCheckOptions& opt = {}) {
  auto analytic = batch_gradient(spec, params, batch, opt.path, opt.loss);
  if (opt.inject_fault) {
    analytic.grads.for_each(spec, [](const std::string& n, Matrix<T>& t, TensorRole) {
      if (n.find(".memory.") != std::string::npos || n.find(".W_rec") != std::string::npos)
        for (auto& v : t.values()) v *= T(1.001);
    });
  }
  auto loss_at = [&](const ModelParams<T>& p) {
    auto fwd = forward(spec, p, batch, ForwardOptions{opt.path});
    return double(frame_loss(fwd.logits, std::span<const std::uint32_t>(batch.targets), opt.loss).loss);
  };
  std::vector<const Matrix<T>*> grads;
  analytic.grads.for_each(spec, [&](const std::string&, const Matrix<T>& t, TensorRole) { grads.push_back(&t); });

  GradCheckReport report;
  ModelParams<T> probe = params;
  std::vector<std::pair<std::string, Matrix<T>*>> tensors;
  probe.for_each(spec, [&](const std::string& n, Matrix<T>& t, TensorRole) { tensors.emplace_back(n, &t); });
  Rng rng(opt.seed);
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    auto& [name, tensor] = tensors[ti];
    TensorCheck tc{name};
    std::vector<std::size_t> idx(tensor->size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (opt.max_components && idx.size() > opt.max_components) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_components);
    }
    for (auto k : idx) {
      T& x = tensor->data()[k];
      const T saved = x;
      x = saved + T(opt.epsilon);
      const double up = loss_at(probe);
      x = saved - T(opt.epsilon);
      const double down = loss_at(probe);
      x = saved;
      const double numeric = (up - down) / (2 * opt.epsilon);
      const double a = double(grads[ti]->data()[k]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
      tc.max_abs_err = std::max(tc.max_abs_err, abs_err);
      tc.max_rel_err = std::max(tc.max_rel_err, rel);
      ++tc.checked;
    }
    report.tensors.push_back(tc);
  }
  return report;
}

}  // namespace fsmn
