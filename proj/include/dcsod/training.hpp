#pragma once

// Training losses (cross-entropy, outlier exposure, distillation, and the
// combined objective), teacher-ensemble inference, and the candidate
// training loop.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dcsod/databench.hpp"
#include "dcsod/netbuild.hpp"
#include "dcsod/ops.hpp"
#include "dcsod/optimizer.hpp"
#include "dcsod/searchspace.hpp"

namespace dcsod {

enum class TrainMode { ce, oe, distill };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::ce: return "ce";
    case TrainMode::oe: return "oe";
    case TrainMode::distill: return "distill";
  }
  throw internal_error("unknown train mode");
}

inline TrainMode mode_from_name(const std::string& s) {
  for (TrainMode m : {TrainMode::ce, TrainMode::oe, TrainMode::distill})
    if (s == mode_name(m)) return m;
  throw config_error("unknown train mode '" + s + "'");
}

struct LossConfig {
  double lambda = 0.5;
  double alpha = 0.5;
  double beta = 0.2;
  double T = 20.0;
  TrainMode mode = TrainMode::distill;
  // Optional T^2 gradient-scale compensation; off, matching the loss as
  // written rather than the common distillation folklore.
  bool t2_rescale = false;

  // The mode pins the coefficients it excludes.
  LossConfig normalized() const {
    LossConfig c = *this;
    if (c.mode == TrainMode::ce) {
      c.lambda = 0.0;
      c.alpha = 0.0;
    } else if (c.mode == TrainMode::oe) {
      c.alpha = 0.0;
      c.beta = 0.0;
    }
    return c;
  }

  void validate() const {
    if (lambda < 0) throw config_error("loss: lambda must be >= 0");
    if (alpha < 0 || alpha > 1) throw config_error("loss: alpha must be in [0,1]");
    if (beta < 0 || beta > 1) throw config_error("loss: beta must be in [0,1]");
    if (!(T > 0)) throw config_error("loss: temperature must be positive");
    if (mode == TrainMode::ce && (lambda != 0 || alpha != 0))
      throw config_error("loss: mode=ce requires lambda=alpha=0");
    if (mode == TrainMode::oe && (alpha != 0 || beta != 0))
      throw config_error("loss: mode=oe requires alpha=beta=0");
  }

  bool needs_teacher() const { return alpha > 0 || (lambda > 0 && beta > 0); }
  bool needs_outliers() const { return lambda > 0; }

  static LossConfig ce() {
    LossConfig c;
    c.mode = TrainMode::ce;
    return c.normalized();
  }
  static LossConfig oe(double lambda = 0.5) {
    LossConfig c;
    c.mode = TrainMode::oe;
    c.lambda = lambda;
    return c.normalized();
  }
  static LossConfig distill(double lambda = 0.5, double alpha = 0.5, double beta = 0.2,
                            double T = 20.0) {
    LossConfig c;
    c.mode = TrainMode::distill;
    c.lambda = lambda;
    c.alpha = alpha;
    c.beta = beta;
    c.T = T;
    return c;
  }
};

// Batch-mean cross-entropy at T=1; gradient written to dlogits when given.
template <class S>
double ce_loss(const Tensor<S>& logits, const std::vector<int>& labels,
               Tensor<S>* dlogits = nullptr) {
  if (logits.shape.size() != 2) throw config_error("ce_loss expects (N,C) logits");
  const int n = logits.shape[0], c = logits.shape[1];
  if (int(labels.size()) != n) throw config_error("ce_loss: labels/logits size mismatch");
  check_finite(logits.v.data(), logits.v.size(), "ce_loss logits");
  Tensor<S> probs = tempered_softmax(logits, 1.0);
  if (dlogits) *dlogits = Tensor<S>({n, c});
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[size_t(i)];
    if (y < 0 || y >= c)
      throw config_error("ce_loss: label " + std::to_string(y) + " out of range [0," +
                         std::to_string(c) + ")");
    const double p = std::max(double(probs.at(i, y)), 1e-300);
    total += -std::log(p);
    if (dlogits)
      for (int j = 0; j < c; ++j)
        dlogits->at(i, j) = S((double(probs.at(i, j)) - (j == y ? 1.0 : 0.0)) / double(n));
  }
  return total / double(n);
}

// Batch-mean cross-entropy against the uniform distribution over C classes.
template <class S>
double uniform_ce_loss(const Tensor<S>& logits, Tensor<S>* dlogits = nullptr) {
  if (logits.shape.size() != 2) throw config_error("uniform_ce_loss expects (N,C) logits");
  const int n = logits.shape[0], c = logits.shape[1];
  check_finite(logits.v.data(), logits.v.size(), "uniform_ce_loss logits");
  Tensor<S> probs = tempered_softmax(logits, 1.0);
  if (dlogits) *dlogits = Tensor<S>({n, c});
  const double u = 1.0 / double(c);
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      total += -u * std::log(std::max(double(probs.at(i, j)), 1e-300));
      if (dlogits) dlogits->at(i, j) = S((double(probs.at(i, j)) - u) / double(n));
    }
  return total / double(n);
}

// Batch-mean soft cross-entropy between tempered teacher and student
// distributions; gradient flows to the student only.
template <class S>
double distill_loss(const Tensor<S>& student_logits, const Tensor<S>& teacher_probs, double T,
                    Tensor<S>* dlogits = nullptr, bool t2_rescale = false) {
  if (student_logits.shape != teacher_probs.shape)
    throw config_error("distill_loss: student " + student_logits.shape_str() + " vs teacher " +
                       teacher_probs.shape_str());
  if (student_logits.shape.size() != 2) throw config_error("distill_loss expects (N,C) logits");
  const int n = student_logits.shape[0], c = student_logits.shape[1];
  for (int i = 0; i < n; ++i) {
    double sum = 0;
    for (int j = 0; j < c; ++j) {
      const double p = double(teacher_probs.at(i, j));
      if (p < -1e-6) throw config_error("distill_loss: negative teacher probability");
      sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-4)
      throw config_error("distill_loss: teacher row " + std::to_string(i) +
                         " off the simplex (sum " + std::to_string(sum) + ")");
  }
  Tensor<S> ps = tempered_softmax(student_logits, T);
  const double scale = t2_rescale ? T * T : 1.0;
  if (dlogits) *dlogits = Tensor<S>({n, c});
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double pt = std::max(0.0, double(teacher_probs.at(i, j)));
      total += -pt * std::log(std::max(double(ps.at(i, j)), 1e-300));
      if (dlogits)
        dlogits->at(i, j) =
            S(scale * (double(ps.at(i, j)) - double(teacher_probs.at(i, j))) / (T * double(n)));
    }
  return scale * total / double(n);
}

template <class S>
struct TeacherSet {
  std::vector<Network<S>> members;
  double T = 20.0;
  std::vector<std::string> member_ids;

  bool empty() const { return members.empty(); }
  size_t size() const { return members.size(); }
};

// Mean of member tempered softmax outputs; each call uses its own workspaces
// so a frozen TeacherSet is safe to share across workers.
template <class S>
Tensor<S> teacher_predict(const TeacherSet<S>& teachers, const Tensor<S>& batch, double T) {
  if (teachers.empty()) throw config_error("teacher_predict: empty teacher set");
  Tensor<S> mean;
  Workspace<S> ws;
  for (size_t m = 0; m < teachers.members.size(); ++m) {
    auto out = teachers.members[m].forward(batch, ws);
    Tensor<S> p = tempered_softmax(*out.logits, T);
    if (m == 0) {
      mean = std::move(p);
    } else {
      if (p.shape != mean.shape) throw internal_error("teacher_predict: member shape mismatch");
      for (size_t i = 0; i < mean.v.size(); ++i) mean.v[i] += p.v[i];
    }
  }
  const S inv = S(1.0 / double(teachers.members.size()));
  for (auto& v : mean.v) v *= inv;
  return mean;
}

// All pieces of Eq. 5 assembled at the logits level. Teacher probabilities
// are supplied as rows aligned with the student batches.
template <class S>
struct CombinedBatch {
  const Tensor<S>* id_logits = nullptr;
  const std::vector<int>* id_labels = nullptr;
  const Tensor<S>* out_logits = nullptr;
  const Tensor<S>* id_teacher_probs = nullptr;
  const Tensor<S>* out_teacher_probs = nullptr;
};

template <class S>
double combined_loss(const CombinedBatch<S>& b, const LossConfig& cfg,
                     Tensor<S>* d_id = nullptr, Tensor<S>* d_out = nullptr) {
  cfg.validate();
  if (!b.id_logits || !b.id_labels) throw config_error("combined_loss: missing id batch");
  if (cfg.lambda > 0 && !b.out_logits)
    throw config_error("combined_loss: lambda > 0 but no outlier batch");
  if (cfg.alpha > 0 && !b.id_teacher_probs)
    throw config_error("combined_loss: alpha > 0 requires id teacher probabilities");
  if (cfg.lambda > 0 && cfg.beta > 0 && !b.out_teacher_probs)
    throw config_error("combined_loss: beta > 0 requires outlier teacher probabilities");

  double loss = 0;
  Tensor<S> term_grad;
  auto add_into = [](Tensor<S>* dst, const Tensor<S>& src, double w) {
    if (!dst) return;
    if (dst->v.empty() || dst->shape != src.shape) {
      *dst = Tensor<S>(src.shape);
      dst->fill(S(0));
    }
    for (size_t i = 0; i < dst->v.size(); ++i) dst->v[i] += S(w * double(src.v[i]));
  };
  if (d_id) {
    *d_id = Tensor<S>(b.id_logits->shape);
    d_id->fill(S(0));
  }

  if (cfg.alpha > 0) {
    const double l =
        distill_loss(*b.id_logits, *b.id_teacher_probs, cfg.T, d_id ? &term_grad : nullptr,
                     cfg.t2_rescale);
    loss += cfg.alpha * l;
    add_into(d_id, term_grad, cfg.alpha);
  }
  if (cfg.alpha < 1) {
    const double l = ce_loss(*b.id_logits, *b.id_labels, d_id ? &term_grad : nullptr);
    loss += (1.0 - cfg.alpha) * l;
    add_into(d_id, term_grad, 1.0 - cfg.alpha);
  }

  if (cfg.lambda > 0) {
    if (d_out) {
      *d_out = Tensor<S>(b.out_logits->shape);
      d_out->fill(S(0));
    }
    if (cfg.beta > 0) {
      const double l =
          distill_loss(*b.out_logits, *b.out_teacher_probs, cfg.T, d_out ? &term_grad : nullptr,
                       cfg.t2_rescale);
      loss += cfg.lambda * cfg.beta * l;
      add_into(d_out, term_grad, cfg.lambda * cfg.beta);
    }
    if (cfg.beta < 1) {
      const double l = uniform_ce_loss(*b.out_logits, d_out ? &term_grad : nullptr);
      loss += cfg.lambda * (1.0 - cfg.beta) * l;
      add_into(d_out, term_grad, cfg.lambda * (1.0 - cfg.beta));
    }
  } else if (d_out) {
    *d_out = Tensor<S>();
  }
  return loss;
}

struct EpochStat {
  int epoch = 0;
  double loss = 0;
  double id_acc = 0;
  double lr = 0;
};

struct TrainOptions {
  int batch_size = 128;
  double base_lr = 0.1;
  double momentum = 0.9;
  // When positive, a plain cross-entropy warm phase of this many epochs runs
  // before the configured objective takes over.
  int pretrain_ce_epochs = 0;
  std::array<int, 3> stage_widths = kDefaultStageWidths;
};

struct TrainData {
  const LabeledSet* id_train = nullptr;
  const LabeledSet* outliers = nullptr;
  // Teacher probability rows aligned with id_train / outliers; when absent
  // and a TeacherSet is passed, train_candidate computes them once up front.
  const Tensor<float>* id_teacher_probs = nullptr;
  const Tensor<float>* out_teacher_probs = nullptr;
};

struct TrainResult {
  Network<float> net;
  std::vector<EpochStat> curves;
};

// Tempered teacher-ensemble probabilities for a whole set, batched.
template <class S>
Tensor<S> teacher_predict_all(const TeacherSet<S>& teachers, const Tensor<S>& images, double T,
                              int batch = 256) {
  const int n = images.shape[0];
  const int64_t px = int64_t(images.shape[1]) * images.shape[2] * images.shape[3];
  Tensor<S> all;
  for (int at = 0; at < n; at += batch) {
    const int take = std::min(batch, n - at);
    Tensor<S> chunk({take, images.shape[1], images.shape[2], images.shape[3]});
    std::copy_n(images.v.begin() + int64_t(at) * px, chunk.v.size(), chunk.v.begin());
    Tensor<S> p = teacher_predict(teachers, chunk, T);
    if (at == 0) all = Tensor<S>({n, p.shape[1]});
    std::copy(p.v.begin(), p.v.end(), all.v.begin() + int64_t(at) * p.shape[1]);
  }
  return all;
}

namespace detail {

inline Tensor<float> gather_images(const Tensor<float>& images, const std::vector<int64_t>& rows,
                                   size_t at, size_t count) {
  const int64_t px = int64_t(images.shape[1]) * images.shape[2] * images.shape[3];
  Tensor<float> out({int(count), images.shape[1], images.shape[2], images.shape[3]});
  for (size_t r = 0; r < count; ++r)
    std::copy_n(images.v.begin() + rows[at + r] * px, px, out.v.begin() + int64_t(r) * px);
  return out;
}

inline Tensor<float> gather_probs(const Tensor<float>& probs, const std::vector<int64_t>& rows,
                                  size_t at, size_t count) {
  const int c = probs.shape[1];
  Tensor<float> out({int(count), c});
  for (size_t r = 0; r < count; ++r)
    std::copy_n(probs.v.begin() + rows[at + r] * c, c, out.v.begin() + int64_t(r) * c);
  return out;
}

}  // namespace detail

inline TrainResult train_candidate(const Architecture& arch, const TrainData& data,
                                   const LossConfig& cfg_in, int epochs, uint64_t seed,
                                   const TeacherSet<float>* teachers = nullptr,
                                   const TrainOptions& opt = {}) {
  const LossConfig cfg = cfg_in.normalized();
  cfg.validate();
  if (!data.id_train || data.id_train->size() == 0)
    throw config_error("train_candidate: missing id training data");
  if (cfg.needs_outliers() && (!data.outliers || data.outliers->size() == 0))
    throw config_error("train_candidate: lambda > 0 but no outlier set");
  if (epochs < 0) throw config_error("train_candidate: negative epoch count");
  if (opt.batch_size < 1) throw config_error("train_candidate: batch_size must be >= 1");
  if (cfg.mode == TrainMode::distill && cfg.needs_teacher() && !teachers &&
      !(data.id_teacher_probs || data.out_teacher_probs))
    throw config_error("train_candidate: distill mode needs a teacher set");

  const LabeledSet& id = *data.id_train;
  const int class_count = id.class_count;
  const InputSpec input{id.images.shape[1], id.images.shape[2], id.images.shape[3]};

  TrainResult result;
  result.net = compile<float>(arch, input, class_count, opt.stage_widths,
                              derive_seed(seed, {0x1217}));
  if (epochs == 0 && opt.pretrain_ce_epochs == 0) return result;

  // Resolve teacher probability tables once; they are shared across epochs.
  Tensor<float> id_probs_local, out_probs_local;
  const Tensor<float>* id_probs = data.id_teacher_probs;
  const Tensor<float>* out_probs = data.out_teacher_probs;
  if (cfg.needs_teacher()) {
    if (!id_probs && cfg.alpha > 0) {
      if (!teachers || teachers->empty())
        throw config_error("train_candidate: alpha > 0 needs teacher probabilities");
      id_probs_local = teacher_predict_all(*teachers, id.images, cfg.T);
      id_probs = &id_probs_local;
    }
    if (!out_probs && cfg.lambda > 0 && cfg.beta > 0) {
      if (!teachers || teachers->empty())
        throw config_error("train_candidate: beta > 0 needs teacher probabilities");
      out_probs_local = teacher_predict_all(*teachers, data.outliers->images, cfg.T);
      out_probs = &out_probs_local;
    }
    if (id_probs && id_probs->shape[0] != id.images.shape[0])
      throw config_error("train_candidate: id teacher table row count mismatch");
    if (out_probs && out_probs->shape[0] != data.outliers->images.shape[0])
      throw config_error("train_candidate: outlier teacher table row count mismatch");
  }

  const int64_t n_id = id.size();
  const int steps_per_epoch = int((n_id + opt.batch_size - 1) / opt.batch_size);

  struct Phase {
    LossConfig cfg;
    int epochs;
  };
  std::vector<Phase> phases;
  if (opt.pretrain_ce_epochs > 0) phases.push_back({LossConfig::ce(), opt.pretrain_ce_epochs});
  if (epochs > 0) phases.push_back({cfg, epochs});

  Workspace<float> ws;
  int epoch_counter = 0;
  for (size_t phase_index = 0; phase_index < phases.size(); ++phase_index) {
    const Phase& phase = phases[phase_index];
    Sgd<float> sgd(opt.base_lr, opt.momentum, int64_t(phase.epochs) * steps_per_epoch);

    std::vector<int64_t> id_rows(static_cast<size_t>(n_id));
    for (int64_t i = 0; i < n_id; ++i) id_rows[size_t(i)] = i;
    std::vector<int64_t> out_rows;
    size_t out_cursor = 0;
    Rng out_rng(derive_seed(seed, {0x07b, phase_index}));
    if (phase.cfg.needs_outliers()) {
      out_rows.resize(size_t(data.outliers->size()));
      for (size_t i = 0; i < out_rows.size(); ++i) out_rows[i] = int64_t(i);
      out_rng.shuffle(out_rows);
    }

    for (int e = 0; e < phase.epochs; ++e, ++epoch_counter) {
      Rng shuffle_rng(derive_seed(seed, {0x5e9, phase_index, uint64_t(e)}));
      shuffle_rng.shuffle(id_rows);

      const double epoch_lr = sgd.lr();
      double loss_sum = 0;
      int64_t correct = 0;
      for (int step = 0; step < steps_per_epoch; ++step) {
        const size_t at = size_t(step) * size_t(opt.batch_size);
        const size_t take = std::min(size_t(opt.batch_size), size_t(n_id) - at);

        Tensor<float> xb = detail::gather_images(id.images, id_rows, at, take);
        std::vector<int> yb(take);
        for (size_t r = 0; r < take; ++r) yb[r] = id.labels[size_t(id_rows[at + r])];

        auto out = result.net.forward(xb, ws);
        const Tensor<float>& logits = *out.logits;
        for (size_t r = 0; r < take; ++r) {
          int best = 0;
          for (int j = 1; j < class_count; ++j)
            if (logits.at(int(r), j) > logits.at(int(r), best)) best = j;
          if (best == yb[r]) ++correct;
        }

        CombinedBatch<float> batch;
        batch.id_logits = &logits;
        batch.id_labels = &yb;
        Tensor<float> xo, id_pt, out_pt, out_logits_copy;
        Tensor<float>* out_logits = nullptr;
        std::vector<int64_t> ob;
        if (phase.cfg.needs_outliers()) {
          ob.resize(take);
          for (size_t r = 0; r < take; ++r) {
            if (out_cursor == out_rows.size()) {
              out_rng.shuffle(out_rows);
              out_cursor = 0;
            }
            ob[r] = out_rows[out_cursor++];
          }
          xo = detail::gather_images(data.outliers->images, ob, 0, take);
          if (phase.cfg.beta > 0) out_pt = detail::gather_probs(*out_probs, ob, 0, take);
        }
        if (phase.cfg.alpha > 0) {
          id_pt = detail::gather_probs(*id_probs, id_rows, at, take);
          batch.id_teacher_probs = &id_pt;
        }

        Tensor<float> d_id, d_out;
        double loss;
        if (phase.cfg.needs_outliers()) {
          // Two forward/backward passes share the step: outlier gradient
          // first, then the id batch on the same parameters.
          Workspace<float> wso;
          auto oo = result.net.forward(xo, wso);
          out_logits_copy = *oo.logits;
          out_logits = &out_logits_copy;
          batch.out_logits = out_logits;
          if (phase.cfg.beta > 0) batch.out_teacher_probs = &out_pt;
          loss = combined_loss(batch, phase.cfg, &d_id, &d_out);
          result.net.zero_grads();
          result.net.backward(d_out, wso);
          // id forward already ran into ws; its cached activations are still
          // valid because no parameter changed in between, and backward
          // accumulates into the parameter gradients.
          result.net.backward(d_id, ws);
        } else {
          loss = combined_loss<float>(batch, phase.cfg, &d_id, nullptr);
          result.net.zero_grads();
          result.net.backward(d_id, ws);
        }
        if (!std::isfinite(loss))
          throw numeric_error("train_candidate: non-finite loss at epoch " +
                              std::to_string(epoch_counter) + " step " + std::to_string(step) +
                              " (arch " + arch_id(arch) + ")");
        loss_sum += loss;
        sgd.step(result.net.params());
      }

      EpochStat stat;
      stat.epoch = epoch_counter;
      stat.loss = loss_sum / double(steps_per_epoch);
      stat.id_acc = double(correct) / double(n_id);
      stat.lr = epoch_lr;
      result.curves.push_back(stat);
    }
  }
  return result;
}

inline std::string curves_to_csv(const std::vector<EpochStat>& curves) {
  std::string s = "epoch,loss,id_acc,lr\n";
  char line[128];
  for (const auto& c : curves) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g\n", c.epoch, c.loss, c.id_acc, c.lr);
    s += line;
  }
  return s;
}

}  // namespace dcsod
