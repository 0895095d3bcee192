#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcsod/databench.hpp"
#include "dcsod/parallel.hpp"
#include "dcsod/training.hpp"

namespace dcsod {

enum class ScoreMethod { msp, energy, maha };

inline const char* method_name(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::msp: return "msp";
    case ScoreMethod::energy: return "energy";
    case ScoreMethod::maha: return "maha";
  }
  return "?";
}

inline ScoreMethod method_from_name(const std::string& s) {
  if (s == "msp") return ScoreMethod::msp;
  if (s == "energy") return ScoreMethod::energy;
  if (s == "maha") return ScoreMethod::maha;
  throw config_error("unknown score method: " + s);
}

// Larger score = more in-distribution, for every method.

template <class S>
std::vector<double> msp_score(const Tensor<S>& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double m = double(logits.at(i, 0));
    for (int j = 1; j < c; ++j) m = std::max(m, double(logits.at(i, j)));
    double denom = 0;
    for (int j = 0; j < c; ++j) denom += std::exp(double(logits.at(i, j)) - m);
    out[size_t(i)] = 1.0 / denom;
  }
  return out;
}

template <class S>
std::vector<double> energy_score(const Tensor<S>& logits, double T = 1.0) {
  if (!(T > 0)) throw config_error("energy_score temperature must be > 0");
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double m = double(logits.at(i, 0));
    for (int j = 1; j < c; ++j) m = std::max(m, double(logits.at(i, j)));
    double sum = 0;
    for (int j = 0; j < c; ++j) sum += std::exp((double(logits.at(i, j)) - m) / T);
    out[size_t(i)] = T * std::log(sum) + m;
  }
  return out;
}

namespace detail {

// Dense lower-triangular Cholesky, row major.
inline std::vector<double> cholesky(const std::vector<double>& a, int n) {
  std::vector<double> l(size_t(n) * size_t(n), 0.0);
  for (int j = 0; j < n; ++j) {
    double d = a[size_t(j) * n + j];
    for (int k = 0; k < j; ++k) d -= l[size_t(j) * n + k] * l[size_t(j) * n + k];
    if (!(d > 0) || !std::isfinite(d))
      throw numeric_error("covariance not positive definite after ridge");
    const double root = std::sqrt(d);
    l[size_t(j) * n + j] = root;
    for (int i = j + 1; i < n; ++i) {
      double s = a[size_t(i) * n + j];
      for (int k = 0; k < j; ++k) s -= l[size_t(i) * n + k] * l[size_t(j) * n + k];
      l[size_t(i) * n + j] = s / root;
    }
  }
  return l;
}

// Inverse of a symmetric positive definite matrix from its Cholesky factor:
// X = L^-1 by forward substitution, then A^-1 = X^T X.
inline std::vector<double> spd_inverse(const std::vector<double>& l, int n) {
  std::vector<double> x(size_t(n) * size_t(n), 0.0);
  for (int col = 0; col < n; ++col) {
    for (int i = col; i < n; ++i) {
      double s = i == col ? 1.0 : 0.0;
      for (int k = col; k < i; ++k) s -= l[size_t(i) * n + k] * x[size_t(k) * n + col];
      x[size_t(i) * n + col] = s / l[size_t(i) * n + i];
    }
  }
  std::vector<double> inv(size_t(n) * size_t(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = std::max(i, j); k < n; ++k)
        s += x[size_t(k) * n + i] * x[size_t(k) * n + j];
      inv[size_t(i) * n + j] = s;
    }
  return inv;
}

}  // namespace detail

struct GaussianHead {
  int dim = 0;
  int class_count = 0;
  std::vector<std::vector<double>> means;
  std::vector<double> cov;
  std::vector<double> cov_inv;
};

template <class S>
GaussianHead fit_gaussian_head(const Tensor<S>& features, const std::vector<int>& labels,
                               double eps = 1e-3) {
  if (!(eps > 0)) throw config_error("gaussian head ridge must be > 0");
  const int n = features.dim(0), d = features.dim(1);
  if (size_t(n) != labels.size())
    throw config_error("gaussian head: label count does not match feature rows");
  check_finite(features.v.data(), features.v.size(), "gaussian head features");
  int classes = 0;
  for (int l : labels) {
    if (l < 0) throw config_error("gaussian head: negative label");
    classes = std::max(classes, l + 1);
  }
  std::vector<int> counts(size_t(classes), 0);
  for (int l : labels) ++counts[size_t(l)];
  for (int c = 0; c < classes; ++c)
    if (counts[size_t(c)] < 2)
      throw config_error("gaussian head: class " + std::to_string(c) +
                         " has fewer than 2 samples");

  GaussianHead head;
  head.dim = d;
  head.class_count = classes;
  head.means.assign(size_t(classes), std::vector<double>(size_t(d), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      head.means[size_t(labels[size_t(i)])][size_t(j)] += double(features.at(i, j));
  for (int c = 0; c < classes; ++c)
    for (double& v : head.means[size_t(c)]) v /= double(counts[size_t(c)]);

  head.cov.assign(size_t(d) * size_t(d), 0.0);
  std::vector<double> diff(static_cast<size_t>(d));
  for (int i = 0; i < n; ++i) {
    const auto& mu = head.means[size_t(labels[size_t(i)])];
    for (int j = 0; j < d; ++j) diff[size_t(j)] = double(features.at(i, j)) - mu[size_t(j)];
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b) head.cov[size_t(a) * d + b] += diff[size_t(a)] * diff[size_t(b)];
  }
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      double v = head.cov[size_t(a) * d + b] / double(n);
      if (a == b) v += eps;
      head.cov[size_t(a) * d + b] = v;
      head.cov[size_t(b) * d + a] = v;
    }
  head.cov_inv = detail::spd_inverse(detail::cholesky(head.cov, d), d);
  return head;
}

template <class S>
std::vector<double> maha_score(const GaussianHead& head, const Tensor<S>& features) {
  const int n = features.dim(0), d = features.dim(1);
  if (d != head.dim) throw config_error("maha_score: feature width does not match head");
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<double> diff(static_cast<size_t>(d));
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < head.class_count; ++c) {
      const auto& mu = head.means[size_t(c)];
      for (int j = 0; j < d; ++j) diff[size_t(j)] = double(features.at(i, j)) - mu[size_t(j)];
      double q = 0;
      for (int a = 0; a < d; ++a) {
        const double* row = head.cov_inv.data() + size_t(a) * d;
        double s = 0;
        for (int b = 0; b < d; ++b) s += row[b] * diff[size_t(b)];
        q += diff[size_t(a)] * s;
      }
      best = std::min(best, q);
    }
    out[size_t(i)] = -best;
  }
  return out;
}

// Mann-Whitney pair counts; exact integers so tie handling is bit-stable.
struct AurocCounts {
  int64_t greater = 0;
  int64_t ties = 0;
  int64_t pairs = 0;

  double value() const { return double(2 * greater + ties) / double(2 * pairs); }
};

inline AurocCounts auroc_counts(std::vector<double> id_scores, std::vector<double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty())
    throw config_error("auroc needs non-empty score sets");
  check_finite(id_scores.data(), id_scores.size(), "id scores");
  check_finite(ood_scores.data(), ood_scores.size(), "ood scores");
  std::sort(id_scores.begin(), id_scores.end());
  std::sort(ood_scores.begin(), ood_scores.end());
  AurocCounts c;
  c.pairs = int64_t(id_scores.size()) * int64_t(ood_scores.size());
  size_t less = 0, leq = 0;
  for (double v : id_scores) {
    while (less < ood_scores.size() && ood_scores[less] < v) ++less;
    while (leq < ood_scores.size() && ood_scores[leq] <= v) ++leq;
    c.greater += int64_t(less);
    c.ties += int64_t(leq - less);
  }
  return c;
}

inline double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
  return auroc_counts(id_scores, ood_scores).value();
}

// Captures normalization statistics from the first samples of a set so the
// network becomes a pure per-sample function before scoring.
inline void freeze_on_reference(Network<float>& net, const LabeledSet& set, int reference = 128) {
  if (reference < 1) throw config_error("freeze reference size must be >= 1");
  const int n = int(std::min<int64_t>(reference, set.size()));
  Tensor<float> ref({n, set.images.dim(1), set.images.dim(2), set.images.dim(3)});
  std::copy_n(set.images.v.begin(), ref.v.size(), ref.v.begin());
  Workspace<float> ws;
  net.freeze_normalization(ref, ws);
}

namespace detail {

template <class S>
void forward_collect(const Network<S>& net, const Tensor<S>& images, int batch,
                     Tensor<S>* logits_out, Tensor<S>* features_out) {
  const int n = images.dim(0);
  const int64_t px = int64_t(images.dim(1)) * images.dim(2) * images.dim(3);
  Workspace<S> ws;
  for (int at = 0; at < n; at += batch) {
    const int take = std::min(batch, n - at);
    Tensor<S> chunk({take, images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.v.begin() + size_t(at) * size_t(px), chunk.v.size(), chunk.v.begin());
    auto out = net.forward(chunk, ws);
    if (features_out && !out.features)
      throw prereq_error("network exposes no feature node for Mahalanobis scoring");
    auto append = [&](Tensor<S>* dst, const Tensor<S>& src) {
      if (!dst) return;
      if (dst->v.empty()) {
        *dst = Tensor<S>({n, src.dim(1)});
        dst->fill(S(0));
      }
      std::copy_n(src.v.begin(), src.v.size(), dst->v.begin() + size_t(at) * size_t(src.dim(1)));
    };
    append(logits_out, *out.logits);
    if (features_out) append(features_out, *out.features);
  }
}

inline double argmax_accuracy(const Tensor<float>& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), c = logits.dim(1);
  int64_t correct = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (best == labels[size_t(i)]) ++correct;
  }
  return double(correct) / double(n);
}

}  // namespace detail

struct EvalOptions {
  std::vector<ScoreMethod> methods{ScoreMethod::msp, ScoreMethod::energy};
  // false: score id_val against ood_test (search-time); true: id_test.
  bool use_test_split = false;
  double energy_T = 1.0;
  double maha_eps = 1e-3;
  int batch = 256;
};

struct EvalRecord {
  double id_acc = 0;
  std::vector<std::pair<ScoreMethod, double>> aurocs;

  double auroc_for(ScoreMethod m) const {
    for (const auto& [method, v] : aurocs)
      if (method == m) return v;
    throw config_error(std::string("no auroc computed for method ") + method_name(m));
  }
};

inline EvalRecord evaluate(const Network<float>& net, const Benchmark& bench,
                           const EvalOptions& opts = {}) {
  if (opts.methods.empty()) throw config_error("evaluate: no score methods requested");
  if (net.has_normalization() && !net.frozen())
    throw prereq_error("evaluate needs frozen normalization statistics");

  const LabeledSet& id_set = opts.use_test_split ? bench.id_test : bench.id_val;
  const bool want_maha =
      std::find(opts.methods.begin(), opts.methods.end(), ScoreMethod::maha) !=
      opts.methods.end();

  Tensor<float> id_logits, id_features, ood_logits, ood_features;
  detail::forward_collect(net, id_set.images, opts.batch, &id_logits,
                          want_maha ? &id_features : nullptr);
  detail::forward_collect(net, bench.ood_test.images, opts.batch, &ood_logits,
                          want_maha ? &ood_features : nullptr);

  GaussianHead head;
  if (want_maha) {
    Tensor<float> train_features;
    detail::forward_collect<float>(net, bench.id_train.images, opts.batch, nullptr,
                                   &train_features);
    head = fit_gaussian_head(train_features, bench.id_train.labels, opts.maha_eps);
  }

  EvalRecord rec;
  rec.id_acc = detail::argmax_accuracy(id_logits, id_set.labels);
  for (ScoreMethod m : opts.methods) {
    std::vector<double> id_s, ood_s;
    switch (m) {
      case ScoreMethod::msp:
        id_s = msp_score(id_logits);
        ood_s = msp_score(ood_logits);
        break;
      case ScoreMethod::energy:
        id_s = energy_score(id_logits, opts.energy_T);
        ood_s = energy_score(ood_logits, opts.energy_T);
        break;
      case ScoreMethod::maha:
        id_s = maha_score(head, id_features);
        ood_s = maha_score(head, ood_features);
        break;
    }
    rec.aurocs.emplace_back(m, auroc(id_s, ood_s));
  }
  return rec;
}

struct VarianceStudyConfig {
  std::vector<ScoreMethod> methods{ScoreMethod::msp};
  int epochs = 1;
  TrainOptions train;
  LossConfig ce_cfg = LossConfig::ce();
  LossConfig oe_cfg = LossConfig::oe();
  LossConfig distill_cfg = LossConfig::distill();
  const TeacherSet<float>* teachers = nullptr;
  bool use_test_split = false;
  double energy_T = 1.0;
  double maha_eps = 1e-3;
  int freeze_reference = 128;
  int workers = 1;
};

struct VarianceRow {
  std::string arch_id;
  TrainMode mode = TrainMode::ce;
  // (method name, (mean, std)) in the requested method order, then id_acc;
  // std is the population form, so a single seed reports 0.
  std::vector<std::pair<std::string, std::pair<double, double>>> stats;
};

inline std::vector<VarianceRow> variance_study(const std::vector<Architecture>& archs,
                                               const std::vector<uint64_t>& seeds,
                                               const std::vector<TrainMode>& modes,
                                               const Benchmark& bench,
                                               const VarianceStudyConfig& cfg) {
  if (archs.empty()) throw config_error("variance_study: no architectures");
  if (seeds.empty()) throw config_error("variance_study: no seeds");
  if (modes.empty()) throw config_error("variance_study: no modes");
  const bool has_distill =
      std::find(modes.begin(), modes.end(), TrainMode::distill) != modes.end();
  if (has_distill && (!cfg.teachers || cfg.teachers->empty()))
    throw config_error("variance_study: distill mode needs a teacher set");

  TrainData data;
  data.id_train = &bench.id_train;
  data.outliers = &bench.aux_outlier;
  Tensor<float> id_pt, out_pt;
  if (has_distill) {
    id_pt = teacher_predict_all(*cfg.teachers, bench.id_train.images, cfg.distill_cfg.T);
    out_pt = teacher_predict_all(*cfg.teachers, bench.aux_outlier.images, cfg.distill_cfg.T);
    data.id_teacher_probs = &id_pt;
    data.out_teacher_probs = &out_pt;
  }

  EvalOptions eval_opts;
  eval_opts.methods = cfg.methods;
  eval_opts.use_test_split = cfg.use_test_split;
  eval_opts.energy_T = cfg.energy_T;
  eval_opts.maha_eps = cfg.maha_eps;

  const int per_row = int(seeds.size());
  const int row_count = int(archs.size()) * int(modes.size());
  std::vector<EvalRecord> results(size_t(row_count) * size_t(per_row));
  parallel_for_ordered(int(results.size()), cfg.workers, [&](int t) {
    const int row = t / per_row;
    const int si = t % per_row;
    const Architecture& arch = archs[size_t(row) / modes.size()];
    const TrainMode mode = modes[size_t(row) % modes.size()];
    const LossConfig& lc = mode == TrainMode::ce      ? cfg.ce_cfg
                           : mode == TrainMode::oe    ? cfg.oe_cfg
                                                      : cfg.distill_cfg;
    auto r = train_candidate(arch, data, lc, cfg.epochs, seeds[size_t(si)],
                             mode == TrainMode::distill ? cfg.teachers : nullptr, cfg.train);
    freeze_on_reference(r.net, bench.id_train, cfg.freeze_reference);
    results[size_t(t)] = evaluate(r.net, bench, eval_opts);
  });

  std::vector<VarianceRow> rows(static_cast<size_t>(row_count));
  for (int row = 0; row < row_count; ++row) {
    VarianceRow& vr = rows[size_t(row)];
    vr.arch_id = arch_id(archs[size_t(row) / modes.size()]);
    vr.mode = modes[size_t(row) % modes.size()];
    auto stat = [&](auto&& get) {
      double mean = 0;
      for (int s = 0; s < per_row; ++s) mean += get(results[size_t(row * per_row + s)]);
      mean /= per_row;
      double var = 0;
      for (int s = 0; s < per_row; ++s) {
        const double d = get(results[size_t(row * per_row + s)]) - mean;
        var += d * d;
      }
      return std::make_pair(mean, std::sqrt(var / per_row));
    };
    for (size_t mi = 0; mi < cfg.methods.size(); ++mi)
      vr.stats.emplace_back(method_name(cfg.methods[mi]),
                            stat([&](const EvalRecord& r) { return r.aurocs[mi].second; }));
    vr.stats.emplace_back("id_acc", stat([](const EvalRecord& r) { return r.id_acc; }));
  }
  return rows;
}

inline std::string variance_to_csv(const std::vector<VarianceRow>& rows) {
  std::string out = "arch_id,mode,method,mean,std\n";
  for (const VarianceRow& r : rows)
    for (const auto& [method, ms] : r.stats) {
      out += r.arch_id;
      out += ',';
      out += mode_name(r.mode);
      out += ',';
      out += method;
      out += ',';
      out += fmt_g(ms.first);
      out += ',';
      out += fmt_g(ms.second);
      out += '\n';
    }
  return out;
}

}  // namespace dcsod
