#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dcsod/distillsearch.hpp"
#include "dcsod/optimizer.hpp"

namespace dcsod {

// Pair counts behind Kendall's tau-b, kept as exact integers so the statistic
// can be checked against a brute-force pair enumeration.
struct TauCounts {
  int64_t pairs = 0;
  int64_t concordant = 0;
  int64_t discordant = 0;
  int64_t ties_x = 0;
  int64_t ties_y = 0;
  int64_t ties_xy = 0;
};

namespace detail {

inline int64_t tie_pair_count(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  int64_t total = 0;
  size_t i = 0;
  while (i < v.size()) {
    size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    const int64_t t = int64_t(j - i);
    total += t * (t - 1) / 2;
    i = j;
  }
  return total;
}

// Inversions counted by merge sort; ties are not inversions.
inline int64_t count_inversions(std::vector<double>& v, std::vector<double>& tmp, size_t lo,
                                size_t hi) {
  if (hi - lo < 2) return 0;
  const size_t mid = lo + (hi - lo) / 2;
  int64_t inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
  size_t a = lo, b = mid, out = lo;
  while (a < mid && b < hi) {
    if (v[b] < v[a]) {
      inv += int64_t(mid - a);
      tmp[out++] = v[b++];
    } else {
      tmp[out++] = v[a++];
    }
  }
  while (a < mid) tmp[out++] = v[a++];
  while (b < hi) tmp[out++] = v[b++];
  std::copy(tmp.begin() + int64_t(lo), tmp.begin() + int64_t(hi), v.begin() + int64_t(lo));
  return inv;
}

}  // namespace detail

inline TauCounts tau_counts(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw config_error("kendall_tau needs equal-length inputs");
  if (x.size() < 2) throw config_error("kendall_tau needs at least 2 points");
  for (size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
      throw config_error("kendall_tau needs finite inputs");

  const size_t n = x.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (x[a] != x[b]) return x[a] < x[b];
    return y[a] < y[b];
  });

  TauCounts c;
  c.pairs = int64_t(n) * int64_t(n - 1) / 2;

  // Tie pairs in x and joint tie pairs, from the (x, y)-sorted order.
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && x[idx[j]] == x[idx[i]]) ++j;
    const int64_t t = int64_t(j - i);
    c.ties_x += t * (t - 1) / 2;
    size_t a = i;
    while (a < j) {
      size_t b = a;
      while (b < j && y[idx[b]] == y[idx[a]]) ++b;
      const int64_t u = int64_t(b - a);
      c.ties_xy += u * (u - 1) / 2;
      a = b;
    }
    i = j;
  }

  std::vector<double> ys(n);
  for (size_t r = 0; r < n; ++r) ys[r] = y[idx[r]];
  c.ties_y = detail::tie_pair_count(ys);

  // Within an x-tie block ys is sorted, so every counted inversion has
  // strictly increasing x and strictly decreasing y: a discordant pair.
  std::vector<double> tmp(n);
  c.discordant = detail::count_inversions(ys, tmp, 0, n);
  c.concordant = c.pairs - c.ties_x - c.ties_y + c.ties_xy - c.discordant;
  return c;
}

inline double tau_from_counts(const TauCounts& c) {
  const int64_t dx = c.pairs - c.ties_x;
  const int64_t dy = c.pairs - c.ties_y;
  if (dx == 0 || dy == 0) throw config_error("kendall_tau needs variation in both inputs");
  return double(c.concordant - c.discordant) / std::sqrt(double(dx) * double(dy));
}

// Tie-corrected tau-b.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  return tau_from_counts(tau_counts(x, y));
}

inline double pearson_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw config_error("pearson_rho needs equal-length inputs");
  if (x.size() < 2) throw config_error("pearson_rho needs at least 2 points");
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
      throw config_error("pearson_rho needs finite inputs");
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw config_error("pearson_rho needs variance in both inputs");
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

// Mean hinge over ordered pairs (y_i > y_j): max(0, m - (p_i - p_j)).
inline double pairwise_hinge_loss(const std::vector<double>& preds,
                                  const std::vector<double>& labels, double margin) {
  if (preds.size() != labels.size())
    throw config_error("pairwise_hinge_loss needs equal-length inputs");
  double total = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    for (size_t j = 0; j < preds.size(); ++j) {
      if (!(labels[i] > labels[j])) continue;
      ++pairs;
      total += std::max(0.0, margin - (preds[i] - preds[j]));
    }
  if (pairs == 0) throw config_error("pairwise_hinge_loss needs at least one ordered pair");
  return total / double(pairs);
}

struct PredictorModel {
  Network<float> net;
  int input_len = 0;
  std::array<int, 2> hidden{128, 64};
};

inline PredictorModel make_predictor_model(int input_len, std::array<int, 2> hidden,
                                           uint64_t seed = 1) {
  if (input_len < 1) throw config_error("predictor input length must be >= 1");
  if (hidden[0] < 1 || hidden[1] < 1) throw config_error("predictor hidden widths must be >= 1");
  PredictorModel m;
  m.input_len = input_len;
  m.hidden = hidden;
  int node = m.net.add_input();
  node = m.net.linear(node, "fc1", input_len, hidden[0]);
  node = m.net.relu(node);
  node = m.net.linear(node, "fc2", hidden[0], hidden[1]);
  node = m.net.relu(node);
  node = m.net.linear(node, "out", hidden[1], 1);
  m.net.mark_logits(node);
  m.net.init_params(seed);
  // A zero output layer and slightly positive biases make the first steps
  // grow the target signal instead of fighting a large random init.
  for (Param<float>& p : m.net.params()) {
    if (p.name == "out.w") p.value.fill(0.f);
    if (p.name == "fc1.b" || p.name == "fc2.b") p.value.fill(0.01f);
  }
  return m;
}

namespace detail {

inline Tensor<float> encode_rows(const std::vector<ArchEncoding>& encs, int input_len) {
  Tensor<float> t({int(encs.size()), input_len});
  for (size_t r = 0; r < encs.size(); ++r) {
    if (int(encs[r].size()) != input_len)
      throw config_error("encoding length " + std::to_string(encs[r].size()) +
                         " does not match predictor input " + std::to_string(input_len));
    for (int b = 0; b < input_len; ++b) {
      const char ch = encs[r][size_t(b)];
      if (ch != '0' && ch != '1') throw config_error("encodings must be 0/1 strings");
      // Centered bits keep the first linear layer well conditioned.
      t.v[r * size_t(input_len) + size_t(b)] = ch == '1' ? 1.f : -1.f;
    }
  }
  return t;
}

}  // namespace detail

// One row per forward pass: gemm rounding depends on the batch dimension, and
// scores must not change with how callers group their queries.
inline std::vector<double> predict_batch(const PredictorModel& model,
                                         const std::vector<ArchEncoding>& encs) {
  if (encs.empty()) throw config_error("predict_batch needs at least one encoding");
  Tensor<float> all = detail::encode_rows(encs, model.input_len);
  Workspace<float> ws;
  Tensor<float> row({1, model.input_len});
  std::vector<double> out(encs.size());
  for (size_t i = 0; i < encs.size(); ++i) {
    std::copy_n(all.v.begin() + ptrdiff_t(i) * model.input_len, model.input_len,
                row.v.begin());
    auto fw = model.net.forward(row, ws);
    out[i] = double(fw.logits->v[0]);
  }
  return out;
}

inline double predict(const PredictorModel& model, const ArchEncoding& enc) {
  return predict_batch(model, {enc})[0];
}

struct PredictorHyper {
  std::array<int, 2> hidden{128, 64};
  int epochs = 400;
  int batch_size = 16;
  double base_lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 3e-3;
  double margin = 0.01;
  int max_pairs_per_epoch = 50000;
};

struct PredictorMetrics {
  double tau = 0;
  double rho = 0;
  double mse = 0;
  int train_rows = 0;
  int test_rows = 0;
};

struct FitResult {
  PredictorModel model;
  PredictorMetrics metrics;
};

// MSE plus a pairwise hinge over same-batch rows with a higher label. Random
// batching makes the batch-pair union an unbiased per-epoch subsample of all
// ordered pairs, capped at max_pairs_per_epoch. Labels are standardized for
// training and the affine map is folded back into the output layer, so the
// returned model predicts in label units.
inline FitResult fit_predictor(const std::vector<PredictorRow>& rows, double split_fraction,
                               const PredictorHyper& hyper, uint64_t seed) {
  if (rows.size() < 10) throw config_error("fit_predictor needs at least 10 rows");
  if (!(split_fraction > 0 && split_fraction < 1))
    throw config_error("split_fraction must be in (0,1)");
  if (hyper.epochs < 1) throw config_error("fit_predictor needs epochs >= 1");
  if (hyper.batch_size < 2) throw config_error("fit_predictor needs batch_size >= 2");
  if (hyper.margin < 0) throw config_error("ranking margin must be >= 0");
  if (hyper.weight_decay < 0) throw config_error("weight_decay must be >= 0");
  if (hyper.max_pairs_per_epoch < 1) throw config_error("max_pairs_per_epoch must be >= 1");

  const int n = int(rows.size());
  const int input_len = int(rows[0].encoding.size());

  bool varied = false;
  std::set<ArchEncoding> distinct;
  for (const PredictorRow& r : rows) {
    if (r.auroc != rows[0].auroc) varied = true;
    if (!distinct.insert(r.encoding).second)
      throw config_error("duplicate encoding in predictor dataset: " + r.encoding);
  }
  if (!varied) throw config_error("all labels are equal: ranking loss is undefined");

  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), size_t(0));
  Rng split_rng(derive_seed(seed, {0xf17}));
  split_rng.shuffle(order);
  int n_train = int(std::llround(split_fraction * double(n)));
  n_train = std::clamp(n_train, 2, n - 2);

  std::vector<ArchEncoding> train_encs, test_encs;
  std::vector<double> train_y, test_y;
  for (int i = 0; i < n; ++i) {
    const PredictorRow& r = rows[order[size_t(i)]];
    if (i < n_train) {
      train_encs.push_back(r.encoding);
      train_y.push_back(r.auroc);
    } else {
      test_encs.push_back(r.encoding);
      test_y.push_back(r.auroc);
    }
  }
  // Held-out metrics must never touch training rows.
  const std::set<ArchEncoding> train_set(train_encs.begin(), train_encs.end());
  for (const ArchEncoding& e : test_encs)
    if (train_set.count(e)) throw internal_error("train/test split overlaps");

  bool train_varied = false;
  for (double v : train_y)
    if (v != train_y[0]) train_varied = true;
  if (!train_varied)
    throw config_error("training split has equal labels everywhere: ranking loss is undefined");

  double label_mu = 0, label_sd = 0;
  for (double v : train_y) label_mu += v;
  label_mu /= double(n_train);
  for (double v : train_y) label_sd += (v - label_mu) * (v - label_mu);
  label_sd = std::sqrt(label_sd / double(n_train));
  std::vector<double> std_y(train_y);
  for (double& v : std_y) v = (v - label_mu) / label_sd;
  const double margin = hyper.margin / label_sd;

  FitResult res;
  res.model = make_predictor_model(input_len, hyper.hidden, derive_seed(seed, {0xf18}));
  Network<float>& net = res.model.net;
  Tensor<float> train_in = detail::encode_rows(train_encs, input_len);

  const int batch = std::min(hyper.batch_size, n_train);
  const int steps_per_epoch = (n_train + batch - 1) / batch;
  Sgd<float> opt(hyper.base_lr, hyper.momentum, hyper.epochs * steps_per_epoch);
  Workspace<float> ws;
  std::vector<int> row_order(static_cast<size_t>(n_train));
  std::iota(row_order.begin(), row_order.end(), 0);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng rng(derive_seed(seed, {0xf19, uint64_t(epoch)}));
    rng.shuffle(row_order);
    int64_t pair_budget = hyper.max_pairs_per_epoch;
    for (int at = 0; at < n_train; at += batch) {
      const int take = std::min(batch, n_train - at);
      Tensor<float> in({take, input_len});
      for (int r = 0; r < take; ++r)
        std::copy_n(train_in.v.begin() + int64_t(row_order[size_t(at + r)]) * input_len, input_len,
                    in.v.begin() + int64_t(r) * input_len);

      auto fw = net.forward(in, ws);
      const Tensor<float>& pred = *fw.logits;
      Tensor<float> dlogits({take, 1});
      for (int i = 0; i < take; ++i)
        dlogits.v[size_t(i)] = 2.f *
                               (pred.v[size_t(i)] - float(std_y[size_t(row_order[size_t(at + i)])])) /
                               float(take);

      std::vector<std::pair<int, int>> batch_pairs;
      for (int i = 0; i < take; ++i)
        for (int j = 0; j < take; ++j)
          if (std_y[size_t(row_order[size_t(at + i)])] > std_y[size_t(row_order[size_t(at + j)])])
            batch_pairs.emplace_back(i, j);
      size_t used = batch_pairs.size();
      if (int64_t(used) > pair_budget) {
        used = size_t(std::max<int64_t>(pair_budget, 0));
        for (size_t i = 0; i < used; ++i) {
          const size_t pick = i + size_t(rng.below(uint64_t(batch_pairs.size() - i)));
          std::swap(batch_pairs[i], batch_pairs[pick]);
        }
      }
      pair_budget -= int64_t(used);
      if (used > 0) {
        const float w = 1.f / float(used);
        for (size_t p = 0; p < used; ++p) {
          const auto [hi, lo] = batch_pairs[p];
          if (double(pred.v[size_t(hi)]) - double(pred.v[size_t(lo)]) < margin) {
            dlogits.v[size_t(hi)] -= w;
            dlogits.v[size_t(lo)] += w;
          }
        }
      }
      // A bounded driving gradient keeps one bad step from killing the relus.
      for (float& g : dlogits.v) g = std::clamp(g, -0.5f, 0.5f);

      net.zero_grads();
      net.backward(dlogits, ws);
      if (hyper.weight_decay > 0)
        for (Param<float>& p : net.params())
          for (size_t j = 0; j < p.grad.v.size(); ++j)
            p.grad.v[j] += float(hyper.weight_decay) * p.value.v[j];
      opt.step(net.params());
    }
  }

  // Fold the label standardization into the head: w*sd, b*sd + mu.
  for (Param<float>& p : net.params()) {
    if (p.name == "out.w")
      for (float& v : p.value.v) v *= float(label_sd);
    if (p.name == "out.b") p.value.v[0] = float(double(p.value.v[0]) * label_sd + label_mu);
  }

  auto preds = predict_batch(res.model, test_encs);
  res.metrics.tau = kendall_tau(preds, test_y);
  res.metrics.rho = pearson_rho(preds, test_y);
  double se = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    se += (preds[i] - test_y[i]) * (preds[i] - test_y[i]);
  res.metrics.mse = se / double(preds.size());
  res.metrics.train_rows = n_train;
  res.metrics.test_rows = n - n_train;
  return res;
}

inline void save_predictor(const PredictorModel& model, const std::string& path) {
  save_checkpoint(model.net, path);
}

// The checkpoint header carries every layer shape, so the model geometry is
// recovered from the file itself.
inline PredictorModel load_predictor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw prereq_error("missing predictor checkpoint: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1u << 20)) throw prereq_error("corrupt predictor checkpoint: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), std::streamsize(hlen));
  if (!f) throw prereq_error("truncated predictor checkpoint: " + path);
  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  if (header.is_discarded()) throw prereq_error("corrupt predictor checkpoint: " + path);

  int input_len = -1;
  std::array<int, 2> hidden{-1, -1};
  for (const auto& e : header.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<int>>();
    if (name == "fc1.w" && shape.size() == 2) {
      hidden[0] = shape[0];
      input_len = shape[1];
    } else if (name == "fc2.w" && shape.size() == 2) {
      hidden[1] = shape[0];
    }
  }
  if (input_len < 1 || hidden[0] < 1 || hidden[1] < 1)
    throw prereq_error("checkpoint does not hold a predictor model: " + path);
  PredictorModel m = make_predictor_model(input_len, hidden);
  load_checkpoint(m.net, path);
  return m;
}

}  // namespace dcsod
