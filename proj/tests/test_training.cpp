#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "dcsod/training.hpp"
#include "support/gradcheck.hpp"

using namespace dcsod;
using testsupport::random_input;

namespace {

Tensor<double> random_simplex_rows(int n, int c, Rng& rng) {
  Tensor<double> t({n, c});
  for (int i = 0; i < n; ++i) {
    double sum = 0;
    for (int j = 0; j < c; ++j) {
      t.at(i, j) = 0.05 + rng.uniform();
      sum += t.at(i, j);
    }
    for (int j = 0; j < c; ++j) t.at(i, j) /= sum;
  }
  return t;
}

// Builds a network whose logits are a constant row regardless of the input.
Network<float> constant_logit_net(std::vector<float> bias) {
  Network<float> net;
  int node = net.add_input();
  node = net.global_avg_pool(node);
  node = net.linear(node, "head", 1, int(bias.size()));
  net.mark_logits(node);
  net.init_params(1);
  net.params()[0].value.fill(0.f);
  net.params()[1].value.v = std::move(bias);
  return net;
}

BenchmarkSpec tiny_bench_spec(int train, int val, int aux) {
  BenchmarkSpec s = BenchmarkSpec::defaults();
  s.id_train_size = train;
  s.id_val_size = val;
  s.id_test_size = val;
  s.ood_test_size = val;
  s.aux_size = aux;
  return s;
}

double val_accuracy(const Network<float>& net, const LabeledSet& set) {
  Workspace<float> ws;
  auto out = net.forward(set.images, ws);
  int64_t correct = 0;
  for (int64_t i = 0; i < set.size(); ++i) {
    int best = 0;
    for (int j = 1; j < set.class_count; ++j)
      if (out.logits->at(int(i), j) > out.logits->at(int(i), best)) best = j;
    if (best == set.labels[size_t(i)]) ++correct;
  }
  return double(correct) / double(set.size());
}

}  // namespace

TEST_CASE("loss config validation") {
  LossConfig d = LossConfig::distill();
  REQUIRE_NOTHROW(d.validate());
  REQUIRE(d.lambda == 0.5);
  REQUIRE(d.T == 20.0);

  LossConfig ce = LossConfig::ce();
  REQUIRE(ce.lambda == 0.0);
  REQUIRE(ce.alpha == 0.0);
  REQUIRE_NOTHROW(ce.validate());

  LossConfig oe = LossConfig::oe();
  REQUIRE(oe.alpha == 0.0);
  REQUIRE(oe.beta == 0.0);
  REQUIRE(oe.lambda == 0.5);

  LossConfig bad = LossConfig::distill();
  bad.lambda = -0.1;
  REQUIRE_THROWS_AS(bad.validate(), Error);
  bad = LossConfig::distill();
  bad.alpha = 1.5;
  REQUIRE_THROWS_AS(bad.validate(), Error);
  bad = LossConfig::distill();
  bad.T = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), Error);

  // mode pins: a ce config carrying distillation weight is inconsistent
  // until normalized.
  LossConfig mixed;
  mixed.mode = TrainMode::ce;
  mixed.lambda = 0.5;
  mixed.alpha = 0.3;
  REQUIRE_THROWS_AS(mixed.validate(), Error);
  REQUIRE_NOTHROW(mixed.normalized().validate());
  REQUIRE(mixed.normalized().lambda == 0.0);

  LossConfig oe_mixed;
  oe_mixed.mode = TrainMode::oe;
  oe_mixed.beta = 0.2;
  REQUIRE_THROWS_AS(oe_mixed.validate(), Error);
  REQUIRE(oe_mixed.normalized().beta == 0.0);
}

TEST_CASE("cross entropy closed forms and gradient") {
  Tensor<double> z({1, 6});
  z.fill(0.7);
  std::vector<int> y{3};
  REQUIRE(ce_loss(z, y) == Catch::Approx(std::log(6.0)).margin(1e-12));
  REQUIRE(uniform_ce_loss(z) == Catch::Approx(std::log(6.0)).margin(1e-12));

  Tensor<double> dom({1, 2});
  dom.v = {50.0, 0.0};
  REQUIRE(ce_loss(dom, std::vector<int>{0}) <= 1e-12);

  Tensor<double> two({1, 2});
  two.v = {2.0, 0.0};
  REQUIRE(ce_loss(two, std::vector<int>{0}) ==
          Catch::Approx(std::log(1.0 + std::exp(-2.0))).margin(1e-12));

  REQUIRE_THROWS_AS(ce_loss(two, std::vector<int>{2}), Error);
  REQUIRE_THROWS_AS(ce_loss(two, std::vector<int>{-1}), Error);

  // Gradients against central differences, and each row's gradient sums to 0
  // for ce (softmax minus one-hot).
  Rng rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 1 + int(rng.below(4)), c = 2 + int(rng.below(5));
    Tensor<double> logits({n, c});
    for (auto& v : logits.v) v = rng.normal() * 2.0;
    std::vector<int> labels(static_cast<size_t>(n));
    for (auto& l : labels) l = int(rng.below(uint64_t(c)));

    for (int which = 0; which < 2; ++which) {
      Tensor<double> grad;
      const double base = which == 0 ? ce_loss(logits, labels, &grad)
                                     : uniform_ce_loss(logits, &grad);
      REQUIRE(std::isfinite(base));
      const double h = 1e-6;
      for (size_t i = 0; i < logits.v.size(); ++i) {
        const double saved = logits.v[i];
        logits.v[i] = saved + h;
        const double lp = which == 0 ? ce_loss(logits, labels) : uniform_ce_loss(logits);
        logits.v[i] = saved - h;
        const double lm = which == 0 ? ce_loss(logits, labels) : uniform_ce_loss(logits);
        logits.v[i] = saved;
        const double fd = (lp - lm) / (2 * h);
        REQUIRE(std::fabs(fd - grad.v[i]) <= 1e-7 * std::max(1.0, std::fabs(fd)));
      }
      for (int i = 0; i < n; ++i) {
        double row = 0;
        for (int j = 0; j < c; ++j) row += grad.at(i, j);
        REQUIRE(std::fabs(row) <= 1e-12);
      }
    }
  }

  // Uniform cross-entropy is minimized exactly at the uniform prediction.
  for (int rep = 0; rep < 50; ++rep) {
    Tensor<double> logits({1, 6});
    for (auto& v : logits.v) v = rng.normal() * 3.0;
    REQUIRE(uniform_ce_loss(logits) >= std::log(6.0) - 1e-12);
  }
}

TEST_CASE("distill loss closed forms") {
  // Self-distillation equals the entropy of the shared distribution.
  Tensor<double> z({1, 3});
  z.v = {1.2, -0.3, 0.4};
  const double T = 5.0;
  Tensor<double> self = tempered_softmax(z, T);
  double entropy = 0;
  for (double p : self.v) entropy += -p * std::log(p);
  REQUIRE(distill_loss(z, self, T) == Catch::Approx(entropy).margin(1e-12));

  // One-hot teacher at T=1 is exactly cross-entropy.
  Rng rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = 2 + int(rng.below(5));
    Tensor<double> logits({2, c});
    for (auto& v : logits.v) v = rng.normal() * 3.0;
    std::vector<int> labels(2);
    for (auto& l : labels) l = int(rng.below(uint64_t(c)));
    Tensor<double> onehot({2, c});
    onehot.fill(0.0);
    for (int i = 0; i < 2; ++i) onehot.at(i, labels[size_t(i)]) = 1.0;
    REQUIRE(std::fabs(distill_loss(logits, onehot, 1.0) - ce_loss(logits, labels)) <= 1e-12);
  }

  // z=(1,0) against teacher (0.7,0.3) at T=1; reference assembled from the
  // logistic closed form.
  Tensor<double> zs({1, 2});
  zs.v = {1.0, 0.0};
  Tensor<double> pt({1, 2});
  pt.v = {0.7, 0.3};
  const double sig = std::exp(1.0) / (1.0 + std::exp(1.0));
  const double expected = -0.7 * std::log(sig) - 0.3 * std::log(1.0 - sig);
  REQUIRE(distill_loss(zs, pt, 1.0) == Catch::Approx(expected).margin(1e-12));
  REQUIRE(expected == Catch::Approx(0.6132616875182228).margin(1e-12));

  // Teacher rows off the simplex are rejected.
  Tensor<double> bad({1, 2});
  bad.v = {0.8, 0.4};
  REQUIRE_THROWS_AS(distill_loss(zs, bad, 1.0), Error);
  bad.v = {1.4, -0.4};
  REQUIRE_THROWS_AS(distill_loss(zs, bad, 1.0), Error);

  // Student gradient (Ps - Pt)/(T*N) against central differences.
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 1 + int(rng.below(3)), c = 2 + int(rng.below(4));
    Tensor<double> logits({n, c});
    for (auto& v : logits.v) v = rng.normal() * 2.0;
    Tensor<double> teacher = random_simplex_rows(n, c, rng);
    Tensor<double> grad;
    distill_loss(logits, teacher, 4.0, &grad);
    const double h = 1e-6;
    for (size_t i = 0; i < logits.v.size(); ++i) {
      const double saved = logits.v[i];
      logits.v[i] = saved + h;
      const double lp = distill_loss(logits, teacher, 4.0);
      logits.v[i] = saved - h;
      const double lm = distill_loss(logits, teacher, 4.0);
      logits.v[i] = saved;
      REQUIRE(std::fabs((lp - lm) / (2 * h) - grad.v[i]) <= 1e-8);
    }
  }
}

TEST_CASE("distill loss is minimized at the teacher distribution") {
  Tensor<double> pt({1, 3});
  pt.v = {0.5, 0.3, 0.2};
  Tensor<double> z({1, 3});
  z.v = {0.9, -0.4, 0.1};
  const double T = 3.0;
  double loss = 0;
  for (int step = 0; step < 4000; ++step) {
    Tensor<double> grad;
    loss = distill_loss(z, pt, T, &grad);
    for (size_t i = 0; i < z.v.size(); ++i) z.v[i] -= 6.0 * grad.v[i];
  }
  Tensor<double> ps = tempered_softmax(z, T);
  for (int j = 0; j < 3; ++j) REQUIRE(std::fabs(ps.at(0, j) - pt.at(0, j)) <= 1e-5);
  double entropy = 0;
  for (double p : pt.v) entropy += -p * std::log(p);
  REQUIRE(loss == Catch::Approx(entropy).margin(1e-9));
}

TEST_CASE("combined loss assembles the four hyper-parameter rows") {
  Rng rng(505);
  Tensor<double> zi({5, 6}), zo({4, 6});
  for (auto& v : zi.v) v = rng.normal() * 2.0;
  for (auto& v : zo.v) v = rng.normal() * 2.0;
  std::vector<int> labels(5);
  for (auto& l : labels) l = int(rng.below(6));
  Tensor<double> pt_id = random_simplex_rows(5, 6, rng);
  Tensor<double> pt_out = random_simplex_rows(4, 6, rng);
  const double T = 7.0;

  const double ce_id = ce_loss(zi, labels);
  const double ds_id = distill_loss(zi, pt_id, T);
  const double ceu_out = uniform_ce_loss(zo);
  const double ds_out = distill_loss(zo, pt_out, T);

  struct Row {
    double lambda, alpha, beta;
    TrainMode mode;
  };
  const Row rows[] = {
      {0.0, 0.0, 0.0, TrainMode::ce},
      {0.0, 0.5, 0.2, TrainMode::distill},
      {0.5, 0.5, 0.0, TrainMode::distill},
      {0.5, 0.5, 0.2, TrainMode::distill},
  };
  for (const Row& r : rows) {
    LossConfig cfg;
    cfg.mode = r.mode;
    cfg.lambda = r.lambda;
    cfg.alpha = r.alpha;
    cfg.beta = r.beta;
    cfg.T = T;
    cfg = cfg.normalized();

    CombinedBatch<double> batch;
    batch.id_logits = &zi;
    batch.id_labels = &labels;
    if (cfg.lambda > 0) batch.out_logits = &zo;
    if (cfg.alpha > 0) batch.id_teacher_probs = &pt_id;
    if (cfg.lambda > 0 && cfg.beta > 0) batch.out_teacher_probs = &pt_out;

    const double got = combined_loss(batch, cfg);
    const double expected = cfg.alpha * ds_id + (1.0 - cfg.alpha) * ce_id +
                            cfg.lambda * (cfg.beta * ds_out + (1.0 - cfg.beta) * ceu_out);
    REQUIRE(std::fabs(got - expected) <= 1e-10);
  }

  // The pure-ce row also matches ce_loss to machine precision.
  CombinedBatch<double> ce_batch;
  ce_batch.id_logits = &zi;
  ce_batch.id_labels = &labels;
  REQUIRE(std::fabs(combined_loss(ce_batch, LossConfig::ce()) - ce_id) <= 1e-12);

  // Gradient assembly for the full row.
  LossConfig full = LossConfig::distill(0.5, 0.5, 0.2, T);
  CombinedBatch<double> fb;
  fb.id_logits = &zi;
  fb.id_labels = &labels;
  fb.out_logits = &zo;
  fb.id_teacher_probs = &pt_id;
  fb.out_teacher_probs = &pt_out;
  Tensor<double> d_id, d_out;
  combined_loss(fb, full, &d_id, &d_out);

  Tensor<double> g_ds_id, g_ce_id, g_ds_out, g_ceu_out;
  distill_loss(zi, pt_id, T, &g_ds_id);
  ce_loss(zi, labels, &g_ce_id);
  distill_loss(zo, pt_out, T, &g_ds_out);
  uniform_ce_loss(zo, &g_ceu_out);
  for (size_t i = 0; i < d_id.v.size(); ++i)
    REQUIRE(std::fabs(d_id.v[i] - (0.5 * g_ds_id.v[i] + 0.5 * g_ce_id.v[i])) <= 1e-12);
  for (size_t i = 0; i < d_out.v.size(); ++i)
    REQUIRE(std::fabs(d_out.v[i] - 0.5 * (0.2 * g_ds_out.v[i] + 0.8 * g_ceu_out.v[i])) <= 1e-12);

  // Missing pieces are rejected.
  CombinedBatch<double> missing_out;
  missing_out.id_logits = &zi;
  missing_out.id_labels = &labels;
  missing_out.id_teacher_probs = &pt_id;
  REQUIRE_THROWS_AS(combined_loss(missing_out, full), Error);

  CombinedBatch<double> missing_teacher;
  missing_teacher.id_logits = &zi;
  missing_teacher.id_labels = &labels;
  missing_teacher.out_logits = &zo;
  missing_teacher.out_teacher_probs = &pt_out;
  REQUIRE_THROWS_AS(combined_loss(missing_teacher, full), Error);
}

TEST_CASE("teacher predict averages tempered outputs") {
  Tensor<float> batch({3, 1, kImageSide, kImageSide});
  Rng rng(9);
  for (auto& v : batch.v) v = float(rng.uniform());

  TeacherSet<float> one;
  one.T = 1.0;
  one.members.push_back(constant_logit_net({2.f, 0.f}));
  Tensor<float> p1 = teacher_predict(one, batch, 1.0);
  Workspace<float> ws;
  auto direct = one.members[0].forward(batch, ws);
  Tensor<float> expect = tempered_softmax(*direct.logits, 1.0);
  REQUIRE(p1.v == expect.v);

  TeacherSet<float> two;
  two.T = 1.0;
  two.members.push_back(constant_logit_net({10.f, 0.f}));
  two.members.push_back(constant_logit_net({0.f, 10.f}));
  Tensor<float> p2 = teacher_predict(two, batch, 1.0);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(std::fabs(p2.at(i, 0) - 0.5f) <= 1e-4f);
    REQUIRE(std::fabs(p2.at(i, 1) - 0.5f) <= 1e-4f);
  }

  TeacherSet<float> none;
  REQUIRE_THROWS_AS(teacher_predict(none, batch, 1.0), Error);

  // Row sums stay on the simplex for real compiled networks.
  Architecture arch = canonical_architecture("dense", 4);
  TeacherSet<float> real;
  real.T = 20.0;
  for (uint64_t s : {1u, 2u})
    real.members.push_back(compile<float>(arch, InputSpec{1, 16, 16}, 6, {3, 4, 5}, s));
  for (auto& m : real.members) {
    Workspace<float> fw;
    m.freeze_normalization(batch, fw);
  }
  Tensor<float> probs = teacher_predict(real, batch, 20.0);
  for (int i = 0; i < 3; ++i) {
    double sum = 0;
    for (int j = 0; j < 6; ++j) {
      REQUIRE(probs.at(i, j) >= 0.f);
      sum += probs.at(i, j);
    }
    REQUIRE(std::fabs(sum - 1.0) <= 1e-5);
  }

  // Batched whole-set prediction matches the single-call path.
  Tensor<float> seven({7, 1, kImageSide, kImageSide});
  for (auto& v : seven.v) v = float(rng.uniform());
  Tensor<float> whole = teacher_predict(real, seven, 20.0);
  Tensor<float> chunked = teacher_predict_all(real, seven, 20.0, 3);
  REQUIRE(whole.shape == chunked.shape);
  for (size_t i = 0; i < whole.v.size(); ++i)
    REQUIRE(std::fabs(whole.v[i] - chunked.v[i]) <= 1e-6f);
}

TEST_CASE("combined loss gradient through a network matches finite differences") {
  // A freshly compiled net amplifies single-weight perturbations by factors
  // in the hundreds (per-layer normalization gains compound across stages),
  // so the finite-difference step has to be tiny for the quotient to sit in
  // the linear regime. The steps below were picked from an h-scan that
  // converged to the analytic gradient at ~1e-9 relative error.
  const bool frozen = GENERATE(false, true);
  const double h = frozen ? 3e-7 : 1e-7;

  Architecture arch = canonical_architecture("dense", 2);
  Network<double> net =
      compile<double>(arch, InputSpec{1, 8, 8}, 3, {2, 3, 4}, 77);

  Rng rng(606);
  Tensor<double> xi = random_input({3, 1, 8, 8}, rng);
  Tensor<double> xo = random_input({2, 1, 8, 8}, rng);
  std::vector<int> labels{0, 2, 1};
  Tensor<double> pt_id = random_simplex_rows(3, 3, rng);
  Tensor<double> pt_out = random_simplex_rows(2, 3, rng);
  LossConfig cfg = LossConfig::distill(0.5, 0.5, 0.2, 4.0);
  if (frozen) {
    Workspace<double> fw;
    net.freeze_normalization(xi, fw);
  }

  auto loss_now = [&]() {
    Workspace<double> wi, wo;
    auto oi = net.forward(xi, wi);
    auto oo = net.forward(xo, wo);
    CombinedBatch<double> b;
    b.id_logits = oi.logits;
    b.id_labels = &labels;
    b.out_logits = oo.logits;
    b.id_teacher_probs = &pt_id;
    b.out_teacher_probs = &pt_out;
    return combined_loss(b, cfg);
  };

  Workspace<double> wi, wo;
  auto oi = net.forward(xi, wi);
  auto oo = net.forward(xo, wo);
  CombinedBatch<double> b;
  b.id_logits = oi.logits;
  b.id_labels = &labels;
  b.out_logits = oo.logits;
  b.id_teacher_probs = &pt_id;
  b.out_teacher_probs = &pt_out;
  Tensor<double> d_id, d_out;
  combined_loss(b, cfg, &d_id, &d_out);
  net.zero_grads();
  net.backward(d_out, wo);
  net.backward(d_id, wi);

  double worst = 0;
  std::string where;
  auto& params = net.params();
  for (auto& p : params) {
    for (size_t j = 0; j < p.value.v.size(); ++j) {
      const double saved = p.value.v[j];
      p.value.v[j] = saved + h;
      const double lp = loss_now();
      p.value.v[j] = saved - h;
      const double lm = loss_now();
      p.value.v[j] = saved;
      const double fd = (lp - lm) / (2 * h);
      const double analytic = p.grad.v[j];
      const double e =
          std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-3});
      if (e > worst) {
        worst = e;
        where = p.name + "[" + std::to_string(j) + "]";
      }
    }
  }
  INFO("mode " << (frozen ? "frozen" : "batchstat") << ", worst at " << where);
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("train_candidate validates, is deterministic, and respects epochs=0") {
  const Benchmark bench = generate(tiny_bench_spec(60, 12, 30), 31);
  Architecture arch = canonical_architecture("chain", 3);
  TrainOptions opt;
  opt.batch_size = 32;
  opt.stage_widths = {3, 4, 5};

  TrainData data;
  data.id_train = &bench.id_train;
  data.outliers = &bench.aux_outlier;

  auto zero_a = train_candidate(arch, data, LossConfig::ce(), 0, 5, nullptr, opt);
  auto zero_b = train_candidate(arch, data, LossConfig::ce(), 0, 5, nullptr, opt);
  REQUIRE(zero_a.curves.empty());
  for (size_t i = 0; i < zero_a.net.params().size(); ++i)
    REQUIRE(zero_a.net.params()[i].value.v == zero_b.net.params()[i].value.v);

  auto one_a = train_candidate(arch, data, LossConfig::ce(), 1, 5, nullptr, opt);
  auto one_b = train_candidate(arch, data, LossConfig::ce(), 1, 5, nullptr, opt);
  REQUIRE(one_a.curves.size() == 1);
  REQUIRE(one_a.curves[0].epoch == 0);
  REQUIRE(one_a.curves[0].lr > 0);
  REQUIRE(std::isfinite(one_a.curves[0].loss));
  bool changed = false;
  for (size_t i = 0; i < one_a.net.params().size(); ++i) {
    REQUIRE(one_a.net.params()[i].value.v == one_b.net.params()[i].value.v);
    if (one_a.net.params()[i].value.v != zero_a.net.params()[i].value.v) changed = true;
  }
  REQUIRE(changed);

  // oe without outliers and distill without teachers are rejected.
  TrainData no_out;
  no_out.id_train = &bench.id_train;
  REQUIRE_THROWS_AS(train_candidate(arch, no_out, LossConfig::oe(), 1, 5, nullptr, opt), Error);
  REQUIRE_THROWS_AS(train_candidate(arch, data, LossConfig::distill(), 1, 5, nullptr, opt),
                    Error);

  // ce pretraining phase counts into the curves and epoch numbering.
  auto two_phase =
      train_candidate(arch, data, LossConfig::oe(), 1, 5, nullptr, [&] {
        TrainOptions o = opt;
        o.pretrain_ce_epochs = 1;
        return o;
      }());
  REQUIRE(two_phase.curves.size() == 2);
  REQUIRE(two_phase.curves[0].epoch == 0);
  REQUIRE(two_phase.curves[1].epoch == 1);

  const std::string csv = curves_to_csv(two_phase.curves);
  REQUIRE(csv.rfind("epoch,loss,id_acc,lr\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("train_candidate learns the benchmark with cross-entropy") {
  const Benchmark bench = generate(tiny_bench_spec(600, 120, 60), 12);
  Architecture arch = canonical_architecture("dense", 4);
  TrainOptions opt;
  opt.batch_size = 64;
  opt.stage_widths = {4, 8, 16};

  TrainData data;
  data.id_train = &bench.id_train;
  auto r = train_candidate(arch, data, LossConfig::ce(), 3, 7, nullptr, opt);
  REQUIRE(r.curves.size() == 3);
  REQUIRE(r.curves.back().loss < r.curves.front().loss);
  const double acc = val_accuracy(r.net, bench.id_val);
  INFO("val accuracy " << acc);
  REQUIRE(acc > 1.0 / 6.0 + 0.2);
}

TEST_CASE("train_candidate runs oe and distill modes") {
  const Benchmark bench = generate(tiny_bench_spec(120, 24, 60), 44);
  Architecture arch = canonical_architecture("dense", 3);
  TrainOptions opt;
  opt.batch_size = 32;
  opt.stage_widths = {3, 4, 5};

  TrainData data;
  data.id_train = &bench.id_train;
  data.outliers = &bench.aux_outlier;

  auto oe = train_candidate(arch, data, LossConfig::oe(), 1, 3, nullptr, opt);
  REQUIRE(oe.curves.size() == 1);
  REQUIRE(std::isfinite(oe.curves[0].loss));

  TeacherSet<float> teachers;
  teachers.T = 4.0;
  teachers.members.push_back(std::move(oe.net));
  {
    Workspace<float> fw;
    Tensor<float> ref({32, 1, kImageSide, kImageSide});
    std::copy_n(bench.id_train.images.v.begin(), ref.v.size(), ref.v.begin());
    teachers.members[0].freeze_normalization(ref, fw);
  }

  auto ds = train_candidate(arch, data, LossConfig::distill(0.5, 0.5, 0.2, 4.0), 1, 3,
                            &teachers, opt);
  REQUIRE(ds.curves.size() == 1);
  REQUIRE(std::isfinite(ds.curves[0].loss));

  // Precomputed teacher tables give the same training result as on-the-fly
  // teacher inference.
  Tensor<float> id_pt = teacher_predict_all(teachers, bench.id_train.images, 4.0);
  Tensor<float> out_pt = teacher_predict_all(teachers, bench.aux_outlier.images, 4.0);
  TrainData pre = data;
  pre.id_teacher_probs = &id_pt;
  pre.out_teacher_probs = &out_pt;
  auto ds2 = train_candidate(arch, pre, LossConfig::distill(0.5, 0.5, 0.2, 4.0), 1, 3,
                             &teachers, opt);
  for (size_t i = 0; i < ds.net.params().size(); ++i)
    REQUIRE(ds.net.params()[i].value.v == ds2.net.params()[i].value.v);
}
