#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dcsod/predictor.hpp"

using namespace dcsod;
namespace fs = std::filesystem;

namespace {

// O(n^2) pair enumeration, the reference for the sort-based counts.
TauCounts brute_counts(const std::vector<double>& x, const std::vector<double>& y) {
  TauCounts c;
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      ++c.pairs;
      const bool tx = x[i] == x[j];
      const bool ty = y[i] == y[j];
      if (tx) ++c.ties_x;
      if (ty) ++c.ties_y;
      if (tx && ty) ++c.ties_xy;
      if (tx || ty) continue;
      const double s = (x[i] - x[j]) * (y[i] - y[j]);
      if (s > 0)
        ++c.concordant;
      else
        ++c.discordant;
    }
  return c;
}

bool counts_equal(const TauCounts& a, const TauCounts& b) {
  return a.pairs == b.pairs && a.concordant == b.concordant && a.discordant == b.discordant &&
         a.ties_x == b.ties_x && a.ties_y == b.ties_y && a.ties_xy == b.ties_xy;
}

// Values on a coarse grid so ties are frequent.
std::vector<double> grid_values(Rng& rng, size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = double(rng.below(9)) / 4.0;
  return v;
}

std::string random_encoding(Rng& rng, int len) {
  std::string e(size_t(len), '0');
  for (char& c : e) c = rng.bernoulli(0.5) ? '1' : '0';
  return e;
}

std::vector<PredictorRow> fraction_of_ones_rows(int n, int len, uint64_t seed) {
  Rng rng(seed);
  std::set<std::string> seen;
  std::vector<PredictorRow> rows;
  while (int(rows.size()) < n) {
    std::string e = random_encoding(rng, len);
    if (!seen.insert(e).second) continue;
    const double ones = double(std::count(e.begin(), e.end(), '1'));
    rows.push_back({e, ones / double(len), 0.0});
  }
  return rows;
}

PredictorModel perturbed_model(int input_len, std::array<int, 2> hidden, uint64_t seed) {
  PredictorModel m = make_predictor_model(input_len, hidden, seed);
  Rng rng(derive_seed(seed, {77}));
  for (Param<float>& p : m.net.params())
    for (float& v : p.value.v) v += float(rng.normal() * 0.1);
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dcsod_pred_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("tau counts match a direct pair enumeration") {
  Rng rng(31);
  for (size_t n : {size_t(2), size_t(3), size_t(7), size_t(40), size_t(173), size_t(500)}) {
    for (int rep = 0; rep < 4; ++rep) {
      const std::vector<double> x = grid_values(rng, n);
      const std::vector<double> y = grid_values(rng, n);
      const TauCounts fast = tau_counts(x, y);
      const TauCounts slow = brute_counts(x, y);
      REQUIRE(counts_equal(fast, slow));
      REQUIRE(fast.concordant + fast.discordant + fast.ties_x + fast.ties_y - fast.ties_xy ==
              fast.pairs);
      if (slow.pairs > slow.ties_x && slow.pairs > slow.ties_y)
        REQUIRE(kendall_tau(x, y) == tau_from_counts(slow));
    }
  }
}

TEST_CASE("tau hits known values") {
  std::vector<double> up(10), down(10);
  for (int i = 0; i < 10; ++i) {
    up[size_t(i)] = i;
    down[size_t(i)] = -i;
  }
  REQUIRE(kendall_tau(up, up) == 1.0);
  REQUIRE(kendall_tau(up, down) == -1.0);

  REQUIRE(kendall_tau({1, 2, 3}, {1, 3, 2}) == 1.0 / 3.0);

  // One tie in x: 5 concordant pairs over sqrt(5 * 6).
  REQUIRE(kendall_tau({1, 1, 2, 3}, {1, 2, 3, 4}) == 5.0 / std::sqrt(30.0));
}

TEST_CASE("tau ignores monotone transforms and flips sign under negation") {
  Rng rng(48);
  const std::vector<double> x = grid_values(rng, 120);
  const std::vector<double> y = grid_values(rng, 120);

  std::vector<double> y_atan(y), y_affine(y), y_neg(y);
  for (double& v : y_atan) v = std::atan(v);
  for (double& v : y_affine) v = 4.0 * v + 0.5;
  for (double& v : y_neg) v = -v;

  const TauCounts base = tau_counts(x, y);
  REQUIRE(counts_equal(base, tau_counts(x, y_atan)));
  REQUIRE(counts_equal(base, tau_counts(x, y_affine)));
  REQUIRE(kendall_tau(x, y_atan) == kendall_tau(x, y));
  REQUIRE(kendall_tau(x, y_neg) == -kendall_tau(x, y));
}

TEST_CASE("correlation inputs are validated") {
  const std::vector<double> a{1, 2, 3};
  REQUIRE_THROWS_AS(kendall_tau(a, {1, 2}), Error);
  REQUIRE_THROWS_AS(kendall_tau({1}, {1}), Error);
  REQUIRE_THROWS_AS(kendall_tau({1, 1, 1}, a), Error);
  REQUIRE_THROWS_AS(kendall_tau(a, {1, std::nan(""), 2}), Error);
  REQUIRE_THROWS_AS(pearson_rho(a, {1, 2}), Error);
  REQUIRE_THROWS_AS(pearson_rho({2}, {3}), Error);
  REQUIRE_THROWS_AS(pearson_rho({1, 1, 1}, a), Error);
  REQUIRE_THROWS_AS(pearson_rho(a, {1, 2, INFINITY}), Error);
}

TEST_CASE("pearson rho is exact on affine relations") {
  Rng rng(7);
  std::vector<double> x(60), y(60);
  for (double& v : x) v = rng.normal();
  for (size_t i = 0; i < y.size(); ++i) y[i] = 2.0 * x[i] + 3.0;
  REQUIRE(pearson_rho(x, y) == Catch::Approx(1.0).margin(1e-12));
  for (double& v : y) v = -v;
  REQUIRE(pearson_rho(x, y) == Catch::Approx(-1.0).margin(1e-12));

  std::vector<double> z(60);
  for (double& v : z) v = rng.normal();
  const double r = pearson_rho(x, z);
  REQUIRE(std::abs(r) <= 1.0 + 1e-12);
  std::vector<double> x2(x);
  for (double& v : x2) v = 0.25 * v - 7.0;
  REQUIRE(pearson_rho(x2, z) == Catch::Approx(r).margin(1e-12));
}

TEST_CASE("pairwise hinge loss is zero exactly when ordered pairs clear the margin") {
  REQUIRE(pairwise_hinge_loss({1, 2, 3}, {0.1, 0.2, 0.3}, 0.0) == 0.0);
  REQUIRE(pairwise_hinge_loss({1, 2, 3}, {0.1, 0.2, 0.3}, 0.5) == 0.0);

  // Reversed predictions: gaps of 1, 2, 1 below a zero margin.
  REQUIRE(pairwise_hinge_loss({3, 2, 1}, {0.1, 0.2, 0.3}, 0.0) == 4.0 / 3.0);

  // Flat predictions sit exactly at a zero margin but fail a positive one.
  REQUIRE(pairwise_hinge_loss({5, 5, 5}, {0.1, 0.2, 0.3}, 0.0) == 0.0);
  REQUIRE(pairwise_hinge_loss({5, 5, 5}, {0.1, 0.2, 0.3}, 0.25) == 0.25);

  REQUIRE_THROWS_AS(pairwise_hinge_loss({1, 2}, {0.5}, 0.0), Error);
  REQUIRE_THROWS_AS(pairwise_hinge_loss({1, 2}, {0.5, 0.5}, 0.0), Error);
}

TEST_CASE("a zero output layer predicts its bias for every encoding") {
  PredictorModel m = make_predictor_model(9, {16, 8}, 3);
  for (Param<float>& p : m.net.params())
    if (p.name == "out.b") p.value.v[0] = 0.37f;

  Rng rng(5);
  for (int i = 0; i < 6; ++i)
    REQUIRE(predict(m, random_encoding(rng, 9)) == double(0.37f));
}

TEST_CASE("batch scoring matches one-at-a-time scoring") {
  PredictorModel m = perturbed_model(45, {128, 64}, 7);
  Rng rng(9);
  std::vector<ArchEncoding> encs;
  for (int i = 0; i < 17; ++i) encs.push_back(random_encoding(rng, 45));
  encs.push_back(encs[0]);

  const std::vector<double> batch = predict_batch(m, encs);
  for (size_t i = 0; i < encs.size(); ++i) REQUIRE(batch[i] == predict(m, encs[i]));
  REQUIRE(batch.back() == batch[0]);
  REQUIRE(predict(m, encs[0]) == predict(m, encs[0]));
}

TEST_CASE("predict validates encodings") {
  PredictorModel m = make_predictor_model(4, {8, 8}, 1);
  REQUIRE_THROWS_AS(predict(m, "001"), Error);
  REQUIRE_THROWS_AS(predict(m, "00x1"), Error);
  REQUIRE_THROWS_AS(predict_batch(m, {}), Error);
  REQUIRE_THROWS_AS(make_predictor_model(0, {8, 8}), Error);
  REQUIRE_THROWS_AS(make_predictor_model(4, {0, 8}), Error);
}

TEST_CASE("fit ranks held-out encodings by a smooth score") {
  const auto rows = fraction_of_ones_rows(400, 45, derive_seed(99, {1}));
  const FitResult fit = fit_predictor(rows, 0.8, PredictorHyper{}, 1);

  REQUIRE(fit.metrics.train_rows == 320);
  REQUIRE(fit.metrics.test_rows == 80);
  REQUIRE(fit.metrics.tau >= 0.9);
  REQUIRE(fit.metrics.rho >= 0.99);
  REQUIRE(fit.metrics.mse <= 1e-3);
  REQUIRE(fit.model.input_len == 45);
}

TEST_CASE("fit is a pure function of rows and seed") {
  const auto rows = fraction_of_ones_rows(60, 9, 11);
  PredictorHyper hyper;
  hyper.epochs = 40;

  const FitResult a = fit_predictor(rows, 0.8, hyper, 5);
  const FitResult b = fit_predictor(rows, 0.8, hyper, 5);
  REQUIRE(a.metrics.tau == b.metrics.tau);
  REQUIRE(a.metrics.rho == b.metrics.rho);
  REQUIRE(a.metrics.mse == b.metrics.mse);

  Rng rng(2);
  bool seed_matters = false;
  const FitResult c = fit_predictor(rows, 0.8, hyper, 6);
  for (int i = 0; i < 5; ++i) {
    const std::string e = random_encoding(rng, 9);
    REQUIRE(predict(a.model, e) == predict(b.model, e));
    if (predict(a.model, e) != predict(c.model, e)) seed_matters = true;
  }
  REQUIRE(seed_matters);
}

TEST_CASE("fit splits rows by the requested fraction") {
  PredictorHyper cheap;
  cheap.epochs = 1;

  const auto big = fraction_of_ones_rows(2000, 45, 21);
  const FitResult fit = fit_predictor(big, 0.85, cheap, 3);
  REQUIRE(fit.metrics.train_rows == 1700);
  REQUIRE(fit.metrics.test_rows == 300);

  // Extreme fractions still leave two rows on each side; distinct labels keep
  // every possible two-row training split trainable.
  auto small = fraction_of_ones_rows(10, 9, 22);
  for (size_t i = 0; i < small.size(); ++i) small[i].auroc = 0.05 + 0.09 * double(i);
  REQUIRE(fit_predictor(small, 0.05, cheap, 3).metrics.train_rows == 2);
  REQUIRE(fit_predictor(small, 0.99, cheap, 3).metrics.test_rows == 2);
}

TEST_CASE("fit rejects unusable datasets and settings") {
  const auto rows = fraction_of_ones_rows(20, 9, 13);
  const PredictorHyper hyper;

  REQUIRE_THROWS_AS(fit_predictor(fraction_of_ones_rows(9, 9, 13), 0.8, hyper, 1), Error);
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.0, hyper, 1), Error);
  REQUIRE_THROWS_AS(fit_predictor(rows, 1.0, hyper, 1), Error);
  REQUIRE_THROWS_AS(fit_predictor(rows, -0.5, hyper, 1), Error);

  auto dupes = rows;
  dupes[3] = dupes[4];
  REQUIRE_THROWS_WITH(fit_predictor(dupes, 0.8, hyper, 1),
                      Catch::Matchers::ContainsSubstring("duplicate"));

  auto flat = rows;
  for (auto& r : flat) r.auroc = 0.5;
  REQUIRE_THROWS_WITH(fit_predictor(flat, 0.8, hyper, 1),
                      Catch::Matchers::ContainsSubstring("equal"));

  PredictorHyper bad = hyper;
  bad.epochs = 0;
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.8, bad, 1), Error);
  bad = hyper;
  bad.batch_size = 1;
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.8, bad, 1), Error);
  bad = hyper;
  bad.margin = -0.1;
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.8, bad, 1), Error);
  bad = hyper;
  bad.weight_decay = -1;
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.8, bad, 1), Error);
  bad = hyper;
  bad.max_pairs_per_epoch = 0;
  REQUIRE_THROWS_AS(fit_predictor(rows, 0.8, bad, 1), Error);
}

TEST_CASE("saved predictors load back bit for bit") {
  TempDir dir;
  PredictorModel m = perturbed_model(18, {32, 16}, 41);
  const std::string path = dir.file("pred.ckpt");
  save_predictor(m, path);

  const PredictorModel loaded = load_predictor(path);
  REQUIRE(loaded.input_len == 18);
  REQUIRE(loaded.hidden == std::array<int, 2>{32, 16});

  Rng rng(6);
  for (int i = 0; i < 10; ++i) {
    const std::string e = random_encoding(rng, 18);
    REQUIRE(predict(loaded, e) == predict(m, e));
  }
}

TEST_CASE("loading rejects files that are not predictor checkpoints") {
  TempDir dir;
  REQUIRE_THROWS_AS(load_predictor(dir.file("absent.ckpt")), Error);

  {
    std::ofstream f(dir.file("junk.ckpt"), std::ios::binary);
    f << "this is not a checkpoint file at all";
  }
  REQUIRE_THROWS_AS(load_predictor(dir.file("junk.ckpt")), Error);

  {
    std::ofstream f(dir.file("notjson.ckpt"), std::ios::binary);
    const std::string body = "definitely not json....";
    const uint64_t hlen = body.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f << body;
  }
  REQUIRE_THROWS_AS(load_predictor(dir.file("notjson.ckpt")), Error);

  // A valid checkpoint of some other network has no fc1/fc2 layers.
  {
    nlohmann::json header;
    header["schema_version"] = 1;
    header["dtype"] = "f32";
    header["params"] = nlohmann::json::array(
        {{{"name", "head.w"}, {"shape", {2, 3}}, {"offset", 0}, {"count", 6}}});
    const std::string htext = header.dump();
    std::ofstream f(dir.file("other.ckpt"), std::ios::binary);
    const uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f << htext;
    const std::vector<float> block(6, 0.f);
    f.write(reinterpret_cast<const char*>(block.data()), 24);
  }
  REQUIRE_THROWS_WITH(load_predictor(dir.file("other.ckpt")),
                      Catch::Matchers::ContainsSubstring("not hold a predictor"));
}
