#pragma once

// Synthetic 16x16 grayscale benchmark: six in-distribution pattern classes,
// four near-OOD classes drawn from the same renderer families with disjoint
// parameter ranges, and a filtered-noise auxiliary outlier pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcsod/common.hpp"
#include "dcsod/tensor.hpp"

namespace dcsod {

enum class Role { id_train, id_val, id_test, ood_test, aux_outlier };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::id_train: return "id_train";
    case Role::id_val: return "id_val";
    case Role::id_test: return "id_test";
    case Role::ood_test: return "ood_test";
    case Role::aux_outlier: return "aux_outlier";
  }
  throw internal_error("unknown role");
}

inline Role role_from_name(const std::string& s) {
  for (Role r : {Role::id_train, Role::id_val, Role::id_test, Role::ood_test, Role::aux_outlier})
    if (s == role_name(r)) return r;
  throw config_error("unknown dataset role '" + s + "'");
}

inline constexpr int kImageSide = 16;
inline constexpr int kImagePixels = kImageSide * kImageSide;

enum class Family { stripes, checker, rings, disk, cross, square_outline, filtered_noise };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::stripes: return "stripes";
    case Family::checker: return "checker";
    case Family::rings: return "rings";
    case Family::disk: return "disk";
    case Family::cross: return "cross";
    case Family::square_outline: return "square_outline";
    case Family::filtered_noise: return "filtered_noise";
  }
  throw internal_error("unknown family");
}

inline Family family_from_name(const std::string& s) {
  for (Family f : {Family::stripes, Family::checker, Family::rings, Family::disk, Family::cross,
                   Family::square_outline, Family::filtered_noise})
    if (s == family_name(f)) return f;
  throw config_error("unknown renderer family '" + s + "'");
}

struct Interval {
  double lo = 0.0, hi = 0.0;

  bool overlaps(const Interval& o) const { return lo <= o.hi && o.lo <= hi; }
};

// A class is a renderer family plus the identity-relevant parameter ranges.
// Two classes collide when they share a family and every range pair overlaps;
// that is exactly the condition under which the renderers can emit the same
// clean image.
struct ClassSpec {
  Family family = Family::stripes;
  std::map<std::string, Interval> params;
};

inline bool classes_collide(const ClassSpec& a, const ClassSpec& b) {
  if (a.family != b.family) return false;
  for (const auto& [name, range] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end()) continue;
    if (!range.overlaps(it->second)) return false;
  }
  return true;
}

struct BenchmarkSpec {
  int id_train_size = 3000;
  int id_val_size = 600;
  int id_test_size = 600;
  int ood_test_size = 600;
  int aux_size = 3000;
  double noise_sigma = 0.05;
  std::vector<ClassSpec> id_classes;
  std::vector<ClassSpec> ood_classes;
  ClassSpec aux_class;

  static BenchmarkSpec defaults() {
    BenchmarkSpec s;
    s.id_classes = {
        {Family::stripes, {{"angle_deg", {0.0, 10.0}}, {"period", {3.0, 4.5}}}},
        {Family::stripes, {{"angle_deg", {80.0, 100.0}}, {"period", {3.0, 4.5}}}},
        {Family::checker, {{"period", {3.0, 4.5}}}},
        {Family::rings, {{"period", {3.0, 4.5}}}},
        {Family::disk, {{"radius", {3.0, 5.0}}}},
        {Family::cross, {{"arm_halfwidth", {1.0, 2.0}}}},
    };
    s.ood_classes = {
        {Family::stripes, {{"angle_deg", {35.0, 55.0}}, {"period", {3.0, 4.5}}}},
        {Family::stripes, {{"angle_deg", {125.0, 145.0}}, {"period", {3.0, 4.5}}}},
        {Family::rings, {{"period", {6.0, 8.0}}}},
        {Family::square_outline, {{"half_size", {4.0, 6.0}}, {"thickness", {1.0, 1.8}}}},
    };
    s.aux_class = {Family::filtered_noise, {}};
    return s;
  }
};

// One line per class per split; this is the record against which the
// no-parameter-collision invariant is checked.
struct ConstructionLogEntry {
  std::string split;
  int class_index = 0;
  ClassSpec spec;
};

struct LabeledSet {
  Tensor<float> images{std::vector<int>{1, 1, kImageSide, kImageSide}};
  std::vector<int> labels;
  Role role = Role::id_train;
  int class_count = 0;

  int64_t size() const { return images.shape[0]; }
};

struct Benchmark {
  LabeledSet id_train, id_val, id_test, ood_test, aux_outlier;
  BenchmarkSpec spec;
  uint64_t seed = 0;
  std::vector<ConstructionLogEntry> construction_log;
};

namespace detail {

inline double draw(Rng& rng, const Interval& iv) {
  return iv.lo + (iv.hi - iv.lo) * rng.uniform();
}

inline const Interval& named(const ClassSpec& c, const char* key) {
  auto it = c.params.find(key);
  if (it == c.params.end())
    throw config_error(std::string(family_name(c.family)) + " class missing parameter '" + key +
                        "'");
  return it->second;
}

constexpr double kInk = 0.85, kPaper = 0.15;

// All geometric renderers draw into [0,1] with a half-pixel soft edge; the
// coordinate origin sits at the image center.
inline void render_clean(const ClassSpec& cls, Rng& rng, float* out) {
  auto edge = [](double signed_dist) {
    const double t = std::clamp(signed_dist + 0.5, 0.0, 1.0);
    return kPaper + (kInk - kPaper) * t;
  };
  auto px = [](int i) { return double(i) - (kImageSide - 1) / 2.0; };

  switch (cls.family) {
    case Family::stripes: {
      const double angle = draw(rng, named(cls, "angle_deg")) * (M_PI / 180.0);
      const double period = draw(rng, named(cls, "period"));
      const double phase = rng.uniform() * 2.0 * M_PI;
      const double cx = std::cos(angle), sx = std::sin(angle);
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double u = px(x) * cx + px(y) * sx;
          const double s = std::sin(2.0 * M_PI * u / period + phase);
          out[y * kImageSide + x] = float(s > 0 ? kInk : kPaper);
        }
      break;
    }
    case Family::checker: {
      const double period = draw(rng, named(cls, "period"));
      const double ox = rng.uniform() * period, oy = rng.uniform() * period;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const long long qx = (long long)std::floor((x + ox) / period);
          const long long qy = (long long)std::floor((y + oy) / period);
          out[y * kImageSide + x] = float(((qx + qy) & 1) ? kInk : kPaper);
        }
      break;
    }
    case Family::rings: {
      const double period = draw(rng, named(cls, "period"));
      const double phase = rng.uniform() * 2.0 * M_PI;
      const double cx = (rng.uniform() - 0.5) * 4.0, cy = (rng.uniform() - 0.5) * 4.0;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double r = std::hypot(px(x) - cx, px(y) - cy);
          const double s = std::sin(2.0 * M_PI * r / period + phase);
          out[y * kImageSide + x] = float(s > 0 ? kInk : kPaper);
        }
      break;
    }
    case Family::disk: {
      const double radius = draw(rng, named(cls, "radius"));
      const double cx = (rng.uniform() - 0.5) * 4.0, cy = (rng.uniform() - 0.5) * 4.0;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double r = std::hypot(px(x) - cx, px(y) - cy);
          out[y * kImageSide + x] = float(edge(radius - r));
        }
      break;
    }
    case Family::cross: {
      const double w = draw(rng, named(cls, "arm_halfwidth"));
      const double cx = (rng.uniform() - 0.5) * 3.0, cy = (rng.uniform() - 0.5) * 3.0;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double d = std::min(std::fabs(px(x) - cx), std::fabs(px(y) - cy));
          out[y * kImageSide + x] = float(edge(w - d));
        }
      break;
    }
    case Family::square_outline: {
      const double half = draw(rng, named(cls, "half_size"));
      const double thick = draw(rng, named(cls, "thickness"));
      const double cx = (rng.uniform() - 0.5) * 3.0, cy = (rng.uniform() - 0.5) * 3.0;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double m = std::max(std::fabs(px(x) - cx), std::fabs(px(y) - cy));
          const double d = std::min(half - m, m - (half - thick));
          out[y * kImageSide + x] = float(edge(d));
        }
      break;
    }
    case Family::filtered_noise: {
      // Anisotropic Gaussian-blurred white noise, min-max rescaled into the
      // same ink/paper range as the geometric families.
      double field[kImagePixels], tmp[kImagePixels];
      for (double& v : field) v = rng.normal();
      const double sigx = 0.6 + rng.uniform() * 1.9;
      const double sigy = 0.6 + rng.uniform() * 1.9;
      auto blur_axis = [](const double* src, double* dst, double sigma, bool rows) {
        const int radius = std::max(1, int(std::ceil(2.0 * sigma)));
        std::vector<double> kern(size_t(2 * radius + 1));
        double ksum = 0;
        for (int i = -radius; i <= radius; ++i) {
          kern[size_t(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
          ksum += kern[size_t(i + radius)];
        }
        for (auto& k : kern) k /= ksum;
        for (int y = 0; y < kImageSide; ++y)
          for (int x = 0; x < kImageSide; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
              int xx = rows ? x + i : x;
              int yy = rows ? y : y + i;
              xx = std::clamp(xx, 0, kImageSide - 1);
              yy = std::clamp(yy, 0, kImageSide - 1);
              acc += kern[size_t(i + radius)] * src[yy * kImageSide + xx];
            }
            dst[y * kImageSide + x] = acc;
          }
      };
      blur_axis(field, tmp, sigx, true);
      blur_axis(tmp, field, sigy, false);
      double lo = field[0], hi = field[0];
      for (double v : field) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const double span = std::max(hi - lo, 1e-12);
      for (int i = 0; i < kImagePixels; ++i)
        out[i] = float(kPaper + (kInk - kPaper) * (field[i] - lo) / span);
      break;
    }
  }
}

inline uint64_t role_tag(Role r) {
  switch (r) {
    case Role::id_train: return 1;
    case Role::id_val: return 2;
    case Role::id_test: return 3;
    case Role::ood_test: return 4;
    case Role::aux_outlier: return 5;
  }
  throw internal_error("unknown role");
}

inline LabeledSet render_set(Role role, int n, const std::vector<ClassSpec>& classes,
                             int class_count, bool labeled, double sigma, uint64_t seed) {
  if (n <= 0) throw config_error(std::string(role_name(role)) + " size must be positive");
  LabeledSet set;
  set.role = role;
  set.class_count = class_count;
  set.images = Tensor<float>({n, 1, kImageSide, kImageSide});
  set.labels.assign(size_t(n), -1);
  const int fam_count = int(classes.size());
  for (int i = 0; i < n; ++i) {
    const int cls = i % fam_count;
    Rng rng(derive_seed(seed, {role_tag(role), uint64_t(i)}));
    float* img = set.images.v.data() + size_t(i) * kImagePixels;
    render_clean(classes[size_t(cls)], rng, img);
    for (int p = 0; p < kImagePixels; ++p)
      img[p] = float(std::clamp(double(img[p]) + sigma * rng.normal(), 0.0, 1.0));
    if (labeled) set.labels[size_t(i)] = cls;
  }
  return set;
}

}  // namespace detail

inline void validate_spec(const BenchmarkSpec& spec) {
  if (spec.id_classes.empty() || spec.ood_classes.empty())
    throw config_error("benchmark spec needs non-empty class lists");
  if (spec.noise_sigma < 0) throw config_error("noise_sigma must be non-negative");
  for (const auto& cls : spec.id_classes)
    for (const auto& [name, iv] : cls.params)
      if (iv.lo > iv.hi) throw config_error("inverted interval for '" + name + "'");

  std::vector<std::pair<std::string, const ClassSpec*>> all;
  for (size_t i = 0; i < spec.id_classes.size(); ++i)
    all.emplace_back("id[" + std::to_string(i) + "]", &spec.id_classes[i]);
  for (size_t i = 0; i < spec.ood_classes.size(); ++i)
    all.emplace_back("ood[" + std::to_string(i) + "]", &spec.ood_classes[i]);
  all.emplace_back("aux", &spec.aux_class);
  for (size_t a = 0; a < all.size(); ++a)
    for (size_t b = a + 1; b < all.size(); ++b)
      if (classes_collide(*all[a].second, *all[b].second))
        throw config_error("class specifications overlap: " + all[a].first + " and " +
                            all[b].first + " share family '" +
                            family_name(all[a].second->family) +
                            "' with intersecting parameter ranges");
}

inline Benchmark generate(const BenchmarkSpec& spec, uint64_t seed) {
  validate_spec(spec);
  Benchmark b;
  b.spec = spec;
  b.seed = seed;
  const int c = int(spec.id_classes.size());
  b.id_train = detail::render_set(Role::id_train, spec.id_train_size, spec.id_classes, c, true,
                                  spec.noise_sigma, seed);
  b.id_val = detail::render_set(Role::id_val, spec.id_val_size, spec.id_classes, c, true,
                                spec.noise_sigma, seed);
  b.id_test = detail::render_set(Role::id_test, spec.id_test_size, spec.id_classes, c, true,
                                 spec.noise_sigma, seed);
  b.ood_test = detail::render_set(Role::ood_test, spec.ood_test_size, spec.ood_classes, c, false,
                                  spec.noise_sigma, seed);
  b.aux_outlier = detail::render_set(Role::aux_outlier, spec.aux_size, {spec.aux_class}, c, false,
                                     spec.noise_sigma, seed);
  for (size_t i = 0; i < spec.id_classes.size(); ++i)
    b.construction_log.push_back({"id", int(i), spec.id_classes[i]});
  for (size_t i = 0; i < spec.ood_classes.size(); ++i)
    b.construction_log.push_back({"ood", int(i), spec.ood_classes[i]});
  b.construction_log.push_back({"aux", 0, spec.aux_class});
  return b;
}

// Stratified disjoint halves whose union is the input; sample order within
// each half follows the input order.
inline std::pair<LabeledSet, LabeledSet> split_half(const LabeledSet& set, uint64_t seed) {
  const int64_t n = set.size();
  if (n < 2) throw config_error("split_half needs at least 2 samples");
  std::map<int, std::vector<int64_t>> by_label;
  for (int64_t i = 0; i < n; ++i) by_label[set.labels[size_t(i)]].push_back(i);

  std::vector<char> in_a(size_t(n), 0);
  for (auto& [label, idx] : by_label) {
    Rng rng(derive_seed(seed, {0x5b17u, uint64_t(uint32_t(label))}));
    rng.shuffle(idx);
    const size_t take = (idx.size() + 1) / 2;
    for (size_t i = 0; i < take; ++i) in_a[size_t(idx[i])] = 1;
  }

  auto gather = [&](bool want_a) {
    LabeledSet out;
    out.role = set.role;
    out.class_count = set.class_count;
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < n; ++i)
      if (bool(in_a[size_t(i)]) == want_a) rows.push_back(i);
    out.images = Tensor<float>({int(rows.size()), 1, kImageSide, kImageSide});
    out.labels.resize(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(set.images.v.begin() + rows[r] * kImagePixels, kImagePixels,
                  out.images.v.begin() + int64_t(r) * kImagePixels);
      out.labels[r] = set.labels[size_t(rows[r])];
    }
    return out;
  };
  return {gather(true), gather(false)};
}

inline nlohmann::json class_to_json(const ClassSpec& c) {
  nlohmann::json j;
  j["family"] = family_name(c.family);
  j["params"] = nlohmann::json::object();
  for (const auto& [name, iv] : c.params) j["params"][name] = {iv.lo, iv.hi};
  return j;
}

inline ClassSpec class_from_json(const nlohmann::json& j) {
  ClassSpec c;
  c.family = family_from_name(j.at("family").get<std::string>());
  for (const auto& [name, arr] : j.at("params").items())
    c.params[name] = {arr.at(0).get<double>(), arr.at(1).get<double>()};
  return c;
}

inline nlohmann::json spec_to_json(const BenchmarkSpec& s) {
  nlohmann::json j;
  j["id_train_size"] = s.id_train_size;
  j["id_val_size"] = s.id_val_size;
  j["id_test_size"] = s.id_test_size;
  j["ood_test_size"] = s.ood_test_size;
  j["aux_size"] = s.aux_size;
  j["noise_sigma"] = s.noise_sigma;
  j["id_classes"] = nlohmann::json::array();
  for (const auto& c : s.id_classes) j["id_classes"].push_back(class_to_json(c));
  j["ood_classes"] = nlohmann::json::array();
  for (const auto& c : s.ood_classes) j["ood_classes"].push_back(class_to_json(c));
  j["aux_class"] = class_to_json(s.aux_class);
  return j;
}

inline BenchmarkSpec spec_from_json(const nlohmann::json& j) {
  BenchmarkSpec s;
  s.id_train_size = j.at("id_train_size").get<int>();
  s.id_val_size = j.at("id_val_size").get<int>();
  s.id_test_size = j.at("id_test_size").get<int>();
  s.ood_test_size = j.at("ood_test_size").get<int>();
  s.aux_size = j.at("aux_size").get<int>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  for (const auto& c : j.at("id_classes")) s.id_classes.push_back(class_from_json(c));
  for (const auto& c : j.at("ood_classes")) s.ood_classes.push_back(class_from_json(c));
  s.aux_class = class_from_json(j.at("aux_class"));
  return s;
}

// File layout: u64 little-endian header length, JSON header, float32 pixel
// block, int32 label block.
inline void save_set(const LabeledSet& set, const BenchmarkSpec& spec, uint64_t seed,
                     const std::string& path) {
  nlohmann::json header;
  header["schema_version"] = 1;
  header["role"] = role_name(set.role);
  header["n"] = set.size();
  header["class_count"] = set.class_count;
  header["shape"] = set.images.shape;
  header["seed"] = seed;
  header["spec"] = spec_to_json(spec);
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw prereq_error("cannot open '" + path + "' for writing");
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  out.write(reinterpret_cast<const char*>(set.images.v.data()),
            std::streamsize(set.images.v.size() * sizeof(float)));
  std::vector<int32_t> labels(set.labels.begin(), set.labels.end());
  out.write(reinterpret_cast<const char*>(labels.data()),
            std::streamsize(labels.size() * sizeof(int32_t)));
  if (!out) throw prereq_error("write to '" + path + "' failed");
}

struct LoadedSet {
  LabeledSet set;
  BenchmarkSpec spec;
  uint64_t seed = 0;
};

inline LoadedSet load_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw prereq_error("cannot open dataset file '" + path + "'");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen == 0 || hlen > (64u << 20))
    throw prereq_error("corrupt dataset header in '" + path + "'");
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (!in) throw prereq_error("corrupt dataset header in '" + path + "'");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw prereq_error("bad dataset header in '" + path + "': " + e.what());
  }
  if (header.value("schema_version", 0) != 1)
    throw prereq_error("unsupported dataset schema in '" + path + "'");

  LoadedSet r;
  r.set.role = role_from_name(header.at("role").get<std::string>());
  r.set.class_count = header.at("class_count").get<int>();
  r.seed = header.at("seed").get<uint64_t>();
  r.spec = spec_from_json(header.at("spec"));
  const auto shape = header.at("shape").get<std::vector<int>>();
  r.set.images = Tensor<float>(shape);
  in.read(reinterpret_cast<char*>(r.set.images.v.data()),
          std::streamsize(r.set.images.v.size() * sizeof(float)));
  std::vector<int32_t> labels(size_t(shape.at(0)));
  in.read(reinterpret_cast<char*>(labels.data()), std::streamsize(labels.size() * sizeof(int32_t)));
  if (!in) throw prereq_error("dataset file '" + path + "' is truncated");
  r.set.labels.assign(labels.begin(), labels.end());
  return r;
}

}  // namespace dcsod
