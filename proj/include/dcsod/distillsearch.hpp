#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dcsod/checkpoint.hpp"
#include "dcsod/oodeval.hpp"

namespace dcsod {

struct ArchRecord {
  std::string id;
  ArchEncoding encoding;
  int k = 0;
  TrainMode mode = TrainMode::oe;
  int iteration = 0;
  uint64_t seed = 0;
  double id_acc = 0;
  std::vector<std::pair<ScoreMethod, double>> aurocs;
  std::string checkpoint;

  double auroc_for(ScoreMethod m) const {
    for (const auto& [method, v] : aurocs)
      if (method == m) return v;
    throw config_error(std::string("record has no auroc for method ") + method_name(m));
  }
  Architecture architecture() const { return decode(encoding, k); }
};

// Latest record per architecture plus the full append-only audit trail.
class History {
 public:
  void add(ArchRecord r) {
    if (r.iteration < 0) throw config_error("record iteration must be >= 0");
    if (r.encoding.empty()) throw config_error("record needs an encoding");
    for (const auto& [method, v] : r.aurocs)
      if (!(v >= 0.0 && v <= 1.0))
        throw config_error(std::string("auroc out of [0,1] for ") + method_name(method));
    auto it = latest_.find(r.encoding);
    if (it == latest_.end()) {
      order_.push_back(r.encoding);
      latest_[r.encoding] = audit_.size();
    } else {
      it->second = audit_.size();
    }
    audit_.push_back(std::move(r));
  }

  size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  const std::vector<ArchRecord>& audit() const { return audit_; }

  const ArchRecord* find(const ArchEncoding& enc) const {
    auto it = latest_.find(enc);
    return it == latest_.end() ? nullptr : &audit_[it->second];
  }

  // Current records in first-seen order.
  std::vector<const ArchRecord*> current() const {
    std::vector<const ArchRecord*> out;
    out.reserve(order_.size());
    for (const auto& enc : order_) out.push_back(&audit_[latest_.at(enc)]);
    return out;
  }

  double mean_auroc(ScoreMethod m) const {
    if (order_.empty()) throw config_error("mean_auroc on empty history");
    double sum = 0;
    for (const ArchRecord* r : current()) sum += r->auroc_for(m);
    return sum / double(order_.size());
  }

 private:
  std::vector<ArchRecord> audit_;
  std::vector<ArchEncoding> order_;
  std::map<ArchEncoding, size_t> latest_;
};

inline nlohmann::json record_to_json(const ArchRecord& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["id"] = r.id;
  j["encoding"] = r.encoding;
  j["k"] = r.k;
  j["mode"] = mode_name(r.mode);
  j["iteration"] = r.iteration;
  j["seed"] = r.seed;
  j["id_acc"] = r.id_acc;
  nlohmann::json a = nlohmann::json::array();
  for (const auto& [method, v] : r.aurocs)
    a.push_back(nlohmann::json::array({method_name(method), v}));
  j["aurocs"] = a;
  j["checkpoint"] = r.checkpoint;
  return j;
}

inline ArchRecord record_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", -1) != 1) throw prereq_error("unsupported record version");
  ArchRecord r;
  r.id = j.at("id").get<std::string>();
  r.encoding = j.at("encoding").get<std::string>();
  r.k = j.at("k").get<int>();
  r.mode = mode_from_name(j.at("mode").get<std::string>());
  r.iteration = j.at("iteration").get<int>();
  r.seed = j.at("seed").get<uint64_t>();
  r.id_acc = j.at("id_acc").get<double>();
  for (const auto& e : j.at("aurocs"))
    r.aurocs.emplace_back(method_from_name(e.at(0).get<std::string>()), e.at(1).get<double>());
  r.checkpoint = j.value("checkpoint", std::string());
  return r;
}

inline void save_history(const History& h, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw prereq_error("cannot open history for writing: " + path);
  for (const ArchRecord& r : h.audit()) f << record_to_json(r).dump() << '\n';
  if (!f) throw prereq_error("history write failed: " + path);
}

inline History load_history(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw prereq_error("missing history file: " + path);
  History h;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw prereq_error("corrupt history line " + std::to_string(lineno) + " in " + path);
    h.add(record_from_json(j));
  }
  return h;
}

struct SearchConfig {
  int k = 6;
  double edge_probability = 0.5;
  int epochs = 4;
  TrainOptions train;
  LossConfig oe_cfg = LossConfig::oe();
  LossConfig distill_cfg = LossConfig::distill();
  std::vector<ScoreMethod> methods{ScoreMethod::msp, ScoreMethod::energy};
  ScoreMethod primary = ScoreMethod::msp;
  double top_fraction = 0.10;
  double random_fraction = 0.05;
  // Absolute teacher counts override the fractions when >= 0 (paper's
  // 2000-arch instance uses exactly 10 top + 1 random).
  int top_count = -1;
  int random_count = -1;
  double max_failure_fraction = 0.2;
  int freeze_reference = 128;
  int workers = 1;
  std::string checkpoint_dir;
};

namespace detail {

inline std::string checkpoint_path(const SearchConfig& cfg, const std::string& id,
                                   int iteration) {
  return cfg.checkpoint_dir + "/" + id + "_it" + std::to_string(iteration) + ".ckpt";
}

struct TrainedEval {
  Network<float> net;
  EvalRecord eval;
};

inline TrainedEval train_and_eval(const Architecture& arch, const Benchmark& bench,
                                  const LossConfig& lc, const TeacherSet<float>* teachers,
                                  const TrainData& data, int epochs, uint64_t seed,
                                  const SearchConfig& cfg) {
  TrainedEval out;
  auto r = train_candidate(arch, data, lc, epochs, seed, teachers, cfg.train);
  out.net = std::move(r.net);
  freeze_on_reference(out.net, bench.id_train, cfg.freeze_reference);
  EvalOptions opts;
  opts.methods = cfg.methods;
  out.eval = evaluate(out.net, bench, opts);
  return out;
}

inline ArchRecord make_record(const Architecture& arch, const EvalRecord& ev, TrainMode mode,
                              int iteration, uint64_t seed) {
  ArchRecord r;
  r.id = arch_id(arch);
  r.encoding = encode(arch);
  r.k = arch.k();
  r.mode = mode;
  r.iteration = iteration;
  r.seed = seed;
  r.id_acc = ev.id_acc;
  r.aurocs = ev.aurocs;
  return r;
}

inline std::vector<Architecture> sample_distinct(int n, const SearchConfig& cfg, uint64_t seed) {
  const auto space = space_size(cfg.k);
  if (space < n)
    throw config_error("search space holds " + space.str() + " architectures, cannot sample " +
                       std::to_string(n) + " distinct ones");
  std::vector<Architecture> out;
  std::map<ArchEncoding, bool> seen;
  if (space <= 4096) {
    // Small spaces: enumerate, shuffle, take the first n.
    const int m = edge_universe_size(cfg.k);
    std::vector<ArchEncoding> all;
    const uint64_t total = uint64_t(1) << unsigned(3 * m);
    for (uint64_t x = 0; x < total; ++x) {
      ArchEncoding bits(size_t(3 * m), '0');
      for (int b = 0; b < 3 * m; ++b)
        if ((x >> unsigned(b)) & 1) bits[size_t(b)] = '1';
      all.push_back(std::move(bits));
    }
    Rng rng(derive_seed(seed, {0xb50}));
    rng.shuffle(all);
    for (int i = 0; i < n; ++i) out.push_back(decode(all[size_t(i)], cfg.k));
    return out;
  }
  uint64_t tries = 0;
  const uint64_t cap = 200 * uint64_t(n) + 10000;
  while (int(out.size()) < n) {
    if (tries >= cap)
      throw internal_error("architecture sampling stalled after " + std::to_string(tries) +
                           " draws with " + std::to_string(out.size()) + " distinct");
    Architecture a = sample_random(cfg.k, cfg.edge_probability, derive_seed(seed, {0xb51, tries}));
    ++tries;
    ArchEncoding enc = encode(a);
    if (seen.emplace(std::move(enc), true).second) out.push_back(std::move(a));
  }
  return out;
}

}  // namespace detail

inline History bootstrap(int n, const Benchmark& bench, const SearchConfig& cfg, uint64_t seed) {
  if (n < 2) throw config_error("bootstrap needs N >= 2");
  const std::vector<Architecture> archs = detail::sample_distinct(n, cfg, seed);

  TrainData data;
  data.id_train = &bench.id_train;
  data.outliers = &bench.aux_outlier;

  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  std::vector<ArchRecord> records(static_cast<size_t>(n));
  parallel_for_ordered(n, cfg.workers, [&](int i) {
    const uint64_t train_seed = derive_seed(seed, {0xb52, uint64_t(i)});
    auto te = detail::train_and_eval(archs[size_t(i)], bench, cfg.oe_cfg, nullptr, data,
                                     cfg.epochs, train_seed, cfg);
    ArchRecord r = detail::make_record(archs[size_t(i)], te.eval, TrainMode::oe, 0, train_seed);
    if (!cfg.checkpoint_dir.empty()) {
      r.checkpoint = detail::checkpoint_path(cfg, r.id, 0);
      save_checkpoint(te.net, r.checkpoint);
    }
    records[size_t(i)] = std::move(r);
  });

  History h;
  for (ArchRecord& r : records) h.add(std::move(r));
  return h;
}

// Top teachers by current AUROC (ties broken by encoding order) plus uniform
// draws from the remainder.
inline std::vector<ArchEncoding> select_teachers_by_count(const History& h, int top_n,
                                                          int random_n, uint64_t seed,
                                                          ScoreMethod method = ScoreMethod::msp) {
  if (h.empty()) throw config_error("select_teachers on empty history");
  if (top_n < 0 || random_n < 0) throw config_error("teacher counts must be >= 0");
  std::vector<const ArchRecord*> recs = h.current();
  std::sort(recs.begin(), recs.end(), [&](const ArchRecord* a, const ArchRecord* b) {
    const double va = a->auroc_for(method), vb = b->auroc_for(method);
    if (va != vb) return va > vb;
    return a->encoding < b->encoding;
  });
  top_n = std::min<int>(top_n, int(recs.size()));
  random_n = std::min<int>(random_n, int(recs.size()) - top_n);

  std::vector<ArchEncoding> out;
  for (int i = 0; i < top_n; ++i) out.push_back(recs[size_t(i)]->encoding);
  std::vector<const ArchRecord*> remainder(recs.begin() + top_n, recs.end());
  Rng rng(derive_seed(seed, {0x5e1e}));
  for (int i = 0; i < random_n; ++i) {
    const size_t pick = size_t(i) + size_t(rng.below(uint64_t(remainder.size() - size_t(i))));
    std::swap(remainder[size_t(i)], remainder[pick]);
    out.push_back(remainder[size_t(i)]->encoding);
  }
  if (out.empty()) throw config_error("teacher selection produced no teachers");
  return out;
}

inline std::vector<ArchEncoding> select_teachers(const History& h, double top_fraction,
                                                 double random_fraction, uint64_t seed,
                                                 ScoreMethod method = ScoreMethod::msp) {
  if (!(top_fraction >= 0) || !(random_fraction >= 0) || !std::isfinite(top_fraction) ||
      !std::isfinite(random_fraction))
    throw config_error("teacher fractions must be finite and >= 0");
  const double n = double(h.size());
  return select_teachers_by_count(h, int(std::ceil(top_fraction * n)),
                                  int(std::ceil(random_fraction * n)), seed, method);
}

struct TeacherManifestEntry {
  std::string id;
  ArchEncoding encoding;
  int k = 0;
  std::string checkpoint;
};

// Everything needed to rebuild a TeacherSet: member weights plus the compile
// and freezing context.
struct TeacherManifest {
  double T = 20.0;
  int class_count = 0;
  std::array<int, 3> stage_widths = kDefaultStageWidths;
  int freeze_reference = 128;
  std::vector<TeacherManifestEntry> members;
};

inline void save_teacher_manifest(const TeacherManifest& m, const std::string& path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["T"] = m.T;
  j["class_count"] = m.class_count;
  j["stage_widths"] = std::vector<int>(m.stage_widths.begin(), m.stage_widths.end());
  j["freeze_reference"] = m.freeze_reference;
  nlohmann::json members = nlohmann::json::array();
  for (const auto& e : m.members) {
    nlohmann::json je;
    je["id"] = e.id;
    je["encoding"] = e.encoding;
    je["k"] = e.k;
    je["checkpoint"] = e.checkpoint;
    members.push_back(je);
  }
  j["members"] = members;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw prereq_error("cannot open teacher manifest for writing: " + path);
  f << j.dump(2) << '\n';
  if (!f) throw prereq_error("teacher manifest write failed: " + path);
}

inline TeacherManifest load_teacher_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw prereq_error("missing teacher manifest: " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw prereq_error("corrupt teacher manifest: " + path);
  if (j.value("schema_version", -1) != 1)
    throw prereq_error("unsupported teacher manifest version in " + path);
  TeacherManifest m;
  m.T = j.at("T").get<double>();
  m.class_count = j.at("class_count").get<int>();
  const auto widths = j.at("stage_widths").get<std::vector<int>>();
  if (widths.size() != 3) throw prereq_error("teacher manifest needs 3 stage widths");
  std::copy_n(widths.begin(), 3, m.stage_widths.begin());
  m.freeze_reference = j.at("freeze_reference").get<int>();
  for (const auto& je : j.at("members")) {
    TeacherManifestEntry e;
    e.id = je.at("id").get<std::string>();
    e.encoding = je.at("encoding").get<std::string>();
    e.k = je.at("k").get<int>();
    e.checkpoint = je.at("checkpoint").get<std::string>();
    m.members.push_back(std::move(e));
  }
  return m;
}

inline TeacherSet<float> load_teacher_set(const TeacherManifest& m, const Benchmark& bench) {
  if (m.members.empty()) throw prereq_error("teacher manifest has no members");
  TeacherSet<float> ts;
  ts.T = m.T;
  const InputSpec input{bench.id_train.images.shape[1], bench.id_train.images.shape[2],
                        bench.id_train.images.shape[3]};
  for (const auto& e : m.members) {
    Network<float> net =
        compile<float>(decode(e.encoding, e.k), input, m.class_count, m.stage_widths, 1);
    load_checkpoint(net, e.checkpoint);
    freeze_on_reference(net, bench.id_train, m.freeze_reference);
    ts.members.push_back(std::move(net));
    ts.member_ids.push_back(e.id);
  }
  return ts;
}

struct IterateOutcome {
  TeacherSet<float> teachers;
  std::vector<ArchEncoding> teacher_encodings;
  // Mean primary AUROC over current records; index 0 is the state before the
  // first iteration, one more entry per completed iteration.
  std::vector<double> mean_auroc;
  std::vector<int> failures;
};

inline IterateOutcome iterate(History& history, const Benchmark& bench, const SearchConfig& cfg,
                              int iterations, uint64_t seed) {
  if (history.empty()) throw config_error("iterate needs a bootstrapped history");
  if (iterations < 1) throw config_error("iterate needs iterations >= 1");
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  // Nets matching each current record, for architectures trained in this
  // process. Teachers selected from records without a live net are rebuilt
  // from their checkpoint, or retrained when the record is reproducible
  // without a teacher ensemble.
  std::map<ArchEncoding, Network<float>> nets;

  TrainData base;
  base.id_train = &bench.id_train;
  base.outliers = &bench.aux_outlier;

  IterateOutcome outcome;
  outcome.mean_auroc.push_back(history.mean_auroc(cfg.primary));

  const int start_iteration = [&] {
    int it = 0;
    for (const ArchRecord* r : history.current()) it = std::max(it, r->iteration);
    return it;
  }();

  for (int step = 1; step <= iterations; ++step) {
    const int it = start_iteration + step;
    const int top_n = cfg.top_count >= 0
                          ? cfg.top_count
                          : int(std::ceil(cfg.top_fraction * double(history.size())));
    const int rand_n = cfg.random_count >= 0
                           ? cfg.random_count
                           : int(std::ceil(cfg.random_fraction * double(history.size())));
    outcome.teacher_encodings = select_teachers_by_count(
        history, top_n, rand_n, derive_seed(seed, {0xd1, uint64_t(it)}), cfg.primary);

    TeacherSet<float> ts;
    ts.T = cfg.distill_cfg.T;
    for (const ArchEncoding& enc : outcome.teacher_encodings) {
      const ArchRecord* rec = history.find(enc);
      auto hit = nets.find(enc);
      if (hit != nets.end()) {
        ts.members.push_back(hit->second);
      } else if (!rec->checkpoint.empty()) {
        Network<float> net = compile<float>(
            rec->architecture(),
            InputSpec{bench.id_train.images.shape[1], bench.id_train.images.shape[2],
                      bench.id_train.images.shape[3]},
            bench.id_train.class_count, cfg.train.stage_widths, 1);
        load_checkpoint(net, rec->checkpoint);
        freeze_on_reference(net, bench.id_train, cfg.freeze_reference);
        ts.members.push_back(std::move(net));
      } else if (rec->mode != TrainMode::distill) {
        const LossConfig lc = rec->mode == TrainMode::oe ? cfg.oe_cfg : LossConfig::ce();
        auto te = detail::train_and_eval(rec->architecture(), bench, lc, nullptr, base,
                                         cfg.epochs, rec->seed, cfg);
        ts.members.push_back(std::move(te.net));
      } else {
        throw prereq_error("teacher " + rec->id +
                           " was distill-trained but has no checkpoint to rebuild from");
      }
      ts.member_ids.push_back(rec->id);
    }

    if (!cfg.checkpoint_dir.empty()) {
      TeacherManifest manifest;
      manifest.T = ts.T;
      manifest.class_count = bench.id_train.class_count;
      manifest.stage_widths = cfg.train.stage_widths;
      manifest.freeze_reference = cfg.freeze_reference;
      for (size_t m = 0; m < ts.members.size(); ++m) {
        const ArchRecord* rec = history.find(outcome.teacher_encodings[m]);
        std::string path = cfg.checkpoint_dir + "/teacher_it" + std::to_string(it) + "_" +
                           rec->id + ".ckpt";
        save_checkpoint(ts.members[m], path);
        manifest.members.push_back({rec->id, rec->encoding, rec->k, path});
      }
      save_teacher_manifest(manifest,
                            cfg.checkpoint_dir + "/teachers_it" + std::to_string(it) + ".json");
    }

    Tensor<float> id_pt =
        teacher_predict_all(ts, bench.id_train.images, cfg.distill_cfg.T);
    Tensor<float> out_pt =
        teacher_predict_all(ts, bench.aux_outlier.images, cfg.distill_cfg.T);
    TrainData data = base;
    data.id_teacher_probs = &id_pt;
    data.out_teacher_probs = &out_pt;

    const std::vector<const ArchRecord*> pool = history.current();
    const int n = int(pool.size());
    std::vector<ArchRecord> fresh(static_cast<size_t>(n));
    std::vector<Network<float>> fresh_nets(static_cast<size_t>(n));
    std::vector<char> ok(size_t(n), 0);
    parallel_for_ordered(n, cfg.workers, [&](int i) {
      const uint64_t train_seed = derive_seed(seed, {0xd2, uint64_t(it), uint64_t(i)});
      const Architecture arch = pool[size_t(i)]->architecture();
      try {
        auto te = detail::train_and_eval(arch, bench, cfg.distill_cfg, &ts, data, cfg.epochs,
                                         train_seed, cfg);
        ArchRecord r = detail::make_record(arch, te.eval, TrainMode::distill, it, train_seed);
        if (!cfg.checkpoint_dir.empty()) {
          r.checkpoint = detail::checkpoint_path(cfg, r.id, it);
          save_checkpoint(te.net, r.checkpoint);
        }
        fresh[size_t(i)] = std::move(r);
        fresh_nets[size_t(i)] = std::move(te.net);
        ok[size_t(i)] = 1;
      } catch (const Error& e) {
        if (e.kind() != Error::Kind::numeric) throw;
      }
    });

    int failed = 0;
    for (char c : ok)
      if (!c) ++failed;
    if (double(failed) > cfg.max_failure_fraction * double(n))
      throw numeric_error("iteration " + std::to_string(it) + ": " + std::to_string(failed) +
                          " of " + std::to_string(n) + " retraining runs failed");
    for (int i = 0; i < n; ++i) {
      if (!ok[size_t(i)]) continue;
      nets[fresh[size_t(i)].encoding] = std::move(fresh_nets[size_t(i)]);
      history.add(std::move(fresh[size_t(i)]));
    }
    outcome.failures.push_back(failed);
    outcome.mean_auroc.push_back(history.mean_auroc(cfg.primary));
    outcome.teachers = std::move(ts);
  }
  return outcome;
}

struct PredictorRow {
  ArchEncoding encoding;
  double auroc = 0;
  double id_acc = 0;
};

inline std::vector<PredictorRow> export_predictor_dataset(const History& h,
                                                          ScoreMethod method = ScoreMethod::msp) {
  if (h.empty()) throw config_error("export_predictor_dataset on empty history");
  std::vector<PredictorRow> rows;
  for (const ArchRecord* r : h.current())
    rows.push_back({r->encoding, r->auroc_for(method), r->id_acc});
  std::sort(rows.begin(), rows.end(),
            [](const PredictorRow& a, const PredictorRow& b) { return a.encoding < b.encoding; });
  return rows;
}

inline std::string predictor_dataset_to_csv(const std::vector<PredictorRow>& rows) {
  std::string out = "encoding,auroc,id_acc\n";
  for (const PredictorRow& r : rows) {
    out += r.encoding;
    out += ',';
    out += fmt_exact(r.auroc);
    out += ',';
    out += fmt_exact(r.id_acc);
    out += '\n';
  }
  return out;
}

inline void save_predictor_dataset(const std::vector<PredictorRow>& rows,
                                   const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw prereq_error("cannot open predictor dataset for writing: " + path);
  f << predictor_dataset_to_csv(rows);
  if (!f) throw prereq_error("predictor dataset write failed: " + path);
}

inline std::vector<PredictorRow> load_predictor_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw prereq_error("missing predictor dataset: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "encoding,auroc,id_acc")
    throw prereq_error("predictor dataset header mismatch in " + path);
  std::vector<PredictorRow> rows;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos)
      throw prereq_error("predictor dataset line " + std::to_string(lineno) +
                         " is not encoding,auroc,id_acc");
    PredictorRow r;
    r.encoding = line.substr(0, c1);
    for (char ch : r.encoding)
      if (ch != '0' && ch != '1')
        throw prereq_error("bad encoding on predictor dataset line " + std::to_string(lineno));
    try {
      r.auroc = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      r.id_acc = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw prereq_error("bad number on predictor dataset line " + std::to_string(lineno));
    }
    if (!(r.auroc >= 0.0 && r.auroc <= 1.0))
      throw prereq_error("auroc out of [0,1] on predictor dataset line " + std::to_string(lineno));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dcsod
