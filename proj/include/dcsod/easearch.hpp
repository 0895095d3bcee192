#pragma once

// Aging evolution over the cell search space. Fitness comes from a scoring
// callback, normally the trained predictor, so tests can swap in exhaustive
// lookup tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dcsod/predictor.hpp"

namespace dcsod {

struct PopMember {
  ArchEncoding encoding;
  double predicted = 0;
  int64_t age = 0;
};

// Fixed-capacity queue, oldest member at the front, plus the best score ever
// inserted. Eviction is strictly by age; the best record survives eviction.
struct Population {
  int capacity = 0;
  std::deque<PopMember> members;
  PopMember best;
  bool has_best = false;

  void insert(PopMember m) {
    if (capacity < 1) throw internal_error("population capacity unset");
    if (!members.empty() && m.age <= members.back().age)
      throw internal_error("population ages must increase");
    if (!has_best || m.predicted > best.predicted) {
      best = m;
      has_best = true;
    }
    members.push_back(std::move(m));
    if (int(members.size()) > capacity) members.pop_front();
  }
};

enum class MutationKind { init, edge_flip, resample };

inline const char* to_string(MutationKind k) {
  switch (k) {
    case MutationKind::init: return "init";
    case MutationKind::edge_flip: return "edge_flip";
    case MutationKind::resample: return "resample";
  }
  throw internal_error("unknown mutation kind");
}

struct EvolveConfig {
  int k = 6;
  int budget = 2000;
  int pop_size = 64;
  int sample_size = 8;
  // Probability an evolution step flips one edge bit; otherwise one cell is
  // resampled wholesale.
  double mutation_mix = 0.9;
  double edge_probability = 0.5;
  int top_m = 5;
};

struct TraceRow {
  int step = 0;
  double best_predicted = 0;
  MutationKind kind = MutationKind::init;
};

struct ScoredArch {
  ArchEncoding encoding;
  double predicted = 0;
};

struct EvolveResult {
  std::vector<ScoredArch> top;
  Population population;
  std::vector<TraceRow> trace;
};

using ScoreFn = std::function<double(const ArchEncoding&)>;

inline EvolveResult evolve_with(const ScoreFn& score, const EvolveConfig& cfg, uint64_t seed) {
  if (cfg.k < 2) throw config_error("evolve needs k >= 2");
  if (cfg.sample_size < 1) throw config_error("evolve needs sample_size >= 1");
  if (cfg.pop_size < cfg.sample_size)
    throw config_error("evolve needs pop_size >= sample_size");
  if (cfg.budget < cfg.pop_size) throw config_error("evolve needs budget >= pop_size");
  if (!(cfg.mutation_mix >= 0 && cfg.mutation_mix <= 1))
    throw config_error("mutation_mix must be in [0,1]");
  if (!(cfg.edge_probability >= 0 && cfg.edge_probability <= 1))
    throw config_error("edge_probability must be in [0,1]");
  if (cfg.top_m < 1) throw config_error("evolve needs top_m >= 1");
  if (!score) throw config_error("evolve needs a scoring function");

  EvolveResult res;
  res.population.capacity = cfg.pop_size;
  Population& pop = res.population;
  std::map<ArchEncoding, double> evaluated;
  int64_t age = 0;
  Rng rng(derive_seed(seed, {0xea01}));

  auto eval_insert = [&](const Architecture& arch, MutationKind kind) {
    validate_architecture(arch);
    ArchEncoding enc = encode(arch);
    const double s = score(enc);
    if (!std::isfinite(s)) throw numeric_error("non-finite predicted score for " + enc);
    evaluated.emplace(enc, s);
    pop.insert({enc, s, age});
    ++age;
    res.trace.push_back({int(age), pop.best.predicted, kind});
  };

  for (int i = 0; i < cfg.pop_size; ++i)
    eval_insert(sample_random(cfg.k, cfg.edge_probability, rng.next()), MutationKind::init);

  for (int step = cfg.pop_size; step < cfg.budget; ++step) {
    const PopMember* winner = nullptr;
    for (int t = 0; t < cfg.sample_size; ++t) {
      const PopMember& cand = pop.members[size_t(rng.below(uint64_t(pop.members.size())))];
      if (!winner || cand.predicted > winner->predicted ||
          (cand.predicted == winner->predicted && cand.age > winner->age))
        winner = &cand;
    }
    const Architecture parent = decode(winner->encoding, cfg.k);
    const bool flip = rng.bernoulli(cfg.mutation_mix);
    const Architecture child = flip
                                   ? mutate_edge(parent, rng.next())
                                   : mutate_resample(parent, rng.next(), cfg.edge_probability);
    eval_insert(child, flip ? MutationKind::edge_flip : MutationKind::resample);
  }

  // Rank everything ever scored, not just survivors; aging evicts good
  // candidates long before the budget runs out.
  std::vector<ScoredArch> ranked;
  ranked.reserve(evaluated.size());
  for (const auto& [enc, s] : evaluated) ranked.push_back({enc, s});
  std::sort(ranked.begin(), ranked.end(), [](const ScoredArch& a, const ScoredArch& b) {
    if (a.predicted != b.predicted) return a.predicted > b.predicted;
    return a.encoding < b.encoding;
  });
  if (int(ranked.size()) > cfg.top_m) ranked.resize(size_t(cfg.top_m));
  res.top = std::move(ranked);
  return res;
}

inline EvolveResult evolve(const PredictorModel& model, const EvolveConfig& cfg, uint64_t seed) {
  const int bits = 3 * edge_universe_size(cfg.k);
  if (model.input_len != bits)
    throw config_error("predictor expects " + std::to_string(model.input_len) +
                       " bits but k=" + std::to_string(cfg.k) + " encodes to " +
                       std::to_string(bits));
  return evolve_with([&model](const ArchEncoding& e) { return predict(model, e); }, cfg, seed);
}

inline std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::string out = "step,best_predicted,mutation_kind\n";
  for (const TraceRow& r : rows) {
    out += std::to_string(r.step);
    out += ',';
    out += fmt_exact(r.best_predicted);
    out += ',';
    out += to_string(r.kind);
    out += '\n';
  }
  return out;
}

inline void save_trace(const std::vector<TraceRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw prereq_error("cannot open trace file for writing: " + path);
  f << trace_to_csv(rows);
  if (!f) throw prereq_error("trace write failed: " + path);
}

inline nlohmann::json scored_arch_to_json(const ScoredArch& s, int k, int rank) {
  const Architecture arch = decode(s.encoding, k);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["rank"] = rank;
  j["id"] = arch_id(arch);
  j["encoding"] = s.encoding;
  j["predicted"] = s.predicted;
  j["architecture"] = arch_to_json(arch);
  return j;
}

// One JSON file per candidate: top_01_<id>.json, top_02_<id>.json, ...
inline std::vector<std::string> save_top_list(const std::vector<ScoredArch>& top, int k,
                                              const std::string& dir) {
  if (top.empty()) throw config_error("save_top_list on an empty top list");
  std::vector<std::string> paths;
  for (size_t i = 0; i < top.size(); ++i) {
    const nlohmann::json j = scored_arch_to_json(top[i], k, int(i) + 1);
    char rank[8];
    std::snprintf(rank, sizeof rank, "%02zu", i + 1);
    const std::string path =
        dir + "/top_" + rank + "_" + j["id"].get<std::string>() + ".json";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw prereq_error("cannot open top-list file for writing: " + path);
    f << j.dump(2) << '\n';
    if (!f) throw prereq_error("top-list write failed: " + path);
    paths.push_back(path);
  }
  return paths;
}

// Retrains the strongest candidates with the saved teachers and picks the
// winner on the test split; iteration -1 marks the record as post-search.
inline ArchRecord rerank_and_retrain(const std::vector<ScoredArch>& top_list, int m,
                                     const TeacherSet<float>& teachers, const Benchmark& bench,
                                     const SearchConfig& cfg, uint64_t seed) {
  if (top_list.empty()) throw config_error("rerank_and_retrain needs a non-empty top list");
  if (m < 1) throw config_error("rerank_and_retrain needs m >= 1");
  if (teachers.empty()) throw prereq_error("rerank_and_retrain needs a saved teacher set");
  const int take = std::min(m, int(top_list.size()));

  Tensor<float> id_pt = teacher_predict_all(teachers, bench.id_train.images, cfg.distill_cfg.T);
  Tensor<float> out_pt =
      teacher_predict_all(teachers, bench.aux_outlier.images, cfg.distill_cfg.T);
  TrainData data;
  data.id_train = &bench.id_train;
  data.outliers = &bench.aux_outlier;
  data.id_teacher_probs = &id_pt;
  data.out_teacher_probs = &out_pt;

  EvalOptions opts;
  opts.methods = cfg.methods;
  opts.use_test_split = true;

  std::vector<ArchRecord> records(static_cast<size_t>(take));
  std::vector<Network<float>> nets(static_cast<size_t>(take));
  parallel_for_ordered(take, cfg.workers, [&](int i) {
    const uint64_t train_seed = derive_seed(seed, {0xea7e, uint64_t(i)});
    const Architecture arch = decode(top_list[size_t(i)].encoding, cfg.k);
    auto r = train_candidate(arch, data, cfg.distill_cfg, cfg.epochs, train_seed, &teachers,
                             cfg.train);
    freeze_on_reference(r.net, bench.id_train, cfg.freeze_reference);
    const EvalRecord ev = evaluate(r.net, bench, opts);
    records[size_t(i)] = detail::make_record(arch, ev, TrainMode::distill, -1, train_seed);
    nets[size_t(i)] = std::move(r.net);
  });

  int best = 0;
  for (int i = 1; i < take; ++i) {
    const double a = records[size_t(i)].auroc_for(cfg.primary);
    const double b = records[size_t(best)].auroc_for(cfg.primary);
    if (a > b || (a == b && records[size_t(i)].encoding < records[size_t(best)].encoding))
      best = i;
  }
  if (!cfg.checkpoint_dir.empty()) {
    records[size_t(best)].checkpoint =
        cfg.checkpoint_dir + "/final_" + records[size_t(best)].id + ".ckpt";
    save_checkpoint(nets[size_t(best)], records[size_t(best)].checkpoint);
  }
  return records[size_t(best)];
}

}  // namespace dcsod
