#include "mwp/harness.hpp"

#include "mwp/error.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

namespace mwp::harness {

std::string fingerprint(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : r.buckets) {
    buckets.push_back({{"label", b.label}, {"size", b.size}, {"correct", b.correct}, {"accuracy", b.accuracy}});
  }
  nlohmann::json records = nlohmann::json::array();
  for (const auto& rec : r.records) records.push_back(infer::to_json(rec));
  return {{"dataset", r.dataset},   {"K", r.k},
          {"accuracy", r.accuracy}, {"correct", r.correct},
          {"total", r.total},       {"buckets", buckets},
          {"records", records},     {"config_fingerprint", r.config_fingerprint},
          {"seconds", r.seconds}};
}

std::array<Bucket, 4> difficulty_buckets(const Dataset& test) {
  if (test.size() < 4) throw DataError("difficulty buckets need at least 4 problems");
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto la = test[a].expression.size();
    const auto lb = test[b].expression.size();
    if (la != lb) return la < lb;
    return test[a].id < test[b].id;
  });
  static const char* labels[] = {"easy", "medium", "upper", "hard"};
  std::array<Bucket, 4> out;
  const std::size_t n = test.size();
  for (std::size_t b = 0; b < 4; ++b) {
    out[b].label = labels[b];
    out[b].members.assign(order.begin() + static_cast<std::ptrdiff_t>(b * n / 4),
                          order.begin() + static_cast<std::ptrdiff_t>((b + 1) * n / 4));
  }
  return out;
}

EvalReport evaluate(const Bundle& bundle, const Dataset& test, int k, const InferConfig& config,
                    const std::string& tag) {
  if (test.empty()) throw DataError("empty dataset");
  const auto started = std::chrono::steady_clock::now();
  const infer::Solver solver(bundle, config);
  EvalReport r;
  r.dataset = tag;
  r.k = k;
  r.total = test.size();
  std::vector<bool> ok(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto rec = solver.solve(test[i], k);
    ok[i] = rec.correct.value_or(false);
    if (ok[i]) ++r.correct;
    r.records.push_back(std::move(rec));
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  if (test.size() >= 4) {
    for (const auto& b : difficulty_buckets(test)) {
      BucketAccuracy ba;
      ba.label = b.label;
      ba.size = b.members.size();
      for (auto i : b.members) ba.correct += ok[i] ? 1 : 0;
      ba.accuracy = ba.size ? static_cast<double>(ba.correct) / static_cast<double>(ba.size) : 0.0;
      r.buckets.push_back(ba);
    }
  }
  std::sort(r.records.begin(), r.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  nlohmann::json fp = bundle.config();
  fp["eval_infer"] = config;
  r.config_fingerprint = fingerprint(fp);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

std::vector<EvalReport> k_sweep(const Bundle& bundle, const Dataset& test, const std::vector<int>& ks,
                                const InferConfig& config, std::ostream* warnings, const std::string& tag) {
  std::vector<EvalReport> out;
  std::set<int> seen;
  for (int k : ks) {
    if (!seen.insert(k).second) {
      if (warnings) *warnings << "warning: duplicate K=" << k << " ignored\n";
      continue;
    }
    out.push_back(evaluate(bundle, test, k, config, tag));
  }
  return out;
}

std::string sweep_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "K,accuracy\n";
  for (const auto& r : reports) os << r.k << "," << r.accuracy << "\n";
  return os.str();
}

std::vector<AblationArm> ablation_arms() {
  return {{"full", true, true, true},
          {"w/o EN", false, true, true},
          {"w/o Copy", true, false, true},
          {"w/o Memory", true, true, false},
          {"w/o All", false, false, false}};
}

TrainConfig apply_arm(const AblationArm& arm, TrainConfig base) {
  base.equation_normalization = arm.equation_normalization;
  base.copy = arm.copy;
  base.memory = arm.memory;
  return base;
}

std::vector<AblationRow> ablate(const Dataset& train, const Dataset& test, const TrainConfig& base,
                                const AblateOptions& options) {
  if (test.empty()) throw DataError("empty dataset");
  std::vector<AblationRow> rows;
  for (const auto& arm : ablation_arms()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), arm.name) == options.only.end()) {
      continue;
    }
    const TrainConfig cfg = apply_arm(arm, base);
    Bundle bundle = Bundle::prepare(train, cfg);
    train::TrainOptions topt;
    if (!options.out_dir.empty()) {
      std::string dir = arm.name;
      std::replace(dir.begin(), dir.end(), '/', '_');
      std::replace(dir.begin(), dir.end(), ' ', '_');
      topt.out_dir = options.out_dir / dir;
    }
    const auto result = train::train(bundle, train, topt);
    AblationRow row;
    row.arm = arm.name;
    row.k = cfg.memory ? 1 : 0;
    row.epochs = static_cast<int>(result.history.size());
    row.accuracy = evaluate(bundle, test, row.k, cfg.infer).accuracy;
    if (options.log) *options.log << arm.name << ": accuracy " << row.accuracy << " at K=" << row.k << "\n";
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "arm,K,accuracy\n";
  for (const auto& r : rows) os << r.arm << "," << r.k << "," << r.accuracy << "\n";
  return os.str();
}

}  // namespace mwp::harness
