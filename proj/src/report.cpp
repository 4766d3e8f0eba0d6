#include "psr/report.hpp"

#include <filesystem>
#include <fstream>

namespace psr {

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("report: cannot create directory " + path + ": " + ec.message());
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("report: cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw IoError("report: write failed for " + path);
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("report: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ValidationError("report: malformed json in " + path + ": " + e.what());
  }
  return j;
}

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path);
  if (!f) throw IoError("report: cannot open " + path + " for writing");
  for (const auto& e : log) {
    nlohmann::json j{{"step", e.step},
                     {"loss", e.loss},
                     {"objective", e.objective},
                     {"reg", e.reg},
                     {"grad_norm", e.grad_norm}};
    f << j.dump() << "\n";
  }
  if (!f) throw IoError("report: write failed for " + path);
}

void write_curve_csv(const std::string& path, const std::vector<EvalPoint>& points) {
  std::ofstream f(path);
  if (!f) throw IoError("report: cannot open " + path + " for writing");
  f << "alpha,mean_coher,mean_attr,n_samples\n";
  for (const auto& p : points)
    f << p.alpha << "," << p.mean_coher << "," << p.mean_attr << "," << p.n_samples << "\n";
  if (!f) throw IoError("report: write failed for " + path);
}

void write_heat_csv(const std::string& path, const std::vector<std::vector<double>>& heat) {
  std::ofstream f(path);
  if (!f) throw IoError("report: cannot open " + path + " for writing");
  size_t width = 0;
  for (const auto& row : heat) width = std::max(width, row.size());
  f << "layer";
  for (size_t i = 0; i < width; ++i) f << ",pos" << i;
  f << "\n";
  for (size_t l = 0; l < heat.size(); ++l) {
    f << (l + 1);
    for (double v : heat[l]) f << "," << v;
    f << "\n";
  }
  if (!f) throw IoError("report: write failed for " + path);
}

nlohmann::json to_json(const EvalPoint& p) {
  return {{"alpha", p.alpha}, {"mean_attr", p.mean_attr}, {"mean_coher", p.mean_coher},
          {"n_samples", p.n_samples}};
}

nlohmann::json to_json(const SearchTrace& t) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : t.points) pts.push_back(to_json(p));
  return {{"points", pts}, {"alpha_lo", t.alpha_lo}, {"alpha_hi", t.alpha_hi}, {"converged", t.converged}};
}

nlohmann::json to_json(const TraitAlignment& t) {
  return {{"value", t.value},
          {"interpolated", t.interpolated},
          {"coher_below", t.coher_below},
          {"coher_above", t.coher_above}};
}

nlohmann::json to_json(const FaithfulnessProfile& p) {
  return {{"method", p.method},
          {"layer_rrmse", p.layer_rrmse},
          {"layer_skipped", p.layer_skipped},
          {"n_triplets", p.n_triplets}};
}

nlohmann::json to_json(const StrengthProfile& p) {
  return {{"mean_abs", p.mean_abs},
          {"mean_rel", p.mean_rel},
          {"heat", p.heat},
          {"heat_normalized", p.heat_normalized}};
}

nlohmann::json to_json(const std::vector<SimilarityMatrix>& ms) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : ms) {
    // NaN entries serialize as null by the json library's number rules.
    out.push_back({{"layer", m.layer}, {"names", m.names}, {"cos", m.cos}});
  }
  return out;
}

nlohmann::json to_json(const WorldGateStats& g) {
  return {{"steered_attr", g.steered_attr},
          {"unsteered_attr", g.unsteered_attr},
          {"steered_coherence", g.steered_coherence},
          {"unsteered_coherence", g.unsteered_coherence},
          {"empty_generations", g.empty_generations}};
}

}  // namespace psr
