#pragma once

// Artifact emission: JSON reports, JSON-lines training logs, and CSV exports
// of evaluation curves and per-token intervention-strength heat data.
// Undefined similarity entries (zero vectors) serialize as JSON null.

#include <string>
#include <vector>

#include "json.hpp"
#include "psr/delta.hpp"
#include "psr/evaluator.hpp"
#include "psr/trainer.hpp"

namespace psr {

void ensure_dir(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log);
// Columns: alpha, mean_coher, mean_attr — one probed point per row.
void write_curve_csv(const std::string& path, const std::vector<EvalPoint>& points);
// One row per layer, one column per shared position.
void write_heat_csv(const std::string& path, const std::vector<std::vector<double>>& heat);

nlohmann::json to_json(const EvalPoint& p);
nlohmann::json to_json(const SearchTrace& t);
nlohmann::json to_json(const TraitAlignment& t);
nlohmann::json to_json(const FaithfulnessProfile& p);
nlohmann::json to_json(const StrengthProfile& p);
nlohmann::json to_json(const std::vector<SimilarityMatrix>& ms);
nlohmann::json to_json(const WorldGateStats& g);

}  // namespace psr
