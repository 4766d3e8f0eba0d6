#pragma once

// Declarative experiment configuration: one JSON file describes the model, the
// synthetic world, the steering module, and the training/evaluation settings.
// Parsing is strict — unknown keys are rejected so a typo cannot silently fall
// back to a default.

#include <optional>
#include <string>

#include "json.hpp"
#include "psr/evaluator.hpp"
#include "psr/model.hpp"
#include "psr/trainer.hpp"
#include "psr/world.hpp"

namespace psr {

struct ModuleSpec {
  std::string kind = "psr";            // psr | const
  std::string scope = "single";        // single | all
  int layer = 3;                       // intervention layer for single scope
  std::string positions = "response";  // response | question_response
  double alpha = 1.0;                  // inference-time global coefficient
  std::string init = "random";         // random | dim (difference-in-means; const only)

  void validate(const ModelConfig& mc) const;
  PositionPolicy position_policy() const;
};

struct RunConfig {
  uint64_t seed = 42;
  std::string out_dir;                 // resolved against the output root when relative
  std::string precision = "verify";    // verify = 64-bit, fast = 32-bit
  ModelConfig model;
  WorldConfig world;
  ModuleSpec module;
  TrainConfig train;
  EvalConfig eval;
  double target_coherence = 80.0;
  std::optional<double> fixed_alpha;   // present -> score one point, skip the search

  void validate() const;
};

// Output root: the PSR_OUT_ROOT environment variable, else "runs".
std::string default_out_root();
// out_dir resolved to an absolute-ish path: absolute stays, relative joins the root.
std::string resolve_out_dir(const RunConfig& cfg);

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace psr
