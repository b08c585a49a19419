#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "prvql/inference.hpp"
#include "prvql/model.hpp"
#include "prvql/synthetic.hpp"
#include "prvql/training.hpp"

namespace prvql::cli {

// Everything a command can be configured with. Resolution order is
// defaults, then the --config file, then explicit flags.
struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
    SceneConfig scene;
    InferenceConfig inference;
};

std::string inference_config_to_json(const InferenceConfig& config);
InferenceConfig inference_config_from_json(const std::string& text, const InferenceConfig& base = {});

// Sections "model", "train", "scene" and "inference" plus "seed"; all optional,
// unknown keys rejected.
RunConfig run_config_from_json(const std::string& text, const RunConfig& base = {});
std::string run_config_to_json(const RunConfig& config);

// Runs the command line `args` (without the program name). Returns the exit
// code; failures print one `error: <code>: <message>` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace prvql::cli
