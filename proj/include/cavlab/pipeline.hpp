#ifndef CAVLAB_PIPELINE_HPP
#define CAVLAB_PIPELINE_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "cavlab/corpus.hpp"
#include "cavlab/errors.hpp"
#include "cavlab/metrics.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/probes.hpp"

namespace cavlab {

inline constexpr const char* kToolVersion = "cavlab 1.0.0";

struct ExperimentConfig {
    std::vector<std::string> concepts{"circle", "square", "triangle", "cross", "ring", "bar", "star", "diamond"};
    SpuriousSpec spurious{CueKind::CornerMarker, 0.9};
    std::vector<Method> methods{Method::Clf, Method::Pat, Method::Seg, Method::Mix, Method::Joint};
    std::vector<Pooling> pooling{Pooling::None, Pooling::Sum};
    std::vector<std::size_t> train_sizes{50};
    std::size_t repeats = 5;
    std::uint64_t master_seed = 0;
    std::string output_dir = "out";

    std::size_t test_per_class = 100;
    std::size_t buffer = 100;
    double noise_sigma = 0.05;
    ProbeConfig probe;

    PretrainTask pretrain;
    std::size_t pretrain_per_class = 250;
    // An existing model file used instead of pretraining when set.
    std::string model_path;

    bool fp_stage = true;
    std::size_t fp_buffer = 1500;
    bool viz_stage = true;
};

/// Parses and validates; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& json_text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::string& path);
void validate(const ExperimentConfig& cfg);
/// Canonical JSON (sorted keys, every field explicit, output_dir excluded).
std::string canonical_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

std::string content_hash(const std::string& bytes);
std::string file_hash(const std::string& path);

/// Line-delimited JSON log sink.
class Logger {
public:
    explicit Logger(std::ostream* out) : out_(out) {}
    void event(const std::string& name, const std::vector<std::pair<std::string, std::string>>& fields = {}) const;

private:
    std::ostream* out_;
};

struct StageError : Error {
    StageError(ErrorCategory category, const std::string& stage, const std::string& coords, const std::string& what)
        : Error(category, "stage " + stage + (coords.empty() ? "" : " [" + coords + "]") + ": " + what),
          stage(stage), coords(coords) {}
    std::string stage;
    std::string coords;
};

struct PipelineResult {
    std::vector<std::string> ran;
    std::vector<std::string> cached;
    bool all_cached() const { return ran.empty(); }
};

ReportConfig report_config(const ExperimentConfig& cfg);

/// Runs pretrain -> report -> fp -> viz under cfg.output_dir, skipping stages
/// whose inputs and outputs match provenance.json.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const Logger& log, std::size_t threads);

/// Builds or loads the pretraining corpus and trains the model.
PretrainResult pretrain_from_config(const ExperimentConfig& cfg);

/// Activations for the given samples: precomputed ones when the corpus has them.
std::vector<Tensor> corpus_features(const ConceptCorpus& corpus, std::span<const std::size_t> indices,
                                    const FeatureFn& features);

}  // namespace cavlab

#endif  // CAVLAB_PIPELINE_HPP
