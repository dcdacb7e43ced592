#ifndef CAVLAB_METRICS_HPP
#define CAVLAB_METRICS_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cavlab/cav.hpp"
#include "cavlab/corpus.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/probes.hpp"

namespace cavlab {

/// Fraction of correct decisions 1[v·z + b > 0] over both sets.
double accuracy(const Cav& cav, ActivationSet positives, ActivationSet negatives);

/// Test positives with their backgrounds replaced by seeded concept-free donors.
std::vector<Tensor> hard_positive_images(const ConceptCorpus& corpus, std::uint64_t seed);
double hard_accuracy(const Cav& cav, const ConceptCorpus& corpus, const FeatureFn& features, std::uint64_t seed);

struct ScoreWithSkips {
    double score = 0.0;
    std::size_t skipped = 0;
};

/// Shifted attribution: b/(HW) + sum_c v_c ⊙ z_c, over the CAV's expanded weights.
Tensor shifted_attribution(const Cav& cav, const Tensor& z);

/// Mean over pairs of (m·φ⁺)/Σφ⁺ with φ⁺ = ReLU(φ*). Pairs with Σφ⁺ = 0 are skipped.
ScoreWithSkips segmentation_score(const Cav& cav, ActivationSet activations, ActivationSet masks);

/// 1 - mean |v·Δz|/||Δz||; samples with Δz = 0 are skipped.
ScoreWithSkips robustness(const Cav& cav, ActivationSet original, ActivationSet augmented);
ScoreWithSkips robustness(const Cav& cav, const ConceptCorpus& corpus, std::span<const std::size_t> indices,
                          const FeatureFn& features, const Augmentation& aug, std::uint64_t seed);

enum class Transform { Flip, Noise, Grayscale, Background };
inline constexpr Transform kTransforms[] = {Transform::Flip, Transform::Noise, Transform::Grayscale,
                                            Transform::Background};
std::string to_string(Transform t);
Augmentation augmentation_for(Transform t, double noise_sigma);

struct ReportConfig {
    std::vector<ConceptSpec> concepts;
    SpuriousSpec spurious{CueKind::CornerMarker, 0.9};
    std::size_t test_per_class = 100;
    std::size_t buffer = 100;
    std::vector<Method> methods{Method::Clf, Method::Pat, Method::Seg, Method::Mix, Method::Joint};
    std::vector<Pooling> poolings{Pooling::None, Pooling::Sum};
    std::vector<std::size_t> train_sizes{50};
    std::size_t repeats = 5;
    std::uint64_t seed = 0;
    double noise_sigma = 0.05;
    ProbeConfig probe;
    std::size_t threads = 1;
};

/// One CSV row. Metrics are empty when the cell failed; `error` then holds a tag.
struct ReportRow {
    std::string concept_id;
    Method method = Method::Clf;
    Pooling pooled = Pooling::None;
    std::size_t train_size = 0;
    std::size_t repeat = 0;
    std::optional<double> accuracy, hard_accuracy, segmentation;
    std::optional<double> flip, noise, grayscale, background;
    std::optional<double> similarity;
    std::size_t skipped_samples = 0;
    std::string error;
    Cav cav;  // valid when error is empty
};

struct SummaryRow {
    Method method = Method::Clf;
    Pooling pooled = Pooling::None;
    std::size_t train_size = 0;
    std::size_t repeats = 0;
    // mean then sample standard deviation over repeats of the per-repeat concept average
    std::vector<std::pair<double, double>> stats;  // in kMetricColumns order
    std::size_t failed_cells = 0;
};

inline constexpr const char* kMetricColumns[] = {"accuracy", "hard_accuracy", "segmentation", "flip",
                                                 "noise",    "grayscale",     "background",   "similarity"};

struct AlignmentReport {
    std::vector<ReportRow> rows;  // ordered by concept, repeat, train size, pooling, method
    std::vector<SummaryRow> summary;
};

using CorpusProvider = std::function<ConceptCorpus(std::size_t concept_index, std::size_t repeat)>;

/// Corpus per (concept, repeat) with max(train_sizes) training samples per class;
/// smaller train sizes use prefixes.
CorpusProvider default_corpus_provider(const ReportConfig& cfg);

AlignmentReport run_report(const ReportConfig& cfg, const MicroCnn& model, const CorpusProvider& corpora);

std::string report_csv(const AlignmentReport& report);
std::string summary_csv(const AlignmentReport& report);
std::optional<double> row_metric(const ReportRow& row, std::size_t column);

/// Runs fn(i) for i in [0, n) on `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);
/// CAVLAB_THREADS if set and positive, otherwise the hardware concurrency.
std::size_t default_threads();

}  // namespace cavlab

#endif  // CAVLAB_METRICS_HPP
