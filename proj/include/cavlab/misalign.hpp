#ifndef CAVLAB_MISALIGN_HPP
#define CAVLAB_MISALIGN_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cavlab/cav.hpp"
#include "cavlab/probes.hpp"

namespace cavlab {

struct FpReport {
    double acc_clf = 0.0;
    double acc_fp = 0.0;
    double cosine = 0.0;
    std::size_t n_buffer_scanned = 0;
    std::vector<std::size_t> false_positive_ids;
};

struct FpInputs {
    ActivationSet negatives_train;
    ActivationSet buffer;
    std::span<const std::size_t> buffer_ids;  // sample ids, parallel to `buffer`
    std::span<const char> buffer_present;     // concept presence per buffer sample, from the manifest
    ActivationSet positives_test;
    ActivationSet negatives_test;
};

struct FpResult {
    Cav cav;
    FpReport report;
};

/// Scans the buffer in order for samples the classifier CAV calls positive and
/// trains a classifier with those false positives against the train negatives.
FpResult build_fp_cav(const Cav& clf, const FpInputs& in, std::size_t n, const ProbeConfig& cfg);

/// normalize(a - (b·a) b).
Cav reject(const Cav& a, const Cav& b);

/// Pairwise cosines; all CAVs must share layer and pooling.
std::vector<std::vector<double>> similarity_matrix(std::span<const Cav> cavs);
/// Mean of the off-diagonal entries; 0 for fewer than two CAVs.
double mean_pairwise_cosine(std::span<const Cav> cavs);

std::string fp_report_json(const FpReport& report, const Cav& clf, const Cav& fp);

}  // namespace cavlab

#endif  // CAVLAB_MISALIGN_HPP
