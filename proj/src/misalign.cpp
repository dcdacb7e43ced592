#include "cavlab/misalign.hpp"

#include <cmath>

#include <json.hpp>

#include "cavlab/errors.hpp"
#include "cavlab/metrics.hpp"

namespace cavlab {

FpResult build_fp_cav(const Cav& clf, const FpInputs& in, std::size_t n, const ProbeConfig& cfg) {
    if (n == 0) throw InvalidArgument("the number of false positives must be positive");
    if (in.buffer_ids.size() != in.buffer.size() || in.buffer_present.size() != in.buffer.size()) {
        throw DataError("buffer ids and labels must be parallel to the buffer activations");
    }
    FpResult out;
    std::vector<Tensor> false_positives;
    std::size_t scanned = 0;
    for (; scanned < in.buffer.size() && false_positives.size() < n; ++scanned) {
        if (in.buffer_present[scanned]) {
            throw DataError("buffer sample " + std::to_string(in.buffer_ids[scanned]) + " contains the concept");
        }
        if (classify(clf, in.buffer[scanned])) {
            false_positives.push_back(in.buffer[scanned]);
            out.report.false_positive_ids.push_back(in.buffer_ids[scanned]);
        }
    }
    if (false_positives.size() < n) throw InsufficientFalsePositives(false_positives.size(), n);

    out.cav = train_classifier(false_positives, in.negatives_train, cfg);
    out.cav.method = Method::Fp;
    out.cav.concept_id = clf.concept_id;
    out.cav.layer_id = clf.layer_id;
    out.report.n_buffer_scanned = scanned;
    out.report.acc_clf = accuracy(clf, in.positives_test, in.negatives_test);
    out.report.acc_fp = accuracy(out.cav, in.positives_test, in.negatives_test);
    out.report.cosine = cosine(clf.weights, out.cav.weights);
    return out;
}

Cav reject(const Cav& a, const Cav& b) {
    require_same_shape(a.weights, b.weights, "reject");
    if (a.layer_id != b.layer_id || a.pooled != b.pooled) {
        throw InvalidArgument("reject needs CAVs of the same layer and pooling");
    }
    const double p = dot(b.weights, a.weights);
    // Stored directions are float, so |v| is 1 only to ~1e-7; test collinearity on the true cosine.
    const double na = std::sqrt(dot(a.weights, a.weights)), nb = std::sqrt(dot(b.weights, b.weights));
    if (na == 0.0 || nb == 0.0 || std::abs(p) / (na * nb) >= 1.0 - 1e-9) throw CollinearCavs();
    Tensor r(a.weights.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<float>(a.weights[i] - p * b.weights[i]);
    Normalized unit = normalize(r);
    Cav out = a;
    out.weights = std::move(unit.direction);
    out.norm_before_normalize = unit.norm_before;
    return out;
}

std::vector<std::vector<double>> similarity_matrix(std::span<const Cav> cavs) {
    for (const auto& c : cavs) {
        if (c.pooled != cavs.front().pooled) throw InvalidArgument("similarity matrix needs a single pooling mode");
        if (c.layer_id != cavs.front().layer_id) throw InvalidArgument("similarity matrix needs a single layer");
    }
    const std::size_t n = cavs.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) m[i][j] = m[j][i] = cosine(cavs[i].weights, cavs[j].weights);
    }
    return m;
}

double mean_pairwise_cosine(std::span<const Cav> cavs) {
    if (cavs.size() < 2) return 0.0;
    const auto m = similarity_matrix(cavs);
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = i + 1; j < m.size(); ++j, ++count) s += m[i][j];
    }
    return s / static_cast<double>(count);
}

std::string fp_report_json(const FpReport& report, const Cav& clf, const Cav& fp) {
    nlohmann::json j{{"concept_id", clf.concept_id},
                     {"layer_id", clf.layer_id},
                     {"acc_clf", report.acc_clf},
                     {"acc_fp", report.acc_fp},
                     {"cosine", report.cosine},
                     {"n_buffer_scanned", report.n_buffer_scanned},
                     {"false_positive_ids", report.false_positive_ids},
                     {"fp_bias", fp.bias}};
    return j.dump(2);
}

}  // namespace cavlab
