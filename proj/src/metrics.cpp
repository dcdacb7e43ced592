#include "cavlab/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <mutex>
#include <tuple>
#include <thread>

#include "cavlab/errors.hpp"
#include "cavlab/misalign.hpp"
#include "cavlab/rng.hpp"

namespace cavlab {

double accuracy(const Cav& cav, ActivationSet positives, ActivationSet negatives) {
    if (positives.empty() || negatives.empty()) throw DataError("accuracy needs non-empty positive and negative sets");
    std::size_t correct = 0;
    for (const auto& z : positives) correct += classify(cav, z) ? 1 : 0;
    for (const auto& z : negatives) correct += classify(cav, z) ? 0 : 1;
    return static_cast<double>(correct) / static_cast<double>(positives.size() + negatives.size());
}

std::vector<Tensor> hard_positive_images(const ConceptCorpus& corpus, std::uint64_t seed) {
    std::vector<Tensor> out;
    for (std::size_t idx : corpus.indices(Split::Test, true)) {
        out.push_back(replace_background(corpus, idx, pick_donor(corpus, derive_seed(seed, {idx}))));
    }
    return out;
}

namespace {

std::vector<Tensor> features_of(const FeatureFn& features, std::span<const Tensor> images) {
    std::vector<Tensor> out;
    out.reserve(images.size());
    for (const auto& x : images) out.push_back(features(x));
    return out;
}

std::vector<Tensor> features_at(const FeatureFn& features, const ConceptCorpus& corpus,
                                std::span<const std::size_t> indices) {
    std::vector<Tensor> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(corpus.has_activations() ? corpus.activations.at(i) : features(corpus.images.at(i)));
    return out;
}

}  // namespace

double hard_accuracy(const Cav& cav, const ConceptCorpus& corpus, const FeatureFn& features, std::uint64_t seed) {
    const auto pos = features_of(features, hard_positive_images(corpus, seed));
    const auto neg = features_at(features, corpus, corpus.indices(Split::Test, false));
    return accuracy(cav, pos, neg);
}

Tensor shifted_attribution(const Cav& cav, const Tensor& z) {
    require_same_shape(cav.weights, z, "shifted_attribution");
    if (z.rank() != 3) throw ShapeMismatch("attribution maps need [C,H,W] activations");
    const std::size_t channels = z.dim(0), h = z.dim(1), w = z.dim(2), plane = h * w;
    std::vector<double> acc(plane, cav.bias / static_cast<double>(plane));
    for (std::size_t c = 0; c < channels; ++c) {
        const float* v = cav.weights.data() + c * plane;
        const float* zc = z.data() + c * plane;
        for (std::size_t k = 0; k < plane; ++k) acc[k] += static_cast<double>(v[k]) * zc[k];
    }
    Tensor out({h, w});
    for (std::size_t k = 0; k < plane; ++k) out[k] = static_cast<float>(acc[k]);
    return out;
}

ScoreWithSkips segmentation_score(const Cav& cav, ActivationSet activations, ActivationSet masks) {
    if (activations.size() != masks.size() || activations.empty()) {
        throw DataError("segmentation score needs matching, non-empty activation and mask lists");
    }
    ScoreWithSkips out;
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < activations.size(); ++i) {
        const Tensor phi = shifted_attribution(cav, activations[i]);
        if (masks[i].shape() != phi.shape()) {
            throw ShapeMismatch("mask " + to_string(masks[i].shape()) + " does not match attribution map " +
                                to_string(phi.shape()));
        }
        double inside = 0.0, all = 0.0;
        for (std::size_t k = 0; k < phi.size(); ++k) {
            const double p = std::max(0.0f, phi[k]);
            all += p;
            inside += masks[i][k] * p;
        }
        if (all <= 0.0) {
            ++out.skipped;
            continue;
        }
        total += inside / all;
        ++used;
    }
    if (used == 0) throw NumericError("segmentation score undefined: no pair has a positive attribution");
    out.score = total / static_cast<double>(used);
    return out;
}

ScoreWithSkips robustness(const Cav& cav, ActivationSet original, ActivationSet augmented) {
    if (original.size() != augmented.size() || original.empty()) {
        throw DataError("robustness needs matching, non-empty activation lists");
    }
    ScoreWithSkips out;
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const Tensor dz = subtract(augmented[i], original[i]);
        const double n = norm(dz);
        if (n == 0.0) {
            ++out.skipped;
            continue;
        }
        total += std::min(1.0, std::abs(dot(cav.weights, dz)) / n);
        ++used;
    }
    if (used == 0) throw NumericError("robustness undefined: no sample changed under the transform");
    out.score = 1.0 - total / static_cast<double>(used);
    return out;
}

ScoreWithSkips robustness(const Cav& cav, const ConceptCorpus& corpus, std::span<const std::size_t> indices,
                          const FeatureFn& features, const Augmentation& aug, std::uint64_t seed) {
    std::vector<Tensor> before, after;
    for (std::size_t i : indices) {
        before.push_back(features(corpus.images.at(i)));
        after.push_back(features(augment(corpus, i, aug, derive_seed(seed, {i}))));
    }
    return robustness(cav, before, after);
}

std::string to_string(Transform t) {
    switch (t) {
        case Transform::Flip: return "flip";
        case Transform::Noise: return "noise";
        case Transform::Grayscale: return "grayscale";
        case Transform::Background: return "background";
    }
    return "?";
}

Augmentation augmentation_for(Transform t, double noise_sigma) {
    switch (t) {
        case Transform::Flip: return {AugmentKind::HFlip, noise_sigma};
        case Transform::Noise: return {AugmentKind::GaussianNoise, noise_sigma};
        case Transform::Grayscale: return {AugmentKind::Grayscale, noise_sigma};
        case Transform::Background: return {AugmentKind::BackgroundReplace, noise_sigma};
    }
    return {};
}

std::size_t default_threads() {
    if (const char* env = std::getenv("CAVLAB_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

CorpusProvider default_corpus_provider(const ReportConfig& cfg) {
    if (cfg.train_sizes.empty()) throw InvalidArgument("train_sizes must not be empty");
    SplitCounts counts;
    counts.train_pos = counts.train_neg = *std::max_element(cfg.train_sizes.begin(), cfg.train_sizes.end());
    counts.test_pos = counts.test_neg = cfg.test_per_class;
    counts.buffer = cfg.buffer;
    return [cfg, counts](std::size_t concept_index, std::size_t repeat) {
        return generate(cfg.concepts.at(concept_index), cfg.spurious, counts,
                        derive_seed(cfg.seed, {0xC0, concept_index, repeat}));
    };
}

namespace {

// Carries the tag of a failed prerequisite probe (mix and joint depend on clf/seg).
struct DependencyError : DataError {
    explicit DependencyError(const std::string& tag) : DataError(tag) {}
};

struct UnitData {
    std::vector<Tensor> train_pos, train_neg;
    std::vector<Tensor> mask_pos, mask_neg;  // 16x16
    std::vector<Tensor> test_pos, test_neg, test_masks;
    std::vector<Tensor> hard_pos;
    std::vector<std::vector<Tensor>> augmented;  // per transform, parallel to test_pos
};

UnitData prepare_unit(const ReportConfig& cfg, const ConceptCorpus& corpus, const FeatureFn& features,
                      std::size_t concept_index, std::size_t repeat) {
    if (!corpus.has_images()) throw DataError("the alignment report needs corpus images");
    UnitData d;
    const auto tp = corpus.indices(Split::Train, true), tn = corpus.indices(Split::Train, false);
    const auto sp = corpus.indices(Split::Test, true), sn = corpus.indices(Split::Test, false);
    const std::size_t max_n = *std::max_element(cfg.train_sizes.begin(), cfg.train_sizes.end());
    if (tp.size() < max_n || tn.size() < max_n) {
        throw DataError("corpus has fewer training samples than the largest train size");
    }
    const Shape layer = features(corpus.images.front()).shape();
    for (std::size_t n = 0; n < max_n; ++n) {
        d.train_pos.push_back(features(corpus.images[tp[n]]));
        d.train_neg.push_back(features(corpus.images[tn[n]]));
        d.mask_pos.push_back(downscale_mask(corpus.masks[tp[n]], layer[1], layer[2]));
        d.mask_neg.push_back(downscale_mask(corpus.masks[tn[n]], layer[1], layer[2]));
    }
    d.test_pos = features_at(features, corpus, sp);
    d.test_neg = features_at(features, corpus, sn);
    for (std::size_t i : sp) d.test_masks.push_back(downscale_mask(corpus.masks[i], layer[1], layer[2]));
    d.hard_pos = features_of(features, hard_positive_images(corpus, derive_seed(cfg.seed, {0x4A, concept_index, repeat})));
    for (Transform t : kTransforms) {
        const std::uint64_t seed = derive_seed(cfg.seed, {0xA6, concept_index, repeat, static_cast<std::uint64_t>(t)});
        std::vector<Tensor> aug;
        for (std::size_t i : sp) {
            aug.push_back(features(augment(corpus, i, augmentation_for(t, cfg.noise_sigma), derive_seed(seed, {i}))));
        }
        d.augmented.push_back(std::move(aug));
    }
    return d;
}

ReportRow blank_row(const std::string& concept_id, Method m, Pooling p, std::size_t n, std::size_t repeat) {
    ReportRow row;
    row.concept_id = concept_id;
    row.method = m;
    row.pooled = p;
    row.train_size = n;
    row.repeat = repeat;
    return row;
}

void evaluate_into(ReportRow& row, const Cav& cav, const UnitData& d) {
    row.cav = cav;
    row.accuracy = accuracy(cav, d.test_pos, d.test_neg);
    row.hard_accuracy = accuracy(cav, d.hard_pos, d.test_neg);
    const auto seg = segmentation_score(cav, d.test_pos, d.test_masks);
    row.segmentation = seg.score;
    row.skipped_samples += seg.skipped;
    std::optional<double>* slots[] = {&row.flip, &row.noise, &row.grayscale, &row.background};
    for (std::size_t t = 0; t < d.augmented.size(); ++t) {
        const auto r = robustness(cav, d.test_pos, d.augmented[t]);
        *slots[t] = r.score;
        row.skipped_samples += r.skipped;
    }
}

// Trains and evaluates every method for one (concept, repeat, train size, pooling).
void run_methods(const ReportConfig& cfg, const UnitData& d, std::size_t n, Pooling pooling,
                 std::size_t concept_index, std::size_t repeat, std::vector<ReportRow>& rows) {
    const std::span<const Tensor> zp(d.train_pos.data(), n), zn(d.train_neg.data(), n);
    std::vector<Tensor> acts(zp.begin(), zp.end()), masks(d.mask_pos.begin(), d.mask_pos.begin() + n);
    acts.insert(acts.end(), zn.begin(), zn.end());
    masks.insert(masks.end(), d.mask_neg.begin(), d.mask_neg.begin() + n);
    std::vector<char> present(2 * n, 0);
    std::fill(present.begin(), present.begin() + n, 1);
    const SegmentationSet set{acts, masks, present};

    ProbeConfig pc = cfg.probe;
    pc.pooled = pooling;
    pc.concept_id = cfg.concepts[concept_index].concept_id;

    std::map<Method, Cav> trained;
    std::map<Method, std::string> failed;
    std::function<const Cav&(Method)> get = [&](Method m) -> const Cav& {
        if (auto it = failed.find(m); it != failed.end()) throw DependencyError(it->second);
        if (auto it = trained.find(m); it != trained.end()) return it->second;
        pc.seed = derive_seed(cfg.seed, {0x9B, concept_index, repeat, n, static_cast<std::uint64_t>(pooling),
                                         static_cast<std::uint64_t>(m)});
        try {
            Cav cav;
            switch (m) {
                case Method::Clf: cav = train_classifier(zp, zn, pc); break;
                case Method::Pat: cav = train_pattern(zp, zn, pc); break;
                case Method::Seg: cav = train_segmentation(set, pc); break;
                case Method::Mix: {
                    const Cav& clf = get(Method::Clf);
                    const Cav& seg = get(Method::Seg);
                    cav = mix(clf, seg, pc.beta, zp, zn);
                    break;
                }
                case Method::Joint: {
                    const Cav* init = pc.joint_init == JointInit::Clf ? &get(Method::Clf) : nullptr;
                    cav = train_joint(zp, zn, set, pc, nullptr, init);
                    break;
                }
                case Method::Fp: throw InvalidArgument("fp CAVs are built by the fp-cav stage, not the report");
            }
            cav.seed = pc.seed;
            return trained.emplace(m, std::move(cav)).first->second;
        } catch (const std::exception& e) {
            failed.emplace(m, dynamic_cast<const DependencyError*>(&e) ? std::string(e.what()) : error_tag(e));
            throw;
        }
    };

    for (Method m : cfg.methods) {
        ReportRow row = blank_row(pc.concept_id, m, pooling, n, repeat);
        try {
            evaluate_into(row, get(m), d);
        } catch (const std::exception& e) {
            const std::string tag = failed.count(m) ? failed.at(m) : error_tag(e);
            row = blank_row(row.concept_id, m, pooling, n, repeat);
            row.error = "error:" + tag;
        }
        rows.push_back(std::move(row));
    }
}

}  // namespace

AlignmentReport run_report(const ReportConfig& cfg, const MicroCnn& model, const CorpusProvider& corpora) {
    if (cfg.concepts.empty()) throw InvalidArgument("the report needs at least one concept");
    if (cfg.methods.empty()) throw InvalidArgument("the report needs at least one method");
    if (cfg.poolings.empty()) throw InvalidArgument("the report needs at least one pooling mode");
    if (cfg.train_sizes.empty()) throw InvalidArgument("the report needs at least one train size");
    if (cfg.repeats == 0) throw InvalidArgument("repeats must be positive");
    for (Method m : cfg.methods) {
        if (m == Method::Fp) throw InvalidArgument("method fp is not part of the alignment report");
    }

    const FeatureFn features = feature_fn(model);
    const std::size_t units = cfg.concepts.size() * cfg.repeats;
    std::vector<std::vector<ReportRow>> per_unit(units);
    parallel_for(units, cfg.threads, [&](std::size_t u) {
        const std::size_t concept_index = u / cfg.repeats, repeat = u % cfg.repeats;
        std::vector<ReportRow>& rows = per_unit[u];
        try {
            const ConceptCorpus corpus = corpora(concept_index, repeat);
            const UnitData d = prepare_unit(cfg, corpus, features, concept_index, repeat);
            for (std::size_t n : cfg.train_sizes) {
                for (Pooling p : cfg.poolings) run_methods(cfg, d, n, p, concept_index, repeat, rows);
            }
        } catch (const std::exception& e) {
            rows.clear();
            for (std::size_t n : cfg.train_sizes) {
                for (Pooling p : cfg.poolings) {
                    for (Method m : cfg.methods) {
                        ReportRow row = blank_row(cfg.concepts[concept_index].concept_id, m, p, n, repeat);
                        row.error = "error:" + error_tag(e);
                        rows.push_back(std::move(row));
                    }
                }
            }
        }
    });

    AlignmentReport report;
    for (auto& rows : per_unit) {
        for (auto& row : rows) report.rows.push_back(std::move(row));
    }

    // Similarity: mean pairwise cosine across concepts for a fixed method cell.
    using Key = std::tuple<Method, Pooling, std::size_t, std::size_t>;
    std::map<Key, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        groups[{r.method, r.pooled, r.train_size, r.repeat}].push_back(i);
    }
    for (const auto& [key, members] : groups) {
        std::vector<Cav> cavs;
        for (std::size_t i : members) {
            if (report.rows[i].error.empty()) cavs.push_back(report.rows[i].cav);
        }
        if (cavs.size() < 2) continue;
        const double s = mean_pairwise_cosine(cavs);
        for (std::size_t i : members) {
            if (report.rows[i].error.empty()) report.rows[i].similarity = s;
        }
    }

    // Summary: per repeat, unweighted mean across concepts; then mean and std across repeats.
    using SKey = std::tuple<Method, Pooling, std::size_t>;
    std::map<SKey, std::map<std::size_t, std::vector<std::size_t>>> by_cell;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        by_cell[{r.method, r.pooled, r.train_size}][r.repeat].push_back(i);
    }
    for (std::size_t n : cfg.train_sizes) {
        for (Pooling p : cfg.poolings) {
            for (Method m : cfg.methods) {
                const auto it = by_cell.find({m, p, n});
                if (it == by_cell.end()) continue;
                SummaryRow s{m, p, n, it->second.size(), {}, 0};
                for (const auto& [rep, idx] : it->second) {
                    for (std::size_t i : idx) s.failed_cells += report.rows[i].error.empty() ? 0 : 1;
                }
                for (std::size_t col = 0; col < std::size(kMetricColumns); ++col) {
                    std::vector<double> per_repeat;
                    for (const auto& [rep, idx] : it->second) {
                        double sum = 0.0;
                        std::size_t count = 0;
                        for (std::size_t i : idx) {
                            if (auto v = row_metric(report.rows[i], col)) {
                                sum += *v;
                                ++count;
                            }
                        }
                        if (count) per_repeat.push_back(sum / static_cast<double>(count));
                    }
                    double mean = std::nan(""), sd = std::nan("");
                    if (!per_repeat.empty()) {
                        mean = 0.0;
                        for (double v : per_repeat) mean += v;
                        mean /= static_cast<double>(per_repeat.size());
                        sd = 0.0;
                        if (per_repeat.size() > 1) {
                            for (double v : per_repeat) sd += (v - mean) * (v - mean);
                            sd = std::sqrt(sd / static_cast<double>(per_repeat.size() - 1));
                        }
                    }
                    s.stats.emplace_back(mean, sd);
                }
                report.summary.push_back(std::move(s));
            }
        }
    }
    return report;
}

std::optional<double> row_metric(const ReportRow& row, std::size_t column) {
    switch (column) {
        case 0: return row.accuracy;
        case 1: return row.hard_accuracy;
        case 2: return row.segmentation;
        case 3: return row.flip;
        case 4: return row.noise;
        case 5: return row.grayscale;
        case 6: return row.background;
        case 7: return row.similarity;
    }
    return std::nullopt;
}

namespace {

std::string fmt(std::optional<double> v) {
    if (!v || !std::isfinite(*v)) return "null";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

}  // namespace

std::string report_csv(const AlignmentReport& report) {
    std::string out =
        "concept,method,pooled,train_size,repeat,accuracy,hard_accuracy,segmentation,flip,noise,grayscale,"
        "background,similarity,skipped_samples\n";
    for (const auto& r : report.rows) {
        out += r.concept_id + ',' + to_string(r.method) + ',' + to_string(r.pooled) + ',' +
               std::to_string(r.train_size) + ',' + std::to_string(r.repeat);
        for (std::size_t col = 0; col < std::size(kMetricColumns); ++col) out += ',' + fmt(row_metric(r, col));
        out += ',' + (r.error.empty() ? std::to_string(r.skipped_samples) : r.error) + '\n';
    }
    return out;
}

std::string summary_csv(const AlignmentReport& report) {
    std::string out = "method,pooled,train_size,repeats,failed_cells";
    for (const char* c : kMetricColumns) out += std::string(",") + c + "_mean," + c + "_std";
    out += '\n';
    for (const auto& s : report.summary) {
        out += to_string(s.method) + ',' + to_string(s.pooled) + ',' + std::to_string(s.train_size) + ',' +
               std::to_string(s.repeats) + ',' + std::to_string(s.failed_cells);
        for (const auto& [mean, sd] : s.stats) out += ',' + fmt(mean) + ',' + fmt(sd);
        out += '\n';
    }
    return out;
}

}  // namespace cavlab
