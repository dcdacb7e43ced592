// Acceptance suite: prints one PASS/FAIL line per criterion, exits non-zero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cavlab/cav.hpp"
#include "cavlab/corpus.hpp"
#include "cavlab/metrics.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/misalign.hpp"
#include "cavlab/pipeline.hpp"
#include "cavlab/probes.hpp"
#include "cavlab/rng.hpp"
#include "cavlab/viz.hpp"

using namespace cavlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double mean(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

struct Context {
    fs::path cache;
    MicroCnn model;
    std::size_t threads = 1;
    // The criterion 7 sweep is reused by criterion 6.
    std::optional<AlignmentReport> sweep;
};

std::vector<Tensor> features_for(const MicroCnn& model, const ConceptCorpus& corpus, Split split, bool present) {
    const auto idx = corpus.indices(split, present);
    return corpus_features(corpus, idx, feature_fn(model));
}

ProbeConfig probe_for(const std::string& concept_id, Pooling pooling, std::uint64_t seed) {
    ProbeConfig pc;
    pc.concept_id = concept_id;
    pc.pooled = pooling;
    pc.seed = seed;
    return pc;
}

MicroCnn obtain_model(const fs::path& cache) {
    const fs::path path = cache / "model.cavm";
    const fs::path info = cache / "model.json";
    if (fs::exists(path) && fs::exists(info)) {
        std::ifstream in(info);
        const auto j = nlohmann::json::parse(in);
        std::printf("INFO pretrain cached: train_accuracy=%.4f seconds=%.1f\n", j.at("train_accuracy").get<double>(),
                    j.at("seconds").get<double>());
        return load_model(path.string());
    }
    const ExperimentConfig cfg;
    const auto t0 = Clock::now();
    PretrainResult r = pretrain_from_config(cfg);
    const double secs = seconds_since(t0);
    fs::create_directories(cache);
    save_model(path.string(), r.model);
    std::ofstream(info) << nlohmann::json{{"train_accuracy", r.train_accuracy}, {"seconds", secs}}.dump() << "\n";
    std::printf("INFO pretrain: train_accuracy=%.4f seconds=%.1f (target >= 0.90 within 300 s)\n", r.train_accuracy,
                secs);
    return std::move(r.model);
}

// 1. Unpooled classifier probes separate their training data.
Outcome separability(Context& ctx) {
    double worst_acc = 1.0, worst_time = 0.0;
    std::size_t probes = 0;
    for (std::size_t ci = 0; ci < kShapeKinds; ++ci) {
        const ConceptSpec spec = concept_for(static_cast<ShapeKind>(ci));
        for (std::size_t n : {10, 50, 100}) {
            const ConceptCorpus c = generate(spec, {CueKind::CornerMarker, 0.9}, {n, n, 1, 1, 0}, derive_seed(11, {ci, n}));
            const auto zp = features_for(ctx.model, c, Split::Train, true);
            const auto zn = features_for(ctx.model, c, Split::Train, false);
            const auto t0 = Clock::now();
            const Cav cav = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::None, 1));
            worst_time = std::max(worst_time, seconds_since(t0));
            worst_acc = std::min(worst_acc, accuracy(cav, zp, zn));
            ++probes;
        }
    }
    return {worst_acc == 1.0 && worst_time <= 10.0,
            std::to_string(probes) + " probes (N in {10,50,100}), min train accuracy " + fmt("%.4f", worst_acc) +
                ", slowest probe " + fmt("%.2f s", worst_time)};
}

// 2. False-positive CAVs on the rho=0.95 corner-marker corpus.
Outcome fp_effect(Context& ctx) {
    const auto t0 = Clock::now();
    const std::size_t n = 50, test = 100, buffer = 1500;
    std::vector<double> acc_clf, acc_fp, cos;
    std::size_t insufficient = 0;
    for (std::size_t ci = 0; ci < kShapeKinds; ++ci) {
        const ConceptSpec spec = concept_for(static_cast<ShapeKind>(ci));
        const ConceptCorpus c =
            generate(spec, {CueKind::CornerMarker, 0.95}, {n, n, test, test, buffer}, derive_seed(22, {ci}));
        const auto zp = features_for(ctx.model, c, Split::Train, true);
        const auto zn = features_for(ctx.model, c, Split::Train, false);
        const auto tp = features_for(ctx.model, c, Split::Test, true);
        const auto tn = features_for(ctx.model, c, Split::Test, false);
        const auto ids = c.indices(Split::Buffer);
        const auto zb = corpus_features(c, ids, feature_fn(ctx.model));
        std::vector<char> present;
        for (std::size_t i : ids) present.push_back(c.samples[i].present ? 1 : 0);
        const ProbeConfig pc = probe_for(spec.concept_id, Pooling::None, derive_seed(22, {ci, 1}));
        const Cav clf = train_classifier(zp, zn, pc);
        try {
            const FpResult fp = build_fp_cav(clf, {zn, zb, ids, present, tp, tn}, n, pc);
            acc_clf.push_back(fp.report.acc_clf);
            acc_fp.push_back(fp.report.acc_fp);
            cos.push_back(fp.report.cosine);
        } catch (const InsufficientFalsePositives&) {
            ++insufficient;
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = acc_clf.size() >= 5 && mean(acc_fp) >= mean(acc_clf) - 0.15 && mean(cos) >= 0.4 && secs <= 300;
    return {ok, std::to_string(acc_clf.size()) + " concepts (" + std::to_string(insufficient) +
                    " without enough false positives), mean acc_clf " + fmt("%.3f", mean(acc_clf)) + ", acc_fp " +
                    fmt("%.3f", mean(acc_fp)) + ", cos " + fmt("%.3f", mean(cos)) + ", " + fmt("%.0f s", secs)};
}

Tensor random_tensor(Rng& rng, const Shape& shape, double scale = 1.0) {
    Tensor t(shape);
    for (auto& v : t.values()) v = static_cast<float>(rng.normal() * scale);
    return t;
}

Cav random_cav(Rng& rng, Pooling pooling) {
    Tensor w = pooling == Pooling::None ? random_tensor(rng, {32, 16, 16}) : expand_pooled(random_tensor(rng, {32}));
    const Normalized n = normalize(w, rng.normal() * 5.0);
    Cav cav;
    cav.weights = n.direction;
    cav.bias = n.bias;
    cav.pooled = pooling;
    return cav;
}

// 3. Completeness of the shifted attribution map.
Outcome completeness(Context&) {
    Rng rng(33);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Cav cav = random_cav(rng, i % 2 ? Pooling::Sum : Pooling::None);
        Tensor z = random_tensor(rng, {32, 16, 16}, 2.0);
        for (auto& v : z.values()) v = std::max(v, 0.0f);
        const Tensor phi = shifted_attribution(cav, z);
        double s = 0.0;
        for (float v : phi.values()) s += v;
        const double logit = cav_logit(cav, z);
        worst = std::max(worst, std::abs(s - logit) / (1.0 + std::abs(logit)));
    }
    return {worst <= 1e-5, "1000 pairs, worst |sum(phi) - logit| / (1 + |logit|) = " + fmt("%.2e", worst)};
}

// 4. Pooled and expanded inner products agree; pooled decisions ignore spatial permutations.
Outcome pooling_identity(Context&) {
    Rng rng(44);
    double worst = 0.0;
    std::size_t flips = 0;
    for (int i = 0; i < 1000; ++i) {
        const Tensor alpha = random_tensor(rng, {32});
        const Tensor z = random_tensor(rng, {32, 16, 16});
        const double expanded = dot(expand_pooled(alpha), z);
        const Tensor s = pool(z, PoolMode::Sum);
        double pooled = 0.0;
        for (std::size_t c = 0; c < 32; ++c) pooled += static_cast<double>(alpha[c]) * s[c];
        worst = std::max(worst, std::abs(expanded - pooled) / std::max(1.0, std::abs(pooled)));

        std::vector<std::size_t> perm(256);
        for (std::size_t k = 0; k < 256; ++k) perm[k] = k;
        shuffle(perm, rng);
        Tensor zp(z.shape());
        for (std::size_t c = 0; c < 32; ++c)
            for (std::size_t k = 0; k < 256; ++k) zp[c * 256 + perm[k]] = z[c * 256 + k];
        for (Pooling p : {Pooling::Sum, Pooling::Max}) {
            const Cav cav = random_cav(rng, p);
            Tensor zb = z;
            // Put the sample on the decision boundary's near side so decisions are not all equal.
            const double logit = cav_logit(cav, zb);
            Cav shifted = cav;
            shifted.bias -= logit * 0.999;
            flips += classify(shifted, z) != classify(shifted, zp);
            flips += classify(cav, z) != classify(cav, zp);
        }
    }
    return {worst <= 1e-5 && flips == 0, "1000 draws, worst relative gap " + fmt("%.2e", worst) +
                                              ", decision changes under permutation " + std::to_string(flips)};
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

template <typename Objective>
double fd_check_objective(const Objective& obj, Rng& rng, std::size_t coords) {
    Params p{std::vector<double>(obj.dim()), rng.normal() * 0.1};
    for (auto& w : p.w) w = rng.normal() * 0.02;
    const LossGrad lg = obj.evaluate(p);
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t t = 0; t <= coords; ++t) {
        Params a = p, b = p;
        double analytic;
        if (t == coords) {
            a.b += h;
            b.b -= h;
            analytic = lg.grad_b;
        } else {
            const std::size_t i = rng.below(obj.dim());
            a.w[i] += h;
            b.w[i] -= h;
            analytic = lg.grad_w[i];
        }
        const double fd = (obj.evaluate(a).loss - obj.evaluate(b).loss) / (2 * h);
        if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) continue;
        worst = std::max(worst, rel_err(fd, analytic));
    }
    return worst;
}

// 5. Gradient oracles.
Outcome gradients(Context& ctx) {
    const auto t0 = Clock::now();
    const ConceptSpec spec = concept_for(ShapeKind::Star);
    const ConceptCorpus c = generate(spec, {CueKind::CornerMarker, 0.9}, {8, 8, 4, 4, 0}, 55);
    const auto zp = features_for(ctx.model, c, Split::Train, true);
    const auto zn = features_for(ctx.model, c, Split::Train, false);
    std::vector<Tensor> acts(zp), masks;
    acts.insert(acts.end(), zn.begin(), zn.end());
    for (std::size_t i : c.indices(Split::Train, true)) masks.push_back(downscale_mask(c.masks[i]));
    for (std::size_t i : c.indices(Split::Train, false)) masks.push_back(downscale_mask(c.masks[i]));
    std::vector<char> present(acts.size(), 0);
    std::fill(present.begin(), present.begin() + zp.size(), 1);
    const SegmentationSet set{acts, masks, present};

    Rng rng(56);
    double loss_worst = 0.0;
    for (Pooling p : {Pooling::None, Pooling::Sum}) {
        const ClassifierObjective clf(zp, zn, p);
        const SegmentationObjective seg(set, p);
        const JointObjective joint(clf, seg, 0.7);
        loss_worst = std::max(loss_worst, fd_check_objective(clf, rng, 40));
        loss_worst = std::max(loss_worst, fd_check_objective(seg, rng, 40));
        loss_worst = std::max(loss_worst, fd_check_objective(joint, rng, 40));
    }

    // Head: directional derivatives of each class probability.
    double head_worst = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
        const Tensor& z = zp[s];
        const Tensor u = random_tensor(rng, z.shape(), 0.05);
        for (std::size_t k = 0; k < ctx.model.num_classes(); ++k) {
            const double h = 5e-2;
            Tensor a = z, b = z;
            axpy(static_cast<float>(h), u, a);
            axpy(static_cast<float>(-h), u, b);
            const double fd = (forward_head(ctx.model, a)[k] - forward_head(ctx.model, b)[k]) / (2 * h);
            const double analytic = dot(grad_head_wrt_z(ctx.model, z, k), u);
            if (std::abs(fd) < 1e-5) continue;
            head_worst = std::max(head_worst, rel_err(fd, analytic));
        }
    }

    // Activation maximization objective through the network, per pixel, skipping kinks.
    const Cav cav = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::None, 5));
    double am_worst = 0.0;
    std::size_t checked = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        Tensor x({3, 64, 64});
        for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
        const Tensor g = actmax_gradient(ctx.model, cav, x);
        std::size_t local = 0;
        for (int trial = 0; trial < 2000 && local < 15; ++trial) {
            const std::size_t i = rng.below(x.size());
            const float h = 1e-3f;
            Tensor xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double f0 = actmax_objective(ctx.model, cav, x);
            const double fp = actmax_objective(ctx.model, cav, xp), fm = actmax_objective(ctx.model, cav, xm);
            const double right = (fp - f0) / h, left = (f0 - fm) / h;
            if (std::abs(right - left) > 1e-3 * (std::abs(right) + std::abs(left)) + 1e-6) continue;
            const double fd = (fp - fm) / (2 * h);
            if (std::abs(fd) < 1e-3) continue;
            am_worst = std::max(am_worst, rel_err(fd, g[i]));
            ++local;
        }
        checked += local;
    }
    const double secs = seconds_since(t0);
    const bool ok = loss_worst <= 1e-3 && head_worst <= 1e-2 && am_worst <= 1e-2 && checked >= 30 && secs <= 120;
    return {ok, "losses " + fmt("%.1e", loss_worst) + ", head " + fmt("%.1e", head_worst) + ", actmax " +
                    fmt("%.1e", am_worst) + " over " + std::to_string(checked) + " kink-free pixels, " +
                    fmt("%.0f s", secs)};
}

AlignmentReport& default_sweep(Context& ctx) {
    if (!ctx.sweep) {
        ExperimentConfig cfg;
        ReportConfig rc = report_config(cfg);
        rc.threads = ctx.threads;
        ctx.sweep = run_report(rc, ctx.model, default_corpus_provider(rc));
    }
    return *ctx.sweep;
}

// 6. Robustness stays in [0, 1]; constructed cases hit the ends.
Outcome robustness_bounds(Context& ctx) {
    const AlignmentReport& report = default_sweep(ctx);
    std::size_t cells = 0, outside = 0;
    for (const auto& row : report.rows) {
        for (const auto& r : {row.flip, row.noise, row.grayscale, row.background}) {
            if (!r) continue;
            ++cells;
            outside += (*r < 0.0 || *r > 1.0) ? 1 : 0;
        }
    }
    // Exact construction: v has four entries of +-0.5, dz = 3v.
    Cav v;
    v.weights = Tensor({32, 16, 16});
    v.weights[0] = 0.5f;
    v.weights[77] = -0.5f;
    v.weights[300] = 0.5f;
    v.weights[8000] = -0.5f;
    const Tensor z({32, 16, 16}, 1.0f);
    const Tensor zc = [&] { Tensor t = z; axpy(3.0f, v.weights, t); return t; }();
    const double exact_collinear = robustness(v, std::vector<Tensor>{z}, std::vector<Tensor>{zc}).score;
    Tensor orth({32, 16, 16});
    orth[1] = 2.0f;
    orth[5000] = -1.0f;
    Tensor zo = z;
    axpy(1.0f, orth, zo);
    const double exact_orth = robustness(v, std::vector<Tensor>{z}, std::vector<Tensor>{zo}).score;

    Rng rng(66);
    double col_worst = 0.0, orth_worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const Cav cav = random_cav(rng, Pooling::None);
        const Tensor base = random_tensor(rng, {32, 16, 16});
        Tensor a = base;
        axpy(static_cast<float>(rng.normal() * 3.0), cav.weights, a);
        col_worst = std::max(col_worst, std::abs(robustness(cav, std::vector<Tensor>{base}, std::vector<Tensor>{a}).score));
        Tensor d = random_tensor(rng, {32, 16, 16});
        axpy(static_cast<float>(-dot(d, cav.weights)), cav.weights, d);
        Tensor b = base;
        axpy(1.0f, d, b);
        orth_worst = std::max(orth_worst,
                              std::abs(robustness(cav, std::vector<Tensor>{base}, std::vector<Tensor>{b}).score - 1.0));
    }
    const bool ok = cells > 0 && outside == 0 && exact_collinear == 0.0 && exact_orth == 1.0 && col_worst <= 1e-6 &&
                    orth_worst <= 1e-6;
    return {ok, std::to_string(cells) + " sweep values, " + std::to_string(outside) + " outside [0,1]; exact cases " +
                    fmt("%.1g", exact_collinear) + " / " + fmt("%.1g", exact_orth) + "; random collinear " +
                    fmt("%.1e", col_worst) + ", orthogonal |R-1| " + fmt("%.1e", orth_worst)};
}

double column_mean(const AlignmentReport& r, Method m, Pooling p, std::optional<double> ReportRow::*field) {
    std::vector<double> v;
    for (const auto& row : r.rows)
        if (row.method == m && row.pooled == p && row.*field) v.push_back(*(row.*field));
    return mean(v);
}

// 7. Orderings on the default sweep.
Outcome orderings(Context& ctx) {
    const auto t0 = Clock::now();
    const bool cached = ctx.sweep.has_value();
    const AlignmentReport& r = default_sweep(ctx);
    const double secs = seconds_since(t0);
    const double clf_acc = column_mean(r, Method::Clf, Pooling::None, &ReportRow::accuracy);
    const double clf_hard = column_mean(r, Method::Clf, Pooling::None, &ReportRow::hard_accuracy);
    const double seg_hard = column_mean(r, Method::Seg, Pooling::None, &ReportRow::hard_accuracy);
    const double clf_seg = column_mean(r, Method::Clf, Pooling::None, &ReportRow::segmentation);
    const double seg_seg = column_mean(r, Method::Seg, Pooling::None, &ReportRow::segmentation);
    const double pclf_seg = column_mean(r, Method::Clf, Pooling::Sum, &ReportRow::segmentation);
    std::size_t failed = 0;
    for (const auto& row : r.rows) failed += row.error.empty() ? 0 : 1;
    const bool a = clf_hard < clf_acc, b = seg_seg > clf_seg, c = seg_hard >= clf_hard, d = pclf_seg >= clf_seg;
    const bool ok = a && b && c && d && (cached || secs <= 1800);
    return {ok, std::string("(a) ") + (a ? "ok" : "no") + " CLF hard " + fmt("%.3f", clf_hard) + " < acc " +
                    fmt("%.3f", clf_acc) + "; (b) " + (b ? "ok" : "no") + " seg SEG " + fmt("%.3f", seg_seg) +
                    " > CLF " + fmt("%.3f", clf_seg) + "; (c) " + (c ? "ok" : "no") + " hard SEG " +
                    fmt("%.3f", seg_hard) + " >= CLF " + fmt("%.3f", clf_hard) + "; (d) " + (d ? "ok" : "no") +
                    " seg pooled CLF " + fmt("%.3f", pclf_seg) + " >= unpooled " + fmt("%.3f", clf_seg) + "; " +
                    std::to_string(r.rows.size()) + " rows, " + std::to_string(failed) + " failed, " +
                    fmt("%.0f s", secs)};
}

struct ScalingRun {
    AlignmentReport report;
    double seconds = 0.0;
};

ScalingRun& scaling(Context& ctx) {
    static std::optional<ScalingRun> run;
    if (!run) {
        const auto t0 = Clock::now();
        ExperimentConfig cfg;
        cfg.methods = {Method::Clf, Method::Pat};
        cfg.pooling = {Pooling::None};
        cfg.train_sizes = {10, 25, 50, 100, 250};
        cfg.repeats = 2;
        cfg.master_seed = 8;
        ReportConfig rc = report_config(cfg);
        rc.threads = ctx.threads;
        run = ScalingRun{run_report(rc, ctx.model, default_corpus_provider(rc)), 0.0};
        run->seconds = seconds_since(t0);
    }
    return *run;
}

double accuracy_at(const AlignmentReport& r, Method m, std::size_t n) {
    std::vector<double> v;
    for (const auto& row : r.rows)
        if (row.method == m && row.train_size == n && row.accuracy) v.push_back(*row.accuracy);
    return mean(v);
}

// 8. CLF improves with N; PAT does not move.
Outcome scaling_trend(Context& ctx) {
    const ScalingRun& run = scaling(ctx);
    std::string curve;
    double pat_lo = 1.0, pat_hi = 0.0;
    for (std::size_t n : {10, 25, 50, 100, 250}) {
        const double c = accuracy_at(run.report, Method::Clf, n), p = accuracy_at(run.report, Method::Pat, n);
        pat_lo = std::min(pat_lo, p);
        pat_hi = std::max(pat_hi, p);
        curve += " N=" + std::to_string(n) + ":" + fmt("%.3f", c) + "/" + fmt("%.3f", p);
    }
    const double gain = accuracy_at(run.report, Method::Clf, 250) - accuracy_at(run.report, Method::Clf, 10);
    const bool ok = gain >= 0.02 && pat_hi - pat_lo <= 0.05 && run.seconds <= 1200;
    return {ok, "CLF/PAT accuracy" + curve + "; CLF gain " + fmt("%+.3f", gain) + ", PAT range " +
                    fmt("%.3f", pat_hi - pat_lo) + ", " + fmt("%.0f s", run.seconds)};
}

double clf_pat_cosine(const AlignmentReport& r, std::size_t n) {
    std::map<std::pair<std::string, std::size_t>, std::map<Method, const Cav*>> cells;
    for (const auto& row : r.rows)
        if (row.train_size == n && row.error.empty()) cells[{row.concept_id, row.repeat}][row.method] = &row.cav;
    std::vector<double> v;
    for (const auto& [key, cavs] : cells) {
        if (cavs.count(Method::Clf) && cavs.count(Method::Pat))
            v.push_back(cosine(cavs.at(Method::Clf)->weights, cavs.at(Method::Pat)->weights));
    }
    return mean(v);
}

// 9. Pattern and classifier CAVs agree more at tiny N.
Outcome tiny_n_convergence(Context& ctx) {
    const ScalingRun& run = scaling(ctx);
    const double c10 = clf_pat_cosine(run.report, 10), c50 = clf_pat_cosine(run.report, 50);
    return {c10 >= c50 + 0.05, "mean cos(clf, pat) at N=10 " + fmt("%.3f", c10) + ", at N=50 " + fmt("%.3f", c50)};
}

// 10. TCAV separates the concept's own class; pooled and expanded routes agree.
Outcome tcav(Context& ctx) {
    std::vector<double> own, other;
    double route_gap = 0.0;
    std::size_t score_mismatch = 0;
    for (std::size_t ci = 0; ci < kShapeKinds; ++ci) {
        const ConceptSpec spec = concept_for(static_cast<ShapeKind>(ci));
        const ConceptCorpus c = generate(spec, {CueKind::CornerMarker, 0.9}, {50, 50, 100, 100, 0}, derive_seed(100, {ci}));
        const auto zp = features_for(ctx.model, c, Split::Train, true);
        const auto zn = features_for(ctx.model, c, Split::Train, false);
        const auto tp = features_for(ctx.model, c, Split::Test, true);
        const Cav clf = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::None, 3));
        const TcavCurve curve = tcav_scores(clf, tp, ctx.model);
        for (std::size_t k = 0; k < curve.scores.size(); ++k) (k == ci ? own : other).push_back(curve.scores[k]);

        const Cav pooled = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::Sum, 3));
        const auto de = tcav_derivatives(pooled, tp, ctx.model), dp = tcav_derivatives_pooled(pooled, tp, ctx.model);
        for (std::size_t i = 0; i < de.size(); ++i)
            for (std::size_t k = 0; k < de[i].size(); ++k)
                route_gap = std::max(route_gap, std::abs(de[i][k] - dp[i][k]) / std::max(1.0, std::abs(de[i][k])));
        const auto se = tcav_from_derivatives(de, pooled).scores, sp = tcav_from_derivatives(dp, pooled).scores;
        for (std::size_t k = 0; k < se.size(); ++k) score_mismatch += std::abs(se[k] - sp[k]) > 1e-6;
    }
    const double gap = mean(own) - mean(other);
    return {gap >= 0.1 && route_gap <= 1e-6 && score_mismatch == 0,
            "own class " + fmt("%.3f", mean(own)) + " vs others " + fmt("%.3f", mean(other)) + " (gap " +
                fmt("%.3f", gap) + "); pooled vs expanded derivative gap " + fmt("%.1e", route_gap) +
                ", score mismatches " + std::to_string(score_mismatch)};
}

std::map<std::string, std::string> artefacts(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = e.path().extension().string();
        const std::string rel = fs::relative(e.path(), root).string();
        if (ext == ".cav" || ext == ".cavt" || rel == "report.csv") {
            std::ifstream in(e.path(), std::ios::binary);
            std::stringstream s;
            s << in.rdbuf();
            out[rel] = s.str();
        }
    }
    return out;
}

// 11. Two pipeline runs give byte-identical outputs.
Outcome determinism(Context& ctx) {
    const fs::path model = ctx.cache / "model.cavm";
    ExperimentConfig cfg;
    cfg.concepts = {"circle", "triangle", "star"};
    cfg.repeats = 2;
    cfg.train_sizes = {20};
    cfg.test_per_class = 30;
    cfg.buffer = 30;
    cfg.fp_buffer = 400;
    cfg.model_path = model.string();
    std::vector<std::map<std::string, std::string>> runs;
    std::size_t t = 0;
    for (const char* name : {"determinism_a", "determinism_b"}) {
        const fs::path out = ctx.cache / name;
        fs::remove_all(out);
        cfg.output_dir = out.string();
        run_pipeline(cfg, Logger(nullptr), ++t == 1 ? 1 : std::max<std::size_t>(2, ctx.threads));
        runs.push_back(artefacts(out));
    }
    std::size_t cavs = 0, differing = 0;
    for (const auto& [rel, bytes] : runs[0]) {
        cavs += rel.ends_with(".cav");
        if (!runs[1].count(rel) || runs[1].at(rel) != bytes) ++differing;
    }
    const bool ok = runs[0].size() == runs[1].size() && differing == 0 && runs[0].count("report.csv") && cavs > 0;
    return {ok, std::to_string(runs[0].size()) + " files compared (report.csv and " + std::to_string(cavs) +
                    " CAVs with weights, threads 1 vs 2), " + std::to_string(differing) + " differ"};
}

// 12. CLF CLMs light up the planted corner; pooled CLF ones less so.
Outcome clm_corner(Context& ctx) {
    std::size_t total = 0, concentrated = 0;
    std::vector<double> conc_clf, conc_pooled;
    for (std::size_t ci = 0; ci < kShapeKinds; ++ci) {
        const ConceptSpec spec = concept_for(static_cast<ShapeKind>(ci));
        const ConceptCorpus c =
            generate(spec, {CueKind::CornerMarker, 0.95}, {50, 50, 50, 50, 0}, derive_seed(120, {ci}));
        const auto zp = features_for(ctx.model, c, Split::Train, true);
        const auto zn = features_for(ctx.model, c, Split::Train, false);
        const Cav clf = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::None, 4));
        const Cav pooled = train_classifier(zp, zn, probe_for(spec.concept_id, Pooling::Sum, 4));
        for (std::size_t i : c.indices(Split::Test, true)) {
            const double a = corner_concentration(render_clm(clf, c.images[i], ctx.model).attribution);
            const double b = corner_concentration(render_clm(pooled, c.images[i], ctx.model).attribution);
            ++total;
            concentrated += a >= 2.0;
            conc_clf.push_back(a);
            conc_pooled.push_back(b);
        }
    }
    const double frac = static_cast<double>(concentrated) / static_cast<double>(total);
    return {frac >= 0.6 && mean(conc_pooled) < mean(conc_clf),
            fmt("%.1f%%", 100 * frac) + " of " + std::to_string(total) + " test positives at >= 2x; mean concentration CLF " +
                fmt("%.2f", mean(conc_clf)) + ", pooled CLF " + fmt("%.2f", mean(conc_pooled))};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cavlab acceptance suite"};
    std::string cache = "acceptance_cache";
    std::vector<int> only;
    app.add_option("--cache-dir", cache, "Directory for the pretrained model and pipeline outputs");
    app.add_option("--only", only, "Run only these criteria");
    CLI11_PARSE(app, argc, argv);

    Context ctx;
    ctx.cache = cache;
    ctx.threads = default_threads();
    ctx.model = obtain_model(ctx.cache);
    std::fflush(stdout);

    const std::vector<std::pair<const char*, std::function<Outcome(Context&)>>> criteria = {
        {"separability", separability},       {"fp-cav", fp_effect},
        {"completeness", completeness},       {"pooling identity", pooling_identity},
        {"gradient oracles", gradients},      {"robustness bounds", robustness_bounds},
        {"metric orderings", orderings},      {"scaling trend", scaling_trend},
        {"tiny-N convergence", tiny_n_convergence}, {"tcav", tcav},
        {"determinism", determinism},         {"clm corner", clm_corner},
    };
    // Criterion 6 reads the sweep, so the sweep is timed under criterion 7 when both run.
    std::vector<int> order;
    for (int i = 1; i <= 12; ++i)
        if (only.empty() || std::find(only.begin(), only.end(), i) != only.end()) order.push_back(i);
    if (std::find(order.begin(), order.end(), 6) != order.end() && std::find(order.begin(), order.end(), 7) != order.end()) {
        order.erase(std::find(order.begin(), order.end(), 6));
        order.insert(std::find(order.begin(), order.end(), 7) + 1, 6);
    }

    std::map<int, std::string> lines;
    bool all = true;
    for (int i : order) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i - 1].second(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        all = all && o.pass;
        char head[96];
        std::snprintf(head, sizeof head, "%s %2d %s [%.0f s]: ", o.pass ? "PASS" : "FAIL", i, criteria[i - 1].first,
                      seconds_since(t0));
        lines[i] = head + o.detail;
        std::printf("%s\n", lines[i].c_str());
        std::fflush(stdout);
    }
    std::printf("\nSummary:\n");
    for (const auto& [i, line] : lines) std::printf("%s\n", line.c_str());
    return all ? 0 : 1;
}
