#include <doctest.h>

#include <cmath>

#include "cavlab/corpus.hpp"
#include "cavlab/errors.hpp"
#include "cavlab/metrics.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/rng.hpp"

using namespace cavlab;

namespace {

Tensor random_tensor(Shape s, Rng& rng, bool positive = false) {
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = static_cast<float>(positive ? rng.uniform() : rng.normal());
    return t;
}

Cav unit_cav(Tensor w, double bias) {
    Cav c;
    const Normalized n = normalize(w, bias);
    c.weights = n.direction;
    c.bias = n.bias;
    return c;
}

}  // namespace

TEST_CASE("accuracy on separable, constant and random data") {
    Rng rng(1);
    const Cav cav = unit_cav(Tensor({2}, std::vector<float>{1, 0}), 0.0);
    const std::vector<Tensor> zp{Tensor({2}, std::vector<float>{1, 5}), Tensor({2}, std::vector<float>{2, -3})};
    const std::vector<Tensor> zn{Tensor({2}, std::vector<float>{-1, 5}), Tensor({2}, std::vector<float>{-0.5, 0})};
    CHECK(accuracy(cav, zp, zn) == 1.0);
    const Cav everything = unit_cav(Tensor({2}, std::vector<float>{1e-3f, 0}), 1.0);
    CHECK(accuracy(everything, zp, zn) == 0.5);
    CHECK_THROWS(accuracy(cav, {}, {}));

    std::vector<Tensor> rp, rn;
    for (int i = 0; i < 40; ++i) {
        rp.push_back(random_tensor({5}, rng));
        rn.push_back(random_tensor({5}, rng));
    }
    const Cav r = unit_cav(random_tensor({5}, rng), 0.2);
    std::size_t ok = 0;
    for (const auto& z : rp) ok += dot(r.weights, z) + r.bias > 0;
    for (const auto& z : rn) ok += !(dot(r.weights, z) + r.bias > 0);
    CHECK(accuracy(r, rp, rn) == doctest::Approx(ok / 80.0));
}

TEST_CASE("segmentation score cases") {
    Rng rng(2);
    Tensor z({2, 4, 4}, 0.0f);
    Tensor mask({4, 4});
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            mask.at(y, x) = 1.0f;
            z.at(0, y, x) = 1.0f;
        }
    const Cav inside = unit_cav(expand_channels(Tensor({2}, std::vector<float>{1, 0}), 4, 4), 0.0);
    const std::vector<Tensor> zs{z}, ms{mask}, ones{Tensor({4, 4}, 1.0f)};
    CHECK(segmentation_score(inside, zs, ms).score == doctest::Approx(1.0));

    const Tensor zr = random_tensor({2, 4, 4}, rng, true);
    const Cav any = unit_cav(random_tensor({2, 4, 4}, rng), 0.3);
    const std::vector<Tensor> zrs{zr};
    const auto s = segmentation_score(any, zrs, ones);
    CHECK(s.score == doctest::Approx(1.0));

    // Joint positive rescaling of (v, b) before normalization changes nothing.
    const Tensor w = random_tensor({2, 4, 4}, rng);
    const Cav c1 = unit_cav(w, 0.4), c2 = unit_cav(scaled(w, 3.0f), 1.2);
    const Tensor m2 = random_tensor({4, 4}, rng, true);
    Tensor bin({4, 4});
    for (std::size_t i = 0; i < 16; ++i) bin[i] = m2[i] > 0.5f ? 1.0f : 0.0f;
    const std::vector<Tensor> bins{bin};
    CHECK(segmentation_score(c1, zrs, bins).score == doctest::Approx(segmentation_score(c2, zrs, bins).score));

    // All pairs degenerate: no positive attribution anywhere.
    const Cav negative = unit_cav(expand_channels(Tensor({2}, std::vector<float>{-1, -1}), 4, 4), -1.0);
    CHECK_THROWS_AS(segmentation_score(negative, zrs, bins), NumericError);
    const std::vector<Tensor> two{zr, zr}, twom{bin, bin};
    const Cav pos_bias = unit_cav(expand_channels(Tensor({2}, std::vector<float>{1, 1}), 4, 4), 0.0);
    CHECK(segmentation_score(pos_bias, two, twom).skipped == 0);
}

TEST_CASE("robustness bounds and constructed extremes") {
    const Cav v = unit_cav(Tensor({3}, std::vector<float>{1, 0, 0}), 0.0);
    const std::vector<Tensor> base{Tensor({3}, std::vector<float>{1, 1, 1})};
    const std::vector<Tensor> ortho{Tensor({3}, std::vector<float>{1, 3, 0})};
    const std::vector<Tensor> parallel{Tensor({3}, std::vector<float>{4, 1, 1})};
    CHECK(robustness(v, base, ortho).score == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(robustness(v, base, parallel).score == doctest::Approx(0.0).epsilon(1e-6));
    CHECK_THROWS_AS(robustness(v, base, base), NumericError);

    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const Cav r = unit_cav(random_tensor({6}, rng), 0.0);
        const std::vector<Tensor> a{random_tensor({6}, rng)}, b{random_tensor({6}, rng)};
        const double score = robustness(r, a, b).score;
        REQUIRE(score >= 0.0);
        REQUIRE(score <= 1.0);
        Cav flipped = r;
        flipped.weights = scaled(r.weights, -1.0f);
        REQUIRE(robustness(flipped, a, b).score == doctest::Approx(score));
    }
    const std::vector<Tensor> two{base[0], base[0]}, mixed{ortho[0], base[0]};
    const auto skipped = robustness(v, two, mixed);
    CHECK(skipped.skipped == 1);
    CHECK(skipped.score == doctest::Approx(1.0));
}

TEST_CASE("hard accuracy equals accuracy for a background-blind identity probe") {
    auto corpus = generate(concept_for(ShapeKind::Square), {CueKind::CornerMarker, 0.9}, {5, 5, 6, 6, 12}, 4);
    // Feature map: the image masked by its own concept mask, so backgrounds never reach the probe.
    const FeatureFn masked = [&corpus](const Tensor& x) {
        Tensor out({1, 64, 64});
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            if (corpus.images[i] == x) {
                for (std::size_t k = 0; k < 4096; ++k) out[k] = corpus.masks[i][k];
                return out;
            }
        }
        // Re-rendered positives keep the foreground pixels, so find the source by them.
        for (std::size_t i : corpus.indices(Split::Test, true)) {
            bool same = true;
            for (std::size_t k = 0; k < 4096 && same; ++k)
                if (corpus.masks[i][k] > 0 && x[k] != corpus.images[i][k]) same = false;
            if (same) {
                for (std::size_t k = 0; k < 4096; ++k) out[k] = corpus.masks[i][k];
                return out;
            }
        }
        return out;
    };
    const Cav cav = unit_cav(Tensor({1, 64, 64}, 1.0f), -1.0);
    std::vector<Tensor> zp, zn;
    for (std::size_t i : corpus.indices(Split::Test, true)) zp.push_back(masked(corpus.images[i]));
    for (std::size_t i : corpus.indices(Split::Test, false)) zn.push_back(masked(corpus.images[i]));
    CHECK(hard_accuracy(cav, corpus, masked, 7) == doctest::Approx(accuracy(cav, zp, zn)));
    CHECK(hard_positive_images(corpus, 7).size() == 6);
}

TEST_CASE("report rows, determinism, zero std for one repeat") {
    ReportConfig cfg;
    cfg.concepts = {concept_for(ShapeKind::Circle), concept_for(ShapeKind::Cross)};
    cfg.methods = {Method::Clf, Method::Pat, Method::Seg, Method::Mix, Method::Joint};
    cfg.poolings = {Pooling::None, Pooling::Sum};
    cfg.train_sizes = {6};
    cfg.test_per_class = 6;
    cfg.buffer = 10;
    cfg.repeats = 1;
    cfg.probe.max_iters = 30;
    cfg.threads = 2;
    const MicroCnn model = MicroCnn::initialize(42, 8);
    const AlignmentReport a = run_report(cfg, model, default_corpus_provider(cfg));
    CHECK(a.rows.size() == 2 * 5 * 2);
    for (const auto& row : a.rows) {
        if (!row.error.empty()) continue;
        for (std::size_t c = 0; c < std::size(kMetricColumns); ++c) {
            const auto v = row_metric(row, c);
            if (v) {
                CHECK(*v >= 0.0);
                CHECK(*v <= 1.0 + 1e-9);
            }
        }
    }
    for (const auto& s : a.summary) {
        CHECK(s.repeats == 1);
        for (const auto& [mean, sd] : s.stats) CHECK(sd == 0.0);
    }
    const std::string csv = report_csv(a);
    CHECK(csv.rfind("concept,method,pooled,train_size,repeat,accuracy,hard_accuracy,segmentation,flip,noise,"
                    "grayscale,background,similarity,skipped_samples\n",
                    0) == 0);
    cfg.threads = 1;
    CHECK(report_csv(run_report(cfg, model, default_corpus_provider(cfg))) == csv);
}

TEST_CASE("failing cells become null rows with an error tag") {
    ReportConfig cfg;
    cfg.concepts = {concept_for(ShapeKind::Circle)};
    cfg.methods = {Method::Pat};
    cfg.poolings = {Pooling::Max};
    cfg.train_sizes = {4};
    cfg.test_per_class = 4;
    cfg.buffer = 4;
    cfg.repeats = 1;
    const MicroCnn model = MicroCnn::initialize(1, 8);
    const AlignmentReport r = run_report(cfg, model, default_corpus_provider(cfg));
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].error == "error:InvalidArgument");
    CHECK_FALSE(r.rows[0].accuracy.has_value());
    CHECK(report_csv(r).find("null") != std::string::npos);
    CHECK(report_csv(r).find("error:InvalidArgument") != std::string::npos);
}

TEST_CASE("parallel_for propagates the first exception") {
    std::vector<int> hits(50, 0);
    parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw DataError("boom"); }), DataError);
}
