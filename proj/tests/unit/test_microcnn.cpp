#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cavlab/corpus.hpp"
#include "cavlab/errors.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/rng.hpp"

using namespace cavlab;

namespace {

Tensor noise_image(std::uint64_t seed) {
    Tensor x({3, 64, 64});
    Rng rng(seed);
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
    return x;
}

Tensor random_z(std::uint64_t seed, float scale = 1.0f) {
    Tensor z({32, 16, 16});
    Rng rng(seed);
    for (auto& v : z.values()) v = static_cast<float>(rng.uniform() * scale);
    return z;
}

// Naive reference: padded 3x3 conv with explicit bounds checks, double sums.
Tensor naive_conv_relu(const Conv3x3& c, const Tensor& in) {
    const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2), co = c.weight.dim(0);
    Tensor out({co, h, w});
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double s = c.bias[o];
                for (std::size_t i = 0; i < ci; ++i)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                            s += static_cast<double>(c.weight[((o * ci + i) * 3 + (dy + 1)) * 3 + (dx + 1)]) *
                                 in.at(i, yy, xx);
                        }
                out.at(o, y, x) = static_cast<float>(std::max(0.0, s));
            }
    return out;
}

Tensor naive_pool(const Tensor& in) {
    Tensor out({in.dim(0), in.dim(1) / 2, in.dim(2) / 2});
    for (std::size_t c = 0; c < in.dim(0); ++c)
        for (std::size_t y = 0; y < out.dim(1); ++y)
            for (std::size_t x = 0; x < out.dim(2); ++x)
                out.at(c, y, x) = std::max(std::max(in.at(c, 2 * y, 2 * x), in.at(c, 2 * y, 2 * x + 1)),
                                           std::max(in.at(c, 2 * y + 1, 2 * x), in.at(c, 2 * y + 1, 2 * x + 1)));
    return out;
}

Tensor naive_features(const MicroCnn& m, const Tensor& x) {
    Tensor xn = x;
    for (auto& v : xn.values()) v = (v - kInputCenter) * kInputScale;
    return naive_conv_relu(m.conv3, naive_pool(naive_conv_relu(m.conv2, naive_pool(naive_conv_relu(m.conv1, xn)))));
}

std::vector<double> oracle_probs(const MicroCnn& m, const Tensor& z) {
    const std::size_t k_count = m.num_classes();
    std::vector<double> logit(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        double s = m.head_bias[k];
        for (std::size_t c = 0; c < 32; ++c) {
            double mean = 0;
            for (float v : z.channel(c)) mean += v;
            s += m.head_weights.at(k, c) * (mean / 256.0);
        }
        logit[k] = s;
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double total = 0;
    for (auto& l : logit) total += (l = std::exp(l - mx));
    for (auto& l : logit) l /= total;
    return logit;
}

}  // namespace

TEST_CASE("features are non-negative, deterministic and match a naive loop") {
    const MicroCnn m = MicroCnn::initialize(42, 8);
    const Tensor zero = forward_features(m, Tensor({3, 64, 64}));
    CHECK(zero == forward_features(m, Tensor({3, 64, 64})));

    const auto corpus = generate_classes(8, 1, 0);
    const Tensor z = forward_features(m, corpus.images[0]);
    REQUIRE(z.shape() == Shape{32, 16, 16});
    for (float v : z.values()) REQUIRE(v >= 0.0f);
    const Tensor ref = naive_features(m, corpus.images[0]);
    double worst = 0;
    for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(z[i]) - ref[i]));
    CHECK(worst <= 1e-4);

    // Golden checksum of the seed-42 activations, pinned on first run.
    double checksum = 0;
    for (std::size_t i = 0; i < z.size(); ++i) checksum += z[i] * static_cast<double>(1 + i % 7);
    const std::filesystem::path golden = std::filesystem::path(CAVLAB_GOLDEN_DIR) / "microcnn_seed42.txt";
    if (std::filesystem::exists(golden)) {
        std::ifstream in(golden);
        double pinned = 0;
        in >> pinned;
        CHECK(checksum == doctest::Approx(pinned).epsilon(1e-9));
    } else {
        std::filesystem::create_directories(golden.parent_path());
        std::ofstream(golden) << std::setprecision(17) << checksum << '\n';
    }

    CHECK_THROWS_AS(forward_features(m, Tensor({3, 32, 32})), ShapeMismatch);
    CHECK(forward_features(m, corpus.images[0], ProbeLayer::Conv2).shape() == Shape{16, 32, 32});
}

TEST_CASE("head probabilities") {
    MicroCnn m = MicroCnn::initialize(1, 8);
    const Tensor z = random_z(3);
    const Tensor p = forward_head(m, z);
    const auto ref = oracle_probs(m, z);
    double total = 0;
    for (std::size_t k = 0; k < 8; ++k) {
        CHECK(p[k] > 0.0f);
        CHECK(p[k] < 1.0f);
        CHECK(p[k] == doctest::Approx(ref[k]).epsilon(1e-5));
        total += p[k];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

    std::fill(m.head_weights.values().begin(), m.head_weights.values().end(), 0.0f);
    const Tensor u = forward_head(m, z);
    for (std::size_t k = 0; k < 8; ++k) CHECK(u[k] == doctest::Approx(1.0 / 8));
    const Tensor g = grad_head_wrt_z(m, z, 2);
    for (float v : g.values()) CHECK(v == 0.0f);
}

TEST_CASE("head gradient: finite differences, spatial uniformity, zero sum") {
    const MicroCnn m = MicroCnn::initialize(5, 8);
    const Tensor z = random_z(9, 2.0f);
    Rng pick(17);
    for (std::size_t k : {0u, 3u, 7u}) {
        const Tensor g = grad_head_wrt_z(m, z, k);
        for (std::size_t c = 0; c < 32; ++c) {
            const auto ch = g.channel(c);
            for (float v : ch) REQUIRE(v == ch[0]);
        }
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t i = pick.below(z.size());
            const double h = 1e-3;
            Tensor zp = z, zm = z;
            zp[i] += static_cast<float>(h);
            zm[i] -= static_cast<float>(h);
            const double hp = zp[i] - static_cast<double>(z[i]), hm = static_cast<double>(z[i]) - zm[i];
            const double fd = (oracle_probs(m, zp)[k] - oracle_probs(m, zm)[k]) / (hp + hm);
            CHECK(std::abs(fd - g[i]) <= 1e-3 * std::max(std::abs(fd), std::abs(static_cast<double>(g[i]))) + 1e-9);
        }
    }
    Tensor sum(z.shape());
    for (std::size_t k = 0; k < 8; ++k) axpy(1.0f, grad_head_wrt_z(m, z, k), sum);
    for (float v : sum.values()) CHECK(std::abs(v) <= 1e-5);
    CHECK_THROWS_AS(grad_head_wrt_z(m, z, 8), InvalidArgument);
}

TEST_CASE("input gradient agrees with finite differences away from kinks") {
    const MicroCnn m = MicroCnn::initialize(7, 8);
    const Tensor x = noise_image(21);
    const Tensor upstream = random_z(22);
    const auto f = [&](const Tensor& img) { return dot(upstream, forward_features(m, img)); };
    const Tensor g = grad_features_wrt_input(m, x, upstream);
    CHECK(g == grad_features_wrt_input(m, x, upstream));
    const Tensor zero_grad = grad_features_wrt_input(m, x, Tensor({32, 16, 16}));
    for (float v : zero_grad.values()) REQUIRE(v == 0.0f);

    Rng pick(5);
    int checked = 0;
    for (int trial = 0; trial < 400 && checked < 20; ++trial) {
        const std::size_t i = pick.below(x.size());
        const float h = 1e-3f;
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double f0 = f(x), fp = f(xp), fm = f(xm);
        const double right = (fp - f0) / h, left = (f0 - fm) / h;
        // The map is piecewise linear; unequal one-sided slopes mean a kink was crossed.
        if (std::abs(right - left) > 1e-3 * (std::abs(right) + std::abs(left)) + 1e-4) continue;
        const double fd = (fp - fm) / (2 * h);
        if (std::abs(fd) < 1e-2) continue;
        CHECK(std::abs(fd - g[i]) <= 1e-2 * std::abs(fd));
        ++checked;
    }
    CHECK(checked >= 20);
}

TEST_CASE("approximate translation equivariance away from borders") {
    const MicroCnn m = MicroCnn::initialize(42, 8);
    const auto corpus = generate_classes(8, 2, 4);
    for (std::size_t n = 0; n < 4; ++n) {
        const Tensor& x = corpus.images[n];
        Tensor shifted(x.shape());
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 64; ++y)
                for (std::size_t xx = 0; xx < 64; ++xx) shifted.at(c, y, (xx + 4) % 64) = x.at(c, y, xx);
        const Tensor z = forward_features(m, x), zs = forward_features(m, shifted);
        double dev = 0, scale = 0;
        std::size_t count = 0;
        for (std::size_t c = 0; c < 32; ++c)
            for (std::size_t y = 2; y < 14; ++y)
                for (std::size_t xx = 2; xx < 13; ++xx) {
                    dev += std::abs(zs.at(c, y, xx + 1) - z.at(c, y, xx));
                    scale += std::abs(z.at(c, y, xx));
                    ++count;
                }
        CHECK(dev / count <= 0.1 * (scale / count));
    }
}

TEST_CASE("pretraining determinism and zero learning rate") {
    const auto corpus = generate_classes(4, 6, 9);
    std::vector<Tensor> images(corpus.images.begin(), corpus.images.end());
    std::vector<int> labels;
    for (const auto& s : corpus.samples) labels.push_back(s.class_label);
    PretrainTask task;
    task.num_classes = 4;
    task.epochs = 2;
    task.batch_size = 4;
    task.seed = 11;
    const auto a = train_model(task, images, labels), b = train_model(task, images, labels);
    CHECK(a.model.conv1.weight == b.model.conv1.weight);
    CHECK(a.model.conv3.weight == b.model.conv3.weight);
    CHECK(a.model.head_weights == b.model.head_weights);
    CHECK_FALSE(a.model.conv1.weight == MicroCnn::initialize(11, 4).conv1.weight);
    CHECK(a.epoch_loss.size() == 2);

    task.learning_rate = 0.0;
    const auto frozen = train_model(task, images, labels);
    const MicroCnn init = MicroCnn::initialize(11, 4);
    CHECK(frozen.model.conv1.weight == init.conv1.weight);
    CHECK(frozen.model.conv2.bias == init.conv2.bias);
    CHECK(frozen.model.head_weights == init.head_weights);

    PretrainTask bad = task;
    bad.num_classes = 3;
    CHECK_THROWS_AS(train_model(bad, images, labels), InvalidArgument);
    CHECK_THROWS_AS(pretrain(task, corpus), TrainingDiverged);
}

TEST_CASE("model file round trip and corruption") {
    const MicroCnn m = MicroCnn::initialize(99, 8);
    const auto path = (std::filesystem::temp_directory_path() / "cavlab_model_test.cavm").string();
    save_model(path, m);
    const MicroCnn back = load_model(path);
    CHECK(back.seed == 99);
    CHECK(back.conv2.weight == m.conv2.weight);
    CHECK(back.head_bias == m.head_bias);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(load_model(path), SchemaError);
    std::filesystem::remove(path);
}
