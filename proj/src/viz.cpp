#include "cavlab/viz.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cavlab/errors.hpp"
#include "cavlab/rng.hpp"

namespace cavlab {

namespace {

constexpr float kRamp[5][3] = {{0.267f, 0.005f, 0.329f},
                               {0.230f, 0.322f, 0.546f},
                               {0.128f, 0.567f, 0.551f},
                               {0.369f, 0.789f, 0.383f},
                               {0.993f, 0.906f, 0.144f}};

float sample_bilinear(const float* plane, std::size_t h, std::size_t w, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
    const double bottom = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
    return static_cast<float>(top * (1 - fy) + bottom * fy);
}

void check_completeness(const Cav& cav, const Tensor& z, const Tensor& phi) {
    double total = 0.0;
    for (float v : phi.values()) total += v;
    const double logit = dot(cav.weights, z) + cav.bias;
    if (std::abs(total - logit) > 1e-5 * (1.0 + std::abs(logit))) {
        throw NumericError("attribution map violates completeness: sum " + std::to_string(total) + " vs logit " +
                           std::to_string(logit));
    }
}

void require_head_layer(const Cav& cav, const MicroCnn& model) {
    if (cav.layer_id != "conv3") throw InvalidArgument("TCAV needs a CAV on the head's input layer conv3");
    if (cav.weights.shape() != probe_shape(ProbeLayer::Conv3) || model.num_classes() == 0) {
        throw ShapeMismatch("TCAV needs a [32,16,16] CAV");
    }
}

}  // namespace

Tensor upscale_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw ShapeMismatch("upscale expects a [H,W] map");
    const std::size_t h = map.dim(0), w = map.dim(1);
    const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
    Tensor out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
            out.at(y, x) = sample_bilinear(map.data(), h, w, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
        }
    }
    return out;
}

Tensor gaussian_smooth(const Tensor& map, double sigma) {
    if (map.rank() != 2) throw ShapeMismatch("smoothing expects a [H,W] map");
    if (sigma <= 0.0) return map;
    const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0.0;
    for (long i = -radius; i <= radius; ++i) ksum += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& k : kernel) k /= ksum;

    const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
    Tensor tmp(map.shape()), out(map.shape());
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double s = 0.0;
            for (long i = -radius; i <= radius; ++i) s += kernel[i + radius] * map.at(y, std::clamp(x + i, 0L, w - 1));
            tmp.at(y, x) = static_cast<float>(s);
        }
    }
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double s = 0.0;
            for (long i = -radius; i <= radius; ++i) s += kernel[i + radius] * tmp.at(std::clamp(y + i, 0L, h - 1), x);
            out.at(y, x) = static_cast<float>(s);
        }
    }
    return out;
}

void colormap(double t, float rgb[3]) {
    t = std::clamp(t, 0.0, 1.0) * 4.0;
    const auto i = std::min<std::size_t>(3, static_cast<std::size_t>(t));
    const double f = t - static_cast<double>(i);
    for (int c = 0; c < 3; ++c) rgb[c] = static_cast<float>(kRamp[i][c] * (1 - f) + kRamp[i + 1][c] * f);
}

Heatmap render_clm(const Cav& cav, const Tensor& image, const FeatureFn& features, const ClmOptions& opt) {
    const Tensor z = features(image);
    Tensor phi = shifted_attribution(cav, z);
    check_completeness(cav, z, phi);
    for (auto& v : phi.values()) v = std::max(0.0f, v);

    Heatmap hm;
    hm.base_image = image;
    hm.attribution = gaussian_smooth(upscale_bilinear(phi, image.dim(1), image.dim(2)), opt.sigma);
    for (auto& v : hm.attribution.values()) v = std::max(0.0f, v);
    const float peak = *std::max_element(hm.attribution.values().begin(), hm.attribution.values().end());
    hm.overlay = Tensor(image.shape());
    const std::size_t plane = hm.attribution.size();
    for (std::size_t i = 0; i < plane; ++i) {
        float rgb[3];
        colormap(peak > 0.0f ? hm.attribution[i] / peak : 0.0, rgb);
        for (std::size_t c = 0; c < 3; ++c) {
            hm.overlay[c * plane + i] =
                static_cast<float>((1.0 - opt.alpha) * image[c * plane + i] + opt.alpha * rgb[c]);
        }
    }
    return hm;
}

Heatmap render_clm(const Cav& cav, const Tensor& image, const MicroCnn& model, const ClmOptions& opt) {
    return render_clm(cav, image, feature_fn(model, parse_layer(cav.layer_id)), opt);
}

double corner_concentration(const Tensor& attribution, std::size_t block) {
    if (attribution.rank() != 2 || attribution.dim(0) % block || attribution.dim(1) % block) {
        throw ShapeMismatch("attribution map must tile into blocks");
    }
    double corner = 0.0, total = 0.0;
    for (std::size_t y = 0; y < attribution.dim(0); ++y) {
        for (std::size_t x = 0; x < attribution.dim(1); ++x) {
            const double v = std::max(0.0f, attribution.at(y, x));
            total += v;
            if (y < block && x < block) corner += v;
        }
    }
    const double blocks = static_cast<double>((attribution.dim(0) / block) * (attribution.dim(1) / block));
    return total > 0.0 ? corner / (total / blocks) : 0.0;
}

std::vector<std::size_t> prototypes(const Cav& cav, ActivationSet activations, std::size_t k) {
    if (k > activations.size()) throw InvalidArgument("k exceeds the number of images");
    std::vector<double> sim(activations.size());
    for (std::size_t i = 0; i < activations.size(); ++i) sim[i] = cosine(cav.weights, activations[i]);
    std::vector<std::size_t> order(activations.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&sim](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    order.resize(k);
    return order;
}

std::vector<std::size_t> prototypes(const Cav& cav, std::span<const Tensor> images, const FeatureFn& features,
                                    std::size_t k) {
    std::vector<Tensor> acts;
    for (const auto& x : images) acts.push_back(features(x));
    return prototypes(cav, acts, k);
}

double actmax_objective(const MicroCnn& model, const Cav& cav, const Tensor& x) {
    const Tensor z = forward_features(model, x, parse_layer(cav.layer_id));
    const double n = norm(z);
    if (n == 0.0) return 0.0;
    return dot(z, cav.weights) / n;
}

Tensor actmax_gradient(const MicroCnn& model, const Cav& cav, const Tensor& x) {
    const ProbeLayer layer = parse_layer(cav.layer_id);
    const Tensor z = forward_features(model, x, layer);
    const double n = norm(z);
    if (n == 0.0) return Tensor(x.shape());
    const double zv = dot(z, cav.weights);
    Tensor up(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        up[i] = static_cast<float>(cav.weights[i] / n - zv * z[i] / (n * n * n));
    }
    return grad_features_wrt_input(model, x, up, layer);
}

Tensor random_transform(const Tensor& x, std::uint64_t seed) {
    if (x.rank() != 3) throw ShapeMismatch("transforms expect [C,H,W]");
    Rng rng(seed);
    const double ty = static_cast<double>(rng.below(5)) - 2.0;
    const double tx = static_cast<double>(rng.below(5)) - 2.0;
    const double scale = rng.uniform(0.95, 1.05);
    const double angle = rng.uniform(-5.0, 5.0) * std::numbers::pi / 180.0;
    const std::size_t h = x.dim(1), w = x.dim(2);
    const double cy = h / 2.0, cx = w / 2.0, ca = std::cos(angle), sa = std::sin(angle);
    Tensor out(x.shape());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
            const double qy = y + 0.5 - cy - ty, qx = xx + 0.5 - cx - tx;
            const double sy = (ca * qy - sa * qx) / scale + cy - 0.5;
            const double sx = (sa * qy + ca * qx) / scale + cx - 0.5;
            for (std::size_t c = 0; c < x.dim(0); ++c) {
                out.at(c, y, xx) = sample_bilinear(x.channel(c).data(), h, w, sy, sx);
            }
        }
    }
    return out;
}

ActMaxResult activation_maximization(const Cav& cav, const MicroCnn& model, const ActMaxConfig& cfg) {
    if (cfg.steps == 0) throw InvalidArgument("activation maximization needs at least one step");
    Rng init(derive_seed(cfg.seed, {0x1417}));
    ActMaxResult r;
    r.image = Tensor({kImageChannels, kImageSize, kImageSize});
    for (auto& v : r.image.values()) v = static_cast<float>(init.uniform(0.4, 0.6));
    r.initial_objective = actmax_objective(model, cav, r.image);
    r.trace.push_back(r.initial_objective);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const Tensor g = actmax_gradient(model, cav, r.image);
        const double rms = std::sqrt(squared_norm(g.values()) / static_cast<double>(g.size()));
        if (!std::isfinite(rms)) throw NumericError("activation maximization gradient non-finite at step " + std::to_string(step));
        bool changed = false;
        if (rms > 0.0 && cfg.step_size != 0.0) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float next = std::clamp(static_cast<float>(r.image[i] + cfg.step_size * g[i] / rms), 0.0f, 1.0f);
                changed = changed || next != r.image[i];
                r.image[i] = next;
            }
        }
        if (changed && cfg.transforms) r.image = random_transform(r.image, derive_seed(cfg.seed, {step}));
        const double obj = actmax_objective(model, cav, r.image);
        if (!std::isfinite(obj)) throw NumericError("activation maximization objective non-finite at step " + std::to_string(step));
        r.trace.push_back(obj);
    }
    r.final_objective = r.trace.back();
    return r;
}

std::vector<std::vector<double>> tcav_derivatives(const Cav& cav, ActivationSet positives, const MicroCnn& model) {
    require_head_layer(cav, model);
    std::vector<std::vector<double>> out;
    for (const auto& z : positives) {
        std::vector<double> row;
        for (std::size_t k = 0; k < model.num_classes(); ++k) row.push_back(dot(grad_head_wrt_z(model, z, k), cav.weights));
        out.push_back(std::move(row));
    }
    return out;
}

std::vector<std::vector<double>> tcav_derivatives_pooled(const Cav& cav, ActivationSet positives,
                                                         const MicroCnn& model) {
    require_head_layer(cav, model);
    if (cav.pooled == Pooling::None || !channel_constant(cav.weights)) {
        throw InvalidArgument("the pooled TCAV route needs a pooled CAV");
    }
    std::vector<std::vector<double>> out;
    for (const auto& z : positives) {
        std::vector<double> row;
        for (std::size_t k = 0; k < model.num_classes(); ++k) {
            const Tensor g = pool(grad_head_wrt_z(model, z, k), PoolMode::Sum);
            double s = 0.0;
            for (std::size_t c = 0; c < g.size(); ++c) s += static_cast<double>(cav.weights.at(c, 0, 0)) * g[c];
            row.push_back(s);
        }
        out.push_back(std::move(row));
    }
    return out;
}

TcavCurve tcav_from_derivatives(const std::vector<std::vector<double>>& derivatives, const Cav& cav,
                                std::size_t window) {
    if (derivatives.empty()) throw DataError("TCAV needs at least one concept example");
    if (window == 0) throw InvalidArgument("moving-average window must be positive");
    TcavCurve curve;
    curve.concept_id = cav.concept_id;
    curve.layer_id = cav.layer_id;
    curve.window = window;
    const std::size_t classes = derivatives.front().size();
    for (std::size_t k = 0; k < classes; ++k) {
        std::size_t positive = 0;
        for (const auto& row : derivatives) positive += row[k] > 0.0 ? 1 : 0;
        curve.scores.push_back(static_cast<double>(positive) / static_cast<double>(derivatives.size()));
    }
    for (std::size_t k = 0; k < classes; ++k) {
        const std::size_t lo = k + 1 >= window ? k + 1 - window : 0;
        double s = 0.0;
        for (std::size_t j = lo; j <= k; ++j) s += curve.scores[j];
        curve.moving_average.push_back(s / static_cast<double>(k + 1 - lo));
    }
    return curve;
}

TcavCurve tcav_scores(const Cav& cav, ActivationSet positives, const MicroCnn& model, std::size_t window) {
    return tcav_from_derivatives(tcav_derivatives(cav, positives, model), cav, window);
}

TcavCurve tcav_scores_pooled(const Cav& cav, ActivationSet positives, const MicroCnn& model, std::size_t window) {
    return tcav_from_derivatives(tcav_derivatives_pooled(cav, positives, model), cav, window);
}

std::string tcav_csv(const TcavCurve& curve, const std::vector<std::string>& class_names) {
    std::string out = "class_index,class_name,score\n";
    for (std::size_t k = 0; k < curve.scores.size(); ++k) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", curve.scores[k]);
        out += std::to_string(k) + ',' + (k < class_names.size() ? class_names[k] : "class" + std::to_string(k)) +
               ',' + buf + '\n';
    }
    return out;
}

}  // namespace cavlab
