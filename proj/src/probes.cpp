#include "cavlab/probes.hpp"

#include <algorithm>
#include <cmath>

#include "cavlab/errors.hpp"

namespace cavlab {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Four interleaved accumulators; fixed order, so results are reproducible.
double dot_mixed(const double* w, const float* z, std::size_t n) {
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += w[i] * z[i];
        a1 += w[i + 1] * z[i + 1];
        a2 += w[i + 2] * z[i + 2];
        a3 += w[i + 3] * z[i + 3];
    }
    for (; i < n; ++i) a0 += w[i] * z[i];
    return (a0 + a1) + (a2 + a3);
}

void axpy_mixed(double coef, const float* z, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] += coef * z[i];
}

double l2(const std::vector<double>& g, double gb) {
    double s = gb * gb;
    for (double v : g) s += v * v;
    return std::sqrt(s);
}

void require_nonempty(ActivationSet positives, ActivationSet negatives) {
    if (positives.empty() || negatives.empty()) throw DataError("probe training needs non-empty positive and negative sets");
}

void require_uniform_shape(ActivationSet a, const Shape& shape) {
    for (const auto& z : a) {
        if (z.shape() != shape) {
            throw ShapeMismatch("activation shape " + to_string(z.shape()) + " differs from " + to_string(shape));
        }
    }
}

void require_spatial(const Shape& shape, Pooling pooling) {
    if (pooling != Pooling::None && shape.size() != 3) {
        throw ShapeMismatch("pooled probes need [C,H,W] activations, got " + to_string(shape));
    }
}

Tensor pool_for(const Tensor& z, Pooling pooling) {
    return pool(z, pooling == Pooling::Max ? PoolMode::Max : PoolMode::Sum);
}

std::vector<char> labels_for(const SegmentationSet& set) {
    if (!set.present.empty()) {
        if (set.present.size() != set.activations.size()) throw DataError("segmentation labels do not match pairs");
        return {set.present.begin(), set.present.end()};
    }
    std::vector<char> labels;
    for (const auto& m : set.masks) {
        labels.push_back(std::any_of(m.values().begin(), m.values().end(), [](float v) { return v != 0.0f; }));
    }
    return labels;
}

Params init_from_cav(const Cav& cav, Pooling pooling) {
    Params p;
    p.b = cav.bias;
    if (pooling == Pooling::None) {
        p.w.assign(cav.weights.values().begin(), cav.weights.values().end());
    } else {
        for (std::size_t c = 0; c < cav.weights.dim(0); ++c) p.w.push_back(cav.weights.at(c, 0, 0));
    }
    return p;
}

void check_unit_interval(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument(std::string(name) + " must lie in [0, 1]");
}

}  // namespace

ClassifierObjective::ClassifierObjective(ActivationSet positives, ActivationSet negatives, Pooling pooling) {
    require_nonempty(positives, negatives);
    const Shape shape = positives.front().shape();
    require_uniform_shape(positives, shape);
    require_uniform_shape(negatives, shape);
    require_spatial(shape, pooling);
    if (pooling == Pooling::None) {
        for (const auto& z : positives) pos_.push_back(z.values());
        for (const auto& z : negatives) neg_.push_back(z.values());
        dim_ = element_count(shape);
        return;
    }
    pooled_storage_.reserve(positives.size() + negatives.size());
    for (const auto& z : positives) {
        pooled_storage_.push_back(pool_for(z, pooling));
        pos_.push_back(pooled_storage_.back().values());
    }
    for (const auto& z : negatives) {
        pooled_storage_.push_back(pool_for(z, pooling));
        neg_.push_back(pooled_storage_.back().values());
    }
    dim_ = shape[0];
}

LossGrad ClassifierObjective::evaluate(const Params& p) const {
    LossGrad out;
    out.grad_w.assign(dim_, 0.0);
    const double np = static_cast<double>(pos_.size()), nn = static_cast<double>(neg_.size());
    for (const auto& z : pos_) {
        const double logit = dot_mixed(p.w.data(), z.data(), dim_) + p.b;
        out.loss += softplus(-logit) / np;
        const double coef = -sigmoid(-logit) / np;
        axpy_mixed(coef, z.data(), out.grad_w.data(), dim_);
        out.grad_b += coef;
    }
    for (const auto& z : neg_) {
        const double logit = dot_mixed(p.w.data(), z.data(), dim_) + p.b;
        out.loss += softplus(logit) / nn;
        const double coef = sigmoid(logit) / nn;
        axpy_mixed(coef, z.data(), out.grad_w.data(), dim_);
        out.grad_b += coef;
    }
    return out;
}

SegmentationObjective::SegmentationObjective(const SegmentationSet& set, Pooling pooling)
    : set_(set), pooling_(pooling) {
    if (set.activations.empty() || set.activations.size() != set.masks.size()) {
        throw DataError("segmentation training needs matching, non-empty activation and mask lists");
    }
    const Shape shape = set.activations.front().shape();
    if (shape.size() != 3) throw ShapeMismatch("segmentation probes need [C,H,W] activations");
    require_uniform_shape(set.activations, shape);
    for (const auto& m : set.masks) {
        if (m.shape() != Shape{shape[1], shape[2]}) {
            throw ShapeMismatch("mask shape " + to_string(m.shape()) + " does not match feature map " +
                                to_string(shape));
        }
    }
    channels_ = shape[0];
    plane_ = shape[1] * shape[2];
    dim_ = pooling == Pooling::None ? channels_ * plane_ : channels_;
}

LossGrad SegmentationObjective::evaluate(const Params& p) const {
    LossGrad out;
    out.grad_w.assign(dim_, 0.0);
    const double scale = 1.0 / (static_cast<double>(set_.activations.size()) * static_cast<double>(plane_));
    std::vector<double> phi(plane_), resid(plane_);
    const bool pooled = pooling_ != Pooling::None;
    for (std::size_t i = 0; i < set_.activations.size(); ++i) {
        const float* z = set_.activations[i].data();
        const float* m = set_.masks[i].data();
        std::fill(phi.begin(), phi.end(), 0.0);
        for (std::size_t c = 0; c < channels_; ++c) {
            const float* zc = z + c * plane_;
            if (pooled) {
                const double a = p.w[c];
                for (std::size_t k = 0; k < plane_; ++k) phi[k] += a * zc[k];
            } else {
                const double* wc = p.w.data() + c * plane_;
                for (std::size_t k = 0; k < plane_; ++k) phi[k] += wc[k] * zc[k];
            }
        }
        for (std::size_t k = 0; k < plane_; ++k) {
            out.loss += (m[k] != 0.0f ? softplus(-phi[k]) : softplus(phi[k])) * scale;
            resid[k] = (sigmoid(phi[k]) - m[k]) * scale;
        }
        for (std::size_t c = 0; c < channels_; ++c) {
            const float* zc = z + c * plane_;
            if (pooled) {
                double s = 0.0;
                for (std::size_t k = 0; k < plane_; ++k) s += resid[k] * zc[k];
                out.grad_w[c] += s;
            } else {
                double* gc = out.grad_w.data() + c * plane_;
                for (std::size_t k = 0; k < plane_; ++k) gc[k] += resid[k] * zc[k];
            }
        }
    }
    return out;
}

JointObjective::JointObjective(const ClassifierObjective& clf, const SegmentationObjective& seg, double gamma)
    : clf_(clf), seg_(seg), gamma_(gamma) {
    check_unit_interval(gamma, "gamma");
    if (clf.dim() != seg.dim()) throw ShapeMismatch("joint objective constituents disagree on dimension");
}

LossGrad JointObjective::evaluate(const Params& p) const {
    const LossGrad a = clf_.evaluate(p);
    const LossGrad b = seg_.evaluate(p);
    LossGrad out;
    out.loss = gamma_ * a.loss + (1.0 - gamma_) * b.loss;
    out.grad_w.resize(a.grad_w.size());
    for (std::size_t i = 0; i < a.grad_w.size(); ++i) out.grad_w[i] = gamma_ * a.grad_w[i] + (1.0 - gamma_) * b.grad_w[i];
    out.grad_b = gamma_ * a.grad_b + (1.0 - gamma_) * b.grad_b;
    return out;
}

template <typename Objective>
Params gradient_descent(const Objective& objective, Params p, const ProbeConfig& cfg, TrainTrace* trace) {
    if (p.w.size() != objective.dim()) throw ShapeMismatch("initial parameters do not match objective dimension");
    TrainTrace local;
    TrainTrace& t = trace ? *trace : local;
    t = {};
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
        const LossGrad lg = objective.evaluate(p);
        if (!std::isfinite(lg.loss)) throw NumericError("probe loss became non-finite at iteration " + std::to_string(it));
        t.loss.push_back(lg.loss);
        const double gn = l2(lg.grad_w, lg.grad_b);
        t.final_grad_norm = gn;
        if (gn < cfg.tol) break;
        const double step = cfg.learning_rate * (gn > cfg.clip_norm ? cfg.clip_norm / gn : 1.0);
        for (std::size_t i = 0; i < p.w.size(); ++i) p.w[i] -= step * lg.grad_w[i];
        p.b -= step * lg.grad_b;
        t.iterations = it + 1;
    }
    return p;
}

template Params gradient_descent<ClassifierObjective>(const ClassifierObjective&, Params, const ProbeConfig&, TrainTrace*);
template Params gradient_descent<SegmentationObjective>(const SegmentationObjective&, Params, const ProbeConfig&,
                                                        TrainTrace*);
template Params gradient_descent<JointObjective>(const JointObjective&, Params, const ProbeConfig&, TrainTrace*);

Tensor expand_pooled(const Tensor& alpha, std::size_t height, std::size_t width) {
    return expand_channels(alpha, height, width);
}

Cav make_cav(const Params& p, const Shape& shape, Method method, const ProbeConfig& cfg, std::size_t train_size) {
    Tensor raw;
    if (cfg.pooled == Pooling::None) {
        std::vector<float> w(p.w.begin(), p.w.end());
        raw = Tensor(shape, std::move(w));
    } else {
        Tensor alpha({shape[0]});
        for (std::size_t c = 0; c < shape[0]; ++c) alpha[c] = static_cast<float>(p.w[c]);
        raw = expand_pooled(alpha, shape[1], shape[2]);
    }
    Normalized n = normalize(raw, p.b);
    Cav cav;
    cav.weights = std::move(n.direction);
    cav.bias = n.bias;
    cav.norm_before_normalize = n.norm_before;
    cav.method = method;
    cav.pooled = cfg.pooled;
    cav.concept_id = cfg.concept_id;
    cav.layer_id = cfg.layer_id;
    cav.train_size = train_size;
    cav.seed = cfg.seed;
    return cav;
}

double midpoint_bias(const Cav& cav, ActivationSet positives, ActivationSet negatives) {
    require_nonempty(positives, negatives);
    double mp = 0.0, mn = 0.0;
    for (const auto& z : positives) mp += cav_projection(cav, z);
    for (const auto& z : negatives) mn += cav_projection(cav, z);
    mp /= static_cast<double>(positives.size());
    mn /= static_cast<double>(negatives.size());
    return -0.5 * (mp + mn);
}

Cav train_classifier(ActivationSet positives, ActivationSet negatives, const ProbeConfig& cfg, TrainTrace* trace) {
    const ClassifierObjective objective(positives, negatives, cfg.pooled);
    const Params p = gradient_descent(objective, Params{std::vector<double>(objective.dim(), 0.0), 0.0}, cfg, trace);
    return make_cav(p, positives.front().shape(), Method::Clf, cfg, positives.size());
}

Cav train_pattern(ActivationSet positives, ActivationSet negatives, const ProbeConfig& cfg) {
    require_nonempty(positives, negatives);
    const Shape shape = positives.front().shape();
    require_uniform_shape(positives, shape);
    require_uniform_shape(negatives, shape);
    require_spatial(shape, cfg.pooled);
    if (cfg.pooled == Pooling::Max) throw InvalidArgument("Pattern-CAVs support sum pooling only");

    const std::size_t n = element_count(shape);
    std::vector<double> mu_p(n, 0.0), mu_n(n, 0.0);
    for (const auto& z : positives)
        for (std::size_t i = 0; i < n; ++i) mu_p[i] += z[i];
    for (const auto& z : negatives)
        for (std::size_t i = 0; i < n; ++i) mu_n[i] += z[i];
    Tensor diff(shape);
    for (std::size_t i = 0; i < n; ++i) {
        diff[i] = static_cast<float>(mu_p[i] / positives.size() - mu_n[i] / negatives.size());
    }
    if (cfg.pooled == Pooling::Sum) diff = expand_pooled(pool(diff, PoolMode::Sum), shape[1], shape[2]);
    if (std::all_of(diff.values().begin(), diff.values().end(), [](float v) { return v == 0.0f; })) {
        throw DegeneratePattern();
    }
    Normalized unit = normalize(diff);
    Cav cav;
    cav.weights = std::move(unit.direction);
    cav.norm_before_normalize = unit.norm_before;
    cav.method = Method::Pat;
    cav.pooled = cfg.pooled;
    cav.concept_id = cfg.concept_id;
    cav.layer_id = cfg.layer_id;
    cav.train_size = positives.size();
    cav.seed = cfg.seed;
    cav.bias = midpoint_bias(cav, positives, negatives);
    return cav;
}

namespace {

void check_masks_informative(const SegmentationSet& set) {
    bool all_zero = true, all_one = true;
    for (const auto& m : set.masks) {
        for (float v : m.values()) {
            all_zero = all_zero && v == 0.0f;
            all_one = all_one && v == 1.0f;
        }
    }
    if (all_zero || all_one) throw DegenerateMasks();
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> split_by_label(const SegmentationSet& set,
                                                                   const std::vector<char>& labels) {
    std::pair<std::vector<Tensor>, std::vector<Tensor>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (labels[i] ? out.first : out.second).push_back(set.activations[i]);
    }
    return out;
}

}  // namespace

Cav train_segmentation(const SegmentationSet& set, const ProbeConfig& cfg, TrainTrace* trace) {
    const SegmentationObjective objective(set, cfg.pooled);
    check_masks_informative(set);
    const auto labels = labels_for(set);
    const Params p = gradient_descent(objective, Params{std::vector<double>(objective.dim(), 0.0), 0.0}, cfg, trace);
    const std::size_t positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    Cav cav = make_cav(p, set.activations.front().shape(), Method::Seg, cfg, positives);
    const auto [pos, neg] = split_by_label(set, labels);
    cav.bias = midpoint_bias(cav, pos, neg);
    return cav;
}

Cav mix(const Cav& clf, const Cav& seg, double beta, ActivationSet positives, ActivationSet negatives) {
    check_unit_interval(beta, "beta");
    if (clf.concept_id != seg.concept_id || clf.layer_id != seg.layer_id || clf.pooled != seg.pooled) {
        throw InvalidArgument("mix needs CAVs of the same concept, layer and pooling");
    }
    require_same_shape(clf.weights, seg.weights, "mix");
    Tensor sum(clf.weights.shape());
    for (std::size_t i = 0; i < sum.size(); ++i) {
        sum[i] = static_cast<float>(beta * clf.weights[i] + (1.0 - beta) * seg.weights[i]);
    }
    Normalized unit;
    try {
        unit = normalize(sum);
    } catch (const ZeroVector&) {
        throw NumericError("mixed CAV vanishes: inputs are anti-parallel at this beta");
    }
    Cav cav = clf;
    cav.weights = std::move(unit.direction);
    cav.norm_before_normalize = unit.norm_before;
    cav.method = Method::Mix;
    cav.bias = midpoint_bias(cav, positives, negatives);
    return cav;
}

Cav train_joint(ActivationSet positives, ActivationSet negatives, const SegmentationSet& set, const ProbeConfig& cfg,
                TrainTrace* trace, const Cav* clf_init) {
    check_unit_interval(cfg.gamma, "gamma");
    const ClassifierObjective clf(positives, negatives, cfg.pooled);
    const SegmentationObjective seg(set, cfg.pooled);
    check_masks_informative(set);
    const JointObjective joint(clf, seg, cfg.gamma);
    Params init{std::vector<double>(clf.dim(), 0.0), 0.0};
    if (cfg.joint_init == JointInit::Clf && clf_init) {
        require_same_shape(clf_init->weights, positives.front(), "train_joint");
        if (clf_init->pooled != cfg.pooled) throw InvalidArgument("joint initialization must share the pooling mode");
        init = init_from_cav(*clf_init, cfg.pooled);
    } else if (cfg.joint_init == JointInit::Clf) {
        const Params raw = gradient_descent(clf, init, cfg);
        init = init_from_cav(make_cav(raw, positives.front().shape(), Method::Clf, cfg, positives.size()), cfg.pooled);
    }
    const Params p = gradient_descent(joint, std::move(init), cfg, trace);
    return make_cav(p, positives.front().shape(), Method::Joint, cfg, positives.size());
}

}  // namespace cavlab
