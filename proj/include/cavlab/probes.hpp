#ifndef CAVLAB_PROBES_HPP
#define CAVLAB_PROBES_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cavlab/cav.hpp"
#include "cavlab/tensor.hpp"

namespace cavlab {

enum class JointInit { Zero, Clf };

struct ProbeConfig {
    double learning_rate = 0.5;
    std::size_t max_iters = 2000;
    double tol = 1e-5;         // stop when the gradient norm falls below this
    double clip_norm = 10.0;   // gradient norm clipping
    double beta = 0.5;         // mix coefficient
    double gamma = 0.99;       // joint coefficient
    Pooling pooled = Pooling::None;
    JointInit joint_init = JointInit::Clf;

    // Provenance copied into the produced Cav.
    std::string concept_id;
    std::string layer_id = "conv3";
    std::uint64_t seed = 0;
};

using ActivationSet = std::span<const Tensor>;

/// Activations with masks at feature-map resolution. `present` labels drive
/// the midpoint bias; when empty they are inferred from nonzero masks.
struct SegmentationSet {
    std::span<const Tensor> activations;
    std::span<const Tensor> masks;
    std::span<const char> present;
};

// Objectives over a flat parameter vector: the full activation space for
// unpooled probes, one weight per channel for pooled ones.
struct Params {
    std::vector<double> w;
    double b = 0.0;
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
};

/// Unregularized binary cross-entropy with class-balanced means.
class ClassifierObjective {
public:
    ClassifierObjective(ActivationSet positives, ActivationSet negatives, Pooling pooling);
    LossGrad evaluate(const Params& p) const;
    std::size_t dim() const { return dim_; }

private:
    std::vector<std::span<const float>> pos_, neg_;
    std::vector<Tensor> pooled_storage_;
    std::size_t dim_ = 0;
};

/// Mean per-position binary cross-entropy of sigma(phi) against the masks,
/// phi = sum_c v_c ⊙ z_c. No bias term.
class SegmentationObjective {
public:
    SegmentationObjective(const SegmentationSet& set, Pooling pooling);
    LossGrad evaluate(const Params& p) const;
    std::size_t dim() const { return dim_; }

private:
    SegmentationSet set_;
    Pooling pooling_;
    std::size_t channels_ = 0, plane_ = 0, dim_ = 0;
};

/// gamma * L_clf + (1 - gamma) * L_seg.
class JointObjective {
public:
    JointObjective(const ClassifierObjective& clf, const SegmentationObjective& seg, double gamma);
    LossGrad evaluate(const Params& p) const;
    std::size_t dim() const { return clf_.dim(); }

private:
    const ClassifierObjective& clf_;
    const SegmentationObjective& seg_;
    double gamma_;
};

struct TrainTrace {
    std::vector<double> loss;
    std::size_t iterations = 0;
    double final_grad_norm = 0.0;
};

/// Full-batch gradient descent with gradient-norm clipping.
template <typename Objective>
Params gradient_descent(const Objective& objective, Params init, const ProbeConfig& cfg, TrainTrace* trace = nullptr);

/// Converts raw parameters into a normalized Cav over activations of `shape`.
Cav make_cav(const Params& p, const Shape& shape, Method method, const ProbeConfig& cfg, std::size_t train_size);

Cav train_classifier(ActivationSet positives, ActivationSet negatives, const ProbeConfig& cfg,
                     TrainTrace* trace = nullptr);
Cav train_pattern(ActivationSet positives, ActivationSet negatives, const ProbeConfig& cfg);
Cav train_segmentation(const SegmentationSet& set, const ProbeConfig& cfg, TrainTrace* trace = nullptr);
Cav mix(const Cav& clf, const Cav& seg, double beta, ActivationSet positives, ActivationSet negatives);
/// With JointInit::Clf the start point is `clf_init` when given, else a freshly trained classifier CAV.
Cav train_joint(ActivationSet positives, ActivationSet negatives, const SegmentationSet& set, const ProbeConfig& cfg,
                TrainTrace* trace = nullptr, const Cav* clf_init = nullptr);

/// v_{c,h,w} = alpha_c.
Tensor expand_pooled(const Tensor& alpha, std::size_t height = 16, std::size_t width = 16);

/// b = -(mu+·v + mu-·v)/2 using the CAV's projection.
double midpoint_bias(const Cav& cav, ActivationSet positives, ActivationSet negatives);

}  // namespace cavlab

#endif  // CAVLAB_PROBES_HPP
