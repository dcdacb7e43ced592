#ifndef CAVLAB_VIZ_HPP
#define CAVLAB_VIZ_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cavlab/cav.hpp"
#include "cavlab/metrics.hpp"
#include "cavlab/microcnn.hpp"

namespace cavlab {

struct Heatmap {
    Tensor base_image;   // [3,64,64]
    Tensor attribution;  // [64,64], non-negative
    Tensor overlay;      // [3,64,64]
};

struct ClmOptions {
    double sigma = 2.0;
    double alpha = 0.6;
};

/// Upscales ReLU(φ*) to the image size, smooths it and overlays it on the image.
/// Throws NumericError if the attribution map violates completeness.
Heatmap render_clm(const Cav& cav, const Tensor& image, const FeatureFn& features, const ClmOptions& opt = {});
Heatmap render_clm(const Cav& cav, const Tensor& image, const MicroCnn& model, const ClmOptions& opt = {});

/// Bilinear resize of a [H,W] map with pixel-centre alignment.
Tensor upscale_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);
/// Separable Gaussian blur, clamp-to-edge borders, kernel radius ceil(3 sigma).
Tensor gaussian_smooth(const Tensor& map, double sigma);
/// RGB colour for t in [0, 1] on a viridis-like ramp.
void colormap(double t, float rgb[3]);

/// Attribution mass of the upper-left block divided by the mean mass per block.
double corner_concentration(const Tensor& attribution, std::size_t block = 16);

/// Indices ranked by cos(v, z) descending, ties by ascending index.
std::vector<std::size_t> prototypes(const Cav& cav, ActivationSet activations, std::size_t k);
std::vector<std::size_t> prototypes(const Cav& cav, std::span<const Tensor> images, const FeatureFn& features,
                                    std::size_t k);

struct ActMaxConfig {
    std::size_t steps = 64;
    double step_size = 0.05;
    std::uint64_t seed = 0;
    bool transforms = true;
};

struct ActMaxResult {
    Tensor image;
    double initial_objective = 0.0;
    double final_objective = 0.0;
    std::vector<double> trace;
};

/// f(x)·v / ||f(x)||.
double actmax_objective(const MicroCnn& model, const Cav& cav, const Tensor& x);
Tensor actmax_gradient(const MicroCnn& model, const Cav& cav, const Tensor& x);
/// Random affine jitter: integer shift in [-2, 2], scale in [0.95, 1.05], rotation in [-5°, 5°].
Tensor random_transform(const Tensor& x, std::uint64_t seed);
/// Gradient ascent from U[0.4, 0.6] noise. A step that leaves the image unchanged skips the transform.
ActMaxResult activation_maximization(const Cav& cav, const MicroCnn& model, const ActMaxConfig& cfg);

struct TcavCurve {
    std::vector<double> scores;  // one per class
    std::string concept_id;
    std::string layer_id;
    std::size_t window = 1;
    std::vector<double> moving_average;  // trailing mean over `window` classes
};

/// grad_k(z)·v for every positive sample (rows) and class (columns).
std::vector<std::vector<double>> tcav_derivatives(const Cav& cav, ActivationSet positives, const MicroCnn& model);
/// Same quantity through the pooled route α·Σ_hw grad_k(z).
std::vector<std::vector<double>> tcav_derivatives_pooled(const Cav& cav, ActivationSet positives,
                                                         const MicroCnn& model);
TcavCurve tcav_from_derivatives(const std::vector<std::vector<double>>& derivatives, const Cav& cav,
                                std::size_t window = 1);
TcavCurve tcav_scores(const Cav& cav, ActivationSet positives, const MicroCnn& model, std::size_t window = 1);
TcavCurve tcav_scores_pooled(const Cav& cav, ActivationSet positives, const MicroCnn& model, std::size_t window = 1);
std::string tcav_csv(const TcavCurve& curve, const std::vector<std::string>& class_names);

}  // namespace cavlab

#endif  // CAVLAB_VIZ_HPP
