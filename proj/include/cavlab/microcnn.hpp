#ifndef CAVLAB_MICROCNN_HPP
#define CAVLAB_MICROCNN_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cavlab/tensor.hpp"

namespace cavlab {

struct ConceptCorpus;

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kImageChannels = 3;
// Fixed input preprocessing before conv1: (x - center) * scale.
inline constexpr float kInputCenter = 0.5f;
inline constexpr float kInputScale = 4.0f;

/// 3x3 convolution, zero padding 1, stride 1.
struct Conv3x3 {
    Tensor weight;  // [out, in, 3, 3]
    Tensor bias;    // [out]

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }
};

// conv3 is the canonical probe layer; conv2 is exposed for layer-sensitivity runs.
enum class ProbeLayer { Conv2, Conv3 };

std::string layer_name(ProbeLayer layer);
ProbeLayer parse_layer(const std::string& name);
Shape probe_shape(ProbeLayer layer);

/// 3x64x64 -> centre/scale -> conv(3→8) relu pool -> conv(8→16) relu pool -> conv(16→32) relu
/// => z in R^{32x16x16} -> mean-pool -> linear -> softmax over K classes.
struct MicroCnn {
    Conv3x3 conv1;
    Conv3x3 conv2;
    Conv3x3 conv3;
    Tensor head_weights;  // [K, 32]
    Tensor head_bias;     // [K]
    std::uint64_t seed = 0;

    std::size_t num_classes() const { return head_bias.size(); }

    /// He-uniform weights from a splitmix64 stream, zero biases.
    static MicroCnn initialize(std::uint64_t seed, std::size_t num_classes);
};

Tensor forward_features(const MicroCnn& model, const Tensor& x, ProbeLayer layer = ProbeLayer::Conv3);
Tensor head_logits(const MicroCnn& model, const Tensor& z);
/// Softmax class probabilities from probe-layer (conv3) activations.
Tensor forward_head(const MicroCnn& model, const Tensor& z);
/// d p_k / d z. Spatially uniform per channel because of the mean-pool head.
Tensor grad_head_wrt_z(const MicroCnn& model, const Tensor& z, std::size_t k);
/// Backpropagates `upstream` (shaped like the probe layer) to the input image.
Tensor grad_features_wrt_input(const MicroCnn& model, const Tensor& x, const Tensor& upstream,
                               ProbeLayer layer = ProbeLayer::Conv3);

using FeatureFn = std::function<Tensor(const Tensor&)>;
FeatureFn feature_fn(const MicroCnn& model, ProbeLayer layer = ProbeLayer::Conv3);

struct PretrainTask {
    std::size_t num_classes = 8;
    std::size_t epochs = 20;
    double learning_rate = 0.2;
    std::size_t batch_size = 8;
    std::uint64_t seed = 42;
};

struct PretrainResult {
    MicroCnn model;
    double train_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

/// Plain minibatch SGD on softmax cross-entropy, single-threaded. No accuracy gate.
PretrainResult train_model(const PretrainTask& task, std::span<const Tensor> images, std::span<const int> labels);

/// train_model on the corpus' labeled images; throws TrainingDiverged below 60% train accuracy.
PretrainResult pretrain(const PretrainTask& task, const ConceptCorpus& corpus);

inline constexpr double kMinPretrainAccuracy = 0.6;

// "CAVM", u8 version, u64 LE seed, then the eight weight tensors in CAVT format.
void save_model(const std::string& path, const MicroCnn& model);
MicroCnn load_model(const std::string& path);

}  // namespace cavlab

#endif  // CAVLAB_MICROCNN_HPP
