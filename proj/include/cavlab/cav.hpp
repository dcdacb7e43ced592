#ifndef CAVLAB_CAV_HPP
#define CAVLAB_CAV_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cavlab/tensor.hpp"

namespace cavlab {

enum class Method { Clf, Pat, Seg, Mix, Joint, Fp };
enum class Pooling { None, Sum, Max };

std::string to_string(Method method);
Method parse_method(const std::string& name);
std::string to_string(Pooling pooling);
Pooling parse_pooling(const std::string& name);

/// Unit-norm concept direction over a layer's activation space. Pooled CAVs
/// are stored expanded: weights are constant over (h, w) within each channel.
struct Cav {
    Tensor weights;
    double bias = 0.0;
    Method method = Method::Clf;
    Pooling pooled = Pooling::None;
    std::string concept_id;
    std::string layer_id = "conv3";
    std::size_t train_size = 0;
    std::uint64_t seed = 0;
    double norm_before_normalize = 1.0;
};

/// Signed decision value. For sum/none pooling this is v·z + b; for max
/// pooling the per-channel weight multiplies the channel maximum.
double cav_logit(const Cav& cav, const Tensor& z);
/// v·z (or its max-pooled analogue) without the bias.
double cav_projection(const Cav& cav, const Tensor& z);
/// Strict inequality: a logit of exactly zero is classified negative.
bool classify(const Cav& cav, const Tensor& z);

bool channel_constant(const Tensor& weights, float tolerance = 0.0f);

// NAME.cav holds a JSON header; NAME.cavt next to it holds the weights.
void save_cav(const std::string& cav_path, const Cav& cav);
Cav load_cav(const std::string& cav_path);

struct CavValidation {
    bool ok = true;
    std::vector<std::string> issues;
    std::string header;  // pretty-printed JSON header
};

/// Checks magic bytes, unit norm, pooled constancy and shape.
CavValidation validate_cav_file(const std::string& cav_path, const Shape& expected_shape = {32, 16, 16});

}  // namespace cavlab

#endif  // CAVLAB_CAV_HPP
