#include "cavlab/microcnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cavlab/corpus.hpp"
#include "cavlab/errors.hpp"
#include "cavlab/rng.hpp"

namespace cavlab {

std::string layer_name(ProbeLayer layer) { return layer == ProbeLayer::Conv2 ? "conv2" : "conv3"; }

ProbeLayer parse_layer(const std::string& name) {
    if (name == "conv3") return ProbeLayer::Conv3;
    if (name == "conv2") return ProbeLayer::Conv2;
    throw InvalidArgument("unknown probe layer '" + name + "' (expected conv2 or conv3)");
}

Shape probe_shape(ProbeLayer layer) {
    return layer == ProbeLayer::Conv2 ? Shape{16, 32, 32} : Shape{32, 16, 16};
}

namespace {

Conv3x3 make_conv(std::size_t in, std::size_t out, Rng& rng) {
    Conv3x3 conv{Tensor({out, in, 3, 3}), Tensor({out})};
    const double limit = std::sqrt(6.0 / static_cast<double>(in * 9));
    for (auto& w : conv.weight.values()) w = static_cast<float>(rng.uniform(-limit, limit));
    return conv;
}

// [C,H,W] -> zero-padded [C,H+2,W+2] as a flat buffer.
std::vector<float> pad1(const Tensor& in) {
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t pw = w + 2, ph = h + 2;
    std::vector<float> out(c * ph * pw, 0.0f);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
            std::memcpy(out.data() + (ch * ph + y + 1) * pw + 1, in.data() + (ch * h + y) * w, w * sizeof(float));
        }
    }
    return out;
}

Tensor conv_forward(const Conv3x3& conv, const std::vector<float>& padded, std::size_t h, std::size_t w) {
    const std::size_t cin = conv.in_channels(), cout = conv.out_channels();
    const std::size_t pw = w + 2, plane = (h + 2) * pw;
    Tensor out({cout, h, w});
    for (std::size_t oc = 0; oc < cout; ++oc) {
        float* o = out.channel(oc).data();
        std::fill(o, o + h * w, conv.bias[oc]);
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const float* p = padded.data() + ic * plane;
            const float* k = conv.weight.data() + (oc * cin + ic) * 9;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const float wv = k[ky * 3 + kx];
                    for (std::size_t y = 0; y < h; ++y) {
                        float* orow = o + y * w;
                        const float* prow = p + (y + ky) * pw + kx;
                        for (std::size_t x = 0; x < w; ++x) orow[x] += wv * prow[x];
                    }
                }
            }
        }
    }
    return out;
}

// Accumulates weight/bias gradients into `grad` (when non-null) and returns the
// gradient w.r.t. the unpadded input (when want_input).
Tensor conv_backward(const Conv3x3& conv, const std::vector<float>& padded, const Tensor& dout, Conv3x3* grad,
                     bool want_input) {
    const std::size_t cin = conv.in_channels(), cout = conv.out_channels();
    const std::size_t h = dout.dim(1), w = dout.dim(2);
    const std::size_t pw = w + 2, plane = (h + 2) * pw;
    std::vector<float> dpad(want_input ? cin * plane : 0, 0.0f);
    std::vector<float> rowacc(w);
    for (std::size_t oc = 0; oc < cout; ++oc) {
        const float* d = dout.channel(oc).data();
        if (grad) {
            double s = 0.0;
            for (std::size_t i = 0; i < h * w; ++i) s += d[i];
            grad->bias[oc] += static_cast<float>(s);
        }
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const float* p = padded.data() + ic * plane;
            const float* k = conv.weight.data() + (oc * cin + ic) * 9;
            float* dp = want_input ? dpad.data() + ic * plane : nullptr;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    if (grad) {
                        std::fill(rowacc.begin(), rowacc.end(), 0.0f);
                        for (std::size_t y = 0; y < h; ++y) {
                            const float* drow = d + y * w;
                            const float* prow = p + (y + ky) * pw + kx;
                            for (std::size_t x = 0; x < w; ++x) rowacc[x] += drow[x] * prow[x];
                        }
                        double s = 0.0;
                        for (float v : rowacc) s += v;
                        grad->weight[(oc * cin + ic) * 9 + ky * 3 + kx] += static_cast<float>(s);
                    }
                    if (dp) {
                        const float wv = k[ky * 3 + kx];
                        for (std::size_t y = 0; y < h; ++y) {
                            const float* drow = d + y * w;
                            float* dprow = dp + (y + ky) * pw + kx;
                            for (std::size_t x = 0; x < w; ++x) dprow[x] += wv * drow[x];
                        }
                    }
                }
            }
        }
    }
    if (!want_input) return {};
    Tensor din({cin, h, w});
    for (std::size_t ic = 0; ic < cin; ++ic) {
        for (std::size_t y = 0; y < h; ++y) {
            std::memcpy(din.data() + (ic * h + y) * w, dpad.data() + ic * plane + (y + 1) * pw + 1,
                        w * sizeof(float));
        }
    }
    return din;
}

void relu_inplace(Tensor& t) {
    for (auto& v : t.values()) v = v > 0.0f ? v : 0.0f;
}

void relu_backward_inplace(Tensor& grad, const Tensor& pre) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(pre[i] > 0.0f)) grad[i] = 0.0f;
    }
}

struct Pooled {
    Tensor out;
    std::vector<std::uint32_t> argmax;  // flat index into the pooled input
};

// 2x2 stride-2 max pool; ties go to the first position in row-major scan.
Pooled maxpool2(const Tensor& in) {
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t oh = h / 2, ow = w / 2;
    Pooled p{Tensor({c, oh, ow}), std::vector<std::uint32_t>(c * oh * ow)};
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                std::size_t best = (ch * h + 2 * y) * w + 2 * x;
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (auto i : cand) {
                    if (in[i] > in[best]) best = i;
                }
                const std::size_t o = (ch * oh + y) * ow + x;
                p.out[o] = in[best];
                p.argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return p;
}

Tensor maxpool2_backward(const Tensor& dout, const std::vector<std::uint32_t>& argmax, const Shape& in_shape) {
    Tensor din(in_shape);
    for (std::size_t i = 0; i < dout.size(); ++i) din[argmax[i]] += dout[i];
    return din;
}

struct Trace {
    std::vector<float> pad0, pad1, pad2;
    Tensor pre1, pre2, pre3;
    Shape a1_shape, a2_shape;
    std::vector<std::uint32_t> arg1, arg2;
    Tensor z;
};

void require_image(const Tensor& x) {
    if (x.shape() != Shape{kImageChannels, kImageSize, kImageSize}) {
        throw ShapeMismatch("expected input [3,64,64], got " + to_string(x.shape()));
    }
}

Trace run_forward(const MicroCnn& m, const Tensor& x, ProbeLayer layer) {
    require_image(x);
    Trace t;
    Tensor centred = x;
    for (auto& v : centred.values()) v = (v - kInputCenter) * kInputScale;
    t.pad0 = pad1(centred);
    t.pre1 = conv_forward(m.conv1, t.pad0, 64, 64);
    Tensor a1 = t.pre1;
    relu_inplace(a1);
    t.a1_shape = a1.shape();
    auto p1 = maxpool2(a1);
    t.arg1 = std::move(p1.argmax);
    t.pad1 = pad1(p1.out);
    t.pre2 = conv_forward(m.conv2, t.pad1, 32, 32);
    Tensor a2 = t.pre2;
    relu_inplace(a2);
    if (layer == ProbeLayer::Conv2) {
        t.z = std::move(a2);
        return t;
    }
    t.a2_shape = a2.shape();
    auto p2 = maxpool2(a2);
    t.arg2 = std::move(p2.argmax);
    t.pad2 = pad1(p2.out);
    t.pre3 = conv_forward(m.conv3, t.pad2, 16, 16);
    t.z = t.pre3;
    relu_inplace(t.z);
    return t;
}

// Gradient flowing into the probe-layer activations (post-ReLU) back to the
// weights (grads != nullptr) and/or the input image.
Tensor run_backward(const MicroCnn& m, const Trace& t, Tensor g, ProbeLayer layer, MicroCnn* grads,
                    bool want_input) {
    if (layer == ProbeLayer::Conv3) {
        relu_backward_inplace(g, t.pre3);
        g = conv_backward(m.conv3, t.pad2, g, grads ? &grads->conv3 : nullptr, true);
        g = maxpool2_backward(g, t.arg2, t.a2_shape);
    }
    relu_backward_inplace(g, t.pre2);
    g = conv_backward(m.conv2, t.pad1, g, grads ? &grads->conv2 : nullptr, true);
    g = maxpool2_backward(g, t.arg1, t.a1_shape);
    relu_backward_inplace(g, t.pre1);
    Tensor dx = conv_backward(m.conv1, t.pad0, g, grads ? &grads->conv1 : nullptr, want_input);
    for (auto& v : dx.values()) v *= kInputScale;
    return dx;
}

void require_head_input(const MicroCnn& m, const Tensor& z) {
    if (z.rank() != 3 || z.dim(0) != m.head_weights.dim(1)) {
        throw ShapeMismatch("head expects [" + std::to_string(m.head_weights.dim(1)) + ",H,W], got " +
                            to_string(z.shape()));
    }
}

std::vector<double> softmax(const Tensor& logits) {
    const float mx = *std::max_element(logits.values().begin(), logits.values().end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] = std::exp(static_cast<double>(logits[k]) - mx);
        s += p[k];
    }
    for (auto& v : p) v /= s;
    return p;
}

template <typename Fn>
void for_each_param(MicroCnn& a, Fn fn) {
    for (Conv3x3* c : {&a.conv1, &a.conv2, &a.conv3}) {
        fn(c->weight);
        fn(c->bias);
    }
    fn(a.head_weights);
    fn(a.head_bias);
}

template <typename Fn>
void for_each_param_pair(MicroCnn& a, const MicroCnn& b, Fn fn) {
    const Conv3x3* bc[3] = {&b.conv1, &b.conv2, &b.conv3};
    Conv3x3* ac[3] = {&a.conv1, &a.conv2, &a.conv3};
    for (int i = 0; i < 3; ++i) {
        fn(ac[i]->weight, bc[i]->weight);
        fn(ac[i]->bias, bc[i]->bias);
    }
    fn(a.head_weights, b.head_weights);
    fn(a.head_bias, b.head_bias);
}

MicroCnn zeros_like(const MicroCnn& m) {
    MicroCnn z = m;
    for_each_param(z, [](Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0f); });
    return z;
}

}  // namespace

MicroCnn MicroCnn::initialize(std::uint64_t seed, std::size_t num_classes) {
    if (num_classes < 2) throw InvalidArgument("MicroCnn needs at least two classes");
    Rng rng(derive_seed(seed, {0x1417}));
    MicroCnn m;
    m.seed = seed;
    m.conv1 = make_conv(3, 8, rng);
    m.conv2 = make_conv(8, 16, rng);
    m.conv3 = make_conv(16, 32, rng);
    m.head_weights = Tensor({num_classes, 32});
    m.head_bias = Tensor({num_classes});
    const double limit = std::sqrt(6.0 / static_cast<double>(32 + num_classes));
    for (auto& w : m.head_weights.values()) w = static_cast<float>(rng.uniform(-limit, limit));
    return m;
}

Tensor forward_features(const MicroCnn& model, const Tensor& x, ProbeLayer layer) {
    return run_forward(model, x, layer).z;
}

Tensor head_logits(const MicroCnn& model, const Tensor& z) {
    require_head_input(model, z);
    const Tensor feats = pool(z, PoolMode::Mean);
    const std::size_t k_count = model.num_classes(), c_count = feats.size();
    Tensor logits({k_count});
    for (std::size_t k = 0; k < k_count; ++k) {
        double s = model.head_bias[k];
        for (std::size_t c = 0; c < c_count; ++c) s += static_cast<double>(model.head_weights.at(k, c)) * feats[c];
        logits[k] = static_cast<float>(s);
    }
    return logits;
}

Tensor forward_head(const MicroCnn& model, const Tensor& z) {
    const auto p = softmax(head_logits(model, z));
    Tensor out({p.size()});
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = static_cast<float>(p[k]);
    return out;
}

Tensor grad_head_wrt_z(const MicroCnn& model, const Tensor& z, std::size_t k) {
    if (k >= model.num_classes()) {
        throw InvalidArgument("class index " + std::to_string(k) + " out of range for " +
                              std::to_string(model.num_classes()) + " classes");
    }
    const auto p = softmax(head_logits(model, z));
    const std::size_t channels = z.dim(0);
    const double area = static_cast<double>(z.dim(1) * z.dim(2));
    Tensor g(z.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        double expected = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) expected += p[j] * model.head_weights.at(j, c);
        const double coef = p[k] * (model.head_weights.at(k, c) - expected) / area;
        auto ch = g.channel(c);
        std::fill(ch.begin(), ch.end(), static_cast<float>(coef));
    }
    return g;
}

Tensor grad_features_wrt_input(const MicroCnn& model, const Tensor& x, const Tensor& upstream, ProbeLayer layer) {
    if (upstream.shape() != probe_shape(layer)) {
        throw ShapeMismatch("upstream gradient must be " + to_string(probe_shape(layer)) + ", got " +
                            to_string(upstream.shape()));
    }
    const Trace t = run_forward(model, x, layer);
    return run_backward(model, t, upstream, layer, nullptr, true);
}

FeatureFn feature_fn(const MicroCnn& model, ProbeLayer layer) {
    return [&model, layer](const Tensor& x) { return forward_features(model, x, layer); };
}

PretrainResult train_model(const PretrainTask& task, std::span<const Tensor> images, std::span<const int> labels) {
    if (images.size() != labels.size() || images.empty()) {
        throw InvalidArgument("pretraining needs a non-empty labeled image set");
    }
    if (task.num_classes < 4) throw InvalidArgument("pretraining needs at least 4 classes");
    if (task.batch_size == 0) throw InvalidArgument("batch_size must be positive");
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= task.num_classes) {
            throw InvalidArgument("class label " + std::to_string(label) + " outside [0, K)");
        }
    }

    PretrainResult result{MicroCnn::initialize(task.seed, task.num_classes), 0.0, {}};
    MicroCnn& model = result.model;
    const float lr = static_cast<float>(task.learning_rate);
    std::vector<std::size_t> order(images.size());

    for (std::size_t epoch = 0; epoch < task.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(task.seed, {0xE90C, epoch}));
        shuffle(order, rng);

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += task.batch_size) {
            const std::size_t stop = std::min(order.size(), start + task.batch_size);
            MicroCnn grads = zeros_like(model);
            for (std::size_t n = start; n < stop; ++n) {
                const std::size_t idx = order[n];
                const Trace t = run_forward(model, images[idx], ProbeLayer::Conv3);
                const Tensor feats = pool(t.z, PoolMode::Mean);
                const auto p = softmax(head_logits(model, t.z));
                const auto y = static_cast<std::size_t>(labels[idx]);
                epoch_loss += -std::log(std::max(p[y], 1e-300));

                Tensor gz(t.z.shape());
                const double area = static_cast<double>(t.z.dim(1) * t.z.dim(2));
                for (std::size_t c = 0; c < feats.size(); ++c) {
                    double gfeat = 0.0;
                    for (std::size_t k = 0; k < p.size(); ++k) {
                        const double dlogit = p[k] - (k == y ? 1.0 : 0.0);
                        gfeat += dlogit * model.head_weights.at(k, c);
                    }
                    auto ch = gz.channel(c);
                    std::fill(ch.begin(), ch.end(), static_cast<float>(gfeat / area));
                }
                for (std::size_t k = 0; k < p.size(); ++k) {
                    const double dlogit = p[k] - (k == y ? 1.0 : 0.0);
                    grads.head_bias[k] += static_cast<float>(dlogit);
                    for (std::size_t c = 0; c < feats.size(); ++c) {
                        grads.head_weights.at(k, c) += static_cast<float>(dlogit * feats[c]);
                    }
                }
                run_backward(model, t, std::move(gz), ProbeLayer::Conv3, &grads, false);
            }
            const float step = lr / static_cast<float>(stop - start);
            for_each_param_pair(model, grads, [step](Tensor& w, const Tensor& g) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
            });
        }
        epoch_loss /= static_cast<double>(order.size());
        if (!std::isfinite(epoch_loss)) {
            throw TrainingDiverged("pretraining loss became non-finite in epoch " + std::to_string(epoch));
        }
        result.epoch_loss.push_back(epoch_loss);
    }

    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Tensor logits = head_logits(model, forward_features(model, images[i]));
        const auto best = std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin();
        if (best == labels[i]) ++correct;
    }
    result.train_accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
    return result;
}

PretrainResult pretrain(const PretrainTask& task, const ConceptCorpus& corpus) {
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus.samples[i].class_label < 0) continue;
        images.push_back(corpus.images.at(i));
        labels.push_back(corpus.samples[i].class_label);
    }
    auto result = train_model(task, images, labels);
    if (result.train_accuracy < kMinPretrainAccuracy) {
        throw TrainingDiverged("pretraining reached only " + std::to_string(result.train_accuracy) +
                               " train accuracy after " + std::to_string(task.epochs) + " epochs");
    }
    return result;
}

namespace {
constexpr char kModelMagic[4] = {'C', 'A', 'V', 'M'};
constexpr int kModelVersion = 1;
}  // namespace

void save_model(const std::string& path, const MicroCnn& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kModelMagic, 4);
    out.put(static_cast<char>(kModelVersion));
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((model.seed >> (8 * i)) & 0xff));
    MicroCnn copy = model;
    for_each_param(copy, [&out](Tensor& t) { write_tensor(out, t); });
    if (!out) throw DataError("failed writing " + path);
}

MicroCnn load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError(path, "cannot open model file");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) throw SchemaError(path, "missing CAVM magic");
    if (in.get() != kModelVersion) throw SchemaError(path, "unsupported model format version");
    MicroCnn m;
    for (int i = 0; i < 8; ++i) {
        const int b = in.get();
        if (b == std::char_traits<char>::eof()) throw SchemaError(path, "truncated model header");
        m.seed |= static_cast<std::uint64_t>(b) << (8 * i);
    }
    for_each_param(m, [&](Tensor& t) { t = read_tensor(in, path); });
    const auto check = [&](const Tensor& t, const Shape& s, const char* what) {
        if (t.shape() != s) throw SchemaError(path, std::string(what) + " has shape " + to_string(t.shape()));
    };
    check(m.conv1.weight, {8, 3, 3, 3}, "conv1.weight");
    check(m.conv2.weight, {16, 8, 3, 3}, "conv2.weight");
    check(m.conv3.weight, {32, 16, 3, 3}, "conv3.weight");
    check(m.conv1.bias, {8}, "conv1.bias");
    check(m.conv2.bias, {16}, "conv2.bias");
    check(m.conv3.bias, {32}, "conv3.bias");
    if (m.head_weights.rank() != 2 || m.head_weights.dim(1) != 32 || m.head_bias.size() != m.head_weights.dim(0)) {
        throw SchemaError(path, "inconsistent head shapes");
    }
    return m;
}

}  // namespace cavlab
