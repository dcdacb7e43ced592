#include "cavlab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "cavlab/errors.hpp"
#include "cavlab/image_io.hpp"
#include "cavlab/rng.hpp"

namespace cavlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<const char*, kShapeKinds> kShapeNames = {"circle", "square",  "triangle", "cross",
                                                              "ring",   "bar",     "star",     "diamond"};

// Approximate area of each shape at circumradius 1, used to pick a feasible scale.
constexpr std::array<double, kShapeKinds> kUnitArea = {3.1416, 2.25, 1.299, 2.04, 2.19, 1.12, 1.32, 1.4};

constexpr std::size_t kSize = 64;
constexpr double kMaxRadius = 30.0;

using Rgb = std::array<float, 3>;

Rgb hsv(double h, double s, double v) {
    h = std::fmod(h, 1.0) * 6.0;
    const int i = static_cast<int>(h);
    const double f = h - i;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = v, g = t, b = p;
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

Rgb muted_color(Rng& rng) { return hsv(rng.uniform(), rng.uniform(0.0, 0.5), rng.uniform(0.15, 0.7)); }

Rgb vivid_color(Rng& rng) { return hsv(rng.uniform(), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)); }

void put(Tensor& img, std::size_t y, std::size_t x, const Rgb& c) {
    for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    Rgb out;
    for (int i = 0; i < 3; ++i) out[i] = static_cast<float>(a[i] + (b[i] - a[i]) * t);
    return out;
}

void render_background(Tensor& img, Background family, Rng& rng) {
    const Rgb c1 = muted_color(rng);
    const Rgb c2 = muted_color(rng);
    switch (family) {
        case Background::Flat:
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) put(img, y, x, c1);
            break;
        case Background::Gradient: {
            const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double dx = std::cos(a), dy = std::sin(a);
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) {
                    const double t = std::clamp(0.5 + (dx * (x - 31.5) + dy * (y - 31.5)) / 64.0, 0.0, 1.0);
                    put(img, y, x, lerp(c1, c2, t));
                }
            break;
        }
        case Background::Stripes: {
            const double period = rng.uniform(6.0, 14.0);
            const double a = rng.uniform(0.0, std::numbers::pi);
            const double dx = std::cos(a), dy = std::sin(a);
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) {
                    const double s = std::sin(2.0 * std::numbers::pi * (dx * x + dy * y) / period);
                    put(img, y, x, s > 0 ? c1 : c2);
                }
            break;
        }
        case Background::Checker: {
            const std::size_t cell = 4 + rng.below(7);
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) put(img, y, x, ((x / cell + y / cell) % 2) ? c1 : c2);
            break;
        }
        case Background::ValueNoise: {
            // Two octaves of bilinearly interpolated lattice noise.
            std::array<std::array<double, 9>, 9> coarse{};
            std::array<std::array<double, 17>, 17> fine{};
            for (auto& row : coarse)
                for (auto& v : row) v = rng.uniform();
            for (auto& row : fine)
                for (auto& v : row) v = rng.uniform();
            auto sample = [](const auto& grid, double gx, double gy) {
                const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
                const double fx = gx - ix, fy = gy - iy;
                const double top = grid[iy][ix] * (1 - fx) + grid[iy][ix + 1] * fx;
                const double bot = grid[iy + 1][ix] * (1 - fx) + grid[iy + 1][ix + 1] * fx;
                return top * (1 - fy) + bot * fy;
            };
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) {
                    const double n = (2.0 * sample(coarse, x / 8.0, y / 8.0) + sample(fine, x / 4.0, y / 4.0)) / 3.0;
                    put(img, y, x, lerp(c1, c2, n));
                }
            break;
        }
        case Background::Speckle:
            for (std::size_t y = 0; y < kSize; ++y)
                for (std::size_t x = 0; x < kSize; ++x) put(img, y, x, rng.bernoulli(0.15) ? c2 : c1);
            break;
    }
}

bool point_in_polygon(double u, double v, const std::vector<std::array<double, 2>>& poly) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
    }
    return inside;
}

const std::vector<std::array<double, 2>>& triangle_polygon() {
    static const std::vector<std::array<double, 2>> poly = [] {
        std::vector<std::array<double, 2>> p;
        for (int i = 0; i < 3; ++i) {
            const double a = -std::numbers::pi / 2 + i * 2.0 * std::numbers::pi / 3.0;
            p.push_back({std::cos(a), std::sin(a)});
        }
        return p;
    }();
    return poly;
}

const std::vector<std::array<double, 2>>& star_polygon() {
    static const std::vector<std::array<double, 2>> poly = [] {
        std::vector<std::array<double, 2>> p;
        for (int i = 0; i < 10; ++i) {
            const double r = (i % 2 == 0) ? 1.0 : 0.45;
            const double a = -std::numbers::pi / 2 + i * std::numbers::pi / 5.0;
            p.push_back({r * std::cos(a), r * std::sin(a)});
        }
        return p;
    }();
    return poly;
}

// (u, v) in shape-local coordinates, circumradius 1.
bool inside_shape(ShapeKind kind, double u, double v) {
    switch (kind) {
        case ShapeKind::Circle: return u * u + v * v <= 1.0;
        case ShapeKind::Ring: {
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        }
        case ShapeKind::Square: return std::abs(u) <= 0.75 && std::abs(v) <= 0.75;
        case ShapeKind::Diamond: return std::abs(u) / 0.7 + std::abs(v) <= 1.0;
        case ShapeKind::Triangle: return point_in_polygon(u, v, triangle_polygon());
        case ShapeKind::Cross:
            return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
        case ShapeKind::Bar: return std::abs(u) <= 1.0 && std::abs(v) <= 0.28;
        case ShapeKind::Star: return point_in_polygon(u, v, star_polygon());
    }
    return false;
}

struct Placement {
    double cx, cy, radius, angle;
};

Tensor rasterize(ShapeKind kind, const Placement& p) {
    Tensor mask({kSize, kSize});
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    for (std::size_t y = 0; y < kSize; ++y) {
        for (std::size_t x = 0; x < kSize; ++x) {
            const double dx = (x + 0.5 - p.cx) / p.radius;
            const double dy = (y + 0.5 - p.cy) / p.radius;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            if (inside_shape(kind, u, v)) mask.at(y, x) = 1.0f;
        }
    }
    return mask;
}

double mask_area(const Tensor& m) {
    double s = 0.0;
    for (float v : m.values()) s += v;
    return s;
}

// Draws a placement whose rasterized area is at least min_pixels.
Tensor place_shape(ShapeKind kind, double min_pixels, Rng& rng) {
    const double needed = std::sqrt(min_pixels / kUnitArea[static_cast<std::size_t>(kind)]) * 1.05;
    const double r_lo = std::max(7.0, needed);
    if (r_lo > kMaxRadius) {
        throw InvalidArgument("infeasible area constraint: " + to_string(kind) + " cannot cover " +
                              std::to_string(min_pixels) + " pixels");
    }
    const double r_hi = std::max(r_lo, 18.0);
    for (int attempt = 0; attempt < 64; ++attempt) {
        Placement p{};
        p.radius = rng.uniform(r_lo, r_hi);
        const double margin = std::min(32.0, 0.8 * p.radius);
        p.cx = rng.uniform(margin, kSize - margin);
        p.cy = rng.uniform(margin, kSize - margin);
        p.angle = rng.uniform(-20.0, 20.0) * std::numbers::pi / 180.0;
        Tensor m = rasterize(kind, p);
        if (mask_area(m) >= min_pixels && mask_area(m) > 0) return m;
    }
    throw InvalidArgument("infeasible area constraint: could not place " + to_string(kind) + " covering " +
                          std::to_string(min_pixels) + " pixels");
}

void paint_shape(Tensor& img, const Tensor& support, FillStyle fill, Rng& rng) {
    const Rgb color = vivid_color(rng);
    for (std::size_t y = 0; y < kSize; ++y) {
        for (std::size_t x = 0; x < kSize; ++x) {
            if (support.at(y, x) == 0.0f) continue;
            if (fill == FillStyle::Speckled) {
                const float k = static_cast<float>(rng.uniform(0.75, 1.0));
                put(img, y, x, {color[0] * k, color[1] * k, color[2] * k});
            } else {
                put(img, y, x, color);
            }
        }
    }
}

struct Rendered {
    Tensor image;
    Tensor mask;  // concept support (zeros when the concept shape is absent)
};

struct RenderRequest {
    std::optional<ShapeKind> shape;
    bool is_concept = false;
    bool cue = false;
    std::optional<CueKind> cue_kind;
    FillStyle fill = FillStyle::Solid;
    double min_area_fraction = 0.01;
    bool plain_background = false;  // flat or gradient only
};

Rendered render(const RenderRequest& req, Rng& rng) {
    Rendered out{Tensor({3, kSize, kSize}), Tensor({kSize, kSize})};
    Background family;
    if (req.cue_kind == CueKind::BackgroundTexture) {
        if (req.cue) {
            family = Background::Checker;
        } else {
            constexpr Background others[] = {Background::Flat, Background::Gradient, Background::Stripes,
                                             Background::ValueNoise, Background::Speckle};
            family = others[rng.below(5)];
        }
    } else if (req.plain_background) {
        family = rng.bernoulli(0.5) ? Background::Flat : Background::Gradient;
    } else {
        family = static_cast<Background>(rng.below(6));
    }
    render_background(out.image, family, rng);

    if (req.cue && req.cue_kind == CueKind::CornerMarker) {
        for (std::size_t y = 0; y < kCornerMarkerSize; ++y)
            for (std::size_t x = 0; x < kCornerMarkerSize; ++x) put(out.image, y, x, {1.0f, 0.95f, 0.1f});
    }

    if (req.shape) {
        const double min_pixels = req.min_area_fraction * kSize * kSize;
        Tensor support = place_shape(*req.shape, min_pixels, rng);
        paint_shape(out.image, support, req.fill, rng);
        if (req.is_concept) out.mask = std::move(support);
    }

    if (req.cue && req.cue_kind == CueKind::GlobalTint) {
        const Rgb tint = {1.0f, 0.55f, 0.1f};
        for (std::size_t c = 0; c < 3; ++c)
            for (auto& v : out.image.channel(c)) v = 0.7f * v + 0.3f * tint[c];
    }

    for (auto& v : out.image.values()) v = quantize_unit(v);
    return out;
}

ShapeKind other_shape(ShapeKind target, Rng& rng) {
    auto k = static_cast<std::size_t>(target);
    std::size_t pick = rng.below(kShapeKinds - 1);
    if (pick >= k) ++pick;
    return static_cast<ShapeKind>(pick);
}

void validate_spec(const ConceptSpec& spec, const SpuriousSpec& spurious) {
    if (!(spec.min_area_fraction > 0.0 && spec.min_area_fraction <= 0.5)) {
        throw InvalidArgument("min_area_fraction must lie in (0, 0.5]");
    }
    if (!(spurious.strength >= 0.0 && spurious.strength <= 1.0)) {
        throw InvalidArgument("spurious strength must lie in [0, 1]");
    }
}

}  // namespace

std::string to_string(ShapeKind kind) { return kShapeNames[static_cast<std::size_t>(kind)]; }

ShapeKind parse_shape(const std::string& name) {
    for (std::size_t i = 0; i < kShapeKinds; ++i) {
        if (name == kShapeNames[i]) return static_cast<ShapeKind>(i);
    }
    throw InvalidArgument("unknown shape '" + name + "'");
}

std::vector<std::string> shape_class_names(std::size_t num_classes) {
    if (num_classes > kShapeKinds) throw InvalidArgument("at most 8 shape classes are available");
    return {kShapeNames.begin(), kShapeNames.begin() + static_cast<std::ptrdiff_t>(num_classes)};
}

std::string to_string(FillStyle fill) { return fill == FillStyle::Solid ? "solid" : "speckled"; }

FillStyle parse_fill(const std::string& name) {
    if (name == "solid") return FillStyle::Solid;
    if (name == "speckled") return FillStyle::Speckled;
    throw InvalidArgument("unknown fill style '" + name + "'");
}

std::string to_string(CueKind cue) {
    switch (cue) {
        case CueKind::BackgroundTexture: return "background_texture";
        case CueKind::CornerMarker: return "corner_marker";
        case CueKind::GlobalTint: return "global_tint";
    }
    return "?";
}

CueKind parse_cue(const std::string& name) {
    if (name == "background_texture") return CueKind::BackgroundTexture;
    if (name == "corner_marker") return CueKind::CornerMarker;
    if (name == "global_tint") return CueKind::GlobalTint;
    throw InvalidArgument("unknown cue kind '" + name + "'");
}

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Test: return "test";
        case Split::Buffer: return "buffer";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "test") return Split::Test;
    if (name == "buffer") return Split::Buffer;
    throw InvalidArgument("unknown split '" + name + "'");
}

std::string to_string(AugmentKind kind) {
    switch (kind) {
        case AugmentKind::HFlip: return "flip";
        case AugmentKind::Grayscale: return "grayscale";
        case AugmentKind::GaussianNoise: return "noise";
        case AugmentKind::BackgroundReplace: return "background";
    }
    return "?";
}

ConceptSpec concept_for(ShapeKind shape) { return ConceptSpec{to_string(shape), shape, FillStyle::Solid, 0.01}; }

std::vector<std::size_t> ConceptCorpus::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == split) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> ConceptCorpus::indices(Split split, bool present) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == split && samples[i].present == present) out.push_back(i);
    }
    return out;
}

ConceptCorpus generate(const ConceptSpec& spec, const SpuriousSpec& spurious, const SplitCounts& counts,
                       std::uint64_t seed) {
    validate_spec(spec, spurious);
    if (counts.train_pos == 0 || counts.train_neg == 0 || counts.test_pos == 0 || counts.test_neg == 0) {
        throw InvalidArgument("train and test counts must be positive");
    }
    ConceptCorpus corpus;
    corpus.kind = CorpusKind::Concept;
    corpus.spec = spec;
    corpus.spurious = spurious;
    corpus.counts = counts;
    corpus.seed = seed;
    corpus.class_names = shape_class_names();

    struct Block {
        Split split;
        bool present;
        std::size_t count;
    };
    const Block blocks[] = {{Split::Train, true, counts.train_pos},
                            {Split::Train, false, counts.train_neg},
                            {Split::Test, true, counts.test_pos},
                            {Split::Test, false, counts.test_neg},
                            {Split::Buffer, false, counts.buffer}};
    std::size_t index = 0;
    for (const auto& block : blocks) {
        for (std::size_t n = 0; n < block.count; ++n, ++index) {
            SampleInfo info;
            info.split = block.split;
            info.present = block.present;
            info.seed = derive_seed(seed, {index});
            Rng rng(info.seed);
            info.cue = rng.bernoulli(block.present ? spurious.strength : 1.0 - spurious.strength);

            RenderRequest req;
            req.cue = info.cue;
            req.cue_kind = spurious.cue;
            req.fill = spec.fill;
            req.min_area_fraction = spec.min_area_fraction;
            if (block.present) {
                req.shape = spec.shape;
                req.is_concept = true;
            } else if (rng.bernoulli(0.85)) {
                req.shape = other_shape(spec.shape, rng);
            }
            info.class_label = req.shape ? static_cast<int>(*req.shape) : -1;
            Rendered r = render(req, rng);
            corpus.samples.push_back(info);
            corpus.images.push_back(std::move(r.image));
            corpus.masks.push_back(std::move(r.mask));
        }
    }
    return corpus;
}

ConceptCorpus generate_classes(std::size_t num_classes, std::size_t per_class, std::uint64_t seed,
                               const ClassCorpusOptions& options) {
    if (num_classes < 2 || num_classes > kShapeKinds) throw InvalidArgument("num_classes must lie in [2, 8]");
    if (per_class == 0) throw InvalidArgument("per_class must be positive");
    ConceptCorpus corpus;
    corpus.kind = CorpusKind::Classes;
    corpus.seed = seed;
    corpus.class_names = shape_class_names(num_classes);
    corpus.counts = SplitCounts{num_classes * per_class, 0, 0, 0, 0};
    for (std::size_t i = 0; i < num_classes * per_class; ++i) {
        SampleInfo info;
        info.split = Split::Train;
        info.class_label = static_cast<int>(i % num_classes);
        info.seed = derive_seed(seed, {i});
        Rng rng(info.seed);
        RenderRequest req;
        req.shape = static_cast<ShapeKind>(info.class_label);
        req.is_concept = true;
        req.fill = options.speckled_fill && rng.bernoulli(0.5) ? FillStyle::Speckled : FillStyle::Solid;
        req.plain_background = !options.textured_backgrounds;
        Rendered r = render(req, rng);
        info.present = true;
        corpus.samples.push_back(info);
        corpus.images.push_back(std::move(r.image));
        corpus.masks.push_back(std::move(r.mask));
    }
    return corpus;
}

Tensor downscale_mask(const Tensor& mask, std::size_t out_h, std::size_t out_w) {
    if (mask.rank() != 2 || mask.dim(0) % out_h != 0 || mask.dim(1) % out_w != 0) {
        throw ShapeMismatch("cannot downscale mask " + to_string(mask.shape()) + " to " + std::to_string(out_h) +
                            "x" + std::to_string(out_w));
    }
    const std::size_t fy = mask.dim(0) / out_h, fx = mask.dim(1) / out_w;
    Tensor out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < fy; ++dy)
                for (std::size_t dx = 0; dx < fx; ++dx) s += mask.at(y * fy + dy, x * fx + dx);
            out.at(y, x) = s / static_cast<double>(fy * fx) >= 0.5 ? 1.0f : 0.0f;
        }
    }
    return out;
}

Tensor replace_background(const Tensor& x, const Tensor& mask, const Tensor& donor) {
    require_same_shape(x, donor, "replace_background");
    if (x.rank() != 3 || mask.shape() != Shape{x.dim(1), x.dim(2)}) {
        throw ShapeMismatch("mask " + to_string(mask.shape()) + " does not match image " + to_string(x.shape()));
    }
    Tensor out = donor;
    const std::size_t plane = mask.size();
    for (std::size_t c = 0; c < x.dim(0); ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            if (mask[i] != 0.0f) out[c * plane + i] = x[c * plane + i];
        }
    }
    return out;
}

Tensor replace_background(const ConceptCorpus& corpus, std::size_t target, std::size_t donor) {
    if (!corpus.has_images()) throw DataError("background replacement needs images");
    if (corpus.samples.at(donor).present) {
        throw DataError("donor sample " + std::to_string(donor) + " contains the concept");
    }
    return replace_background(corpus.images.at(target), corpus.masks.at(target), corpus.images.at(donor));
}

std::size_t pick_donor(const ConceptCorpus& corpus, std::uint64_t seed) {
    auto pool = corpus.indices(Split::Buffer, false);
    if (pool.empty()) pool = corpus.indices(Split::Train, false);
    if (pool.empty()) throw DataError("corpus has no concept-free donor images");
    Rng rng(seed);
    return pool[rng.below(pool.size())];
}

Tensor hflip(const Tensor& x) {
    if (x.rank() != 3) throw ShapeMismatch("hflip expects [C,H,W]");
    Tensor out(x.shape());
    const std::size_t w = x.dim(2);
    for (std::size_t c = 0; c < x.dim(0); ++c)
        for (std::size_t y = 0; y < x.dim(1); ++y)
            for (std::size_t i = 0; i < w; ++i) out.at(c, y, i) = x.at(c, y, w - 1 - i);
    return out;
}

Tensor grayscale(const Tensor& x) {
    if (x.rank() != 3 || x.dim(0) != 3) throw ShapeMismatch("grayscale expects [3,H,W]");
    Tensor out(x.shape());
    const std::size_t plane = x.dim(1) * x.dim(2);
    for (std::size_t i = 0; i < plane; ++i) {
        const float r = x[i], g = x[plane + i], b = x[2 * plane + i];
        // Equal channels are returned unchanged so the transform is idempotent.
        const float lum = (r == g && g == b) ? r : 0.299f * r + 0.587f * g + 0.114f * b;
        out[i] = out[plane + i] = out[2 * plane + i] = lum;
    }
    return out;
}

Tensor gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be non-negative");
    if (sigma == 0.0) return x;
    Rng rng(seed);
    Tensor out = x;
    for (auto& v : out.values()) v = std::clamp(static_cast<float>(v + sigma * rng.normal()), 0.0f, 1.0f);
    return out;
}

Tensor augment(const Tensor& x, const Augmentation& aug, std::uint64_t seed) {
    switch (aug.kind) {
        case AugmentKind::HFlip: return hflip(x);
        case AugmentKind::Grayscale: return grayscale(x);
        case AugmentKind::GaussianNoise: return gaussian_noise(x, aug.sigma, seed);
        case AugmentKind::BackgroundReplace:
            throw InvalidArgument("background replacement needs a mask and a donor; use the corpus overload");
    }
    return x;
}

Tensor augment(const ConceptCorpus& corpus, std::size_t index, const Augmentation& aug, std::uint64_t seed) {
    if (aug.kind == AugmentKind::BackgroundReplace) {
        return replace_background(corpus, index, pick_donor(corpus, seed));
    }
    return augment(corpus.images.at(index), aug, seed);
}

namespace {

std::string sample_stem(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    return buf;
}

json manifest_json(const ConceptCorpus& corpus) {
    json m;
    m["format"] = "cavlab-corpus";
    m["version"] = 1;
    m["kind"] = corpus.kind == CorpusKind::Concept ? "concept" : "classes";
    if (corpus.kind == CorpusKind::Concept) {
        m["concept"] = {{"concept_id", corpus.spec.concept_id},
                        {"shape_kind", to_string(corpus.spec.shape)},
                        {"fill_style", to_string(corpus.spec.fill)},
                        {"min_area_fraction", corpus.spec.min_area_fraction}};
        m["spurious"] = {{"cue_kind", to_string(corpus.spurious.cue)}, {"rho", corpus.spurious.strength}};
    }
    m["seed"] = corpus.seed;
    m["counts"] = {{"n_train_pos", corpus.counts.train_pos}, {"n_train_neg", corpus.counts.train_neg},
                   {"n_test_pos", corpus.counts.test_pos},   {"n_test_neg", corpus.counts.test_neg},
                   {"n_buffer", corpus.counts.buffer}};
    m["class_names"] = corpus.class_names;
    if (corpus.has_activations()) m["layer_shape"] = corpus.layer_shape;
    json samples = json::array();
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& s = corpus.samples[i];
        const std::string stem = sample_stem(i);
        json e = {{"id", i},
                  {"split", to_string(s.split)},
                  {"present", s.present},
                  {"cue", s.cue},
                  {"class", s.class_label},
                  {"seed", s.seed}};
        e["image"] = corpus.has_images() ? json("images/" + stem + ".png") : json(nullptr);
        e["mask"] = "masks/" + stem + ".pgm";
        e["activation"] = corpus.has_activations() ? json("activations/" + stem + ".cavt") : json(nullptr);
        samples.push_back(std::move(e));
    }
    m["samples"] = std::move(samples);
    return m;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw SchemaError(where, std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw SchemaError(where, std::string("field '") + key + "' has the wrong type");
    }
}

}  // namespace

std::string manifest_text(const ConceptCorpus& corpus) { return manifest_json(corpus).dump(2); }

void export_corpus(const ConceptCorpus& corpus, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "masks");
    if (corpus.has_images()) fs::create_directories(root / "images");
    if (corpus.has_activations()) fs::create_directories(root / "activations");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const std::string stem = sample_stem(i);
        if (corpus.has_images()) write_png((root / "images" / (stem + ".png")).string(), corpus.images[i]);
        write_pgm((root / "masks" / (stem + ".pgm")).string(), corpus.masks[i]);
        if (corpus.has_activations()) {
            save_tensor((root / "activations" / (stem + ".cavt")).string(), corpus.activations[i]);
        }
    }
    std::ofstream out(root / "manifest.json");
    if (!out) throw DataError("cannot write " + (root / "manifest.json").string());
    out << manifest_text(corpus) << '\n';
}

ConceptCorpus ingest_external(const std::string& dir, const IngestOptions& options) {
    const fs::path root(dir);
    const fs::path manifest_path = root / "manifest.json";
    const std::string where = manifest_path.string();
    std::ifstream in(manifest_path);
    if (!in) throw SchemaError(where, "manifest.json not found");
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw SchemaError(where, std::string("invalid JSON: ") + e.what());
    }
    if (field<std::string>(m, "format", where) != "cavlab-corpus") throw SchemaError(where, "unexpected format tag");

    ConceptCorpus corpus;
    const auto kind = field<std::string>(m, "kind", where);
    if (kind == "concept") {
        corpus.kind = CorpusKind::Concept;
        const json& c = m.at("concept");
        corpus.spec.concept_id = field<std::string>(c, "concept_id", where);
        corpus.spec.shape = parse_shape(field<std::string>(c, "shape_kind", where));
        corpus.spec.fill = parse_fill(field<std::string>(c, "fill_style", where));
        corpus.spec.min_area_fraction = field<double>(c, "min_area_fraction", where);
        const json& sp = m.at("spurious");
        corpus.spurious.cue = parse_cue(field<std::string>(sp, "cue_kind", where));
        corpus.spurious.strength = field<double>(sp, "rho", where);
    } else if (kind == "classes") {
        corpus.kind = CorpusKind::Classes;
    } else {
        throw SchemaError(where, "unknown corpus kind '" + kind + "'");
    }
    corpus.seed = field<std::uint64_t>(m, "seed", where);
    const json& counts = m.at("counts");
    corpus.counts.train_pos = field<std::size_t>(counts, "n_train_pos", where);
    corpus.counts.train_neg = field<std::size_t>(counts, "n_train_neg", where);
    corpus.counts.test_pos = field<std::size_t>(counts, "n_test_pos", where);
    corpus.counts.test_neg = field<std::size_t>(counts, "n_test_neg", where);
    corpus.counts.buffer = field<std::size_t>(counts, "n_buffer", where);
    corpus.class_names = field<std::vector<std::string>>(m, "class_names", where);

    const Shape expected_layer = options.layer_shape.value_or(Shape{32, 16, 16});
    const json& samples = m.at("samples");
    if (!samples.is_array() || samples.empty()) throw SchemaError(where, "samples must be a non-empty array");

    bool any_image = false, any_activation = false;
    for (const auto& e : samples) {
        any_image = any_image || (e.contains("image") && !e["image"].is_null());
        any_activation = any_activation || (e.contains("activation") && !e["activation"].is_null());
    }
    if (!any_image && !any_activation) throw SchemaError(where, "samples carry neither images nor activations");

    for (std::size_t i = 0; i < samples.size(); ++i) {
        const json& e = samples[i];
        const std::string entry = where + " samples[" + std::to_string(i) + "]";
        if (field<std::size_t>(e, "id", entry) != i) throw SchemaError(entry, "sample ids must be 0..n-1 in order");
        SampleInfo s;
        s.split = parse_split(field<std::string>(e, "split", entry));
        s.present = field<bool>(e, "present", entry);
        s.cue = field<bool>(e, "cue", entry);
        s.class_label = field<int>(e, "class", entry);
        s.seed = field<std::uint64_t>(e, "seed", entry);
        corpus.samples.push_back(s);

        if (any_image) {
            if (!e.contains("image") || e["image"].is_null()) throw SchemaError(entry, "missing image entry");
            const fs::path p = root / e["image"].get<std::string>();
            if (!fs::exists(p)) throw SchemaError(p.string(), "image file missing");
            Tensor img = read_png(p.string());
            if (img.shape() != Shape{3, kSize, kSize}) throw SchemaError(p.string(), "image must be 64x64 RGB");
            corpus.images.push_back(std::move(img));
        }

        const fs::path mask_path = e.contains("mask") && !e["mask"].is_null()
                                       ? root / e["mask"].get<std::string>()
                                       : root / "masks" / (sample_stem(i) + ".pgm");
        if (fs::exists(mask_path)) {
            Tensor mask = read_pgm(mask_path.string());
            if (mask.shape() != Shape{kSize, kSize}) throw SchemaError(mask_path.string(), "mask must be 64x64");
            corpus.masks.push_back(std::move(mask));
        } else if (s.present) {
            throw SchemaError(mask_path.string(), "mask missing for a concept-positive sample");
        } else {
            corpus.masks.emplace_back(Shape{kSize, kSize});
        }

        if (any_activation) {
            if (!e.contains("activation") || e["activation"].is_null()) {
                throw SchemaError(entry, "missing activation entry");
            }
            const fs::path p = root / e["activation"].get<std::string>();
            if (!fs::exists(p)) throw SchemaError(p.string(), "activation file missing");
            Tensor z = load_tensor(p.string());
            if (z.shape() != expected_layer) {
                throw SchemaError(p.string(), "activation shape " + to_string(z.shape()) + " does not match " +
                                                  to_string(expected_layer) + " (use --layer-shape to override)");
            }
            corpus.activations.push_back(std::move(z));
        }
    }
    if (any_activation) corpus.layer_shape = expected_layer;
    return corpus;
}

}  // namespace cavlab
