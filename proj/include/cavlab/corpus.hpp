#ifndef CAVLAB_CORPUS_HPP
#define CAVLAB_CORPUS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cavlab/tensor.hpp"

namespace cavlab {

enum class ShapeKind { Circle, Square, Triangle, Cross, Ring, Bar, Star, Diamond };
inline constexpr std::size_t kShapeKinds = 8;

std::string to_string(ShapeKind kind);
ShapeKind parse_shape(const std::string& name);
/// Class names indexed by ShapeKind value; these are the pretraining classes.
std::vector<std::string> shape_class_names(std::size_t num_classes = kShapeKinds);

enum class FillStyle { Solid, Speckled };
std::string to_string(FillStyle fill);
FillStyle parse_fill(const std::string& name);

enum class CueKind { BackgroundTexture, CornerMarker, GlobalTint };
std::string to_string(CueKind cue);
CueKind parse_cue(const std::string& name);

// Procedural background families. Checker is reserved as the cue texture
// when the spurious cue is a background texture.
enum class Background { Flat, Gradient, Stripes, Checker, ValueNoise, Speckle };
inline constexpr std::size_t kCornerMarkerSize = 6;

struct ConceptSpec {
    std::string concept_id;
    ShapeKind shape = ShapeKind::Circle;
    FillStyle fill = FillStyle::Solid;
    double min_area_fraction = 0.01;
};

ConceptSpec concept_for(ShapeKind shape);

/// strength = P(cue | positive) = P(no cue | negative).
struct SpuriousSpec {
    CueKind cue = CueKind::CornerMarker;
    double strength = 0.5;
};

struct SplitCounts {
    std::size_t train_pos = 50;
    std::size_t train_neg = 50;
    std::size_t test_pos = 100;
    std::size_t test_neg = 100;
    std::size_t buffer = 500;
};

enum class Split { Train, Test, Buffer };
std::string to_string(Split split);
Split parse_split(const std::string& name);

struct SampleInfo {
    Split split = Split::Train;
    bool present = false;  // concept presence
    bool cue = false;
    int class_label = -1;  // shape class drawn in the image, -1 for none
    std::uint64_t seed = 0;
};

enum class CorpusKind { Concept, Classes };

struct ConceptCorpus {
    CorpusKind kind = CorpusKind::Concept;
    ConceptSpec spec;
    SpuriousSpec spurious;
    SplitCounts counts;
    std::uint64_t seed = 0;
    std::vector<std::string> class_names;
    std::vector<SampleInfo> samples;
    std::vector<Tensor> images;       // [3,64,64] in [0,1]; empty for activation-only corpora
    std::vector<Tensor> masks;        // [64,64] binary
    std::vector<Tensor> activations;  // optional precomputed probe-layer activations
    Shape layer_shape;

    std::size_t size() const { return samples.size(); }
    bool has_images() const { return !images.empty(); }
    bool has_activations() const { return !activations.empty(); }
    std::vector<std::size_t> indices(Split split) const;
    std::vector<std::size_t> indices(Split split, bool present) const;
};

ConceptCorpus generate(const ConceptSpec& spec, const SpuriousSpec& spurious, const SplitCounts& counts,
                       std::uint64_t seed);

/// Shape-classification corpus for pretraining: per_class images of each of the
/// first num_classes shapes, random backgrounds, no cues.
struct ClassCorpusOptions {
    bool textured_backgrounds = true;
    bool speckled_fill = true;
};
ConceptCorpus generate_classes(std::size_t num_classes, std::size_t per_class, std::uint64_t seed,
                               const ClassCorpusOptions& options = {});

/// Block-average to out_h x out_w, then threshold at 0.5 (inclusive).
Tensor downscale_mask(const Tensor& mask, std::size_t out_h = 16, std::size_t out_w = 16);

/// x where mask == 1, donor elsewhere.
Tensor replace_background(const Tensor& x, const Tensor& mask, const Tensor& donor);
/// Checks the manifest: the donor must not contain the concept.
Tensor replace_background(const ConceptCorpus& corpus, std::size_t target, std::size_t donor);
/// Seeded choice among the buffer negatives.
std::size_t pick_donor(const ConceptCorpus& corpus, std::uint64_t seed);

enum class AugmentKind { HFlip, Grayscale, GaussianNoise, BackgroundReplace };
std::string to_string(AugmentKind kind);

struct Augmentation {
    AugmentKind kind = AugmentKind::HFlip;
    double sigma = 0.05;
};

Tensor hflip(const Tensor& x);
Tensor grayscale(const Tensor& x);
Tensor gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed);
/// Pure image transforms; BackgroundReplace needs the corpus overload.
Tensor augment(const Tensor& x, const Augmentation& aug, std::uint64_t seed);
Tensor augment(const ConceptCorpus& corpus, std::size_t index, const Augmentation& aug, std::uint64_t seed);

// Directory layout: manifest.json, images/NNNNN.png, masks/NNNNN.pgm,
// optional activations/NNNNN.cavt.
void export_corpus(const ConceptCorpus& corpus, const std::string& dir);
std::string manifest_text(const ConceptCorpus& corpus);

struct IngestOptions {
    std::optional<Shape> layer_shape;  // accepted activation shape; default [32,16,16]
};
ConceptCorpus ingest_external(const std::string& dir, const IngestOptions& options = {});

}  // namespace cavlab

#endif  // CAVLAB_CORPUS_HPP
