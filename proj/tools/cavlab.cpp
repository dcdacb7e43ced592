#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cavlab/cav.hpp"
#include "cavlab/corpus.hpp"
#include "cavlab/errors.hpp"
#include "cavlab/image_io.hpp"
#include "cavlab/metrics.hpp"
#include "cavlab/microcnn.hpp"
#include "cavlab/misalign.hpp"
#include "cavlab/pipeline.hpp"
#include "cavlab/probes.hpp"
#include "cavlab/rng.hpp"
#include "cavlab/viz.hpp"

using namespace cavlab;
namespace fs = std::filesystem;

namespace {

const Logger& logger() {
    static const Logger log(&std::cerr);
    return log;
}

void write_text(const std::string& path, const std::string& text) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + path);
}

std::vector<Tensor> features_for(const ConceptCorpus& corpus, const std::vector<std::size_t>& ids,
                                 const MicroCnn* model, ProbeLayer layer) {
    if (corpus.has_activations() || !model) {
        if (!corpus.has_activations()) throw InvalidArgument("--model is required for an image corpus");
        return corpus_features(corpus, ids, {});
    }
    return corpus_features(corpus, ids, feature_fn(*model, layer));
}

std::vector<Tensor> masks_for(const ConceptCorpus& corpus, const std::vector<std::size_t>& ids, const Shape& layer_shape) {
    std::vector<Tensor> out;
    for (std::size_t i : ids) out.push_back(downscale_mask(corpus.masks.at(i), layer_shape[1], layer_shape[2]));
    return out;
}

struct ProbeArgs {
    std::string method = "clf", pooled = "none", corpus, model, out = "cavs", layer = "conv3", joint_init = "clf";
    std::uint64_t seed = 0;
    double beta = 0.5, gamma = 0.99;
};

int cmd_probe(const ProbeArgs& a) {
    const ConceptCorpus corpus = ingest_external(a.corpus);
    const ProbeLayer layer = parse_layer(a.layer);
    std::optional<MicroCnn> model;
    if (!a.model.empty()) model = load_model(a.model);
    const MicroCnn* mp = model ? &*model : nullptr;

    ProbeConfig cfg;
    cfg.pooled = parse_pooling(a.pooled);
    cfg.concept_id = corpus.spec.concept_id;
    cfg.layer_id = a.layer;
    cfg.seed = a.seed;
    cfg.beta = a.beta;
    cfg.gamma = a.gamma;
    cfg.joint_init = a.joint_init == "zero" ? JointInit::Zero : JointInit::Clf;
    if (a.joint_init != "zero" && a.joint_init != "clf") throw InvalidArgument("--joint-init must be zero or clf");

    const auto pos_ids = corpus.indices(Split::Train, true), neg_ids = corpus.indices(Split::Train, false);
    const auto zp = features_for(corpus, pos_ids, mp, layer);
    const auto zn = features_for(corpus, neg_ids, mp, layer);
    std::vector<std::size_t> all_ids = pos_ids;
    all_ids.insert(all_ids.end(), neg_ids.begin(), neg_ids.end());
    std::vector<Tensor> za = zp;
    za.insert(za.end(), zn.begin(), zn.end());
    const Shape ls = zp.empty() ? probe_shape(layer) : zp.front().shape();
    std::vector<Tensor> masks;
    std::vector<char> present;
    const Method method = parse_method(a.method);
    if (method == Method::Seg || method == Method::Mix || method == Method::Joint) {
        if (corpus.masks.empty()) throw DataError("corpus has no masks");
        masks = masks_for(corpus, all_ids, ls);
        for (std::size_t i : all_ids) present.push_back(corpus.samples[i].present);
    }
    const SegmentationSet seg_set{za, masks, present};

    Cav cav;
    switch (method) {
        case Method::Clf: cav = train_classifier(zp, zn, cfg); break;
        case Method::Pat: cav = train_pattern(zp, zn, cfg); break;
        case Method::Seg: cav = train_segmentation(seg_set, cfg); break;
        case Method::Mix:
            cav = mix(train_classifier(zp, zn, cfg), train_segmentation(seg_set, cfg), a.beta, zp, zn);
            break;
        case Method::Joint: cav = train_joint(zp, zn, seg_set, cfg); break;
        case Method::Fp: throw InvalidArgument("use the fp-cav subcommand for false-positive CAVs");
    }
    const std::string path =
        (fs::path(a.out) / (cav.concept_id + "_" + to_string(cav.method) + "_" + to_string(cav.pooled) + ".cav")).string();
    fs::create_directories(a.out);
    save_cav(path, cav);
    std::cout << path << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cavlab: concept activation vector laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic concept corpus or a shape-class corpus");
    std::string g_concept = "circle", g_cue = "corner_marker", g_out;
    double g_rho = 0.9;
    std::uint64_t g_seed = 0;
    SplitCounts g_counts;
    std::size_t g_classes = 0, g_per_class = 250;
    bool g_activations = false;
    std::string g_model;
    gen->add_option("--concept", g_concept, "Concept shape (circle, square, triangle, cross, ring, bar, star, diamond)");
    gen->add_option("--cue", g_cue, "Spurious cue kind (corner_marker, background_texture, global_tint)");
    gen->add_option("--rho", g_rho, "Cue strength: P(cue | concept)")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--seed", g_seed, "Corpus seed");
    gen->add_option("--train-pos", g_counts.train_pos, "Train positives");
    gen->add_option("--train-neg", g_counts.train_neg, "Train negatives");
    gen->add_option("--test-pos", g_counts.test_pos, "Test positives");
    gen->add_option("--test-neg", g_counts.test_neg, "Test negatives");
    gen->add_option("--buffer", g_counts.buffer, "Buffer negatives");
    gen->add_option("--classes", g_classes, "Write a K-class shape corpus for pretraining instead");
    gen->add_option("--per-class", g_per_class, "Images per class with --classes");
    gen->add_flag("--activations", g_activations, "Also store probe-layer activations (needs --model)");
    gen->add_option("--model", g_model, "Model used for --activations");
    gen->add_option("--out", g_out, "Output directory")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Train the micro-CNN on a shape-class corpus");
    PretrainTask p_task;
    std::string p_corpus, p_out;
    std::size_t p_per_class = 250;
    pre->add_option("--seed", p_task.seed, "Initialization and shuffling seed");
    pre->add_option("--epochs", p_task.epochs, "Training epochs");
    pre->add_option("--lr", p_task.learning_rate, "SGD step size");
    pre->add_option("--batch", p_task.batch_size, "Minibatch size");
    pre->add_option("--classes", p_task.num_classes, "Number of shape classes K");
    pre->add_option("--corpus", p_corpus, "Class corpus directory (default: generate one)");
    pre->add_option("--per-class", p_per_class, "Images per class when generating");
    pre->add_option("--out", p_out, "Output model file")->required();

    // probe
    auto* probe = app.add_subcommand("probe", "Train a CAV on the train split of a corpus");
    ProbeArgs pr;
    probe->add_option("--method", pr.method, "clf, pat, seg, mix or joint");
    probe->add_option("--pooled", pr.pooled, "none, sum or max");
    probe->add_option("--corpus", pr.corpus, "Corpus directory")->required();
    probe->add_option("--model", pr.model, "Model file (not needed for activation corpora)");
    probe->add_option("--out", pr.out, "Output directory for NAME.cav and NAME.cavt");
    probe->add_option("--seed", pr.seed, "Seed recorded in the CAV header");
    probe->add_option("--layer", pr.layer, "Probe layer: conv3 or conv2");
    probe->add_option("--beta", pr.beta, "Mix coefficient")->check(CLI::Range(0.0, 1.0));
    probe->add_option("--gamma", pr.gamma, "Joint coefficient")->check(CLI::Range(0.0, 1.0));
    probe->add_option("--joint-init", pr.joint_init, "Joint initialization: zero or clf");

    // fp-cav
    auto* fp = app.add_subcommand("fp-cav", "Build a CAV from the classifier's false positives");
    std::string f_cav, f_corpus, f_model, f_out, f_cav_out;
    std::size_t f_n = 0;
    fp->add_option("--cav", f_cav, "Classifier CAV")->required();
    fp->add_option("--corpus", f_corpus, "Corpus directory with a buffer split")->required();
    fp->add_option("--model", f_model, "Model file");
    fp->add_option("--n", f_n, "False positives to collect (default: number of train negatives)");
    fp->add_option("--out", f_out, "FpReport JSON path")->required();
    fp->add_option("--cav-out", f_cav_out, "Where to save the FP-CAV (optional)");

    // curate
    auto* curate = app.add_subcommand("curate", "Remove one CAV's direction from another");
    std::string c_cav, c_reject, c_out;
    curate->add_option("--cav", c_cav, "CAV to clean")->required();
    curate->add_option("--reject", c_reject, "CAV whose direction is removed")->required();
    curate->add_option("--out", c_out, "Output .cav path")->required();

    // report
    auto* rep = app.add_subcommand("report", "Run the alignment sweep and write report.csv");
    std::string r_config, r_out = "report.csv", r_summary, r_model;
    rep->add_option("--config", r_config, "Experiment config JSON")->required();
    rep->add_option("--out", r_out, "Per-cell CSV path");
    rep->add_option("--summary", r_summary, "Summary CSV path (optional)");
    rep->add_option("--model", r_model, "Pretrained model (default: pretrain from the config)");

    // clm
    auto* clm = app.add_subcommand("clm", "Render a concept localization map");
    std::string m_cav, m_corpus, m_model, m_out;
    long m_index = -1;
    ClmOptions m_opt;
    clm->add_option("--cav", m_cav, "CAV file")->required();
    clm->add_option("--corpus", m_corpus, "Corpus directory")->required();
    clm->add_option("--model", m_model, "Model file")->required();
    clm->add_option("--index", m_index, "Sample index (default: first test positive)");
    clm->add_option("--sigma", m_opt.sigma, "Gaussian smoothing sigma in pixels");
    clm->add_option("--alpha", m_opt.alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));
    clm->add_option("--out", m_out, "Output PNG")->required();
    clm->add_option("--seed", g_seed, "Unused; accepted for a uniform interface");

    // prototypes
    auto* proto = app.add_subcommand("prototypes", "Top-k images by cosine similarity to the CAV");
    std::string q_cav, q_corpus, q_model, q_out;
    std::size_t q_k = 8;
    proto->add_option("--cav", q_cav, "CAV file")->required();
    proto->add_option("--corpus", q_corpus, "Corpus directory")->required();
    proto->add_option("--model", q_model, "Model file");
    proto->add_option("--k", q_k, "Number of prototypes");
    proto->add_option("--out", q_out, "Output directory for prototype PNGs")->required();
    proto->add_option("--seed", g_seed, "Unused; accepted for a uniform interface");

    // actmax
    auto* am = app.add_subcommand("actmax", "Activation maximization towards the CAV");
    std::string a_cav, a_model, a_out;
    ActMaxConfig a_cfg;
    bool a_no_transforms = false;
    am->add_option("--cav", a_cav, "CAV file")->required();
    am->add_option("--model", a_model, "Model file")->required();
    am->add_option("--steps", a_cfg.steps, "Ascent steps");
    am->add_option("--step-size", a_cfg.step_size, "Step size");
    am->add_option("--seed", a_cfg.seed, "Noise and transform seed");
    am->add_flag("--no-transforms", a_no_transforms, "Disable random jitter");
    am->add_option("--out", a_out, "Output PNG")->required();
    am->add_option("--corpus", m_corpus, "Unused; accepted for a uniform interface");

    // tcav
    auto* tc = app.add_subcommand("tcav", "TCAV scores over the model's classes");
    std::string t_cav, t_corpus, t_model, t_out;
    bool t_pooled_route = false;
    std::size_t t_window = 1;
    tc->add_option("--cav", t_cav, "CAV file (conv3)")->required();
    tc->add_option("--corpus", t_corpus, "Corpus whose test positives are scored")->required();
    tc->add_option("--model", t_model, "Model file")->required();
    tc->add_flag("--pooled-route", t_pooled_route, "Use the pooled gradient route (pooled CAVs only)");
    tc->add_option("--window", t_window, "Trailing moving-average window");
    tc->add_option("--out", t_out, "Output tcav.csv")->required();
    tc->add_option("--seed", g_seed, "Unused; accepted for a uniform interface");

    // validate
    auto* val = app.add_subcommand("validate", "Check a .cav file's invariants");
    std::string v_path;
    val->add_option("path", v_path, "CAV file")->required();

    // run
    auto* run = app.add_subcommand("run", "Run the whole pipeline from a config");
    std::string u_config, u_outdir;
    run->add_option("--config", u_config, "Experiment config JSON (default config when omitted)");
    run->add_option("--output-dir", u_outdir, "Override the config's output_dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            ConceptCorpus corpus;
            if (g_classes > 0) {
                corpus = generate_classes(g_classes, g_per_class, g_seed);
            } else {
                corpus = generate(concept_for(parse_shape(g_concept)), {parse_cue(g_cue), g_rho}, g_counts, g_seed);
            }
            if (g_activations) {
                if (g_model.empty()) throw InvalidArgument("--activations needs --model");
                const MicroCnn model = load_model(g_model);
                for (const auto& im : corpus.images) corpus.activations.push_back(forward_features(model, im));
            }
            export_corpus(corpus, g_out);
            logger().event("corpus_written", {{"dir", g_out}, {"samples", std::to_string(corpus.size())}});
        } else if (*pre) {
            ConceptCorpus corpus = p_corpus.empty()
                                       ? generate_classes(p_task.num_classes, p_per_class, derive_seed(p_task.seed, {0xC1A5}))
                                       : ingest_external(p_corpus);
            const PretrainResult res = pretrain(p_task, corpus);
            save_model(p_out, res.model);
            logger().event("model_written", {{"path", p_out}, {"train_accuracy", std::to_string(res.train_accuracy)}});
        } else if (*probe) {
            return cmd_probe(pr);
        } else if (*fp) {
            const Cav clf = load_cav(f_cav);
            const ConceptCorpus corpus = ingest_external(f_corpus);
            std::optional<MicroCnn> model;
            if (!f_model.empty()) model = load_model(f_model);
            const MicroCnn* mp = model ? &*model : nullptr;
            const ProbeLayer layer = parse_layer(clf.layer_id);
            const auto zn = features_for(corpus, corpus.indices(Split::Train, false), mp, layer);
            const auto buffer_ids = corpus.indices(Split::Buffer);
            const auto zb = features_for(corpus, buffer_ids, mp, layer);
            const auto tp = features_for(corpus, corpus.indices(Split::Test, true), mp, layer);
            const auto tn = features_for(corpus, corpus.indices(Split::Test, false), mp, layer);
            std::vector<char> present;
            for (std::size_t i : buffer_ids) present.push_back(corpus.samples[i].present);
            ProbeConfig cfg;
            cfg.pooled = clf.pooled;
            cfg.concept_id = clf.concept_id;
            cfg.layer_id = clf.layer_id;
            cfg.seed = clf.seed;
            const FpResult res = build_fp_cav(clf, {zn, zb, buffer_ids, present, tp, tn}, f_n ? f_n : zn.size(), cfg);
            write_text(f_out, fp_report_json(res.report, clf, res.cav) + "\n");
            if (!f_cav_out.empty()) save_cav(f_cav_out, res.cav);
            std::printf("acc_clf %.6f acc_fp %.6f cosine %.6f\n", res.report.acc_clf, res.report.acc_fp, res.report.cosine);
        } else if (*curate) {
            const Cav out = reject(load_cav(c_cav), load_cav(c_reject));
            save_cav(c_out, out);
        } else if (*rep) {
            const ExperimentConfig cfg = load_config(r_config);
            const MicroCnn model = r_model.empty() ? pretrain_from_config(cfg).model : load_model(r_model);
            ReportConfig rc = report_config(cfg);
            rc.threads = default_threads();
            const AlignmentReport report = run_report(rc, model, default_corpus_provider(rc));
            write_text(r_out, report_csv(report));
            if (!r_summary.empty()) write_text(r_summary, summary_csv(report));
            logger().event("report_written", {{"path", r_out}, {"rows", std::to_string(report.rows.size())}});
        } else if (*clm) {
            const Cav cav = load_cav(m_cav);
            const ConceptCorpus corpus = ingest_external(m_corpus);
            if (!corpus.has_images()) throw DataError("clm needs an image corpus");
            const MicroCnn model = load_model(m_model);
            std::size_t idx;
            if (m_index >= 0) {
                idx = static_cast<std::size_t>(m_index);
                if (idx >= corpus.size()) throw InvalidArgument("--index out of range");
            } else {
                const auto pos = corpus.indices(Split::Test, true);
                if (pos.empty()) throw DataError("corpus has no test positives");
                idx = pos.front();
            }
            const Heatmap hm = render_clm(cav, corpus.images[idx], model, m_opt);
            write_png(m_out, hm.overlay);
        } else if (*proto) {
            const Cav cav = load_cav(q_cav);
            const ConceptCorpus corpus = ingest_external(q_corpus);
            std::optional<MicroCnn> model;
            if (!q_model.empty()) model = load_model(q_model);
            std::vector<std::size_t> ids(corpus.size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
            const auto z = features_for(corpus, ids, model ? &*model : nullptr, parse_layer(cav.layer_id));
            const auto top = prototypes(cav, z, q_k);
            fs::create_directories(q_out);
            for (std::size_t r = 0; r < top.size(); ++r) {
                std::printf("%zu %zu\n", r, top[r]);
                if (corpus.has_images()) {
                    char name[32];
                    std::snprintf(name, sizeof name, "%02zu_%05zu.png", r, top[r]);
                    write_png((fs::path(q_out) / name).string(), corpus.images[top[r]]);
                }
            }
        } else if (*am) {
            a_cfg.transforms = !a_no_transforms;
            const ActMaxResult res = activation_maximization(load_cav(a_cav), load_model(a_model), a_cfg);
            write_png(a_out, res.image);
            std::printf("objective %.6f -> %.6f\n", res.initial_objective, res.final_objective);
        } else if (*tc) {
            const Cav cav = load_cav(t_cav);
            const ConceptCorpus corpus = ingest_external(t_corpus);
            const MicroCnn model = load_model(t_model);
            const auto zp = features_for(corpus, corpus.indices(Split::Test, true), &model, parse_layer(cav.layer_id));
            const TcavCurve curve =
                t_pooled_route ? tcav_scores_pooled(cav, zp, model, t_window) : tcav_scores(cav, zp, model, t_window);
            write_text(t_out, tcav_csv(curve, shape_class_names(model.num_classes())));
        } else if (*val) {
            const CavValidation v = validate_cav_file(v_path);
            std::cout << v.header << '\n';
            for (const auto& issue : v.issues) std::cout << "violation: " << issue << '\n';
            if (!v.ok) return 2;
            std::cout << "ok\n";
        } else if (*run) {
            ExperimentConfig cfg = u_config.empty() ? ExperimentConfig{} : load_config(u_config);
            if (!u_outdir.empty()) cfg.output_dir = u_outdir;
            std::cout << "config hash " << config_hash(cfg) << '\n';
            const PipelineResult res = run_pipeline(cfg, logger(), default_threads());
            if (res.all_cached()) std::cout << "all stages cached\n";
        }
    } catch (const StageError& e) {
        logger().event("error", {{"stage", e.stage}, {"coords", e.coords}, {"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.category());
    } catch (const Error& e) {
        logger().event("error", {{"type", error_tag(e)}, {"message", e.what()}});
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
