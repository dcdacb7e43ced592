#include "cavlab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "cavlab/image_io.hpp"
#include "cavlab/misalign.hpp"
#include "cavlab/rng.hpp"
#include "cavlab/viz.hpp"

namespace cavlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& origin) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw SchemaError(origin, std::string("field '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& origin) {
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&key](const char* a) { return key == a; })) {
            throw SchemaError(origin, "unknown config key '" + key + "'");
        }
    }
}

std::string joint_init_name(JointInit init) { return init == JointInit::Zero ? "zero" : "clf"; }

JointInit parse_joint_init(const std::string& name) {
    if (name == "zero") return JointInit::Zero;
    if (name == "clf") return JointInit::Clf;
    throw InvalidArgument("joint_init must be 'zero' or 'clf'");
}

json to_json(const ExperimentConfig& cfg) {
    std::vector<std::string> methods, pooling;
    for (Method m : cfg.methods) methods.push_back(to_string(m));
    for (Pooling p : cfg.pooling) pooling.push_back(to_string(p));
    return json{{"concepts", cfg.concepts},
                {"cue", to_string(cfg.spurious.cue)},
                {"rho", cfg.spurious.strength},
                {"methods", methods},
                {"pooling", pooling},
                {"train_sizes", cfg.train_sizes},
                {"repeats", cfg.repeats},
                {"master_seed", cfg.master_seed},
                {"test_per_class", cfg.test_per_class},
                {"buffer", cfg.buffer},
                {"noise_sigma", cfg.noise_sigma},
                {"probe",
                 {{"learning_rate", cfg.probe.learning_rate},
                  {"max_iters", cfg.probe.max_iters},
                  {"tol", cfg.probe.tol},
                  {"clip_norm", cfg.probe.clip_norm},
                  {"beta", cfg.probe.beta},
                  {"gamma", cfg.probe.gamma},
                  {"joint_init", joint_init_name(cfg.probe.joint_init)}}},
                {"pretrain",
                 {{"num_classes", cfg.pretrain.num_classes},
                  {"epochs", cfg.pretrain.epochs},
                  {"learning_rate", cfg.pretrain.learning_rate},
                  {"batch_size", cfg.pretrain.batch_size},
                  {"seed", cfg.pretrain.seed},
                  {"per_class", cfg.pretrain_per_class},
                  {"model", cfg.model_path}}},
                {"fp_stage", cfg.fp_stage},
                {"fp_buffer", cfg.fp_buffer},
                {"viz_stage", cfg.viz_stage}};
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& bytes) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << bytes;
    if (!out) throw DataError("cannot write " + p.string());
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const std::string& origin) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw SchemaError(origin, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw SchemaError(origin, "config must be a JSON object");
    reject_unknown(j,
                   {"concepts", "cue", "rho", "methods", "pooling", "train_sizes", "repeats", "master_seed",
                    "output_dir", "test_per_class", "buffer", "noise_sigma", "probe", "pretrain", "fp_stage",
                    "fp_buffer", "viz_stage"},
                   origin);
    ExperimentConfig cfg;
    cfg.concepts = get_or(j, "concepts", cfg.concepts, origin);
    cfg.spurious.cue = parse_cue(get_or<std::string>(j, "cue", to_string(cfg.spurious.cue), origin));
    cfg.spurious.strength = get_or(j, "rho", cfg.spurious.strength, origin);
    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& m : get_or<std::vector<std::string>>(j, "methods", {}, origin)) cfg.methods.push_back(parse_method(m));
    }
    if (j.contains("pooling")) {
        cfg.pooling.clear();
        for (const auto& p : get_or<std::vector<std::string>>(j, "pooling", {}, origin)) cfg.pooling.push_back(parse_pooling(p));
    }
    cfg.train_sizes = get_or(j, "train_sizes", cfg.train_sizes, origin);
    cfg.repeats = get_or(j, "repeats", cfg.repeats, origin);
    cfg.master_seed = get_or(j, "master_seed", cfg.master_seed, origin);
    cfg.output_dir = get_or(j, "output_dir", cfg.output_dir, origin);
    cfg.test_per_class = get_or(j, "test_per_class", cfg.test_per_class, origin);
    cfg.buffer = get_or(j, "buffer", cfg.buffer, origin);
    cfg.noise_sigma = get_or(j, "noise_sigma", cfg.noise_sigma, origin);
    if (j.contains("probe")) {
        const json& p = j["probe"];
        const std::string where = origin + ":probe";
        reject_unknown(p, {"learning_rate", "max_iters", "tol", "clip_norm", "beta", "gamma", "joint_init"}, where);
        cfg.probe.learning_rate = get_or(p, "learning_rate", cfg.probe.learning_rate, where);
        cfg.probe.max_iters = get_or(p, "max_iters", cfg.probe.max_iters, where);
        cfg.probe.tol = get_or(p, "tol", cfg.probe.tol, where);
        cfg.probe.clip_norm = get_or(p, "clip_norm", cfg.probe.clip_norm, where);
        cfg.probe.beta = get_or(p, "beta", cfg.probe.beta, where);
        cfg.probe.gamma = get_or(p, "gamma", cfg.probe.gamma, where);
        cfg.probe.joint_init = parse_joint_init(get_or<std::string>(p, "joint_init", "clf", where));
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        const std::string where = origin + ":pretrain";
        reject_unknown(p, {"num_classes", "epochs", "learning_rate", "batch_size", "seed", "per_class", "model"}, where);
        cfg.pretrain.num_classes = get_or(p, "num_classes", cfg.pretrain.num_classes, where);
        cfg.pretrain.epochs = get_or(p, "epochs", cfg.pretrain.epochs, where);
        cfg.pretrain.learning_rate = get_or(p, "learning_rate", cfg.pretrain.learning_rate, where);
        cfg.pretrain.batch_size = get_or(p, "batch_size", cfg.pretrain.batch_size, where);
        cfg.pretrain.seed = get_or(p, "seed", cfg.pretrain.seed, where);
        cfg.pretrain_per_class = get_or(p, "per_class", cfg.pretrain_per_class, where);
        cfg.model_path = get_or(p, "model", cfg.model_path, where);
    }
    cfg.fp_stage = get_or(j, "fp_stage", cfg.fp_stage, origin);
    cfg.fp_buffer = get_or(j, "fp_buffer", cfg.fp_buffer, origin);
    cfg.viz_stage = get_or(j, "viz_stage", cfg.viz_stage, origin);
    validate(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path), path); }

void validate(const ExperimentConfig& cfg) {
    if (cfg.concepts.empty()) throw InvalidArgument("config: concepts must not be empty");
    if (cfg.methods.empty()) throw InvalidArgument("config: methods must not be empty");
    if (cfg.pooling.empty()) throw InvalidArgument("config: pooling must not be empty");
    if (cfg.train_sizes.empty()) throw InvalidArgument("config: train_sizes must not be empty");
    if (cfg.repeats == 0) throw InvalidArgument("config: repeats must be positive");
    for (const auto& c : cfg.concepts) parse_shape(c);
    for (Method m : cfg.methods) {
        if (m == Method::Fp) throw InvalidArgument("config: fp is produced by the fp stage, not listed as a method");
    }
    for (std::size_t n : cfg.train_sizes) {
        if (n == 0) throw InvalidArgument("config: train sizes must be positive");
    }
    if (!(cfg.spurious.strength >= 0.0 && cfg.spurious.strength <= 1.0)) throw InvalidArgument("config: rho must lie in [0, 1]");
    if (!(cfg.probe.beta >= 0.0 && cfg.probe.beta <= 1.0)) throw InvalidArgument("config: beta must lie in [0, 1]");
    if (!(cfg.probe.gamma >= 0.0 && cfg.probe.gamma <= 1.0)) throw InvalidArgument("config: gamma must lie in [0, 1]");
    if (cfg.test_per_class == 0) throw InvalidArgument("config: test_per_class must be positive");
    if (cfg.pretrain_per_class == 0) throw InvalidArgument("config: pretrain per_class must be positive");
}

std::string canonical_json(const ExperimentConfig& cfg) { return to_json(cfg).dump(); }

std::string content_hash(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return content_hash(canonical_json(cfg)); }

std::string file_hash(const std::string& path) { return content_hash(read_file(path)); }

void Logger::event(const std::string& name, const std::vector<std::pair<std::string, std::string>>& fields) const {
    if (!out_) return;
    json j{{"event", name}};
    for (const auto& [k, v] : fields) j[k] = v;
    *out_ << j.dump() << '\n' << std::flush;
}

ReportConfig report_config(const ExperimentConfig& cfg) {
    ReportConfig rc;
    for (const auto& c : cfg.concepts) rc.concepts.push_back(concept_for(parse_shape(c)));
    rc.spurious = cfg.spurious;
    rc.test_per_class = cfg.test_per_class;
    rc.buffer = cfg.buffer;
    rc.methods = cfg.methods;
    rc.poolings = cfg.pooling;
    rc.train_sizes = cfg.train_sizes;
    rc.repeats = cfg.repeats;
    rc.seed = cfg.master_seed;
    rc.noise_sigma = cfg.noise_sigma;
    rc.probe = cfg.probe;
    return rc;
}

PretrainResult pretrain_from_config(const ExperimentConfig& cfg) {
    const ConceptCorpus classes =
        generate_classes(cfg.pretrain.num_classes, cfg.pretrain_per_class, derive_seed(cfg.pretrain.seed, {0xC1A5}));
    return pretrain(cfg.pretrain, classes);
}

std::vector<Tensor> corpus_features(const ConceptCorpus& corpus, std::span<const std::size_t> indices,
                                    const FeatureFn& features) {
    std::vector<Tensor> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        if (corpus.has_activations()) {
            out.push_back(corpus.activations.at(i));
        } else if (corpus.has_images()) {
            out.push_back(features(corpus.images.at(i)));
        } else {
            throw DataError("corpus has neither images nor activations");
        }
    }
    return out;
}

namespace {

struct Provenance {
    json doc;

    explicit Provenance(const fs::path& path) {
        if (fs::exists(path)) {
            try {
                doc = json::parse(read_file(path));
            } catch (const json::exception&) {
                doc = json::object();
            }
        }
        if (!doc.is_object()) doc = json::object();
        if (!doc.contains("stages")) doc["stages"] = json::object();
    }

    bool fresh(const fs::path& root, const std::string& stage, const std::string& key) const {
        if (!doc["stages"].contains(stage)) return false;
        const json& s = doc["stages"][stage];
        if (s.value("key", "") != key) return false;
        for (const auto& [rel, hash] : s["outputs"].items()) {
            const fs::path p = root / rel;
            if (!fs::exists(p) || file_hash(p.string()) != hash.get<std::string>()) return false;
        }
        return true;
    }

    void record(const fs::path& root, const std::string& stage, const std::string& key,
                const std::vector<std::string>& outputs) {
        json out = json::object();
        for (const auto& rel : outputs) out[rel] = file_hash((root / rel).string());
        doc["stages"][stage] = json{{"key", key}, {"outputs", out}};
    }
};

std::string cav_file_name(const ReportRow& r) {
    return r.concept_id + "_" + to_string(r.method) + "_" + to_string(r.pooled) + "_n" + std::to_string(r.train_size) +
           "_r" + std::to_string(r.repeat) + ".cav";
}

template <typename Fn>
void in_stage(const std::string& stage, Fn fn) {
    try {
        fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(e.category(), stage, "", e.what());
    } catch (const std::exception& e) {
        throw StageError(ErrorCategory::Data, stage, "", e.what());
    }
}

std::vector<std::string> run_report_stage(const ExperimentConfig& cfg, const MicroCnn& model, const fs::path& root,
                                          std::size_t threads, const Logger& log) {
    ReportConfig rc = report_config(cfg);
    rc.threads = threads;
    const AlignmentReport report = run_report(rc, model, default_corpus_provider(rc));
    std::vector<std::string> outputs{"report.csv", "summary.csv"};
    write_file(root / "report.csv", report_csv(report));
    write_file(root / "summary.csv", summary_csv(report));
    std::size_t failed = 0;
    for (const auto& r : report.rows) {
        if (!r.error.empty()) {
            ++failed;
            continue;
        }
        const std::string rel = "cavs/" + cav_file_name(r);
        save_cav((root / rel).string(), r.cav);
        outputs.push_back(rel);
        outputs.push_back(fs::path(rel).replace_extension(".cavt").string());
    }
    log.event("report_written", {{"rows", std::to_string(report.rows.size())}, {"failed_cells", std::to_string(failed)}});
    return outputs;
}

std::vector<std::string> run_fp_stage(const ExperimentConfig& cfg, const MicroCnn& model, const fs::path& root,
                                      const Logger& log) {
    const FeatureFn features = feature_fn(model);
    std::vector<std::string> outputs;
    const std::size_t n = cfg.train_sizes.front();
    for (std::size_t ci = 0; ci < cfg.concepts.size(); ++ci) {
        const ConceptSpec spec = concept_for(parse_shape(cfg.concepts[ci]));
        const ConceptCorpus corpus = generate(spec, cfg.spurious, {n, n, cfg.test_per_class, cfg.test_per_class, cfg.fp_buffer},
                                              derive_seed(cfg.master_seed, {0xF0, ci}));
        const auto zp = corpus_features(corpus, corpus.indices(Split::Train, true), features);
        const auto zn = corpus_features(corpus, corpus.indices(Split::Train, false), features);
        const auto tp = corpus_features(corpus, corpus.indices(Split::Test, true), features);
        const auto tn = corpus_features(corpus, corpus.indices(Split::Test, false), features);
        const auto buffer_ids = corpus.indices(Split::Buffer);
        const auto zb = corpus_features(corpus, buffer_ids, features);
        std::vector<char> present;
        for (std::size_t i : buffer_ids) present.push_back(corpus.samples[i].present);

        ProbeConfig pc = cfg.probe;
        pc.concept_id = spec.concept_id;
        pc.seed = derive_seed(cfg.master_seed, {0xF1, ci});
        const Cav clf = train_classifier(zp, zn, pc);
        const std::string rel = "fp/" + spec.concept_id + ".json";
        try {
            const FpResult fp = build_fp_cav(clf, {zn, zb, buffer_ids, present, tp, tn}, zn.size(), pc);
            write_file(root / rel, fp_report_json(fp.report, clf, fp.cav) + "\n");
            save_cav((root / ("fp/" + spec.concept_id + "_fp.cav")).string(), fp.cav);
            outputs.push_back("fp/" + spec.concept_id + "_fp.cav");
            outputs.push_back("fp/" + spec.concept_id + "_fp.cavt");
        } catch (const InsufficientFalsePositives& e) {
            json j{{"concept_id", spec.concept_id}, {"error", error_tag(e)}, {"found", e.found}, {"wanted", e.wanted}};
            write_file(root / rel, j.dump(2) + "\n");
        }
        outputs.push_back(rel);
        log.event("fp_done", {{"concept", spec.concept_id}});
    }
    return outputs;
}

std::vector<std::string> run_viz_stage(const ExperimentConfig& cfg, const MicroCnn& model, const fs::path& root,
                                       const Logger& log) {
    const ReportConfig rc = report_config(cfg);
    const CorpusProvider corpora = default_corpus_provider(rc);
    const FeatureFn features = feature_fn(model);
    std::vector<std::string> outputs;
    for (std::size_t ci = 0; ci < cfg.concepts.size(); ++ci) {
        ReportRow key;
        key.concept_id = rc.concepts[ci].concept_id;
        key.method = cfg.methods.front();
        key.pooled = cfg.pooling.front();
        key.train_size = cfg.train_sizes.front();
        const fs::path cav_path = root / "cavs" / cav_file_name(key);
        if (!fs::exists(cav_path)) {
            log.event("viz_skipped", {{"concept", key.concept_id}, {"reason", "no CAV for this cell"}});
            continue;
        }
        const Cav cav = load_cav(cav_path.string());
        const ConceptCorpus corpus = corpora(ci, 0);
        const auto positives = corpus.indices(Split::Test, true);
        const auto zp = corpus_features(corpus, positives, features);
        const std::string stem = key.concept_id + "_" + to_string(key.method) + "_" + to_string(key.pooled);
        write_file(root / ("tcav/" + stem + ".csv"), tcav_csv(tcav_scores(cav, zp, model), shape_class_names(model.num_classes())));
        outputs.push_back("tcav/" + stem + ".csv");
        const Heatmap hm = render_clm(cav, corpus.images.at(positives.front()), features);
        fs::create_directories(root / "clm");
        write_png((root / ("clm/" + stem + ".png")).string(), hm.overlay);
        outputs.push_back("clm/" + stem + ".png");
    }
    return outputs;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, const Logger& log, std::size_t threads) {
    validate(cfg);
    const fs::path root(cfg.output_dir);
    fs::create_directories(root);
    const fs::path prov_path = root / "provenance.json";
    Provenance prov(prov_path);
    const std::string chash = config_hash(cfg);
    prov.doc["tool_version"] = kToolVersion;
    prov.doc["config_hash"] = chash;
    prov.doc["config"] = to_json(cfg);
    prov.doc["seeds"] = json{{"master_seed", cfg.master_seed}, {"pretrain_seed", cfg.pretrain.seed}};
    log.event("pipeline_start", {{"config_hash", chash}, {"output_dir", root.string()}});

    PipelineResult result;
    auto save = [&] { write_file(prov_path, prov.doc.dump(2) + "\n"); };

    json pre = to_json(cfg)["pretrain"];
    std::string pretrain_key = std::string(kToolVersion) + pre.dump();
    if (!cfg.model_path.empty()) {
        in_stage("pretrain", [&] { pretrain_key += file_hash(cfg.model_path); });
    }
    pretrain_key = content_hash(pretrain_key);
    if (prov.fresh(root, "pretrain", pretrain_key)) {
        result.cached.push_back("pretrain");
        log.event("stage_cached", {{"stage", "pretrain"}});
    } else {
        log.event("stage_start", {{"stage", "pretrain"}});
        in_stage("pretrain", [&] {
            const MicroCnn trained = cfg.model_path.empty() ? pretrain_from_config(cfg).model : load_model(cfg.model_path);
            save_model((root / "model.cavm").string(), trained);
        });
        prov.record(root, "pretrain", pretrain_key, {"model.cavm"});
        save();
        result.ran.push_back("pretrain");
    }
    MicroCnn model;
    in_stage("pretrain", [&] { model = load_model((root / "model.cavm").string()); });
    const std::string downstream_key =
        content_hash(std::string(kToolVersion) + chash + file_hash((root / "model.cavm").string()));

    struct Stage {
        const char* name;
        bool enabled;
        std::function<std::vector<std::string>()> run;
    };
    const Stage stages[] = {
        {"report", true, [&] { return run_report_stage(cfg, model, root, threads, log); }},
        {"fp", cfg.fp_stage, [&] { return run_fp_stage(cfg, model, root, log); }},
        {"viz", cfg.viz_stage, [&] { return run_viz_stage(cfg, model, root, log); }},
    };
    for (const auto& stage : stages) {
        if (!stage.enabled) continue;
        if (prov.fresh(root, stage.name, downstream_key)) {
            result.cached.push_back(stage.name);
            log.event("stage_cached", {{"stage", stage.name}});
            continue;
        }
        log.event("stage_start", {{"stage", stage.name}});
        std::vector<std::string> outputs;
        in_stage(stage.name, [&] { outputs = stage.run(); });
        prov.record(root, stage.name, downstream_key, outputs);
        save();
        result.ran.push_back(stage.name);
        log.event("stage_done", {{"stage", stage.name}, {"outputs", std::to_string(outputs.size())}});
    }
    save();
    if (result.all_cached()) log.event("all stages cached");
    log.event("pipeline_done", {{"ran", std::to_string(result.ran.size())}, {"cached", std::to_string(result.cached.size())}});
    return result;
}

}  // namespace cavlab
