#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cavlab/cav.hpp"
#include "cavlab/errors.hpp"

namespace cavlab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Method method) {
    switch (method) {
        case Method::Clf: return "clf";
        case Method::Pat: return "pat";
        case Method::Seg: return "seg";
        case Method::Mix: return "mix";
        case Method::Joint: return "joint";
        case Method::Fp: return "fp";
    }
    return "?";
}

Method parse_method(const std::string& name) {
    for (Method m : {Method::Clf, Method::Pat, Method::Seg, Method::Mix, Method::Joint, Method::Fp}) {
        if (to_string(m) == name) return m;
    }
    throw InvalidArgument("unknown probing method '" + name + "'");
}

std::string to_string(Pooling pooling) {
    switch (pooling) {
        case Pooling::None: return "none";
        case Pooling::Sum: return "sum";
        case Pooling::Max: return "max";
    }
    return "?";
}

Pooling parse_pooling(const std::string& name) {
    if (name == "none") return Pooling::None;
    if (name == "sum") return Pooling::Sum;
    if (name == "max") return Pooling::Max;
    throw InvalidArgument("unknown pooling '" + name + "'");
}

double cav_projection(const Cav& cav, const Tensor& z) {
    if (cav.pooled != Pooling::Max) return dot(cav.weights, z);
    require_same_shape(cav.weights, z, "cav_projection");
    const Tensor maxes = pool(z, PoolMode::Max);
    double s = 0.0;
    for (std::size_t c = 0; c < maxes.size(); ++c) s += static_cast<double>(cav.weights.at(c, 0, 0)) * maxes[c];
    return s;
}

double cav_logit(const Cav& cav, const Tensor& z) { return cav_projection(cav, z) + cav.bias; }

bool classify(const Cav& cav, const Tensor& z) { return cav_logit(cav, z) > 0.0; }

bool channel_constant(const Tensor& weights, float tolerance) {
    if (weights.rank() != 3) return false;
    for (std::size_t c = 0; c < weights.dim(0); ++c) {
        const auto ch = weights.channel(c);
        for (float v : ch) {
            if (std::abs(v - ch[0]) > tolerance) return false;
        }
    }
    return true;
}

namespace {

fs::path tensor_path_for(const std::string& cav_path) {
    fs::path p(cav_path);
    p.replace_extension(".cavt");
    return p;
}

json header_json(const Cav& cav) {
    return json{{"concept_id", cav.concept_id},
                {"method", to_string(cav.method)},
                {"pooled", to_string(cav.pooled)},
                {"layer_id", cav.layer_id},
                {"train_size", cav.train_size},
                {"seed", cav.seed},
                {"bias", cav.bias},
                {"norm_before_normalize", cav.norm_before_normalize}};
}

json read_header(const std::string& cav_path) {
    std::ifstream in(cav_path);
    if (!in) throw SchemaError(cav_path, "cannot open CAV header");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw SchemaError(cav_path, std::string("invalid JSON header: ") + e.what());
    }
}

}  // namespace

void save_cav(const std::string& cav_path, const Cav& cav) {
    const fs::path p(cav_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(cav_path);
    if (!out) throw DataError("cannot open " + cav_path + " for writing");
    out << header_json(cav).dump(2) << '\n';
    save_tensor(tensor_path_for(cav_path).string(), cav.weights);
}

Cav load_cav(const std::string& cav_path) {
    const json h = read_header(cav_path);
    Cav cav;
    try {
        cav.concept_id = h.at("concept_id").get<std::string>();
        cav.method = parse_method(h.at("method").get<std::string>());
        cav.pooled = parse_pooling(h.at("pooled").get<std::string>());
        cav.layer_id = h.at("layer_id").get<std::string>();
        cav.train_size = h.at("train_size").get<std::size_t>();
        cav.seed = h.at("seed").get<std::uint64_t>();
        cav.bias = h.at("bias").get<double>();
        cav.norm_before_normalize = h.at("norm_before_normalize").get<double>();
    } catch (const json::exception& e) {
        throw SchemaError(cav_path, std::string("bad CAV header: ") + e.what());
    }
    cav.weights = load_tensor(tensor_path_for(cav_path).string());
    return cav;
}

CavValidation validate_cav_file(const std::string& cav_path, const Shape& expected_shape) {
    CavValidation report;
    auto fail = [&report](std::string issue) {
        report.ok = false;
        report.issues.push_back(std::move(issue));
    };
    json h;
    try {
        h = read_header(cav_path);
        report.header = h.dump(2);
    } catch (const Error& e) {
        fail(e.what());
        return report;
    }
    for (const char* key : {"concept_id", "method", "pooled", "layer_id", "train_size", "seed", "bias",
                            "norm_before_normalize"}) {
        if (!h.contains(key)) fail(std::string("header field missing: ") + key);
    }
    Pooling pooled = Pooling::None;
    try {
        if (h.contains("pooled")) pooled = parse_pooling(h["pooled"].get<std::string>());
        if (h.contains("method")) parse_method(h["method"].get<std::string>());
    } catch (const std::exception& e) {
        fail(e.what());
    }

    Tensor w;
    try {
        w = load_tensor(tensor_path_for(cav_path).string());
    } catch (const Error& e) {
        fail(e.what());
        return report;
    }
    if (w.shape() != expected_shape) {
        fail("weights shape " + to_string(w.shape()) + " differs from expected " + to_string(expected_shape));
    }
    if (!w.all_finite()) fail("weights contain non-finite values");
    const double n = norm(w);
    if (std::abs(n - 1.0) > 1e-6) fail("weights norm is " + std::to_string(n) + ", expected 1");
    if (pooled != Pooling::None && !channel_constant(w)) {
        fail("pooled CAV weights are not constant within each channel");
    }
    return report;
}

}  // namespace cavlab
