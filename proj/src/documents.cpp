#include "ptqlab/documents.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "ptqlab/error.hpp"

namespace ptqlab::io {

using pipeline::MitigationStep;
using pipeline::Recipe;
using pipeline::TransformStep;
using quant::ClipPolicy;
using quant::Format;
using quant::Granularity;
using quant::QuantSpec;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

std::string index_path(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw ValidationError("recipe key '" + path + "': " + what);
}

/// One JSON object under schema validation. Every key must be declared up
/// front; typed getters report the full key path on mismatch.
class Fields {
public:
    Fields(const Json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) {
            if (path_.empty()) throw ValidationError("recipe: document must be a JSON object");
            fail(path_, "expected an object");
        }
        const std::set<std::string> keys(allowed.begin(), allowed.end());
        for (const auto& [k, v] : j.items()) {
            (void)v;
            if (!keys.count(k)) throw ValidationError("recipe: unknown key '" + join(path_, k) + "'");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    std::string path(const char* key) const { return join(path_, key); }
    const Json& raw(const char* key) const { return j_.at(key); }

    double number(const char* key, double fallback) const {
        if (!has(key)) return fallback;
        const Json& v = j_.at(key);
        if (!v.is_number()) fail(path(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(path(key), "must be finite");
        return d;
    }

    std::uint64_t count(const char* key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const Json& v = j_.at(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            fail(path(key), "expected a non-negative integer");
        return v.get<std::uint64_t>();
    }

    bool boolean(const char* key, bool fallback) const {
        if (!has(key)) return fallback;
        const Json& v = j_.at(key);
        if (!v.is_boolean()) fail(path(key), "expected true or false");
        return v.get<bool>();
    }

    std::string text(const char* key, const std::string& fallback) const {
        if (!has(key)) return fallback;
        const Json& v = j_.at(key);
        if (!v.is_string()) fail(path(key), "expected a string");
        return v.get<std::string>();
    }

    std::string choice(const char* key, const std::string& fallback, std::initializer_list<const char*> options) const {
        const std::string v = text(key, fallback);
        for (const char* o : options)
            if (v == o) return v;
        std::string list;
        for (const char* o : options) list += (list.empty() ? "" : ", ") + std::string(o);
        fail(path(key), "'" + v + "' is not one of " + list);
    }

    const Json& array(const char* key) const {
        const Json& v = j_.at(key);
        if (!v.is_array()) fail(path(key), "expected an array");
        return v;
    }

private:
    const Json& j_;
    std::string path_;
};

ClipPolicy parse_clip(const Fields& f, const ClipPolicy& fallback) {
    ClipPolicy clip = fallback;
    if (f.has("clip")) {
        const Json& v = f.raw("clip");
        if (v.is_string()) {
            if (v.get<std::string>() != "search") fail(f.path("clip"), "expected a ratio or \"search\"");
            clip = ClipPolicy::search();
        } else if (v.is_number()) {
            clip = ClipPolicy::fixed(v.get<double>());
        } else {
            fail(f.path("clip"), "expected a ratio or \"search\"");
        }
    }
    if (f.has("clip_grid")) {
        if (clip.kind != ClipPolicy::Kind::search) fail(f.path("clip_grid"), "only valid with clip \"search\"");
        const Json& g = f.array("clip_grid");
        clip.grid.clear();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!g[i].is_number()) fail(index_path(f.path("clip_grid"), i), "expected a number");
            clip.grid.push_back(g[i].get<double>());
        }
    }
    return clip;
}

QuantSpec parse_spec(const Json& j, const std::string& path, bool weight) {
    const Fields f(j, path,
                   {"format", "bits", "symmetric", "granularity", "group", "clip", "clip_grid", "rounding", "signed_range"});
    const std::string format = f.choice("format", "int", {"int", "mxfp4", "none"});
    auto reject_all = [&](std::initializer_list<const char*> keys, const char* why) {
        for (const char* k : keys)
            if (f.has(k)) fail(f.path(k), why);
    };

    if (format == "none") {
        reject_all({"bits", "symmetric", "granularity", "group", "clip", "clip_grid", "rounding", "signed_range"},
                   "not applicable when quantization is disabled");
        return QuantSpec::disabled();
    }
    if (format == "mxfp4") {
        reject_all({"bits", "symmetric", "granularity", "group", "rounding", "signed_range"},
                   "fixed by the mxfp4 format");
        QuantSpec s = QuantSpec::mxfp4(parse_clip(f, weight ? ClipPolicy::search() : ClipPolicy::fixed(0.75)));
        try {
            s.validate();
        } catch (const ValidationError& e) {
            fail(path, e.what());
        }
        return s;
    }

    QuantSpec s = weight ? Recipe::default_weight_spec() : Recipe::default_activation_spec();
    const std::uint64_t bits = f.count("bits", static_cast<std::uint64_t>(s.bits));
    if (bits < 2 || bits > 16) fail(f.path("bits"), "integer bit-width must be in [2, 16]");
    s.bits = static_cast<int>(bits);
    s.symmetric = f.boolean("symmetric", s.symmetric);

    const std::string gran_default = f.has("group") ? "per-group"
                                     : s.granularity.kind == Granularity::Kind::per_tensor ? "per-tensor"
                                                                                           : "per-row";
    const std::string gran = f.choice("granularity", gran_default, {"per-tensor", "per-row", "per-group"});
    if (gran == "per-group") {
        const std::uint64_t g = f.count("group", 128);
        if (g == 0) fail(f.path("group"), "group size must be positive");
        s.granularity = Granularity::per_group(static_cast<std::size_t>(g));
    } else {
        if (f.has("group")) fail(f.path("group"), "only valid with granularity \"per-group\"");
        s.granularity = gran == "per-tensor" ? Granularity::per_tensor() : Granularity::per_row();
    }
    s.clip = parse_clip(f, s.clip);
    const std::string rounding = f.choice("rounding", "half-away", {"half-away", "half-even"});
    s.rounding = rounding == "half-even" ? quant::Rounding::half_to_even : quant::Rounding::half_away_from_zero;
    const std::string range = f.choice("signed_range", "balanced", {"balanced", "full"});
    s.signed_range = range == "full" ? quant::SignedRange::full : quant::SignedRange::balanced;
    try {
        s.validate();
    } catch (const ValidationError& e) {
        fail(path, e.what());
    }
    return s;
}

transforms::OptimizerOptions parse_optimizer(const Fields& f) {
    transforms::OptimizerOptions o;
    o.steps = static_cast<std::size_t>(f.count("steps", o.steps));
    o.lr = f.number("lr", o.lr);
    if (!(o.lr > 0.0)) fail(f.path("lr"), "learning rate must be positive");
    return o;
}

TransformStep parse_transform(const Json& j, const std::string& path, std::uint64_t global_seed) {
    if (!j.is_object()) fail(path, "expected an object");
    if (!j.contains("type")) fail(join(path, "type"), "missing");
    const Json& type_value = j.at("type");
    if (!type_value.is_string()) fail(join(path, "type"), "expected a string");
    const std::string type = type_value.get<std::string>();

    if (type == "shift") {
        const Fields f(j, path, {"type"});
        return TransformStep::shift();
    }
    if (type == "scale") {
        const std::string source = j.contains("source") && j.at("source").is_string() ? j.at("source").get<std::string>()
                                                                                      : "calibrated";
        if (source == "optimized") {
            const Fields f(j, path, {"type", "source", "steps", "lr"});
            return TransformStep::optimized_scale(parse_optimizer(f));
        }
        const Fields f(j, path, {"type", "source", "alpha"});
        f.choice("source", "calibrated", {"calibrated", "optimized"});
        const double alpha = f.number("alpha", 0.5);
        if (!(alpha >= 0.0 && alpha <= 1.0)) fail(f.path("alpha"), "must lie in [0, 1]");
        return TransformStep::calibrated_scale(alpha);
    }
    if (type == "rotation") {
        const std::string source = j.contains("source") && j.at("source").is_string() ? j.at("source").get<std::string>()
                                                                                      : "hadamard";
        if (source == "optimized") {
            const Fields f(j, path, {"type", "source", "init", "seed", "steps", "lr"});
            const std::string init = f.choice("init", "hadamard", {"hadamard", "random"});
            return TransformStep::optimized_rotation(
                parse_optimizer(f), init == "random" ? TransformStep::Init::random : TransformStep::Init::hadamard,
                f.count("seed", global_seed));
        }
        const Fields f(j, path, {"type", "source", "seed"});
        const std::string s = f.choice("source", "hadamard", {"identity", "hadamard", "random", "optimized"});
        const TransformStep::Source src = s == "identity" ? TransformStep::Source::identity
                                          : s == "random" ? TransformStep::Source::random
                                                          : TransformStep::Source::hadamard;
        return TransformStep::rotation(src, f.count("seed", global_seed));
    }
    fail(join(path, "type"), "'" + type + "' is not one of shift, scale, rotation");
}

MitigationStep parse_mitigation(const Json& j, const std::string& path) {
    if (!j.is_object()) fail(path, "expected an object");
    if (!j.contains("type")) fail(join(path, "type"), "missing");
    const Json& type_value = j.at("type");
    if (!type_value.is_string()) fail(join(path, "type"), "expected a string");
    const std::string type = type_value.get<std::string>();
    if (type == "gptq") {
        const Fields f(j, path, {"type", "block"});
        const std::uint64_t block = f.count("block", 128);
        if (block == 0) fail(f.path("block"), "block size must be positive");
        return MitigationStep::gptq(static_cast<std::size_t>(block));
    }
    if (type == "lowrank" || type == "scaled_lowrank") {
        const Fields f(j, path, {"type", "rank"});
        const std::uint64_t rank = f.count("rank", 32);
        if (rank == 0) fail(f.path("rank"), "rank must be positive");
        return type == "lowrank" ? MitigationStep::lowrank(rank) : MitigationStep::scaled_lowrank(rank);
    }
    fail(join(path, "type"), "'" + type + "' is not one of gptq, lowrank, scaled_lowrank");
}

Json clip_to_json(const ClipPolicy& c) {
    if (c.kind == ClipPolicy::Kind::fixed) return c.ratio;
    return "search";
}

}  // namespace

// ---- recipe ---------------------------------------------------------------------------

Recipe recipe_from_json(const Json& doc) {
    const Fields f(doc, "", {"format_version", "label", "seed", "damping", "transforms", "w_spec", "a_spec", "mitigation"});
    if (f.has("format_version") && f.count("format_version", 0) != static_cast<std::uint64_t>(document_format_version))
        fail("format_version", "unsupported version");
    Recipe r;
    r.label = f.text("label", "");
    r.seed = f.count("seed", 0);
    r.damping = f.number("damping", r.damping);
    if (!(r.damping >= 0.0)) fail("damping", "must be non-negative");
    if (f.has("transforms")) {
        const Json& list = f.array("transforms");
        for (std::size_t i = 0; i < list.size(); ++i)
            r.transforms.push_back(parse_transform(list[i], index_path("transforms", i), r.seed));
    }
    if (f.has("w_spec")) r.w_spec = parse_spec(f.raw("w_spec"), "w_spec", true);
    if (f.has("a_spec")) r.a_spec = parse_spec(f.raw("a_spec"), "a_spec", false);
    if (f.has("mitigation")) {
        const Json& list = f.array("mitigation");
        for (std::size_t i = 0; i < list.size(); ++i)
            r.mitigation.push_back(parse_mitigation(list[i], index_path("mitigation", i)));
    }
    try {
        r.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("recipe: ") + e.what());
    }
    return r;
}

Json spec_to_json(const QuantSpec& s) {
    Json j;
    switch (s.format) {
    case Format::none: j["format"] = "none"; return j;
    case Format::mxfp4: j["format"] = "mxfp4"; break;
    case Format::uniform_int:
        j["format"] = "int";
        j["bits"] = s.bits;
        j["symmetric"] = s.symmetric;
        switch (s.granularity.kind) {
        case Granularity::Kind::per_tensor: j["granularity"] = "per-tensor"; break;
        case Granularity::Kind::per_row: j["granularity"] = "per-row"; break;
        case Granularity::Kind::per_group:
            j["granularity"] = "per-group";
            j["group"] = s.granularity.group_size;
            break;
        }
        break;
    }
    j["clip"] = clip_to_json(s.clip);
    if (s.clip.kind == ClipPolicy::Kind::search) j["clip_grid"] = s.clip.grid;
    if (s.format == Format::uniform_int) {
        j["rounding"] = s.rounding == quant::Rounding::half_to_even ? "half-even" : "half-away";
        j["signed_range"] = s.signed_range == quant::SignedRange::full ? "full" : "balanced";
    }
    return j;
}

Json recipe_to_json(const Recipe& r) {
    Json j;
    j["format_version"] = document_format_version;
    j["label"] = r.label;
    j["seed"] = r.seed;
    j["damping"] = r.damping;
    j["transforms"] = Json::array();
    for (const TransformStep& t : r.transforms) {
        Json s;
        switch (t.kind) {
        case TransformStep::Kind::shift: s["type"] = "shift"; break;
        case TransformStep::Kind::scale:
            s["type"] = "scale";
            if (t.source == TransformStep::Source::optimized) {
                s["source"] = "optimized";
                s["steps"] = t.optimizer.steps;
                s["lr"] = t.optimizer.lr;
            } else {
                s["source"] = "calibrated";
                s["alpha"] = t.alpha;
            }
            break;
        case TransformStep::Kind::rotation:
            s["type"] = "rotation";
            switch (t.source) {
            case TransformStep::Source::identity: s["source"] = "identity"; break;
            case TransformStep::Source::random: s["source"] = "random"; break;
            case TransformStep::Source::optimized:
                s["source"] = "optimized";
                s["init"] = t.init == TransformStep::Init::random ? "random" : "hadamard";
                s["steps"] = t.optimizer.steps;
                s["lr"] = t.optimizer.lr;
                break;
            default: s["source"] = "hadamard"; break;
            }
            if (t.source != TransformStep::Source::identity && t.source != TransformStep::Source::hadamard)
                s["seed"] = t.seed;
            break;
        }
        j["transforms"].push_back(std::move(s));
    }
    j["w_spec"] = spec_to_json(r.w_spec);
    j["a_spec"] = spec_to_json(r.a_spec);
    j["mitigation"] = Json::array();
    for (const MitigationStep& m : r.mitigation) {
        Json s;
        switch (m.kind) {
        case MitigationStep::Kind::gptq:
            s["type"] = "gptq";
            s["block"] = m.block;
            break;
        case MitigationStep::Kind::lowrank:
            s["type"] = "lowrank";
            s["rank"] = m.rank;
            break;
        case MitigationStep::Kind::scaled_lowrank:
            s["type"] = "scaled_lowrank";
            s["rank"] = m.rank;
            break;
        }
        j["mitigation"].push_back(std::move(s));
    }
    return j;
}

Recipe load_recipe(const std::filesystem::path& path) { return recipe_from_json(read_json(path)); }

// ---- manifest -------------------------------------------------------------------------

std::filesystem::path write_model(const std::filesystem::path& dir, const ModelBundle& model, DType dtype) {
    if (dtype != DType::f32 && dtype != DType::f64) throw ValidationError("model tensors must be f32 or f64");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    Json manifest;
    manifest["format_version"] = document_format_version;
    manifest["layers"] = Json::array();
    for (const LayerBundle& layer : model) {
        layer.validate();
        Json entry;
        entry["name"] = layer.name;
        entry["weight"] = layer.name + ".weight.qtns";
        write_tensor(dir / (layer.name + ".weight.qtns"), matrix_to_tensor(layer.w, dtype));
        if (layer.bias) {
            entry["bias"] = layer.name + ".bias.qtns";
            write_tensor(dir / (layer.name + ".bias.qtns"), vector_to_tensor(*layer.bias, dtype));
        }
        entry["calib"] = layer.name + ".calib.qtns";
        write_tensor(dir / (layer.name + ".calib.qtns"), matrix_to_tensor(layer.calib, dtype));
        manifest["layers"].push_back(std::move(entry));
    }
    const std::filesystem::path path = dir / "manifest.json";
    write_text(path, manifest.dump(2) + "\n");
    return path;
}

ModelBundle load_model(const std::filesystem::path& manifest_path) {
    const Json doc = read_json(manifest_path);
    auto bad = [&](const std::string& what) -> ValidationError {
        return ValidationError("manifest '" + manifest_path.string() + "': " + what);
    };
    if (!doc.is_object()) throw bad("expected an object");
    for (const auto& [k, v] : doc.items()) {
        (void)v;
        if (k != "format_version" && k != "layers") throw bad("unknown key '" + k + "'");
    }
    if (doc.contains("format_version") && doc.at("format_version") != document_format_version)
        throw bad("unsupported format_version");
    if (!doc.contains("layers") || !doc.at("layers").is_array()) throw bad("'layers' must be an array");
    const std::filesystem::path base = manifest_path.parent_path();
    ModelBundle model;
    std::set<std::string> names;
    const Json& layers = doc.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Json& e = layers[i];
        const std::string where = "layers[" + std::to_string(i) + "]";
        if (!e.is_object()) throw bad(where + " must be an object");
        for (const auto& [k, v] : e.items()) {
            (void)v;
            if (k != "name" && k != "weight" && k != "bias" && k != "calib") throw bad("unknown key '" + where + "." + k + "'");
        }
        auto str = [&](const char* key) {
            if (!e.contains(key) || !e.at(key).is_string()) throw bad(where + "." + key + " must be a string");
            return e.at(key).get<std::string>();
        };
        auto resolve = [&](const std::string& p) {
            const std::filesystem::path fp(p);
            return fp.is_absolute() ? fp : base / fp;
        };
        LayerBundle layer;
        layer.name = str("name");
        if (!names.insert(layer.name).second) throw bad("duplicate layer name '" + layer.name + "'");
        const Tensor w = read_tensor(resolve(str("weight")));
        if (w.dims.size() != 2) throw bad(where + ".weight must be 2-D (C_in x C_out)");
        layer.w = tensor_to_matrix(w);
        const Tensor x = read_tensor(resolve(str("calib")));
        if (x.dims.size() != 2) throw bad(where + ".calib must be 2-D (tokens x C_in)");
        layer.calib = tensor_to_matrix(x);
        if (e.contains("bias")) {
            const Tensor b = read_tensor(resolve(str("bias")));
            if (b.dims.size() != 1) throw bad(where + ".bias must be 1-D");
            std::vector<double> v = b.values();
            for (double d : v)
                if (!std::isfinite(d)) throw bad(where + ".bias contains NaN or Inf");
            layer.bias = std::move(v);
        }
        try {
            layer.validate();
        } catch (const ValidationError& err) {
            throw bad(where + ": " + err.what());
        }
        model.push_back(std::move(layer));
    }
    if (model.empty()) throw bad("no layers");
    return model;
}

// ---- report ---------------------------------------------------------------------------

Json metrics_to_json(const pipeline::LayerMetrics& m) {
    Json j;
    j["name"] = m.name;
    j["weight_frob_err"] = m.weight_frob_err;
    j["output_mse"] = m.output_mse;
    j["proxy_loss"] = m.proxy_loss;
    j["flatness_max_over_mean"] = m.flatness_max_over_mean;
    j["kurtosis"] = m.kurtosis;
    j["bits_per_weight"] = m.bits_per_weight;
    j["warnings"] = m.warnings;
    return j;
}

Json report_row_to_json(const pipeline::Report& r) {
    Json j;
    j["label"] = r.label;
    j["transforms"] = r.transforms;
    j["mitigation"] = r.mitigation;
    j["w_spec"] = r.w_spec;
    j["a_spec"] = r.a_spec;
    j["layers"] = Json::array();
    for (const auto& l : r.layers) j["layers"].push_back(metrics_to_json(l));
    Json mean = metrics_to_json(r.mean);
    mean.erase("warnings");
    j["mean"] = std::move(mean);
    return j;
}

Json report_document(const Json& recipe_echo, const std::vector<pipeline::Report>& rows, const Json& meta,
                     const Json& axis) {
    Json body;
    body["recipe"] = recipe_echo;
    if (!axis.is_null()) body["axis"] = axis;
    body["rows"] = Json::array();
    for (const auto& r : rows) body["rows"].push_back(report_row_to_json(r));
    Json doc;
    doc["format_version"] = document_format_version;
    doc["body"] = std::move(body);
    doc["meta"] = meta;
    return doc;
}

std::string render_table(const std::vector<pipeline::Report>& rows) {
    const std::vector<std::string> header = {"Label", "DN", "EC", "W", "A", "OutMSE", "WErr", "Proxy", "Max/Mean", "Kurt", "Bits"};
    std::vector<std::vector<std::string>> cells;
    cells.push_back(header);
    auto sci = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4e", v);
        return std::string(buf);
    };
    auto fixed = [](double v, int digits) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.*f", digits, v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        const auto& m = r.mean;
        cells.push_back({r.label, r.transforms, r.mitigation, r.w_spec, r.a_spec, sci(m.output_mse), sci(m.weight_frob_err),
                         sci(m.proxy_loss), fixed(m.flatness_max_over_mean, 2), fixed(m.kurtosis, 2),
                         fixed(m.bits_per_weight, 5)});
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : cells)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    std::ostringstream os;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t c = 0; c < cells[r].size(); ++c) {
            // Text columns left-aligned, metric columns right-aligned.
            if (c < 5) os << std::left;
            else os << std::right;
            os << std::setw(static_cast<int>(width[c])) << cells[r][c];
            if (c + 1 < cells[r].size()) os << "  ";
        }
        os << "\n";
        if (r == 0) {
            std::size_t total = 0;
            for (std::size_t w : width) total += w;
            os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
        }
    }
    return os.str();
}

// ---- text files -----------------------------------------------------------------------

Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ValidationError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace ptqlab::io
