#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <variant>

#include "ptqlab/documents.hpp"
#include "ptqlab/error.hpp"
#include "ptqlab/pipeline.hpp"
#include "ptqlab/quantizer.hpp"
#include "ptqlab/tensor_file.hpp"

namespace ptqlab::cli {

namespace fs = std::filesystem;
using io::DType;
using io::Json;

namespace {

DType parse_float_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw ValidationError("--dtype must be f32 or f64, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b == std::string::npos) throw ValidationError("empty entry in list '" + s + "'");
        out.push_back(item.substr(b, e - b + 1));
    }
    if (out.empty()) throw ValidationError("empty list");
    return out;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != s.size() || s.empty() || s[0] == '-') throw ValidationError(what + ": '" + s + "' is not a non-negative integer");
    return static_cast<std::size_t>(v);
}

Json meta_for(const std::string& command) {
    Json meta;
    meta["tool"] = "ptqlab";
    meta["version"] = tool_version;
    meta["command"] = command;
    return meta;
}

void emit_report(const Json& doc, const std::vector<pipeline::Report>& rows, const std::string& report_path,
                 const std::string& table_path, std::ostream& out) {
    const std::string table = io::render_table(rows);
    io::write_text(report_path, doc.dump(2) + "\n");
    if (!table_path.empty()) io::write_text(table_path, table);
    out << table;
}

// ---- gen ----------------------------------------------------------------------

struct GenArgs {
    pipeline::SyntheticOptions options;
    std::string dims = "128";
    std::string dtype = "f64";
    std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    pipeline::SyntheticOptions o = a.options;
    o.dims.clear();
    for (const std::string& d : split_list(a.dims)) o.dims.push_back(parse_count(d, "--dims"));
    const ModelBundle model = pipeline::gen_synthetic_model(o);
    const fs::path manifest = io::write_model(a.out, model, parse_float_dtype(a.dtype));
    out << "wrote " << model.size() << " layers to " << manifest.string() << "\n";
    return 0;
}

// ---- quantize -----------------------------------------------------------------

struct QuantizeArgs {
    std::string model;
    std::string recipe;
    std::string report;
    std::string table;
    std::string emit;
};

void emit_artifacts(const fs::path& dir, const std::vector<pipeline::LayerArtifacts>& artifacts) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    for (const auto& a : artifacts) {
        io::write_tensor(dir / (a.name + ".wq.qtns"), io::matrix_to_tensor(a.w_dequant, DType::f64));
        if (a.branch) {
            io::write_tensor(dir / (a.name + ".lowrank_a.qtns"), io::matrix_to_tensor(a.branch->a, DType::f64));
            io::write_tensor(dir / (a.name + ".lowrank_b.qtns"), io::matrix_to_tensor(a.branch->b, DType::f64));
        }
        if (a.bias) io::write_tensor(dir / (a.name + ".bias.qtns"), io::vector_to_tensor(*a.bias, DType::f64));
        for (std::size_t i = 0; i < a.transforms.size(); ++i) {
            const std::string stem = a.name + ".t" + std::to_string(i);
            std::visit(
                [&](const auto& t) {
                    using T = std::decay_t<decltype(t)>;
                    if constexpr (std::is_same_v<T, transforms::ShiftVector>)
                        io::write_tensor(dir / (stem + ".shift.qtns"), io::vector_to_tensor(t.t, DType::f64));
                    else if constexpr (std::is_same_v<T, transforms::ScaleVector>)
                        io::write_tensor(dir / (stem + ".scale.qtns"), io::vector_to_tensor(t.s, DType::f64));
                    else
                        io::write_tensor(dir / (stem + ".rotation.qtns"), io::matrix_to_tensor(t.matrix(), DType::f64));
                },
                a.transforms[i]);
        }
    }
}

int cmd_quantize(const QuantizeArgs& a, std::ostream& out) {
    const pipeline::Recipe recipe = io::load_recipe(a.recipe);
    const ModelBundle model = io::load_model(a.model);
    std::vector<pipeline::LayerArtifacts> artifacts;
    const pipeline::Report report = pipeline::run_recipe(model, recipe, a.emit.empty() ? nullptr : &artifacts);
    const std::vector<pipeline::Report> rows{report};
    emit_report(io::report_document(io::recipe_to_json(recipe), rows, meta_for("quantize")), rows, a.report, a.table, out);
    if (!a.emit.empty()) emit_artifacts(a.emit, artifacts);
    return 0;
}

// ---- sweep --------------------------------------------------------------------

struct SweepArgs {
    std::string model;
    std::string recipe;
    std::string axis;
    std::string values;
    std::string report;
    std::string table;
};

pipeline::SweepAxis parse_axis(const std::string& axis, const std::string& values, Json& echo) {
    echo["kind"] = axis;
    echo["values"] = Json::array();
    if (axis == "granularity") {
        std::vector<std::size_t> groups;
        for (const std::string& v : split_list(values.empty() ? "32,64,128,256,512" : values)) {
            groups.push_back(parse_count(v, "--values"));
            echo["values"].push_back(groups.back());
        }
        return pipeline::SweepAxis::granularity(groups);
    }
    if (axis == "symmetry") {
        std::vector<pipeline::SymmetryMode> modes;
        for (const std::string& v : split_list(values.empty() ? "sym,w-asym,a-asym,asym" : values)) {
            std::string lower;
            for (char c : v) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            if (lower == "sym") modes.push_back(pipeline::SymmetryMode::sym);
            else if (lower == "w-asym") modes.push_back(pipeline::SymmetryMode::w_asym);
            else if (lower == "a-asym") modes.push_back(pipeline::SymmetryMode::a_asym);
            else if (lower == "asym") modes.push_back(pipeline::SymmetryMode::asym);
            else throw ValidationError("--values: unknown symmetry mode '" + v + "' (sym, w-asym, a-asym, asym)");
            echo["values"].push_back(pipeline::symmetry_label(modes.back()));
        }
        return pipeline::SweepAxis::symmetry(modes);
    }
    if (axis == "format") {
        std::vector<pipeline::FormatChoice> formats;
        for (const std::string& v : split_list(values.empty() ? "int4,mxfp4" : values)) {
            std::string lower;
            for (char c : v) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            if (lower == "int4") formats.push_back(pipeline::FormatChoice::int4);
            else if (lower == "mxfp4") formats.push_back(pipeline::FormatChoice::mxfp4);
            else throw ValidationError("--values: unknown format '" + v + "' (int4, mxfp4)");
            echo["values"].push_back(pipeline::format_label(formats.back()));
        }
        return pipeline::SweepAxis::format(formats);
    }
    throw ValidationError("--axis must be granularity, symmetry or format, got '" + axis + "'");
}

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
    Json axis_echo;
    const pipeline::SweepAxis axis = parse_axis(a.axis, a.values, axis_echo);
    const pipeline::Recipe recipe = io::load_recipe(a.recipe);
    const ModelBundle model = io::load_model(a.model);
    const std::vector<pipeline::Report> rows = pipeline::sweep(model, recipe, axis);
    emit_report(io::report_document(io::recipe_to_json(recipe), rows, meta_for("sweep"), axis_echo), rows, a.report,
                a.table, out);
    return 0;
}

// ---- mxfp4 --------------------------------------------------------------------

struct Mxfp4Args {
    bool encode = false;
    bool decode = false;
    std::string in;
    std::string out;
    std::string scales;
    double clip = 1.0;
    std::string dtype = "f64";
};

std::string scales_path(const Mxfp4Args& a, const std::string& codes) {
    return a.scales.empty() ? codes + ".scales" : a.scales;
}

int cmd_mxfp4(const Mxfp4Args& a, std::ostream& out) {
    if (a.encode == a.decode) throw ValidationError("exactly one of --encode or --decode is required");
    if (a.encode) {
        const io::Tensor t = io::read_tensor(a.in);
        if (t.dtype != DType::f32 && t.dtype != DType::f64) throw ValidationError("--in must hold f32 or f64 values");
        const Matrix x = io::tensor_to_matrix(t);
        const quant::QuantizedTensor q = quant::mxfp4_quantize(x, a.clip);
        std::vector<double> codes(q.codes.begin(), q.codes.end());
        std::vector<double> exps;
        for (int e : quant::mxfp4_exponents(q)) exps.push_back(e);
        std::vector<std::uint64_t> scale_dims(t.dims.begin(), t.dims.end() - 1);
        scale_dims.push_back(q.params.layout.groups_per_row());
        const io::Tensor code_tensor = io::Tensor::from_values(DType::u8, t.dims, codes);
        const io::Tensor scale_tensor = io::Tensor::from_values(DType::i8, scale_dims, exps);
        io::write_tensor(a.out, code_tensor);
        io::write_tensor(scales_path(a, a.out), scale_tensor);
        out << "encoded " << x.size() << " values in " << exps.size() << " groups\n";
        return 0;
    }

    const io::Tensor codes = io::read_tensor(a.in);
    const std::string aux = scales_path(a, a.in);
    const io::Tensor scales = io::read_tensor(aux);
    if (codes.dtype != DType::u8) throw ValidationError("--in must hold u8 E2M1 codes");
    if (codes.dims.empty()) throw ValidationError("--in must have at least one dimension");
    if (scales.dtype != DType::i8) throw ValidationError("'" + aux + "' must hold i8 scale exponents");
    const std::size_t cols = static_cast<std::size_t>(codes.dims.back());
    const std::size_t rows = codes.element_count() / std::max<std::size_t>(cols, 1);
    const quant::QuantSpec spec = quant::QuantSpec::mxfp4(quant::ClipPolicy::fixed(1.0));
    quant::QuantizedTensor q;
    q.rows = rows;
    q.cols = cols;
    q.spec = spec;
    q.params.layout = quant::GroupLayout::make(rows, cols, spec);
    std::vector<std::uint64_t> expected(codes.dims.begin(), codes.dims.end() - 1);
    expected.push_back(q.params.layout.groups_per_row());
    if (scales.dims != expected) throw ValidationError("'" + aux + "' has the wrong shape for the code tensor");
    for (double v : codes.values()) {
        if (v > 15) throw ValidationError("--in contains a code above 15");
        q.codes.push_back(static_cast<int>(v));
    }
    for (double e : scales.values()) {
        if (e < quant::e8m0_min_exponent || e > quant::e8m0_max_exponent)
            throw ValidationError("'" + aux + "' contains an exponent outside [-127, 127]");
        q.params.scales.push_back(std::ldexp(1.0, static_cast<int>(e)));
    }
    const Matrix x = quant::mxfp4_dequantize(q);
    const DType dtype = parse_float_dtype(a.dtype);
    if (dtype == DType::f32)
        for (double v : x.data())
            if (std::abs(v) > std::numeric_limits<float>::max()) throw ValidationError("decoded value overflows f32");
    const auto d = x.data();
    io::write_tensor(a.out, io::Tensor::from_values(dtype, codes.dims, std::vector<double>(d.begin(), d.end())));
    out << "decoded " << x.size() << " values\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Post-training quantization lab"};
    app.name("ptqlab");
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(tool_version));

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic model bundle with planted outlier channels");
    g->add_option("--layers", gen.options.layers, "Number of layers")->capture_default_str();
    g->add_option("--dims", gen.dims, "Width, or comma-separated layers+1 widths")->capture_default_str();
    g->add_option("--tokens", gen.options.tokens, "Calibration tokens per layer")->capture_default_str();
    g->add_option("--outlier-channels", gen.options.outlier_channels, "Planted outlier channels")->capture_default_str();
    g->add_option("--outlier-gain", gen.options.outlier_gain, "Outlier channel gain")->capture_default_str();
    g->add_option("--skew", gen.options.skew, "Offset added to outlier channels")->capture_default_str();
    g->add_option("--seed", gen.options.seed, "Random seed")->capture_default_str();
    g->add_option("--dtype", gen.dtype, "Tensor dtype (f32 or f64)")->capture_default_str();
    g->add_option("--out", gen.out, "Output directory")->required();

    QuantizeArgs qa;
    auto* q = app.add_subcommand("quantize", "Run a recipe over a model bundle");
    q->add_option("--model", qa.model, "Manifest path")->required();
    q->add_option("--recipe", qa.recipe, "Recipe JSON")->required();
    q->add_option("--report", qa.report, "Report JSON output")->required();
    q->add_option("--table", qa.table, "Also write the text table here");
    q->add_option("--emit-quantized", qa.emit, "Directory for quantized weights, branches and transforms");

    SweepArgs sa;
    auto* s = app.add_subcommand("sweep", "Run a recipe across one quantization axis");
    s->add_option("--model", sa.model, "Manifest path")->required();
    s->add_option("--recipe", sa.recipe, "Base recipe JSON")->required();
    s->add_option("--axis", sa.axis, "granularity, symmetry or format")->required();
    s->add_option("--values", sa.values, "Comma-separated axis values (defaults cover the whole axis)");
    s->add_option("--report", sa.report, "Report JSON output")->required();
    s->add_option("--table", sa.table, "Also write the text table here");

    Mxfp4Args ma;
    auto* m = app.add_subcommand("mxfp4", "Encode or decode tensors in MXFP4 (E2M1 codes + E8M0 exponents)");
    m->add_flag("--encode", ma.encode, "Encode a float tensor");
    m->add_flag("--decode", ma.decode, "Decode codes and exponents");
    m->add_option("--in", ma.in, "Input tensor")->required();
    m->add_option("--out", ma.out, "Output tensor")->required();
    m->add_option("--scales", ma.scales, "Exponent tensor (default: <codes>.scales)");
    m->add_option("--clip", ma.clip, "Clip ratio for encoding")->capture_default_str();
    m->add_option("--dtype", ma.dtype, "Decoded dtype (f32 or f64)")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << app.version() << "\n";
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(ErrorKind::validation);
    }

    try {
        if (*g) return cmd_gen(gen, out);
        if (*q) return cmd_quantize(qa, out);
        if (*s) return cmd_sweep(sa, out);
        if (*m) return cmd_mxfp4(ma, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::bad_alloc&) {
        err << "error: out of memory\n";
        return exit_code_for(ErrorKind::numeric);
    }
    return exit_code_for(ErrorKind::validation);
}

}  // namespace ptqlab::cli
