#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"
#include "ptqlab/documents.hpp"
#include "ptqlab/tensor_file.hpp"

using namespace ptqlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("ptqlab_test_cli_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

void gen_small(const TempDir& dir, const std::string& sub, const std::string& dims = "16", const std::string& tokens = "64") {
    const Outcome o = run({"gen", "--layers", "2", "--dims", dims, "--tokens", tokens, "--seed", "5", "--out", dir / sub});
    REQUIRE(o.code == 0);
}

// E2M1 magnitudes indexed by the low three bits of the code.
constexpr double e2m1[8] = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};

}  // namespace

TEST_SUITE("gen") {
    TEST_CASE("defaults") {
        TempDir dir("gen_defaults");
        REQUIRE(run({"gen", "--out", dir / "m"}).code == 0);
        const io::Json manifest = io::read_json(dir / "m/manifest.json");
        REQUIRE(manifest["layers"].size() == 4);
        const io::Tensor w = io::read_tensor(dir.path / "m" / manifest["layers"][0]["weight"].get<std::string>());
        const io::Tensor x = io::read_tensor(dir.path / "m" / manifest["layers"][0]["calib"].get<std::string>());
        CHECK(w.dims == std::vector<std::uint64_t>{128, 128});
        CHECK(x.dims == std::vector<std::uint64_t>{512, 128});
        CHECK(w.dtype == io::DType::f64);
        const Matrix calib = io::tensor_to_matrix(x);
        std::vector<double> maxima(128, 0.0);
        for (std::size_t t = 0; t < 512; ++t)
            for (std::size_t c = 0; c < 128; ++c) maxima[c] = std::max(maxima[c], std::abs(calib(t, c)));
        std::sort(maxima.begin(), maxima.end());
        CHECK(maxima[123] < 10.0);
        CHECK(maxima[124] > 100.0);
    }

    TEST_CASE("repeat runs are byte identical") {
        TempDir dir("gen_repeat");
        gen_small(dir, "a");
        gen_small(dir, "b");
        for (const auto& entry : fs::directory_iterator(dir.path / "a")) {
            const std::string name = entry.path().filename().string();
            CHECK(slurp(dir / ("a/" + name)) == slurp(dir / ("b/" + name)));
        }
    }

    TEST_CASE("bad arguments exit with 2") {
        TempDir dir("gen_bad");
        CHECK(run({"gen"}).code == 2);
        CHECK(run({"gen", "--out", dir / "m", "--dims", "0"}).code == 2);
        CHECK(run({"gen", "--out", dir / "m", "--dtype", "f16"}).code == 2);
        CHECK(run({"gen", "--out", dir / "m", "--layers", "many"}).code == 2);
        CHECK(run({"frobnicate"}).code == 2);
    }

    TEST_CASE("an unwritable destination exits with 4") {
        TempDir dir("gen_io");
        write(dir / "file", "x");
        CHECK(run({"gen", "--out", dir / "file/sub"}).code == 4);
    }
}

TEST_SUITE("quantize") {
    TEST_CASE("16-bit recipe") {
        TempDir dir("q16");
        gen_small(dir, "m");
        write(dir / "r.json", R"({"w_spec": {"bits": 16}, "a_spec": {"bits": 16}})");
        const Outcome o = run({"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json", "--report",
                               dir / "rep.json", "--table", dir / "t.txt"});
        REQUIRE(o.code == 0);
        const io::Json rep = io::read_json(dir / "rep.json");
        for (const auto& l : rep["body"]["rows"][0]["layers"]) CHECK(l["output_mse"].get<double>() <= 1e-6);
        CHECK(rep["meta"]["command"] == "quantize");
        CHECK(slurp(dir / "t.txt").find("OutMSE") != std::string::npos);
        CHECK(o.out.find("OutMSE") != std::string::npos);
    }

    TEST_CASE("full recipe runs end to end and is deterministic") {
        TempDir dir("qfull");
        gen_small(dir, "m");
        write(dir / "r.json", R"({"transforms": [{"type": "rotation", "source": "optimized", "steps": 5},
                                                   {"type": "scale", "source": "optimized", "steps": 5}],
                                    "mitigation": [{"type": "gptq"}, {"type": "lowrank", "rank": 4}]})");
        const std::vector<std::string> base{"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json"};
        auto args_a = base;
        args_a.insert(args_a.end(), {"--report", dir / "a.json", "--emit-quantized", dir / "dump"});
        auto args_b = base;
        args_b.insert(args_b.end(), {"--report", dir / "b.json"});
        REQUIRE(run(args_a).code == 0);
        REQUIRE(run(args_b).code == 0);
        const io::Json a = io::read_json(dir / "a.json");
        const io::Json b = io::read_json(dir / "b.json");
        CHECK(a["body"].dump() == b["body"].dump());
        CHECK(a["body"]["rows"][0]["layers"].size() == 2);
        CHECK(a["body"]["rows"][0]["mitigation"] == "gptq+lowrank4");
        for (const char* f : {"layer0.wq.qtns", "layer0.lowrank_a.qtns", "layer0.lowrank_b.qtns", "layer0.t0.rotation.qtns",
                              "layer0.t1.scale.qtns"})
            CHECK_MESSAGE(fs::exists(dir.path / "dump" / f), f);
        const io::Tensor a_factor = io::read_tensor(dir.path / "dump" / "layer0.lowrank_a.qtns");
        CHECK(a_factor.dims == std::vector<std::uint64_t>{16, 4});
    }

    TEST_CASE("schema violation exits with 2 and names the key") {
        TempDir dir("qbad");
        gen_small(dir, "m");
        write(dir / "r.json", R"({"w_spec": {"granularty": "per-row"}})");
        const Outcome o =
            run({"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json", "--report", dir / "x.json"});
        CHECK(o.code == 2);
        CHECK(o.err.find("w_spec.granularty") != std::string::npos);
        CHECK_FALSE(fs::exists(dir.path / "x.json"));
    }

    TEST_CASE("rotation on a width that is not a power of two") {
        TempDir dir("q96");
        gen_small(dir, "m", "96");
        write(dir / "r.json", R"({"transforms": [{"type": "rotation"}]})");
        const Outcome o =
            run({"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json", "--report", dir / "x.json"});
        CHECK(o.code == 2);
        CHECK(o.err.find("power-of-two required") != std::string::npos);
        CHECK(o.err.find("layer0") != std::string::npos);
    }

    TEST_CASE("numeric failure exits with 3") {
        TempDir dir("qnum");
        gen_small(dir, "m", "16", "4");
        write(dir / "r.json", R"({"damping": 0, "mitigation": [{"type": "gptq"}]})");
        const Outcome o =
            run({"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json", "--report", dir / "x.json"});
        CHECK(o.code == 3);
        CHECK(o.err.find("damping") != std::string::npos);
    }

    TEST_CASE("missing inputs exit with 4") {
        TempDir dir("qio");
        gen_small(dir, "m");
        write(dir / "r.json", "{}");
        CHECK(run({"quantize", "--model", dir / "none.json", "--recipe", dir / "r.json", "--report", dir / "x.json"}).code == 4);
        CHECK(run({"quantize", "--model", dir / "m/manifest.json", "--recipe", dir / "none.json", "--report",
                   dir / "x.json"})
                  .code == 4);
    }
}

TEST_SUITE("sweep") {
    TEST_CASE("granularity rows carry the parameter bit cost") {
        TempDir dir("sg");
        gen_small(dir, "m", "512,4,512", "16");
        write(dir / "r.json", "{}");
        const Outcome o = run({"sweep", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json", "--axis",
                               "granularity", "--report", dir / "s.json"});
        REQUIRE(o.code == 0);
        const io::Json rows = io::read_json(dir / "s.json")["body"]["rows"];
        REQUIRE(rows.size() == 5);
        const std::vector<double> bits{0.5, 0.25, 0.125, 0.0625, 0.03125};
        for (std::size_t i = 0; i < 5; ++i) CHECK(rows[i]["mean"]["bits_per_weight"].get<double>() == bits[i]);
    }

    TEST_CASE("symmetry and format rows") {
        TempDir dir("ss");
        gen_small(dir, "m", "32");
        write(dir / "r.json", R"({"transforms": [{"type": "scale"}]})");
        const std::vector<std::string> base{"sweep", "--model", dir / "m/manifest.json", "--recipe", dir / "r.json"};
        auto sym = base;
        sym.insert(sym.end(), {"--axis", "symmetry", "--report", dir / "sym.json"});
        REQUIRE(run(sym).code == 0);
        const io::Json s = io::read_json(dir / "sym.json")["body"];
        CHECK(s["axis"]["kind"] == "symmetry");
        REQUIRE(s["rows"].size() == 4);
        const std::vector<std::string> labels{"Sym", "W-Asym", "A-Asym", "Asym"};
        for (std::size_t i = 0; i < 4; ++i) CHECK(s["rows"][i]["label"] == labels[i]);

        auto fmt = base;
        fmt.insert(fmt.end(), {"--axis", "format", "--values", "int4,mxfp4", "--report", dir / "fmt.json"});
        REQUIRE(run(fmt).code == 0);
        const io::Json f = io::read_json(dir / "fmt.json")["body"]["rows"];
        REQUIRE(f.size() == 2);
        CHECK(f[0]["label"] == "INT4");
        CHECK(f[1]["label"] == "MXFP4");

        auto bad = base;
        bad.insert(bad.end(), {"--axis", "format", "--values", "int8", "--report", dir / "bad.json"});
        CHECK(run(bad).code == 2);
        auto bad_axis = base;
        bad_axis.insert(bad_axis.end(), {"--axis", "depth", "--report", dir / "bad.json"});
        CHECK(run(bad_axis).code == 2);
    }
}

TEST_SUITE("mxfp4") {
    TEST_CASE("representable values round trip exactly") {
        TempDir dir("mx_exact");
        std::vector<double> values;
        for (int g = 0; g < 3; ++g)
            for (int i = 0; i < 32; ++i) {
                const double mag = e2m1[i % 8] * std::ldexp(1.0, g - 1);
                values.push_back(i % 16 >= 8 ? -mag : mag);
            }
        values[7] = 6.0 * std::ldexp(1.0, -1);
        io::write_tensor(dir / "x.qtns", io::Tensor::from_values(io::DType::f64, {3, 32}, values));
        REQUIRE(run({"mxfp4", "--encode", "--in", dir / "x.qtns", "--out", dir / "c.qtns", "--clip", "1"}).code == 0);
        const io::Tensor codes = io::read_tensor(dir / "c.qtns");
        const io::Tensor scales = io::read_tensor(dir / "c.qtns.scales");
        CHECK(codes.dtype == io::DType::u8);
        CHECK(codes.dims == std::vector<std::uint64_t>{3, 32});
        CHECK(scales.dtype == io::DType::i8);
        CHECK(scales.dims == std::vector<std::uint64_t>{3, 1});
        CHECK(scales.values() == std::vector<double>{-1, 0, 1});
        REQUIRE(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--out", dir / "y.qtns"}).code == 0);
        const io::Tensor y = io::read_tensor(dir / "y.qtns");
        CHECK(y.dims == std::vector<std::uint64_t>{3, 32});
        const auto decoded = y.values();
        for (std::size_t i = 0; i < values.size(); ++i) CHECK(decoded[i] == values[i]);
    }

    TEST_CASE("all-zero tensor") {
        TempDir dir("mx_zero");
        io::write_tensor(dir / "x.qtns", io::Tensor::from_values(io::DType::f32, {64}, std::vector<double>(64, 0.0)));
        REQUIRE(run({"mxfp4", "--encode", "--in", dir / "x.qtns", "--out", dir / "c.qtns"}).code == 0);
        for (double c : io::read_tensor(dir / "c.qtns").values()) CHECK(c == 0.0);
        CHECK(io::read_tensor(dir / "c.qtns.scales").values() == std::vector<double>{0, 0});
    }

    TEST_CASE("clipped Gaussian stays within each group's range") {
        TempDir dir("mx_clip");
        const Matrix x = oracle::gaussian(4, 64, 9, 3.0);
        io::write_tensor(dir / "x.qtns", io::matrix_to_tensor(x, io::DType::f64));
        REQUIRE(run({"mxfp4", "--encode", "--in", dir / "x.qtns", "--out", dir / "c.qtns", "--scales", dir / "e.qtns",
                     "--clip", "0.75"})
                    .code == 0);
        REQUIRE(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--scales", dir / "e.qtns", "--out", dir / "y.qtns"})
                    .code == 0);
        const auto exps = io::read_tensor(dir / "e.qtns").values();
        const Matrix y = io::tensor_to_matrix(io::read_tensor(dir / "y.qtns"));
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t g = 0; g < 2; ++g) {
                double group_max = 0.0;
                for (std::size_t c = 32 * g; c < 32 * g + 32; ++c) group_max = std::max(group_max, std::abs(x(r, c)));
                const double e = exps[r * 2 + g];
                CHECK(e == std::ceil(std::log2(0.75 * group_max / 6.0)));
                for (std::size_t c = 32 * g; c < 32 * g + 32; ++c) CHECK(std::abs(y(r, c)) <= 6.0 * std::ldexp(1.0, int(e)));
            }
    }

    TEST_CASE("malformed auxiliary tensors and bad flags") {
        TempDir dir("mx_bad");
        io::write_tensor(dir / "x.qtns", io::Tensor::from_values(io::DType::f64, {32}, std::vector<double>(32, 1.0)));
        REQUIRE(run({"mxfp4", "--encode", "--in", dir / "x.qtns", "--out", dir / "c.qtns"}).code == 0);
        io::write_tensor(dir / "c.qtns.scales", io::Tensor::from_values(io::DType::i8, {2}, {0, 0}));
        CHECK(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--out", dir / "y.qtns"}).code == 2);
        io::write_tensor(dir / "c.qtns.scales", io::Tensor::from_values(io::DType::f32, {1}, {0}));
        CHECK(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--out", dir / "y.qtns"}).code == 2);
        io::write_tensor(dir / "c.qtns.scales", io::Tensor::from_values(io::DType::i8, {1}, {0}));
        io::write_tensor(dir / "c.qtns", io::Tensor::from_values(io::DType::u8, {32}, std::vector<double>(32, 16)));
        CHECK(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--out", dir / "y.qtns"}).code == 2);
        fs::remove(dir.path / "c.qtns.scales");
        CHECK(run({"mxfp4", "--decode", "--in", dir / "c.qtns", "--out", dir / "y.qtns"}).code == 4);
        CHECK(run({"mxfp4", "--encode", "--decode", "--in", dir / "x.qtns", "--out", dir / "y.qtns"}).code == 2);
        CHECK(run({"mxfp4", "--in", dir / "x.qtns", "--out", dir / "y.qtns"}).code == 2);
        CHECK(run({"mxfp4", "--encode", "--in", dir / "x.qtns", "--out", dir / "y.qtns", "--clip", "0"}).code == 2);
    }
}

TEST_CASE("version flag") {
    const Outcome o = run({"--version"});
    CHECK(o.code == 0);
    CHECK(o.out.find(cli::tool_version) != std::string::npos);
}
