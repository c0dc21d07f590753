#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "oracles.hpp"
#include "ptqlab/documents.hpp"
#include "ptqlab/error.hpp"
#include "ptqlab/tensor_file.hpp"

using namespace ptqlab;
using namespace ptqlab::io;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("ptqlab_test_io_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Header assembled byte by byte, independent of the encoder.
std::vector<std::uint8_t> header(std::uint8_t dtype, const std::vector<std::uint64_t>& dims) {
    std::vector<std::uint8_t> out{'Q', 'T', 'N', 'S', 1, dtype, static_cast<std::uint8_t>(dims.size()), 0};
    for (std::uint64_t d : dims)
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(d >> (8 * b)));
    return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("tensor file") {
    TEST_CASE("layout of a small f64 tensor") {
        const Tensor t = Tensor::from_values(DType::f64, {2}, {1.0, -2.5});
        std::vector<std::uint8_t> expected = header(1, {2});
        for (double v : {1.0, -2.5}) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) expected.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
        CHECK(encode_tensor(t) == expected);
        CHECK(decode_tensor(expected) == t);
    }

    TEST_CASE("bit-exact round trip for every dtype and rank") {
        const std::vector<std::vector<std::uint64_t>> shapes{{}, {5}, {3, 4}, {2, 3, 2}, {2, 1, 3, 2}};
        const Matrix noise = oracle::gaussian(1, 24, 1);
        for (const auto& dims : shapes) {
            std::size_t n = 1;
            for (auto d : dims) n *= d;
            std::vector<double> values(noise.data().begin(), noise.data().begin() + n);
            values[0] = -0.0;
            if (n > 1) values[1] = std::numeric_limits<double>::denorm_min();
            for (DType dt : {DType::f32, DType::f64}) {
                const Tensor t = Tensor::from_values(dt, dims, values);
                const auto bytes = encode_tensor(t);
                CHECK(bytes.size() == 8 + 8 * dims.size() + n * dtype_size(dt));
                const Tensor back = decode_tensor(bytes);
                CHECK(back == t);
                CHECK(encode_tensor(back) == bytes);
                if (dt == DType::f64) {
                    const auto v = back.values();
                    CHECK(std::memcmp(v.data(), values.data(), n * sizeof(double)) == 0);
                }
            }
        }
    }

    TEST_CASE("f32 values are rounded to single precision") {
        const Tensor t = Tensor::from_values(DType::f32, {1}, {0.1});
        CHECK(t.values()[0] == static_cast<double>(0.1f));
    }

    TEST_CASE("integer dtypes are range checked") {
        CHECK(Tensor::from_values(DType::u8, {3}, {0, 15, 255}).values() == std::vector<double>{0, 15, 255});
        CHECK(Tensor::from_values(DType::i8, {2}, {-127, 127}).values() == std::vector<double>{-127, 127});
        CHECK_THROWS_AS(Tensor::from_values(DType::u8, {1}, {256}), ValidationError);
        CHECK_THROWS_AS(Tensor::from_values(DType::i8, {1}, {0.5}), ValidationError);
        CHECK_THROWS_AS(Tensor::from_values(DType::f64, {2}, {1.0}), ValidationError);
    }

    TEST_CASE("malformed headers") {
        const auto good = encode_tensor(Tensor::from_values(DType::f64, {2}, {1, 2}));
        auto bad = good;
        bad[0] = 'X';
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad[4] = 2;
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad[5] = 9;
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad[6] = 5;
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad[7] = 1;
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad.pop_back();
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        bad = good;
        bad.push_back(0);
        CHECK_THROWS_AS(decode_tensor(bad), ValidationError);
        CHECK_THROWS_AS(decode_tensor({'Q', 'T', 'N'}), ValidationError);
        auto huge = header(1, {std::uint64_t{1} << 62, 16});
        CHECK_THROWS_AS(decode_tensor(huge), ValidationError);
    }

    TEST_CASE("files") {
        TempDir dir("files");
        const Tensor t = Tensor::from_values(DType::f32, {2, 2}, {1, 2, 3, 4});
        write_tensor(dir.path / "a.qtns", t);
        CHECK(read_bytes(dir.path / "a.qtns") == encode_tensor(t));
        CHECK(read_tensor(dir.path / "a.qtns") == t);
        CHECK_THROWS_AS(read_tensor(dir.path / "missing.qtns"), IoError);
        CHECK_THROWS_AS(write_tensor(dir.path / "no" / "such" / "dir.qtns", t), IoError);
    }

    TEST_CASE("matrix views") {
        const Matrix m{{1, 2, 3}, {4, 5, 6}};
        const Tensor t = matrix_to_tensor(m, DType::f64);
        CHECK(t.dims == std::vector<std::uint64_t>{2, 3});
        CHECK(tensor_to_matrix(t) == m);
        const Tensor v = vector_to_tensor({1, 2}, DType::f64);
        CHECK(tensor_to_matrix(v) == Matrix{{1, 2}});
        const Tensor cube = Tensor::from_values(DType::f64, {2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
        CHECK(tensor_to_matrix(cube) == Matrix{{1, 2}, {3, 4}, {5, 6}, {7, 8}});
    }
}

TEST_SUITE("manifest") {
    TEST_CASE("round trip with and without bias") {
        TempDir dir("manifest");
        ModelBundle model(2);
        model[0] = {"first", oracle::gaussian(4, 3, 1), std::vector<double>{1, 2, 3}, oracle::gaussian(6, 4, 2)};
        model[1] = {"second", oracle::gaussian(3, 2, 3), std::nullopt, oracle::gaussian(6, 3, 4)};
        const fs::path manifest = write_model(dir.path, model, DType::f64);
        CHECK(manifest == dir.path / "manifest.json");
        const ModelBundle back = load_model(manifest);
        REQUIRE(back.size() == 2);
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(back[i].name == model[i].name);
            CHECK(back[i].w == model[i].w);
            CHECK(back[i].calib == model[i].calib);
            CHECK(back[i].bias == model[i].bias);
        }
        const Json doc = read_json(manifest);
        CHECK(doc["layers"][0]["weight"] == "first.weight.qtns");
        CHECK_FALSE(doc["layers"][1].contains("bias"));
    }

    TEST_CASE("shape mismatches and unknown keys") {
        TempDir dir("manifest_bad");
        ModelBundle model(1);
        model[0] = {"l", oracle::gaussian(4, 3, 1), std::nullopt, oracle::gaussian(6, 4, 2)};
        const fs::path manifest = write_model(dir.path, model, DType::f64);
        write_tensor(dir.path / "l.calib.qtns", matrix_to_tensor(oracle::gaussian(6, 5, 3), DType::f64));
        CHECK_THROWS_AS(load_model(manifest), ValidationError);

        write_text(dir.path / "extra.json", R"({"layers": [{"name": "l", "weight": "l.weight.qtns", "calib": "c", "gain": 2}]})");
        try {
            load_model(dir.path / "extra.json");
            FAIL("expected an error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("gain") != std::string::npos);
        }
        write_text(dir.path / "missing.json", R"({"layers": [{"name": "l", "weight": "nope.qtns", "calib": "c"}]})");
        CHECK_THROWS_AS(load_model(dir.path / "missing.json"), IoError);
        CHECK_THROWS_AS(load_model(dir.path / "absent.json"), IoError);
        write_text(dir.path / "broken.json", "{ not json");
        CHECK_THROWS_AS(load_model(dir.path / "broken.json"), ValidationError);
    }
}

TEST_SUITE("recipe documents") {
    TEST_CASE("defaults") {
        const pipeline::Recipe r = recipe_from_json(Json::object());
        CHECK(r.transforms.empty());
        CHECK(r.mitigation.empty());
        CHECK(r.w_spec == pipeline::Recipe::default_weight_spec());
        CHECK(r.a_spec == pipeline::Recipe::default_activation_spec());
        CHECK(r.damping == 0.01);
    }

    TEST_CASE("parameter defaults of each step") {
        const Json doc = Json::parse(R"({
          "transforms": [{"type": "scale"}, {"type": "rotation"}],
          "w_spec": {"group": 64},
          "a_spec": {"format": "mxfp4"},
          "mitigation": [{"type": "gptq"}, {"type": "lowrank"}]})");
        const pipeline::Recipe r = recipe_from_json(doc);
        CHECK(r.transforms[0].alpha == 0.5);
        CHECK(r.transforms[1].source == pipeline::TransformStep::Source::hadamard);
        CHECK(r.w_spec.granularity == quant::Granularity::per_group(64));
        CHECK(r.a_spec.clip == quant::ClipPolicy::fixed(0.75));
        CHECK(r.mitigation[0].block == 128);
        CHECK(r.mitigation[1].rank == 32);
        CHECK(recipe_from_json(Json::parse(R"({"w_spec": {"granularity": "per-group"}})")).w_spec.granularity ==
              quant::Granularity::per_group(128));
        CHECK(recipe_from_json(Json::parse(R"({"w_spec": {"format": "mxfp4"}})")).w_spec.clip.kind ==
              quant::ClipPolicy::Kind::search);
    }

    TEST_CASE("round trip") {
        const Json doc = Json::parse(R"({
          "format_version": 1, "label": "full", "seed": 7, "damping": 0.05,
          "transforms": [
            {"type": "shift"},
            {"type": "scale", "source": "calibrated", "alpha": 0.25},
            {"type": "scale", "source": "optimized", "steps": 5, "lr": 0.1},
            {"type": "rotation", "source": "random", "seed": 3},
            {"type": "rotation", "source": "optimized", "init": "random", "seed": 9, "steps": 4, "lr": 0.02}],
          "w_spec": {"format": "int", "bits": 3, "symmetric": false, "granularity": "per-group", "group": 32,
                     "clip": "search", "clip_grid": [0.8, 0.9, 1.0], "rounding": "half-even", "signed_range": "full"},
          "a_spec": {"format": "int", "bits": 8, "symmetric": true, "granularity": "per-tensor", "clip": 0.9},
          "mitigation": [{"type": "gptq", "block": 16}, {"type": "scaled_lowrank", "rank": 8}]})");
        const pipeline::Recipe r = recipe_from_json(doc);
        const Json echo = recipe_to_json(r);
        const pipeline::Recipe again = recipe_from_json(echo);
        CHECK(recipe_to_json(again) == echo);
        CHECK(again.w_spec == r.w_spec);
        CHECK(again.a_spec == r.a_spec);
        CHECK(again.seed == 7);
        CHECK(again.transforms.size() == 5);
        CHECK(again.transforms[4].seed == 9);
        CHECK(again.transforms[4].optimizer.steps == 4);
        CHECK(again.mitigation[1].kind == pipeline::MitigationStep::Kind::scaled_lowrank);
        CHECK(echo["w_spec"]["clip_grid"] == Json::parse("[0.8, 0.9, 1.0]"));
    }

    TEST_CASE("errors name the key path") {
        const std::vector<std::pair<std::string, std::string>> cases{
            {R"({"w_spec": {"granularty": "per-row"}})", "w_spec.granularty"},
            {R"({"transforms": [{"type": "shift"}, {"type": "scale", "alpha": 2}]})", "transforms[1].alpha"},
            {R"({"transforms": [{"type": "spin"}]})", "transforms[0].type"},
            {R"({"mitigation": [{"type": "lowrank", "k": 4}]})", "mitigation[0].k"},
            {R"({"a_spec": {"bits": 1}})", "a_spec.bits"},
            {R"({"a_spec": {"format": "mxfp4", "bits": 4}})", "a_spec.bits"},
            {R"({"w_spec": {"clip": "max"}})", "w_spec.clip"},
            {R"({"seed": "x"})", "seed"},
            {R"({"extra": 1})", "extra"},
            {R"({"mitigation": [{"type": "lowrank"}, {"type": "gptq"}]})", "gptq"},
        };
        for (const auto& [text, key] : cases) {
            CAPTURE(text);
            try {
                recipe_from_json(Json::parse(text));
                FAIL("expected an error");
            } catch (const ValidationError& e) {
                CHECK(std::string(e.what()).find(key) != std::string::npos);
            }
        }
    }

    TEST_CASE("recipe files") {
        TempDir dir("recipe");
        write_text(dir.path / "r.json", R"({"label": "x"})");
        CHECK(load_recipe(dir.path / "r.json").label == "x");
        CHECK_THROWS_AS(load_recipe(dir.path / "none.json"), IoError);
        write_text(dir.path / "bad.json", "[1,");
        CHECK_THROWS_AS(load_recipe(dir.path / "bad.json"), ValidationError);
    }
}

TEST_SUITE("reports") {
    pipeline::Report sample_row(const std::string& label) {
        pipeline::Report r;
        r.label = label;
        r.transforms = "hadamard";
        r.mitigation = "gptq";
        r.w_spec = "int4";
        r.a_spec = "int4";
        pipeline::LayerMetrics m;
        m.name = "layer0";
        m.output_mse = 0.125;
        m.warnings = {"w"};
        r.layers = {m};
        r.mean = m;
        r.mean.name = "mean";
        r.mean.warnings.clear();
        return r;
    }

    TEST_CASE("document layout keeps meta outside the body") {
        const Json doc = report_document(Json{{"label", "x"}}, {sample_row("a")}, Json{{"tool", "t"}}, Json("symmetry"));
        CHECK(doc["format_version"] == 1);
        CHECK(doc["body"]["recipe"]["label"] == "x");
        CHECK(doc["body"]["axis"] == "symmetry");
        CHECK(doc["body"]["rows"][0]["layers"][0]["output_mse"] == 0.125);
        CHECK(doc["body"]["rows"][0]["layers"][0]["warnings"][0] == "w");
        CHECK_FALSE(doc["body"]["rows"][0]["mean"].contains("warnings"));
        CHECK(doc["meta"]["tool"] == "t");
        CHECK_FALSE(report_document(Json::object(), {}, Json::object()).at("body").contains("axis"));
        CHECK(report_document(Json::object(), {sample_row("a")}, Json::object()).dump() ==
              report_document(Json::object(), {sample_row("a")}, Json::object()).dump());
    }

    TEST_CASE("table columns") {
        const std::string table = render_table({sample_row("first"), sample_row("second-row")});
        for (const char* col : {"Label", "DN", "EC", "OutMSE", "Bits"}) CHECK(table.find(col) != std::string::npos);
        CHECK(table.find("second-row") != std::string::npos);
        std::size_t lines = 0;
        for (char c : table) lines += c == '\n';
        CHECK(lines >= 3);
    }
}
