#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptqlab/layer.hpp"
#include "ptqlab/pipeline.hpp"
#include "ptqlab/tensor_file.hpp"

// JSON documents on disk: model manifests, recipes, and reports.
namespace ptqlab::io {

using Json = nlohmann::ordered_json;

inline constexpr int document_format_version = 1;

// ---- manifest -------------------------------------------------------------------

/// Writes <name>.weight.qtns, <name>.calib.qtns (and <name>.bias.qtns) for
/// every layer plus manifest.json, whose paths are relative to `dir`.
/// Returns the manifest path.
std::filesystem::path write_model(const std::filesystem::path& dir, const ModelBundle& model, DType dtype);

// Loads and shape-checks every referenced tensor. Relative paths resolve
// against the manifest's directory.
ModelBundle load_model(const std::filesystem::path& manifest);

// ---- recipe -----------------------------------------------------------------------

/// Strict schema: unknown keys and wrong types raise ValidationError naming
/// the offending key path, e.g. "w_spec.granularity" or "transforms[1].alpha".
pipeline::Recipe recipe_from_json(const Json& doc);
Json recipe_to_json(const pipeline::Recipe& recipe);
Json spec_to_json(const quant::QuantSpec& spec);

pipeline::Recipe load_recipe(const std::filesystem::path& path);

// ---- report -------------------------------------------------------------------------

Json metrics_to_json(const pipeline::LayerMetrics& m);
Json report_row_to_json(const pipeline::Report& r);

/// {"format_version", "body": {"recipe", ["axis",] "rows"}, "meta"}. The body
/// depends only on inputs; run-specific information belongs in "meta".
Json report_document(const Json& recipe_echo, const std::vector<pipeline::Report>& rows, const Json& meta,
                     const Json& axis = Json());

/// Aligned text table: one line per row with the data-normalization (DN) and
/// error-compensation (EC) columns followed by the mean metrics.
std::string render_table(const std::vector<pipeline::Report>& rows);

// ---- text files ----------------------------------------------------------------------

Json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ptqlab::io
