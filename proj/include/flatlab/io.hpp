#pragma once

#include "flatlab/experiments.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace flatlab {

using Json = nlohmann::ordered_json;

/// Serializes with 17 significant digits per number; non-finite numbers become null.
std::string dump_json(const Json& j, int indent = 2);

/// Parses text, rethrowing syntax errors as InvalidInput naming `what`.
Json parse_json(const std::string& text, const std::string& what);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

// checkpoints

struct Checkpoint {
	Architecture arch;
	ParamVector theta;
};

Json checkpoint_to_json(const Architecture& arch, const ParamVector& theta);
Checkpoint checkpoint_from_json(const Json& j);
void save_checkpoint(const std::filesystem::path& path, const Architecture& arch, const ParamVector& theta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// transforms and data

Json transform_to_json(const TransformSpec& spec);
TransformSpec transform_from_json(const Json& j);

/// { "inputs": [[...]...], "targets": [...] }
Json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const Json& j);

// reports

Json flatness_report_to_json(const FlatnessReport& report);
/// Everything except the wall-clock runtime, so repeated runs serialize identically.
Json scenario_report_to_json(const ScenarioReport& report);
Json suite_result_to_json(const SuiteResult& result);
Json reparam_demo_to_json(const ReparamDemo& demo);

/// Relative paths inside the spec resolve against base_dir.
ScenarioSpec scenario_spec_from_json(const Json& j, const std::filesystem::path& base_dir);

struct DemoSpec {
	std::string loss;
	Reparam1D reparam;
	double theta_lo = -1.6;
	double theta_hi = 1.6;
	std::size_t grid_points = 2001;
};

/// { "loss": name, "reparam": transform spec (power_stretch or 1-D radial),
///   "theta_lo", "theta_hi", "grid_points" }
DemoSpec demo_spec_from_json(const Json& j);

} // namespace flatlab
