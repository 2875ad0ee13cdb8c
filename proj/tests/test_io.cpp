#include "flatlab/io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace flatlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name)
{
	const fs::path p = fs::temp_directory_path() / ("flatlab_test_io_" + name);
	fs::remove_all(p);
	fs::create_directories(p);
	return p;
}

std::string invalid_message(const std::function<void()>& fn)
{
	try {
		fn();
	} catch (const InvalidInput& e) {
		return e.what();
	}
	return "";
}

} // namespace

TEST(Json, SeventeenDigitsAndNonFinite)
{
	Json j;
	j["x"] = 0.1;
	j["y"] = std::nan("");
	j["z"] = 3;
	j["v"] = Vector{1.0, 2.5};
	const std::string s = dump_json(j);
	EXPECT_NE(s.find("0.10000000000000001"), std::string::npos);
	EXPECT_NE(s.find("\"y\": null"), std::string::npos);
	EXPECT_NE(s.find("\"z\": 3"), std::string::npos);
	EXPECT_NE(s.find("[1, 2.5]"), std::string::npos);
	EXPECT_EQ(parse_json(s, "t")["x"].get<double>(), 0.1);
	const std::string bad = invalid_message([] { parse_json("{\"a\": ", "broken.json"); });
	EXPECT_NE(bad.find("broken.json"), std::string::npos);
}

TEST(Checkpoint, BitExactRoundTrip)
{
	SeededRng rng(70, 0);
	const fs::path dir = temp_dir("ckpt");
	for (const Architecture& arch : {Architecture{{2, 5, 1}, false}, Architecture{{3, 2, 2, 1}, true}}) {
		const ParamVector theta = random_params(arch, rng, 3.0);
		save_checkpoint(dir / "c.json", arch, theta);
		const Checkpoint c = load_checkpoint(dir / "c.json");
		EXPECT_EQ(c.arch, arch);
		EXPECT_EQ(c.theta, theta);
		EXPECT_EQ(dump_json(checkpoint_to_json(c.arch, c.theta)), read_file(dir / "c.json"));
	}
	const Json j = checkpoint_to_json(Architecture{{1, 1, 1}, false}, zero_params(Architecture{{1, 1, 1}, false}));
	EXPECT_TRUE(j["biases"].is_null());
	EXPECT_EQ(j["layer_widths"], Json::array({1, 1, 1}));
}

TEST(Checkpoint, RejectsMalformed)
{
	Json j = checkpoint_to_json(Architecture{{1, 2, 1}, false}, zero_params(Architecture{{1, 2, 1}, false}));
	Json extra = j;
	extra["colour"] = "red";
	EXPECT_NE(invalid_message([&] { checkpoint_from_json(extra); }).find("colour"), std::string::npos);
	Json short_w = j;
	short_w["weights"][0] = Json::array({1.0});
	EXPECT_NE(invalid_message([&] { checkpoint_from_json(short_w); }).find("weights[0]"), std::string::npos);
	Json no_bias = j;
	no_bias.erase("use_bias");
	EXPECT_NE(invalid_message([&] { checkpoint_from_json(no_bias); }).find("use_bias"), std::string::npos);
	const std::string missing = invalid_message([] { load_checkpoint("/nonexistent/flatlab.json"); });
	EXPECT_NE(missing.find("/nonexistent/flatlab.json"), std::string::npos);
}

TEST(Transform, JsonRoundTrip)
{
	const std::vector<TransformSpec> specs = {
	    AlphaScaleTwoLayer{2.5},
	    AlphaScaleDeep{{2.0, 1.0, 0.5}},
	    WeightNormScale{1, -3.0},
	    Radial{{0.1, 0.2}, 1.0, 0.25, 0.5},
	    PowerStretch{0.5, 0.3, 0.01},
	    InputAffine{DenseMatrix(2, 2, Vector{1, 2, 3, 4}), Vector{0.5, -0.5}},
	};
	for (const auto& s : specs) {
		const Json j = transform_to_json(s);
		const Json back = transform_to_json(transform_from_json(parse_json(dump_json(j), "t")));
		EXPECT_EQ(dump_json(j), dump_json(back)) << dump_json(j);
	}
	EXPECT_EQ(transform_to_json(InputAffine{DenseMatrix::identity(2), Vector{0, 0}})["matrix"],
	          Json::parse("[[1.0, 0.0], [0.0, 1.0]]"));
	EXPECT_NE(invalid_message([] { transform_from_json(Json{{"kind", "twist"}}); }).find("twist"), std::string::npos);
	EXPECT_NE(invalid_message([] { transform_from_json(Json{{"kind", "alpha_scale_two_layer"}, {"alpha", -1.0}}); })
	              .find("alpha"),
	          std::string::npos);
}

TEST(Dataset, JsonRoundTrip)
{
	const Dataset d{{Vector{1.0, 2.0}, Vector{-0.1, 0.3}}, Vector{0.5, 0.25}};
	const Dataset back = dataset_from_json(dataset_to_json(d));
	EXPECT_EQ(back.inputs, d.inputs);
	EXPECT_EQ(back.targets, d.targets);
	Json bad = dataset_to_json(d);
	bad["targets"] = Json::array({1.0});
	EXPECT_THROW(dataset_from_json(bad), InvalidInput);
}

TEST(Scenario, ParsesRulesAndNamesBadKeys)
{
	const Json j = Json::parse(R"({
		"name": "s1", "arch": "2,4,1",
		"data": {"source": "teacher", "seed": 3, "m": 10},
		"transform": {"rule": "sharpen", "M": 100},
		"checks": ["equivalence", {"name": "spectral_norm_at_least", "tolerance": 100}]
	})");
	const ScenarioSpec s = scenario_spec_from_json(j, ".");
	EXPECT_EQ(s.name, "s1");
	EXPECT_EQ(s.arch.layer_widths, (std::vector<std::size_t>{2, 4, 1}));
	EXPECT_EQ(s.m, 10u);
	EXPECT_EQ(s.data_seed, 3u);
	ASSERT_TRUE(std::holds_alternative<SharpenTransform>(s.transform));
	EXPECT_EQ(std::get<SharpenTransform>(s.transform).target, 100.0);
	ASSERT_EQ(s.checks.size(), 2u);
	EXPECT_EQ(s.checks[1].tolerance, 100.0);

	Json typo = j;
	typo["chekcs"] = Json::array();
	EXPECT_NE(invalid_message([&] { scenario_spec_from_json(typo, "."); }).find("chekcs"), std::string::npos);
	Json bad_rule = j;
	bad_rule["transform"] = Json{{"rule", "melt"}};
	EXPECT_NE(invalid_message([&] { scenario_spec_from_json(bad_rule, "."); }).find("melt"), std::string::npos);
	Json no_arch = j;
	no_arch.erase("arch");
	EXPECT_NE(invalid_message([&] { scenario_spec_from_json(no_arch, "."); }).find("arch"), std::string::npos);
	Json bad_check = j;
	bad_check["checks"] = Json::array({"flatness_vibes"});
	EXPECT_NE(invalid_message([&] { scenario_spec_from_json(bad_check, "."); }).find("flatness_vibes"), std::string::npos);
}

TEST(Scenario, CheckpointPathResolvesAgainstBaseDir)
{
	const fs::path dir = temp_dir("scenario");
	const Architecture arch{{2, 3, 1}, false};
	SeededRng rng(71, 0);
	const ParamVector theta = random_params(arch, rng);
	save_checkpoint(dir / "p.json", arch, theta);
	const Json j = Json::parse(R"({"arch": [2, 3, 1], "checkpoint": "p.json",
		"transform": {"kind": "alpha_scale_two_layer", "alpha": 2}})");
	const ScenarioSpec s = scenario_spec_from_json(j, dir);
	ASSERT_TRUE(s.checkpoint.has_value());
	EXPECT_EQ(*s.checkpoint, theta);
	const Json other = Json::parse(R"({"arch": [2, 4, 1], "checkpoint": "p.json"})");
	EXPECT_THROW(scenario_spec_from_json(other, dir), InvalidInput);
}

TEST(Reports, ScenarioSerializationIsStable)
{
	ScenarioSpec s;
	s.arch = Architecture{{2, 3, 1}, false};
	s.m = 12;
	s.transform = FixedTransform{AlphaScaleTwoLayer{3.0}};
	s.checks = {{"equivalence", {}}, {"loss_unchanged", {}}};
	ScenarioReport a = run_scenario(s);
	ScenarioReport b = run_scenario(s);
	b.runtime_seconds = a.runtime_seconds + 5.0;
	EXPECT_EQ(dump_json(scenario_report_to_json(a)), dump_json(scenario_report_to_json(b)));
	const Json j = scenario_report_to_json(a);
	EXPECT_FALSE(j.contains("runtime_seconds"));
	EXPECT_TRUE(j["passed"].get<bool>());
}

TEST(Reports, SkippedFieldsCarryReason)
{
	FlatnessReport r;
	r.hessian_spectral_norm = Measured<double>::skip("kink proximity: test");
	r.volume_certificate = Measured<VolumeCertificate>::skip("not requested");
	const Json j = flatness_report_to_json(r);
	EXPECT_EQ(j["spec_norm"]["skipped"], "kink proximity: test");
	EXPECT_EQ(j["volume_certificate"]["skipped"], "not requested");
}

TEST(DemoSpec, Parses)
{
	const DemoSpec d = demo_spec_from_json(Json::parse(
	    R"({"loss": "double_well", "reparam": {"kind": "power_stretch", "center": 1, "a": 0.5, "b": 0.1}})"));
	EXPECT_EQ(d.loss, "double_well");
	EXPECT_EQ(d.grid_points, 2001u);
	EXPECT_EQ(std::get<PowerStretch>(d.reparam).a, 0.5);
	EXPECT_THROW(demo_spec_from_json(Json::parse(R"({"loss": "double_well", "reparam": {"kind": "alpha_scale_two_layer", "alpha": 2}})")),
	             InvalidInput);
}

TEST(Files, AtomicWriteReplacesContent)
{
	const fs::path dir = temp_dir("atomic");
	const fs::path p = dir / "out.txt";
	write_file_atomic(p, "first");
	write_file_atomic(p, "second");
	EXPECT_EQ(read_file(p), "second");
	std::size_t entries = 0;
	for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir))
		++entries;
	EXPECT_EQ(entries, 1u);
	EXPECT_THROW(write_file_atomic(dir / "missing" / "x.txt", "x"), std::exception);
}
