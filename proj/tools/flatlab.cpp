// flatlab command-line interface: a thin shell over the library.
//
// Exit codes: 0 success, 1 invalid input, 2 a verification check failed.

#include "flatlab/io.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace flatlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitCheckFailed = 2;

struct Options {
	std::string arch;
	bool bias = false;
	bool teacher = false;
	std::size_t m = 64;
	std::uint64_t seed = 0;
	std::string checkpoint;
	std::string spec;
	std::string out;
	double eps = 1e-2;
	std::string alpha;
	std::string suite;
	std::string thresholds;
	int jobs = 1;
};

Vector parse_reals(const std::string& text, const std::string& flag)
{
	Vector out;
	std::size_t pos = 0;
	while (pos <= text.size()) {
		const std::size_t comma = std::min(text.find(',', pos), text.size());
		const std::string item = text.substr(pos, comma - pos);
		try {
			std::size_t used = 0;
			out.push_back(std::stod(item, &used));
			if (used != item.size())
				throw std::invalid_argument(item);
		} catch (const std::exception&) {
			throw InvalidInput(flag + ": '" + item + "' is not a number");
		}
		pos = comma + 1;
	}
	return out;
}

void emit(const Options& o, const std::string& content)
{
	if (o.out.empty())
		std::cout << content;
	else
		write_file_atomic(o.out, content);
}

Dataset teacher_data(const Options& o, const Architecture& arch)
{
	if (!o.teacher)
		throw InvalidInput("--teacher is required: data are regenerated from the teacher-student generator");
	return make_teacher_student(arch, o.seed, o.m).data;
}

int cmd_train(const Options& o)
{
	if (!o.teacher)
		throw InvalidInput("--teacher is required: it is the only training data source");
	const Architecture arch = parse_architecture(o.arch, o.bias);
	const Dataset data = make_teacher_student(arch, o.seed, o.m).data;
	TrainConfig cfg;
	cfg.seed = o.seed;
	const TrainResult res = train_sgd(arch, data, LossKind::MeanSquaredError, cfg);
	save_checkpoint(o.out, arch, res.theta);
	const TrainEpoch& best = res.trace[static_cast<std::size_t>(res.best_epoch)];
	std::cerr << "train: epochs " << res.trace.size() - 1 << ", best epoch " << res.best_epoch << ", loss "
	          << format_real(best.loss) << ", grad norm " << format_real(best.gradient_norm) << "\n";
	return kExitOk;
}

int cmd_metrics(const Options& o)
{
	const Checkpoint c = load_checkpoint(o.checkpoint);
	const Dataset data = teacher_data(o, c.arch);
	SharpnessConfig cfg;
	cfg.eps = o.eps;
	cfg.seed = o.seed;
	cfg.jobs = o.jobs;
	const Vector thresholds = o.thresholds.empty() ? Vector{} : parse_reals(o.thresholds, "--thresholds");
	std::optional<VolumeParams> vol;
	if (c.arch.depth() == 2) {
		vol.emplace();
		vol->seed = o.seed;
		vol->jobs = o.jobs;
	}
	const FlatnessReport r = flatness_report(c.arch, c.theta, data, LossKind::MeanSquaredError, cfg, thresholds, vol);
	emit(o, dump_json(flatness_report_to_json(r)));
	return kExitOk;
}

int cmd_transform(const Options& o)
{
	const Checkpoint c = load_checkpoint(o.checkpoint);
	const TransformSpec spec = transform_from_json(parse_json(read_file(o.spec), o.spec));
	const TransformOutcome t = apply_transform(c.arch, c.theta, spec);
	for (const auto& f : t.flags)
		std::cerr << "transform: " << f << "\n";
	save_checkpoint(o.out, c.arch, t.params);
	return kExitOk;
}

int cmd_sweep(const Options& o)
{
	const Checkpoint c = load_checkpoint(o.checkpoint);
	const Dataset data = teacher_data(o, c.arch);
	SharpnessConfig cfg;
	cfg.eps = o.eps;
	cfg.seed = o.seed;
	cfg.jobs = o.jobs;
	const Vector alphas = parse_reals(o.alpha, "--alpha");
	emit(o, alpha_sweep(c.arch, c.theta, data, LossKind::MeanSquaredError, alphas, cfg));
	return kExitOk;
}

int cmd_verify(const Options& o)
{
	if (o.suite.empty() == o.spec.empty())
		throw InvalidInput("verify: give exactly one of --suite or --spec");
	if (!o.suite.empty()) {
		const SuiteResult r = run_suite(o.suite, o.seed, o.jobs);
		for (const auto& c : r.checks)
			if (!c.passed)
				std::cerr << "verify: check " << c.name << " failed: measured " << format_real(c.measured)
				          << ", threshold " << format_real(c.threshold) << "\n";
		emit(o, dump_json(suite_result_to_json(r)));
		return r.passed() ? kExitOk : kExitCheckFailed;
	}
	const std::filesystem::path spec_path(o.spec);
	ScenarioSpec spec = scenario_spec_from_json(parse_json(read_file(spec_path), o.spec), spec_path.parent_path());
	spec.metrics.jobs = o.jobs;
	if (spec.volume)
		spec.volume->jobs = o.jobs;
	const ScenarioReport r = run_scenario(spec);
	if (!r.equivalence.passed)
		std::cerr << "verify: check equivalence failed: deviation " << format_real(r.equivalence.max_deviation) << "\n";
	for (const auto& v : r.verdicts)
		if (!v.passed)
			std::cerr << "verify: check " << v.name << " failed: measured " << format_real(v.measured) << ", threshold "
			          << format_real(v.threshold) << (v.detail.empty() ? "" : " (" + v.detail + ")") << "\n";
	emit(o, dump_json(scenario_report_to_json(r)));
	return r.passed ? kExitOk : kExitCheckFailed;
}

int cmd_demo(const Options& o)
{
	const DemoSpec d = demo_spec_from_json(parse_json(read_file(o.spec), o.spec));
	const ReparamDemo demo = reparam_demo_1d(d.loss, d.reparam, d.theta_lo, d.theta_hi, d.grid_points);
	write_file_atomic(o.out, demo_curve_csv(demo));
	for (const auto& n : demo.notes)
		std::cerr << "demo-reparam: " << n << "\n";
	std::cout << dump_json(reparam_demo_to_json(demo));
	if (!demo.passed)
		std::cerr << "demo-reparam: check curvature failed: minimum error " << format_real(demo.max_minimum_error)
		          << ", full-formula error " << format_real(demo.max_full_error) << "\n";
	return demo.passed ? kExitOk : kExitCheckFailed;
}

} // namespace

int main(int argc, char** argv)
{
	CLI::App app{"flatlab: flatness and sharpness measures for rectified networks"};
	app.require_subcommand(1);
	Options o;

	auto jobs = [&](CLI::App* c) { c->add_option("--jobs", o.jobs, "parallel work units")->check(CLI::PositiveNumber); };
	auto seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "random seed (default 0)"); };
	auto data = [&](CLI::App* c) {
		c->add_flag("--teacher", o.teacher, "use the teacher-student generator");
		c->add_option("--m", o.m, "number of examples")->check(CLI::PositiveNumber);
	};

	CLI::App* train = app.add_subcommand("train", "train a student on teacher-student data");
	train->add_option("--arch", o.arch, "layer widths w0,w1,...,wK")->required();
	train->add_flag("--bias", o.bias, "layers carry biases");
	data(train);
	seed(train);
	train->add_option("--out", o.out, "checkpoint to write")->required();
	jobs(train);

	CLI::App* metrics = app.add_subcommand("metrics", "flatness report for a checkpoint");
	metrics->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
	data(metrics);
	seed(metrics);
	metrics->add_option("--eps", o.eps, "sharpness radius");
	metrics->add_option("--thresholds", o.thresholds, "eigenvalue thresholds, comma separated");
	metrics->add_option("--out", o.out, "report file (default stdout)");
	jobs(metrics);

	CLI::App* transform = app.add_subcommand("transform", "apply a transform spec to a checkpoint");
	transform->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
	transform->add_option("--spec", o.spec, "transform spec JSON")->required()->check(CLI::ExistingFile);
	transform->add_option("--out", o.out, "checkpoint to write")->required();

	CLI::App* sweep = app.add_subcommand("sweep", "report columns along an alpha-scale orbit");
	sweep->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
	data(sweep);
	seed(sweep);
	sweep->add_option("--alpha", o.alpha, "alpha values, comma separated")->required();
	sweep->add_option("--eps", o.eps, "sharpness radius");
	sweep->add_option("--out", o.out, "CSV file (default stdout)");
	jobs(sweep);

	CLI::App* verify = app.add_subcommand("verify", "run a verification suite or a scenario spec");
	verify->add_option("--suite", o.suite, "suite name or 'all'");
	verify->add_option("--spec", o.spec, "scenario spec JSON")->check(CLI::ExistingFile);
	seed(verify);
	verify->add_option("--out", o.out, "report file (default stdout)");
	jobs(verify);

	CLI::App* demo = app.add_subcommand("demo-reparam", "one-dimensional reparametrization demo");
	demo->add_option("--spec", o.spec, "demo spec JSON")->required()->check(CLI::ExistingFile);
	demo->add_option("--out", o.out, "curve CSV to write")->required();

	try {
		app.parse(argc, argv);
	} catch (const CLI::CallForHelp& e) {
		return app.exit(e);
	} catch (const CLI::CallForAllHelp& e) {
		return app.exit(e);
	} catch (const CLI::ParseError& e) {
		std::cerr << "flatlab: " << e.what() << "\n";
		return kExitInvalid;
	}

	try {
		if (*train)
			return cmd_train(o);
		if (*metrics)
			return cmd_metrics(o);
		if (*transform)
			return cmd_transform(o);
		if (*sweep)
			return cmd_sweep(o);
		if (*verify)
			return cmd_verify(o);
		return cmd_demo(o);
	} catch (const InvalidInput& e) {
		std::cerr << "flatlab: invalid input: " << e.what() << "\n";
		return kExitInvalid;
	} catch (const std::exception& e) {
		std::cerr << "flatlab: " << e.what() << "\n";
		return kExitInvalid;
	}
}
