#include "flatlab/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace flatlab {

namespace {

template <class... Ts>
struct overloaded : Ts... {
	using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double relative_gap(double a, double b)
{
	const double scale = std::max(std::abs(a), std::abs(b));
	return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

} // namespace

// ---------------------------------------------------------------------------
// data and training

void TrainConfig::validate() const
{
	if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
		throw InvalidInput("train: learning_rate must be finite and >= 0");
	if (epochs < 1)
		throw InvalidInput("train: epochs must be >= 1");
	if (!(stop_grad_norm >= 0.0))
		throw InvalidInput("train: stop_grad_norm must be >= 0");
	if (!(init_scale > 0.0) || !std::isfinite(init_scale))
		throw InvalidInput("train: init_scale must be finite and > 0");
}

ParamVector random_params(const Architecture& arch, SeededRng& rng, double init_scale)
{
	arch.validate();
	ParamVector theta = zero_params(arch);
	for (auto& w : theta.weights)
		for (double& x : w.data())
			x = init_scale * rng.uniform(-1.0, 1.0);
	if (theta.biases)
		for (auto& b : *theta.biases)
			for (double& x : b)
				x = init_scale * rng.uniform(-1.0, 1.0);
	return theta;
}

TeacherStudent make_teacher_student(const Architecture& arch, std::uint64_t seed, std::size_t m, double input_scale,
                                    double init_scale)
{
	arch.validate();
	if (m < 1)
		throw InvalidInput("teacher-student: m must be >= 1");
	if (!(input_scale > 0.0) || !(init_scale > 0.0))
		throw InvalidInput("teacher-student: scales must be > 0");

	constexpr int kMaxDraws = 1000;
	constexpr double kMinKinkDistance = 1e-3;
	for (int draw = 0; draw < kMaxDraws; ++draw) {
		SeededRng param_rng(seed, 2 * static_cast<std::uint64_t>(draw));
		SeededRng input_rng(seed, 2 * static_cast<std::uint64_t>(draw) + 1);
		TeacherStudent ts;
		ts.resamples = draw;
		ts.teacher = random_params(arch, param_rng, init_scale);
		ts.data.inputs.resize(m);
		ts.data.targets.resize(m);
		bool all_zero = true;
		for (std::size_t i = 0; i < m; ++i) {
			Vector x(arch.input_width());
			for (double& v : x)
				v = input_rng.uniform(-input_scale, input_scale);
			ts.data.targets[i] = forward(arch, ts.teacher, x);
			ts.data.inputs[i] = std::move(x);
			all_zero = all_zero && ts.data.targets[i] == 0.0;
		}
		if (all_zero || kink_distance(arch, ts.teacher, ts.data) < kMinKinkDistance)
			continue;
		return ts;
	}
	throw InvalidInput("teacher-student: no usable teacher in " + std::to_string(kMaxDraws) + " draws");
}

DivergenceError::DivergenceError(int epoch_)
    : std::runtime_error("training diverged at epoch " + std::to_string(epoch_)), epoch(epoch_)
{
}

TrainResult train_sgd(const Architecture& arch, const Dataset& data, LossKind kind, const TrainConfig& cfg,
                      const std::optional<ParamVector>& init)
{
	cfg.validate();
	validate_dataset(arch, data);
	ParamVector theta;
	if (init) {
		validate_params(arch, *init);
		theta = *init;
	} else {
		SeededRng rng(cfg.seed, 0x7121);
		theta = random_params(arch, rng, cfg.init_scale);
	}
	Vector flat = vec(theta);

	TrainResult res;
	double best = std::numeric_limits<double>::infinity();
	double initial = 0.0;
	for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
		const ParamVector cur = unvec(flat, arch);
		const double l = loss(arch, cur, data, kind);
		if (epoch == 0)
			initial = l;
		if (!std::isfinite(l) || (initial > 0.0 && l > 1e6 * initial))
			throw DivergenceError(epoch);
		const Vector g = gradient(arch, cur, data, kind);
		const double gn = norm2(g);
		res.trace.push_back({l, gn});
		if (l < best) {
			best = l;
			res.theta = cur;
			res.best_epoch = epoch;
		}
		if (gn <= cfg.stop_grad_norm || epoch == cfg.epochs)
			break;
		for (std::size_t i = 0; i < flat.size(); ++i)
			flat[i] -= cfg.learning_rate * g[i];
	}
	return res;
}

// ---------------------------------------------------------------------------
// scenarios

const std::vector<CheckInfo>& check_registry()
{
	static const std::vector<CheckInfo> registry = {
	    {"equivalence", 1e-9, "max relative forward deviation over the probes <= tolerance"},
	    {"loss_unchanged", 1e-9, "|L_after - L_before| / max(1, L_before) <= tolerance"},
	    {"spectral_norm_at_least", 1e3, "Hessian spectral norm after >= tolerance"},
	    {"trace_at_least", 1e3, "Hessian trace after >= tolerance"},
	    {"eps_sharpness_zero_net", 0.9,
	     "eps-sharpness after >= tolerance * (L_zero - L) / (1 + L), L_zero at the zero-first-layer point"},
	    {"eps_sharpness_not_decreased", 0.0, "eps-sharpness after >= before - tolerance"},
	    {"many_directions", 1e3,
	     "eigenvalues after above tolerance >= rank - number of coordinates scaled by less than beta"},
	    {"near_critical", 1e-6, "gradient norm before <= tolerance"},
	    {"reports_identical", 1e-9, "every numeric report field agrees within tolerance relative"},
	};
	return registry;
}

const CheckInfo* find_check(const std::string& name)
{
	for (const auto& c : check_registry())
		if (c.name == name)
			return &c;
	return nullptr;
}

void ScenarioSpec::validate() const
{
	arch.validate();
	if (dataset)
		validate_dataset(arch, *dataset);
	else if (m < 1)
		throw InvalidInput("scenario: m must be >= 1");
	if (dataset && !checkpoint && !train)
		throw InvalidInput("scenario: a dataset file needs a checkpoint or a train config");
	if (checkpoint)
		validate_params(arch, *checkpoint);
	if (train)
		train->validate();
	std::visit(overloaded{
	               [](const FixedTransform& f) { validate_transform(f.spec); },
	               [](const SharpenTransform& s) {
		               if (!(s.target > 0.0))
			               throw InvalidInput("scenario: sharpen target must be > 0");
	               },
	               [](const EpsSharpTransform& s) {
		               if (!(s.eps > 0.0))
			               throw InvalidInput("scenario: eps_sharp eps must be > 0");
	               },
	               [](const ManyDirectionsTransform& s) {
		               if (!(s.target > 0.0))
			               throw InvalidInput("scenario: many_directions target must be > 0");
	               },
	           },
	           transform);
	for (const auto& c : checks)
		if (!find_check(c.name))
			throw InvalidInput("scenario: unknown check '" + c.name + "'");
}

std::vector<Vector> probe_inputs(std::size_t input_width, std::size_t count)
{
	SeededRng rng(0x9B0BE5, 0);
	std::vector<Vector> probes(count, Vector(input_width));
	for (auto& p : probes)
		for (double& v : p)
			v = rng.uniform(-2.0, 2.0);
	return probes;
}

double forward_deviation(const Architecture& arch, const ParamVector& a, const ParamVector& b,
                         std::span<const Vector> probes_a, std::span<const Vector> probes_b)
{
	if (probes_a.size() != probes_b.size())
		throw InvalidInput("forward_deviation: probe sets differ in size");
	double worst = 0.0, scale = 0.0;
	for (std::size_t i = 0; i < probes_a.size(); ++i) {
		const double fa = forward(arch, a, probes_a[i]);
		const double fb = forward(arch, b, probes_b[i]);
		worst = std::max(worst, std::abs(fb - fa));
		scale = std::max(scale, std::abs(fa));
	}
	return scale > 0.0 ? worst / scale : worst;
}

namespace {

struct ResolvedTransform {
	TransformSpec spec;
	Vector alphas;
};

TransformSpec alpha_spec(const Architecture& arch, const Vector& alphas)
{
	if (arch.depth() == 2)
		return AlphaScaleTwoLayer{alphas[0]};
	return AlphaScaleDeep{alphas};
}

ResolvedTransform resolve_transform(const ScenarioSpec& spec, const ParamVector& theta, const Dataset& data)
{
	const Architecture& arch = spec.arch;
	return std::visit(
	    overloaded{
	        [&](const FixedTransform& f) {
		        ResolvedTransform r{f.spec, {}};
		        if (auto* s = std::get_if<AlphaScaleTwoLayer>(&f.spec))
			        r.alphas = outer_pair_alphas(2, s->alpha);
		        else if (auto* d = std::get_if<AlphaScaleDeep>(&f.spec))
			        r.alphas = d->alphas;
		        return r;
	        },
	        [&](const SharpenTransform& s) {
		        const SymmetricMatrix H = hessian(arch, theta, data, spec.kind);
		        const SharpeningResult res = sharpening_alpha(arch, H, s.target);
		        Vector alphas = outer_pair_alphas(arch.depth(), res.alpha);
		        return ResolvedTransform{alpha_spec(arch, alphas), alphas};
	        },
	        [&](const EpsSharpTransform& e) {
		        Vector alphas = outer_pair_alphas(arch.depth(), epsilon_sharp_alpha(theta, e.eps));
		        return ResolvedTransform{alpha_spec(arch, alphas), alphas};
	        },
	        [&](const ManyDirectionsTransform& md) {
		        const Vector eig = symmetric_eigenspectrum(hessian(arch, theta, data, spec.kind));
		        const double top = eig.empty() ? 0.0 : eig.front();
		        if (!(top > 0.0))
			        throw ZeroHessianError();
		        double smallest = top;
		        for (double l : eig)
			        if (l > 1e-6 * top)
				        smallest = l;
		        const double beta = 2.0 * std::sqrt(md.target / smallest);
		        Vector alphas = many_directions_alphas(arch, beta);
		        return ResolvedTransform{AlphaScaleDeep{alphas}, alphas};
	        },
	    },
	    spec.transform);
}

std::size_t hessian_rank(const Vector& eig)
{
	if (eig.empty() || !(eig.front() > 0.0))
		return 0;
	const double cut = 1e-6 * eig.front();
	return static_cast<std::size_t>(std::count_if(eig.begin(), eig.end(), [cut](double l) { return l > cut; }));
}

CheckVerdict evaluate_check(const CheckSpec& check, const ScenarioSpec& spec, const ScenarioReport& rep,
                            const ParamVector& after_theta, const Dataset& after_data)
{
	const CheckInfo& info = *find_check(check.name);
	const double tol = check.tolerance.value_or(info.default_tolerance);
	CheckVerdict v;
	v.name = check.name;
	v.threshold = tol;
	const FlatnessReport& b = rep.before;
	const FlatnessReport& a = rep.after;

	if (check.name == "equivalence") {
		v.measured = rep.equivalence.max_deviation;
		v.passed = v.measured <= tol;
	} else if (check.name == "loss_unchanged") {
		v.measured = std::abs(a.loss - b.loss) / std::max(1.0, b.loss);
		v.passed = v.measured <= tol;
	} else if (check.name == "spectral_norm_at_least" || check.name == "trace_at_least") {
		const auto& field = check.name == "trace_at_least" ? a.hessian_trace : a.hessian_spectral_norm;
		if (!field.ok()) {
			v.detail = "skipped: " + field.skipped;
			return v;
		}
		v.measured = *field.value;
		v.passed = v.measured >= tol;
	} else if (check.name == "eps_sharpness_zero_net") {
		ParamVector zero_first = after_theta;
		for (double& x : zero_first.weights[0].data())
			x = 0.0;
		const double l_zero = loss(spec.arch, zero_first, after_data, spec.kind);
		const double bound = (l_zero - a.loss) / (1.0 + a.loss);
		v.measured = a.epsilon_sharpness;
		v.threshold = tol * bound;
		v.passed = v.measured >= v.threshold;
		v.detail = "zero-first-layer bound " + format_real(bound);
	} else if (check.name == "eps_sharpness_not_decreased") {
		v.measured = a.epsilon_sharpness - b.epsilon_sharpness;
		v.threshold = -tol;
		v.passed = v.measured >= -tol;
	} else if (check.name == "many_directions") {
		if (!b.eigenvalues.ok() || !a.eigenvalues.ok()) {
			v.detail = "skipped: eigenvalues unavailable";
			return v;
		}
		if (rep.alphas.empty()) {
			v.detail = "transform is not an alpha-scaling";
			return v;
		}
		const std::size_t rank = hessian_rank(*b.eigenvalues.value);
		double beta = 0.0;
		for (double al : rep.alphas)
			beta = std::max(beta, 1.0 / al);
		const DiagonalScaling d = diagonal_scaling(spec.arch, rep.alphas);
		const auto excluded = static_cast<std::size_t>(std::count_if(
		    d.multipliers.begin(), d.multipliers.end(), [beta](double mlt) { return mlt < beta * (1.0 - 1e-9); }));
		const std::size_t required = rank > excluded ? rank - excluded : 0;
		const auto& eig = *a.eigenvalues.value;
		const auto above = std::count_if(eig.begin(), eig.end(), [tol](double l) { return l > tol; });
		v.measured = static_cast<double>(above);
		v.threshold = static_cast<double>(required);
		v.passed = static_cast<std::size_t>(above) >= required;
		v.detail = "rank " + std::to_string(rank) + ", excluded " + std::to_string(excluded);
	} else if (check.name == "near_critical") {
		v.measured = b.gradient_norm;
		v.passed = v.measured <= tol;
	} else if (check.name == "reports_identical") {
		double worst = 0.0;
		auto cmp = [&](double x, double y) { worst = std::max(worst, relative_gap(x, y)); };
		auto cmp_opt = [&](const Measured<double>& x, const Measured<double>& y) {
			if (x.ok() != y.ok())
				worst = std::numeric_limits<double>::infinity();
			else if (x.ok())
				cmp(*x.value, *y.value);
		};
		cmp(a.loss, b.loss);
		cmp(a.gradient_norm, b.gradient_norm);
		cmp(a.kink_distance, b.kink_distance);
		cmp(a.epsilon_sharpness, b.epsilon_sharpness);
		cmp_opt(a.hessian_spectral_norm, b.hessian_spectral_norm);
		cmp_opt(a.hessian_trace, b.hessian_trace);
		cmp_opt(a.second_order_sharpness, b.second_order_sharpness);
		v.measured = worst;
		v.passed = worst <= tol;
	}
	return v;
}

ScenarioReport run_scenario_impl(const ScenarioSpec& spec)
{
	const auto start = std::chrono::steady_clock::now();
	spec.validate();
	const Architecture& arch = spec.arch;

	Dataset data;
	ParamVector theta;
	if (spec.dataset) {
		data = *spec.dataset;
	} else {
		TeacherStudent ts = make_teacher_student(arch, spec.data_seed, spec.m, spec.input_scale);
		data = std::move(ts.data);
		theta = std::move(ts.teacher);
	}
	if (spec.checkpoint)
		theta = *spec.checkpoint;
	else if (spec.train)
		theta = train_sgd(arch, data, spec.kind, *spec.train).theta;

	ScenarioReport rep;
	rep.name = spec.name;
	rep.before = flatness_report(arch, theta, data, spec.kind, spec.metrics, spec.thresholds, spec.volume);

	const ResolvedTransform rt = resolve_transform(spec, theta, data);
	rep.transform_kind = transform_kind(rt.spec);
	rep.alphas = rt.alphas;
	TransformOutcome outcome = apply_transform(arch, theta, rt.spec);
	rep.flags = outcome.flags;

	// input preprocessing moves the data into the u-domain
	Dataset after_data = data;
	std::vector<Vector> probes_before = probe_inputs(arch.input_width());
	std::vector<Vector> probes_after = probes_before;
	if (auto* aff = std::get_if<InputAffine>(&rt.spec)) {
		for (auto& x : after_data.inputs)
			x = input_affine_invert(x, *aff);
		for (auto& p : probes_before)
			p = input_affine_apply(p, *aff);
	}

	rep.after = flatness_report(arch, outcome.params, after_data, spec.kind, spec.metrics, spec.thresholds, spec.volume);

	rep.equivalence.applicable = is_observational_equivalence(rt.spec);
	rep.equivalence.probes = probes_before.size();
	rep.equivalence.max_deviation = forward_deviation(arch, theta, outcome.params, probes_before, probes_after);
	rep.equivalence.passed = !rep.equivalence.applicable || rep.equivalence.max_deviation <= 1e-9;

	rep.passed = rep.equivalence.passed;
	for (const auto& c : spec.checks) {
		rep.verdicts.push_back(evaluate_check(c, spec, rep, outcome.params, after_data));
		rep.passed = rep.passed && rep.verdicts.back().passed;
	}
	rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
	return rep;
}

} // namespace

ScenarioReport run_scenario(const ScenarioSpec& spec)
{
	try {
		return run_scenario_impl(spec);
	} catch (const InvalidInput& e) {
		throw InvalidInput("scenario '" + spec.name + "': " + e.what());
	} catch (const std::exception& e) {
		throw std::runtime_error("scenario '" + spec.name + "': " + e.what());
	}
}

// ---------------------------------------------------------------------------
// alpha sweep

std::string alpha_sweep(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind,
                        std::span<const double> alphas, const SharpnessConfig& cfg)
{
	if (arch.depth() != 2)
		throw InvalidInput("alpha_sweep: requires K = 2");
	for (double a : alphas)
		if (!(a > 0.0) || !std::isfinite(a))
			throw InvalidInput("alpha_sweep: alpha values must be finite and > 0");
	VolumeParams vp;
	vp.seed = cfg.seed;
	vp.jobs = cfg.jobs;
	std::string out = std::string(kSweepCsvHeader) + "\n";
	for (double a : alphas) {
		const ParamVector t = alpha_scale_two_layer(theta, a);
		const FlatnessReport r = flatness_report(arch, t, data, kind, cfg, {}, vp);
		out += format_real(a) + "," + report_csv_row(r) + "\n";
	}
	return out;
}

// ---------------------------------------------------------------------------
// one-dimensional demo

namespace {

double dw_value(double t) { return (t * t - 1.0) * (t * t - 1.0); }
double dw_d1(double t) { return 4.0 * t * (t * t - 1.0); }
double dw_d2(double t) { return 12.0 * t * t - 4.0; }

double tw_value(double t) { return (t * t * t - t) * (t * t * t - t); }
double tw_d1(double t) { return 2.0 * (t * t * t - t) * (3.0 * t * t - 1.0); }
double tw_d2(double t)
{
	const double p = 3.0 * t * t - 1.0;
	return 2.0 * p * p + 12.0 * t * (t * t * t - t);
}

constexpr double kTwoPi = 2.0 * std::numbers::pi;
double cw_value(double t) { return 1.0 - std::cos(kTwoPi * t); }
double cw_d1(double t) { return kTwoPi * std::sin(kTwoPi * t); }
double cw_d2(double t) { return kTwoPi * kTwoPi * std::cos(kTwoPi * t); }

const std::vector<DemoLoss>& demo_registry()
{
	static const std::vector<DemoLoss> reg = {
	    {"double_well", dw_value, dw_d1, dw_d2, {-1.0, 1.0}},
	    {"triple_well", tw_value, tw_d1, tw_d2, {-1.0, 0.0, 1.0}},
	    {"cosine_wells", cw_value, cw_d1, cw_d2, {-2.0, -1.0, 0.0, 1.0, 2.0}},
	};
	return reg;
}

struct Reparam1DFns {
	std::function<double(double)> forward;   // theta -> eta
	std::function<double(double)> inverse;   // eta -> theta
	std::function<double(double)> g1;        // g'(eta)
	std::function<double(double)> g2;        // g''(eta)
	Vector kinks;                             // eta values where g is not smooth
};

Reparam1DFns reparam_functions(const Reparam1D& reparam)
{
	return std::visit(
	    overloaded{
	        [](const PowerStretch& s) {
		        validate_transform(s);
		        Reparam1DFns f;
		        f.forward = [s](double t) { return power_stretch_forward(t, s); };
		        f.inverse = [s](double e) { return power_stretch_inverse(e, s); };
		        f.g1 = [s](double e) { return 1.0 / power_stretch_derivative(power_stretch_inverse(e, s), s); };
		        f.g2 = [s](double e) {
			        const double t = power_stretch_inverse(e, s);
			        const double d = power_stretch_derivative(t, s);
			        return -power_stretch_second_derivative(t, s) / (d * d * d);
		        };
		        return f;
	        },
	        [](const Radial& s) {
		        validate_transform(s);
		        if (s.center.size() != 1)
			        throw InvalidInput("reparam_demo_1d: radial center must be one-dimensional");
		        const double c = s.center[0];
		        Reparam1DFns f;
		        f.forward = [s](double t) { return radial_forward(std::span<const double>(&t, 1), s)[0]; };
		        f.inverse = [s](double e) { return radial_inverse(std::span<const double>(&e, 1), s)[0]; };
		        f.g1 = [s, c](double e) {
			        const double t = radial_inverse(std::span<const double>(&e, 1), s)[0];
			        return 1.0 / radial_psi_derivative(std::abs(t - c), s);
		        };
		        f.g2 = [](double) { return 0.0; };
		        f.kinks = {c - s.delta, c - s.rho, c + s.rho, c + s.delta};
		        return f;
	        },
	    },
	    reparam);
}

} // namespace

const DemoLoss& demo_loss(const std::string& name)
{
	for (const auto& l : demo_registry())
		if (l.name == name)
			return l;
	throw InvalidInput("unknown demo loss '" + name + "'");
}

std::vector<std::string> demo_loss_names()
{
	std::vector<std::string> names;
	for (const auto& l : demo_registry())
		names.push_back(l.name);
	return names;
}

ReparamDemo reparam_demo_1d(const std::string& loss_name, const Reparam1D& reparam, double theta_lo, double theta_hi,
                            std::size_t grid_points)
{
	const DemoLoss& L = demo_loss(loss_name);
	if (!(theta_lo < theta_hi) || !std::isfinite(theta_lo) || !std::isfinite(theta_hi))
		throw InvalidInput("reparam_demo_1d: need finite theta_lo < theta_hi");
	if (grid_points < 5)
		throw InvalidInput("reparam_demo_1d: grid_points must be >= 5");
	const Reparam1DFns R = reparam_functions(reparam);

	auto L_eta = [&](double e) { return L.value(R.inverse(e)); };
	const double eta_lo = R.forward(theta_lo), eta_hi = R.forward(theta_hi);
	const double spacing = (eta_hi - eta_lo) / static_cast<double>(grid_points - 1);
	// steps are uniform in theta: h = 1e-4 (theta range) / g'(eta)
	const double theta_step = 1e-4 * (theta_hi - theta_lo);
	auto step_at = [&](double e) { return theta_step / std::abs(R.g1(e)); };
	auto second_difference = [&](double e) {
		const double h = step_at(e);
		return (L_eta(e + h) - 2.0 * L_eta(e) + L_eta(e - h)) / (h * h);
	};
	auto near_kink = [&](double e) {
		const double h = step_at(e);
		return std::any_of(R.kinks.begin(), R.kinks.end(), [&](double k) { return std::abs(e - k) <= 2.0 * h; });
	};

	ReparamDemo demo;
	demo.curve.reserve(grid_points);
	for (std::size_t i = 0; i < grid_points; ++i) {
		const double e = i + 1 == grid_points ? eta_hi : eta_lo + spacing * static_cast<double>(i);
		demo.curve.emplace_back(e, L_eta(e));
	}

	const auto& c = demo.curve;
	if (c[0].second < c[1].second)
		demo.notes.push_back("minimum at grid boundary eta=" + format_real(c[0].first) + " excluded");
	if (c[grid_points - 1].second < c[grid_points - 2].second)
		demo.notes.push_back("minimum at grid boundary eta=" + format_real(c[grid_points - 1].first) + " excluded");

	for (std::size_t i = 1; i + 1 < grid_points; ++i) {
		if (!(c[i].second < c[i - 1].second && c[i].second <= c[i + 1].second))
			continue;
		// refine: L' changes sign from - to + inside the bracket
		double lo = R.inverse(c[i - 1].first), hi = R.inverse(c[i + 1].first);
		if (!(L.d1(lo) < 0.0 && L.d1(hi) > 0.0)) {
			demo.notes.push_back("grid minimum near eta=" + format_real(c[i].first) + " not bracketed; skipped");
			continue;
		}
		for (int it = 0; it < 200; ++it) {
			const double mid = 0.5 * (lo + hi);
			if (mid <= lo || mid >= hi)
				break;
			(L.d1(mid) < 0.0 ? lo : hi) = mid;
		}
		CurvatureRow row;
		row.theta = std::abs(L.d1(lo)) <= std::abs(L.d1(hi)) ? lo : hi;
		row.eta = R.forward(row.theta);
		if (near_kink(row.eta)) {
			demo.notes.push_back("minimum at eta=" + format_real(row.eta) + " sits on a kink of g; skipped");
			continue;
		}
		const double g1 = R.g1(row.eta);
		row.predicted = g1 * g1 * L.d2(row.theta);
		row.measured = second_difference(row.eta);
		row.rel_error = relative_gap(row.measured, row.predicted);
		demo.max_minimum_error = std::max(demo.max_minimum_error, row.rel_error);
		demo.minima.push_back(row);
	}

	// full formula at evenly spread non-critical grid points
	constexpr std::size_t kFullChecks = 16;
	double max_slope = 0.0;
	for (const auto& [e, _] : c)
		max_slope = std::max(max_slope, std::abs(L.d1(R.inverse(e))));
	for (std::size_t k = 1; k <= kFullChecks; ++k) {
		const std::size_t i = k * (grid_points - 1) / (kFullChecks + 1);
		const double e = c[i].first;
		const double t = R.inverse(e);
		if (near_kink(e) || std::abs(L.d1(t)) <= 1e-3 * max_slope)
			continue;
		const double g1 = R.g1(e), g2 = R.g2(e);
		const double curv = g1 * g1 * L.d2(t), slope = L.d1(t) * g2;
		FullFormulaRow row;
		row.eta = e;
		row.predicted = curv + slope;
		row.measured = second_difference(e);
		const double scale = std::max({std::abs(row.predicted), std::abs(curv), std::abs(slope)});
		row.rel_error = scale == 0.0 ? std::abs(row.measured) : std::abs(row.measured - row.predicted) / scale;
		demo.max_full_error = std::max(demo.max_full_error, row.rel_error);
		demo.noncritical.push_back(row);
	}

	demo.passed = !demo.minima.empty() && demo.max_minimum_error <= 1e-3 && demo.max_full_error <= 1e-3;
	return demo;
}

std::string demo_curve_csv(const ReparamDemo& demo)
{
	std::string out = "eta,loss\n";
	for (const auto& [e, l] : demo.curve)
		out += format_real(e) + "," + format_real(l) + "\n";
	return out;
}

// ---------------------------------------------------------------------------
// verification suites

bool SuiteResult::passed() const
{
	return std::all_of(checks.begin(), checks.end(), [](const SuiteCheck& c) { return c.passed; });
}

const std::vector<std::string>& suite_names()
{
	static const std::vector<std::string> names = {"equivalence",   "derivatives",    "sharpest",
	                                               "many_directions", "volume",       "eps_sharpness",
	                                               "gradient_slope", "radial",        "congruence"};
	return names;
}

namespace {

// Product-one factors, log-uniform in [1/spread, spread] before normalization.
Vector random_alphas(SeededRng& rng, std::size_t depth, double spread)
{
	Vector a(depth);
	double log_sum = 0.0;
	for (std::size_t k = 0; k + 1 < depth; ++k) {
		const double l = rng.uniform(-std::log(spread), std::log(spread));
		a[k] = std::exp(l);
		log_sum += l;
	}
	a[depth - 1] = std::exp(-log_sum);
	return a;
}

std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t tag, std::size_t trial)
{
	return SeededRng(seed, tag).substream(trial).next_u64();
}

SuiteCheck make_check(std::string name, double threshold, std::size_t trials)
{
	SuiteCheck c;
	c.name = std::move(name);
	c.threshold = threshold;
	c.trials = trials;
	return c;
}

std::vector<SuiteCheck> suite_equivalence(std::uint64_t seed)
{
	constexpr std::size_t kTrials = 1000;
	SuiteCheck chk = make_check("forward_deviation", 1e-9, kTrials);
	const SeededRng root(seed, 0xE001);
	const char* names[] = {"two-layer", "deep", "bias-aware", "weight-norm"};
	double worst_by_kind[4] = {0, 0, 0, 0};
	for (std::size_t t = 0; t < kTrials; ++t) {
		SeededRng rng = root.substream(t);
		const std::size_t kind = t % 4;
		const std::size_t depth = kind == 0 ? 2 : 2 + rng.next_u64() % 3;
		Architecture arch;
		arch.use_bias = kind >= 2 && rng.uniform() < (kind == 2 ? 1.0 : 0.5);
		arch.layer_widths.push_back(1 + rng.next_u64() % 4);
		for (std::size_t k = 1; k < depth; ++k)
			arch.layer_widths.push_back(1 + rng.next_u64() % 8);
		arch.layer_widths.push_back(1);
		const ParamVector theta = random_params(arch, rng);
		Vector x(arch.input_width());
		for (double& v : x)
			v = rng.uniform(-2.0, 2.0);

		ParamVector moved;
		if (kind == 0) {
			moved = alpha_scale_two_layer(theta, std::exp(rng.uniform(-std::log(1e3), std::log(1e3))));
		} else if (kind == 1) {
			moved = alpha_scale_deep(theta, random_alphas(rng, depth, 1e2));
		} else if (kind == 2) {
			moved = alpha_scale_with_bias(theta, random_alphas(rng, depth, 1e2));
		} else {
			const std::size_t layer = rng.next_u64() % depth;
			const double a = std::exp(rng.uniform(-std::log(1e3), std::log(1e3)));
			moved = weight_norm_realize(weight_norm_scale(weight_norm_decompose(theta), layer, a));
		}
		const double f = forward(arch, theta, x), g = forward(arch, moved, x);
		const double dev = f == g ? 0.0 : std::abs(g - f) / std::max(std::abs(f), std::numeric_limits<double>::min());
		worst_by_kind[kind] = std::max(worst_by_kind[kind], dev);
		chk.measured = std::max(chk.measured, dev);
	}
	chk.passed = chk.measured <= chk.threshold;
	for (int k = 0; k < 4; ++k)
		chk.detail += std::string(k ? ", " : "") + names[k] + " " + format_real(worst_by_kind[k]);
	return {chk};
}

std::vector<SuiteCheck> suite_derivatives(std::uint64_t seed)
{
	constexpr std::size_t kPoints = 100;
	SuiteCheck gchk = make_check("gradient_law", 1e-8, kPoints);
	SuiteCheck hchk = make_check("hessian_law", 1e-4, kPoints);
	const std::vector<Architecture> archs = {
	    {{2, 4, 1}, false}, {{3, 4, 4, 1}, false}, {{2, 3, 1}, true}, {{2, 3, 3, 1}, true}};
	const SeededRng root(seed, 0xD001);
	std::size_t rejected = 0;
	std::size_t attempt = 0;
	for (std::size_t p = 0; p < kPoints; ++attempt) {
		if (attempt > 20 * kPoints)
			throw std::runtime_error("derivatives suite: too few smooth points");
		SeededRng rng = root.substream(attempt);
		const Architecture& arch = archs[p % archs.size()];
		const TeacherStudent ts = make_teacher_student(arch, rng.next_u64(), 16);
		const ParamVector theta = random_params(arch, rng);
		const Vector alphas = random_alphas(rng, arch.depth(), 10.0);
		const ParamVector moved = arch.use_bias ? alpha_scale_with_bias(theta, alphas) : alpha_scale_deep(theta, alphas);
		SymmetricMatrix H, H_moved;
		try {
			H = hessian(arch, theta, ts.data);
			H_moved = hessian(arch, moved, ts.data);
		} catch (const KinkProximityError&) {
			++rejected;
			continue;
		}
		const DiagonalScaling d = diagonal_scaling(arch, alphas);
		const Vector pg = predicted_gradient(gradient(arch, theta, ts.data), d);
		const Vector ag = gradient(arch, moved, ts.data);
		const double gerr = norm2(axpy(pg, -1.0, ag)) / norm2(ag);
		const SymmetricMatrix ph = predicted_hessian(H, d);
		DenseMatrix diff = ph.dense();
		for (std::size_t i = 0; i < diff.size(); ++i)
			diff.data()[i] -= H_moved.dense().data()[i];
		const double herr = frobenius_norm(diff) / frobenius_norm(H_moved.dense());
		gchk.measured = std::max(gchk.measured, gerr);
		hchk.measured = std::max(hchk.measured, herr);
		++p;
	}
	gchk.passed = gchk.measured <= gchk.threshold;
	hchk.passed = hchk.measured <= hchk.threshold;
	hchk.detail = std::to_string(rejected) + " points rejected near kinks";
	return {gchk, hchk};
}

std::vector<SuiteCheck> suite_sharpest(std::uint64_t seed)
{
	constexpr std::size_t kMinima = 20;
	const Architecture arch{{2, 8, 1}, false};
	const Vector targets = {1e3, 1e6};
	std::vector<SuiteCheck> checks;
	for (double M : targets)
		checks.push_back(make_check("spectral_norm_at_least_" + format_real(M), M, kMinima));
	SuiteCheck eq = make_check("predictions_unchanged", 1e-9, kMinima * targets.size());
	for (auto& c : checks)
		c.measured = std::numeric_limits<double>::infinity();
	const auto probes = probe_inputs(arch.input_width());
	double worst_alpha = 1.0;
	for (std::size_t i = 0; i < kMinima; ++i) {
		const TeacherStudent ts = make_teacher_student(arch, trial_seed(seed, 0x5001, i), 64);
		const SymmetricMatrix H = hessian(arch, ts.teacher, ts.data);
		for (std::size_t j = 0; j < targets.size(); ++j) {
			const SharpeningResult sr = sharpening_alpha(arch, H, targets[j]);
			worst_alpha = std::min(worst_alpha, sr.alpha);
			const ParamVector moved = alpha_scale_two_layer(ts.teacher, sr.alpha);
			const double norm = hessian_measures(hessian(arch, moved, ts.data), {}).spectral_norm;
			checks[j].measured = std::min(checks[j].measured, norm);
			eq.measured = std::max(eq.measured, forward_deviation(arch, ts.teacher, moved, probes, probes));
		}
	}
	for (auto& c : checks) {
		c.passed = c.measured >= c.threshold;
		c.detail = "minimum over minima of the measured spectral norm";
	}
	eq.passed = eq.measured <= eq.threshold;
	eq.detail = "smallest alpha " + format_real(worst_alpha);
	checks.push_back(eq);
	return checks;
}

std::vector<SuiteCheck> suite_many_directions(std::uint64_t seed)
{
	constexpr std::size_t kPoints = 5;
	constexpr double M = 1e3;
	const Architecture arch{{3, 4, 4, 1}, false};
	SuiteCheck crit = make_check("near_critical", 1e-6, kPoints);
	SuiteCheck many = make_check("eigenvalues_above_M_minus_required", 0.0, kPoints);
	// same count against rank - min_k n_k, the smallest layer width
	SuiteCheck widths = make_check("eigenvalues_above_M_minus_rank_less_min_width", 0.0, kPoints);
	many.measured = widths.measured = std::numeric_limits<double>::infinity();
	const std::size_t min_width = *std::min_element(arch.layer_widths.begin(), arch.layer_widths.end());
	const FlatIndex idx(arch);
	std::size_t min_block = idx.weight_size(0);
	for (std::size_t k = 1; k < idx.depth(); ++k)
		min_block = std::min(min_block, idx.weight_size(k));
	for (std::size_t i = 0; i < kPoints; ++i) {
		const TeacherStudent ts = make_teacher_student(arch, trial_seed(seed, 0x8001, i), 64);
		crit.measured = std::max(crit.measured, norm2(gradient(arch, ts.teacher, ts.data)));
		const Vector eig = symmetric_eigenspectrum(hessian(arch, ts.teacher, ts.data));
		const std::size_t rank = hessian_rank(eig);
		const double beta = 2.0 * std::sqrt(M / eig[rank - 1]);
		const ParamVector moved = alpha_scale_deep(ts.teacher, many_directions_alphas(arch, beta));
		const Vector eig_after = symmetric_eigenspectrum(hessian(arch, moved, ts.data));
		const auto above = std::count_if(eig_after.begin(), eig_after.end(), [](double l) { return l > M; });
		const double required = static_cast<double>(rank) - static_cast<double>(min_block);
		many.measured = std::min(many.measured, static_cast<double>(above) - required);
		const double required_by_width = static_cast<double>(rank) - static_cast<double>(min_width);
		widths.measured = std::min(widths.measured, static_cast<double>(above) - required_by_width);
		many.detail += (i ? "; " : "") + std::string("rank ") + std::to_string(rank) + " above " +
		               std::to_string(above) + " required " + format_real(required);
	}
	crit.passed = crit.measured <= crit.threshold;
	many.passed = many.measured >= many.threshold;
	widths.passed = widths.measured >= widths.threshold;
	return {crit, many, widths};
}

std::vector<SuiteCheck> suite_volume(std::uint64_t seed, int jobs)
{
	const std::vector<Architecture> archs = {{{2, 4, 1}, false}, {{1, 4, 1}, false}, {{2, 3, 1}, true}};
	constexpr std::size_t kPerArch = 3;
	SuiteCheck valid = make_check("certificate_valid", 1.0, archs.size() * kPerArch);
	SuiteCheck mono = make_check("lower_bound_strictly_increasing", 1.0, archs.size() * kPerArch);
	SuiteCheck equal = make_check("equal_blocks_constant_volume", 0.0, kPerArch);
	valid.measured = mono.measured = 1.0;
	for (std::size_t a = 0; a < archs.size(); ++a)
		for (std::size_t i = 0; i < kPerArch; ++i) {
			const Architecture& arch = archs[a];
			const TeacherStudent ts = make_teacher_student(arch, trial_seed(seed, 0x4001 + a, i), 64);
			VolumeParams vp;
			vp.eps = 1e-2;
			vp.boxes = 20;
			vp.seed = trial_seed(seed, 0x4101 + a, i);
			vp.jobs = jobs;
			const VolumeCertificate cert = volume_flatness_certificate(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, vp);
			if (!cert.valid || !cert.disjointness_verified)
				valid.measured = 0.0;
			double partial = 0.0;
			for (double v : cert.box_volumes) {
				const double next = partial + v;
				if (!(next > partial))
					mono.measured = 0.0;
				partial = next;
			}
			if (arch.layer_widths == std::vector<std::size_t>{1, 4, 1}) {
				for (double v : cert.box_volumes)
					equal.measured = std::max(equal.measured, std::abs(v - cert.per_box_volume) / cert.per_box_volume);
			}
		}
	valid.passed = valid.measured >= 1.0;
	mono.passed = mono.measured >= 1.0;
	equal.passed = equal.measured <= equal.threshold;
	return {valid, mono, equal};
}

std::vector<SuiteCheck> suite_eps_sharpness(std::uint64_t seed, int jobs)
{
	constexpr std::size_t kSeeds = 20;
	constexpr double kEps = 1e-2;
	const std::vector<Architecture> archs = {{{2, 4, 1}, false}, {{2, 8, 1}, false}, {{3, 4, 4, 1}, false}};
	SuiteCheck bound = make_check("ratio_to_zero_net_bound", 0.9, kSeeds * archs.size());
	SuiteCheck grew = make_check("not_decreased", 0.0, kSeeds * archs.size());
	bound.measured = std::numeric_limits<double>::infinity();
	grew.measured = std::numeric_limits<double>::infinity();
	for (std::size_t a = 0; a < archs.size(); ++a)
		for (std::size_t i = 0; i < kSeeds; ++i) {
			const Architecture& arch = archs[a];
			const TeacherStudent ts = make_teacher_student(arch, trial_seed(seed, 0x6001 + a, i), 64);
			SharpnessConfig cfg;
			cfg.eps = kEps;
			cfg.seed = trial_seed(seed, 0x6101 + a, i);
			cfg.jobs = jobs;
			const double before = epsilon_sharpness(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, cfg).value;
			const Vector alphas = outer_pair_alphas(arch.depth(), epsilon_sharp_alpha(ts.teacher, kEps));
			const ParamVector moved = alpha_scale_deep(ts.teacher, alphas);
			const double after = epsilon_sharpness(arch, moved, ts.data, LossKind::MeanSquaredError, cfg).value;
			ParamVector zero_first = moved;
			for (double& x : zero_first.weights[0].data())
				x = 0.0;
			const double l = loss(arch, moved, ts.data);
			const double zb = (loss(arch, zero_first, ts.data) - l) / (1.0 + l);
			bound.measured = std::min(bound.measured, after / zb);
			grew.measured = std::min(grew.measured, after - before);
		}
	bound.passed = bound.measured >= bound.threshold;
	grew.passed = grew.measured >= grew.threshold;
	bound.detail = "minimum of eps-sharpness after over the zero-first-layer bound";
	return {bound, grew};
}

std::vector<SuiteCheck> suite_gradient_slope(std::uint64_t seed)
{
	const Architecture arch{{2, 8, 1}, false};
	SuiteCheck slope = make_check("loglog_slope_error", 0.05, 1);
	const TeacherStudent ts = make_teacher_student(arch, trial_seed(seed, 0x7001, 0), 64);
	SeededRng rng(seed, 0x7002);
	const ParamVector theta = random_params(arch, rng);
	const FlatIndex idx(arch);
	const Vector g = gradient(arch, theta, ts.data);
	const double g1 = norm2(std::span<const double>(g).subspan(idx.weight_offset(0), idx.weight_size(0)));
	if (!(g1 > 0.0))
		throw std::runtime_error("gradient_slope suite: first-layer gradient vanishes");
	const Vector alphas = {1.0, 1e-1, 1e-2, 1e-3, 1e-4};
	Vector xs, ys;
	for (double a : alphas) {
		xs.push_back(std::log10(a));
		ys.push_back(std::log10(norm2(gradient(arch, alpha_scale_two_layer(theta, a), ts.data))));
	}
	const double n = static_cast<double>(xs.size());
	double mx = 0.0, my = 0.0;
	for (std::size_t i = 0; i < xs.size(); ++i) {
		mx += xs[i] / n;
		my += ys[i] / n;
	}
	double sxy = 0.0, sxx = 0.0;
	for (std::size_t i = 0; i < xs.size(); ++i) {
		sxy += (xs[i] - mx) * (ys[i] - my);
		sxx += (xs[i] - mx) * (xs[i] - mx);
	}
	const double fitted = sxy / sxx;
	slope.measured = std::abs(fitted + 1.0);
	slope.passed = slope.measured <= slope.threshold;
	slope.detail = "fitted slope " + format_real(fitted);
	return {slope};
}

std::vector<SuiteCheck> suite_radial(std::uint64_t seed)
{
	constexpr std::size_t kPerRegion = 500;
	SuiteCheck trip = make_check("round_trip", 1e-10, 3 * kPerRegion);
	SuiteCheck jac = make_check("jacobian_vs_finite_difference", 1e-5, 3 * kPerRegion);
	SuiteCheck ident = make_check("identity_outside_ball", 0.0, kPerRegion);
	const SeededRng root(seed, 0xA001);
	for (std::size_t region = 0; region < 3; ++region)
		for (std::size_t t = 0; t < kPerRegion; ++t) {
			SeededRng rng = root.substream(region * kPerRegion + t);
			const std::size_t n = 1 + rng.next_u64() % 5;
			Radial spec;
			spec.center.resize(n);
			for (double& c : spec.center)
				c = rng.uniform(-1.0, 1.0);
			spec.delta = rng.uniform(0.5, 2.0);
			spec.r_hat = spec.delta * rng.uniform(0.1, 0.9);
			spec.rho = spec.delta * rng.uniform(0.1, 0.9);

			// radius away from segment boundaries by at least 1% of delta
			double r;
			if (region == 0)
				r = rng.uniform(0.0, spec.r_hat - 0.01 * spec.delta);
			else if (region == 1)
				r = rng.uniform(spec.r_hat + 0.01 * spec.delta, 0.99 * spec.delta);
			else
				r = spec.delta * rng.uniform(1.01, 3.0);
			Vector dir(n);
			for (double& d : dir)
				d = rng.normal();
			const double nd = norm2(dir);
			Vector theta(n);
			for (std::size_t i = 0; i < n; ++i)
				theta[i] = spec.center[i] + r * dir[i] / nd;

			const Vector eta = radial_forward(theta, spec);
			const Vector back = radial_inverse(eta, spec);
			for (std::size_t i = 0; i < n; ++i)
				trip.measured = std::max(trip.measured, std::abs(back[i] - theta[i]));

			const DenseMatrix J = radial_jacobian(theta, spec);
			constexpr double h = 1e-6;
			for (std::size_t j = 0; j < n; ++j) {
				Vector p = theta, m = theta;
				p[j] += h;
				m[j] -= h;
				const Vector fp = radial_forward(p, spec), fm = radial_forward(m, spec);
				for (std::size_t i = 0; i < n; ++i) {
					const double fd = (fp[i] - fm[i]) / (2.0 * h);
					jac.measured = std::max(jac.measured, std::abs(fd - J(i, j)) / std::max(1.0, std::abs(J(i, j))));
				}
			}
			if (region == 2 && eta != theta)
				ident.measured += 1.0;
		}
	trip.passed = trip.measured <= trip.threshold;
	jac.passed = jac.measured <= jac.threshold;
	ident.passed = ident.measured <= ident.threshold;
	ident.detail = "count of outside points not mapped to themselves exactly";
	return {trip, jac, ident};
}

std::vector<SuiteCheck> suite_congruence()
{
	SuiteCheck at_min = make_check("curvature_at_minima", 1e-3, 0);
	SuiteCheck full = make_check("full_formula_noncritical", 1e-3, 0);
	std::vector<std::pair<std::string, Reparam1D>> reparams = {
	    {"identity", PowerStretch{0.0, 0.0, 0.0}},
	    {"stretch at minimum", PowerStretch{1.0, 1.0, 0.25}},
	    {"stretch off minimum", PowerStretch{0.3, 0.5, 0.1}},
	    {"compress", PowerStretch{-1.0, -0.25, 0.5}},
	    {"radial at minimum", Radial{{1.0}, 0.6, 0.1, 0.3}},
	};
	std::size_t without_minima = 0;
	for (const auto& name : demo_loss_names())
		for (const auto& [label, rp] : reparams) {
			const ReparamDemo d = reparam_demo_1d(name, rp, -1.6, 1.6, 2001);
			at_min.trials += d.minima.size();
			full.trials += d.noncritical.size();
			if (d.minima.empty())
				++without_minima;
			at_min.measured = std::max(at_min.measured, d.max_minimum_error);
			full.measured = std::max(full.measured, d.max_full_error);
		}
	at_min.passed = at_min.measured <= at_min.threshold && without_minima == 0;
	full.passed = full.measured <= full.threshold && full.trials > 0;
	if (without_minima)
		at_min.detail = std::to_string(without_minima) + " runs located no interior minimum";
	return {at_min, full};
}

} // namespace

SuiteResult run_suite(const std::string& suite, std::uint64_t seed, int jobs)
{
	if (jobs < 1)
		throw InvalidInput("--jobs must be >= 1");
	SuiteResult res;
	res.suite = suite;
	res.seed = seed;
	std::vector<std::string> todo;
	if (suite == "all")
		todo = suite_names();
	else if (std::find(suite_names().begin(), suite_names().end(), suite) != suite_names().end())
		todo = {suite};
	else
		throw InvalidInput("unknown suite '" + suite + "'");

	for (const auto& s : todo) {
		std::vector<SuiteCheck> checks;
		if (s == "equivalence")
			checks = suite_equivalence(seed);
		else if (s == "derivatives")
			checks = suite_derivatives(seed);
		else if (s == "sharpest")
			checks = suite_sharpest(seed);
		else if (s == "many_directions")
			checks = suite_many_directions(seed);
		else if (s == "volume")
			checks = suite_volume(seed, jobs);
		else if (s == "eps_sharpness")
			checks = suite_eps_sharpness(seed, jobs);
		else if (s == "gradient_slope")
			checks = suite_gradient_slope(seed);
		else if (s == "radial")
			checks = suite_radial(seed);
		else
			checks = suite_congruence();
		for (auto& c : checks) {
			c.name = s + "." + c.name;
			res.checks.push_back(std::move(c));
		}
	}
	return res;
}

} // namespace flatlab
