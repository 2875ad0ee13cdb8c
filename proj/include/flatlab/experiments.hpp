#pragma once

#include "flatlab/metrics.hpp"
#include "flatlab/transforms.hpp"

#include <optional>
#include <string>
#include <variant>

namespace flatlab {

// ---------------------------------------------------------------------------
// data and training

struct TrainConfig {
	double learning_rate = 0.05;
	int epochs = 5000;
	std::uint64_t seed = 0;
	double stop_grad_norm = 1e-8;
	double init_scale = 1.0;

	void validate() const;
};

struct TeacherStudent {
	Dataset data;
	ParamVector teacher;
	int resamples = 0;  // rejected teacher draws
};

/// Teacher entries uniform(-1, 1) * init_scale, inputs uniform(-input_scale,
/// input_scale). A draw is rejected when all outputs are zero or when some
/// hidden preactivation lies within 1e-3 of zero.
TeacherStudent make_teacher_student(const Architecture& arch, std::uint64_t seed, std::size_t m,
                                    double input_scale = 1.0, double init_scale = 1.0);

/// Entries uniform(-init_scale, init_scale) from the given stream.
ParamVector random_params(const Architecture& arch, SeededRng& rng, double init_scale = 1.0);

struct TrainEpoch {
	double loss = 0.0;
	double gradient_norm = 0.0;
};

struct TrainResult {
	ParamVector theta;  // lowest-loss iterate
	std::vector<TrainEpoch> trace;
	int best_epoch = 0;
};

class DivergenceError : public std::runtime_error {
public:
	explicit DivergenceError(int epoch);
	int epoch;
};

/// Full-batch gradient descent from `init`, or from random_params(cfg.seed)
/// when absent.
TrainResult train_sgd(const Architecture& arch, const Dataset& data, LossKind kind, const TrainConfig& cfg,
                      const std::optional<ParamVector>& init = std::nullopt);

// ---------------------------------------------------------------------------
// scenarios

/// How the scenario obtains its transformation.
struct FixedTransform {
	TransformSpec spec;
};
/// alpha from sharpening_alpha with target spectral norm M.
struct SharpenTransform {
	double target = 1e3;
};
/// alpha = eps / ||theta1||_2 on the outer layer pair.
struct EpsSharpTransform {
	double eps = 1e-2;
};
/// many_directions_alphas with beta = 2 sqrt(M / lambda_r).
struct ManyDirectionsTransform {
	double target = 1e3;
};

using TransformRule = std::variant<FixedTransform, SharpenTransform, EpsSharpTransform, ManyDirectionsTransform>;

/// A named check; the tolerance falls back to the registry default.
struct CheckSpec {
	std::string name;
	std::optional<double> tolerance;
};

struct CheckInfo {
	std::string name;
	double default_tolerance;
	std::string meaning;
};

const std::vector<CheckInfo>& check_registry();
const CheckInfo* find_check(const std::string& name);

struct ScenarioSpec {
	std::string name = "scenario";
	Architecture arch;
	LossKind kind = LossKind::MeanSquaredError;

	// data: teacher-student when `dataset` is empty
	std::optional<Dataset> dataset;
	std::uint64_t data_seed = 0;
	std::size_t m = 64;
	double input_scale = 1.0;

	// parameters: checkpoint, else trained, else the teacher
	std::optional<ParamVector> checkpoint;
	std::optional<TrainConfig> train;

	TransformRule transform = FixedTransform{AlphaScaleTwoLayer{1.0}};
	SharpnessConfig metrics;
	Vector thresholds;
	std::optional<VolumeParams> volume;
	std::vector<CheckSpec> checks;

	void validate() const;
};

struct CheckVerdict {
	std::string name;
	bool passed = false;
	double measured = 0.0;
	double threshold = 0.0;
	std::string detail;
};

struct EquivalenceCheck {
	bool applicable = false;  // true for observational-equivalence transforms
	std::size_t probes = 0;
	double max_deviation = 0.0;  // max |f'(x) - f(x)| / max_x |f(x)|
	bool passed = true;
};

struct ScenarioReport {
	std::string name;
	std::string transform_kind;
	Vector alphas;                  // empty for non-scaling transforms
	std::vector<std::string> flags;  // from apply_transform
	FlatnessReport before;
	FlatnessReport after;
	EquivalenceCheck equivalence;
	std::vector<CheckVerdict> verdicts;
	bool passed = false;
	double runtime_seconds = 0.0;  // not serialized
};

/// Errors from components are rethrown with the scenario name attached.
ScenarioReport run_scenario(const ScenarioSpec& spec);

/// Uniform [-2, 2]^n0 probes from a fixed stream.
std::vector<Vector> probe_inputs(std::size_t input_width, std::size_t count = 256);

/// max |f_b(x) - f_a(x)| / max |f_a(x)| over the probes (absolute when f_a vanishes).
double forward_deviation(const Architecture& arch, const ParamVector& a, const ParamVector& b,
                         std::span<const Vector> probes_a, std::span<const Vector> probes_b);

// ---------------------------------------------------------------------------
// alpha sweep

inline constexpr const char* kSweepCsvHeader = "alpha,loss,grad_norm,kink_dist,spec_norm,trace,eps_sharp,sharp_2nd,vol_lb";

/// One CSV line per alpha (header included) for T_alpha(theta) with K = 2.
std::string alpha_sweep(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind,
                        std::span<const double> alphas, const SharpnessConfig& cfg);

// ---------------------------------------------------------------------------
// one-dimensional reparametrization demo

struct DemoLoss {
	std::string name;
	double (*value)(double);
	double (*d1)(double);
	double (*d2)(double);
	std::vector<double> minima;
};

/// Names: double_well, triple_well, cosine_wells.
const DemoLoss& demo_loss(const std::string& name);
std::vector<std::string> demo_loss_names();

/// eta = forward(theta); g = inverse.
using Reparam1D = std::variant<PowerStretch, Radial>;

struct CurvatureRow {
	double theta = 0.0;
	double eta = 0.0;
	double measured = 0.0;   // second difference of L o g at eta
	double predicted = 0.0;  // g'(eta)^2 L''(g(eta))
	double rel_error = 0.0;
};

struct FullFormulaRow {
	double eta = 0.0;
	double measured = 0.0;
	double predicted = 0.0;  // g'^2 L'' + L' g''
	double rel_error = 0.0;
};

struct ReparamDemo {
	std::vector<std::pair<double, double>> curve;  // (eta, L(g(eta)))
	std::vector<CurvatureRow> minima;
	std::vector<FullFormulaRow> noncritical;
	std::vector<std::string> notes;
	double max_minimum_error = 0.0;
	double max_full_error = 0.0;
	bool passed = false;  // both errors <= 1e-3
};

/// The eta grid spans [forward(theta_lo), forward(theta_hi)] with grid_points samples.
ReparamDemo reparam_demo_1d(const std::string& loss_name, const Reparam1D& reparam, double theta_lo, double theta_hi,
                            std::size_t grid_points);

std::string demo_curve_csv(const ReparamDemo& demo);

// ---------------------------------------------------------------------------
// verification suites

struct SuiteCheck {
	std::string name;
	bool passed = false;
	double measured = 0.0;   // worst case over trials
	double threshold = 0.0;
	std::size_t trials = 0;
	std::string detail;
};

struct SuiteResult {
	std::string suite;
	std::uint64_t seed = 0;
	std::vector<SuiteCheck> checks;
	bool passed() const;
};

/// equivalence, derivatives, sharpest, many_directions, volume, eps_sharpness,
/// gradient_slope, radial, congruence; "all" runs every one in that order.
const std::vector<std::string>& suite_names();
SuiteResult run_suite(const std::string& suite, std::uint64_t seed, int jobs = 1);

} // namespace flatlab
