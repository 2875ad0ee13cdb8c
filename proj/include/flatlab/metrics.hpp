#pragma once

#include "flatlab/net.hpp"

#include <optional>
#include <string>

namespace flatlab {

struct SharpnessConfig {
	double eps = 1e-2;
	int restarts = 8;
	int steps = 100;
	double step_size = 0.1;   // ascent step as a fraction of eps
	std::optional<std::size_t> subspace_dim;
	std::uint64_t seed = 0;
	int jobs = 1;

	void validate(std::size_t dim) const;
};

/// A differentiable scalar objective over flat parameters.
struct Objective {
	std::function<double(std::span<const double>)> value;
	std::function<Vector(std::span<const double>)> gradient;
};

Objective network_objective(const Architecture& arch, const Dataset& data, LossKind kind = LossKind::MeanSquaredError);

/// Best ascent value found; a lower bound on the true maximum.
struct SharpnessResult {
	double value = 0.0;
	Vector argmax_offset;
	int discarded_restarts = 0;
};

/// max over |offset| <= eps of (L(theta + offset) - L(theta)) / (1 + L(theta)),
/// estimated by projected gradient ascent from the +gradient direction and
/// cfg.restarts random starts.
SharpnessResult epsilon_sharpness(const Objective& objective, std::span<const double> theta, const SharpnessConfig& cfg);
SharpnessResult epsilon_sharpness(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                                  LossKind kind, const SharpnessConfig& cfg);

/// ||H||_2 eps^2 / (2 (1 + L))
double second_order_sharpness(double hessian_norm, double eps, double loss_value);

struct HessianMeasures {
	double spectral_norm = 0.0;
	double trace = 0.0;
	Vector eigenvalues;  // descending
	std::vector<std::size_t> counts_above;  // strictly greater than each threshold
};

HessianMeasures hessian_measures(const SymmetricMatrix& H, std::span<const double> thresholds);

struct VolumeCertificate {
	double r = 0.0;
	double per_box_volume = 0.0;  // (2r)^n of the base box
	double alpha = 1.0;           // scale between consecutive boxes
	std::size_t boxes_checked = 0;
	Vector box_volumes;
	Vector max_loss_deviation;    // per box
	bool disjointness_verified = false;
	double volume_lower_bound = 0.0;
	bool valid = false;
	std::optional<std::size_t> failed_box;
	int r_shrinks = 0;
};

struct VolumeParams {
	double eps = 1e-2;
	double r = 1e-3;
	std::size_t boxes = 20;
	std::size_t samples_per_box = 64;
	std::uint64_t seed = 0;
	int jobs = 1;
};

/// Constructive lower bound on the volume of the eps-sublevel region around
/// theta for K = 2: the box B_inf(r, theta) and its images under T_alpha^k,
/// which are pairwise disjoint and lie in the same region. alpha is replaced
/// by 1/alpha when that is the volume-growing direction.
VolumeCertificate volume_flatness_certificate(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                                              LossKind kind, const VolumeParams& params);

struct MonteCarloFraction {
	double fraction = 0.0;
	double stderr_ = 0.0;
};

/// Fraction of the box [lower, upper] where L < L(theta) + eps. Connectivity
/// of the sublevel set is not checked.
MonteCarloFraction sublevel_volume_mc(const Objective& objective, std::span<const double> theta, double eps,
                                      std::span<const double> lower, std::span<const double> upper,
                                      std::size_t samples, std::uint64_t seed, int jobs = 1);

/// A report field that was either computed or skipped for a stated reason.
template <typename T>
struct Measured {
	std::optional<T> value;
	std::string skipped;

	static Measured skip(std::string why) { return {std::nullopt, std::move(why)}; }
	bool ok() const { return value.has_value(); }
};

struct FlatnessReport {
	double loss = 0.0;
	double gradient_norm = 0.0;
	double kink_distance = 0.0;
	Measured<double> hessian_spectral_norm;
	Measured<double> hessian_trace;
	Measured<Vector> eigenvalues;
	Vector thresholds;
	Measured<std::vector<std::size_t>> eigencount_above;
	double epsilon_sharpness = 0.0;  // lower bound
	Vector epsilon_sharpness_offset;
	Measured<double> second_order_sharpness;
	Measured<VolumeCertificate> volume_certificate;
};

FlatnessReport flatness_report(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind,
                               const SharpnessConfig& cfg, std::span<const double> thresholds,
                               const std::optional<VolumeParams>& volume);

/// CSV columns for one parameter point.
inline constexpr const char* kReportCsvHeader = "loss,grad_norm,kink_dist,spec_norm,trace,eps_sharp,sharp_2nd,vol_lb";
std::string report_csv_row(const FlatnessReport& report);

} // namespace flatlab
