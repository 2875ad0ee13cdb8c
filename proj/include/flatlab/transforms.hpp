#pragma once

#include "flatlab/net.hpp"

#include <string>
#include <variant>

namespace flatlab {

// ---------------------------------------------------------------------------
// Transform specifications

struct AlphaScaleTwoLayer {
	double alpha = 1.0;
};

/// Per-layer scales with product 1.
struct AlphaScaleDeep {
	Vector alphas;
};

struct WeightNormScale {
	std::size_t layer = 0;  // 0-based weight layer
	double alpha = 1.0;
};

struct Radial {
	Vector center;
	double delta = 1.0;
	double rho = 0.5;
	double r_hat = 0.5;
};

struct PowerStretch {
	double center = 0.0;
	double a = 0.0;
	double b = 0.0;
};

struct InputAffine {
	DenseMatrix matrix;
	Vector shift;
};

using TransformSpec = std::variant<AlphaScaleTwoLayer, AlphaScaleDeep, WeightNormScale, Radial, PowerStretch, InputAffine>;

/// JSON "kind" tag of a spec.
std::string transform_kind(const TransformSpec& spec);

/// Checks the parameter constraints of each alternative.
void validate_transform(const TransformSpec& spec);

/// True for transforms that preserve the prediction function.
bool is_observational_equivalence(const TransformSpec& spec);

// ---------------------------------------------------------------------------
// Alpha-scale transformations

/// (theta1, theta2) -> (alpha theta1, theta2 / alpha). Biases, when present,
/// follow the bias-aware rule.
ParamVector alpha_scale_two_layer(const ParamVector& theta, double alpha);

/// Layer k scaled by alphas[k]; requires a bias-free net.
ParamVector alpha_scale_deep(const ParamVector& theta, std::span<const double> alphas);

/// Weights scaled by alphas[k] and bias of layer j by prod_{k<=j} alphas[k].
ParamVector alpha_scale_with_bias(const ParamVector& theta, std::span<const double> alphas);

/// Checks positivity and that the product is 1 within 1e-12 relative.
void validate_alphas(std::span<const double> alphas, std::size_t depth);

/// Scales realizing an outer-layer pair: alpha on the first layer, 1/alpha on
/// the last and 1 elsewhere. For K = 2 this is the two-layer transformation.
Vector outer_pair_alphas(std::size_t depth, double alpha);

/// Per-coordinate multipliers of D_alpha in FlatIndex order.
struct DiagonalScaling {
	Vector multipliers;
};

/// Weight block k gets 1/alpha_k; bias block j gets 1/prod_{k<=j} alpha_k.
DiagonalScaling diagonal_scaling(const Architecture& arch, std::span<const double> alphas);

/// g D_alpha: the gradient at T_alpha(theta) given the gradient g at theta.
Vector predicted_gradient(std::span<const double> g, const DiagonalScaling& scaling);

/// D_alpha H D_alpha: the Hessian at T_alpha(theta).
SymmetricMatrix predicted_hessian(const SymmetricMatrix& H, const DiagonalScaling& scaling);

/// Raised when the Hessian handed to sharpening_alpha is identically zero.
class ZeroHessianError : public std::runtime_error {
public:
	ZeroHessianError() : std::runtime_error("zero Hessian: no alpha-scaling can sharpen it") {}
};

struct SharpeningResult {
	double alpha = 1.0;
	double certified_norm = 0.0;  // power-iteration lower bound on the spectral norm
	int halvings = 0;
};

/// Searches alpha = 1, 1/2, 1/4, ... (or 2, 4, ... when only the last block
/// has positive curvature) until the spectral norm of D H D, scaled by
/// outer_pair_alphas(K, alpha), is certified by power iteration to be >= M.
SharpeningResult sharpening_alpha(const Architecture& arch, const SymmetricMatrix& H, double M);

/// alpha = eps / ||theta1||_2.
double epsilon_sharp_alpha(const ParamVector& theta, double eps);

/// alpha = 2 (||theta1||_inf + r) / (||theta1||_inf - r).
double disjoint_box_alpha(const DenseMatrix& theta1, double r);

/// Scales for the many-directions construction: alpha_k = 1/beta everywhere
/// except the layer with the fewest weights, which gets beta^(K-1).
Vector many_directions_alphas(const Architecture& arch, double beta);

// ---------------------------------------------------------------------------
// Weight normalization

/// Each layer weight w_k = s_k v_k / ||v_k||_2 (whole-matrix norm).
struct WeightNormParams {
	Vector scales;
	std::vector<DenseMatrix> directions;
	std::optional<std::vector<Vector>> biases;
};

/// s_k = ||theta_k||_2 and v_k = theta_k (a zero layer keeps s_k = 0).
WeightNormParams weight_norm_decompose(const ParamVector& theta);
ParamVector weight_norm_realize(const WeightNormParams& params);

/// v_layer -> alpha v_layer. The realized weight is unchanged for alpha > 0 and
/// negated for alpha < 0.
WeightNormParams weight_norm_scale(const WeightNormParams& params, std::size_t layer, double alpha);

// ---------------------------------------------------------------------------
// Radial transformation

/// Piecewise-linear radius map and its derivative.
double radial_psi(double r, const Radial& spec);
double radial_psi_derivative(double r, const Radial& spec);

/// theta -> psi(|theta - c|) (theta - c) / |theta - c| + c. Identity outside the delta-ball.
Vector radial_forward(std::span<const double> theta, const Radial& spec);
/// Exact inverse of radial_forward, per linear segment of psi.
Vector radial_inverse(std::span<const double> eta, const Radial& spec);
DenseMatrix radial_jacobian(std::span<const double> theta, const Radial& spec);

// ---------------------------------------------------------------------------
// Power stretch (scalar)

/// (|theta - c|^2 + b)^a (theta - c)
double power_stretch_forward(double theta, const PowerStretch& spec);
double power_stretch_derivative(double theta, const PowerStretch& spec);
double power_stretch_second_derivative(double theta, const PowerStretch& spec);
/// Inverse by bracketed bisection; exact to the last couple of ulps.
double power_stretch_inverse(double eta, const PowerStretch& spec);

// ---------------------------------------------------------------------------
// Input preprocessing xi(u) = A u + c

Vector input_affine_apply(std::span<const double> u, const InputAffine& spec);
/// xi^{-1}(x) = A^{-1} (x - c)
Vector input_affine_invert(std::span<const double> x, const InputAffine& spec);
/// (df/dx)(xi(u)) A
Vector preprocessed_input_gradient(std::span<const double> df_dx, const InputAffine& spec, std::span<const double> u);

/// Gradient of the network output with respect to its input.
Vector input_gradient(const Architecture& arch, const ParamVector& theta, std::span<const double> x);

/// Network realizing f(A u + c) in the u-domain: theta1 <- A^T theta1 and
/// b1 <- b1 + c theta1. A nonzero shift needs an architecture with biases.
ParamVector fold_input_affine(const Architecture& arch, const ParamVector& theta, const InputAffine& spec);

// ---------------------------------------------------------------------------

struct TransformOutcome {
	ParamVector params;
	std::vector<std::string> flags;
};

/// Applies any spec to a parameter point. Radial and power-stretch act on
/// vec(theta) coordinates; input-affine folds the preprocessing into layer 1.
TransformOutcome apply_transform(const Architecture& arch, const ParamVector& theta, const TransformSpec& spec);

} // namespace flatlab
