#pragma once

#include "flatlab/numerics.hpp"

#include <optional>
#include <stdexcept>

namespace flatlab {

/// Layer widths n0, n1, ..., nK of a rectified feedforward net with scalar output.
struct Architecture {
	std::vector<std::size_t> layer_widths;
	bool use_bias = false;

	/// Number of weight layers K.
	std::size_t depth() const { return layer_widths.empty() ? 0 : layer_widths.size() - 1; }
	std::size_t input_width() const { return layer_widths.front(); }

	/// Throws InvalidInput unless K >= 1, all widths >= 1 and nK = 1.
	void validate() const;

	bool operator==(const Architecture&) const = default;
};

/// Parses "2,8,1".
Architecture parse_architecture(const std::string& widths, bool use_bias = false);

/// weights[k] has shape n_k x n_{k+1} (0-based layers), biases[k] length n_{k+1}.
struct ParamVector {
	std::vector<DenseMatrix> weights;
	std::optional<std::vector<Vector>> biases;

	bool operator==(const ParamVector&) const = default;
};

/// Checks shapes against arch and that every entry is finite.
void validate_params(const Architecture& arch, const ParamVector& theta);

/// Flattening layout: weight blocks in layer order (row-major), then bias
/// blocks in layer order when the architecture has biases.
class FlatIndex {
public:
	explicit FlatIndex(const Architecture& arch);

	std::size_t total_dim() const { return m_total; }
	std::size_t depth() const { return m_weight_offset.size(); }

	std::size_t weight_offset(std::size_t layer) const { return m_weight_offset[layer]; }
	std::size_t weight_size(std::size_t layer) const { return m_weight_size[layer]; }
	bool has_bias() const { return !m_bias_offset.empty(); }
	std::size_t bias_offset(std::size_t layer) const { return m_bias_offset[layer]; }
	std::size_t bias_size(std::size_t layer) const { return m_bias_size[layer]; }

private:
	std::vector<std::size_t> m_weight_offset, m_weight_size;
	std::vector<std::size_t> m_bias_offset, m_bias_size;
	std::size_t m_total = 0;
};

Vector vec(const ParamVector& theta);
ParamVector unvec(std::span<const double> flat, const Architecture& arch);

struct Dataset {
	std::vector<Vector> inputs;
	Vector targets;

	std::size_t size() const { return targets.size(); }
};

void validate_dataset(const Architecture& arch, const Dataset& data);

/// Built-in losses. Each is a non-negative, continuous per-example loss of
/// the scalar prediction; add new kinds in pointwise_loss and its derivative.
enum class LossKind { MeanSquaredError };

double pointwise_loss(LossKind kind, double prediction, double target);
double pointwise_loss_derivative(LossKind kind, double prediction, double target);

/// Elementwise max(z, 0).
inline double relu(double z) { return z > 0.0 ? z : 0.0; }

double forward(const Architecture& arch, const ParamVector& theta, std::span<const double> x);
double loss(const Architecture& arch, const ParamVector& theta, const Dataset& data,
            LossKind kind = LossKind::MeanSquaredError);

/// Exact reverse-mode gradient, flattened per FlatIndex. Uses relu'(0) = 0.
Vector gradient(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                LossKind kind = LossKind::MeanSquaredError);

/// Raised by second-order operations when a hidden preactivation is too close
/// to zero for the loss to be twice differentiable on the evaluation stencil.
class KinkProximityError : public std::runtime_error {
public:
	KinkProximityError(std::size_t layer, std::size_t unit, std::size_t example, double distance, double step);

	std::size_t layer;    // 1-based hidden layer
	std::size_t unit;
	std::size_t example;
	double distance;
	double step;
};

struct KinkLocation {
	double distance = 0.0;
	std::size_t layer = 0;  // 1-based hidden layer; 0 when the net has no hidden units
	std::size_t unit = 0;
	std::size_t example = 0;
};

/// Minimum |preactivation| over all hidden units and examples (+inf when K = 1).
double kink_distance(const Architecture& arch, const ParamVector& theta, const Dataset& data);
KinkLocation nearest_kink(const Architecture& arch, const ParamVector& theta, const Dataset& data);

/// Per-coordinate finite-difference steps used by hessian(): 1e-4 times the
/// largest magnitude in the coordinate's block (weight or bias of one layer),
/// or 1e-4 for an all-zero block. Steps therefore rescale with each layer
/// under alpha-scale transformations.
Vector hessian_steps(const Architecture& arch, const ParamVector& theta);

/// Central finite differences of the analytic gradient, symmetrized.
/// Throws KinkProximityError if a hidden preactivation is exactly zero or if
/// any stencil point changes the activation pattern, in which case the loss is
/// not twice differentiable on the stencil.
SymmetricMatrix hessian(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                        LossKind kind = LossKind::MeanSquaredError);

/// Zero-valued parameters of the given shape.
ParamVector zero_params(const Architecture& arch);

} // namespace flatlab
