#include "flatlab/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flatlab {

namespace {

template <class... Ts>
struct overloaded : Ts... {
	using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

DenseMatrix scaled(const DenseMatrix& m, double s)
{
	DenseMatrix out = m;
	for (double& v : out.data())
		v *= s;
	return out;
}

Vector scaled(const Vector& v, double s)
{
	Vector out = v;
	for (double& x : out)
		x *= s;
	return out;
}

void validate_radial(const Radial& spec)
{
	if (!(spec.delta > 0.0))
		throw InvalidInput("radial: delta must be > 0");
	if (!(spec.rho > 0.0 && spec.rho < spec.delta))
		throw InvalidInput("radial: rho must lie in (0, delta)");
	if (!(spec.r_hat > 0.0 && spec.r_hat < spec.delta))
		throw InvalidInput("radial: r_hat must lie in (0, delta)");
	if (spec.center.empty())
		throw InvalidInput("radial: empty center");
}

void validate_power_stretch(const PowerStretch& spec)
{
	if (!(spec.a > -0.5))
		throw InvalidInput("power_stretch: a must be > -1/2");
	if (!(spec.b >= 0.0))
		throw InvalidInput("power_stretch: b must be >= 0");
	if (!std::isfinite(spec.center) || !std::isfinite(spec.a) || !std::isfinite(spec.b))
		throw InvalidInput("power_stretch: non-finite parameter");
}

void validate_input_affine(const InputAffine& spec)
{
	const auto& a = spec.matrix;
	if (a.rows() != a.cols() || a.rows() == 0)
		throw InvalidInput("input_affine: matrix must be square and non-empty");
	if (spec.shift.size() != a.rows())
		throw InvalidInput("input_affine: shift length does not match matrix");
	// solve() rejects singular matrices
	solve(a, spec.shift);
}

} // namespace

std::string transform_kind(const TransformSpec& spec)
{
	return std::visit(overloaded{
	                      [](const AlphaScaleTwoLayer&) { return std::string("alpha_scale_two_layer"); },
	                      [](const AlphaScaleDeep&) { return std::string("alpha_scale_deep"); },
	                      [](const WeightNormScale&) { return std::string("weight_norm"); },
	                      [](const Radial&) { return std::string("radial"); },
	                      [](const PowerStretch&) { return std::string("power_stretch"); },
	                      [](const InputAffine&) { return std::string("input_affine"); },
	                  },
	                  spec);
}

void validate_transform(const TransformSpec& spec)
{
	std::visit(overloaded{
	               [](const AlphaScaleTwoLayer& s) {
		               if (!(s.alpha > 0.0) || !std::isfinite(s.alpha))
			               throw InvalidInput("alpha_scale_two_layer: alpha must be > 0");
	               },
	               [](const AlphaScaleDeep& s) { validate_alphas(s.alphas, s.alphas.size()); },
	               [](const WeightNormScale& s) {
		               if (s.alpha == 0.0 || !std::isfinite(s.alpha))
			               throw InvalidInput("weight_norm: alpha must be nonzero");
	               },
	               [](const Radial& s) { validate_radial(s); },
	               [](const PowerStretch& s) { validate_power_stretch(s); },
	               [](const InputAffine& s) { validate_input_affine(s); },
	           },
	           spec);
}

bool is_observational_equivalence(const TransformSpec& spec)
{
	return std::visit(overloaded{
	                      [](const AlphaScaleTwoLayer&) { return true; },
	                      [](const AlphaScaleDeep&) { return true; },
	                      [](const WeightNormScale& s) { return s.alpha > 0.0; },
	                      [](const Radial&) { return false; },
	                      [](const PowerStretch&) { return false; },
	                      [](const InputAffine&) { return true; },
	                  },
	                  spec);
}

// ---------------------------------------------------------------------------
// alpha-scale

void validate_alphas(std::span<const double> alphas, std::size_t depth)
{
	if (alphas.size() != depth)
		throw InvalidInput("alpha scale: expected " + std::to_string(depth) + " factors, got " +
		                   std::to_string(alphas.size()));
	if (alphas.empty())
		throw InvalidInput("alpha scale: no factors");
	double prod = 1.0;
	for (double a : alphas) {
		if (!(a > 0.0) || !std::isfinite(a))
			throw InvalidInput("alpha scale: factors must be finite and > 0");
		prod *= a;
	}
	if (std::abs(prod - 1.0) > 1e-12)
		throw InvalidInput("alpha scale: product of factors is " + std::to_string(prod) + ", must be 1");
}

ParamVector alpha_scale_two_layer(const ParamVector& theta, double alpha)
{
	if (theta.weights.size() != 2)
		throw InvalidInput("alpha_scale_two_layer: requires K = 2");
	if (!(alpha > 0.0) || !std::isfinite(alpha))
		throw InvalidInput("alpha_scale_two_layer: alpha must be > 0");
	ParamVector out = theta;
	out.weights[0] = scaled(theta.weights[0], alpha);
	for (double& v : out.weights[1].data())
		v /= alpha;
	if (out.biases)
		(*out.biases)[0] = scaled((*theta.biases)[0], alpha);
	return out;
}

ParamVector alpha_scale_deep(const ParamVector& theta, std::span<const double> alphas)
{
	if (theta.biases)
		throw InvalidInput("alpha_scale_deep: net has biases, use alpha_scale_with_bias");
	validate_alphas(alphas, theta.weights.size());
	ParamVector out = theta;
	for (std::size_t k = 0; k < alphas.size(); ++k)
		out.weights[k] = scaled(theta.weights[k], alphas[k]);
	return out;
}

ParamVector alpha_scale_with_bias(const ParamVector& theta, std::span<const double> alphas)
{
	if (!theta.biases)
		throw InvalidInput("alpha_scale_with_bias: net has no biases");
	validate_alphas(alphas, theta.weights.size());
	ParamVector out = theta;
	double cumulative = 1.0;
	const std::size_t K = alphas.size();
	for (std::size_t k = 0; k < K; ++k) {
		out.weights[k] = scaled(theta.weights[k], alphas[k]);
		cumulative *= alphas[k];
		// the cumulative product reaches 1 at the output layer
		if (k + 1 < K)
			(*out.biases)[k] = scaled((*theta.biases)[k], cumulative);
	}
	return out;
}

Vector outer_pair_alphas(std::size_t depth, double alpha)
{
	if (depth < 2)
		throw InvalidInput("outer_pair_alphas: requires K >= 2");
	Vector a(depth, 1.0);
	a.front() = alpha;
	a.back() = 1.0 / alpha;
	return a;
}

DiagonalScaling diagonal_scaling(const Architecture& arch, std::span<const double> alphas)
{
	const FlatIndex idx(arch);
	validate_alphas(alphas, idx.depth());
	DiagonalScaling d;
	d.multipliers.assign(idx.total_dim(), 1.0);
	double cumulative = 1.0;
	for (std::size_t k = 0; k < idx.depth(); ++k) {
		for (std::size_t i = 0; i < idx.weight_size(k); ++i)
			d.multipliers[idx.weight_offset(k) + i] = 1.0 / alphas[k];
		cumulative *= alphas[k];
		if (idx.has_bias() && k + 1 < idx.depth())
			for (std::size_t i = 0; i < idx.bias_size(k); ++i)
				d.multipliers[idx.bias_offset(k) + i] = 1.0 / cumulative;
	}
	return d;
}

Vector predicted_gradient(std::span<const double> g, const DiagonalScaling& scaling)
{
	if (g.size() != scaling.multipliers.size())
		throw InvalidInput("predicted_gradient: dimension mismatch");
	Vector out(g.begin(), g.end());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] *= scaling.multipliers[i];
	return out;
}

SymmetricMatrix predicted_hessian(const SymmetricMatrix& H, const DiagonalScaling& scaling)
{
	const std::size_t n = H.dim();
	if (n != scaling.multipliers.size())
		throw InvalidInput("predicted_hessian: dimension mismatch");
	const auto& d = scaling.multipliers;
	DenseMatrix out(n, n);
	for (std::size_t i = 0; i < n; ++i)
		for (std::size_t j = 0; j < n; ++j)
			out(i, j) = d[i] * H(i, j) * d[j];
	return SymmetricMatrix(std::move(out));
}

SharpeningResult sharpening_alpha(const Architecture& arch, const SymmetricMatrix& H, double M)
{
	const FlatIndex idx(arch);
	if (idx.depth() < 2)
		throw InvalidInput("sharpening_alpha: requires K >= 2");
	if (H.dim() != idx.total_dim())
		throw InvalidInput("sharpening_alpha: Hessian dimension does not match architecture");
	if (!(M > 0.0) || !std::isfinite(M))
		throw InvalidInput("sharpening_alpha: M must be finite and > 0");
	if (frobenius_norm(H.dense()) == 0.0)
		throw ZeroHessianError();

	auto max_diag = [&](std::size_t layer) {
		double m = 0.0;
		for (std::size_t i = 0; i < idx.weight_size(layer); ++i) {
			const std::size_t c = idx.weight_offset(layer) + i;
			m = std::max(m, H(c, c));
		}
		return m;
	};
	double factor = 0.5;
	if (max_diag(0) <= 0.0) {
		if (max_diag(idx.depth() - 1) <= 0.0)
			throw InvalidInput("sharpening_alpha: no positive diagonal curvature on the first or last layer");
		factor = 2.0;
	}

	constexpr int kMaxSteps = 1000;
	SharpeningResult res;
	double alpha = 1.0;
	for (int step = 0; step <= kMaxSteps; ++step) {
		const DiagonalScaling d = diagonal_scaling(arch, outer_pair_alphas(idx.depth(), alpha));
		auto op = [&](std::span<const double> v) {
			Vector dv = predicted_gradient(v, d);
			return predicted_gradient(H.apply(dv), d);
		};
		const auto pi = power_iteration(op, H.dim(), 1e-10, 20000, SeededRng(0x5EEDULL, static_cast<std::uint64_t>(step)));
		if (std::abs(pi.lambda_max) >= M) {
			res.alpha = alpha;
			res.certified_norm = std::abs(pi.lambda_max);
			res.halvings = step;
			return res;
		}
		alpha *= factor;
	}
	throw std::runtime_error("sharpening_alpha: could not certify spectral norm >= " + std::to_string(M));
}

double epsilon_sharp_alpha(const ParamVector& theta, double eps)
{
	if (theta.weights.size() < 2)
		throw InvalidInput("epsilon_sharp_alpha: requires K >= 2");
	if (!(eps > 0.0) || !std::isfinite(eps))
		throw InvalidInput("epsilon_sharp_alpha: eps must be > 0");
	const double n1 = frobenius_norm(theta.weights[0]);
	if (n1 == 0.0)
		throw InvalidInput("epsilon_sharp_alpha: first layer is zero");
	return eps / n1;
}

double disjoint_box_alpha(const DenseMatrix& theta1, double r)
{
	const double m = norm_inf(theta1.data());
	if (!(r > 0.0))
		throw InvalidInput("disjoint_box_alpha: r must be > 0");
	if (!(r < m))
		throw InvalidInput("disjoint_box_alpha: r must be < ||theta1||_inf = " + std::to_string(m));
	return 2.0 * (m + r) / (m - r);
}

Vector many_directions_alphas(const Architecture& arch, double beta)
{
	const FlatIndex idx(arch);
	if (!(beta > 0.0) || !std::isfinite(beta))
		throw InvalidInput("many_directions_alphas: beta must be > 0");
	const std::size_t K = idx.depth();
	// smallest block; ties go to the later layer
	std::size_t kmin = K - 1;
	for (std::size_t k = K; k-- > 0;)
		if (idx.weight_size(k) < idx.weight_size(kmin))
			kmin = k;
	Vector alphas(K, 1.0 / beta);
	alphas[kmin] = std::pow(beta, static_cast<double>(K - 1));
	return alphas;
}

// ---------------------------------------------------------------------------
// weight normalization

WeightNormParams weight_norm_decompose(const ParamVector& theta)
{
	WeightNormParams p;
	for (const auto& w : theta.weights) {
		p.scales.push_back(frobenius_norm(w));
		p.directions.push_back(w);
	}
	p.biases = theta.biases;
	return p;
}

ParamVector weight_norm_realize(const WeightNormParams& params)
{
	if (params.scales.size() != params.directions.size())
		throw InvalidInput("weight_norm: scales and directions differ in count");
	ParamVector theta;
	for (std::size_t k = 0; k < params.directions.size(); ++k) {
		const double nv = frobenius_norm(params.directions[k]);
		if (nv == 0.0)
			theta.weights.emplace_back(params.directions[k].rows(), params.directions[k].cols());
		else
			theta.weights.push_back(scaled(params.directions[k], params.scales[k] / nv));
	}
	theta.biases = params.biases;
	return theta;
}

WeightNormParams weight_norm_scale(const WeightNormParams& params, std::size_t layer, double alpha)
{
	if (alpha == 0.0 || !std::isfinite(alpha))
		throw InvalidInput("weight_norm: alpha must be nonzero");
	if (layer >= params.directions.size())
		throw InvalidInput("weight_norm: layer index " + std::to_string(layer) + " out of range");
	if (frobenius_norm(params.directions[layer]) == 0.0)
		throw InvalidInput("weight_norm: target layer is zero");
	WeightNormParams out = params;
	out.directions[layer] = scaled(params.directions[layer], alpha);
	return out;
}

// ---------------------------------------------------------------------------
// radial

double radial_psi(double r, const Radial& spec)
{
	if (r > spec.delta || r < 0.0)
		return r;
	if (r <= spec.r_hat)
		return spec.rho * r / spec.r_hat;
	return (spec.rho - spec.delta) * (r - spec.delta) / (spec.r_hat - spec.delta) + spec.delta;
}

double radial_psi_derivative(double r, const Radial& spec)
{
	if (r > spec.delta || r < 0.0)
		return 1.0;
	if (r <= spec.r_hat)
		return spec.rho / spec.r_hat;
	return (spec.rho - spec.delta) / (spec.r_hat - spec.delta);
}

Vector radial_forward(std::span<const double> theta, const Radial& spec)
{
	validate_radial(spec);
	if (theta.size() != spec.center.size())
		throw InvalidInput("radial: point and center differ in dimension");
	Vector u(theta.size());
	for (std::size_t i = 0; i < u.size(); ++i)
		u[i] = theta[i] - spec.center[i];
	const double r = norm2(u);
	if (r > spec.delta)
		return Vector(theta.begin(), theta.end());
	if (r == 0.0)
		return spec.center;
	const double s = radial_psi(r, spec) / r;
	Vector out(theta.size());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] = s * u[i] + spec.center[i];
	return out;
}

Vector radial_inverse(std::span<const double> eta, const Radial& spec)
{
	validate_radial(spec);
	if (eta.size() != spec.center.size())
		throw InvalidInput("radial: point and center differ in dimension");
	Vector u(eta.size());
	for (std::size_t i = 0; i < u.size(); ++i)
		u[i] = eta[i] - spec.center[i];
	const double s = norm2(u);
	// psi maps [0, delta] onto itself, so the outside region is shared
	if (s > spec.delta)
		return Vector(eta.begin(), eta.end());
	if (s == 0.0)
		return spec.center;
	double r;
	if (s <= spec.rho)
		r = s * spec.r_hat / spec.rho;
	else
		r = (s - spec.delta) * (spec.r_hat - spec.delta) / (spec.rho - spec.delta) + spec.delta;
	Vector out(eta.size());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] = (r / s) * u[i] + spec.center[i];
	return out;
}

DenseMatrix radial_jacobian(std::span<const double> theta, const Radial& spec)
{
	validate_radial(spec);
	const std::size_t n = theta.size();
	if (n != spec.center.size())
		throw InvalidInput("radial: point and center differ in dimension");
	Vector u(n);
	for (std::size_t i = 0; i < n; ++i)
		u[i] = theta[i] - spec.center[i];
	const double r = norm2(u);

	DenseMatrix j = DenseMatrix::identity(n);
	if (r > spec.delta)
		return j;
	double diag = radial_psi_derivative(r, spec);
	if (r > spec.r_hat) {
		const double c = spec.delta * (spec.r_hat - spec.rho) / (spec.r_hat - spec.delta);
		diag += c / r;
		const double outer = c / (r * r * r);
		for (std::size_t a = 0; a < n; ++a)
			for (std::size_t b = 0; b < n; ++b)
				j(a, b) = -outer * u[a] * u[b];
	} else {
		for (double& v : j.data())
			v = 0.0;
	}
	for (std::size_t a = 0; a < n; ++a)
		j(a, a) += diag;
	return j;
}

// ---------------------------------------------------------------------------
// power stretch

double power_stretch_forward(double theta, const PowerStretch& spec)
{
	validate_power_stretch(spec);
	const double u = theta - spec.center;
	if (spec.b == 0.0) {
		if (u == 0.0)
			return 0.0;
		return std::copysign(std::pow(std::abs(u), 2.0 * spec.a + 1.0), u);
	}
	return std::pow(u * u + spec.b, spec.a) * u;
}

double power_stretch_derivative(double theta, const PowerStretch& spec)
{
	validate_power_stretch(spec);
	const double u = theta - spec.center;
	if (spec.b == 0.0) {
		if (u == 0.0)
			return spec.a > 0.0 ? 0.0 : (spec.a == 0.0 ? 1.0 : std::numeric_limits<double>::infinity());
		return (1.0 + 2.0 * spec.a) * std::pow(std::abs(u), 2.0 * spec.a);
	}
	const double q = u * u + spec.b;
	return std::pow(q, spec.a - 1.0) * ((1.0 + 2.0 * spec.a) * u * u + spec.b);
}

double power_stretch_second_derivative(double theta, const PowerStretch& spec)
{
	validate_power_stretch(spec);
	const double u = theta - spec.center;
	if (spec.a == 0.0)
		return 0.0;
	if (spec.b == 0.0) {
		if (u == 0.0)
			return spec.a > 0.5 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
		return 2.0 * spec.a * (1.0 + 2.0 * spec.a) * std::copysign(std::pow(std::abs(u), 2.0 * spec.a - 1.0), u);
	}
	const double q = u * u + spec.b;
	return 2.0 * spec.a * u * std::pow(q, spec.a - 2.0) * ((1.0 + 2.0 * spec.a) * u * u + 3.0 * spec.b);
}

double power_stretch_inverse(double eta, const PowerStretch& spec)
{
	validate_power_stretch(spec);
	if (!std::isfinite(eta))
		throw InvalidInput("power_stretch_inverse: non-finite value");
	auto f = [&](double th) { return power_stretch_forward(th, spec); };
	double width = std::max(1.0, std::abs(eta));
	double lo = spec.center - width, hi = spec.center + width;
	while (f(lo) > eta)
		lo = spec.center - (width *= 2.0);
	width = std::max(1.0, std::abs(eta));
	while (f(hi) < eta)
		hi = spec.center + (width *= 2.0);
	for (int it = 0; it < 2000; ++it) {
		const double mid = 0.5 * (lo + hi);
		if (mid <= lo || mid >= hi)
			break;
		if (f(mid) < eta)
			lo = mid;
		else
			hi = mid;
	}
	return std::abs(f(lo) - eta) <= std::abs(f(hi) - eta) ? lo : hi;
}

// ---------------------------------------------------------------------------
// input preprocessing

Vector input_affine_apply(std::span<const double> u, const InputAffine& spec)
{
	validate_input_affine(spec);
	if (u.size() != spec.matrix.cols())
		throw InvalidInput("input_affine: input length mismatch");
	Vector x = matvec(spec.matrix, u);
	for (std::size_t i = 0; i < x.size(); ++i)
		x[i] += spec.shift[i];
	return x;
}

Vector input_affine_invert(std::span<const double> x, const InputAffine& spec)
{
	validate_input_affine(spec);
	if (x.size() != spec.matrix.rows())
		throw InvalidInput("input_affine: input length mismatch");
	Vector rhs(x.begin(), x.end());
	for (std::size_t i = 0; i < rhs.size(); ++i)
		rhs[i] -= spec.shift[i];
	return solve(spec.matrix, rhs);
}

Vector preprocessed_input_gradient(std::span<const double> df_dx, const InputAffine& spec, std::span<const double> u)
{
	validate_input_affine(spec);
	const auto& a = spec.matrix;
	if (df_dx.size() != a.rows() || u.size() != a.cols())
		throw InvalidInput("preprocessed_input_gradient: dimension mismatch");
	Vector out(a.cols(), 0.0);
	for (std::size_t i = 0; i < a.rows(); ++i)
		for (std::size_t j = 0; j < a.cols(); ++j)
			out[j] += df_dx[i] * a(i, j);
	return out;
}

Vector input_gradient(const Architecture& arch, const ParamVector& theta, std::span<const double> x)
{
	validate_params(arch, theta);
	if (x.size() != arch.input_width())
		throw InvalidInput("input_gradient: input length mismatch");
	const std::size_t K = arch.depth();
	std::vector<Vector> zs(K);
	Vector a(x.begin(), x.end());
	for (std::size_t k = 0; k < K; ++k) {
		const DenseMatrix& w = theta.weights[k];
		Vector z = theta.biases ? (*theta.biases)[k] : Vector(w.cols(), 0.0);
		for (std::size_t i = 0; i < w.rows(); ++i)
			for (std::size_t j = 0; j < w.cols(); ++j)
				z[j] += a[i] * w(i, j);
		zs[k] = z;
		for (double& v : z)
			v = relu(v);
		a = std::move(z);
	}
	Vector delta{1.0};
	for (std::size_t k = K; k-- > 0;) {
		const DenseMatrix& w = theta.weights[k];
		Vector prev(w.rows(), 0.0);
		for (std::size_t i = 0; i < w.rows(); ++i) {
			if (k > 0 && !(zs[k - 1][i] > 0.0))
				continue;
			double s = 0.0;
			for (std::size_t j = 0; j < w.cols(); ++j)
				s += w(i, j) * delta[j];
			prev[i] = s;
		}
		delta = std::move(prev);
	}
	return delta;
}

ParamVector fold_input_affine(const Architecture& arch, const ParamVector& theta, const InputAffine& spec)
{
	validate_params(arch, theta);
	validate_input_affine(spec);
	if (spec.matrix.rows() != arch.input_width())
		throw InvalidInput("input_affine: matrix size does not match input width");
	const bool has_shift = std::any_of(spec.shift.begin(), spec.shift.end(), [](double c) { return c != 0.0; });
	if (has_shift && !theta.biases)
		throw InvalidInput("input_affine: a nonzero shift needs an architecture with biases");

	ParamVector out = theta;
	out.weights[0] = matmul(spec.matrix.transposed(), theta.weights[0]);
	if (has_shift) {
		auto& b = (*out.biases)[0];
		const auto& w = theta.weights[0];
		for (std::size_t j = 0; j < w.cols(); ++j)
			for (std::size_t i = 0; i < w.rows(); ++i)
				b[j] += spec.shift[i] * w(i, j);
	}
	return out;
}

// ---------------------------------------------------------------------------

TransformOutcome apply_transform(const Architecture& arch, const ParamVector& theta, const TransformSpec& spec)
{
	validate_params(arch, theta);
	validate_transform(spec);
	TransformOutcome out;
	std::visit(overloaded{
	               [&](const AlphaScaleTwoLayer& s) { out.params = alpha_scale_two_layer(theta, s.alpha); },
	               [&](const AlphaScaleDeep& s) {
		               out.params = theta.biases ? alpha_scale_with_bias(theta, s.alphas) : alpha_scale_deep(theta, s.alphas);
	               },
	               [&](const WeightNormScale& s) {
		               out.params = weight_norm_realize(weight_norm_scale(weight_norm_decompose(theta), s.layer, s.alpha));
		               if (s.alpha < 0.0)
			               out.flags.push_back("weight_norm: alpha < 0 flips the sign of the realized weight");
	               },
	               [&](const Radial& s) { out.params = unvec(radial_forward(vec(theta), s), arch); },
	               [&](const PowerStretch& s) {
		               Vector flat = vec(theta);
		               for (double& v : flat)
			               v = power_stretch_forward(v, s);
		               out.params = unvec(flat, arch);
		               out.flags.push_back("power_stretch: applied coordinatewise to vec(theta)");
	               },
	               [&](const InputAffine& s) { out.params = fold_input_affine(arch, theta, s); },
	           },
	           spec);
	return out;
}

} // namespace flatlab
