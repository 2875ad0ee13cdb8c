#include "flatlab/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace flatlab {

void Architecture::validate() const
{
	if (layer_widths.size() < 2)
		throw InvalidInput("architecture: need at least an input and an output width");
	for (std::size_t w : layer_widths)
		if (w < 1)
			throw InvalidInput("architecture: widths must be >= 1");
	if (layer_widths.back() != 1)
		throw InvalidInput("architecture: output width must be 1");
}

Architecture parse_architecture(const std::string& widths, bool use_bias)
{
	Architecture arch;
	arch.use_bias = use_bias;
	std::stringstream ss(widths);
	std::string item;
	while (std::getline(ss, item, ',')) {
		std::size_t pos = 0;
		long long w = 0;
		try {
			w = std::stoll(item, &pos);
		} catch (const std::exception&) {
			throw InvalidInput("architecture: bad width '" + item + "'");
		}
		if (pos != item.size() || w < 1)
			throw InvalidInput("architecture: bad width '" + item + "'");
		arch.layer_widths.push_back(static_cast<std::size_t>(w));
	}
	arch.validate();
	return arch;
}

void validate_params(const Architecture& arch, const ParamVector& theta)
{
	arch.validate();
	const std::size_t K = arch.depth();
	if (theta.weights.size() != K)
		throw InvalidInput("params: expected " + std::to_string(K) + " weight matrices, got " +
		                   std::to_string(theta.weights.size()));
	for (std::size_t k = 0; k < K; ++k) {
		const auto& w = theta.weights[k];
		if (w.rows() != arch.layer_widths[k] || w.cols() != arch.layer_widths[k + 1])
			throw InvalidInput("params: weight " + std::to_string(k + 1) + " has shape " +
			                   std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
		if (!w.all_finite())
			throw InvalidInput("params: non-finite entry in weight " + std::to_string(k + 1));
	}
	if (arch.use_bias != theta.biases.has_value())
		throw InvalidInput(arch.use_bias ? "params: architecture uses biases but none given"
		                                 : "params: biases given for a bias-free architecture");
	if (theta.biases) {
		if (theta.biases->size() != K)
			throw InvalidInput("params: expected " + std::to_string(K) + " bias vectors");
		for (std::size_t k = 0; k < K; ++k) {
			const auto& b = (*theta.biases)[k];
			if (b.size() != arch.layer_widths[k + 1])
				throw InvalidInput("params: bias " + std::to_string(k + 1) + " has wrong length");
			for (double v : b)
				if (!std::isfinite(v))
					throw InvalidInput("params: non-finite entry in bias " + std::to_string(k + 1));
		}
	}
}

ParamVector zero_params(const Architecture& arch)
{
	arch.validate();
	ParamVector p;
	for (std::size_t k = 0; k < arch.depth(); ++k)
		p.weights.emplace_back(arch.layer_widths[k], arch.layer_widths[k + 1]);
	if (arch.use_bias) {
		p.biases.emplace();
		for (std::size_t k = 0; k < arch.depth(); ++k)
			p.biases->emplace_back(arch.layer_widths[k + 1], 0.0);
	}
	return p;
}

// ---------------------------------------------------------------------------
// FlatIndex

FlatIndex::FlatIndex(const Architecture& arch)
{
	arch.validate();
	const std::size_t K = arch.depth();
	for (std::size_t k = 0; k < K; ++k) {
		m_weight_offset.push_back(m_total);
		m_weight_size.push_back(arch.layer_widths[k] * arch.layer_widths[k + 1]);
		m_total += m_weight_size.back();
	}
	if (arch.use_bias) {
		for (std::size_t k = 0; k < K; ++k) {
			m_bias_offset.push_back(m_total);
			m_bias_size.push_back(arch.layer_widths[k + 1]);
			m_total += m_bias_size.back();
		}
	}
}

Vector vec(const ParamVector& theta)
{
	Vector flat;
	for (const auto& w : theta.weights)
		flat.insert(flat.end(), w.data().begin(), w.data().end());
	if (theta.biases)
		for (const auto& b : *theta.biases)
			flat.insert(flat.end(), b.begin(), b.end());
	return flat;
}

ParamVector unvec(std::span<const double> flat, const Architecture& arch)
{
	const FlatIndex idx(arch);
	if (flat.size() != idx.total_dim())
		throw InvalidInput("unvec: expected " + std::to_string(idx.total_dim()) + " entries, got " +
		                   std::to_string(flat.size()));
	ParamVector p;
	for (std::size_t k = 0; k < arch.depth(); ++k) {
		auto block = flat.subspan(idx.weight_offset(k), idx.weight_size(k));
		p.weights.emplace_back(arch.layer_widths[k], arch.layer_widths[k + 1], Vector(block.begin(), block.end()));
	}
	if (arch.use_bias) {
		p.biases.emplace();
		for (std::size_t k = 0; k < arch.depth(); ++k) {
			auto block = flat.subspan(idx.bias_offset(k), idx.bias_size(k));
			p.biases->emplace_back(block.begin(), block.end());
		}
	}
	return p;
}

void validate_dataset(const Architecture& arch, const Dataset& data)
{
	if (data.targets.empty())
		throw InvalidInput("dataset: empty");
	if (data.inputs.size() != data.targets.size())
		throw InvalidInput("dataset: inputs and targets differ in length");
	for (std::size_t i = 0; i < data.size(); ++i) {
		if (data.inputs[i].size() != arch.input_width())
			throw InvalidInput("dataset: input " + std::to_string(i) + " has length " +
			                   std::to_string(data.inputs[i].size()) + ", expected " +
			                   std::to_string(arch.input_width()));
		for (double v : data.inputs[i])
			if (!std::isfinite(v))
				throw InvalidInput("dataset: non-finite input in example " + std::to_string(i));
		if (!std::isfinite(data.targets[i]))
			throw InvalidInput("dataset: non-finite target in example " + std::to_string(i));
	}
}

double pointwise_loss(LossKind kind, double prediction, double target)
{
	switch (kind) {
	case LossKind::MeanSquaredError: {
		const double r = prediction - target;
		return r * r;
	}
	}
	throw InvalidInput("unknown loss kind");
}

double pointwise_loss_derivative(LossKind kind, double prediction, double target)
{
	switch (kind) {
	case LossKind::MeanSquaredError:
		return 2.0 * (prediction - target);
	}
	throw InvalidInput("unknown loss kind");
}

namespace {

// Preactivations of every layer for one example; zs[k] has length n_{k+1}.
std::vector<Vector> preactivations(const Architecture& arch, const ParamVector& theta, std::span<const double> x)
{
	const std::size_t K = arch.depth();
	std::vector<Vector> zs(K);
	Vector a(x.begin(), x.end());
	for (std::size_t k = 0; k < K; ++k) {
		const DenseMatrix& w = theta.weights[k];
		Vector z(w.cols(), 0.0);
		if (theta.biases)
			z = (*theta.biases)[k];
		for (std::size_t i = 0; i < w.rows(); ++i) {
			const double ai = a[i];
			if (ai == 0.0)
				continue;
			for (std::size_t j = 0; j < w.cols(); ++j)
				z[j] += ai * w(i, j);
		}
		zs[k] = z;
		if (k + 1 < K)
			for (double& v : z)
				v = relu(v);
		a = std::move(z);
	}
	return zs;
}

// Gradient accumulation; optionally records the activation pattern of every
// hidden unit on every example.
Vector gradient_impl(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind,
                     std::vector<char>* pattern)
{
	const FlatIndex idx(arch);
	const std::size_t K = arch.depth();
	Vector grad(idx.total_dim(), 0.0);
	const double inv_m = 1.0 / static_cast<double>(data.size());
	if (pattern)
		pattern->clear();

	for (std::size_t e = 0; e < data.size(); ++e) {
		const auto& x = data.inputs[e];
		const auto zs = preactivations(arch, theta, x);
		if (pattern)
			for (std::size_t k = 0; k + 1 < K; ++k)
				for (double z : zs[k])
					pattern->push_back(z > 0.0 ? 1 : 0);

		Vector delta{pointwise_loss_derivative(kind, zs[K - 1][0], data.targets[e]) * inv_m};
		for (std::size_t k = K; k-- > 0;) {
			const DenseMatrix& w = theta.weights[k];
			// input activation of layer k
			Vector a;
			if (k == 0)
				a.assign(x.begin(), x.end());
			else {
				a = zs[k - 1];
				for (double& v : a)
					v = relu(v);
			}
			const std::size_t off = idx.weight_offset(k);
			for (std::size_t i = 0; i < w.rows(); ++i)
				for (std::size_t j = 0; j < w.cols(); ++j)
					grad[off + i * w.cols() + j] += a[i] * delta[j];
			if (idx.has_bias())
				for (std::size_t j = 0; j < w.cols(); ++j)
					grad[idx.bias_offset(k) + j] += delta[j];
			if (k == 0)
				break;
			Vector prev(w.rows(), 0.0);
			for (std::size_t i = 0; i < w.rows(); ++i) {
				if (!(zs[k - 1][i] > 0.0))
					continue;
				double s = 0.0;
				for (std::size_t j = 0; j < w.cols(); ++j)
					s += w(i, j) * delta[j];
				prev[i] = s;
			}
			delta = std::move(prev);
		}
	}
	return grad;
}

} // namespace

double forward(const Architecture& arch, const ParamVector& theta, std::span<const double> x)
{
	validate_params(arch, theta);
	if (x.size() != arch.input_width())
		throw InvalidInput("forward: input has length " + std::to_string(x.size()) + ", expected " +
		                   std::to_string(arch.input_width()));
	return preactivations(arch, theta, x).back()[0];
}

double loss(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	double s = 0.0;
	for (std::size_t e = 0; e < data.size(); ++e)
		s += pointwise_loss(kind, preactivations(arch, theta, data.inputs[e]).back()[0], data.targets[e]);
	return s / static_cast<double>(data.size());
}

Vector gradient(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	return gradient_impl(arch, theta, data, kind, nullptr);
}

KinkProximityError::KinkProximityError(std::size_t layer_, std::size_t unit_, std::size_t example_,
                                       double distance_, double step_)
    : std::runtime_error("kink proximity: hidden layer " + std::to_string(layer_) + " unit " +
                         std::to_string(unit_) + " on example " + std::to_string(example_) +
                         " has |preactivation| = " + std::to_string(distance_) +
                         " (differencing step " + std::to_string(step_) + ")"),
      layer(layer_), unit(unit_), example(example_), distance(distance_), step(step_)
{
}

KinkLocation nearest_kink(const Architecture& arch, const ParamVector& theta, const Dataset& data)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	KinkLocation loc;
	loc.distance = std::numeric_limits<double>::infinity();
	const std::size_t K = arch.depth();
	for (std::size_t e = 0; e < data.size(); ++e) {
		const auto zs = preactivations(arch, theta, data.inputs[e]);
		for (std::size_t k = 0; k + 1 < K; ++k)
			for (std::size_t j = 0; j < zs[k].size(); ++j)
				if (std::abs(zs[k][j]) < loc.distance)
					loc = {std::abs(zs[k][j]), k + 1, j, e};
	}
	return loc;
}

double kink_distance(const Architecture& arch, const ParamVector& theta, const Dataset& data)
{
	return nearest_kink(arch, theta, data).distance;
}

Vector hessian_steps(const Architecture& arch, const ParamVector& theta)
{
	validate_params(arch, theta);
	const FlatIndex idx(arch);
	const Vector flat = vec(theta);
	Vector steps(flat.size());
	auto fill = [&](std::size_t off, std::size_t len) {
		const double scale = norm_inf(std::span<const double>(flat).subspan(off, len));
		const double h = 1e-4 * (scale > 0.0 ? scale : 1.0);
		std::fill_n(steps.begin() + static_cast<std::ptrdiff_t>(off), len, h);
	};
	for (std::size_t k = 0; k < idx.depth(); ++k) {
		fill(idx.weight_offset(k), idx.weight_size(k));
		if (idx.has_bias())
			fill(idx.bias_offset(k), idx.bias_size(k));
	}
	return steps;
}

namespace {

// Names the first hidden unit whose activation flips between two patterns.
[[noreturn]] void throw_pattern_change(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                                       const std::vector<char>& base, const std::vector<char>& moved, double step)
{
	std::size_t hidden = 0;
	for (std::size_t k = 1; k + 1 < arch.layer_widths.size(); ++k)
		hidden += arch.layer_widths[k];
	std::size_t pos = 0;
	while (pos < base.size() && base[pos] == moved[pos])
		++pos;
	const std::size_t example = pos / hidden;
	std::size_t unit = pos % hidden;
	std::size_t layer = 1;
	while (unit >= arch.layer_widths[layer]) {
		unit -= arch.layer_widths[layer];
		++layer;
	}
	const auto zs = preactivations(arch, theta, data.inputs[example]);
	throw KinkProximityError(layer, unit, example, std::abs(zs[layer - 1][unit]), step);
}

} // namespace

SymmetricMatrix hessian(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	const Vector steps = hessian_steps(arch, theta);
	const KinkLocation kink = nearest_kink(arch, theta, data);
	if (kink.distance == 0.0)
		throw KinkProximityError(kink.layer, kink.unit, kink.example, kink.distance, 0.0);

	std::vector<char> base_pattern;
	gradient_impl(arch, theta, data, kind, &base_pattern);

	const Vector flat = vec(theta);
	const std::size_t n = flat.size();
	DenseMatrix h_raw(n, n);
	std::vector<char> pattern;
	Vector probe = flat;
	for (std::size_t i = 0; i < n; ++i) {
		const double h = steps[i];
		probe[i] = flat[i] + h;
		const Vector gp = gradient_impl(arch, unvec(probe, arch), data, kind, &pattern);
		if (pattern != base_pattern)
			throw_pattern_change(arch, theta, data, base_pattern, pattern, h);
		probe[i] = flat[i] - h;
		const Vector gm = gradient_impl(arch, unvec(probe, arch), data, kind, &pattern);
		if (pattern != base_pattern)
			throw_pattern_change(arch, theta, data, base_pattern, pattern, h);
		probe[i] = flat[i];
		for (std::size_t j = 0; j < n; ++j)
			h_raw(j, i) = (gp[j] - gm[j]) / (2.0 * h);
	}

	double defect = 0.0;
	for (std::size_t i = 0; i < n; ++i)
		for (std::size_t j = i + 1; j < n; ++j)
			defect = std::max(defect, std::abs(h_raw(i, j) - h_raw(j, i)));
	const double bound = 1e-6 * std::max(1.0, frobenius_norm(h_raw));
	if (defect > bound)
		throw std::runtime_error("hessian: finite-difference symmetry defect " + std::to_string(defect) +
		                         " exceeds " + std::to_string(bound));
	return SymmetricMatrix::symmetrize(h_raw);
}

} // namespace flatlab
