#include "flatlab/metrics.hpp"

#include "flatlab/transforms.hpp"

#include <algorithm>
#include <cmath>

namespace flatlab {

void SharpnessConfig::validate(std::size_t dim) const
{
	if (!(eps > 0.0) || !std::isfinite(eps))
		throw InvalidInput("sharpness: eps must be > 0");
	if (restarts < 1)
		throw InvalidInput("sharpness: restarts must be >= 1");
	if (steps < 1)
		throw InvalidInput("sharpness: steps must be >= 1");
	if (!(step_size > 0.0))
		throw InvalidInput("sharpness: step_size must be > 0");
	if (subspace_dim && (*subspace_dim < 1 || *subspace_dim > dim))
		throw InvalidInput("sharpness: subspace_dim must lie in [1, " + std::to_string(dim) + "]");
}

Objective network_objective(const Architecture& arch, const Dataset& data, LossKind kind)
{
	return {
	    [arch, &data, kind](std::span<const double> flat) { return loss(arch, unvec(flat, arch), data, kind); },
	    [arch, &data, kind](std::span<const double> flat) { return gradient(arch, unvec(flat, arch), data, kind); },
	};
}

namespace {

// Orthonormal basis of a random subspace, stored as columns.
DenseMatrix random_subspace(std::size_t n, std::size_t s, SeededRng rng)
{
	DenseMatrix basis(n, s);
	for (std::size_t c = 0; c < s; ++c) {
		Vector v(n);
		for (;;) {
			for (double& x : v)
				x = rng.normal();
			// modified Gram-Schmidt, twice for stability
			for (int pass = 0; pass < 2; ++pass)
				for (std::size_t p = 0; p < c; ++p) {
					double d = 0.0;
					for (std::size_t i = 0; i < n; ++i)
						d += basis(i, p) * v[i];
					for (std::size_t i = 0; i < n; ++i)
						v[i] -= d * basis(i, p);
				}
			const double nv = norm2(v);
			if (nv > 1e-8) {
				for (std::size_t i = 0; i < n; ++i)
					basis(i, c) = v[i] / nv;
				break;
			}
		}
	}
	return basis;
}

struct AscentOutcome {
	bool discarded = false;
	double value = 0.0;
	Vector offset;
};

} // namespace

SharpnessResult epsilon_sharpness(const Objective& objective, std::span<const double> theta, const SharpnessConfig& cfg)
{
	const std::size_t n = theta.size();
	cfg.validate(n);
	const double base = objective.value(theta);
	if (!std::isfinite(base) || base < 0.0)
		throw InvalidInput("sharpness: loss at theta must be finite and >= 0");

	const SeededRng root(cfg.seed, 0x5A5A);
	const bool sub = cfg.subspace_dim.has_value();
	const std::size_t s = sub ? *cfg.subspace_dim : n;
	const DenseMatrix basis = sub ? random_subspace(n, s, root.substream(0)) : DenseMatrix();

	auto lift = [&](const Vector& z) {
		if (!sub)
			return z;
		return matvec(basis, z);
	};
	auto project_grad = [&](const Vector& g) {
		if (!sub)
			return g;
		return matvec(basis.transposed(), g);
	};
	auto clamp = [&](Vector& z) {
		const double nz = norm2(z);
		if (nz > cfg.eps)
			for (double& x : z)
				x *= cfg.eps / nz;
	};
	auto point = [&](const Vector& z) {
		const Vector off = lift(z);
		Vector p(theta.begin(), theta.end());
		for (std::size_t i = 0; i < n; ++i)
			p[i] += off[i];
		return p;
	};

	// unit 0 starts along +gradient, units 1..restarts from random points
	auto run_unit = [&](std::size_t unit) -> AscentOutcome {
		SeededRng rng = root.substream(unit + 1);
		Vector z(s, 0.0);
		bool have_start = false;
		if (unit == 0) {
			const Vector g = project_grad(objective.gradient(theta));
			const double ng = norm2(g);
			if (ng > 0.0 && std::isfinite(ng)) {
				for (std::size_t i = 0; i < s; ++i)
					z[i] = cfg.eps * g[i] / ng;
				have_start = true;
			}
		}
		if (!have_start) {
			for (double& x : z)
				x = rng.normal();
			const double nz = norm2(z);
			const double radius = cfg.eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(s));
			for (double& x : z)
				x *= radius / nz;
		}

		double current = objective.value(point(z));
		if (!std::isfinite(current))
			return {true, 0.0, {}};
		double step = cfg.step_size * cfg.eps;
		for (int it = 0; it < cfg.steps && step > 1e-12 * cfg.eps; ++it) {
			const Vector g = project_grad(objective.gradient(point(z)));
			const double ng = norm2(g);
			if (!std::isfinite(ng))
				return {true, 0.0, {}};
			if (ng == 0.0)
				break;
			Vector cand = z;
			for (std::size_t i = 0; i < s; ++i)
				cand[i] += step * g[i] / ng;
			clamp(cand);
			const double v = objective.value(point(cand));
			if (!std::isfinite(v))
				return {true, 0.0, {}};
			if (v >= current) {
				z = std::move(cand);
				current = v;
			} else {
				step *= 0.5;
			}
		}
		return {false, (current - base) / (1.0 + base), lift(z)};
	};

	const auto outcomes = parallel_map<AscentOutcome>(static_cast<std::size_t>(cfg.restarts) + 1, cfg.jobs, run_unit);

	SharpnessResult res;
	res.argmax_offset.assign(n, 0.0);
	for (const auto& o : outcomes) {
		if (o.discarded) {
			++res.discarded_restarts;
			continue;
		}
		if (o.value > res.value) {
			res.value = o.value;
			res.argmax_offset = o.offset;
		}
	}
	return res;
}

SharpnessResult epsilon_sharpness(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                                  LossKind kind, const SharpnessConfig& cfg)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	return epsilon_sharpness(network_objective(arch, data, kind), vec(theta), cfg);
}

double second_order_sharpness(double hessian_norm, double eps, double loss_value)
{
	if (!std::isfinite(hessian_norm) || !std::isfinite(eps) || !std::isfinite(loss_value) || loss_value < 0.0)
		throw InvalidInput("second_order_sharpness: inputs must be finite with loss >= 0");
	return hessian_norm * eps * eps / (2.0 * (1.0 + loss_value));
}

HessianMeasures hessian_measures(const SymmetricMatrix& H, std::span<const double> thresholds)
{
	HessianMeasures m;
	m.eigenvalues = symmetric_eigenspectrum(H);
	for (double l : m.eigenvalues)
		m.spectral_norm = std::max(m.spectral_norm, std::abs(l));
	m.trace = trace(H);
	for (double t : thresholds)
		m.counts_above.push_back(static_cast<std::size_t>(
		    std::count_if(m.eigenvalues.begin(), m.eigenvalues.end(), [t](double l) { return l > t; })));
	return m;
}

// ---------------------------------------------------------------------------
// volume certificate

VolumeCertificate volume_flatness_certificate(const Architecture& arch, const ParamVector& theta, const Dataset& data,
                                              LossKind kind, const VolumeParams& params)
{
	validate_params(arch, theta);
	validate_dataset(arch, data);
	if (arch.depth() != 2)
		throw InvalidInput("volume certificate: requires K = 2");
	if (!(params.eps > 0.0))
		throw InvalidInput("volume certificate: eps must be > 0");
	if (params.boxes < 1 || params.samples_per_box < 1)
		throw InvalidInput("volume certificate: boxes and samples_per_box must be >= 1");

	const FlatIndex idx(arch);
	const Vector center = vec(theta);
	const std::size_t n = center.size();
	const double base_loss = loss(arch, theta, data, kind);
	const SeededRng root(params.seed, 0xB0C5);

	auto max_deviation = [&](double r, double scale, SeededRng rng) {
		double worst = -std::numeric_limits<double>::infinity();
		Vector p(n);
		for (std::size_t s = 0; s < params.samples_per_box; ++s) {
			for (std::size_t i = 0; i < n; ++i)
				p[i] = center[i] + rng.uniform(-r, r);
			ParamVector pt = unvec(p, arch);
			if (scale != 1.0)
				pt = alpha_scale_two_layer(pt, scale);
			worst = std::max(worst, loss(arch, pt, data, kind) - base_loss);
		}
		return worst;
	};

	VolumeCertificate cert;
	double r = params.r;
	// shrink the base box until sampling finds it inside the eps-sublevel set
	constexpr int kMaxShrinks = 60;
	for (;;) {
		disjoint_box_alpha(theta.weights[0], r);  // validates r < ||theta1||_inf
		if (max_deviation(r, 1.0, root.substream(1000 + static_cast<std::uint64_t>(cert.r_shrinks))) < params.eps)
			break;
		if (++cert.r_shrinks > kMaxShrinks)
			throw InvalidInput("volume certificate: no box radius keeps the loss within eps");
		r *= 0.5;
	}
	cert.r = r;

	// per-step volume factor of T_alpha is alpha^d
	std::ptrdiff_t d = static_cast<std::ptrdiff_t>(idx.weight_size(0)) - static_cast<std::ptrdiff_t>(idx.weight_size(1));
	if (idx.has_bias())
		d += static_cast<std::ptrdiff_t>(idx.bias_size(0));
	double alpha = disjoint_box_alpha(theta.weights[0], r);
	if (d < 0)
		alpha = 1.0 / alpha;
	cert.alpha = alpha;
	cert.per_box_volume = std::pow(2.0 * r, static_cast<double>(n));

	cert.boxes_checked = params.boxes;
	cert.max_loss_deviation = parallel_map<double>(params.boxes, params.jobs, [&](std::size_t k) {
		return max_deviation(r, std::pow(alpha, static_cast<double>(k)), root.substream(k));
	});
	double total = 0.0;
	for (std::size_t k = 0; k < params.boxes; ++k) {
		const double vol = cert.per_box_volume * std::pow(alpha, static_cast<double>(static_cast<std::ptrdiff_t>(k) * d));
		cert.box_volumes.push_back(vol);
		total += vol;
	}
	cert.volume_lower_bound = total;

	// boxes are disjoint when the |.|-intervals of the largest first-layer
	// coordinate never overlap between consecutive boxes
	const double m = norm_inf(theta.weights[0].data());
	bool disjoint = true;
	for (std::size_t k = 0; k + 1 < params.boxes; ++k) {
		const double sk = std::pow(alpha, static_cast<double>(k));
		const double sk1 = std::pow(alpha, static_cast<double>(k + 1));
		const double lo_k = sk * (m - r), hi_k = sk * (m + r);
		const double lo_k1 = sk1 * (m - r), hi_k1 = sk1 * (m + r);
		if (!(hi_k < lo_k1 || hi_k1 < lo_k))
			disjoint = false;
	}
	cert.disjointness_verified = disjoint;

	cert.valid = disjoint;
	for (std::size_t k = 0; k < params.boxes; ++k)
		if (!(cert.max_loss_deviation[k] < params.eps)) {
			cert.valid = false;
			cert.failed_box = k;
			break;
		}
	return cert;
}

MonteCarloFraction sublevel_volume_mc(const Objective& objective, std::span<const double> theta, double eps,
                                      std::span<const double> lower, std::span<const double> upper,
                                      std::size_t samples, std::uint64_t seed, int jobs)
{
	const std::size_t n = theta.size();
	if (lower.size() != n || upper.size() != n)
		throw InvalidInput("sublevel_volume_mc: box dimension mismatch");
	for (std::size_t i = 0; i < n; ++i)
		if (!(lower[i] <= theta[i] && theta[i] <= upper[i]))
			throw InvalidInput("sublevel_volume_mc: box does not contain theta");
	if (samples == 0)
		throw InvalidInput("sublevel_volume_mc: samples must be >= 1");

	const double threshold = objective.value(theta) + eps;
	const SeededRng root(seed, 0x3C);
	constexpr std::size_t kBatch = 256;
	const std::size_t batches = (samples + kBatch - 1) / kBatch;
	const auto hits = parallel_map<std::size_t>(batches, jobs, [&](std::size_t b) {
		SeededRng rng = root.substream(b);
		const std::size_t count = std::min(kBatch, samples - b * kBatch);
		std::size_t inside = 0;
		Vector p(n);
		for (std::size_t s = 0; s < count; ++s) {
			for (std::size_t i = 0; i < n; ++i)
				p[i] = rng.uniform(lower[i], upper[i]);
			if (objective.value(p) < threshold)
				++inside;
		}
		return inside;
	});
	std::size_t inside = 0;
	for (std::size_t h : hits)
		inside += h;
	MonteCarloFraction out;
	out.fraction = static_cast<double>(inside) / static_cast<double>(samples);
	out.stderr_ = std::sqrt(out.fraction * (1.0 - out.fraction) / static_cast<double>(samples));
	return out;
}

// ---------------------------------------------------------------------------
// report

FlatnessReport flatness_report(const Architecture& arch, const ParamVector& theta, const Dataset& data, LossKind kind,
                               const SharpnessConfig& cfg, std::span<const double> thresholds,
                               const std::optional<VolumeParams>& volume)
{
	FlatnessReport rep;
	rep.loss = loss(arch, theta, data, kind);
	rep.gradient_norm = norm2(gradient(arch, theta, data, kind));
	rep.kink_distance = kink_distance(arch, theta, data);
	rep.thresholds.assign(thresholds.begin(), thresholds.end());

	try {
		const SymmetricMatrix H = hessian(arch, theta, data, kind);
		const HessianMeasures hm = hessian_measures(H, thresholds);
		rep.hessian_spectral_norm.value = hm.spectral_norm;
		rep.hessian_trace.value = hm.trace;
		rep.eigenvalues.value = hm.eigenvalues;
		rep.eigencount_above.value = hm.counts_above;
		rep.second_order_sharpness.value = second_order_sharpness(hm.spectral_norm, cfg.eps, rep.loss);
	} catch (const KinkProximityError& e) {
		const std::string why = std::string("kink proximity: ") + e.what();
		rep.hessian_spectral_norm.skipped = why;
		rep.hessian_trace.skipped = why;
		rep.eigenvalues.skipped = why;
		rep.eigencount_above.skipped = why;
		rep.second_order_sharpness.skipped = why;
	}

	const SharpnessResult sharp = epsilon_sharpness(arch, theta, data, kind, cfg);
	rep.epsilon_sharpness = sharp.value;
	rep.epsilon_sharpness_offset = sharp.argmax_offset;

	if (!volume)
		rep.volume_certificate.skipped = "not requested";
	else if (arch.depth() != 2)
		rep.volume_certificate.skipped = "requires K = 2";
	else {
		try {
			rep.volume_certificate.value = volume_flatness_certificate(arch, theta, data, kind, *volume);
		} catch (const InvalidInput& e) {
			rep.volume_certificate.skipped = e.what();
		}
	}
	return rep;
}

std::string report_csv_row(const FlatnessReport& r)
{
	auto opt = [](const Measured<double>& m) { return m.ok() ? format_real(*m.value) : std::string("nan"); };
	std::string row;
	row += format_real(r.loss) + ",";
	row += format_real(r.gradient_norm) + ",";
	row += format_real(r.kink_distance) + ",";
	row += opt(r.hessian_spectral_norm) + ",";
	row += opt(r.hessian_trace) + ",";
	row += format_real(r.epsilon_sharpness) + ",";
	row += opt(r.second_order_sharpness) + ",";
	row += r.volume_certificate.ok() ? format_real(r.volume_certificate.value->volume_lower_bound) : std::string("nan");
	return row;
}

} // namespace flatlab
