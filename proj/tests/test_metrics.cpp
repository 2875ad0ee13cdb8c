#include "flatlab/experiments.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace flatlab;

namespace {

Objective quadratic(Vector curvature)
{
	Objective o;
	o.value = [curvature](std::span<const double> x) {
		double s = 0.0;
		for (std::size_t i = 0; i < x.size(); ++i)
			s += 0.5 * curvature[i] * x[i] * x[i];
		return s;
	};
	o.gradient = [curvature](std::span<const double> x) {
		Vector g(x.size());
		for (std::size_t i = 0; i < x.size(); ++i)
			g[i] = curvature[i] * x[i];
		return g;
	};
	return o;
}

// Max of (f(t) - f(0)) / (1 + f(0)) over a fine grid of the ball in one or two dimensions.
double grid_sharpness(const Objective& o, std::size_t dim, double eps)
{
	const double base = o.value(Vector(dim, 0.0));
	double best = 0.0;
	const int n = 400;
	if (dim == 1) {
		for (int i = 0; i <= n; ++i) {
			const Vector x{-eps + 2 * eps * i / n};
			best = std::max(best, (o.value(x) - base) / (1 + base));
		}
		return best;
	}
	for (int i = 0; i <= n; ++i)
		for (int j = 0; j <= n; ++j) {
			const Vector x{-eps + 2 * eps * i / n, -eps + 2 * eps * j / n};
			if (norm2(x) <= eps)
				best = std::max(best, (o.value(x) - base) / (1 + base));
		}
	return best;
}

} // namespace

TEST(EpsilonSharpness, SquareAtOrigin)
{
	SharpnessConfig cfg;
	cfg.eps = 1.0;
	const Objective o = quadratic({2.0});
	const SharpnessResult r = epsilon_sharpness(o, Vector{0.0}, cfg);
	EXPECT_NEAR(r.value, grid_sharpness(o, 1, 1.0), 1e-9);
	EXPECT_NEAR(r.value, 1.0, 1e-9);
	EXPECT_LE(norm2(r.argmax_offset), 1.0 + 1e-12);
}

TEST(EpsilonSharpness, AnisotropicQuadraticAgainstGrid)
{
	SharpnessConfig cfg;
	cfg.eps = 0.5;
	cfg.steps = 300;
	const Objective o = quadratic({3.0, 0.5});
	const double brute = grid_sharpness(o, 2, 0.5);
	const SharpnessResult r = epsilon_sharpness(o, Vector{0.0, 0.0}, cfg);
	EXPECT_LE(r.value, brute + 1e-3);
	EXPECT_GE(r.value, brute - 1e-3);
}

TEST(EpsilonSharpness, ConstantIsZero)
{
	Objective o;
	o.value = [](std::span<const double>) { return 3.0; };
	o.gradient = [](std::span<const double> x) { return Vector(x.size(), 0.0); };
	SharpnessConfig cfg;
	EXPECT_EQ(epsilon_sharpness(o, Vector{1.0, 2.0}, cfg).value, 0.0);
}

TEST(EpsilonSharpness, ValidationAndDeterminism)
{
	SharpnessConfig bad;
	bad.eps = 0.0;
	EXPECT_THROW(epsilon_sharpness(quadratic({1.0}), Vector{0.0}, bad), InvalidInput);
	SharpnessConfig sub;
	sub.subspace_dim = 3;
	EXPECT_THROW(epsilon_sharpness(quadratic({1.0, 1.0}), Vector{0.0, 0.0}, sub), InvalidInput);

	const Architecture arch{{2, 4, 1}, false};
	const TeacherStudent ts = make_teacher_student(arch, 3, 16);
	SharpnessConfig cfg;
	cfg.eps = 0.1;
	cfg.seed = 9;
	const SharpnessResult a = epsilon_sharpness(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, cfg);
	cfg.jobs = 4;
	const SharpnessResult b = epsilon_sharpness(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, cfg);
	EXPECT_EQ(a.value, b.value);
	EXPECT_EQ(a.argmax_offset, b.argmax_offset);
	EXPECT_GT(a.value, 0.0);
}

TEST(SecondOrderSharpness, Examples)
{
	EXPECT_DOUBLE_EQ(second_order_sharpness(2.0, 0.1, 0.0), 0.01);
	EXPECT_EQ(second_order_sharpness(5.0, 0.0, 1.0), 0.0);
	EXPECT_DOUBLE_EQ(second_order_sharpness(4.0, 1.0, 1.0), 1.0);
	EXPECT_THROW(second_order_sharpness(1.0, 0.1, -1.0), InvalidInput);

	// a pure quadratic is exactly its second-order expansion
	SharpnessConfig cfg;
	cfg.eps = 0.3;
	cfg.steps = 300;
	const SharpnessResult r = epsilon_sharpness(quadratic({4.0, 1.0}), Vector{0.0, 0.0}, cfg);
	EXPECT_NEAR(r.value, second_order_sharpness(4.0, 0.3, 0.0), 1e-3);
}

TEST(HessianMeasures, DiagonalExample)
{
	const SymmetricMatrix H(DenseMatrix::diagonal(Vector{5, 1, 0}));
	const HessianMeasures m = hessian_measures(H, Vector{2.0, 0.0, 5.0});
	EXPECT_NEAR(m.spectral_norm, 5.0, 1e-12);
	EXPECT_NEAR(m.trace, 6.0, 1e-12);
	EXPECT_EQ(m.counts_above, (std::vector<std::size_t>{1, 2, 0}));
	ASSERT_EQ(m.eigenvalues.size(), 3u);
	EXPECT_NEAR(m.eigenvalues[0], 5.0, 1e-12);

	const HessianMeasures z = hessian_measures(SymmetricMatrix(DenseMatrix(4, 4)), Vector{0.0});
	EXPECT_EQ(z.spectral_norm, 0.0);
	EXPECT_EQ(z.trace, 0.0);
	EXPECT_EQ(z.counts_above, (std::vector<std::size_t>{0}));
}

TEST(HessianMeasures, IndefiniteUsesMagnitude)
{
	const SymmetricMatrix H(DenseMatrix::diagonal(Vector{1, -7}));
	EXPECT_NEAR(hessian_measures(H, {}).spectral_norm, 7.0, 1e-12);
}

TEST(HessianMeasures, NetworkInvariants)
{
	SeededRng rng(50, 0);
	int checked = 0;
	for (int attempt = 0; checked < 10 && attempt < 100; ++attempt) {
		const Architecture arch{{2, 5, 1}, attempt % 2 == 1};
		const TeacherStudent ts = make_teacher_student(arch, 100 + attempt, 20);
		const ParamVector theta = random_params(arch, rng);
		SymmetricMatrix H;
		try {
			H = hessian(arch, theta, ts.data);
		} catch (const KinkProximityError&) {
			continue;
		}
		const HessianMeasures m = hessian_measures(H, {});
		double sum = 0.0, maxabs = 0.0;
		for (double l : m.eigenvalues) {
			sum += l;
			maxabs = std::max(maxabs, std::abs(l));
		}
		EXPECT_NEAR(m.trace, sum, 1e-9 * (1 + std::abs(m.trace)));
		EXPECT_NEAR(m.spectral_norm, maxabs, 1e-12 * maxabs);
		const auto pi = power_iteration([&](std::span<const double> v) { return H.apply(v); }, H.dim(), 1e-12, 100000,
		                                SeededRng(51, static_cast<std::uint64_t>(attempt)));
		EXPECT_LE(std::abs(pi.lambda_max), m.spectral_norm * (1 + 1e-9));
		EXPECT_NEAR(std::abs(pi.lambda_max), m.spectral_norm, 1e-4 * m.spectral_norm);
		++checked;
	}
	EXPECT_EQ(checked, 10);
}

TEST(VolumeCertificate, EqualBlockSizesGiveConstantVolumes)
{
	// (1,2,1): 2 weights in each block, so every box has the base volume
	const Architecture arch{{1, 2, 1}, false};
	const TeacherStudent ts = make_teacher_student(arch, 4, 16);
	VolumeParams p;
	p.boxes = 5;
	const VolumeCertificate c = volume_flatness_certificate(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, p);
	ASSERT_TRUE(c.valid);
	for (double v : c.box_volumes)
		EXPECT_NEAR(v, c.per_box_volume, 1e-12 * c.per_box_volume);
	EXPECT_NEAR(c.volume_lower_bound, 5 * c.per_box_volume, 1e-12 * c.volume_lower_bound);
}

TEST(VolumeCertificate, SingleBoxAndTeacherMonotone)
{
	const Architecture arch{{2, 4, 1}, false};
	const TeacherStudent ts = make_teacher_student(arch, 6, 32);
	VolumeParams one;
	one.boxes = 1;
	const VolumeCertificate c1 = volume_flatness_certificate(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, one);
	EXPECT_TRUE(c1.valid);
	EXPECT_EQ(c1.box_volumes.size(), 1u);
	EXPECT_NEAR(c1.volume_lower_bound, c1.per_box_volume, 1e-15);

	VolumeParams p;
	const VolumeCertificate c = volume_flatness_certificate(arch, ts.teacher, ts.data, LossKind::MeanSquaredError, p);
	ASSERT_TRUE(c.valid);
	EXPECT_TRUE(c.disjointness_verified);
	EXPECT_EQ(c.boxes_checked, p.boxes);
	for (std::size_t k = 1; k < c.box_volumes.size(); ++k)
		EXPECT_GE(c.box_volumes[k], c.box_volumes[k - 1]);
	for (double d : c.max_loss_deviation)
		EXPECT_LT(d, p.eps);
	EXPECT_GE(c.alpha, 2.0);

	const Architecture deep{{2, 3, 3, 1}, false};
	const TeacherStudent dts = make_teacher_student(deep, 1, 4);
	EXPECT_THROW(volume_flatness_certificate(deep, dts.teacher, dts.data, LossKind::MeanSquaredError, p), InvalidInput);
}

TEST(SublevelVolume, LimitsAndQuadratic)
{
	const Objective o = quadratic({2.0});  // x^2
	const Vector lo{-1.0}, hi{1.0};
	const MonteCarloFraction all = sublevel_volume_mc(o, Vector{0.0}, 1e6, lo, hi, 2000, 3);
	EXPECT_EQ(all.fraction, 1.0);
	const MonteCarloFraction none = sublevel_volume_mc(o, Vector{0.0}, 0.0, lo, hi, 2000, 3);
	EXPECT_LE(none.fraction, 1e-3);
	// x^2 < 0.25 on |x| < 0.5: half the box
	const MonteCarloFraction half = sublevel_volume_mc(o, Vector{0.0}, 0.25, lo, hi, 4000, 3);
	EXPECT_NEAR(half.fraction, 0.5, 3 * half.stderr_ + 1e-12);
	EXPECT_NEAR(half.stderr_, std::sqrt(half.fraction * (1 - half.fraction) / 4000), 1e-15);
	const MonteCarloFraction par = sublevel_volume_mc(o, Vector{0.0}, 0.25, lo, hi, 4000, 3, 4);
	EXPECT_EQ(par.fraction, half.fraction);
}

TEST(FlatnessReport, IdentityTransformGivesIdenticalReports)
{
	const Architecture arch{{2, 4, 1}, false};
	const TeacherStudent ts = make_teacher_student(arch, 8, 24);
	SeededRng rng(52, 0);
	const ParamVector theta = random_params(arch, rng);
	SharpnessConfig cfg;
	cfg.seed = 4;
	VolumeParams vp;
	const FlatnessReport a = flatness_report(arch, theta, ts.data, LossKind::MeanSquaredError, cfg, Vector{1.0}, vp);
	const ParamVector same = apply_transform(arch, theta, AlphaScaleTwoLayer{1.0}).params;
	const FlatnessReport b = flatness_report(arch, same, ts.data, LossKind::MeanSquaredError, cfg, Vector{1.0}, vp);
	EXPECT_EQ(report_csv_row(a), report_csv_row(b));
	EXPECT_EQ(a.epsilon_sharpness_offset, b.epsilon_sharpness_offset);
	if (a.hessian_trace.ok()) {
		double sum = 0.0;
		for (double l : *a.eigenvalues.value)
			sum += l;
		EXPECT_NEAR(*a.hessian_trace.value, sum, 1e-9 * (1 + std::abs(sum)));
	}
}

TEST(FlatnessReport, KinkSkipsHessianFields)
{
	// the single hidden unit sits exactly on its kink for the only example
	const Architecture arch{{1, 1, 1}, false};
	const ParamVector theta{{DenseMatrix(1, 1, Vector{1.0}), DenseMatrix(1, 1, Vector{1.0})}, std::nullopt};
	const Dataset data{{Vector{0.0}}, Vector{0.5}};
	const FlatnessReport r = flatness_report(arch, theta, data, LossKind::MeanSquaredError, SharpnessConfig{}, {}, std::nullopt);
	EXPECT_FALSE(r.hessian_spectral_norm.ok());
	EXPECT_NE(r.hessian_spectral_norm.skipped.find("kink proximity"), std::string::npos);
	EXPECT_FALSE(r.second_order_sharpness.ok());
	EXPECT_FALSE(r.volume_certificate.ok());
	EXPECT_EQ(r.volume_certificate.skipped, "not requested");
	EXPECT_EQ(r.kink_distance, 0.0);
	EXPECT_NE(report_csv_row(r).find("nan"), std::string::npos);
}
