#include "flatlab/experiments.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace flatlab;

namespace {

Vector random_inputs(std::size_t n, SeededRng& rng)
{
	Vector x(n);
	for (double& v : x)
		v = rng.uniform(-2, 2);
	return x;
}

Vector product_one(std::size_t depth, SeededRng& rng)
{
	Vector a(depth);
	double prod = 1.0;
	for (std::size_t k = 0; k + 1 < depth; ++k) {
		a[k] = std::exp(rng.uniform(-2, 2));
		prod *= a[k];
	}
	a.back() = 1.0 / prod;
	return a;
}

// Matrix of the linear map vec(theta) -> vec(T(theta)), one column per basis vector.
DenseMatrix linear_map_matrix(const Architecture& arch, double alpha)
{
	const std::size_t n = FlatIndex(arch).total_dim();
	DenseMatrix m(n, n);
	for (std::size_t j = 0; j < n; ++j) {
		Vector e(n, 0.0);
		e[j] = 1.0;
		const Vector col = vec(alpha_scale_two_layer(unvec(e, arch), alpha));
		for (std::size_t i = 0; i < n; ++i)
			m(i, j) = col[i];
	}
	return m;
}

} // namespace

TEST(AlphaScale, TwoLayerExample)
{
	const ParamVector theta{{DenseMatrix(1, 2, Vector{1, 2}), DenseMatrix(2, 1, Vector{3, 4})}, std::nullopt};
	const ParamVector t = alpha_scale_two_layer(theta, 2.0);
	EXPECT_EQ(t.weights[0].entries(), (Vector{2, 4}));
	EXPECT_EQ(t.weights[1].entries(), (Vector{1.5, 2}));
	EXPECT_EQ(alpha_scale_two_layer(theta, 1.0), theta);
	EXPECT_THROW(alpha_scale_two_layer(theta, 0.0), InvalidInput);
}

TEST(AlphaScale, TwoLayerForwardInvariance)
{
	SeededRng rng(31, 0);
	const Architecture arch{{3, 5, 1}, false};
	const ParamVector theta = random_params(arch, rng);
	const ParamVector t = alpha_scale_two_layer(theta, 7.0);
	for (int i = 0; i < 100; ++i) {
		const Vector x = random_inputs(3, rng);
		const double f = forward(arch, theta, x);
		EXPECT_LE(std::abs(forward(arch, t, x) - f), 1e-9 * (1 + std::abs(f)));
	}
}

TEST(AlphaScale, DeepExampleAndInvariance)
{
	const Architecture arch{{2, 3, 3, 1}, false};
	SeededRng rng(32, 0);
	const ParamVector theta = random_params(arch, rng);
	const ParamVector t = alpha_scale_deep(theta, Vector{2, 1, 0.5});
	for (std::size_t i = 0; i < theta.weights[0].size(); ++i)
		EXPECT_EQ(t.weights[0].data()[i], 2 * theta.weights[0].data()[i]);
	EXPECT_EQ(t.weights[1], theta.weights[1]);
	for (std::size_t i = 0; i < theta.weights[2].size(); ++i)
		EXPECT_EQ(t.weights[2].data()[i], 0.5 * theta.weights[2].data()[i]);
	EXPECT_EQ(alpha_scale_deep(theta, Vector{1, 1, 1}), theta);
	EXPECT_THROW(alpha_scale_deep(theta, Vector{2, 1, 1}), InvalidInput);
	EXPECT_THROW(alpha_scale_deep(theta, Vector{2, 0.5}), InvalidInput);

	const ParamVector r = alpha_scale_deep(theta, product_one(3, rng));
	for (int i = 0; i < 100; ++i) {
		const Vector x = random_inputs(2, rng);
		const double f = forward(arch, theta, x);
		EXPECT_LE(std::abs(forward(arch, r, x) - f), 1e-9 * std::max(std::abs(f), 1e-300));
	}
}

TEST(AlphaScale, BiasAwareExample)
{
	const Architecture arch{{2, 3, 1}, true};
	SeededRng rng(33, 0);
	const ParamVector theta = random_params(arch, rng);
	const ParamVector t = alpha_scale_with_bias(theta, Vector{4, 0.25});
	for (std::size_t j = 0; j < 3; ++j)
		EXPECT_EQ((*t.biases)[0][j], 4 * (*theta.biases)[0][j]);
	EXPECT_EQ((*t.biases)[1][0], (*theta.biases)[1][0]);
	EXPECT_EQ(alpha_scale_with_bias(theta, Vector{1, 1}), theta);
	EXPECT_EQ(alpha_scale_two_layer(theta, 4.0), t);

	const Architecture deep{{2, 3, 2, 1}, true};
	const ParamVector dt = random_params(deep, rng);
	const ParamVector moved = alpha_scale_with_bias(dt, product_one(3, rng));
	for (int i = 0; i < 100; ++i) {
		const Vector x = random_inputs(2, rng);
		const double f = forward(deep, dt, x);
		EXPECT_LE(std::abs(forward(deep, moved, x) - f), 1e-9 * (1 + std::abs(f)));
	}
}

TEST(AlphaScale, GroupLaw)
{
	SeededRng rng(34, 0);
	const Architecture arch{{2, 4, 1}, true};
	for (int t = 0; t < 50; ++t) {
		const ParamVector theta = random_params(arch, rng);
		const double a = std::exp(rng.uniform(-3, 3)), b = std::exp(rng.uniform(-3, 3));
		const Vector composed = vec(alpha_scale_two_layer(alpha_scale_two_layer(theta, b), a));
		const Vector direct = vec(alpha_scale_two_layer(theta, a * b));
		for (std::size_t i = 0; i < direct.size(); ++i)
			EXPECT_NEAR(composed[i], direct[i], 1e-12 * std::abs(direct[i]));
	}
}

TEST(AlphaScale, VolumeChangeDeterminant)
{
	// determinant of the flat linear map is alpha^(size of block 1 - size of block 2)
	for (const Architecture& arch : {Architecture{{2, 3, 1}, false}, Architecture{{1, 4, 1}, false},
	                                 Architecture{{3, 2, 1}, false}, Architecture{{2, 2, 1}, true}}) {
		const FlatIndex idx(arch);
		const double alpha = 1.7;
		double expo = static_cast<double>(idx.weight_size(0)) - static_cast<double>(idx.weight_size(1));
		if (arch.use_bias)
			expo += static_cast<double>(idx.bias_size(0));
		ASSERT_LE(idx.total_dim(), 12u);
		const double det = determinant(linear_map_matrix(arch, alpha));
		EXPECT_NEAR(det, std::pow(alpha, expo), 1e-12 * std::pow(alpha, std::abs(expo)));
	}
}

TEST(DiagonalScaling, Examples)
{
	const Architecture arch{{1, 1, 1}, false};
	EXPECT_EQ(diagonal_scaling(arch, Vector{2, 0.5}).multipliers, (Vector{0.5, 2}));
	EXPECT_EQ(diagonal_scaling(arch, Vector{1, 1}).multipliers, (Vector{1, 1}));

	const Architecture biased{{1, 2, 1}, true};
	EXPECT_EQ(diagonal_scaling(biased, Vector{4, 0.25}).multipliers, (Vector{0.25, 0.25, 4, 4, 0.25, 0.25, 1}));

	// applying D twice equals D with squared factors
	SeededRng rng(35, 0);
	const Architecture deep{{2, 3, 2, 1}, true};
	const Vector a = product_one(3, rng);
	Vector a2 = a;
	for (double& x : a2)
		x *= x;
	const Vector d1 = diagonal_scaling(deep, a).multipliers, d2 = diagonal_scaling(deep, a2).multipliers;
	for (std::size_t i = 0; i < d1.size(); ++i)
		EXPECT_NEAR(d1[i] * d1[i], d2[i], 1e-14 * d2[i]);
}

TEST(DiagonalScaling, PredictedDerivativesExamples)
{
	const Architecture arch{{1, 1, 1}, false};
	const DiagonalScaling d = diagonal_scaling(arch, Vector{2, 0.5});
	EXPECT_EQ(predicted_gradient(Vector{3, 5}, d), (Vector{1.5, 10}));
	EXPECT_EQ(predicted_gradient(Vector{0, 0}, d), (Vector{0, 0}));
	const SymmetricMatrix H(DenseMatrix::diagonal(Vector{8, 0}));
	EXPECT_EQ(predicted_hessian(H, d).dense(), DenseMatrix::diagonal(Vector{2, 0}));
	EXPECT_EQ(predicted_hessian(H, diagonal_scaling(arch, Vector{1, 1})).dense(), H.dense());
}

TEST(DiagonalScaling, LawsAtRandomSmoothPoints)
{
	SeededRng rng(36, 0);
	int checked = 0;
	for (int attempt = 0; checked < 30 && attempt < 300; ++attempt) {
		const Architecture arch = attempt % 2 ? Architecture{{2, 3, 3, 1}, true} : Architecture{{2, 4, 1}, false};
		const TeacherStudent ts = make_teacher_student(arch, rng.next_u64(), 12);
		const ParamVector theta = random_params(arch, rng);
		const Vector a = product_one(arch.depth(), rng);
		const ParamVector moved = apply_transform(arch, theta, AlphaScaleDeep{a}).params;
		const DiagonalScaling d = diagonal_scaling(arch, a);
		SymmetricMatrix H, Hm;
		try {
			H = hessian(arch, theta, ts.data);
			Hm = hessian(arch, moved, ts.data);
		} catch (const KinkProximityError&) {
			continue;
		}
		const Vector ag = gradient(arch, moved, ts.data);
		EXPECT_LE(norm2(axpy(predicted_gradient(gradient(arch, theta, ts.data), d), -1.0, ag)), 1e-8 * norm2(ag));
		DenseMatrix diff = predicted_hessian(H, d).dense();
		for (std::size_t i = 0; i < diff.size(); ++i)
			diff.data()[i] -= Hm.dense().data()[i];
		EXPECT_LE(frobenius_norm(diff), 1e-4 * frobenius_norm(Hm.dense()));
		++checked;
	}
	EXPECT_EQ(checked, 30);
}

TEST(Sharpening, ThetaOneDiagonalEntry)
{
	const Architecture arch{{1, 1, 1}, false};
	const SymmetricMatrix H(DenseMatrix::diagonal(Vector{1, 0}));
	const SharpeningResult r = sharpening_alpha(arch, H, 100.0);
	EXPECT_LE(r.alpha, 0.1);
	EXPECT_GE(r.certified_norm, 100.0);
	const SymmetricMatrix after = predicted_hessian(H, diagonal_scaling(arch, outer_pair_alphas(2, r.alpha)));
	EXPECT_GE(symmetric_eigenspectrum(after).front(), 100.0);
}

TEST(Sharpening, AlreadySharpAndZero)
{
	const Architecture arch{{1, 1, 1}, false};
	const SharpeningResult r = sharpening_alpha(arch, SymmetricMatrix(DenseMatrix::diagonal(Vector{50, 1})), 10.0);
	EXPECT_EQ(r.alpha, 1.0);
	EXPECT_EQ(r.halvings, 0);
	EXPECT_THROW(sharpening_alpha(arch, SymmetricMatrix(DenseMatrix(2, 2)), 10.0), ZeroHessianError);
	// only the last block curves: alpha grows instead
	const SharpeningResult up = sharpening_alpha(arch, SymmetricMatrix(DenseMatrix::diagonal(Vector{0, 1})), 1e4);
	EXPECT_GT(up.alpha, 1.0);
	EXPECT_GE(up.certified_norm, 1e4);
}

TEST(Sharpening, RandomPsdMillion)
{
	SeededRng rng(37, 0);
	const Architecture arch{{2, 3, 1}, false};
	const std::size_t n = FlatIndex(arch).total_dim();
	for (int t = 0; t < 10; ++t) {
		DenseMatrix b(n, n);
		for (double& x : b.data())
			x = rng.normal();
		const SymmetricMatrix H = SymmetricMatrix::symmetrize(matmul(b, b.transposed()));
		const SharpeningResult r = sharpening_alpha(arch, H, 1e6);
		const Vector ev = symmetric_eigenspectrum(predicted_hessian(H, diagonal_scaling(arch, outer_pair_alphas(2, r.alpha))));
		EXPECT_GE(ev.front(), 1e6);
	}
}

TEST(EpsilonSharpAlpha, Examples)
{
	const ParamVector theta{{DenseMatrix(1, 2, Vector{0, 4}), DenseMatrix(2, 1, Vector{1, 1})}, std::nullopt};
	EXPECT_EQ(epsilon_sharp_alpha(theta, 1.0), 0.25);
	EXPECT_EQ(epsilon_sharp_alpha(theta, 4.0), 1.0);
	SeededRng rng(38, 0);
	const Architecture arch{{3, 5, 1}, false};
	for (int t = 0; t < 50; ++t) {
		const ParamVector p = random_params(arch, rng);
		const double eps = std::exp(rng.uniform(-5, 1));
		const double a = epsilon_sharp_alpha(p, eps);
		EXPECT_NEAR(a * norm2(p.weights[0].data()), eps, 1e-12 * eps);
	}
}

TEST(DisjointBoxAlpha, ExamplesAndIntervals)
{
	EXPECT_EQ(disjoint_box_alpha(DenseMatrix(1, 2, Vector{-3, 1}), 1.0), 4.0);
	EXPECT_NEAR(disjoint_box_alpha(DenseMatrix(1, 1, Vector{2}), 1e-12), 2.0, 1e-11);
	EXPECT_THROW(disjoint_box_alpha(DenseMatrix(1, 1, Vector{2}), 2.0), InvalidInput);
	SeededRng rng(39, 0);
	for (int t = 0; t < 200; ++t) {
		DenseMatrix w(2, 3);
		for (double& x : w.data())
			x = rng.uniform(-2, 2);
		const double m = norm_inf(w.data());
		const double r = rng.uniform(0.01, 0.99) * m;
		const double a = disjoint_box_alpha(w, r);
		// image interval lies strictly above the base interval
		EXPECT_GT(a * (m - r), m + r);
	}
}

TEST(ManyDirections, AlphasShape)
{
	const Architecture arch{{3, 4, 4, 1}, false};
	const Vector a = many_directions_alphas(arch, 10.0);
	EXPECT_EQ(a, (Vector{0.1, 0.1, 100.0}));
}

TEST(WeightNorm, ExampleAndInvariance)
{
	WeightNormParams p;
	p.scales = {2.0};
	p.directions = {DenseMatrix(2, 1, Vector{3, 4})};
	const ParamVector w = weight_norm_realize(p);
	EXPECT_NEAR(w.weights[0](0, 0), 1.2, 1e-15);
	EXPECT_NEAR(w.weights[0](1, 0), 1.6, 1e-15);
	const ParamVector w10 = weight_norm_realize(weight_norm_scale(p, 0, 10.0));
	EXPECT_NEAR(w10.weights[0](0, 0), 1.2, 1e-15);
	EXPECT_NEAR(w10.weights[0](1, 0), 1.6, 1e-15);
	EXPECT_EQ(weight_norm_realize(weight_norm_scale(p, 0, 1.0)), w);
	const ParamVector neg = weight_norm_realize(weight_norm_scale(p, 0, -1.0));
	EXPECT_NEAR(neg.weights[0](0, 0), -1.2, 1e-15);

	SeededRng rng(40, 0);
	const Architecture arch{{2, 3, 1}, true};
	for (int t = 0; t < 100; ++t) {
		const ParamVector theta = random_params(arch, rng);
		const ParamVector back = weight_norm_realize(
		    weight_norm_scale(weight_norm_decompose(theta), t % 2, std::exp(rng.uniform(-4, 4))));
		const Vector a = vec(theta), b = vec(back);
		for (std::size_t i = 0; i < a.size(); ++i)
			EXPECT_NEAR(a[i], b[i], 1e-12);
	}
}

TEST(Radial, Examples)
{
	const Radial spec{{0.0, 0.0}, 1.0, 0.3, 0.6};
	EXPECT_NEAR(radial_psi(0.6, spec), 0.3, 1e-15);
	const Vector on_rhat = radial_forward(Vector{0.6, 0.0}, spec);
	EXPECT_NEAR(norm2(on_rhat), 0.3, 1e-15);
	const Vector far{1.5, -0.2};
	EXPECT_EQ(radial_forward(far, spec), far);
	EXPECT_EQ(radial_forward(Vector{0.0, 0.0}, spec), (Vector{0.0, 0.0}));
	EXPECT_NEAR(radial_psi(1.0, spec), 1.0, 1e-15);
}

TEST(Radial, JacobianAndRoundTrip)
{
	SeededRng rng(41, 0);
	for (int t = 0; t < 300; ++t) {
		const std::size_t n = 1 + t % 4;
		Radial spec;
		spec.center = random_inputs(n, rng);
		spec.delta = rng.uniform(0.5, 2);
		spec.rho = spec.delta * rng.uniform(0.1, 0.9);
		spec.r_hat = spec.delta * rng.uniform(0.1, 0.9);
		Vector theta = spec.center;
		Vector dir = random_inputs(n, rng);
		const double radius = spec.delta * rng.uniform(0.0, 1.5);
		const double nd = norm2(dir);
		for (std::size_t i = 0; i < n; ++i)
			theta[i] += radius * dir[i] / nd;
		const Vector back = radial_inverse(radial_forward(theta, spec), spec);
		for (std::size_t i = 0; i < n; ++i)
			EXPECT_NEAR(back[i], theta[i], 1e-10);
		if (std::abs(radius - spec.r_hat) < 1e-4 || std::abs(radius - spec.delta) < 1e-4)
			continue;
		const DenseMatrix J = radial_jacobian(theta, spec);
		for (std::size_t j = 0; j < n; ++j) {
			Vector p = theta, m = theta;
			p[j] += 1e-7;
			m[j] -= 1e-7;
			const Vector fp = radial_forward(p, spec), fm = radial_forward(m, spec);
			for (std::size_t i = 0; i < n; ++i)
				EXPECT_NEAR(J(i, j), (fp[i] - fm[i]) / 2e-7, 1e-5);
		}
	}
}

TEST(PowerStretch, Examples)
{
	const PowerStretch id{0.0, 0.0, 0.0};
	for (double t : {-3.0, -0.5, 0.0, 0.25, 7.0})
		EXPECT_EQ(power_stretch_forward(t, id), t);
	const PowerStretch s{1.5, 0.7, 0.2};
	EXPECT_EQ(power_stretch_forward(1.5, s), 0.0);
	EXPECT_THROW(power_stretch_forward(0.0, PowerStretch{0, -0.6, 0}), InvalidInput);
}

TEST(PowerStretch, DerivativesAndMonotonicity)
{
	SeededRng rng(42, 0);
	for (int t = 0; t < 50; ++t) {
		const PowerStretch s{rng.uniform(-1, 1), rng.uniform(-0.4, 1.5), rng.uniform(0.05, 1.0)};
		double prev = -INFINITY;
		for (int i = 0; i < 1000; ++i) {
			const double th = -3.0 + 6.0 * i / 999.0;
			const double v = power_stretch_forward(th, s);
			EXPECT_GT(v, prev);
			prev = v;
		}
		for (int k = 0; k < 20; ++k) {
			const double th = rng.uniform(-3, 3), h = 1e-6;
			const double d1 = (power_stretch_forward(th + h, s) - power_stretch_forward(th - h, s)) / (2 * h);
			EXPECT_NEAR(power_stretch_derivative(th, s), d1, 1e-6 * std::max(1.0, std::abs(d1)));
			const double d2 = (power_stretch_derivative(th + h, s) - power_stretch_derivative(th - h, s)) / (2 * h);
			EXPECT_NEAR(power_stretch_second_derivative(th, s), d2, 1e-5 * std::max(1.0, std::abs(d2)));
			EXPECT_NEAR(power_stretch_inverse(power_stretch_forward(th, s), s), th, 1e-12);
		}
	}
}

TEST(InputAffine, Examples)
{
	const Architecture arch{{2, 3, 1}, true};
	SeededRng rng(43, 0);
	const ParamVector theta = random_params(arch, rng);
	const Vector u{0.3, -0.7};
	const Vector dfdx = input_gradient(arch, theta, u);
	const InputAffine id{DenseMatrix::identity(2), Vector{0, 0}};
	EXPECT_EQ(preprocessed_input_gradient(dfdx, id, u), dfdx);
	const InputAffine twice{DenseMatrix::diagonal(Vector{2, 2}), Vector{0, 0}};
	const Vector g2 = preprocessed_input_gradient(input_gradient(arch, theta, input_affine_apply(u, twice)), twice, u);
	const Vector direct = input_gradient(arch, theta, input_affine_apply(u, twice));
	EXPECT_NEAR(g2[0], 2 * direct[0], 1e-15);
	EXPECT_NEAR(g2[1], 2 * direct[1], 1e-15);
}

TEST(InputAffine, FiniteDifferencesAndFolding)
{
	SeededRng rng(44, 0);
	const Architecture arch{{3, 4, 1}, true};
	for (int t = 0; t < 50; ++t) {
		const ParamVector theta = random_params(arch, rng);
		InputAffine spec{DenseMatrix(3, 3), random_inputs(3, rng)};
		for (double& x : spec.matrix.data())
			x = rng.uniform(-1, 1);
		for (std::size_t i = 0; i < 3; ++i)
			spec.matrix(i, i) += 2.0;
		const Vector u = random_inputs(3, rng);
		const Vector g = preprocessed_input_gradient(input_gradient(arch, theta, input_affine_apply(u, spec)), spec, u);
		const ParamVector folded = fold_input_affine(arch, theta, spec);
		EXPECT_NEAR(forward(arch, folded, u), forward(arch, theta, input_affine_apply(u, spec)), 1e-12);
		for (std::size_t j = 0; j < 3; ++j) {
			Vector p = u, m = u;
			p[j] += 1e-6;
			m[j] -= 1e-6;
			const double fd = (forward(arch, theta, input_affine_apply(p, spec)) -
			                   forward(arch, theta, input_affine_apply(m, spec))) / 2e-6;
			EXPECT_NEAR(g[j], fd, 1e-5);
		}
		const Vector back = input_affine_invert(input_affine_apply(u, spec), spec);
		for (std::size_t i = 0; i < 3; ++i)
			EXPECT_NEAR(back[i], u[i], 1e-12);
	}
	const Architecture nobias{{2, 2, 1}, false};
	EXPECT_THROW(fold_input_affine(nobias, zero_params(nobias), InputAffine{DenseMatrix::identity(2), Vector{1, 0}}),
	             InvalidInput);
}

TEST(ApplyTransform, DispatchAndFlags)
{
	SeededRng rng(45, 0);
	const Architecture arch{{2, 3, 1}, true};
	const ParamVector theta = random_params(arch, rng);
	EXPECT_EQ(apply_transform(arch, theta, AlphaScaleDeep{{2.0, 0.5}}).params, alpha_scale_with_bias(theta, Vector{2, 0.5}));
	EXPECT_TRUE(apply_transform(arch, theta, WeightNormScale{0, 3.0}).flags.empty());
	EXPECT_FALSE(apply_transform(arch, theta, WeightNormScale{0, -3.0}).flags.empty());
	EXPECT_FALSE(apply_transform(arch, theta, PowerStretch{0, 0.5, 0.1}).flags.empty());
	EXPECT_TRUE(is_observational_equivalence(AlphaScaleTwoLayer{3.0}));
	EXPECT_FALSE(is_observational_equivalence(WeightNormScale{0, -1.0}));
	EXPECT_FALSE(is_observational_equivalence(Radial{{0.0}, 1.0, 0.5, 0.5}));
	EXPECT_EQ(transform_kind(Radial{{0.0}, 1.0, 0.5, 0.5}), "radial");
}

TEST(GradientBlowUp, LogLogSlope)
{
	SeededRng rng(46, 0);
	const Architecture arch{{2, 8, 1}, false};
	const TeacherStudent ts = make_teacher_student(arch, 5, 32);
	const ParamVector theta = random_params(arch, rng);
	const Vector g = gradient(arch, theta, ts.data);
	const Vector alphas{1, 1e-1, 1e-2, 1e-3, 1e-4};
	double sx = 0, sy = 0, sxx = 0, sxy = 0;
	for (double a : alphas) {
		const double x = std::log10(a);
		const double y = std::log10(norm2(predicted_gradient(g, diagonal_scaling(arch, outer_pair_alphas(2, a)))));
		sx += x;
		sy += y;
		sxx += x * x;
		sxy += x * y;
	}
	const double n = 5.0;
	const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
	EXPECT_NEAR(slope, -1.0, 0.05);
}
