#include "flatlab/numerics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

namespace flatlab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t x)
{
	x += kGolden;
	x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
	x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
	return x ^ (x >> 31);
}

void require_finite(const DenseMatrix& m, const char* what)
{
	if (!m.all_finite())
		throw InvalidInput(std::string(what) + ": non-finite matrix entry");
}

} // namespace

// ---------------------------------------------------------------------------
// DenseMatrix

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : m_rows(rows), m_cols(cols), m_data(rows * cols, fill)
{
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, Vector entries)
    : m_rows(rows), m_cols(cols), m_data(std::move(entries))
{
	if (m_data.size() != rows * cols)
		throw InvalidInput("DenseMatrix: entries.length " + std::to_string(m_data.size()) + " != " +
		                   std::to_string(rows) + " x " + std::to_string(cols));
}

DenseMatrix DenseMatrix::identity(std::size_t n)
{
	DenseMatrix m(n, n);
	for (std::size_t i = 0; i < n; ++i)
		m(i, i) = 1.0;
	return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> diag)
{
	DenseMatrix m(diag.size(), diag.size());
	for (std::size_t i = 0; i < diag.size(); ++i)
		m(i, i) = diag[i];
	return m;
}

bool DenseMatrix::all_finite() const
{
	return std::all_of(m_data.begin(), m_data.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix DenseMatrix::transposed() const
{
	DenseMatrix t(m_cols, m_rows);
	for (std::size_t i = 0; i < m_rows; ++i)
		for (std::size_t j = 0; j < m_cols; ++j)
			t(j, i) = (*this)(i, j);
	return t;
}

// ---------------------------------------------------------------------------
// SymmetricMatrix

SymmetricMatrix::SymmetricMatrix(DenseMatrix m) : m_mat(std::move(m))
{
	if (m_mat.rows() != m_mat.cols())
		throw InvalidInput("SymmetricMatrix: matrix is not square");
	require_finite(m_mat, "SymmetricMatrix");

	double max_abs = 0.0;
	for (double v : m_mat.data())
		max_abs = std::max(max_abs, std::abs(v));
	const double tol = 1e-10 * std::max(1.0, max_abs);
	for (std::size_t i = 0; i < m_mat.rows(); ++i)
		for (std::size_t j = i + 1; j < m_mat.cols(); ++j)
			if (std::abs(m_mat(i, j) - m_mat(j, i)) > tol)
				throw InvalidInput("SymmetricMatrix: asymmetric at (" + std::to_string(i) + ", " +
				                   std::to_string(j) + ")");
}

SymmetricMatrix SymmetricMatrix::symmetrize(const DenseMatrix& m)
{
	if (m.rows() != m.cols())
		throw InvalidInput("symmetrize: matrix is not square");
	DenseMatrix s(m.rows(), m.cols());
	for (std::size_t i = 0; i < m.rows(); ++i)
		for (std::size_t j = 0; j < m.cols(); ++j)
			s(i, j) = 0.5 * (m(i, j) + m(j, i));
	return SymmetricMatrix(std::move(s));
}

Vector SymmetricMatrix::apply(std::span<const double> v) const
{
	return matvec(m_mat, v);
}

// ---------------------------------------------------------------------------
// SeededRng

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream_id)
    : m_seed(seed), m_stream(stream_id), m_key(splitmix64(seed) ^ splitmix64(stream_id ^ 0xD1B54A32D192ED03ULL))
{
}

std::uint64_t SeededRng::next_u64()
{
	return splitmix64(m_key + kGolden * (m_counter++));
}

double SeededRng::uniform()
{
	return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi)
{
	return lo + (hi - lo) * uniform();
}

double SeededRng::normal()
{
	// 1 - u lies in (0, 1], keeping the log finite
	const double u1 = 1.0 - uniform();
	const double u2 = uniform();
	return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::substream(std::uint64_t index) const
{
	return SeededRng(m_seed, splitmix64(m_stream) + index);
}

// ---------------------------------------------------------------------------
// vector helpers

double dot(std::span<const double> a, std::span<const double> b)
{
	if (a.size() != b.size())
		throw InvalidInput("dot: length mismatch");
	double s = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i)
		s += a[i] * b[i];
	return s;
}

double norm2(std::span<const double> v)
{
	double scale = 0.0;
	for (double x : v)
		scale = std::max(scale, std::abs(x));
	if (scale == 0.0 || !std::isfinite(scale))
		return scale;
	double s = 0.0;
	for (double x : v)
		s += (x / scale) * (x / scale);
	return scale * std::sqrt(s);
}

double norm_inf(std::span<const double> v)
{
	double m = 0.0;
	for (double x : v)
		m = std::max(m, std::abs(x));
	return m;
}

Vector axpy(std::span<const double> a, double s, std::span<const double> b)
{
	if (a.size() != b.size())
		throw InvalidInput("axpy: length mismatch");
	Vector out(a.begin(), a.end());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] += s * b[i];
	return out;
}

// ---------------------------------------------------------------------------
// matrix operations

double frobenius_norm(const DenseMatrix& a)
{
	require_finite(a, "frobenius_norm");
	return norm2(a.data());
}

double trace(const SymmetricMatrix& a)
{
	double t = 0.0;
	for (std::size_t i = 0; i < a.dim(); ++i)
		t += a(i, i);
	return t;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b)
{
	if (a.cols() != b.rows())
		throw InvalidInput("matmul: inner dimension mismatch");
	DenseMatrix c(a.rows(), b.cols());
	for (std::size_t i = 0; i < a.rows(); ++i)
		for (std::size_t k = 0; k < a.cols(); ++k) {
			const double aik = a(i, k);
			if (aik == 0.0)
				continue;
			for (std::size_t j = 0; j < b.cols(); ++j)
				c(i, j) += aik * b(k, j);
		}
	return c;
}

Vector matvec(const DenseMatrix& a, std::span<const double> v)
{
	if (a.cols() != v.size())
		throw InvalidInput("matvec: dimension mismatch");
	Vector out(a.rows(), 0.0);
	for (std::size_t i = 0; i < a.rows(); ++i) {
		double s = 0.0;
		for (std::size_t j = 0; j < a.cols(); ++j)
			s += a(i, j) * v[j];
		out[i] = s;
	}
	return out;
}

namespace {

// In-place LU with partial pivoting. Returns the permutation sign, or 0 when
// a zero pivot is met.
int lu_decompose(DenseMatrix& a, std::vector<std::size_t>& perm)
{
	const std::size_t n = a.rows();
	perm.resize(n);
	std::iota(perm.begin(), perm.end(), 0);
	int sign = 1;
	for (std::size_t k = 0; k < n; ++k) {
		std::size_t p = k;
		for (std::size_t i = k + 1; i < n; ++i)
			if (std::abs(a(i, k)) > std::abs(a(p, k)))
				p = i;
		if (a(p, k) == 0.0)
			return 0;
		if (p != k) {
			for (std::size_t j = 0; j < n; ++j)
				std::swap(a(k, j), a(p, j));
			std::swap(perm[k], perm[p]);
			sign = -sign;
		}
		for (std::size_t i = k + 1; i < n; ++i) {
			a(i, k) /= a(k, k);
			const double f = a(i, k);
			for (std::size_t j = k + 1; j < n; ++j)
				a(i, j) -= f * a(k, j);
		}
	}
	return sign;
}

} // namespace

double determinant(DenseMatrix a)
{
	if (a.rows() != a.cols())
		throw InvalidInput("determinant: matrix is not square");
	require_finite(a, "determinant");
	std::vector<std::size_t> perm;
	const int sign = lu_decompose(a, perm);
	if (sign == 0)
		return 0.0;
	double det = sign;
	for (std::size_t i = 0; i < a.rows(); ++i)
		det *= a(i, i);
	return det;
}

Vector solve(DenseMatrix a, std::span<const double> b)
{
	const std::size_t n = a.rows();
	if (a.cols() != n || b.size() != n)
		throw InvalidInput("solve: dimension mismatch");
	require_finite(a, "solve");

	double scale = 0.0;
	for (double v : a.data())
		scale = std::max(scale, std::abs(v));
	std::vector<std::size_t> perm;
	if (lu_decompose(a, perm) == 0)
		throw InvalidInput("solve: singular matrix");
	for (std::size_t i = 0; i < n; ++i)
		if (std::abs(a(i, i)) <= 1e-14 * scale)
			throw InvalidInput("solve: numerically singular matrix");

	Vector x(n);
	for (std::size_t i = 0; i < n; ++i) {
		double s = b[perm[i]];
		for (std::size_t j = 0; j < i; ++j)
			s -= a(i, j) * x[j];
		x[i] = s;
	}
	for (std::size_t i = n; i-- > 0;) {
		double s = x[i];
		for (std::size_t j = i + 1; j < n; ++j)
			s -= a(i, j) * x[j];
		x[i] = s / a(i, i);
	}
	return x;
}

EigenDecomposition symmetric_eigen(const SymmetricMatrix& sym)
{
	const std::size_t n = sym.dim();
	DenseMatrix a = sym.dense();
	DenseMatrix v = DenseMatrix::identity(n);

	const double total = frobenius_norm(a);
	EigenDecomposition out;
	constexpr int kMaxSweeps = 100;
	for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
		double off = 0.0;
		for (std::size_t p = 0; p < n; ++p)
			for (std::size_t q = p + 1; q < n; ++q)
				off += a(p, q) * a(p, q);
		if (std::sqrt(2.0 * off) <= 1e-15 * total || off == 0.0)
			break;
		out.sweeps = sweep + 1;

		for (std::size_t p = 0; p < n; ++p) {
			for (std::size_t q = p + 1; q < n; ++q) {
				const double apq = a(p, q);
				if (apq == 0.0)
					continue;
				const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
				const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
				const double c = 1.0 / std::sqrt(t * t + 1.0);
				const double s = t * c;

				for (std::size_t k = 0; k < n; ++k) {
					const double akp = a(k, p);
					const double akq = a(k, q);
					a(k, p) = c * akp - s * akq;
					a(k, q) = s * akp + c * akq;
				}
				for (std::size_t k = 0; k < n; ++k) {
					const double apk = a(p, k);
					const double aqk = a(q, k);
					a(p, k) = c * apk - s * aqk;
					a(q, k) = s * apk + c * aqk;
				}
				a(p, q) = 0.0;
				a(q, p) = 0.0;
				for (std::size_t k = 0; k < n; ++k) {
					const double vkp = v(k, p);
					const double vkq = v(k, q);
					v(k, p) = c * vkp - s * vkq;
					v(k, q) = s * vkp + c * vkq;
				}
			}
		}
	}

	std::vector<std::size_t> order(n);
	std::iota(order.begin(), order.end(), 0);
	std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

	out.values.resize(n);
	out.vectors = DenseMatrix(n, n);
	for (std::size_t c = 0; c < n; ++c) {
		out.values[c] = a(order[c], order[c]);
		for (std::size_t r = 0; r < n; ++r)
			out.vectors(r, c) = v(r, order[c]);
	}
	return out;
}

Vector symmetric_eigenspectrum(const SymmetricMatrix& a)
{
	return symmetric_eigen(a).values;
}

PowerIterationResult power_iteration(const MatVec& matvec_fn, std::size_t dim, double tol, int max_iter,
                                     SeededRng rng)
{
	if (dim == 0)
		throw InvalidInput("power_iteration: dim must be >= 1");
	if (!(tol > 0.0))
		throw InvalidInput("power_iteration: tol must be > 0");

	Vector v(dim);
	for (double& x : v)
		x = rng.normal();
	const double n0 = norm2(v);
	for (double& x : v)
		x /= n0;

	PowerIterationResult res;
	double prev = -1.0;
	for (int it = 1; it <= max_iter; ++it) {
		Vector w = matvec_fn(v);
		if (w.size() != dim)
			throw InvalidInput("power_iteration: matvec returned wrong length");
		const double nrm = norm2(w);
		const double rq = dot(v, w);
		res.iters = it;
		res.lambda_max = rq < 0.0 ? -nrm : nrm;
		if (nrm == 0.0) {
			res.converged = true;
			return res;
		}
		if (prev >= 0.0 && std::abs(nrm - prev) <= tol * nrm) {
			res.converged = true;
			return res;
		}
		prev = nrm;
		for (std::size_t i = 0; i < dim; ++i)
			v[i] = w[i] / nrm;
	}
	return res;
}

std::string format_real(double v)
{
	if (std::isnan(v))
		return "nan";
	if (std::isinf(v))
		return v > 0 ? "inf" : "-inf";
	std::array<char, 64> buf{};
	const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 17);
	return std::string(buf.data(), res.ptr);
}

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn)
{
	const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
	if (workers <= 1) {
		for (std::size_t i = 0; i < count; ++i)
			fn(i);
		return;
	}

	std::atomic<std::size_t> next{0};
	std::mutex err_mutex;
	std::size_t err_index = count;
	std::exception_ptr err;

	auto worker = [&] {
		for (;;) {
			const std::size_t i = next.fetch_add(1);
			if (i >= count)
				return;
			try {
				fn(i);
			} catch (...) {
				std::lock_guard lock(err_mutex);
				// report the lowest failing index so errors are deterministic
				if (i < err_index) {
					err_index = i;
					err = std::current_exception();
				}
			}
		}
	};

	std::vector<std::thread> pool;
	pool.reserve(workers);
	for (std::size_t t = 0; t < workers; ++t)
		pool.emplace_back(worker);
	for (auto& th : pool)
		th.join();
	if (err)
		std::rethrow_exception(err);
}

} // namespace flatlab
