#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flatlab {

using Vector = std::vector<double>;

/// Raised when an operation is handed arguments that violate its preconditions.
class InvalidInput : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix.
class DenseMatrix {
public:
	DenseMatrix() = default;
	DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
	DenseMatrix(std::size_t rows, std::size_t cols, Vector entries);

	static DenseMatrix identity(std::size_t n);
	static DenseMatrix diagonal(std::span<const double> diag);

	std::size_t rows() const { return m_rows; }
	std::size_t cols() const { return m_cols; }
	std::size_t size() const { return m_data.size(); }

	double& operator()(std::size_t i, std::size_t j) { return m_data[i * m_cols + j]; }
	double operator()(std::size_t i, std::size_t j) const { return m_data[i * m_cols + j]; }

	std::span<double> data() { return m_data; }
	std::span<const double> data() const { return m_data; }
	const Vector& entries() const { return m_data; }

	bool all_finite() const;
	DenseMatrix transposed() const;

	bool operator==(const DenseMatrix&) const = default;

private:
	std::size_t m_rows = 0;
	std::size_t m_cols = 0;
	Vector m_data;
};

/// Dense symmetric matrix in full storage. Construction enforces
/// |A(i,j) - A(j,i)| <= 1e-10 * max(1, max|entry|).
class SymmetricMatrix {
public:
	SymmetricMatrix() = default;
	explicit SymmetricMatrix(DenseMatrix m);

	/// Averages m with its transpose; only requires m to be square and finite.
	static SymmetricMatrix symmetrize(const DenseMatrix& m);

	std::size_t dim() const { return m_mat.rows(); }
	double operator()(std::size_t i, std::size_t j) const { return m_mat(i, j); }
	const DenseMatrix& dense() const { return m_mat; }

	Vector apply(std::span<const double> v) const;

private:
	DenseMatrix m_mat;
};

/// Counter-based generator: every draw is a pure function of
/// (seed, stream_id, counter), so independent work units can each own a
/// stream without shared state and reproduce across platforms.
class SeededRng {
public:
	SeededRng(std::uint64_t seed, std::uint64_t stream_id);

	std::uint64_t seed() const { return m_seed; }
	std::uint64_t stream_id() const { return m_stream; }

	std::uint64_t next_u64();
	/// Uniform in [0, 1).
	double uniform();
	double uniform(double lo, double hi);
	/// Standard normal via Box-Muller.
	double normal();

	/// Stream derived from this one; does not advance the parent.
	SeededRng substream(std::uint64_t index) const;

private:
	std::uint64_t m_seed;
	std::uint64_t m_stream;
	std::uint64_t m_key;
	std::uint64_t m_counter = 0;
};

// ---------------------------------------------------------------------------
// vector helpers

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double norm_inf(std::span<const double> v);
/// a + s * b
Vector axpy(std::span<const double> a, double s, std::span<const double> b);

// ---------------------------------------------------------------------------
// matrix operations

double frobenius_norm(const DenseMatrix& a);
double trace(const SymmetricMatrix& a);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
Vector matvec(const DenseMatrix& a, std::span<const double> v);
/// Determinant by partial-pivot LU.
double determinant(DenseMatrix a);
/// Solves a x = b by partial-pivot LU; throws InvalidInput when singular.
Vector solve(DenseMatrix a, std::span<const double> b);

struct EigenDecomposition {
	Vector values;        // descending
	DenseMatrix vectors;  // column i belongs to values[i]
	int sweeps = 0;
};

/// Cyclic Jacobi rotations.
EigenDecomposition symmetric_eigen(const SymmetricMatrix& a);

/// Eigenvalues sorted descending, with multiplicity.
Vector symmetric_eigenspectrum(const SymmetricMatrix& a);

using MatVec = std::function<Vector(std::span<const double>)>;

struct PowerIterationResult {
	/// Signed estimate of the largest-magnitude eigenvalue. |lambda_max| is
	/// ||A v|| for the final unit iterate, hence never exceeds the spectral norm.
	double lambda_max = 0.0;
	int iters = 0;
	bool converged = false;
};

/// Power iteration for a symmetric operator, random start from rng.
/// On non-convergence the last estimate is returned with converged = false.
PowerIterationResult power_iteration(const MatVec& matvec, std::size_t dim, double tol, int max_iter,
                                     SeededRng rng);

/// Locale-independent decimal with 17 significant digits ("nan"/"inf" for
/// non-finite values).
std::string format_real(double v);

// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, count) on up to `jobs` threads and returns the
/// results in index order.
template <typename T>
std::vector<T> parallel_map(std::size_t count, int jobs, const std::function<T(std::size_t)>& fn);

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

template <typename T>
std::vector<T> parallel_map(std::size_t count, int jobs, const std::function<T(std::size_t)>& fn)
{
	std::vector<T> out(count);
	parallel_for(count, jobs, [&](std::size_t i) { out[i] = fn(i); });
	return out;
}

} // namespace flatlab
