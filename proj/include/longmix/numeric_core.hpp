#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace longmix::num {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// --- dense SPD kernels -----------------------------------------------------

// Lower Cholesky factor of a symmetric positive-definite matrix.
// Throws std::invalid_argument if A is not symmetric (tolerance 1e-10 on the
// max asymmetry) and std::runtime_error naming the pivot index if a
// non-positive pivot is hit.
Matrix cholesky_factor(const Matrix& A);

// Solves A X = B for SPD A via the hand-rolled Cholesky factorization.
Matrix cholesky_solve(const Matrix& A, const Matrix& B);
Vector cholesky_solve(const Matrix& A, const Vector& b);

// Triangular solves against a precomputed lower factor L (L Lt X = B).
Matrix cholesky_solve_factored(const Matrix& L, const Matrix& B);
Vector cholesky_solve_factored(const Matrix& L, const Vector& b);

// log |A| for SPD A, computed as 2 * sum(log diag(L)).
double logdet_spd(const Matrix& A);
double logdet_from_factor(const Matrix& L);

// --- multilayer perceptron --------------------------------------------------

// Fully connected net: ReLU hidden layers, identity scalar output.
struct MlpArchitecture {
  int input_dim = 1;
  std::vector<int> hidden;  // sizes of the hidden layers, may be empty

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  int layer_in(int l) const;
  int layer_out(int l) const;
  int param_count() const;
};

// Per-layer weights and biases. Flattening order: layer-major, weights before
// biases, row-major within each weight matrix.
struct NetworkParams {
  std::vector<Matrix> W;
  std::vector<Vector> b;

  static NetworkParams zeros(const MlpArchitecture& arch);
  Vector flatten() const;
  static NetworkParams unflatten(const MlpArchitecture& arch, const Vector& flat);
  double squared_norm() const;
  void add_scaled(const NetworkParams& other, double scale);
};

// Cached intermediates of one forward pass; act[0] is the input vector.
struct ForwardCache {
  std::vector<Vector> pre;   // pre-activations per layer
  std::vector<Vector> act;   // post-activations, act[0] = input
  double output = 0.0;
};

// Forward pass with effective parameters = params + offsets (offsets may be
// null). ReLU derivative at 0 is taken as 0 throughout.
ForwardCache mlp_forward(const MlpArchitecture& arch, const NetworkParams& params,
                         const NetworkParams* offsets, const Vector& x);

// Gradient of (error_signal * output) w.r.t. every parameter, using the cache
// from the matching forward pass. The same values apply to the shared and the
// offset parameter set.
NetworkParams mlp_backward(const MlpArchitecture& arch, const NetworkParams& params,
                           const NetworkParams* offsets, const ForwardCache& cache,
                           double error_signal);

// Batched variants used by the trainers: X holds one input per row, the
// returned gradients are summed over rows weighted by err(row).
struct BatchCache {
  std::vector<Matrix> pre;
  std::vector<Matrix> act;  // act[0] = X
  Vector output;
};
BatchCache mlp_forward_batch(const MlpArchitecture& arch, const NetworkParams& params,
                             const NetworkParams* offsets, const Matrix& X);
NetworkParams mlp_backward_batch(const MlpArchitecture& arch, const NetworkParams& params,
                                 const NetworkParams* offsets, const BatchCache& cache,
                                 const Vector& err);

// --- optimizers ---------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  Vector m, v;

  void reset(Eigen::Index size);
};

// Standard Adam update with bias correction; throws std::runtime_error naming
// `block` if a gradient entry is not finite.
void adam_step(AdamState& state, Vector& params, const Vector& grads,
               const std::string& block = "params");

// --- gradient checking ----------------------------------------------------

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), central
// differences with step 1e-5. Throws std::runtime_error on non-finite f.
double check_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                      const Vector& analytic_grad);

// --- deterministic RNG ------------------------------------------------------

// std::mt19937_64 (whose raw stream is pinned by the standard) with
// hand-rolled distributions so that seeded runs are bit-identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);
  double normal();                        // Box-Muller, one spare cached
  std::uint64_t uniform_int(std::uint64_t n);  // [0, n)

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Xavier-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases.
NetworkParams xavier_init(const MlpArchitecture& arch, Rng& rng);

}  // namespace longmix::num
