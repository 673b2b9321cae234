#include "longmix/numeric_core.hpp"

#include <cmath>
#include <stdexcept>

namespace longmix::num {

// --- dense SPD kernels -------------------------------------------------------

Matrix cholesky_factor(const Matrix& A) {
  const Eigen::Index n = A.rows();
  if (A.cols() != n) throw std::invalid_argument("cholesky: matrix not square");
  double asym = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      asym = std::max(asym, std::abs(A(i, j) - A(j, i)));
  if (asym > 1e-10)
    throw std::invalid_argument("cholesky: matrix not symmetric (max asymmetry " +
                                std::to_string(asym) + ")");
  Matrix L = Matrix::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    double d = A(k, k);
    for (Eigen::Index j = 0; j < k; ++j) d -= L(k, j) * L(k, j);
    if (!(d > 0.0))
      throw std::runtime_error("cholesky: non-positive-definite at pivot " +
                               std::to_string(k));
    L(k, k) = std::sqrt(d);
    for (Eigen::Index i = k + 1; i < n; ++i) {
      double s = A(i, k);
      for (Eigen::Index j = 0; j < k; ++j) s -= L(i, j) * L(k, j);
      L(i, k) = s / L(k, k);
    }
  }
  return L;
}

Matrix cholesky_solve_factored(const Matrix& L, const Matrix& B) {
  const Eigen::Index n = L.rows();
  if (B.rows() != n) throw std::invalid_argument("cholesky_solve: dimension mismatch");
  Matrix X = B;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {  // forward: L w = b
      double s = X(i, c);
      for (Eigen::Index j = 0; j < i; ++j) s -= L(i, j) * X(j, c);
      X(i, c) = s / L(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {  // backward: Lt x = w
      double s = X(i, c);
      for (Eigen::Index j = i + 1; j < n; ++j) s -= L(j, i) * X(j, c);
      X(i, c) = s / L(i, i);
    }
  }
  return X;
}

Vector cholesky_solve_factored(const Matrix& L, const Vector& b) {
  Matrix B = b;
  return cholesky_solve_factored(L, B).col(0);
}

Matrix cholesky_solve(const Matrix& A, const Matrix& B) {
  return cholesky_solve_factored(cholesky_factor(A), B);
}

Vector cholesky_solve(const Matrix& A, const Vector& b) {
  return cholesky_solve_factored(cholesky_factor(A), b);
}

double logdet_from_factor(const Matrix& L) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) s += std::log(L(i, i));
  return 2.0 * s;
}

double logdet_spd(const Matrix& A) { return logdet_from_factor(cholesky_factor(A)); }

// --- multilayer perceptron ----------------------------------------------------

int MlpArchitecture::layer_in(int l) const {
  return l == 0 ? input_dim : hidden[static_cast<std::size_t>(l) - 1];
}

int MlpArchitecture::layer_out(int l) const {
  return l == layer_count() - 1 ? 1 : hidden[static_cast<std::size_t>(l)];
}

int MlpArchitecture::param_count() const {
  int total = 0;
  for (int l = 0; l < layer_count(); ++l) total += layer_out(l) * (layer_in(l) + 1);
  return total;
}

NetworkParams NetworkParams::zeros(const MlpArchitecture& arch) {
  NetworkParams p;
  for (int l = 0; l < arch.layer_count(); ++l) {
    p.W.push_back(Matrix::Zero(arch.layer_out(l), arch.layer_in(l)));
    p.b.push_back(Vector::Zero(arch.layer_out(l)));
  }
  return p;
}

Vector NetworkParams::flatten() const {
  Eigen::Index total = 0;
  for (std::size_t l = 0; l < W.size(); ++l) total += W[l].size() + b[l].size();
  Vector flat(total);
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < W.size(); ++l) {
    for (Eigen::Index i = 0; i < W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < W[l].cols(); ++j) flat[pos++] = W[l](i, j);
    for (Eigen::Index i = 0; i < b[l].size(); ++i) flat[pos++] = b[l][i];
  }
  return flat;
}

NetworkParams NetworkParams::unflatten(const MlpArchitecture& arch, const Vector& flat) {
  if (flat.size() != arch.param_count())
    throw std::invalid_argument("unflatten: size mismatch");
  NetworkParams p = zeros(arch);
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < p.W.size(); ++l) {
    for (Eigen::Index i = 0; i < p.W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < p.W[l].cols(); ++j) p.W[l](i, j) = flat[pos++];
    for (Eigen::Index i = 0; i < p.b[l].size(); ++i) p.b[l][i] = flat[pos++];
  }
  return p;
}

double NetworkParams::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < W.size(); ++l)
    s += W[l].squaredNorm() + b[l].squaredNorm();
  return s;
}

void NetworkParams::add_scaled(const NetworkParams& other, double scale) {
  for (std::size_t l = 0; l < W.size(); ++l) {
    W[l] += scale * other.W[l];
    b[l] += scale * other.b[l];
  }
}

namespace {

void check_shapes(const MlpArchitecture& arch, const NetworkParams& p,
                  const NetworkParams* offsets) {
  if (static_cast<int>(p.W.size()) != arch.layer_count())
    throw std::invalid_argument("mlp: layer count mismatch");
  for (int l = 0; l < arch.layer_count(); ++l) {
    const auto lu = static_cast<std::size_t>(l);
    if (p.W[lu].rows() != arch.layer_out(l) || p.W[lu].cols() != arch.layer_in(l) ||
        p.b[lu].size() != arch.layer_out(l))
      throw std::invalid_argument("mlp: parameter shape mismatch at layer " +
                                  std::to_string(l));
    if (offsets) {
      if (offsets->W.size() != p.W.size() ||
          offsets->W[lu].rows() != p.W[lu].rows() ||
          offsets->W[lu].cols() != p.W[lu].cols() ||
          offsets->b[lu].size() != p.b[lu].size())
        throw std::invalid_argument("mlp: offset shape mismatch at layer " +
                                    std::to_string(l));
    }
  }
}

}  // namespace

ForwardCache mlp_forward(const MlpArchitecture& arch, const NetworkParams& params,
                         const NetworkParams* offsets, const Vector& x) {
  check_shapes(arch, params, offsets);
  if (x.size() != arch.input_dim) throw std::invalid_argument("mlp_forward: input size");
  ForwardCache c;
  c.act.push_back(x);
  Vector a = x;
  const int L = arch.layer_count();
  for (int l = 0; l < L; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    Matrix W = params.W[lu];
    Vector b = params.b[lu];
    if (offsets) {
      W += offsets->W[lu];
      b += offsets->b[lu];
    }
    Vector z = W * a + b;
    c.pre.push_back(z);
    if (l < L - 1)
      a = z.cwiseMax(0.0);  // ReLU, derivative at 0 taken as 0
    else
      a = z;  // identity output
    c.act.push_back(a);
  }
  c.output = c.act.back()[0];
  return c;
}

NetworkParams mlp_backward(const MlpArchitecture& arch, const NetworkParams& params,
                           const NetworkParams* offsets, const ForwardCache& cache,
                           double error_signal) {
  check_shapes(arch, params, offsets);
  const int L = arch.layer_count();
  if (static_cast<int>(cache.pre.size()) != L ||
      static_cast<int>(cache.act.size()) != L + 1)
    throw std::invalid_argument("mlp_backward: stale cache");
  NetworkParams g = NetworkParams::zeros(arch);
  Vector delta(1);
  delta[0] = error_signal;
  for (int l = L - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    if (cache.act[lu].size() != arch.layer_in(l))
      throw std::invalid_argument("mlp_backward: stale cache");
    g.W[lu] = delta * cache.act[lu].transpose();
    g.b[lu] = delta;
    if (l > 0) {
      Matrix W = params.W[lu];
      if (offsets) W += offsets->W[lu];
      Vector up = W.transpose() * delta;
      const Vector& z = cache.pre[lu - 1];
      for (Eigen::Index i = 0; i < up.size(); ++i)
        if (z[i] <= 0.0) up[i] = 0.0;
      delta = up;
    }
  }
  return g;
}

BatchCache mlp_forward_batch(const MlpArchitecture& arch, const NetworkParams& params,
                             const NetworkParams* offsets, const Matrix& X) {
  check_shapes(arch, params, offsets);
  if (X.cols() != arch.input_dim)
    throw std::invalid_argument("mlp_forward_batch: input width");
  BatchCache c;
  c.act.push_back(X);
  Matrix a = X;
  const int L = arch.layer_count();
  for (int l = 0; l < L; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    Matrix W = params.W[lu];
    Vector b = params.b[lu];
    if (offsets) {
      W += offsets->W[lu];
      b += offsets->b[lu];
    }
    Matrix z = a * W.transpose();
    z.rowwise() += b.transpose();
    c.pre.push_back(z);
    if (l < L - 1)
      a = z.cwiseMax(0.0);
    else
      a = z;
    c.act.push_back(a);
  }
  c.output = c.act.back().col(0);
  return c;
}

NetworkParams mlp_backward_batch(const MlpArchitecture& arch, const NetworkParams& params,
                                 const NetworkParams* offsets, const BatchCache& cache,
                                 const Vector& err) {
  check_shapes(arch, params, offsets);
  const int L = arch.layer_count();
  if (err.size() != cache.output.size())
    throw std::invalid_argument("mlp_backward_batch: error length");
  NetworkParams g = NetworkParams::zeros(arch);
  Matrix delta = err;  // rows x 1
  for (int l = L - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    g.W[lu] = delta.transpose() * cache.act[lu];
    g.b[lu] = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix W = params.W[lu];
      if (offsets) W += offsets->W[lu];
      Matrix up = delta * W;
      const Matrix& z = cache.pre[lu - 1];
      for (Eigen::Index i = 0; i < up.rows(); ++i)
        for (Eigen::Index j = 0; j < up.cols(); ++j)
          if (z(i, j) <= 0.0) up(i, j) = 0.0;
      delta = up;
    }
  }
  return g;
}

// --- optimizers -----------------------------------------------------------------

void AdamState::reset(Eigen::Index size) {
  step_count = 0;
  m = Vector::Zero(size);
  v = Vector::Zero(size);
}

void adam_step(AdamState& state, Vector& params, const Vector& grads,
               const std::string& block) {
  if (state.m.size() != params.size()) state.reset(params.size());
  if (grads.size() != params.size())
    throw std::invalid_argument("adam_step: gradient size mismatch for " + block);
  for (Eigen::Index i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw std::runtime_error("adam_step: non-finite gradient in block " + block);
  ++state.step_count;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// --- gradient checking -------------------------------------------------------

double check_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                      const Vector& analytic_grad) {
  if (analytic_grad.size() != x.size())
    throw std::invalid_argument("check_gradient: size mismatch");
  const double h = 1e-5;
  double worst = 0.0;
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("check_gradient: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic_grad[i] - numeric) /
                       std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// --- deterministic RNG ----------------------------------------------------------

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
  return engine_() % n;
}

NetworkParams xavier_init(const MlpArchitecture& arch, Rng& rng) {
  NetworkParams p = NetworkParams::zeros(arch);
  for (int l = 0; l < arch.layer_count(); ++l) {
    const auto lu = static_cast<std::size_t>(l);
    const double limit =
        std::sqrt(6.0 / static_cast<double>(arch.layer_in(l) + arch.layer_out(l)));
    for (Eigen::Index i = 0; i < p.W[lu].rows(); ++i)
      for (Eigen::Index j = 0; j < p.W[lu].cols(); ++j)
        p.W[lu](i, j) = rng.uniform(-limit, limit);
  }
  return p;
}

}  // namespace longmix::num
