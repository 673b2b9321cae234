#include "longmix/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace longmix::lmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Solve products against V = Z D Z' + s2 I for one subject. Uses the
// Woodbury identity through G = (D^-1 + Z'Z/s2)^-1 when D is invertible and
// falls back to the dense factorization otherwise (covers D = 0 and
// semi-definite D).
struct SubjectSolve {
  double logdetV = 0.0;
  double trVinv = 0.0;
  num::Matrix ViX;  // V^-1 X
  num::Vector Viy;  // V^-1 y
  num::Matrix ViZ;  // V^-1 Z
};

SubjectSolve solve_subject(const panel::SubjectDesign& d, const num::Matrix& D,
                           double sigma_sq) {
  const auto n = d.Z.rows();
  const auto q = d.Z.cols();
  SubjectSolve s;
  bool dense = false;
  num::Matrix Ld;
  if (q > 0) {
    try {
      Ld = num::cholesky_factor(D);
    } catch (const std::runtime_error&) {
      dense = true;
    }
  }
  if (!dense) {
    num::Matrix Dinv = q > 0
                           ? num::cholesky_solve_factored(Ld, num::Matrix(num::Matrix::Identity(q, q)))
                           : num::Matrix(0, 0);
    num::Matrix ZtZ = d.Z.transpose() * d.Z;
    num::Matrix M = Dinv + ZtZ / sigma_sq;
    num::Matrix Lm = num::cholesky_factor(num::Matrix(0.5 * (M + M.transpose())));
    num::Matrix G = num::cholesky_solve_factored(
        Lm, num::Matrix(num::Matrix::Identity(q, q)));
    auto vinv_apply = [&](const num::Matrix& B) -> num::Matrix {
      return B / sigma_sq -
             d.Z * (G * (d.Z.transpose() * B)) / (sigma_sq * sigma_sq);
    };
    s.ViX = vinv_apply(d.X);
    s.Viy = vinv_apply(num::Matrix(d.y)).col(0);
    s.ViZ = vinv_apply(d.Z);
    s.logdetV = num::logdet_from_factor(Lm) + num::logdet_from_factor(Ld) +
                static_cast<double>(n) * std::log(sigma_sq);
    s.trVinv = static_cast<double>(n) / sigma_sq -
               (G * ZtZ).trace() / (sigma_sq * sigma_sq);
    return s;
  }
  num::Matrix V = sigma_sq * num::Matrix::Identity(n, n);
  if (q > 0) V += d.Z * D * d.Z.transpose();
  num::Matrix Lv = num::cholesky_factor(num::Matrix(0.5 * (V + V.transpose())));
  num::Matrix Vinv =
      num::cholesky_solve_factored(Lv, num::Matrix(num::Matrix::Identity(n, n)));
  s.ViX = Vinv * d.X;
  s.Viy = Vinv * d.y;
  s.ViZ = Vinv * d.Z;
  s.logdetV = num::logdet_from_factor(Lv);
  s.trVinv = Vinv.trace();
  return s;
}

void validate_theta(const VarianceComponents& theta) {
  if (!(theta.sigma_sq > 0.0))
    throw std::invalid_argument("variance components: sigma_sq must be positive");
  if (theta.sigma_b0_sq < 0.0 || theta.sigma_b1_sq < 0.0)
    throw std::invalid_argument("variance components: negative variance");
  if (theta.rho < -1.0 || theta.rho > 1.0)
    throw std::invalid_argument("variance components: rho outside [-1, 1]");
  if (theta.dim != 1 && theta.dim != 2)
    throw std::invalid_argument("variance components: dim must be 1 or 2");
}

int random_dim(const std::vector<panel::SubjectDesign>& designs) {
  if (designs.empty()) throw std::invalid_argument("no subjects in design");
  const auto q = designs[0].Z.cols();
  for (const auto& d : designs)
    if (d.Z.cols() != q || d.X.cols() != designs[0].X.cols())
      throw std::invalid_argument("inconsistent design dimensions");
  return static_cast<int>(q);
}

// dD/dparam for the log-Cholesky coordinates (excludes the log sigma coord).
std::vector<num::Matrix> d_D_dparams(const num::Vector& params, int q) {
  std::vector<num::Matrix> out;
  if (q == 1) {
    const double a = std::exp(params[0]);
    num::Matrix E(1, 1);
    E(0, 0) = 2.0 * a * a;
    out.push_back(E);
  } else {
    const double a = std::exp(params[0]);
    const double c = params[1];
    const double b = std::exp(params[2]);
    num::Matrix E0(2, 2), E1(2, 2), E2(2, 2);
    E0 << 2.0 * a * a, a * c, a * c, 0.0;
    E1 << 0.0, a, a, 2.0 * c;
    E2 << 0.0, 0.0, 0.0, 2.0 * b * b;
    out.push_back(E0);
    out.push_back(E1);
    out.push_back(E2);
  }
  return out;
}

struct CriterionPieces {
  double value = 0.0;
  num::Vector beta;
  num::Vector gradient;
  num::Matrix xtvix;
};

// Shared blockwise evaluator for all criteria, optionally penalized, with
// beta profiled out. params is the unconstrained vector when want_gradient;
// otherwise D/sigma_sq are taken as given.
CriterionPieces evaluate(const num::Matrix& D, double sigma_sq,
                         const num::Vector& params, int q,
                         const std::vector<panel::SubjectDesign>& designs,
                         Criterion criterion, bool want_gradient,
                         const PenaltyInfo* penalty, bool want_xtvix) {
  const auto p = designs[0].X.cols();
  if (penalty && (penalty->P.rows() != p || penalty->P.cols() != p))
    throw std::invalid_argument("penalty dimension mismatch");
  const double lambda = penalty ? penalty->lambda : 0.0;

  std::vector<SubjectSolve> solves;
  solves.reserve(designs.size());
  num::Matrix A = num::Matrix::Zero(p, p);
  num::Vector c = num::Vector::Zero(p);
  double logdet_sum = 0.0;
  long n = 0;
  for (const auto& d : designs) {
    solves.push_back(solve_subject(d, D, sigma_sq));
    const auto& s = solves.back();
    A += d.X.transpose() * s.ViX;
    c += d.X.transpose() * s.Viy;
    logdet_sum += s.logdetV;
    n += d.y.size();
  }
  num::Matrix Hp = A;
  if (penalty && lambda != 0.0) Hp += lambda * penalty->P;
  num::Matrix Hp_sym = 0.5 * (Hp + Hp.transpose());
  num::Matrix Lh = p > 0 ? num::cholesky_factor(Hp_sym) : num::Matrix(0, 0);
  num::Vector beta =
      p > 0 ? num::cholesky_solve_factored(Lh, c) : num::Vector(0);

  double rVr = 0.0;
  double pen_quad = 0.0;
  if (penalty && lambda != 0.0) pen_quad = lambda * beta.dot(penalty->P * beta);

  const int n_chol = q == 0 ? 0 : (q == 1 ? 1 : 3);
  std::vector<num::Matrix> Es;
  num::Matrix Mzz_sum = num::Matrix::Zero(q, q);
  num::Matrix U_sum = num::Matrix::Zero(q, q);
  double trVinv_sum = 0.0;
  double vir_sq_sum = 0.0;
  num::Matrix Bsig = num::Matrix::Zero(p, p);
  std::vector<num::Matrix> Tk(static_cast<std::size_t>(n_chol),
                              num::Matrix::Zero(p, p));
  if (want_gradient) Es = d_D_dparams(params, q);

  for (std::size_t i = 0; i < designs.size(); ++i) {
    const auto& d = designs[i];
    const auto& s = solves[i];
    num::Vector r = d.y - d.X * beta;
    num::Vector Vir = s.Viy - s.ViX * beta;
    rVr += r.dot(Vir);
    if (want_gradient) {
      num::Vector u = d.Z.transpose() * Vir;
      U_sum += u * u.transpose();
      Mzz_sum += d.Z.transpose() * s.ViZ;
      trVinv_sum += s.trVinv;
      vir_sq_sum += Vir.squaredNorm();
      if (criterion == Criterion::reml) {
        Bsig += s.ViX.transpose() * s.ViX;
        num::Matrix Mxz = d.X.transpose() * s.ViZ;
        for (int k = 0; k < n_chol; ++k)
          Tk[static_cast<std::size_t>(k)] +=
              Mxz * Es[static_cast<std::size_t>(k)] * Mxz.transpose();
      }
    }
  }

  CriterionPieces out;
  out.beta = beta;
  if (want_xtvix) out.xtvix = A;
  const double dn = static_cast<double>(n);
  if (criterion == Criterion::ml) {
    out.value = -0.5 * (logdet_sum + rVr + pen_quad + dn * kLog2Pi);
  } else {
    const int rank = penalty ? penalty->rank : 0;
    const double log_hp = p > 0 ? num::logdet_from_factor(Lh) : 0.0;
    double log_pen = 0.0;
    if (penalty && rank > 0 && lambda > 0.0)
      log_pen = rank * std::log(lambda) + penalty->logdet_plus;
    const double mp = static_cast<double>(p - rank);
    out.value = -0.5 * (logdet_sum + rVr + pen_quad + log_hp - log_pen +
                        (dn - mp) * kLog2Pi);
  }
  if (want_gradient) {
    out.gradient = num::Vector::Zero(n_chol + 1);
    num::Matrix HpinvT;
    num::Matrix Hpinv;
    if (criterion == Criterion::reml && p > 0)
      Hpinv = num::cholesky_solve_factored(
          Lh, num::Matrix(num::Matrix::Identity(p, p)));
    for (int k = 0; k < n_chol; ++k) {
      const auto& E = Es[static_cast<std::size_t>(k)];
      const double tr_term = (E * Mzz_sum).trace();
      const double quad_term = (E * U_sum).trace();
      double g = -0.5 * (tr_term - quad_term);
      if (criterion == Criterion::reml && p > 0)
        g += 0.5 * (Hpinv * Tk[static_cast<std::size_t>(k)]).trace();
      out.gradient[k] = g;
    }
    double gs = -0.5 * (2.0 * sigma_sq * trVinv_sum - 2.0 * sigma_sq * vir_sq_sum);
    if (criterion == Criterion::reml && p > 0)
      gs += 0.5 * 2.0 * sigma_sq * (Hpinv * Bsig).trace();
    out.gradient[n_chol] = gs;
  }
  return out;
}

}  // namespace

num::Matrix VarianceComponents::D() const {
  num::Matrix out(dim, dim);
  if (dim == 1) {
    out(0, 0) = sigma_b0_sq;
  } else {
    const double cov = rho * std::sqrt(sigma_b0_sq * sigma_b1_sq);
    out << sigma_b0_sq, cov, cov, sigma_b1_sq;
  }
  return out;
}

num::Vector pack_theta(const VarianceComponents& theta) {
  validate_theta(theta);
  const double floor_log = 0.5 * std::log(1e-12);
  auto safe_log_half = [&](double v) {
    return v > 1e-12 ? 0.5 * std::log(v) : floor_log;
  };
  if (theta.dim == 1) {
    num::Vector p(2);
    p << safe_log_half(theta.sigma_b0_sq), safe_log_half(theta.sigma_sq);
    return p;
  }
  num::Vector p(4);
  const double l0 = safe_log_half(theta.sigma_b0_sq);
  const double sb1 = std::sqrt(theta.sigma_b1_sq);
  const double l10 = theta.rho * sb1;
  const double resid = theta.sigma_b1_sq * (1.0 - theta.rho * theta.rho);
  p << l0, l10, safe_log_half(resid), safe_log_half(theta.sigma_sq);
  return p;
}

VarianceComponents unpack_theta(const num::Vector& params, int q) {
  VarianceComponents theta;
  theta.dim = q;
  if (q == 1) {
    if (params.size() != 2) throw std::invalid_argument("unpack_theta: size");
    theta.sigma_b0_sq = std::exp(2.0 * params[0]);
    theta.sigma_sq = std::exp(2.0 * params[1]);
    return theta;
  }
  if (q != 2 || params.size() != 4)
    throw std::invalid_argument("unpack_theta: size");
  const double a = std::exp(params[0]);
  const double c = params[1];
  const double b = std::exp(params[2]);
  theta.sigma_b0_sq = a * a;
  theta.sigma_b1_sq = c * c + b * b;
  theta.rho = theta.sigma_b1_sq > 0.0
                  ? (a * c) / std::sqrt(theta.sigma_b0_sq * theta.sigma_b1_sq)
                  : 0.0;
  theta.sigma_sq = std::exp(2.0 * params[3]);
  return theta;
}

double marginal_loglik(const VarianceComponents& theta,
                       const std::vector<panel::SubjectDesign>& designs,
                       const num::Vector& beta) {
  validate_theta(theta);
  const int q = random_dim(designs);
  if (q != 0 && q != theta.dim)
    throw std::invalid_argument("marginal_loglik: random-effect dimension mismatch");
  num::Matrix D = theta.D();
  double value = 0.0;
  for (const auto& d : designs) {
    SubjectSolve s = solve_subject(d, D, theta.sigma_sq);
    num::Vector r = d.y - d.X * beta;
    num::Vector Vir = s.Viy - s.ViX * beta;
    value += s.logdetV + r.dot(Vir) + static_cast<double>(d.y.size()) * kLog2Pi;
  }
  return -0.5 * value;
}

num::Vector gls_beta(const VarianceComponents& theta,
                     const std::vector<panel::SubjectDesign>& designs) {
  validate_theta(theta);
  random_dim(designs);
  auto pieces = evaluate(theta.D(), theta.sigma_sq, num::Vector(), theta.dim,
                         designs, Criterion::ml, false, nullptr, false);
  return pieces.beta;
}

double reml_loglik(const VarianceComponents& theta,
                   const std::vector<panel::SubjectDesign>& designs) {
  validate_theta(theta);
  random_dim(designs);
  auto pieces = evaluate(theta.D(), theta.sigma_sq, num::Vector(), theta.dim,
                         designs, Criterion::reml, false, nullptr, false);
  return pieces.value;
}

ProfiledEval eval_profiled(const num::Vector& params, int q,
                           const std::vector<panel::SubjectDesign>& designs,
                           Criterion criterion, bool want_gradient,
                           const PenaltyInfo* penalty, bool want_xtvix) {
  VarianceComponents theta = unpack_theta(params, q);
  auto pieces = evaluate(theta.D(), theta.sigma_sq, params, q, designs,
                         criterion, want_gradient, penalty, want_xtvix);
  ProfiledEval out;
  out.value = pieces.value;
  out.beta = pieces.beta;
  out.gradient = pieces.gradient;
  out.xtvix = pieces.xtvix;
  return out;
}

namespace {

// Expectation-maximization sweeps used to warm-start the quasi-Newton stage.
void em_warmstart(const std::vector<panel::SubjectDesign>& designs, int q,
                  int iters, num::Matrix& D, double& sigma_sq) {
  const auto p = designs[0].X.cols();
  long n = 0;
  for (const auto& d : designs) n += d.y.size();
  // OLS start.
  num::Matrix A0 = num::Matrix::Zero(p, p);
  num::Vector c0 = num::Vector::Zero(p);
  for (const auto& d : designs) {
    A0 += d.X.transpose() * d.X;
    c0 += d.X.transpose() * d.y;
  }
  num::Vector beta = p > 0 ? num::cholesky_solve(num::Matrix(0.5 * (A0 + A0.transpose())), c0)
                           : num::Vector(0);
  double ssr = 0.0;
  std::vector<num::Vector> resid;
  for (const auto& d : designs) {
    num::Vector r = d.y - d.X * beta;
    ssr += r.squaredNorm();
    resid.push_back(r);
  }
  sigma_sq = std::max(ssr / static_cast<double>(n), 1e-8);
  double mean_rbar = 0.0;
  std::vector<double> rbars;
  for (const auto& r : resid) {
    rbars.push_back(r.mean());
    mean_rbar += r.mean();
  }
  mean_rbar /= static_cast<double>(rbars.size());
  double tau = 0.0;
  for (double rb : rbars) tau += (rb - mean_rbar) * (rb - mean_rbar);
  tau = rbars.size() > 1 ? tau / static_cast<double>(rbars.size() - 1) : 0.0;
  tau = std::max(tau, 0.1 * sigma_sq);
  D = num::Matrix::Zero(q, q);
  D(0, 0) = tau;
  if (q == 2) {
    double t_sq = 0.0;
    for (const auto& d : designs) t_sq += d.Z.col(1).squaredNorm();
    t_sq = std::max(t_sq / static_cast<double>(n), 1.0);
    D(1, 1) = tau / t_sq;
  }

  for (int it = 0; it < iters; ++it) {
    VarianceComponents theta;
    theta.dim = q;
    theta.sigma_sq = sigma_sq;
    theta.sigma_b0_sq = D(0, 0);
    if (q == 2) {
      theta.sigma_b1_sq = D(1, 1);
      const double denom = std::sqrt(D(0, 0) * D(1, 1));
      theta.rho = denom > 0.0 ? std::clamp(D(0, 1) / denom, -0.99, 0.99) : 0.0;
    }
    auto pieces = evaluate(theta.D(), sigma_sq, num::Vector(), q, designs,
                           Criterion::ml, false, nullptr, false);
    beta = pieces.beta;

    num::Matrix Dl = theta.D();
    for (Eigen::Index k = 0; k < q; ++k) Dl(k, k) = std::max(Dl(k, k), 1e-10);
    num::Matrix Ld = num::cholesky_factor(num::Matrix(0.5 * (Dl + Dl.transpose())));
    num::Matrix Dinv = num::cholesky_solve_factored(
        Ld, num::Matrix(num::Matrix::Identity(q, q)));

    num::Matrix Dnew = num::Matrix::Zero(q, q);
    double ss = 0.0;
    for (const auto& d : designs) {
      num::Matrix ZtZ = d.Z.transpose() * d.Z;
      num::Matrix M = ZtZ / sigma_sq + Dinv;
      num::Matrix W = num::cholesky_solve(num::Matrix(0.5 * (M + M.transpose())),
                                          num::Matrix(num::Matrix::Identity(q, q)));
      num::Vector r = d.y - d.X * beta;
      num::Vector bhat = W * (d.Z.transpose() * r) / sigma_sq;
      Dnew += bhat * bhat.transpose() + W;
      num::Vector e = r - d.Z * bhat;
      ss += e.squaredNorm() + (W * ZtZ).trace();
    }
    D = Dnew / static_cast<double>(designs.size());
    for (Eigen::Index k = 0; k < q; ++k) D(k, k) = std::max(D(k, k), 1e-10);
    sigma_sq = std::max(ss / static_cast<double>(n), 1e-10);
  }
}

num::Vector clamp_params(num::Vector p, int q, double variance_floor) {
  const double lo = 0.5 * std::log(variance_floor);
  const double hi = 40.0;
  if (q == 1) {
    p[0] = std::clamp(p[0], lo, hi);
    p[1] = std::clamp(p[1], lo, hi);
  } else {
    p[0] = std::clamp(p[0], lo, hi);
    p[2] = std::clamp(p[2], lo, hi);
    p[3] = std::clamp(p[3], lo, hi);
  }
  return p;
}

double projected_grad_norm(const num::Vector& p, const num::Vector& crit_grad,
                           int q, double variance_floor) {
  const double lo = 0.5 * std::log(variance_floor);
  double norm = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const bool log_coord = q == 1 || i != 1;  // offdiagonal coord is unbounded
    // At the lower clamp a criterion that still pushes the variance down is
    // treated as satisfied in that coordinate.
    if (log_coord && p[i] <= lo + 1e-12 && crit_grad[i] < 0.0) continue;
    norm = std::max(norm, std::abs(crit_grad[i]));
  }
  return norm;
}

}  // namespace

LmmFit fit(const std::vector<panel::SubjectDesign>& designs, Criterion criterion,
           const FitControl& control, const std::vector<std::string>& term_names,
           const PenaltyInfo* penalty, const num::Vector* init_params) {
  if (designs.size() < 2) throw std::invalid_argument("fit: need at least 2 subjects");
  const int q = random_dim(designs);
  if (q != 1 && q != 2)
    throw std::invalid_argument("fit: random-effect dimension must be 1 or 2");

  // Precondition: rescale each random-effect column to unit root-mean-square
  // so the log-Cholesky coordinates are comparably curved (a raw-units slope
  // column can otherwise make its covariance coordinate ~1e6 times stiffer
  // than the rest). The criterion value is invariant; D and the BLUPs are
  // reported in the original units.
  num::Vector zscale = num::Vector::Ones(q);
  {
    num::Vector ssq = num::Vector::Zero(q);
    long rows = 0;
    for (const auto& d : designs) {
      ssq += d.Z.array().square().colwise().sum().matrix().transpose();
      rows += d.Z.rows();
    }
    for (int j = 0; j < q; ++j) {
      const double rms = std::sqrt(ssq[j] / static_cast<double>(rows));
      if (rms > 0.0 && std::isfinite(rms)) zscale[j] = rms;
    }
  }
  std::vector<panel::SubjectDesign> work = designs;
  for (auto& d : work)
    for (int j = 0; j < q; ++j) d.Z.col(j) /= zscale[j];
  auto scale_theta = [&](VarianceComponents theta, bool to_scaled) {
    const double s0 = to_scaled ? zscale[0] : 1.0 / zscale[0];
    theta.sigma_b0_sq *= s0 * s0;
    if (q == 2) {
      const double s1 = to_scaled ? zscale[1] : 1.0 / zscale[1];
      theta.sigma_b1_sq *= s1 * s1;
    }
    return theta;
  };

  num::Vector p0;
  if (init_params) {
    p0 = clamp_params(
        pack_theta(scale_theta(unpack_theta(*init_params, q), true)), q,
        control.variance_floor);
  } else {
    num::Matrix D;
    double sigma_sq = 1.0;
    em_warmstart(work, q, control.em_warmstart_iters, D, sigma_sq);
    VarianceComponents theta;
    theta.dim = q;
    theta.sigma_b0_sq = D(0, 0);
    theta.sigma_sq = sigma_sq;
    if (q == 2) {
      theta.sigma_b1_sq = D(1, 1);
      const double denom = std::sqrt(D(0, 0) * D(1, 1));
      theta.rho = denom > 0.0 ? std::clamp(D(0, 1) / denom, -0.999, 0.999) : 0.0;
    }
    p0 = clamp_params(pack_theta(theta), q, control.variance_floor);
  }

  auto offdiag_guard = [&](num::Vector p) {
    p = clamp_params(std::move(p), q, control.variance_floor);
    if (q == 2) p[1] = std::clamp(p[1], -1e6, 1e6);
    return p;
  };

  num::Vector p = offdiag_guard(p0);
  auto ev = eval_profiled(p, q, work, criterion, true, penalty, false);
  double f = -ev.value;
  num::Vector g = -ev.gradient;
  const auto np = p.size();
  num::Matrix H = num::Matrix::Identity(np, np);

  bool converged = false;
  bool first_update = true;
  int iter = 0;
  for (; iter < control.max_iter; ++iter) {
    if (projected_grad_norm(p, num::Vector(-g), q, control.variance_floor) <
        control.grad_tol) {
      converged = true;
      break;
    }
    num::Vector dir = -(H * g);
    if (dir.dot(g) >= 0.0) {
      H = num::Matrix::Identity(np, np);
      first_update = true;
      dir = -g;
    }
    // Near the optimum the criterion changes by less than its floating-point
    // noise while the gradient is still informative, so a failed Armijo
    // search falls back to accepting steps that strictly reduce the gradient
    // norm within the noise band.
    const double f_noise = 64.0 * 1e-16 * std::max(1.0, std::abs(f));
    auto backtrack = [&](const num::Vector& direction, num::Vector& p_out,
                         double& f_out) {
      double alpha = 1.0;
      const double slope = g.dot(direction);
      double best_f = std::numeric_limits<double>::infinity();
      num::Vector best_p;
      for (int ls = 0; ls < 40; ++ls) {
        p_out = offdiag_guard(num::Vector(p + alpha * direction));
        try {
          auto trial = eval_profiled(p_out, q, work, criterion, false,
                                     penalty, false);
          f_out = -trial.value;
          if (std::isfinite(f_out)) {
            if (f_out <= f + 1e-4 * alpha * slope) return true;
            if (ls < 8 && f_out < best_f) {
              best_f = f_out;
              best_p = p_out;
            }
          }
        } catch (const std::runtime_error&) {
          // Indefinite V along the path: shrink the step.
        }
        alpha *= 0.5;
      }
      if (best_p.size() > 0 && best_f <= f + f_noise) {
        auto trial =
            eval_profiled(best_p, q, work, criterion, true, penalty, false);
        if (trial.gradient.cwiseAbs().maxCoeff() < g.cwiseAbs().maxCoeff()) {
          p_out = best_p;
          f_out = best_f;
          return true;
        }
      }
      return false;
    };
    num::Vector p_new;
    double f_new = f;
    bool ok = backtrack(dir, p_new, f_new);
    if (!ok && dir != num::Vector(-g)) {
      // The quasi-Newton direction stalled; retry along steepest ascent.
      H = num::Matrix::Identity(np, np);
      first_update = true;
      ok = backtrack(num::Vector(-g), p_new, f_new);
    }
    if (!ok) break;
    auto ev_new = eval_profiled(p_new, q, work, criterion, true, penalty, false);
    num::Vector g_new = -ev_new.gradient;
    num::Vector s = p_new - p;
    num::Vector yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (first_update) {
        // Scale the seed inverse Hessian to the first measured curvature.
        H = (sy / yv.squaredNorm()) * num::Matrix::Identity(np, np);
        first_update = false;
      }
      const double rho_bfgs = 1.0 / sy;
      num::Matrix I = num::Matrix::Identity(np, np);
      H = (I - rho_bfgs * s * yv.transpose()) * H *
              (I - rho_bfgs * yv * s.transpose()) +
          rho_bfgs * s * s.transpose();
    } else {
      H = num::Matrix::Identity(np, np);
      first_update = true;
    }
    p = p_new;
    f = -ev_new.value;
    g = g_new;
  }

  // Value-based line searches bottom out once improvements fall below the
  // criterion's double-precision noise, while the analytic gradient stays
  // sharp. Polish the solution with Newton steps on gradient = 0, using a
  // finite-difference Hessian of the analytic gradient.
  if (!converged) {
    auto grad_at = [&](const num::Vector& pt) {
      return num::Vector(
          -eval_profiled(pt, q, work, criterion, true, penalty, false).gradient);
    };
    for (int polish = 0; polish < 10; ++polish) {
      if (projected_grad_norm(p, num::Vector(-g), q, control.variance_floor) <
          control.grad_tol) {
        converged = true;
        break;
      }
      const double h = 1e-4;
      num::Matrix hess(np, np);
      bool hess_ok = true;
      for (Eigen::Index j = 0; j < np; ++j) {
        num::Vector pp = p, pm = p;
        pp[j] += h;
        pm[j] -= h;
        try {
          hess.col(j) = (grad_at(pp) - grad_at(pm)) / (2.0 * h);
        } catch (const std::runtime_error&) {
          hess_ok = false;
          break;
        }
      }
      if (!hess_ok) break;
      hess = 0.5 * (hess + hess.transpose()).eval();
      num::Vector delta;
      try {
        delta = num::cholesky_solve(hess, num::Vector(-g));
      } catch (const std::exception&) {
        break;  // Not positive definite here; keep the BFGS point.
      }
      if (!delta.allFinite() || delta.norm() > 0.5) break;
      num::Vector p_try = offdiag_guard(num::Vector(p + delta));
      num::Vector g_try;
      try {
        g_try = grad_at(p_try);
      } catch (const std::runtime_error&) {
        break;
      }
      if (g_try.cwiseAbs().maxCoeff() <= 0.9 * g.cwiseAbs().maxCoeff()) {
        p = p_try;
        g = g_try;
      } else {
        break;
      }
    }
  }

  auto final_ev = eval_profiled(p, q, work, criterion, true, penalty, false);
  LmmFit out;
  out.term_names = term_names;
  out.beta = final_ev.beta;
  out.theta = scale_theta(unpack_theta(p, q), false);
  out.criterion = criterion;
  out.loglik = final_ev.value;
  out.grad_norm =
      projected_grad_norm(p, final_ev.gradient, q, control.variance_floor);
  out.converged = converged || out.grad_norm < control.grad_tol;
  long n = 0;
  for (const auto& d : designs) n += d.y.size();
  out.n_obs = static_cast<int>(n);
  const int n_vc = q == 1 ? 2 : 4;
  out.n_params = static_cast<int>(designs[0].X.cols()) + n_vc;
  out.aic = -2.0 * out.loglik + 2.0 * static_cast<double>(out.n_params);
  const double flag_level = 10.0 * control.variance_floor;
  out.boundary = out.theta.sigma_b0_sq <= flag_level ||
                 out.theta.sigma_sq <= flag_level ||
                 (q == 2 && out.theta.sigma_b1_sq <= flag_level);
  out.blups = blup(out.theta, out.beta, designs);
  for (const auto& d : designs) out.subject_ids.push_back(d.subject);
  return out;
}

std::vector<num::Vector> blup(const VarianceComponents& theta,
                              const num::Vector& beta,
                              const std::vector<panel::SubjectDesign>& designs) {
  validate_theta(theta);
  const int q = random_dim(designs);
  if (q != theta.dim)
    throw std::invalid_argument("blup: random-effect dimension mismatch");
  num::Matrix D = theta.D();
  std::vector<num::Vector> out;
  for (const auto& d : designs) {
    SubjectSolve s = solve_subject(d, D, theta.sigma_sq);
    num::Vector Vir = s.Viy - s.ViX * beta;
    out.push_back(D * (d.Z.transpose() * Vir));
  }
  return out;
}

num::Vector predict(const LmmFit& fit,
                    const std::vector<panel::SubjectDesign>& test_designs,
                    const panel::TransformSpec& transform,
                    bool lognormal_mean_correction) {
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < fit.subject_ids.size(); ++i)
    index[fit.subject_ids[i]] = i;
  std::vector<double> values;
  for (const auto& d : test_designs) {
    auto it = index.find(d.subject);
    if (it == index.end())
      throw std::runtime_error("predict: subject " + std::to_string(d.subject) +
                               " was not seen at training time");
    num::Vector mu = d.X * fit.beta;
    if (d.Z.cols() > 0) mu += d.Z * fit.blups[it->second];
    for (Eigen::Index r = 0; r < mu.size(); ++r) {
      double v = mu[r];
      if (transform.log_response) {
        const double shift =
            lognormal_mean_correction ? 0.5 * fit.theta.sigma_sq : 0.0;
        v = std::exp(v + shift);
      }
      values.push_back(v);
    }
  }
  num::Vector out(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = values[i];
  return out;
}

std::string summary(const LmmFit& fit) {
  std::ostringstream os;
  os << "criterion: " << (fit.criterion == Criterion::ml ? "ml" : "reml") << "\n";
  os << "loglik: " << fit.loglik << "\n";
  os << "aic: " << fit.aic << "\n";
  os << "n_obs: " << fit.n_obs << "  n_params: " << fit.n_params << "\n";
  os << "converged: " << (fit.converged ? "yes" : "no")
     << "  boundary: " << (fit.boundary ? "yes" : "no") << "\n";
  os << "fixed effects:\n";
  for (Eigen::Index i = 0; i < fit.beta.size(); ++i) {
    const std::string name =
        i < static_cast<Eigen::Index>(fit.term_names.size())
            ? fit.term_names[static_cast<std::size_t>(i)]
            : "b" + std::to_string(i);
    os << "  " << name << ": " << fit.beta[i] << "\n";
  }
  os << "variance components:\n";
  os << "  intercept sd: " << std::sqrt(fit.theta.sigma_b0_sq) << "\n";
  if (fit.theta.dim == 2) {
    os << "  slope sd: " << std::sqrt(fit.theta.sigma_b1_sq) << "\n";
    os << "  correlation: " << fit.theta.rho << "\n";
  }
  os << "  residual sd: " << std::sqrt(fit.theta.sigma_sq) << "\n";
  return os.str();
}

void write_keyvalue(const LmmFit& fit, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_keyvalue: cannot open " + path);
  out << "criterion=" << (fit.criterion == Criterion::ml ? "ml" : "reml") << "\n";
  out << "loglik=" << fit.loglik << "\n";
  out << "aic=" << fit.aic << "\n";
  out << "n_obs=" << fit.n_obs << "\n";
  out << "n_params=" << fit.n_params << "\n";
  out << "converged=" << (fit.converged ? 1 : 0) << "\n";
  out << "boundary=" << (fit.boundary ? 1 : 0) << "\n";
  out << "sigma_b0_sq=" << fit.theta.sigma_b0_sq << "\n";
  if (fit.theta.dim == 2) {
    out << "sigma_b1_sq=" << fit.theta.sigma_b1_sq << "\n";
    out << "rho=" << fit.theta.rho << "\n";
  }
  out << "sigma_sq=" << fit.theta.sigma_sq << "\n";
  for (Eigen::Index i = 0; i < fit.beta.size(); ++i) {
    const std::string name =
        i < static_cast<Eigen::Index>(fit.term_names.size())
            ? fit.term_names[static_cast<std::size_t>(i)]
            : "b" + std::to_string(i);
    out << "beta." << name << "=" << fit.beta[i] << "\n";
  }
}

}  // namespace longmix::lmm
