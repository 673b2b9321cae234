#include "longmix/gamm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace longmix::gamm {

namespace {

// Knot positions on the unit-scaled axis, boundaries included.
num::Vector unit_knots(const SplineBasis& basis) {
  const int K = basis.num_basis;
  const double range = basis.boundary_max - basis.boundary_min;
  num::Vector u(K);
  u[0] = 0.0;
  for (Eigen::Index j = 0; j < basis.interior_knots.size(); ++j)
    u[j + 1] = (basis.interior_knots[j] - basis.boundary_min) / range;
  u[K - 1] = 1.0;
  return u;
}

// Second-difference and bending matrices of the natural cubic spline on the
// given knots: interior curvatures are B^-1 D alpha, boundary curvatures zero.
void difference_matrices(const num::Vector& u, num::Matrix& D, num::Matrix& B) {
  const int K = static_cast<int>(u.size());
  D = num::Matrix::Zero(K - 2, K);
  B = num::Matrix::Zero(K - 2, K - 2);
  for (int i = 0; i < K - 2; ++i) {
    const double h0 = u[i + 1] - u[i];
    const double h1 = u[i + 2] - u[i + 1];
    D(i, i) = 1.0 / h0;
    D(i, i + 1) = -1.0 / h0 - 1.0 / h1;
    D(i, i + 2) = 1.0 / h1;
    B(i, i) = (h0 + h1) / 3.0;
    if (i + 1 < K - 2) {
      B(i, i + 1) = h1 / 6.0;
      B(i + 1, i) = h1 / 6.0;
    }
  }
}

// K x K map from knot values to knot curvatures (zero rows at the ends).
num::Matrix curvature_map(const num::Vector& u) {
  const int K = static_cast<int>(u.size());
  num::Matrix D, B;
  difference_matrices(u, D, B);
  num::Matrix F = num::Matrix::Zero(K, K);
  F.middleRows(1, K - 2) = B.ldlt().solve(D);
  return F;
}

}  // namespace

SplineBasis build_basis(const std::vector<double>& times, int K) {
  if (K < 4)
    throw std::invalid_argument("build_basis: need at least 4 basis functions");
  std::vector<double> uniq = times;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  const int m = static_cast<int>(uniq.size());
  if (m < K)
    throw std::runtime_error("build_basis: need at least " + std::to_string(K) +
                             " distinct times, got " + std::to_string(m));
  std::vector<double> knots(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) {
    const double pos = static_cast<double>(j) * (m - 1) / (K - 1);
    const int lo = std::min(static_cast<int>(pos), m - 2);
    const double frac = pos - lo;
    knots[static_cast<std::size_t>(j)] =
        uniq[static_cast<std::size_t>(lo)] +
        frac * (uniq[static_cast<std::size_t>(lo + 1)] - uniq[static_cast<std::size_t>(lo)]);
  }
  for (int j = 1; j < K; ++j)
    if (!(knots[static_cast<std::size_t>(j)] > knots[static_cast<std::size_t>(j - 1)]))
      throw std::runtime_error("build_basis: quantile knots collide; too few distinct times");

  SplineBasis basis;
  basis.num_basis = K;
  basis.boundary_min = knots.front();
  basis.boundary_max = knots.back();
  basis.interior_knots = num::Vector(K - 2);
  for (int j = 1; j + 1 < K; ++j)
    basis.interior_knots[j - 1] = knots[static_cast<std::size_t>(j)];

  const num::Vector u = unit_knots(basis);
  num::Matrix D, B;
  difference_matrices(u, D, B);
  num::Matrix S = D.transpose() * B.ldlt().solve(D);
  basis.penalty = 0.5 * (S + S.transpose());
  return basis;
}

num::Matrix basis_matrix(const SplineBasis& basis, const std::vector<double>& times,
                         int deriv) {
  if (deriv < 0 || deriv > 2)
    throw std::invalid_argument("basis_matrix: derivative order must be 0, 1, or 2");
  const int K = basis.num_basis;
  if (K < 4) throw std::invalid_argument("basis_matrix: basis is not built");
  const num::Vector u = unit_knots(basis);
  const num::Matrix F = curvature_map(u);
  const double range = basis.boundary_max - basis.boundary_min;

  // Derivative of the spline with respect to u at a boundary knot, as a row
  // acting on the coefficient vector; used for the natural linear extension.
  auto edge_slope = [&](bool left) {
    num::Vector r = num::Vector::Zero(K);
    if (left) {
      const double h = u[1] - u[0];
      r[0] = -1.0 / h;
      r[1] = 1.0 / h;
      r -= (h / 6.0) * (2.0 * F.row(0) + F.row(1)).transpose();
    } else {
      const double h = u[K - 1] - u[K - 2];
      r[K - 2] = -1.0 / h;
      r[K - 1] = 1.0 / h;
      r += (h / 6.0) * (F.row(K - 2) + 2.0 * F.row(K - 1)).transpose();
    }
    return r;
  };

  num::Matrix out = num::Matrix::Zero(static_cast<Eigen::Index>(times.size()), K);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double t = (times[i] - basis.boundary_min) / range;
    num::Vector row = num::Vector::Zero(K);
    if (t < 0.0) {
      const num::Vector r = edge_slope(true);
      if (deriv == 0) {
        row[0] = 1.0;
        row += t * r;
      } else if (deriv == 1) {
        row = r;
      }
    } else if (t > 1.0) {
      const num::Vector r = edge_slope(false);
      if (deriv == 0) {
        row[K - 1] = 1.0;
        row += (t - 1.0) * r;
      } else if (deriv == 1) {
        row = r;
      }
    } else {
      int j = K - 2;
      for (int k = 1; k < K - 1; ++k)
        if (t < u[k]) { j = k - 1; break; }
      const double h = u[j + 1] - u[j];
      const double left = u[j + 1] - t;
      const double right = t - u[j];
      if (deriv == 0) {
        row[j] += left / h;
        row[j + 1] += right / h;
        const double cl = (left * left * left / h - h * left) / 6.0;
        const double cr = (right * right * right / h - h * right) / 6.0;
        row += cl * F.row(j).transpose() + cr * F.row(j + 1).transpose();
      } else if (deriv == 1) {
        row[j] -= 1.0 / h;
        row[j + 1] += 1.0 / h;
        const double cl = (-3.0 * left * left / h + h) / 6.0;
        const double cr = (3.0 * right * right / h - h) / 6.0;
        row += cl * F.row(j).transpose() + cr * F.row(j + 1).transpose();
      } else {
        row = (left / h) * F.row(j).transpose() + (right / h) * F.row(j + 1).transpose();
      }
    }
    out.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return out;
}

GammSystem assemble(const panel::PanelDataset& train, const GammConfig& config) {
  GammSystem sys;
  std::vector<double> all_times(train.rows.size());
  for (std::size_t i = 0; i < train.rows.size(); ++i)
    all_times[i] = train.rows[i].test_time;
  sys.basis = build_basis(all_times, config.num_basis);
  const int K = sys.basis.num_basis;

  auto designs = panel::design_matrices(train, config.linear_terms,
                                        config.random_terms, config.response);
  const auto spans = subject_spans(train);
  if (spans.size() != designs.size())
    throw std::runtime_error("assemble: design/subject grouping mismatch");

  std::vector<num::Matrix> spline_blocks(designs.size());
  num::Vector w = num::Vector::Zero(K);
  for (std::size_t s = 0; s < designs.size(); ++s) {
    std::vector<double> times;
    for (std::size_t r = spans[s].first; r < spans[s].second; ++r)
      times.push_back(train.rows[r].test_time);
    if (static_cast<Eigen::Index>(times.size()) != designs[s].X.rows())
      throw std::runtime_error("assemble: design row mismatch");
    spline_blocks[s] = basis_matrix(sys.basis, times);
    w += spline_blocks[s].colwise().sum().transpose();
  }

  if (config.center) {
    const num::Matrix w_col = w;
    Eigen::HouseholderQR<num::Matrix> qr(w_col);
    num::Matrix Q = qr.householderQ();
    sys.centering = Q.rightCols(K - 1);
  } else {
    sys.centering = num::Matrix::Identity(K, K);
  }
  num::Matrix Sc = sys.centering.transpose() * sys.basis.penalty * sys.centering;
  sys.spline_penalty = 0.5 * (Sc + Sc.transpose());

  const int plin = static_cast<int>(designs.front().X.cols());
  sys.spline_offset = plin;
  for (std::size_t s = 0; s < designs.size(); ++s) {
    num::Matrix Xs(designs[s].X.rows(), plin + sys.centering.cols());
    Xs << designs[s].X, spline_blocks[s] * sys.centering;
    designs[s].X = std::move(Xs);
  }
  sys.designs = std::move(designs);

  sys.term_names = {"intercept"};
  sys.term_names.insert(sys.term_names.end(), config.linear_terms.begin(),
                        config.linear_terms.end());
  for (Eigen::Index j = 0; j < sys.centering.cols(); ++j)
    sys.term_names.push_back("s(test_time)." + std::to_string(j + 1));
  return sys;
}

namespace {

lmm::PenaltyInfo embed_penalty(const GammSystem& system, double lambda) {
  const int p = static_cast<int>(system.designs.front().X.cols());
  const int sc = static_cast<int>(system.spline_penalty.rows());
  lmm::PenaltyInfo pen;
  pen.P = num::Matrix::Zero(p, p);
  pen.P.block(system.spline_offset, system.spline_offset, sc, sc) =
      system.spline_penalty;
  pen.lambda = lambda;
  Eigen::SelfAdjointEigenSolver<num::Matrix> es(system.spline_penalty);
  const num::Vector eig = es.eigenvalues();
  const double cutoff = eig[eig.size() - 1] * 1e-10;
  pen.rank = 0;
  pen.logdet_plus = 0.0;
  for (Eigen::Index i = 0; i < eig.size(); ++i) {
    if (eig[i] > cutoff) {
      ++pen.rank;
      pen.logdet_plus += std::log(eig[i]);
    }
  }
  return pen;
}

}  // namespace

lmm::LmmFit fit_system(const GammSystem& system, double lambda,
                       lmm::Criterion criterion, const lmm::FitControl& control,
                       const num::Vector* init_params) {
  if (system.designs.empty())
    throw std::invalid_argument("fit_system: empty system");
  if (lambda < 0.0) throw std::invalid_argument("fit_system: lambda must be >= 0");
  if (lambda == 0.0)
    return lmm::fit(system.designs, criterion, control, system.term_names,
                    nullptr, init_params);
  lmm::PenaltyInfo pen = embed_penalty(system, lambda);
  return lmm::fit(system.designs, criterion, control, system.term_names, &pen,
                  init_params);
}

double edf(const GammSystem& system, const lmm::VarianceComponents& theta,
           double lambda) {
  if (system.designs.empty()) throw std::invalid_argument("edf: empty system");
  const int q = static_cast<int>(system.designs.front().Z.cols());
  if (q != theta.dim) throw std::invalid_argument("edf: dimension mismatch");
  auto pe = lmm::eval_profiled(lmm::pack_theta(theta), q, system.designs,
                               lmm::Criterion::ml, false, nullptr, true);
  const int sc = static_cast<int>(system.spline_penalty.rows());
  num::Matrix Hp = pe.xtvix;
  if (lambda > 0.0)
    Hp.block(system.spline_offset, system.spline_offset, sc, sc) +=
        lambda * system.spline_penalty;
  num::Matrix hat = Hp.ldlt().solve(pe.xtvix);
  return hat.block(system.spline_offset, system.spline_offset, sc, sc).trace();
}

GammFit fit(const panel::PanelDataset& train, const GammConfig& config) {
  if (config.lambda_min <= 0.0 || config.lambda_max <= config.lambda_min)
    throw std::invalid_argument("fit: need 0 < lambda_min < lambda_max");
  GammSystem sys = assemble(train, config);

  const int G = std::max(config.grid_points, 4);
  const double lo = std::log10(config.lambda_min);
  const double hi = std::log10(config.lambda_max);
  num::Vector warm;
  bool have_warm = false;
  auto value_at = [&](double log_lambda) {
    auto f = fit_system(sys, std::pow(10.0, log_lambda), lmm::Criterion::reml,
                        config.control, have_warm ? &warm : nullptr);
    warm = lmm::pack_theta(f.theta);
    have_warm = true;
    return f;
  };

  std::vector<double> grid_vals(static_cast<std::size_t>(G));
  int kbest = 0;
  double vbest = -std::numeric_limits<double>::infinity();
  num::Vector warm_best;
  for (int g = 0; g < G; ++g) {
    const double lg = lo + (hi - lo) * g / (G - 1);
    auto f = value_at(lg);
    grid_vals[static_cast<std::size_t>(g)] = f.loglik;
    if (f.loglik > vbest) {
      vbest = f.loglik;
      kbest = g;
      warm_best = warm;
    }
  }

  double log_star = lo + (hi - lo) * kbest / (G - 1);
  const bool boundary = (kbest == 0 || kbest == G - 1);
  if (!boundary) {
    warm = warm_best;
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo + (hi - lo) * (kbest - 1) / (G - 1);
    double b = lo + (hi - lo) * (kbest + 1) / (G - 1);
    double c = b - invphi * (b - a);
    double d = a + invphi * (b - a);
    double fc = value_at(c).loglik;
    double fd = value_at(d).loglik;
    for (int it = 0; it < 80 && (b - a) > config.golden_tol; ++it) {
      if (fc > fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - invphi * (b - a);
        fc = value_at(c).loglik;
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + invphi * (b - a);
        fd = value_at(d).loglik;
      }
    }
    log_star = 0.5 * (a + b);
  }

  const double lambda_star = std::pow(10.0, log_star);
  lmm::LmmFit inner = fit_system(sys, lambda_star, lmm::Criterion::reml,
                                 config.control, have_warm ? &warm : nullptr);
  if (!boundary && inner.loglik < vbest) {
    // Refinement never beat the scanned grid point; keep the grid optimum.
    const double lg = lo + (hi - lo) * kbest / (G - 1);
    inner = fit_system(sys, std::pow(10.0, lg), lmm::Criterion::reml,
                       config.control, &warm_best);
    log_star = lg;
  }

  GammFit out;
  out.basis = sys.basis;
  out.config = config;
  out.inner = inner;
  out.lambda = std::pow(10.0, log_star);
  out.centering = sys.centering;
  const int plin = sys.spline_offset;
  const int sc = static_cast<int>(sys.centering.cols());
  out.beta_linear = inner.beta.head(plin);
  out.alpha = sys.centering * inner.beta.tail(sc);
  out.theta = inner.theta;
  out.subject_ids = inner.subject_ids;
  out.blups = inner.blups;
  out.reml_value = inner.loglik;
  out.converged = inner.converged;
  out.boundary_lambda = boundary;
  out.edf = edf(sys, inner.theta, out.lambda);

  num::Vector warm_ml = lmm::pack_theta(inner.theta);
  lmm::LmmFit ml_fit = fit_system(sys, out.lambda, lmm::Criterion::ml,
                                  config.control, &warm_ml);
  out.loglik = lmm::marginal_loglik(ml_fit.theta, sys.designs, ml_fit.beta);
  const int q = static_cast<int>(sys.designs.front().Z.cols());
  const int n_vc = q == 2 ? 4 : 2;
  out.aic = -2.0 * out.loglik + 2.0 * (plin + out.edf + n_vc);
  return out;
}

num::Vector predict(const GammFit& fit, const panel::PanelDataset& test,
                    const panel::TransformSpec& transform,
                    bool lognormal_mean_correction) {
  auto designs = panel::design_matrices(test, fit.config.linear_terms,
                                        fit.config.random_terms,
                                        fit.config.response);
  const auto spans = subject_spans(test);
  for (std::size_t s = 0; s < designs.size(); ++s) {
    std::vector<double> times;
    for (std::size_t r = spans[s].first; r < spans[s].second; ++r)
      times.push_back(test.rows[r].test_time);
    num::Matrix Bs = basis_matrix(fit.basis, times) * fit.centering;
    num::Matrix Xs(designs[s].X.rows(), designs[s].X.cols() + Bs.cols());
    Xs << designs[s].X, Bs;
    designs[s].X = std::move(Xs);
  }
  return lmm::predict(fit.inner, designs, transform, lognormal_mean_correction);
}

num::Vector smooth_values(const GammFit& fit, const std::vector<double>& times) {
  return basis_matrix(fit.basis, times) * fit.alpha;
}

void write_smooth_csv(const GammFit& fit, const std::string& path,
                      int grid_points) {
  if (grid_points < 2)
    throw std::invalid_argument("write_smooth_csv: need at least 2 grid points");
  std::vector<double> grid(static_cast<std::size_t>(grid_points));
  for (int i = 0; i < grid_points; ++i)
    grid[static_cast<std::size_t>(i)] =
        fit.basis.boundary_min +
        (fit.basis.boundary_max - fit.basis.boundary_min) * i / (grid_points - 1);
  num::Vector fhat = smooth_values(fit, grid);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_smooth_csv: cannot open " + path);
  os << "test_time,fhat\n";
  char line[64];
  for (int i = 0; i < grid_points; ++i) {
    std::snprintf(line, sizeof line, "%.10g,%.10g\n", grid[static_cast<std::size_t>(i)],
                  fhat[i]);
    os << line;
  }
}

std::string summary(const GammFit& fit) {
  std::ostringstream os;
  os << "lambda: " << fit.lambda << (fit.boundary_lambda ? " (grid boundary)" : "")
     << "\n";
  os << "edf: " << fit.edf << "\n";
  os << "restricted criterion: " << fit.reml_value << "\n";
  os << "loglik (ml): " << fit.loglik << "  aic: " << fit.aic << "\n";
  os << "converged: " << (fit.converged ? "yes" : "no") << "\n";
  os << "linear terms:\n";
  for (Eigen::Index i = 0; i < fit.beta_linear.size(); ++i) {
    const std::string name = i < static_cast<Eigen::Index>(fit.inner.term_names.size())
                                 ? fit.inner.term_names[static_cast<std::size_t>(i)]
                                 : "x" + std::to_string(i);
    os << "  " << name << ": " << fit.beta_linear[i] << "\n";
  }
  os << "variance components: sigma_b0^2=" << fit.theta.sigma_b0_sq;
  if (fit.theta.dim == 2)
    os << "  sigma_b1^2=" << fit.theta.sigma_b1_sq << "  rho=" << fit.theta.rho;
  os << "  sigma^2=" << fit.theta.sigma_sq << "\n";
  return os.str();
}

}  // namespace longmix::gamm
