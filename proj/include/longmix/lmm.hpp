#pragma once

#include <string>
#include <vector>

#include "longmix/numeric_core.hpp"
#include "longmix/panel_data.hpp"

namespace longmix::lmm {

enum class Criterion { ml, reml };

// Covariance of the random effects (D) and the residual variance. dim is the
// random-effect dimension q: 1 (intercept only) or 2 (intercept + slope).
struct VarianceComponents {
  double sigma_b0_sq = 1.0;
  double sigma_b1_sq = 0.0;
  double rho = 0.0;
  double sigma_sq = 1.0;
  int dim = 1;

  num::Matrix D() const;  // q x q, positive semi-definite
};

// Unconstrained parametrization: log-Cholesky of D followed by log sigma.
// q=1: [l0, ls]; q=2: [l0, l10, l1, ls] with L = [[e^l0, 0], [l10, e^l1]].
num::Vector pack_theta(const VarianceComponents& theta);
VarianceComponents unpack_theta(const num::Vector& params, int q);

struct FitControl {
  int max_iter = 200;
  double grad_tol = 1e-6;       // infinity norm in the unconstrained space
  int em_warmstart_iters = 20;
  double variance_floor = 1e-10;
};

struct LmmFit {
  std::vector<std::string> term_names;  // "intercept" first when provided
  num::Vector beta;
  VarianceComponents theta;
  std::vector<int> subject_ids;
  std::vector<num::Vector> blups;   // aligned with subject_ids
  double loglik = 0.0;              // maximized criterion value
  Criterion criterion = Criterion::ml;
  double aic = 0.0;                 // -2 loglik + 2 (fixed + variance params)
  int n_obs = 0;
  int n_params = 0;
  bool converged = false;
  bool boundary = false;            // a variance within 10x of the floor
  double grad_norm = 0.0;           // projected gradient at the solution
};

// Blockwise marginal log-likelihood at explicit beta:
// -1/2 sum_i [log|V_i| + r_i' V_i^-1 r_i + n_i log 2pi], V_i = Z_i D Z_i' + s2 I.
double marginal_loglik(const VarianceComponents& theta,
                       const std::vector<panel::SubjectDesign>& designs,
                       const num::Vector& beta);

// Generalised least squares: (X' V^-1 X)^-1 X' V^-1 y, accumulated per block.
num::Vector gls_beta(const VarianceComponents& theta,
                     const std::vector<panel::SubjectDesign>& designs);

// Restricted log-likelihood with beta profiled out: adds -1/2 log|X'V^-1X|
// and uses the (n - p) log 2pi constant.
double reml_loglik(const VarianceComponents& theta,
                   const std::vector<panel::SubjectDesign>& designs);

// Optional quadratic coefficient penalty shared with the spline model:
// lambda * beta' P beta added to the negated criterion. rank/logdet_plus
// describe P's positive eigenvalues (for the restricted criterion's
// log|lambda P|_+ term). A null penalty reduces every formula to the plain
// mixed-model criteria.
struct PenaltyInfo {
  num::Matrix P;
  double lambda = 0.0;
  int rank = 0;
  double logdet_plus = 0.0;
};

// Criterion value at unconstrained params with beta profiled out (penalized
// GLS), plus the analytic gradient and A = sum X'V^-1 X when requested.
struct ProfiledEval {
  double value = 0.0;
  num::Vector beta;
  num::Vector gradient;
  num::Matrix xtvix;
};
ProfiledEval eval_profiled(const num::Vector& params, int q,
                           const std::vector<panel::SubjectDesign>& designs,
                           Criterion criterion, bool want_gradient,
                           const PenaltyInfo* penalty = nullptr,
                           bool want_xtvix = false);

// Maximizes the chosen criterion: EM warm start (skipped when init_params is
// given) followed by BFGS with analytic gradients. The optimizer internally
// rescales each random-effect column to unit root-mean-square for
// conditioning; converged/grad_norm refer to that scaled parametrization,
// while theta and the BLUPs are reported in the original units. init_params,
// when given, is a packed parameter vector in the original units (see
// pack_theta). Variances are floored at control.variance_floor; estimates
// within 10x of the floor set the boundary flag. Throws std::runtime_error on
// dimension errors; non-convergence is reported through converged/grad_norm,
// not thrown.
LmmFit fit(const std::vector<panel::SubjectDesign>& designs, Criterion criterion,
           const FitControl& control = {},
           const std::vector<std::string>& term_names = {},
           const PenaltyInfo* penalty = nullptr,
           const num::Vector* init_params = nullptr);

// Conditional means b_i = D Z_i' V_i^-1 (y_i - X_i beta), one per subject.
std::vector<num::Vector> blup(const VarianceComponents& theta,
                              const num::Vector& beta,
                              const std::vector<panel::SubjectDesign>& designs);

// Subject-conditional predictions x'beta + z'blup for test designs, mapped
// back to the original scale when the transform log-transformed the response
// (exp by default, exp(mu + s2/2) with lognormal_mean_correction). Throws on
// subjects absent from the fit.
num::Vector predict(const LmmFit& fit,
                    const std::vector<panel::SubjectDesign>& test_designs,
                    const panel::TransformSpec& transform,
                    bool lognormal_mean_correction = false);

// Plain-text fit summary (terms, estimates, variance components).
std::string summary(const LmmFit& fit);
// Machine-readable key=value lines consumed by the benchmark harness.
void write_keyvalue(const LmmFit& fit, const std::string& path);

}  // namespace longmix::lmm
