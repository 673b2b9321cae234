#pragma once

#include <string>
#include <vector>

#include "longmix/lmm.hpp"
#include "longmix/numeric_core.hpp"
#include "longmix/panel_data.hpp"

namespace longmix::gamm {

// Natural cubic regression spline in test_time, parametrized by the function
// values at the knots (so coefficients are in response units and the basis
// sums to one). Curvature is measured on the unit-scaled axis
// u = (t - boundary_min) / (boundary_max - boundary_min): the penalty
// quadratic form alpha' S alpha equals the integral of f''(u)^2 du, which
// keeps smoothing strength invariant to the unit time is recorded in.
struct SplineBasis {
  num::Vector interior_knots;  // ascending, test_time units
  double boundary_min = 0.0;
  double boundary_max = 1.0;
  int num_basis = 0;           // K: one basis function per knot
  num::Matrix penalty;         // K x K PSD; affine functions span its null space
};

// K knots at evenly spaced quantiles of the distinct training times
// (boundaries at the extremes, K-2 interior). Requires K >= 4 and at least
// K distinct times; throws when the quantile knots collide.
SplineBasis build_basis(const std::vector<double>& times, int K);

// Basis values (deriv 0) or first/second derivatives with respect to the
// unit-scaled axis, one row per time, one column per basis function. Times
// beyond the boundary use the natural linear extension (zero curvature).
num::Matrix basis_matrix(const SplineBasis& basis, const std::vector<double>& times,
                         int deriv = 0);

struct GammConfig {
  std::vector<std::string> linear_terms = {"age", "hnr"};  // intercept added
  std::vector<std::string> random_terms = {"intercept", "test_time"};
  std::string response = "total_updrs";
  int num_basis = 10;
  bool center = true;          // sum-to-zero constraint over training rows
  double lambda_min = 1e-6;
  double lambda_max = 1e6;
  int grid_points = 20;        // log-spaced scan before golden-section
  double golden_tol = 1e-3;    // interval width on log10 lambda
  lmm::FitControl control{};
};

// Assembled penalized mixed-model system: per-subject designs whose X blocks
// are [linear terms | spline columns], the spline block's penalty, and the
// centering map from constrained columns back to the K raw coefficients.
struct GammSystem {
  std::vector<panel::SubjectDesign> designs;
  int spline_offset = 0;       // first spline column in X
  num::Matrix spline_penalty;  // block penalty (centered when configured)
  num::Matrix centering;       // K x spline-cols map; identity when uncentered
  SplineBasis basis;
  std::vector<std::string> term_names;  // linear names then spline columns
};

GammSystem assemble(const panel::PanelDataset& train, const GammConfig& config);

// Inner fit at fixed lambda: the spline block enters the fixed effects with
// an added lambda * S penalty in the GLS normal equations, and the variance
// components are re-estimated under the chosen criterion. The returned
// loglik is the penalized criterion value (for the restricted criterion this
// includes the log|H_p| and log|lambda S|_+ terms used for smoothing
// selection).
lmm::LmmFit fit_system(const GammSystem& system, double lambda,
                       lmm::Criterion criterion,
                       const lmm::FitControl& control = {},
                       const num::Vector* init_params = nullptr);

// Effective degrees of freedom of the smooth: trace of the spline block of
// (X'V^-1 X + lambda S)^-1 X'V^-1 X at the given variance components.
double edf(const GammSystem& system, const lmm::VarianceComponents& theta,
           double lambda);

struct GammFit {
  SplineBasis basis;
  GammConfig config;
  lmm::LmmFit inner;           // full fitted system at the selected lambda
  num::Vector beta_linear;     // intercept + linear-term coefficients
  num::Vector alpha;           // K spline coefficients (constraint unfolded)
  num::Matrix centering;
  double lambda = 0.0;
  lmm::VarianceComponents theta;
  std::vector<int> subject_ids;
  std::vector<num::Vector> blups;
  double edf = 0.0;
  double loglik = 0.0;         // unpenalized marginal loglik of the ML refit
  double aic = 0.0;            // -2 loglik + 2 (linear terms + edf + variance params)
  double reml_value = 0.0;     // penalized restricted criterion at lambda
  bool converged = false;
  bool boundary_lambda = false;  // optimum stuck at a grid boundary
};

// Smoothing selection: penalized restricted-likelihood values on a log-spaced
// lambda grid, then golden-section refinement inside the bracketing cell,
// with variance components re-estimated (warm-started) at every candidate.
// A boundary optimum is returned as-is with boundary_lambda set. The AIC is
// computed from an ML refit at the selected lambda, counting the smooth as
// its effective degrees of freedom.
GammFit fit(const panel::PanelDataset& train, const GammConfig& config = {});

// Subject-conditional predictions on the original response scale (mirrors
// the mixed-model predict, including the optional lognormal mean
// correction). Throws on subjects absent from the fit.
num::Vector predict(const GammFit& fit, const panel::PanelDataset& test,
                    const panel::TransformSpec& transform,
                    bool lognormal_mean_correction = false);

// The centered smooth f(t) evaluated at given times.
num::Vector smooth_values(const GammFit& fit, const std::vector<double>& times);

// Plot-ready CSV "test_time,fhat" over an even grid spanning the boundary.
void write_smooth_csv(const GammFit& fit, const std::string& path,
                      int grid_points = 200);

// Plain-text fit summary (lambda, edf, variance components, linear terms).
std::string summary(const GammFit& fit);

}  // namespace longmix::gamm
