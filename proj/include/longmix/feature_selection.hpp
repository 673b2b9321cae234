#pragma once

#include <string>
#include <vector>

#include "longmix/numeric_core.hpp"
#include "longmix/panel_data.hpp"

namespace longmix::fsel {

// How the cross-validated lambda is chosen from the grid.
enum class LambdaRule { cv_min, cv_1se };

// L1 regularization path with grouped cross-validation results. Coefficients
// are on the standardized-predictor scale (population 1/n variance
// convention), one row per grid point, in the order of `terms`.
struct LassoPath {
  std::vector<std::string> terms;
  std::vector<double> lambda_grid;  // descending
  num::Matrix coefficients;         // grid x predictors
  std::vector<double> cv_mse;       // pooled k-fold MSE per grid point
  std::vector<double> cv_se;        // standard error across folds
  LambdaRule lambda_choice_rule = LambdaRule::cv_min;
  double lambda_choice = 0.0;
  std::vector<std::string> selected;  // nonzero terms at lambda_choice
};

// One accepted elimination step: the model after the drop and its AIC.
struct StepwiseStep {
  std::vector<std::string> terms;
  double aic = 0.0;
  std::string dropped;  // empty on the initial entry
};

struct StepwiseTrace {
  std::vector<StepwiseStep> steps;
  std::vector<std::string> final_terms;
};

struct VifReport {
  std::vector<std::string> terms;
  std::vector<double> values;
  std::vector<std::string> warnings;  // one entry per exactly-collinear column
};

struct InteractionCandidate {
  std::string first;
  std::string second;
  double aic = 0.0;
  bool ok = false;
  std::string message;  // failure reason when !ok
};

struct InteractionScan {
  double base_aic = 0.0;
  // Successful fits first, ascending AIC; failed fits follow in scan order.
  std::vector<InteractionCandidate> ranked;
};

// Minimizes (1/2n)|y - X b|^2 + lambda |b|_1 by cyclic coordinate descent to
// a max coefficient change of 1e-8. Columns must be standardized to mean 0,
// sd 1 under the 1/n variance convention (checked to 1e-6); the response is
// used as given. Throws std::invalid_argument on dimension mismatch,
// non-standardized columns, or lambda < 0.
num::Vector lasso_fit(const num::Matrix& X, const num::Vector& y, double lambda);

// Cross-validated L1 selection of `candidates` (column ids or "a:b"
// interactions) for `response` on the fixed-effects linear model. The grid is
// 100 log-spaced points from lambda_max down four decades; folds group whole
// subjects (round-robin over ascending subject id) and each fold's training
// half is re-standardized. Coefficients within 1e-8 of zero are reported as
// dropped. Throws std::invalid_argument on folds < 2 or empty
// candidates and std::runtime_error when a training fold's response is
// constant.
LassoPath lasso_select(const panel::PanelDataset& data,
                       const std::string& response,
                       const std::vector<std::string>& candidates, int folds,
                       LambdaRule rule = LambdaRule::cv_min);

// Backward elimination on the mixed model: repeatedly drops the term whose
// removal lowers the maximum-likelihood AIC most, holding the random-effects
// structure fixed, until no drop improves. Candidate fits run concurrently.
// The response must already be on the modeling scale. Initial-fit errors
// propagate; a failed candidate fit is skipped.
StepwiseTrace stepwise_backward(
    const std::vector<std::string>& initial_terms,
    const panel::PanelDataset& data,
    const std::vector<std::string>& random_terms = {"intercept"},
    const std::string& response = "total_updrs");

// Variance inflation factors: VIF_j = 1/(1 - R2_j) from regressing column j
// on the remaining columns plus an intercept. Exactly collinear columns get
// +infinity and a warning entry. Throws std::invalid_argument on fewer than
// two columns or a constant column.
VifReport vif(const num::Matrix& X, const std::vector<std::string>& names = {});

// Fits base + one pairwise interaction for every pair of base terms and
// ranks the successful fits by maximum-likelihood AIC. Per-pair failures are
// recorded and the scan continues. Candidate fits run concurrently.
InteractionScan interaction_scan(
    const std::vector<std::string>& base_terms,
    const panel::PanelDataset& data,
    const std::vector<std::string>& random_terms = {"intercept"},
    const std::string& response = "total_updrs");

// The benchmark's retained predictor set, for bypassing the stochastic
// pipeline when exact reproduction is wanted.
const std::vector<std::string>& benchmark_predictors();

// Plain-text reports and the term-list file format (one term per line,
// '#' starts a comment).
std::string format_path(const LassoPath& path);
std::string format_trace(const StepwiseTrace& trace);
std::string format_scan(const InteractionScan& scan);
void write_terms(const std::string& path, const std::vector<std::string>& terms);
std::vector<std::string> read_terms(const std::string& path);

}  // namespace longmix::fsel
