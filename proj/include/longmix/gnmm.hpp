#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "longmix/numeric_core.hpp"
#include "longmix/panel_data.hpp"

namespace longmix::gnmm {

// Neural-network mixed model: an MLP fixed-effect surface plus an additive
// per-subject random intercept, trained by stochastic gradient ascent on a
// Laplace-approximated Gaussian quasi-likelihood. With the random intercept
// disabled the model reduces to a ridge-penalized MLP regression.

struct GnmmConfig {
  num::MlpArchitecture architecture{17, {3}};
  double ridge_lambda = 0.001;  // coefficient of (w'w + d'd) over all weights and biases
  double learning_rate = 0.005;
  int epochs = 500;
  int batch_size = 64;
  bool random_intercept = true;
  // After each epoch's batches, reset every b_i to its closed-form mode given
  // the current network and variances (in addition to the per-batch gradient
  // steps). Toggleable so the two update styles can be compared.
  bool laplace_refresh = true;
  std::uint64_t seed = 1;
};

// Flattened regression frame: one row per visit, subjects in any order.
struct GnmmFrame {
  num::Matrix X;             // n x input_dim features
  num::Vector y;             // response
  std::vector<int> subject;  // subject id per row
};

// Builds a frame from a panel. Default feature set: test_time followed by the
// 16 voice measures. Values are taken as stored — standardize beforehand via
// panel::apply_transforms when the training algorithm requires it.
GnmmFrame make_frame(const panel::PanelDataset& data,
                     const std::vector<std::string>& features = {},
                     const std::string& response = "total_updrs");

// Affine target scaling y' = (y - mean)/sd used during training; predictions
// are mapped back through it. sd uses the n-1 convention.
struct TargetScaling {
  double mean = 0.0;
  double sd = 1.0;
};
TargetScaling fit_target_scaling(const num::Vector& y);
void scale_targets(num::Vector& y, const TargetScaling& scaling);

struct GnmmState {
  num::MlpArchitecture architecture;
  num::NetworkParams params;
  std::vector<int> subjects;  // sorted unique training subjects
  num::Vector b;              // random intercepts, aligned with `subjects`
  double sigma_sq = 1.0;      // residual variance phi
  double sigma_b_sq = 1.0;    // random-intercept variance D
  bool random_intercept = true;

  // Index into `subjects`/`b`, or -1 when the subject is unknown.
  int subject_index(int subject) const;
};

// Conditional mean mu = network(x) + b_i (identity output link). Throws when
// the subject is unknown and the random intercept is enabled.
double forward_mean(const GnmmState& state, const num::Vector& x, int subject);

// Gaussian quasi-deviance contribution integral_y^mu (y-u) du = -(y-mu)^2/2.
double quasi_deviance(double y, double mu);

// (1/phi) sum_ij quasi_deviance - sum_i b_i^2/(2D) - lambda (w'w + d'd).
// Throws when D = 0 meets a nonzero b_i (penalty undefined).
double training_objective(const GnmmState& state, const GnmmFrame& frame,
                          const GnmmConfig& config);

// Ascent gradients of the training objective restricted to one batch of rows:
// the data term is summed over the batch, while the ridge and the -b_i/D
// pull are applied at full strength (once per call / once per batch subject).
// Over the full row set this is exactly the gradient of training_objective.
struct ScoreGradients {
  num::NetworkParams params;
  num::Vector b;  // aligned with state.subjects; zero for subjects outside the batch
};
ScoreGradients quasi_score_gradients(const GnmmState& state, const GnmmFrame& frame,
                                     const std::vector<int>& rows,
                                     const GnmmConfig& config);

// Closed-form mode of the random-intercept posterior given the network:
// b~_i = D sum_j r_ij / (phi + n_i D) with r_ij the residual without b.
// Requires D > 0. Result is aligned with state.subjects.
num::Vector laplace_mode(const GnmmState& state, const GnmmFrame& frame);

// The per-epoch variance rule: sigma_sq <- mean squared residual over the
// frame (with the current b), sigma_b_sq <- sample variance (n-1) of b.
// sigma_b_sq is floored at 1e-3 * sigma_sq (and both at 1e-12): with the
// intercepts near zero their raw variance collapses, and the floor keeps the
// per-batch -b_i/D gradient pull a contraction instead of a blow-up.
void update_variances(GnmmState& state, const GnmmFrame& frame);

// Laplace-approximated quasi-likelihood at the closed-form mode, including
// the log-determinant terms the training objective drops (reported so their
// magnitude can be inspected). The ridge enters as lambda/2 here.
struct LaplaceReport {
  double value = 0.0;           // full approximation at the mode
  double logdet_term = 0.0;     // -(m/2) log D
  double curvature_term = 0.0;  // -(1/2) sum_i log(n_i/phi + 1/D)
};
LaplaceReport laplace_report(const GnmmState& state, const GnmmFrame& frame,
                             const GnmmConfig& config);

// Stochastic training. Deterministic given (config, frame): one RNG seeded
// with config.seed drives Xavier initialization, then one shuffle per epoch;
// batches are consecutive chunks of the shuffled order (last one may be
// short). Each batch applies simultaneous ascent steps of size
// learning_rate / batch_rows on the batch gradients (a step on the
// batch-mean objective, so the step scale is batch-size-robust). After the
// batches of an epoch: optional laplace_mode refresh of b, then
// update_variances, then the objective is recorded. Throws (naming the
// epoch) if the objective turns non-finite.
struct TrainResult {
  GnmmState state;
  std::vector<double> objective_trace;  // training objective after each epoch
};
TrainResult train(const GnmmConfig& config, const GnmmFrame& frame);

// Scaled-space means mapped back to the original target scale. Every test
// subject must have been seen in training when the random intercept is on.
num::Vector predict(const GnmmState& state, const GnmmFrame& test,
                    const TargetScaling& scaling);

// Key-value header (variances, config echo) followed by the flat parameter
// vector (numeric_core flattening order: layer-major, weights before biases,
// row-major) and the per-subject intercepts.
void save(const GnmmState& state, const GnmmConfig& config, const std::string& path);
std::pair<GnmmState, GnmmConfig> load(const std::string& path);

// Benchmark configurations (architecture, ridge, learning rate); epochs and
// batch size keep the config defaults. All three disable the per-epoch
// laplace refresh: the benchmark regime lets the intercepts evolve by
// stochastic steps only (the refresh variant fits the held-out subjects far
// more closely and is kept as an ablation toggle).
GnmmConfig preset_1layer();  // 3 ReLU nodes, lambda 0.001, lr 0.005
GnmmConfig preset_2layer();  // 3+2 ReLU nodes, lambda 0.002, lr 0.005
GnmmConfig preset_ann();     // 3 ReLU nodes, lambda 0.001, lr 0.001, no random effect

}  // namespace longmix::gnmm
