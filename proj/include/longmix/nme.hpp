#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "longmix/gnmm.hpp"
#include "longmix/numeric_core.hpp"

namespace longmix::nme {

// Neural mixed-effects regression: a shared network theta_bar plus a
// per-subject deviation eta_i restricted to a chosen set of parameter
// groups, Gaussian-regularized toward zero. Trained by Adam on a mini-batch
// loss whose per-subject penalty is scaled by the fraction of that subject's
// observations present in the batch, with per-epoch refreshes of the
// observational variance and the deviation covariance.

// The flattened regression frame and the affine target scaling are shared
// with the other neural trainer.
using Frame = gnmm::GnmmFrame;
using gnmm::TargetScaling;
using gnmm::fit_target_scaling;
using gnmm::make_frame;
using gnmm::scale_targets;

// Parameter groups that may carry per-subject deviations. layer1/layer2 name
// the first and second hidden layers, output the final linear layer.
enum class Group {
  layer1_weights,
  layer1_biases,
  layer2_weights,
  layer2_biases,
  output_weights,
  output_biases,
};

std::string group_name(Group group);
Group group_from_name(const std::string& name);

// Resolves the groups against the architecture as (layer index, weights?)
// pairs in canonical order (deduplicated). Throws when a selector names a
// hidden layer the architecture does not have.
std::vector<std::pair<int, bool>> group_blocks(const num::MlpArchitecture& arch,
                                               const std::vector<Group>& groups);

struct NmeConfig {
  num::MlpArchitecture architecture{17, {32, 16}};
  // Empty degenerates to a plain MLP: no deviations, no penalty.
  std::vector<Group> person_specific_groups{Group::output_biases};
  int epochs = 4000;
  int batch_size = 512;
  double learning_rate = 1e-3;  // Adam step size; the other moments keep Adam defaults
  std::uint64_t seed = 1;
};

struct NmeState {
  num::MlpArchitecture architecture;
  std::vector<Group> groups;     // person-specific groups, canonical order
  num::NetworkParams theta_bar;  // shared parameters
  std::vector<int> subjects;     // sorted unique training subjects
  // Per-subject deviations, aligned with `subjects`. Coordinates outside
  // `groups` are exactly zero at all times.
  std::vector<num::NetworkParams> eta;
  // Diagonal deviation covariance: tau^2 per in-group coordinate, stored in
  // parameter layout (entries outside `groups` are unused and stay zero).
  num::NetworkParams sigma;
  double sigma_sq = 1.0;  // observational variance

  // Index into `subjects`/`eta`, or -1 when the subject is unknown.
  int subject_index(int subject) const;
};

// All-zero skeleton for the given config and subjects: theta_bar and eta
// zeroed, in-group sigma entries 1, sigma_sq 1. Subjects are deduplicated
// and sorted. Validates the architecture/group combination.
NmeState make_state(const NmeConfig& config, const std::vector<int>& subjects);

// Network mean for one row: numeric_core forward pass with the subject's
// deviations as parameter offsets. population_mode substitutes eta = 0 and
// accepts unknown subjects; otherwise an unknown subject throws.
double predict_one(const NmeState& state, const num::Vector& x, int subject,
                   bool population_mode = false);

// sum_ij (1/sigma_sq) 0.5 (y_ij - mu_ij)^2 + sum_i eta_i' Sigma^{-1} eta_i,
// minimized during training. Every frame subject must be known.
double full_loss(const NmeState& state, const Frame& frame);

// Per-subject batch counts N_kB and training totals m_k behind the
// proportional penalty scaling. Over the batches of one epoch the N_kB of a
// subject sum to m_k, so the mini-batch penalties telescope to the full
// penalty exactly.
struct BatchPenaltyLedger {
  std::vector<int> subjects;      // sorted unique subjects of the batch
  std::vector<int> batch_counts;  // N_kB, aligned with `subjects`
  std::vector<int> total_counts;  // m_k over the whole frame, aligned
};
BatchPenaltyLedger make_ledger(const Frame& frame, const std::vector<int>& rows);

// (1/B) sum_batch (1/sigma_sq) 0.5 (y - mu)^2
//   + sum_{k in batch} (N_kB/m_k) eta_k' Sigma^{-1} eta_k.
// Throws when the ledger does not match the batch contents.
double minibatch_loss(const NmeState& state, const Frame& frame,
                      const std::vector<int>& rows, const BatchPenaltyLedger& ledger);

// Loss gradients. eta_index holds positions into state.subjects (ascending);
// only those subjects carry a gradient entry. Deviation gradients are masked
// to the person-specific groups.
struct Gradients {
  num::NetworkParams theta_bar;
  std::vector<int> eta_index;
  std::vector<num::NetworkParams> eta;  // aligned with eta_index
};

// Gradients of minibatch_loss. The data term backpropagates the error signal
// -(y - mu)/sigma_sq, scaled by 1/B; through theta_bar + eta the same
// per-parameter values feed the shared gradient (summed over all batch rows)
// and the row subject's deviation gradient, which adds the penalty pull
// 2 (N_kB/m_k) Sigma^{-1} eta_k. Subjects outside the batch get no entry.
Gradients gradients(const NmeState& state, const Frame& frame,
                    const std::vector<int>& rows, const BatchPenaltyLedger& ledger);

// Gradient of full_loss: unscaled data term over every row plus the full
// penalty pull 2 Sigma^{-1} eta_i for every subject.
Gradients full_loss_gradients(const NmeState& state, const Frame& frame);

// Adam training. Deterministic given (config, frame): one RNG seeded with
// config.seed drives Xavier initialization of theta_bar (eta starts at zero,
// Sigma at identity, sigma_sq at 1), then one shuffle per epoch; batches are
// consecutive chunks of the shuffled order (last one may be short). Each
// batch takes one Adam step on theta_bar and on each batch subject's eta
// from the mini-batch gradients. After the batches of an epoch:
// sigma_sq <- mean squared training residual, then every in-group Sigma
// entry <- sample variance (n-1) of that eta coordinate across subjects,
// floored at 1e-6 (epoch 1 itself runs under the initial Sigma = I). The
// trace records full_loss after each refresh; a non-finite loss or gradient
// aborts with the epoch index.
struct TrainResult {
  NmeState state;
  std::vector<double> loss_trace;  // full training loss after each epoch
};
TrainResult train(const NmeConfig& config, const Frame& frame);

// Scaled-space means mapped back to the original target scale.
// population_mode substitutes eta = 0 and accepts unseen subjects.
num::Vector predict(const NmeState& state, const Frame& test,
                    const TargetScaling& scaling, bool population_mode = false);

// Serializes as three files under the given prefix: <prefix>.header
// (key-value: groups, Sigma diagonal, sigma_sq, config echo), <prefix>.theta
// (flat shared parameters in numeric_core order) and <prefix>.eta (one line
// per subject: id followed by the in-group deviation values).
void save(const NmeState& state, const NmeConfig& config, const std::string& prefix);
std::pair<NmeState, NmeConfig> load(const std::string& prefix);

// Benchmark configuration: hidden layers 32 and 16, deviations on the output
// bias, 4000 epochs, batch size 512, Adam at 2e-3.
NmeConfig preset_mlp();

}  // namespace longmix::nme
