#include "longmix/nme.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace longmix::nme {

namespace {

constexpr double kSigmaFloor = 1e-6;

// (layer, weights?) selection flags per layer.
struct BlockMask {
  std::vector<bool> weights;
  std::vector<bool> biases;
};

BlockMask make_mask(const num::MlpArchitecture& arch,
                    const std::vector<std::pair<int, bool>>& blocks) {
  BlockMask mask;
  mask.weights.assign(static_cast<std::size_t>(arch.layer_count()), false);
  mask.biases.assign(static_cast<std::size_t>(arch.layer_count()), false);
  for (const auto& [layer, weights] : blocks)
    (weights ? mask.weights : mask.biases)[static_cast<std::size_t>(layer)] = true;
  return mask;
}

void mask_to_groups(num::NetworkParams& params, const BlockMask& mask) {
  for (std::size_t l = 0; l < params.W.size(); ++l) {
    if (!mask.weights[l]) params.W[l].setZero();
    if (!mask.biases[l]) params.b[l].setZero();
  }
}

void check_frame(const NmeState& state, const Frame& frame) {
  if (frame.X.rows() != frame.y.size() ||
      frame.X.rows() != static_cast<Eigen::Index>(frame.subject.size()))
    throw std::invalid_argument("nme: frame rows, response, and subjects disagree");
  if (frame.X.cols() != state.architecture.input_dim)
    throw std::invalid_argument("nme: frame width does not match the architecture");
}

// Row positions grouped by subject position; vector is indexed by the
// position in state.subjects. Throws on unknown subjects.
std::vector<std::vector<Eigen::Index>> group_rows(const NmeState& state, const Frame& frame,
                                                  const std::vector<int>& rows) {
  std::vector<std::vector<Eigen::Index>> grouped(state.subjects.size());
  for (int r : rows) {
    if (r < 0 || r >= frame.X.rows()) throw std::invalid_argument("nme: batch row out of range");
    const int idx = state.subject_index(frame.subject[static_cast<std::size_t>(r)]);
    if (idx < 0)
      throw std::runtime_error("nme: unknown subject " +
                               std::to_string(frame.subject[static_cast<std::size_t>(r)]));
    grouped[static_cast<std::size_t>(idx)].push_back(r);
  }
  return grouped;
}

std::vector<int> all_rows(const Frame& frame) {
  std::vector<int> rows(static_cast<std::size_t>(frame.X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

// Network means for the given rows (scattered back into row positions),
// computed subject group by subject group so each group uses its offsets.
num::Vector scattered_means(const NmeState& state, const Frame& frame,
                            const std::vector<std::vector<Eigen::Index>>& grouped) {
  num::Vector mu = num::Vector::Zero(frame.y.size());
  for (std::size_t k = 0; k < grouped.size(); ++k) {
    if (grouped[k].empty()) continue;
    num::Matrix block(static_cast<Eigen::Index>(grouped[k].size()), frame.X.cols());
    for (std::size_t t = 0; t < grouped[k].size(); ++t) block.row(static_cast<Eigen::Index>(t)) = frame.X.row(grouped[k][t]);
    const num::Vector out =
        num::mlp_forward_batch(state.architecture, state.theta_bar, &state.eta[k], block).output;
    for (std::size_t t = 0; t < grouped[k].size(); ++t) mu[grouped[k][t]] = out[static_cast<Eigen::Index>(t)];
  }
  return mu;
}

// eta' Sigma^{-1} eta over the in-group coordinates.
double penalty_quadform(const NmeState& state, const num::NetworkParams& eta_i,
                        const std::vector<std::pair<int, bool>>& blocks) {
  double quad = 0.0;
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights) {
      for (Eigen::Index r = 0; r < eta_i.W[l].rows(); ++r)
        for (Eigen::Index c = 0; c < eta_i.W[l].cols(); ++c) {
          const double s = state.sigma.W[l](r, c);
          if (s <= 0.0) throw std::invalid_argument("nme: non-positive Sigma entry");
          quad += eta_i.W[l](r, c) * eta_i.W[l](r, c) / s;
        }
    } else {
      for (Eigen::Index i = 0; i < eta_i.b[l].size(); ++i) {
        const double s = state.sigma.b[l][i];
        if (s <= 0.0) throw std::invalid_argument("nme: non-positive Sigma entry");
        quad += eta_i.b[l][i] * eta_i.b[l][i] / s;
      }
    }
  }
  return quad;
}

std::size_t in_group_count(const num::MlpArchitecture& arch,
                           const std::vector<std::pair<int, bool>>& blocks) {
  std::size_t count = 0;
  for (const auto& [layer, weights] : blocks)
    count += static_cast<std::size_t>(weights ? arch.layer_in(layer) * arch.layer_out(layer)
                                              : arch.layer_out(layer));
  return count;
}

void check_sigma_positive(const NmeState& state,
                          const std::vector<std::pair<int, bool>>& blocks) {
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    const double least = weights ? state.sigma.W[l].minCoeff() : state.sigma.b[l].minCoeff();
    if (least <= 0.0) throw std::invalid_argument("nme: non-positive Sigma entry");
  }
}

// Adds 2 * coeff * Sigma^{-1} eta to the in-group coordinates of grad.
void add_penalty_pull(num::NetworkParams& grad, const NmeState& state,
                      const num::NetworkParams& eta_i, double coeff,
                      const std::vector<std::pair<int, bool>>& blocks) {
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights)
      grad.W[l] += 2.0 * coeff * eta_i.W[l].cwiseQuotient(state.sigma.W[l]);
    else
      grad.b[l] += 2.0 * coeff * eta_i.b[l].cwiseQuotient(state.sigma.b[l]);
  }
}

// Data term + its scattered means, plus the penalty over every subject.
double loss_from_means(const NmeState& state, const Frame& frame, const num::Vector& mu,
                       const std::vector<std::pair<int, bool>>& blocks) {
  double loss = 0.0;
  for (Eigen::Index r = 0; r < frame.y.size(); ++r) {
    const double resid = frame.y[r] - mu[r];
    loss += 0.5 * resid * resid / state.sigma_sq;
  }
  for (const auto& eta_i : state.eta) loss += penalty_quadform(state, eta_i, blocks);
  return loss;
}

// Shared accumulator for the minibatch and full-loss gradients: data error
// signals scaled by `data_scale`, penalty pull with per-subject coefficient.
Gradients accumulate_gradients(const NmeState& state, const Frame& frame,
                               const std::vector<std::vector<Eigen::Index>>& grouped,
                               double data_scale,
                               const std::vector<double>& penalty_coeff,
                               bool include_all_subjects) {
  const auto blocks = group_blocks(state.architecture, state.groups);
  check_sigma_positive(state, blocks);
  const BlockMask mask = make_mask(state.architecture, blocks);
  Gradients grads;
  grads.theta_bar = num::NetworkParams::zeros(state.architecture);
  for (std::size_t k = 0; k < grouped.size(); ++k) {
    if (grouped[k].empty() && !include_all_subjects) continue;
    num::NetworkParams g = num::NetworkParams::zeros(state.architecture);
    if (!grouped[k].empty()) {
      num::Matrix block(static_cast<Eigen::Index>(grouped[k].size()), frame.X.cols());
      num::Vector err(static_cast<Eigen::Index>(grouped[k].size()));
      for (std::size_t t = 0; t < grouped[k].size(); ++t)
        block.row(static_cast<Eigen::Index>(t)) = frame.X.row(grouped[k][t]);
      const num::BatchCache cache =
          num::mlp_forward_batch(state.architecture, state.theta_bar, &state.eta[k], block);
      for (std::size_t t = 0; t < grouped[k].size(); ++t) {
        const Eigen::Index r = grouped[k][t];
        err[static_cast<Eigen::Index>(t)] = (cache.output[static_cast<Eigen::Index>(t)] - frame.y[r]) *
                                            data_scale / state.sigma_sq;
      }
      g = num::mlp_backward_batch(state.architecture, state.theta_bar, &state.eta[k], cache, err);
      grads.theta_bar.add_scaled(g, 1.0);
    }
    mask_to_groups(g, mask);
    add_penalty_pull(g, state, state.eta[k], penalty_coeff[k], blocks);
    grads.eta_index.push_back(static_cast<int>(k));
    grads.eta.push_back(std::move(g));
  }
  return grads;
}

// Sorted batch subject ids with their multiplicities.
std::vector<std::pair<int, int>> batch_counts(const Frame& frame, const std::vector<int>& rows) {
  if (rows.empty()) throw std::invalid_argument("nme: empty batch");
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (int r : rows) {
    if (r < 0 || r >= frame.X.rows()) throw std::invalid_argument("nme: batch row out of range");
    ids.push_back(frame.subject[static_cast<std::size_t>(r)]);
  }
  std::sort(ids.begin(), ids.end());
  std::vector<std::pair<int, int>> counts;
  for (std::size_t i = 0; i < ids.size();) {
    std::size_t j = i;
    while (j < ids.size() && ids[j] == ids[i]) ++j;
    counts.emplace_back(ids[i], static_cast<int>(j - i));
    i = j;
  }
  return counts;
}

void validate_ledger(const NmeState& state, const Frame& frame, const std::vector<int>& rows,
                     const BatchPenaltyLedger& ledger) {
  const auto counts = batch_counts(frame, rows);
  bool match = ledger.subjects.size() == counts.size();
  for (std::size_t i = 0; match && i < counts.size(); ++i)
    match = ledger.subjects[i] == counts[i].first && ledger.batch_counts[i] == counts[i].second;
  if (!match) throw std::invalid_argument("nme: ledger does not match the batch contents");
  for (std::size_t i = 0; i < ledger.subjects.size(); ++i) {
    if (ledger.total_counts[i] < ledger.batch_counts[i] || ledger.total_counts[i] <= 0)
      throw std::invalid_argument("nme: ledger totals invalid for subject " +
                                  std::to_string(ledger.subjects[i]));
    if (state.subject_index(ledger.subjects[i]) < 0)
      throw std::runtime_error("nme: unknown subject " + std::to_string(ledger.subjects[i]));
  }
}

// Sample variance (n-1) of every in-group coordinate across subjects, floored.
void update_sigma(NmeState& state, const std::vector<std::pair<int, bool>>& blocks) {
  const std::size_t m = state.eta.size();
  if (m < 2) return;  // variance across subjects undefined; keep the current Sigma
  auto variance_at = [&](auto&& entry) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += entry(state.eta[i]);
    mean /= static_cast<double>(m);
    double ss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = entry(state.eta[i]) - mean;
      ss += d * d;
    }
    return std::max(ss / static_cast<double>(m - 1), kSigmaFloor);
  };
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights) {
      for (Eigen::Index r = 0; r < state.sigma.W[l].rows(); ++r)
        for (Eigen::Index c = 0; c < state.sigma.W[l].cols(); ++c)
          state.sigma.W[l](r, c) = variance_at(
              [l, r, c](const num::NetworkParams& p) { return p.W[l](r, c); });
    } else {
      for (Eigen::Index i = 0; i < state.sigma.b[l].size(); ++i)
        state.sigma.b[l][i] =
            variance_at([l, i](const num::NetworkParams& p) { return p.b[l][i]; });
    }
  }
}

}  // namespace

std::string group_name(Group group) {
  switch (group) {
    case Group::layer1_weights: return "layer1_weights";
    case Group::layer1_biases: return "layer1_biases";
    case Group::layer2_weights: return "layer2_weights";
    case Group::layer2_biases: return "layer2_biases";
    case Group::output_weights: return "output_weights";
    case Group::output_biases: return "output_biases";
  }
  throw std::invalid_argument("nme: unknown group");
}

Group group_from_name(const std::string& name) {
  for (Group g : {Group::layer1_weights, Group::layer1_biases, Group::layer2_weights,
                  Group::layer2_biases, Group::output_weights, Group::output_biases})
    if (group_name(g) == name) return g;
  throw std::invalid_argument("nme: unknown group name " + name);
}

std::vector<std::pair<int, bool>> group_blocks(const num::MlpArchitecture& arch,
                                               const std::vector<Group>& groups) {
  std::vector<Group> sorted = groups;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const int hidden = static_cast<int>(arch.hidden.size());
  std::vector<std::pair<int, bool>> blocks;
  for (Group g : sorted) {
    switch (g) {
      case Group::layer1_weights:
      case Group::layer1_biases:
        if (hidden < 1) throw std::invalid_argument("nme: layer1 group needs a hidden layer");
        blocks.emplace_back(0, g == Group::layer1_weights);
        break;
      case Group::layer2_weights:
      case Group::layer2_biases:
        if (hidden < 2) throw std::invalid_argument("nme: layer2 group needs two hidden layers");
        blocks.emplace_back(1, g == Group::layer2_weights);
        break;
      case Group::output_weights:
      case Group::output_biases:
        blocks.emplace_back(arch.layer_count() - 1, g == Group::output_weights);
        break;
    }
  }
  return blocks;
}

int NmeState::subject_index(int subject) const {
  auto it = std::lower_bound(subjects.begin(), subjects.end(), subject);
  if (it == subjects.end() || *it != subject) return -1;
  return static_cast<int>(it - subjects.begin());
}

NmeState make_state(const NmeConfig& config, const std::vector<int>& subjects) {
  if (config.architecture.input_dim < 1)
    throw std::invalid_argument("nme: architecture needs a positive input dimension");
  for (int h : config.architecture.hidden)
    if (h < 1) throw std::invalid_argument("nme: hidden layer sizes must be positive");
  NmeState state;
  state.architecture = config.architecture;
  state.groups = config.person_specific_groups;
  std::sort(state.groups.begin(), state.groups.end());
  state.groups.erase(std::unique(state.groups.begin(), state.groups.end()), state.groups.end());
  const auto blocks = group_blocks(state.architecture, state.groups);
  state.theta_bar = num::NetworkParams::zeros(state.architecture);
  state.subjects = subjects;
  std::sort(state.subjects.begin(), state.subjects.end());
  state.subjects.erase(std::unique(state.subjects.begin(), state.subjects.end()),
                       state.subjects.end());
  state.eta.assign(state.subjects.size(), num::NetworkParams::zeros(state.architecture));
  state.sigma = num::NetworkParams::zeros(state.architecture);
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights)
      state.sigma.W[l].setOnes();
    else
      state.sigma.b[l].setOnes();
  }
  state.sigma_sq = 1.0;
  return state;
}

double predict_one(const NmeState& state, const num::Vector& x, int subject,
                   bool population_mode) {
  if (x.size() != state.architecture.input_dim)
    throw std::invalid_argument("nme: input width does not match the architecture");
  const num::NetworkParams* offsets = nullptr;
  if (!population_mode) {
    const int idx = state.subject_index(subject);
    if (idx < 0) throw std::runtime_error("nme: unknown subject " + std::to_string(subject));
    offsets = &state.eta[static_cast<std::size_t>(idx)];
  }
  return num::mlp_forward(state.architecture, state.theta_bar, offsets, x).output;
}

double full_loss(const NmeState& state, const Frame& frame) {
  check_frame(state, frame);
  if (state.sigma_sq <= 0.0) throw std::invalid_argument("nme: non-positive sigma_sq");
  const auto blocks = group_blocks(state.architecture, state.groups);
  const auto grouped = group_rows(state, frame, all_rows(frame));
  const num::Vector mu = scattered_means(state, frame, grouped);
  return loss_from_means(state, frame, mu, blocks);
}

BatchPenaltyLedger make_ledger(const Frame& frame, const std::vector<int>& rows) {
  BatchPenaltyLedger ledger;
  for (const auto& [id, count] : batch_counts(frame, rows)) {
    ledger.subjects.push_back(id);
    ledger.batch_counts.push_back(count);
  }
  ledger.total_counts.assign(ledger.subjects.size(), 0);
  for (int id : frame.subject) {
    auto it = std::lower_bound(ledger.subjects.begin(), ledger.subjects.end(), id);
    if (it != ledger.subjects.end() && *it == id)
      ledger.total_counts[static_cast<std::size_t>(it - ledger.subjects.begin())] += 1;
  }
  return ledger;
}

double minibatch_loss(const NmeState& state, const Frame& frame, const std::vector<int>& rows,
                      const BatchPenaltyLedger& ledger) {
  check_frame(state, frame);
  if (state.sigma_sq <= 0.0) throw std::invalid_argument("nme: non-positive sigma_sq");
  validate_ledger(state, frame, rows, ledger);
  const auto blocks = group_blocks(state.architecture, state.groups);
  const auto grouped = group_rows(state, frame, rows);
  const num::Vector mu = scattered_means(state, frame, grouped);
  double data = 0.0;
  for (int r : rows) {
    const double resid = frame.y[r] - mu[r];
    data += 0.5 * resid * resid / state.sigma_sq;
  }
  data /= static_cast<double>(rows.size());
  double penalty = 0.0;
  for (std::size_t i = 0; i < ledger.subjects.size(); ++i) {
    const int idx = state.subject_index(ledger.subjects[i]);
    const double share =
        static_cast<double>(ledger.batch_counts[i]) / static_cast<double>(ledger.total_counts[i]);
    penalty += share * penalty_quadform(state, state.eta[static_cast<std::size_t>(idx)], blocks);
  }
  return data + penalty;
}

Gradients gradients(const NmeState& state, const Frame& frame, const std::vector<int>& rows,
                    const BatchPenaltyLedger& ledger) {
  check_frame(state, frame);
  if (state.sigma_sq <= 0.0) throw std::invalid_argument("nme: non-positive sigma_sq");
  validate_ledger(state, frame, rows, ledger);
  const auto grouped = group_rows(state, frame, rows);
  std::vector<double> coeff(state.subjects.size(), 0.0);
  for (std::size_t i = 0; i < ledger.subjects.size(); ++i) {
    const int idx = state.subject_index(ledger.subjects[i]);
    coeff[static_cast<std::size_t>(idx)] =
        static_cast<double>(ledger.batch_counts[i]) / static_cast<double>(ledger.total_counts[i]);
  }
  return accumulate_gradients(state, frame, grouped, 1.0 / static_cast<double>(rows.size()),
                              coeff, false);
}

Gradients full_loss_gradients(const NmeState& state, const Frame& frame) {
  check_frame(state, frame);
  if (state.sigma_sq <= 0.0) throw std::invalid_argument("nme: non-positive sigma_sq");
  const auto grouped = group_rows(state, frame, all_rows(frame));
  const std::vector<double> coeff(state.subjects.size(), 1.0);
  return accumulate_gradients(state, frame, grouped, 1.0, coeff, true);
}

TrainResult train(const NmeConfig& config, const Frame& frame) {
  if (config.epochs <= 0) throw std::invalid_argument("nme: epochs must be positive");
  if (config.batch_size <= 0) throw std::invalid_argument("nme: batch size must be positive");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate))
    throw std::invalid_argument("nme: learning rate must be positive");
  if (frame.X.rows() == 0) throw std::invalid_argument("nme: empty training frame");
  if (frame.X.cols() != config.architecture.input_dim)
    throw std::invalid_argument("nme: frame width does not match the architecture");

  num::Rng rng(config.seed);
  TrainResult result;
  NmeState& state = result.state;
  std::vector<int> ids(frame.subject.begin(), frame.subject.end());
  state = make_state(config, ids);
  check_frame(state, frame);
  state.theta_bar = num::xavier_init(config.architecture, rng);
  const auto blocks = group_blocks(state.architecture, state.groups);
  const std::size_t m = state.subjects.size();

  num::AdamState opt_theta;
  opt_theta.lr = config.learning_rate;
  std::vector<num::AdamState> opt_eta(m);
  for (auto& opt : opt_eta) opt.lr = config.learning_rate;

  std::vector<int> order = all_rows(frame);
  std::vector<int> batch;
  result.loss_trace.reserve(static_cast<std::size_t>(config.epochs));
  const auto full_grouping = group_rows(state, frame, order);

  // Per-subject training totals, cached so the per-batch ledgers skip the
  // full-frame scan of make_ledger.
  std::vector<int> totals(m, 0);
  for (int id : frame.subject) totals[static_cast<std::size_t>(state.subject_index(id))] += 1;
  auto batch_ledger = [&](const std::vector<int>& rows) {
    BatchPenaltyLedger ledger;
    for (const auto& [id, count] : batch_counts(frame, rows)) {
      ledger.subjects.push_back(id);
      ledger.batch_counts.push_back(count);
      ledger.total_counts.push_back(totals[static_cast<std::size_t>(state.subject_index(id))]);
    }
    return ledger;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    try {
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t stop =
            std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
        const BatchPenaltyLedger ledger = batch_ledger(batch);
        const Gradients grads = gradients(state, frame, batch, ledger);
        num::Vector flat = state.theta_bar.flatten();
        num::adam_step(opt_theta, flat, grads.theta_bar.flatten(), "theta_bar");
        state.theta_bar = num::NetworkParams::unflatten(state.architecture, flat);
        for (std::size_t i = 0; i < grads.eta_index.size(); ++i) {
          const auto k = static_cast<std::size_t>(grads.eta_index[i]);
          num::Vector eflat = state.eta[k].flatten();
          num::adam_step(opt_eta[k], eflat, grads.eta[i].flatten(), "eta");
          state.eta[k] = num::NetworkParams::unflatten(state.architecture, eflat);
        }
      }
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("nme: training diverged at epoch " + std::to_string(epoch) +
                               " (" + e.what() + ")");
    }
    const num::Vector mu = scattered_means(state, frame, full_grouping);
    const double msr = (frame.y - mu).squaredNorm() / static_cast<double>(frame.y.size());
    state.sigma_sq = std::max(msr, 1e-12);
    update_sigma(state, blocks);
    const double loss = loss_from_means(state, frame, mu, blocks);
    if (!std::isfinite(loss))
      throw std::runtime_error("nme: training diverged at epoch " + std::to_string(epoch));
    result.loss_trace.push_back(loss);
  }
  return result;
}

num::Vector predict(const NmeState& state, const Frame& test, const TargetScaling& scaling,
                    bool population_mode) {
  check_frame(state, test);
  num::Vector out(test.y.size());
  for (Eigen::Index r = 0; r < test.X.rows(); ++r)
    out[r] = predict_one(state, test.X.row(r).transpose(), test.subject[static_cast<std::size_t>(r)],
                         population_mode);
  return (out.array() * scaling.sd + scaling.mean).matrix();
}

void save(const NmeState& state, const NmeConfig& config, const std::string& prefix) {
  const auto blocks = group_blocks(state.architecture, state.groups);

  std::ofstream header(prefix + ".header");
  if (!header) throw std::runtime_error("nme: cannot write " + prefix + ".header");
  header << std::setprecision(17);
  header << "format nme-header 1\n";
  header << "input_dim " << state.architecture.input_dim << "\n";
  header << "hidden " << state.architecture.hidden.size();
  for (int h : state.architecture.hidden) header << " " << h;
  header << "\n";
  header << "groups " << state.groups.size();
  for (Group g : state.groups) header << " " << group_name(g);
  header << "\n";
  header << "epochs " << config.epochs << "\n";
  header << "batch_size " << config.batch_size << "\n";
  header << "learning_rate " << config.learning_rate << "\n";
  header << "seed " << config.seed << "\n";
  header << "sigma_sq " << state.sigma_sq << "\n";
  std::vector<double> diag;
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights) {
      for (Eigen::Index r = 0; r < state.sigma.W[l].rows(); ++r)
        for (Eigen::Index c = 0; c < state.sigma.W[l].cols(); ++c) diag.push_back(state.sigma.W[l](r, c));
    } else {
      for (Eigen::Index i = 0; i < state.sigma.b[l].size(); ++i) diag.push_back(state.sigma.b[l][i]);
    }
  }
  header << "sigma_diag " << diag.size();
  for (double v : diag) header << " " << v;
  header << "\n";
  if (!header) throw std::runtime_error("nme: write failed for " + prefix + ".header");

  std::ofstream theta(prefix + ".theta");
  if (!theta) throw std::runtime_error("nme: cannot write " + prefix + ".theta");
  theta << std::setprecision(17);
  theta << "format nme-theta 1\n";
  const num::Vector flat = state.theta_bar.flatten();
  theta << "params " << flat.size() << "\n";
  for (Eigen::Index i = 0; i < flat.size(); ++i) theta << flat[i] << "\n";
  if (!theta) throw std::runtime_error("nme: write failed for " + prefix + ".theta");

  std::ofstream eta(prefix + ".eta");
  if (!eta) throw std::runtime_error("nme: cannot write " + prefix + ".eta");
  eta << std::setprecision(17);
  eta << "format nme-eta 1\n";
  eta << "subjects " << state.subjects.size() << " " << diag.size() << "\n";
  for (std::size_t k = 0; k < state.subjects.size(); ++k) {
    eta << state.subjects[k];
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < state.eta[k].W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < state.eta[k].W[l].cols(); ++c)
            eta << " " << state.eta[k].W[l](r, c);
      } else {
        for (Eigen::Index i = 0; i < state.eta[k].b[l].size(); ++i)
          eta << " " << state.eta[k].b[l][i];
      }
    }
    eta << "\n";
  }
  if (!eta) throw std::runtime_error("nme: write failed for " + prefix + ".eta");
}

std::pair<NmeState, NmeConfig> load(const std::string& prefix) {
  auto fail = [&prefix]() -> std::runtime_error {
    return std::runtime_error("nme: malformed state files under " + prefix);
  };

  std::ifstream header(prefix + ".header");
  if (!header) throw std::runtime_error("nme: cannot read " + prefix + ".header");
  std::string key;
  auto expect = [&](std::istream& in, const char* want) {
    if (!(in >> key) || key != want) throw fail();
  };
  NmeConfig config;
  std::string version;
  int one = 0;
  expect(header, "format");
  header >> version >> one;
  if (version != "nme-header" || one != 1) throw fail();
  expect(header, "input_dim");
  header >> config.architecture.input_dim;
  expect(header, "hidden");
  std::size_t n_hidden = 0;
  header >> n_hidden;
  config.architecture.hidden.resize(n_hidden);
  for (auto& h : config.architecture.hidden) header >> h;
  expect(header, "groups");
  std::size_t n_groups = 0;
  header >> n_groups;
  config.person_specific_groups.clear();
  for (std::size_t i = 0; i < n_groups; ++i) {
    std::string name;
    header >> name;
    config.person_specific_groups.push_back(group_from_name(name));
  }
  expect(header, "epochs");
  header >> config.epochs;
  expect(header, "batch_size");
  header >> config.batch_size;
  expect(header, "learning_rate");
  header >> config.learning_rate;
  expect(header, "seed");
  header >> config.seed;
  double sigma_sq = 1.0;
  expect(header, "sigma_sq");
  header >> sigma_sq;
  expect(header, "sigma_diag");
  std::size_t n_diag = 0;
  header >> n_diag;
  std::vector<double> diag(n_diag);
  for (auto& v : diag) header >> v;
  if (!header) throw fail();

  std::ifstream eta_in(prefix + ".eta");
  if (!eta_in) throw std::runtime_error("nme: cannot read " + prefix + ".eta");
  expect(eta_in, "format");
  eta_in >> version >> one;
  if (version != "nme-eta" || one != 1) throw fail();
  expect(eta_in, "subjects");
  std::size_t n_subjects = 0, n_coords = 0;
  eta_in >> n_subjects >> n_coords;
  if (!eta_in || n_coords != n_diag) throw fail();
  std::vector<int> ids(n_subjects);
  std::vector<std::vector<double>> coords(n_subjects, std::vector<double>(n_coords));
  for (std::size_t k = 0; k < n_subjects; ++k) {
    eta_in >> ids[k];
    for (auto& v : coords[k]) eta_in >> v;
  }
  if (!eta_in) throw fail();

  NmeState state = make_state(config, ids);
  if (state.subjects != ids) throw fail();  // the eta file is written sorted
  state.sigma_sq = sigma_sq;
  const auto blocks = group_blocks(state.architecture, state.groups);
  if (n_diag != in_group_count(state.architecture, blocks)) throw fail();
  auto scatter = [&blocks](num::NetworkParams& target, const std::vector<double>& values) {
    std::size_t t = 0;
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < target.W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < target.W[l].cols(); ++c) target.W[l](r, c) = values[t++];
      } else {
        for (Eigen::Index i = 0; i < target.b[l].size(); ++i) target.b[l][i] = values[t++];
      }
    }
    if (t != values.size()) throw std::runtime_error("nme: in-group coordinate count mismatch");
  };
  scatter(state.sigma, diag);
  for (std::size_t k = 0; k < n_subjects; ++k) scatter(state.eta[k], coords[k]);

  std::ifstream theta(prefix + ".theta");
  if (!theta) throw std::runtime_error("nme: cannot read " + prefix + ".theta");
  expect(theta, "format");
  theta >> version >> one;
  if (version != "nme-theta" || one != 1) throw fail();
  expect(theta, "params");
  Eigen::Index n_params = 0;
  theta >> n_params;
  if (!theta || n_params != state.architecture.param_count()) throw fail();
  num::Vector flat(n_params);
  for (Eigen::Index i = 0; i < n_params; ++i) theta >> flat[i];
  if (!theta) throw fail();
  state.theta_bar = num::NetworkParams::unflatten(state.architecture, flat);
  return {std::move(state), std::move(config)};
}

NmeConfig preset_mlp() {
  NmeConfig config;
  config.architecture = num::MlpArchitecture{17, {32, 16}};
  config.person_specific_groups = {Group::output_biases};
  config.epochs = 4000;
  config.batch_size = 512;
  config.learning_rate = 2e-3;
  return config;
}

}  // namespace longmix::nme
