#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "longmix/nme.hpp"
#include "longmix/numeric_core.hpp"
#include "longmix/panel_data.hpp"

using namespace longmix;
using nme::Frame;
using nme::Group;
using num::Vector;

namespace {

// Flat view of theta_bar plus the in-group eta coordinates of the listed
// subject positions, in group_blocks order — the coordinate system the
// finite-difference probes walk.
Vector pack(const nme::NmeState& state, const std::vector<int>& positions) {
  const auto blocks = nme::group_blocks(state.architecture, state.groups);
  std::vector<double> vals;
  const Vector theta = state.theta_bar.flatten();
  for (Eigen::Index i = 0; i < theta.size(); ++i) vals.push_back(theta[i]);
  for (int k : positions) {
    const auto& e = state.eta[static_cast<std::size_t>(k)];
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < e.W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < e.W[l].cols(); ++c) vals.push_back(e.W[l](r, c));
      } else {
        for (Eigen::Index i = 0; i < e.b[l].size(); ++i) vals.push_back(e.b[l][i]);
      }
    }
  }
  return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

void unpack(nme::NmeState& state, const std::vector<int>& positions, const Vector& x) {
  const auto blocks = nme::group_blocks(state.architecture, state.groups);
  const Eigen::Index p = state.architecture.param_count();
  state.theta_bar = num::NetworkParams::unflatten(state.architecture, x.head(p));
  Eigen::Index t = p;
  for (int k : positions) {
    auto& e = state.eta[static_cast<std::size_t>(k)];
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < e.W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < e.W[l].cols(); ++c) e.W[l](r, c) = x[t++];
      } else {
        for (Eigen::Index i = 0; i < e.b[l].size(); ++i) e.b[l][i] = x[t++];
      }
    }
  }
}

Vector pack_grads(const nme::NmeState& state, const nme::Gradients& g,
                  const std::vector<int>& positions) {
  const auto blocks = nme::group_blocks(state.architecture, state.groups);
  const num::NetworkParams zero = num::NetworkParams::zeros(state.architecture);
  std::vector<double> vals;
  const Vector theta = g.theta_bar.flatten();
  for (Eigen::Index i = 0; i < theta.size(); ++i) vals.push_back(theta[i]);
  for (int k : positions) {
    const num::NetworkParams* gp = &zero;
    for (std::size_t i = 0; i < g.eta_index.size(); ++i)
      if (g.eta_index[i] == k) gp = &g.eta[i];
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < gp->W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < gp->W[l].cols(); ++c) vals.push_back(gp->W[l](r, c));
      } else {
        for (Eigen::Index i = 0; i < gp->b[l].size(); ++i) vals.push_back(gp->b[l][i]);
      }
    }
  }
  return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

// Smallest |hidden pre-activation| across rows under each row subject's
// offsets; finite-difference probes need the ReLU kinks out of reach.
double min_preactivation(const nme::NmeState& state, const Frame& frame) {
  double least = 1e300;
  for (Eigen::Index r = 0; r < frame.X.rows(); ++r) {
    const int idx = state.subject_index(frame.subject[static_cast<std::size_t>(r)]);
    const auto cache =
        num::mlp_forward(state.architecture, state.theta_bar,
                         &state.eta[static_cast<std::size_t>(idx)], frame.X.row(r).transpose());
    for (std::size_t l = 0; l + 1 < cache.pre.size(); ++l)
      for (Eigen::Index i = 0; i < cache.pre[l].size(); ++i)
        least = std::min(least, std::abs(cache.pre[l][i]));
  }
  return least;
}

std::vector<int> all_rows(const Frame& frame) {
  std::vector<int> rows(static_cast<std::size_t>(frame.X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

void randomize_eta_and_sigma(nme::NmeState& state, num::Rng& rng) {
  const auto blocks = nme::group_blocks(state.architecture, state.groups);
  for (auto& e : state.eta)
    for (const auto& [layer, weights] : blocks) {
      const auto l = static_cast<std::size_t>(layer);
      if (weights) {
        for (Eigen::Index r = 0; r < e.W[l].rows(); ++r)
          for (Eigen::Index c = 0; c < e.W[l].cols(); ++c) e.W[l](r, c) = 0.3 * rng.normal();
      } else {
        for (Eigen::Index i = 0; i < e.b[l].size(); ++i) e.b[l][i] = 0.3 * rng.normal();
      }
    }
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights) {
      for (Eigen::Index r = 0; r < state.sigma.W[l].rows(); ++r)
        for (Eigen::Index c = 0; c < state.sigma.W[l].cols(); ++c)
          state.sigma.W[l](r, c) = rng.uniform(0.5, 3.0);
    } else {
      for (Eigen::Index i = 0; i < state.sigma.b[l].size(); ++i)
        state.sigma.b[l][i] = rng.uniform(0.5, 3.0);
    }
  }
}

// sum over in-group coordinates of eta^2 / sigma for one subject.
double penalty_quadform(const nme::NmeState& state, std::size_t k) {
  const auto blocks = nme::group_blocks(state.architecture, state.groups);
  double acc = 0.0;
  const auto& e = state.eta[k];
  for (const auto& [layer, weights] : blocks) {
    const auto l = static_cast<std::size_t>(layer);
    if (weights) {
      for (Eigen::Index r = 0; r < e.W[l].rows(); ++r)
        for (Eigen::Index c = 0; c < e.W[l].cols(); ++c)
          acc += e.W[l](r, c) * e.W[l](r, c) / state.sigma.W[l](r, c);
    } else {
      for (Eigen::Index i = 0; i < e.b[l].size(); ++i)
        acc += e.b[l][i] * e.b[l][i] / state.sigma.b[l][i];
    }
  }
  return acc;
}

// Data drawn from a known network plus per-subject output shifts.
Frame synth_panel(int m, int n_per, double shift_sd, double noise_sd, std::uint64_t seed,
                  const num::MlpArchitecture& arch) {
  num::Rng rng(seed);
  num::NetworkParams truth = num::xavier_init(arch, rng);
  for (auto& W : truth.W) W *= 2.0;
  for (auto& b : truth.b)
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.3 * rng.normal();
  Frame frame;
  frame.X.resize(m * n_per, arch.input_dim);
  frame.y.resize(m * n_per);
  for (int i = 0; i < m; ++i) {
    const double shift = shift_sd * rng.normal();
    for (int j = 0; j < n_per; ++j) {
      const Eigen::Index r = i * n_per + j;
      for (int c = 0; c < arch.input_dim; ++c) frame.X(r, c) = rng.uniform(-2.0, 2.0);
      frame.y[r] = num::mlp_forward(arch, truth, nullptr, frame.X.row(r).transpose()).output +
                   shift + noise_sd * rng.normal();
      frame.subject.push_back(100 + i);
    }
  }
  return frame;
}

// Noisy linear response with small per-subject shifts; offset moves every
// target by the same amount.
Frame linear_task(std::uint64_t seed, double offset) {
  num::Rng rng(seed);
  Frame frame;
  const int m = 5, n_per = 30;
  frame.X.resize(m * n_per, 3);
  frame.y.resize(m * n_per);
  for (int i = 0; i < m; ++i) {
    const double shift = 0.3 * rng.normal();
    for (int j = 0; j < n_per; ++j) {
      const Eigen::Index r = i * n_per + j;
      for (int c = 0; c < 3; ++c) frame.X(r, c) = rng.uniform(-2.0, 2.0);
      frame.y[r] = 0.8 * frame.X(r, 0) - 0.5 * frame.X(r, 1) + 0.3 * frame.X(r, 2) + 1.0 +
                   shift + 0.1 * rng.normal() + offset;
      frame.subject.push_back(i);
    }
  }
  return frame;
}

}  // namespace

TEST_CASE("group names round-trip and resolve against the architecture") {
  const std::vector<Group> all = {Group::layer1_weights, Group::layer1_biases,
                                  Group::layer2_weights, Group::layer2_biases,
                                  Group::output_weights, Group::output_biases};
  for (Group g : all) CHECK(nme::group_from_name(nme::group_name(g)) == g);
  CHECK(nme::group_name(Group::output_biases) == "output_biases");
  CHECK_THROWS_AS((void)nme::group_from_name("hidden_biases"), std::invalid_argument);

  num::MlpArchitecture deep{3, {3, 2}};
  const auto blocks = nme::group_blocks(deep, all);
  REQUIRE(blocks.size() == 6);
  CHECK(blocks[0] == std::pair<int, bool>{0, true});
  CHECK(blocks[1] == std::pair<int, bool>{0, false});
  CHECK(blocks[2] == std::pair<int, bool>{1, true});
  CHECK(blocks[3] == std::pair<int, bool>{1, false});
  CHECK(blocks[4] == std::pair<int, bool>{2, true});
  CHECK(blocks[5] == std::pair<int, bool>{2, false});

  // Duplicates collapse; listing order does not matter.
  const auto dedup = nme::group_blocks(
      deep, {Group::output_biases, Group::layer1_weights, Group::output_biases});
  REQUIRE(dedup.size() == 2);
  CHECK(dedup[0] == std::pair<int, bool>{0, true});
  CHECK(dedup[1] == std::pair<int, bool>{2, false});

  // The output layer of a one-hidden-layer net is layer 1, not "layer2".
  num::MlpArchitecture shallow{3, {4}};
  const auto out = nme::group_blocks(shallow, {Group::output_weights});
  REQUIRE(out.size() == 1);
  CHECK(out[0] == std::pair<int, bool>{1, true});
  CHECK_THROWS_AS((void)nme::group_blocks(shallow, {Group::layer2_biases}),
                  std::invalid_argument);
}

TEST_CASE("state skeletons sort subjects and start deviations at zero") {
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {Group::output_biases, Group::layer1_weights};
  nme::NmeState state = nme::make_state(config, {9, 3, 9, 1, 3});
  CHECK(state.subjects == std::vector<int>{1, 3, 9});
  CHECK(state.subject_index(3) == 1);
  CHECK(state.subject_index(4) == -1);
  CHECK(state.sigma_sq == 1.0);
  REQUIRE(state.eta.size() == 3);
  for (const auto& e : state.eta) CHECK(e.squared_norm() == 0.0);
  CHECK(state.theta_bar.squared_norm() == 0.0);
  // In-group variances start at one, everything else stays zero.
  CHECK(state.sigma.b[1][0] == 1.0);
  CHECK(state.sigma.W[0].minCoeff() == 1.0);
  CHECK(state.sigma.W[1].cwiseAbs().maxCoeff() == 0.0);
  CHECK(state.sigma.b[0].cwiseAbs().maxCoeff() == 0.0);

  config.architecture.input_dim = 0;
  CHECK_THROWS_AS((void)nme::make_state(config, {1}), std::invalid_argument);
  config.architecture = num::MlpArchitecture{2, {0}};
  CHECK_THROWS_AS((void)nme::make_state(config, {1}), std::invalid_argument);
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {Group::layer2_weights};
  CHECK_THROWS_AS((void)nme::make_state(config, {1}), std::invalid_argument);
}

TEST_CASE("per-subject prediction is the offset forward pass") {
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {1}};
  config.person_specific_groups = {Group::output_biases};
  nme::NmeState state = nme::make_state(config, {7, 8});
  state.theta_bar.W[0](0, 0) = 0.5;
  state.theta_bar.W[0](0, 1) = -0.3;
  state.theta_bar.b[0][0] = 0.2;
  state.theta_bar.W[1](0, 0) = 1.7;
  state.theta_bar.b[1][0] = -0.4;

  Vector x(2);
  x << 1.0, 2.0;
  // Hand evaluation: pre-activation 0.1, ReLU active.
  const double base = 1.7 * (0.5 * 1.0 - 0.3 * 2.0 + 0.2) - 0.4;
  CHECK(nme::predict_one(state, x, 7) == doctest::Approx(base).epsilon(1e-15));
  // With every deviation at zero all subjects match population mode.
  CHECK(nme::predict_one(state, x, 8) == nme::predict_one(state, x, 7));
  CHECK(nme::predict_one(state, x, 999, true) == nme::predict_one(state, x, 7));

  // An output-bias deviation shifts the prediction by exactly that amount.
  state.eta[0].b[1][0] = 0.85;
  CHECK(nme::predict_one(state, x, 7) - base == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(nme::predict_one(state, x, 8) == doctest::Approx(base).epsilon(1e-15));
  CHECK(nme::predict_one(state, x, 7, true) == doctest::Approx(base).epsilon(1e-15));

  Vector x2(2);
  x2 << -2.0, 1.0;  // pre-activation -1.5, ReLU clips to zero
  CHECK(nme::predict_one(state, x2, 8) == doctest::Approx(-0.4).epsilon(1e-15));

  CHECK_THROWS_AS((void)nme::predict_one(state, x, 999), std::runtime_error);
  Vector wide(3);
  wide.setZero();
  CHECK_THROWS_AS((void)nme::predict_one(state, wide, 7), std::invalid_argument);

  // A first-layer weight deviation reroutes the whole forward pass.
  config.person_specific_groups = {Group::layer1_weights};
  nme::NmeState deep = nme::make_state(config, {7});
  deep.theta_bar = state.theta_bar;
  deep.eta[0].W[0](0, 0) = 0.25;
  const double pre = (0.5 + 0.25) * 1.0 - 0.3 * 2.0 + 0.2;
  CHECK(nme::predict_one(deep, x, 7) ==
        doctest::Approx(1.7 * std::max(0.0, pre) - 0.4).epsilon(1e-15));
}

TEST_CASE("full loss vanishes at a perfect fit and prices deviations exactly") {
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{1, {1}};
  config.person_specific_groups = {Group::output_biases};
  nme::NmeState state = nme::make_state(config, {1, 2, 3});
  state.theta_bar.b[1][0] = 2.0;  // constant network output 2

  const int n_per = 4;
  Frame frame;
  frame.X = num::Matrix::Constant(3 * n_per, 1, 0.3);
  frame.y = num::Vector::Constant(3 * n_per, 2.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < n_per; ++j) frame.subject.push_back(i + 1);

  CHECK(nme::full_loss(state, frame) == 0.0);

  // Deviations e_k move the means; matching targets isolate the penalty:
  // loss = sum_k e_k^2 / tau^2.
  const double tau_sq = 0.8;
  const Vector shifts = (Vector(3) << 0.5, -1.25, 0.75).finished();
  for (int k = 0; k < 3; ++k) {
    state.eta[k].b[1][0] = shifts[k];
    state.sigma.b[1][0] = tau_sq;
    for (int j = 0; j < n_per; ++j) frame.y[k * n_per + j] = 2.0 + shifts[k];
  }
  CHECK(nme::full_loss(state, frame) ==
        doctest::Approx(shifts.squaredNorm() / tau_sq).epsilon(1e-14));

  // Restoring the old targets adds the residual term 0.5 e_k^2 n_per / sigma_sq.
  frame.y.setConstant(2.0);
  state.sigma_sq = 1.7;
  const double expected =
      shifts.squaredNorm() * (0.5 * n_per / state.sigma_sq + 1.0 / tau_sq);
  CHECK(nme::full_loss(state, frame) == doctest::Approx(expected).epsilon(1e-14));

  state.sigma_sq = 0.0;
  CHECK_THROWS_AS((void)nme::full_loss(state, frame), std::invalid_argument);
  state.sigma_sq = 1.0;
  state.sigma.b[1][0] = 0.0;
  CHECK_THROWS_AS((void)nme::full_loss(state, frame), std::invalid_argument);
  state.sigma.b[1][0] = 1.0;
  frame.subject.back() = 42;
  CHECK_THROWS_AS((void)nme::full_loss(state, frame), std::runtime_error);
}

TEST_CASE("mini-batch loss scales each subject's penalty by its batch share") {
  num::Rng rng(19);
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {Group::output_biases, Group::layer1_weights};

  Frame frame;
  const int m = 3, n_per = 4;
  frame.X.resize(m * n_per, 2);
  frame.y.resize(m * n_per);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n_per; ++j) {
      const Eigen::Index r = i * n_per + j;
      for (int c = 0; c < 2; ++c) frame.X(r, c) = rng.uniform(-1.5, 1.5);
      frame.y[r] = 2.0 * rng.normal();
      frame.subject.push_back(i + 1);
    }

  nme::NmeState state = nme::make_state(config, frame.subject);
  state.theta_bar = num::xavier_init(config.architecture, rng);
  randomize_eta_and_sigma(state, rng);
  state.sigma_sq = rng.uniform(0.5, 2.0);

  // The full row set carries every penalty at full strength: the loss is
  // full_loss with the data term averaged instead of summed.
  const std::vector<int> everything = all_rows(frame);
  const auto full_ledger = nme::make_ledger(frame, everything);
  CHECK(full_ledger.subjects == state.subjects);
  CHECK(full_ledger.batch_counts == full_ledger.total_counts);
  double penalty = 0.0;
  for (std::size_t k = 0; k < state.eta.size(); ++k) penalty += penalty_quadform(state, k);
  const double data_sum = nme::full_loss(state, frame) - penalty;
  CHECK(nme::minibatch_loss(state, frame, everything, full_ledger) ==
        doctest::Approx(data_sum / frame.y.size() + penalty).epsilon(1e-12));

  // A batch from one subject carries only that subject's penalty, scaled by
  // the share of its rows present.
  const std::vector<int> batch = {0, 2};
  const auto ledger = nme::make_ledger(frame, batch);
  REQUIRE(ledger.subjects == std::vector<int>{1});
  CHECK(ledger.batch_counts == std::vector<int>{2});
  CHECK(ledger.total_counts == std::vector<int>{4});
  double data_part = 0.0;
  for (int r : batch) {
    const double mu =
        nme::predict_one(state, frame.X.row(r).transpose(), frame.subject[std::size_t(r)]);
    data_part += 0.5 * (frame.y[r] - mu) * (frame.y[r] - mu) / state.sigma_sq;
  }
  data_part /= static_cast<double>(batch.size());
  CHECK(nme::minibatch_loss(state, frame, batch, ledger) ==
        doctest::Approx(data_part + 0.5 * penalty_quadform(state, 0)).epsilon(1e-12));

  // The ledger must describe exactly this batch.
  const auto other = nme::make_ledger(frame, {0, 5});
  CHECK_THROWS_AS((void)nme::minibatch_loss(state, frame, batch, other),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)nme::make_ledger(frame, {}), std::invalid_argument);
  CHECK_THROWS_AS((void)nme::make_ledger(frame, {-1}), std::invalid_argument);
  CHECK_THROWS_AS((void)nme::make_ledger(frame, {m * n_per}), std::invalid_argument);
}

TEST_CASE("mini-batch penalties telescope to the full penalty on every epoch") {
  num::Rng rng(23);
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {Group::output_biases, Group::layer1_weights};

  // Uneven visit counts so batch shares vary; batch size 8 leaves a short
  // tail batch every epoch.
  Frame frame;
  std::vector<int> counts = {3, 4, 5, 6, 7, 8, 9};
  const int n = std::accumulate(counts.begin(), counts.end(), 0);
  frame.X.resize(n, 2);
  frame.y.resize(n);
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (int j = 0; j < counts[i]; ++j, ++r) {
      frame.X(r, 0) = rng.uniform(-1.5, 1.5);
      frame.X(r, 1) = rng.uniform(-1.5, 1.5);
      frame.y[r] = 2.0 * rng.normal();
      frame.subject.push_back(static_cast<int>(i) * 10 + 1);
    }

  nme::NmeState state = nme::make_state(config, frame.subject);
  state.theta_bar = num::xavier_init(config.architecture, rng);
  randomize_eta_and_sigma(state, rng);
  state.sigma_sq = rng.uniform(0.5, 2.0);

  double full_penalty = 0.0;
  std::vector<double> quad(state.subjects.size());
  for (std::size_t k = 0; k < state.subjects.size(); ++k) {
    quad[k] = penalty_quadform(state, k);
    full_penalty += quad[k];
  }

  const int batch_size = 8;
  std::vector<int> order = all_rows(frame);
  for (int epoch = 0; epoch < 10; ++epoch) {
    rng.shuffle(order);
    std::vector<int> seen(state.subjects.size(), 0);
    double penalty_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t stop = std::min(order.size(), start + batch_size);
      const std::vector<int> batch(order.begin() + start, order.begin() + stop);
      const auto ledger = nme::make_ledger(frame, batch);
      double data_part = 0.0;
      for (int row : batch) {
        const double mu = nme::predict_one(state, frame.X.row(row).transpose(),
                                           frame.subject[std::size_t(row)]);
        data_part += 0.5 * (frame.y[row] - mu) * (frame.y[row] - mu) / state.sigma_sq;
      }
      data_part /= static_cast<double>(batch.size());

      double batch_penalty = 0.0;
      for (std::size_t i = 0; i < ledger.subjects.size(); ++i) {
        const auto k = static_cast<std::size_t>(state.subject_index(ledger.subjects[i]));
        CHECK(ledger.total_counts[i] == counts[k]);
        seen[k] += ledger.batch_counts[i];
        batch_penalty +=
            static_cast<double>(ledger.batch_counts[i]) / ledger.total_counts[i] * quad[k];
      }
      // The loss decomposes into the averaged data term plus shared penalties.
      CHECK(nme::minibatch_loss(state, frame, batch, ledger) ==
            doctest::Approx(data_part + batch_penalty).epsilon(1e-12));
      penalty_sum += batch_penalty;
    }
    // Each subject's shares sum to one, so the epoch's penalties telescope.
    for (std::size_t k = 0; k < counts.size(); ++k) CHECK(seen[k] == counts[k]);
    CHECK(penalty_sum == doctest::Approx(full_penalty).epsilon(1e-12));
  }
}

TEST_CASE("loss gradients match finite differences at random states") {
  num::Rng rng(77);
  double worst_full = 0.0, worst_mini = 0.0;
  int tested = 0;
  for (int rep = 0; tested < 50 && rep < 400; ++rep) {
    nme::NmeConfig config;
    config.architecture = num::MlpArchitecture{3, {3, 2}};
    config.person_specific_groups = {Group::layer1_weights, Group::layer1_biases,
                                     Group::layer2_weights, Group::layer2_biases,
                                     Group::output_weights, Group::output_biases};
    if (rep % 2 == 1)
      config.person_specific_groups = {Group::output_biases, Group::layer2_weights};

    const int m = 3, n_per = 4;
    Frame frame;
    frame.X.resize(m * n_per, 3);
    frame.y.resize(m * n_per);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n_per; ++j) {
        const Eigen::Index r = i * n_per + j;
        for (int c = 0; c < 3; ++c) frame.X(r, c) = rng.uniform(-1.5, 1.5);
        frame.y[r] = 2.0 * rng.normal();
        frame.subject.push_back(10 + i);
      }

    nme::NmeState state = nme::make_state(config, frame.subject);
    state.theta_bar = num::xavier_init(config.architecture, rng);
    for (auto& W : state.theta_bar.W) W *= 1.5;
    for (auto& b : state.theta_bar.b)
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] += 0.3 * rng.normal();
    randomize_eta_and_sigma(state, rng);
    state.sigma_sq = rng.uniform(0.5, 2.0);

    if (min_preactivation(state, frame) < 5e-3) continue;
    ++tested;

    std::vector<int> everyone(m);
    std::iota(everyone.begin(), everyone.end(), 0);
    {
      nme::NmeState probe = state;
      const Vector x0 = pack(probe, everyone);
      auto f = [&](const Vector& x) {
        unpack(probe, everyone, x);
        return nme::full_loss(probe, frame);
      };
      const auto g = nme::full_loss_gradients(state, frame);
      worst_full = std::max(worst_full, num::check_gradient(f, x0, pack_grads(state, g, everyone)));
    }
    {
      std::vector<int> rows;
      for (int row = 0; row < m * n_per; ++row)
        if (rng.uniform() < 0.5) rows.push_back(row);
      if (rows.empty()) rows.push_back(0);
      const auto ledger = nme::make_ledger(frame, rows);
      std::vector<int> batch_positions;
      for (int id : ledger.subjects) batch_positions.push_back(state.subject_index(id));
      nme::NmeState probe = state;
      const Vector x0 = pack(probe, batch_positions);
      auto f = [&](const Vector& x) {
        unpack(probe, batch_positions, x);
        return nme::minibatch_loss(probe, frame, rows, ledger);
      };
      const auto g = nme::gradients(state, frame, rows, ledger);
      worst_mini =
          std::max(worst_mini, num::check_gradient(f, x0, pack_grads(state, g, batch_positions)));
    }
  }
  REQUIRE(tested >= 50);
  CHECK(worst_full < 1e-5);
  CHECK(worst_mini < 1e-5);
}

TEST_CASE("gradient entries respect groups, batches, and residuals") {
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{1, {1}};
  config.person_specific_groups = {Group::output_biases};
  nme::NmeState state = nme::make_state(config, {1, 2, 3});
  state.theta_bar.W[0](0, 0) = 1.0;
  state.theta_bar.b[0][0] = 0.5;
  state.theta_bar.W[1](0, 0) = 1.0;
  state.theta_bar.b[1][0] = 0.0;
  const double tau_sq = 0.7;
  state.sigma.b[1][0] = tau_sq;
  const Vector shifts = (Vector(3) << 0.4, -0.9, 0.2).finished();
  for (int k = 0; k < 3; ++k) state.eta[k].b[1][0] = shifts[k];

  Frame frame;
  const int n_per = 3;
  frame.X = num::Matrix::Constant(3 * n_per, 1, 0.25);
  frame.y.resize(3 * n_per);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < n_per; ++j) {
      frame.y[k * n_per + j] = 0.75 + shifts[k];  // exact fit: relu(0.75) + shift
      frame.subject.push_back(k + 1);
    }

  // Zero residuals kill the data term; only the penalty pull remains.
  const auto g = nme::full_loss_gradients(state, frame);
  CHECK(g.theta_bar.flatten().cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(g.eta_index == std::vector<int>{0, 1, 2});
  for (int k = 0; k < 3; ++k) {
    CHECK(g.eta[k].b[1][0] == doctest::Approx(2.0 * shifts[k] / tau_sq).epsilon(1e-14));
    // Coordinates outside the person-specific groups never carry gradient.
    CHECK(g.eta[k].W[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.eta[k].b[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.eta[k].W[1].cwiseAbs().maxCoeff() == 0.0);
  }

  // A single-subject batch: the deviation's data gradient equals the shared
  // one on the in-group coordinate, plus the scaled penalty pull.
  frame.y[0] += 2.0;  // break the fit for subject 1
  const std::vector<int> batch = {0, 1};
  const auto ledger = nme::make_ledger(frame, batch);
  const auto gb = nme::gradients(state, frame, batch, ledger);
  REQUIRE(gb.eta_index == std::vector<int>{0});
  const double pull = 2.0 * (2.0 / 3.0) * shifts[0] / tau_sq;
  CHECK(gb.eta[0].b[1][0] - pull ==
        doctest::Approx(gb.theta_bar.b[1][0]).epsilon(1e-12));
  // Subjects outside the batch get no entry at all.
  CHECK(gb.eta.size() == 1);
}

TEST_CASE("training is deterministic and keeps deviations inside their groups") {
  Frame frame = synth_panel(6, 12, 1.5, 0.3, 501, num::MlpArchitecture{3, {3}});
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{3, {3}};
  config.person_specific_groups = {Group::layer1_biases};
  config.epochs = 40;
  config.batch_size = 8;
  config.learning_rate = 0.02;
  config.seed = 11;

  const auto first = nme::train(config, frame);
  const auto second = nme::train(config, frame);
  CHECK((first.state.theta_bar.flatten() - second.state.theta_bar.flatten())
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(first.loss_trace == second.loss_trace);
  REQUIRE(first.loss_trace.size() == 40);
  for (double v : first.loss_trace) CHECK(std::isfinite(v));

  config.seed = 12;
  const auto third = nme::train(config, frame);
  CHECK((first.state.theta_bar.flatten() - third.state.theta_bar.flatten())
            .cwiseAbs()
            .maxCoeff() > 0.0);

  // Deviations live on the first hidden layer's biases and nowhere else.
  bool moved = false;
  for (const auto& e : first.state.eta) {
    if (e.b[0].cwiseAbs().maxCoeff() > 0.0) moved = true;
    CHECK(e.W[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(e.W[1].cwiseAbs().maxCoeff() == 0.0);
    CHECK(e.b[1].cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(moved);

  // The residual variance lands well below the raw response variance.
  const double var_y =
      (frame.y.array() - frame.y.mean()).square().sum() / (frame.y.size() - 1.0);
  CHECK(first.state.sigma_sq > 0.0);
  CHECK(first.state.sigma_sq < 0.5 * var_y);
}

TEST_CASE("training with no person-specific groups is a plain network fit") {
  Frame frame = synth_panel(5, 10, 0.8, 0.4, 907, num::MlpArchitecture{2, {3}});
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {};
  config.epochs = 25;
  config.batch_size = 16;
  config.learning_rate = 0.015;
  config.seed = 4;
  const auto result = nme::train(config, frame);
  for (const auto& e : result.state.eta) CHECK(e.squared_norm() == 0.0);

  // Reference: the same schedule applied to a bare network, replicating the
  // trainer's subject-grouped accumulation order, must agree bit for bit.
  num::Rng rng(config.seed);
  num::NetworkParams params = num::xavier_init(config.architecture, rng);
  num::AdamState opt;
  opt.lr = config.learning_rate;
  double sigma_sq = 1.0;
  const auto n = frame.X.rows();
  std::vector<int> subjects(frame.subject);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  std::vector<int> order = all_rows(frame);
  auto grouped = [&](const std::vector<int>& rows) {
    std::vector<std::vector<int>> groups(subjects.size());
    for (int r : rows) {
      const auto it =
          std::lower_bound(subjects.begin(), subjects.end(), frame.subject[std::size_t(r)]);
      groups[static_cast<std::size_t>(it - subjects.begin())].push_back(r);
    }
    return groups;
  };
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::vector<int> batch(order.begin() + start, order.begin() + stop);
      const double scale = 1.0 / static_cast<double>(batch.size());
      num::NetworkParams grads = num::NetworkParams::zeros(config.architecture);
      for (const auto& rows : grouped(batch)) {
        if (rows.empty()) continue;
        num::Matrix X(rows.size(), frame.X.cols());
        Vector err(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t t = 0; t < rows.size(); ++t) X.row(t) = frame.X.row(rows[t]);
        const auto cache = num::mlp_forward_batch(config.architecture, params, nullptr, X);
        for (std::size_t t = 0; t < rows.size(); ++t)
          err[static_cast<Eigen::Index>(t)] =
              (cache.output[static_cast<Eigen::Index>(t)] - frame.y[rows[t]]) * scale / sigma_sq;
        grads.add_scaled(num::mlp_backward_batch(config.architecture, params, nullptr, cache, err),
                         1.0);
      }
      Vector flat = params.flatten();
      num::adam_step(opt, flat, grads.flatten(), "theta_bar");
      params = num::NetworkParams::unflatten(config.architecture, flat);
    }
    Vector mu(n);
    for (const auto& rows : grouped(order)) {
      if (rows.empty()) continue;
      std::vector<int> sorted(rows);
      std::sort(sorted.begin(), sorted.end());
      num::Matrix X(sorted.size(), frame.X.cols());
      for (std::size_t t = 0; t < sorted.size(); ++t) X.row(t) = frame.X.row(sorted[t]);
      const auto cache = num::mlp_forward_batch(config.architecture, params, nullptr, X);
      for (std::size_t t = 0; t < sorted.size(); ++t)
        mu[sorted[t]] = cache.output[static_cast<Eigen::Index>(t)];
    }
    sigma_sq = std::max((frame.y - mu).squaredNorm() / static_cast<double>(n), 1e-12);
  }
  CHECK((result.state.theta_bar.flatten() - params.flatten()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(result.state.sigma_sq == sigma_sq);
}

TEST_CASE("training recovers a planted deviation variance") {
  const num::MlpArchitecture arch{3, {3}};
  nme::NmeConfig config;
  config.architecture = arch;
  config.person_specific_groups = {Group::output_biases};
  config.epochs = 20;
  config.batch_size = 2;
  config.learning_rate = 0.03;

  // Per-subject output shifts with variance 4 against unit noise; the fitted
  // output-bias variance must land in a bracket around the truth.
  for (int seed = 0; seed < 20; ++seed) {
    Frame frame = synth_panel(100, 80, 2.0, 1.0, 9001 + seed, arch);
    config.seed = 40 + seed;
    const auto result = nme::train(config, frame);
    const double tau_sq = result.state.sigma.b[1][0];
    CHECK(tau_sq > 2.0);
    CHECK(tau_sq < 7.0);
    CHECK(result.state.sigma_sq > 0.0);
    CHECK(result.state.sigma_sq < 3.0);
  }
}

TEST_CASE("trained deviations absorb a planted target offset") {
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{3, {4}};
  config.person_specific_groups = {Group::output_biases};
  config.epochs = 300;
  config.batch_size = 8;
  config.learning_rate = 0.02;
  config.seed = 21;

  const double c = 3.0;
  const Frame base = linear_task(303, 0.0);
  const Frame shifted = linear_task(303, c);  // identical X and noise, targets + c
  const auto r1 = nme::train(config, base);
  const auto r2 = nme::train(config, shifted);

  const nme::TargetScaling raw;  // mean 0, sd 1
  const Vector p1 = nme::predict(r1.state, base, raw);
  const Vector p2 = nme::predict(r2.state, base, raw);
  double dev = 0.0;
  for (Eigen::Index r = 0; r < p1.size(); ++r) dev += std::abs(p2[r] - p1[r] - c);
  dev /= static_cast<double>(p1.size());
  CHECK(dev < 0.05 * c);
}

TEST_CASE("the penalty share of the loss falls as the deviation variance grows") {
  num::Rng rng(7);
  Frame frame;
  const int m = 6, n_per = 20;
  frame.X.resize(m * n_per, 3);
  frame.y.resize(m * n_per);
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{3, {3}};
  config.person_specific_groups = {Group::output_biases};
  nme::NmeState state = nme::make_state(config, {0, 1, 2, 3, 4, 5});
  state.theta_bar = num::xavier_init(config.architecture, rng);
  for (int i = 0; i < m; ++i) {
    const double shift = 1.5 * rng.normal();
    for (int j = 0; j < n_per; ++j) {
      const Eigen::Index r = i * n_per + j;
      for (int c = 0; c < 3; ++c) frame.X(r, c) = rng.uniform(-2.0, 2.0);
      frame.y[r] = num::mlp_forward(config.architecture, state.theta_bar, nullptr,
                                    frame.X.row(r).transpose())
                       .output +
                   shift + 0.5 * rng.normal();
      frame.subject.push_back(i);
    }
  }

  // Refit the deviations from scratch at each variance: gradient descent on
  // the output biases alone (a strictly convex quadratic per subject). The
  // Gaussian penalty's weight in the optimum must shrink as tau^2 grows, and
  // the deviations themselves must grow toward the unpenalized answer.
  state.sigma_sq = 1.0;
  double prev_share = 1e300, prev_rms = 0.0;
  for (const double tau_sq : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    for (auto& e : state.eta) e.b[1][0] = 0.0;
    state.sigma.b[1][0] = tau_sq;
    const double step = 0.9 / (n_per / state.sigma_sq + 2.0 / tau_sq);
    double gmax = 1e300;
    for (int it = 0; it < 20000 && gmax > 1e-12; ++it) {
      const auto g = nme::full_loss_gradients(state, frame);
      gmax = 0.0;
      for (std::size_t k = 0; k < g.eta.size(); ++k) {
        state.eta[k].b[1][0] -= step * g.eta[k].b[1][0];
        gmax = std::max(gmax, std::abs(g.eta[k].b[1][0]));
      }
    }
    REQUIRE(gmax <= 1e-12);
    double penalty = 0.0, rms = 0.0;
    for (const auto& e : state.eta) {
      penalty += e.b[1][0] * e.b[1][0] / tau_sq;
      rms += e.b[1][0] * e.b[1][0];
    }
    rms = std::sqrt(rms / m);
    const double share = penalty / nme::full_loss(state, frame);
    CHECK(share < prev_share + 1e-9);
    CHECK(rms > prev_rms - 1e-9);
    prev_share = share;
    prev_rms = rms;
  }
  CHECK(prev_share < 0.2);
}

TEST_CASE("training aborts with the failing epoch on divergence") {
  Frame frame = synth_panel(3, 6, 0.5, 0.3, 81, num::MlpArchitecture{2, {2}});
  frame.y[0] = 1e200;  // squares to infinity in the variance refresh
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {2}};
  config.epochs = 3;
  config.batch_size = 4;
  config.learning_rate = 0.01;
  try {
    (void)nme::train(config, frame);
    FAIL("training accepted a divergent response");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("training validates its configuration") {
  Frame frame = synth_panel(2, 3, 0.5, 0.3, 82, num::MlpArchitecture{2, {2}});
  nme::NmeConfig good;
  good.architecture = num::MlpArchitecture{2, {2}};
  good.epochs = 1;
  good.batch_size = 4;

  nme::NmeConfig config = good;
  config.epochs = 0;
  CHECK_THROWS_AS((void)nme::train(config, frame), std::invalid_argument);
  config = good;
  config.batch_size = 0;
  CHECK_THROWS_AS((void)nme::train(config, frame), std::invalid_argument);
  config = good;
  config.learning_rate = 0.0;
  CHECK_THROWS_AS((void)nme::train(config, frame), std::invalid_argument);
  config = good;
  config.learning_rate = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS((void)nme::train(config, frame), std::invalid_argument);
  config = good;
  config.person_specific_groups = {Group::layer2_weights};
  CHECK_THROWS_AS((void)nme::train(config, frame), std::invalid_argument);
  config = good;
  Frame empty;
  empty.X.resize(0, 2);
  empty.y.resize(0);
  CHECK_THROWS_AS((void)nme::train(config, empty), std::invalid_argument);
  Frame wide = frame;
  wide.X = num::Matrix::Zero(frame.X.rows(), 5);
  CHECK_THROWS_AS((void)nme::train(config, wide), std::invalid_argument);
}

TEST_CASE("predictions rescale and population mode covers unseen subjects") {
  Frame frame = synth_panel(4, 8, 1.0, 0.3, 311, num::MlpArchitecture{2, {3}});
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {3}};
  config.person_specific_groups = {Group::output_biases};
  config.epochs = 15;
  config.batch_size = 8;
  config.learning_rate = 0.02;
  const auto result = nme::train(config, frame);

  const nme::TargetScaling raw;
  const nme::TargetScaling scaled{11.0, 2.5};
  const Vector plain = nme::predict(result.state, frame, raw);
  const Vector mapped = nme::predict(result.state, frame, scaled);
  for (Eigen::Index r = 0; r < plain.size(); ++r)
    CHECK(mapped[r] == doctest::Approx(plain[r] * 2.5 + 11.0).epsilon(1e-14));
  for (Eigen::Index r = 0; r < plain.size(); ++r)
    CHECK(plain[r] ==
          nme::predict_one(result.state, frame.X.row(r).transpose(),
                           frame.subject[std::size_t(r)]));

  Frame unseen = frame;
  unseen.subject.assign(unseen.subject.size(), 999);
  CHECK_THROWS_AS((void)nme::predict(result.state, unseen, raw), std::runtime_error);
  const Vector pop = nme::predict(result.state, unseen, raw, true);
  // Population mode drops the deviations, so subjects no longer matter.
  Frame relabeled = frame;
  const Vector pop2 = nme::predict(result.state, relabeled, raw, true);
  CHECK((pop - pop2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("states round-trip through their three-file serialization") {
  Frame frame = synth_panel(3, 6, 1.0, 0.4, 613, num::MlpArchitecture{2, {2}});
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{2, {2}};
  config.person_specific_groups = {Group::output_biases, Group::layer1_weights};
  config.epochs = 10;
  config.batch_size = 4;
  config.learning_rate = 0.03;
  config.seed = 19;
  const auto result = nme::train(config, frame);

  const std::string prefix = "nme_state_roundtrip";
  nme::save(result.state, config, prefix);
  auto [loaded, loaded_config] = nme::load(prefix);
  CHECK((loaded.theta_bar.flatten() - result.state.theta_bar.flatten())
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(loaded.subjects == result.state.subjects);
  CHECK(loaded.groups == result.state.groups);
  CHECK(loaded.sigma_sq == result.state.sigma_sq);
  REQUIRE(loaded.eta.size() == result.state.eta.size());
  for (std::size_t k = 0; k < loaded.eta.size(); ++k)
    CHECK((loaded.eta[k].flatten() - result.state.eta[k].flatten()).cwiseAbs().maxCoeff() ==
          0.0);
  CHECK((loaded.sigma.flatten() - result.state.sigma.flatten()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(loaded_config.architecture.input_dim == config.architecture.input_dim);
  CHECK(loaded_config.architecture.hidden == config.architecture.hidden);
  CHECK(loaded_config.person_specific_groups == result.state.groups);
  CHECK(loaded_config.epochs == config.epochs);
  CHECK(loaded_config.batch_size == config.batch_size);
  CHECK(loaded_config.learning_rate == config.learning_rate);
  CHECK(loaded_config.seed == config.seed);

  // Same predictions after the round trip.
  const nme::TargetScaling raw;
  CHECK((nme::predict(loaded, frame, raw) - nme::predict(result.state, frame, raw))
            .cwiseAbs()
            .maxCoeff() == 0.0);

  // Corruption in any of the three files is rejected.
  CHECK_THROWS_AS((void)nme::load("nme_no_such_prefix"), std::runtime_error);
  {
    std::ofstream bad(prefix + ".theta");
    bad << "format nme-theta 1\nparams 3\n0.5\n";
  }
  CHECK_THROWS_AS((void)nme::load(prefix), std::runtime_error);
  std::remove((prefix + ".theta").c_str());
  CHECK_THROWS_AS((void)nme::load(prefix), std::runtime_error);
  {
    std::ofstream bad(prefix + ".header");
    bad << "format something-else 9\n";
  }
  CHECK_THROWS_AS((void)nme::load(prefix), std::runtime_error);
  std::remove((prefix + ".header").c_str());
  std::remove((prefix + ".eta").c_str());
}

TEST_CASE("panel frames feed the trainer end to end") {
  std::vector<panel::ObservationRow> rows;
  num::Rng rng(29);
  for (int subject : {12, 4, 4, 12, 12, 4, 7, 7, 7, 7}) {
    panel::ObservationRow row;
    row.subject = subject;
    row.age = 60.0;
    row.test_time = rng.uniform(0.0, 180.0);
    row.total_updrs = rng.uniform(10.0, 40.0);
    for (auto& v : row.voice) v = rng.normal();
    rows.push_back(row);
  }
  const panel::PanelDataset data = panel::from_rows(std::move(rows), {"synthetic"});
  const Frame frame = nme::make_frame(data);
  REQUIRE(frame.X.rows() == 10);
  REQUIRE(frame.X.cols() == 17);
  // Column 0 is test_time, in the dataset's subject-then-time order.
  Eigen::Index r = 0;
  for (const auto& row : data.rows) {
    CHECK(frame.X(r, 0) == row.test_time);
    CHECK(frame.y[r] == row.total_updrs);
    CHECK(frame.subject[std::size_t(r)] == row.subject);
    ++r;
  }

  nme::TargetScaling scaling = nme::fit_target_scaling(frame.y);
  Frame train = frame;
  nme::scale_targets(train.y, scaling);
  nme::NmeConfig config;
  config.architecture = num::MlpArchitecture{17, {4}};
  config.person_specific_groups = {Group::output_biases};
  config.epochs = 5;
  config.batch_size = 4;
  config.learning_rate = 0.01;
  const auto result = nme::train(config, train);
  const Vector pred = nme::predict(result.state, frame, scaling);
  for (Eigen::Index i = 0; i < pred.size(); ++i) CHECK(std::isfinite(pred[i]));
}

TEST_CASE("the benchmark preset matches its documented settings") {
  const nme::NmeConfig preset = nme::preset_mlp();
  CHECK(preset.architecture.input_dim == 17);
  CHECK(preset.architecture.hidden == std::vector<int>{32, 16});
  CHECK(preset.person_specific_groups == std::vector<Group>{Group::output_biases});
  CHECK(preset.epochs == 4000);
  CHECK(preset.batch_size == 512);
  CHECK(preset.learning_rate == 2e-3);
}
