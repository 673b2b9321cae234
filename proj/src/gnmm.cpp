#include "longmix/gnmm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace longmix::gnmm {

namespace {

std::vector<std::string> default_features() {
  std::vector<std::string> names{"test_time"};
  const auto& voice = panel::voice_ids();
  names.insert(names.end(), voice.begin(), voice.end());
  return names;
}

std::vector<int> sorted_subjects(const GnmmFrame& frame) {
  std::vector<int> ids = frame.subject;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

void check_frame(const GnmmState& state, const GnmmFrame& frame) {
  if (frame.X.rows() != frame.y.size() ||
      frame.X.rows() != static_cast<Eigen::Index>(frame.subject.size()))
    throw std::invalid_argument("gnmm: frame rows, response, and subjects disagree");
  if (frame.X.cols() != state.architecture.input_dim)
    throw std::invalid_argument("gnmm: frame width does not match the architecture");
}

// Network outputs for every row (no random intercept added).
num::Vector network_outputs(const GnmmState& state, const GnmmFrame& frame) {
  return num::mlp_forward_batch(state.architecture, state.params, nullptr, frame.X).output;
}

// Row means including each row's subject intercept.
num::Vector conditional_means(const GnmmState& state, const GnmmFrame& frame) {
  num::Vector mu = network_outputs(state, frame);
  if (state.random_intercept) {
    for (Eigen::Index r = 0; r < mu.size(); ++r) {
      int idx = state.subject_index(frame.subject[static_cast<std::size_t>(r)]);
      if (idx < 0)
        throw std::runtime_error("gnmm: unknown subject " +
                                 std::to_string(frame.subject[static_cast<std::size_t>(r)]));
      mu[r] += state.b[idx];
    }
  }
  return mu;
}

}  // namespace

GnmmFrame make_frame(const panel::PanelDataset& data, const std::vector<std::string>& features,
                     const std::string& response) {
  const std::vector<std::string> names = features.empty() ? default_features() : features;
  const Eigen::Index n = static_cast<Eigen::Index>(data.rows.size());
  GnmmFrame frame;
  frame.X.resize(n, static_cast<Eigen::Index>(names.size()));
  frame.y.resize(n);
  frame.subject.resize(static_cast<std::size_t>(n));
  std::vector<int> cols;
  for (const auto& name : names) cols.push_back(panel::column_index(name));
  const int y_col = panel::column_index(response);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = data.rows[static_cast<std::size_t>(r)];
    for (std::size_t k = 0; k < cols.size(); ++k)
      frame.X(r, static_cast<Eigen::Index>(k)) = panel::cell(row, cols[k]);
    frame.y[r] = panel::cell(row, y_col);
    frame.subject[static_cast<std::size_t>(r)] = row.subject;
  }
  return frame;
}

TargetScaling fit_target_scaling(const num::Vector& y) {
  if (y.size() < 2) throw std::invalid_argument("gnmm: target scaling needs at least two rows");
  TargetScaling s;
  s.mean = y.mean();
  s.sd = std::sqrt((y.array() - s.mean).square().sum() / static_cast<double>(y.size() - 1));
  if (s.sd <= 0.0) throw std::invalid_argument("gnmm: constant response cannot be scaled");
  return s;
}

void scale_targets(num::Vector& y, const TargetScaling& scaling) {
  y = (y.array() - scaling.mean) / scaling.sd;
}

int GnmmState::subject_index(int subject) const {
  auto it = std::lower_bound(subjects.begin(), subjects.end(), subject);
  if (it == subjects.end() || *it != subject) return -1;
  return static_cast<int>(it - subjects.begin());
}

double forward_mean(const GnmmState& state, const num::Vector& x, int subject) {
  double out = num::mlp_forward(state.architecture, state.params, nullptr, x).output;
  if (!state.random_intercept) return out;
  int idx = state.subject_index(subject);
  if (idx < 0) throw std::runtime_error("gnmm: unknown subject " + std::to_string(subject));
  return out + state.b[idx];
}

double quasi_deviance(double y, double mu) {
  double r = y - mu;
  return -0.5 * r * r;
}

double training_objective(const GnmmState& state, const GnmmFrame& frame,
                          const GnmmConfig& config) {
  check_frame(state, frame);
  const num::Vector mu = conditional_means(state, frame);
  double value = -0.5 * (frame.y - mu).squaredNorm() / state.sigma_sq;
  if (state.random_intercept) {
    const double bsq = state.b.squaredNorm();
    if (state.sigma_b_sq == 0.0) {
      if (bsq > 0.0)
        throw std::invalid_argument("gnmm: zero sigma_b_sq with nonzero random intercepts");
    } else {
      value -= bsq / (2.0 * state.sigma_b_sq);
    }
  }
  value -= config.ridge_lambda * state.params.squared_norm();
  return value;
}

ScoreGradients quasi_score_gradients(const GnmmState& state, const GnmmFrame& frame,
                                     const std::vector<int>& rows, const GnmmConfig& config) {
  check_frame(state, frame);
  if (rows.empty()) throw std::invalid_argument("gnmm: empty batch");
  num::Matrix xb(static_cast<Eigen::Index>(rows.size()), frame.X.cols());
  num::Vector yb(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= frame.X.rows())
      throw std::invalid_argument("gnmm: batch row out of range");
    xb.row(static_cast<Eigen::Index>(k)) = frame.X.row(rows[k]);
    yb[static_cast<Eigen::Index>(k)] = frame.y[rows[k]];
  }
  num::BatchCache cache = num::mlp_forward_batch(state.architecture, state.params, nullptr, xb);

  ScoreGradients grads;
  grads.b = num::Vector::Zero(state.b.size());
  num::Vector err(static_cast<Eigen::Index>(rows.size()));
  std::vector<char> in_batch(state.subjects.size(), 0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    double mu = cache.output[static_cast<Eigen::Index>(k)];
    int idx = -1;
    if (state.random_intercept) {
      idx = state.subject_index(frame.subject[static_cast<std::size_t>(rows[k])]);
      if (idx < 0) throw std::runtime_error("gnmm: unknown subject in batch");
      mu += state.b[idx];
    }
    const double e = (yb[static_cast<Eigen::Index>(k)] - mu) / state.sigma_sq;
    err[static_cast<Eigen::Index>(k)] = e;
    if (state.random_intercept) {
      grads.b[idx] += e;
      in_batch[static_cast<std::size_t>(idx)] = 1;
    }
  }
  grads.params = num::mlp_backward_batch(state.architecture, state.params, nullptr, cache, err);
  grads.params.add_scaled(state.params, -2.0 * config.ridge_lambda);
  if (state.random_intercept) {
    for (std::size_t i = 0; i < in_batch.size(); ++i) {
      if (!in_batch[i]) continue;
      if (state.sigma_b_sq <= 0.0)
        throw std::invalid_argument("gnmm: sigma_b_sq must be positive for intercept gradients");
      grads.b[static_cast<Eigen::Index>(i)] -= state.b[static_cast<Eigen::Index>(i)] / state.sigma_b_sq;
    }
  }
  return grads;
}

num::Vector laplace_mode(const GnmmState& state, const GnmmFrame& frame) {
  check_frame(state, frame);
  if (state.sigma_b_sq <= 0.0)
    throw std::invalid_argument("gnmm: laplace mode requires sigma_b_sq > 0");
  const num::Vector out = network_outputs(state, frame);
  num::Vector sum = num::Vector::Zero(static_cast<Eigen::Index>(state.subjects.size()));
  num::Vector count = num::Vector::Zero(sum.size());
  for (Eigen::Index r = 0; r < out.size(); ++r) {
    int idx = state.subject_index(frame.subject[static_cast<std::size_t>(r)]);
    if (idx < 0) throw std::runtime_error("gnmm: unknown subject in laplace mode");
    sum[idx] += frame.y[r] - out[r];
    count[idx] += 1.0;
  }
  const double d = state.sigma_b_sq;
  num::Vector mode(sum.size());
  for (Eigen::Index i = 0; i < sum.size(); ++i)
    mode[i] = d * sum[i] / (state.sigma_sq + count[i] * d);
  return mode;
}

void update_variances(GnmmState& state, const GnmmFrame& frame) {
  const num::Vector mu = conditional_means(state, frame);
  state.sigma_sq =
      std::max((frame.y - mu).squaredNorm() / static_cast<double>(frame.y.size()), 1e-12);
  if (state.random_intercept && state.b.size() >= 2) {
    const double mean = state.b.mean();
    const double var =
        (state.b.array() - mean).square().sum() / static_cast<double>(state.b.size() - 1);
    // The relative floor keeps the per-batch -b/D pull a contraction even
    // when the intercepts sit near zero and their raw variance collapses.
    state.sigma_b_sq = std::max({var, 1e-3 * state.sigma_sq, 1e-12});
  }
}

LaplaceReport laplace_report(const GnmmState& state, const GnmmFrame& frame,
                             const GnmmConfig& config) {
  if (!state.random_intercept)
    throw std::invalid_argument("gnmm: laplace report needs the random intercept enabled");
  GnmmState at_mode = state;
  at_mode.b = laplace_mode(state, frame);
  const num::Vector mu = conditional_means(at_mode, frame);
  const double d = state.sigma_b_sq;
  const double m = static_cast<double>(state.subjects.size());

  num::Vector count = num::Vector::Zero(static_cast<Eigen::Index>(state.subjects.size()));
  for (int id : frame.subject) count[state.subject_index(id)] += 1.0;

  LaplaceReport report;
  report.logdet_term = -0.5 * m * std::log(d);
  for (Eigen::Index i = 0; i < count.size(); ++i)
    report.curvature_term -= 0.5 * std::log(count[i] / state.sigma_sq + 1.0 / d);
  report.value = -0.5 * (frame.y - mu).squaredNorm() / state.sigma_sq -
                 at_mode.b.squaredNorm() / (2.0 * d) -
                 0.5 * config.ridge_lambda * state.params.squared_norm() +
                 report.logdet_term + report.curvature_term;
  return report;
}

TrainResult train(const GnmmConfig& config, const GnmmFrame& frame) {
  if (config.epochs < 1 || config.batch_size < 1)
    throw std::invalid_argument("gnmm: epochs and batch size must be at least 1");
  if (config.learning_rate <= 0.0) throw std::invalid_argument("gnmm: learning rate must be positive");
  if (config.ridge_lambda < 0.0) throw std::invalid_argument("gnmm: negative ridge penalty");
  if (frame.X.rows() == 0) throw std::invalid_argument("gnmm: empty training frame");
  if (frame.X.cols() != config.architecture.input_dim)
    throw std::invalid_argument("gnmm: frame width does not match the architecture");

  num::Rng rng(config.seed);
  TrainResult result;
  GnmmState& state = result.state;
  state.architecture = config.architecture;
  state.params = num::xavier_init(config.architecture, rng);
  state.subjects = sorted_subjects(frame);
  state.b = num::Vector::Zero(static_cast<Eigen::Index>(state.subjects.size()));
  state.sigma_sq = 1.0;
  state.sigma_b_sq = 1.0;
  state.random_intercept = config.random_intercept;

  std::vector<int> order(static_cast<std::size_t>(frame.X.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch;
  result.objective_trace.reserve(static_cast<std::size_t>(config.epochs));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      ScoreGradients grads = quasi_score_gradients(state, frame, batch, config);
      const double step = config.learning_rate / static_cast<double>(batch.size());
      state.params.add_scaled(grads.params, step);
      if (state.random_intercept) state.b += step * grads.b;
    }
    if (state.random_intercept && config.laplace_refresh) state.b = laplace_mode(state, frame);
    update_variances(state, frame);
    const double objective = training_objective(state, frame, config);
    if (!std::isfinite(objective))
      throw std::runtime_error("gnmm: training diverged at epoch " + std::to_string(epoch));
    result.objective_trace.push_back(objective);
  }
  return result;
}

num::Vector predict(const GnmmState& state, const GnmmFrame& test, const TargetScaling& scaling) {
  const num::Vector mu = conditional_means(state, test);
  return (mu.array() * scaling.sd + scaling.mean).matrix();
}

void save(const GnmmState& state, const GnmmConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("gnmm: cannot write " + path);
  out << std::setprecision(17);
  out << "format gnmm-state 1\n";
  out << "input_dim " << state.architecture.input_dim << "\n";
  out << "hidden " << state.architecture.hidden.size();
  for (int h : state.architecture.hidden) out << " " << h;
  out << "\n";
  out << "ridge_lambda " << config.ridge_lambda << "\n";
  out << "learning_rate " << config.learning_rate << "\n";
  out << "epochs " << config.epochs << "\n";
  out << "batch_size " << config.batch_size << "\n";
  out << "random_intercept " << (config.random_intercept ? 1 : 0) << "\n";
  out << "laplace_refresh " << (config.laplace_refresh ? 1 : 0) << "\n";
  out << "seed " << config.seed << "\n";
  out << "sigma_sq " << state.sigma_sq << "\n";
  out << "sigma_b_sq " << state.sigma_b_sq << "\n";
  const num::Vector flat = state.params.flatten();
  out << "params " << flat.size() << "\n";
  for (Eigen::Index i = 0; i < flat.size(); ++i) out << flat[i] << "\n";
  out << "subjects " << state.subjects.size() << "\n";
  for (std::size_t i = 0; i < state.subjects.size(); ++i)
    out << state.subjects[i] << " " << state.b[static_cast<Eigen::Index>(i)] << "\n";
  if (!out) throw std::runtime_error("gnmm: write failed for " + path);
}

std::pair<GnmmState, GnmmConfig> load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("gnmm: cannot read " + path);
  auto fail = [&path]() -> std::runtime_error {
    return std::runtime_error("gnmm: malformed state file " + path);
  };
  std::string key;
  GnmmState state;
  GnmmConfig config;

  auto expect = [&](const char* want) {
    if (!(in >> key) || key != want) throw fail();
  };
  std::string version;
  expect("format");
  in >> version;
  int one = 0;
  in >> one;
  if (version != "gnmm-state" || one != 1) throw fail();
  expect("input_dim");
  in >> state.architecture.input_dim;
  expect("hidden");
  std::size_t n_hidden = 0;
  in >> n_hidden;
  state.architecture.hidden.resize(n_hidden);
  for (auto& h : state.architecture.hidden) in >> h;
  expect("ridge_lambda");
  in >> config.ridge_lambda;
  expect("learning_rate");
  in >> config.learning_rate;
  expect("epochs");
  in >> config.epochs;
  expect("batch_size");
  in >> config.batch_size;
  int flag = 0;
  expect("random_intercept");
  in >> flag;
  config.random_intercept = flag != 0;
  expect("laplace_refresh");
  in >> flag;
  config.laplace_refresh = flag != 0;
  expect("seed");
  in >> config.seed;
  expect("sigma_sq");
  in >> state.sigma_sq;
  expect("sigma_b_sq");
  in >> state.sigma_b_sq;
  expect("params");
  Eigen::Index n_params = 0;
  in >> n_params;
  if (!in || n_params != state.architecture.param_count()) throw fail();
  num::Vector flat(n_params);
  for (Eigen::Index i = 0; i < n_params; ++i) in >> flat[i];
  state.params = num::NetworkParams::unflatten(state.architecture, flat);
  expect("subjects");
  std::size_t n_subjects = 0;
  in >> n_subjects;
  state.subjects.resize(n_subjects);
  state.b.resize(static_cast<Eigen::Index>(n_subjects));
  for (std::size_t i = 0; i < n_subjects; ++i) in >> state.subjects[i] >> state.b[static_cast<Eigen::Index>(i)];
  if (!in) throw fail();
  config.architecture = state.architecture;
  state.random_intercept = config.random_intercept;
  return {std::move(state), std::move(config)};
}

GnmmConfig preset_1layer() {
  GnmmConfig config;
  config.laplace_refresh = false;
  config.architecture = {17, {3}};
  config.ridge_lambda = 0.001;
  config.learning_rate = 0.005;
  config.random_intercept = true;
  return config;
}

GnmmConfig preset_2layer() {
  GnmmConfig config;
  config.laplace_refresh = false;
  config.architecture = {17, {3, 2}};
  config.ridge_lambda = 0.002;
  config.learning_rate = 0.005;
  config.random_intercept = true;
  return config;
}

GnmmConfig preset_ann() {
  GnmmConfig config;
  config.laplace_refresh = false;
  config.architecture = {17, {3}};
  config.ridge_lambda = 0.001;
  config.learning_rate = 0.001;
  config.random_intercept = false;
  return config;
}

}  // namespace longmix::gnmm
