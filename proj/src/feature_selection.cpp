#include "longmix/feature_selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "longmix/lmm.hpp"

namespace longmix::fsel {

namespace {

double soft_threshold(double z, double lambda) {
  if (z > lambda) return z - lambda;
  if (z < -lambda) return z + lambda;
  return 0.0;
}

// Cyclic coordinate descent on (1/2n)|y - X b|^2 + lambda |b|_1, warm-started
// from the incoming beta. Columns with zero norm are pinned at zero.
void coordinate_descent(const num::Matrix& X, const num::Vector& y,
                        double lambda, num::Vector& beta) {
  const double n = static_cast<double>(X.rows());
  const Eigen::Index p = X.cols();
  num::Vector vnorm(p);
  for (Eigen::Index j = 0; j < p; ++j) vnorm[j] = X.col(j).squaredNorm() / n;
  num::Vector r = y - X * beta;
  constexpr int kMaxSweeps = 100000;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      if (vnorm[j] <= 0.0) {
        beta[j] = 0.0;
        continue;
      }
      const double old = beta[j];
      const double z = X.col(j).dot(r) / n + vnorm[j] * old;
      const double next = soft_threshold(z, lambda) / vnorm[j];
      if (next != old) {
        r += X.col(j) * (old - next);
        beta[j] = next;
        max_change = std::max(max_change, std::abs(next - old));
      }
    }
    if (max_change < 1e-8) break;
  }
}

struct FlatDesign {
  num::Matrix X;  // n x p term columns, no intercept
  num::Vector y;
  std::vector<int> block_subject;
  std::vector<std::pair<long, long>> block_range;  // row offset, length
};

FlatDesign flatten(const panel::PanelDataset& data,
                   const std::vector<std::string>& terms,
                   const std::string& response) {
  auto designs = panel::design_matrices(data, terms, {}, response);
  long n = 0;
  for (const auto& d : designs) n += d.y.size();
  const Eigen::Index p = static_cast<Eigen::Index>(terms.size());
  FlatDesign out;
  out.X.resize(n, p);
  out.y.resize(n);
  long at = 0;
  for (const auto& d : designs) {
    const long len = d.y.size();
    out.X.middleRows(at, len) = d.X.rightCols(p);
    out.y.segment(at, len) = d.y;
    out.block_subject.push_back(d.subject);
    out.block_range.emplace_back(at, len);
    at += len;
  }
  return out;
}

// Mean-zero, unit-1/n-variance scaling fitted on the rows in `use`; columns
// without variation get scale 0 and are zeroed rather than divided.
struct ColumnScaling {
  num::Vector mean;
  num::Vector scale;  // 0 marks a constant column
};

ColumnScaling fit_scaling(const num::Matrix& X, const std::vector<long>& use) {
  const Eigen::Index p = X.cols();
  const double n = static_cast<double>(use.size());
  ColumnScaling s;
  s.mean = num::Vector::Zero(p);
  s.scale = num::Vector::Zero(p);
  for (long i : use) s.mean += X.row(i).transpose();
  s.mean /= n;
  for (long i : use)
    s.scale += (X.row(i).transpose() - s.mean).array().square().matrix();
  for (Eigen::Index j = 0; j < p; ++j) {
    const double sd = std::sqrt(s.scale[j] / n);
    s.scale[j] = sd > 1e-12 ? sd : 0.0;
  }
  return s;
}

num::Matrix apply_scaling(const num::Matrix& X, const std::vector<long>& use,
                          const ColumnScaling& s) {
  num::Matrix out(static_cast<Eigen::Index>(use.size()), X.cols());
  for (std::size_t r = 0; r < use.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = X.row(use[r]) - s.mean.transpose();
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (s.scale[j] > 0.0)
      out.col(j) /= s.scale[j];
    else
      out.col(j).setZero();
  }
  return out;
}

double fit_candidate_aic(const panel::PanelDataset& data,
                         const std::vector<std::string>& terms,
                         const std::vector<std::string>& random_terms,
                         const std::string& response) {
  auto designs = panel::design_matrices(data, terms, random_terms, response);
  auto fit = lmm::fit(designs, lmm::Criterion::ml, {}, terms);
  return fit.aic;
}

}  // namespace

num::Vector lasso_fit(const num::Matrix& X, const num::Vector& y,
                      double lambda) {
  if (X.rows() != y.size())
    throw std::invalid_argument("lasso_fit: row count mismatch");
  if (X.rows() < 2 || X.cols() < 1)
    throw std::invalid_argument("lasso_fit: need >= 2 rows and >= 1 column");
  if (!(lambda >= 0.0))
    throw std::invalid_argument("lasso_fit: lambda must be >= 0");
  const double n = static_cast<double>(X.rows());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double mean = X.col(j).mean();
    const double sd =
        std::sqrt((X.col(j).array() - mean).square().sum() / n);
    if (std::abs(mean) > 1e-6 || std::abs(sd - 1.0) > 1e-6)
      throw std::invalid_argument(
          "lasso_fit: column " + std::to_string(j) +
          " is not standardized (mean 0, sd 1 under the 1/n convention)");
  }
  num::Vector beta = num::Vector::Zero(X.cols());
  coordinate_descent(X, y, lambda, beta);
  return beta;
}

LassoPath lasso_select(const panel::PanelDataset& data,
                       const std::string& response,
                       const std::vector<std::string>& candidates, int folds,
                       LambdaRule rule) {
  if (folds < 2) throw std::invalid_argument("lasso_select: folds must be >= 2");
  if (candidates.empty())
    throw std::invalid_argument("lasso_select: no candidate terms");
  FlatDesign flat = flatten(data, candidates, response);
  const long n = flat.X.rows();
  const Eigen::Index p = flat.X.cols();
  const int n_blocks = static_cast<int>(flat.block_subject.size());
  if (folds > n_blocks)
    throw std::invalid_argument("lasso_select: folds exceed subject count");

  // Whole subjects share a fold, dealt round-robin over ascending ids.
  std::vector<int> order(n_blocks);
  for (int i = 0; i < n_blocks; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return flat.block_subject[a] < flat.block_subject[b];
  });
  std::vector<int> fold_of(n_blocks);
  for (int rank = 0; rank < n_blocks; ++rank)
    fold_of[order[rank]] = rank % folds;

  // Grid from the full-data lambda_max down four decades.
  std::vector<long> all_rows(n);
  for (long i = 0; i < n; ++i) all_rows[i] = i;
  ColumnScaling full_scaling = fit_scaling(flat.X, all_rows);
  num::Matrix Xs = apply_scaling(flat.X, all_rows, full_scaling);
  const double ybar = flat.y.mean();
  num::Vector yc = (flat.y.array() - ybar).matrix();
  double lambda_max = 0.0;
  for (Eigen::Index j = 0; j < p; ++j)
    lambda_max = std::max(lambda_max, std::abs(Xs.col(j).dot(yc)) /
                                          static_cast<double>(n));
  lambda_max = std::max(lambda_max, 1e-12);
  constexpr int kGrid = 100;
  LassoPath path;
  path.terms = candidates;
  path.lambda_grid.resize(kGrid);
  for (int k = 0; k < kGrid; ++k)
    path.lambda_grid[k] = lambda_max * std::pow(10.0, -4.0 * k / (kGrid - 1));

  // Grouped cross-validation with per-fold re-standardization and a
  // warm-started descending path.
  std::vector<double> total_sse(kGrid, 0.0);
  num::Matrix fold_mse(folds, kGrid);
  for (int f = 0; f < folds; ++f) {
    std::vector<long> train_rows, test_rows;
    for (int b = 0; b < n_blocks; ++b) {
      auto [off, len] = flat.block_range[b];
      auto& dest = fold_of[b] == f ? test_rows : train_rows;
      for (long r = 0; r < len; ++r) dest.push_back(off + r);
    }
    num::Vector y_train(static_cast<Eigen::Index>(train_rows.size()));
    for (std::size_t i = 0; i < train_rows.size(); ++i)
      y_train[static_cast<Eigen::Index>(i)] = flat.y[train_rows[i]];
    const double y_mean = y_train.mean();
    if ((y_train.array() - y_mean).abs().maxCoeff() < 1e-12)
      throw std::runtime_error("lasso_select: fold " + std::to_string(f) +
                               " has a constant training response");
    ColumnScaling scaling = fit_scaling(flat.X, train_rows);
    num::Matrix X_train = apply_scaling(flat.X, train_rows, scaling);
    num::Matrix X_test = apply_scaling(flat.X, test_rows, scaling);
    num::Vector y_train_c = (y_train.array() - y_mean).matrix();
    num::Vector beta = num::Vector::Zero(p);
    for (int k = 0; k < kGrid; ++k) {
      coordinate_descent(X_train, y_train_c, path.lambda_grid[k], beta);
      double sse = 0.0;
      for (std::size_t i = 0; i < test_rows.size(); ++i) {
        const double pred =
            X_test.row(static_cast<Eigen::Index>(i)).dot(beta) + y_mean;
        const double err = flat.y[test_rows[i]] - pred;
        sse += err * err;
      }
      total_sse[k] += sse;
      fold_mse(f, k) = sse / static_cast<double>(test_rows.size());
    }
  }
  path.cv_mse.resize(kGrid);
  path.cv_se.resize(kGrid);
  for (int k = 0; k < kGrid; ++k) {
    path.cv_mse[k] = total_sse[k] / static_cast<double>(n);
    const double mean = fold_mse.col(k).mean();
    const double var =
        (fold_mse.col(k).array() - mean).square().sum() / (folds - 1);
    path.cv_se[k] = std::sqrt(var / folds);
  }

  int k_min = 0;
  for (int k = 1; k < kGrid; ++k)
    if (path.cv_mse[k] < path.cv_mse[k_min]) k_min = k;
  int k_choice = k_min;
  if (rule == LambdaRule::cv_1se) {
    const double cap = path.cv_mse[k_min] + path.cv_se[k_min];
    for (int k = 0; k <= k_min; ++k) {
      if (path.cv_mse[k] <= cap) {
        k_choice = k;
        break;
      }
    }
  }
  path.lambda_choice_rule = rule;
  path.lambda_choice = path.lambda_grid[k_choice];

  // Full-data path for the report and the final selection.
  path.coefficients.resize(kGrid, p);
  num::Vector beta = num::Vector::Zero(p);
  for (int k = 0; k < kGrid; ++k) {
    coordinate_descent(Xs, yc, path.lambda_grid[k], beta);
    path.coefficients.row(k) = beta.transpose();
  }
  for (Eigen::Index j = 0; j < p; ++j)
    if (std::abs(path.coefficients(k_choice, j)) > 1e-8)
      path.selected.push_back(candidates[static_cast<std::size_t>(j)]);
  return path;
}

StepwiseTrace stepwise_backward(const std::vector<std::string>& initial_terms,
                                const panel::PanelDataset& data,
                                const std::vector<std::string>& random_terms,
                                const std::string& response) {
  if (random_terms.empty())
    throw std::invalid_argument(
        "stepwise_backward: random-effects structure must be non-empty");
  StepwiseTrace trace;
  std::vector<std::string> current = initial_terms;
  double current_aic = fit_candidate_aic(data, current, random_terms, response);
  trace.steps.push_back({current, current_aic, ""});
  while (!current.empty()) {
    std::vector<std::future<std::pair<bool, double>>> jobs;
    for (std::size_t drop = 0; drop < current.size(); ++drop) {
      std::vector<std::string> candidate;
      for (std::size_t i = 0; i < current.size(); ++i)
        if (i != drop) candidate.push_back(current[i]);
      jobs.push_back(std::async(
          std::launch::async,
          [&data, &random_terms, &response,
           candidate]() -> std::pair<bool, double> {
            try {
              return {true, fit_candidate_aic(data, candidate, random_terms,
                                              response)};
            } catch (const std::exception&) {
              return {false, 0.0};
            }
          }));
    }
    int best = -1;
    double best_aic = current_aic;
    for (std::size_t drop = 0; drop < current.size(); ++drop) {
      auto [ok, aic] = jobs[drop].get();
      if (ok && aic < best_aic) {
        best = static_cast<int>(drop);
        best_aic = aic;
      }
    }
    if (best < 0) break;
    current.erase(current.begin() + best);
    trace.steps.push_back(
        {current, best_aic, trace.steps.back().terms[static_cast<std::size_t>(best)]});
    current_aic = best_aic;
  }
  trace.final_terms = current;
  return trace;
}

VifReport vif(const num::Matrix& X, const std::vector<std::string>& names) {
  const Eigen::Index p = X.cols();
  const Eigen::Index n = X.rows();
  if (p < 2) throw std::invalid_argument("vif: need at least two columns");
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != p)
    throw std::invalid_argument("vif: name count mismatch");
  VifReport report;
  for (Eigen::Index j = 0; j < p; ++j)
    report.terms.push_back(names.empty() ? "x" + std::to_string(j)
                                         : names[static_cast<std::size_t>(j)]);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double mean = X.col(j).mean();
    const double sst = (X.col(j).array() - mean).square().sum();
    if (sst < 1e-12)
      throw std::invalid_argument("vif: column " + report.terms[j] +
                                  " is constant");
  }
  for (Eigen::Index j = 0; j < p; ++j) {
    num::Matrix A(n, p);  // intercept plus the other columns
    A.col(0).setOnes();
    Eigen::Index at = 1;
    for (Eigen::Index k = 0; k < p; ++k)
      if (k != j) A.col(at++) = X.col(k);
    num::Vector fitted = A * A.colPivHouseholderQr().solve(X.col(j));
    const double ssr = (X.col(j) - fitted).squaredNorm();
    const double mean = X.col(j).mean();
    const double sst = (X.col(j).array() - mean).square().sum();
    const double r_sq = 1.0 - ssr / sst;
    if (r_sq > 1.0 - 1e-12) {
      report.values.push_back(std::numeric_limits<double>::infinity());
      report.warnings.push_back("column " + report.terms[j] +
                                " is exactly collinear with the others");
    } else {
      report.values.push_back(std::max(1.0, 1.0 / (1.0 - r_sq)));
    }
  }
  return report;
}

InteractionScan interaction_scan(const std::vector<std::string>& base_terms,
                                 const panel::PanelDataset& data,
                                 const std::vector<std::string>& random_terms,
                                 const std::string& response) {
  InteractionScan scan;
  scan.base_aic = fit_candidate_aic(data, base_terms, random_terms, response);
  std::vector<InteractionCandidate> results;
  std::vector<std::future<std::pair<bool, double>>> jobs;
  for (std::size_t i = 0; i < base_terms.size(); ++i) {
    for (std::size_t j = i + 1; j < base_terms.size(); ++j) {
      InteractionCandidate cand;
      cand.first = base_terms[i];
      cand.second = base_terms[j];
      results.push_back(cand);
      std::vector<std::string> terms = base_terms;
      terms.push_back(base_terms[i] + ":" + base_terms[j]);
      jobs.push_back(std::async(
          std::launch::async,
          [&data, &random_terms, &response,
           terms]() -> std::pair<bool, double> {
            try {
              return {true,
                      fit_candidate_aic(data, terms, random_terms, response)};
            } catch (const std::exception&) {
              return {false, 0.0};
            }
          }));
    }
  }
  for (std::size_t k = 0; k < results.size(); ++k) {
    auto [ok, aic] = jobs[k].get();
    results[k].ok = ok;
    results[k].aic = ok ? aic : 0.0;
    if (!ok) results[k].message = "fit failed";
  }
  std::stable_sort(results.begin(), results.end(),
                   [](const InteractionCandidate& a,
                      const InteractionCandidate& b) {
                     if (a.ok != b.ok) return a.ok;
                     if (!a.ok) return false;
                     return a.aic < b.aic;
                   });
  scan.ranked = std::move(results);
  return scan;
}

const std::vector<std::string>& benchmark_predictors() {
  static const std::vector<std::string> terms = {"age", "test_time",
                                                 "jitter_ppq5", "nhr", "hnr"};
  return terms;
}

std::string format_path(const LassoPath& path) {
  std::ostringstream out;
  out << "lasso path: " << path.terms.size() << " candidates, lambda in ["
      << path.lambda_grid.back() << ", " << path.lambda_grid.front() << "]\n";
  out << "chosen lambda = " << path.lambda_choice << " (rule: "
      << (path.lambda_choice_rule == LambdaRule::cv_min ? "cv_min" : "cv_1se")
      << ")\n";
  out << "selected " << path.selected.size() << " of " << path.terms.size()
      << ":";
  for (const auto& t : path.selected) out << " " << t;
  out << "\n";
  return out.str();
}

std::string format_trace(const StepwiseTrace& trace) {
  std::ostringstream out;
  for (std::size_t k = 0; k < trace.steps.size(); ++k) {
    const auto& s = trace.steps[k];
    out << "step " << k << ": AIC = " << s.aic;
    if (!s.dropped.empty()) out << " (dropped " << s.dropped << ")";
    out << ", terms:";
    if (s.terms.empty()) out << " <intercept only>";
    for (const auto& t : s.terms) out << " " << t;
    out << "\n";
  }
  out << "final:";
  for (const auto& t : trace.final_terms) out << " " << t;
  out << "\n";
  return out.str();
}

std::string format_scan(const InteractionScan& scan) {
  std::ostringstream out;
  out << "base AIC = " << scan.base_aic << "\n";
  for (const auto& c : scan.ranked) {
    out << c.first << ":" << c.second;
    if (c.ok)
      out << " AIC = " << c.aic << " (delta " << c.aic - scan.base_aic << ")";
    else
      out << " failed: " << c.message;
    out << "\n";
  }
  return out.str();
}

void write_terms(const std::string& path,
                 const std::vector<std::string>& terms) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_terms: cannot open " + path);
  for (const auto& t : terms) out << t << "\n";
}

std::vector<std::string> read_terms(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_terms: cannot open " + path);
  std::vector<std::string> terms;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string token;
    while (ss >> token) terms.push_back(token);
  }
  return terms;
}

}  // namespace longmix::fsel
