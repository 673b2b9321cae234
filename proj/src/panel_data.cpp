#include "longmix/panel_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace longmix::panel {

namespace {

const std::array<std::string, kColumnCount> kCsvHeader = {
    "subject#",      "age",          "sex",           "test_time",
    "motor_UPDRS",   "total_UPDRS",  "Jitter(%)",     "Jitter(Abs)",
    "Jitter:RAP",    "Jitter:PPQ5",  "Jitter:DDP",    "Shimmer",
    "Shimmer(dB)",   "Shimmer:APQ3", "Shimmer:APQ5",  "Shimmer:APQ11",
    "Shimmer:DDA",   "NHR",          "HNR",           "RPDE",
    "DFA",           "PPE"};

const std::array<std::string, kColumnCount> kColumnIds = {
    "subject",       "age",          "sex",           "test_time",
    "motor_updrs",   "total_updrs",  "jitter_pct",    "jitter_abs",
    "jitter_rap",    "jitter_ppq5",  "jitter_ddp",    "shimmer",
    "shimmer_db",    "shimmer_apq3", "shimmer_apq5",  "shimmer_apq11",
    "shimmer_dda",   "nhr",          "hnr",           "rpde",
    "dfa",           "ppe"};

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return cells;
}

double parse_cell(const std::string& cell, int line_no, const std::string& col) {
  if (cell.empty())
    throw std::runtime_error("load_csv: missing value in column " + col + " at line " +
                             std::to_string(line_no));
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last)
    throw std::runtime_error("load_csv: non-numeric value '" + cell + "' in column " +
                             col + " at line " + std::to_string(line_no));
  if (!std::isfinite(value))
    throw std::runtime_error("load_csv: non-finite value in column " + col +
                             " at line " + std::to_string(line_no));
  return value;
}

void sort_and_collect(PanelDataset& data) {
  std::vector<std::size_t> order(data.rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (data.rows[a].subject != data.rows[b].subject)
      return data.rows[a].subject < data.rows[b].subject;
    return data.rows[a].test_time < data.rows[b].test_time;
  });
  std::vector<ObservationRow> sorted;
  sorted.reserve(data.rows.size());
  for (std::size_t idx : order) sorted.push_back(data.rows[idx]);
  data.rows = std::move(sorted);
  data.subjects.clear();
  for (const auto& row : data.rows)
    if (data.subjects.empty() || data.subjects.back() != row.subject)
      data.subjects.push_back(row.subject);
}

}  // namespace

const std::array<std::string, kColumnCount>& csv_header() { return kCsvHeader; }
const std::array<std::string, kColumnCount>& column_ids() { return kColumnIds; }

const std::vector<std::string>& voice_ids() {
  static const std::vector<std::string> ids(kColumnIds.begin() + 6, kColumnIds.end());
  return ids;
}

int column_index(const std::string& id) {
  for (int i = 0; i < kColumnCount; ++i)
    if (kColumnIds[static_cast<std::size_t>(i)] == id) return i;
  return -1;
}

double cell(const ObservationRow& row, int col) {
  switch (col) {
    case 0: return static_cast<double>(row.subject);
    case 1: return row.age;
    case 2: return row.sex;
    case 3: return row.test_time;
    case 4: return row.motor_updrs;
    case 5: return row.total_updrs;
    default:
      if (col < 6 || col >= kColumnCount)
        throw std::invalid_argument("cell: column index out of range");
      return row.voice[static_cast<std::size_t>(col - 6)];
  }
}

void set_cell(ObservationRow& row, int col, double value) {
  switch (col) {
    case 0: row.subject = static_cast<int>(value); return;
    case 1: row.age = value; return;
    case 2: row.sex = value; return;
    case 3: row.test_time = value; return;
    case 4: row.motor_updrs = value; return;
    case 5: row.total_updrs = value; return;
    default:
      if (col < 6 || col >= kColumnCount)
        throw std::invalid_argument("set_cell: column index out of range");
      row.voice[static_cast<std::size_t>(col - 6)] = value;
  }
}

std::vector<std::pair<std::size_t, std::size_t>> subject_spans(
    const PanelDataset& data) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= data.rows.size(); ++i) {
    if (i == data.rows.size() || data.rows[i].subject != data.rows[begin].subject) {
      spans.emplace_back(begin, i);
      begin = i;
    }
  }
  return spans;
}

num::Vector column_values(const PanelDataset& data, const std::string& id) {
  const int col = column_index(id);
  if (col < 0) throw std::invalid_argument("column_values: unknown column " + id);
  num::Vector v(static_cast<Eigen::Index>(data.rows.size()));
  for (std::size_t i = 0; i < data.rows.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = cell(data.rows[i], col);
  return v;
}

PanelDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("load_csv: empty file " + path);
  auto header = split_line(line);
  if (header.size() != kColumnCount)
    throw std::runtime_error("load_csv: expected 22 columns, found " +
                             std::to_string(header.size()));
  for (int i = 0; i < kColumnCount; ++i)
    if (header[static_cast<std::size_t>(i)] != kCsvHeader[static_cast<std::size_t>(i)])
      throw std::runtime_error("load_csv: header mismatch at column " +
                               std::to_string(i + 1) + ": expected '" +
                               kCsvHeader[static_cast<std::size_t>(i)] + "', found '" +
                               header[static_cast<std::size_t>(i)] + "'");

  PanelDataset data;
  data.column_names.assign(kColumnIds.begin(), kColumnIds.end());
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != kColumnCount)
      throw std::runtime_error("load_csv: expected 22 cells at line " +
                               std::to_string(line_no) + ", found " +
                               std::to_string(cells.size()));
    ObservationRow row;
    for (int c = 0; c < kColumnCount; ++c) {
      const double value =
          parse_cell(cells[static_cast<std::size_t>(c)], line_no,
                     kColumnIds[static_cast<std::size_t>(c)]);
      set_cell(row, c, value);
    }
    if (!(row.total_updrs > 0.0))
      throw std::runtime_error("load_csv: non-positive total_UPDRS at line " +
                               std::to_string(line_no));
    data.rows.push_back(row);
  }
  sort_and_collect(data);
  data.provenance.push_back("source=" + path);
  data.provenance.push_back("rows=" + std::to_string(data.n_rows()));
  data.provenance.push_back("subjects=" + std::to_string(data.n_subjects()));
  return data;
}

void write_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  for (int i = 0; i < kColumnCount; ++i)
    out << kCsvHeader[static_cast<std::size_t>(i)] << (i + 1 < kColumnCount ? "," : "\n");
  char buf[64];
  for (const auto& row : data.rows) {
    out << row.subject;
    for (int c = 1; c < kColumnCount; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", cell(row, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

void write_provenance(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_provenance: cannot open " + path);
  for (const auto& entry : data.provenance) out << entry << '\n';
}

PanelDataset from_rows(std::vector<ObservationRow> rows,
                       std::vector<std::string> provenance) {
  PanelDataset data;
  data.column_names.assign(kColumnIds.begin(), kColumnIds.end());
  data.rows = std::move(rows);
  data.provenance = std::move(provenance);
  sort_and_collect(data);
  return data;
}

std::pair<PanelDataset, PanelDataset> split(const PanelDataset& data,
                                            const SplitSpec& spec) {
  PanelDataset train, test;
  train.column_names = data.column_names;
  test.column_names = data.column_names;
  for (auto [begin, end] : subject_spans(data)) {
    const std::size_t n_i = end - begin;
    std::size_t hold = 0;
    if (spec.mode == SplitSpec::Mode::last_row) {
      if (n_i < 2)
        throw std::runtime_error("split: subject " +
                                 std::to_string(data.rows[begin].subject) +
                                 " has fewer than 2 rows");
      hold = 1;
    } else {
      hold = static_cast<std::size_t>(
          std::ceil(spec.fraction * static_cast<double>(n_i)));
      if (n_i < hold + 1)
        throw std::runtime_error("split: subject " +
                                 std::to_string(data.rows[begin].subject) +
                                 " has too few rows for fraction holdout");
    }
    for (std::size_t i = begin; i < end; ++i) {
      if (i < end - hold)
        train.rows.push_back(data.rows[i]);
      else
        test.rows.push_back(data.rows[i]);
    }
  }
  for (auto* part : {&train, &test}) {
    for (const auto& row : part->rows)
      if (part->subjects.empty() || part->subjects.back() != row.subject)
        part->subjects.push_back(row.subject);
    part->provenance = data.provenance;
  }
  const std::string desc =
      spec.mode == SplitSpec::Mode::last_row
          ? "split=last_row"
          : "split=last_fraction fraction=" + std::to_string(spec.fraction);
  train.provenance.push_back(desc + " partition=train");
  test.provenance.push_back(desc + " partition=test");
  return {std::move(train), std::move(test)};
}

std::tuple<PanelDataset, PanelDataset, TransformSpec> apply_transforms(
    const PanelDataset& train, const PanelDataset& test, const TransformSpec& spec) {
  PanelDataset tr = train;
  PanelDataset te = test;
  TransformSpec fitted = spec;
  if (fitted.standardize_columns.empty()) {
    fitted.standardize_columns.push_back("test_time");
    for (const auto& id : voice_ids()) fitted.standardize_columns.push_back(id);
  }
  if (fitted.standardize_features) {
    const bool fit = fitted.feature_means.empty();
    if (fit) {
      fitted.feature_means.assign(fitted.standardize_columns.size(), 0.0);
      fitted.feature_sds.assign(fitted.standardize_columns.size(), 0.0);
    } else if (fitted.feature_means.size() != fitted.standardize_columns.size() ||
               fitted.feature_sds.size() != fitted.standardize_columns.size()) {
      throw std::runtime_error("apply_transforms: statistics length mismatch");
    }
    for (std::size_t k = 0; k < fitted.standardize_columns.size(); ++k) {
      const std::string& id = fitted.standardize_columns[k];
      const int col = column_index(id);
      if (col < 0)
        throw std::runtime_error("apply_transforms: unknown column " + id);
      if (fit) {
        double mean = 0.0;
        for (const auto& row : tr.rows) mean += cell(row, col);
        mean /= static_cast<double>(tr.rows.size());
        double ss = 0.0;
        for (const auto& row : tr.rows) {
          const double d = cell(row, col) - mean;
          ss += d * d;
        }
        const double sd =
            std::sqrt(ss / static_cast<double>(tr.rows.size() - 1));
        if (!(sd > 0.0))
          throw std::runtime_error("apply_transforms: zero-variance column " + id);
        fitted.feature_means[k] = mean;
        fitted.feature_sds[k] = sd;
      }
      const double mean = fitted.feature_means[k];
      const double sd = fitted.feature_sds[k];
      for (auto* part : {&tr, &te})
        for (auto& row : part->rows)
          set_cell(row, col, (cell(row, col) - mean) / sd);
    }
    for (auto* part : {&tr, &te})
      part->provenance.push_back("transform=standardize columns=" +
                                 std::to_string(fitted.standardize_columns.size()));
  }
  if (fitted.log_response) {
    for (auto* part : {&tr, &te})
      for (auto& row : part->rows) row.total_updrs = std::log(row.total_updrs);
    for (auto* part : {&tr, &te})
      part->provenance.push_back("transform=log_response");
  }
  return {std::move(tr), std::move(te), std::move(fitted)};
}

namespace {

num::Vector term_column(const PanelDataset& data, const std::string& term) {
  const std::size_t sep = term.find(':');
  if (sep != std::string::npos) {
    const std::string a = term.substr(0, sep);
    const std::string b = term.substr(sep + 1);
    num::Vector va = column_values(data, a);
    num::Vector vb = column_values(data, b);
    return va.cwiseProduct(vb);
  }
  if (term == "intercept")
    return num::Vector::Ones(static_cast<Eigen::Index>(data.n_rows()));
  if (column_index(term) < 0)
    throw std::invalid_argument("design_matrices: unknown term " + term);
  return column_values(data, term);
}

}  // namespace

std::vector<SubjectDesign> design_matrices(const PanelDataset& data,
                                           const std::vector<std::string>& fixed_terms,
                                           const std::vector<std::string>& random_terms,
                                           const std::string& response) {
  const auto n = static_cast<Eigen::Index>(data.n_rows());
  num::Matrix X(n, static_cast<Eigen::Index>(fixed_terms.size()) + 1);
  X.col(0).setOnes();
  for (std::size_t t = 0; t < fixed_terms.size(); ++t)
    X.col(static_cast<Eigen::Index>(t) + 1) = term_column(data, fixed_terms[t]);
  num::Matrix Z(n, static_cast<Eigen::Index>(random_terms.size()));
  for (std::size_t t = 0; t < random_terms.size(); ++t)
    Z.col(static_cast<Eigen::Index>(t)) = term_column(data, random_terms[t]);
  num::Vector y = column_values(data, response);

  std::vector<SubjectDesign> designs;
  for (auto [begin, end] : subject_spans(data)) {
    const auto b = static_cast<Eigen::Index>(begin);
    const auto rows = static_cast<Eigen::Index>(end - begin);
    SubjectDesign d;
    d.subject = data.rows[begin].subject;
    d.X = X.middleRows(b, rows);
    d.Z = Z.middleRows(b, rows);
    d.y = y.segment(b, rows);
    designs.push_back(std::move(d));
  }
  return designs;
}

}  // namespace longmix::panel
