#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "longmix/numeric_core.hpp"

namespace longmix::panel {

inline constexpr int kColumnCount = 22;
inline constexpr int kVoiceCount = 16;

// Verbatim UCI header names, in file order.
const std::array<std::string, kColumnCount>& csv_header();
// Internal identifiers for the same columns, in the same order.
const std::array<std::string, kColumnCount>& column_ids();
// The 16 voice-feature identifiers (columns 6..21).
const std::vector<std::string>& voice_ids();
// Index of an internal identifier in the schema, -1 if unknown.
int column_index(const std::string& id);

struct ObservationRow {
  int subject = 0;
  double age = 0.0;
  double sex = 0.0;  // 0 male, 1 female
  double test_time = 0.0;
  double motor_updrs = 0.0;
  double total_updrs = 0.0;
  std::array<double, kVoiceCount> voice{};
};

// Cell accessors by schema column index (0 = subject, ..., 21 = ppe).
double cell(const ObservationRow& row, int col);
void set_cell(ObservationRow& row, int col, double value);

// Rows are grouped contiguously per subject (subjects ascending) and sorted by
// test_time within subject; ties keep original file order.
struct PanelDataset {
  std::vector<int> subjects;
  std::vector<ObservationRow> rows;
  std::vector<std::string> column_names;  // internal ids
  std::vector<std::string> provenance;    // key=value log lines

  std::size_t n_rows() const { return rows.size(); }
  std::size_t n_subjects() const { return subjects.size(); }
};

// Contiguous [begin, end) row span of each subject, in `subjects` order.
std::vector<std::pair<std::size_t, std::size_t>> subject_spans(const PanelDataset& data);

// All values of one column across rows, in row order.
num::Vector column_values(const PanelDataset& data, const std::string& id);

// Parses and validates the 22-column telemonitoring CSV. Throws
// std::runtime_error naming the offending line on schema mismatch,
// non-numeric or missing cells, non-finite values, or total_UPDRS <= 0.
PanelDataset load_csv(const std::string& path);

// Writes the dataset back in the same CSV format (17 significant digits, so a
// reload reproduces identical doubles) and a key=value provenance sidecar.
void write_csv(const PanelDataset& data, const std::string& path);
void write_provenance(const PanelDataset& data, const std::string& path);

// Rebuilds grouping metadata from a raw row list (sorts, collects subjects).
PanelDataset from_rows(std::vector<ObservationRow> rows,
                       std::vector<std::string> provenance = {});

struct SplitSpec {
  enum class Mode { last_row, last_fraction };
  Mode mode = Mode::last_row;
  double fraction = 0.0;        // last_fraction only
  std::uint64_t seed = 0;       // recorded for provenance; modes are deterministic
};

// Per-subject holdout of the latest rows: one row for last_row,
// ceil(fraction * n_i) rows for last_fraction. Throws std::runtime_error
// naming the subject when it has too few rows.
std::pair<PanelDataset, PanelDataset> split(const PanelDataset& data,
                                            const SplitSpec& spec);

struct TransformSpec {
  bool standardize_features = false;
  bool log_response = false;
  // Columns standardized when standardize_features is on; defaults to
  // test_time plus the 16 voice features.
  std::vector<std::string> standardize_columns;
  // Fitted statistics, aligned with standardize_columns; filled from the
  // training rows when empty, reused verbatim otherwise.
  std::vector<double> feature_means;
  std::vector<double> feature_sds;  // n-1 divisor
};

// Standardizes the selected columns with training statistics and/or replaces
// the response by its natural log, on both partitions. Returns the transformed
// partitions and the fitted spec. Throws std::runtime_error naming a
// zero-variance column.
std::tuple<PanelDataset, PanelDataset, TransformSpec> apply_transforms(
    const PanelDataset& train, const PanelDataset& test, const TransformSpec& spec);

struct SubjectDesign {
  int subject = 0;
  num::Matrix X;  // n_i x (1 + fixed terms), intercept first
  num::Matrix Z;  // n_i x random terms
  num::Vector y;
};

// Builds per-subject design matrices. Fixed terms are column ids or "a:b"
// interactions (elementwise product); random terms are "intercept" or column
// ids. Throws std::invalid_argument on unknown term names.
std::vector<SubjectDesign> design_matrices(const PanelDataset& data,
                                           const std::vector<std::string>& fixed_terms,
                                           const std::vector<std::string>& random_terms,
                                           const std::string& response = "total_updrs");

}  // namespace longmix::panel
