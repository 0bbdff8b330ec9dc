#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rpt/config.hpp"

namespace rpt {

/// Accuracy grid: one row per method with and without the defense; columns are clean + attacks.
struct GridRow {
  std::string method;
  bool defended = false;
  std::vector<double> accuracy;
};

struct AccuracyGrid {
  std::vector<std::string> columns;
  std::vector<GridRow> rows;
};

struct CurvePoint {
  std::string method;
  int epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
};

/// cDoD / cRoE for one condition, with the bootstrap p-value against the baseline.
struct MetricResult {
  std::string metric;
  std::string condition;
  double value = 0.0;
  std::size_t samples = 0;
  std::optional<double> p_value;
};

struct DefenseSetting {
  LayerEnd layer_end = LayerEnd::bottom;
  int num_layers = 0;
  int steps = 0;
  float learning_rate = 0.0f;
  Normalization normalization = Normalization::fixed;
  int batch_size = 1;
};

/// One evaluated defense configuration; `split` is "dev" or "test".
struct DefenseCell {
  DefenseSetting setting;
  std::string split;
  double clean = 0.0;
  double attacked = 0.0;
  std::size_t fallbacks = 0;
};

struct MixedResult {
  std::string split;
  int steps = 0;
  float learning_rate = 0.0f;
  std::size_t samples = 0;
  double undefended = 0.0;
  double defended = 0.0;
};

struct TimingRow {
  std::string phase;
  std::string method;
  double seconds = 0.0;
};

struct StageRecord {
  std::string stage;
  std::uint64_t lm_before = 0;
  std::uint64_t lm_after = 0;
};

struct TriggerRecord {
  std::string method;
  Token target = vocab::kPad;
  TokenSeq tokens;
  double search_error = 0.0;
};

struct ResultBundle {
  bool partial = false;
  std::string failed_stage;
  std::string error;

  AccuracyGrid grid;
  std::vector<CurvePoint> curves;
  std::vector<MetricResult> metrics;
  std::vector<TriggerRecord> triggers;
  float defense_learning_rate = 0.0f;
  std::vector<DefenseCell> layer_sweep;  // dev cells for every setting, then the test cell of each end's best
  std::vector<DefenseCell> normalization;
  std::vector<MixedResult> mixed;
  std::vector<StageRecord> stages;
  std::vector<TimingRow> timings;

  /// Test cell of the dev-selected setting for one layer end, if swept.
  std::optional<DefenseCell> best(LayerEnd end) const;
  /// Grid cell by method / defended flag / column name.
  std::optional<double> accuracy(const std::string& method, bool defended, const std::string& column) const;
  std::optional<double> metric(const std::string& metric, const std::string& condition) const;
};

struct RunOptions {
  std::ostream* log = nullptr;
  bool save_artifacts = true;
};

/// Runs every configured stage. A failing stage marks the bundle partial and stops the run.
/// Config errors are raised before any compute.
ResultBundle run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// ---------------------------------------------------------------------------
// Reports

using Cell = std::variant<std::string, double>;

struct ReportTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

struct Report {
  bool partial = false;
  std::string failed_stage;
  std::string error;
  std::vector<ReportTable> tables;
};

enum class ReportFormat { csv, json, text };

ReportFormat parse_report_format(const std::string& name);

Report make_report(const ResultBundle& bundle);
std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);

/// Checksum over every table except wall-clock timings.
std::uint64_t report_checksum(const Report& report);

/// Writes report files into `dir` and returns their paths.
std::vector<std::filesystem::path> emit_report(const Report& report, ReportFormat format,
                                               const std::filesystem::path& dir);

std::string setting_name(const DefenseSetting& s);
std::string normalization_name(Normalization n);

}  // namespace rpt
