#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "rpt/pipeline.hpp"

namespace rpt {

namespace {

using nlohmann::json;

std::string tokens_text(const TokenSeq& t) {
  std::string s;
  for (Token k : t) s += (s.empty() ? "" : " ") + std::to_string(k);
  return s;
}

// Numbers render through the JSON serializer so CSV, text and JSON agree exactly.
json number_json(double v) {
  if (!std::isfinite(v)) return nullptr;
  if (v == std::trunc(v) && std::abs(v) < 9.0e15) return static_cast<std::int64_t>(v);
  return v;
}

std::string number_text(double v) {
  if (!std::isfinite(v)) return "nan";
  return number_json(v).dump();
}

// Single-precision settings print at float precision rather than as widened doubles.
double float_cell(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::stod(std::string(buf, res.ptr));
}

std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return number_text(std::get<double>(c));
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json cell_json(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return number_json(std::get<double>(c));
}

Cell cell_from_json(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_null()) return std::nan("");
  if (j.is_number()) return j.get<double>();
  throw ConfigError("report cell must be a string, number or null");
}

void add_setting_cells(std::vector<Cell>& row, const DefenseSetting& s) {
  row.emplace_back(s.layer_end == LayerEnd::bottom ? "bottom" : "top");
  row.emplace_back(static_cast<double>(s.num_layers));
  row.emplace_back(static_cast<double>(s.steps));
  row.emplace_back(float_cell(s.learning_rate));
  row.emplace_back(normalization_name(s.normalization));
  row.emplace_back(static_cast<double>(s.batch_size));
}

const std::vector<std::string> kSettingColumns{"layer_end", "num_layers", "steps", "learning_rate", "normalization",
                                               "batch_size"};

ReportTable defense_table(const std::string& name, const std::vector<DefenseCell>& cells) {
  ReportTable t{name, kSettingColumns, {}};
  for (const char* c : {"split", "clean", "attacked", "fallbacks"}) t.columns.emplace_back(c);
  for (const auto& c : cells) {
    std::vector<Cell> row;
    add_setting_cells(row, c.setting);
    row.emplace_back(c.split);
    row.emplace_back(c.clean);
    row.emplace_back(c.attacked);
    row.emplace_back(static_cast<double>(c.fallbacks));
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace

std::string normalization_name(Normalization n) {
  switch (n) {
    case Normalization::dynamic:
      return "dynamic";
    case Normalization::fixed:
      return "static";
    case Normalization::none:
      return "none";
  }
  return "unknown";
}

std::string setting_name(const DefenseSetting& s) {
  std::ostringstream os;
  os << (s.layer_end == LayerEnd::bottom ? "bottom" : "top") << '-' << s.num_layers << " steps=" << s.steps
     << " lr=" << s.learning_rate << ' ' << normalization_name(s.normalization) << " bsz=" << s.batch_size;
  return os.str();
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  if (name == "text") return ReportFormat::text;
  throw ConfigError("unknown report format '" + name + "' (expected csv, json, text)");
}

Report make_report(const ResultBundle& b) {
  Report r{b.partial, b.failed_stage, b.error, {}};

  ReportTable grid{"accuracy_grid", {"method", "framework"}, {}};
  for (const auto& c : b.grid.columns) grid.columns.push_back(c);
  for (const auto& row : b.grid.rows) {
    std::vector<Cell> cells{row.method, std::string(row.defended ? "yes" : "no")};
    for (double a : row.accuracy) cells.emplace_back(a);
    grid.rows.push_back(std::move(cells));
  }
  r.tables.push_back(std::move(grid));

  ReportTable curves{"training_curves", {"method", "epoch", "train_loss", "dev_accuracy"}, {}};
  for (const auto& p : b.curves) {
    curves.rows.push_back({p.method, static_cast<double>(p.epoch), p.train_loss, p.dev_accuracy});
  }
  r.tables.push_back(std::move(curves));

  ReportTable metrics{"behavior_metrics", {"metric", "condition", "value", "samples", "p_value"}, {}};
  for (const auto& m : b.metrics) {
    metrics.rows.push_back({m.metric, m.condition, m.value, static_cast<double>(m.samples),
                            m.p_value ? Cell(*m.p_value) : Cell(std::string("-"))});
  }
  r.tables.push_back(std::move(metrics));

  ReportTable triggers{"triggers", {"method", "target", "tokens", "search_error"}, {}};
  for (const auto& t : b.triggers) {
    triggers.rows.push_back({t.method, static_cast<double>(t.target), tokens_text(t.tokens), t.search_error});
  }
  r.tables.push_back(std::move(triggers));

  ReportTable lr{"defense_learning_rate", {"learning_rate"}, {}};
  if (b.defense_learning_rate > 0.0f) lr.rows.push_back({float_cell(b.defense_learning_rate)});
  r.tables.push_back(std::move(lr));

  r.tables.push_back(defense_table("layer_sweep", b.layer_sweep));
  r.tables.push_back(defense_table("normalization_variants", b.normalization));

  ReportTable mixed{"mixed_stream", {"split", "steps", "learning_rate", "samples", "undefended", "defended"}, {}};
  for (const auto& m : b.mixed) {
    mixed.rows.push_back({m.split, static_cast<double>(m.steps), float_cell(m.learning_rate),
                          static_cast<double>(m.samples), m.undefended, m.defended});
  }
  r.tables.push_back(std::move(mixed));

  ReportTable stages{"lm_checksums", {"stage", "before", "after"}, {}};
  for (const auto& s : b.stages) {
    stages.rows.push_back({s.stage, std::to_string(s.lm_before), std::to_string(s.lm_after)});
  }
  r.tables.push_back(std::move(stages));

  ReportTable timing{"wall_clock", {"phase", "method", "seconds"}, {}};
  for (const auto& t : b.timings) timing.rows.push_back({t.phase, t.method, t.seconds});
  r.tables.push_back(std::move(timing));
  return r;
}

namespace {

json table_json(const ReportTable& t) {
  json rows = json::array();
  for (const auto& row : t.rows) {
    json jr = json::array();
    for (const auto& c : row) jr.push_back(cell_json(c));
    rows.push_back(std::move(jr));
  }
  return {{"name", t.name}, {"columns", t.columns}, {"rows", rows}};
}

json report_json(const Report& r, bool with_timing) {
  json tables = json::array();
  for (const auto& t : r.tables) {
    if (!with_timing && t.name == "wall_clock") continue;
    tables.push_back(table_json(t));
  }
  return {{"partial", r.partial}, {"failed_stage", r.failed_stage}, {"error", r.error}, {"tables", tables}};
}

}  // namespace

std::string report_to_json(const Report& report) { return report_json(report, true).dump(2) + "\n"; }

Report report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
    Report r;
    r.partial = j.at("partial").get<bool>();
    r.failed_stage = j.at("failed_stage").get<std::string>();
    r.error = j.at("error").get<std::string>();
    for (const auto& jt : j.at("tables")) {
      ReportTable t;
      t.name = jt.at("name").get<std::string>();
      t.columns = jt.at("columns").get<std::vector<std::string>>();
      for (const auto& jr : jt.at("rows")) {
        std::vector<Cell> row;
        for (const auto& c : jr) row.push_back(cell_from_json(c));
        t.rows.push_back(std::move(row));
      }
      r.tables.push_back(std::move(t));
    }
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report JSON: ") + e.what());
  }
}

std::uint64_t report_checksum(const Report& report) {
  const std::string s = report_json(report, false).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::filesystem::path> emit_report(const Report& report, ReportFormat format,
                                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const std::string& name) {
    written.push_back(dir / name);
    std::ofstream f(written.back());
    if (!f) throw std::runtime_error("cannot write " + written.back().string());
    return f;
  };
  switch (format) {
    case ReportFormat::json: {
      open("report.json") << report_to_json(report);
      break;
    }
    case ReportFormat::csv: {
      for (const auto& t : report.tables) {
        std::ofstream f = open(t.name + ".csv");
        for (std::size_t c = 0; c < t.columns.size(); ++c) f << (c ? "," : "") << csv_escape(t.columns[c]);
        f << '\n';
        for (const auto& row : t.rows) {
          for (std::size_t c = 0; c < row.size(); ++c) f << (c ? "," : "") << csv_escape(cell_text(row[c]));
          f << '\n';
        }
      }
      std::ofstream s = open("status.csv");
      s << "partial,failed_stage,error,checksum\n"
        << (report.partial ? "yes" : "no") << ',' << csv_escape(report.failed_stage) << ','
        << csv_escape(report.error) << ',' << report_checksum(report) << '\n';
      break;
    }
    case ReportFormat::text: {
      std::ofstream f = open("report.txt");
      f << "status: " << (report.partial ? "partial (failed at " + report.failed_stage + ": " + report.error + ")"
                                         : "complete")
        << "\nchecksum: " << report_checksum(report) << "\n";
      for (const auto& t : report.tables) {
        std::vector<std::size_t> width(t.columns.size());
        for (std::size_t c = 0; c < t.columns.size(); ++c) width[c] = t.columns[c].size();
        for (const auto& row : t.rows) {
          for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) {
            width[c] = std::max(width[c], cell_text(row[c]).size());
          }
        }
        f << "\n== " << t.name << " ==\n";
        for (std::size_t c = 0; c < t.columns.size(); ++c) f << std::left << std::setw(width[c] + 2) << t.columns[c];
        f << '\n';
        for (const auto& row : t.rows) {
          for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) {
            f << std::left << std::setw(width[c] + 2) << cell_text(row[c]);
          }
          f << '\n';
        }
      }
      break;
    }
  }
  return written;
}

}  // namespace rpt
