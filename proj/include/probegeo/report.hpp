#pragma once

// Text serialization of results: CSV tables, JSON documents and SVG heatmaps.
// All writers are byte-deterministic for identical inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "probegeo/conformal.hpp"
#include "probegeo/dataset.hpp"
#include "probegeo/geometry.hpp"
#include "probegeo/moe.hpp"
#include "probegeo/transfer.hpp"

namespace probegeo {

inline std::string format_number(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  std::string s(buf);
  if (s.rfind("-0.", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

// ---------------------------------------------------------------------------
// Matrices

inline std::string matrix_csv(const TransferMatrix& m) {
  std::ostringstream os;
  os << "eval\\train";
  for (const auto& c : m.train_tasks) os << ',' << c;
  os << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << m.eval_tasks[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << ',' << format_number(m.values(i, j));
    os << '\n';
  }
  return os.str();
}

inline TransferMatrix parse_matrix_csv(const std::string& text, std::string metric = "value") {
  std::istringstream in(text);
  std::string line;
  auto split_line = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw FormatError("matrix CSV is empty");
  auto header = split_line(line);
  if (header.size() < 2) throw FormatError("matrix CSV header needs at least one column");
  std::vector<std::string> cols(header.begin() + 1, header.end());
  std::vector<std::string> rows;
  std::vector<std::vector<double>> vals;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != cols.size() + 1)
      throw FormatError("matrix CSV row '" + cells.front() + "' has the wrong number of cells");
    rows.push_back(cells.front());
    std::vector<double> r;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        r.push_back(std::stod(cells[c], &used));
        if (used != cells[c].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw FormatError("matrix CSV cell '" + cells[c] + "' is not a number");
      }
    }
    vals.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError("matrix CSV has no data rows");
  auto m = make_matrix(rows, cols, std::move(metric));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = vals[i][j];
  return m;
}

inline nlohmann::json to_json(const TransferMatrix& m) {
  auto rows = [](const Matrix& x) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(x(i, j));
    return out;
  };
  return {{"metric", m.metric},       {"eval_tasks", m.eval_tasks}, {"train_tasks", m.train_tasks},
          {"values", rows(m.values)}, {"stddev", rows(m.stddev)},   {"replicates", m.replicates}};
}

inline nlohmann::json to_json(const CorrelationReport& c) {
  return {{"r", c.r}, {"r_squared", c.r_squared}, {"p_value", c.p_value}, {"n_pairs", c.n_pairs}};
}

// ---------------------------------------------------------------------------
// Tables

inline std::string supports_csv(const SignedSupport& s) {
  std::ostringstream os;
  os << "probe";
  for (auto j : s.order) os << ",dim" << j;
  os << '\n';
  for (std::size_t p = 0; p < s.probes.size(); ++p) {
    os << s.probes[p];
    for (auto j : s.order) os << ',' << s.signs[p][j];
    os << '\n';
  }
  return os.str();
}

inline std::string projection_csv(const Projection& p, const std::vector<std::string>& task_names) {
  std::ostringstream os;
  os << "x,y,label,task\n";
  for (Eigen::Index i = 0; i < p.coords.rows(); ++i) {
    const auto r = static_cast<std::size_t>(i);
    os << format_number(p.coords(i, 0)) << ',' << format_number(p.coords.cols() > 1 ? p.coords(i, 1) : 0.0)
       << ',' << (r < p.labels.size() ? int(p.labels[r]) : 0) << ','
       << (r < p.task_ids.size() && p.task_ids[r] < task_names.size() ? task_names[p.task_ids[r]] : "")
       << '\n';
  }
  return os.str();
}

inline std::string multitask_csv(const MultitaskTable& t) {
  std::ostringstream os;
  os << "task,protocol,auroc,std,replicates\n";
  for (std::size_t i = 0; i < t.tasks.size(); ++i)
    for (std::size_t c = 0; c < t.protocols.size(); ++c)
      os << t.tasks[i] << ',' << to_string(t.protocols[c]) << ','
         << format_number(t.auroc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c))) << ','
         << format_number(t.stddev(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c))) << ','
         << t.replicates << '\n';
  return os.str();
}

inline std::string moe_csv_header() {
  return "target_task,replicate,gridpoint,lr,weight_decay,aux_coef,val_auroc,test_auroc,epochs,selected,status\n";
}

inline std::string moe_csv_rows(const std::string& target, std::size_t replicate,
                                const MoeTrainResult& res) {
  std::ostringstream os;
  for (const auto& r : res.report) {
    std::string sel;
    if (r.gridpoint == res.selected_validation) sel = "validation";
    if (res.selected_oracle && r.gridpoint == *res.selected_oracle) sel += sel.empty() ? "oracle" : "+oracle";
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    os << target << ',' << replicate << ',' << r.gridpoint << ',' << format_number(r.lr, 8) << ','
       << format_number(r.weight_decay, 8) << ',' << format_number(r.aux_coef, 8) << ','
       << format_number(r.val_auroc) << ',' << format_number(r.test_auroc) << ',' << r.epochs << ','
       << sel << ',' << status << '\n';
  }
  return os.str();
}

inline std::string conformal_csv(const std::vector<CalibrationRow>& rows) {
  std::ostringstream os;
  os << "method,mean_fpr,q80_fpr,mean_recall\n";
  for (const auto& r : rows)
    os << to_string(r.method) << ',' << format_number(r.mean_fpr) << ',' << format_number(r.q80_fpr)
       << ',' << format_number(r.mean_recall) << '\n';
  return os.str();
}

inline nlohmann::json to_json(const std::vector<CalibrationRow>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"method", std::string(to_string(r.method))},
                   {"mean_fpr", r.mean_fpr},
                   {"q80_fpr", r.q80_fpr},
                   {"mean_recall", r.mean_recall}});
  return arr;
}

// ---------------------------------------------------------------------------
// SVG heatmap

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string hex_color(int r, int g, int b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

// Linear colour scale from white (matrix minimum) to dark blue (maximum).
inline std::string render_heatmap(const TransferMatrix& m, const std::string& title = "") {
  if (m.rows() == 0 || m.cols() == 0) throw DataError("render_heatmap: empty matrix");
  if (!m.values.allFinite()) throw DataError("render_heatmap: matrix has non-finite values");
  constexpr int cell = 64, char_w = 7;
  constexpr int lo_r = 255, lo_g = 255, lo_b = 255, hi_r = 8, hi_g = 48, hi_b = 107;
  const double vmin = m.values.minCoeff(), vmax = m.values.maxCoeff();
  std::size_t row_label = 0, col_label = 0;
  for (const auto& s : m.eval_tasks) row_label = std::max(row_label, s.size());
  for (const auto& s : m.train_tasks) col_label = std::max(col_label, s.size());
  const int left = 16 + char_w * static_cast<int>(row_label);
  const int top = 40 + char_w * static_cast<int>(col_label);
  const int width = left + cell * static_cast<int>(m.cols()) + 16;
  const int height = top + cell * static_cast<int>(m.rows()) + 16;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<metadata>color-scale: linear; min=" << format_number(vmin) << " -> "
     << detail::hex_color(lo_r, lo_g, lo_b) << "; max=" << format_number(vmax) << " -> "
     << detail::hex_color(hi_r, hi_g, hi_b) << "; metric=" << detail::xml_escape(m.metric)
     << "; rows=eval tasks; columns=train tasks</metadata>\n";
  os << "<style>text{font-family:sans-serif;font-size:12px}</style>\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"#ffffff\"/>\n";
  if (!title.empty())
    os << "<text x=\"" << left << "\" y=\"20\" font-weight=\"bold\">" << detail::xml_escape(title)
       << "</text>\n";
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const int x = left + cell * static_cast<int>(j) + cell / 2;
    os << "<text x=\"" << x << "\" y=\"" << top - 6 << "\" transform=\"rotate(-45 " << x << ' '
       << top - 6 << ")\">" << detail::xml_escape(m.train_tasks[static_cast<std::size_t>(j)])
       << "</text>\n";
  }
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const int y = top + cell * static_cast<int>(i);
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
       << detail::xml_escape(m.eval_tasks[static_cast<std::size_t>(i)]) << "</text>\n";
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m.values(i, j);
      const double t = vmax > vmin ? (v - vmin) / (vmax - vmin) : 0.0;
      auto mix = [t](int a, int b) { return static_cast<int>(std::lround(a + t * (b - a))); };
      const int x = left + cell * static_cast<int>(j);
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"" << detail::hex_color(mix(lo_r, hi_r), mix(lo_g, hi_g), mix(lo_b, hi_b))
         << "\" stroke=\"#cccccc\"/>\n";
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
         << "\" text-anchor=\"middle\" fill=\"" << (t > 0.5 ? "#ffffff" : "#000000") << "\">"
         << format_number(v, 2) << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::write_file(path, text);
}

inline std::string read_text(const std::filesystem::path& path) { return detail::read_file(path); }

}  // namespace probegeo
