#include "eio/report.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace eio::report {

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{"model_id", "protocol", "eps", "accuracy", "n_samples", "seed",
                                             "attack_inventory_hash"};
  return cols;
}

std::string format_eps(double eps) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, eps);
  return ec == std::errc() ? std::string(buf, end) : std::to_string(eps);
}

std::string format_accuracy(double acc) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", acc);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
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

double to_double(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) fail(ErrorCategory::parse, "not a number in report: '" + s + "'");
  return v;
}

std::size_t column(const CsvTable& t, const std::string& name) {
  require(!t.empty(), ErrorCategory::parse, "empty CSV table");
  auto it = std::find(t[0].begin(), t[0].end(), name);
  if (it == t[0].end()) fail(ErrorCategory::parse, "CSV table lacks column '" + name + "'");
  return static_cast<std::size_t>(it - t[0].begin());
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

std::string to_csv(const eval::EvalReport& r) {
  std::ostringstream os;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& row : r.rows)
    os << csv_field(row.model_id) << ',' << row.protocol << ',' << format_eps(row.eps) << ',' << format_accuracy(row.accuracy)
       << ',' << row.n_samples << ',' << row.seed << ',' << row.inventory_hash << '\n';
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCategory::io, "cannot write '" + path + "'");
  os << text;
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCategory::io, "cannot read '" + path + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_csv(const std::string& path, const eval::EvalReport& r) { write_text(path, to_csv(r)); }

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      t.push_back(std::move(row));
      row.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    t.push_back(std::move(row));
  }
  return t;
}

CsvTable read_csv(const std::string& path) { return parse_csv(read_text(path)); }

json row_to_json(const eval::EvalRow& row) {
  return {{"model_id", row.model_id},
          {"protocol", row.protocol},
          {"eps", row.eps},
          {"accuracy", row.accuracy},
          {"clean_accuracy", row.clean_accuracy},
          {"min_attack_accuracy", row.min_attack_accuracy},
          {"n_samples", row.n_samples},
          {"seed", row.seed},
          {"attack_inventory_hash", row.inventory_hash},
          {"versions", row.versions},
          {"surrogates", row.sources},
          {"per_attack_accuracy", row.per_attack},
          {"sgm_fallback", row.fallback}};
}

void write_jsonl(const std::string& path, const eval::EvalReport& r, const json& extra) {
  std::ostringstream os;
  for (const auto& row : r.rows) {
    json j = row_to_json(row);
    if (extra.is_object())
      for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    os << j.dump() << '\n';
  }
  write_text(path, os.str());
}

std::string transfer_csv(const eval::TransferMatrix& tm) {
  std::ostringstream os;
  os << "source\\target";
  for (const auto& id : tm.ids) os << ',' << csv_field(id);
  os << '\n';
  for (std::size_t i = 0; i < tm.ids.size(); ++i) {
    os << csv_field(tm.ids[i]);
    for (double v : tm.success[i]) os << ',' << format_accuracy(v);
    os << '\n';
  }
  return os.str();
}

void write_transfer_csv(const std::string& path, const eval::TransferMatrix& tm) { write_text(path, transfer_csv(tm)); }

std::string accuracy_plot_svg(const CsvTable& table, const std::string& title) {
  const std::size_t c_model = column(table, "model_id"), c_proto = column(table, "protocol"), c_eps = column(table, "eps"),
                    c_acc = column(table, "accuracy");
  struct Point {
    std::string eps_s, acc_s;
    double eps, acc;
  };
  std::map<std::string, std::vector<Point>> series;
  std::vector<std::string> order;
  double max_eps = 0;
  for (std::size_t r = 1; r < table.size(); ++r) {
    const auto& row = table[r];
    if (row.size() < table[0].size()) continue;
    const std::string key = row[c_model] + " (" + row[c_proto] + ")";
    if (!series.count(key)) order.push_back(key);
    Point p{row[c_eps], row[c_acc], to_double(row[c_eps]), to_double(row[c_acc])};
    max_eps = std::max(max_eps, p.eps);
    series[key].push_back(p);
  }
  if (max_eps <= 0) max_eps = 1;
  const double W = 640, H = 420, ml = 60, mr = 200, mt = 40, mb = 50;
  const double pw = W - ml - mr, ph = H - mt - mb;
  auto X = [&](double e) { return ml + pw * e / max_eps; };
  auto Y = [&](double a) { return mt + ph * (1.0 - a); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"24\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double a = k / 5.0;
    os << "<text x=\"" << ml - 8 << "\" y=\"" << Y(a) + 4 << "\" text-anchor=\"end\">" << format_eps(a) << "</text>\n";
    const double e = max_eps * k / 5.0;
    os << "<text x=\"" << X(e) << "\" y=\"" << mt + ph + 18 << "\" text-anchor=\"middle\">" << format_eps(e) << "</text>\n";
  }
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">perturbation eps (L-inf)</text>\n";
  os << "<text x=\"16\" y=\"" << mt + ph / 2 << "\" transform=\"rotate(-90 16 " << mt + ph / 2
     << ")\" text-anchor=\"middle\">accuracy</text>\n";
  std::size_t si = 0;
  for (const auto& key : order) {
    auto pts = series[key];
    std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.eps < b.eps; });
    const char* color = kPalette[si % (sizeof kPalette / sizeof *kPalette)];
    os << "<g class=\"series\" data-series=\"" << xml_escape(key) << "\">\n<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : pts) os << X(p.eps) << ',' << Y(p.acc) << ' ';
    os << "\"/>\n";
    for (const auto& p : pts)
      os << "<circle cx=\"" << X(p.eps) << "\" cy=\"" << Y(p.acc) << "\" r=\"3\" fill=\"" << color << "\" data-eps=\""
         << p.eps_s << "\" data-accuracy=\"" << p.acc_s << "\"/>\n";
    os << "</g>\n";
    const double ly = mt + 16.0 * static_cast<double>(si);
    os << "<rect x=\"" << ml + pw + 12 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << ml + pw + 26 << "\" y=\"" << ly + 9 << "\">" << xml_escape(key) << "</text>\n";
    ++si;
  }
  os << "</svg>\n";
  return os.str();
}

std::string transfer_heatmap_svg(const CsvTable& m, const std::string& title) {
  require(m.size() >= 2, ErrorCategory::parse, "transfer matrix CSV has no rows");
  const std::size_t k = m.size() - 1;
  const double cell = 64, ml = 140, mt = 60;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << ml + cell * static_cast<double>(k) + 20 << "\" height=\""
     << mt + cell * static_cast<double>(k) + 20 << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (std::size_t j = 0; j < k; ++j)
    os << "<text x=\"" << ml + cell * (static_cast<double>(j) + 0.5) << "\" y=\"" << mt - 8 << "\" text-anchor=\"middle\">"
       << xml_escape(m[0][j + 1]) << "</text>\n";
  for (std::size_t i = 0; i < k; ++i) {
    os << "<text x=\"" << ml - 6 << "\" y=\"" << mt + cell * (static_cast<double>(i) + 0.5) + 4 << "\" text-anchor=\"end\">"
       << xml_escape(m[i + 1][0]) << "</text>\n";
    for (std::size_t j = 0; j < k && j + 1 < m[i + 1].size(); ++j) {
      const std::string& s = m[i + 1][j + 1];
      const double v = std::clamp(to_double(s), 0.0, 1.0);
      const int shade = static_cast<int>(255 - 200 * v);
      os << "<rect x=\"" << ml + cell * static_cast<double>(j) << "\" y=\"" << mt + cell * static_cast<double>(i)
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(255," << shade << "," << shade
         << ")\" stroke=\"white\" data-value=\"" << s << "\"/>\n";
      os << "<text x=\"" << ml + cell * (static_cast<double>(j) + 0.5) << "\" y=\"" << mt + cell * (static_cast<double>(i) + 0.5) + 4
         << "\" text-anchor=\"middle\">" << s.substr(0, 5) << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace eio::report
