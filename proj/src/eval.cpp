#include "ser/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "text_util.hpp"

namespace ser::eval {

using nlohmann::json;

double uar(std::span<const int> predictions, std::span<const int> truth) {
  if (truth.empty()) throw Error("uar of an empty label set");
  if (predictions.size() != truth.size())
    throw Error("uar: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(truth.size()) +
                " labels");
  std::map<int, std::pair<Index, Index>> per_class;  // hits, count
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& [hits, count] = per_class[truth[i]];
    ++count;
    if (predictions[i] == truth[i]) ++hits;
  }
  double sum = 0;
  for (const auto& [label, hc] : per_class) sum += static_cast<double>(hc.first) / static_cast<double>(hc.second);
  return 100.0 * sum / static_cast<double>(per_class.size());
}

MatrixXd ConfusionMatrix::normalized() const {
  MatrixXd n = counts.cast<double>();
  for (Index r = 0; r < n.rows(); ++r) {
    const double s = n.row(r).sum();
    if (s > 0) n.row(r) /= s;
  }
  return n;
}

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> truth,
                          std::vector<std::string> label_order) {
  if (predictions.size() != truth.size()) throw Error("confusion: predictions and truth differ in length");
  const auto k = static_cast<int>(label_order.size());
  ConfusionMatrix c;
  c.labels = std::move(label_order);
  c.counts = Eigen::MatrixXi::Zero(k, k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {truth[i], predictions[i]})
      if (v < 0 || v >= k) throw Error("confusion: unknown label " + std::to_string(v));
    ++c.counts(truth[i], predictions[i]);
  }
  return c;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::al: return "AL";
    case Method::ccg: return "CCG";
    case Method::da: return "DA";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "AL" || s == "al") return Method::al;
  if (s == "CCG" || s == "ccg") return Method::ccg;
  if (s == "DA" || s == "da") return Method::da;
  throw Error("unknown method '" + s + "'");
}

namespace {

json to_json(const ExperimentReport& r) {
  json counts = json::array();
  for (Index i = 0; i < r.confusion.counts.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < r.confusion.counts.cols(); ++j) row.push_back(r.confusion.counts(i, j));
    counts.push_back(row);
  }
  json normalized = json::array();
  const MatrixXd n = r.confusion.normalized();
  for (Index i = 0; i < n.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < n.cols(); ++j) row.push_back(n(i, j));
    normalized.push_back(row);
  }
  return {{"method", to_string(r.method)},
          {"source", r.source},
          {"feature_kind", r.feature_kind},
          {"label_mode", r.label_mode},
          {"task", to_string(r.task)},
          {"uar", r.uar},
          {"confusion", {{"labels", r.confusion.labels}, {"counts", counts}, {"normalized", normalized}}},
          {"fingerprint", r.fingerprint},
          {"seed", r.seed},
          {"train_size", r.train_size},
          {"test_size", r.test_size}};
}

ExperimentReport from_json(const json& j) {
  ExperimentReport r;
  r.method = parse_method(j.at("method").get<std::string>());
  r.source = j.at("source").get<std::string>();
  r.feature_kind = j.at("feature_kind").get<std::string>();
  r.label_mode = j.at("label_mode").get<std::string>();
  r.task = parse_task(j.at("task").get<std::string>());
  r.uar = j.at("uar").get<double>();
  const auto& c = j.at("confusion");
  r.confusion.labels = c.at("labels").get<std::vector<std::string>>();
  const auto& counts = c.at("counts");
  const auto k = static_cast<Index>(r.confusion.labels.size());
  if (counts.size() != static_cast<std::size_t>(k)) throw Error("report: confusion matrix does not match its labels");
  r.confusion.counts = Eigen::MatrixXi::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    if (counts[i].size() != static_cast<std::size_t>(k)) throw Error("report: ragged confusion matrix");
    for (Index j2 = 0; j2 < k; ++j2) r.confusion.counts(i, j2) = counts[i][j2].get<int>();
  }
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.train_size = j.value("train_size", Index{0});
  r.test_size = j.value("test_size", Index{0});
  if (!(r.uar >= 0 && r.uar <= 100)) throw Error("report: UAR outside [0, 100]");
  return r;
}

template <typename F>
auto parse_guarded(const std::string& text, F f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(std::string("malformed report JSON: ") + e.what());
  }
}

auto sort_key(const ExperimentReport& r) {
  return std::make_tuple(static_cast<int>(r.method), r.source, r.feature_kind, r.label_mode, static_cast<int>(r.task));
}

std::string format_uar(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

}  // namespace

std::string report_to_json(const ExperimentReport& r) { return to_json(r).dump(2) + "\n"; }

ExperimentReport report_from_json(const std::string& text) {
  return parse_guarded(text, [](const json& j) { return from_json(j); });
}

std::string reports_to_json(const std::vector<ExperimentReport>& reports) {
  json arr = json::array();
  for (const auto& r : sort_reports(reports)) arr.push_back(to_json(r));
  return arr.dump(2) + "\n";
}

std::vector<ExperimentReport> reports_from_json(const std::string& text) {
  return parse_guarded(text, [](const json& j) {
    if (!j.is_array()) throw Error("report list must be a JSON array");
    std::vector<ExperimentReport> out;
    for (const auto& item : j) out.push_back(from_json(item));
    return out;
  });
}

std::vector<ExperimentReport> sort_reports(std::vector<ExperimentReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const auto& a, const auto& b) { return sort_key(a) < sort_key(b); });
  return reports;
}

std::string render_table(const std::vector<ExperimentReport>& reports) {
  const auto sorted = sort_reports(reports);
  using RowKey = std::tuple<int, std::string, std::string, std::string>;
  std::vector<RowKey> rows;
  std::map<RowKey, std::map<int, double>> cells;
  for (const auto& r : sorted) {
    RowKey key{static_cast<int>(r.method), r.source, r.feature_kind, r.label_mode};
    if (!cells.count(key)) rows.push_back(key);
    cells[key][static_cast<int>(r.task)] = r.uar;
  }
  std::map<int, double> column_max;
  for (const auto& [key, by_task] : cells)
    for (const auto& [task, v] : by_task)
      column_max[task] = column_max.count(task) ? std::max(column_max[task], v) : v;

  std::vector<std::vector<std::string>> table{{"method", "source", "features", "mode", "valence", "arousal"}};
  for (const auto& key : rows) {
    std::vector<std::string> line{to_string(static_cast<Method>(std::get<0>(key))), std::get<1>(key),
                                  std::get<2>(key), std::get<3>(key).empty() ? "-" : std::get<3>(key)};
    for (int task : {0, 1}) {
      const auto& by_task = cells[key];
      auto it = by_task.find(task);
      if (it == by_task.end()) {
        line.push_back("-");
      } else {
        const std::string v = format_uar(it->second);
        line.push_back(it->second == column_max[task] ? "**" + v + "**" : v);
      }
    }
    table.push_back(std::move(line));
  }
  std::vector<std::size_t> width(table[0].size(), 0);
  for (const auto& line : table)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t c = 0; c < table[r].size(); ++c) {
      const auto& cell = table[r][c];
      const std::string pad(width[c] - cell.size(), ' ');
      out << (c ? "  " : "") << (c >= 4 ? pad + cell : cell + pad);
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

std::string render_csv(const std::vector<ExperimentReport>& reports) {
  std::ostringstream out;
  out << "method,source,feature_kind,label_mode,task,uar,seed,fingerprint\n";
  for (const auto& r : sort_reports(reports))
    out << to_string(r.method) << ',' << detail::csv_escape(r.source) << ',' << detail::csv_escape(r.feature_kind)
        << ',' << detail::csv_escape(r.label_mode) << ','
        << to_string(r.task) << ',' << format_uar(r.uar) << ',' << r.seed << ',' << r.fingerprint << '\n';
  return out.str();
}

}  // namespace ser::eval
