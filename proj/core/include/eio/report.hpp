#pragma once

// Report emission: summary CSV, line-delimited JSON records, transfer-matrix
// CSV and SVG plots rendered from CSV content (plots never recompute values).

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "eio/protocol.hpp"

namespace eio::report {

using nlohmann::json;

// model_id,protocol,eps,accuracy,n_samples,seed,attack_inventory_hash
const std::vector<std::string>& csv_columns();

std::string format_eps(double eps);       // shortest round-trip form, e.g. "0.03"
std::string format_accuracy(double acc);  // six decimals

using CsvTable = std::vector<std::vector<std::string>>;  // first row is the header

std::string to_csv(const eval::EvalReport& r);
void write_csv(const std::string& path, const eval::EvalReport& r);
CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text);

json row_to_json(const eval::EvalRow& row);
// One JSON object per row; `extra` (config hash, seeds, provenance) is merged
// into each record.
void write_jsonl(const std::string& path, const eval::EvalReport& r, const json& extra = json::object());

std::string transfer_csv(const eval::TransferMatrix& tm);
void write_transfer_csv(const std::string& path, const eval::TransferMatrix& tm);

// Accuracy-vs-eps line plot of a summary table; one series per
// (model_id, protocol). Every point carries the CSV strings it was drawn from
// in data-eps / data-accuracy attributes.
std::string accuracy_plot_svg(const CsvTable& table, const std::string& title);
std::string transfer_heatmap_svg(const CsvTable& matrix, const std::string& title);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace eio::report
