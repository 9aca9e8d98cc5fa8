// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "namelearn/training.hpp"

namespace namelearn {

inline constexpr std::uint32_t kReportFormatVersion = 1;

/// Groups a report may carry, in table column order.
const std::vector<std::string>& report_groups();

struct SeedMetrics {
  std::uint64_t seed = 0;
  std::map<std::string, double> groups;
  std::optional<double> train_accuracy;
  double final_loss = 0.0;
};

struct MetricsReport {
  std::uint32_t format_version = kReportFormatVersion;
  std::string task;
  std::string mode;
  std::string metric;
  std::string config_json;  // TrainConfig echo
  std::vector<SeedMetrics> seeds;
  std::map<std::string, double> mean;
};

MetricsReport make_report(const ProtocolRun& run);
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(std::string_view text, const std::string& source = "report");

/// One row per seed plus a "mean" row; one column per group present, values
/// in percent with two decimals.
std::string report_table_csv(const MetricsReport& report);

/// TrainConfig as a JSON object with the field names of the struct.
std::string train_config_json(const TrainConfig& config);
/// Overrides the fields present in `text` (a JSON object) on top of `base`.
/// Unknown keys are an error.
TrainConfig apply_config_json(std::string_view text, TrainConfig base, const std::string& source = "config");

}  // namespace namelearn
