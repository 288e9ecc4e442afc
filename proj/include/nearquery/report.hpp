#pragma once

#include <string>

#include <json.hpp>

#include "nearquery/metrics.hpp"

namespace nq {

enum class ReportFormat { csv, json };
ReportFormat parse_report_format(const std::string& s);

// CSV: one row per present foreground class, then "mean" and one "tier:<name>"
// row. Columns: class,tier,dice,iou,acc,n_images. No present classes gives a
// header-only file. JSON mirrors MetricsReport field names.
void emit_report(const MetricsReport& m, ReportFormat fmt, const std::string& path);

nlohmann::json report_to_json(const MetricsReport& m);
MetricsReport report_from_json(const nlohmann::json& j);

}  // namespace nq
