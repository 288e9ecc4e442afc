#include "nearquery/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace nq {

using json = nlohmann::json;

ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw std::invalid_argument("unknown report format '" + s + "' (csv|json)");
}

json report_to_json(const MetricsReport& m) {
  json pc = json::array();
  for (const auto& c : m.per_class) {
    pc.push_back({{"label", c.label}, {"name", c.name}, {"tier", c.tier}, {"dice", c.dice}, {"iou", c.iou},
                  {"acc", c.acc}, {"n_images", c.n_images}, {"present", c.present}});
  }
  json tiers = json::array();
  for (const auto& t : m.tiers) {
    tiers.push_back({{"tier", t.tier}, {"dice", t.dice}, {"iou", t.iou}, {"acc", t.acc}, {"n_classes", t.n_classes}});
  }
  return {{"per_class", pc}, {"mDice", m.mDice}, {"mIoU", m.mIoU}, {"mAcc", m.mAcc},
          {"tiers", tiers},  {"flags", m.flags}};
}

MetricsReport report_from_json(const json& j) {
  MetricsReport m;
  try {
    for (const json& c : j.at("per_class")) {
      ClassMetrics cm;
      cm.label = c.at("label").get<int>();
      cm.name = c.at("name").get<std::string>();
      cm.tier = c.at("tier").get<std::string>();
      cm.dice = c.at("dice").get<double>();
      cm.iou = c.at("iou").get<double>();
      cm.acc = c.at("acc").get<double>();
      cm.n_images = c.at("n_images").get<Index>();
      cm.present = c.at("present").get<bool>();
      m.per_class.push_back(cm);
    }
    m.mDice = j.at("mDice").get<double>();
    m.mIoU = j.at("mIoU").get<double>();
    m.mAcc = j.at("mAcc").get<double>();
    for (const json& t : j.at("tiers")) {
      m.tiers.push_back({t.at("tier").get<std::string>(), t.at("dice").get<double>(), t.at("iou").get<double>(),
                         t.at("acc").get<double>(), t.at("n_classes").get<Index>()});
    }
    m.flags = j.at("flags").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed metrics report: ") + e.what());
  }
  return m;
}

namespace {

void check_finite(const MetricsReport& m) {
  auto bad = [](double v) { return !std::isfinite(v); };
  bool b = bad(m.mDice) || bad(m.mIoU) || bad(m.mAcc);
  for (const auto& c : m.per_class) b = b || bad(c.dice) || bad(c.iou) || bad(c.acc);
  for (const auto& t : m.tiers) b = b || bad(t.dice) || bad(t.iou) || bad(t.acc);
  if (b) throw std::invalid_argument("emit_report: metrics contain non-finite values");
}

}  // namespace

void emit_report(const MetricsReport& m, ReportFormat fmt, const std::string& path) {
  check_finite(m);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report " + path);
  if (fmt == ReportFormat::json) {
    f << report_to_json(m).dump(2) << '\n';
  } else {
    f << "class,tier,dice,iou,acc,n_images\n";
    char buf[512];
    bool any = false;
    for (const auto& c : m.per_class) {
      if (!c.present) continue;
      any = true;
      std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g,%lld\n", c.name.c_str(), c.tier.c_str(), c.dice,
                    c.iou, c.acc, static_cast<long long>(c.n_images));
      f << buf;
    }
    if (any) {
      std::snprintf(buf, sizeof buf, "mean,,%.17g,%.17g,%.17g,\n", m.mDice, m.mIoU, m.mAcc);
      f << buf;
      for (const auto& t : m.tiers) {
        std::snprintf(buf, sizeof buf, "tier:%s,%s,%.17g,%.17g,%.17g,\n", t.tier.c_str(), t.tier.c_str(), t.dice,
                      t.iou, t.acc);
        f << buf;
      }
    }
  }
  if (!f) throw std::runtime_error("failed writing report " + path);
}

}  // namespace nq
