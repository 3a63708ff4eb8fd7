#include "frm/profiler.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace frm {

namespace {

const char* mode_name(Mode mode) { return mode == Mode::kTraining ? "training" : "inference"; }

bool under(const std::string& path, const std::string& prefix) {
  if (prefix.empty()) return true;
  return path == prefix || (path.size() > prefix.size() && path.compare(0, prefix.size(), prefix) == 0 &&
                            path[prefix.size()] == '.');
}

std::string gflops(std::uint64_t flops) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << static_cast<double>(flops) / 1e9;
  return out.str();
}

const std::vector<std::string> kSections{"backbone", "aggregate", "context", "decoder", "embed"};

}  // namespace

std::uint64_t CostReport::total_params() const {
  std::uint64_t t = 0;
  for (const auto& r : rows) t += r.params;
  return t;
}

std::uint64_t CostReport::total_flops() const {
  std::uint64_t t = 0;
  for (const auto& r : rows) t += r.flops;
  return t;
}

CostRow CostReport::subtotal(const std::string& prefix) const {
  CostRow out{prefix, 0, 0};
  for (const auto& r : rows) {
    if (!under(r.path, prefix)) continue;
    out.params += r.params;
    out.flops += r.flops;
  }
  return out;
}

const CostRow* CostReport::find(const std::string& path) const {
  for (const auto& r : rows)
    if (r.path == path) return &r;
  return nullptr;
}

std::string CostReport::table() const {
  std::size_t width_col = 6;
  for (const auto& r : rows) width_col = std::max(width_col, r.path.size());
  std::ostringstream out;
  out << "context head: " << context_head << "  input: " << height << "x" << width << "  mode: " << mode_name(mode)
      << "\n";
  out << std::left << std::setw(static_cast<int>(width_col)) << "module" << std::right << std::setw(12) << "params"
      << std::setw(16) << "flops" << "\n";
  auto line = [&](const std::string& path, std::uint64_t p, std::uint64_t f) {
    out << std::left << std::setw(static_cast<int>(width_col)) << path << std::right << std::setw(12) << p
        << std::setw(16) << f << "\n";
  };
  for (const auto& r : rows) line(r.path, r.params, r.flops);
  out << std::string(width_col + 28, '-') << "\n";
  line("total", total_params(), total_flops());
  return out.str();
}

std::string CostReport::csv() const {
  std::ostringstream out;
  out << "head,height,width,mode,module,params,flops\n";
  for (const auto& r : rows) {
    out << context_head << ',' << height << ',' << width << ',' << mode_name(mode) << ',' << r.path << ','
        << r.params << ',' << r.flops << "\n";
  }
  out << context_head << ',' << height << ',' << width << ',' << mode_name(mode) << ",total," << total_params()
      << ',' << total_flops() << "\n";
  return out.str();
}

CostReport count_costs(const SegModel<float>& model, std::size_t height, std::size_t width, Mode mode) {
  CostCounter counter;
  model.count_costs(counter, Shape{1, 3, height, width}, mode);
  CostReport report;
  report.context_head = model.config().context_head;
  report.height = height;
  report.width = width;
  report.mode = mode;
  report.rows = counter.rows();
  return report;
}

CostReport count_costs(const ModelConfig& config, std::size_t height, std::size_t width, Mode mode) {
  const SegModel<float> model(config);
  return count_costs(model, height, width, mode);
}

HeadComparison compare_heads(const ModelConfig& base, std::size_t height, std::size_t width,
                             const std::vector<std::string>& heads, Mode mode) {
  HeadComparison out;
  for (const auto& head : heads) {
    ModelConfig config = base;
    config.context_head = head;
    out.reports.push_back(count_costs(config, height, width, mode));
  }
  return out;
}

std::string HeadComparison::table() const {
  std::ostringstream out;
  if (reports.empty()) return "";
  out << "input: " << reports.front().height << "x" << reports.front().width
      << "  mode: " << mode_name(reports.front().mode) << "  (params / GFLOPs)\n";
  out << std::left << std::setw(8) << "head";
  for (const auto& s : kSections) out << std::right << std::setw(22) << s;
  out << std::setw(22) << "total" << "\n";
  for (const auto& r : reports) {
    out << std::left << std::setw(8) << r.context_head;
    for (const auto& s : kSections) {
      const CostRow sub = r.subtotal(s);
      out << std::right << std::setw(22) << (std::to_string(sub.params) + " / " + gflops(sub.flops));
    }
    out << std::setw(22) << (std::to_string(r.total_params()) + " / " + gflops(r.total_flops())) << "\n";
  }
  return out.str();
}

std::string HeadComparison::csv() const {
  std::ostringstream out;
  out << "head,height,width,mode,section,params,flops\n";
  for (const auto& r : reports) {
    for (const auto& s : kSections) {
      const CostRow sub = r.subtotal(s);
      out << r.context_head << ',' << r.height << ',' << r.width << ',' << mode_name(r.mode) << ',' << s << ','
          << sub.params << ',' << sub.flops << "\n";
    }
    out << r.context_head << ',' << r.height << ',' << r.width << ',' << mode_name(r.mode) << ",total,"
        << r.total_params() << ',' << r.total_flops() << "\n";
  }
  return out.str();
}

}  // namespace frm
