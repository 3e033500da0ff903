#include "dgl/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dgl {

namespace {

constexpr const char* kHeader =
    "step,module_id,epoch_equivalent,train_loss,train_acc,test_acc,grad_norm,drift,bits_sent,buffer_bytes,"
    "starvation_count";

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("bad number in metrics: " + s);
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("bad integer in metrics: " + s);
  return v;
}

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string metrics_csv(const std::vector<MetricRecord>& records) {
  std::ostringstream out;
  out << kMetricsVersionLine << '\n' << kHeader << '\n';
  for (const auto& r : records) {
    out << r.step << ',' << r.module_id << ',' << format_number(r.epoch_equivalent) << ','
        << format_number(r.train_loss) << ',' << format_number(r.train_acc) << ',' << format_number(r.test_acc) << ','
        << format_number(r.grad_norm) << ',' << format_number(r.drift) << ',' << format_number(r.bits_sent) << ','
        << r.buffer_bytes << ',' << r.starvation_count << '\n';
  }
  return out.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write metrics file " + path);
  f << metrics_csv(records);
}

std::vector<MetricRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsVersionLine)
    throw std::invalid_argument("metrics: missing version line '" + std::string(kMetricsVersionLine) + "'");
  if (!std::getline(in, line) || line != kHeader) throw std::invalid_argument("metrics: unexpected header row");
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw std::invalid_argument("metrics: row has " + std::to_string(f.size()) + " fields");
    MetricRecord r;
    r.step = parse_u64(f[0]);
    r.module_id = parse_u64(f[1]);
    r.epoch_equivalent = parse_double(f[2]);
    r.train_loss = parse_double(f[3]);
    r.train_acc = parse_double(f[4]);
    r.test_acc = parse_double(f[5]);
    r.grad_norm = parse_double(f[6]);
    r.drift = parse_double(f[7]);
    r.bits_sent = parse_double(f[8]);
    r.buffer_bytes = parse_u64(f[9]);
    r.starvation_count = parse_u64(f[10]);
    out.push_back(r);
  }
  return out;
}

}  // namespace dgl
