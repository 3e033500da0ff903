#include "dgl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dgl/metrics.hpp"

namespace dgl {

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::Sync:
      return "sync";
    case RunMode::Sequential:
      return "sequential";
    case RunMode::Pipelined:
      return "pipelined";
    case RunMode::Async:
      return "async";
    case RunMode::AsyncQuantized:
      return "async-quantized";
  }
  return "sync";
}

RunMode parse_run_mode(const std::string& text) {
  if (text == "sync") return RunMode::Sync;
  if (text == "sequential") return RunMode::Sequential;
  if (text == "pipelined") return RunMode::Pipelined;
  if (text == "async") return RunMode::Async;
  if (text == "async-quantized") return RunMode::AsyncQuantized;
  throw ConfigError("unknown mode '" + text + "' (expected sync, sequential, pipelined, async or async-quantized)");
}

std::size_t ExperimentConfig::buffer_batches() const {
  if (!buffer_in_samples) return buffer_capacity;
  return (buffer_capacity + batch_size - 1) / batch_size;
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(width >= 1, "architecture.width must be at least 1");
  require(modules == 4 || modules == 6, "architecture.modules must be 4 or 6");
  require(lr > 0.0, "optimizer.lr must be positive");
  require(momentum >= 0.0, "optimizer.momentum must be non-negative");
  require(weight_decay >= 0.0, "optimizer.weight_decay must be non-negative");
  require(decay_factor > 0.0 && decay_factor <= 1.0, "optimizer.decay_factor must lie in (0, 1]");
  require(decay_period > 0, "optimizer.decay_period must be positive");
  require(batch_size >= 1, "optimizer.batch_size must be at least 1");
  require(buffer_capacity >= 1, "buffer.capacity must be at least 1");
  require(slow_module <= modules, "delay.slow_module must be 0 or a module index");
  require(slowdown > 0.0, "delay.slowdown must be positive");
  require(pmf.empty() || pmf.size() == modules, "delay.pmf must list one probability per module");
  require(atoms >= 1, "quantizer.atoms must be at least 1");
  require(groups >= 1, "quantizer.groups must be at least 1");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "quantizer.decay must lie in [0, 1)");
  require(sync_period >= 1, "quantizer.sync_period must be at least 1");
  require(sync_rate < 0.0 || sync_rate <= 1.0, "quantizer.sync_rate must lie in [0, 1] (negative disables it)");
  require(channel_capacity >= 1, "pipeline.channel_capacity must be at least 1");
  require(!(threaded && mode == RunMode::AsyncQuantized), "async.threads supports raw buffers only");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U>
U parse_int(const std::string& key, const std::string& v) {
  U out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

#define DGL_SIZE(sec, name, member)                                                                      \
  Field {                                                                                                \
    sec, name, [](const ExperimentConfig& c) { return std::to_string(c.member); },                       \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                            \
          c.member = parse_int<decltype(c.member)>(k, v);                                                \
        }                                                                                                \
  }
#define DGL_REAL(sec, name, member)                                                                              \
  Field {                                                                                                        \
    sec, name, [](const ExperimentConfig& c) { return format_number(c.member); },                                \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_real(k, v); }     \
  }
#define DGL_BOOL(sec, name, member)                                                                              \
  Field {                                                                                                        \
    sec, name, [](const ExperimentConfig& c) { return bool_text(c.member); },                                    \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }     \
  }
#define DGL_TEXT(sec, name, member)                                                                              \
  Field {                                                                                                        \
    sec, name, [](const ExperimentConfig& c) { return c.member; },                                               \
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.member = v; }                      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"run", "mode", [](const ExperimentConfig& c) { return to_string(c.mode); },
            [](ExperimentConfig& c, const std::string&, const std::string& v) { c.mode = parse_run_mode(v); }},
      DGL_SIZE("run", "seed", seed),
      DGL_SIZE("run", "eval_every", eval_every),
      DGL_BOOL("run", "track_drift", track_drift),
      Field{"run", "precision",
            [](const ExperimentConfig& c) { return std::string(c.precision == Precision::Float64 ? "f64" : "f32"); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              if (v == "f32")
                c.precision = Precision::Float32;
              else if (v == "f64")
                c.precision = Precision::Float64;
              else
                throw ConfigError(k + ": expected f32 or f64, got '" + v + "'");
            }},
      DGL_SIZE("architecture", "width", width),
      DGL_SIZE("architecture", "modules", modules),
      Field{"architecture", "aux", [](const ExperimentConfig& c) { return to_string(c.aux); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              try {
                c.aux = parse_aux_kind(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(k + ": " + e.what());
              }
            }},
      DGL_SIZE("architecture", "head_width", head_width),
      DGL_REAL("optimizer", "lr", lr),
      DGL_REAL("optimizer", "momentum", momentum),
      DGL_REAL("optimizer", "weight_decay", weight_decay),
      DGL_REAL("optimizer", "decay_factor", decay_factor),
      DGL_SIZE("optimizer", "decay_period", decay_period),
      DGL_SIZE("optimizer", "epochs", epochs),
      DGL_SIZE("optimizer", "batch_size", batch_size),
      DGL_SIZE("delay", "slow_module", slow_module),
      DGL_REAL("delay", "slowdown", slowdown),
      Field{"delay", "pmf",
            [](const ExperimentConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.pmf.size(); ++i) s += (i ? "," : "") + format_number(c.pmf[i]);
              return s;
            },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.pmf.clear();
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) c.pmf.push_back(parse_real(k, trim(item)));
            }},
      DGL_SIZE("buffer", "capacity", buffer_capacity),
      Field{"buffer", "unit", [](const ExperimentConfig& c) { return std::string(c.buffer_in_samples ? "samples" : "batches"); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              if (v == "batches")
                c.buffer_in_samples = false;
              else if (v == "samples")
                c.buffer_in_samples = true;
              else
                throw ConfigError(k + ": expected batches or samples, got '" + v + "'");
            }},
      DGL_SIZE("quantizer", "atoms", atoms),
      DGL_SIZE("quantizer", "groups", groups),
      DGL_REAL("quantizer", "decay", ema_decay),
      DGL_REAL("quantizer", "epsilon", ema_epsilon),
      DGL_SIZE("quantizer", "dead_after", dead_after),
      DGL_SIZE("quantizer", "sync_period", sync_period),
      DGL_REAL("quantizer", "sync_rate", sync_rate),
      DGL_BOOL("quantizer", "ema_when_frozen", ema_when_frozen),
      DGL_BOOL("async", "threads", threaded),
      DGL_SIZE("async", "starvation_warning", starvation_warning),
      DGL_SIZE("pipeline", "channel_capacity", channel_capacity),
      Field{"dataset", "kind", [](const ExperimentConfig& c) { return to_string(c.dataset.kind); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              try {
                c.dataset.kind = parse_dataset_kind(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(k + ": " + e.what());
              }
            }},
      DGL_SIZE("dataset", "classes", dataset.classes),
      DGL_SIZE("dataset", "channels", dataset.channels),
      DGL_SIZE("dataset", "side", dataset.side),
      DGL_SIZE("dataset", "train_size", dataset.train_size),
      DGL_SIZE("dataset", "test_size", dataset.test_size),
      DGL_REAL("dataset", "noise", dataset.noise),
      DGL_REAL("dataset", "separation", dataset.separation),
      DGL_SIZE("dataset", "seed", dataset.seed),
      DGL_TEXT("dataset", "path", dataset.path),
      DGL_TEXT("dataset", "label_path", dataset.label_path),
      DGL_TEXT("dataset", "test_path", dataset.test_path),
      DGL_SIZE("dataset", "subset", dataset.subset),
  };
  return table;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const auto& f : fields()) known = known || f.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields())
      if (f.section == section && f.key == key) {
        f.set(c, where + section + "." + key, value);
        found = true;
        break;
      }
    if (!found) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(config) << '\n';
  }
  return out.str();
}

}  // namespace dgl
