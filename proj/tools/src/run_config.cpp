#include "fedcrfd_cli/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fedcrfd/errors.hpp"

namespace fedcrfd::cli {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string unquote(std::string_view v) {
  v = trim(v);
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) {
    return std::string(v.substr(1, v.size() - 2));
  }
  return std::string(v);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError(std::string(key) + ": expected " + expected + ", got '" + std::string(value) + "'");
}

std::uint64_t as_u64(std::string_view key, std::string_view raw) {
  const std::string v = unquote(raw);
  std::uint64_t out = 0;
  int base = 10;
  std::string_view digits = v;
  if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
    base = 16;
    digits.remove_prefix(2);
  }
  const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), out, base);
  if (digits.empty() || res.ec != std::errc() || res.ptr != digits.data() + digits.size()) {
    bad(key, raw, "a non-negative integer");
  }
  return out;
}

std::size_t as_size(std::string_view key, std::string_view raw) { return static_cast<std::size_t>(as_u64(key, raw)); }

double as_double(std::string_view key, std::string_view raw) {
  const std::string v = unquote(raw);
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad(key, raw, "a finite number");
  }
  return out;
}

bool as_bool(std::string_view key, std::string_view raw) {
  const std::string v = unquote(raw);
  if (v == "true") return true;
  if (v == "false") return false;
  bad(key, raw, "true or false");
}

std::vector<std::string> as_list(std::string_view key, std::string_view raw) {
  std::string_view v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') bad(key, raw, "a [..] list");
  v = trim(v.substr(1, v.size() - 2));
  std::vector<std::string> items;
  if (v.empty()) return items;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = v.find(',', start);
    const std::string_view item = trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
    if (item.empty()) bad(key, raw, "a list without empty items");
    items.push_back(unquote(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return items;
}

template <class T, class F>
std::vector<T> map_list(std::string_view key, std::string_view raw, F f) {
  std::vector<T> out;
  for (const std::string& item : as_list(key, raw)) out.push_back(f(key, item));
  return out;
}

template <class F>
auto wrap(std::string_view key, std::string_view raw, F f) {
  try {
    return f(unquote(raw));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"federation.clients", [](RunConfig& c, auto k, auto v) { c.clients = as_size(k, v); }},
      {"federation.rounds", [](RunConfig& c, auto k, auto v) { c.federation.rounds = as_size(k, v); }},
      {"federation.local_epochs", [](RunConfig& c, auto k, auto v) { c.federation.local_epochs = as_size(k, v); }},
      {"federation.learning_rate", [](RunConfig& c, auto k, auto v) { c.federation.learning_rate = as_double(k, v); }},
      {"federation.batch_size", [](RunConfig& c, auto k, auto v) { c.federation.batch_size = as_size(k, v); }},
      {"federation.mu1", [](RunConfig& c, auto k, auto v) { c.federation.mu1 = as_double(k, v); }},
      {"federation.mu2", [](RunConfig& c, auto k, auto v) { c.federation.mu2 = as_double(k, v); }},
      {"federation.mu3", [](RunConfig& c, auto k, auto v) { c.federation.mu3 = as_double(k, v); }},
      {"federation.measure",
       [](RunConfig& c, auto k, auto v) { c.federation.measure = wrap(k, v, [](const std::string& s) { return parse_distance(s); }); }},
      {"federation.cap", [](RunConfig& c, auto k, auto v) { c.federation.cap = as_double(k, v); }},
      {"federation.use_fusion", [](RunConfig& c, auto k, auto v) { c.federation.use_fusion = as_bool(k, v); }},
      {"federation.enable_cross", [](RunConfig& c, auto k, auto v) { c.federation.enable_cross = as_bool(k, v); }},
      {"federation.joint_cross_gradient",
       [](RunConfig& c, auto k, auto v) { c.federation.joint_cross_gradient = as_bool(k, v); }},
      {"federation.mode",
       [](RunConfig& c, auto k, auto v) { c.federation.mode = wrap(k, v, [](const std::string& s) { return parse_execution_mode(s); }); }},
      {"federation.barrier_timeout_ms",
       [](RunConfig& c, auto k, auto v) { c.federation.barrier_timeout = std::chrono::milliseconds(as_u64(k, v)); }},
      {"data.image_size", [](RunConfig& c, auto k, auto v) { c.data.image_size = as_size(k, v); }},
      {"data.train_patients", [](RunConfig& c, auto k, auto v) { c.data.train_patients = as_size(k, v); }},
      {"data.test_patients", [](RunConfig& c, auto k, auto v) { c.data.test_patients = as_size(k, v); }},
      {"data.slices", [](RunConfig& c, auto k, auto v) { c.data.slices = as_size(k, v); }},
      {"data.modalities", [](RunConfig& c, auto k, auto v) { c.data.num_modalities = as_size(k, v); }},
      {"data.client_modalities",
       [](RunConfig& c, auto k, auto v) {
         c.data.client_modalities = map_list<std::size_t>(k, v, as_size);
         c.modalities_set = true;
       }},
      {"data.masks",
       [](RunConfig& c, auto k, auto v) {
         c.data.masks = map_list<MaskSpec>(k, v, [](std::string_view key, const std::string& s) {
           return wrap(key, s, [](const std::string& t) { return parse_mask_spec(t); });
         });
         c.masks_set = true;
       }},
      {"data.center_fraction", [](RunConfig& c, auto k, auto v) { c.data.center_fraction = as_double(k, v); }},
      {"data.beta", [](RunConfig& c, auto k, auto v) { c.data.beta = as_double(k, v); }},
      {"data.salt", [](RunConfig& c, auto k, auto v) { c.data.salt = as_u64(k, v); }},
      {"model.channels",
       [](RunConfig& c, auto k, auto v) { c.federation.arch.channels = map_list<std::size_t>(k, v, as_size); }},
      {"model.classifier_hidden", [](RunConfig& c, auto k, auto v) { c.federation.arch.classifier_hidden = as_size(k, v); }},
      {"run.seed", [](RunConfig& c, auto k, auto v) { c.seed = as_u64(k, v); }},
      {"run.seeds", [](RunConfig& c, auto k, auto v) { c.seeds = map_list<std::uint64_t>(k, v, as_u64); }},
      {"run.out", [](RunConfig& c, auto, auto v) { c.out = unquote(v); }},
      {"run.checkpoint_every", [](RunConfig& c, auto k, auto v) { c.checkpoint_every = as_size(k, v); }},
      {"run.parallel_trials", [](RunConfig& c, auto k, auto v) { c.parallel_trials = as_size(k, v); }},
  };
  return table;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T, class F>
std::string list(const std::vector<T>& items, F f) {
  std::string s = "[";
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) s += ", ";
    s += f(items[i]);
  }
  return s + "]";
}

}  // namespace

const std::vector<MaskSpec>& default_mask_cycle() {
  static const std::vector<MaskSpec> cycle{{MaskKind::kUniform1d, 5.0},   {MaskKind::kRandom2d, 3.0},
                                           {MaskKind::kCartesian1d, 4.0}, {MaskKind::kUniform1d, 3.0},
                                           {MaskKind::kRandom2d, 6.0},    {MaskKind::kRadial2d, 4.0}};
  return cycle;
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(config, key, value);
}

void RunConfig::finalize() {
  if (clients) {
    const std::size_t k = *clients;
    if (k == 0) throw ConfigError("federation.clients must be >= 1");
    if (!modalities_set) {
      data.client_modalities.clear();
      for (std::size_t i = 0; i < k; ++i) data.client_modalities.push_back(i % data.num_modalities);
    }
    if (!masks_set) {
      data.masks.clear();
      for (std::size_t i = 0; i < k; ++i) data.masks.push_back(default_mask_cycle()[i % default_mask_cycle().size()]);
    }
    if (data.client_modalities.size() != k || data.masks.size() != k) {
      throw ConfigError("federation.clients = " + std::to_string(k) + " disagrees with data.client_modalities (" +
                        std::to_string(data.client_modalities.size()) + ") or data.masks (" +
                        std::to_string(data.masks.size()) + ")");
    }
  }
  if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
  if (parallel_trials == 0) throw ConfigError("run.parallel_trials must be >= 1");
  data.seed = seed;
  federation.seed = seed;
  federation.arch.image_size = data.image_size;
  federation.arch.num_modalities = data.num_modalities;
  data.validate();
  federation.validate();
  for (const MaskSpec& m : data.masks) {
    // Builds the mask once so infeasible specs fail at config time.
    make_mask(m.kind, m.acceleration, data.image_size, data.center_fraction, 0);
  }
}

RunConfig parse_config(std::string_view text, const std::string& origin) {
  RunConfig config;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "federation" && section != "data" && section != "model" && section != "run") {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(where + "key '" + std::string(key) + "' outside a section");
    try {
      apply_setting(config, section + "." + std::string(key), value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string config_text(const RunConfig& c) {
  const FederationConfig& f = c.federation;
  const DataConfig& d = c.data;
  std::ostringstream o;
  const auto u = [](auto v) { return std::to_string(v); };
  o << "[federation]\n"
    << "clients = " << d.clients() << '\n'
    << "rounds = " << f.rounds << '\n'
    << "local_epochs = " << f.local_epochs << '\n'
    << "learning_rate = " << num(f.learning_rate) << '\n'
    << "batch_size = " << f.batch_size << '\n'
    << "mu1 = " << num(f.mu1) << '\n'
    << "mu2 = " << num(f.mu2) << '\n'
    << "mu3 = " << num(f.mu3) << '\n'
    << "measure = \"" << distance_name(f.measure) << "\"\n"
    << "cap = " << num(f.cap) << '\n'
    << "use_fusion = " << (f.use_fusion ? "true" : "false") << '\n'
    << "enable_cross = " << (f.enable_cross ? "true" : "false") << '\n'
    << "joint_cross_gradient = " << (f.joint_cross_gradient ? "true" : "false") << '\n'
    << "mode = \"" << execution_mode_name(f.mode) << "\"\n"
    << "barrier_timeout_ms = " << f.barrier_timeout.count() << "\n\n"
    << "[data]\n"
    << "image_size = " << d.image_size << '\n'
    << "train_patients = " << d.train_patients << '\n'
    << "test_patients = " << d.test_patients << '\n'
    << "slices = " << d.slices << '\n'
    << "modalities = " << d.num_modalities << '\n'
    << "client_modalities = " << list(d.client_modalities, u) << '\n'
    << "masks = " << list(d.masks, [](const MaskSpec& m) { return "\"" + mask_spec_str(m) + "\""; }) << '\n'
    << "center_fraction = " << num(d.center_fraction) << '\n'
    << "beta = " << num(d.beta) << '\n'
    << "salt = " << d.salt << "\n\n"
    << "[model]\n"
    << "channels = " << list(f.arch.channels, u) << '\n'
    << "classifier_hidden = " << f.arch.classifier_hidden << "\n\n"
    << "[run]\n"
    << "seed = " << c.seed << '\n'
    << "seeds = " << list(c.seeds, u) << '\n'
    << "out = \"" << c.out.string() << "\"\n"
    << "checkpoint_every = " << c.checkpoint_every << '\n'
    << "parallel_trials = " << c.parallel_trials << '\n';
  return o.str();
}

}  // namespace fedcrfd::cli
