#include "decaps/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace decaps {

namespace {

std::string fmt_double(double v) {
  // Shortest representation that round-trips.
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  for (int prec = 1; prec <= 16; ++prec) {
    char probe[32];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    std::sscanf(probe, "%lf", &back);
    if (back == v) return probe;
  }
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" +
                      v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

ConfigKey int_key(const std::string& key, int RunConfig::* field) {
  return {key,
          [field](const RunConfig& c) { return std::to_string(c.*field); },
          [field, key](RunConfig& c, const std::string& v) { c.*field = parse_int(key, v); }};
}

ConfigKey double_key(const std::string& key, double RunConfig::* field) {
  return {key,
          [field](const RunConfig& c) { return fmt_double(c.*field); },
          [field, key](RunConfig& c, const std::string& v) { c.*field = parse_double(key, v); }};
}

ConfigKey bool_key(const std::string& key, bool RunConfig::* field) {
  return {key,
          [field](const RunConfig& c) { return c.*field ? "true" : "false"; },
          [field, key](RunConfig& c, const std::string& v) { c.*field = parse_bool(key, v); }};
}

ConfigKey string_key(const std::string& key, std::string RunConfig::* field) {
  return {key,
          [field](const RunConfig& c) { return c.*field; },
          [field](RunConfig& c, const std::string& v) { c.*field = v; }};
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(int_key("model.heads", &RunConfig::model_heads));
    k.push_back(int_key("model.d_l", &RunConfig::model_d_l));
    k.push_back(int_key("model.d_out", &RunConfig::model_d_out));
    k.push_back(int_key("model.n_iter", &RunConfig::model_n_iter));
    k.push_back(bool_key("model.coord_add", &RunConfig::model_coord_add));
    k.push_back(string_key("model.routing", &RunConfig::model_routing));
    k.push_back(int_key("model.input", &RunConfig::model_input));
    k.push_back(int_key("model.classes", &RunConfig::model_classes));
    k.push_back(double_key("peekaboo.theta_c", &RunConfig::peekaboo_theta_c));
    k.push_back(double_key("peekaboo.theta_d", &RunConfig::peekaboo_theta_d));
    k.push_back(bool_key("peekaboo.crop", &RunConfig::peekaboo_crop));
    k.push_back(bool_key("peekaboo.drop", &RunConfig::peekaboo_drop));
    k.push_back(bool_key("peekaboo.distill", &RunConfig::peekaboo_distill));
    k.push_back(string_key("peekaboo.head_select", &RunConfig::peekaboo_head_select));
    k.push_back(double_key("loss.m_plus", &RunConfig::loss_m_plus));
    k.push_back(double_key("loss.m_minus", &RunConfig::loss_m_minus));
    k.push_back(double_key("loss.lambda", &RunConfig::loss_lambda));
    k.push_back(double_key("loss.har_weight", &RunConfig::loss_har_weight));
    k.push_back(double_key("loss.gamma", &RunConfig::loss_gamma));
    k.push_back(double_key("optim.beta1", &RunConfig::optim_beta1));
    k.push_back(double_key("optim.beta2", &RunConfig::optim_beta2));
    k.push_back(double_key("optim.lr", &RunConfig::optim_lr));
    k.push_back(int_key("optim.epochs", &RunConfig::optim_epochs));
    k.push_back(int_key("optim.batch", &RunConfig::optim_batch));
    k.push_back(int_key("optim.threads", &RunConfig::optim_threads));
    k.push_back(string_key("data.manifest", &RunConfig::data_manifest));
    k.push_back({"seed",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
    k.push_back(string_key("out", &RunConfig::out_dir));
    return k;
  }();
  return keys;
}

void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const ConfigKey& k : config_keys()) {
    if (k.key == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) +
                        " is not 'key = value': " + stripped);
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    apply_config_value(cfg, key, value);
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_echo(const RunConfig& cfg) {
  std::ostringstream out;
  for (const ConfigKey& k : config_keys()) {
    out << k.key << " = " << k.get(cfg) << '\n';
  }
  return out.str();
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.input_size = model_input;
  mc.heads = model_heads;
  mc.d_l = model_d_l;
  mc.d_out = model_d_out;
  mc.classes = model_classes;
  mc.n_iter = model_n_iter;
  mc.coord_add = model_coord_add;
  if (model_routing == "idr") {
    mc.routing = RoutingMode::kInverted;
  } else if (model_routing == "baseline") {
    mc.routing = RoutingMode::kBottomUp;
  } else {
    throw ConfigError("config: model.routing must be idr or baseline, got '" +
                      model_routing + "'");
  }
  mc.channels[3] = model_heads * model_d_l;
  return mc;
}

PeekabooConfig RunConfig::peekaboo_config() const {
  PeekabooConfig pc;
  pc.theta_c = peekaboo_theta_c;
  pc.theta_d = peekaboo_theta_d;
  pc.crop = peekaboo_crop;
  pc.drop = peekaboo_drop;
  pc.distill = peekaboo_distill;
  if (peekaboo_head_select == "random") {
    pc.head_select = HeadSelect::kRandom;
  } else if (peekaboo_head_select == "average") {
    pc.head_select = HeadSelect::kAverage;
  } else {
    throw ConfigError("config: peekaboo.head_select must be random or average");
  }
  return pc;
}

LossConfig RunConfig::loss_config() const {
  LossConfig lc;
  lc.m_plus = loss_m_plus;
  lc.m_minus = loss_m_minus;
  lc.lambda = loss_lambda;
  lc.har_weight = loss_har_weight;
  lc.gamma = loss_gamma;
  return lc;
}

void RunConfig::validate() const {
  model_config().validate();
  if (peekaboo_theta_c < 0.0 || peekaboo_theta_c > 1.0 || peekaboo_theta_d < 0.0 ||
      peekaboo_theta_d > 1.0) {
    throw ConfigError("config: peekaboo thresholds must lie in [0,1]");
  }
  peekaboo_config();
  if (optim_epochs < 0 || optim_batch < 1) {
    throw ConfigError("config: optim.epochs must be >= 0 and optim.batch >= 1");
  }
  if (optim_lr <= 0.0) throw ConfigError("config: optim.lr must be positive");
}

}  // namespace decaps
