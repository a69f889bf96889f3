#include "mhkd/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mhkd/errors.hpp"

namespace mhkd {

namespace pt = boost::property_tree;

std::string to_string(DataSource source) {
  switch (source) {
    case DataSource::kSynth: return "synth";
    case DataSource::kCifar10: return "cifar10";
    case DataSource::kCifar100: return "cifar100";
  }
  return "?";
}

TaskSpec ExperimentConfig::task() const {
  TaskSpec t;
  switch (data.source) {
    case DataSource::kSynth: t.num_classes = data.synth.num_classes; break;
    case DataSource::kCifar10: t.num_classes = 10; break;
    case DataSource::kCifar100: t.num_classes = 100; break;
  }
  return t;
}

namespace {

// Architecture constants that are not configurable; the manifest records them
// and a config may restate them, but only with these values.
const std::map<std::string, std::string>& fixed_constants() {
  static const std::map<std::string, std::string> k = {
      {"bn_momentum", "0.1"},       {"bn_epsilon", "0.00001"},     {"conv_kernel", "3"},
      {"conv_padding", "1"},        {"pool", "max 2x2 stride 2"}, {"head_conv_stride", "2"},
      {"init", "he_normal"},        {"tap_point", "unit end, after pooling"},
  };
  return k;
}

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::set<std::string> net = {"network", "widths", "convs_per_unit"};
  static const std::set<std::string> optim = {"lr",       "momentum", "weight_decay", "lr_milestones",
                                              "lr_gamma", "epochs",   "batch_size"};
  static const std::map<std::string, std::set<std::string>> s = {
      {"experiment", {"name", "seeds", "output_dir", "ablation", "eval_batch_size"}},
      {"data",
       {"source", "dir", "train_subset", "test_subset", "synth_classes", "synth_train_per_class",
        "synth_test_per_class", "synth_difficulty", "synth_seed"}},
      {"teacher", net},
      {"student", net},
      {"distill", {"temperature", "alpha", "beta", "head_units", "kd_alpha"}},
      {"head", {"num_conv", "num_fc", "conv_channels", "kernel", "fc_hidden"}},
      {"optim", optim},
      {"teacher_optim", optim},
      {"augment", {"enabled", "pad", "crop", "hflip_prob"}},
      {"fixed", [] {
         std::set<std::string> keys;
         for (const auto& [k, v] : fixed_constants()) keys.insert(k);
         return keys;
       }()},
  };
  return s;
}

std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

// Line numbers of section headers and keys, for diagnostics.
struct LineIndex {
  std::map<std::string, int> sections;
  std::map<std::pair<std::string, std::string>, int> keys;

  explicit LineIndex(const std::string& text) {
    std::istringstream is(text);
    std::string line, section;
    for (int n = 1; std::getline(is, line); ++n) {
      line = trim(line);
      if (line.empty() || line[0] == ';') continue;
      if (line.front() == '[' && line.back() == ']') {
        section = trim(line.substr(1, line.size() - 2));
        sections.emplace(section, n);
      } else if (auto eq = line.find('='); eq != std::string::npos) {
        keys.emplace(std::make_pair(section, trim(line.substr(0, eq))), n);
      }
    }
  }
};

class Reader {
 public:
  Reader(const std::string& text, std::string origin) : origin_(std::move(origin)), lines_(text) {
    std::istringstream is(text);
    try {
      pt::read_ini(is, tree_);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError(origin_ + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    // Empty sections never reach the tree.
    for (const auto& [section, line] : lines_.sections)
      if (!schema().count(section)) fail_at(line, "", section, "unknown section");
    for (const auto& [section, body] : tree_) {
      auto it = schema().find(section);
      if (!body.data().empty()) fail_at(line_of("", section), "", section, "key outside any section");
      if (it == schema().end()) fail_at(line_of(section), "", section, "unknown section");
      for (const auto& [key, value] : body) {
        if (!value.empty()) fail_at(line_of(section, key), section, key, "nested keys are not allowed");
        if (!it->second.count(key)) fail_at(line_of(section, key), section, key, "unknown key");
      }
    }
  }

  bool has(const std::string& section, const std::string& key) const {
    return tree_.get_child_optional(pt::ptree::path_type(section + "/" + key, '/')).has_value();
  }

  std::string raw(const std::string& section, const std::string& key) const {
    return trim(tree_.get<std::string>(pt::ptree::path_type(section + "/" + key, '/')));
  }

  std::string required(const std::string& section, const std::string& key) const {
    if (!has(section, key))
      throw ConfigError(origin_ + ": [" + section + "] " + key + ": required field is missing");
    auto v = raw(section, key);
    if (v.empty()) fail(section, key, "required field is empty");
    return v;
  }

  template <typename Fn>
  void get(const std::string& section, const std::string& key, Fn&& assign) const {
    if (!has(section, key)) return;
    auto v = raw(section, key);
    try {
      assign(v);
    } catch (const ConfigError& e) {
      fail(section, key, e.what());
    }
  }

  [[noreturn]] void fail(const std::string& section, const std::string& key,
                         const std::string& what) const {
    fail_at(line_of(section, key), section, key, what);
  }

  // Cross-field checks: attributed to the section header.
  template <typename Fn>
  void check(const std::string& section, Fn&& body) const {
    try {
      body();
    } catch (const std::exception& e) {
      fail_at(line_of(section), section, "", e.what());
    }
  }

 private:
  int line_of(const std::string& section, const std::string& key = "") const {
    if (!key.empty()) {
      auto it = lines_.keys.find({section, key});
      if (it != lines_.keys.end()) return it->second;
    }
    auto it = lines_.sections.find(section);
    return it == lines_.sections.end() ? 0 : it->second;
  }

  [[noreturn]] void fail_at(int line, const std::string& section, const std::string& key,
                            const std::string& what) const {
    std::string where = origin_ + (line > 0 ? ":" + std::to_string(line) : "") + ": ";
    std::string name = section.empty() ? key : "[" + section + "]" + (key.empty() ? "" : " " + key);
    throw ConfigError(where + name + ": " + what);
  }

  std::string origin_;
  LineIndex lines_;
  pt::ptree tree_;
};

template <typename N>
N parse_number(const std::string& s) {
  N value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError("'" + s + "' is not a valid number");
  return value;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("'" + s + "' is not a boolean (true/false)");
}

template <typename N>
std::vector<N> parse_list(const std::string& s) {
  std::vector<N> out;
  if (trim(s).empty()) return out;
  for (const auto& item : split(s, ',')) out.push_back(parse_number<N>(item));
  return out;
}

// Shortest round-trip text, positional notation unless that gets long.
std::string fmt(double v) {
  char buf[400];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
  if (ec == std::errc() && ptr - buf <= 12) return std::string(buf, ptr);
  auto [p2, ec2] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p2);
}

template <typename N>
std::string join(const std::vector<N>& v, const char* sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<N>) out += fmt(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

void read_network(const Reader& r, const std::string& section, NetworkChoice& net) {
  net.network = r.required(section, "network");
  r.get(section, "widths", [&](const std::string& v) { net.widths = parse_list<int>(v); });
  r.get(section, "convs_per_unit",
        [&](const std::string& v) { net.convs_per_unit = parse_number<int>(v); });
  if (net.network == "plain") {
    if (net.widths.empty()) r.fail(section, "widths", "required when network = plain");
    r.check(section, [&] {
      if (net.convs_per_unit < 1) throw ConfigError("convs_per_unit must be >= 1");
      for (int w : net.widths)
        if (w < 1) throw ConfigError("widths must be positive");
      net.spec = plain_cnn_spec(section == "teacher" ? "plain-teacher" : "plain-student",
                                net.widths, net.convs_per_unit);
    });
  } else {
    try {
      net.spec = preset_network(net.network);
    } catch (const ConfigError& e) {
      r.fail(section, "network", e.what());
    }
    net.widths.clear();
    for (int u = 1; u <= static_cast<int>(net.spec.units.size()); ++u)
      net.widths.push_back(net.spec.unit_channels(u));
    net.convs_per_unit = static_cast<int>(net.spec.units.front().layers.size());
  }
}

void read_optim(const Reader& r, const std::string& section, OptimConfig& o) {
  r.get(section, "lr", [&](const std::string& v) { o.lr = parse_number<double>(v); });
  r.get(section, "momentum", [&](const std::string& v) { o.momentum = parse_number<double>(v); });
  r.get(section, "weight_decay",
        [&](const std::string& v) { o.weight_decay = parse_number<double>(v); });
  r.get(section, "lr_milestones",
        [&](const std::string& v) { o.lr_milestones = parse_list<int>(v); });
  r.get(section, "lr_gamma", [&](const std::string& v) { o.lr_gamma = parse_number<double>(v); });
  r.get(section, "epochs", [&](const std::string& v) { o.epochs = parse_number<int>(v); });
  r.get(section, "batch_size", [&](const std::string& v) { o.batch_size = parse_number<int>(v); });
}

std::vector<std::vector<int>> parse_ablation(const std::string& s) {
  std::vector<std::vector<int>> out;
  for (const auto& group : split(s, '|')) {
    if (group.empty()) throw ConfigError("empty head-unit group");
    out.push_back(parse_list<int>(group));
  }
  return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  Reader r(text, origin);
  ExperimentConfig c;

  c.name = r.required("experiment", "name");
  r.get("experiment", "seeds", [&](const std::string& v) {
    c.seeds = parse_list<std::uint64_t>(v);
    if (c.seeds.empty()) throw ConfigError("at least one seed is required");
    if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
      throw ConfigError("seeds must be distinct");
  });
  r.get("experiment", "output_dir", [&](const std::string& v) { c.output_dir = v; });
  if (c.output_dir.empty()) c.output_dir = "runs/" + c.name;
  r.get("experiment", "ablation", [&](const std::string& v) {
    if (!v.empty()) c.ablation = parse_ablation(v);
  });
  r.get("experiment", "eval_batch_size", [&](const std::string& v) {
    c.eval_batch_size = parse_number<int>(v);
    if (c.eval_batch_size < 1) throw ConfigError("must be >= 1");
  });

  auto source = r.required("data", "source");
  if (source == "synth") c.data.source = DataSource::kSynth;
  else if (source == "cifar10") c.data.source = DataSource::kCifar10;
  else if (source == "cifar100") c.data.source = DataSource::kCifar100;
  else r.fail("data", "source", "unknown source '" + source + "' (synth|cifar10|cifar100)");
  r.get("data", "dir", [&](const std::string& v) { c.data.dir = v; });
  r.get("data", "train_subset",
        [&](const std::string& v) { c.data.train_subset = parse_number<std::size_t>(v); });
  r.get("data", "test_subset",
        [&](const std::string& v) { c.data.test_subset = parse_number<std::size_t>(v); });
  auto& sy = c.data.synth;
  r.get("data", "synth_classes", [&](const std::string& v) {
    sy.num_classes = parse_number<int>(v);
    if (sy.num_classes < 2) throw ConfigError("must be >= 2");
  });
  r.get("data", "synth_train_per_class", [&](const std::string& v) {
    sy.train_per_class = parse_number<int>(v);
    if (sy.train_per_class < 1) throw ConfigError("must be >= 1");
  });
  r.get("data", "synth_test_per_class", [&](const std::string& v) {
    sy.test_per_class = parse_number<int>(v);
    if (sy.test_per_class < 1) throw ConfigError("must be >= 1");
  });
  r.get("data", "synth_difficulty", [&](const std::string& v) {
    sy.difficulty = parse_number<double>(v);
    if (!(sy.difficulty >= 0.0 && sy.difficulty <= 1.0)) throw ConfigError("must lie in [0,1]");
  });
  r.get("data", "synth_seed",
        [&](const std::string& v) { sy.seed = parse_number<std::uint64_t>(v); });

  read_network(r, "teacher", c.teacher);
  read_network(r, "student", c.student);
  const TaskSpec task = c.task();
  r.check("teacher", [&] { validate(c.teacher.spec, task); });
  r.check("student", [&] { validate(c.student.spec, task); });
  const int units = static_cast<int>(
      std::min(c.teacher.spec.units.size(), c.student.spec.units.size()));

  auto& d = c.distill;
  r.get("distill", "temperature", [&](const std::string& v) { d.temperature = parse_number<double>(v); });
  r.get("distill", "alpha", [&](const std::string& v) { d.alpha = parse_number<double>(v); });
  r.get("distill", "beta", [&](const std::string& v) { d.beta = parse_number<double>(v); });
  r.get("distill", "head_units", [&](const std::string& v) { d.head_units = parse_list<int>(v); });
  r.get("distill", "kd_alpha", [&](const std::string& v) { d.kd_alpha = parse_number<double>(v); });
  r.check("distill", [&] { validate(d, units); });
  r.check("experiment", [&] {
    for (const auto& group : c.ablation) {
      DistillConfig probe = d;
      probe.head_units = group;
      validate(probe, units);
    }
  });

  auto& h = c.head;
  r.get("head", "num_conv", [&](const std::string& v) { h.num_conv = parse_number<int>(v); });
  r.get("head", "num_fc", [&](const std::string& v) { h.num_fc = parse_number<int>(v); });
  r.get("head", "conv_channels", [&](const std::string& v) { h.conv_channels = parse_number<int>(v); });
  r.get("head", "kernel", [&](const std::string& v) { h.kernel = parse_number<int>(v); });
  r.get("head", "fc_hidden", [&](const std::string& v) { h.fc_hidden = parse_number<int>(v); });
  h.num_classes = task.num_classes;
  r.check("head", [&] { validate(h, task); });

  read_optim(r, "optim", c.optim);
  r.check("optim", [&] { validate(c.optim); });
  c.teacher_optim = c.optim;
  read_optim(r, "teacher_optim", c.teacher_optim);
  r.check("teacher_optim", [&] { validate(c.teacher_optim); });

  auto& a = c.augment;
  r.get("augment", "enabled", [&](const std::string& v) { a.enabled = parse_bool(v); });
  r.get("augment", "pad", [&](const std::string& v) { a.policy.pad = parse_number<int>(v); });
  r.get("augment", "crop", [&](const std::string& v) { a.policy.crop = parse_number<int>(v); });
  r.get("augment", "hflip_prob",
        [&](const std::string& v) { a.policy.hflip_prob = parse_number<double>(v); });
  r.check("augment", [&] {
    if (a.policy.pad < 0) throw ConfigError("pad must be >= 0");
    if (a.policy.crop != task.height)
      throw ConfigError("crop must equal the input size " + std::to_string(task.height));
    if (!(a.policy.hflip_prob >= 0.0 && a.policy.hflip_prob <= 1.0))
      throw ConfigError("hflip_prob must lie in [0,1]");
  });

  for (const auto& [key, value] : fixed_constants())
    r.get("fixed", key, [&, value = value](const std::string& v) {
      if (v != value) throw ConfigError("fixed at '" + value + "', got '" + v + "'");
    });
  return c;
}

ExperimentConfig parse_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError(file.string() + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), file.string());
}

std::string manifest(const ExperimentConfig& c) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
  auto optim = [&](const std::string& section, const OptimConfig& o) {
    os << "\n[" << section << "]\n";
    kv("lr", fmt(o.lr));
    kv("momentum", fmt(o.momentum));
    kv("weight_decay", fmt(o.weight_decay));
    kv("lr_milestones", join(o.lr_milestones));
    kv("lr_gamma", fmt(o.lr_gamma));
    kv("epochs", std::to_string(o.epochs));
    kv("batch_size", std::to_string(o.batch_size));
  };
  auto network = [&](const std::string& section, const NetworkChoice& n) {
    os << "\n[" << section << "]\n";
    kv("network", n.network);
    kv("widths", join(n.widths));
    kv("convs_per_unit", std::to_string(n.convs_per_unit));
  };

  os << "; resolved configuration, every default explicit\n";
  os << "[experiment]\n";
  kv("name", c.name);
  kv("seeds", join(c.seeds));
  kv("output_dir", c.output_dir);
  std::vector<std::string> groups;
  for (const auto& g : c.ablation) groups.push_back(join(g, ","));
  std::string ablation;
  for (std::size_t i = 0; i < groups.size(); ++i) ablation += (i ? " | " : "") + groups[i];
  kv("ablation", ablation);
  kv("eval_batch_size", std::to_string(c.eval_batch_size));

  os << "\n[data]\n";
  kv("source", to_string(c.data.source));
  kv("dir", c.data.dir);
  kv("train_subset", std::to_string(c.data.train_subset));
  kv("test_subset", std::to_string(c.data.test_subset));
  kv("synth_classes", std::to_string(c.data.synth.num_classes));
  kv("synth_train_per_class", std::to_string(c.data.synth.train_per_class));
  kv("synth_test_per_class", std::to_string(c.data.synth.test_per_class));
  kv("synth_difficulty", fmt(c.data.synth.difficulty));
  kv("synth_seed", std::to_string(c.data.synth.seed));

  network("teacher", c.teacher);
  network("student", c.student);

  os << "\n[distill]\n";
  kv("temperature", fmt(c.distill.temperature));
  kv("alpha", fmt(c.distill.alpha));
  kv("beta", fmt(c.distill.beta));
  kv("head_units", join(c.distill.head_units));
  kv("kd_alpha", fmt(c.distill.kd_alpha));

  os << "\n[head]\n";
  kv("num_conv", std::to_string(c.head.num_conv));
  kv("num_fc", std::to_string(c.head.num_fc));
  kv("conv_channels", std::to_string(c.head.conv_channels));
  kv("kernel", std::to_string(c.head.kernel));
  kv("fc_hidden", std::to_string(c.head.fc_hidden));

  optim("optim", c.optim);
  optim("teacher_optim", c.teacher_optim);

  os << "\n[augment]\n";
  kv("enabled", c.augment.enabled ? "true" : "false");
  kv("pad", std::to_string(c.augment.policy.pad));
  kv("crop", std::to_string(c.augment.policy.crop));
  kv("hflip_prob", fmt(c.augment.policy.hflip_prob));

  os << "\n[fixed]\n";
  for (const auto& [k, v] : fixed_constants()) kv(k, v);
  return os.str();
}

std::filesystem::path data_root(const DataConfig& cfg) {
  if (!cfg.dir.empty()) return cfg.dir;
  if (const char* env = std::getenv("MHKD_DATA_DIR"); env && *env) return env;
  return {};
}

DatasetPair load_dataset(const DataConfig& cfg) {
  DatasetPair pair;
  if (cfg.source == DataSource::kSynth) {
    pair = synth_dataset(cfg.synth);
  } else {
    auto root = data_root(cfg);
    if (root.empty())
      throw DataError("data source " + to_string(cfg.source) +
                      " needs [data] dir or the MHKD_DATA_DIR environment variable");
    pair = load_cifar(root, cfg.source == DataSource::kCifar10 ? CifarVariant::kCifar10
                                                                : CifarVariant::kCifar100);
  }
  if (cfg.train_subset > 0 && cfg.train_subset < pair.train.size()) {
    pair.train = take_balanced(pair.train, cfg.train_subset);
  }
  if (cfg.test_subset > 0 && cfg.test_subset < pair.test.size()) {
    Normalization shared = pair.train.norm;
    pair.test = take_balanced(pair.test, cfg.test_subset);
    pair.test.norm = shared;
  }
  pair.test.norm = pair.train.norm;
  return pair;
}

}  // namespace mhkd
