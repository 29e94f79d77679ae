#include "gstm/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace gstm::config {

namespace {

struct Knob {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

double to_double(const std::string& s) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad number: " + s);
  return v;
}

long to_long(const std::string& s) {
  std::size_t pos = 0;
  long v = std::stol(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad integer: " + s);
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad boolean: " + s);
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<Knob> build_knobs() {
  std::vector<Knob> k;
  auto add_d = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = to_double(s);
                 },
                 [field](const RunConfig& c) {
                   return num(*field(const_cast<RunConfig&>(c)));
                 }});
  };
  auto add_i = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = static_cast<int>(to_long(s));
                 },
                 [field](const RunConfig& c) {
                   return std::to_string(*field(const_cast<RunConfig&>(c)));
                 }});
  };
  auto add_l = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = to_long(s);
                 },
                 [field](const RunConfig& c) {
                   return std::to_string(*field(const_cast<RunConfig&>(c)));
                 }});
  };
  auto add_u = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = static_cast<std::uint64_t>(std::stoull(s));
                 },
                 [field](const RunConfig& c) {
                   return std::to_string(*field(const_cast<RunConfig&>(c)));
                 }});
  };
  auto add_s = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = s;
                 },
                 [field](const RunConfig& c) {
                   return "\"" + *field(const_cast<RunConfig&>(c)) + "\"";
                 }});
  };
  auto add_b = [&](const std::string& key, auto field) {
    k.push_back({key,
                 [field](RunConfig& c, const std::string& s) {
                   *field(c) = to_bool(s);
                 },
                 [field](const RunConfig& c) {
                   return *field(const_cast<RunConfig&>(c)) ? "true" : "false";
                 }});
  };

  add_i("model.d", [](RunConfig& c) { return &c.model.d; });
  add_i("model.rff", [](RunConfig& c) { return &c.model.rff; });
  add_i("model.head_resolution",
        [](RunConfig& c) { return &c.model.head_resolution; });
  add_i("model.mixture_components",
        [](RunConfig& c) { return &c.model.mixture_components; });
  add_i("model.score_hidden",
        [](RunConfig& c) { return &c.model.score_hidden; });
  add_d("model.s_min", [](RunConfig& c) { return &c.model.s_min; });
  add_d("model.tau_u", [](RunConfig& c) { return &c.model.tau_u; });
  add_d("model.proto_momentum",
        [](RunConfig& c) { return &c.model.proto_momentum; });
  add_d("model.tau_c", [](RunConfig& c) { return &c.model.tau_c; });
  add_d("model.geofence_tau_km",
        [](RunConfig& c) { return &c.model.geofence_tau_km; });
  add_d("model.ot_epsilon", [](RunConfig& c) { return &c.model.ot_epsilon; });
  add_s("model.time_metric",
        [](RunConfig& c) { return &c.model.time_metric; });
  add_b("model.median_bias_correct",
        [](RunConfig& c) { return &c.model.median_bias_correct; });
  add_i("model.tda_window",
        [](RunConfig& c) { return &c.model.tokenizer.tda_window; });
  add_i("backbone.layers",
        [](RunConfig& c) { return &c.model.backbone.layers; });
  add_i("backbone.heads", [](RunConfig& c) { return &c.model.backbone.heads; });
  add_i("backbone.mlp", [](RunConfig& c) { return &c.model.backbone.mlp; });
  add_i("backbone.frozen_layers",
        [](RunConfig& c) { return &c.model.backbone.frozen_layers; });
  add_i("backbone.lora_rank",
        [](RunConfig& c) { return &c.model.backbone.lora_rank; });
  add_i("lcb.domains", [](RunConfig& c) { return &c.model.lcb.domains; });
  add_i("lcb.anchors",
        [](RunConfig& c) { return &c.model.lcb.anchors_per_domain; });

  add_l("train.steps", [](RunConfig& c) { return &c.train.steps; });
  add_i("train.batch", [](RunConfig& c) { return &c.train.batch; });
  add_i("train.min_prefix", [](RunConfig& c) { return &c.train.min_prefix; });
  add_i("train.max_prefix", [](RunConfig& c) { return &c.train.max_prefix; });
  add_i("train.ot_max_iters",
        [](RunConfig& c) { return &c.train.ot_max_iters; });
  add_i("train.log_every", [](RunConfig& c) { return &c.train.log_every; });
  add_d("train.warmup_frac", [](RunConfig& c) { return &c.train.warmup_frac; });
  add_d("train.lr", [](RunConfig& c) { return &c.train.optim.lr; });
  add_d("train.weight_decay",
        [](RunConfig& c) { return &c.train.optim.weight_decay; });
  add_d("train.clip_norm", [](RunConfig& c) { return &c.train.optim.clip_norm; });
  add_d("weights.loc", [](RunConfig& c) { return &c.train.weights.loc; });
  add_d("weights.ot", [](RunConfig& c) { return &c.train.weights.ot; });
  add_d("weights.time", [](RunConfig& c) { return &c.train.weights.time; });
  add_d("weights.user", [](RunConfig& c) { return &c.train.weights.user; });
  add_d("weights.nhp", [](RunConfig& c) { return &c.train.weights.nhp; });
  add_d("weights.ent", [](RunConfig& c) { return &c.train.weights.ent; });
  add_d("weights.reg", [](RunConfig& c) { return &c.train.weights.reg; });

  add_i("sim.users", [](RunConfig& c) { return &c.sim.n_users; });
  add_i("sim.pois", [](RunConfig& c) { return &c.sim.n_pois; });
  add_d("sim.rate_per_hour",
        [](RunConfig& c) { return &c.sim.base_rate_per_hour; });
  add_d("sim.bandwidth_km",
        [](RunConfig& c) { return &c.sim.spatial_bandwidth_km; });
  add_d("sim.stickiness",
        [](RunConfig& c) { return &c.sim.category_stickiness; });
  add_d("sim.horizon_s", [](RunConfig& c) { return &c.sim.horizon_s; });
  add_u("sim.seed", [](RunConfig& c) { return &c.sim.seed; });
  add_s("sim.baseline", [](RunConfig& c) { return &c.sim.baseline; });
  add_d("sim.self_excite_a",
        [](RunConfig& c) { return &c.sim.self_excite_a; });
  add_d("sim.user_rate_spread",
        [](RunConfig& c) { return &c.sim.user_rate_spread; });
  add_d("sim.home_attraction_km",
        [](RunConfig& c) { return &c.sim.home_attraction_km; });

  add_i("eval.beam_width", [](RunConfig& c) { return &c.eval.beam_width; });
  add_d("eval.geofence_tau_km",
        [](RunConfig& c) { return &c.eval.geofence_tau_km; });
  add_i("eval.min_prefix", [](RunConfig& c) { return &c.eval.min_prefix; });
  add_i("eval.max_prefix", [](RunConfig& c) { return &c.eval.max_prefix; });
  add_i("eval.tp_samples", [](RunConfig& c) { return &c.eval.tp_samples; });
  add_i("eval.tp_steps", [](RunConfig& c) { return &c.eval.tp_steps; });
  add_s("eval.tui_pooling", [](RunConfig& c) { return &c.eval.tui_pooling; });

  add_u("seed", [](RunConfig& c) { return &c.seed; });
  add_s("out_dir", [](RunConfig& c) { return &c.out_dir; });

  std::sort(k.begin(), k.end(),
            [](const Knob& a, const Knob& b) { return a.key < b.key; });
  return k;
}

const std::vector<Knob>& knobs() {
  static const std::vector<Knob> k = build_knobs();
  return k;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  for (const auto& k : knobs()) {
    if (k.key == key) {
      k.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("unknown config key: " + key);
}

std::string RunConfig::json() const {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (const auto& k : knobs()) {
    if (!first) os << ",";
    first = false;
    os << "\"" << k.key << "\":" << k.get(*this);
  }
  os << "}";
  return os.str();
}

std::uint64_t RunConfig::hash() const { return train::fnv1a(json()); }

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    auto strip = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key = value");
    }
    cfg.apply(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kv) {
  for (const auto& entry : kv) {
    auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("override must be key=value: " + entry);
    }
    cfg.apply(entry.substr(0, eq), entry.substr(eq + 1));
  }
}

void apply_paper_hparams(RunConfig& cfg) {
  cfg.train.optim.lr = 5e-5;
  cfg.train.batch = 64;
  cfg.train.optim.clip_norm = 1.0;
}

}  // namespace gstm::config
