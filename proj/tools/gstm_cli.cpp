// Command-line driver: simulate / ingest / train / eval / ablate / gradcheck.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

#include "gstm/config.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

namespace fs = std::filesystem;
using namespace gstm;

namespace {

struct Args {
  std::string command;
  std::map<std::string, std::string> opts;
  std::vector<std::string> overrides;  // --set key=value
  bool paper_hparams = false;
};

const char* kUsage =
    "usage: gstm <command> [options]\n"
    "  simulate  --config F --out D\n"
    "  ingest    --in F --taxonomy F [--nmin 20] [--fmin 15] --out D\n"
    "  train     --data D [--config F] [--out D] [--set k=v ...]"
    " [--paper-hparams]\n"
    "  eval      --ckpt F --data D --task {lp,tui,itf} --config F"
    " [--few-shot FRAC] [--set k=v ...]\n"
    "  ablate    --ckpt F --data D --config F [--set k=v ...]\n"
    "  gradcheck [--config F] [--set k=v ...]\n";

Args parse_args(int argc, char** argv) {
  Args a;
  if (argc < 2) throw std::invalid_argument("missing command");
  a.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    std::string flag = argv[i];
    if (flag == "--paper-hparams") {
      a.paper_hparams = true;
      continue;
    }
    if (flag.rfind("--", 0) != 0) {
      throw std::invalid_argument("unexpected argument: " + flag);
    }
    if (i + 1 >= argc) throw std::invalid_argument("missing value for " + flag);
    std::string value = argv[++i];
    if (flag == "--set") {
      a.overrides.push_back(value);
    } else {
      a.opts[flag.substr(2)] = value;
    }
  }
  return a;
}

std::string need(const Args& a, const std::string& key) {
  auto it = a.opts.find(key);
  if (it == a.opts.end()) {
    throw std::invalid_argument("missing required --" + key);
  }
  return it->second;
}

std::string opt_or(const Args& a, const std::string& key,
                   const std::string& dflt) {
  auto it = a.opts.find(key);
  return it == a.opts.end() ? dflt : it->second;
}

config::RunConfig make_config(const Args& a) {
  config::RunConfig cfg;
  auto it = a.opts.find("config");
  if (it != a.opts.end()) cfg = config::load_config(it->second);
  if (a.paper_hparams) config::apply_paper_hparams(cfg);
  config::apply_overrides(cfg, a.overrides);
  return cfg;
}

data::Dataset load_data_dir(const std::string& dir) {
  auto tax = data::Taxonomy::load_tsv(dir + "/taxonomy.tsv");
  data::ParseReport rep;
  data::Dataset d = data::parse_checkins(dir + "/checkins.tsv", tax, &rep);
  for (const auto& [line, msg] : rep.line_errors) {
    std::cerr << "checkins.tsv:" << line << ": " << msg << "\n";
  }
  return d;
}

void write_data_dir(const data::Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  data::write_tsv(d, dir + "/checkins.tsv");
  data::write_taxonomy_tsv(d.taxonomy, dir + "/taxonomy.tsv");
  std::ofstream(dir + "/manifest.json") << data::manifest_json(d) << "\n";
}

int cmd_simulate(const Args& a) {
  config::RunConfig cfg = make_config(a);
  std::string out = opt_or(a, "out", cfg.out_dir);
  data::Dataset d = data::simulate_mtpp(cfg.sim);
  write_data_dir(d, out);
  std::cout << data::manifest_json(d) << "\n";
  return 0;
}

int cmd_ingest(const Args& a) {
  auto tax = data::Taxonomy::load_tsv(need(a, "taxonomy"));
  data::ParseReport rep;
  data::Dataset d = data::parse_checkins(need(a, "in"), tax, &rep);
  int nmin = std::stoi(opt_or(a, "nmin", "20"));
  int fmin = std::stoi(opt_or(a, "fmin", "15"));
  data::FilterStats stats;
  data::Dataset f = data::filter_dataset(
      d, nmin, fmin, -std::numeric_limits<double>::infinity(),
      std::numeric_limits<double>::infinity(), &stats);
  write_data_dir(f, need(a, "out"));
  std::cout << "{\"parsed\":" << rep.parsed
            << ",\"malformed\":" << rep.line_errors.size()
            << ",\"users\":" << stats.users << ",\"pois\":" << stats.pois
            << ",\"records\":" << stats.records
            << ",\"avg_seq_len\":" << stats.avg_seq_len
            << ",\"iterations\":" << stats.iterations << "}\n";
  return 0;
}

int cmd_train(const Args& a) {
  config::RunConfig cfg = make_config(a);
  std::string out = opt_or(a, "out", cfg.out_dir);
  fs::create_directories(out);
  data::Dataset d = load_data_dir(need(a, "data"));

  cfg.model.apply_width();
  model::Model m(cfg.model, d, cfg.seed);
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.metrics_path = out + "/metrics.jsonl";
  train::Trainer trainer(m, d, tc);
  trainer.run(tc.steps);

  train::save_checkpoint(out + "/checkpoint.bin", m.store(),
                         &trainer.optimizer(), cfg.json(), cfg.hash(),
                         trainer.rng_state());
  std::cout << "{\"checkpoint\":\"" << out << "/checkpoint.bin\""
            << ",\"steps\":" << tc.steps << ",\"config_hash\":" << cfg.hash()
            << "}\n";
  return 0;
}

// Restores the checkpoint into a freshly built model and verifies that the
// checkpoint was produced under the supplied configuration.
void restore_into(const Args& a, const config::RunConfig& cfg,
                  model::Model& m) {
  train::CheckpointInfo info =
      train::load_checkpoint(need(a, "ckpt"), m.store(), nullptr);
  if (info.config_hash != cfg.hash()) {
    throw std::runtime_error(
        "config hash mismatch: checkpoint " +
        std::to_string(info.config_hash) + " vs config " +
        std::to_string(cfg.hash()));
  }
}

int cmd_eval(const Args& a) {
  config::RunConfig cfg = make_config(a);
  std::string task = need(a, "task");
  if (task != "lp" && task != "tui" && task != "itf") {
    throw std::invalid_argument("unknown task: " + task);
  }
  data::Dataset d = load_data_dir(need(a, "data"));
  auto fs_it = a.opts.find("few-shot");
  data::Dataset eval_set = d;
  if (fs_it != a.opts.end()) {
    double frac = std::stod(fs_it->second);
    data::Dataset train_split;
    data::few_shot_split(d, frac, cfg.seed, &train_split, &eval_set);
  }
  cfg.model.apply_width();
  model::Model m(cfg.model, d, cfg.seed);
  restore_into(a, cfg, m);
  eval::EvalOptions opt = cfg.eval;
  opt.seed = cfg.seed;
  opt.config_hash = cfg.hash();
  eval::EvalReport rep;
  if (task == "lp") rep = eval::eval_lp(m, eval_set, opt);
  if (task == "tui") rep = eval::eval_tui(m, eval_set, opt);
  if (task == "itf") rep = eval::eval_itf(m, eval_set, opt);
  std::cout << eval::report_json(rep) << "\n";
  return 0;
}

int cmd_ablate(const Args& a) {
  config::RunConfig cfg = make_config(a);
  data::Dataset d = load_data_dir(need(a, "data"));
  cfg.model.apply_width();
  model::Model m(cfg.model, d, cfg.seed);
  restore_into(a, cfg, m);
  eval::EvalOptions opt = cfg.eval;
  opt.seed = cfg.seed;
  opt.config_hash = cfg.hash();
  std::vector<model::AblationFlags> grid(5);
  grid[1].disable_stce = true;
  grid[2].disable_ctm = true;
  grid[3].disable_lcb = true;
  grid[4].disable_backbone = true;
  for (const auto& run : eval::run_ablation(m, d, opt, grid)) {
    std::cout << "{\"variant\":\"" << run.flags.tag() << "\""
              << ",\"lp\":" << eval::report_json(run.lp)
              << ",\"tui\":" << eval::report_json(run.tui)
              << ",\"itf\":" << eval::report_json(run.itf) << "}\n";
  }
  return 0;
}

int cmd_gradcheck(const Args& a) {
  config::RunConfig cfg = make_config(a);
  // fixed 2-user / 4-POI toy corpus; small widths keep this under a minute
  auto tax = data::simulator_taxonomy();
  auto leaves = tax.leaves();
  data::Vocab users, pois;
  users.add_or_get("u0");
  users.add_or_get("u1");
  for (int i = 0; i < 4; ++i) pois.add_or_get("p" + std::to_string(i));
  std::vector<data::CheckInEvent> ev;
  auto mk = [&](int u, int p, double t, double dlat, double dlon) {
    data::CheckInEvent e;
    e.user = u;
    e.poi = p;
    e.t = t;
    e.g = {40.0 + dlat, -74.0 + dlon};
    e.category = leaves[p % leaves.size()];
    ev.push_back(e);
  };
  mk(0, 0, 0.0, 0.0, 0.0);
  mk(0, 1, 3600.0, 0.01, 0.02);
  mk(0, 2, 9000.0, 0.03, 0.0);
  mk(1, 3, 100.0, 0.05, 0.05);
  mk(1, 2, 7000.0, 0.03, 0.0);
  mk(1, 3, 15000.0, 0.05, 0.05);
  data::Dataset d = data::Dataset::from_events(ev, users, pois, tax);

  model::ModelConfig mc;
  mc.d = 8;
  mc.rff = 2;
  mc.tokenizer.d_type = 4;
  mc.tokenizer.d_poi = 6;
  mc.tokenizer.d_cat = 4;
  mc.tokenizer.d_cell = 4;
  mc.tokenizer.tda_window = 3;
  mc.lcb.domains = 2;
  mc.lcb.anchors_per_domain = 3;
  mc.lcb.hidden = 6;
  mc.lcb.temperatures = {0.5, 0.5};
  mc.backbone.layers = 1;
  mc.backbone.heads = 2;
  mc.backbone.mlp = 12;
  mc.backbone.frozen_layers = 0;
  mc.backbone.lora_rank = 0;
  mc.score_hidden = 6;
  model::Model m(mc, d, cfg.seed);

  std::vector<train::Example> batch(2);
  batch[0].prefix = {d.trajectories[0].events[0], d.trajectories[0].events[1]};
  batch[0].target = d.trajectories[0].events[2];
  batch[0].user = 0;
  batch[1].prefix = {d.trajectories[1].events[0], d.trajectories[1].events[1]};
  batch[1].target = d.trajectories[1].events[2];
  batch[1].user = 1;
  train::LossWeights w = cfg.train.weights;
  w.reg = 0.0;  // singular vectors enter as constants; see training notes
  auto loss_fn = [&]() {
    return train::total_loss(m, batch, w, {}, 17, nullptr, 40);
  };
  // central differences at two steps; parameter families disagree on the
  // best step, so accept the better of the two
  auto r5 = ad::finite_diff_check(loss_fn, m.store(), 1e-5, 1e-4);
  auto r6 = ad::finite_diff_check(loss_fn, m.store(), 1e-6, 1e-4);
  bool ok = true;
  for (std::size_t i = 0; i < r5.size(); ++i) {
    double err = std::min(r5[i].max_rel_err, r6[i].max_rel_err);
    bool pass = err <= 1e-4;
    ok = ok && pass;
    std::cout << (pass ? "pass " : "FAIL ") << r5[i].param << " rel_err=" << err
              << "\n";
  }
  if (!ok) throw train::NumericalError("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    Args a = parse_args(argc, argv);
    if (a.command == "simulate") return cmd_simulate(a);
    if (a.command == "ingest") return cmd_ingest(a);
    if (a.command == "train") return cmd_train(a);
    if (a.command == "eval") return cmd_eval(a);
    if (a.command == "ablate") return cmd_ablate(a);
    if (a.command == "gradcheck") return cmd_gradcheck(a);
    throw std::invalid_argument("unknown command: " + a.command);
  } catch (const train::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ad::DomainError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n" << kUsage;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
