// hails command-line entry point.
//
// Exit codes: 0 ok, 2 validation / input error, 3 numerical failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hails/hierarchy.hpp"
#include "hails/io.hpp"
#include "hails/log.hpp"
#include "hails/metrics.hpp"
#include "hails/parallel.hpp"
#include "hails/sparsity.hpp"
#include "hails/synth.hpp"
#include "hails/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

// Optional TrainConfig overrides shared by pretrain / train / classify.
struct Overrides {
  std::optional<double> gamma, lr, val_fraction, alpha, c, w_hat_init;
  std::optional<int> batch_size, max_epochs, pretrain_epochs, K, patience, hidden, horizon, window;
  std::optional<std::string> phi_mode, async_mode;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--gamma", gamma, "consistency loss weight");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--max-epochs", max_epochs);
    cmd->add_option("--pretrain-epochs", pretrain_epochs);
    cmd->add_option("--K", K, "base networks update every K batches");
    cmd->add_option("--patience", patience);
    cmd->add_option("--val-fraction", val_fraction);
    cmd->add_option("--hidden", hidden);
    cmd->add_option("--horizon", horizon);
    cmd->add_option("--window", window);
    cmd->add_option("--alpha", alpha, "dispersion test level");
    cmd->add_option("--c", c, "sigma refinement constant");
    cmd->add_option("--w-hat-init", w_hat_init);
    cmd->add_option("--phi-mode", phi_mode, "leaf_proportional | paper_uniform");
    cmd->add_option("--async-mode", async_mode, "accumulate | skip");
  }

  void apply(hails::TrainConfig& cfg) const {
    auto set = [](auto& dst, const auto& src) {
      if (src) dst = *src;
    };
    set(cfg.gamma, gamma);
    set(cfg.lr, lr);
    set(cfg.val_fraction, val_fraction);
    set(cfg.alpha, alpha);
    set(cfg.c, c);
    set(cfg.w_hat_init, w_hat_init);
    set(cfg.batch_size, batch_size);
    set(cfg.max_epochs, max_epochs);
    set(cfg.pretrain_epochs, pretrain_epochs);
    set(cfg.K, K);
    set(cfg.patience, patience);
    set(cfg.hidden, hidden);
    set(cfg.horizon, horizon);
    set(cfg.window, window);
    if (phi_mode) cfg.phi_mode = hails::parse_phi_mode(*phi_mode);
    if (async_mode) cfg.async_mode = hails::parse_async_mode(*async_mode);
  }
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Records one command run in <out>/manifest.json, keyed by command name.
class Manifest {
 public:
  Manifest(std::string command, const Globals& g) : command_(std::move(command)), g_(g) {
    rec_["command"] = command_;
    rec_["started_at"] = utc_now();
    rec_["seed"] = g.seed ? json(*g.seed) : json(nullptr);
    rec_["config"] = g.config.empty() ? json(nullptr) : json(g.config);
    rec_["threads"] = hails::worker_threads();
    if (!g.config.empty()) input("config", g.config);
  }

  void input(const std::string& role, const fs::path& p) { inputs_.emplace_back(role, p); }
  void output(const std::string& role, const fs::path& p) { outputs_.emplace_back(role, p); }
  void set(const std::string& key, json value) { rec_[key] = std::move(value); }

  void write() {
    json in = json::object(), out = json::object();
    std::vector<fs::path> paths;
    for (const auto& [role, p] : inputs_) {
      in[role] = {{"path", p.string()}, {"blob", hails::io::blob_hash(p)}};
      paths.push_back(p);
    }
    for (const auto& [role, p] : outputs_) {
      out[role] = {{"path", p.string()}, {"blob", hails::io::blob_hash(p)}};
    }
    rec_["inputs"] = in;
    rec_["input_hash"] = paths.empty() ? json(nullptr) : json(hails::io::content_hash(paths));
    rec_["outputs"] = out;
    rec_["finished_at"] = utc_now();

    const fs::path file = fs::path(g_.out) / "manifest.json";
    json all = json::object();
    if (fs::exists(file)) {
      try {
        all = json::parse(hails::io::read_text(file));
      } catch (const json::exception&) {
        hails::warn("replacing unreadable " + file.string());
        all = json::object();
      }
    }
    all[command_] = rec_;
    hails::io::write_text(file, all.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Globals& g_;
  json rec_;
  std::vector<std::pair<std::string, fs::path>> inputs_, outputs_;
};

hails::TrainConfig resolve_config(const Globals& g, const Overrides& o,
                                  std::optional<hails::TrainConfig> base = {}) {
  hails::TrainConfig cfg = base.value_or(hails::TrainConfig{});
  if (!g.config.empty()) cfg = hails::io::config_from_json(json::parse(hails::io::read_text(g.config)), cfg);
  o.apply(cfg);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

struct Data {
  hails::Hierarchy h;
  hails::SeriesPanel raw;  // training slice
};

Data load_data(const std::string& edges, const std::string& panel, std::optional<int> train_end) {
  Data d{hails::Hierarchy::build(hails::io::read_edges(edges)), hails::io::read_panel(panel)};
  if (d.raw.nodes() != d.h.size()) {
    throw hails::ValidationError("panel has " + std::to_string(d.raw.nodes()) +
                                 " nodes but the hierarchy has " + std::to_string(d.h.size()));
  }
  if (train_end) {
    if (*train_end < 2 || *train_end > d.raw.length()) {
      throw hails::ValidationError("--train-end must lie in [2, T]");
    }
    d.raw = d.raw.slice(0, *train_end);
  }
  return d;
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return fs::path(g.out) / name;
}

// --------------------------------------------------------------------------

struct SynthArgs {
  hails::SynthConfig cfg;
};

void cmd_synth(const Globals& g, SynthArgs a) {
  Manifest m("synth-gen", g);
  if (g.seed) a.cfg.seed = *g.seed;
  const auto [h, panel] = hails::generate(a.cfg);
  const auto edges = out_path(g, "edges.csv");
  const auto values = out_path(g, "panel.csv");
  hails::io::write_edges(edges, h);
  hails::io::write_panel(values, panel);
  m.set("synth", {{"branching", a.cfg.branching},
                  {"T", a.cfg.T},
                  {"base_rate", a.cfg.base_rate},
                  {"seasonal_amp", a.cfg.seasonal_amp},
                  {"period", a.cfg.period},
                  {"sparsity_scale", a.cfg.sparsity_scale},
                  {"noise", a.cfg.noise},
                  {"seed", a.cfg.seed}});
  m.output("edges", edges);
  m.output("panel", values);
  m.write();
}

struct DataArgs {
  std::string edges, panel, labels;
  std::optional<int> train_end;

  void add_to(CLI::App* cmd, bool with_labels) {
    cmd->add_option("--edges", edges, "parent,child CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--panel", panel, "node,t,value CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--train-end", train_end, "use only steps [0, T) for fitting");
    if (with_labels) {
      cmd->add_option("--labels", labels, "node,p_value,label CSV (classified inline if absent)")
          ->check(CLI::ExistingFile);
    }
  }
};

void cmd_classify(const Globals& g, const DataArgs& a, const Overrides& o) {
  Manifest m("classify", g);
  const auto cfg = resolve_config(g, o);
  const Data d = load_data(a.edges, a.panel, a.train_end);
  const auto labels = hails::classify_nodes(d.raw, d.h, cfg.alpha);
  const auto path = out_path(g, "labels.csv");
  hails::io::write_labels(path, labels);
  m.input("edges", a.edges);
  m.input("panel", a.panel);
  m.set("alpha", cfg.alpha);
  m.set("train_end", a.train_end ? json(*a.train_end) : json(nullptr));
  m.output("labels", path);
  m.write();
}

hails::SparsityLabels labels_for(const DataArgs& a, const Data& d, const hails::TrainConfig& cfg) {
  if (a.labels.empty()) return hails::classify_nodes(d.raw, d.h, cfg.alpha);
  auto labels = hails::io::read_labels(a.labels, cfg.alpha);
  if (static_cast<int>(labels.kinds.size()) != d.h.size()) {
    throw hails::ValidationError("label file does not cover every node");
  }
  if (!labels.propagation_closed(d.h)) {
    throw hails::ValidationError("label file has a dense node under a sparse ancestor");
  }
  return labels;
}

void check_shape(const hails::ModelParams& p, const hails::TrainConfig& cfg) {
  if (p.shape.hidden != cfg.hidden || p.shape.horizon != cfg.horizon || p.shape.window != cfg.window) {
    throw hails::ValidationError("config hidden/horizon/window differ from the checkpoint");
  }
}

void cmd_pretrain(const Globals& g, const DataArgs& a, const Overrides& o) {
  Manifest m("pretrain", g);
  const auto cfg = resolve_config(g, o);
  const Data d = load_data(a.edges, a.panel, a.train_end);
  const auto h = d.h.with_phi(cfg.phi_mode);
  const auto norm = hails::normalize_panel(d.raw, h);
  const auto labels = labels_for(a, d, cfg);
  hails::TrainState st = hails::make_train_state(hails::initial_model(norm, labels, cfg));
  hails::pretrain(norm, st, cfg);
  const auto path = out_path(g, "pretrained.ckpt");
  hails::io::save_checkpoint(path, {cfg, st.best, st, h.edges()});
  m.input("edges", a.edges);
  m.input("panel", a.panel);
  if (!a.labels.empty()) m.input("labels", a.labels);
  m.set("train_config", hails::io::config_to_json(cfg));
  m.output("checkpoint", path);
  m.write();
}

struct TrainArgs {
  DataArgs data;
  std::string init, resume;
};

void cmd_train(const Globals& g, const TrainArgs& a, const Overrides& o) {
  Manifest m("train", g);
  const Data d = load_data(a.data.edges, a.data.panel, a.data.train_end);

  std::optional<hails::io::Checkpoint> from;
  if (!a.resume.empty()) from = hails::io::load_checkpoint(a.resume);
  if (!a.init.empty()) from = hails::io::load_checkpoint(a.init);
  if (from && !from->state) throw hails::ValidationError("checkpoint carries no training state");

  const auto cfg = resolve_config(g, o, from ? std::optional(from->config) : std::nullopt);
  const auto h = d.h.with_phi(cfg.phi_mode);
  const auto norm = hails::normalize_panel(d.raw, h);

  hails::TrainState st;
  if (from) {
    check_shape(from->state->current, cfg);
    if (from->state->current.shape.nodes != d.h.size()) {
      throw hails::ValidationError("checkpoint node count differs from the hierarchy");
    }
    st = std::move(*from->state);
    if (!a.init.empty()) {
      // a pretraining checkpoint starts a fresh main loop
      st.epochs_done = 0;
      st.stopped = false;
    }
  } else {
    st = hails::make_train_state(hails::initial_model(norm, labels_for(a.data, d, cfg), cfg));
  }
  hails::pretrain(norm, st, cfg);

  const auto log_path = out_path(g, "training_log.csv");
  const auto ckpt_path = out_path(g, "model.ckpt");
  const bool append = !a.resume.empty() && fs::exists(log_path);
  if (!append) hails::io::write_training_log(log_path, {}, false);
  const auto edges = h.edges();
  const auto res = hails::train(norm, h, st, cfg, [&](const hails::EpochLog& row, const hails::TrainState& s) {
    hails::io::write_training_log(log_path, {row}, true);
    hails::io::save_checkpoint(ckpt_path, {cfg, s.best, s, edges});
  });
  hails::io::save_checkpoint(ckpt_path, {cfg, st.best, st, edges});

  m.input("edges", a.data.edges);
  m.input("panel", a.data.panel);
  if (!a.data.labels.empty()) m.input("labels", a.data.labels);
  if (!a.init.empty()) m.input("init", a.init);
  if (!a.resume.empty()) m.input("resume", a.resume);
  m.set("train_config", hails::io::config_to_json(cfg));
  m.set("epochs_run", res.epochs_run);
  m.set("epochs_done", st.epochs_done);
  m.set("early_stopped", res.early_stopped);
  m.set("best_val", res.best_val);
  m.set("counters", {{"batches", res.counters.batches},
                     {"refine_updates", res.counters.refine_updates},
                     {"base_updates", res.counters.base_updates}});
  m.output("checkpoint", ckpt_path);
  m.output("training_log", log_path);
  m.write();
}

struct ForecastArgs {
  std::string checkpoint, panel, edges, method = "hails";
  std::optional<int> origin, horizon;
};

std::vector<std::vector<hails::ForecastDist>> six_average(const hails::SeriesPanel& raw,
                                                          const hails::Hierarchy& h, int origin,
                                                          int horizon) {
  if (origin < 6) throw hails::ValidationError("six-average needs at least 6 observed steps");
  const auto hist = raw.slice(0, origin);
  const Eigen::MatrixXd mean = hails::reference_forecast(hist, h, horizon);
  std::vector<std::vector<hails::ForecastDist>> steps(horizon);
  for (int i = 0; i < raw.nodes(); ++i) {
    const Eigen::VectorXd last = hist.values.row(i).tail(6).transpose();
    const double sd = std::sqrt((last.array() - last.mean()).square().sum() / 5.0);
    for (int k = 0; k < horizon; ++k) {
      steps[k].push_back(hails::GaussianParams{mean(i, k), std::max(sd, hails::kMinScale)});
    }
  }
  return steps;
}

void cmd_forecast(const Globals& g, const ForecastArgs& a) {
  Manifest m("forecast", g);
  const auto raw = hails::io::read_panel(a.panel);
  const int origin = a.origin.value_or(raw.length());
  if (origin < 1 || origin > raw.length()) throw hails::ValidationError("--origin must lie in [1, T]");

  std::vector<std::vector<hails::ForecastDist>> steps;
  hails::Hierarchy h = hails::Hierarchy::single_node();
  if (a.method == "six-average") {
    if (a.edges.empty() || !a.horizon) {
      throw hails::ValidationError("six-average needs --edges and --horizon");
    }
    h = hails::Hierarchy::build(hails::io::read_edges(a.edges));
    if (raw.nodes() != h.size()) throw hails::ValidationError("panel and hierarchy sizes differ");
    steps = six_average(raw, h, origin, *a.horizon);
    m.input("edges", a.edges);
  } else if (a.method == "hails") {
    if (a.checkpoint.empty()) throw hails::ValidationError("--checkpoint is required");
    const auto ck = hails::io::load_checkpoint(a.checkpoint);
    if (a.horizon && *a.horizon != ck.params.shape.horizon) {
      throw hails::ValidationError("requested horizon " + std::to_string(*a.horizon) +
                                   " differs from the model's " +
                                   std::to_string(ck.params.shape.horizon));
    }
    if (!a.edges.empty()) {
      h = hails::Hierarchy::build(hails::io::read_edges(a.edges));
      m.input("edges", a.edges);
    } else if (!ck.edges.empty()) {
      h = hails::Hierarchy::build(ck.edges);
    } else {
      throw hails::ValidationError("checkpoint has no hierarchy; pass --edges");
    }
    if (raw.nodes() != h.size() || ck.params.shape.nodes != h.size()) {
      throw hails::ValidationError("panel, hierarchy and model node counts differ");
    }
    const auto norm = hails::normalize_panel(raw.slice(0, origin), h);
    steps = hails::denormalize_forecasts(hails::forecast_at(ck.params, norm, origin), h);
    m.input("checkpoint", a.checkpoint);
  } else {
    throw hails::ValidationError("unknown --method '" + a.method + "'");
  }

  hails::io::ForecastTable table;
  table.steps = std::move(steps);
  const std::int64_t last_t = raw.time_index[origin - 1];
  for (std::size_t k = 0; k < table.steps.size(); ++k) table.t.push_back(last_t + 1 + static_cast<std::int64_t>(k));
  const auto path = out_path(g, "forecasts.csv");
  hails::io::write_forecasts(path, table);
  m.input("panel", a.panel);
  m.set("method", a.method);
  m.set("origin", origin);
  m.output("forecasts", path);
  m.write();
}

struct EvalArgs {
  std::string forecasts, truth, edges, phi_mode = "leaf_proportional";
};

void cmd_evaluate(const Globals& g, const EvalArgs& a) {
  Manifest m("evaluate", g);
  const auto table = hails::io::read_forecasts(a.forecasts);
  const auto panel = hails::io::read_panel(a.truth);
  const auto h = hails::Hierarchy::build(hails::io::read_edges(a.edges)).with_phi(hails::parse_phi_mode(a.phi_mode));
  if (table.steps.empty()) throw hails::ValidationError("forecast file is empty");
  if (panel.nodes() != h.size() || static_cast<int>(table.steps.front().size()) != h.size()) {
    throw hails::ValidationError("forecasts, truth panel and hierarchy node counts differ");
  }
  const std::int64_t first = table.t.front();
  int begin = -1;
  for (int t = 0; t < panel.length(); ++t) {
    if (panel.time_index[t] == first) begin = t;
  }
  const int tau = static_cast<int>(table.steps.size());
  if (begin < 0 || begin + tau > panel.length()) {
    throw hails::ValidationError("truth panel does not cover the forecast steps");
  }
  for (int k = 0; k < tau; ++k) {
    if (panel.time_index[begin + k] != table.t[k]) {
      throw hails::ValidationError("forecast steps are not aligned with the truth panel");
    }
  }
  if (begin < 2) throw hails::ValidationError("truth panel needs at least 2 steps of history");
  const auto report = hails::evaluate(panel.values.leftCols(begin), panel.values.middleCols(begin, tau),
                                      table.steps, h);
  const auto json_path = out_path(g, "report.json");
  const auto csv_path = out_path(g, "report.csv");
  hails::io::write_text(json_path, report.to_json().dump(2) + "\n");
  hails::io::write_text(csv_path, report.to_csv());
  m.input("forecasts", a.forecasts);
  m.input("truth", a.truth);
  m.input("edges", a.edges);
  m.output("report_json", json_path);
  m.output("report_csv", csv_path);
  m.write();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hails: hierarchical probabilistic demand forecasting"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON file with training settings")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-gen", "generate a synthetic hierarchy and panel");
  s->add_option("--branching", synth.cfg.branching, "children per level, e.g. 3,3")->delimiter(',')->capture_default_str();
  s->add_option("--T", synth.cfg.T)->capture_default_str();
  s->add_option("--base-rate", synth.cfg.base_rate)->capture_default_str();
  s->add_option("--seasonal-amp", synth.cfg.seasonal_amp)->capture_default_str();
  s->add_option("--period", synth.cfg.period)->capture_default_str();
  s->add_option("--sparsity-scale", synth.cfg.sparsity_scale)->capture_default_str();
  s->add_option("--noise", synth.cfg.noise)->capture_default_str();

  DataArgs classify_args;
  Overrides classify_over;
  auto* c = app.add_subcommand("classify", "label nodes sparse or dense");
  classify_args.add_to(c, false);
  c->add_option("--alpha", classify_over.alpha, "test level (default 0.1)");

  DataArgs pre_args;
  Overrides pre_over;
  auto* p = app.add_subcommand("pretrain", "point-forecast pretraining of every node");
  pre_args.add_to(p, true);
  pre_over.add_to(p);

  TrainArgs train_args;
  Overrides train_over;
  auto* t = app.add_subcommand("train", "main training loop");
  train_args.data.add_to(t, true);
  train_over.add_to(t);
  auto* init_opt = t->add_option("--init", train_args.init, "start from a pretrain checkpoint")->check(CLI::ExistingFile);
  t->add_option("--resume", train_args.resume, "continue a train checkpoint")
      ->check(CLI::ExistingFile)
      ->excludes(init_opt);

  ForecastArgs fc;
  auto* f = app.add_subcommand("forecast", "write forecast distributions in raw units");
  f->add_option("--checkpoint", fc.checkpoint)->check(CLI::ExistingFile);
  f->add_option("--panel", fc.panel)->required()->check(CLI::ExistingFile);
  f->add_option("--edges", fc.edges)->check(CLI::ExistingFile);
  f->add_option("--origin", fc.origin, "forecast from history [0, origin) (default: all of it)");
  f->add_option("--horizon", fc.horizon, "must match the model");
  f->add_option("--method", fc.method, "hails | six-average")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "score forecasts against held-out truth");
  e->add_option("--forecasts", ev.forecasts)->required()->check(CLI::ExistingFile);
  e->add_option("--truth", ev.truth, "panel covering history and forecast steps")->required()->check(CLI::ExistingFile);
  e->add_option("--edges", ev.edges)->required()->check(CLI::ExistingFile);
  e->add_option("--phi-mode", ev.phi_mode)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitValidation;
  }

  try {
    if (s->parsed()) cmd_synth(g, synth);
    if (c->parsed()) cmd_classify(g, classify_args, classify_over);
    if (p->parsed()) cmd_pretrain(g, pre_args, pre_over);
    if (t->parsed()) cmd_train(g, train_args, train_over);
    if (f->parsed()) cmd_forecast(g, fc);
    if (e->parsed()) cmd_evaluate(g, ev);
  } catch (const hails::NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const hails::ValidationError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitValidation;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitValidation;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
