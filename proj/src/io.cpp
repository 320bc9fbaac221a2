#include "hails/io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <openssl/evp.h>

namespace hails::io {
namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;
};

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  Csv csv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(line);
    if (csv.header.empty()) {
      csv.header = std::move(cells);
      continue;
    }
    if (cells.size() != csv.header.size()) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(csv.header.size()) + " fields");
    }
    csv.rows.push_back(std::move(cells));
    csv.line_numbers.push_back(lineno);
  }
  if (csv.header.empty()) throw ValidationError(path.string() + ": missing header");
  return csv;
}

void require_header(const Csv& csv, const std::vector<std::string>& expected,
                    const fs::path& path, bool allow_extra = false) {
  const bool prefix_ok = csv.header.size() >= expected.size() &&
                         std::equal(expected.begin(), expected.end(), csv.header.begin());
  if (!prefix_ok || (!allow_extra && csv.header.size() != expected.size())) {
    std::string want;
    for (const auto& h : expected) want += (want.empty() ? "" : ",") + h;
    throw ValidationError(path.string() + ": expected header '" + want + "'");
  }
}

std::string where(const fs::path& path, int line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

long long parse_int(const std::string& s, const std::string& ctx) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError(ctx + "invalid integer '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& s, const std::string& ctx) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError(ctx + "invalid number '" + s + "'");
  }
  return v;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode);
  if (!out) throw ValidationError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw ValidationError("cannot format number");
  return std::string(buf.data(), ptr);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path, std::ios::binary);
  out << text;
}

// ---------------------------------------------------------------------------
// Edges and panels

std::vector<std::pair<NodeId, NodeId>> read_edges(const fs::path& path) {
  const Csv csv = read_csv(path);
  require_header(csv, {"parent", "child"}, path);
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto ctx = where(path, csv.line_numbers[r]);
    edges.emplace_back(static_cast<NodeId>(parse_int(csv.rows[r][0], ctx)),
                       static_cast<NodeId>(parse_int(csv.rows[r][1], ctx)));
  }
  return edges;
}

void write_edges(const fs::path& path, const Hierarchy& h) {
  auto out = open_out(path);
  out << "parent,child\n";
  for (const auto& [p, c] : h.edges()) out << p << ',' << c << '\n';
}

SeriesPanel read_panel(const fs::path& path) {
  const Csv csv = read_csv(path);
  require_header(csv, {"node", "t", "value"}, path, true);
  const int extra = static_cast<int>(csv.header.size()) - 3;
  struct Cell {
    long long node, t;
    std::vector<double> v;
  };
  std::vector<Cell> cells;
  long long max_node = 0, max_t = -1;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto ctx = where(path, csv.line_numbers[r]);
    Cell c{parse_int(csv.rows[r][0], ctx), parse_int(csv.rows[r][1], ctx), {}};
    if (c.node <= 0) throw ValidationError(ctx + "node ids must be positive");
    if (c.t < 0) throw ValidationError(ctx + "t must be a 0-based index");
    for (int k = 0; k < 1 + extra; ++k) c.v.push_back(parse_double(csv.rows[r][2 + k], ctx));
    max_node = std::max(max_node, c.node);
    max_t = std::max(max_t, c.t);
    cells.push_back(std::move(c));
  }
  if (cells.empty()) throw ValidationError(path.string() + ": panel has no rows");
  const auto n = static_cast<Eigen::Index>(max_node);
  const auto len = static_cast<Eigen::Index>(max_t + 1);
  Eigen::MatrixXd values = Eigen::MatrixXd::Constant(n, len, std::nan(""));
  std::vector<Eigen::MatrixXd> cov(extra, Eigen::MatrixXd::Zero(n, len));
  std::vector<char> seen(static_cast<std::size_t>(n * len), 0);
  for (const auto& c : cells) {
    auto& flag = seen[static_cast<std::size_t>((c.node - 1) * len + c.t)];
    if (flag) {
      throw ValidationError(path.string() + ": duplicate cell (node " + std::to_string(c.node) +
                            ", t " + std::to_string(c.t) + ")");
    }
    flag = 1;
    values(c.node - 1, c.t) = c.v[0];
    for (int k = 0; k < extra; ++k) cov[k](c.node - 1, c.t) = c.v[1 + k];
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < len; ++t) {
      if (!seen[static_cast<std::size_t>(i * len + t)]) {
        throw ValidationError(path.string() + ": missing cell (node " + std::to_string(i + 1) +
                              ", t " + std::to_string(t) + ")");
      }
    }
  }
  SeriesPanel panel = make_panel(std::move(values));
  panel.covariates = std::move(cov);
  panel.covariate_names.assign(csv.header.begin() + 3, csv.header.end());
  panel.validate();
  return panel;
}

void write_panel(const fs::path& path, const SeriesPanel& panel) {
  auto out = open_out(path);
  out << "node,t,value";
  for (int f = 0; f < panel.covariate_count(); ++f) {
    const bool named = f < static_cast<int>(panel.covariate_names.size());
    out << ',' << (named ? panel.covariate_names[f] : "cov" + std::to_string(f + 1));
  }
  out << '\n';
  for (int i = 0; i < panel.nodes(); ++i) {
    for (int t = 0; t < panel.length(); ++t) {
      out << i + 1 << ',' << panel.time_index[t] << ',' << format_double(panel.values(i, t));
      for (const auto& cov : panel.covariates) out << ',' << format_double(cov(i, t));
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Labels and forecasts

void write_labels(const fs::path& path, const SparsityLabels& labels) {
  auto out = open_out(path);
  out << "node,p_value,label\n";
  for (std::size_t i = 0; i < labels.kinds.size(); ++i) {
    out << i + 1 << ',' << format_double(labels.p_values[i]) << ','
        << (labels.kinds[i] == NodeKind::kSparse ? "sparse" : "dense") << '\n';
  }
}

SparsityLabels read_labels(const fs::path& path, double alpha) {
  const Csv csv = read_csv(path);
  require_header(csv, {"node", "p_value", "label"}, path);
  SparsityLabels labels;
  labels.alpha = alpha;
  labels.kinds.resize(csv.rows.size());
  labels.p_values.resize(csv.rows.size());
  std::vector<char> seen(csv.rows.size(), 0);
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto ctx = where(path, csv.line_numbers[r]);
    const long long node = parse_int(csv.rows[r][0], ctx);
    if (node <= 0 || node > static_cast<long long>(csv.rows.size()) || seen[node - 1]) {
      throw ValidationError(ctx + "node ids must be 1..N without repeats");
    }
    seen[node - 1] = 1;
    labels.p_values[node - 1] = parse_double(csv.rows[r][1], ctx);
    const auto& lab = csv.rows[r][2];
    if (lab != "sparse" && lab != "dense") throw ValidationError(ctx + "label must be sparse or dense");
    labels.kinds[node - 1] = lab == "sparse" ? NodeKind::kSparse : NodeKind::kDense;
  }
  return labels;
}

void write_forecasts(const fs::path& path, const ForecastTable& table) {
  auto out = open_out(path);
  out << "node,step,t,dist,mean,param,scale,q05,q25,q50,q75,q95\n";
  if (table.steps.empty()) return;
  const std::size_t n = table.steps.front().size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < table.steps.size(); ++k) {
      const ForecastDist& d = table.steps[k][i];
      out << i + 1 << ',' << k + 1 << ',' << table.t[k] << ',';
      if (const auto* g = std::get_if<GaussianParams>(&d)) {
        out << "gaussian," << format_double(g->mu) << ',' << format_double(g->sigma) << ",1";
      } else {
        const auto& p = std::get<PoissonParams>(d);
        out << "poisson," << format_double(dist_mean(d)) << ',' << format_double(p.lambda) << ','
            << format_double(p.scale);
      }
      for (double q : kForecastQuantiles) out << ',' << format_double(forecast_quantile(d, q));
      out << '\n';
    }
  }
}

ForecastTable read_forecasts(const fs::path& path) {
  const Csv csv = read_csv(path);
  require_header(csv, {"node", "step", "t", "dist", "mean", "param", "scale", "q05", "q25", "q50",
                       "q75", "q95"},
                 path);
  std::map<std::pair<long long, long long>, ForecastDist> cells;
  std::map<long long, long long> step_t;
  long long max_node = 0, max_step = 0;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto& row = csv.rows[r];
    const auto ctx = where(path, csv.line_numbers[r]);
    const long long node = parse_int(row[0], ctx), step = parse_int(row[1], ctx);
    const long long t = parse_int(row[2], ctx);
    if (node <= 0 || step <= 0) throw ValidationError(ctx + "node and step must be positive");
    const double mean = parse_double(row[4], ctx), param = parse_double(row[5], ctx);
    const double scale = parse_double(row[6], ctx);
    ForecastDist d;
    if (row[3] == "gaussian") {
      d = GaussianParams{mean, param};
    } else if (row[3] == "poisson") {
      d = PoissonParams{param, scale};
    } else {
      throw ValidationError(ctx + "dist must be gaussian or poisson");
    }
    if (auto it = step_t.find(step); it != step_t.end() && it->second != t) {
      throw ValidationError(ctx + "inconsistent t for step " + std::to_string(step));
    }
    step_t[step] = t;
    if (!cells.emplace(std::make_pair(node, step), d).second) {
      throw ValidationError(ctx + "duplicate forecast row");
    }
    max_node = std::max(max_node, node);
    max_step = std::max(max_step, step);
  }
  ForecastTable table;
  for (long long k = 1; k <= max_step; ++k) {
    std::vector<ForecastDist> step;
    for (long long i = 1; i <= max_node; ++i) {
      auto it = cells.find({i, k});
      if (it == cells.end()) {
        throw ValidationError(path.string() + ": missing forecast for node " + std::to_string(i) +
                              " step " + std::to_string(k));
      }
      step.push_back(it->second);
    }
    table.steps.push_back(std::move(step));
    table.t.push_back(step_t.at(k));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Training log and config

std::string training_log_header() { return "epoch,ll,dcrs,total,val_total,dce\n"; }

std::string training_log_row(const EpochLog& r) {
  return std::to_string(r.epoch) + ',' + format_double(r.ll) + ',' + format_double(r.dcrs) + ',' +
         format_double(r.total) + ',' + format_double(r.val_total) + ',' + format_double(r.dce) +
         '\n';
}

void write_training_log(const fs::path& path, const std::vector<EpochLog>& rows, bool append) {
  const bool fresh = !append || !fs::exists(path);
  auto out = open_out(path, fresh ? std::ios::out : std::ios::app);
  if (fresh) out << training_log_header();
  for (const auto& r : rows) out << training_log_row(r);
}

std::vector<EpochLog> read_training_log(const fs::path& path) {
  const Csv csv = read_csv(path);
  require_header(csv, {"epoch", "ll", "dcrs", "total", "val_total", "dce"}, path);
  std::vector<EpochLog> rows;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto ctx = where(path, csv.line_numbers[r]);
    const auto& c = csv.rows[r];
    rows.push_back({static_cast<int>(parse_int(c[0], ctx)), parse_double(c[1], ctx),
                    parse_double(c[2], ctx), parse_double(c[3], ctx), parse_double(c[4], ctx),
                    parse_double(c[5], ctx)});
  }
  return rows;
}

nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"gamma", c.gamma},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"pretrain_epochs", c.pretrain_epochs},
          {"K", c.K},
          {"patience", c.patience},
          {"val_fraction", c.val_fraction},
          {"seed", c.seed},
          {"hidden", c.hidden},
          {"horizon", c.horizon},
          {"window", c.window},
          {"alpha", c.alpha},
          {"c", c.c},
          {"w_hat_init", c.w_hat_init},
          {"phi_mode", to_string(c.phi_mode)},
          {"async_mode", to_string(c.async_mode)}};
}

TrainConfig config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "gamma") c.gamma = value.get<double>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "max_epochs") c.max_epochs = value.get<int>();
      else if (key == "pretrain_epochs") c.pretrain_epochs = value.get<int>();
      else if (key == "K") c.K = value.get<int>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "val_fraction") c.val_fraction = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "hidden") c.hidden = value.get<int>();
      else if (key == "horizon") c.horizon = value.get<int>();
      else if (key == "window") c.window = value.get<int>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "c") c.c = value.get<double>();
      else if (key == "w_hat_init") c.w_hat_init = value.get<double>();
      else if (key == "phi_mode") c.phi_mode = parse_phi_mode(value.get<std::string>());
      else if (key == "async_mode") c.async_mode = parse_async_mode(value.get<std::string>());
      else throw ValidationError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig read_config(const fs::path& path) {
  try {
    return config_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'H', 'A', 'I', 'L', 'S', 'C', 'K', 'P'};

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("checkpoint is truncated");
  return v;
}

struct TensorWriter {
  std::ostream& out;
  template <class M>
  void operator()(const M& m) const {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
};

struct TensorReader {
  std::istream& in;
  template <class M>
  void operator()(M& m) const {
    const auto rows = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    if (rows != static_cast<std::uint32_t>(m.rows()) ||
        cols != static_cast<std::uint32_t>(m.cols())) {
      throw ValidationError("checkpoint tensor shape mismatch");
    }
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw ValidationError("checkpoint is truncated");
  }
};

template <class Layout, class F>
void visit_layout(Layout& l, F&& f) {
  for (auto& n : l.nodes) for_each_net_tensor(f, n);
  for_each_refine_tensor(f, l.refine);
}

nlohmann::json labels_json(const SparsityLabels& labels) {
  std::vector<std::string> kinds;
  for (auto k : labels.kinds) kinds.push_back(k == NodeKind::kSparse ? "sparse" : "dense");
  return {{"kinds", kinds}, {"p_values", labels.p_values}, {"alpha", labels.alpha}};
}

SparsityLabels labels_from_json(const nlohmann::json& j) {
  SparsityLabels labels;
  for (const auto& k : j.at("kinds")) {
    labels.kinds.push_back(k.get<std::string>() == "sparse" ? NodeKind::kSparse : NodeKind::kDense);
  }
  labels.p_values = j.at("p_values").get<std::vector<double>>();
  labels.alpha = j.at("alpha").get<double>();
  return labels;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  const ModelParams& p = ck.params;
  nlohmann::json meta{{"version", kCheckpointVersion},
                      {"config", config_to_json(ck.config)},
                      {"shape",
                       {{"nodes", p.shape.nodes},
                        {"hidden", p.shape.hidden},
                        {"horizon", p.shape.horizon},
                        {"window", p.shape.window},
                        {"input_size", p.shape.input_size}}},
                      {"c", p.refine.c},
                      {"labels", labels_json(p.labels)},
                      {"has_state", ck.state.has_value()},
                      {"edges", ck.edges}};
  if (ck.state) {
    const TrainState& s = *ck.state;
    meta["state"] = {{"epochs_done", s.epochs_done},
                     {"pretrain_epochs_done", s.pretrain_epochs_done},
                     {"batch_counter", s.batch_counter},
                     {"pending", s.pending},
                     {"best_val", s.best_val},
                     {"has_best", s.has_best},
                     {"bad_epochs", s.bad_epochs},
                     {"stopped", s.stopped},
                     {"refine_t", s.adam.refine_t},
                     {"base_t", s.adam.base_t}};
  }
  const std::string text = meta.dump();
  auto out = open_out(path, std::ios::binary);
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  TensorWriter w{out};
  visit_layout(p, w);
  if (ck.state) {
    visit_layout(ck.state->current, w);
    visit_layout(ck.state->adam.m, w);
    visit_layout(ck.state->adam.v, w);
    visit_layout(ck.state->accum, w);
  }
  if (!out) throw ValidationError("failed writing " + path.string());
}

namespace {

Checkpoint load_checkpoint_impl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("checkpoint is truncated");
  const auto meta = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.config = config_from_json(meta.at("config"));
  ModelShape shape;
  const auto& sj = meta.at("shape");
  shape.nodes = sj.at("nodes");
  shape.hidden = sj.at("hidden");
  shape.horizon = sj.at("horizon");
  shape.window = sj.at("window");
  shape.input_size = sj.at("input_size");
  const SparsityLabels labels = labels_from_json(meta.at("labels"));
  ck.params = init_model(shape, labels, {0, 0.0, meta.at("c").get<double>()});
  if (meta.contains("edges")) {
    ck.edges = meta.at("edges").get<std::vector<std::pair<NodeId, NodeId>>>();
  }
  TensorReader r{in};
  visit_layout(ck.params, r);
  if (meta.at("has_state").get<bool>()) {
    TrainState s = make_train_state(ck.params);
    visit_layout(s.current, r);
    visit_layout(s.adam.m, r);
    visit_layout(s.adam.v, r);
    visit_layout(s.accum, r);
    const auto& st = meta.at("state");
    s.best = ck.params;
    s.epochs_done = st.at("epochs_done");
    s.pretrain_epochs_done = st.at("pretrain_epochs_done");
    s.batch_counter = st.at("batch_counter");
    s.pending = st.at("pending");
    s.best_val = st.at("best_val");
    s.has_best = st.at("has_best");
    s.bad_epochs = st.at("bad_epochs");
    s.stopped = st.at("stopped");
    s.adam.refine_t = st.at("refine_t");
    s.adam.base_t = st.at("base_t");
    ck.state = std::move(s);
  }
  return ck;
}

}  // namespace

Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return load_checkpoint_impl(path);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Hashing

namespace {

std::string sha1_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha1(), nullptr) != 1) {
    throw ValidationError("SHA-1 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
  }
  return hex.str();
}

}  // namespace

std::string blob_hash(const fs::path& path) {
  const std::string content = read_text(path);
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob += content;
  return sha1_hex(blob);
}

std::string content_hash(const std::vector<fs::path>& paths) {
  std::string joined;
  for (const auto& p : paths) joined += blob_hash(p) + '\n';
  return sha1_hex(joined);
}

}  // namespace hails::io
