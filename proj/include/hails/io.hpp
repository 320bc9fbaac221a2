#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hails/forecaster.hpp"
#include "hails/hierarchy.hpp"
#include "hails/sparsity.hpp"
#include "hails/training.hpp"

namespace hails::io {

namespace fs = std::filesystem;

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// `parent,child` CSV.
std::vector<std::pair<NodeId, NodeId>> read_edges(const fs::path& path);
void write_edges(const fs::path& path, const Hierarchy& h);

/// Long-format `node,t,value[,extra...]` CSV. Extra columns become covariate
/// channels. Every (node, t) cell must be present exactly once.
SeriesPanel read_panel(const fs::path& path);
void write_panel(const fs::path& path, const SeriesPanel& panel);

/// `node,p_value,label` CSV with label `sparse` or `dense`.
void write_labels(const fs::path& path, const SparsityLabels& labels);
SparsityLabels read_labels(const fs::path& path, double alpha = 0.1);

/// Raw-unit forecasts. Columns: node,step,t,dist,mean,param,scale,q05,q25,q50,q75,q95
/// where `param` is sigma (gaussian) or lambda (poisson, normalized rate) and
/// `scale` is the Poisson count multiplier (1 for gaussian rows).
struct ForecastTable {
  std::vector<std::vector<ForecastDist>> steps;  // steps[k][i]
  std::vector<std::int64_t> t;                   // absolute time per step
};
inline constexpr double kForecastQuantiles[] = {0.05, 0.25, 0.5, 0.75, 0.95};
void write_forecasts(const fs::path& path, const ForecastTable& table);
ForecastTable read_forecasts(const fs::path& path);

/// `epoch,ll,dcrs,total,val_total,dce` CSV.
std::string training_log_header();
std::string training_log_row(const EpochLog& row);
void write_training_log(const fs::path& path, const std::vector<EpochLog>& rows, bool append);
std::vector<EpochLog> read_training_log(const fs::path& path);

nlohmann::json config_to_json(const TrainConfig& cfg);
/// Overlays keys present in `j` onto `base`; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});
TrainConfig read_config(const fs::path& path);

/// Versioned binary checkpoint: magic, version, JSON metadata, then raw
/// little-endian tensors. Holds the best parameters and, optionally, the
/// state needed to resume training.
struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  std::optional<TrainState> state;
  /// Hierarchy the model was trained on, so forecasts can be denormalized
  /// without the edges file. May be empty.
  std::vector<std::pair<NodeId, NodeId>> edges;
};
inline constexpr int kCheckpointVersion = 1;
void save_checkpoint(const fs::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const fs::path& path);

/// Git-style blob hash (SHA-1 of "blob <len>\0<content>") of one file.
std::string blob_hash(const fs::path& path);
/// Hash over the blob hashes of several files, in order.
std::string content_hash(const std::vector<fs::path>& paths);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace hails::io
