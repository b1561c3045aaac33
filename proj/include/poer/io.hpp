#pragma once

#include "poer/synthgen.hpp"
#include "poer/trainer.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace poer {

using Json = nlohmann::ordered_json;

// Config documents. Parsing starts from `base` and overwrites only the keys
// present; unknown keys and ill-typed values raise ConfigError naming the key.

Json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const Json& doc, DatasetSpec base = {});

Json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const Json& doc, TrainConfig base = TrainConfig::desk_default());

struct OutputPaths {
  std::string data = "data.jsonl";
  std::string metadata = "metadata.json";
  std::string checkpoint = "checkpoint.bin";
  std::string metrics = "metrics.json";
};

/// {"dataset": {...}, "train": {...}, "paths": {...}}; every section optional.
struct ExperimentConfig {
  DatasetSpec dataset;
  TrainConfig train = TrainConfig::desk_default();
  OutputPaths paths;
};

ExperimentConfig experiment_from_json(const Json& doc);
Json to_json(const ExperimentConfig& config);

/// Reads a JSON file; IoError when unreadable, ConfigError when malformed.
Json read_json_file(const std::string& path);
/// Writes `doc.dump(2)` plus a trailing newline.
void write_json_file(const std::string& path, const Json& doc);

// Dataset files: one {"x": [...], "y": int, "d": int} object per line, and a
// metadata document holding the spec and the generator matrices.

void write_dataset(const Dataset& data, const std::string& records_path,
                   const std::string& metadata_path);
Dataset read_dataset(const std::string& records_path, const std::string& metadata_path);

// Checkpoints: "POERCKPT", u32 format version, u64 header length, JSON header,
// then parameters, first and second moments as little-endian float64.

std::string serialize_checkpoint(const Checkpoint& ck);
/// Throws VersionMismatchError on an unknown format version and IoError on a
/// truncated or corrupt payload.
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Json to_json(const EvalResult& eval);
/// Metrics document: seed, target domain, accuracies, curves, config echo.
Json metrics_to_json(const MetricsReport& metrics, const TrainConfig& config);

void write_embeddings_csv(const std::vector<EmbeddingRow>& rows, const std::string& path);

}  // namespace poer
