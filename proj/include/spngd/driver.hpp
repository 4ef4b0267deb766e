#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "spngd/dist.hpp"
#include "spngd/io.hpp"
#include "spngd/schemes.hpp"

namespace spngd {

// Where training data comes from. "synthetic-gaussian" generates class blobs
// from the run seed; "image-dir" loads a saved dataset directory (and
// optionally a second one for evaluation). Shape and class count always
// follow the network definition.
struct DatasetSpec {
  std::string kind = "synthetic-gaussian";
  Index classes = 10;
  Shape shape{1, 8, 8};
  Index train_size = 4096;
  Index eval_size = 512;
  double noise = 0.25;
  std::string path;       // image-dir: training data directory
  std::string eval_path;  // image-dir: evaluation data directory ("" = none)
};

// Everything one training run needs. Parsed from a flat JSON object; any
// unknown key is rejected with a ValidationError naming it.
struct RunManifest {
  TrainConfig train;  // schemes + damping + seed (preset-overridable)
  NetworkSpec net;
  DatasetSpec data;
  std::string optimizer = "spngd";  // or "sgd"
  FisherMode fisher_mode = FisherMode::Empirical;
  BnMode bn_mode = BnMode::Unit;
  bool stale_enabled = true;
  double stale_alpha = 0.1;
  Index workers = 1;
  Index n_accum = 1;
  int elem_size = 4;
  bool compensated = false;
  std::string output_dir = "run-out";
};

// Parses and validates a manifest. `overrides` are key=value assignments
// applied to the JSON document first; dotted paths and [i] array indexing
// address nested fields, and values parse as JSON with a plain-string
// fallback.
RunManifest parse_manifest(const std::string& json_text,
                           const std::vector<std::string>& overrides = {});
RunManifest load_manifest(const std::string& path,
                          const std::vector<std::string>& overrides = {});

struct MetricsRecord {
  Index step = 0;
  double epoch = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;
  double lr = 0.0;
  double momentum = 0.0;
  bool has_eval = false;
  double eval_acc = 0.0;
  std::string refreshed;  // "id=interval" entries joined with ';'
  Index stat_bytes = 0;
  Index total_bytes = 0;
};

void write_metrics_csv(std::ostream& os,
                       const std::vector<MetricsRecord>& records);

struct TrainHistory {
  NetworkSpec net;
  ParamSet params;  // final
  std::vector<MetricsRecord> records;
  double final_loss = 0.0;
};

// Runs the full training loop (data synthesis/loading, augmentation
// schemes, LR/momentum schedules, the 5-stage distributed step). Collects
// communication rows into `ledger` when given. Step-loop failures rethrow
// as Error("step <n>: ...").
TrainHistory run_training(const RunManifest& m, CommLedger* ledger = nullptr);

// run_training plus the on-disk artifacts: <output_dir>/metrics.csv,
// ledger.csv, checkpoint.bin, and (synthetic runs with eval_size > 0) the
// evaluation set under <output_dir>/eval_data.
TrainHistory train_to_files(const RunManifest& m);

// Eval-mode top-1 accuracy over the dataset, in fixed-size batches.
double evaluate(const NetworkSpec& net, const ParamSet& params,
                const Dataset& ds, Index batch = 256);

}  // namespace spngd
