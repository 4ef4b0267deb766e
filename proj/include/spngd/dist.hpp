#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spngd/fisher.hpp"
#include "spngd/net.hpp"
#include "spngd/schemes.hpp"
#include "spngd/stale.hpp"

namespace spngd {

// One collective payload as accounted by the ledger. Statistic ids: "A:<l>"
// and "G:<l>" for Conv/FC Kronecker factors, "F:<l>" for BatchNorm blocks,
// "grad:<l>" for loss gradients, "w:<l>" for updated weights.
struct LedgerRow {
  Index step = 0;
  int stage = 0;
  std::string collective;
  std::string statistic_id;
  Index elements = 0;
  Index bytes = 0;
  bool skipped = false;
};

class CommLedger {
 public:
  void record(Index step, int stage, const std::string& collective,
              const std::string& id, Index elements, Index bytes,
              bool skipped);
  const std::vector<LedgerRow>& rows() const { return rows_; }
  Index size() const { return static_cast<Index>(rows_.size()); }
  void write_csv(std::ostream& os) const;

 private:
  std::vector<LedgerRow> rows_;
};

struct LedgerReport {
  Index steps = 0;
  Index total_bytes = 0;
  Index stat_bytes = 0;   // A/G/F payloads actually sent
  Index grad_bytes = 0;
  Index param_bytes = 0;
  // Counterfactual: every statistic shipped at every step.
  Index stat_bytes_every_step = 0;
  double reduction_rate = 1.0;  // stat_bytes / counterfactual (1.0 when 0/0)
  std::vector<std::pair<Index, Index>> per_step_bytes;
};

LedgerReport ledger_report(const std::vector<LedgerRow>& rows);
LedgerReport ledger_report(const CommLedger& ledger);
std::vector<LedgerRow> read_ledger_csv(std::istream& is);

struct ClusterConfig {
  Index workers = 1;
  int elem_size = 4;         // modeled wire element size in bytes: 2, 4, or 8
  bool compensated = false;  // Neumaier accumulation in statistics/reductions
};

// K virtual workers holding parameter replicas, with round-robin layer
// ownership. All collectives are deterministic in-memory exchanges.
class ClusterSim {
 public:
  ClusterSim(NetworkSpec net, const ParamSet& initial, ClusterConfig cfg);

  Index workers() const { return cfg_.workers; }
  const ClusterConfig& config() const { return cfg_; }
  const NetworkSpec& net() const { return net_; }
  const std::vector<ParamSet>& replicas() const { return replicas_; }
  ParamSet& replica(Index k) { return replicas_.at(k); }
  const ParamSet& replica(Index k) const { return replicas_.at(k); }
  Index owner_of_layer(Index layer) const;
  const std::map<std::string, Index>& ownership() const { return ownership_; }

 private:
  NetworkSpec net_;
  ClusterConfig cfg_;
  std::vector<ParamSet> replicas_;
  std::vector<Index> layer_owner_;
  std::map<std::string, Index> ownership_;  // statistic id -> worker
};

// Contiguous equal shards, order preserving. Throws IndivisibleBatch.
std::vector<Batch> shard_batch(const Batch& batch, Index K);

struct Payload {
  std::string id;
  Vector data;
};

// Element-wise mean across workers in ascending worker order; each statistic
// lands at its owner. The ledger is credited once per statistic with the
// payload length (symmetric payloads are already packed triangles); K == 1
// records zero elements (intra-process).
std::map<std::string, Vector> reduce_scatter_v(
    const std::vector<std::vector<Payload>>& per_worker,
    const std::map<std::string, Index>& ownership, CommLedger& ledger,
    Index step, int stage, const std::string& collective, int elem_size,
    bool compensated);

// Replicates each owner's payload to every worker; in-process this returns
// the assembled map. Full element counts (weights are not symmetric).
std::map<std::string, Vector> all_gather_v(
    const std::vector<Payload>& owned,
    const std::map<std::string, Index>& ownership, CommLedger& ledger,
    Index step, int stage, const std::string& collective, int elem_size,
    Index workers);

struct OptimizerConfig {
  bool sgd = false;  // plain-gradient update, no statistics, no rescaling
  FisherMode fisher_mode = FisherMode::Empirical;
  BnMode bn_mode = BnMode::Unit;
  double lambda = 1e-3;
  bool rescale = true;
  bool stale_enabled = true;
  double stale_alpha = 0.1;
};

struct OptimizerState {
  OptimizerConfig cfg;
  ParamSet velocity;
  std::vector<LayerPrecond> blocks;            // parallel to net.layers
  std::map<std::string, StaleTracker> trackers;  // per statistic id
};

OptimizerState make_optimizer(const NetworkSpec& net,
                              const OptimizerConfig& cfg);

struct RefreshEvent {
  std::string id;
  Index interval = 1;  // the freshly decided refresh interval
  RefreshReason reason = RefreshReason::FirstBuild;
};

struct StepMetrics {
  Index step = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::vector<RefreshEvent> refreshes;
  Index stat_bytes = 0;   // statistic payload bytes this step
  Index total_bytes = 0;  // all payload bytes this step
};

// One full 5-stage step: forward + A capture, ReduceScatterV(A), backward +
// G/F capture, ReduceScatterV(G/F, grads), owner-local invert/update/rescale,
// AllGatherV(weights). Statistics whose trackers are not due are neither
// rebuilt nor communicated; the ledger records the skip.
StepMetrics run_step(ClusterSim& cluster, const Batch& batch,
                     OptimizerState& opt, double eta, double momentum,
                     Index step, CommLedger& ledger, Rng& mc_rng);

// Statistics and gradients averaged over equal-size micro-batches, one
// update at the end; run_step is the n == 1 case.
StepMetrics accumulate_microsteps(ClusterSim& cluster,
                                  const std::vector<Batch>& batches,
                                  OptimizerState& opt, double eta,
                                  double momentum, Index step,
                                  CommLedger& ledger, Rng& mc_rng);

}  // namespace spngd
