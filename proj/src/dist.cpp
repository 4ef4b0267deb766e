#include "spngd/dist.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <string>

namespace spngd {

namespace {

constexpr const char* kLedgerHeader =
    "step,stage,collective,statistic_id,elements,bytes,skipped";
constexpr double kRunningStatRho = 0.1;

bool starts_with(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

bool is_statistic_id(const std::string& id) {
  return starts_with(id, "A:") || starts_with(id, "G:") || starts_with(id, "F:");
}

void neumaier_add(Vector& sum, Vector& comp, const Vector& v) {
  for (Index e = 0; e < sum.size(); ++e) {
    const double s = sum[e];
    const double x = v[e];
    const double t = s + x;
    comp[e] += (std::abs(s) >= std::abs(x)) ? ((s - t) + x) : ((x - t) + s);
    sum[e] = t;
  }
}

Vector flatten(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

}  // namespace

void CommLedger::record(Index step, int stage, const std::string& collective,
                        const std::string& id, Index elements, Index bytes,
                        bool skipped) {
  rows_.push_back({step, stage, collective, id, elements, bytes, skipped});
}

void CommLedger::write_csv(std::ostream& os) const {
  os << kLedgerHeader << '\n';
  for (const LedgerRow& r : rows_)
    os << r.step << ',' << r.stage << ',' << r.collective << ','
       << r.statistic_id << ',' << r.elements << ',' << r.bytes << ','
       << (r.skipped ? 1 : 0) << '\n';
}

LedgerReport ledger_report(const std::vector<LedgerRow>& rows) {
  LedgerReport rep;
  std::set<Index> steps;
  std::map<Index, Index> per_step;
  std::map<std::string, Index> stat_full_bytes;
  for (const LedgerRow& r : rows) {
    steps.insert(r.step);
    per_step[r.step] += r.bytes;
    rep.total_bytes += r.bytes;
    if (is_statistic_id(r.statistic_id)) {
      if (!r.skipped) {
        rep.stat_bytes += r.bytes;
        stat_full_bytes[r.statistic_id] = r.bytes;
      }
    } else if (starts_with(r.statistic_id, "grad:")) {
      rep.grad_bytes += r.bytes;
    } else if (starts_with(r.statistic_id, "w:")) {
      rep.param_bytes += r.bytes;
    }
  }
  rep.steps = static_cast<Index>(steps.size());
  for (const auto& [id, bytes] : stat_full_bytes)
    rep.stat_bytes_every_step += bytes * rep.steps;
  rep.reduction_rate =
      rep.stat_bytes_every_step == 0
          ? 1.0
          : static_cast<double>(rep.stat_bytes) /
                static_cast<double>(rep.stat_bytes_every_step);
  rep.per_step_bytes.assign(per_step.begin(), per_step.end());
  return rep;
}

LedgerReport ledger_report(const CommLedger& ledger) {
  return ledger_report(ledger.rows());
}

std::vector<LedgerRow> read_ledger_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("ledger: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kLedgerHeader) throw ParseError("ledger: unrecognized header");
  std::vector<LedgerRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) {
        parts.push_back(line.substr(pos));
        break;
      }
      parts.push_back(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    if (parts.size() != 7)
      throw ParseError("ledger: line " + std::to_string(lineno) +
                       ": expected 7 fields");
    try {
      LedgerRow r;
      r.step = std::stoll(parts[0]);
      r.stage = std::stoi(parts[1]);
      r.collective = parts[2];
      r.statistic_id = parts[3];
      r.elements = std::stoll(parts[4]);
      r.bytes = std::stoll(parts[5]);
      r.skipped = (std::stoi(parts[6]) != 0);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw ParseError("ledger: line " + std::to_string(lineno) +
                       ": malformed numeric field");
    }
  }
  return rows;
}

ClusterSim::ClusterSim(NetworkSpec net, const ParamSet& initial,
                       ClusterConfig cfg)
    : net_(std::move(net)), cfg_(cfg) {
  if (cfg_.workers < 1)
    throw ValidationError("workers", "worker count must be >= 1");
  if (cfg_.elem_size != 2 && cfg_.elem_size != 4 && cfg_.elem_size != 8)
    throw ValidationError("elem_size", "element size must be 2, 4, or 8");
  compile_pipeline(net_);
  if (initial.layers.size() != net_.layers.size())
    throw ShapeMismatch("ClusterSim: parameters do not match network");
  replicas_.assign(cfg_.workers, initial);
  layer_owner_.resize(net_.layers.size());
  for (std::size_t li = 0; li < net_.layers.size(); ++li) {
    const Index owner = static_cast<Index>(li) % cfg_.workers;
    layer_owner_[li] = owner;
    const std::string l = std::to_string(li);
    for (const char* prefix : {"A:", "G:", "F:", "grad:", "w:"})
      ownership_[prefix + l] = owner;
  }
}

Index ClusterSim::owner_of_layer(Index layer) const {
  if (layer < 0 || layer >= static_cast<Index>(layer_owner_.size()))
    throw MissingOwner("owner_of_layer: layer " + std::to_string(layer) +
                       " has no owner");
  return layer_owner_[layer];
}

std::vector<Batch> shard_batch(const Batch& batch, Index K) {
  const Index M = batch.x.rows();
  if (K < 1) throw ValidationError("workers", "worker count must be >= 1");
  if (M < 1) throw EmptyBatch("shard_batch: empty batch");
  if (M % K != 0)
    throw IndivisibleBatch("shard_batch: batch size " + std::to_string(M) +
                           " not divisible by " + std::to_string(K) +
                           " workers");
  const Index m = M / K;
  std::vector<Batch> out(K);
  for (Index k = 0; k < K; ++k) {
    out[k].x = batch.x.middleRows(k * m, m);
    out[k].t = batch.t.middleRows(k * m, m);
    out[k].shape = batch.shape;
  }
  return out;
}

std::map<std::string, Vector> reduce_scatter_v(
    const std::vector<std::vector<Payload>>& per_worker,
    const std::map<std::string, Index>& ownership, CommLedger& ledger,
    Index step, int stage, const std::string& collective, int elem_size,
    bool compensated) {
  const Index K = static_cast<Index>(per_worker.size());
  if (K < 1) throw ShapeMismatch("reduce_scatter_v: no workers");
  const auto& w0 = per_worker[0];
  for (Index k = 1; k < K; ++k) {
    if (per_worker[k].size() != w0.size())
      throw ShapeMismatch("reduce_scatter_v: payload count differs at worker " +
                          std::to_string(k));
    for (std::size_t i = 0; i < w0.size(); ++i)
      if (per_worker[k][i].id != w0[i].id ||
          per_worker[k][i].data.size() != w0[i].data.size())
        throw ShapeMismatch("reduce_scatter_v: payload \"" + w0[i].id +
                            "\" differs across workers");
  }
  std::map<std::string, Vector> out;
  for (std::size_t i = 0; i < w0.size(); ++i) {
    const std::string& id = w0[i].id;
    if (ownership.find(id) == ownership.end())
      throw MissingOwner("reduce_scatter_v: no owner for \"" + id + "\"");
    Vector acc = w0[i].data;
    if (compensated && K > 1) {
      Vector comp = Vector::Zero(acc.size());
      for (Index k = 1; k < K; ++k)
        neumaier_add(acc, comp, per_worker[k][i].data);
      acc += comp;
    } else {
      for (Index k = 1; k < K; ++k) acc += per_worker[k][i].data;
    }
    acc /= static_cast<double>(K);
    const Index elems = (K > 1) ? acc.size() : 0;
    ledger.record(step, stage, collective, id, elems, elems * elem_size,
                  false);
    out.emplace(id, std::move(acc));
  }
  return out;
}

std::map<std::string, Vector> all_gather_v(
    const std::vector<Payload>& owned,
    const std::map<std::string, Index>& ownership, CommLedger& ledger,
    Index step, int stage, const std::string& collective, int elem_size,
    Index workers) {
  std::map<std::string, Vector> out;
  for (const Payload& p : owned) {
    if (ownership.find(p.id) == ownership.end())
      throw MissingOwner("all_gather_v: no owner for \"" + p.id + "\"");
    const Index elems = (workers > 1) ? p.data.size() : 0;
    ledger.record(step, stage, collective, p.id, elems, elems * elem_size,
                  false);
    out.emplace(p.id, p.data);
  }
  return out;
}

OptimizerState make_optimizer(const NetworkSpec& net,
                              const OptimizerConfig& cfg) {
  OptimizerState st;
  st.cfg = cfg;
  st.velocity = zeros_like(net);
  st.blocks.resize(net.layers.size());
  return st;
}

namespace {

struct StatPlan {
  std::string id;
  Index layer = -1;
  char kind = 'A';  // 'A', 'G', or 'F'
};

std::vector<StatPlan> plan_statistics(const NetworkSpec& net, bool spngd) {
  std::vector<StatPlan> plans;
  if (!spngd) return plans;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const std::string l = std::to_string(li);
    if (net.layers[li].kind == LayerKind::BatchNorm) {
      plans.push_back({"F:" + l, static_cast<Index>(li), 'F'});
    } else {
      plans.push_back({"A:" + l, static_cast<Index>(li), 'A'});
      plans.push_back({"G:" + l, static_cast<Index>(li), 'G'});
    }
  }
  return plans;
}

Vector stat_payload(const CaptureBuffer& cap, const NetworkSpec& net,
                    const StatPlan& sp, FisherMode mode, BnMode bn_mode,
                    Index lo, Index hi, bool compensated) {
  switch (sp.kind) {
    case 'A':
      return factor_A(cap, net, sp.layer, lo, hi, compensated).data();
    case 'G':
      return factor_G(cap, net, sp.layer, mode, lo, hi, compensated).data();
    default: {
      if (bn_mode == BnMode::FullBlockDiag2c)
        return build_bn_full(cap, net, sp.layer, mode, lo, hi, compensated)
            .data();
      const UnitBnBlock ub =
          build_bn_block(cap, net, sp.layer, mode, lo, hi, compensated);
      const Index c = ub.fgg.size();
      Vector v(3 * c);
      for (Index ch = 0; ch < c; ++ch) {
        v[3 * ch + 0] = ub.fgg[ch];
        v[3 * ch + 1] = ub.fgb[ch];
        v[3 * ch + 2] = ub.fbb[ch];
      }
      return v;
    }
  }
}

UnitBnBlock unit_from_payload(const Vector& v, Index layer) {
  const Index c = v.size() / 3;
  UnitBnBlock ub;
  ub.layer = layer;
  ub.fgg.resize(c);
  ub.fgb.resize(c);
  ub.fbb.resize(c);
  for (Index ch = 0; ch < c; ++ch) {
    ub.fgg[ch] = v[3 * ch + 0];
    ub.fgb[ch] = v[3 * ch + 1];
    ub.fbb[ch] = v[3 * ch + 2];
  }
  return ub;
}

// Shard-mean loss gradient for one layer over samples [lo, hi), flattened.
// Uses the exact accumulation order of the full-batch backward so that the
// K == 1 payload is bit-identical to the aggregated gradient.
Vector grad_payload(const CaptureBuffer& cap, const NetworkSpec& net, Index li,
                    Index lo, Index hi, bool compensated) {
  const LayerSpec& L = net.layers[li];
  const LayerCapture& lc = cap.layers[li];
  const Index m = hi - lo;
  const double dm = static_cast<double>(m);
  switch (L.kind) {
    case LayerKind::Fc: {
      if (!compensated) {
        Matrix g = lc.grad_true.middleRows(lo, m).transpose() *
                   lc.act.middleRows(lo, m);
        g /= dm;
        return flatten(g);
      }
      Vector sum = Vector::Zero(L.d_out * L.d_in);
      Vector comp = Vector::Zero(sum.size());
      Vector term(sum.size());
      for (Index s = lo; s < hi; ++s) {
        Index p = 0;
        for (Index i = 0; i < L.d_out; ++i)
          for (Index j = 0; j < L.d_in; ++j)
            term[p++] = lc.grad_true(s, i) * lc.act(s, j);
        neumaier_add(sum, comp, term);
      }
      return Vector((sum + comp) / dm);
    }
    case LayerKind::Conv: {
      const Index R = lc.rows_per_sample;
      const Index C = lc.grad_rows_per_sample;
      Matrix acc = Matrix::Zero(C, R);
      if (!compensated) {
        for (Index s = lo; s < hi; ++s)
          acc.noalias() += lc.grad_true.middleRows(s * C, C) *
                           lc.act.middleRows(s * R, R).transpose();
      } else {
        Vector sum = Vector::Zero(C * R);
        Vector comp = Vector::Zero(C * R);
        for (Index s = lo; s < hi; ++s) {
          const Matrix term = lc.grad_true.middleRows(s * C, C) *
                              lc.act.middleRows(s * R, R).transpose();
          neumaier_add(sum, comp, flatten(term));
        }
        sum += comp;
        acc = Eigen::Map<const Matrix>(sum.data(), C, R);
      }
      acc /= dm;
      return flatten(acc);
    }
    default: {  // BatchNorm: gamma gradients then beta gradients
      const Index c = L.channels;
      Vector v(2 * c);
      if (!compensated) {
        for (Index ch = 0; ch < c; ++ch) {
          v[ch] = lc.bn_ggamma_true.col(ch).segment(lo, m).sum() / dm;
          v[c + ch] = lc.bn_gbeta_true.col(ch).segment(lo, m).sum() / dm;
        }
      } else {
        for (Index ch = 0; ch < c; ++ch) {
          double sg = 0, cg = 0, sb = 0, cb = 0;
          for (Index s = lo; s < hi; ++s) {
            double x = lc.bn_ggamma_true(s, ch);
            double t = sg + x;
            cg += (std::abs(sg) >= std::abs(x)) ? ((sg - t) + x) : ((x - t) + sg);
            sg = t;
            x = lc.bn_gbeta_true(s, ch);
            t = sb + x;
            cb += (std::abs(sb) >= std::abs(x)) ? ((sb - t) + x) : ((x - t) + sb);
            sb = t;
          }
          v[ch] = (sg + cg) / dm;
          v[c + ch] = (sb + cb) / dm;
        }
      }
      return v;
    }
  }
}

Index count_correct(const Matrix& logits, const Matrix& labels) {
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index pl, tl;
    logits.row(i).maxCoeff(&pl);
    labels.row(i).maxCoeff(&tl);
    if (pl == tl) ++correct;
  }
  return correct;
}

}  // namespace

StepMetrics accumulate_microsteps(ClusterSim& cluster,
                                  const std::vector<Batch>& batches,
                                  OptimizerState& opt, double eta,
                                  double momentum, Index step,
                                  CommLedger& ledger, Rng& mc_rng) {
  if (batches.empty())
    throw EmptyAccumulation("accumulate_microsteps: no micro-batches");
  const NetworkSpec& net = cluster.net();
  const Index K = cluster.workers();
  const Index n = static_cast<Index>(batches.size());
  const Index M = batches[0].x.rows();
  for (const Batch& b : batches)
    if (b.x.rows() != M)
      throw ShapeMismatch("accumulate_microsteps: micro-batch sizes differ");
  if (M % K != 0)
    throw IndivisibleBatch("accumulate_microsteps: micro-batch size " +
                           std::to_string(M) + " not divisible by " +
                           std::to_string(K) + " workers");
  const Index m = M / K;
  const bool spngd = !opt.cfg.sgd;
  const bool cmp = cluster.config().compensated;
  const int esize = cluster.config().elem_size;
  const auto stages = compile_pipeline(net);
  const Index ledger_start = ledger.size();

  // Refresh decisions are made once for the whole accumulated step.
  const std::vector<StatPlan> plans = plan_statistics(net, spngd);
  std::map<std::string, bool> due;
  for (const StatPlan& sp : plans) {
    if (!opt.cfg.stale_enabled) {
      due[sp.id] = true;
      continue;
    }
    auto it = opt.trackers.find(sp.id);
    if (it == opt.trackers.end())
      it = opt.trackers.emplace(sp.id, StaleTracker(sp.id, opt.cfg.stale_alpha))
               .first;
    due[sp.id] = it->second.should_refresh(step);
  }

  // Per-worker running sums of shard statistics and gradients over micros.
  std::vector<std::map<std::string, Vector>> sum(K), comp(K);
  auto add_payload = [&](Index k, const std::string& id, const Vector& v) {
    auto it = sum[k].find(id);
    if (it == sum[k].end()) {
      sum[k].emplace(id, v);
      if (cmp) comp[k].emplace(id, Vector::Zero(v.size()));
      return;
    }
    if (cmp)
      neumaier_add(it->second, comp[k].at(id), v);
    else
      it->second += v;
  };

  double loss_sum = 0.0;
  Index correct = 0;
  // Batch statistics of every BatchNorm layer, per micro, for the running
  // averages (applied identically at every replica after the update).
  std::vector<std::vector<std::pair<Index, std::pair<Vector, Vector>>>>
      bn_stats(n);

  for (Index mi = 0; mi < n; ++mi) {
    const Batch& b = batches[mi];
    ForwardResult fwd = forward(net, cluster.replica(0), b, Mode::Train);
    BackwardResult bwd =
        loss_and_backward(net, cluster.replica(0), fwd.logits, b.t,
                          fwd.capture, GradTarget::TrueLabel);
    loss_sum += bwd.loss;
    correct += count_correct(fwd.logits, b.t);
    if (spngd && opt.cfg.fisher_mode == FisherMode::OneMC) {
      const Matrix y = sample_labels(fwd.logits, mc_rng);
      loss_and_backward(net, cluster.replica(0), fwd.logits, y, fwd.capture,
                        GradTarget::SampledLabel);
    }
    for (std::size_t si = 0; si < stages.size(); ++si) {
      if (stages[si].kind != Stage::Bn) continue;
      const StageRecord& rec = fwd.capture.tape[si];
      bn_stats[mi].push_back(
          {stages[si].layer, {rec.batch_mean, rec.batch_var}});
    }
    for (Index k = 0; k < K; ++k) {
      const Index lo = k * m, hi = lo + m;
      for (const StatPlan& sp : plans) {
        if (!due.at(sp.id)) continue;
        add_payload(k, sp.id,
                    stat_payload(fwd.capture, net, sp, opt.cfg.fisher_mode,
                                 opt.cfg.bn_mode, lo, hi, cmp));
      }
      for (std::size_t li = 0; li < net.layers.size(); ++li)
        add_payload(k, "grad:" + std::to_string(li),
                    grad_payload(fwd.capture, net, static_cast<Index>(li), lo,
                                 hi, cmp));
    }
  }

  // Finish the micro-step means.
  auto mean_of = [&](Index k, const std::string& id) {
    Vector v = sum[k].at(id);
    if (cmp) v += comp[k].at(id);
    v /= static_cast<double>(n);
    return v;
  };

  // Stage 2: ReduceScatterV of the activation factors.
  std::vector<std::vector<Payload>> rsv_a(K);
  for (Index k = 0; k < K; ++k)
    for (const StatPlan& sp : plans)
      if (sp.kind == 'A' && due.at(sp.id))
        rsv_a[k].push_back({sp.id, mean_of(k, sp.id)});
  auto reduced_a = reduce_scatter_v(rsv_a, cluster.ownership(), ledger, step,
                                    2, "RSV_A", esize, cmp);
  for (const StatPlan& sp : plans)
    if (sp.kind == 'A' && !due.at(sp.id))
      ledger.record(step, 2, "RSV_A", sp.id, 0, 0, true);

  // Stage 3: ReduceScatterV of gradient factors / BN blocks and loss grads.
  std::vector<std::vector<Payload>> rsv_g(K);
  for (Index k = 0; k < K; ++k) {
    for (const StatPlan& sp : plans)
      if (sp.kind != 'A' && due.at(sp.id))
        rsv_g[k].push_back({sp.id, mean_of(k, sp.id)});
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
      const std::string id = "grad:" + std::to_string(li);
      rsv_g[k].push_back({id, mean_of(k, id)});
    }
  }
  auto reduced_g = reduce_scatter_v(rsv_g, cluster.ownership(), ledger, step,
                                    3, "RSV_G_F_grad", esize, cmp);
  for (const StatPlan& sp : plans)
    if (sp.kind != 'A' && !due.at(sp.id))
      ledger.record(step, 3, "RSV_G_F_grad", sp.id, 0, 0, true);

  // Stage 4: owner-local rebuild, inversion, update, rescale.
  StepMetrics met;
  met.step = step;
  if (spngd) {
    std::vector<bool> kron_touched(net.layers.size(), false);
    for (const StatPlan& sp : plans) {
      if (!due.at(sp.id)) continue;
      const Vector& v = (sp.kind == 'A') ? reduced_a.at(sp.id)
                                         : reduced_g.at(sp.id);
      Stat snapshot;
      const LayerSpec& L = net.layers[sp.layer];
      if (sp.kind == 'A' || sp.kind == 'G') {
        const Index dim =
            (sp.kind == 'A')
                ? (L.kind == LayerKind::Fc ? L.d_in
                                           : L.c_in * L.kernel * L.kernel)
                : (L.kind == LayerKind::Fc ? L.d_out : L.c_out);
        SymMatrix sym(dim);
        sym.data() = v;
        auto& slot = opt.blocks[sp.layer].kron;
        if (!slot) {
          slot.emplace();
          slot->layer = sp.layer;
        }
        if (sp.kind == 'A') {
          slot->A = sym;
          slot->fresh_step_a = step;
        } else {
          slot->G = sym;
          slot->fresh_step_g = step;
        }
        kron_touched[sp.layer] = true;
        snapshot = to_stat(sym);
      } else if (opt.cfg.bn_mode == BnMode::Unit) {
        UnitBnBlock ub = unit_from_payload(v, sp.layer);
        ub.fresh_step = step;
        snapshot = to_stat(ub);
        opt.blocks[sp.layer].unit_bn = std::move(ub);
        damp_bn(*opt.blocks[sp.layer].unit_bn, opt.cfg.lambda);
      } else {
        FullBnBlock fb;
        fb.layer = sp.layer;
        fb.F = SymMatrix(2 * L.channels);
        fb.F.data() = v;
        fb.fresh_step = step;
        snapshot = to_stat(fb.F);
        opt.blocks[sp.layer].full_bn = std::move(fb);
        damp_bn_full(*opt.blocks[sp.layer].full_bn, opt.cfg.lambda);
      }
      if (opt.cfg.stale_enabled) {
        const RefreshDecision dec =
            opt.trackers.at(sp.id).on_refresh(snapshot, step);
        met.refreshes.push_back({sp.id, dec.next_interval, dec.reason});
      } else {
        met.refreshes.push_back({sp.id, 1,
                                 step == 1 ? RefreshReason::FirstBuild
                                           : RefreshReason::Dissimilar1});
      }
    }
    // Either factor refreshing re-balances pi, so both damped inverses are
    // recomputed from the retained raw factors.
    for (std::size_t li = 0; li < net.layers.size(); ++li)
      if (kron_touched[li]) damp_and_invert(*opt.blocks[li].kron, opt.cfg.lambda);
  }

  ParamSet grads = zeros_like(net);
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& L = net.layers[li];
    const Vector& v = reduced_g.at("grad:" + std::to_string(li));
    LayerParams& g = grads.layers[li];
    if (L.kind == LayerKind::BatchNorm) {
      g.gamma = v.head(L.channels);
      g.beta = v.tail(L.channels);
    } else {
      g.weight = Eigen::Map<const Matrix>(v.data(), g.weight.rows(),
                                          g.weight.cols());
    }
  }

  const ParamSet& params = cluster.replica(0);
  StepResult res = ngd_step(net, params, grads, spngd ? &opt.blocks : nullptr,
                            eta, momentum, opt.velocity);
  if (spngd && opt.cfg.rescale) {
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
      const LayerSpec& L = net.layers[li];
      if (L.kind == LayerKind::BatchNorm) continue;
      const Index d_out = (L.kind == LayerKind::Fc) ? L.d_out : L.c_out;
      res.params.layers[li].weight =
          rescale_weights(res.params.layers[li].weight, d_out);
      // Velocity is the actual parameter displacement, rescaling included.
      res.velocity.layers[li].weight =
          res.params.layers[li].weight - params.layers[li].weight;
    }
  }
  opt.velocity = std::move(res.velocity);

  // BatchNorm running statistics advance once per micro-batch, identically
  // at every replica; no communication is involved.
  for (Index mi = 0; mi < n; ++mi)
    for (const auto& [li, stats] : bn_stats[mi]) {
      LayerParams& lp = res.params.layers[li];
      lp.running_mean =
          (1.0 - kRunningStatRho) * lp.running_mean + kRunningStatRho * stats.first;
      lp.running_var =
          (1.0 - kRunningStatRho) * lp.running_var + kRunningStatRho * stats.second;
    }

  // Stage 5: AllGatherV of the updated weights.
  std::vector<Payload> owned;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& L = net.layers[li];
    const LayerParams& lp = res.params.layers[li];
    Vector v;
    if (L.kind == LayerKind::BatchNorm) {
      v.resize(2 * L.channels);
      v.head(L.channels) = lp.gamma;
      v.tail(L.channels) = lp.beta;
    } else {
      v = flatten(lp.weight);
    }
    owned.push_back({"w:" + std::to_string(li), std::move(v)});
  }
  all_gather_v(owned, cluster.ownership(), ledger, step, 5, "AGV_params",
               esize, K);
  for (Index k = 0; k < K; ++k) cluster.replica(k) = res.params;

  for (Index r = ledger_start; r < ledger.size(); ++r) {
    const LedgerRow& row = ledger.rows()[r];
    met.total_bytes += row.bytes;
    if (is_statistic_id(row.statistic_id) && !row.skipped)
      met.stat_bytes += row.bytes;
  }
  met.loss = loss_sum / static_cast<double>(n);
  met.train_acc =
      static_cast<double>(correct) / (static_cast<double>(n) * M);
  return met;
}

StepMetrics run_step(ClusterSim& cluster, const Batch& batch,
                     OptimizerState& opt, double eta, double momentum,
                     Index step, CommLedger& ledger, Rng& mc_rng) {
  return accumulate_microsteps(cluster, {batch}, opt, eta, momentum, step,
                               ledger, mc_rng);
}

}  // namespace spngd
