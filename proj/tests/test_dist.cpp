#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "spngd/dist.hpp"
#include "spngd/errors.hpp"
#include "spngd/fisher.hpp"
#include "spngd/net.hpp"

using namespace spngd;

namespace {

NetworkSpec small_net() {
  NetworkSpec net;
  net.input = {1, 4, 4};
  net.num_classes = 5;
  net.layers = {LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::batch_norm(3),
                LayerSpec::fc(3, 5)};
  return net;
}

NetworkSpec mlp_net() {
  NetworkSpec net;
  net.input = {1, 2, 2};
  net.num_classes = 3;
  net.layers = {LayerSpec::fc(4, 6), LayerSpec::fc(6, 3)};
  return net;
}

OptimizerConfig spngd_config() {
  OptimizerConfig cfg;
  cfg.lambda = 1e-3;
  cfg.stale_alpha = 0.1;
  return cfg;
}

// Ledger rows appended by the most recent step.
std::vector<LedgerRow> rows_for_step(const CommLedger& ledger, Index step) {
  std::vector<LedgerRow> out;
  for (const LedgerRow& r : ledger.rows())
    if (r.step == step) out.push_back(r);
  return out;
}

}  // namespace

TEST_SUITE("dist") {
  TEST_CASE("cluster construction validates its config and assigns round-robin owners") {
    const NetworkSpec net = small_net();
    Rng rng(1);
    const ParamSet p = init_params(net, rng);

    ClusterSim sim(net, p, {3, 4, false});
    CHECK(sim.workers() == 3);
    CHECK(sim.replicas().size() == 3);
    for (Index k = 0; k < 3; ++k)
      CHECK(oracle::max_param_diff(sim.replica(k), p) == 0.0);
    CHECK(sim.owner_of_layer(0) == 0);
    CHECK(sim.owner_of_layer(1) == 1);
    CHECK(sim.owner_of_layer(2) == 2);
    CHECK(sim.ownership().at("A:0") == 0);
    CHECK(sim.ownership().at("F:1") == 1);
    CHECK(sim.ownership().at("grad:2") == 2);
    CHECK(sim.ownership().at("w:2") == 2);
    CHECK_THROWS_AS(sim.owner_of_layer(3), MissingOwner);

    CHECK_THROWS_AS(ClusterSim(net, p, {0, 4, false}), ValidationError);
    CHECK_THROWS_AS(ClusterSim(net, p, {2, 3, false}), ValidationError);
    ParamSet bad = p;
    bad.layers.pop_back();
    CHECK_THROWS_AS(ClusterSim(net, bad, {2, 4, false}), ShapeMismatch);
  }

  TEST_CASE("shard_batch splits contiguously in order") {
    Rng rng(2);
    const Batch b = oracle::random_batch({1, 2, 2}, 3, 6, rng);
    const std::vector<Batch> shards = shard_batch(b, 2);
    REQUIRE(shards.size() == 2);
    REQUIRE(shards[0].x.rows() == 3);
    CHECK((shards[0].x - b.x.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((shards[1].x - b.x.bottomRows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((shards[0].t - b.t.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(shards[1].shape == b.shape);

    CHECK_THROWS_AS(shard_batch(b, 4), IndivisibleBatch);
    CHECK_THROWS_AS(shard_batch(b, 0), ValidationError);
  }

  TEST_CASE("reduce_scatter_v means payloads in ascending worker order") {
    std::map<std::string, Index> owners{{"A:0", 0}, {"grad:1", 1}};
    std::vector<std::vector<Payload>> per_worker(3);
    for (Index k = 0; k < 3; ++k) {
      Vector a(3);
      a << static_cast<double>(k), 10.0 * k, 1.0;
      Vector g(2);
      g << 3.0 * k, -1.0 * k;
      per_worker[k] = {{"A:0", a}, {"grad:1", g}};
    }
    CommLedger ledger;
    const auto reduced = reduce_scatter_v(per_worker, owners, ledger, 7, 2,
                                          "RSV_A", 4, false);
    REQUIRE(reduced.count("A:0") == 1);
    REQUIRE(reduced.count("grad:1") == 1);
    Vector want_a(3);
    want_a << 1.0, 10.0, 1.0;
    CHECK((reduced.at("A:0") - want_a).cwiseAbs().maxCoeff() == 0.0);
    Vector want_g(2);
    want_g << 3.0, -1.0;
    CHECK((reduced.at("grad:1") - want_g).cwiseAbs().maxCoeff() == 0.0);

    // One ledger row per statistic, crediting the packed payload length.
    REQUIRE(ledger.size() == 2);
    for (const LedgerRow& r : ledger.rows()) {
      CHECK(r.step == 7);
      CHECK(r.stage == 2);
      CHECK(r.collective == "RSV_A");
      CHECK_FALSE(r.skipped);
      CHECK(r.bytes == r.elements * 4);
    }
    CHECK(ledger.rows()[0].statistic_id == "A:0");
    CHECK(ledger.rows()[0].elements == 3);
    CHECK(ledger.rows()[1].statistic_id == "grad:1");
    CHECK(ledger.rows()[1].elements == 2);
  }

  TEST_CASE("reduce_scatter_v validates ownership and payload agreement") {
    CommLedger ledger;
    std::map<std::string, Index> owners{{"A:0", 0}};
    std::vector<std::vector<Payload>> unknown(1);
    unknown[0] = {{"A:9", Vector::Ones(3)}};
    CHECK_THROWS_AS(reduce_scatter_v(unknown, owners, ledger, 1, 2, "RSV_A",
                                     4, false),
                    MissingOwner);

    std::vector<std::vector<Payload>> ragged(2);
    ragged[0] = {{"A:0", Vector::Ones(3)}};
    ragged[1] = {{"A:0", Vector::Ones(4)}};  // same id, different length
    CHECK_THROWS_AS(reduce_scatter_v(ragged, owners, ledger, 1, 2, "RSV_A", 4,
                                     false),
                    ShapeMismatch);

    std::vector<std::vector<Payload>> missing(2);
    missing[0] = {{"A:0", Vector::Ones(3)}};
    missing[1] = {};  // one worker contributed nothing
    CHECK_THROWS_AS(reduce_scatter_v(missing, owners, ledger, 1, 2, "RSV_A",
                                     4, false),
                    ShapeMismatch);
  }

  TEST_CASE("single-worker collectives move zero bytes") {
    std::map<std::string, Index> owners{{"A:0", 0}, {"w:0", 0}};
    CommLedger ledger;
    std::vector<std::vector<Payload>> one(1);
    one[0] = {{"A:0", Vector::Constant(4, 2.0)}};
    const auto red = reduce_scatter_v(one, owners, ledger, 1, 2, "RSV_A", 8,
                                      false);
    CHECK((red.at("A:0").array() == 2.0).all());

    const auto gathered = all_gather_v({{"w:0", Vector::Ones(6)}}, owners,
                                       ledger, 1, 5, "AGV_params", 8, 1);
    CHECK(gathered.at("w:0").size() == 6);

    REQUIRE(ledger.size() == 2);
    for (const LedgerRow& r : ledger.rows()) {
      CHECK(r.elements == 0);
      CHECK(r.bytes == 0);
      CHECK_FALSE(r.skipped);
    }
  }

  TEST_CASE("compensated reduction recovers means that naive summation loses") {
    std::map<std::string, Index> owners{{"grad:0", 0}};
    std::vector<std::vector<Payload>> per_worker(3);
    per_worker[0] = {{"grad:0", Vector::Constant(1, 1e16)}};
    per_worker[1] = {{"grad:0", Vector::Constant(1, 1.0)}};
    per_worker[2] = {{"grad:0", Vector::Constant(1, -1e16)}};

    CommLedger ledger;
    const auto naive = reduce_scatter_v(per_worker, owners, ledger, 1, 3,
                                        "RSV_G_F_grad", 4, false);
    CHECK(naive.at("grad:0")[0] == 0.0);  // 1.0 was absorbed by 1e16

    const auto exact = reduce_scatter_v(per_worker, owners, ledger, 1, 3,
                                        "RSV_G_F_grad", 4, true);
    CHECK(exact.at("grad:0")[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("all_gather_v replicates owner payloads with full element counts") {
    std::map<std::string, Index> owners{{"w:0", 0}, {"w:1", 1}};
    CommLedger ledger;
    Vector w0(3), w1(2);
    w0 << 1, 2, 3;
    w1 << 4, 5;
    const auto out = all_gather_v({{"w:0", w0}, {"w:1", w1}}, owners, ledger,
                                  4, 5, "AGV_params", 2, 3);
    CHECK((out.at("w:0") - w0).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.at("w:1") - w1).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(ledger.size() == 2);
    CHECK(ledger.rows()[0].statistic_id == "w:0");
    CHECK(ledger.rows()[0].elements == 3);
    CHECK(ledger.rows()[0].bytes == 6);  // 3 elements at 2 bytes
    CHECK(ledger.rows()[1].elements == 2);

    CHECK_THROWS_AS(all_gather_v({{"w:9", w0}}, owners, ledger, 4, 5,
                                 "AGV_params", 2, 3),
                    MissingOwner);
  }

  TEST_CASE("ledger_report classifies traffic and prices the counterfactual") {
    CommLedger ledger;
    ledger.record(1, 2, "RSV_A", "A:0", 10, 40, false);
    ledger.record(1, 3, "RSV_G_F_grad", "G:0", 6, 24, false);
    ledger.record(1, 3, "RSV_G_F_grad", "grad:0", 20, 80, false);
    ledger.record(1, 5, "AGV_params", "w:0", 20, 80, false);
    ledger.record(2, 2, "RSV_A", "A:0", 0, 0, true);
    ledger.record(2, 3, "RSV_G_F_grad", "G:0", 6, 24, false);
    ledger.record(2, 3, "RSV_G_F_grad", "grad:0", 20, 80, false);
    ledger.record(2, 5, "AGV_params", "w:0", 20, 80, false);

    const LedgerReport rep = ledger_report(ledger);
    CHECK(rep.steps == 2);
    CHECK(rep.total_bytes == 408);
    CHECK(rep.stat_bytes == 88);
    CHECK(rep.grad_bytes == 160);
    CHECK(rep.param_bytes == 160);
    // Counterfactual: both statistics at full size on both steps.
    CHECK(rep.stat_bytes_every_step == 128);
    CHECK(rep.reduction_rate == doctest::Approx(88.0 / 128.0).epsilon(1e-15));
    REQUIRE(rep.per_step_bytes.size() == 2);
    CHECK(rep.per_step_bytes[0] == std::pair<Index, Index>{1, 224});
    CHECK(rep.per_step_bytes[1] == std::pair<Index, Index>{2, 184});

    // An all-skip ledger prices the rate as 1.0 instead of dividing by zero.
    CommLedger empty;
    empty.record(1, 2, "RSV_A", "A:0", 0, 0, true);
    CHECK(ledger_report(empty).reduction_rate == 1.0);
  }

  TEST_CASE("ledger CSV round-trips and rejects malformed input") {
    CommLedger ledger;
    ledger.record(3, 2, "RSV_A", "A:1", 45, 180, false);
    ledger.record(3, 3, "RSV_G_F_grad", "F:2", 0, 0, true);
    std::stringstream ss;
    ledger.write_csv(ss);

    const std::vector<LedgerRow> rows = read_ledger_csv(ss);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].step == 3);
    CHECK(rows[0].stage == 2);
    CHECK(rows[0].collective == "RSV_A");
    CHECK(rows[0].statistic_id == "A:1");
    CHECK(rows[0].elements == 45);
    CHECK(rows[0].bytes == 180);
    CHECK_FALSE(rows[0].skipped);
    CHECK(rows[1].skipped);

    std::stringstream bad_header("step,stage\n1,2\n");
    CHECK_THROWS_AS(read_ledger_csv(bad_header), ParseError);
    std::stringstream short_row(
        "step,stage,collective,statistic_id,elements,bytes,skipped\n1,2,x\n");
    CHECK_THROWS_AS(read_ledger_csv(short_row), ParseError);
    std::stringstream alpha_field(
        "step,stage,collective,statistic_id,elements,bytes,skipped\n"
        "one,2,RSV_A,A:0,3,12,0\n");
    CHECK_THROWS_AS(read_ledger_csv(alpha_field), ParseError);
    std::stringstream empty("");
    CHECK_THROWS_AS(read_ledger_csv(empty), ParseError);
  }

  TEST_CASE("make_optimizer sizes the state to the network") {
    const NetworkSpec net = small_net();
    const OptimizerState opt = make_optimizer(net, spngd_config());
    REQUIRE(opt.velocity.layers.size() == 3);
    CHECK((opt.velocity.layers[0].weight.array() == 0.0).all());
    CHECK((opt.velocity.layers[1].gamma.array() == 0.0).all());
    REQUIRE(opt.blocks.size() == 3);
    CHECK_FALSE(opt.blocks[0].kron.has_value());
    CHECK_FALSE(opt.blocks[1].unit_bn.has_value());
    CHECK(opt.trackers.empty());
  }

  TEST_CASE("single-worker step is bit-identical to the primitive composition") {
    const NetworkSpec net = small_net();
    Rng init_rng(11), data_rng(12), mc_rng(13);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 5, 12, data_rng);
    const double eta = 0.05, mom = 0.9, lambda = 1e-3;

    ClusterSim sim(net, p0, {1, 4, false});
    OptimizerState opt = make_optimizer(net, spngd_config());
    CommLedger ledger;
    const StepMetrics met =
        run_step(sim, batch, opt, eta, mom, 1, ledger, mc_rng);

    // Reference: the same step assembled from the public primitives.
    ForwardResult fwd = forward(net, p0, batch, Mode::Train);
    const BackwardResult bwd =
        loss_and_backward(net, p0, fwd.logits, batch.t, fwd.capture);
    std::vector<LayerPrecond> blocks(3);
    for (const Index li : {Index(0), Index(2)}) {
      KroneckerBlock kb;
      kb.layer = li;
      kb.A = factor_A(fwd.capture, net, li);
      kb.G = factor_G(fwd.capture, net, li, FisherMode::Empirical);
      damp_and_invert(kb, lambda);
      kb.fresh_step_a = kb.fresh_step_g = 1;
      blocks[li].kron = kb;
    }
    UnitBnBlock ub = build_bn_block(fwd.capture, net, 1, FisherMode::Empirical);
    ub.fresh_step = 1;
    damp_bn(ub, lambda);
    blocks[1].unit_bn = ub;

    StepResult res =
        ngd_step(net, p0, bwd.grads, &blocks, eta, mom, zeros_like(net));
    for (const Index li : {Index(0), Index(2)}) {
      const LayerSpec& L = net.layers[li];
      const Index d_out = L.kind == LayerKind::Fc ? L.d_out : L.c_out;
      res.params.layers[li].weight =
          rescale_weights(res.params.layers[li].weight, d_out);
      res.velocity.layers[li].weight =
          res.params.layers[li].weight - p0.layers[li].weight;
    }
    update_running_stats(net, res.params, fwd.capture, 0.1);

    CHECK(oracle::max_param_diff(sim.replica(0), res.params) == 0.0);
    CHECK(oracle::max_param_diff(opt.velocity, res.velocity) == 0.0);
    CHECK(met.loss == bwd.loss);
    CHECK(met.step == 1);

    // Train accuracy counts argmax hits on this batch.
    Index correct = 0;
    for (Index s = 0; s < 12; ++s) {
      Index pl, tl;
      fwd.logits.row(s).maxCoeff(&pl);
      batch.t.row(s).maxCoeff(&tl);
      if (pl == tl) ++correct;
    }
    CHECK(met.train_acc == static_cast<double>(correct) / 12.0);

    // First step builds every statistic once.
    REQUIRE(met.refreshes.size() == 5);
    std::set<std::string> ids;
    for (const RefreshEvent& e : met.refreshes) {
      ids.insert(e.id);
      CHECK(e.interval == 1);
      CHECK(e.reason == RefreshReason::FirstBuild);
    }
    CHECK(ids == std::set<std::string>{"A:0", "G:0", "F:1", "A:2", "G:2"});

    // In-process cluster: every payload is recorded, nothing crosses a wire.
    CHECK(met.total_bytes == 0);
    CHECK(met.stat_bytes == 0);
    CHECK(ledger.size() > 0);
    for (const LedgerRow& r : ledger.rows()) CHECK(r.bytes == 0);
  }

  TEST_CASE("worker count never changes the update") {
    const NetworkSpec net = small_net();
    Rng init_rng(21), data_rng(22);
    const ParamSet p0 = init_params(net, init_rng);
    std::vector<Batch> steps;
    for (int i = 0; i < 3; ++i)
      steps.push_back(oracle::random_batch(net.input, 5, 8, data_rng));

    std::vector<ParamSet> finals;
    for (const Index K : {Index(1), Index(2), Index(4)}) {
      ClusterSim sim(net, p0, {K, 4, false});
      OptimizerState opt = make_optimizer(net, spngd_config());
      CommLedger ledger;
      Rng mc(23);
      for (Index s = 0; s < 3; ++s) {
        run_step(sim, steps[s], opt, 0.05, 0.9, s + 1, ledger, mc);
        // Replicas stay exactly synchronized after every step.
        for (Index k = 1; k < K; ++k)
          CHECK(oracle::max_param_diff(sim.replica(k), sim.replica(0)) == 0.0);
      }
      finals.push_back(sim.replica(0));
    }
    CHECK(oracle::max_param_diff(finals[0], finals[1]) <= 1e-9);
    CHECK(oracle::max_param_diff(finals[0], finals[2]) <= 1e-9);
  }

  TEST_CASE("sampled-label mode is deterministic in the Monte Carlo stream") {
    const NetworkSpec net = small_net();
    Rng init_rng(31), data_rng(32);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 5, 8, data_rng);
    OptimizerConfig cfg = spngd_config();
    cfg.fisher_mode = FisherMode::OneMC;

    ParamSet out[3];
    const std::uint64_t seeds[3] = {7, 7, 8};
    for (int i = 0; i < 3; ++i) {
      ClusterSim sim(net, p0, {1, 4, false});
      OptimizerState opt = make_optimizer(net, cfg);
      CommLedger ledger;
      Rng mc(seeds[i]);
      run_step(sim, batch, opt, 0.05, 0.9, 1, ledger, mc);
      out[i] = sim.replica(0);
    }
    CHECK(oracle::max_param_diff(out[0], out[1]) == 0.0);
    CHECK(oracle::max_param_diff(out[0], out[2]) > 0.0);
  }

  TEST_CASE("micro-batch accumulation equals the full batch without BatchNorm") {
    const NetworkSpec net = mlp_net();
    Rng init_rng(41), data_rng(42);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 3, 8, data_rng);

    ClusterSim full(net, p0, {1, 4, false});
    OptimizerState opt_full = make_optimizer(net, spngd_config());
    CommLedger lf;
    Rng mcf(1);
    const StepMetrics m_full =
        run_step(full, batch, opt_full, 0.1, 0.9, 1, lf, mcf);

    ClusterSim micro(net, p0, {1, 4, false});
    OptimizerState opt_micro = make_optimizer(net, spngd_config());
    CommLedger lm;
    Rng mcm(1);
    const StepMetrics m_micro = accumulate_microsteps(
        micro, shard_batch(batch, 2), opt_micro, 0.1, 0.9, 1, lm, mcm);

    CHECK(oracle::max_param_diff(full.replica(0), micro.replica(0)) <= 1e-12);
    CHECK(m_micro.loss == doctest::Approx(m_full.loss).epsilon(1e-12));
    CHECK(m_micro.train_acc == m_full.train_acc);
  }

  TEST_CASE("accumulation rejects empty and ragged micro-batch lists") {
    const NetworkSpec net = mlp_net();
    Rng init_rng(51), data_rng(52);
    const ParamSet p0 = init_params(net, init_rng);
    ClusterSim sim(net, p0, {2, 4, false});
    OptimizerState opt = make_optimizer(net, spngd_config());
    CommLedger ledger;
    Rng mc(1);

    CHECK_THROWS_AS(
        accumulate_microsteps(sim, {}, opt, 0.1, 0.9, 1, ledger, mc),
        EmptyAccumulation);

    const Batch b4 = oracle::random_batch(net.input, 3, 4, data_rng);
    const Batch b6 = oracle::random_batch(net.input, 3, 6, data_rng);
    CHECK_THROWS_AS(
        accumulate_microsteps(sim, {b4, b6}, opt, 0.1, 0.9, 1, ledger, mc),
        ShapeMismatch);

    const Batch b5 = oracle::random_batch(net.input, 3, 5, data_rng);
    CHECK_THROWS_AS(run_step(sim, b5, opt, 0.1, 0.9, 1, ledger, mc),
                    IndivisibleBatch);
  }

  TEST_CASE("sgd mode communicates only gradients and parameters") {
    const NetworkSpec net = small_net();
    Rng init_rng(61), data_rng(62);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 5, 8, data_rng);
    OptimizerConfig cfg;
    cfg.sgd = true;

    ClusterSim sim(net, p0, {2, 4, false});
    OptimizerState opt = make_optimizer(net, cfg);
    CommLedger ledger;
    Rng mc(1);
    const StepMetrics met = run_step(sim, batch, opt, 0.1, 0.9, 1, ledger, mc);

    CHECK(met.refreshes.empty());
    CHECK(met.stat_bytes == 0);
    CHECK(met.total_bytes > 0);  // gradients and weights still move
    for (const LedgerRow& r : ledger.rows()) {
      const bool grad = r.statistic_id.rfind("grad:", 0) == 0;
      const bool weight = r.statistic_id.rfind("w:", 0) == 0;
      CHECK((grad || weight));
      CHECK_FALSE(r.skipped);
    }
    for (const LayerPrecond& lp : opt.blocks) {
      CHECK_FALSE(lp.kron.has_value());
      CHECK_FALSE(lp.unit_bn.has_value());
      CHECK_FALSE(lp.full_bn.has_value());
    }

    // Worker count still does not change the SGD update.
    ClusterSim sim1(net, p0, {1, 4, false});
    OptimizerState opt1 = make_optimizer(net, cfg);
    CommLedger l1;
    Rng mc1(1);
    run_step(sim1, batch, opt1, 0.1, 0.9, 1, l1, mc1);
    CHECK(oracle::max_param_diff(sim.replica(0), sim1.replica(0)) <= 1e-12);
  }

  TEST_CASE("stale schedule skips communication exactly on off-schedule steps") {
    const NetworkSpec net = small_net();
    Rng init_rng(71), data_rng(72);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 5, 8, data_rng);

    // Zero learning rate and no rescaling freeze the parameters, so the
    // statistics are bitwise constant and the refresh trace is exact.
    OptimizerConfig cfg = spngd_config();
    cfg.rescale = false;

    ClusterSim sim(net, p0, {2, 4, false});
    OptimizerState opt = make_optimizer(net, cfg);
    CommLedger ledger;
    Rng mc(1);

    std::map<std::string, std::vector<Index>> real_steps, skip_steps;
    std::map<Index, std::vector<RefreshEvent>> events;
    for (Index step = 1; step <= 5; ++step) {
      const StepMetrics met =
          run_step(sim, batch, opt, 0.0, 0.0, step, ledger, mc);
      events[step] = met.refreshes;
      for (const LedgerRow& r : rows_for_step(ledger, step)) {
        const bool is_stat = r.statistic_id.rfind("A:", 0) == 0 ||
                             r.statistic_id.rfind("G:", 0) == 0 ||
                             r.statistic_id.rfind("F:", 0) == 0;
        if (!is_stat) continue;
        (r.skipped ? skip_steps : real_steps)[r.statistic_id].push_back(step);
        if (r.skipped) {
          CHECK(r.elements == 0);
          CHECK(r.bytes == 0);
        }
      }
    }

    const std::vector<Index> want_real = {1, 2, 3, 5};
    const std::vector<Index> want_skip = {4};
    for (const char* id : {"A:0", "G:0", "F:1", "A:2", "G:2"}) {
      CAPTURE(id);
      CHECK(real_steps[id] == want_real);
      CHECK(skip_steps[id] == want_skip);
    }

    // The refresh events carry the Fibonacci intervals and reasons.
    REQUIRE(events[1].size() == 5);
    for (const RefreshEvent& e : events[1]) {
      CHECK(e.interval == 1);
      CHECK(e.reason == RefreshReason::FirstBuild);
    }
    for (const RefreshEvent& e : events[2]) {
      CHECK(e.interval == 1);
      CHECK(e.reason == RefreshReason::Dissimilar2);
    }
    for (const RefreshEvent& e : events[3]) {
      CHECK(e.interval == 2);
      CHECK(e.reason == RefreshReason::SimilarBoth);
    }
    CHECK(events[4].empty());
    for (const RefreshEvent& e : events[5]) {
      CHECK(e.interval == 3);
      CHECK(e.reason == RefreshReason::SimilarBoth);
    }

    // Off-schedule steps ship no statistic bytes but still ship the rest.
    LedgerReport rep = ledger_report(ledger);
    CHECK(rep.steps == 5);
    Index step4_stat = 0;
    for (const LedgerRow& r : rows_for_step(ledger, 4))
      if (!r.skipped && (r.statistic_id[0] == 'A' || r.statistic_id[0] == 'G' ||
                         r.statistic_id[0] == 'F'))
        step4_stat += r.bytes;
    CHECK(step4_stat == 0);
    CHECK(rep.reduction_rate < 1.0);
    CHECK(rep.stat_bytes < rep.stat_bytes_every_step);
  }

  TEST_CASE("disabled staleness rebuilds every statistic every step") {
    const NetworkSpec net = small_net();
    Rng init_rng(81), data_rng(82);
    const ParamSet p0 = init_params(net, init_rng);
    const Batch batch = oracle::random_batch(net.input, 5, 8, data_rng);
    OptimizerConfig cfg = spngd_config();
    cfg.stale_enabled = false;

    ClusterSim sim(net, p0, {2, 4, false});
    OptimizerState opt = make_optimizer(net, cfg);
    CommLedger ledger;
    Rng mc(1);
    for (Index step = 1; step <= 3; ++step) {
      const StepMetrics met =
          run_step(sim, batch, opt, 0.05, 0.9, step, ledger, mc);
      CHECK(met.refreshes.size() == 5);
      for (const LedgerRow& r : rows_for_step(ledger, step))
        CHECK_FALSE(r.skipped);
    }
    CHECK(ledger_report(ledger).reduction_rate == 1.0);
  }

  TEST_CASE("compensated accumulation stays close to the plain path") {
    const NetworkSpec net = small_net();
    Rng init_rng(91), data_rng(92);
    const ParamSet p0 = init_params(net, init_rng);
    std::vector<Batch> steps;
    for (int i = 0; i < 2; ++i)
      steps.push_back(oracle::random_batch(net.input, 5, 8, data_rng));

    ClusterSim plain(net, p0, {4, 4, false});
    ClusterSim comp(net, p0, {4, 4, true});
    OptimizerState opt_a = make_optimizer(net, spngd_config());
    OptimizerState opt_b = make_optimizer(net, spngd_config());
    CommLedger la, lb;
    Rng mca(1), mcb(1);
    for (Index s = 0; s < 2; ++s) {
      run_step(plain, steps[s], opt_a, 0.05, 0.9, s + 1, la, mca);
      run_step(comp, steps[s], opt_b, 0.05, 0.9, s + 1, lb, mcb);
    }
    CHECK(oracle::max_param_diff(plain.replica(0), comp.replica(0)) <= 1e-10);
    // Compensation changes arithmetic, not the modeled traffic.
    CHECK(la.size() == lb.size());
    CHECK(ledger_report(la).total_bytes == ledger_report(lb).total_bytes);
  }
}
