#include "spngd/driver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spngd/errors.hpp"

namespace spngd {

namespace {

using nlohmann::json;

// Seed-stream tags; every random consumer gets its own derived stream.
enum StreamTag : std::uint64_t {
  kInitStream = 2,
  kShuffleStream = 3,
  kAugmentStream = 4,
  kMcStream = 5,
  kCenterStream = 10,  // class centers, shared by the train and eval splits
  kTrainDataStream = 11,
  kEvalDataStream = 12,
};

[[noreturn]] void bad_field(const std::string& field, const std::string& msg) {
  throw ValidationError(field, field + ": " + msg);
}

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& prefix) {
  for (const auto& item : j.items()) {
    if (allowed.find(item.key()) == allowed.end()) {
      const std::string field =
          prefix.empty() ? item.key() : prefix + "." + item.key();
      bad_field(field, "unknown key");
    }
  }
}

double get_num(const json& j, const std::string& key,
               const std::string& field) {
  const json& v = j.at(key);
  if (!v.is_number()) bad_field(field, "expected a number");
  return v.get<double>();
}

Index get_int(const json& j, const std::string& key,
              const std::string& field) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) bad_field(field, "expected an integer");
  return v.get<Index>();
}

std::uint64_t get_u64(const json& j, const std::string& key,
                      const std::string& field) {
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !v.is_number_integer())
    bad_field(field, "expected a nonnegative integer");
  const auto s = v.get<std::int64_t>();
  if (s < 0) bad_field(field, "expected a nonnegative integer");
  return static_cast<std::uint64_t>(s);
}

bool get_bool(const json& j, const std::string& key,
              const std::string& field) {
  const json& v = j.at(key);
  if (!v.is_boolean()) bad_field(field, "expected true or false");
  return v.get<bool>();
}

std::string get_str(const json& j, const std::string& key,
                    const std::string& field) {
  const json& v = j.at(key);
  if (!v.is_string()) bad_field(field, "expected a string");
  return v.get<std::string>();
}

Shape shape_from_json(const json& j, const std::string& field) {
  if (!j.is_object()) bad_field(field, "expected an object {c, h, w}");
  reject_unknown(j, {"c", "h", "w"}, field);
  Shape s;
  for (const char* k : {"c", "h", "w"}) {
    if (!j.contains(k)) bad_field(field + "." + k, "missing");
    const Index v = get_int(j, k, field + "." + std::string(k));
    if (v < 1) bad_field(field + "." + k, "must be >= 1");
    (k[0] == 'c' ? s.c : k[0] == 'h' ? s.h : s.w) = v;
  }
  return s;
}

std::vector<LayerSpec> layers_from_json(const json& j) {
  if (!j.is_array() || j.empty())
    bad_field("network", "expected a non-empty array of layers");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string field = "network[" + std::to_string(i) + "]";
    const json& lj = j[i];
    if (!lj.is_object()) bad_field(field, "expected a layer object");
    if (!lj.contains("kind")) bad_field(field + ".kind", "missing");
    const std::string kind = get_str(lj, "kind", field + ".kind");
    auto need = [&](const char* k) {
      if (!lj.contains(k)) bad_field(field + "." + k, "missing");
      const Index v = get_int(lj, k, field + "." + std::string(k));
      if (v < 1) bad_field(field + "." + k, "must be >= 1");
      return v;
    };
    auto opt = [&](const char* k, Index dflt, Index min) {
      if (!lj.contains(k)) return dflt;
      const Index v = get_int(lj, k, field + "." + std::string(k));
      if (v < min) bad_field(field + "." + k, "out of range");
      return v;
    };
    if (kind == "fc") {
      reject_unknown(lj, {"kind", "d_in", "d_out"}, field);
      layers.push_back(LayerSpec::fc(need("d_in"), need("d_out")));
    } else if (kind == "conv") {
      reject_unknown(lj, {"kind", "c_in", "c_out", "kernel", "stride",
                          "padding"},
                     field);
      layers.push_back(LayerSpec::conv(need("c_in"), need("c_out"),
                                       need("kernel"), opt("stride", 1, 1),
                                       opt("padding", 0, 0)));
    } else if (kind == "batchnorm") {
      reject_unknown(lj, {"kind", "channels"}, field);
      layers.push_back(LayerSpec::batch_norm(need("channels")));
    } else {
      bad_field(field + ".kind",
                "must be \"fc\", \"conv\", or \"batchnorm\"");
    }
  }
  return layers;
}

DatasetSpec data_from_json(const json& j) {
  if (!j.is_object()) bad_field("dataset", "expected an object");
  reject_unknown(
      j, {"kind", "train_size", "eval_size", "noise", "path", "eval_path"},
      "dataset");
  DatasetSpec d;
  if (j.contains("kind")) d.kind = get_str(j, "kind", "dataset.kind");
  if (d.kind != "synthetic-gaussian" && d.kind != "image-dir")
    bad_field("dataset.kind",
              "must be \"synthetic-gaussian\" or \"image-dir\"");
  if (j.contains("train_size")) {
    d.train_size = get_int(j, "train_size", "dataset.train_size");
    if (d.train_size < 1) bad_field("dataset.train_size", "must be >= 1");
  }
  if (j.contains("eval_size")) {
    d.eval_size = get_int(j, "eval_size", "dataset.eval_size");
    if (d.eval_size < 0) bad_field("dataset.eval_size", "must be >= 0");
  }
  if (j.contains("noise")) {
    d.noise = get_num(j, "noise", "dataset.noise");
    if (d.noise < 0) bad_field("dataset.noise", "must be >= 0");
  }
  if (j.contains("path")) d.path = get_str(j, "path", "dataset.path");
  if (j.contains("eval_path"))
    d.eval_path = get_str(j, "eval_path", "dataset.eval_path");
  if (d.kind == "image-dir" && d.path.empty())
    bad_field("dataset.path", "required for image-dir datasets");
  return d;
}

RunManifest manifest_from_json(const json& j) {
  static const std::set<std::string> kTopKeys = {
      "preset",        "bs",
      "alpha_mixup",   "p_decay",
      "e_start",       "e_end",
      "eta0",          "m0",
      "lambda",        "epochs",
      "erase_p",       "erase_area_lo",
      "erase_area_hi", "erase_aspect_lo",
      "erase_aspect_hi", "seed",
      "input",         "network",
      "num_classes",   "dataset",
      "optimizer",     "fisher_mode",
      "bn_mode",       "stale_enabled",
      "stale_alpha",   "workers",
      "n_accum",       "elem_size",
      "compensated",   "output_dir",
  };
  reject_unknown(j, kTopKeys, "");

  RunManifest m;
  if (j.contains("preset")) m.train = preset(get_str(j, "preset", "preset"));
  TrainConfig& c = m.train;
  auto num = [&](const char* k, double& dst) {
    if (j.contains(k)) dst = get_num(j, k, k);
  };
  if (j.contains("bs")) {
    c.bs = get_int(j, "bs", "bs");
    if (c.bs < 1) bad_field("bs", "must be >= 1");
  }
  num("alpha_mixup", c.alpha_mixup);
  num("p_decay", c.p_decay);
  num("e_start", c.e_start);
  num("e_end", c.e_end);
  num("eta0", c.eta0);
  num("m0", c.m0);
  num("lambda", c.lambda);
  num("epochs", c.epochs);
  num("erase_p", c.erase_p);
  num("erase_area_lo", c.erase_area_lo);
  num("erase_area_hi", c.erase_area_hi);
  num("erase_aspect_lo", c.erase_aspect_lo);
  num("erase_aspect_hi", c.erase_aspect_hi);
  if (j.contains("seed")) c.seed = get_u64(j, "seed", "seed");
  if (c.alpha_mixup < 0) bad_field("alpha_mixup", "must be >= 0");
  if (c.p_decay <= 0) bad_field("p_decay", "must be > 0");
  if (c.e_end <= c.e_start) bad_field("e_end", "must exceed e_start");
  if (c.eta0 <= 0) bad_field("eta0", "must be > 0");
  if (c.m0 < 0) bad_field("m0", "must be >= 0");
  if (c.lambda <= 0) bad_field("lambda", "must be > 0");
  if (c.epochs < 0) bad_field("epochs", "must be >= 0");
  if (c.erase_p < 0 || c.erase_p > 1) bad_field("erase_p", "must be in [0, 1]");
  if (!(c.erase_area_lo > 0 && c.erase_area_lo <= c.erase_area_hi &&
        c.erase_area_hi <= 1))
    bad_field("erase_area_lo", "need 0 < lo <= hi <= 1");
  if (!(c.erase_aspect_lo > 0 && c.erase_aspect_lo <= c.erase_aspect_hi))
    bad_field("erase_aspect_lo", "need 0 < lo <= hi");

  if (!j.contains("input")) bad_field("input", "missing");
  m.net.input = shape_from_json(j.at("input"), "input");
  if (!j.contains("num_classes")) bad_field("num_classes", "missing");
  m.net.num_classes = get_int(j, "num_classes", "num_classes");
  if (m.net.num_classes < 2) bad_field("num_classes", "must be >= 2");
  if (!j.contains("network")) bad_field("network", "missing");
  m.net.layers = layers_from_json(j.at("network"));
  try {
    compile_pipeline(m.net);
  } catch (const ShapeMismatch& e) {
    throw ValidationError("network", std::string("network: ") + e.what());
  }

  if (j.contains("optimizer")) {
    m.optimizer = get_str(j, "optimizer", "optimizer");
    if (m.optimizer != "spngd" && m.optimizer != "sgd")
      bad_field("optimizer", "must be \"spngd\" or \"sgd\"");
  }
  if (j.contains("fisher_mode")) {
    const std::string v = get_str(j, "fisher_mode", "fisher_mode");
    if (v == "emp")
      m.fisher_mode = FisherMode::Empirical;
    else if (v == "1mc")
      m.fisher_mode = FisherMode::OneMC;
    else
      bad_field("fisher_mode", "must be \"emp\" or \"1mc\"");
  }
  if (j.contains("bn_mode")) {
    const std::string v = get_str(j, "bn_mode", "bn_mode");
    if (v == "unit")
      m.bn_mode = BnMode::Unit;
    else if (v == "full-block-diag-2c")
      m.bn_mode = BnMode::FullBlockDiag2c;
    else
      bad_field("bn_mode", "must be \"unit\" or \"full-block-diag-2c\"");
  }
  if (j.contains("stale_enabled"))
    m.stale_enabled = get_bool(j, "stale_enabled", "stale_enabled");
  if (j.contains("stale_alpha")) {
    m.stale_alpha = get_num(j, "stale_alpha", "stale_alpha");
    if (m.stale_alpha < 0) bad_field("stale_alpha", "must be >= 0");
  }
  if (j.contains("workers")) {
    m.workers = get_int(j, "workers", "workers");
    if (m.workers < 1) bad_field("workers", "must be >= 1");
  }
  if (j.contains("n_accum")) {
    m.n_accum = get_int(j, "n_accum", "n_accum");
    if (m.n_accum < 1) bad_field("n_accum", "must be >= 1");
  }
  if (j.contains("elem_size")) {
    const Index v = get_int(j, "elem_size", "elem_size");
    if (v != 2 && v != 4 && v != 8) bad_field("elem_size", "must be 2, 4, or 8");
    m.elem_size = static_cast<int>(v);
  }
  if (j.contains("compensated"))
    m.compensated = get_bool(j, "compensated", "compensated");
  if (j.contains("output_dir"))
    m.output_dir = get_str(j, "output_dir", "output_dir");

  if (j.contains("dataset")) m.data = data_from_json(j.at("dataset"));
  m.data.classes = m.net.num_classes;
  m.data.shape = m.net.input;

  if (c.bs % m.n_accum != 0)
    bad_field("n_accum", "must divide the batch size");
  if ((c.bs / m.n_accum) % m.workers != 0)
    bad_field("workers", "must divide the micro-batch size");
  if (m.data.kind == "synthetic-gaussian" && c.bs > m.data.train_size)
    bad_field("bs", "exceeds dataset.train_size");
  return m;
}

struct PathTok {
  std::string key;
  Index idx = -1;
};

std::vector<PathTok> parse_override_path(const std::string& path) {
  std::vector<PathTok> toks;
  std::size_t pos = 0;
  while (pos <= path.size()) {
    const std::size_t dot = path.find('.', pos);
    std::string piece = path.substr(
        pos, dot == std::string::npos ? std::string::npos : dot - pos);
    PathTok t;
    const std::size_t br = piece.find('[');
    if (br != std::string::npos) {
      if (piece.back() != ']' || br + 2 > piece.size() - 1)
        throw ValidationError("override",
                              "override: bad array index in \"" + path + "\"");
      const std::string digits = piece.substr(br + 1, piece.size() - br - 2);
      if (digits.empty() ||
          digits.find_first_not_of("0123456789") != std::string::npos)
        throw ValidationError("override",
                              "override: bad array index in \"" + path + "\"");
      t.idx = std::stoll(digits);
      piece = piece.substr(0, br);
    }
    if (piece.empty())
      throw ValidationError("override",
                            "override: empty path segment in \"" + path + "\"");
    t.key = piece;
    toks.push_back(std::move(t));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return toks;
}

void apply_override_json(json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError(
        "override", "override must look like key=value: \"" + assignment + "\"");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;  // unquoted strings are taken literally
  }
  const std::vector<PathTok> toks = parse_override_path(path);
  json* cur = &j;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const PathTok& t = toks[i];
    if (!cur->is_object())
      throw ValidationError(
          "override", "override: \"" + path + "\" descends into a non-object");
    json& slot = (*cur)[t.key];
    json* next = &slot;
    if (t.idx >= 0) {
      if (!slot.is_array() || t.idx >= static_cast<Index>(slot.size()))
        throw ValidationError(
            "override", "override: index out of range in \"" + path + "\"");
      next = &slot[t.idx];
    }
    if (i + 1 == toks.size())
      *next = value;
    else
      cur = next;
  }
}

Dataset build_dataset(const DatasetSpec& d, std::uint64_t seed,
                      std::uint64_t tag, bool eval_split) {
  if (d.kind == "synthetic-gaussian") {
    Rng center_rng(Rng::derive(seed, kCenterStream));
    Rng noise_rng(Rng::derive(seed, tag));
    const Index n = eval_split ? d.eval_size : d.train_size;
    return synth_gaussian(n, d.shape, d.classes, d.noise, center_rng,
                          noise_rng);
  }
  const std::string& dir = eval_split ? d.eval_path : d.path;
  Dataset ds = load_dataset(dir);
  const std::string field = eval_split ? "dataset.eval_path" : "dataset.path";
  if (!(ds.shape == d.shape))
    throw ValidationError(field, field + ": data shape does not match input");
  if (ds.num_classes != d.classes)
    throw ValidationError(field,
                          field + ": class count does not match num_classes");
  return ds;
}

std::string join_refreshes(const std::vector<RefreshEvent>& evs) {
  std::string out;
  for (const RefreshEvent& e : evs) {
    if (!out.empty()) out += ';';
    out += e.id + "=" + std::to_string(e.interval);
  }
  return out;
}

}  // namespace

RunManifest parse_manifest(const std::string& json_text,
                           const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("manifest: root must be a JSON object");
  for (const std::string& ov : overrides) apply_override_json(j, ov);
  return manifest_from_json(j);
}

RunManifest load_manifest(const std::string& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_manifest(ss.str(), overrides);
}

void write_metrics_csv(std::ostream& os,
                       const std::vector<MetricsRecord>& records) {
  os << "step,epoch,loss,train_acc,lr,momentum,eval_acc,refreshed,"
        "stat_bytes,total_bytes\n";
  for (const MetricsRecord& r : records) {
    os << r.step << ',' << format_double(r.epoch) << ','
       << format_double(r.loss) << ',' << format_double(r.train_acc) << ','
       << format_double(r.lr) << ',' << format_double(r.momentum) << ',';
    if (r.has_eval) os << format_double(r.eval_acc);
    os << ',' << r.refreshed << ',' << r.stat_bytes << ',' << r.total_bytes
       << '\n';
  }
}

TrainHistory run_training(const RunManifest& m, CommLedger* ledger) {
  compile_pipeline(m.net);  // throws on inconsistent hand-built manifests
  const TrainConfig& cfg = m.train;
  if (m.n_accum < 1 || cfg.bs % m.n_accum != 0)
    throw ValidationError("n_accum", "n_accum: must divide the batch size");
  if (m.workers < 1 || (cfg.bs / m.n_accum) % m.workers != 0)
    throw ValidationError("workers",
                          "workers: must divide the micro-batch size");
  if (m.optimizer != "spngd" && m.optimizer != "sgd")
    throw ValidationError("optimizer",
                          "optimizer: must be \"spngd\" or \"sgd\"");

  Dataset train_ds =
      build_dataset(m.data, cfg.seed, kTrainDataStream, /*eval_split=*/false);
  const bool want_eval = m.data.kind == "image-dir" ? !m.data.eval_path.empty()
                                                    : m.data.eval_size > 0;
  Dataset eval_ds;
  if (want_eval)
    eval_ds =
        build_dataset(m.data, cfg.seed, kEvalDataStream, /*eval_split=*/true);

  const Index N = train_ds.size();
  if (cfg.bs > N)
    throw ValidationError("bs", "bs: exceeds the training set size");
  const Index steps_per_epoch = N / cfg.bs;
  const Index total_steps = static_cast<Index>(
      std::floor(cfg.epochs * static_cast<double>(steps_per_epoch) + 1e-9));

  Rng init_rng(Rng::derive(cfg.seed, kInitStream));
  Rng shuffle_rng(Rng::derive(cfg.seed, kShuffleStream));
  Rng augment_rng(Rng::derive(cfg.seed, kAugmentStream));
  Rng mc_rng(Rng::derive(cfg.seed, kMcStream));

  ParamSet params = init_params(m.net, init_rng);
  ClusterSim cluster(m.net, params,
                     ClusterConfig{m.workers, m.elem_size, m.compensated});
  OptimizerConfig ocfg;
  ocfg.sgd = (m.optimizer == "sgd");
  ocfg.fisher_mode = m.fisher_mode;
  ocfg.bn_mode = m.bn_mode;
  ocfg.lambda = cfg.lambda;
  ocfg.stale_enabled = m.stale_enabled;
  ocfg.stale_alpha = m.stale_alpha;
  OptimizerState opt = make_optimizer(m.net, ocfg);

  CommLedger local_ledger;
  CommLedger& led = ledger ? *ledger : local_ledger;

  std::vector<Index> order(N);
  std::iota(order.begin(), order.end(), Index{0});
  MixupState mixup;
  const Index micro_rows = cfg.bs / m.n_accum;

  TrainHistory hist;
  hist.net = m.net;
  hist.final_loss = std::numeric_limits<double>::quiet_NaN();
  for (Index s = 1; s <= total_steps; ++s) {
    try {
      const Index in_epoch = (s - 1) % steps_per_epoch;
      if (in_epoch == 0) shuffle_rng.shuffle(order);
      const std::vector<Index> idx(
          order.begin() + in_epoch * cfg.bs,
          order.begin() + (in_epoch + 1) * cfg.bs);
      Batch batch = make_batch(train_ds, idx);
      if (cfg.erase_p > 0) random_erase(batch, cfg, augment_rng);
      if (cfg.alpha_mixup > 0)
        batch = running_mixup(batch, mixup, cfg.alpha_mixup, augment_rng);

      const double epoch_now =
          static_cast<double>((s - 1) * cfg.bs) / static_cast<double>(N);
      const double lr = lr_at(cfg, epoch_now);
      const double mom = momentum_at(cfg, epoch_now);

      std::vector<Batch> micros(m.n_accum);
      for (Index a = 0; a < m.n_accum; ++a) {
        micros[a].x = batch.x.middleRows(a * micro_rows, micro_rows);
        micros[a].t = batch.t.middleRows(a * micro_rows, micro_rows);
        micros[a].shape = batch.shape;
      }
      const StepMetrics met =
          accumulate_microsteps(cluster, micros, opt, lr, mom, s, led, mc_rng);

      MetricsRecord rec;
      rec.step = s;
      rec.epoch = static_cast<double>(s * cfg.bs) / static_cast<double>(N);
      rec.loss = met.loss;
      rec.train_acc = met.train_acc;
      rec.lr = lr;
      rec.momentum = mom;
      rec.refreshed = join_refreshes(met.refreshes);
      rec.stat_bytes = met.stat_bytes;
      rec.total_bytes = met.total_bytes;
      if (want_eval && (s * cfg.bs) / N > ((s - 1) * cfg.bs) / N) {
        rec.has_eval = true;
        rec.eval_acc = evaluate(m.net, cluster.replica(0), eval_ds);
      }
      hist.final_loss = rec.loss;
      hist.records.push_back(std::move(rec));
    } catch (const Error& e) {
      throw Error("step " + std::to_string(s) + ": " + e.what());
    }
  }
  hist.params = cluster.replica(0);
  return hist;
}

TrainHistory train_to_files(const RunManifest& m) {
  std::filesystem::create_directories(m.output_dir);
  CommLedger ledger;
  TrainHistory hist = run_training(m, &ledger);
  {
    std::ofstream os(m.output_dir + "/metrics.csv", std::ios::trunc);
    if (!os)
      throw ValidationError("output_dir",
                            "cannot open " + m.output_dir + "/metrics.csv");
    write_metrics_csv(os, hist.records);
  }
  {
    std::ofstream os(m.output_dir + "/ledger.csv", std::ios::trunc);
    if (!os)
      throw ValidationError("output_dir",
                            "cannot open " + m.output_dir + "/ledger.csv");
    ledger.write_csv(os);
  }
  save_checkpoint(hist.net, hist.params, m.output_dir + "/checkpoint.bin");
  if (m.data.kind == "synthetic-gaussian" && m.data.eval_size > 0) {
    const Dataset eval_ds = build_dataset(m.data, m.train.seed,
                                          kEvalDataStream, /*eval_split=*/true);
    save_dataset(eval_ds, m.output_dir + "/eval_data");
  }
  return hist;
}

double evaluate(const NetworkSpec& net, const ParamSet& params,
                const Dataset& ds, Index batch) {
  if (ds.size() < 1) throw EmptyBatch("evaluate: empty dataset");
  if (batch < 1) batch = ds.size();
  Index correct = 0;
  for (Index lo = 0; lo < ds.size(); lo += batch) {
    const Index n = std::min(batch, ds.size() - lo);
    std::vector<Index> idx(n);
    std::iota(idx.begin(), idx.end(), lo);
    const Batch b = make_batch(ds, idx);
    const ForwardResult fwd = forward(net, params, b, Mode::Eval);
    for (Index r = 0; r < n; ++r) {
      Index pred;
      fwd.logits.row(r).maxCoeff(&pred);
      if (pred == ds.labels[lo + r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace spngd
