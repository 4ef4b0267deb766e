#include "spngd/schemes.hpp"

#include <cmath>
#include <utility>

#include "spngd/errors.hpp"

namespace spngd {

namespace {
struct NamedPreset {
  const char* name;
  Index bs;
  double alpha_mixup, p_decay, e_start, e_end, eta0, m0, lambda, epochs;
};

// Published hyperparameter rows for the six large-batch regimes.
constexpr NamedPreset kPresets[] = {
    {"bs4k", 4096, 0.4, 11.0, 1.0, 53.0, 8.18e-3, 0.997, 2.5e-4, 35.0},
    {"bs8k", 8192, 0.4, 8.0, 1.0, 53.5, 1.25e-2, 0.993, 2.5e-4, 35.0},
    {"bs16k", 16384, 0.4, 8.0, 1.0, 53.5, 2.5e-2, 0.985, 2.5e-4, 35.0},
    {"bs32k", 32768, 0.6, 3.5, 1.5, 49.5, 3.0e-2, 0.97, 2.0e-4, 45.0},
    {"bs65k", 65536, 0.6, 2.9, 2.0, 64.5, 4.0e-2, 0.95, 1.5e-4, 60.0},
    {"bs131k", 131072, 1.0, 2.9, 3.0, 100.0, 7.0e-2, 0.93, 1.0e-4, 90.0},
};
}  // namespace

TrainConfig preset(const std::string& name) {
  for (const NamedPreset& p : kPresets) {
    if (name != p.name) continue;
    TrainConfig c;
    c.bs = p.bs;
    c.alpha_mixup = p.alpha_mixup;
    c.p_decay = p.p_decay;
    c.e_start = p.e_start;
    c.e_end = p.e_end;
    c.eta0 = p.eta0;
    c.m0 = p.m0;
    c.lambda = p.lambda;
    c.epochs = p.epochs;
    return c;
  }
  throw ValidationError("preset", "unknown preset \"" + name + "\"");
}

bool has_preset(const std::string& name) {
  for (const NamedPreset& p : kPresets)
    if (name == p.name) return true;
  return false;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const NamedPreset& p : kPresets) out.emplace_back(p.name);
  return out;
}

double lr_at(const TrainConfig& cfg, double epoch) {
  if (epoch <= cfg.e_start) return cfg.eta0;
  if (epoch >= cfg.e_end) return 0.0;
  const double frac = (epoch - cfg.e_start) / (cfg.e_end - cfg.e_start);
  return cfg.eta0 * std::pow(1.0 - frac, cfg.p_decay);
}

double momentum_at(const TrainConfig& cfg, double epoch) {
  return (cfg.m0 / cfg.eta0) * lr_at(cfg, epoch);
}

Batch running_mixup(const Batch& raw, MixupState& state, double alpha_mixup,
                    Rng& rng) {
  if (!state.has_prev) {
    state.has_prev = true;
    state.x = raw.x;
    state.t = raw.t;
    return raw;
  }
  if (state.x.rows() != raw.x.rows() || state.x.cols() != raw.x.cols() ||
      state.t.rows() != raw.t.rows() || state.t.cols() != raw.t.cols())
    throw ShapeMismatch("running_mixup: state shape does not match batch");
  const double lam = rng.beta(alpha_mixup, alpha_mixup);
  Batch out;
  out.shape = raw.shape;
  out.x = lam * raw.x + (1.0 - lam) * state.x;
  out.t = lam * raw.t + (1.0 - lam) * state.t;
  state.x = out.x;
  state.t = out.t;
  return out;
}

void random_erase(Batch& batch, const TrainConfig& cfg, Rng& rng) {
  const Shape sh = batch.shape;
  if (batch.x.cols() != sh.count())
    throw ShapeMismatch("random_erase: batch width does not match shape");
  const double hw = static_cast<double>(sh.h) * static_cast<double>(sh.w);
  for (Index s = 0; s < batch.x.rows(); ++s) {
    if (rng.uniform() >= cfg.erase_p) continue;
    const double area =
        rng.uniform(cfg.erase_area_lo, cfg.erase_area_hi) * hw;
    const double aspect =
        rng.uniform(cfg.erase_aspect_lo, cfg.erase_aspect_hi);
    Index he = std::max<Index>(
        1, static_cast<Index>(std::floor(std::sqrt(area * aspect))));
    Index we = std::max<Index>(
        1, static_cast<Index>(std::floor(std::sqrt(area / aspect))));
    if (rng.uniform() < 0.5) std::swap(he, we);
    if (he > sh.h || we > sh.w) continue;  // cannot host the region
    const Index y0 = static_cast<Index>(rng.uniform_int(sh.h - he + 1));
    const Index x0 = static_cast<Index>(rng.uniform_int(sh.w - we + 1));
    for (Index ch = 0; ch < sh.c; ++ch)
      for (Index y = y0; y < y0 + he; ++y)
        for (Index x = x0; x < x0 + we; ++x)
          batch.x(s, (ch * sh.h + y) * sh.w + x) = 0.0;
  }
}

Matrix rescale_weights(const Matrix& w, Index d_out) {
  const double target = std::sqrt(2.0 * static_cast<double>(d_out));
  return target * w / (w.norm() + 1e-9);
}

}  // namespace spngd
