#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spngd/net.hpp"
#include "spngd/rng.hpp"

namespace spngd {

// Hyperparameters of the large-mini-batch training schemes. Defaults match
// the bs8k preset; `preset()` returns the published rows by name.
struct TrainConfig {
  Index bs = 8192;
  double alpha_mixup = 0.4;
  double p_decay = 8.0;
  double e_start = 1.0;
  double e_end = 53.5;
  double eta0 = 1.25e-2;
  double m0 = 0.993;
  double lambda = 2.5e-4;
  double epochs = 35.0;
  double erase_p = 0.5;
  double erase_area_lo = 0.02, erase_area_hi = 0.25;
  double erase_aspect_lo = 0.3, erase_aspect_hi = 1.0;
  std::uint64_t seed = 1;
};

// Named presets: bs4k, bs8k, bs16k, bs32k, bs65k, bs131k. Throws
// ValidationError("preset", ...) for unknown names.
TrainConfig preset(const std::string& name);
bool has_preset(const std::string& name);
std::vector<std::string> preset_names();

// Polynomial decay eta0 * (1 - (e - e_start)/(e_end - e_start))^p_decay,
// held flat at eta0 before e_start and at 0 after e_end.
double lr_at(const TrainConfig& cfg, double epoch);

// Momentum coupled to the learning rate by the fixed ratio m0/eta0.
double momentum_at(const TrainConfig& cfg, double epoch);

struct MixupState {
  bool has_prev = false;
  Matrix x, t;  // previous step's virtual batch
};

// Blends the raw batch with the previous step's *virtual* batch using one
// Beta(alpha, alpha) draw per step. The first call passes the batch through
// and seeds the state.
Batch running_mixup(const Batch& raw, MixupState& state, double alpha_mixup,
                    Rng& rng);

// With probability erase_p per image, zeroes one rectangle (all channels)
// whose area ratio and aspect are drawn from the configured ranges, with a
// random orientation swap. Skips images too small to host the region.
void random_erase(Batch& batch, const TrainConfig& cfg, Rng& rng);

// Projects a layer weight onto Frobenius norm sqrt(2 * d_out):
// sqrt(2 d_out) * W / (||W|| + 1e-9).
Matrix rescale_weights(const Matrix& w, Index d_out);

}  // namespace spngd
