#pragma once

#include <optional>
#include <vector>

#include "spngd/linalg.hpp"
#include "spngd/net.hpp"

namespace spngd {

// Which gradients feed the Fisher estimate: true-label gradients from the
// ordinary loss backward (empirical Fisher, no extra pass) or gradients from
// one extra backward with labels sampled from the model's own predictions.
enum class FisherMode { Empirical, OneMC };

// BatchNorm curvature granularity: per-channel 2x2 blocks, or one full
// 2c x 2c block per layer (interleaved gamma_i, beta_i ordering).
enum class BnMode { Unit, FullBlockDiag2c };

// Kronecker-factored curvature of one Conv/FC layer: raw factors A and G,
// their damped inverses per the pi-balanced split
// (G + sqrt(lambda)/pi I)^-1 (x) (A + pi*sqrt(lambda) I)^-1,
// and freshness bookkeeping for the stale-statistics scheduler.
struct KroneckerBlock {
  Index layer = -1;
  SymMatrix A, G;
  SymMatrix A_inv, G_inv;
  double pi = 1.0;
  double lambda = 0.0;
  Index fresh_step_a = -1, fresh_step_g = -1;
};

// Per-channel 2x2 second-moment blocks of (grad gamma, grad beta) and their
// damped inverses, stored as the three distinct entries of each symmetric
// block.
struct UnitBnBlock {
  Index layer = -1;
  Vector fgg, fgb, fbb;
  Vector igg, igb, ibb;
  double lambda = 0.0;
  Index fresh_step = -1;
};

// Full 2c x 2c BatchNorm curvature (cross-channel terms retained).
struct FullBnBlock {
  Index layer = -1;
  SymMatrix F;
  SymMatrix F_inv;
  double lambda = 0.0;
  Index fresh_step = -1;
};

// Activation second moment over samples [lo, hi). FC: E[a a^T]; Conv:
// E[M_A M_A^T]/(h*w) with the spatial sum inside the product. `compensated`
// switches the cross-sample accumulation to Neumaier summation.
SymMatrix factor_A(const CaptureBuffer& capture, const NetworkSpec& net,
                   Index layer, Index lo, Index hi, bool compensated = false);
SymMatrix factor_A(const CaptureBuffer& capture, const NetworkSpec& net,
                   Index layer);

// Output-gradient second moment over samples [lo, hi). FC: E[g g^T]; Conv:
// E[grad_MS grad_MS^T] (spatial sum inside, no 1/(h*w) factor).
SymMatrix factor_G(const CaptureBuffer& capture, const NetworkSpec& net,
                   Index layer, FisherMode mode, Index lo, Index hi,
                   bool compensated = false);
SymMatrix factor_G(const CaptureBuffer& capture, const NetworkSpec& net,
                   Index layer, FisherMode mode);

// Per-channel 2x2 second moments of the per-sample (grad gamma, grad beta)
// pairs over samples [lo, hi).
UnitBnBlock build_bn_block(const CaptureBuffer& capture, const NetworkSpec& net,
                           Index layer, FisherMode mode, Index lo, Index hi,
                           bool compensated = false);
UnitBnBlock build_bn_block(const CaptureBuffer& capture, const NetworkSpec& net,
                           Index layer,
                           FisherMode mode = FisherMode::Empirical);

// Full 2c x 2c second moment of the interleaved (gamma_i, beta_i) gradient.
SymMatrix build_bn_full(const CaptureBuffer& capture, const NetworkSpec& net,
                        Index layer, FisherMode mode, Index lo, Index hi,
                        bool compensated = false);

// Recomputes pi = sqrt(avg_eig(A)/avg_eig(G)) (forced to 1 when either
// average eigenvalue is below 1e-12) and both damped inverses.
void damp_and_invert(KroneckerBlock& block, double lambda);

// Damped 2x2 inverses (F_i + lambda I)^-1 per channel.
void damp_bn(UnitBnBlock& block, double lambda);

void damp_bn_full(FullBnBlock& block, double lambda);

// G_inv * grad * A_inv under the row-major vec convention.
Matrix precondition(const KroneckerBlock& block, const Matrix& grad);

// Per channel i: (F_i + lambda I)^-1 (g_gamma_i, g_beta_i).
std::pair<Vector, Vector> precondition_bn(const UnitBnBlock& block,
                                          const Vector& grad_gamma,
                                          const Vector& grad_beta,
                                          double lambda);

std::pair<Vector, Vector> precondition_bn_full(const FullBnBlock& block,
                                               const Vector& grad_gamma,
                                               const Vector& grad_beta);

// The preconditioner for one layer; at most one member is set. All members
// empty means the layer falls back to the plain-gradient (SGD) update.
struct LayerPrecond {
  std::optional<KroneckerBlock> kron;
  std::optional<UnitBnBlock> unit_bn;
  std::optional<FullBnBlock> full_bn;
};

struct StepResult {
  ParamSet params;
  ParamSet velocity;  // params' - params, exactly
};

// One update: w <- w - eta * P(grad) + momentum * v, where P is each layer's
// preconditioner (identity when `blocks` is null -- the SGD path). Throws
// StaleBeyondLimit if a preconditioned layer's block was never built.
StepResult ngd_step(const NetworkSpec& net, const ParamSet& params,
                    const ParamSet& grads,
                    const std::vector<LayerPrecond>* blocks, double eta,
                    double momentum, const ParamSet& velocity);

}  // namespace spngd
