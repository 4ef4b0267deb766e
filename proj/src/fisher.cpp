#include "spngd/fisher.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace spngd {

namespace {

// Packed accumulator with optional Neumaier compensation; compensation spans
// the cross-sample (and, in dist, cross-worker) additions only.
class Accum {
 public:
  Accum(Index n, bool compensated) : sum_(Vector::Zero(n)), comp_on_(compensated) {
    if (comp_on_) comp_ = Vector::Zero(n);
  }
  void add(Index p, double v) {
    if (!comp_on_) {
      sum_[p] += v;
      return;
    }
    const double s = sum_[p];
    const double t = s + v;
    comp_[p] += (std::abs(s) >= std::abs(v)) ? ((s - t) + v) : ((v - t) + s);
    sum_[p] = t;
  }
  Vector total() const { return comp_on_ ? Vector(sum_ + comp_) : sum_; }

 private:
  Vector sum_, comp_;
  bool comp_on_;
};

void check_layer(const CaptureBuffer& cap, const NetworkSpec& net, Index layer,
                 const char* who) {
  if (layer < 0 || layer >= static_cast<Index>(net.layers.size()))
    throw ShapeMismatch(std::string(who) + ": layer index out of range");
  if (cap.layers.size() != net.layers.size())
    throw ShapeMismatch(std::string(who) + ": capture does not match network");
}

void check_range(const CaptureBuffer& cap, Index lo, Index hi, const char* who) {
  if (lo < 0 || hi > cap.batch_size || hi <= lo)
    throw EmptyBatch(std::string(who) + ": empty sample range");
}

std::string layer_tag(const NetworkSpec& net, Index layer) {
  return "layer " + std::to_string(layer) + " (" +
         net.layers[layer].describe() + ")";
}

// Mean of per-sample outer products b b^T where sample s's block is rows
// [s*r, (s+1)*r) of `stacked`; r == 1 treats each row as the vector itself.
SymMatrix mean_outer(const Matrix& stacked, Index r, Index lo, Index hi,
                     double denom, bool compensated) {
  const Index dim = (r == 1) ? stacked.cols() : r;
  SymMatrix out(dim);
  Accum acc(out.size(), compensated);
  for (Index s = lo; s < hi; ++s) {
    Index p = 0;
    if (r == 1) {
      for (Index i = 0; i < dim; ++i)
        for (Index j = i; j < dim; ++j)
          acc.add(p++, stacked(s, i) * stacked(s, j));
    } else {
      auto block = stacked.middleRows(s * r, r);
      for (Index i = 0; i < dim; ++i)
        for (Index j = i; j < dim; ++j)
          acc.add(p++, block.row(i).dot(block.row(j)));
    }
  }
  out.data() = acc.total() / denom;
  return out;
}

const Matrix& pick_bn_grads(const LayerCapture& lc, FisherMode mode, bool gamma,
                            const std::string& tag) {
  if (mode == FisherMode::OneMC) {
    const Matrix& m = gamma ? lc.bn_ggamma_sampled : lc.bn_gbeta_sampled;
    if (m.size() == 0)
      throw MissingMcPass(tag + ": no sampled-label backward was run");
    return m;
  }
  const Matrix& m = gamma ? lc.bn_ggamma_true : lc.bn_gbeta_true;
  if (m.size() == 0) throw EmptyBatch(tag + ": no captured gradients");
  return m;
}

}  // namespace

SymMatrix factor_A(const CaptureBuffer& cap, const NetworkSpec& net,
                   Index layer, Index lo, Index hi, bool compensated) {
  check_layer(cap, net, layer, "factor_A");
  check_range(cap, lo, hi, "factor_A");
  const LayerSpec& L = net.layers[layer];
  const LayerCapture& lc = cap.layers[layer];
  if (L.kind == LayerKind::BatchNorm)
    throw ShapeMismatch("factor_A: " + layer_tag(net, layer) +
                        " has no Kronecker factors");
  if (lc.act.size() == 0)
    throw EmptyBatch("factor_A: " + layer_tag(net, layer) +
                     ": no captured activations");
  const double n = static_cast<double>(hi - lo);
  if (L.kind == LayerKind::Fc)
    return mean_outer(lc.act, 1, lo, hi, n, compensated);
  const double hw = static_cast<double>(lc.h_out) * static_cast<double>(lc.w_out);
  return mean_outer(lc.act, lc.rows_per_sample, lo, hi, n * hw, compensated);
}

SymMatrix factor_A(const CaptureBuffer& cap, const NetworkSpec& net,
                   Index layer) {
  return factor_A(cap, net, layer, 0, cap.batch_size, false);
}

SymMatrix factor_G(const CaptureBuffer& cap, const NetworkSpec& net,
                   Index layer, FisherMode mode, Index lo, Index hi,
                   bool compensated) {
  check_layer(cap, net, layer, "factor_G");
  check_range(cap, lo, hi, "factor_G");
  const LayerSpec& L = net.layers[layer];
  const LayerCapture& lc = cap.layers[layer];
  if (L.kind == LayerKind::BatchNorm)
    throw ShapeMismatch("factor_G: " + layer_tag(net, layer) +
                        " has no Kronecker factors");
  const Matrix* g = nullptr;
  if (mode == FisherMode::OneMC) {
    if (lc.grad_sampled.size() == 0)
      throw MissingMcPass("factor_G: " + layer_tag(net, layer) +
                          ": no sampled-label backward was run");
    g = &lc.grad_sampled;
  } else {
    if (lc.grad_true.size() == 0)
      throw EmptyBatch("factor_G: " + layer_tag(net, layer) +
                       ": no captured gradients");
    g = &lc.grad_true;
  }
  const double n = static_cast<double>(hi - lo);
  return mean_outer(*g, lc.grad_rows_per_sample, lo, hi, n, compensated);
}

SymMatrix factor_G(const CaptureBuffer& cap, const NetworkSpec& net,
                   Index layer, FisherMode mode) {
  return factor_G(cap, net, layer, mode, 0, cap.batch_size, false);
}

UnitBnBlock build_bn_block(const CaptureBuffer& cap, const NetworkSpec& net,
                           Index layer, FisherMode mode, Index lo, Index hi,
                           bool compensated) {
  check_layer(cap, net, layer, "build_bn_block");
  check_range(cap, lo, hi, "build_bn_block");
  const LayerSpec& L = net.layers[layer];
  if (L.kind != LayerKind::BatchNorm)
    throw ShapeMismatch("build_bn_block: " + layer_tag(net, layer) +
                        " is not BatchNorm");
  const LayerCapture& lc = cap.layers[layer];
  const std::string tag = "build_bn_block: " + layer_tag(net, layer);
  const Matrix& gg = pick_bn_grads(lc, mode, true, tag);
  const Matrix& gb = pick_bn_grads(lc, mode, false, tag);
  const Index c = L.channels;
  UnitBnBlock out;
  out.layer = layer;
  Accum acc(3 * c, compensated);
  for (Index s = lo; s < hi; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      acc.add(3 * ch + 0, gg(s, ch) * gg(s, ch));
      acc.add(3 * ch + 1, gg(s, ch) * gb(s, ch));
      acc.add(3 * ch + 2, gb(s, ch) * gb(s, ch));
    }
  const Vector tot = acc.total() / static_cast<double>(hi - lo);
  out.fgg.resize(c);
  out.fgb.resize(c);
  out.fbb.resize(c);
  for (Index ch = 0; ch < c; ++ch) {
    out.fgg[ch] = tot[3 * ch + 0];
    out.fgb[ch] = tot[3 * ch + 1];
    out.fbb[ch] = tot[3 * ch + 2];
  }
  return out;
}

UnitBnBlock build_bn_block(const CaptureBuffer& cap, const NetworkSpec& net,
                           Index layer, FisherMode mode) {
  return build_bn_block(cap, net, layer, mode, 0, cap.batch_size, false);
}

SymMatrix build_bn_full(const CaptureBuffer& cap, const NetworkSpec& net,
                        Index layer, FisherMode mode, Index lo, Index hi,
                        bool compensated) {
  check_layer(cap, net, layer, "build_bn_full");
  check_range(cap, lo, hi, "build_bn_full");
  const LayerSpec& L = net.layers[layer];
  if (L.kind != LayerKind::BatchNorm)
    throw ShapeMismatch("build_bn_full: " + layer_tag(net, layer) +
                        " is not BatchNorm");
  const LayerCapture& lc = cap.layers[layer];
  const std::string tag = "build_bn_full: " + layer_tag(net, layer);
  const Matrix& gg = pick_bn_grads(lc, mode, true, tag);
  const Matrix& gb = pick_bn_grads(lc, mode, false, tag);
  const Index c = L.channels;
  const Index dim = 2 * c;
  SymMatrix out(dim);
  Accum acc(out.size(), compensated);
  Vector u(dim);
  for (Index s = lo; s < hi; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      u[2 * ch] = gg(s, ch);
      u[2 * ch + 1] = gb(s, ch);
    }
    Index p = 0;
    for (Index i = 0; i < dim; ++i)
      for (Index j = i; j < dim; ++j) acc.add(p++, u[i] * u[j]);
  }
  out.data() = acc.total() / static_cast<double>(hi - lo);
  return out;
}

void damp_and_invert(KroneckerBlock& block, double lambda) {
  if (!(lambda > 0.0))
    throw NotPositiveDefinite("damp_and_invert: lambda must be > 0");
  const double ea = avg_eigenvalue(block.A);
  const double eg = avg_eigenvalue(block.G);
  block.pi = (ea < 1e-12 || eg < 1e-12) ? 1.0 : std::sqrt(ea / eg);
  const double root = std::sqrt(lambda);
  block.A_inv = spd_inverse(block.A, block.pi * root);
  block.G_inv = spd_inverse(block.G, root / block.pi);
  block.lambda = lambda;
}

void damp_bn(UnitBnBlock& block, double lambda) {
  if (!(lambda > 0.0)) throw NotPositiveDefinite("damp_bn: lambda must be > 0");
  const Index c = block.fgg.size();
  block.igg.resize(c);
  block.igb.resize(c);
  block.ibb.resize(c);
  for (Index ch = 0; ch < c; ++ch) {
    const auto [ia, ib, ic, id] =
        inv2x2(block.fgg[ch] + lambda, block.fgb[ch], block.fgb[ch],
               block.fbb[ch] + lambda);
    (void)ic;  // symmetric: ib == ic
    block.igg[ch] = ia;
    block.igb[ch] = ib;
    block.ibb[ch] = id;
  }
  block.lambda = lambda;
}

void damp_bn_full(FullBnBlock& block, double lambda) {
  if (!(lambda > 0.0))
    throw NotPositiveDefinite("damp_bn_full: lambda must be > 0");
  block.F_inv = spd_inverse(block.F, lambda);
  block.lambda = lambda;
}

Matrix precondition(const KroneckerBlock& block, const Matrix& grad) {
  return kron_matvec(block.G_inv, block.A_inv, grad);
}

std::pair<Vector, Vector> precondition_bn(const UnitBnBlock& block,
                                          const Vector& grad_gamma,
                                          const Vector& grad_beta,
                                          double lambda) {
  const Index c = block.fgg.size();
  if (grad_gamma.size() != c || grad_beta.size() != c)
    throw ShapeMismatch("precondition_bn: gradient length mismatch");
  Vector pg(c), pb(c);
  for (Index ch = 0; ch < c; ++ch) {
    const auto [ia, ib, ic, id] =
        inv2x2(block.fgg[ch] + lambda, block.fgb[ch], block.fgb[ch],
               block.fbb[ch] + lambda);
    (void)ic;
    pg[ch] = ia * grad_gamma[ch] + ib * grad_beta[ch];
    pb[ch] = ib * grad_gamma[ch] + id * grad_beta[ch];
  }
  return {std::move(pg), std::move(pb)};
}

std::pair<Vector, Vector> precondition_bn_full(const FullBnBlock& block,
                                               const Vector& grad_gamma,
                                               const Vector& grad_beta) {
  const Index c = grad_gamma.size();
  if (grad_beta.size() != c || block.F_inv.dim() != 2 * c)
    throw ShapeMismatch("precondition_bn_full: gradient length mismatch");
  Vector u(2 * c);
  for (Index ch = 0; ch < c; ++ch) {
    u[2 * ch] = grad_gamma[ch];
    u[2 * ch + 1] = grad_beta[ch];
  }
  const Vector v = block.F_inv.unpack() * u;
  Vector pg(c), pb(c);
  for (Index ch = 0; ch < c; ++ch) {
    pg[ch] = v[2 * ch];
    pb[ch] = v[2 * ch + 1];
  }
  return {std::move(pg), std::move(pb)};
}

StepResult ngd_step(const NetworkSpec& net, const ParamSet& params,
                    const ParamSet& grads,
                    const std::vector<LayerPrecond>* blocks, double eta,
                    double momentum, const ParamSet& velocity) {
  const std::size_t L = net.layers.size();
  if (params.layers.size() != L || grads.layers.size() != L ||
      velocity.layers.size() != L)
    throw ShapeMismatch("ngd_step: parameter structure mismatch");
  if (blocks && blocks->size() != L)
    throw ShapeMismatch("ngd_step: preconditioner structure mismatch");

  StepResult out;
  out.params = params;
  out.velocity = velocity;
  for (std::size_t i = 0; i < L; ++i) {
    const LayerSpec& ls = net.layers[i];
    const LayerParams& p = params.layers[i];
    const LayerParams& g = grads.layers[i];
    const LayerParams& v = velocity.layers[i];
    LayerParams& np = out.params.layers[i];
    LayerParams& nv = out.velocity.layers[i];
    switch (ls.kind) {
      case LayerKind::Fc:
      case LayerKind::Conv: {
        Matrix delta;
        if (blocks) {
          const LayerPrecond& lp = (*blocks)[i];
          if (!lp.kron || lp.kron->fresh_step_a < 0 || lp.kron->fresh_step_g < 0)
            throw StaleBeyondLimit("ngd_step: " + layer_tag(net, i) +
                                   ": Kronecker block never built");
          delta = precondition(*lp.kron, g.weight);
        } else {
          delta = g.weight;
        }
        np.weight = p.weight - eta * delta + momentum * v.weight;
        nv.weight = np.weight - p.weight;
        break;
      }
      case LayerKind::BatchNorm: {
        Vector dg, db;
        if (blocks) {
          const LayerPrecond& lp = (*blocks)[i];
          if (lp.unit_bn && lp.unit_bn->fresh_step >= 0) {
            std::tie(dg, db) = precondition_bn(*lp.unit_bn, g.gamma, g.beta,
                                               lp.unit_bn->lambda);
          } else if (lp.full_bn && lp.full_bn->fresh_step >= 0) {
            std::tie(dg, db) = precondition_bn_full(*lp.full_bn, g.gamma, g.beta);
          } else {
            throw StaleBeyondLimit("ngd_step: " + layer_tag(net, i) +
                                   ": BatchNorm block never built");
          }
        } else {
          dg = g.gamma;
          db = g.beta;
        }
        np.gamma = p.gamma - eta * dg + momentum * v.gamma;
        np.beta = p.beta - eta * db + momentum * v.beta;
        nv.gamma = np.gamma - p.gamma;
        nv.beta = np.beta - p.beta;
        break;
      }
    }
  }
  return out;
}

}  // namespace spngd
