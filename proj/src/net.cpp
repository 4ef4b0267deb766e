#include "spngd/net.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

namespace spngd {

LayerSpec LayerSpec::fc(Index d_in, Index d_out) {
  LayerSpec s;
  s.kind = LayerKind::Fc;
  s.d_in = d_in;
  s.d_out = d_out;
  return s;
}

LayerSpec LayerSpec::conv(Index c_in, Index c_out, Index kernel, Index stride,
                          Index padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv;
  s.c_in = c_in;
  s.c_out = c_out;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::batch_norm(Index channels) {
  LayerSpec s;
  s.kind = LayerKind::BatchNorm;
  s.channels = channels;
  return s;
}

std::string LayerSpec::describe() const {
  char buf[96];
  switch (kind) {
    case LayerKind::Fc:
      std::snprintf(buf, sizeof buf, "fc(%lld->%lld)",
                    static_cast<long long>(d_in), static_cast<long long>(d_out));
      break;
    case LayerKind::Conv:
      std::snprintf(buf, sizeof buf, "conv(%lld->%lld,k%lld,s%lld,p%lld)",
                    static_cast<long long>(c_in), static_cast<long long>(c_out),
                    static_cast<long long>(kernel),
                    static_cast<long long>(stride),
                    static_cast<long long>(padding));
      break;
    case LayerKind::BatchNorm:
      std::snprintf(buf, sizeof buf, "batchnorm(%lld)",
                    static_cast<long long>(channels));
      break;
  }
  return buf;
}

Index conv_out_dim(Index size, Index k, Index stride, Index padding) {
  const Index span = size + 2 * padding - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

std::vector<Stage> compile_pipeline(const NetworkSpec& net) {
  if (net.layers.empty()) throw ShapeMismatch("network has no layers");
  if (net.num_classes < 1) throw ShapeMismatch("num_classes must be >= 1");
  if (net.input.c < 1 || net.input.h < 1 || net.input.w < 1)
    throw ShapeMismatch("input shape dims must be >= 1");

  std::vector<Stage> stages;
  Shape cur = net.input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& L = net.layers[i];
    const bool last = (i + 1 == net.layers.size());
    const Index li = static_cast<Index>(i);
    switch (L.kind) {
      case LayerKind::Conv: {
        if (L.c_in < 1 || L.c_out < 1 || L.kernel < 1 || L.stride < 1 ||
            L.padding < 0)
          throw ShapeMismatch(L.describe() + ": bad dimensions");
        if (L.c_in != cur.c)
          throw ShapeMismatch(L.describe() + ": expects " +
                              std::to_string(L.c_in) + " channels, input has " +
                              std::to_string(cur.c));
        const Index ho = conv_out_dim(cur.h, L.kernel, L.stride, L.padding);
        const Index wo = conv_out_dim(cur.w, L.kernel, L.stride, L.padding);
        if (ho < 1 || wo < 1)
          throw ShapeMismatch(L.describe() + ": output spatial dims < 1");
        const Shape out{L.c_out, ho, wo};
        stages.push_back({Stage::Conv, li, cur, out});
        cur = out;
        break;
      }
      case LayerKind::BatchNorm: {
        if (L.channels < 1 || L.channels != cur.c)
          throw ShapeMismatch(L.describe() + ": channel mismatch with input " +
                              std::to_string(cur.c));
        stages.push_back({Stage::Bn, li, cur, cur});
        stages.push_back({Stage::Relu, -1, cur, cur});
        break;
      }
      case LayerKind::Fc: {
        if (L.d_in < 1 || L.d_out < 1)
          throw ShapeMismatch(L.describe() + ": bad dimensions");
        if (cur.h != 1 || cur.w != 1) {
          if (L.d_in == cur.c) {
            const Shape out{cur.c, 1, 1};
            stages.push_back({Stage::Pool, -1, cur, out});
            cur = out;
          } else if (L.d_in == cur.count()) {
            const Shape out{cur.count(), 1, 1};
            stages.push_back({Stage::Flatten, -1, cur, out});
            cur = out;
          } else {
            throw ShapeMismatch(L.describe() +
                                ": d_in matches neither channels nor flattened "
                                "size of input shape");
          }
        } else if (L.d_in != cur.c) {
          throw ShapeMismatch(L.describe() + ": expects " +
                              std::to_string(L.d_in) + " inputs, got " +
                              std::to_string(cur.c));
        }
        const Shape out{L.d_out, 1, 1};
        stages.push_back({Stage::Fc, li, cur, out});
        cur = out;
        // The ReLU belongs to the following BatchNorm when there is one.
        if (!last && net.layers[i + 1].kind != LayerKind::BatchNorm)
          stages.push_back({Stage::Relu, -1, cur, cur});
        break;
      }
    }
  }
  const LayerSpec& final = net.layers.back();
  if (final.kind != LayerKind::Fc || final.d_out != net.num_classes)
    throw ShapeMismatch("final layer must be FC with d_out == num_classes");
  return stages;
}

ParamSet init_params(const NetworkSpec& net, Rng& rng) {
  compile_pipeline(net);  // validate topology up front
  ParamSet p;
  p.layers.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& L = net.layers[i];
    LayerParams& lp = p.layers[i];
    switch (L.kind) {
      case LayerKind::Fc: {
        const double sd = std::sqrt(2.0 / static_cast<double>(L.d_in));
        lp.weight.resize(L.d_out, L.d_in);
        for (Index r = 0; r < L.d_out; ++r)
          for (Index c = 0; c < L.d_in; ++c) lp.weight(r, c) = rng.normal(0, sd);
        break;
      }
      case LayerKind::Conv: {
        const Index fan_in = L.c_in * L.kernel * L.kernel;
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        lp.weight.resize(L.c_out, fan_in);
        for (Index r = 0; r < L.c_out; ++r)
          for (Index c = 0; c < fan_in; ++c) lp.weight(r, c) = rng.normal(0, sd);
        break;
      }
      case LayerKind::BatchNorm: {
        lp.gamma = Vector::Ones(L.channels);
        lp.beta = Vector::Zero(L.channels);
        lp.running_mean = Vector::Zero(L.channels);
        lp.running_var = Vector::Ones(L.channels);
        break;
      }
    }
  }
  return p;
}

ParamSet zeros_like(const NetworkSpec& net) {
  ParamSet p;
  p.layers.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& L = net.layers[i];
    LayerParams& lp = p.layers[i];
    switch (L.kind) {
      case LayerKind::Fc:
        lp.weight = Matrix::Zero(L.d_out, L.d_in);
        break;
      case LayerKind::Conv:
        lp.weight = Matrix::Zero(L.c_out, L.c_in * L.kernel * L.kernel);
        break;
      case LayerKind::BatchNorm:
        lp.gamma = Vector::Zero(L.channels);
        lp.beta = Vector::Zero(L.channels);
        lp.running_mean = Vector::Zero(L.channels);
        lp.running_var = Vector::Zero(L.channels);
        break;
    }
  }
  return p;
}

Matrix im2col(const double* x, Shape in, Index k, Index stride, Index padding) {
  const Index ho = conv_out_dim(in.h, k, stride, padding);
  const Index wo = conv_out_dim(in.w, k, stride, padding);
  if (ho < 1 || wo < 1) throw ShapeMismatch("im2col: output spatial dims < 1");
  Matrix cols = Matrix::Zero(in.c * k * k, ho * wo);
  for (Index ch = 0; ch < in.c; ++ch)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Index row = ch * k * k + ky * k + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= in.h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= in.w) continue;
            cols(row, oy * wo + ox) = x[(ch * in.h + iy) * in.w + ix];
          }
        }
      }
  return cols;
}

Matrix im2col(const Vector& x, Shape in, Index k, Index stride, Index padding) {
  if (x.size() != in.count())
    throw ShapeMismatch("im2col: input length does not match shape");
  return im2col(x.data(), in, k, stride, padding);
}

void col2im_add(const Matrix& cols, Shape in, Index k, Index stride,
                Index padding, double* x) {
  const Index ho = conv_out_dim(in.h, k, stride, padding);
  const Index wo = conv_out_dim(in.w, k, stride, padding);
  if (cols.rows() != in.c * k * k || cols.cols() != ho * wo)
    throw ShapeMismatch("col2im_add: patch matrix does not match geometry");
  for (Index ch = 0; ch < in.c; ++ch)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Index row = ch * k * k + ky * k + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= in.h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= in.w) continue;
            x[(ch * in.h + iy) * in.w + ix] += cols(row, oy * wo + ox);
          }
        }
      }
}

ForwardResult forward(const NetworkSpec& net, const ParamSet& params,
                      const Batch& batch, Mode mode) {
  const auto stages = compile_pipeline(net);
  const Index M = batch.x.rows();
  if (M < 1) throw EmptyBatch("forward: empty batch");
  if (batch.x.cols() != net.input.count())
    throw ShapeMismatch("forward: batch width does not match input shape");
  if (params.layers.size() != net.layers.size())
    throw ShapeMismatch("forward: parameter count does not match network");
  const bool train = (mode == Mode::Train);

  ForwardResult out;
  out.capture.batch_size = M;
  out.capture.train_mode = train;
  if (train) {
    out.capture.layers.resize(net.layers.size());
    out.capture.tape.resize(stages.size());
  }

  Matrix cur = batch.x;
  StageRecord unused;  // eval mode records nothing
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const Stage& st = stages[si];
    StageRecord& rec = train ? out.capture.tape[si] : unused;
    switch (st.kind) {
      case Stage::Fc: {
        const LayerParams& lp = params.layers[st.layer];
        if (train) {
          LayerCapture& lc = out.capture.layers[st.layer];
          lc.act = cur;
          lc.rows_per_sample = 1;
          lc.grad_rows_per_sample = 1;
          lc.h_out = 1;
          lc.w_out = 1;
        }
        cur = cur * lp.weight.transpose();
        break;
      }
      case Stage::Conv: {
        const LayerSpec& L = net.layers[st.layer];
        const Index R = L.c_in * L.kernel * L.kernel;
        const Index S = st.out.h * st.out.w;
        Matrix cols(M * R, S);
        for (Index s = 0; s < M; ++s)
          cols.middleRows(s * R, R) =
              im2col(cur.row(s).data(), st.in, L.kernel, L.stride, L.padding);
        Matrix next(M, L.c_out * S);
        const Matrix& W = params.layers[st.layer].weight;
        for (Index s = 0; s < M; ++s)
          Eigen::Map<Matrix>(next.row(s).data(), L.c_out, S).noalias() =
              W * cols.middleRows(s * R, R);
        if (train) {
          LayerCapture& lc = out.capture.layers[st.layer];
          lc.act = std::move(cols);
          lc.rows_per_sample = R;
          lc.grad_rows_per_sample = L.c_out;
          lc.h_out = st.out.h;
          lc.w_out = st.out.w;
        }
        cur = std::move(next);
        break;
      }
      case Stage::Bn: {
        const LayerSpec& L = net.layers[st.layer];
        const LayerParams& lp = params.layers[st.layer];
        const Index c = L.channels;
        const Index S = st.in.h * st.in.w;
        const double N = static_cast<double>(M) * static_cast<double>(S);
        constexpr double kEps = 1e-5;
        if (train) {
          rec.xhat.resize(M, c * S);
          rec.inv_std.resize(c);
          rec.batch_mean.resize(c);
          rec.batch_var.resize(c);
          rec.used_batch_stats = true;
          LayerCapture& lc = out.capture.layers[st.layer];
          lc.h_out = st.in.h;
          lc.w_out = st.in.w;
        }
        for (Index ch = 0; ch < c; ++ch) {
          auto block = cur.block(0, ch * S, M, S);
          double mu, var;
          if (train) {
            mu = block.sum() / N;
            var = (block.array() - mu).square().sum() / N;  // biased
            rec.batch_mean[ch] = mu;
            rec.batch_var[ch] = var;
          } else {
            mu = lp.running_mean[ch];
            var = lp.running_var[ch];
          }
          const double inv_std = 1.0 / std::sqrt(var + kEps);
          if (train) {
            rec.inv_std[ch] = inv_std;
            rec.xhat.block(0, ch * S, M, S) =
                ((block.array() - mu) * inv_std).matrix();
            block = lp.gamma[ch] * rec.xhat.block(0, ch * S, M, S) +
                    Matrix::Constant(M, S, lp.beta[ch]);
          } else {
            block = (lp.gamma[ch] * inv_std * (block.array() - mu) +
                     lp.beta[ch])
                        .matrix();
          }
        }
        break;
      }
      case Stage::Relu: {
        Matrix mask = (cur.array() > 0.0).cast<double>();
        cur = cur.cwiseProduct(mask);
        if (train) rec.mask = std::move(mask);
        break;
      }
      case Stage::Pool: {
        const Index c = st.in.c;
        const Index S = st.in.h * st.in.w;
        Matrix next(M, c);
        for (Index ch = 0; ch < c; ++ch)
          next.col(ch) = cur.block(0, ch * S, M, S).rowwise().sum() /
                         static_cast<double>(S);
        cur = std::move(next);
        break;
      }
      case Stage::Flatten:
        break;  // layout is already flat channel-major
    }
  }
  if (!cur.allFinite())
    throw NonFiniteActivation("forward: non-finite logits");
  out.logits = std::move(cur);
  return out;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

BackwardResult loss_and_backward(const NetworkSpec& net, const ParamSet& params,
                                 const Matrix& logits, const Matrix& labels,
                                 CaptureBuffer& capture, GradTarget target) {
  if (!capture.train_mode)
    throw Error("loss_and_backward: capture must come from a train-mode forward");
  const auto stages = compile_pipeline(net);
  if (capture.tape.size() != stages.size())
    throw ShapeMismatch("loss_and_backward: capture does not match network");
  const Index M = logits.rows();
  const Index K = logits.cols();
  if (M != capture.batch_size)
    throw ShapeMismatch("loss_and_backward: logits batch size mismatch");
  if (labels.rows() != M || labels.cols() != K)
    throw ShapeMismatch("loss_and_backward: label shape mismatch");

  // Stable softmax + mean cross-entropy; d starts as the gradient of the
  // SUMMED negative log-likelihood so each row stays a per-sample gradient.
  BackwardResult out;
  out.grads = zeros_like(net);
  Matrix d(M, K);
  double loss = 0.0;
  for (Index i = 0; i < M; ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse =
        m + std::log((logits.row(i).array() - m).exp().sum());
    d.row(i) = (logits.row(i).array() - lse).exp();
    loss += lse - labels.row(i).dot(logits.row(i));
  }
  out.loss = loss / static_cast<double>(M);
  d -= labels;

  const bool true_label = (target == GradTarget::TrueLabel);
  for (Index si = static_cast<Index>(stages.size()) - 1; si >= 0; --si) {
    const Stage& st = stages[si];
    StageRecord& rec = capture.tape[si];
    switch (st.kind) {
      case Stage::Fc: {
        LayerCapture& lc = capture.layers[st.layer];
        (true_label ? lc.grad_true : lc.grad_sampled) = d;
        out.grads.layers[st.layer].weight.noalias() += d.transpose() * lc.act;
        d = d * params.layers[st.layer].weight;
        break;
      }
      case Stage::Conv: {
        const LayerSpec& L = net.layers[st.layer];
        const Index R = L.c_in * L.kernel * L.kernel;
        const Index S = st.out.h * st.out.w;
        LayerCapture& lc = capture.layers[st.layer];
        Matrix& gcap = (true_label ? lc.grad_true : lc.grad_sampled);
        gcap.resize(M * L.c_out, S);
        Matrix dx = Matrix::Zero(M, st.in.count());
        const Matrix& W = params.layers[st.layer].weight;
        Matrix& wg = out.grads.layers[st.layer].weight;
        for (Index s = 0; s < M; ++s) {
          Eigen::Map<const Matrix> dY(d.row(s).data(), L.c_out, S);
          gcap.middleRows(s * L.c_out, L.c_out) = dY;
          auto B = lc.act.middleRows(s * R, R);
          wg.noalias() += dY * B.transpose();
          Matrix dB = W.transpose() * dY;
          col2im_add(dB, st.in, L.kernel, L.stride, L.padding, dx.row(s).data());
        }
        d = std::move(dx);
        break;
      }
      case Stage::Bn: {
        const LayerSpec& L = net.layers[st.layer];
        const LayerParams& lp = params.layers[st.layer];
        const Index c = L.channels;
        const Index S = st.in.h * st.in.w;
        const double N = static_cast<double>(M) * static_cast<double>(S);
        LayerCapture& lc = capture.layers[st.layer];
        Matrix& gg = (true_label ? lc.bn_ggamma_true : lc.bn_ggamma_sampled);
        Matrix& gb = (true_label ? lc.bn_gbeta_true : lc.bn_gbeta_sampled);
        gg.resize(M, c);
        gb.resize(M, c);
        Matrix dx(M, c * S);
        for (Index ch = 0; ch < c; ++ch) {
          auto dY = d.block(0, ch * S, M, S);
          auto xh = rec.xhat.block(0, ch * S, M, S);
          // Per-sample parameter gradients treat the batch statistics as
          // constants; the spatial sum is exact for gamma/beta either way.
          gg.col(ch) = dY.cwiseProduct(xh).rowwise().sum();
          gb.col(ch) = dY.rowwise().sum();
          out.grads.layers[st.layer].gamma[ch] += gg.col(ch).sum();
          out.grads.layers[st.layer].beta[ch] += gb.col(ch).sum();
          if (rec.used_batch_stats) {
            // Fully coupled backward through the batch statistics.
            Matrix dxh = dY * lp.gamma[ch];
            const double mean_dxh = dxh.sum() / N;
            const double mean_dxh_xh = dxh.cwiseProduct(xh).sum() / N;
            dx.block(0, ch * S, M, S) =
                (rec.inv_std[ch] *
                 (dxh.array() - mean_dxh - xh.array() * mean_dxh_xh))
                    .matrix();
          } else {
            const double inv_std = 1.0 / std::sqrt(lp.running_var[ch] + 1e-5);
            dx.block(0, ch * S, M, S) = dY * (lp.gamma[ch] * inv_std);
          }
        }
        d = std::move(dx);
        break;
      }
      case Stage::Relu:
        d = d.cwiseProduct(rec.mask);
        break;
      case Stage::Pool: {
        const Index c = st.in.c;
        const Index S = st.in.h * st.in.w;
        Matrix dx(M, c * S);
        for (Index ch = 0; ch < c; ++ch)
          dx.block(0, ch * S, M, S) =
              (d.col(ch) / static_cast<double>(S)).replicate(1, S);
        d = std::move(dx);
        break;
      }
      case Stage::Flatten:
        break;
    }
  }

  // Restore the 1/M factor of the mean loss on the aggregated gradients; the
  // per-sample captures stay unscaled by design.
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerParams& g = out.grads.layers[i];
    switch (net.layers[i].kind) {
      case LayerKind::Fc:
      case LayerKind::Conv:
        g.weight /= static_cast<double>(M);
        break;
      case LayerKind::BatchNorm:
        g.gamma /= static_cast<double>(M);
        g.beta /= static_cast<double>(M);
        break;
    }
  }
  return out;
}

Matrix sample_labels(const Matrix& logits, Rng& rng) {
  const Matrix p = softmax(logits);
  Matrix t = Matrix::Zero(logits.rows(), logits.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const Vector row = p.row(i).transpose();
    t(i, rng.categorical(row)) = 1.0;
  }
  return t;
}

void update_running_stats(const NetworkSpec& net, ParamSet& params,
                          const CaptureBuffer& capture, double rho) {
  if (!capture.train_mode)
    throw Error("update_running_stats: needs a train-mode capture");
  const auto stages = compile_pipeline(net);
  if (capture.tape.size() != stages.size())
    throw ShapeMismatch("update_running_stats: capture does not match network");
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const Stage& st = stages[si];
    if (st.kind != Stage::Bn) continue;
    const StageRecord& rec = capture.tape[si];
    if (!rec.used_batch_stats) continue;
    LayerParams& lp = params.layers[st.layer];
    lp.running_mean = (1.0 - rho) * lp.running_mean + rho * rec.batch_mean;
    lp.running_var = (1.0 - rho) * lp.running_var + rho * rec.batch_var;
  }
}

}  // namespace spngd
