#pragma once

#include <string>
#include <vector>

#include "spngd/linalg.hpp"
#include "spngd/rng.hpp"

namespace spngd {

enum class LayerKind { Fc, Conv, BatchNorm };

// One layer of the (purely sequential) network. Only the fields for the
// layer's kind are meaningful. Conv kernels are square; biases are omitted
// throughout (BatchNorm beta plays the bias role).
struct LayerSpec {
  LayerKind kind = LayerKind::Fc;
  // FC
  Index d_in = 0, d_out = 0;
  // Conv
  Index c_in = 0, c_out = 0, kernel = 0, stride = 1, padding = 0;
  // BatchNorm
  Index channels = 0;

  static LayerSpec fc(Index d_in, Index d_out);
  static LayerSpec conv(Index c_in, Index c_out, Index kernel, Index stride = 1,
                        Index padding = 0);
  static LayerSpec batch_norm(Index channels);

  std::string describe() const;
};

struct Shape {
  Index c = 0, h = 0, w = 0;
  Index count() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

struct NetworkSpec {
  Shape input;
  std::vector<LayerSpec> layers;
  Index num_classes = 0;
};

// Parameters for one layer; grads and velocities reuse the same shape.
struct LayerParams {
  Matrix weight;  // FC: d_out x d_in; Conv: c_out x (c_in*k^2)
  Vector gamma, beta;              // BatchNorm scale/shift
  Vector running_mean, running_var;  // BatchNorm inference statistics
};

struct ParamSet {
  std::vector<LayerParams> layers;
};

// He-normal weights (stddev sqrt(2/fan_in)), BatchNorm at identity.
ParamSet init_params(const NetworkSpec& net, Rng& rng);
// Param-shaped zeros, for gradients and velocity.
ParamSet zeros_like(const NetworkSpec& net);

struct Batch {
  Matrix x;     // M x (c*h*w), channel-major (NCHW) flattened rows, values [0,1]
  Matrix t;     // M x K label rows (one-hot or soft, each summing to 1)
  Shape shape;  // per-sample input shape
};

// The fixed architecture convention expands a layer list into a stage
// pipeline: ReLU after every BatchNorm and after every non-final FC (an FC
// directly feeding a BatchNorm defers its ReLU to the BatchNorm), a global
// average pool or flatten inserted where an FC consumes a spatial tensor.
struct Stage {
  enum Kind { Conv, Bn, Relu, Pool, Flatten, Fc } kind = Fc;
  Index layer = -1;  // index into NetworkSpec::layers; -1 for structural stages
  Shape in, out;
};

// Validates topology (adjacent shapes, final FC == classifier) and returns
// the stage pipeline. Throws ShapeMismatch on any inconsistency.
std::vector<Stage> compile_pipeline(const NetworkSpec& net);

// Per-layer per-sample quantities the Fisher estimators consume. Activation
// and gradient blocks are stacked by sample: sample s occupies rows
// [s*rows_per_sample, (s+1)*rows_per_sample).
struct LayerCapture {
  // Conv/FC activations: FC is M x d_in (one row per sample); Conv is the
  // stacked im2col patches, (M*c_in*k^2) x (h_out*w_out).
  Matrix act;
  // Per-sample gradients of the summed log-likelihood w.r.t. the layer's
  // linear output (no 1/M factor). FC: M x d_out; Conv: stacked
  // (M*c_out) x (h_out*w_out). `grad_true` comes from the true-label
  // backward, `grad_sampled` from a sampled-label backward (1-MC mode).
  Matrix grad_true;
  Matrix grad_sampled;
  // BatchNorm per-sample parameter gradients (spatial sums), M x c each.
  Matrix bn_ggamma_true, bn_gbeta_true;
  Matrix bn_ggamma_sampled, bn_gbeta_sampled;

  Index rows_per_sample = 0;       // activation block height (FC: 1)
  Index grad_rows_per_sample = 0;  // gradient block height (FC: 1)
  Index h_out = 0, w_out = 0;      // spatial dims at this layer (FC: 1,1)
};

// Per-stage intermediates the backward pass needs but Fisher does not.
struct StageRecord {
  // BatchNorm
  Matrix xhat;       // M x (c*h*w), normalized pre-scale activations
  Vector inv_std;    // per channel
  Vector batch_mean, batch_var;  // train-mode batch statistics
  bool used_batch_stats = false;
  // ReLU
  Matrix mask;  // M x n of 0/1
};

struct CaptureBuffer {
  Index batch_size = 0;
  bool train_mode = false;
  std::vector<LayerCapture> layers;  // parallel to NetworkSpec::layers
  std::vector<StageRecord> tape;     // parallel to the stage pipeline
};

enum class Mode { Train, Eval };
enum class GradTarget { TrueLabel, SampledLabel };

// im2col for one sample: column j holds the receptive-field patch of output
// position j (row index = channel*k^2 + ky*k + kx, column = oy*w_out + ox).
Matrix im2col(const double* x, Shape in, Index k, Index stride, Index padding);
Matrix im2col(const Vector& x, Shape in, Index k, Index stride, Index padding);
// Scatter-add transpose of im2col; `x` must be pre-zeroed by the caller.
void col2im_add(const Matrix& cols, Shape in, Index k, Index stride,
                Index padding, double* x);

Index conv_out_dim(Index size, Index k, Index stride, Index padding);

struct ForwardResult {
  Matrix logits;  // M x K
  CaptureBuffer capture;
};

// Train mode uses batch statistics in BatchNorm and fills the capture/tape;
// eval mode uses running statistics and captures nothing.
ForwardResult forward(const NetworkSpec& net, const ParamSet& params,
                      const Batch& batch, Mode mode);

struct BackwardResult {
  double loss = 0.0;   // mean cross-entropy of softmax(logits) vs labels
  ParamSet grads;      // gradients of that mean loss
};

// Reverse pass over the capture's tape. Stores the per-sample (unscaled,
// summed-log-likelihood) output gradients into the capture slot selected by
// `target`; aggregated grads always use the supplied labels. The capture
// must come from a train-mode forward on the same batch.
BackwardResult loss_and_backward(const NetworkSpec& net, const ParamSet& params,
                                 const Matrix& logits, const Matrix& labels,
                                 CaptureBuffer& capture,
                                 GradTarget target = GradTarget::TrueLabel);

// One-hot labels drawn per row from softmax(logits) using `rng`.
Matrix sample_labels(const Matrix& logits, Rng& rng);

// Row-wise softmax (numerically stable); exposed for evaluation and tests.
Matrix softmax(const Matrix& logits);

// Exponential-moving-average update of BatchNorm running statistics from the
// batch statistics recorded in a train-mode capture (rho = 0.1).
void update_running_stats(const NetworkSpec& net, ParamSet& params,
                          const CaptureBuffer& capture, double rho = 0.1);

}  // namespace spngd
