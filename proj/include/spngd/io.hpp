#pragma once

#include <string>
#include <utility>
#include <vector>

#include "spngd/net.hpp"
#include "spngd/rng.hpp"

namespace spngd {

// A labeled image set held in memory: one row per sample, channel-major
// (NCHW) pixels in [0, 1], integer class labels.
struct Dataset {
  Matrix x;
  std::vector<Index> labels;
  Shape shape;
  Index num_classes = 0;

  Index size() const { return x.rows(); }
};

// Class-conditional Gaussian blobs: each class gets per-pixel centers drawn
// uniformly from [0.15, 0.85]; a sample is its class center plus
// noise * N(0, 1) per pixel, clipped to [0, 1]. Labels cycle 0..K-1.
// Separate center/noise sources let a train and an eval split share class
// centers while drawing independent samples.
Dataset synth_gaussian(Index n, Shape shape, Index num_classes, double noise,
                       Rng& center_rng, Rng& noise_rng);
Dataset synth_gaussian(Index n, Shape shape, Index num_classes, double noise,
                       Rng& rng);

// One-hot batch assembled from the selected rows, in the given order.
Batch make_batch(const Dataset& ds, const std::vector<Index>& indices);

// On-disk layout: <dir>/images.bin ("SPTI": u32 version, u64 count,
// u32 c, h, w, then count*c*h*w little-endian f64 pixels) and
// <dir>/labels.bin ("SPTL": u32 version, u64 count, u32 num_classes, then
// count little-endian u32 class indices).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Checkpoint ("SPCK"): u32 version, input u32 c, h, w, u32 num_classes,
// u32 num_layers, then per layer a u32 kind tag (0 fc, 1 conv, 2 batchnorm)
// with five u32 geometry words, then per layer the f64 payload (weights
// row-major; BatchNorm gamma, beta, running_mean, running_var).
void save_checkpoint(const NetworkSpec& net, const ParamSet& params,
                     const std::string& path);
std::pair<NetworkSpec, ParamSet> load_checkpoint(const std::string& path);

// Shortest round-trip decimal rendering used in the CSV outputs.
std::string format_double(double v);

}  // namespace spngd
