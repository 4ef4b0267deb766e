#include "spngd/io.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "spngd/errors.hpp"

namespace spngd {

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void put_bytes(std::ostream& os, const unsigned char* b, std::size_t n) {
  os.write(reinterpret_cast<const char*>(b), static_cast<std::streamsize>(n));
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

void get_bytes(std::istream& is, unsigned char* b, std::size_t n,
               const std::string& what) {
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw ParseError(what + ": truncated file");
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

double get_f64(std::istream& is, const std::string& what) {
  return std::bit_cast<double>(get_u64(is, what));
}

void put_magic(std::ostream& os, const char (&m)[5]) {
  os.write(m, 4);
}

void expect_magic(std::istream& is, const char (&m)[5],
                  const std::string& what) {
  char b[4];
  is.read(b, 4);
  if (is.gcount() != 4 || b[0] != m[0] || b[1] != m[1] || b[2] != m[2] ||
      b[3] != m[3])
    throw ParseError(what + ": bad magic (expected " + m + ")");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  return is;
}

}  // namespace

Dataset synth_gaussian(Index n, Shape shape, Index num_classes, double noise,
                       Rng& center_rng, Rng& noise_rng) {
  if (n < 1) throw ValidationError("train_size", "dataset size must be >= 1");
  if (num_classes < 2)
    throw ValidationError("classes", "need at least two classes");
  if (shape.count() < 1)
    throw ValidationError("input", "input shape must be non-empty");
  const Index d = shape.count();
  Matrix centers(num_classes, d);
  for (Index c = 0; c < num_classes; ++c)
    for (Index j = 0; j < d; ++j) centers(c, j) = center_rng.uniform(0.15, 0.85);
  Dataset ds;
  ds.shape = shape;
  ds.num_classes = num_classes;
  ds.x.resize(n, d);
  ds.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Index c = i % num_classes;
    ds.labels[i] = c;
    for (Index j = 0; j < d; ++j) {
      const double v = centers(c, j) + noise * noise_rng.normal();
      ds.x(i, j) = std::min(1.0, std::max(0.0, v));
    }
  }
  return ds;
}

Dataset synth_gaussian(Index n, Shape shape, Index num_classes, double noise,
                       Rng& rng) {
  return synth_gaussian(n, shape, num_classes, noise, rng, rng);
}

Batch make_batch(const Dataset& ds, const std::vector<Index>& indices) {
  if (indices.empty()) throw EmptyBatch("make_batch: no indices");
  Batch b;
  b.shape = ds.shape;
  b.x.resize(static_cast<Index>(indices.size()), ds.x.cols());
  b.t = Matrix::Zero(static_cast<Index>(indices.size()), ds.num_classes);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Index i = indices[r];
    if (i < 0 || i >= ds.size())
      throw ShapeMismatch("make_batch: index " + std::to_string(i) +
                          " out of range");
    b.x.row(static_cast<Index>(r)) = ds.x.row(i);
    b.t(static_cast<Index>(r), ds.labels[i]) = 1.0;
  }
  return b;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os = open_out(dir + "/images.bin");
    put_magic(os, "SPTI");
    put_u32(os, kFormatVersion);
    put_u64(os, static_cast<std::uint64_t>(ds.size()));
    put_u32(os, static_cast<std::uint32_t>(ds.shape.c));
    put_u32(os, static_cast<std::uint32_t>(ds.shape.h));
    put_u32(os, static_cast<std::uint32_t>(ds.shape.w));
    for (Index i = 0; i < ds.size(); ++i)
      for (Index j = 0; j < ds.x.cols(); ++j) put_f64(os, ds.x(i, j));
    if (!os) throw Error("write failed: " + dir + "/images.bin");
  }
  {
    std::ofstream os = open_out(dir + "/labels.bin");
    put_magic(os, "SPTL");
    put_u32(os, kFormatVersion);
    put_u64(os, static_cast<std::uint64_t>(ds.size()));
    put_u32(os, static_cast<std::uint32_t>(ds.num_classes));
    for (Index i = 0; i < ds.size(); ++i)
      put_u32(os, static_cast<std::uint32_t>(ds.labels[i]));
    if (!os) throw Error("write failed: " + dir + "/labels.bin");
  }
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  std::uint64_t count = 0;
  {
    std::ifstream is = open_in(dir + "/images.bin");
    const std::string what = dir + "/images.bin";
    expect_magic(is, "SPTI", what);
    const std::uint32_t version = get_u32(is, what);
    if (version != kFormatVersion)
      throw ParseError(what + ": unsupported version " +
                       std::to_string(version));
    count = get_u64(is, what);
    ds.shape.c = get_u32(is, what);
    ds.shape.h = get_u32(is, what);
    ds.shape.w = get_u32(is, what);
    if (count == 0 || ds.shape.count() < 1)
      throw ParseError(what + ": empty dataset");
    ds.x.resize(static_cast<Index>(count), ds.shape.count());
    for (Index i = 0; i < ds.x.rows(); ++i)
      for (Index j = 0; j < ds.x.cols(); ++j) ds.x(i, j) = get_f64(is, what);
  }
  {
    std::ifstream is = open_in(dir + "/labels.bin");
    const std::string what = dir + "/labels.bin";
    expect_magic(is, "SPTL", what);
    const std::uint32_t version = get_u32(is, what);
    if (version != kFormatVersion)
      throw ParseError(what + ": unsupported version " +
                       std::to_string(version));
    const std::uint64_t lcount = get_u64(is, what);
    if (lcount != count)
      throw ParseError(what + ": label count does not match image count");
    ds.num_classes = get_u32(is, what);
    if (ds.num_classes < 2) throw ParseError(what + ": bad class count");
    ds.labels.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint32_t l = get_u32(is, what);
      if (l >= static_cast<std::uint32_t>(ds.num_classes))
        throw ParseError(what + ": label " + std::to_string(l) +
                         " out of range");
      ds.labels[i] = static_cast<Index>(l);
    }
  }
  return ds;
}

void save_checkpoint(const NetworkSpec& net, const ParamSet& params,
                     const std::string& path) {
  if (params.layers.size() != net.layers.size())
    throw ShapeMismatch("save_checkpoint: parameters do not match network");
  std::ofstream os = open_out(path);
  put_magic(os, "SPCK");
  put_u32(os, kFormatVersion);
  put_u32(os, static_cast<std::uint32_t>(net.input.c));
  put_u32(os, static_cast<std::uint32_t>(net.input.h));
  put_u32(os, static_cast<std::uint32_t>(net.input.w));
  put_u32(os, static_cast<std::uint32_t>(net.num_classes));
  put_u32(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const LayerSpec& L : net.layers) {
    std::uint32_t geo[5] = {0, 0, 0, 0, 0};
    std::uint32_t kind = 0;
    switch (L.kind) {
      case LayerKind::Fc:
        kind = 0;
        geo[0] = static_cast<std::uint32_t>(L.d_in);
        geo[1] = static_cast<std::uint32_t>(L.d_out);
        break;
      case LayerKind::Conv:
        kind = 1;
        geo[0] = static_cast<std::uint32_t>(L.c_in);
        geo[1] = static_cast<std::uint32_t>(L.c_out);
        geo[2] = static_cast<std::uint32_t>(L.kernel);
        geo[3] = static_cast<std::uint32_t>(L.stride);
        geo[4] = static_cast<std::uint32_t>(L.padding);
        break;
      case LayerKind::BatchNorm:
        kind = 2;
        geo[0] = static_cast<std::uint32_t>(L.channels);
        break;
    }
    put_u32(os, kind);
    for (std::uint32_t g : geo) put_u32(os, g);
  }
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerParams& lp = params.layers[li];
    if (net.layers[li].kind == LayerKind::BatchNorm) {
      for (const Vector* v :
           {&lp.gamma, &lp.beta, &lp.running_mean, &lp.running_var})
        for (Index i = 0; i < v->size(); ++i) put_f64(os, (*v)[i]);
    } else {
      for (Index i = 0; i < lp.weight.rows(); ++i)
        for (Index j = 0; j < lp.weight.cols(); ++j)
          put_f64(os, lp.weight(i, j));
    }
  }
  if (!os) throw Error("write failed: " + path);
}

std::pair<NetworkSpec, ParamSet> load_checkpoint(const std::string& path) {
  std::ifstream is = open_in(path);
  const std::string& what = path;
  expect_magic(is, "SPCK", what);
  const std::uint32_t version = get_u32(is, what);
  if (version != kFormatVersion)
    throw ParseError(what + ": unsupported version " + std::to_string(version));
  NetworkSpec net;
  net.input.c = get_u32(is, what);
  net.input.h = get_u32(is, what);
  net.input.w = get_u32(is, what);
  net.num_classes = get_u32(is, what);
  const std::uint32_t num_layers = get_u32(is, what);
  for (std::uint32_t li = 0; li < num_layers; ++li) {
    const std::uint32_t kind = get_u32(is, what);
    std::uint32_t geo[5];
    for (std::uint32_t& g : geo) g = get_u32(is, what);
    switch (kind) {
      case 0:
        net.layers.push_back(LayerSpec::fc(geo[0], geo[1]));
        break;
      case 1:
        net.layers.push_back(
            LayerSpec::conv(geo[0], geo[1], geo[2], geo[3], geo[4]));
        break;
      case 2:
        net.layers.push_back(LayerSpec::batch_norm(geo[0]));
        break;
      default:
        throw ParseError(what + ": unknown layer kind " +
                         std::to_string(kind));
    }
  }
  try {
    compile_pipeline(net);
  } catch (const ShapeMismatch& e) {
    throw ParseError(what + ": inconsistent network: " + e.what());
  }
  ParamSet params = zeros_like(net);
  for (std::uint32_t li = 0; li < num_layers; ++li) {
    LayerParams& lp = params.layers[li];
    if (net.layers[li].kind == LayerKind::BatchNorm) {
      for (Vector* v :
           {&lp.gamma, &lp.beta, &lp.running_mean, &lp.running_var})
        for (Index i = 0; i < v->size(); ++i) (*v)[i] = get_f64(is, what);
    } else {
      for (Index i = 0; i < lp.weight.rows(); ++i)
        for (Index j = 0; j < lp.weight.cols(); ++j)
          lp.weight(i, j) = get_f64(is, what);
    }
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0)
    throw ParseError(what + ": trailing bytes after payload");
  return {std::move(net), std::move(params)};
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace spngd
