#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "spngd/errors.hpp"
#include "spngd/schemes.hpp"

using namespace spngd;

namespace {

Batch ones_batch(Shape shape, Index classes, Index m) {
  Batch b;
  b.shape = shape;
  b.x = Matrix::Ones(m, shape.count());
  b.t = Matrix::Zero(m, classes);
  for (Index s = 0; s < m; ++s) b.t(s, s % classes) = 1.0;
  return b;
}

struct PresetRow {
  const char* name;
  Index bs;
  double alpha_mixup, p_decay, e_start, e_end, eta0, m0, lambda, epochs;
};

}  // namespace

TEST_SUITE("schemes") {
  TEST_CASE("presets reproduce the published hyperparameter rows exactly") {
    const PresetRow rows[] = {
        {"bs4k", 4096, 0.4, 11.0, 1.0, 53.0, 8.18e-3, 0.997, 2.5e-4, 35.0},
        {"bs8k", 8192, 0.4, 8.0, 1.0, 53.5, 1.25e-2, 0.993, 2.5e-4, 35.0},
        {"bs16k", 16384, 0.4, 8.0, 1.0, 53.5, 2.5e-2, 0.985, 2.5e-4, 35.0},
        {"bs32k", 32768, 0.6, 3.5, 1.5, 49.5, 3.0e-2, 0.97, 2.0e-4, 45.0},
        {"bs65k", 65536, 0.6, 2.9, 2.0, 64.5, 4.0e-2, 0.95, 1.5e-4, 60.0},
        {"bs131k", 131072, 1.0, 2.9, 3.0, 100.0, 7.0e-2, 0.93, 1.0e-4, 90.0},
    };
    for (const PresetRow& r : rows) {
      CAPTURE(r.name);
      REQUIRE(has_preset(r.name));
      const TrainConfig c = preset(r.name);
      CHECK(c.bs == r.bs);
      CHECK(c.alpha_mixup == r.alpha_mixup);
      CHECK(c.p_decay == r.p_decay);
      CHECK(c.e_start == r.e_start);
      CHECK(c.e_end == r.e_end);
      CHECK(c.eta0 == r.eta0);
      CHECK(c.m0 == r.m0);
      CHECK(c.lambda == r.lambda);
      CHECK(c.epochs == r.epochs);
    }

    const std::vector<std::string> names = preset_names();
    REQUIRE(names.size() == 6);
    CHECK(names.front() == "bs4k");
    CHECK(names.back() == "bs131k");

    CHECK_FALSE(has_preset("bs1k"));
    CHECK_THROWS_AS(preset("bs1k"), ValidationError);

    // Struct defaults agree with the bs8k row.
    const TrainConfig d;
    const TrainConfig b8 = preset("bs8k");
    CHECK(d.bs == b8.bs);
    CHECK(d.eta0 == b8.eta0);
    CHECK(d.m0 == b8.m0);
    CHECK(d.lambda == b8.lambda);
  }

  TEST_CASE("learning rate holds, decays polynomially, then reaches zero") {
    for (const std::string& name : preset_names()) {
      CAPTURE(name);
      const TrainConfig c = preset(name);
      // Flat segment before the decay window.
      CHECK(lr_at(c, 0.0) == c.eta0);
      CHECK(lr_at(c, c.e_start) == c.eta0);
      CHECK(lr_at(c, 0.5 * c.e_start) == c.eta0);
      // Zero at and beyond the end of the window.
      CHECK(lr_at(c, c.e_end) == 0.0);
      CHECK(lr_at(c, c.e_end + 10.0) == 0.0);
      // Interior points follow the polynomial exactly.
      for (const double frac : {0.25, 0.5, 0.75}) {
        const double e = c.e_start + frac * (c.e_end - c.e_start);
        const double want =
            c.eta0 *
            std::pow(1.0 - (e - c.e_start) / (c.e_end - c.e_start), c.p_decay);
        CHECK(lr_at(c, e) == doctest::Approx(want).epsilon(1e-14));
      }
      // Monotone non-increasing across the whole schedule.
      double prev = lr_at(c, 0.0);
      for (double e = 0.0; e <= c.e_end + 1.0; e += c.e_end / 64.0) {
        const double now = lr_at(c, e);
        CHECK(now <= prev + 1e-18);
        prev = now;
      }
    }
  }

  TEST_CASE("momentum stays coupled to the learning rate by m0/eta0") {
    const TrainConfig c = preset("bs32k");
    const double ratio = c.m0 / c.eta0;
    for (const double e : {0.0, 1.5, 10.0, 25.0, 49.5, 60.0}) {
      CHECK(momentum_at(c, e) ==
            doctest::Approx(ratio * lr_at(c, e)).epsilon(1e-14));
    }
    CHECK(momentum_at(c, 0.0) == doctest::Approx(c.m0).epsilon(1e-14));
    CHECK(momentum_at(c, c.e_end) == 0.0);
  }

  TEST_CASE("running mixup passes the first batch through and seeds the state") {
    Rng data_rng(11), mix_rng(12), probe_rng(12);
    const Batch raw = oracle::random_batch({1, 3, 3}, 4, 5, data_rng);
    MixupState state;
    const Batch out = running_mixup(raw, state, 0.4, mix_rng);
    CHECK((out.x - raw.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.t - raw.t).cwiseAbs().maxCoeff() == 0.0);
    CHECK(state.has_prev);
    CHECK((state.x - raw.x).cwiseAbs().maxCoeff() == 0.0);
    // The first call must not consume randomness.
    CHECK(mix_rng.bits() == probe_rng.bits());
  }

  TEST_CASE("running mixup blends with the previous virtual batch") {
    Rng data_rng(21), mix_rng(22), ref_rng(22);
    const Batch b1 = oracle::random_batch({1, 2, 2}, 3, 4, data_rng);
    const Batch b2 = oracle::random_batch({1, 2, 2}, 3, 4, data_rng);
    const Batch b3 = oracle::random_batch({1, 2, 2}, 3, 4, data_rng);

    MixupState state;
    running_mixup(b1, state, 0.4, mix_rng);
    const Batch v2 = running_mixup(b2, state, 0.4, mix_rng);
    const double lam2 = ref_rng.beta(0.4, 0.4);
    CHECK((v2.x - (lam2 * b2.x + (1.0 - lam2) * b1.x)).cwiseAbs().maxCoeff() <=
          1e-15);
    CHECK((v2.t - (lam2 * b2.t + (1.0 - lam2) * b1.t)).cwiseAbs().maxCoeff() <=
          1e-15);

    // The third step blends with the *virtual* batch v2, not with raw b2.
    const Batch v3 = running_mixup(b3, state, 0.4, mix_rng);
    const double lam3 = ref_rng.beta(0.4, 0.4);
    CHECK((v3.x - (lam3 * b3.x + (1.0 - lam3) * v2.x)).cwiseAbs().maxCoeff() <=
          1e-15);

    // Labels stay on the probability simplex.
    for (Index s = 0; s < v3.t.rows(); ++s) {
      CHECK(v3.t.row(s).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(v3.t.row(s).minCoeff() >= 0.0);
    }
    // Pixels stay inside the convex hull of the ingredients.
    CHECK(v3.x.maxCoeff() <=
          std::max(b3.x.maxCoeff(), v2.x.maxCoeff()) + 1e-15);
    CHECK(v3.x.minCoeff() >=
          std::min(b3.x.minCoeff(), v2.x.minCoeff()) - 1e-15);

    // A state seeded from a different geometry is rejected.
    Rng other_rng(5);
    const Batch odd = oracle::random_batch({1, 2, 2}, 3, 6, other_rng);
    CHECK_THROWS_AS(running_mixup(odd, state, 0.4, mix_rng), ShapeMismatch);
  }

  TEST_CASE("random erase zeroes one rectangle across all channels") {
    TrainConfig cfg;
    cfg.erase_p = 1.0;
    const Shape sh{2, 6, 6};
    Batch b = ones_batch(sh, 4, 8);
    Rng rng(31);
    random_erase(b, cfg, rng);

    for (Index s = 0; s < b.x.rows(); ++s) {
      CAPTURE(s);
      // Build the zero mask of channel 0 and check it is a full rectangle.
      Index y_lo = sh.h, y_hi = -1, x_lo = sh.w, x_hi = -1;
      Index zeros = 0;
      for (Index y = 0; y < sh.h; ++y)
        for (Index x = 0; x < sh.w; ++x) {
          if (b.x(s, y * sh.w + x) != 0.0) continue;
          ++zeros;
          y_lo = std::min(y_lo, y);
          y_hi = std::max(y_hi, y);
          x_lo = std::min(x_lo, x);
          x_hi = std::max(x_hi, x);
        }
      REQUIRE(zeros >= 1);  // erase_p == 1 guarantees an erase that fits
      CHECK(zeros == (y_hi - y_lo + 1) * (x_hi - x_lo + 1));
      // Both channels share the same rectangle; everything else is intact.
      for (Index ch = 0; ch < sh.c; ++ch)
        for (Index y = 0; y < sh.h; ++y)
          for (Index x = 0; x < sh.w; ++x) {
            const bool inside =
                y >= y_lo && y <= y_hi && x >= x_lo && x <= x_hi;
            CHECK(b.x(s, (ch * sh.h + y) * sh.w + x) == (inside ? 0.0 : 1.0));
          }
    }
  }

  TEST_CASE("random erase respects probability, determinism and fit") {
    const Shape sh{1, 5, 5};
    TrainConfig cfg;

    // p == 0: never touches the batch but still consumes the gate draws.
    cfg.erase_p = 0.0;
    Batch b0 = ones_batch(sh, 2, 6);
    Rng rng0(41);
    random_erase(b0, cfg, rng0);
    CHECK((b0.x.array() == 1.0).all());

    // Same seed, same result; the transform is deterministic.
    cfg.erase_p = 0.7;
    Batch ba = ones_batch(sh, 2, 6);
    Batch bb = ones_batch(sh, 2, 6);
    Rng ra(42), rb(42);
    random_erase(ba, cfg, ra);
    random_erase(bb, cfg, rb);
    CHECK((ba.x - bb.x).cwiseAbs().maxCoeff() == 0.0);

    // Regions that cannot fit are skipped rather than clipped: an extreme
    // aspect ratio on a tiny image makes one side exceed the image in either
    // orientation, so nothing is erased.
    TrainConfig tiny;
    tiny.erase_p = 1.0;
    tiny.erase_area_lo = 0.9;
    tiny.erase_area_hi = 0.95;
    tiny.erase_aspect_lo = 0.05;
    tiny.erase_aspect_hi = 0.06;
    Batch bt = ones_batch({1, 2, 2}, 2, 10);
    Rng rt(43);
    random_erase(bt, tiny, rt);
    CHECK((bt.x.array() == 1.0).all());

    Batch bad = ones_batch(sh, 2, 2);
    bad.shape = {1, 4, 4};
    Rng rbad(44);
    CHECK_THROWS_AS(random_erase(bad, cfg, rbad), ShapeMismatch);
  }

  TEST_CASE("rescale projects weights onto norm sqrt(2*d_out)") {
    Rng rng(51);
    Matrix w(6, 11);
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal();

    const Matrix out = rescale_weights(w, 6);
    const double target = std::sqrt(12.0);
    CHECK(out.norm() == doctest::Approx(target).epsilon(1e-9));
    // Direction is preserved.
    const Matrix dir_diff = out / out.norm() - w / w.norm();
    CHECK(dir_diff.cwiseAbs().maxCoeff() <= 1e-12);

    // Idempotent up to the epsilon guard.
    const Matrix twice = rescale_weights(out, 6);
    CHECK((twice - out).cwiseAbs().maxCoeff() <= 1e-8);

    // The epsilon guard keeps a zero matrix at zero instead of NaN.
    const Matrix z = rescale_weights(Matrix::Zero(3, 4), 3);
    CHECK((z.array() == 0.0).all());
  }
}
