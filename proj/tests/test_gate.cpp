#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <rave/attention.hpp>
#include <rave/config.hpp>
#include <rave/gate.hpp>
#include <rave/matrix.hpp>
#include <rave/rng.hpp>
#include <rave/segments.hpp>

#include "oracle.hpp"

using rave::CausalMask;
using rave::GateForm;
using rave::GateLocation;
using rave::GateSettings;
using rave::Matrix;
using rave::VisualKeyMask;

namespace {

Matrix random_matrix(rave::Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      m(i, j) = rng.uniform(-scale, scale);
    }
  }
  return m;
}

std::vector<int> iota_positions(int n) {
  std::vector<int> pos(n);
  for (int i = 0; i < n; ++i) {
    pos[i] = i;
  }
  return pos;
}

// Scale-normalized error: relative for O(1) magnitudes, absolute below 1.
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("gate scores") {
  SUBCASE("zero weights give zero scores") {
    rave::Rng rng(2);
    const Matrix features = random_matrix(rng, 5, 4);
    const std::vector<double> w(4, 0.0);
    for (double s : rave::gate_score(features, w)) {
      CHECK(s == 0.0);
    }
  }
  SUBCASE("dot-product example") {
    Matrix features(1, 2);
    features(0, 0) = 1.0;
    features(0, 1) = 2.0;
    const std::vector<double> w{0.5, 0.5};
    CHECK(rave::gate_score(features, w)[0] == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("weight length must match the feature width") {
    const Matrix features(2, 4);
    const std::vector<double> w(3, 0.0);
    CHECK_THROWS_AS(rave::gate_score(features, w), std::invalid_argument);
  }
}

TEST_CASE("pair gate") {
  SUBCASE("zero scores give the zero matrix") {
    const std::vector<double> z(3, 0.0);
    const Matrix g = rave::pair_gate(z, z);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        CHECK(g(i, j) == 0.0);
      }
    }
  }
  SUBCASE("tanh of the score product") {
    const std::vector<double> s_q{1.5};
    const std::vector<double> s_k{2.0};
    const Matrix g = rave::pair_gate(s_q, s_k);
    CHECK(g(0, 0) == doctest::Approx(std::tanh(3.0)).epsilon(1e-15));
    CHECK(g(0, 0) == doctest::Approx(0.995055).epsilon(1e-6));
  }
  SUBCASE("sign and boundedness") {
    rave::Rng rng(3);
    std::vector<double> s_q(6), s_k(6);
    for (int i = 0; i < 6; ++i) {
      s_q[i] = rng.uniform(-3.0, 3.0);
      s_k[i] = rng.uniform(-3.0, 3.0);
    }
    const Matrix g = rave::pair_gate(s_q, s_k);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        CHECK(std::abs(g(i, j)) < 1.0);
        if (s_q[i] * s_k[j] != 0.0) {
          const double sign = s_q[i] * s_k[j] > 0.0 ? 1.0 : -1.0;
          CHECK(g(i, j) * sign > 0.0);
        }
      }
    }
  }
}

TEST_CASE("pre-softmax recalibration") {
  rave::Rng rng(4);
  const Matrix logits = random_matrix(rng, 4, 4, 2.0);
  const VisualKeyMask vmask{0, 1, 1, 0};

  SUBCASE("zero gate leaves logits bitwise unchanged") {
    const Matrix zero(4, 4);
    for (GateForm form : {GateForm::kAdditive, GateForm::kMultiplicative}) {
      const Matrix out = rave::recalibrate_logits(logits, zero, 1.0, vmask, form);
      CHECK(oracle::bits_equal(out, logits));
    }
  }
  SUBCASE("additive example") {
    Matrix l(1, 1), g(1, 1);
    l(0, 0) = 0.2;
    g(0, 0) = 0.5;
    const VisualKeyMask visual{1};
    const Matrix out = rave::recalibrate_logits(l, g, 1.0, visual, GateForm::kAdditive);
    CHECK(out(0, 0) == doctest::Approx(0.7).epsilon(1e-15));
  }
  SUBCASE("multiplicative form scales by 1 + gamma G") {
    const Matrix g = random_matrix(rng, 4, 4, 0.9);
    const double gamma = 0.7;
    const Matrix out = rave::recalibrate_logits(logits, g, gamma, vmask, GateForm::kMultiplicative);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        if (vmask[j]) {
          CHECK(out(i, j) == doctest::Approx(logits(i, j) * (1.0 + gamma * g(i, j))).epsilon(1e-14));
        } else {
          CHECK(oracle::bits_equal(out(i, j), logits(i, j)));
        }
      }
    }
  }
  SUBCASE("non-visual columns are intact bitwise under nonzero gates") {
    const Matrix g = random_matrix(rng, 4, 4, 0.9);
    for (GateForm form : {GateForm::kAdditive, GateForm::kMultiplicative}) {
      const Matrix out = rave::recalibrate_logits(logits, g, 1.0, vmask, form);
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          if (!vmask[j]) {
            CHECK(oracle::bits_equal(out(i, j), logits(i, j)));
          }
        }
      }
    }
  }
}

TEST_CASE("post-softmax recalibration") {
  SUBCASE("zero gate returns the distribution unchanged") {
    Matrix a(1, 2);
    a(0, 0) = 0.25;
    a(0, 1) = 0.75;
    const Matrix zero(1, 2);
    const VisualKeyMask vmask{0, 1};
    const Matrix out = rave::post_softmax_recalibrate(a, zero, 1.0, vmask);
    CHECK(oracle::bits_equal(out, a));
  }
  SUBCASE("bias then renormalize") {
    Matrix a(1, 2);
    a(0, 0) = 0.5;
    a(0, 1) = 0.5;
    Matrix g(1, 2);
    g(0, 1) = 0.5;
    const VisualKeyMask vmask{0, 1};
    const Matrix out = rave::post_softmax_recalibrate(a, g, 1.0, vmask);
    CHECK(out(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  }
  SUBCASE("rows sum to 1 on random inputs") {
    rave::Rng rng(6);
    for (int trial = 0; trial < 30; ++trial) {
      const int n = rng.uniform_int(2, 8);
      Matrix logits = random_matrix(rng, n, n, 2.0);
      const Matrix a = rave::masked_softmax_rows(logits, CausalMask(n));
      std::vector<double> s_q(n), s_k(n);
      for (int i = 0; i < n; ++i) {
        s_q[i] = rng.uniform(-2.0, 2.0);
        s_k[i] = rng.uniform(-2.0, 2.0);
      }
      const Matrix g = rave::pair_gate(s_q, s_k);
      VisualKeyMask vmask(n, 0);
      for (int j = 0; j < n; ++j) {
        vmask[j] = rng.uniform() < 0.5 ? 1 : 0;
      }
      const CausalMask mask(n);
      const Matrix out = rave::post_softmax_recalibrate(a, g, 0.5, vmask, &mask);
      for (int i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
          CHECK(out(i, j) >= 0.0);
          if (j > i) {
            CHECK(out(i, j) == 0.0);
          }
          sum += out(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("a row clamped to zero mass is a degenerate-row error") {
    Matrix a(1, 2);
    a(0, 0) = 0.3;
    a(0, 1) = 0.7;
    Matrix g(1, 2);
    g(0, 0) = -0.9;
    g(0, 1) = -0.9;
    const VisualKeyMask vmask{1, 1};
    CHECK_THROWS_AS(rave::post_softmax_recalibrate(a, g, 1.0, vmask), std::runtime_error);
  }
}

TEST_CASE("head selection") {
  SUBCASE("quarter of each group of four") {
    const rave::HeadPartition p = rave::select_heads(32, 8, 0.25);
    CHECK(p.gated_per_group == 1);
    CHECK(p.gated_count() == 8);
    for (int g = 0; g < 8; ++g) {
      CHECK(p.is_gated(4 * g));
      CHECK_FALSE(p.is_gated(4 * g + 1));
      CHECK_FALSE(p.is_gated(4 * g + 2));
      CHECK_FALSE(p.is_gated(4 * g + 3));
    }
  }
  SUBCASE("ratio endpoints") {
    const rave::HeadPartition none = rave::select_heads(8, 2, 0.0);
    CHECK(none.gated_count() == 0);
    const rave::HeadPartition all = rave::select_heads(8, 2, 1.0);
    CHECK(all.gated_count() == 8);
    for (int h = 0; h < 8; ++h) {
      CHECK_FALSE(none.is_gated(h));
      CHECK(all.is_gated(h));
    }
  }
  SUBCASE("half of each group of four takes the two lowest heads") {
    const rave::HeadPartition p = rave::select_heads(8, 2, 0.5);
    for (int g = 0; g < 2; ++g) {
      CHECK(p.is_gated(4 * g));
      CHECK(p.is_gated(4 * g + 1));
      CHECK_FALSE(p.is_gated(4 * g + 2));
      CHECK_FALSE(p.is_gated(4 * g + 3));
    }
  }
  SUBCASE("gated count arithmetic across the ratio grid") {
    const double ratios[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    const int shapes[][2] = {{8, 2}, {32, 8}, {4, 4}};
    for (const auto& shape : shapes) {
      const int r = shape[0] / shape[1];
      for (double p : ratios) {
        const rave::HeadPartition part = rave::select_heads(shape[0], shape[1], p);
        const int want = static_cast<int>(std::lround(p * r)) * shape[1];
        CHECK(part.gated_count() == want);
        int actual = 0;
        for (int h = 0; h < shape[0]; ++h) {
          actual += part.is_gated(h) ? 1 : 0;
        }
        CHECK(actual == want);
      }
    }
  }
  SUBCASE("invalid ratio rejected") {
    CHECK_THROWS_AS(rave::select_heads(8, 2, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(rave::select_heads(8, 2, 1.1), std::invalid_argument);
    CHECK_THROWS_AS(rave::select_heads(6, 4, 0.5), std::invalid_argument);
  }
}

TEST_CASE("zero gate weights reproduce standard attention bitwise in every variant") {
  rave::Rng rng(8);
  const int n = 6, d = 4;
  const Matrix q = random_matrix(rng, n, d);
  const Matrix k = random_matrix(rng, n, d);
  const Matrix v = random_matrix(rng, n, d);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const VisualKeyMask vmask{0, 1, 1, 1, 0, 0};
  const std::vector<double> w_zero(d, 0.0);

  const auto std_res = rave::standard_attention_forward(q, k, v, pos, mask, 10000.0);

  for (GateLocation location : {GateLocation::kPreSoftmax, GateLocation::kPostSoftmax}) {
    for (GateForm form : {GateForm::kAdditive, GateForm::kMultiplicative}) {
      for (bool decode_only : {false, true}) {
        std::vector<std::uint8_t> rows(n, 1);
        if (decode_only) {
          rows = {0, 0, 0, 0, 0, 1};
        }
        const GateSettings settings{1.0, location, form};
        const auto res = rave::gated_attention_forward(q, k, v, pos, mask, 10000.0, w_zero,
                                                       w_zero, settings, vmask, rows);
        CHECK(oracle::bits_equal(res.probs, std_res.probs));
        CHECK(oracle::bits_equal(res.output, std_res.output));
      }
    }
  }
}

TEST_CASE("gated attention matches the step-by-step dense oracle") {
  oracle::Mat q{{1.0, 2.0}, {-1.0, 1.0}, {2.0, -1.0}};
  oracle::Mat k{{1.0, -1.0}, {2.0, 1.0}, {-1.0, 2.0}};
  oracle::Mat v{{1.0, 0.0}, {0.0, 2.0}, {3.0, 1.0}};
  const std::vector<int> pos{1, 2, 3};
  const oracle::Vec w_gq{0.5, -0.25};
  const oracle::Vec w_gk{0.25, 0.5};
  const std::vector<bool> visual{false, true, false};
  const VisualKeyMask vmask{0, 1, 0};
  const double gamma = 1.0;

  const Matrix qm = oracle::to_matrix(q);
  const Matrix km = oracle::to_matrix(k);
  const Matrix vm = oracle::to_matrix(v);
  const CausalMask mask(3);

  for (GateLocation location : {GateLocation::kPreSoftmax, GateLocation::kPostSoftmax}) {
    for (GateForm form : {GateForm::kAdditive, GateForm::kMultiplicative}) {
      for (bool decode_only : {false, true}) {
        const std::vector<bool> gated_row =
            decode_only ? std::vector<bool>{false, false, true} : std::vector<bool>{true, true, true};
        std::vector<std::uint8_t> rows;
        for (bool b : gated_row) {
          rows.push_back(b ? 1 : 0);
        }
        const auto want = oracle::dense_gated_attention(
            q, k, v, pos, 10000.0, w_gq, w_gk, gamma, visual, gated_row,
            location == GateLocation::kPreSoftmax, form == GateForm::kAdditive);
        const GateSettings settings{gamma, location, form};
        const auto got = rave::gated_attention_forward(qm, km, vm, pos, mask, 10000.0, w_gq,
                                                       w_gk, settings, vmask, rows);
        CHECK(oracle::max_abs_diff(want.probs, got.probs) < 1e-12);
        CHECK(oracle::max_abs_diff(want.out, got.output) < 1e-12);
      }
    }
  }
}

TEST_CASE("uniform positive bias on visual logits strictly raises visual mass") {
  rave::Rng rng(9);
  int tested = 0;
  while (tested < 100) {
    const int n = rng.uniform_int(3, 10);
    std::vector<double> logits(n), biased(n);
    VisualKeyMask vmask(n, 0);
    int visuals = 0;
    for (int j = 0; j < n; ++j) {
      logits[j] = rng.uniform(-3.0, 3.0);
      vmask[j] = rng.uniform() < 0.4 ? 1 : 0;
      visuals += vmask[j];
    }
    if (visuals == 0 || visuals == n) {
      continue;
    }
    const double c = rng.uniform(0.01, 2.0);
    for (int j = 0; j < n; ++j) {
      biased[j] = vmask[j] ? logits[j] + c : logits[j];
    }
    std::vector<std::uint8_t> allowed(n, 1);
    std::vector<double> p0(n), p1(n);
    rave::masked_softmax_row(logits, allowed, p0);
    rave::masked_softmax_row(biased, allowed, p1);
    double m0 = 0.0, m1 = 0.0;
    for (int j = 0; j < n; ++j) {
      if (vmask[j]) {
        m0 += p0[j];
        m1 += p1[j];
      }
    }
    CHECK(m1 > m0);
    ++tested;
  }
}

TEST_CASE("gate gradients match central differences") {
  rave::Rng rng(10);
  const int n = 4, d = 2;
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const VisualKeyMask vmask{0, 1, 1, 0};
  const std::vector<std::uint8_t> rows(n, 1);

  for (GateLocation location : {GateLocation::kPreSoftmax, GateLocation::kPostSoftmax}) {
    for (GateForm form : {GateForm::kAdditive, GateForm::kMultiplicative}) {
      CAPTURE(static_cast<int>(location));
      CAPTURE(static_cast<int>(form));
      const Matrix q = random_matrix(rng, n, d);
      const Matrix k = random_matrix(rng, n, d);
      const Matrix v = random_matrix(rng, n, d);
      const Matrix weights = random_matrix(rng, n, d);
      std::vector<double> w_gq{0.4, -0.3};
      std::vector<double> w_gk{-0.2, 0.5};
      const GateSettings settings{0.8, location, form};

      auto loss_of = [&](const Matrix& qq, const Matrix& kk, const Matrix& vv,
                         const std::vector<double>& gq, const std::vector<double>& gk) {
        const auto res = rave::gated_attention_forward(qq, kk, vv, pos, mask, 10000.0, gq, gk,
                                                       settings, vmask, rows);
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
          for (int t = 0; t < d; ++t) {
            s += weights(i, t) * res.output(i, t);
          }
        }
        return s;
      };

      rave::HeadCache cache;
      rave::gated_attention_forward(q, k, v, pos, mask, 10000.0, w_gq, w_gk, settings, vmask,
                                    rows, &cache);
      Matrix dq(n, d), dk(n, d), dv(n, d);
      std::vector<double> d_gq(d, 0.0), d_gk(d, 0.0);
      rave::gated_attention_backward(weights, cache, q, k, v, pos, mask, 10000.0, w_gq, w_gk,
                                     settings, vmask, rows, dq, dk, dv, d_gq, d_gk);

      const double step = 1e-5;
      for (int t = 0; t < d; ++t) {
        double saved = w_gq[t];
        w_gq[t] = saved + step;
        const double up_q = loss_of(q, k, v, w_gq, w_gk);
        w_gq[t] = saved - step;
        const double down_q = loss_of(q, k, v, w_gq, w_gk);
        w_gq[t] = saved;
        CHECK(rel_err(d_gq[t], (up_q - down_q) / (2.0 * step)) < 1e-5);

        saved = w_gk[t];
        w_gk[t] = saved + step;
        const double up_k = loss_of(q, k, v, w_gq, w_gk);
        w_gk[t] = saved - step;
        const double down_k = loss_of(q, k, v, w_gq, w_gk);
        w_gk[t] = saved;
        CHECK(rel_err(d_gk[t], (up_k - down_k) / (2.0 * step)) < 1e-5);
      }

      Matrix qc = q, kc = k, vc = v;
      for (int i = 0; i < n; ++i) {
        for (int t = 0; t < d; ++t) {
          for (int which = 0; which < 3; ++which) {
            Matrix* target = which == 0 ? &qc : which == 1 ? &kc : &vc;
            const Matrix* analytic = which == 0 ? &dq : which == 1 ? &dk : &dv;
            const double saved = (*target)(i, t);
            (*target)(i, t) = saved + step;
            const double up = loss_of(qc, kc, vc, w_gq, w_gk);
            (*target)(i, t) = saved - step;
            const double down = loss_of(qc, kc, vc, w_gq, w_gk);
            (*target)(i, t) = saved;
            CHECK(rel_err((*analytic)(i, t), (up - down) / (2.0 * step)) < 1e-5);
          }
        }
      }
    }
  }
}

TEST_CASE("key-side gate gradient vanishes without visual keys") {
  rave::Rng rng(11);
  const int n = 4, d = 2;
  const Matrix q = random_matrix(rng, n, d);
  const Matrix k = random_matrix(rng, n, d);
  const Matrix v = random_matrix(rng, n, d);
  const Matrix weights = random_matrix(rng, n, d);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const VisualKeyMask vmask(n, 0);  // no image segment at all
  const std::vector<std::uint8_t> rows(n, 1);
  const std::vector<double> w_gq{0.4, -0.3};
  const std::vector<double> w_gk{-0.2, 0.5};

  for (GateLocation location : {GateLocation::kPreSoftmax, GateLocation::kPostSoftmax}) {
    const GateSettings settings{1.0, location, GateForm::kAdditive};
    rave::HeadCache cache;
    rave::gated_attention_forward(q, k, v, pos, mask, 10000.0, w_gq, w_gk, settings, vmask, rows,
                                  &cache);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> d_gq(d, 0.0), d_gk(d, 0.0);
    rave::gated_attention_backward(weights, cache, q, k, v, pos, mask, 10000.0, w_gq, w_gk,
                                   settings, vmask, rows, dq, dk, dv, d_gq, d_gk);
    for (int t = 0; t < d; ++t) {
      CHECK(d_gq[t] == 0.0);
      CHECK(d_gk[t] == 0.0);
    }
  }
}

TEST_CASE("zero adjoint gives zero gradients") {
  rave::Rng rng(12);
  const int n = 3, d = 2;
  const Matrix q = random_matrix(rng, n, d);
  const Matrix k = random_matrix(rng, n, d);
  const Matrix v = random_matrix(rng, n, d);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const VisualKeyMask vmask{0, 1, 0};
  const std::vector<std::uint8_t> rows(n, 1);
  const std::vector<double> w_gq{0.4, -0.3};
  const std::vector<double> w_gk{-0.2, 0.5};
  const GateSettings settings{1.0, GateLocation::kPreSoftmax, GateForm::kAdditive};

  rave::HeadCache cache;
  rave::gated_attention_forward(q, k, v, pos, mask, 10000.0, w_gq, w_gk, settings, vmask, rows,
                                &cache);
  const Matrix zero_adjoint(n, d);
  Matrix dq(n, d), dk(n, d), dv(n, d);
  std::vector<double> d_gq(d, 0.0), d_gk(d, 0.0);
  rave::gated_attention_backward(zero_adjoint, cache, q, k, v, pos, mask, 10000.0, w_gq, w_gk,
                                 settings, vmask, rows, dq, dk, dv, d_gq, d_gk);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < d; ++t) {
      CHECK(dq(i, t) == 0.0);
      CHECK(dk(i, t) == 0.0);
      CHECK(dv(i, t) == 0.0);
    }
  }
  CHECK(d_gq[0] == 0.0);
  CHECK(d_gk[0] == 0.0);
}

TEST_CASE("the pair gate is invariant to rigid position shifts") {
  rave::Rng rng(13);
  const int n = 4, d = 4;
  const Matrix q = random_matrix(rng, n, d);
  const Matrix k = random_matrix(rng, n, d);
  const Matrix v = random_matrix(rng, n, d);
  const CausalMask mask(n);
  const VisualKeyMask vmask{0, 1, 1, 0};
  const std::vector<std::uint8_t> rows(n, 1);
  const std::vector<double> w_gq{0.4, -0.3, 0.2, 0.1};
  const std::vector<double> w_gk{-0.2, 0.5, 0.3, -0.4};
  const GateSettings settings{1.0, GateLocation::kPreSoftmax, GateForm::kAdditive};

  std::vector<int> base_pos = iota_positions(n);
  std::vector<int> shifted_pos = base_pos;
  for (int& p : shifted_pos) {
    p += 17;
  }
  rave::HeadCache cache_a, cache_b;
  rave::gated_attention_forward(q, k, v, base_pos, mask, 10000.0, w_gq, w_gk, settings, vmask,
                                rows, &cache_a);
  rave::gated_attention_forward(q, k, v, shifted_pos, mask, 10000.0, w_gq, w_gk, settings, vmask,
                                rows, &cache_b);
  CHECK(oracle::bits_equal(cache_a.gate, cache_b.gate));
}

TEST_CASE("multi-head forward: ungated heads match the standard path bitwise") {
  rave::Rng rng(14);
  rave::AttentionConfig config;
  config.d_model = 16;
  config.d_k = 4;
  config.d_v = 4;
  config.num_layers = 1;
  config.num_query_heads = 4;
  config.num_kv_heads = 2;
  config.head_ratio = 0.5;  // heads 0 and 2 gated
  config.validate();

  const int n = 6;
  const Matrix q = random_matrix(rng, n, 16);
  const Matrix k = random_matrix(rng, n, 8);
  const Matrix v = random_matrix(rng, n, 8);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const rave::SegmentMap map = rave::SegmentMap::from_spans(1, 3, 1, 1);
  const rave::HeadPartition partition = rave::select_heads(4, 2, 0.5);

  rave::GateParams params = rave::GateParams::zeros(1, 4);
  rave::Rng wrng(15);
  for (int t = 0; t < 4; ++t) {
    params.w_gq[0](0, t) = wrng.uniform(-0.5, 0.5);
    params.w_gk[0](0, t) = wrng.uniform(-0.5, 0.5);
  }

  const auto rave_res = rave::multi_head_attention_forward(
      q, k, v, pos, mask, params, 0, partition, config, map, rave::AttentionVariant::kRave);
  const auto std_res = rave::multi_head_attention_forward(
      q, k, v, pos, mask, params, 0, partition, config, map, rave::AttentionVariant::kStandard);

  REQUIRE(partition.is_gated(0));
  REQUIRE_FALSE(partition.is_gated(1));
  REQUIRE(partition.is_gated(2));
  REQUIRE_FALSE(partition.is_gated(3));

  for (int h : {1, 3}) {
    CHECK(oracle::bits_equal(rave_res.probs[h], std_res.probs[h]));
    const Matrix rave_block = rave::column_block(rave_res.output, h * 4, (h + 1) * 4);
    const Matrix std_block = rave::column_block(std_res.output, h * 4, (h + 1) * 4);
    CHECK(oracle::bits_equal(rave_block, std_block));
  }
  bool any_diff = false;
  for (int h : {0, 2}) {
    if (!oracle::bits_equal(rave_res.probs[h], std_res.probs[h])) {
      any_diff = true;
    }
  }
  CHECK(any_diff);
}

TEST_CASE("decode-only stage leaves prefill query rows on the standard path") {
  rave::Rng rng(16);
  const int n = 6, d = 4;
  const Matrix q = random_matrix(rng, n, d);
  const Matrix k = random_matrix(rng, n, d);
  const Matrix v = random_matrix(rng, n, d);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const rave::SegmentMap map = rave::SegmentMap::from_spans(1, 2, 1, 2);
  const VisualKeyMask vmask = rave::visual_key_mask(map);
  const std::vector<std::uint8_t> rows = rave::gated_query_rows(map, rave::GateStage::kDecodeOnly);
  CHECK(rows == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1});

  const std::vector<double> w_gq{0.6, -0.4, 0.2, 0.3};
  const std::vector<double> w_gk{-0.3, 0.5, 0.4, -0.2};
  const GateSettings settings{1.0, GateLocation::kPreSoftmax, GateForm::kAdditive};

  const auto gated = rave::gated_attention_forward(q, k, v, pos, mask, 10000.0, w_gq, w_gk,
                                                   settings, vmask, rows);
  const auto standard = rave::standard_attention_forward(q, k, v, pos, mask, 10000.0);

  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < n; ++j) {
      CHECK(oracle::bits_equal(gated.probs(i, j), standard.probs(i, j)));
    }
  }
  bool answer_rows_differ = false;
  for (int i = 4; i < 6; ++i) {
    for (int j = 0; j < n; ++j) {
      if (!oracle::bits_equal(gated.probs(i, j), standard.probs(i, j))) {
        answer_rows_differ = true;
      }
    }
  }
  CHECK(answer_rows_differ);
}

TEST_CASE("multi-head gate gradients flow into the shared per-layer vectors") {
  rave::Rng rng(18);
  rave::AttentionConfig config;
  config.d_model = 8;
  config.d_k = 4;
  config.d_v = 4;
  config.num_layers = 1;
  config.num_query_heads = 2;
  config.num_kv_heads = 1;
  config.head_ratio = 0.5;  // head 0 gated
  config.validate();

  const int n = 5;
  const Matrix q = random_matrix(rng, n, 8);
  const Matrix k = random_matrix(rng, n, 4);
  const Matrix v = random_matrix(rng, n, 4);
  const std::vector<int> pos = iota_positions(n);
  const CausalMask mask(n);
  const rave::SegmentMap map = rave::SegmentMap::from_spans(1, 2, 1, 1);
  const rave::HeadPartition partition = rave::select_heads(2, 1, 0.5);

  rave::GateParams params = rave::GateParams::zeros(1, 4);
  for (int t = 0; t < 4; ++t) {
    params.w_gq[0](0, t) = rng.uniform(-0.5, 0.5);
    params.w_gk[0](0, t) = rng.uniform(-0.5, 0.5);
  }
  const Matrix weights = random_matrix(rng, n, 8);

  auto loss_of = [&]() {
    const auto res = rave::multi_head_attention_forward(
        q, k, v, pos, mask, params, 0, partition, config, map, rave::AttentionVariant::kRave);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int t = 0; t < 8; ++t) {
        s += weights(i, t) * res.output(i, t);
      }
    }
    return s;
  };

  std::vector<rave::HeadCache> caches;
  rave::multi_head_attention_forward(q, k, v, pos, mask, params, 0, partition, config, map,
                                     rave::AttentionVariant::kRave, &caches);
  Matrix dq(n, 8), dk(n, 4), dv(n, 4);
  rave::GateParams d_params = rave::GateParams::zeros(1, 4);
  rave::multi_head_attention_backward(weights, caches, q, k, v, pos, mask, params, 0, partition,
                                      config, map, rave::AttentionVariant::kRave, dq, dk, dv,
                                      d_params);

  const double step = 1e-5;
  for (int t = 0; t < 4; ++t) {
    double saved = params.w_gq[0](0, t);
    params.w_gq[0](0, t) = saved + step;
    const double up = loss_of();
    params.w_gq[0](0, t) = saved - step;
    const double down = loss_of();
    params.w_gq[0](0, t) = saved;
    CHECK(rel_err(d_params.w_gq[0](0, t), (up - down) / (2.0 * step)) < 1e-5);
  }
  for (int t = 0; t < 4; ++t) {
    double saved = params.w_gk[0](0, t);
    params.w_gk[0](0, t) = saved + step;
    const double up = loss_of();
    params.w_gk[0](0, t) = saved - step;
    const double down = loss_of();
    params.w_gk[0](0, t) = saved;
    CHECK(rel_err(d_params.w_gk[0](0, t), (up - down) / (2.0 * step)) < 1e-5);
  }
}
