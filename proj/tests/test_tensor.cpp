#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "wmlab/kernels.hpp"
#include "wmlab/nn.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

using namespace wmlab;

namespace {

std::vector<double> randn(Rng& rng, size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

void gemm_oracle(bool ta, bool tb, int m, int n, int k, const double* a,
                 const double* b, double* c, bool acc) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = acc ? c[i * n + j] : 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
}

}  // namespace

TEST_CASE("gemm matches the triple-loop oracle in all transpose modes") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = rng.randint(1, 9), n = rng.randint(1, 9),
              k = rng.randint(1, 9);
    const bool ta = trial % 2 == 0, tb = trial % 3 == 0,
               acc = trial % 4 == 0;
    auto a = randn(rng, static_cast<size_t>(m) * k);
    auto b = randn(rng, static_cast<size_t>(k) * n);
    auto c0 = randn(rng, static_cast<size_t>(m) * n);
    auto c1 = c0;
    gemm_oracle(ta, tb, m, n, k, a.data(), b.data(), c0.data(), acc);
    kernels::gemm(ta, tb, m, n, k, a.data(), b.data(), c1.data(), acc);
    for (size_t i = 0; i < c0.size(); ++i)
      CHECK(c1[i] == doctest::Approx(c0[i]).epsilon(1e-12));
  }
}

TEST_CASE("parallel gemm is bit-identical to the serial reference") {
  Rng rng(12);
  for (int n : {1, 7, 33, 64, 130}) {
    auto a = randn(rng, static_cast<size_t>(n) * n);
    auto b = randn(rng, static_cast<size_t>(n) * n);
    std::vector<double> cs(a.size(), 0.5), cp(a.size(), 0.5);
    kernels::gemm_serial(false, false, n, n, n, a.data(), b.data(), cs.data(),
                         true);
    kernels::gemm(false, false, n, n, n, a.data(), b.data(), cp.data(), true);
    CHECK(cs == cp);
    kernels::gemm_serial(true, true, n, n, n, a.data(), b.data(), cs.data());
    kernels::gemm(true, true, n, n, n, a.data(), b.data(), cp.data());
    CHECK(cs == cp);
  }
}

TEST_CASE("backward accumulates: second call doubles leaf grads") {
  Tensor w = Tensor::from({1.0, -2.0, 0.5, 3.0}, {2, 2}, true);
  Tensor x = Tensor::from({0.3, 0.7}, {1, 2});
  Tensor loss = sum(square(matmul(x, w)));
  backward(loss);
  const auto g1 = w.grad();
  backward(loss);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(w.grad()[i] == 2.0 * g1[i]);
}

TEST_CASE("NoGradGuard produces constant results") {
  Tensor w = Tensor::from({1.0, 2.0}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = sum(mul(w, w));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.item() == doctest::Approx(5.0));
}

TEST_CASE("detach blocks gradient flow") {
  Tensor w = Tensor::from({2.0}, {1}, true);
  Tensor y = sum(mul(w.detach(), w));
  backward(y);
  CHECK(w.grad()[0] == doctest::Approx(2.0));  // only the non-detached factor
}

namespace {

// one random little network; returns max relative FD error over all params
double fd_instance(uint64_t seed) {
  Rng rng(seed);
  const int m = rng.randint(1, 3);
  const int d0 = rng.randint(2, 6), d1 = rng.randint(2, 8),
            d2 = rng.randint(2, 5);
  Tensor x = Tensor::from(randn(rng, static_cast<size_t>(m) * d0), {m, d0});
  std::vector<Tensor> params = {
      Tensor::from(randn(rng, static_cast<size_t>(d0) * d1, 0.7), {d0, d1},
                   true),
      Tensor::from(randn(rng, static_cast<size_t>(d1), 0.3), {d1}, true),
      Tensor::from(randn(rng, static_cast<size_t>(d1) * d2, 0.7), {d1, d2},
                   true),
      Tensor::from(randn(rng, static_cast<size_t>(d2), 0.3), {d2}, true),
      Tensor::from(randn(rng, static_cast<size_t>(d2), 0.2), {d2}, true),  // gain
      Tensor::from(randn(rng, static_cast<size_t>(d2), 0.2), {d2}, true),  // bias
  };
  const int act = rng.randint(0, 2);
  const int head = rng.randint(0, 2);
  std::vector<double> tgt(static_cast<size_t>(d2));
  for (double& v : tgt) v = rng.uniform();
  double s = 0.0;
  for (double v : tgt) s += v;
  for (double& v : tgt) v /= s;

  auto loss_fn = [&]() {
    Tensor h = add(matmul(x, params[0]), params[1]);
    h = act == 0 ? relu(h) : act == 1 ? tanh_t(h) : square(h);
    Tensor o = add(matmul(h, params[2]), params[3]);
    o = layer_norm_rows(o, params[4], params[5]);
    if (head == 0) return mean(square(o));
    if (head == 1) {
      Tensor ce = cross_entropy(slice_rows(o, 0, 1), tgt);
      return sum(add(ce, scale(sum(square(o)), 0.01)));
    }
    return sum(mul(softmax_rows(o), exp_t(scale(o, 0.1))));
  };

  Tensor loss = loss_fn();
  backward(loss);
  double worst = 0.0;
  const double h = 1e-5;
  for (auto& p : params) {
    for (size_t i = 0; i < p.value().size(); ++i) {
      const double keep = p.value()[i];
      p.value()[i] = keep + h;
      const double up = loss_fn().item();
      p.value()[i] = keep - h;
      const double dn = loss_fn().item();
      p.value()[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double an = p.grad()[i];
      const double rel =
          std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("reverse-mode gradients match central finite differences") {
  double worst = 0.0;
  for (uint64_t i = 0; i < 40; ++i)
    worst = std::max(worst, fd_instance(derive_seed(900, i)));
  CHECK(worst <= 1e-4);
}

TEST_CASE("softmax rows sum to one and log_softmax agrees") {
  Rng rng(5);
  Tensor a = Tensor::from(randn(rng, 12, 3.0), {3, 4});
  Tensor p = softmax_rows(a);
  Tensor lp = log_softmax_rows(a);
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += p.value()[r * 4 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  for (size_t i = 0; i < p.value().size(); ++i)
    CHECK(lp.value()[i] ==
          doctest::Approx(std::log(p.value()[i])).epsilon(1e-10));
}

TEST_CASE("slice, concat, gather and transpose move values correctly") {
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  Tensor t = transpose(a);
  CHECK(t.shape() == std::vector<int>{3, 2});
  CHECK(t.value() == std::vector<double>{1, 4, 2, 5, 3, 6});
  Tensor top = slice_rows(a, 0, 1);
  CHECK(top.value() == std::vector<double>{1, 2, 3});
  Tensor right = slice_cols(a, 1, 3);
  CHECK(right.value() == std::vector<double>{2, 3, 5, 6});
  Tensor cat = concat_rows({top, top});
  CHECK(cat.value() == std::vector<double>{1, 2, 3, 1, 2, 3});
  Tensor g = gather_rows(a, {1, 0, 1});
  CHECK(g.value() == std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6});
  Tensor wide = concat_cols({top, slice_cols(top, 0, 2)});
  CHECK(wide.shape() == std::vector<int>{1, 5});
  CHECK(wide.value() == std::vector<double>{1, 2, 3, 1, 2});
}

TEST_CASE("shape mismatches throw") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS((void)reshape(a, {4, 2}), std::invalid_argument);
  CHECK_THROWS_AS((void)slice_rows(a, 0, 5), std::invalid_argument);
}

TEST_CASE("layer_norm_rows standardizes before the affine map") {
  Rng rng(9);
  Tensor x = Tensor::from(randn(rng, 8, 4.0), {2, 4});
  Tensor g = Tensor::full({4}, 1.0);
  Tensor b = Tensor::zeros({4});
  Tensor y = layer_norm_rows(x, g, b);
  for (int r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < 4; ++c) mu += y.value()[r * 4 + c];
    mu /= 4.0;
    for (int c = 0; c < 4; ++c) {
      const double d = y.value()[r * 4 + c] - mu;
      var += d * d;
    }
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var / 4.0 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("simnorm groups are positive and sum to one") {
  Rng rng(13);
  Tensor x = Tensor::from(randn(rng, 16, 2.0), {2, 8});
  Tensor y = simnorm(x, 4);
  for (int r = 0; r < 2; ++r)
    for (int g = 0; g < 2; ++g) {
      double s = 0.0;
      for (int i = 0; i < 4; ++i) {
        const double v = y.value()[r * 8 + g * 4 + i];
        CHECK(v > 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  CHECK_THROWS_AS((void)simnorm(x, 3), std::invalid_argument);
}

TEST_CASE("support two-hot puts mass on adjacent atoms and round-trips") {
  Support sp;  // 21 bins over [-10, 10]
  CHECK(sp.step() == doctest::Approx(1.0));
  auto onatom = sp.two_hot(0.0);
  CHECK(onatom[10] == doctest::Approx(1.0));
  auto between = sp.two_hot(0.5);
  CHECK(between[10] == doctest::Approx(0.5));
  CHECK(between[11] == doctest::Approx(0.5));
  auto low = sp.two_hot(-25.0);
  CHECK(low[0] == doctest::Approx(1.0));
  Rng rng(21);
  for (int i = 0; i < 50; ++i) {
    const double x = rng.uniform(-10.0, 10.0);
    const auto th = sp.two_hot(x);
    double mean = 0.0, mass = 0.0;
    for (int j = 0; j < sp.bins; ++j) {
      mean += th[static_cast<size_t>(j)] * sp.center(j);
      mass += th[static_cast<size_t>(j)];
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mean == doctest::Approx(x).epsilon(1e-10));
  }
  const std::vector<double> uniform_logits(21, 0.3);
  CHECK(sp.expectation_of_logits(uniform_logits) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross_entropy equals the hand formula and its floor") {
  Tensor logits = Tensor::from({0.2, -1.0, 0.7}, {1, 3}, true);
  const std::vector<double> tgt = {0.5, 0.25, 0.25};
  Tensor lp = log_softmax_rows(logits);
  double hand = 0.0;
  for (int i = 0; i < 3; ++i) hand -= tgt[static_cast<size_t>(i)] * lp.value()[static_cast<size_t>(i)];
  CHECK(cross_entropy(logits, tgt).item() == doctest::Approx(hand).epsilon(1e-12));

  // logits already log-proportional to the target: CE hits the entropy floor
  Tensor match = Tensor::from(
      {std::log(0.5), std::log(0.25), std::log(0.25)}, {1, 3});
  double ent = 0.0;
  for (double p : tgt) ent -= p * std::log(p);
  CHECK(cross_entropy(match, tgt).item() == doctest::Approx(ent).epsilon(1e-12));
}

TEST_CASE("param store: creation order, prefix freezing, unique names") {
  ParamStore ps;
  Rng rng(3);
  make_mlp(ps, "enc", {4, 8, 4}, rng);
  make_linear(ps, "head", 4, 2, rng);
  CHECK(ps.items().size() == 6);
  CHECK(ps.items()[0].name == "enc.0.w");
  CHECK(ps.numel() == 4 * 8 + 8 + 8 * 4 + 4 + 4 * 2 + 2);
  ps.set_trainable("enc.", false);
  int frozen = 0;
  for (const auto& p : ps.items()) frozen += p.trainable ? 0 : 1;
  CHECK(frozen == 4);
  CHECK(ps.find("head.w") != nullptr);
  CHECK(ps.find("nope") == nullptr);
  CHECK_THROWS_AS((void)ps.create("head.w", {1}), std::runtime_error);
}

TEST_CASE("identical seeds build identical networks") {
  ParamStore a, b;
  Rng ra(77), rb(77);
  make_mlp(a, "m", {3, 5, 2}, ra);
  make_mlp(b, "m", {3, 5, 2}, rb);
  for (size_t i = 0; i < a.items().size(); ++i)
    CHECK(a.items()[i].t.value() == b.items()[i].t.value());
}

TEST_CASE("mlp forward collects post-relu hidden rows") {
  ParamStore ps;
  Rng rng(4);
  Mlp m = make_mlp(ps, "m", {3, 6, 2}, rng);
  Tensor x = Tensor::from({0.1, -0.2, 0.4}, {1, 3});
  std::vector<Tensor> hidden;
  Tensor y = m.forward(x, &hidden);
  CHECK(y.shape() == std::vector<int>{1, 2});
  REQUIRE(hidden.size() == 1);
  for (double v : hidden[0].value()) CHECK(v >= 0.0);
}
