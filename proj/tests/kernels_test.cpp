#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "qoebd/kernels.hpp"

using namespace qoebd::kernels;

namespace {

std::vector<float> rand_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double max_rel(const std::vector<float>& a, const std::vector<float>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]) / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  return worst;
}

}  // namespace

TEST_CASE("gemm matches the serial reference for every transpose combination") {
  std::mt19937_64 rng(1);
  const int shapes[][3] = {{1, 1, 1}, {7, 5, 3}, {33, 65, 17}, {130, 70, 300}, {4, 513, 260}};
  for (const auto& s : shapes) {
    const int m = s[0], n = s[1], k = s[2];
    for (Trans ta : {Trans::no, Trans::yes})
      for (Trans tb : {Trans::no, Trans::yes}) {
        const int lda = ta == Trans::no ? k : m;
        const int ldb = tb == Trans::no ? n : k;
        const auto a = rand_vec(static_cast<std::size_t>(m) * k, rng);
        const auto b = rand_vec(static_cast<std::size_t>(k) * n, rng);
        auto c = rand_vec(static_cast<std::size_t>(m) * n, rng);
        auto ref = c;
        gemm(ta, tb, m, n, k, 0.7f, a.data(), lda, b.data(), ldb, 0.3f, c.data(), n);
        reference::gemm(ta, tb, m, n, k, 0.7f, a.data(), lda, b.data(), ldb, 0.3f, ref.data(), n);
        CHECK(max_rel(c, ref) < 1e-5);
      }
  }
}

TEST_CASE("gemm with beta zero ignores garbage in C") {
  std::vector<float> a{1, 2, 3, 4}, b{1, 0, 0, 1};
  std::vector<float> c(4, std::nanf(""));
  gemm(Trans::no, Trans::no, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f, c.data(), 2);
  CHECK(c == a);
}

TEST_CASE("conv2d forward and backward match the reference") {
  std::mt19937_64 rng(2);
  for (Padding pad : {Padding::zero, Padding::replicate})
    for (int kernel : {1, 3, 5}) {
      ConvGeometry g{3, 9, 7, 4, kernel, pad};
      const int batch = 3;
      const auto x = rand_vec(static_cast<std::size_t>(batch) * g.in_channels * g.pixels(), rng);
      const auto w = rand_vec(g.weight_count(), rng);
      const auto bias = rand_vec(static_cast<std::size_t>(g.out_channels), rng);
      const std::size_t out_n = static_cast<std::size_t>(batch) * g.out_channels * g.pixels();
      std::vector<float> y(out_n), yr(out_n);
      conv2d_forward(g, batch, x.data(), w.data(), bias.data(), y.data());
      reference::conv2d_forward(g, batch, x.data(), w.data(), bias.data(), yr.data());
      CHECK(max_rel(y, yr) < 1e-5);

      const auto dy = rand_vec(out_n, rng);
      std::vector<float> dx(x.size()), dxr(x.size());
      std::vector<float> dw(w.size(), 0.5f), dwr(w.size(), 0.5f);
      std::vector<float> db(bias.size(), 0.25f), dbr(bias.size(), 0.25f);
      conv2d_backward(g, batch, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
      reference::conv2d_backward(g, batch, x.data(), w.data(), dy.data(), dxr.data(), dwr.data(), dbr.data());
      CHECK(max_rel(dx, dxr) < 1e-5);
      CHECK(max_rel(dw, dwr) < 1e-5);
      CHECK(max_rel(db, dbr) < 1e-5);
    }
}

TEST_CASE("replicate padding keeps constant inputs constant") {
  ConvGeometry g{2, 6, 6, 3, 3, Padding::replicate};
  std::vector<float> x(2 * 36, 0.4f);
  std::mt19937_64 rng(3);
  const auto w = rand_vec(g.weight_count(), rng);
  std::vector<float> y(3 * 36);
  conv2d_forward(g, 1, x.data(), w.data(), nullptr, y.data());
  for (int c = 0; c < 3; ++c)
    for (int p = 1; p < 36; ++p) CHECK(y[static_cast<std::size_t>(c * 36 + p)] == doctest::Approx(y[static_cast<std::size_t>(c * 36)]).epsilon(1e-6));
}

TEST_CASE("maxpool and upsample are adjoint to their backward passes") {
  std::mt19937_64 rng(4);
  const int b = 2, c = 3, h = 6, w = 4;
  const auto x = rand_vec(static_cast<std::size_t>(b * c * h * w), rng);
  std::vector<float> y(static_cast<std::size_t>(b * c * 3 * 2));
  std::vector<int> arg(y.size());
  maxpool2_forward(b, c, h, w, x.data(), y.data(), arg.data());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[static_cast<std::size_t>(arg[i])]);
  const auto dy = rand_vec(y.size(), rng);
  std::vector<float> dx(x.size());
  maxpool2_backward(b, c, h, w, dy.data(), arg.data(), dx.data());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += static_cast<double>(dy[i]) * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(dx[i]) * x[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));

  std::vector<float> up(static_cast<std::size_t>(b * c * 12 * 8));
  upsample2_forward(b, c, h, w, x.data(), up.data());
  const auto du = rand_vec(up.size(), rng);
  std::vector<float> dxu(x.size());
  upsample2_backward(b, c, h, w, du.data(), dxu.data());
  lhs = rhs = 0.0;
  for (std::size_t i = 0; i < up.size(); ++i) lhs += static_cast<double>(du[i]) * up[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(dxu[i]) * x[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
}

TEST_CASE("deterministic mode repeats bit for bit") {
  set_deterministic(true);
  std::mt19937_64 rng(5);
  const int m = 64, n = 96, k = 2048;
  const auto a = rand_vec(static_cast<std::size_t>(m) * k, rng);
  const auto b = rand_vec(static_cast<std::size_t>(k) * n, rng);
  std::vector<float> c1(static_cast<std::size_t>(m) * n), c2(c1.size());
  gemm(Trans::no, Trans::no, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f, c1.data(), n);
  gemm(Trans::no, Trans::no, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f, c2.data(), n);
  CHECK(c1 == c2);
}
