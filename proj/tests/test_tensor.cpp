#include <cmath>
#include <random>
#include <vector>

#include "codac/common.hpp"
#include "codac/kernels.hpp"
#include "codac/params.hpp"
#include "codac/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using codac::FullPrecisionGuard;
using codac::GradCheckResult;
using codac::Shape;
using codac::Tape;
using codac::Tensor;

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> vals(static_cast<std::size_t>(codac::shape_numel(shape)));
  for (double& v : vals) v = lo + (hi - lo) * codac::uniform_draw(rng);
  return Tensor::from(std::move(shape), std::move(vals));
}

// Values bounded away from zero, for kink-free relu checks.
Tensor rand_signed(Shape shape, std::mt19937_64& rng) {
  std::vector<double> vals(static_cast<std::size_t>(codac::shape_numel(shape)));
  for (double& v : vals) {
    const double mag = 0.2 + 0.8 * codac::uniform_draw(rng);
    v = codac::uniform_draw(rng) < 0.5 ? -mag : mag;
  }
  return Tensor::from(std::move(shape), std::move(vals));
}

// Scalar loss with non-uniform output gradient: sum(out * fixed_weights).
Tensor weighted(const Tensor& out, const Tensor& w) { return codac::sum(codac::mul(out, w)); }

void require_ok(const GradCheckResult& res) {
  INFO("max rel err ", res.max_rel_err, " at ", res.worst);
  CHECK(res.ok);
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(a.rank() == 2);
  CHECK(a.numel() == 6);
  CHECK(a.at(1, 2) == 6.0);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(a.item(), std::invalid_argument);
  CHECK_THROWS_AS(a.at(0), std::invalid_argument);
  CHECK_THROWS_AS((void)Tensor::from({0}, {}), std::invalid_argument);
}

TEST_CASE("storage rounds through 32-bit; full-precision mode lifts it") {
  Tensor t = Tensor::from({1}, {0.1});
  CHECK(t.at(0) == static_cast<double>(0.1f));
  CHECK(t.at(0) != 0.1);
  {
    FullPrecisionGuard fp;
    Tensor u = Tensor::from({1}, {0.1});
    CHECK(u.at(0) == 0.1);
  }
  CHECK(!codac::full_precision_mode());

  // Every op output lands on the 32-bit grid in normal mode.
  auto rng = codac::rng_stream(7, "grid");
  Tensor a = rand_tensor({4, 4}, rng), b = rand_tensor({4, 4}, rng);
  Tensor c = codac::matmul(a, b);
  for (double v : c.values()) CHECK(v == static_cast<double>(static_cast<float>(v)));
}

TEST_CASE("reductions accumulate in 64-bit before storage rounding") {
  // In 32-bit accumulation 1e8 + 1 - 1e8 collapses to 0; the 64-bit
  // accumulator keeps the 1.
  Tensor a = Tensor::from({1, 3}, {1e8, 1.0, -1e8});
  Tensor b = Tensor::from({3, 1}, {1.0, 1.0, 1.0});
  CHECK(codac::matmul(a, b).item() == 1.0);
}

TEST_CASE("matmul small cases") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = codac::matmul(i2, m);
  CHECK(r.at(0, 0) == 1.0);
  CHECK(r.at(0, 1) == 2.0);
  CHECK(r.at(1, 0) == 3.0);
  CHECK(r.at(1, 1) == 4.0);

  Tensor row = Tensor::from({1, 2}, {1, 2});
  Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(codac::matmul(row, col).item() == 11.0);

  CHECK_THROWS_AS(codac::matmul(row, row), std::invalid_argument);
}

TEST_CASE("dilated conv matches direct-summation reference") {
  // Centered delta kernel is the identity at any dilation.
  Tensor x = Tensor::from({5, 1}, {1, 2, 3, 4, 5});
  for (int dil : {1, 2, 3}) {
    Tensor delta = Tensor::from({1, 1, 3}, {0, 1, 0});
    Tensor y = codac::conv1d_dilated(x, delta, dil);
    for (int t = 0; t < 5; ++t) CHECK(y.at(t, 0) == x.at(t, 0));
  }

  // Two-sided kernel, dilation 2, zero padding of width 2 per side.
  Tensor w101 = Tensor::from({1, 1, 3}, {1, 0, 1});
  Tensor y = codac::conv1d_dilated(x, w101, 2);
  const std::vector<double> expect = oracles::conv1d({1, 2, 3, 4, 5}, 5, 1, {1, 0, 1}, 1, 3, 2);
  REQUIRE(expect == std::vector<double>{3, 4, 6, 2, 3});
  for (int t = 0; t < 5; ++t) CHECK(y.at(t, 0) == expect[static_cast<std::size_t>(t)]);

  CHECK_THROWS_AS(codac::conv1d_dilated(x, Tensor::zeros({1, 1, 4}), 1), std::invalid_argument);
  CHECK_THROWS_AS(codac::conv1d_dilated(x, w101, 0), std::invalid_argument);

  // Random multichannel cases against the reference.
  for (int it = 0; it < 10; ++it) {
    auto rng = codac::rng_stream(300 + it, "conv_oracle");
    const int t_len = 9, c_in = 2, c_out = 3, ksize = it % 2 == 0 ? 3 : 5;
    const int dil = 1 + it % 3;
    Tensor xr = rand_tensor({t_len, c_in}, rng);
    Tensor wr = rand_tensor({c_out, c_in, ksize}, rng);
    FullPrecisionGuard fp;
    Tensor yr = codac::conv1d_dilated(xr, wr, dil);
    const std::vector<double> ref =
        oracles::conv1d({xr.values().begin(), xr.values().end()}, t_len, c_in,
                        {wr.values().begin(), wr.values().end()}, c_out, ksize, dil);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(yr.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax values and stability") {
  Tensor z = codac::softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(z.at(0) == 0.5);
  CHECK(z.at(1) == 0.5);

  Tensor s = codac::softmax(Tensor::from({3}, {1, 2, 3}), 0);
  CHECK(s.at(0) == doctest::Approx(0.09003057).epsilon(1e-5));
  CHECK(s.at(1) == doctest::Approx(0.24472847).epsilon(1e-5));
  CHECK(s.at(2) == doctest::Approx(0.66524096).epsilon(1e-5));

  Tensor big = codac::softmax(Tensor::from({2}, {1000, 1000}), 0);
  CHECK(big.at(0) == 0.5);

  Tensor edge = codac::softmax(Tensor::from({2}, {80, -80}), 0);
  CHECK(std::isfinite(edge.at(0)));

  // Row and column normalization on a matrix.
  auto rng = codac::rng_stream(11, "sm");
  Tensor m = rand_tensor({3, 4}, rng, -2, 2);
  for (int axis : {0, 1}) {
    Tensor sm = codac::softmax(m, axis);
    const int runs = axis == 1 ? 3 : 4;
    for (int r = 0; r < runs; ++r) {
      double total = 0.0;
      const int len = axis == 1 ? 4 : 3;
      for (int i = 0; i < len; ++i) total += axis == 1 ? sm.at(r, i) : sm.at(i, r);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (double v : sm.values()) CHECK(v >= 0.0);
  }
}

TEST_CASE("layer_norm values") {
  Tensor g = Tensor::from({3}, {1, 1, 1});
  Tensor b = Tensor::from({3}, {0, 0, 0});
  Tensor constant = codac::layer_norm(Tensor::from({3}, {5, 5, 5}), g, b);
  for (double v : constant.values()) CHECK(v == 0.0);

  Tensor two = codac::layer_norm(Tensor::from({2}, {1, 3}), Tensor::from({2}, {1, 1}),
                                 Tensor::from({2}, {0, 0}), 1e-12);
  CHECK(two.at(0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(two.at(1) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("sigmoid, relu, pooling small cases") {
  CHECK(codac::sigmoid(Tensor::scalar(0)).item() == 0.5);
  CHECK(codac::sigmoid(Tensor::scalar(40)).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(codac::sigmoid(Tensor::scalar(-40)).item() < 1e-12);
  CHECK(codac::sigmoid(Tensor::scalar(-40)).item() >= 0.0);
  CHECK(codac::relu(Tensor::scalar(-2)).item() == 0.0);
  CHECK(codac::relu(Tensor::scalar(2)).item() == 2.0);

  Tensor pooled = codac::global_mean_pool(Tensor::from({2, 2}, {1, 3, 3, 5}));
  CHECK(pooled.at(0) == 2.0);
  CHECK(pooled.at(1) == 4.0);
}

TEST_CASE("scaled_dot_attention matches direct formula") {
  // Equal keys make every attention row uniform.
  Tensor q = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor k = Tensor::from({3, 2}, {2, 2, 2, 2, 2, 2});
  Tensor v = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto res = codac::scaled_dot_attention(q, k, v);
  for (double w : res.weights.values()) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-6));

  // T=1 degenerates to the value row.
  auto one = codac::scaled_dot_attention(Tensor::from({1, 2}, {3, 4}), Tensor::from({1, 2}, {1, 1}),
                                         Tensor::from({1, 2}, {7, 9}));
  CHECK(one.weights.item() == 1.0);
  CHECK(one.output.at(0, 0) == 7.0);
  CHECK(one.output.at(0, 1) == 9.0);

  for (int it = 0; it < 10; ++it) {
    auto rng = codac::rng_stream(400 + it, "attn_oracle");
    Tensor qr = rand_tensor({3, 2}, rng), kr = rand_tensor({3, 2}, rng), vr = rand_tensor({3, 2}, rng);
    FullPrecisionGuard fp;
    auto out = codac::scaled_dot_attention(qr, kr, vr);
    auto ref = oracles::attention({qr.values().begin(), qr.values().end()},
                                  {kr.values().begin(), kr.values().end()},
                                  {vr.values().begin(), vr.values().end()}, 3, 2, 2);
    for (std::size_t i = 0; i < ref.output.size(); ++i) {
      CHECK(out.output.values()[i] == doctest::Approx(ref.output[i]).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < ref.weights.size(); ++i) {
      CHECK(out.weights.values()[i] == doctest::Approx(ref.weights[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("tape: basic gradients and reuse rules") {
  Tensor x = Tensor::scalar(3.0, true);
  {
    Tape tape;
    Tensor y = codac::mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0);
    CHECK_THROWS_AS(tape.backward(y), std::logic_error);
  }

  Tensor v = Tensor::from({4}, {1, 2, 3, 4}, true);
  {
    Tape tape;
    v.zero_grad();
    Tensor s = codac::sum(v);
    tape.backward(s);
    for (double g : v.grad()) CHECK(g == 1.0);
  }

  // A value reused along two branches accumulates both contributions.
  {
    Tape tape;
    x.zero_grad();
    Tensor y = codac::add(codac::mul(x, x), codac::scale(x, 3.0));
    tape.backward(y);
    CHECK(x.grad()[0] == 9.0);  // 2x + 3 at x=3
  }

  {
    Tape tape;
    Tensor m = codac::mul(v, v);
    CHECK_THROWS_AS(tape.backward(m), std::invalid_argument);  // non-scalar
  }
  CHECK_THROWS_AS(codac::backward(Tensor::scalar(1.0)), std::logic_error);  // no tape

  {
    Tape tape;
    Tensor bad = codac::sum(v);
    bad.values_mut()[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(tape.backward(bad), codac::NumericError);
  }
}

TEST_CASE("ops outside a tape do not build graph state") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = codac::scale(x, 2.0);
  CHECK(!y.requires_grad());
  {
    Tape tape;
    Tensor z = codac::scale(x, 2.0);
    CHECK(z.requires_grad());
    CHECK(tape.op_count() == 1);
  }
}

TEST_CASE("non-finite op outputs are rejected") {
  CHECK_THROWS_AS(codac::log(Tensor::from({2}, {0.0, 1.0})), codac::NumericError);
  CHECK_THROWS_AS(codac::l2_normalize_rows(Tensor::from({2, 2}, {1, 1, 0, 0})),
                  codac::NumericError);
}

TEST_CASE("gradients match finite differences for every primitive") {
  for (int it = 0; it < 10; ++it) {
    auto rng = codac::rng_stream(500 + it, "gc");

    {  // add / sub / mul with shared inputs
      Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng), w = rand_tensor({3, 4}, rng);
      std::vector<Tensor> in{a, b};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::add(in[0], in[1]), w); }, in));
      require_ok(codac::grad_check(
          [&] { return weighted(codac::sub(in[0], in[1]), w); }, in));
      require_ok(codac::grad_check(
          [&] { return weighted(codac::mul(in[0], in[1]), w); }, in));
    }
    {  // scale / add_scalar / reshape / transpose
      Tensor a = rand_tensor({2, 5}, rng), w = rand_tensor({2, 5}, rng), wt = rand_tensor({5, 2}, rng);
      std::vector<Tensor> in{a};
      require_ok(codac::grad_check([&] { return weighted(codac::scale(in[0], -1.7), w); }, in));
      require_ok(codac::grad_check([&] { return weighted(codac::add_scalar(in[0], 2.5), w); }, in));
      require_ok(codac::grad_check(
          [&] { return weighted(codac::reshape(in[0], {5, 2}), wt); }, in));
      require_ok(codac::grad_check([&] { return weighted(codac::transpose(in[0]), wt); }, in));
    }
    {  // add_rowvec
      Tensor a = rand_tensor({3, 4}, rng), bias = rand_tensor({4}, rng), w = rand_tensor({3, 4}, rng);
      std::vector<Tensor> in{a, bias};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::add_rowvec(in[0], in[1]), w); }, in));
    }
    {  // matmul
      Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng), w = rand_tensor({3, 2}, rng);
      std::vector<Tensor> in{a, b};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::matmul(in[0], in[1]), w); }, in));
    }
    {  // conv at several dilations
      const int dil = 1 + it % 3;
      Tensor x = rand_tensor({7, 2}, rng), wconv = rand_tensor({3, 2, 3}, rng), w = rand_tensor({7, 3}, rng);
      std::vector<Tensor> in{x, wconv};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::conv1d_dilated(in[0], in[1], dil), w); }, in));
    }
    {  // softmax / log_softmax both axes
      Tensor x = rand_tensor({3, 4}, rng, -2, 2), w = rand_tensor({3, 4}, rng);
      std::vector<Tensor> in{x};
      for (int axis : {0, 1}) {
        require_ok(codac::grad_check(
            [&] { return weighted(codac::softmax(in[0], axis), w); }, in));
        require_ok(codac::grad_check(
            [&] { return weighted(codac::log_softmax(in[0], axis), w); }, in));
      }
    }
    {  // layer_norm through x, gain and bias
      Tensor x = rand_tensor({3, 4}, rng), g = rand_tensor({4}, rng, 0.5, 1.5),
             b = rand_tensor({4}, rng), w = rand_tensor({3, 4}, rng);
      std::vector<Tensor> in{x, g, b};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::layer_norm(in[0], in[1], in[2]), w); }, in));
    }
    {  // pointwise nonlinearities
      Tensor x = rand_signed({3, 4}, rng), w = rand_tensor({3, 4}, rng);
      std::vector<Tensor> in{x};
      require_ok(codac::grad_check([&] { return weighted(codac::sigmoid(in[0]), w); }, in));
      require_ok(codac::grad_check([&] { return weighted(codac::relu(in[0]), w); }, in));
      Tensor pos = rand_tensor({3, 4}, rng, 0.5, 2.0);
      std::vector<Tensor> inp{pos};
      require_ok(codac::grad_check([&] { return weighted(codac::log(inp[0]), w); }, inp));
      Tensor mid = rand_tensor({3, 4}, rng, -0.4, 0.4);
      std::vector<Tensor> inc{mid};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::clamp(inc[0], -0.5, 0.5), w); }, inc));
    }
    {  // reductions and reweighting
      Tensor x = rand_tensor({4, 3}, rng), wv = rand_tensor({3}, rng), rw = rand_tensor({4}, rng);
      std::vector<Tensor> in{x};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::global_mean_pool(in[0]), wv); }, in));
      require_ok(codac::grad_check([&] { return codac::sum(in[0]); }, in));
      require_ok(codac::grad_check([&] { return codac::mean(in[0]); }, in));
      std::vector<Tensor> in2{x, rw};
      Tensor w2 = rand_tensor({4, 3}, rng);
      require_ok(codac::grad_check(
          [&] { return weighted(codac::rowwise_scale(in2[0], in2[1]), w2); }, in2));
    }
    {  // l2 normalization with rows bounded away from zero
      std::vector<double> vals(8);
      for (double& v : vals) {
        const double mag = 0.5 + codac::uniform_draw(rng);
        v = codac::uniform_draw(rng) < 0.5 ? -mag : mag;
      }
      Tensor x = Tensor::from({2, 4}, std::move(vals));
      Tensor w = rand_tensor({2, 4}, rng);
      std::vector<Tensor> in{x};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::l2_normalize_rows(in[0]), w); }, in));
    }
    {  // indexing and assembly ops
      Tensor x = rand_tensor({5, 3}, rng), w = rand_tensor({4, 3}, rng);
      std::vector<Tensor> in{x};
      const std::vector<int> rows{0, 2, 2, 4};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::gather_rows(in[0], rows), w); }, in));
      Tensor wsl = rand_tensor({5, 2}, rng);
      require_ok(codac::grad_check(
          [&] { return weighted(codac::slice_cols(in[0], 1, 2), wsl); }, in));

      Tensor p1 = rand_tensor({3, 2}, rng), p2 = rand_tensor({3}, rng);
      Tensor wc = rand_tensor({3, 3}, rng);
      std::vector<Tensor> parts{p1, p2};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::concat_cols({parts[0], parts[1]}), wc); }, parts));

      Tensor r1 = rand_tensor({4}, rng), r2 = rand_tensor({4}, rng), r3 = rand_tensor({4}, rng);
      Tensor ws = rand_tensor({3, 4}, rng);
      std::vector<Tensor> rows3{r1, r2, r3};
      require_ok(codac::grad_check(
          [&] { return weighted(codac::stack_rows({rows3[0], rows3[1], rows3[2]}), ws); }, rows3));
    }
    {  // attention composite, through output and weights
      Tensor q = rand_tensor({3, 2}, rng), k = rand_tensor({3, 2}, rng), v = rand_tensor({3, 2}, rng);
      Tensor wo = rand_tensor({3, 2}, rng), ww = rand_tensor({3, 3}, rng);
      std::vector<Tensor> in{q, k, v};
      require_ok(codac::grad_check(
          [&] {
            auto r = codac::scaled_dot_attention(in[0], in[1], in[2]);
            return codac::add(weighted(r.output, wo), weighted(r.weights, ww));
          },
          in));
    }
    {  // dropout with a replayable mask
      Tensor x = rand_tensor({4, 3}, rng), w = rand_tensor({4, 3}, rng);
      std::vector<Tensor> in{x};
      require_ok(codac::grad_check(
          [&] {
            auto drop_rng = codac::rng_stream(90 + it, "gc_dropout");
            return weighted(codac::dropout(in[0], 0.3, drop_rng), w);
          },
          in));
    }
  }
}

TEST_CASE("compute kernels are bit-identical across thread counts") {
  auto rng = codac::rng_stream(21, "threads");
  const int m = 17, k = 13, n = 9;
  std::vector<double> a(m * k), b(k * n);
  for (double& v : a) v = codac::uniform_draw(rng) - 0.5;
  for (double& v : b) v = codac::uniform_draw(rng) - 0.5;

  std::vector<double> c1(m * n), c4(m * n);
  codac::kernels::set_thread_count(1);
  codac::kernels::matmul_nn(a.data(), b.data(), c1.data(), m, k, n);
  codac::kernels::set_thread_count(4);
  codac::kernels::matmul_nn(a.data(), b.data(), c4.data(), m, k, n);
  CHECK(c1 == c4);

  const int t_len = 33, c_in = 3, c_out = 4, ksize = 5, dil = 2;
  std::vector<double> x(t_len * c_in), w(c_out * c_in * ksize);
  for (double& v : x) v = codac::uniform_draw(rng) - 0.5;
  for (double& v : w) v = codac::uniform_draw(rng) - 0.5;
  std::vector<double> y1(t_len * c_out), y4(t_len * c_out);
  codac::kernels::set_thread_count(1);
  codac::kernels::conv1d(x.data(), w.data(), y1.data(), t_len, c_in, c_out, ksize, dil);
  codac::kernels::set_thread_count(4);
  codac::kernels::conv1d(x.data(), w.data(), y4.data(), t_len, c_in, c_out, ksize, dil);
  CHECK(y1 == y4);
  codac::kernels::set_thread_count(1);
}

TEST_CASE("named random streams are independent and reproducible") {
  auto a1 = codac::rng_stream(5, "alpha");
  auto a2 = codac::rng_stream(5, "alpha");
  auto b = codac::rng_stream(5, "beta");
  CHECK(a1() == a2());
  auto a3 = codac::rng_stream(5, "alpha");
  CHECK(a3() != b());
  auto i0 = codac::rng_stream(5, "alpha", 0);
  auto i1 = codac::rng_stream(5, "alpha", 1);
  CHECK(i0() != i1());
}

TEST_CASE("parameter store ordering, uniqueness, checksums") {
  codac::ParamStore store;
  store.create("w1", {2, 2});
  store.create("b1", {2});
  CHECK(store.names() == std::vector<std::string>{"w1", "b1"});
  CHECK_THROWS_AS(store.create("w1", {1}), std::invalid_argument);
  CHECK_THROWS_AS(store.get("nope"), std::invalid_argument);

  const std::uint64_t before = store.checksum();
  CHECK(before == store.checksum());
  store.get("b1").values_mut()[0] = 1.0;
  CHECK(store.checksum() != before);

  auto rng = codac::rng_stream(3, "init");
  Tensor& w = store.get("w1");
  codac::xavier_init(w, 2, 2, rng);
  const double limit = std::sqrt(6.0 / 4.0);
  for (double v : w.values()) {
    CHECK(v >= -limit);
    CHECK(v <= limit);
  }
}

TEST_CASE("grad flow control: requires_grad and detached") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor d = x.detached();
  CHECK(!d.requires_grad());
  {
    Tape tape;
    Tensor y = codac::sum(codac::mul(d, d));
    CHECK(!y.requires_grad());
    CHECK(tape.op_count() == 0);
  }
}
