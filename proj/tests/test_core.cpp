#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dalace/nn.hpp"
#include "dalace/ops.hpp"
#include "dalace/parallel.hpp"
#include "testutil.hpp"

using namespace dalace;
using testutil::grad_check;
using testutil::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;
}

TEST_CASE("tensor basics") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  t.fill(2.5f);
  CHECK(t[5] == 2.5f);
  auto r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK_THROWS_AS((void)t.reshaped({4, 2}), Error);
}

TEST_CASE("rng determinism and basic stats") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  CHECK(a.next() != c.next());

  Rng g(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = g.gaussian();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("parallel_for matches serial for any thread count") {
  std::vector<double> out1(1000), out2(1000);
  set_num_threads(1);
  parallel_for(1000, [&](int64_t i) { out1[size_t(i)] = std::sin(double(i)); });
  set_num_threads(4);
  parallel_for(1000, [&](int64_t i) { out2[size_t(i)] = std::sin(double(i)); });
  CHECK(out1 == out2);
  set_num_threads(1);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  for (int rep = 0; rep < 5; ++rep) {
    auto x0 = random_tensor({2, 3, 4, 4}, rng);
    for (auto fn : {
             +[](const VarPtr<double>& x) { return sum_all(relu(x)); },
             +[](const VarPtr<double>& x) { return sum_all(leaky_relu(x, 0.2)); },
             +[](const VarPtr<double>& x) { return sum_all(sigmoid(x)); },
             +[](const VarPtr<double>& x) { return sum_all(tanh_op(x)); },
             +[](const VarPtr<double>& x) { return sum_all(scale(add_const(x, 0.3), -1.7)); },
         }) {
      auto res = grad_check(fn, x0);
      CHECK(res.max_rel_err < kGradTol);
    }
  }
}

TEST_CASE("conv2d forward matches direct convolution") {
  Rng rng(3);
  const int64_t B = 2, C = 3, H = 5, W = 6, K = 4, k = 3, stride = 2, pad = 1;
  auto x = random_tensor({B, C, H, W}, rng);
  auto w = random_tensor({K, C, k, k}, rng);
  auto bias = random_tensor({K}, rng);
  auto out = conv2d(constant(x.clone()), constant(w.clone()), constant(bias.clone()), stride, pad);

  const int64_t OH = (H + 2 * pad - k) / stride + 1;
  const int64_t OW = (W + 2 * pad - k) / stride + 1;
  REQUIRE(out->val.shape() == std::vector<int64_t>({B, K, OH, OW}));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ko = 0; ko < K; ++ko)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias[ko];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                  acc += x.at(b, c, iy, ix) * w.at(ko, c, ky, kx);
              }
          CHECK(out->val.at(b, ko, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d gradients wrt input, weight, bias") {
  Rng rng(4);
  const auto x0 = random_tensor({2, 2, 6, 6}, rng);
  const auto w0 = random_tensor({3, 2, 3, 3}, rng);
  const auto b0 = random_tensor({3}, rng);

  for (int64_t stride : {1, 2}) {
    auto fx = [&](const VarPtr<double>& x) {
      return sum_all(sigmoid(conv2d(x, constant(w0.clone()), constant(b0.clone()), stride, 1)));
    };
    CHECK(grad_check(fx, x0).max_rel_err < kGradTol);

    auto fw = [&](const VarPtr<double>& w) {
      return sum_all(sigmoid(conv2d(constant(x0.clone()), w, constant(b0.clone()), stride, 1)));
    };
    CHECK(grad_check(fw, w0).max_rel_err < kGradTol);

    auto fb = [&](const VarPtr<double>& b) {
      return sum_all(sigmoid(conv2d(constant(x0.clone()), constant(w0.clone()), b, stride, 1)));
    };
    CHECK(grad_check(fb, b0).max_rel_err < kGradTol);
  }
}

TEST_CASE("linear, pooling, upsample, concat, slice gradients") {
  Rng rng(5);
  const auto w0 = random_tensor({4, 6}, rng);
  const auto b0 = random_tensor({4}, rng);
  auto f_lin = [&](const VarPtr<double>& x) {
    return sum_all(tanh_op(linear(x, constant(w0.clone()), constant(b0.clone()))));
  };
  CHECK(grad_check(f_lin, random_tensor({3, 6}, rng)).max_rel_err < kGradTol);

  auto f_gap = [](const VarPtr<double>& x) { return sum_all(sigmoid(global_avg_pool(x))); };
  CHECK(grad_check(f_gap, random_tensor({2, 3, 4, 4}, rng)).max_rel_err < kGradTol);

  auto f_pool = [](const VarPtr<double>& x) { return sum_all(sigmoid(max_pool2x2(x))); };
  CHECK(grad_check(f_pool, random_tensor({2, 2, 4, 4}, rng)).max_rel_err < kGradTol);

  auto f_up = [](const VarPtr<double>& x) { return sum_all(sigmoid(upsample_nearest2x(x))); };
  CHECK(grad_check(f_up, random_tensor({2, 2, 3, 3}, rng)).max_rel_err < kGradTol);

  const auto other = random_tensor({2, 2, 3, 3}, rng);
  auto f_cat = [&](const VarPtr<double>& x) {
    return sum_all(sigmoid(concat_channels(x, constant(other.clone()))));
  };
  CHECK(grad_check(f_cat, random_tensor({2, 1, 3, 3}, rng)).max_rel_err < kGradTol);

  auto f_slice = [](const VarPtr<double>& x) { return sum_all(sigmoid(slice_cols(x, 1, 4))); };
  CHECK(grad_check(f_slice, random_tensor({3, 6}, rng)).max_rel_err < kGradTol);
}

TEST_CASE("batch_norm training-mode gradient includes statistics path") {
  Rng rng(6);
  const int64_t C = 3;
  const auto g0 = random_tensor({C}, rng, 0.5, 1.5);
  const auto be0 = random_tensor({C}, rng);
  auto run = [&](const VarPtr<double>& x) {
    Tensor<double> rm = Tensor<double>::zeros({C});
    Tensor<double> rv = Tensor<double>::full({C}, 1.0);
    return sum_all(sigmoid(batch_norm(x, constant(g0.clone()), constant(be0.clone()), rm, rv,
                                      /*training=*/true, 0.1, 1e-5)));
  };
  CHECK(grad_check(run, random_tensor({3, C, 3, 3}, rng)).max_rel_err < kGradTol);

  // Affine parameter gradients.
  const auto x0 = random_tensor({2, C, 4, 4}, rng);
  auto run_g = [&](const VarPtr<double>& g) {
    Tensor<double> rm = Tensor<double>::zeros({C});
    Tensor<double> rv = Tensor<double>::full({C}, 1.0);
    return sum_all(sigmoid(
        batch_norm(constant(x0.clone()), g, constant(be0.clone()), rm, rv, true, 0.1, 1e-5)));
  };
  CHECK(grad_check(run_g, g0).max_rel_err < kGradTol);
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  Rng rng(16);
  const int64_t C = 2;
  Tensor<double> rm = Tensor<double>::from({C}, {0.3, -0.2});
  Tensor<double> rv = Tensor<double>::from({C}, {0.5, 2.0});
  auto x0 = random_tensor({1, C, 2, 2}, rng);
  auto out = batch_norm(constant(x0.clone()), constant(Tensor<double>::full({C}, 1.0)),
                        constant(Tensor<double>::zeros({C})), rm, rv, /*training=*/false, 0.1,
                        1e-12);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < 4; ++i) {
      const double expect = (x0.at(0, c, i / 2, i % 2) - rm[c]) / std::sqrt(rv[c] + 1e-12);
      CHECK(out->val.at(0, c, i / 2, i % 2) == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("softmax, reductions and loss primitive gradients") {
  Rng rng(7);
  auto f_sm = [](const VarPtr<double>& x) {
    return sum_all(sigmoid(softmax_channels(x)));
  };
  CHECK(grad_check(f_sm, random_tensor({2, 3, 3, 3}, rng)).max_rel_err < kGradTol);

  const auto ref = random_tensor({2, 2, 3, 3}, rng);
  auto f_l1 = [&](const VarPtr<double>& x) { return l1_mean(x, constant(ref.clone())); };
  CHECK(grad_check(f_l1, random_tensor({2, 2, 3, 3}, rng)).max_rel_err < kGradTol);

  Tensor<uint8_t> labels({2, 3, 3});
  for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = uint8_t(rng.uniform_int(2));
  auto f_ce = [&](const VarPtr<double>& x) {
    return ce_mean(softmax_channels(x), labels, 1e-7);
  };
  CHECK(grad_check(f_ce, random_tensor({2, 2, 3, 3}, rng)).max_rel_err < kGradTol);

  auto f_nl = [](const VarPtr<double>& x) { return neg_log_mean(sigmoid(x), 1e-7); };
  CHECK(grad_check(f_nl, random_tensor({5}, rng)).max_rel_err < kGradTol);
  auto f_nl1m = [](const VarPtr<double>& x) { return neg_log1m_mean(sigmoid(x), 1e-7); };
  CHECK(grad_check(f_nl1m, random_tensor({5}, rng)).max_rel_err < kGradTol);
}

TEST_CASE("probability domain validation") {
  auto bad = constant(Tensor<double>::from({2}, {0.5, 1.2}));
  CHECK_THROWS_AS((void)neg_log_mean(bad, 1e-7), Error);
  auto neg = constant(Tensor<double>::from({1}, {-0.1}));
  CHECK_THROWS_AS((void)neg_log1m_mean(neg, 1e-7), Error);
}

TEST_CASE("adain matches scalar-loop oracle") {
  Rng rng(8);
  const int64_t B = 1, C = 2, H = 3, W = 3;
  auto x = random_tensor({B, C, H, W}, rng);
  Tensor<double> gamma = Tensor<double>::from({B, C}, {2.0, 0.5});
  Tensor<double> beta = Tensor<double>::from({B, C}, {1.0, -1.0});
  const double eps = 1e-6;
  auto out = adain(constant(x.clone()), constant(gamma.clone()), constant(beta.clone()), eps);

  for (int64_t c = 0; c < C; ++c) {
    double mu = 0;
    for (int64_t i = 0; i < H * W; ++i) mu += x.at(0, c, i / W, i % W);
    mu /= double(H * W);
    double var = 0;
    for (int64_t i = 0; i < H * W; ++i) {
      const double d = x.at(0, c, i / W, i % W) - mu;
      var += d * d;
    }
    var /= double(H * W);
    for (int64_t i = 0; i < H * W; ++i) {
      const double expect =
          gamma[c] * (x.at(0, c, i / W, i % W) - mu) / std::sqrt(var + eps) + beta[c];
      CHECK(std::abs(out->val.at(0, c, i / W, i % W) - expect) < 1e-6);
    }
  }
}

TEST_CASE("adain normalization identities") {
  Rng rng(9);
  const int64_t B = 2, C = 3, H = 4, W = 4;
  auto x = random_tensor({B, C, H, W}, rng);

  // gamma=1, beta=0: per-channel spatial mean 0 and variance 1.
  auto out = adain(constant(x.clone()), constant(Tensor<double>::full({B, C}, 1.0)),
                   constant(Tensor<double>::zeros({B, C})), 1e-10);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    double mu = 0, var = 0;
    const double* p = out->val.data() + bc * H * W;
    for (int64_t i = 0; i < H * W; ++i) mu += p[i];
    mu /= double(H * W);
    for (int64_t i = 0; i < H * W; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= double(H * W);
    CHECK(std::abs(mu) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }

  // gamma=0: output constant beta per channel.
  auto out2 = adain(constant(x.clone()), constant(Tensor<double>::zeros({B, C})),
                    constant(Tensor<double>::full({B, C}, 0.7)), 1e-10);
  for (int64_t i = 0; i < out2->val.numel(); ++i) CHECK(out2->val[i] == doctest::Approx(0.7));
}

TEST_CASE("adain gradients (input and affine)") {
  Rng rng(10);
  const int64_t B = 2, C = 2, H = 3, W = 3;
  const auto g0 = random_tensor({B, C}, rng, 0.5, 1.5);
  const auto b0 = random_tensor({B, C}, rng);
  auto fx = [&](const VarPtr<double>& x) {
    return sum_all(sigmoid(adain(x, constant(g0.clone()), constant(b0.clone()), 1e-5)));
  };
  CHECK(grad_check(fx, random_tensor({B, C, H, W}, rng)).max_rel_err < kGradTol);

  const auto x0 = random_tensor({B, C, H, W}, rng);
  auto fg = [&](const VarPtr<double>& g) {
    return sum_all(sigmoid(adain(constant(x0.clone()), g, constant(b0.clone()), 1e-5)));
  };
  CHECK(grad_check(fg, g0).max_rel_err < kGradTol);
}

TEST_CASE("weight sharing accumulates gradients from both uses") {
  Rng rng(11);
  Param<double> p;
  p.init("shared", random_tensor({4}, rng));
  auto a = leaf(p);
  auto b = leaf(p);
  auto y = weighted_sum<double>({{1.0, sum_all(sigmoid(a))}, {2.0, sum_all(sigmoid(b))}});
  backward(y);
  for (int64_t i = 0; i < 4; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-p.value[i]));
    CHECK(p.grad[i] == doctest::Approx(3.0 * s * (1 - s)).epsilon(1e-9));
  }
}

TEST_CASE("detach stops gradient flow") {
  Rng rng(12);
  auto x = input(random_tensor({3}, rng));
  auto y = sum_all(sigmoid(detach(x)));
  backward(y);
  CHECK_FALSE(x->grad.defined());
}

TEST_CASE("adam reference step") {
  Param<float> p;
  p.init("p", Tensor<float>::from({1}, {1.0f}));
  Adam<float> opt;
  opt.attach({&p}, 0.1f);
  p.grad[0] = 0.5f;
  opt.step();
  // Bias-corrected first step moves by lr * g / (|g| + eps-ish).
  const float expect = 1.0f - 0.1f * 0.5f / (std::sqrt(0.25f) + 1e-8f);
  CHECK(p.value[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("results identical across thread counts") {
  Rng rng(13);
  const auto x0 = random_tensor({4, 3, 8, 8}, rng);
  const auto w0 = random_tensor({5, 3, 3, 3}, rng);
  const auto b0 = random_tensor({5}, rng);
  auto run = [&]() {
    auto out = conv2d(constant(x0.clone()), constant(w0.clone()), constant(b0.clone()), 1, 1);
    return out->val;
  };
  set_num_threads(1);
  auto r1 = run();
  set_num_threads(3);
  auto r3 = run();
  set_num_threads(1);
  for (int64_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r3[i]);
}
