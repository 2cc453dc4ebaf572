#include <doctest.h>

#include <cmath>
#include <limits>

#include "kgmod/autodiff.hpp"
#include "kgmod/optim.hpp"
#include "kgmod/rng.hpp"
#include "support/finite_diff.hpp"

using namespace kgmod;
using autodiff::Graph;
using autodiff::NodeId;
using autodiff::Tensor;
using testsupport::max_grad_rel_error;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, bool rg = true,
                     double lo = -1.5, double hi = 1.5) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("forward values match hand-checked cases") {
  Graph g;
  const NodeId eye = g.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const NodeId col = g.leaf(Tensor::matrix(2, 1, {3, 4}));
  const NodeId prod = g.matmul(eye, col);
  CHECK(g.value(prod).data == std::vector<double>{3, 4});

  const NodeId a = g.leaf(Tensor::vec({1, 2}));
  const NodeId b = g.leaf(Tensor::vec({1, 2}));
  CHECK(g.value(g.mse(a, b)).data[0] == doctest::Approx(0.0));

  const NodeId logits = g.leaf(Tensor::matrix(1, 4, {0, 0, 0, 0}));
  const NodeId ce = g.cross_entropy_with_logits(logits, {2});
  CHECK(g.value(ce).data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("backward of x*x at x=3 is 6 and dead branches get zero grad") {
  Graph g;
  const NodeId x = g.leaf(Tensor::scalar(3.0, true));
  const NodeId y = g.leaf(Tensor::scalar(7.0, true));  // never used by the loss
  const NodeId loss = g.mul(x, x);
  g.backward(loss);
  CHECK(g.grad(x)[0] == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(g.grad(y)[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph g;
  const NodeId x = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}, true));
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("shape mismatches are rejected with the offending shapes") {
  Graph g;
  const NodeId a = g.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const NodeId b = g.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("(2x3)"), ShapeError);
  const NodeId c = g.leaf(Tensor::vec({1, 2}));
  CHECK_THROWS_AS(g.add(a, c), ShapeError);
}

TEST_CASE("non-finite forward outputs are rejected") {
  Graph g;
  const NodeId big = g.leaf(Tensor::scalar(1e308));
  CHECK_THROWS_AS(g.scale(g.scale(big, 1e120), 1e120), NumericError);
  Tensor inf_in = Tensor::scalar(0.0);
  inf_in.data[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(g.leaf(inf_in), NumericError);
}

// Spec invariant: for every op kind, analytic gradients match central finite
// differences on random seeded inputs.
TEST_CASE("per-op gradients match the finite-difference oracle") {
  Rng rng(42);
  const double tol = 1e-4;

  auto target_for = [&](std::size_t r, std::size_t c) {
    return random_tensor(rng, {r, c}, false);
  };

  SUBCASE("matmul plain and transposed") {
    for (const auto [ta, tb] : {std::pair{false, false}, std::pair{true, false},
                                std::pair{false, true}, std::pair{true, true}}) {
      std::vector<Tensor> in = {random_tensor(rng, ta ? std::vector<std::size_t>{4, 3}
                                                      : std::vector<std::size_t>{3, 4}),
                                random_tensor(rng, tb ? std::vector<std::size_t>{2, 4}
                                                      : std::vector<std::size_t>{4, 2}),
                                target_for(3, 2)};
      const bool trans_a = ta, trans_b = tb;
      const double err = max_grad_rel_error(in, [=](Graph& g, const auto&) {
        return g.mse(g.matmul(0, 1, trans_a, trans_b), 2);
      });
      CHECK(err < tol);
    }
  }
  SUBCASE("add and mul, same-shape and row-broadcast") {
    std::vector<Tensor> same = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}),
                                target_for(3, 4)};
    CHECK(max_grad_rel_error(same, [](Graph& g, const auto&) {
            return g.mse(g.add(0, 1), 2);
          }) < tol);
    CHECK(max_grad_rel_error(same, [](Graph& g, const auto&) {
            return g.mse(g.mul(0, 1), 2);
          }) < tol);
    std::vector<Tensor> bcast = {random_tensor(rng, {3, 4}), random_tensor(rng, {4}),
                                 target_for(3, 4)};
    CHECK(max_grad_rel_error(bcast, [](Graph& g, const auto&) {
            return g.mse(g.add(0, 1), 2);
          }) < tol);
    CHECK(max_grad_rel_error(bcast, [](Graph& g, const auto&) {
            return g.mse(g.mul(0, 1), 2);
          }) < tol);
  }
  SUBCASE("relu away from the kink") {
    // keep inputs off zero so the finite difference never straddles the kink
    Tensor x = random_tensor(rng, {3, 4});
    for (double& v : x.data) {
      if (std::fabs(v) < 0.05) v = 0.3;
    }
    std::vector<Tensor> in = {x, target_for(3, 4)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.relu(0), 1);
          }) < tol);
  }
  SUBCASE("gelu") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 4}), target_for(3, 4)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.gelu(0), 1);
          }) < tol);
  }
  SUBCASE("embedding_lookup with repeated rows") {
    std::vector<Tensor> in = {random_tensor(rng, {5, 3}), target_for(4, 3)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.embedding_lookup(0, {1, 3, 1, 0}), 1);
          }) < tol);
  }
  SUBCASE("layer_norm") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 6}), target_for(3, 6)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.layer_norm(0), 1);
          }) < tol);
  }
  SUBCASE("softmax") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 5}), target_for(3, 5)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.softmax(0), 1);
          }) < tol);
  }
  SUBCASE("cross_entropy_with_logits with an ignored row") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 5})};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.cross_entropy_with_logits(0, {2, -1, 4});
          }) < tol);
  }
  SUBCASE("mse both sides") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) { return g.mse(0, 1); }) < tol);
  }
  SUBCASE("l2_norm") {
    std::vector<Tensor> in = {random_tensor(rng, {1, 6})};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) { return g.l2_norm(0); }) < tol);
  }
  SUBCASE("concat_rows and slice_rows") {
    std::vector<Tensor> in = {random_tensor(rng, {2, 3}), random_tensor(rng, {1, 3}),
                              target_for(3, 3)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.concat_rows({0, 1}), 2);
          }) < tol);
    std::vector<Tensor> in2 = {random_tensor(rng, {5, 3}), target_for(2, 3)};
    CHECK(max_grad_rel_error(in2, [](Graph& g, const auto&) {
            return g.mse(g.slice_rows(0, 1, 3), 1);
          }) < tol);
  }
  SUBCASE("scale") {
    std::vector<Tensor> in = {random_tensor(rng, {3, 4}), target_for(3, 4)};
    CHECK(max_grad_rel_error(in, [](Graph& g, const auto&) {
            return g.mse(g.scale(0, -2.5), 1);
          }) < tol);
  }
}

// Spec example: a 2-layer MLP loss on fixed seed-42 inputs matches central
// finite differences.
TEST_CASE("two-layer mlp composite matches finite differences") {
  Rng rng(42);
  std::vector<Tensor> in = {random_tensor(rng, {4, 6}, false), random_tensor(rng, {6, 5}),
                            random_tensor(rng, {5}),           random_tensor(rng, {5, 3}),
                            random_tensor(rng, {3}),           random_tensor(rng, {4, 3}, false)};
  const double err = max_grad_rel_error(in, [](Graph& g, const auto&) {
    const NodeId h = g.gelu(g.add(g.matmul(0, 1), 2));
    return g.mse(g.add(g.matmul(h, 3), 4), 5);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Rng rng(7);
    Graph g;
    const NodeId x = g.leaf(random_tensor(rng, {4, 4}));
    const NodeId w = g.leaf(random_tensor(rng, {4, 4}));
    const NodeId t = g.leaf(random_tensor(rng, {4, 4}, false));
    g.backward(g.mse(g.gelu(g.matmul(x, w)), t));
    return std::pair{g.grad(x), g.grad(w)};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);  // bit-identical
  CHECK(a.second == b.second);
}

TEST_CASE("softmax rows sum to one and cross entropy is nonnegative") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const NodeId x = g.leaf(random_tensor(rng, {4, 7}, false, -8, 8));
    const Tensor& probs = g.value(g.softmax(x));
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 7; ++c) sum += probs.at(r, c);
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
    std::vector<long> targets = {static_cast<long>(rng.below(7)), -1,
                                 static_cast<long>(rng.below(7)),
                                 static_cast<long>(rng.below(7))};
    CHECK(g.value(g.cross_entropy_with_logits(x, targets)).data[0] >= 0.0);
  }
}

TEST_CASE("graph debug dump lists every node") {
  Graph g;
  const NodeId a = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  g.relu(a);
  const std::string dump = g.debug_dump();
  CHECK(dump.find("leaf") != std::string::npos);
  CHECK(dump.find("relu") != std::string::npos);
  CHECK(dump.find("(2x2)") != std::string::npos);
}

TEST_CASE("adamw fixed point, hand-evaluated step, and cosine schedule") {
  using autodiff::AdamW;
  using autodiff::AdamWConfig;
  using autodiff::Parameter;

  SUBCASE("zero grads with zero decay leave parameters unchanged") {
    Parameter p("p", Tensor::vec({1.0, -2.0, 3.0}, true));
    p.ensure_grad();
    AdamWConfig cfg;
    cfg.base_lr = 0.1;
    cfg.total_steps = 10;
    AdamW opt(cfg, {&p});
    opt.step();
    CHECK(p.value.data == std::vector<double>{1.0, -2.0, 3.0});
  }

  SUBCASE("one step on p=1, g=1, lr=0.1 lands near 0.9") {
    // bias-corrected moments make the first update ~ lr * sign(g)
    Parameter p("p", Tensor::scalar(1.0, true));
    p.ensure_grad();
    p.grad.data[0] = 1.0;
    AdamWConfig cfg;
    cfg.base_lr = 0.1;
    cfg.total_steps = 1000000;
    AdamW opt(cfg, {&p});
    opt.step();
    CHECK(p.value.data[0] == doctest::Approx(0.9).epsilon(1e-7));
  }

  SUBCASE("cosine: lr(0) = base, lr(T/2) = base/2, lr(T) = 0") {
    AdamWConfig cfg;
    cfg.base_lr = 0.4;
    cfg.total_steps = 1000;
    Parameter p("p", Tensor::scalar(0.0, true));
    AdamW opt(cfg, {&p});
    CHECK(opt.lr_at(0) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(opt.lr_at(500) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(opt.lr_at(1000) == doctest::Approx(0.0).epsilon(1e-15));
    double prev = opt.lr_at(0);
    for (std::size_t t = 1; t <= 1000; t += 37) {
      CHECK(opt.lr_at(t) <= prev + 1e-15);
      prev = opt.lr_at(t);
    }
  }

  SUBCASE("decay is decoupled: zero grads shrink weights without touching moments") {
    Parameter p("p", Tensor::scalar(2.0, true));
    p.ensure_grad();
    AdamWConfig cfg;
    cfg.base_lr = 0.5;
    cfg.weight_decay = 0.1;
    cfg.total_steps = 1000000;
    AdamW opt(cfg, {&p});
    opt.step();
    const double after_one = 2.0 * (1.0 - opt.lr_at(0) * 0.1);
    CHECK(p.value.data[0] == doctest::Approx(after_one).epsilon(1e-12));
    opt.step();
    CHECK(p.value.data[0] ==
          doctest::Approx(after_one * (1.0 - opt.lr_at(1) * 0.1)).epsilon(1e-9));
  }

  SUBCASE("uninitialized grad is rejected") {
    Parameter p("p", Tensor::scalar(1.0, true));
    AdamWConfig cfg;
    AdamW opt(cfg, {&p});
    CHECK_THROWS_AS(opt.step(), Error);
  }
}

TEST_CASE("gradient clipping caps the global norm") {
  using autodiff::Parameter;
  Parameter a("a", Tensor::vec({0.0, 0.0}, true));
  Parameter b("b", Tensor::vec({0.0}, true));
  a.ensure_grad();
  b.ensure_grad();
  a.grad.data = {3.0, 0.0};
  b.grad.data = {4.0};  // global norm 5

  autodiff::clip_gradients({&a, &b}, 10.0);  // under the cap: unchanged
  CHECK(a.grad.data == std::vector<double>{3.0, 0.0});

  autodiff::clip_gradients({&a, &b}, 1.0);
  CHECK(a.grad.data[0] == doctest::Approx(0.6));
  CHECK(b.grad.data[0] == doctest::Approx(0.8));
  double norm = 0;
  for (double g : a.grad.data) norm += g * g;
  for (double g : b.grad.data) norm += g * g;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0));

  autodiff::clip_gradients({&a, &b}, 0.0);  // disabled
  CHECK(b.grad.data[0] == doctest::Approx(0.8));

  Parameter c("c", Tensor::scalar(1.0, true));
  CHECK_THROWS_AS(autodiff::clip_gradients({&c}, 1.0), Error);
}
