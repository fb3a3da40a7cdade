#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "m2m/autograd.hpp"
#include "m2m/gradcheck.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"
#include "test_util.hpp"

using namespace m2m;
using m2m::testing::random_tensor;

namespace {

// Contracts an op output with a fixed random tensor so every output entry
// influences the scalar loss with a distinct weight.
Var probe(Binder& b, const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, b.constant(random_tensor(out.dims(), rng))));
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1, 1}), ShapeError);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
}

TEST(SoftmaxRows, ClosedFormValues) {
  Tensor half = softmax_rows(Tensor::matrix({{0.0, 0.0}}));
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);

  Tensor s = softmax_rows(Tensor::matrix({{std::log(2.0), 0.0}}));
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, LargeLogitsDoNotOverflow) {
  Tensor s = softmax_rows(Tensor::matrix({{1000.0, 0.0}}));
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_GE(s[1], 0.0);
  EXPECT_LT(s[1], 1e-300);
}

TEST(SoftmaxRows, RejectsNonMatrix) {
  EXPECT_THROW(softmax_rows(Tensor({4})), ShapeError);
  EXPECT_THROW(softmax_rows(Tensor({2, 2, 2})), ShapeError);
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(9);
    Tensor m = random_tensor({r, c}, rng, rng.uniform(0.1, 50.0));
    Tensor s = softmax_rows(m);
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (double v : s.row(i)) {
        ASSERT_GE(v, 0.0);
        total += v;
      }
      ASSERT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Gelu, KnownValues) {
  EXPECT_EQ(gelu(Tensor::vector({0.0}))[0], 0.0);
  // Standard normal CDF at 1 (table value).
  EXPECT_NEAR(gelu(Tensor::vector({1.0}))[0], 0.8413447460685429, 1e-15);
  EXPECT_LT(std::abs(gelu(Tensor::vector({-10.0}))[0]), 1e-14);
}

TEST(Gelu, AsymptotesAndMonotonicity) {
  EXPECT_NEAR(kernels::gelu(40.0), 40.0, 1e-12);
  EXPECT_NEAR(kernels::gelu(-40.0), 0.0, 1e-12);
  double prev = kernels::gelu(-0.7);
  for (double x = -0.7 + 1e-3; x < 10.0; x += 1e-3) {
    const double y = kernels::gelu(x);
    ASSERT_GT(y, prev) << "at x=" << x;
    prev = y;
  }
  // gelu(x) - gelu(-x) = x·(Φ(x) + Φ(-x)) = x.
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.normal(0.0, 3.0);
    ASSERT_NEAR(kernels::gelu(x) - kernels::gelu(-x), x, 1e-12);
  }
}

TEST(Backward, QuadraticAdjoint) {
  Tape tape;
  Var theta = tape.parameter("theta", Tensor::vector({1.0, 2.0}));
  Var loss = sum(mul(theta, theta));
  Adjoints adj = backward(loss);
  EXPECT_DOUBLE_EQ(adj.at("theta")[0], 2.0);
  EXPECT_DOUBLE_EQ(adj.at("theta")[1], 4.0);
}

TEST(Backward, CrossEntropyAdjoint) {
  Tape tape;
  Var z = tape.parameter("z", Tensor::vector({0.0, 0.0}));
  Adjoints adj = backward(cross_entropy(z, 0));
  EXPECT_NEAR(adj.at("z")[0], -0.5, 1e-15);
  EXPECT_NEAR(adj.at("z")[1], 0.5, 1e-15);
}

TEST(Backward, IndependentLossGivesZeroAdjoint) {
  Tape tape;
  tape.parameter("theta", Tensor::vector({3.0, -1.0}));
  Var c = tape.constant(Tensor::vector({1.0, 2.0}));
  Adjoints adj = backward(sum(c));
  EXPECT_EQ(adj.at("theta"), Tensor::zeros({2}));
}

TEST(Backward, Errors) {
  Tape tape;
  Var theta = tape.parameter("theta", Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(backward(theta), ContractError);
  Adjoints adj = backward(sum(theta));
  EXPECT_THROW(adj.at("not_there"), MissingAdjointError);
}

TEST(Backward, DeterministicForFixedInputs) {
  auto run = [] {
    Tape tape;
    Rng rng(3);
    Var a = tape.parameter("a", random_tensor({3, 4}, rng));
    Var b = tape.constant(random_tensor({4, 2}, rng));
    return backward(sum(gelu(matmul(a, b)))).at("a");
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, QuadraticIsTight) {
  auto r = finite_diff_check([](Binder&, const Var& t) { return sum(mul(t, t)); },
                             Tensor::vector({0.3, -1.2, 2.5}), 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-8);
}

TEST(FiniteDiff, ConstantFunctionPasses) {
  auto r = finite_diff_check(
      [](Binder& b, const Var&) { return sum(b.constant(Tensor::vector({1.0, 2.0}))); },
      Tensor::vector({0.5, 0.5}), 1e-5);
  EXPECT_EQ(r.max_rel_err, 0.0);
  EXPECT_EQ(r.entries_checked, 2u);
}

TEST(FiniteDiff, AbortsOnNonFinite) {
  // 2·1e308 overflows to inf inside the loss.
  auto f = [](Binder&, const Var& t) { return sum(scale(t, 1e308)); };
  EXPECT_THROW(finite_diff_check(f, Tensor::vector({2.0, 1.0}), 1e-5), GradCheckAborted);
  EXPECT_THROW(finite_diff_check([](Binder&, const Var& t) { return sum(t); },
                                 Tensor::vector({1.0}), 0.0),
               ContractError);
}

// Every differentiable op matches central differences.
struct OpCase {
  const char* name;
  Shape theta_dims;
  std::function<Var(Binder&, const Var&)> op;
};

void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase& c = GetParam();
  Rng rng(1234);
  Tensor theta = random_tensor(c.theta_dims, rng);
  auto r = finite_diff_check([&](Binder& b, const Var& t) { return probe(b, c.op(b, t), 99); },
                             theta, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-4) << c.name << " worst at " << r.worst_index << ": analytic "
                                 << r.worst_analytic << " numeric " << r.worst_numeric;
}

Tensor fixed(Shape dims, std::uint64_t seed) { return random_tensor(std::move(dims), seed); }

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"matmul_left", {3, 4},
               [](Binder& b, const Var& t) { return matmul(t, b.constant(fixed({4, 2}, 1))); }},
        OpCase{"matmul_right", {4, 2},
               [](Binder& b, const Var& t) { return matmul(b.constant(fixed({3, 4}, 2)), t); }},
        OpCase{"matmul_nt", {3, 4},
               [](Binder& b, const Var& t) {
                 return matmul_nt(t, b.constant(fixed({5, 4}, 3))) + transpose(matmul_nt(b.constant(fixed({5, 4}, 4)), t));
               }},
        OpCase{"transpose", {2, 5}, [](Binder&, const Var& t) { return transpose(t); }},
        OpCase{"add_sub", {3, 3},
               [](Binder& b, const Var& t) { return (t + t) - b.constant(fixed({3, 3}, 5)); }},
        OpCase{"mul", {3, 3}, [](Binder&, const Var& t) { return mul(t, t); }},
        OpCase{"scale", {4}, [](Binder&, const Var& t) { return scale(t, -2.5); }},
        OpCase{"add_rowvec", {4},
               [](Binder& b, const Var& t) { return add_rowvec(b.constant(fixed({3, 4}, 6)), t); }},
        OpCase{"mul_rowvec", {3, 4},
               [](Binder& b, const Var& t) {
                 return mul_rowvec(t, b.constant(fixed({4}, 7))) +
                        mul_rowvec(b.constant(fixed({3, 4}, 8)), mean_rows(t));
               }},
        OpCase{"softmax_rows", {3, 5}, [](Binder&, const Var& t) { return softmax_rows(t); }},
        OpCase{"gelu", {3, 4}, [](Binder&, const Var& t) { return gelu(t); }},
        OpCase{"layer_norm_input", {3, 6},
               [](Binder& b, const Var& t) {
                 return layer_norm_rows(t, b.constant(fixed({6}, 9)), b.constant(fixed({6}, 10)));
               }},
        OpCase{"layer_norm_affine", {6},
               [](Binder& b, const Var& t) {
                 return layer_norm_rows(b.constant(fixed({3, 6}, 11)), t, t);
               }},
        OpCase{"gather", {3, 4},
               [](Binder&, const Var& t) {
                 auto idx = std::make_shared<std::vector<std::size_t>>(
                     std::vector<std::size_t>{0, 5, 5, 11, 3, 7});
                 return gather(t, idx, {2, 3});
               }},
        OpCase{"reshape", {3, 4}, [](Binder&, const Var& t) { return reshape(t, {2, 6}); }},
        OpCase{"concat_rows", {2, 3},
               [](Binder& b, const Var& t) {
                 return concat_rows({t, b.constant(fixed({1, 3}, 12)), t});
               }},
        OpCase{"concat_cols", {2, 3},
               [](Binder& b, const Var& t) {
                 return concat_cols({t, b.constant(fixed({2, 2}, 13)), t});
               }},
        OpCase{"slice_cols", {3, 5}, [](Binder&, const Var& t) { return slice_cols(t, 1, 3); }},
        OpCase{"mean_rows", {4, 3}, [](Binder&, const Var& t) { return mean_rows(t); }},
        OpCase{"mean_row_groups", {5, 2},
               [](Binder&, const Var& t) {
                 auto g = std::make_shared<std::vector<std::vector<std::size_t>>>(
                     std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3, 4}, {1, 4}});
                 return mean_row_groups(t, g);
               }},
        OpCase{"sum", {3, 2}, [](Binder&, const Var& t) { return sum(t); }},
        OpCase{"cross_entropy", {1, 3}, [](Binder&, const Var& t) { return cross_entropy(t, 2); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });
