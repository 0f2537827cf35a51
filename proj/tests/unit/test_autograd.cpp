#include <gtest/gtest.h>

#include <functional>

#include "support/helpers.hpp"
#include "support/oracle.hpp"

using namespace flmgrow;

namespace {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Max relative error between tape gradients and central differences of
// sum(op(inputs) ⊙ R) for a fixed random R.
double op_grad_error(std::vector<Tensor<double>> inputs, const Builder& op, std::uint64_t seed = 7) {
  Tensor<double> weights;
  auto loss_of = [&](Tape<double>& tape, std::vector<Var>& vars) {
    vars.clear();
    for (auto& in : inputs) vars.push_back(tape.leaf(in));
    const Var out = op(tape, vars);
    if (weights.empty()) {
      Rng rng(seed);
      weights = testutil::random_tensor<double>(tape.value(out).shape(), rng);
    }
    return ag::sum(tape, ag::mul(tape, out, tape.constant(weights)));
  };
  Tape<double> tape(true);
  std::vector<Var> vars;
  const Var loss = loss_of(tape, vars);
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic.push_back(tape.has_grad(vars[i]) ? tape.grad(vars[i]) : Tensor<double>(inputs[i].shape()));
  }
  auto eval = [&] {
    Tape<double> t(false);
    std::vector<Var> v;
    return t.value(loss_of(t, v))[0];
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + h;
      const double up = eval();
      inputs[i][j] = keep - h;
      const double down = eval();
      inputs[i][j] = keep;
      worst = std::max(worst, oracle::rel_error(analytic[i][j], (up - down) / (2 * h), 1e-6));
    }
  }
  return worst;
}

Tensor<double> rnd(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return testutil::random_tensor<double>(std::move(s), rng, scale);
}

}  // namespace

TEST(Backward, SquareAtThreeIsSix) {
  Tensor<double> x({1}, std::vector<double>{3.0});
  Tape<double> tape;
  const Var v = tape.leaf(x);
  tape.backward(ag::sum(tape, ag::mul(tape, v, v)));
  EXPECT_EQ(tape.grad(v)[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  const auto x = rnd({3, 6}, 1, 2.0);
  Tape<double> tape;
  const Var v = tape.leaf(x);
  tape.backward(ag::sum(tape, ag::softmax_rows(tape, v)));
  for (double g : tape.grad(v).values()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, NonScalarLossIsContractError) {
  const auto x = rnd({2, 2}, 2);
  Tape<double> tape;
  const Var v = tape.leaf(x);
  EXPECT_THROW(tape.backward(ag::scale(tape, v, 2.0)), ContractError);
}

TEST(Backward, NoGradTapeRefusesBackward) {
  const auto x = rnd({1}, 2);
  Tape<double> tape(false);
  EXPECT_THROW(tape.backward(ag::sum(tape, tape.leaf(x))), ContractError);
}

TEST(Backward, ReusedVariableAccumulates) {
  Tensor<double> x({1}, std::vector<double>{1.5});
  Tape<double> tape;
  const Var v = tape.leaf(x);
  tape.backward(ag::sum(tape, ag::add(tape, v, v)));
  EXPECT_EQ(tape.grad(v)[0], 2.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  const auto x = rnd({2, 2}, 3);
  Tape<double> tape;
  const Var v = tape.leaf(x);
  const Var c = tape.constant(rnd({2, 2}, 4));
  tape.backward(ag::sum(tape, ag::mul(tape, v, c)));
  EXPECT_FALSE(tape.has_grad(c));
}

TEST(OpGradients, AddMulScale) {
  EXPECT_LT(op_grad_error({rnd({3, 4}, 1), rnd({3, 4}, 2)},
                          [](auto& t, auto& v) { return ag::add(t, v[0], v[1]); }),
            1e-6);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 1), rnd({3, 4}, 2)},
                          [](auto& t, auto& v) { return ag::mul(t, v[0], v[1]); }),
            1e-6);
  EXPECT_LT(op_grad_error({rnd({3, 4}, 1)}, [](auto& t, auto& v) { return ag::scale(t, v[0], -0.7); }), 1e-6);
}

TEST(OpGradients, ScaleColumns) {
  EXPECT_LT(op_grad_error({rnd({3, 4}, 5)},
                          [](auto& t, auto& v) {
                            return ag::scale_columns(t, v[0], std::vector<double>{1.0, 0.5, 0.0, 2.0});
                          }),
            1e-6);
}

TEST(OpGradients, Matmul) {
  EXPECT_LT(op_grad_error({rnd({3, 5}, 6), rnd({5, 2}, 7)},
                          [](auto& t, auto& v) { return ag::matmul(t, v[0], v[1]); }),
            1e-6);
}

TEST(OpGradients, SiluAndSoftmax) {
  EXPECT_LT(op_grad_error({rnd({4, 5}, 8, 2.0)}, [](auto& t, auto& v) { return ag::silu(t, v[0]); }), 1e-6);
  EXPECT_LT(op_grad_error({rnd({4, 5}, 9, 2.0)}, [](auto& t, auto& v) { return ag::softmax_rows(t, v[0]); }),
            1e-6);
}

TEST(OpGradients, Embedding) {
  EXPECT_LT(op_grad_error({rnd({6, 4}, 10)},
                          [](auto& t, auto& v) {
                            return ag::embedding(t, v[0], std::vector<std::size_t>{1, 3, 1, 5});
                          }),
            1e-6);
}

TEST(OpGradients, RmsNormPlainAndMasked) {
  EXPECT_LT(op_grad_error({rnd({3, 6}, 11), rnd({6}, 12)},
                          [](auto& t, auto& v) { return ag::rmsnorm_rows(t, v[0], v[1], {}, 6.0); }),
            1e-5);
  const std::vector<double> w{1, 1, 1, 1, 0.3, 0.3};
  EXPECT_LT(op_grad_error({rnd({3, 6}, 13), rnd({6}, 14)},
                          [&](auto& t, auto& v) { return ag::rmsnorm_rows(t, v[0], v[1], w, 4.0 + 0.3 * 2); }),
            1e-5);
}

TEST(OpGradients, LayerNormPlainAndMasked) {
  EXPECT_LT(op_grad_error({rnd({3, 6}, 15), rnd({6}, 16), rnd({6}, 17)},
                          [](auto& t, auto& v) { return ag::layernorm_rows(t, v[0], v[1], v[2], {}, 6.0); }),
            1e-5);
  const std::vector<double> w{1, 1, 1, 1, 0.6, 0.6};
  EXPECT_LT(op_grad_error({rnd({3, 6}, 18), rnd({6}, 19), rnd({6}, 20)},
                          [&](auto& t, auto& v) {
                            return ag::layernorm_rows(t, v[0], v[1], v[2], w, 4.0 + 0.6 * 2);
                          }),
            1e-5);
}

TEST(OpGradients, CausalAttentionWithHeadWeights) {
  const std::size_t seq = 5, heads = 2, hd = 4;
  EXPECT_LT(op_grad_error({rnd({seq, heads * hd}, 21), rnd({seq, heads * hd}, 22), rnd({seq, heads * hd}, 23)},
                          [&](auto& t, auto& v) {
                            return ag::causal_attention(t, v[0], v[1], v[2], heads, hd, 10000.0,
                                                        std::vector<double>{1.0, 0.4});
                          }),
            1e-5);
  EXPECT_LT(op_grad_error({rnd({seq, heads * hd}, 24), rnd({seq, heads * hd}, 25), rnd({seq, heads * hd}, 26)},
                          [&](auto& t, auto& v) {
                            return ag::causal_attention(t, v[0], v[1], v[2], heads, hd, 10000.0, {});
                          }),
            1e-5);
}

TEST(OpGradients, CrossEntropy) {
  EXPECT_LT(op_grad_error({rnd({4, 7}, 27, 2.0)},
                          [](auto& t, auto& v) {
                            return ag::cross_entropy_sum(t, v[0], std::vector<std::size_t>{1, 6, 0, 3},
                                                         std::vector<double>{1, 0, 1, 1});
                          }),
            1e-6);
}

TEST(CausalAttention, OddHeadDimIsConfigError) {
  const auto q = rnd({2, 3}, 1);
  Tape<double> tape(false);
  const Var v = tape.leaf(q);
  EXPECT_THROW(ag::causal_attention(tape, v, v, v, 1, 3, 10000.0, {}), ConfigError);
}

TEST(Determinism, RepeatedForwardBackwardIsBitIdentical) {
  const auto config = testutil::toy_config(2, 32, 48, 16, 16);
  Rng rng(5);
  auto params = init_params<double>(config, rng);
  const auto tokens = testutil::probes(1, 16, 3)[0];
  auto run = [&] {
    Tape<double> tape;
    const auto vars = bind_params(tape, params);
    auto [nll, n] = sequence_nll_on_tape(tape, vars, config, tokens, nullptr, nullptr);
    tape.backward(nll);
    std::vector<Tensor<double>> grads;
    for_each_param(vars, [&](const std::string&, const Var& v) { grads.push_back(tape.grad(v)); });
    return grads;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].bit_equal(b[i]));
}
