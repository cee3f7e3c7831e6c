#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "salm/rng.hpp"
#include "salm/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace salm;
using namespace salm::nn;

namespace {

// Scalarizes an op output with fixed random weights so every output element
// influences the loss.
template <class T>
TensorT<T> weighted_sum(const TensorT<T>& out, const TensorT<T>& w, TapeT<T>* tape) {
  return sum(mul(out, w, tape), tape);
}

template <class T>
TensorT<T> make_weights(const Shape& shape, Rng& rng) {
  auto w = TensorT<T>::zeros(shape);
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform() * 2.0 - 1.0);
  return w;
}

// Same weights on every call for a given tag, so repeated forward evaluations
// inside the finite-difference loop see one fixed function.
template <class T>
TensorT<T> fixed_weights(const Shape& shape, uint64_t tag) {
  Rng rng(derive_seed(tag, "fd-weights"));
  return make_weights<T>(shape, rng);
}

template <class T>
TensorT<T> make_input(const Shape& shape, Rng& rng, bool rg = true) {
  auto t = TensorT<T>::zeros(shape, rg);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform() * 2.0 - 1.0);
  return t;
}

}  // namespace

TEST_CASE("matmul identity, hand arithmetic, and zeros") {
  Rng rng(7);
  auto a = make_input<float>({3, 3}, rng, false);
  std::vector<float> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto i3 = Tensor::from({3, 3}, eye);
  auto out = matmul(i3, a, nullptr);
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 3; ++c) CHECK(out.at({r, c}) == doctest::Approx(a.at({r, c})));

  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto v = Tensor::from({2, 1}, {0, 1});
  auto mv = matmul(m, v, nullptr);
  CHECK(mv.at({0, 0}) == doctest::Approx(2.0f));
  CHECK(mv.at({1, 0}) == doctest::Approx(4.0f));

  auto z = Tensor::zeros({2, 3});
  auto anything = make_input<float>({3, 4}, rng, false);
  auto zz = matmul(z, anything, nullptr);
  CHECK(zz.shape() == Shape{2, 4});
  for (float x : zz.values()) CHECK(x == 0.0f);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}), nullptr),
                  std::invalid_argument);
}

TEST_CASE("matmul with transposed second factor") {
  Rng rng(11);
  auto a = make_input<double>({3, 4}, rng, false);
  auto b = make_input<double>({5, 4}, rng, false);
  auto out = matmul(a, b, nullptr, /*trans_b=*/true);
  REQUIRE(out.shape() == Shape{3, 5});
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double ref = 0;
      for (int64_t k = 0; k < 4; ++k) ref += a.at({i, k}) * b.at({j, k});
      CHECK(out.at({i, j}) == doctest::Approx(ref));
    }
}

TEST_CASE("softmax symmetry, stability, and hand arithmetic") {
  auto s1 = softmax(Tensor::from({2}, {0, 0}), -1, nullptr);
  CHECK(s1.at({0}) == doctest::Approx(0.5f));
  CHECK(s1.at({1}) == doctest::Approx(0.5f));

  auto s2 = softmax(Tensor::from({3}, {1000, 1000, 1000}), -1, nullptr);
  CHECK(s2.all_finite());
  for (int64_t i = 0; i < 3; ++i) CHECK(s2.at({i}) == doctest::Approx(1.0f / 3.0f));

  auto s3 = softmax(Tensor::from({2}, {0.0f, std::log(3.0f)}), -1, nullptr);
  CHECK(s3.at({0}) == doctest::Approx(0.25f).epsilon(1e-5));
  CHECK(s3.at({1}) == doctest::Approx(0.75f).epsilon(1e-5));
}

TEST_CASE("softmax slices sum to one, values in (0,1), any axis") {
  Rng rng(13);
  auto x = make_input<float>({3, 4, 5}, rng, false);
  for (int axis : {0, 1, 2, -1}) {
    auto y = softmax(x, axis, nullptr);
    const int ax = axis < 0 ? axis + 3 : axis;
    int64_t inner = 1;
    for (int i = ax + 1; i < 3; ++i) inner *= x.dim(i);
    const int64_t n = x.dim(ax);
    const int64_t outer = x.numel() / (n * inner);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0;
        for (int64_t j = 0; j < n; ++j) {
          const float v = y.values()[static_cast<size_t>(o * n * inner + j * inner + in)];
          CHECK(v > 0.0f);
          CHECK(v < 1.0f);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
  }
}

TEST_CASE("cross_entropy uniform, near-certain, and ignore semantics") {
  // uniform logits over 8 classes: loss is ln 8 for any target
  auto logits = Tensor::zeros({1, 8});
  for (int32_t t = 0; t < 8; ++t) {
    auto ce = cross_entropy(logits, {t}, -100, nullptr);
    CHECK(ce.loss.item() == doctest::Approx(std::log(8.0)).epsilon(1e-6));
    CHECK(ce.positions == 1);
  }

  // +20 on the target class: loss ~ 0
  auto peaked = Tensor::zeros({1, 8});
  peaked.values()[3] = 20.0f;
  auto ce2 = cross_entropy(peaked, {3}, -100, nullptr);
  CHECK(ce2.loss.item() < 1e-6f);

  // one of two positions ignored equals the single-position loss
  Rng rng(5);
  auto two = make_input<float>({2, 8}, rng, false);
  auto one = Tensor::from({1, 8}, std::vector<float>(two.values().begin(), two.values().begin() + 8));
  auto ce_two = cross_entropy(two, {4, -100}, -100, nullptr);
  auto ce_one = cross_entropy(one, {4}, -100, nullptr);
  CHECK(ce_two.loss.item() == doctest::Approx(ce_one.loss.item()));
  CHECK(ce_two.positions == 1);

  // all ignored: loss 0 with the flag set
  auto ce3 = cross_entropy(two, {-100, -100}, -100, nullptr);
  CHECK(ce3.loss.item() == 0.0f);
  CHECK(ce3.all_ignored);

  CHECK_THROWS_AS(cross_entropy(two, {9, 0}, -100, nullptr), std::out_of_range);
}

TEST_CASE("backward on linear and quadratic sums") {
  Tape tape;
  auto x = Tensor::from({4}, {1, 2, 3, 4}, true);
  auto loss = sum(x, &tape);
  tape.backward(loss);
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));

  Tape tape2;
  auto y = Tensor::from({2}, {1, 2}, true);
  auto loss2 = sum(mul(y, y, &tape2), &tape2);
  tape2.backward(loss2);
  CHECK(y.grad()[0] == doctest::Approx(2.0f));
  CHECK(y.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward contract: scalar-only, tape-produced-only, single-shot") {
  Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = mul(x, x, &tape);
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);  // non-scalar

  auto leaf = Tensor::scalar(3.0f, true);
  CHECK_THROWS_AS(tape.backward(leaf), std::logic_error);  // not produced by the tape

  auto loss = sum(y, &tape);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);  // consumed
  tape.reset();
  auto loss2 = sum(mul(x, x, &tape), &tape);
  tape.backward(loss2);  // fine after reset
}

TEST_CASE("backward linearity: grad of summed losses equals summed grads") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = make_input<float>({3, 3}, rng);
    auto w1 = make_weights<float>({3, 3}, rng);
    auto w2 = make_weights<float>({3, 3}, rng);

    Tape t1;
    auto la = weighted_sum(gelu(matmul(x, w1, &t1), &t1), w2, &t1);
    t1.backward(la);
    std::vector<float> ga(x.grad().begin(), x.grad().end());
    x.zero_grad();

    Tape t2;
    auto lb = weighted_sum(softmax(matmul(x, w2, &t2), -1, &t2), w1, &t2);
    t2.backward(lb);
    std::vector<float> gb(x.grad().begin(), x.grad().end());
    x.zero_grad();

    Tape t3;
    auto lc = add(weighted_sum(gelu(matmul(x, w1, &t3), &t3), w2, &t3),
                  weighted_sum(softmax(matmul(x, w2, &t3), -1, &t3), w1, &t3), &t3);
    auto total = sum(lc, &t3);
    t3.backward(total);
    for (size_t i = 0; i < ga.size(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-4));
    x.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checks, float and double instantiations of each op.
// ---------------------------------------------------------------------------

namespace {

template <class T>
void check_op(const char* name, uint64_t seed,
              const std::function<TensorT<T>(std::vector<TensorT<T>>&, TapeT<T>*)>& build,
              const std::vector<Shape>& input_shapes, double rtol, double atol) {
  Rng rng(seed);
  std::vector<TensorT<T>> inputs;
  for (const auto& s : input_shapes) inputs.push_back(make_input<T>(s, rng));

  TapeT<T> tape;
  auto loss = build(inputs, &tape);
  tape.backward(loss);

  for (size_t k = 0; k < inputs.size(); ++k) {
    std::vector<T> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    auto forward = [&]() { return static_cast<double>(build(inputs, nullptr).item()); };
    auto rep = salm::testing::finite_difference_check<T>(inputs[k], forward, analytic, 1e-3, rtol, atol);
    INFO(name << " input " << k << " seed " << seed << " " << rep.detail);
    CHECK(rep.ok);
    CHECK(rep.norm_rel < rtol);
  }
  for (auto& in : inputs) in.zero_grad();
}

template <class T>
void run_op_suite(double rtol, double atol) {
  using TT = TensorT<T>;
  using Tp = TapeT<T>;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    check_op<T>(
        "matmul", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 1);
          return weighted_sum(matmul(in[0], in[1], t), w, t);
        },
        {{3, 2}, {2, 4}}, rtol, atol);
    check_op<T>(
        "matmul_trans_b", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 2);
          return weighted_sum(matmul(in[0], in[1], t, true), w, t);
        },
        {{3, 2}, {4, 2}}, rtol, atol);
    check_op<T>(
        "bmm", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({2, 3, 2}, seed * 100 + 3);
          return weighted_sum(bmm(in[0], in[1], t), w, t);
        },
        {{2, 3, 4}, {2, 4, 2}}, rtol, atol);
    check_op<T>(
        "bmm_trans_b", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({2, 3, 2}, seed * 100 + 4);
          return weighted_sum(bmm(in[0], in[1], t, true), w, t);
        },
        {{2, 3, 4}, {2, 2, 4}}, rtol, atol);
    check_op<T>(
        "add", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 3}, seed * 100 + 5);
          return weighted_sum(add(in[0], in[1], t), w, t);
        },
        {{3, 3}, {3, 3}}, rtol, atol);
    check_op<T>(
        "add_bias", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({4, 3}, seed * 100 + 6);
          return weighted_sum(add_bias(in[0], in[1], t), w, t);
        },
        {{4, 3}, {3}}, rtol, atol);
    check_op<T>(
        "mul", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({2, 4}, seed * 100 + 7);
          return weighted_sum(mul(in[0], in[1], t), w, t);
        },
        {{2, 4}, {2, 4}}, rtol, atol);
    check_op<T>(
        "scale", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({4, 4}, seed * 100 + 8);
          return weighted_sum(scale(in[0], T(0.37), t), w, t);
        },
        {{4, 4}}, rtol, atol);
    check_op<T>(
        "softmax", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 9);
          return weighted_sum(softmax(in[0], -1, t), w, t);
        },
        {{3, 4}}, rtol, atol);
    check_op<T>(
        "softmax_axis0", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 10);
          return weighted_sum(softmax(in[0], 0, t), w, t);
        },
        {{3, 4}}, rtol, atol);
    check_op<T>(
        "layer_norm", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 11);
          return weighted_sum(layer_norm(in[0], in[1], in[2], t), w, t);
        },
        {{3, 4}, {4}, {4}}, rtol, atol);
    check_op<T>(
        "gelu", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({4, 3}, seed * 100 + 12);
          return weighted_sum(gelu(in[0], t), w, t);
        },
        {{4, 3}}, rtol, atol);
    check_op<T>(
        "embedding", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({3, 4}, seed * 100 + 13);
          return weighted_sum(embedding({2, 0, 2}, in[0], t), w, t);
        },
        {{4, 4}}, rtol, atol);
    check_op<T>(
        "reshape", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({2, 6}, seed * 100 + 14);
          return weighted_sum(reshape(in[0], {2, 6}, t), w, t);
        },
        {{3, 4}}, rtol, atol);
    check_op<T>(
        "split_merge_heads", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto w = fixed_weights<T>({2, 3, 4}, seed * 100 + 15);
          return weighted_sum(merge_heads(split_heads(in[0], 2, t), 2, t), w, t);
        },
        {{2, 3, 4}}, rtol, atol);
    check_op<T>(
        "cross_entropy", seed,
        [&](std::vector<TT>& in, Tp* t) {
          auto ce = cross_entropy(in[0], {1, -100, 3}, -100, t);
          return ce.loss;
        },
        {{3, 4}}, rtol, atol);
    check_op<T>(
        "dropout", seed,
        [&](std::vector<TT>& in, Tp* t) {
          Rng drng(42);  // fixed mask so the two-sided evaluation sees the same function
          return weighted_sum(dropout(in[0], T(0.3), drng, t), fixed_weights<T>({4, 4}, seed * 100 + 16), t);
        },
        {{4, 4}}, rtol, atol);
  }
}

}  // namespace

TEST_CASE("every op matches central finite differences (float)") {
  run_op_suite<float>(1e-3, 1e-3);
}

TEST_CASE("every op matches central finite differences (double)") {
  run_op_suite<double>(1e-3, 1e-6);
}

TEST_CASE("dropout zero probability is the identity") {
  Rng rng(1);
  auto x = make_input<float>({3, 3}, rng, false);
  auto y = dropout(x, 0.0f, rng, nullptr);
  CHECK(y.id() == x.id());
}

TEST_CASE("tensor invariants: shape/data agreement and grad length") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({0, 2}), std::invalid_argument);
  auto t = Tensor::zeros({2, 3}, true);
  t.ensure_grad();
  CHECK(t.grad().size() == t.values().size());
}

TEST_CASE("weighted-sum loss in dropout check has same mask across calls") {
  // Two forward evaluations with the same seeded rng must be identical.
  Rng a(42), b(42);
  auto x = make_input<float>({4, 4}, a, false);
  auto y1 = dropout(x, 0.3f, a, nullptr);
  Rng a2(42);
  auto y2 = dropout(x, 0.3f, a2, nullptr);
  (void)b;
  for (size_t i = 0; i < y1.values().size(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}
