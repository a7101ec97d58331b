#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dstfuse/gradcheck.hpp"
#include "dstfuse/tensor.hpp"

using namespace dstfuse;

namespace {

TensorPtr random_leaf(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.uniform(-scale, scale);
    return make_tensor(std::move(shape), std::move(data), /*requires_grad=*/true);
}

using Builder = std::function<TensorPtr(Tape&, const std::vector<TensorPtr>&)>;

void expect_grads_match(const Builder& build, const std::vector<TensorPtr>& leaves) {
    auto report = check_gradients(build, leaves);
    INFO("worst coordinate: " << report.worst);
    CHECK(report.ok);
    CHECK(report.max_error <= 1e-4);
}

}  // namespace

TEST_CASE("matmul forward matches hand computation") {
    auto a = make_tensor({1, 2}, {1.0, 2.0});
    auto b = make_tensor({2, 1}, {3.0, 4.0});
    auto c = matmul(nullptr, a, b);
    REQUIRE(c->shape == std::vector<int>{1, 1});
    CHECK(c->data[0] == 11.0);

    auto m = make_tensor({2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto n = make_tensor({2, 2}, {5.0, 6.0, 7.0, 8.0});
    auto p = matmul(nullptr, m, n);
    CHECK(p->data == std::vector<double>{19.0, 22.0, 43.0, 50.0});
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    auto a = make_tensor({1, 3}, {1.0, 2.0, 3.0});
    auto b = make_tensor({2, 1}, {3.0, 4.0});
    CHECK_THROWS_AS(matmul(nullptr, a, b), DimensionError);
}

TEST_CASE("softmax of [0, ln 3] is [0.25, 0.75]") {
    auto x = make_tensor({1, 2}, {0.0, std::log(3.0)});
    auto y = softmax(nullptr, x);
    CHECK_THAT(y->data[0], Catch::Matchers::WithinAbs(0.25, 1e-12));
    CHECK_THAT(y->data[1], Catch::Matchers::WithinAbs(0.75, 1e-12));
}

TEST_CASE("softmax rows sum to one and survive huge logits") {
    auto x = make_tensor({2, 3}, {1000.0, 1001.0, 1002.0, -1000.0, 0.0, 1000.0});
    auto y = softmax(nullptr, x);
    for (int i = 0; i < 2; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += y->at(i, j);
        CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    // Column-axis softmax normalizes down each column instead.
    auto yc = softmax(nullptr, x, 0);
    for (int j = 0; j < 3; ++j) {
        CHECK_THAT(yc->at(0, j) + yc->at(1, j), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("layer_norm normalizes [1, 3] to almost [-1, 1]") {
    auto x = make_tensor({1, 2}, {1.0, 3.0});
    auto gain = make_tensor({1, 2}, {1.0, 1.0});
    auto bias = make_tensor({1, 2}, {0.0, 0.0});
    auto y = layer_norm(nullptr, x, gain, bias);
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);  // population variance 1 plus epsilon
    CHECK_THAT(y->data[0], Catch::Matchers::WithinAbs(-expected, 1e-12));
    CHECK_THAT(y->data[1], Catch::Matchers::WithinAbs(expected, 1e-12));

    auto gain2 = make_tensor({1, 2}, {2.0, 2.0});
    auto bias2 = make_tensor({1, 2}, {10.0, 10.0});
    auto y2 = layer_norm(nullptr, x, gain2, bias2);
    CHECK_THAT(y2->data[0], Catch::Matchers::WithinAbs(10.0 - 2.0 * expected, 1e-12));
    CHECK_THAT(y2->data[1], Catch::Matchers::WithinAbs(10.0 + 2.0 * expected, 1e-12));
}

TEST_CASE("sigmoid stays strictly inside the open unit interval") {
    auto x = make_tensor({1, 4}, {-1000.0, -1.0, 1.0, 1000.0});
    auto y = sigmoid(nullptr, x);
    for (double v : y->data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK_THAT(y->data[1], Catch::Matchers::WithinAbs(1.0 / (1.0 + std::exp(1.0)), 1e-12));
}

TEST_CASE("l2_distance matches hand values") {
    auto a = make_tensor({1, 2}, {0.0, 0.0});
    auto b = make_tensor({1, 2}, {3.0, 4.0});
    CHECK(l2_distance(nullptr, a, b)->data[0] == 5.0);
    CHECK(l2_distance(nullptr, a, a)->data[0] == 0.0);
}

TEST_CASE("distance_scores negates the distance to each candidate row") {
    auto q = make_tensor({1, 2}, {0.0, 0.0});
    auto c = make_tensor({3, 2}, {3.0, 4.0, 0.0, 1.0, 0.0, 0.0});
    auto s = distance_scores(nullptr, q, c);
    CHECK_THAT(s->data[0], Catch::Matchers::WithinAbs(-5.0, 1e-12));
    CHECK_THAT(s->data[1], Catch::Matchers::WithinAbs(-1.0, 1e-12));
    CHECK(s->data[2] == 0.0);
}

TEST_CASE("dropout keeps roughly the configured fraction and rescales") {
    Rng rng(13);
    Tape tape;
    auto x = full({1, 100000}, 1.0, true);
    auto y = dropout(&tape, x, 0.1, /*training=*/true, rng);
    std::size_t zeros_count = 0;
    for (double v : y->data) {
        if (v == 0.0)
            ++zeros_count;
        else
            CHECK_THAT(v, Catch::Matchers::WithinAbs(1.0 / 0.9, 1e-12));
    }
    const double drop_frac = static_cast<double>(zeros_count) / 100000.0;
    CHECK_THAT(drop_frac, Catch::Matchers::WithinAbs(0.1, 0.01));
}

TEST_CASE("dropout is the identity when disabled") {
    Rng rng(13);
    auto x = make_tensor({1, 3}, {1.0, 2.0, 3.0}, true);
    CHECK(dropout(nullptr, x, 0.5, /*training=*/false, rng) == x);
    CHECK(dropout(nullptr, x, 0.0, /*training=*/true, rng) == x);
    CHECK_THROWS_AS(dropout(nullptr, x, 1.0, true, rng), ConfigError);
}

TEST_CASE("backward through a two-layer network matches hand gradients") {
    // y = w2 . sigmoid(w1 . x); all scalars, so every gradient is checkable
    // by hand: dy/dw2 = s, dy/dw1 = w2 s (1 - s) x.
    auto x = make_tensor({1, 1}, {2.0});
    auto w1 = make_tensor({1, 1}, {0.5}, true);
    auto w2 = make_tensor({1, 1}, {-1.5}, true);
    Tape tape;
    auto s = sigmoid(&tape, matmul(&tape, x, w1));
    auto y = matmul(&tape, s, w2);
    tape.backward(y);
    const double sv = 1.0 / (1.0 + std::exp(-1.0));
    CHECK_THAT(w2->grad[0], Catch::Matchers::WithinAbs(sv, 1e-12));
    CHECK_THAT(w1->grad[0], Catch::Matchers::WithinAbs(-1.5 * sv * (1.0 - sv) * 2.0, 1e-12));
    CHECK(x->grad.empty());  // constants never accumulate gradient
}

TEST_CASE("gradients accumulate across backward passes until cleared") {
    auto w = make_tensor({1, 1}, {3.0}, true);
    for (int pass = 0; pass < 2; ++pass) {
        Tape tape;
        auto y = mul(&tape, w, w);
        tape.backward(y);
    }
    CHECK(w->grad[0] == 12.0);  // 2w per pass, twice
    w->zero_grad();
    CHECK(w->grad[0] == 0.0);
}

TEST_CASE("finite difference check on every primitive over random shapes") {
    Rng shapes(99);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = shapes.uniform_int(1, 4);
        const int k = shapes.uniform_int(1, 4);
        const int n = shapes.uniform_int(1, 4);
        Rng rng(1000 + trial);

        SECTION("trial " + std::to_string(trial)) {
            auto a = random_leaf(rng, {m, k});
            auto b = random_leaf(rng, {k, n});
            auto c = random_leaf(rng, {m, k});
            auto row = random_leaf(rng, {1, k});

            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, matmul(&t, ls[0], ls[1]));
                },
                {a, b});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, mul(&t, add(&t, ls[0], ls[1]), sub(&t, ls[0], ls[1])));
                },
                {a, c});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, tanh_op(&t, add_row_broadcast(&t, ls[0], ls[1])));
                },
                {a, row});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, gelu(&t, transpose(&t, ls[0])));
                },
                {a});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, mul(&t, softmax(&t, ls[0]), ls[1]));
                },
                {a, c});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, mul(&t, softmax(&t, ls[0], 0), ls[1]));
                },
                {a, c});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, sigmoid(&t, affine(&t, ls[0], 1.7, -0.3)));
                },
                {a});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return l2_distance(&t, ls[0], ls[1]);
                },
                {a, c});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, distance_scores(&t, ls[0], ls[1]));
                },
                {random_leaf(rng, {1, k}), random_leaf(rng, {m, k})});
            expect_grads_match(
                [](Tape& t, const std::vector<TensorPtr>& ls) {
                    return sum_all(&t, convex_mix(&t, sigmoid(&t, ls[0]), ls[1], ls[2]));
                },
                {a, c, random_leaf(rng, {m, k})});
        }
    }
}

TEST_CASE("finite difference check on layer_norm, slicing and stacking") {
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(2000 + trial);
        const int m = 2 + trial % 3;
        const int n = 3 + trial % 4;
        auto x = random_leaf(rng, {m, n});
        auto gain = random_leaf(rng, {1, n});
        auto bias = random_leaf(rng, {1, n});
        expect_grads_match(
            [](Tape& t, const std::vector<TensorPtr>& ls) {
                auto y = layer_norm(&t, ls[0], ls[1], ls[2]);
                return sum_all(&t, mul(&t, y, y));
            },
            {x, gain, bias});

        auto p = random_leaf(rng, {m, 2});
        auto q = random_leaf(rng, {m, 3});
        expect_grads_match(
            [](Tape& t, const std::vector<TensorPtr>& ls) {
                auto cat = concat_cols(&t, {ls[0], ls[1]});
                auto left = slice_cols(&t, cat, 0, 2);
                auto right = slice_cols(&t, cat, 2, 3);
                return add(&t, sum_all(&t, mul(&t, left, left)), sum_all(&t, gelu(&t, right)));
            },
            {p, q});

        auto r = random_leaf(rng, {2, n});
        auto s = random_leaf(rng, {1, n});
        expect_grads_match(
            [](Tape& t, const std::vector<TensorPtr>& ls) {
                auto cat = concat_rows(&t, {ls[0], ls[1]});
                return sum_all(&t, tanh_op(&t, cat));
            },
            {r, s});

        auto table = random_leaf(rng, {5, n});
        expect_grads_match(
            [](Tape& t, const std::vector<TensorPtr>& ls) {
                auto g = gather_rows(&t, ls[0], {4, 0, 4, 2});
                return sum_all(&t, mul(&t, g, g));
            },
            {table});
    }
}

TEST_CASE("finite difference check through log, pick and scalar sums") {
    Rng rng(31);
    auto x = random_leaf(rng, {1, 4}, 0.5);
    expect_grads_match(
        [](Tape& t, const std::vector<TensorPtr>& ls) {
            auto p = softmax(&t, ls[0]);
            auto terms = std::vector<TensorPtr>{
                affine(&t, pick(&t, log_op(&t, p), 1), -1.0, 0.0),
                affine(&t, pick(&t, log_op(&t, p), 3), -1.0, 0.0)};
            return sum_scalars(&t, terms);
        },
        {x});
}

TEST_CASE("finite difference check through dropout with a replayed mask") {
    auto x = make_tensor({2, 5}, {0.3, -0.7, 1.1, 0.2, -0.4, 0.9, -1.2, 0.5, 0.8, -0.1}, true);
    expect_grads_match(
        [](Tape& t, const std::vector<TensorPtr>& ls) {
            Rng rng(7);  // fresh stream per build keeps the mask identical
            auto y = dropout(&t, ls[0], 0.3, true, rng);
            return sum_all(&t, mul(&t, y, y));
        },
        {x});
}

TEST_CASE("gradient check flags a detached-path bug") {
    // Forward computes sum(x * detached_copy(x)); the analytic gradient only
    // flows through one factor, so the check must fail loudly.
    auto x = make_tensor({1, 3}, {0.4, -0.9, 1.3}, true);
    auto report = check_gradients(
        [](Tape& t, const std::vector<TensorPtr>& ls) {
            auto detached = make_tensor(ls[0]->shape, ls[0]->data);  // constant copy
            return sum_all(&t, mul(&t, ls[0], detached));
        },
        {x});
    CHECK_FALSE(report.ok);
    CHECK(report.max_error > 0.1);
}

TEST_CASE("gradient check rejects a non-deterministic loss") {
    auto x = make_tensor({1, 2}, {0.1, 0.2}, true);
    int calls = 0;
    CHECK_THROWS_AS(check_gradients(
                        [&calls](Tape& t, const std::vector<TensorPtr>& ls) {
                            auto noise = full({1, 2}, 1e-3 * ++calls);
                            return sum_all(&t, add(&t, ls[0], noise));
                        },
                        {x}),
                    NumericError);
}

TEST_CASE("non-finite inputs and results are rejected") {
    CHECK_THROWS_AS(make_tensor({1, 1}, {std::numeric_limits<double>::quiet_NaN()}), NumericError);
    auto big = make_tensor({1, 1}, {1e308});
    CHECK_THROWS_AS(add(nullptr, big, big), NumericError);
    auto neg = make_tensor({1, 1}, {-1.0});
    CHECK_THROWS_AS(log_op(nullptr, neg), NumericError);
}

TEST_CASE("tensor shape validation") {
    CHECK_THROWS_AS(make_tensor({}, {}), DimensionError);
    CHECK_THROWS_AS(make_tensor({2, 2}, {1.0}), DimensionError);
    CHECK_THROWS_AS(make_tensor({0}, {}), DimensionError);
    CHECK_THROWS_AS(make_tensor({1, 2, 3, 4}, std::vector<double>(24, 0.0)), DimensionError);
}

TEST_CASE("rng streams are deterministic and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform(0, 1) == b.uniform(0, 1));

    const std::string snap = a.state();
    std::vector<double> expect_vals;
    for (int i = 0; i < 10; ++i) expect_vals.push_back(a.normal(0, 1));
    Rng c(0);
    c.restore(snap);
    for (int i = 0; i < 10; ++i) REQUIRE(c.normal(0, 1) == expect_vals[i]);

    Rng d(42);
    auto child1 = d.split();
    Rng e(42);
    auto child2 = e.split();
    REQUIRE(child1.uniform_int(0, 1000000) == child2.uniform_int(0, 1000000));
}
