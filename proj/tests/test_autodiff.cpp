#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qa/gradcheck.hpp"
#include "qa/ops.hpp"

using namespace qa;

namespace {

DenseArray<double> arr(Shape s, std::vector<double> v) { return DenseArray<double>(std::move(s), std::move(v)); }

}  // namespace

TEST_CASE("matmul identity and hand-evaluated cases") {
    Tape<double> tp;
    Node<double> eye = tp.constant(arr({2, 2}, {1, 0, 0, 1}));
    Node<double> b = tp.constant(arr({2, 2}, {3, 4, 5, 6}));
    Node<double> c = matmul(eye, b);
    CHECK(max_abs_diff(c.value(), arr({2, 2}, {3, 4, 5, 6})) == 0.0);

    Node<double> row = tp.constant(arr({1, 2}, {1, 2}));
    Node<double> col = tp.constant(arr({2, 1}, {3, 4}));
    CHECK(matmul(row, col).value()[0] == doctest::Approx(11.0).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched inner extents") {
    Tape<double> tp;
    Node<double> a = tp.constant(DenseArray<double>::zeros({3, 4}));
    Node<double> b = tp.constant(DenseArray<double>::zeros({3, 2}));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(3,4)"), ShapeError);
}

TEST_CASE("matmul gradcheck on random 3x4 * 4x2 passes at 1e-6") {
    Rng rng(17);
    auto a = DenseArray<double>::randn({3, 4}, rng);
    auto b = DenseArray<double>::randn({4, 2}, rng);
    const std::uint64_t pseed = rng.next_u64();
    double err = finite_diff_check(
        [pseed](Tape<double>& tp, std::vector<Node<double>>& in) {
            return detail::project_loss(tp, matmul(in[0], in[1]), pseed);
        },
        {a, b}, {0, 1});
    CHECK(err < 1e-6);
}

TEST_CASE("softmax of constant rows is uniform and shift-stable") {
    Tape<double> tp;
    Node<double> x = tp.constant(arr({3}, {0, 0, 0}));
    auto y = softmax(x, 0).value();
    for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Node<double> big = tp.constant(arr({2}, {1000, 1000}));
    auto yb = softmax(big, 0).value();
    CHECK(yb[0] == doctest::Approx(0.5));
    CHECK(yb[1] == doctest::Approx(0.5));
    CHECK(yb.all_finite());
}

TEST_CASE("softmax rows form a simplex and are invariant to constant shifts") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tape<double> tp;
        auto xd = DenseArray<double>::randn({4, 7}, rng);
        Node<double> y = softmax(tp.constant(xd), -1);
        for (std::int64_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::int64_t c = 0; c < 7; ++c) {
                double p = y.value()[r * 7 + c];
                CHECK(p >= 0.0);
                s += p;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
        auto shifted = xd;
        const double c0 = rng.normal() * 50.0;
        for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += c0;
        Node<double> y2 = softmax(tp.constant(shifted), -1);
        CHECK(max_abs_diff(y.value(), y2.value()) < 1e-12);
    }
}

TEST_CASE("elementwise suite spot values") {
    Tape<double> tp;
    CHECK(leaky_relu(tp.constant(arr({1}, {-1})), 0.01).value()[0] == doctest::Approx(-0.01));
    CHECK(leaky_relu(tp.constant(arr({1}, {2})), 0.01).value()[0] == doctest::Approx(2.0));

    Node<double> m = tp.constant(arr({1, 2, 2, 1}, {1, 2, 3, 4}));
    CHECK(mean_pool2d(m, 2, 2).value()[0] == doctest::Approx(2.5));

    Node<double> cvec = tp.constant(DenseArray<double>::full({6}, 3.25));
    auto ln = layer_norm(cvec, 1e-5).value();
    for (std::int64_t i = 0; i < 6; ++i) CHECK(std::abs(ln[i]) < 1e-9);
}

TEST_CASE("backward fills ones for sum and 2x for sum of squares") {
    Tape<double> tp;
    Rng rng(3);
    auto xd = DenseArray<double>::randn({5}, rng);
    Node<double> x = tp.variable(xd);
    tp.backward(sum_all(x));
    for (std::int64_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));

    Tape<double> tp2;
    Node<double> x2 = tp2.variable(xd);
    tp2.backward(sum_all(mul(x2, x2)));
    for (std::int64_t i = 0; i < 5; ++i) CHECK(x2.grad()[i] == doctest::Approx(2.0 * xd[i]).epsilon(1e-12));
}

TEST_CASE("backward errors: non-scalar loss, double run, wrong tape") {
    Tape<double> tp;
    Node<double> x = tp.variable(DenseArray<double>::ones({3}));
    CHECK_THROWS_AS(tp.backward(x), ShapeError);

    Node<double> loss = sum_all(x);
    tp.backward(loss);
    CHECK_THROWS_AS(tp.backward(loss), NumericError);
    tp.reset_grads();
    tp.backward(loss);  // fine after reset

    Tape<double> other;
    CHECK_THROWS_AS(other.backward(loss), NumericError);
}

TEST_CASE("backward is deterministic: two runs produce bit-identical gradients") {
    Rng rng(11);
    Tape<double> tp;
    Node<double> x = tp.variable(DenseArray<double>::randn({4, 6}, rng));
    Node<double> w = tp.variable(DenseArray<double>::randn({6, 3}, rng));
    Node<double> y = softmax(matmul(gelu(x), w), -1);
    Node<double> loss = sum_all(mul(y, y));
    tp.backward(loss);
    DenseArray<double> gx = x.grad(), gw = w.grad();
    tp.reset_grads();
    tp.backward(loss);
    for (std::int64_t i = 0; i < gx.numel(); ++i) CHECK(gx[i] == x.grad()[i]);
    for (std::int64_t i = 0; i < gw.numel(); ++i) CHECK(gw[i] == w.grad()[i]);
}

TEST_CASE("suffix broadcast add reduces gradients over leading dims") {
    Tape<double> tp;
    Node<double> a = tp.variable(DenseArray<double>::zeros({2, 3}));
    Node<double> b = tp.variable(arr({3}, {1, 2, 3}));
    tp.backward(sum_all(add(a, b)));
    for (std::int64_t i = 0; i < 3; ++i) CHECK(b.grad()[i] == doctest::Approx(2.0));

    Node<double> bad = tp.variable(DenseArray<double>::zeros({2}));
    CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("cross entropy of uniform logits equals log K") {
    Tape<double> tp;
    Node<double> logits = tp.constant(DenseArray<double>::zeros({2, 4}));
    Node<double> ce = cross_entropy(logits, {1, 3});
    CHECK(ce.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("every registered op passes the finite-difference suite") {
    for (const OpCheckResult& r : standard_op_checks(20240811)) {
        INFO(r.name, " rel err ", r.max_rel_err);
        CHECK(r.max_rel_err < r.tol);
    }
}
