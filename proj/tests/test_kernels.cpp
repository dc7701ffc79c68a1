#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>
#include <vector>

#include "refrag/kernels.hpp"
#include "refrag/tensor.hpp"

using namespace refrag;

namespace {

std::vector<double> randu(Rng& rng, int64_t n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.gaussian();
    return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

} // namespace

TEST_CASE("matmul family: parallel and serial backends agree bitwise") {
    Rng rng(11);
    for (auto [m, k, n] : std::vector<std::tuple<int, int, int>>{{1, 1, 1}, {7, 5, 3}, {64, 128, 32}, {33, 17, 129}}) {
        auto a = randu(rng, m * k);
        auto b = randu(rng, k * n);
        std::vector<double> c_par(static_cast<size_t>(m) * n), c_ser(static_cast<size_t>(m) * n);
        kern::matmul(a.data(), b.data(), c_par.data(), m, k, n);
        kern::serial::matmul(a.data(), b.data(), c_ser.data(), m, k, n);
        CHECK(bit_equal(c_par, c_ser));

        auto at = randu(rng, k * m);
        std::vector<double> d_par(static_cast<size_t>(m) * n, 0.5), d_ser(static_cast<size_t>(m) * n, 0.5);
        kern::matmul_tn_acc(at.data(), b.data(), d_par.data(), m, k, n);
        kern::serial::matmul_tn_acc(at.data(), b.data(), d_ser.data(), m, k, n);
        CHECK(bit_equal(d_par, d_ser));

        auto bt = randu(rng, n * k);
        std::vector<double> e_par(static_cast<size_t>(m) * n, -0.25), e_ser(static_cast<size_t>(m) * n, -0.25);
        kern::matmul_nt_acc(a.data(), bt.data(), e_par.data(), m, k, n);
        kern::serial::matmul_nt_acc(a.data(), bt.data(), e_ser.data(), m, k, n);
        CHECK(bit_equal(e_par, e_ser));
    }
}

TEST_CASE("pointwise and row kernels: backend equality") {
    Rng rng(12);
    const int64_t rows = 19, d = 24;
    auto x = randu(rng, rows * d);
    auto g = randu(rng, d);
    auto dy = randu(rng, rows * d);

    std::vector<double> y1(x.size()), y2(x.size()), inv1(rows), inv2(rows);
    kern::rmsnorm(x.data(), g.data(), y1.data(), inv1.data(), rows, d);
    kern::serial::rmsnorm(x.data(), g.data(), y2.data(), inv2.data(), rows, d);
    CHECK(bit_equal(y1, y2));
    CHECK(bit_equal(inv1, inv2));

    std::vector<double> dx1(x.size()), dx2(x.size()), dg1(d), dg2(d);
    kern::rmsnorm_backward_acc(x.data(), g.data(), inv1.data(), dy.data(), dx1.data(), dg1.data(), rows, d);
    kern::serial::rmsnorm_backward_acc(x.data(), g.data(), inv2.data(), dy.data(), dx2.data(), dg2.data(), rows, d);
    CHECK(bit_equal(dx1, dx2));
    CHECK(bit_equal(dg1, dg2));

    std::vector<double> s1(x.size()), s2(x.size());
    kern::silu(x.data(), s1.data(), static_cast<int64_t>(x.size()));
    kern::serial::silu(x.data(), s2.data(), static_cast<int64_t>(x.size()));
    CHECK(bit_equal(s1, s2));

    std::vector<double> b1(d, 0.0), b2(d, 0.0);
    kern::bias_grad_acc(dy.data(), b1.data(), rows, d);
    kern::serial::bias_grad_acc(dy.data(), b2.data(), rows, d);
    CHECK(bit_equal(b1, b2));
}

TEST_CASE("attention: backend equality, causal and bidirectional") {
    Rng rng(13);
    for (bool causal : {true, false}) {
        const int64_t T = 23, d = 32;
        const int heads = 4;
        auto q = randu(rng, T * d);
        auto k = randu(rng, T * d);
        auto v = randu(rng, T * d);
        auto dout = randu(rng, T * d);

        std::vector<double> att1(static_cast<size_t>(heads) * T * T), att2(att1.size());
        std::vector<double> o1(static_cast<size_t>(T) * d), o2(o1.size());
        kern::attention(q.data(), k.data(), v.data(), att1.data(), o1.data(), T, d, heads, causal);
        kern::serial::attention(q.data(), k.data(), v.data(), att2.data(), o2.data(), T, d, heads, causal);
        CHECK(bit_equal(att1, att2));
        CHECK(bit_equal(o1, o2));

        std::vector<double> dq1(q.size()), dk1(q.size()), dv1(q.size());
        std::vector<double> dq2(q.size()), dk2(q.size()), dv2(q.size());
        kern::attention_backward_acc(q.data(), k.data(), v.data(), att1.data(), dout.data(),
                                     dq1.data(), dk1.data(), dv1.data(), T, d, heads, causal);
        kern::serial::attention_backward_acc(q.data(), k.data(), v.data(), att2.data(), dout.data(),
                                             dq2.data(), dk2.data(), dv2.data(), T, d, heads, causal);
        CHECK(bit_equal(dq1, dq2));
        CHECK(bit_equal(dk1, dk2));
        CHECK(bit_equal(dv1, dv2));
    }
}

TEST_CASE("softmax cross entropy: backend equality") {
    Rng rng(14);
    const int64_t rows = 9, V = 31;
    auto logits = randu(rng, rows * V);
    std::vector<int> targets(rows);
    for (auto& t : targets) t = static_cast<int>(rng.below(V));
    auto dnll = randu(rng, rows);

    std::vector<double> p1(logits.size()), p2(logits.size()), n1(rows), n2(rows);
    kern::softmax_xent(logits.data(), targets.data(), p1.data(), n1.data(), rows, V);
    kern::serial::softmax_xent(logits.data(), targets.data(), p2.data(), n2.data(), rows, V);
    CHECK(bit_equal(p1, p2));
    CHECK(bit_equal(n1, n2));

    std::vector<double> dl1(logits.size()), dl2(logits.size());
    kern::softmax_xent_backward_acc(p1.data(), targets.data(), dnll.data(), dl1.data(), rows, V);
    kern::serial::softmax_xent_backward_acc(p2.data(), targets.data(), dnll.data(), dl2.data(), rows, V);
    CHECK(bit_equal(dl1, dl2));
}

TEST_CASE("thread count does not change results") {
    Rng rng(15);
    const int m = 37, k = 41, n = 29;
    auto a = randu(rng, m * k);
    auto b = randu(rng, k * n);
    std::vector<double> c1(static_cast<size_t>(m) * n), c2(static_cast<size_t>(m) * n);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    kern::matmul(a.data(), b.data(), c1.data(), m, k, n);
    omp_set_num_threads(saved > 1 ? saved : 2);
    kern::matmul(a.data(), b.data(), c2.data(), m, k, n);
    omp_set_num_threads(saved);
    CHECK(bit_equal(c1, c2));
}
