#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "refrag/autograd.hpp"
#include "refrag/tensor.hpp"

using namespace refrag;
using ag::Param;
using ag::Tape;

namespace {

void randomize(Tensor& t, Rng& rng, double scale = 0.5) {
    for (auto& v : t.data) v = rng.gaussian() * scale;
}

// Central finite differences on every entry of `p`, against the analytic
// gradient from one backward pass.
double max_rel_err(Param& p, const std::function<double()>& loss_value,
                   const std::function<void()>& backward_into_grads) {
    for (auto& g : p.grad.data) g = 0.0;
    backward_into_grads();
    Tensor analytic = p.grad;
    double gmax = 0.0;
    for (double g : analytic.data) gmax = std::max(gmax, std::fabs(g));
    const double h = 1e-6;
    double worst = 0.0;
    for (size_t i = 0; i < p.value.data.size(); ++i) {
        const double orig = p.value.data[i];
        p.value.data[i] = orig + h;
        const double up = loss_value();
        p.value.data[i] = orig - h;
        const double down = loss_value();
        p.value.data[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        // Floor the denominator at a hundredth of the gradient scale: entries
        // near zero are dominated by finite-difference cancellation noise.
        const double denom = std::max({std::fabs(fd), std::fabs(analytic.data[i]),
                                       0.01 * gmax + 1e-12});
        worst = std::max(worst, std::fabs(fd - analytic.data[i]) / denom);
    }
    return worst;
}

} // namespace

TEST_CASE("composite graph gradient matches finite differences") {
    Rng rng(7);
    const int64_t T = 6, d = 8, V = 11;
    Param w1, w2, gain, table, head, bias;
    w1.init("w1", {d, d});
    w2.init("w2", {d, d});
    gain.init("gain", {d});
    table.init("table", {V, d});
    head.init("head", {d, V});
    bias.init("bias", {V});
    randomize(w1.value, rng);
    randomize(w2.value, rng);
    randomize(table.value, rng);
    randomize(head.value, rng);
    randomize(bias.value, rng, 0.1);
    gain.value.fill(1.0);

    std::vector<int> ids{3, 0, 7, 7, 2, 10};
    std::vector<int> targets{1, 4, 9, 0, 5, 6};

    auto build = [&](Tape& t) {
        Tape::Var x = t.embed(table, ids);
        Tape::Var q = t.matmul(x, t.param(w1));
        Tape::Var k = t.matmul(x, t.param(w2));
        Tape::Var att = t.attention(q, k, x, /*heads=*/2, /*causal=*/true);
        Tape::Var h = t.rmsnorm(t.add(x, att), t.param(gain));
        Tape::Var act = t.silu(h);
        Tape::Var logits = t.add_bias(t.matmul(act, t.param(head)), t.param(bias));
        return t.mean_all(t.xent(logits, targets));
    };
    auto loss_value = [&] {
        Tape t;
        return t.scalar(build(t));
    };
    auto backward = [&] {
        Tape t;
        t.backward(build(t));
    };

    for (Param* p : {&w1, &w2, &gain, &table, &head, &bias}) {
        for (Param* q : {&w1, &w2, &gain, &table, &head, &bias}) q->zero_grad();
        CHECK(max_rel_err(*p, loss_value, backward) < 1e-5);
    }
}

TEST_CASE("scalar op chain gradients: exp, sub, minimum, clip, pick") {
    Rng rng(9);
    Param v;
    v.init("v", {4});
    randomize(v.value, rng, 0.3);

    auto build = [&](Tape& t) {
        Tape::Var x = t.param(v);
        Tape::Var r = t.exp_e(t.scale(x, 0.7));
        Tape::Var clipped = t.clip(r, 0.8, 1.2);
        Tape::Var m = t.minimum(t.scale(r, 1.3), t.scale(clipped, 1.3));
        Tape::Var s = t.sub(m, t.scale(x, 0.11));
        return t.sum_all(t.mul(s, s));
    };
    auto loss_value = [&] {
        Tape t;
        return t.scalar(build(t));
    };
    auto backward = [&] {
        Tape t;
        t.backward(build(t));
    };
    v.zero_grad();
    CHECK(max_rel_err(v, loss_value, backward) < 1e-5);
}

TEST_CASE("masked_log_prob gradient and values") {
    Rng rng(21);
    Param s;
    s.init("s", {5});
    randomize(s.value, rng, 0.8);
    std::vector<uint8_t> masked{0, 1, 0, 0, 1};

    auto build = [&](Tape& t) {
        Tape::Var logits = t.param(s);
        Tape::Var a = t.masked_log_prob(logits, masked, 0);
        Tape::Var b = t.masked_log_prob(logits, masked, 3);
        return t.add(a, t.scale(b, 0.5));
    };
    auto loss_value = [&] {
        Tape t;
        return t.scalar(build(t));
    };
    auto backward = [&] {
        Tape t;
        t.backward(build(t));
    };
    s.zero_grad();
    CHECK(max_rel_err(s, loss_value, backward) < 1e-5);

    // Value agrees with a direct masked softmax.
    Tape t;
    const double lp = t.scalar(t.masked_log_prob(t.param(s), masked, 2));
    double denom = 0.0;
    for (int i : {0, 2, 3}) denom += std::exp(s.value.data[static_cast<size_t>(i)]);
    CHECK(lp == doctest::Approx(s.value.data[2] - std::log(denom)).epsilon(1e-12));

    CHECK_THROWS_AS((void)t.masked_log_prob(t.param(s), masked, 1), std::invalid_argument);
}

TEST_CASE("compose_rows and gather_rows route gradients to sources") {
    Param a, b;
    a.init("a", {2, 3});
    b.init("b", {2, 3});
    for (size_t i = 0; i < 6; ++i) {
        a.value.data[i] = static_cast<double>(i);
        b.value.data[i] = 10.0 + static_cast<double>(i);
    }
    Tape t;
    Tape::Var av = t.param(a), bv = t.param(b);
    Tape::Var composed = t.compose_rows({{av, 1}, {bv, 0}, {av, 1}});
    CHECK(t.val(composed).at(0, 0) == 3.0);
    CHECK(t.val(composed).at(1, 0) == 10.0);
    Tape::Var loss = t.sum_all(composed);
    t.backward(loss);
    CHECK(a.grad.at(1, 0) == 2.0); // row used twice
    CHECK(a.grad.at(0, 0) == 0.0);
    CHECK(b.grad.at(0, 2) == 1.0);
}

TEST_CASE("AdamW decoupled decay skips frozen params") {
    Param p, q;
    p.init("p", {2});
    q.init("q", {2});
    p.value.fill(1.0);
    q.value.fill(1.0);
    q.trainable = false;
    p.grad.fill(0.5);
    q.grad.fill(0.5);
    ag::AdamW opt;
    opt.step({&p, &q}, 0.1);
    CHECK(p.value.data[0] < 1.0);
    CHECK(q.value.data[0] == 1.0);
    CHECK(q.grad.data[0] == 0.0); // grads cleared either way
}
