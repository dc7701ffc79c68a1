#include "refrag/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "refrag/kernels.hpp"

namespace refrag::ag {

void Param::init(std::string n, std::vector<int64_t> shape) {
    name = std::move(n);
    value = Tensor(shape);
    grad = Tensor(shape);
    m = Tensor(shape);
    v = Tensor(std::move(shape));
}

Tape::Var Tape::push(Tensor value, std::function<void(Tape&)> back) {
    Node node;
    node.grad = Tensor(value.shape);
    node.value = std::move(value);
    node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return static_cast<Var>(nodes_.size() - 1);
}

Tape::Var Tape::leaf(Tensor v) {
    return push(std::move(v), nullptr);
}

Tape::Var Tape::param(Param& p) {
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return it->second;
    Var id = push(p.value, nullptr);
    Param* pp = &p;
    nodes_[static_cast<size_t>(id)].back = [id, pp](Tape& t) {
        const Tensor& g = t.grad(id);
        for (size_t i = 0; i < g.data.size(); ++i) pp->grad.data[i] += g.data[i];
    };
    param_cache_.emplace(pp, id);
    return id;
}

void Tape::backward(Var loss) {
    if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss).data[0] = 1.0;
    for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
        auto& n = nodes_[static_cast<size_t>(i)];
        if (n.back) n.back(*this);
    }
}

Tape::Var Tape::matmul(Var x, Var w) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const int64_t r = xv.rows(), k = xv.cols(), n = wv.cols();
    if (wv.rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
    Tensor out({r, n});
    kern::matmul(xv.ptr(), wv.ptr(), out.ptr(), r, k, n);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, w, r, k, n](Tape& t) {
        const Tensor& dy = t.grad(id);
        kern::matmul_nt_acc(dy.ptr(), t.val(w).ptr(), t.grad(x).ptr(), r, n, k);
        kern::matmul_tn_acc(t.val(x).ptr(), dy.ptr(), t.grad(w).ptr(), k, r, n);
    };
    return id;
}

Tape::Var Tape::add(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& da = t.grad(a);
        Tensor& db = t.grad(b);
        for (size_t i = 0; i < dy.data.size(); ++i) {
            da.data[i] += dy.data[i];
            db.data[i] += dy.data[i];
        }
    };
    return id;
}

Tape::Var Tape::add_bias(Var x, Var b) {
    const Tensor& xv = val(x);
    const Tensor& bv = val(b);
    if (bv.numel() != xv.cols()) throw std::invalid_argument("add_bias: width mismatch");
    Tensor out = xv;
    kern::add_bias(out.ptr(), bv.ptr(), xv.rows(), xv.cols());
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, b](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& dx = t.grad(x);
        for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] += dy.data[i];
        kern::bias_grad_acc(dy.ptr(), t.grad(b).ptr(), dy.rows(), dy.cols());
    };
    return id;
}

Tape::Var Tape::rmsnorm(Var x, Var g) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(g);
    const int64_t r = xv.rows(), d = xv.cols();
    if (gv.numel() != d) throw std::invalid_argument("rmsnorm: gain width mismatch");
    Tensor out({r, d});
    Tensor inv_rms({r});
    kern::rmsnorm(xv.ptr(), gv.ptr(), out.ptr(), inv_rms.ptr(), r, d);
    Var id = push(std::move(out), nullptr);
    auto saved = std::make_shared<Tensor>(std::move(inv_rms));
    nodes_[static_cast<size_t>(id)].back = [id, x, g, r, d, saved](Tape& t) {
        kern::rmsnorm_backward_acc(t.val(x).ptr(), t.val(g).ptr(), saved->ptr(),
                                   t.grad(id).ptr(), t.grad(x).ptr(), t.grad(g).ptr(), r, d);
    };
    return id;
}

Tape::Var Tape::silu(Var x) {
    const Tensor& xv = val(x);
    Tensor out(xv.shape);
    kern::silu(xv.ptr(), out.ptr(), xv.numel());
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x](Tape& t) {
        const Tensor& dy = t.grad(id);
        kern::silu_backward_acc(t.val(x).ptr(), dy.ptr(), t.grad(x).ptr(), dy.numel());
    };
    return id;
}

Tape::Var Tape::attention(Var q, Var k, Var v, int heads, bool causal) {
    const Tensor& qv = val(q);
    const int64_t T = qv.rows(), d = qv.cols();
    if (d % heads != 0) throw std::invalid_argument("attention: heads must divide width");
    if (!val(k).same_shape(qv) || !val(v).same_shape(qv))
        throw std::invalid_argument("attention: q/k/v shape mismatch");
    Tensor out({T, d});
    auto att = std::make_shared<Tensor>(Tensor({static_cast<int64_t>(heads), T, T}));
    kern::attention(qv.ptr(), val(k).ptr(), val(v).ptr(), att->ptr(), out.ptr(), T, d, heads, causal);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, q, k, v, att, T, d, heads, causal](Tape& t) {
        kern::attention_backward_acc(t.val(q).ptr(), t.val(k).ptr(), t.val(v).ptr(), att->ptr(),
                                     t.grad(id).ptr(), t.grad(q).ptr(), t.grad(k).ptr(),
                                     t.grad(v).ptr(), T, d, heads, causal);
    };
    return id;
}

Tape::Var Tape::rows(Var x, int64_t begin, int64_t end) {
    const Tensor& xv = val(x);
    const int64_t d = xv.cols();
    if (begin < 0 || end > xv.rows() || begin > end)
        throw std::invalid_argument("rows: slice out of range");
    Tensor out({end - begin, d});
    std::copy(xv.data.begin() + begin * d, xv.data.begin() + end * d, out.data.begin());
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, begin, d](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& dx = t.grad(x);
        for (int64_t i = 0; i < dy.rows(); ++i)
            for (int64_t j = 0; j < d; ++j) dx.at(begin + i, j) += dy.at(i, j);
    };
    return id;
}

Tape::Var Tape::mean_rows(Var x) {
    const Tensor& xv = val(x);
    const int64_t r = xv.rows(), d = xv.cols();
    if (r == 0) throw std::invalid_argument("mean_rows: empty input");
    Tensor out({1, d});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < d; ++j) out.data[static_cast<size_t>(j)] += xv.at(i, j);
    const double inv = 1.0 / static_cast<double>(r);
    for (auto& o : out.data) o *= inv;
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, r, d, inv](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& dx = t.grad(x);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < d; ++j) dx.at(i, j) += dy.data[static_cast<size_t>(j)] * inv;
    };
    return id;
}

Tape::Var Tape::gather_rows(Var table, std::vector<int> ids) {
    const Tensor& tv = val(table);
    const int64_t d = tv.cols();
    Tensor out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::invalid_argument("gather_rows: id out of range");
        std::copy(tv.data.begin() + ids[i] * d, tv.data.begin() + (ids[i] + 1) * d,
                  out.data.begin() + static_cast<int64_t>(i) * d);
    }
    Var id = push(std::move(out), nullptr);
    auto idv = std::make_shared<std::vector<int>>(std::move(ids));
    nodes_[static_cast<size_t>(id)].back = [id, table, idv, d](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& dt = t.grad(table);
        for (size_t i = 0; i < idv->size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                dt.at((*idv)[i], j) += dy.at(static_cast<int64_t>(i), j);
    };
    return id;
}

Tape::Var Tape::embed(Param& p, std::vector<int> ids) {
    const int64_t d = p.value.cols();
    Tensor out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= p.value.rows())
            throw std::invalid_argument("embed: id out of range for table " + p.name);
        std::copy(p.value.data.begin() + ids[i] * d, p.value.data.begin() + (ids[i] + 1) * d,
                  out.data.begin() + static_cast<int64_t>(i) * d);
    }
    Var id = push(std::move(out), nullptr);
    auto idv = std::make_shared<std::vector<int>>(std::move(ids));
    Param* pp = &p;
    nodes_[static_cast<size_t>(id)].back = [id, pp, idv, d](Tape& t) {
        const Tensor& dy = t.grad(id);
        for (size_t i = 0; i < idv->size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                pp->grad.at((*idv)[i], j) += dy.at(static_cast<int64_t>(i), j);
    };
    return id;
}

Tape::Var Tape::compose_rows(const std::vector<std::pair<Var, int64_t>>& picks) {
    if (picks.empty()) throw std::invalid_argument("compose_rows: empty pick list");
    const int64_t d = val(picks[0].first).cols();
    Tensor out({static_cast<int64_t>(picks.size()), d});
    for (size_t i = 0; i < picks.size(); ++i) {
        const Tensor& src = val(picks[i].first);
        if (src.cols() != d) throw std::invalid_argument("compose_rows: width mismatch");
        if (picks[i].second < 0 || picks[i].second >= src.rows())
            throw std::invalid_argument("compose_rows: row out of range");
        std::copy(src.data.begin() + picks[i].second * d,
                  src.data.begin() + (picks[i].second + 1) * d,
                  out.data.begin() + static_cast<int64_t>(i) * d);
    }
    Var id = push(std::move(out), nullptr);
    auto saved = std::make_shared<std::vector<std::pair<Var, int64_t>>>(picks);
    nodes_[static_cast<size_t>(id)].back = [id, saved, d](Tape& t) {
        const Tensor& dy = t.grad(id);
        for (size_t i = 0; i < saved->size(); ++i) {
            Tensor& dst = t.grad((*saved)[i].first);
            for (int64_t j = 0; j < d; ++j)
                dst.at((*saved)[i].second, j) += dy.at(static_cast<int64_t>(i), j);
        }
    };
    return id;
}

Tape::Var Tape::xent(Var logits, std::vector<int> targets) {
    const Tensor& lv = val(logits);
    const int64_t r = lv.rows(), V = lv.cols();
    if (static_cast<int64_t>(targets.size()) != r)
        throw std::invalid_argument("xent: one target per row required");
    for (int tgt : targets)
        if (tgt < 0 || tgt >= V) throw std::invalid_argument("xent: target id out of range");
    Tensor nll({r});
    auto probs = std::make_shared<Tensor>(Tensor({r, V}));
    auto tgts = std::make_shared<std::vector<int>>(std::move(targets));
    kern::softmax_xent(lv.ptr(), tgts->data(), probs->ptr(), nll.ptr(), r, V);
    Var id = push(std::move(nll), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, logits, probs, tgts, r, V](Tape& t) {
        kern::softmax_xent_backward_acc(probs->ptr(), tgts->data(), t.grad(id).ptr(),
                                        t.grad(logits).ptr(), r, V);
    };
    return id;
}

Tape::Var Tape::scale(Var x, double c) {
    Tensor out = val(x);
    for (auto& o : out.data) o *= c;
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, c](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& dx = t.grad(x);
        for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] += c * dy.data[i];
    };
    return id;
}

Tape::Var Tape::sub(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& da = t.grad(a);
        Tensor& db = t.grad(b);
        for (size_t i = 0; i < dy.data.size(); ++i) {
            da.data[i] += dy.data[i];
            db.data[i] -= dy.data[i];
        }
    };
    return id;
}

Tape::Var Tape::mul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
        const Tensor& dy = t.grad(id);
        const Tensor& av2 = t.val(a);
        const Tensor& bv2 = t.val(b);
        Tensor& da = t.grad(a);
        Tensor& db = t.grad(b);
        for (size_t i = 0; i < dy.data.size(); ++i) {
            da.data[i] += dy.data[i] * bv2.data[i];
            db.data[i] += dy.data[i] * av2.data[i];
        }
    };
    return id;
}

Tape::Var Tape::exp_e(Var x) {
    Tensor out = val(x);
    for (auto& o : out.data) o = std::exp(o);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x](Tape& t) {
        const Tensor& dy = t.grad(id);
        const Tensor& yv = t.val(id);
        Tensor& dx = t.grad(x);
        for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] += dy.data[i] * yv.data[i];
    };
    return id;
}

Tape::Var Tape::minimum(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("minimum: shape mismatch");
    Tensor out = av;
    auto pick_a = std::make_shared<std::vector<uint8_t>>(out.data.size());
    for (size_t i = 0; i < out.data.size(); ++i) {
        (*pick_a)[i] = av.data[i] <= bv.data[i];
        out.data[i] = (*pick_a)[i] ? av.data[i] : bv.data[i];
    }
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, a, b, pick_a](Tape& t) {
        const Tensor& dy = t.grad(id);
        Tensor& da = t.grad(a);
        Tensor& db = t.grad(b);
        for (size_t i = 0; i < dy.data.size(); ++i) {
            if ((*pick_a)[i]) da.data[i] += dy.data[i];
            else db.data[i] += dy.data[i];
        }
    };
    return id;
}

Tape::Var Tape::clip(Var x, double lo, double hi) {
    const Tensor& xv = val(x);
    Tensor out = xv;
    for (auto& o : out.data) o = o < lo ? lo : (o > hi ? hi : o);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, lo, hi](Tape& t) {
        const Tensor& dy = t.grad(id);
        const Tensor& xv2 = t.val(x);
        Tensor& dx = t.grad(x);
        for (size_t i = 0; i < dy.data.size(); ++i)
            if (xv2.data[i] >= lo && xv2.data[i] <= hi) dx.data[i] += dy.data[i];
    };
    return id;
}

Tape::Var Tape::mean_all(Var x) {
    const Tensor& xv = val(x);
    const int64_t n = xv.numel();
    if (n == 0) throw std::invalid_argument("mean_all: empty input");
    double s = 0.0;
    for (double v : xv.data) s += v;
    Tensor out({1});
    out.data[0] = s / static_cast<double>(n);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, n](Tape& t) {
        const double g = t.grad(id).data[0] / static_cast<double>(n);
        Tensor& dx = t.grad(x);
        for (auto& d : dx.data) d += g;
    };
    return id;
}

Tape::Var Tape::sum_all(Var x) {
    const Tensor& xv = val(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    Tensor out({1});
    out.data[0] = s;
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x](Tape& t) {
        const double g = t.grad(id).data[0];
        Tensor& dx = t.grad(x);
        for (auto& d : dx.data) d += g;
    };
    return id;
}

Tape::Var Tape::pick(Var x, int64_t flat_index) {
    const Tensor& xv = val(x);
    if (flat_index < 0 || flat_index >= xv.numel()) throw std::invalid_argument("pick: index out of range");
    Tensor out({1});
    out.data[0] = xv.data[static_cast<size_t>(flat_index)];
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, x, flat_index](Tape& t) {
        t.grad(x).data[static_cast<size_t>(flat_index)] += t.grad(id).data[0];
    };
    return id;
}

Tape::Var Tape::masked_log_prob(Var logits, const std::vector<uint8_t>& masked, int64_t idx) {
    const Tensor& lv = val(logits);
    const int64_t L = lv.numel();
    if (static_cast<int64_t>(masked.size()) != L)
        throw std::invalid_argument("masked_log_prob: mask length mismatch");
    if (idx < 0 || idx >= L || masked[static_cast<size_t>(idx)])
        throw std::invalid_argument("masked_log_prob: index must be an unmasked chunk");
    double mx = -1e300;
    bool any = false;
    for (int64_t i = 0; i < L; ++i) {
        if (masked[static_cast<size_t>(i)]) continue;
        any = true;
        mx = std::max(mx, lv.data[static_cast<size_t>(i)]);
    }
    if (!any) throw std::invalid_argument("masked_log_prob: all chunks masked");
    double sum = 0.0;
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(L), 0.0);
    for (int64_t i = 0; i < L; ++i) {
        if (masked[static_cast<size_t>(i)]) continue;
        (*probs)[static_cast<size_t>(i)] = std::exp(lv.data[static_cast<size_t>(i)] - mx);
        sum += (*probs)[static_cast<size_t>(i)];
    }
    for (auto& p : *probs) p /= sum;
    Tensor out({1});
    out.data[0] = lv.data[static_cast<size_t>(idx)] - (std::log(sum) + mx);
    Var id = push(std::move(out), nullptr);
    nodes_[static_cast<size_t>(id)].back = [id, logits, probs, idx](Tape& t) {
        const double g = t.grad(id).data[0];
        Tensor& dl = t.grad(logits);
        for (size_t i = 0; i < probs->size(); ++i) dl.data[i] -= g * (*probs)[i];
        dl.data[static_cast<size_t>(idx)] += g;
    };
    return id;
}

void AdamW::step(const std::vector<Param*>& params, double lr) {
    t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Param* p : params) {
        if (!p->trainable) {
            p->zero_grad();
            continue;
        }
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double g = p->grad.data[i];
            p->m.data[i] = beta1 * p->m.data[i] + (1.0 - beta1) * g;
            p->v.data[i] = beta2 * p->v.data[i] + (1.0 - beta2) * g * g;
            const double mhat = p->m.data[i] / bc1;
            const double vhat = p->v.data[i] / bc2;
            p->value.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value.data[i]);
        }
        p->zero_grad();
    }
}

} // namespace refrag::ag
