#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "refrag/tensor.hpp"

namespace refrag::ag {

// A named, trainable tensor with its gradient and AdamW state.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m; // AdamW first moment
    Tensor v; // AdamW second moment
    bool trainable = true;

    void init(std::string n, std::vector<int64_t> shape);
    void zero_grad() { grad.fill(0.0); }
};

// Reverse-mode tape. Nodes are created in topological order, so walking the
// tape backwards is a valid reverse-topological traversal. One tape per
// forward pass; parameter gradients accumulate into Param::grad across tapes.
class Tape {
  public:
    using Var = int32_t;

    Var leaf(Tensor v);
    Var param(Param& p); // memoized: repeated calls return the same node

    const Tensor& val(Var x) const { return nodes_[static_cast<size_t>(x)].value; }
    Tensor& grad(Var x) { return nodes_[static_cast<size_t>(x)].grad; }
    double scalar(Var x) const { return nodes_[static_cast<size_t>(x)].value.data[0]; }

    void backward(Var loss); // loss must have numel() == 1
    size_t size() const { return nodes_.size(); }

    // --- tensor ops -------------------------------------------------------
    Var matmul(Var x, Var w);                         // [r,k] x [k,n] -> [r,n]
    Var add(Var a, Var b);                            // same shape
    Var add_bias(Var x, Var b);                       // b: [n], broadcast over rows
    Var rmsnorm(Var x, Var g);                        // per-row, g: [d]
    Var silu(Var x);
    Var attention(Var q, Var k, Var v, int heads, bool causal);
    Var rows(Var x, int64_t begin, int64_t end);      // row slice (copy)
    Var mean_rows(Var x);                             // [r,d] -> [1,d]
    Var gather_rows(Var table, std::vector<int> ids); // embedding lookup
    // Embedding lookup straight from a Param (no full-table node); the
    // backward pass scatters into p.grad directly.
    Var embed(Param& p, std::vector<int> ids);
    // Output row i is copied from val(picks[i].first) row picks[i].second.
    Var compose_rows(const std::vector<std::pair<Var, int64_t>>& picks);
    Var xent(Var logits, std::vector<int> targets);   // per-row NLL: [r,V] -> [r]

    // --- elementwise / scalar ops ------------------------------------------
    Var scale(Var x, double c);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);                            // elementwise
    Var exp_e(Var x);
    Var minimum(Var a, Var b);                        // ties route gradient to a
    Var clip(Var x, double lo, double hi);
    Var mean_all(Var x);                              // -> scalar [1]
    Var sum_all(Var x);                               // -> scalar [1]
    Var pick(Var x, int64_t flat_index);              // -> scalar [1]
    // log pi(idx) under a masked softmax over logits[0..L); masked entries are
    // excluded from the normalizer. logits: [L] or [1,L]; idx must be unmasked.
    Var masked_log_prob(Var logits, const std::vector<uint8_t>& masked, int64_t idx);

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back; // empty for leaves
    };

    Var push(Tensor value, std::function<void(Tape&)> back);

    std::deque<Node> nodes_;
    std::unordered_map<const Param*, Var> param_cache_;
};

// Decoupled weight decay Adam. lr is supplied per step (the schedule lives in
// the training module).
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t t = 0;

    void step(const std::vector<Param*>& params, double lr);
};

} // namespace refrag::ag
