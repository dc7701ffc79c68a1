#pragma once

#include <cstdint>
#include <vector>

#include "refrag/autograd.hpp"
#include "refrag/corpus.hpp"
#include "refrag/model.hpp"
#include "refrag/tensor.hpp"

namespace refrag::selector {

struct PolicyConfig {
    int64_t width = 64; // must equal the encoder embedding width
    int layers = 2;
    int heads = 4;
    double lr = 1e-4;
    double clip_eps = 0.2;
    int group = 8; // G rollouts per example
    bool recompute_logits = false;
    uint64_t init_seed = 7;
};

// Two-layer attention network over chunk embeddings, one logit per chunk.
struct PolicyNet {
    PolicyConfig cfg;
    std::vector<model::Block> blocks;
    model::RmsNorm final_ln;
    model::Linear head; // width -> 1

    void init(const PolicyConfig& config);
    std::vector<ag::Param*> params();

    // Differentiable logits over the given chunk embeddings: [L].
    ag::Tape::Var logits_var(ag::Tape& t, const std::vector<Tensor>& chunk_embeddings);
    // Value-only convenience.
    std::vector<double> logits(const std::vector<Tensor>& chunk_embeddings);
};

// Indices already taken, in selection order.
struct SelectionState {
    std::vector<int64_t> selected;
    std::vector<uint8_t> mask(int64_t L) const; // 1 where already selected
};

// pi(i) = exp(s_i - n_i) / sum_j exp(s_j - n_j) with n_j = +inf for selected
// chunks: masked entries are exactly 0. Throws when everything is masked.
std::vector<double> policy_probs(const std::vector<double>& logits, const SelectionState& state);

// Sequentially samples T' distinct chunk indices. Logits are computed once
// and reused across steps unless cfg.recompute_logits is set.
std::vector<int64_t> sample_sequence(PolicyNet& policy, const std::vector<Tensor>& chunk_embeddings,
                                     int64_t t_prime, Rng& rng);

// r = -(mean NLL of the datapoint's outputs given the mixed arrangement).
double reward(model::RefragModel& m, const corpus::DataPoint& dp,
              const std::vector<int64_t>& selection, const corpus::Vocab& vocab);

// A_i = (r_i - mean) / (population std + 1e-8). Requires G >= 2.
std::vector<double> grpo_advantages(const std::vector<double>& rewards);

struct GroupRollout {
    std::vector<std::vector<int64_t>> sequences; // G sequences of length T'
    std::vector<double> rewards;                 // G
    std::vector<double> advantages;              // G, zero mean
    std::vector<std::vector<double>> old_logprob; // per sequence, per step, under theta_old
};

// One clipped-surrogate ascent step on a single example's rollout group.
// Returns the surrogate objective value (before the ascent).
double grpo_step(PolicyNet& policy, const std::vector<Tensor>& chunk_embeddings,
                 const GroupRollout& rollout, ag::AdamW& opt, double lr);

enum class Heuristic { ppl_desc, ppl_asc, random_sel };

// scores: per-chunk mean NLL under the decoder alone. ppl_desc expands the
// highest-score chunks (compresses the low-perplexity ones); ties break
// toward the lower index.
std::vector<int64_t> heuristic_select(Heuristic h, const std::vector<double>& scores,
                                      int64_t t_prime, Rng* rng = nullptr);

// Per-chunk perplexity scores with no cross-chunk context.
std::vector<double> chunk_perplexity_scores(model::RefragModel& m,
                                            const std::vector<corpus::Chunk>& chunks,
                                            const corpus::Vocab& vocab);

// k / (1 - p + k p): tokens per decoder slot when a fraction p is expanded.
double effective_rate(double k, double p);

// Exhaustive small-L oracle; guards against combinatorial blow-up.
std::vector<int64_t> brute_force_best(model::RefragModel& m, const corpus::DataPoint& dp,
                                      int64_t t_prime, const corpus::Vocab& vocab,
                                      double* best_reward = nullptr);

struct PolicyTrainStats {
    std::vector<double> mean_reward;    // per iteration
    std::vector<double> surrogate;      // per iteration
};

// GRPO training over a pool of datapoints. Rewards come from the (frozen)
// mixed-finetuned model; chunk embeddings are precomputed per datapoint.
PolicyTrainStats train_policy(PolicyNet& policy, model::RefragModel& m,
                              const std::vector<corpus::DataPoint>& pool,
                              const corpus::Vocab& vocab, int64_t t_prime, int iterations,
                              int batch, uint64_t seed);

} // namespace refrag::selector
