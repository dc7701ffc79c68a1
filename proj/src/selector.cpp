#include "refrag/selector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "refrag/training.hpp"

namespace refrag::selector {

void PolicyNet::init(const PolicyConfig& config) {
    cfg = config;
    Rng rng(cfg.init_seed);
    blocks.resize(static_cast<size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i)
        blocks[static_cast<size_t>(i)].init("policy.block" + std::to_string(i), cfg.width, cfg.heads,
                                            /*causal=*/false, rng);
    final_ln.init("policy.final_ln", cfg.width);
    head.init("policy.head", cfg.width, 1, rng, 0.02, /*with_bias=*/true);
}

std::vector<ag::Param*> PolicyNet::params() {
    std::vector<ag::Param*> out;
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
    head.collect(out);
    return out;
}

ag::Tape::Var PolicyNet::logits_var(ag::Tape& t, const std::vector<Tensor>& chunk_embeddings) {
    if (chunk_embeddings.empty()) throw std::invalid_argument("policy: no chunk embeddings");
    const int64_t L = static_cast<int64_t>(chunk_embeddings.size());
    Tensor x({L, cfg.width});
    for (int64_t i = 0; i < L; ++i) {
        const Tensor& e = chunk_embeddings[static_cast<size_t>(i)];
        if (e.numel() != cfg.width)
            throw std::invalid_argument("policy: embedding width != policy width");
        std::copy(e.data.begin(), e.data.end(), x.data.begin() + i * cfg.width);
    }
    ag::Tape::Var h = t.leaf(std::move(x));
    for (auto& b : blocks) h = b.fwd(t, h);
    return head.fwd(t, final_ln.fwd(t, h)); // [L, 1]
}

std::vector<double> PolicyNet::logits(const std::vector<Tensor>& chunk_embeddings) {
    ag::Tape t;
    return t.val(logits_var(t, chunk_embeddings)).data;
}

std::vector<uint8_t> SelectionState::mask(int64_t L) const {
    std::vector<uint8_t> m(static_cast<size_t>(L), 0);
    for (int64_t i : selected) {
        if (i < 0 || i >= L) throw std::invalid_argument("selection state: index out of range");
        m[static_cast<size_t>(i)] = 1;
    }
    return m;
}

std::vector<double> policy_probs(const std::vector<double>& logits, const SelectionState& state) {
    const int64_t L = static_cast<int64_t>(logits.size());
    const std::vector<uint8_t> masked = state.mask(L);
    double mx = -1e300;
    bool any = false;
    for (int64_t i = 0; i < L; ++i) {
        if (masked[static_cast<size_t>(i)]) continue;
        any = true;
        mx = std::max(mx, logits[static_cast<size_t>(i)]);
    }
    if (!any) throw std::invalid_argument("policy_probs: every chunk is already selected");
    std::vector<double> probs(static_cast<size_t>(L), 0.0);
    double sum = 0.0;
    for (int64_t i = 0; i < L; ++i) {
        if (masked[static_cast<size_t>(i)]) continue; // exp(s - inf) == 0 exactly
        probs[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
        sum += probs[static_cast<size_t>(i)];
    }
    for (auto& p : probs) p /= sum;
    return probs;
}

namespace {

int64_t sample_index(const std::vector<double>& probs, Rng& rng) {
    const double r = rng.uniform();
    double cum = 0.0;
    int64_t last_live = -1;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last_live = static_cast<int64_t>(i);
        cum += probs[i];
        if (r < cum) return static_cast<int64_t>(i);
    }
    return last_live; // r landed in the rounding tail
}

} // namespace

std::vector<int64_t> sample_sequence(PolicyNet& policy, const std::vector<Tensor>& chunk_embeddings,
                                     int64_t t_prime, Rng& rng) {
    const int64_t L = static_cast<int64_t>(chunk_embeddings.size());
    if (t_prime > L) throw std::invalid_argument("sample_sequence: T' exceeds chunk count");
    SelectionState state;
    if (t_prime == 0) return state.selected;
    std::vector<double> s = policy.logits(chunk_embeddings);
    for (int64_t step = 0; step < t_prime; ++step) {
        if (policy.cfg.recompute_logits && step > 0) {
            // Run the net on the unselected embeddings only; scatter back.
            std::vector<Tensor> rest;
            std::vector<int64_t> rest_idx;
            const auto masked = state.mask(L);
            for (int64_t i = 0; i < L; ++i) {
                if (masked[static_cast<size_t>(i)]) continue;
                rest.push_back(chunk_embeddings[static_cast<size_t>(i)]);
                rest_idx.push_back(i);
            }
            const std::vector<double> rest_logits = policy.logits(rest);
            for (size_t i = 0; i < rest_idx.size(); ++i)
                s[static_cast<size_t>(rest_idx[i])] = rest_logits[i];
        }
        const std::vector<double> probs = policy_probs(s, state);
        state.selected.push_back(sample_index(probs, rng));
    }
    return state.selected;
}

double reward(model::RefragModel& m, const corpus::DataPoint& dp,
              const std::vector<int64_t>& selection, const corpus::Vocab& vocab) {
    std::vector<int> context = dp.context();
    auto arr = model::assemble_input({}, corpus::chunk_context(context, m.cfg.k, vocab.pad_id),
                                     selection, m.cfg.k, m.cfg.question_first);
    model::Tape t;
    auto out = model::decoder_forward(m, t, arr, dp.outputs(), vocab.bos_id, vocab.pad_id);
    return -t.scalar(out.mean_nll);
}

std::vector<double> grpo_advantages(const std::vector<double>& rewards) {
    const int64_t G = static_cast<int64_t>(rewards.size());
    if (G < 2) throw std::invalid_argument("grpo_advantages: need at least two rollouts");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(G);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(G); // population variance
    const double std_dev = std::sqrt(var);
    std::vector<double> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (std_dev + 1e-8);
    return adv;
}

double grpo_step(PolicyNet& policy, const std::vector<Tensor>& chunk_embeddings,
                 const GroupRollout& rollout, ag::AdamW& opt, double lr) {
    const int64_t G = static_cast<int64_t>(rollout.sequences.size());
    if (G < 1) throw std::invalid_argument("grpo_step: empty rollout");
    const int64_t L = static_cast<int64_t>(chunk_embeddings.size());
    const int64_t t_prime = static_cast<int64_t>(rollout.sequences[0].size());

    ag::Tape t;
    ag::Tape::Var s = policy.logits_var(t, chunk_embeddings); // [L, 1]
    ag::Tape::Var obj = t.leaf(Tensor({1}));
    for (int64_t i = 0; i < G; ++i) {
        const auto& seq = rollout.sequences[static_cast<size_t>(i)];
        const double A = rollout.advantages[static_cast<size_t>(i)];
        SelectionState state;
        for (int64_t step = 0; step < t_prime; ++step) {
            const auto masked = state.mask(L);
            ag::Tape::Var lp = t.masked_log_prob(s, masked, seq[static_cast<size_t>(step)]);
            Tensor oldv({1});
            oldv.data[0] = rollout.old_logprob[static_cast<size_t>(i)][static_cast<size_t>(step)];
            ag::Tape::Var ratio = t.exp_e(t.sub(lp, t.leaf(std::move(oldv))));
            ag::Tape::Var lhs = t.scale(ratio, A);
            ag::Tape::Var rhs = t.scale(t.clip(ratio, 1.0 - policy.cfg.clip_eps,
                                               1.0 + policy.cfg.clip_eps), A);
            obj = t.add(obj, t.minimum(lhs, rhs));
            state.selected.push_back(seq[static_cast<size_t>(step)]);
        }
    }
    obj = t.scale(obj, 1.0 / static_cast<double>(G * std::max<int64_t>(t_prime, 1)));
    const double value = t.scalar(obj);
    ag::Tape::Var loss = t.scale(obj, -1.0); // ascend the surrogate
    t.backward(loss);
    opt.step(policy.params(), lr);
    return value;
}

std::vector<int64_t> heuristic_select(Heuristic h, const std::vector<double>& scores,
                                      int64_t t_prime, Rng* rng) {
    const int64_t L = static_cast<int64_t>(scores.size());
    if (t_prime > L) throw std::invalid_argument("heuristic_select: T' exceeds chunk count");
    std::vector<int64_t> idx(static_cast<size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    switch (h) {
        case Heuristic::ppl_desc:
            // Expand the highest-perplexity chunks; low-perplexity ones stay
            // compressed. Ties break toward the lower index.
            std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
                return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
            });
            break;
        case Heuristic::ppl_asc:
            std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
                return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
            });
            break;
        case Heuristic::random_sel: {
            if (!rng) throw std::invalid_argument("heuristic_select: random selection needs an rng");
            rng->shuffle(idx);
            break;
        }
    }
    idx.resize(static_cast<size_t>(t_prime));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> chunk_perplexity_scores(model::RefragModel& m,
                                            const std::vector<corpus::Chunk>& chunks,
                                            const corpus::Vocab& vocab) {
    std::vector<double> scores;
    scores.reserve(chunks.size());
    for (const auto& ch : chunks) {
        model::InputArrangement arr;
        arr.k = m.cfg.k;
        model::Tape t;
        auto out = model::decoder_forward(m, t, arr, ch.token_ids, vocab.bos_id, vocab.pad_id);
        scores.push_back(t.scalar(out.mean_nll));
    }
    return scores;
}

double effective_rate(double k, double p) {
    if (k < 1.0) throw std::invalid_argument("effective_rate: k must be >= 1");
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("effective_rate: p must be in [0, 1]");
    return k / (1.0 - p + k * p);
}

std::vector<int64_t> brute_force_best(model::RefragModel& m, const corpus::DataPoint& dp,
                                      int64_t t_prime, const corpus::Vocab& vocab,
                                      double* best_reward) {
    std::vector<int> context = dp.context();
    auto chunks = corpus::chunk_context(context, m.cfg.k, vocab.pad_id);
    const int64_t L = static_cast<int64_t>(chunks.size());
    if (t_prime > L) throw std::invalid_argument("brute_force_best: T' exceeds chunk count");
    // C(L, T') guard.
    double combos = 1.0;
    for (int64_t i = 0; i < t_prime; ++i)
        combos *= static_cast<double>(L - i) / static_cast<double>(i + 1);
    if (combos > 1e5) throw std::invalid_argument("brute_force_best: C(L, T') exceeds 1e5");

    std::vector<int64_t> best;
    double best_r = -1e300;
    std::vector<int64_t> pick(static_cast<size_t>(t_prime));
    // Lexicographic enumeration of all T'-subsets.
    std::function<void(int64_t, int64_t)> recurse = [&](int64_t start, int64_t depth) {
        if (depth == t_prime) {
            const double r = reward(m, dp, pick, vocab);
            if (r > best_r) {
                best_r = r;
                best = pick;
            }
            return;
        }
        for (int64_t i = start; i <= L - (t_prime - depth); ++i) {
            pick[static_cast<size_t>(depth)] = i;
            recurse(i + 1, depth + 1);
        }
    };
    recurse(0, 0);
    if (best_reward) *best_reward = best_r;
    return best;
}

PolicyTrainStats train_policy(PolicyNet& policy, model::RefragModel& m,
                              const std::vector<corpus::DataPoint>& pool,
                              const corpus::Vocab& vocab, int64_t t_prime, int iterations,
                              int batch, uint64_t seed) {
    if (pool.empty()) throw std::invalid_argument("train_policy: empty datapoint pool");
    PolicyTrainStats stats;
    ag::AdamW opt;
    Rng rng(seed);

    // Chunk embeddings are frozen features of the mixed model: compute once.
    std::vector<std::vector<Tensor>> embeddings(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) {
        auto chunks = corpus::chunk_context(pool[i].context(), m.cfg.k, vocab.pad_id);
        for (const auto& e : m.encode_chunks(chunks)) embeddings[i].push_back(e.c);
    }

    for (int iter = 0; iter < iterations; ++iter) {
        double iter_reward = 0.0;
        double iter_surrogate = 0.0;
        int counted = 0;
        for (int b = 0; b < batch; ++b) {
            const size_t di = static_cast<size_t>(rng.below(static_cast<int64_t>(pool.size())));
            const auto& emb = embeddings[di];
            const int64_t L = static_cast<int64_t>(emb.size());
            if (t_prime > L) throw std::invalid_argument("train_policy: T' exceeds chunk count");

            // Rollouts under the pre-update policy of this iteration.
            const std::vector<double> s_old = policy.logits(emb);
            GroupRollout roll;
            for (int g = 0; g < policy.cfg.group; ++g) {
                SelectionState state;
                std::vector<double> lps;
                for (int64_t step = 0; step < t_prime; ++step) {
                    const auto probs = policy_probs(s_old, state);
                    const int64_t pick = sample_index(probs, rng);
                    lps.push_back(std::log(probs[static_cast<size_t>(pick)]));
                    state.selected.push_back(pick);
                }
                roll.sequences.push_back(state.selected);
                roll.old_logprob.push_back(std::move(lps));
                roll.rewards.push_back(reward(m, pool[di], state.selected, vocab));
            }
            roll.advantages = grpo_advantages(roll.rewards);
            iter_surrogate += grpo_step(policy, emb, roll, opt, policy.cfg.lr);
            for (double r : roll.rewards) iter_reward += r;
            counted += policy.cfg.group;
        }
        stats.mean_reward.push_back(iter_reward / static_cast<double>(counted));
        stats.surrogate.push_back(iter_surrogate / static_cast<double>(batch));
    }
    return stats;
}

} // namespace refrag::selector
