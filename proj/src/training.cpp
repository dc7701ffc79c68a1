#include "refrag/training.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace refrag::training {

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::base_lm: return "base_lm";
        case Stage::reconstruction: return "reconstruction";
        case Stage::cpt: return "cpt";
        case Stage::mixed_finetune: return "mixed_finetune";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "base_lm") return Stage::base_lm;
    if (name == "reconstruction") return Stage::reconstruction;
    if (name == "cpt") return Stage::cpt;
    if (name == "mixed_finetune") return Stage::mixed_finetune;
    throw std::invalid_argument("unknown training stage: " + name);
}

void TrainConfig::validate() const {
    if (stage == Stage::reconstruction && !freeze_decoder)
        throw std::invalid_argument("reconstruction requires freeze_decoder");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw std::invalid_argument("warmup_fraction must be in [0, 1)");
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("p must be in [0, 1]");
    if (batch_size < 1 || epochs < 1 || k < 1 || s < 1 || o < 1)
        throw std::invalid_argument("batch_size, epochs, k, s, o must be positive");
    if (peak_lr < 0.0) throw std::invalid_argument("peak_lr must be non-negative");
}

double lr_at(int64_t step, int64_t total_steps, double peak_lr, double warmup_fraction) {
    if (total_steps <= 0) return 0.0;
    int64_t warmup = std::llround(warmup_fraction * static_cast<double>(total_steps));
    if (warmup < 1) warmup = 1;
    if (step <= warmup)
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total_steps <= warmup) return peak_lr;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

uint64_t mix_seed(uint64_t seed, const std::string& tag, int64_t index) {
    uint64_t h = fnv1a(tag.data(), tag.size(), seed ^ 0x5bf03635f0935ac9ull);
    h ^= static_cast<uint64_t>(index) + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    return h;
}

std::vector<int64_t> draw_expansion(int64_t L, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("draw_expansion: p must be in [0, 1]");
    const int64_t want = std::llround(p * static_cast<double>(L));
    if (want > L) throw std::invalid_argument("draw_expansion: round(p*L) exceeds L");
    std::vector<int64_t> all(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) all[static_cast<size_t>(i)] = i;
    // Partial Fisher-Yates: the first `want` entries are a uniform subset.
    for (int64_t i = 0; i < want; ++i) {
        const int64_t j = i + rng.below(L - i);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    all.resize(static_cast<size_t>(want));
    return all;
}

namespace {

struct PlannedExample {
    int64_t chunks;        // difficulty m (encoder input is m chunks)
    int64_t example_index; // global index, seeds the window/expansion draws
};

struct Plan {
    std::vector<std::vector<PlannedExample>> batches;
    std::vector<int> batch_stage; // curriculum stage per batch (1-based)
};

// Deterministic expansion of the curriculum into batches. Pure function of
// (schedule, cfg), so resuming at any step replays the identical stream.
Plan build_plan(const curriculum::CurriculumSchedule& schedule, const TrainConfig& cfg) {
    Plan plan;
    int64_t example_index = 0;
    const int64_t max_chunks = [&] {
        int64_t m = 1;
        for (const auto& r : schedule.rows) m = std::max(m, r.chunks);
        return m;
    }();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int stage = 1; stage <= schedule.num_stages(); ++stage) {
            Rng stage_rng(mix_seed(cfg.seed, "stage", epoch * 100 + stage));
            std::vector<int64_t> difficulties = curriculum::sample_stage(schedule, stage, stage_rng);
            if (!cfg.use_curriculum) {
                // Same example budget, but every example at full difficulty.
                std::fill(difficulties.begin(), difficulties.end(), max_chunks);
            }
            for (size_t b = 0; b < difficulties.size(); b += static_cast<size_t>(cfg.batch_size)) {
                std::vector<PlannedExample> batch;
                for (size_t i = b; i < std::min(difficulties.size(), b + static_cast<size_t>(cfg.batch_size)); ++i) {
                    batch.push_back({difficulties[i], example_index++});
                }
                plan.batches.push_back(std::move(batch));
                plan.batch_stage.push_back(stage);
            }
        }
    }
    return plan;
}

struct LoopHooks {
    // Builds the example's loss on the tape; returns the unscaled mean NLL var.
    std::function<model::Tape::Var(model::Tape&, const PlannedExample&)> example_loss;
    std::vector<ag::Param*> optimized;
};

TrainStats run_plan(model::RefragModel& m, const Plan& plan, const TrainConfig& cfg,
                    const MetricsSink& sink, const LoopHooks& hooks, int64_t start_step,
                    int64_t opt_t0) {
    const int64_t total_steps = static_cast<int64_t>(plan.batches.size());
    ag::AdamW opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    opt.t = opt_t0;

    std::vector<ag::Param*> all = m.all_params();
    TrainStats stats;
    for (int64_t step = start_step; step < total_steps; ++step) {
        if (cfg.max_steps >= 0 && step - start_step >= cfg.max_steps) break;
        const auto& batch = plan.batches[static_cast<size_t>(step)];
        for (ag::Param* p : all) p->zero_grad();
        double batch_loss = 0.0;
        for (const auto& ex : batch) {
            model::Tape tape;
            model::Tape::Var loss = hooks.example_loss(tape, ex);
            model::Tape::Var scaled = tape.scale(loss, 1.0 / static_cast<double>(batch.size()));
            tape.backward(scaled);
            batch_loss += tape.scalar(loss);
        }
        batch_loss /= static_cast<double>(batch.size());
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("training: loss is not finite at step " + std::to_string(step));
        const double lr = lr_at(step, total_steps, cfg.peak_lr, cfg.warmup_fraction);
        opt.step(hooks.optimized, lr);
        for (ag::Param* p : all) p->zero_grad(); // frozen params collect grads too

        stats.losses.push_back(batch_loss);
        if (sink) {
            StepRecord rec;
            rec.step = step;
            rec.stage = stage_name(cfg.stage);
            rec.loss = batch_loss;
            rec.lr = lr;
            std::map<int64_t, int64_t> mix;
            for (const auto& ex : batch)
                if (ex.chunks > 0) mix[ex.chunks]++;
            for (const auto& [chunks, count] : mix)
                rec.difficulty_mix.emplace_back(std::to_string(chunks) + "x" + std::to_string(cfg.k),
                                                count);
            sink(rec);
        }
    }
    stats.steps = static_cast<int64_t>(stats.losses.size());
    stats.final_loss = stats.losses.empty() ? 0.0 : stats.losses.back();
    stats.opt_t = opt.t;
    return stats;
}

// Window of `len` tokens sampled uniformly; pure function of the example index.
std::vector<int> sample_window(const std::vector<int>& tokens, int64_t len, uint64_t seed,
                               int64_t example_index) {
    if (static_cast<int64_t>(tokens.size()) < len)
        throw std::invalid_argument("training: corpus shorter than one example window");
    Rng rng(mix_seed(seed, "window", example_index));
    const int64_t start = rng.below(static_cast<int64_t>(tokens.size()) - len + 1);
    return {tokens.begin() + start, tokens.begin() + start + len};
}

} // namespace

TrainStats train_base(model::RefragModel& m, const std::vector<int>& tokens,
                      const corpus::Vocab& vocab, const TrainConfig& cfg, const MetricsSink& sink,
                      int64_t start_step, int64_t opt_t0) {
    cfg.validate();
    if (cfg.stage != Stage::base_lm) throw std::invalid_argument("train_base: stage must be base_lm");
    Plan plan;
    int64_t example_index = 0;
    for (int64_t b = 0; b < cfg.base_steps; ++b) {
        std::vector<PlannedExample> batch;
        for (int i = 0; i < cfg.batch_size; ++i) batch.push_back({0, example_index++});
        plan.batches.push_back(std::move(batch));
        plan.batch_stage.push_back(1);
    }
    LoopHooks hooks;
    hooks.optimized = m.decoder_side_params();
    hooks.example_loss = [&](model::Tape& t, const PlannedExample& ex) {
        std::vector<int> window = sample_window(tokens, cfg.base_window, cfg.seed, ex.example_index);
        model::InputArrangement arr; // empty: plain BOS-anchored language modeling
        arr.k = cfg.k;
        auto out = model::decoder_forward(m, t, arr, window, vocab.bos_id, vocab.pad_id);
        return out.mean_nll;
    };
    return run_plan(m, plan, cfg, sink, hooks, start_step, opt_t0);
}

namespace {

TrainStats run_context_training(model::RefragModel& m, const std::vector<int>& tokens,
                                const corpus::Vocab& vocab,
                                const curriculum::CurriculumSchedule& schedule,
                                const TrainConfig& cfg, const MetricsSink& sink,
                                bool reconstruct, double expansion_p, int64_t start_step,
                                int64_t opt_t0) {
    schedule.validate();
    Plan plan = build_plan(schedule, cfg);
    LoopHooks hooks;
    hooks.optimized = reconstruct ? m.encoder_side_params() : m.all_params();
    hooks.example_loss = [&, reconstruct, expansion_p](model::Tape& t, const PlannedExample& ex) {
        const int64_t ctx_len = ex.chunks * cfg.k;
        const int64_t need = reconstruct ? ctx_len : ctx_len + cfg.o;
        std::vector<int> window = sample_window(tokens, need, cfg.seed, ex.example_index);
        std::vector<int> context(window.begin(), window.begin() + ctx_len);
        std::vector<int> targets = reconstruct
                                       ? context
                                       : std::vector<int>(window.begin() + ctx_len, window.end());
        auto chunks = corpus::chunk_context(context, cfg.k, vocab.pad_id);
        std::vector<int64_t> expansion;
        if (expansion_p > 0.0) {
            Rng er(mix_seed(cfg.seed, "expand", ex.example_index));
            expansion = draw_expansion(static_cast<int64_t>(chunks.size()), expansion_p, er);
        }
        auto arr = model::assemble_input({}, std::move(chunks), std::move(expansion), cfg.k,
                                         m.cfg.question_first);
        auto out = model::decoder_forward(m, t, arr, targets, vocab.bos_id, vocab.pad_id);
        return out.mean_nll;
    };

    if (reconstruct) {
        const uint64_t before = m.decoder_fingerprint();
        m.set_trainable(true, false);
        TrainStats stats = run_plan(m, plan, cfg, sink, hooks, start_step, opt_t0);
        m.set_trainable(true, true);
        if (m.decoder_fingerprint() != before)
            throw std::runtime_error("train_reconstruction: decoder parameters drifted");
        return stats;
    }
    return run_plan(m, plan, cfg, sink, hooks, start_step, opt_t0);
}

} // namespace

TrainStats train_reconstruction(model::RefragModel& m, const std::vector<int>& tokens,
                                const corpus::Vocab& vocab,
                                const curriculum::CurriculumSchedule& schedule,
                                const TrainConfig& cfg, const MetricsSink& sink,
                                int64_t start_step, int64_t opt_t0) {
    cfg.validate();
    if (cfg.stage != Stage::reconstruction)
        throw std::invalid_argument("train_reconstruction: stage must be reconstruction");
    return run_context_training(m, tokens, vocab, schedule, cfg, sink, /*reconstruct=*/true,
                                /*expansion_p=*/0.0, start_step, opt_t0);
}

TrainStats train_cpt(model::RefragModel& m, const std::vector<int>& tokens,
                     const corpus::Vocab& vocab, const curriculum::CurriculumSchedule& schedule,
                     const TrainConfig& cfg, const MetricsSink& sink, int64_t start_step,
                     int64_t opt_t0) {
    cfg.validate();
    if (cfg.stage != Stage::cpt) throw std::invalid_argument("train_cpt: stage must be cpt");
    return run_context_training(m, tokens, vocab, schedule, cfg, sink, /*reconstruct=*/false,
                                /*expansion_p=*/0.0, start_step, opt_t0);
}

TrainStats train_mixed(model::RefragModel& m, const std::vector<int>& tokens,
                       const corpus::Vocab& vocab, const curriculum::CurriculumSchedule& schedule,
                       const TrainConfig& cfg, const MetricsSink& sink, int64_t start_step,
                       int64_t opt_t0) {
    cfg.validate();
    if (cfg.stage != Stage::mixed_finetune)
        throw std::invalid_argument("train_mixed: stage must be mixed_finetune");
    return run_context_training(m, tokens, vocab, schedule, cfg, sink, /*reconstruct=*/false,
                                cfg.p, start_step, opt_t0);
}

EvalPolicy eval_policy_from_name(const std::string& name) {
    if (name == "no_context") return EvalPolicy::no_context;
    if (name == "full_tokens") return EvalPolicy::full_tokens;
    if (name == "truncated_last") return EvalPolicy::truncated_last;
    if (name == "compressed") return EvalPolicy::compressed;
    if (name == "mixed") return EvalPolicy::mixed;
    throw std::invalid_argument("unknown eval policy: " + name);
}

const char* eval_policy_name(EvalPolicy p) {
    switch (p) {
        case EvalPolicy::no_context: return "no_context";
        case EvalPolicy::full_tokens: return "full_tokens";
        case EvalPolicy::truncated_last: return "truncated_last";
        case EvalPolicy::compressed: return "compressed";
        case EvalPolicy::mixed: return "mixed";
    }
    return "?";
}

double evaluate_nll(model::RefragModel& m, const std::vector<corpus::DataPoint>& datapoints,
                    const corpus::Vocab& vocab, const EvalSpec& spec) {
    if (datapoints.empty()) throw std::invalid_argument("evaluate_nll: empty eval set");
    double total = 0.0;
    int64_t count = 0;
    Rng mixed_rng(spec.seed);
    for (size_t di = 0; di < datapoints.size(); ++di) {
        const auto& dp = datapoints[di];
        std::vector<int> context = dp.context();
        std::vector<int> targets = dp.outputs();
        model::InputArrangement arr;
        arr.k = m.cfg.k;
        arr.question_first = m.cfg.question_first;
        switch (spec.policy) {
            case EvalPolicy::no_context:
                break;
            case EvalPolicy::full_tokens:
                arr.question = context;
                break;
            case EvalPolicy::truncated_last: {
                const int64_t keep = std::min<int64_t>(spec.truncate_to, dp.s);
                arr.question.assign(context.end() - keep, context.end());
                break;
            }
            case EvalPolicy::compressed: {
                arr = model::assemble_input({}, corpus::chunk_context(context, m.cfg.k, vocab.pad_id),
                                            {}, m.cfg.k, m.cfg.question_first);
                break;
            }
            case EvalPolicy::mixed: {
                auto chunks = corpus::chunk_context(context, m.cfg.k, vocab.pad_id);
                auto expansion =
                    draw_expansion(static_cast<int64_t>(chunks.size()), spec.p, mixed_rng);
                arr = model::assemble_input({}, std::move(chunks), std::move(expansion), m.cfg.k,
                                            m.cfg.question_first);
                break;
            }
        }
        model::Tape t;
        auto out = model::decoder_forward(m, t, arr, targets, vocab.bos_id, vocab.pad_id);
        for (size_t i = 0; i < out.nll.size(); ++i) {
            if (targets[i] == vocab.pad_id) continue;
            total += out.nll[i];
            count += 1;
        }
    }
    if (count == 0) throw std::invalid_argument("evaluate_nll: no live target tokens");
    return total / static_cast<double>(count);
}

double evaluate_reconstruction_nll(model::RefragModel& m,
                                   const std::vector<corpus::DataPoint>& datapoints,
                                   const corpus::Vocab& vocab) {
    if (datapoints.empty()) throw std::invalid_argument("evaluate_reconstruction_nll: empty eval set");
    double total = 0.0;
    int64_t count = 0;
    for (const auto& dp : datapoints) {
        std::vector<int> context = dp.context();
        auto arr = model::assemble_input({}, corpus::chunk_context(context, m.cfg.k, vocab.pad_id),
                                         {}, m.cfg.k, m.cfg.question_first);
        model::Tape t;
        auto out = model::decoder_forward(m, t, arr, context, vocab.bos_id, vocab.pad_id);
        for (size_t i = 0; i < out.nll.size(); ++i) {
            if (context[i] == vocab.pad_id) continue;
            total += out.nll[i];
            count += 1;
        }
    }
    if (count == 0) throw std::invalid_argument("evaluate_reconstruction_nll: no live targets");
    return total / static_cast<double>(count);
}

} // namespace refrag::training
