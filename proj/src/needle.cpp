#include "refrag/needle.hpp"

#include <cmath>
#include <stdexcept>

#include "refrag/training.hpp"

namespace refrag::needle {

namespace {

model::InputArrangement task_arrangement(model::RefragModel& m, const corpus::Vocab& vocab,
                                         const corpus::NeedleTask& task, double p, Rng& rng) {
    auto chunks = corpus::chunk_context(task.context, m.cfg.k, vocab.pad_id);
    auto expansion = training::draw_expansion(static_cast<int64_t>(chunks.size()), p, rng);
    return model::assemble_input(task.question, std::move(chunks), std::move(expansion), m.cfg.k,
                                 m.cfg.question_first);
}

} // namespace

void finetune(model::RefragModel& m, const corpus::Vocab& vocab, const corpus::FactBank& bank,
              const NeedleConfig& cfg) {
    if (cfg.adapt_steps <= 0) return;
    if (m.cfg.k != cfg.k)
        throw std::invalid_argument("needle: model chunk size differs from the configured k");
    ag::AdamW opt;
    auto params = m.all_params();
    const int pool = cfg.train_pool > 0 ? cfg.train_pool : cfg.adapt_steps * cfg.batch;
    const auto tasks = corpus::make_needle_tasks(vocab, bank, cfg.s, pool,
                                                 training::mix_seed(cfg.seed, "needle-train", 0),
                                                 /*planted=*/true);
    Rng rng(training::mix_seed(cfg.seed, "needle-expand", 0));
    size_t cursor = 0;
    for (int step = 0; step < cfg.adapt_steps; ++step) {
        for (auto* pp : params) pp->zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& task = tasks[cursor++ % tasks.size()];
            auto arr = task_arrangement(m, vocab, task, cfg.p, rng);
            model::Tape t;
            auto out = model::decoder_forward(m, t, arr, task.answer, vocab.bos_id, vocab.pad_id);
            t.backward(t.scale(out.mean_nll, 1.0 / cfg.batch));
            batch_loss += t.scalar(out.mean_nll);
        }
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("needle: loss is not finite");
        opt.step(params, cfg.lr);
    }
}

double exact_match(model::RefragModel& m, const corpus::Vocab& vocab,
                   const corpus::FactBank& bank, const NeedleConfig& cfg, bool planted) {
    if (m.cfg.k != cfg.k)
        throw std::invalid_argument("needle: model chunk size differs from the configured k");
    const bool on_train = cfg.eval_training_tasks && planted;
    const int count = on_train ? (cfg.train_pool > 0 ? cfg.train_pool : cfg.eval_tasks)
                               : cfg.eval_tasks;
    const auto tasks = corpus::make_needle_tasks(
        vocab, bank, cfg.s, count,
        on_train ? training::mix_seed(cfg.seed, "needle-train", 0)
                 : training::mix_seed(cfg.seed, "needle-eval", 1),
        planted);
    Rng rng(training::mix_seed(cfg.seed, "needle-eval-expand", 1));
    int hits = 0;
    for (const auto& task : tasks) {
        auto arr = task_arrangement(m, vocab, task, cfg.p, rng);
        const std::vector<int> gen =
            model::generate(m, arr, static_cast<int>(task.answer.size()), vocab.bos_id);
        if (gen == task.answer) hits += 1;
    }
    return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

} // namespace refrag::needle
