#pragma once

#include <cstdint>

#include "refrag/corpus.hpp"
#include "refrag/model.hpp"

namespace refrag::needle {

// Synthetic fact-recall task: the context plants [key=value] statements, the
// question asks "?key=", and the model must emit the planted value. Measures
// whether compressed context preserves retrievable information.
struct NeedleConfig {
    int64_t s = 60;      // context tokens
    int64_t k = 4;       // chunk size
    double p = 0.25;     // expansion fraction during adaptation and eval
    int adapt_steps = 0; // quick fine-tune before measuring
    int batch = 8;
    double lr = 3e-4;
    int eval_tasks = 100;
    uint64_t seed = 5;
    int train_pool = 0;            // >0: recycle a small task pool (overfit runs)
    bool eval_training_tasks = false; // measure on the adaptation tasks themselves
};

// Brief fine-tune on QA-formatted tasks with the configured (k, p) mix.
void finetune(model::RefragModel& m, const corpus::Vocab& vocab, const corpus::FactBank& bank,
              const NeedleConfig& cfg);

// Exact-match accuracy of greedy generation against the planted value.
// planted=false asks about keys absent from the context (chance-level floor).
double exact_match(model::RefragModel& m, const corpus::Vocab& vocab,
                   const corpus::FactBank& bank, const NeedleConfig& cfg, bool planted);

} // namespace refrag::needle
