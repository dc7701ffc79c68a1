#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refrag/corpus.hpp"
#include "refrag/curriculum.hpp"
#include "refrag/model.hpp"

namespace refrag::training {

enum class Stage { base_lm, reconstruction, cpt, mixed_finetune };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct TrainConfig {
    Stage stage = Stage::cpt;
    double peak_lr = 5e-5;
    double warmup_fraction = 0.04; // linear warm-up share of total steps
    int batch_size = 32;
    int epochs = 4;                // passes over the curriculum table
    bool freeze_decoder = false;   // required for reconstruction
    int64_t k = 8;
    double p = 0.1;                // expansion fraction (mixed_finetune only)
    int64_t s = 64;                // context tokens per data point
    int64_t o = 64;                // output tokens per data point
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    uint64_t seed = 42;
    bool use_curriculum = true;    // ablation switch for recon/cpt
    int64_t max_steps = -1;        // optional cap; <0 means "run the plan"
    int64_t base_steps = 400;      // base_lm only
    int64_t base_window = 128;     // base_lm only

    void validate() const;
};

struct StepRecord {
    int64_t step = 0;
    std::string stage;
    std::vector<std::pair<std::string, int64_t>> difficulty_mix; // label -> count in batch
    double loss = 0.0;
    double lr = 0.0;
};

using MetricsSink = std::function<void(const StepRecord&)>;

struct TrainStats {
    std::vector<double> losses; // one entry per optimizer step
    int64_t steps = 0;
    double final_loss = 0.0;
    int64_t opt_t = 0; // AdamW timestep after the run (checkpointed)
};

// Linear warm-up to peak_lr over max(1, round(fraction * total)) steps, then
// cosine decay to zero at `total`.
double lr_at(int64_t step, int64_t total_steps, double peak_lr, double warmup_fraction);

// Plain next-token pretraining of the decoder (the "foundation model" the
// later stages align the encoder against). Encoder untouched.
TrainStats train_base(model::RefragModel& m, const std::vector<int>& tokens,
                      const corpus::Vocab& vocab, const TrainConfig& cfg,
                      const MetricsSink& sink = {}, int64_t start_step = 0, int64_t opt_t0 = 0);

// Frozen-decoder reconstruction: only encoder + projection move; throws if
// the decoder fingerprint drifts.
TrainStats train_reconstruction(model::RefragModel& m, const std::vector<int>& tokens,
                                const corpus::Vocab& vocab,
                                const curriculum::CurriculumSchedule& schedule,
                                const TrainConfig& cfg, const MetricsSink& sink = {},
                                int64_t start_step = 0, int64_t opt_t0 = 0);

// Next-paragraph prediction over compressed context; all parameters train.
TrainStats train_cpt(model::RefragModel& m, const std::vector<int>& tokens,
                     const corpus::Vocab& vocab, const curriculum::CurriculumSchedule& schedule,
                     const TrainConfig& cfg, const MetricsSink& sink = {},
                     int64_t start_step = 0, int64_t opt_t0 = 0);

// CPT with round(p*L) chunks expanded to raw tokens per example.
TrainStats train_mixed(model::RefragModel& m, const std::vector<int>& tokens,
                       const corpus::Vocab& vocab, const curriculum::CurriculumSchedule& schedule,
                       const TrainConfig& cfg, const MetricsSink& sink = {},
                       int64_t start_step = 0, int64_t opt_t0 = 0);

enum class EvalPolicy { no_context, full_tokens, truncated_last, compressed, mixed };

EvalPolicy eval_policy_from_name(const std::string& name);
const char* eval_policy_name(EvalPolicy p);

struct EvalSpec {
    EvalPolicy policy = EvalPolicy::compressed;
    int64_t truncate_to = 0; // truncated_last: keep this many trailing tokens
    double p = 0.0;          // mixed: expansion fraction
    uint64_t seed = 1;       // mixed: expansion sampling seed
};

// Mean per-token NLL (nats) of x_{s+1:s+o} across the held-out datapoints.
double evaluate_nll(model::RefragModel& m, const std::vector<corpus::DataPoint>& datapoints,
                    const corpus::Vocab& vocab, const EvalSpec& spec);

// Mean NLL of reconstructing each datapoint's context from its compressed
// chunk embeddings (the reconstruction-task eval).
double evaluate_reconstruction_nll(model::RefragModel& m,
                                   const std::vector<corpus::DataPoint>& datapoints,
                                   const corpus::Vocab& vocab);

// Uniform expansion-set draw of size round(p*L), without replacement.
std::vector<int64_t> draw_expansion(int64_t L, double p, Rng& rng);

uint64_t mix_seed(uint64_t seed, const std::string& tag, int64_t index);

} // namespace refrag::training
