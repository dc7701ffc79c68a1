#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refrag/tensor.hpp"

namespace refrag::curriculum {

// Staged data mixture for the reconstruction and continual-pretraining tasks.
// A row "m x k" schedules examples whose encoder input is m chunks of k
// tokens; counts shift toward larger m in later stages.
struct CurriculumSchedule {
    struct Row {
        std::string label;           // "1x8", "2x8", ...
        int64_t chunks = 0;          // m parsed from the label
        std::vector<int64_t> counts; // one entry per stage
        int64_t declared_total = 0;  // the table's summation column
    };

    std::vector<Row> rows;

    int num_stages() const { return rows.empty() ? 0 : static_cast<int>(rows[0].counts.size()); }
    int64_t total_examples() const;
    int64_t stage_examples(int stage) const; // stage is 1-based
    double stage_mean_chunks(int stage) const;

    // Throws unless every row has the same stage count, all counts are
    // non-negative, and |sum(counts) - declared_total| <= kRowSumSlack.
    void validate() const;

    CurriculumSchedule scaled(double multiplier) const;     // totals re-declared
    CurriculumSchedule truncated(int64_t max_chunks) const; // keep rows with m <= max_chunks
    CurriculumSchedule relabeled(int64_t k) const;          // "m x k" labels for another k

    static CurriculumSchedule builtin(); // the shipped 9-row, 9-stage table
    static CurriculumSchedule load(const std::string& path);
    void save(const std::string& path) const;
};

// The shipped table's printed totals are off by up to 2 from the actual row
// sums (the source counts were rounded from geometric sequences), so exact
// row-sum validation would reject the canonical table itself.
constexpr int64_t kRowSumSlack = 2;

// Emits exactly the stage's per-row counts as a shuffled list of chunk-count
// difficulties. stage is 1-based; out-of-range stages throw.
std::vector<int64_t> sample_stage(const CurriculumSchedule& schedule, int stage, Rng& rng);

} // namespace refrag::curriculum
