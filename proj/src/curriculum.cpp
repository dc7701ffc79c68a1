#include "refrag/curriculum.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace refrag::curriculum {

namespace {

int64_t parse_chunks(const std::string& label) {
    size_t pos = 0;
    const long long m = std::stoll(label, &pos);
    if (pos == 0 || pos >= label.size() || label[pos] != 'x' || m <= 0)
        throw std::invalid_argument("curriculum: bad difficulty label '" + label + "'");
    return m;
}

} // namespace

int64_t CurriculumSchedule::total_examples() const {
    int64_t total = 0;
    for (const auto& r : rows)
        for (int64_t c : r.counts) total += c;
    return total;
}

int64_t CurriculumSchedule::stage_examples(int stage) const {
    if (stage < 1 || stage > num_stages())
        throw std::out_of_range("curriculum: stage out of range");
    int64_t total = 0;
    for (const auto& r : rows) total += r.counts[static_cast<size_t>(stage - 1)];
    return total;
}

double CurriculumSchedule::stage_mean_chunks(int stage) const {
    if (stage < 1 || stage > num_stages())
        throw std::out_of_range("curriculum: stage out of range");
    double num = 0.0, den = 0.0;
    for (const auto& r : rows) {
        const double c = static_cast<double>(r.counts[static_cast<size_t>(stage - 1)]);
        num += c * static_cast<double>(r.chunks);
        den += c;
    }
    return den > 0.0 ? num / den : 0.0;
}

void CurriculumSchedule::validate() const {
    if (rows.empty()) throw std::invalid_argument("curriculum: no rows");
    const size_t stages = rows[0].counts.size();
    if (stages == 0) throw std::invalid_argument("curriculum: no stages");
    for (const auto& r : rows) {
        if (r.counts.size() != stages)
            throw std::invalid_argument("curriculum: ragged stage counts in row " + r.label);
        if (r.chunks <= 0) throw std::invalid_argument("curriculum: bad chunk count in row " + r.label);
        int64_t sum = 0;
        for (int64_t c : r.counts) {
            if (c < 0) throw std::invalid_argument("curriculum: negative count in row " + r.label);
            sum += c;
        }
        if (std::llabs(sum - r.declared_total) > kRowSumSlack) {
            throw std::invalid_argument("curriculum: row " + r.label + " sums to " +
                                        std::to_string(sum) + ", declared total " +
                                        std::to_string(r.declared_total));
        }
    }
}

CurriculumSchedule CurriculumSchedule::scaled(double multiplier) const {
    if (multiplier <= 0.0) throw std::invalid_argument("curriculum: multiplier must be positive");
    CurriculumSchedule out = *this;
    for (auto& r : out.rows) {
        int64_t sum = 0;
        for (auto& c : r.counts) {
            c = std::llround(static_cast<double>(c) * multiplier);
            sum += c;
        }
        r.declared_total = sum;
    }
    return out;
}

CurriculumSchedule CurriculumSchedule::truncated(int64_t max_chunks) const {
    CurriculumSchedule out;
    for (const auto& r : rows)
        if (r.chunks <= max_chunks) out.rows.push_back(r);
    if (out.rows.empty()) throw std::invalid_argument("curriculum: truncation removed every row");
    return out;
}

CurriculumSchedule CurriculumSchedule::relabeled(int64_t k) const {
    CurriculumSchedule out = *this;
    for (auto& r : out.rows) r.label = std::to_string(r.chunks) + "x" + std::to_string(k);
    return out;
}

CurriculumSchedule CurriculumSchedule::builtin() {
    // 9 stages, difficulties 1..256 chunks, totals 2000/4000/8000.
    static const struct {
        const char* label;
        int64_t counts[9];
        int64_t total;
    } kTable[] = {
        {"1x8", {1333, 445, 148, 49, 16, 6, 2, 1, 0}, 2000},
        {"2x8", {333, 298, 267, 238, 213, 191, 171, 153, 137}, 2000},
        {"4x8", {83, 102, 126, 156, 193, 238, 293, 362, 447}, 2000},
        {"8x8", {20, 35, 61, 106, 185, 324, 565, 985, 1719}, 4000},
        {"16x8", {5, 11, 23, 48, 103, 220, 468, 997, 2125}, 4000},
        {"32x8", {1, 3, 7, 19, 50, 133, 353, 939, 2496}, 4000},
        {"64x8", {1, 3, 9, 25, 73, 212, 618, 1802, 5259}, 8000},
        {"128x8", {1, 3, 9, 25, 73, 212, 618, 1802, 5259}, 8000},
        {"256x8", {1, 3, 9, 25, 73, 212, 618, 1802, 5259}, 8000},
    };
    CurriculumSchedule s;
    for (const auto& t : kTable) {
        Row r;
        r.label = t.label;
        r.chunks = parse_chunks(r.label);
        r.counts.assign(t.counts, t.counts + 9);
        r.declared_total = t.total;
        s.rows.push_back(std::move(r));
    }
    s.validate();
    return s;
}

CurriculumSchedule CurriculumSchedule::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("curriculum: cannot open " + path);
    CurriculumSchedule s;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        Row r;
        if (!(ls >> r.label)) continue; // blank line
        r.chunks = parse_chunks(r.label);
        int64_t v;
        while (ls >> v) r.counts.push_back(v);
        if (r.counts.size() < 2)
            throw std::invalid_argument("curriculum: row " + r.label + " needs counts and a total");
        r.declared_total = r.counts.back();
        r.counts.pop_back();
        s.rows.push_back(std::move(r));
    }
    s.validate();
    return s;
}

void CurriculumSchedule::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("curriculum: cannot open for writing " + path);
    out << "# difficulty-label stage-counts... row-total\n";
    for (const auto& r : rows) {
        out << r.label;
        for (int64_t c : r.counts) out << ' ' << c;
        out << ' ' << r.declared_total << "\n";
    }
}

std::vector<int64_t> sample_stage(const CurriculumSchedule& schedule, int stage, Rng& rng) {
    if (stage < 1 || stage > schedule.num_stages())
        throw std::out_of_range("sample_stage: stage out of range");
    std::vector<int64_t> difficulties;
    difficulties.reserve(static_cast<size_t>(schedule.stage_examples(stage)));
    for (const auto& r : schedule.rows) {
        const int64_t c = r.counts[static_cast<size_t>(stage - 1)];
        for (int64_t i = 0; i < c; ++i) difficulties.push_back(r.chunks);
    }
    rng.shuffle(difficulties);
    return difficulties;
}

} // namespace refrag::curriculum
