#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "refrag/tensor.hpp"

namespace refrag::corpus {

// Character-level vocabulary: sorted distinct symbols, then pad, then bos.
struct Vocab {
    std::string symbols; // id -> character, ids 0..symbols.size()-1
    int pad_id = -1;
    int bos_id = -1;

    int size() const { return static_cast<int>(symbols.size()) + 2; }
    int encode(char c) const; // throws on unknown symbol
    char decode(int id) const;
    bool is_special(int id) const { return id == pad_id || id == bos_id; }
};

Vocab build_vocab(const std::string& corpus_text); // throws on empty input

struct DataPoint {
    std::vector<int> tokens; // length s + o
    int64_t s = 0;           // context tokens
    int64_t o = 0;           // output tokens

    std::vector<int> context() const { return {tokens.begin(), tokens.begin() + s}; }
    std::vector<int> outputs() const { return {tokens.begin() + s, tokens.end()}; }
};

// Non-overlapping windows of length s+o; the trailing remainder is dropped.
std::vector<DataPoint> make_datapoints(const std::vector<int>& stream, int64_t s, int64_t o);

struct Chunk {
    int64_t index = 0;          // 0-based position within the context
    std::vector<int> token_ids; // always exactly k ids
    bool padded = false;
};

// ceil(s/k) chunks; a short tail is right-padded with pad_id and flagged.
std::vector<Chunk> chunk_context(const std::vector<int>& context, int64_t k, int pad_id);

std::vector<int> encode(const Vocab& v, const std::string& text);
std::string decode_text(const Vocab& v, const std::vector<int>& ids); // specials skipped

// --- synthetic corpus -------------------------------------------------------
//
// Mixture of three character sources so that chunks differ in information
// content: order-2 Markov prose (medium entropy), repeated motifs (low
// entropy) and key=value facts (high entropy, used by the needle eval).

struct FactBank {
    std::vector<std::string> keys;   // distinct 2-letter keys
    std::vector<std::string> values; // small closed set of 3-letter values
    std::vector<int> key_value;      // keys[i] -> values[key_value[i]]

    std::string statement(size_t i) const; // "[qj=foa]"
};

struct CorpusSpec {
    int64_t chars = 2'000'000;
    uint64_t seed = 1;
    int fact_pairs = 64;
    int distinct_values = 8;
    double fact_fraction = 0.05;
    double motif_fraction = 0.15;
};

struct SyntheticCorpus {
    std::string text;
    FactBank facts;
};

SyntheticCorpus generate_corpus(const CorpusSpec& spec);

// --- needle tasks ------------------------------------------------------------

struct NeedleTask {
    std::vector<int> context;  // s tokens, facts embedded in filler
    std::vector<int> question; // "?qj="
    std::vector<int> answer;   // "foa."
    int fact_index = -1;       // index into the bank; -1 when the fact is absent
};

// When planted=false the question asks about a key whose statement is not in
// the context (chance-level control).
std::vector<NeedleTask> make_needle_tasks(const Vocab& vocab, const FactBank& bank,
                                          int64_t s, int count, uint64_t seed, bool planted);

// Line-delimited datapoint dumps: {"s":..,"o":..,"tokens":[..]} per line.
void write_datapoints_jsonl(const std::string& path, const std::vector<DataPoint>& dps);
std::vector<DataPoint> read_datapoints_jsonl(const std::string& path);

} // namespace refrag::corpus
