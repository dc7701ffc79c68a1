#include "refrag/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace refrag::corpus {

int Vocab::encode(char c) const {
    const auto pos = symbols.find(c);
    if (pos == std::string::npos)
        throw std::invalid_argument(std::string("vocab: unknown symbol '") + c + "'");
    return static_cast<int>(pos);
}

char Vocab::decode(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id out of range");
    if (id == pad_id) return '\1';
    if (id == bos_id) return '\2';
    return symbols[static_cast<size_t>(id)];
}

Vocab build_vocab(const std::string& corpus_text) {
    if (corpus_text.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::set<char> seen(corpus_text.begin(), corpus_text.end());
    Vocab v;
    v.symbols.assign(seen.begin(), seen.end()); // std::set iterates sorted
    v.pad_id = static_cast<int>(v.symbols.size());
    v.bos_id = v.pad_id + 1;
    return v;
}

std::vector<DataPoint> make_datapoints(const std::vector<int>& stream, int64_t s, int64_t o) {
    if (s <= 0 || o <= 0) throw std::invalid_argument("make_datapoints: s and o must be positive");
    const int64_t T = s + o;
    std::vector<DataPoint> out;
    const int64_t count = static_cast<int64_t>(stream.size()) / T;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        DataPoint dp;
        dp.s = s;
        dp.o = o;
        dp.tokens.assign(stream.begin() + i * T, stream.begin() + (i + 1) * T);
        out.push_back(std::move(dp));
    }
    return out;
}

std::vector<Chunk> chunk_context(const std::vector<int>& context, int64_t k, int pad_id) {
    if (k <= 0) throw std::invalid_argument("chunk_context: k must be >= 1");
    const int64_t s = static_cast<int64_t>(context.size());
    const int64_t L = (s + k - 1) / k;
    std::vector<Chunk> chunks;
    chunks.reserve(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) {
        Chunk c;
        c.index = i;
        const int64_t begin = i * k;
        const int64_t end = std::min(begin + k, s);
        c.token_ids.assign(context.begin() + begin, context.begin() + end);
        c.padded = (end - begin) < k;
        c.token_ids.resize(static_cast<size_t>(k), pad_id);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

std::vector<int> encode(const Vocab& v, const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(v.encode(c));
    return ids;
}

std::string decode_text(const Vocab& v, const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (v.is_special(id)) continue;
        out.push_back(v.decode(id));
    }
    return out;
}

std::string FactBank::statement(size_t i) const {
    return "[" + keys[i] + "=" + values[static_cast<size_t>(key_value[i])] + "]";
}

namespace {

constexpr const char* kLetters = "abcdefghijklmnopqrstuvwxyz";

std::string random_word(Rng& rng, int len) {
    std::string w;
    for (int i = 0; i < len; ++i) w.push_back(kLetters[rng.below(26)]);
    return w;
}

// Order-2 Markov source over letters, space and period. Each bigram context
// maps to a handful of candidate successors with random weights.
class MarkovSource {
  public:
    explicit MarkovSource(Rng rng) : rng_(rng) {
        alphabet_ = std::string(kLetters) + " .";
        const int A = static_cast<int>(alphabet_.size());
        table_.resize(static_cast<size_t>(A * A));
        Rng table_rng = rng_.fork("table");
        for (auto& cell : table_) {
            const int fanout = 3 + static_cast<int>(table_rng.below(4));
            for (int j = 0; j < fanout; ++j) {
                cell.push_back({table_rng.below(A), 0.2 + table_rng.uniform()});
            }
        }
        c1_ = 0;
        c2_ = 1;
    }

    char next() {
        const int A = static_cast<int>(alphabet_.size());
        const auto& cell = table_[static_cast<size_t>(c1_ * A + c2_)];
        double total = 0.0;
        for (const auto& e : cell) total += e.second;
        double r = rng_.uniform() * total;
        int chosen = static_cast<int>(cell.back().first);
        for (const auto& e : cell) {
            r -= e.second;
            if (r <= 0.0) {
                chosen = static_cast<int>(e.first);
                break;
            }
        }
        c1_ = c2_;
        c2_ = chosen;
        return alphabet_[static_cast<size_t>(chosen)];
    }

    std::string take(int64_t n) {
        std::string out;
        out.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

  private:
    std::string alphabet_;
    std::vector<std::vector<std::pair<int64_t, double>>> table_;
    int c1_, c2_;
    Rng rng_;
};

std::string motif_run(Rng& rng) {
    const int period = 1 + static_cast<int>(rng.below(3));
    std::string unit = random_word(rng, period);
    const int reps = 8 + static_cast<int>(rng.below(16));
    std::string out;
    for (int i = 0; i < reps; ++i) out += unit;
    return out;
}

FactBank make_fact_bank(Rng& rng, int fact_pairs, int distinct_values) {
    FactBank bank;
    std::set<std::string> used;
    while (static_cast<int>(bank.keys.size()) < fact_pairs) {
        std::string k = random_word(rng, 2);
        if (used.insert(k).second) bank.keys.push_back(k);
    }
    used.clear();
    while (static_cast<int>(bank.values.size()) < distinct_values) {
        std::string v = random_word(rng, 3);
        if (used.insert(v).second) bank.values.push_back(v);
    }
    for (size_t i = 0; i < bank.keys.size(); ++i)
        bank.key_value.push_back(static_cast<int>(rng.below(distinct_values)));
    return bank;
}

} // namespace

SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
    if (spec.chars <= 0) throw std::invalid_argument("generate_corpus: chars must be positive");
    Rng master(spec.seed);
    Rng bank_rng = master.fork("facts");
    Rng mix_rng = master.fork("mix");

    SyntheticCorpus out;
    out.facts = make_fact_bank(bank_rng, spec.fact_pairs, spec.distinct_values);

    MarkovSource markov(master.fork("markov"));
    std::string& text = out.text;
    text.reserve(static_cast<size_t>(spec.chars) + 64);
    // Seed the symbol set so the vocabulary is closed regardless of mixture.
    text += "[?=.] ";
    text += kLetters;

    while (static_cast<int64_t>(text.size()) < spec.chars) {
        const double r = mix_rng.uniform();
        if (r < spec.fact_fraction) {
            const size_t i = static_cast<size_t>(mix_rng.below(static_cast<int64_t>(out.facts.keys.size())));
            text += out.facts.statement(i);
        } else if (r < spec.fact_fraction + spec.motif_fraction) {
            text += motif_run(mix_rng);
        } else {
            text += markov.take(40 + mix_rng.below(80));
        }
    }
    text.resize(static_cast<size_t>(spec.chars));
    return out;
}

std::vector<NeedleTask> make_needle_tasks(const Vocab& vocab, const FactBank& bank,
                                          int64_t s, int count, uint64_t seed, bool planted) {
    const int n_facts = 3;
    // One fact per equal-width segment, so statements never clobber each other.
    if (s / n_facts < 12) throw std::invalid_argument("make_needle_tasks: context too short");
    Rng rng(seed);
    MarkovSource filler(rng.fork("filler"));
    std::vector<NeedleTask> tasks;
    tasks.reserve(static_cast<size_t>(count));
    const int n_keys = static_cast<int>(bank.keys.size());
    const int n_values = static_cast<int>(bank.values.size());
    for (int i = 0; i < count; ++i) {
        // Bindings are re-rolled per task: the answer is only recoverable by
        // reading the context, never from corpus-memorized key/value pairs.
        std::vector<int> fact_keys;
        std::vector<int> fact_values;
        while (static_cast<int>(fact_keys.size()) < n_facts) {
            int f = static_cast<int>(rng.below(n_keys));
            if (std::find(fact_keys.begin(), fact_keys.end(), f) == fact_keys.end()) {
                fact_keys.push_back(f);
                fact_values.push_back(static_cast<int>(rng.below(n_values)));
            }
        }
        std::string ctx = filler.take(s);
        const int64_t seg = s / n_facts;
        for (int j = 0; j < n_facts; ++j) {
            const std::string st =
                "[" + bank.keys[static_cast<size_t>(fact_keys[static_cast<size_t>(j)])] + "=" +
                bank.values[static_cast<size_t>(fact_values[static_cast<size_t>(j)])] + "]";
            const int64_t off = rng.below(seg - static_cast<int64_t>(st.size()));
            ctx.replace(static_cast<size_t>(j * seg + off), st.size(), st);
        }
        const int pick_slot = static_cast<int>(rng.below(n_facts));
        int asked_key = fact_keys[static_cast<size_t>(pick_slot)];
        int answer_value = fact_values[static_cast<size_t>(pick_slot)];
        if (!planted) {
            // Ask about a key absent from this context; the expected answer is
            // an unseen random binding, so accuracy sits at chance 1/n_values.
            do {
                asked_key = static_cast<int>(rng.below(n_keys));
            } while (std::find(fact_keys.begin(), fact_keys.end(), asked_key) != fact_keys.end());
            answer_value = static_cast<int>(rng.below(n_values));
        }
        NeedleTask t;
        t.context = encode(vocab, ctx);
        t.question = encode(vocab, "?" + bank.keys[static_cast<size_t>(asked_key)] + "=");
        t.answer = encode(vocab, bank.values[static_cast<size_t>(answer_value)] + ".");
        t.fact_index = planted ? asked_key : -1;
        tasks.push_back(std::move(t));
    }
    return tasks;
}

void write_datapoints_jsonl(const std::string& path, const std::vector<DataPoint>& dps) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& dp : dps) {
        nlohmann::json j;
        j["s"] = dp.s;
        j["o"] = dp.o;
        j["tokens"] = dp.tokens;
        out << j.dump() << "\n";
    }
}

std::vector<DataPoint> read_datapoints_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::vector<DataPoint> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        DataPoint dp;
        dp.s = j.at("s").get<int64_t>();
        dp.o = j.at("o").get<int64_t>();
        dp.tokens = j.at("tokens").get<std::vector<int>>();
        if (static_cast<int64_t>(dp.tokens.size()) != dp.s + dp.o)
            throw std::runtime_error("datapoint record: token count != s + o");
        out.push_back(std::move(dp));
    }
    return out;
}

} // namespace refrag::corpus
