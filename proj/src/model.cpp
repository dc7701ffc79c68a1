#include "refrag/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace refrag::model {

namespace {
constexpr double kInitStd = 0.02;

void fill_gaussian(Tensor& t, Rng& rng, double std_dev) {
    for (auto& v : t.data) v = rng.gaussian() * std_dev;
}
} // namespace

void ModelConfig::validate() const {
    if (vocab < 3) throw std::invalid_argument("config: vocab must cover symbols plus specials");
    if (k < 1) throw std::invalid_argument("config: k must be >= 1");
    if (enc.dim % enc.heads != 0 || dec.dim % dec.heads != 0)
        throw std::invalid_argument("config: head count must divide width");
    if (enc.max_positions < k)
        throw std::invalid_argument("config: encoder max_positions below chunk size");
}

void Linear::init(const std::string& name, int64_t in, int64_t out, Rng& rng, double std_dev,
                  bool with_bias, bool zero) {
    bias = with_bias;
    w.init(name + ".w", {in, out});
    if (!zero) fill_gaussian(w.value, rng, std_dev);
    if (bias) b.init(name + ".b", {out});
}

Tape::Var Linear::fwd(Tape& t, Tape::Var x) {
    Tape::Var y = t.matmul(x, t.param(w));
    if (bias) y = t.add_bias(y, t.param(b));
    return y;
}

void Linear::collect(std::vector<Param*>& out) {
    out.push_back(&w);
    if (bias) out.push_back(&b);
}

void RmsNorm::init(const std::string& name, int64_t dim) {
    g.init(name + ".g", {dim});
    g.value.fill(1.0);
}

void Block::init(const std::string& name, int64_t dim, int heads_, bool causal_, Rng& rng) {
    heads = heads_;
    causal = causal_;
    ln1.init(name + ".ln1", dim);
    ln2.init(name + ".ln2", dim);
    wq.init(name + ".wq", dim, dim, rng, kInitStd);
    wk.init(name + ".wk", dim, dim, rng, kInitStd);
    wv.init(name + ".wv", dim, dim, rng, kInitStd);
    wo.init(name + ".wo", dim, dim, rng, kInitStd);
    fc1.init(name + ".fc1", dim, 4 * dim, rng, kInitStd);
    fc2.init(name + ".fc2", 4 * dim, dim, rng, kInitStd);
}

Tape::Var Block::fwd(Tape& t, Tape::Var x) {
    Tape::Var h = ln1.fwd(t, x);
    Tape::Var att = t.attention(wq.fwd(t, h), wk.fwd(t, h), wv.fwd(t, h), heads, causal);
    x = t.add(x, wo.fwd(t, att));
    Tape::Var h2 = ln2.fwd(t, x);
    return t.add(x, fc2.fwd(t, t.silu(fc1.fwd(t, h2))));
}

void Block::collect(std::vector<Param*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
    fc1.collect(out);
    fc2.collect(out);
}

void Transformer::init(const std::string& name, int64_t vocab, int64_t dim_, int layers, int heads,
                       int64_t max_positions_, bool causal, Rng& rng) {
    dim = dim_;
    max_positions = max_positions_;
    tok_emb.init(name + ".tok_emb", {vocab, dim});
    fill_gaussian(tok_emb.value, rng, kInitStd);
    pos_emb.init(name + ".pos_emb", {max_positions, dim});
    fill_gaussian(pos_emb.value, rng, kInitStd);
    blocks.resize(static_cast<size_t>(layers));
    for (int i = 0; i < layers; ++i)
        blocks[static_cast<size_t>(i)].init(name + ".block" + std::to_string(i), dim, heads, causal, rng);
    final_ln.init(name + ".final_ln", dim);
}

Tape::Var Transformer::fwd(Tape& t, Tape::Var rows) {
    Tape::Var x = rows;
    for (auto& b : blocks) x = b.fwd(t, x);
    return final_ln.fwd(t, x);
}

void Transformer::collect(std::vector<Param*>& out) {
    out.push_back(&tok_emb);
    out.push_back(&pos_emb);
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
}

void Projection::init(int64_t enc_dim, int64_t dec_dim, Rng& rng) {
    // Hidden width equals the output width; the last layer starts at zero so
    // compressed slots act as neutral inputs until trained.
    fc1.init("proj.fc1", enc_dim, dec_dim, rng, kInitStd, /*with_bias=*/true);
    fc2.init("proj.fc2", dec_dim, dec_dim, rng, 0.0, /*with_bias=*/true, /*zero=*/true);
}

Tape::Var Projection::fwd(Tape& t, Tape::Var c) {
    return fc2.fwd(t, t.silu(fc1.fwd(t, c)));
}

void Projection::collect(std::vector<Param*>& out) {
    fc1.collect(out);
    fc2.collect(out);
}

void RefragModel::init(const ModelConfig& config) {
    config.validate();
    cfg = config;
    Rng rng(cfg.init_seed);
    Rng enc_rng = rng.fork("enc");
    Rng dec_rng = rng.fork("dec");
    Rng proj_rng = rng.fork("proj");
    enc.init("enc", cfg.vocab, cfg.enc.dim, cfg.enc.layers, cfg.enc.heads, cfg.enc.max_positions,
             /*causal=*/false, enc_rng);
    dec.init("dec", cfg.vocab, cfg.dec.dim, cfg.dec.layers, cfg.dec.heads, cfg.dec.max_positions,
             /*causal=*/true, dec_rng);
    proj.init(cfg.enc.dim, cfg.dec.dim, proj_rng);
    lm_head.init("lm_head", {cfg.dec.dim, cfg.vocab}); // zero: uniform logits at init
}

std::vector<Param*> RefragModel::all_params() {
    std::vector<Param*> out = encoder_side_params();
    for (Param* p : decoder_side_params()) out.push_back(p);
    return out;
}

std::vector<Param*> RefragModel::encoder_side_params() {
    std::vector<Param*> out;
    enc.collect(out);
    proj.collect(out);
    return out;
}

std::vector<Param*> RefragModel::decoder_side_params() {
    std::vector<Param*> out;
    dec.collect(out);
    out.push_back(&lm_head);
    return out;
}

uint64_t RefragModel::decoder_fingerprint() const {
    auto* self = const_cast<RefragModel*>(this);
    std::vector<const Tensor*> ts;
    for (Param* p : self->decoder_side_params()) ts.push_back(&p->value);
    return fingerprint(ts);
}

void RefragModel::set_trainable(bool encoder_side, bool decoder_side) {
    for (Param* p : encoder_side_params()) p->trainable = encoder_side;
    for (Param* p : decoder_side_params()) p->trainable = decoder_side;
}

Tape::Var RefragModel::encode_chunk(Tape& t, const corpus::Chunk& chunk) {
    if (static_cast<int64_t>(chunk.token_ids.size()) != cfg.k)
        throw std::invalid_argument("encode_chunk: chunk length != k");
    std::vector<int> pos(chunk.token_ids.size());
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i); // restart per chunk
    Tape::Var x = t.add(t.embed(enc.tok_emb, chunk.token_ids), t.embed(enc.pos_emb, pos));
    return t.mean_rows(enc.fwd(t, x));
}

Tape::Var RefragModel::encode_and_project(Tape& t, const std::vector<corpus::Chunk>& chunks) {
    if (chunks.empty()) throw std::invalid_argument("encode_and_project: no chunks");
    std::vector<std::pair<Tape::Var, int64_t>> picks;
    picks.reserve(chunks.size());
    for (const auto& ch : chunks) picks.emplace_back(proj.fwd(t, encode_chunk(t, ch)), 0);
    return t.compose_rows(picks);
}

std::vector<ChunkEmbedding> RefragModel::encode_chunks(const std::vector<corpus::Chunk>& chunks) {
    std::vector<ChunkEmbedding> out;
    out.reserve(chunks.size());
    for (const auto& ch : chunks) {
        Tape t;
        Tape::Var c = encode_chunk(t, ch);
        Tape::Var p = proj.fwd(t, c);
        ChunkEmbedding e;
        e.index = ch.index;
        e.c = t.val(c);
        e.projected = t.val(p);
        out.push_back(std::move(e));
    }
    return out;
}

Tensor RefragModel::project(const Tensor& c) {
    if (c.cols() != cfg.enc.dim || c.rows() != 1)
        throw std::invalid_argument("project: expected [1, enc_dim] input");
    Tape t;
    return t.val(proj.fwd(t, t.leaf(c)));
}

InputArrangement assemble_input(std::vector<int> question, std::vector<corpus::Chunk> chunks,
                                std::vector<int64_t> expansion, int64_t k, bool question_first) {
    const int64_t L = static_cast<int64_t>(chunks.size());
    std::sort(expansion.begin(), expansion.end());
    for (size_t i = 0; i < expansion.size(); ++i) {
        if (expansion[i] < 0 || expansion[i] >= L)
            throw std::invalid_argument("assemble_input: expansion index out of range");
        if (i > 0 && expansion[i] == expansion[i - 1])
            throw std::invalid_argument("assemble_input: duplicate expansion index");
    }
    for (int64_t i = 0; i < L; ++i) {
        if (chunks[static_cast<size_t>(i)].index != i)
            throw std::invalid_argument("assemble_input: chunks must arrive in order");
        if (static_cast<int64_t>(chunks[static_cast<size_t>(i)].token_ids.size()) != k)
            throw std::invalid_argument("assemble_input: chunk length != k");
    }
    InputArrangement arr;
    arr.question = std::move(question);
    arr.chunks = std::move(chunks);
    arr.expansion = std::move(expansion);
    arr.k = k;
    arr.question_first = question_first;
    return arr;
}

namespace {

// Builds the embedded decoder input rows: BOS + arrangement + teacher-forced
// targets (all but the last). Returns the Var and the total row count.
Tape::Var build_decoder_rows(RefragModel& m, Tape& t, const InputArrangement& arr,
                             const std::vector<int>& targets, int bos_id) {
    const int64_t A = arr.assembled_length();
    const int64_t o = static_cast<int64_t>(targets.size());
    const int64_t T = 1 + A + std::max<int64_t>(o - 1, 0);
    if (T > m.cfg.dec.max_positions)
        throw std::invalid_argument("decoder_forward: sequence exceeds max_positions");

    // Token rows gathered in one shot: BOS, question, expanded chunk tokens,
    // teacher-forced targets.
    std::vector<int> tok_ids;
    tok_ids.push_back(bos_id);
    for (int q : arr.question) tok_ids.push_back(q);
    std::vector<int64_t> chunk_tok_offset(arr.chunks.size(), -1);
    for (int64_t e : arr.expansion) {
        chunk_tok_offset[static_cast<size_t>(e)] = static_cast<int64_t>(tok_ids.size());
        for (int id : arr.chunks[static_cast<size_t>(e)].token_ids) tok_ids.push_back(id);
    }
    const int64_t target_tok_offset = static_cast<int64_t>(tok_ids.size());
    for (int64_t i = 0; i + 1 < o; ++i) tok_ids.push_back(targets[static_cast<size_t>(i)]);
    Tape::Var toks = t.gather_rows(t.param(m.dec.tok_emb), tok_ids);

    // Chunk slots: cached projected embeddings or the live encoder/projection.
    Tape::Var slots = -1;
    const bool expanded_all = arr.num_expanded() == arr.num_chunks();
    if (!arr.chunks.empty() && !expanded_all) {
        if (arr.cached_projected) {
            if (arr.cached_projected->size() != arr.chunks.size())
                throw std::invalid_argument("decoder_forward: cached embedding count mismatch");
            std::vector<std::pair<Tape::Var, int64_t>> picks;
            for (const auto& e : *arr.cached_projected) {
                if (e.cols() != m.cfg.dec.dim)
                    throw std::invalid_argument("decoder_forward: cached embedding width mismatch");
                picks.emplace_back(t.leaf(e), 0);
            }
            slots = t.compose_rows(picks);
        } else {
            slots = m.encode_and_project(t, arr.chunks);
        }
    }

    std::vector<std::pair<Tape::Var, int64_t>> rows;
    rows.reserve(static_cast<size_t>(T));
    rows.emplace_back(toks, 0); // BOS
    auto push_question = [&] {
        for (size_t i = 0; i < arr.question.size(); ++i)
            rows.emplace_back(toks, 1 + static_cast<int64_t>(i));
    };
    auto push_slots = [&] {
        for (int64_t i = 0; i < arr.num_chunks(); ++i) {
            const int64_t off = chunk_tok_offset[static_cast<size_t>(i)];
            if (off >= 0) {
                for (int64_t j = 0; j < arr.k; ++j) rows.emplace_back(toks, off + j);
            } else {
                rows.emplace_back(slots, i);
            }
        }
    };
    if (arr.question_first) {
        push_question();
        push_slots();
    } else {
        push_slots();
        push_question();
    }
    for (int64_t i = 0; i + 1 < o; ++i) rows.emplace_back(toks, target_tok_offset + i);

    Tape::Var x = t.compose_rows(rows);
    std::vector<int> pos(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i) pos[static_cast<size_t>(i)] = static_cast<int>(i);
    return t.add(x, t.embed(m.dec.pos_emb, pos));
}

} // namespace

ForwardResult decoder_forward(RefragModel& m, Tape& t, const InputArrangement& arr,
                              const std::vector<int>& targets, int bos_id, int pad_id,
                              bool want_all_logits) {
    if (targets.empty()) throw std::invalid_argument("decoder_forward: no targets");
    const int64_t A = arr.assembled_length();
    const int64_t o = static_cast<int64_t>(targets.size());

    Tape::Var x = build_decoder_rows(m, t, arr, targets, bos_id);
    Tape::Var h = m.dec.fwd(t, x);

    ForwardResult res;
    if (want_all_logits) {
        res.all_logits = t.matmul(h, t.param(m.lm_head));
        res.target_logits = t.rows(res.all_logits, A, A + o);
    } else {
        // Prediction of target j reads the hidden state at row A + j (BOS at
        // row 0 shifts the arrangement to rows 1..A).
        res.target_logits = t.matmul(t.rows(h, A, A + o), t.param(m.lm_head));
    }
    res.nll_vec = t.xent(res.target_logits, targets);
    res.nll = t.val(res.nll_vec).data;

    // Pads are excluded from the loss.
    int64_t live = 0;
    Tensor w({o});
    for (int64_t i = 0; i < o; ++i) {
        const bool pad = targets[static_cast<size_t>(i)] == pad_id;
        w.data[static_cast<size_t>(i)] = pad ? 0.0 : 1.0;
        live += pad ? 0 : 1;
    }
    if (live == 0) throw std::invalid_argument("decoder_forward: all targets are pads");
    res.mean_nll = t.scale(t.sum_all(t.mul(res.nll_vec, t.leaf(std::move(w)))),
                           1.0 / static_cast<double>(live));
    return res;
}

std::vector<int> generate(RefragModel& m, const InputArrangement& arr, int max_new_tokens,
                          int bos_id) {
    std::vector<int> out;
    if (max_new_tokens <= 0) return out;
    // Chunk embeddings are computed once and cached across decode steps.
    InputArrangement work = arr;
    if (!work.cached_projected && !work.chunks.empty() &&
        work.num_expanded() != work.num_chunks()) {
        std::vector<Tensor> cache;
        for (const auto& e : m.encode_chunks(work.chunks)) cache.push_back(e.projected);
        work.cached_projected = std::move(cache);
    }
    for (int i = 0; i < max_new_tokens; ++i) {
        Tape t;
        // Teacher-force the tokens generated so far plus a dummy final target;
        // the logits row for the dummy position is the next-token distribution.
        std::vector<int> teacher = out;
        teacher.push_back(bos_id);
        ForwardResult r = decoder_forward(m, t, work, teacher, bos_id, /*pad_id=*/-1);
        const Tensor& logits = t.val(r.target_logits);
        const int64_t last = logits.rows() - 1;
        int best = 0;
        double best_v = logits.at(last, 0);
        for (int64_t v = 1; v < logits.cols(); ++v) {
            if (logits.at(last, v) > best_v) {
                best_v = logits.at(last, v);
                best = static_cast<int>(v);
            }
        }
        out.push_back(best);
    }
    return out;
}

} // namespace refrag::model
