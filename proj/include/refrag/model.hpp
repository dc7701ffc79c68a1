#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refrag/autograd.hpp"
#include "refrag/corpus.hpp"
#include "refrag/tensor.hpp"

namespace refrag::model {

struct EncoderConfig {
    int64_t dim = 64;
    int layers = 2;
    int heads = 4;
    int64_t max_positions = 64; // per-chunk positions restart at 0
};

struct DecoderConfig {
    int64_t dim = 128;
    int layers = 4;
    int heads = 4;
    int64_t max_positions = 4096;
};

struct ModelConfig {
    int64_t vocab = 0;
    int64_t k = 8; // chunk size
    EncoderConfig enc;
    DecoderConfig dec;
    bool question_first = true; // question tokens before chunk slots
    uint64_t init_seed = 42;
    void validate() const;
};

using ag::Param;
using ag::Tape;

struct Linear {
    Param w; // [in, out]
    Param b; // [out], absent when bias == false
    bool bias = false;

    void init(const std::string& name, int64_t in, int64_t out, Rng& rng, double std_dev,
              bool with_bias = false, bool zero = false);
    Tape::Var fwd(Tape& t, Tape::Var x);
    void collect(std::vector<Param*>& out);
};

struct RmsNorm {
    Param g;
    void init(const std::string& name, int64_t dim);
    Tape::Var fwd(Tape& t, Tape::Var x) { return t.rmsnorm(x, t.param(g)); }
    void collect(std::vector<Param*>& out) { out.push_back(&g); }
};

// Pre-norm transformer block, bias-free attention and MLP (hidden 4x, SiLU).
struct Block {
    RmsNorm ln1, ln2;
    Linear wq, wk, wv, wo, fc1, fc2;
    int heads = 4;
    bool causal = true;

    void init(const std::string& name, int64_t dim, int heads_, bool causal_, Rng& rng);
    Tape::Var fwd(Tape& t, Tape::Var x);
    void collect(std::vector<Param*>& out);
};

struct Transformer {
    Param tok_emb; // [V, dim]
    Param pos_emb; // [max_positions, dim]
    std::vector<Block> blocks;
    RmsNorm final_ln;
    int64_t dim = 0;
    int64_t max_positions = 0;

    void init(const std::string& name, int64_t vocab, int64_t dim_, int layers, int heads,
              int64_t max_positions_, bool causal, Rng& rng);
    // rows: [T, dim] embedded input (token + positional already applied)
    Tape::Var fwd(Tape& t, Tape::Var rows);
    void collect(std::vector<Param*>& out);
};

struct Projection {
    Linear fc1, fc2; // enc_dim -> dec_dim -> dec_dim; fc2 zero-initialized
    void init(int64_t enc_dim, int64_t dec_dim, Rng& rng);
    Tape::Var fwd(Tape& t, Tape::Var c);
    void collect(std::vector<Param*>& out);
};

// Encoder's fixed-size summary of one chunk, before and after projection.
struct ChunkEmbedding {
    int64_t index = 0;
    Tensor c;         // [1, enc_dim]
    Tensor projected; // [1, dec_dim]
};

struct RefragModel {
    ModelConfig cfg;
    Transformer enc;
    Projection proj;
    Transformer dec;
    Param lm_head; // [dec_dim, V], zero-initialized (uniform logits at init)

    void init(const ModelConfig& config);

    std::vector<Param*> all_params();
    std::vector<Param*> encoder_side_params(); // encoder + projection
    std::vector<Param*> decoder_side_params(); // decoder + lm head
    uint64_t decoder_fingerprint() const;
    void set_trainable(bool encoder_side, bool decoder_side);

    // --- graph-building pieces (gradients flow) ---------------------------
    // Encode one chunk to its pooled embedding c_i: [1, enc_dim].
    Tape::Var encode_chunk(Tape& t, const corpus::Chunk& chunk);
    // c_i for every chunk, projected to decoder width: [L, dec_dim].
    Tape::Var encode_and_project(Tape& t, const std::vector<corpus::Chunk>& chunks);

    // --- value-level API (scratch tape inside, no gradients kept) ---------
    std::vector<ChunkEmbedding> encode_chunks(const std::vector<corpus::Chunk>& chunks);
    Tensor project(const Tensor& c); // [1, enc_dim] -> [1, dec_dim]
};

// The decoder-ready mixed sequence: question tokens, then one slot per chunk
// (projected embedding, or the chunk's k raw tokens for expanded indices).
struct InputArrangement {
    std::vector<int> question;
    std::vector<corpus::Chunk> chunks;
    std::vector<int64_t> expansion; // sorted unique 0-based chunk indices
    int64_t k = 0;
    bool question_first = true;
    // Optional precomputed projected chunk embeddings ([1, dec_dim] each).
    std::optional<std::vector<Tensor>> cached_projected;

    int64_t num_chunks() const { return static_cast<int64_t>(chunks.size()); }
    int64_t num_expanded() const { return static_cast<int64_t>(expansion.size()); }
    int64_t assembled_length() const {
        return static_cast<int64_t>(question.size()) + (num_chunks() - num_expanded()) +
               k * num_expanded();
    }
};

// Validates the expansion set (in range, duplicate-free) and sorts it.
InputArrangement assemble_input(std::vector<int> question, std::vector<corpus::Chunk> chunks,
                                std::vector<int64_t> expansion, int64_t k,
                                bool question_first = true);

struct ForwardResult {
    Tape::Var mean_nll = -1; // scalar, excludes pad targets
    Tape::Var nll_vec = -1;  // [o]
    std::vector<double> nll; // copy of nll_vec values
    Tape::Var target_logits = -1; // [o, V]
    Tape::Var all_logits = -1;    // [1+A+o-1, V] when requested, else -1
};

// Teacher-forced NLL of `targets` given the arrangement prefix. A BOS row is
// prepended internally so the empty arrangement degenerates to plain language
// modeling. Pads in `targets` are excluded from mean_nll.
ForwardResult decoder_forward(RefragModel& m, Tape& t, const InputArrangement& arr,
                              const std::vector<int>& targets, int bos_id, int pad_id,
                              bool want_all_logits = false);

// Greedy continuation after the arrangement. Deterministic.
std::vector<int> generate(RefragModel& m, const InputArrangement& arr, int max_new_tokens,
                          int bos_id);

} // namespace refrag::model
