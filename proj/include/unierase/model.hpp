#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "unierase/corpus.hpp"
#include "unierase/numerics.hpp"
#include "unierase/tape.hpp"

namespace unierase {

// Decoder-only transformer, pre-norm blocks:
//   a^i = Attn(ln1(h^{i-1}))
//   k   = gelu(W_up · ln2(h^{i-1} + a^i))
//   m^i = W_dp · k
//   h^i = h^{i-1} + a^i + m^i
//   logits = U · h^L        (no final norm)
// All activations are stored row-major with one row per position, so the
// column-vector products above appear as X · Wᵀ in code.

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int d_ff = 256;
    int n_heads = 4;
    int context = 64;
};

struct LayerParams {
    Matrix wq, wk, wv, wo;  // d x d
    Matrix w_up;            // d_ff x d
    Matrix w_dp;            // d x d_ff
    Matrix g1, g2;          // 1 x d layernorm gains
};

struct ModelParams {
    ModelConfig cfg;
    std::vector<std::string> vocab;  // index == token id
    Matrix embed;    // n x d
    Matrix unembed;  // n x d
    Matrix pos;      // context x d, fixed sinusoidal table (not trained)
    std::vector<LayerParams> layers;
    int unl_id = -1;  // -1 until an unlearning token is registered
    bool unl_shared = false;

    int vocab_size() const { return static_cast<int>(vocab.size()); }
    long param_count() const;  // trainable scalars (embed+unembed+layers)
};

// Random init: small gaussian embeddings, fan-scaled projections, unit gains.
ModelParams init_model(const ModelConfig& cfg, const Tokenizer& tok, uint64_t seed);

// Hash of all trainable weights; rows of embed/unembed belonging to the
// unlearning token can be excluded to check everything-else isolation.
uint64_t weights_hash(const ModelParams& m, bool skip_unl_rows = false);

struct HiddenTrace {
    std::vector<Matrix> h;  // h[0] = embeddings+positions, then one per layer
    std::vector<Matrix> a;  // attention outputs per layer
    std::vector<Matrix> m;  // MLP outputs per layer
    std::vector<Matrix> k;  // MLP pre-down-projection activations, T x d_ff
};

// Plain forward; returns logits (T x n). Trace optional.
Matrix forward(const ModelParams& m, const TokenSeq& seq, HiddenTrace* trace = nullptr);

// Greedy continuation (prompt excluded); stops before emitting <eot>.
// Ties break toward the lowest token id. Window-crops to the context size.
TokenSeq generate(const ModelParams& m, const TokenSeq& prompt, int max_len);

// Sum over target tokens of log p(token | prefix ⊕ target_<t). Empty → 0.
double logprob(const ModelParams& m, const TokenSeq& target, const TokenSeq& prefix);

// The k activation of `layer` at `pos` as a 1 x d_ff matrix.
Matrix mlp_key(const ModelParams& m, const TokenSeq& seq, int layer, int pos);

// Appends one row to embed and unembed. share=true records that the two rows
// are one logical parameter (trainers then apply one summed update to both).
int extend_vocab(ModelParams& m, const std::string& word, const Matrix& init_row, bool share);
int extend_vocab(ModelParams& m, const std::string& word, uint64_t seed, bool share);

// Word ↔ id over a model's own vocabulary (which may contain tokens the
// corpus tokenizer never produces, e.g. the unlearning token).
class TokenCodec {
  public:
    explicit TokenCodec(const ModelParams& m);
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
    int id(const std::string& word) const;

  private:
    const std::vector<std::string>* vocab_;
    std::unordered_map<std::string, int> index_;
};

// -----------------------------------------------------------------------
// Tape-backed forward for training.
// -----------------------------------------------------------------------

// One supervised item: full token sequence plus (position, target) pairs,
// where logits row p scores ids[p+1].
struct TrainItem {
    std::vector<int> ids;
    std::vector<int> positions;  // local row indices within this sequence
    std::vector<int> targets;
    int target_count() const { return static_cast<int>(targets.size()); }
};

// Loss over every completion token: ids = context ⊕ completion.
TrainItem make_lm_item(const std::vector<int>& context, const std::vector<int>& completion);

class ModelGraph {
  public:
    enum class Watch { kNone, kAll, kUnlRows };

    ModelGraph(GradTape& tape, const ModelParams& m, Watch watch);

    // Stacked forward over several sequences; fills one span per sequence.
    Var logits(const std::vector<std::vector<int>>& seqs, RowSpans& spans);

    // Resumes the block stack at `first_layer` from an externally built
    // hidden state h^{first_layer} (stacked rows), returning final logits.
    Var logits_from_hidden(int first_layer, Var hidden, const RowSpans& spans);

    // Stacks all items, returns (sum over items of -log p(targets)).
    Var batch_nll(const std::vector<TrainItem>& items);

    // Same stacking, but hands back logits + global positions/targets.
    Var batch_logits(const std::vector<TrainItem>& items, std::vector<int>& positions,
                     std::vector<int>& targets, RowSpans& spans);

    // W += delta for every watched parameter with an entry. Shared unlearning
    // rows receive their single delta in both embed and unembed.
    void apply_update(ModelParams& m,
                      const std::unordered_map<ParamId, Matrix>& deltas) const;

    // W -= lr · grad (plain gradient descent over apply_update).
    void sgd_step(ModelParams& m, const std::unordered_map<ParamId, Matrix>& grads,
                  double lr) const;

    const std::vector<ParamId>& watched() const { return watched_; }

    // Per-layer intermediate vars recorded by the most recent logits() call.
    Var trace_h0() const { return trace_h0_; }
    const std::vector<Var>& trace_h() const { return trace_h_; }
    const std::vector<Var>& trace_a() const { return trace_a_; }
    const std::vector<Var>& trace_m() const { return trace_m_; }
    const std::vector<Var>& trace_k() const { return trace_k_; }

  private:
    struct Slot {
        ParamId pid;
        int layer;  // -1 for embed/unembed/unl rows
        int field;  // see model.cpp
    };
    Var embed_table();
    Var unembed_table();
    Var block(int layer, Var h, const RowSpans& spans);

    GradTape& tape_;
    const ModelParams& m_;
    Watch watch_;
    std::vector<Slot> slots_;
    std::vector<ParamId> watched_;
    std::unordered_map<int, Var> cache_;  // field-keyed vars (tables, weights)
    Var trace_h0_;
    std::vector<Var> trace_h_, trace_a_, trace_m_, trace_k_;
};

// Supervised next-token training over raw + templated QA forms plus the
// standalone idk phrases; Adam, mean-per-token loss. Returns the new params.
ModelParams inject_knowledge(const ModelParams& m, const Corpus& corpus, int epochs,
                             double lr, std::vector<double>* epoch_losses = nullptr);

// Fraction of pairs whose greedy answer (raw question prompt) matches exactly.
double exact_match_rate(const ModelParams& m, const std::vector<QAPair>& pairs);

// -----------------------------------------------------------------------
// Checkpoints: text header + vocab + little-endian float32 payload with a
// trailing content checksum; tampered files are rejected on load.
// -----------------------------------------------------------------------

void save_checkpoint(const ModelParams& m, const std::string& path,
                     uint64_t corpus_hash = 0);
ModelParams load_checkpoint(const std::string& path, uint64_t* corpus_hash = nullptr);

}  // namespace unierase
