#pragma once

#include <string>
#include <vector>

#include "unierase/model.hpp"
#include "unierase/token_trainer.hpp"

namespace unierase {

// Locate-then-edit: per forget pair compute a lookup key k* (mean MLP
// activation at the subject's last token over prefixed contexts) and a target
// value v* (optimized so substituting it makes the unlearning token the next
// prediction), stack them into K/V matrices, and solve for a down-projection
// increment under one of the solver variants.

struct EditConfig {
    std::vector<int> layers = {1};  // ascending; >1 entry = spread edit
    int prefix_count = 8;           // contexts per key; first one is empty
    int v_steps = 25;
    double v_rate = 0.5;
    double kl_weight = 0.0625;
    int retain_sample_cap = 200;    // max retained key columns
    std::string solver = "nullspace";  // "plain" | "nullspace"
    double success_floor = 0.0;     // below this chain rate → failure flag
    uint64_t seed = 0;
    Matrix k_p;  // previously unlearned keys (d_ff x m_p), may be empty
};

struct KVMatrices {
    Matrix k_f, v_f;  // d_ff x m_f, d x m_f
    Matrix k_r, v_r;  // d_ff x m_r, d x m_r
    Matrix k_p;       // d_ff x m_p (may be 0 x 0)
};

// Mean of mlp_key over n_prefixes contexts (first empty, rest random word
// prefixes of length 2–10), evaluated at the subject's last token. 1 x d_ff.
Matrix compute_key(const ModelParams& m, const QAPair& pair, int layer,
                   int n_prefixes, uint64_t seed);

// v* (1 x d): minimizes mean −log P(target | prefixed q with m_layer at the
// subject position replaced by v) plus kl_weight · KL(next-token prediction on
// the plain question with substitution ‖ without). Same-subject pairs from
// retain_sample contribute extra KL contexts when present.
Matrix compute_value(const ModelParams& m, const QAPair& pair, int target_id,
                     int layer, int n_prefixes,
                     const std::vector<QAPair>& retain_sample, const EditConfig& cfg,
                     std::vector<double>* objective_curve = nullptr);

// Keys/values for the forget pairs + protected retain keys at one layer.
// Retain values are the current mapping W_dp·K_r (protection, not change).
KVMatrices assemble_kv(const ModelParams& m, const std::vector<QAPair>& forget,
                       const std::vector<QAPair>& retain_sample, int target_id,
                       int layer, const EditConfig& cfg);

// Δ = (V_f − W·K_f)·K_fᵀ·(K_r·K_rᵀ + K_f·K_fᵀ)⁻¹, ridge fallback when the
// gram matrix is singular.
Matrix solve_plain(const Matrix& w, const KVMatrices& kv);

// Null-space variant: Δ = (V_f − W·K_f)·K_fᵀ·P·(K_p·K_pᵀ·P + K_f·K_fᵀ·P + I)⁻¹
// followed by a final ·P so retained keys are exactly invariant.
// P must be the null-space projector of K_r.
Matrix solve_nullspace(const Matrix& w, const KVMatrices& kv, const Matrix& p);

// W_dp^layer += increment. Returns the edited-parameter fraction of the model.
double apply_edit(ModelParams& m, int layer, const Matrix& increment);

struct EditReport {
    std::vector<char> success;       // per forget pair, chain success
    double success_rate = 0.0;
    bool below_floor = false;
    std::vector<double> increment_norms;  // per edited layer
    std::vector<int> layers;
    std::string solver;
    Matrix forget_keys;  // d_ff x m_f at the (last) edit layer, for K_p chaining
};

// First greedy token is the unlearning token and the following tokens spell a
// complete idk phrase (boundary: next [UNL], <eot>, or generation end).
bool chain_success(const ModelParams& m, const UnlearnToken& tok, const QAPair& pair,
                   const std::vector<std::string>& d_idk);

// Spread edit across cfg.layers: the deepest layer's residual (v* − W·k*) is
// split into equal per-layer fractions; keys are recomputed after every
// applied increment.
EditReport multi_layer_spread(ModelParams& m, const UnlearnToken& tok,
                              const KnowledgeSplit& split, const EditConfig& cfg);

// Full unlearning edit pipeline on a token-trained model (single layer or
// spread, chosen by cfg.layers). Mutates m, returns per-pair outcomes.
EditReport unierase(ModelParams& m, const UnlearnToken& tok, const KnowledgeSplit& split,
                    const EditConfig& cfg);

// Line-delimited JSON manifest: solver, layers, per-pair success, norms.
void save_edit_manifest(const EditReport& report, const std::vector<QAPair>& forget,
                        const std::string& path);

}  // namespace unierase
