#pragma once

#include <string>
#include <vector>

#include "unierase/model.hpp"

namespace unierase {

// The learnable unlearning token: one embedding row e_u and one unembedding
// row ê_u, optionally tied into a single parameter. Training touches nothing
// else in the model.

struct UnlearnToken {
    int id = -1;
    Matrix e_u;     // 1 x d
    Matrix e_hat;   // 1 x d (equal to e_u when shared)
    bool shared = true;
};

struct TokenTrainConfig {
    int s1_epochs = 5;
    int s2_epochs = 3;
    int s3_epochs = 2;
    double s1_lr = 1e-3;
    double s2_lr = 1e-4;
    double s3_lr = 1e-4;
    double batch_fraction = 0.1;    // batch = max(1, ceil(fraction * |D_f|))
    double alpha = 1.0;             // down-projection perturbation scale
    double perturb_variance = 0.0;  // gaussian spread around the mean shift
    std::vector<int> edit_layers = {1};
    uint64_t seed = 0;
};

// Adds the token to the model (random row, stdev 0.02) and returns its record.
UnlearnToken register_unlearn_token(ModelParams& m, bool shared, uint64_t seed);

struct StageResult {
    std::vector<double> epoch_losses;  // mean per-sequence NLL per epoch
};

// Stage 1: learn e_u/ê_u so q⊕[UNL] continues into a⊕[UNL], a drawn from the
// idk phrases. Plain gradient descent on the token rows only.
StageResult train_stage1(ModelParams& m, UnlearnToken& tok,
                         const std::vector<QAPair>& d_f,
                         const std::vector<std::string>& d_idk,
                         const TokenTrainConfig& cfg);

// Stage 2: same objective over a 50/50 mix of raw and chat-templated queries.
StageResult train_stage2_template(ModelParams& m, UnlearnToken& tok,
                                  const std::vector<QAPair>& d_f,
                                  const std::vector<std::string>& d_idk,
                                  const TokenTrainConfig& cfg);

// Stage 3: stage-2 batches scored against a perturbed copy of the model
// (W_dp on the edit layers shifted by alpha * mean|W_dp|, plus optional
// gaussian spread); the original weights are untouched.
StageResult train_stage3_perturb(ModelParams& m, UnlearnToken& tok,
                                 const std::vector<QAPair>& d_f,
                                 const std::vector<std::string>& d_idk,
                                 const TokenTrainConfig& cfg);

// All three stages in order; results indexed by stage.
std::vector<StageResult> train_unlearn_token(ModelParams& m, UnlearnToken& tok,
                                             const std::vector<QAPair>& d_f,
                                             const std::vector<std::string>& d_idk,
                                             const TokenTrainConfig& cfg);

// Fraction of held-out questions whose greedy continuation contains the token.
double leakage_probe(const ModelParams& m, const UnlearnToken& tok,
                     const std::vector<QAPair>& heldout);

// Token artifact: id, vectors, shared flag, stage losses.
void save_token(const UnlearnToken& tok, const std::vector<StageResult>& stages,
                const std::string& path);
UnlearnToken load_token(const std::string& path, std::vector<StageResult>* stages = nullptr);

}  // namespace unierase
