#pragma once

#include <string>
#include <vector>

#include "unierase/corpus.hpp"
#include "unierase/model.hpp"

namespace unierase {

// Fine-tuning unlearning baselines: a forget-side objective plus an optional
// retain-side regularizer, combined as beta·L_forget + gamma·L_retain and
// minimized with plain gradient descent. Answers are scored token-by-token
// given the question (no end marker).

struct LossSpec {
    enum class Forget { kGA, kIDK, kDPO, kNPO, kME };
    enum class Retain { kGD, kKL, kAP, kNone };

    Forget forget = Forget::kGA;
    Retain retain = Retain::kGD;
    double beta = 1.0;      // forget term weight
    double gamma = 1.0;     // retain term weight
    double npo_beta = 0.1;  // preference temperature (DPO, NPO, AP)

    // True when the objective compares against a frozen copy of the starting
    // model (DPO/NPO ratios, KL-to-reference).
    bool needs_ref() const;

    std::string name() const;             // e.g. "ga+gd", "idk+ap", "me"
    static LossSpec parse(const std::string& text);
};

struct FineTuneConfig {
    int epochs = 5;
    double lr = 2e-4;
    int batch_size = 8;
    int retain_sample_cap = 200;
    uint64_t seed = 0;
};

struct StepLoss {
    double combined = 0.0;
    double forget_term = 0.0;
    double retain_term = 0.0;
};

struct FineTuneReport {
    std::string method;
    std::vector<double> epoch_losses;         // combined objective, epoch means
    std::vector<double> forget_epoch_losses;
    std::vector<double> retain_epoch_losses;
    int steps = 0;
    double wall_seconds = 0.0;
};

// Builds the combined objective for one batch on the caller's tape/graph.
// `ref` may be null unless spec.needs_ref(). `draw_seed` fixes the idk phrase
// draws so the same batch always produces the same objective. When `parts` is
// given it receives the evaluated term values.
Var batch_objective(GradTape& tape, ModelGraph& graph, const ModelParams& m,
                    const ModelParams* ref, const std::vector<QAPair>& forget_batch,
                    const std::vector<QAPair>& retain_batch,
                    const std::vector<std::string>& idk, const LossSpec& spec,
                    uint64_t draw_seed, StepLoss* parts = nullptr);

// Gradient-descent unlearning over split.forget with split.retain ∪
// split.general (capped) as the retain pool. Mutates m.
FineTuneReport finetune_unlearn(ModelParams& m, const KnowledgeSplit& split,
                                const LossSpec& spec, const FineTuneConfig& cfg);

// Line-delimited JSON: method, weights, loss curves, wall time.
void save_run_manifest(const FineTuneReport& report, const std::string& path);

}  // namespace unierase
