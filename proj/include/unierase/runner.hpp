#pragma once

#include <string>
#include <vector>

#include "unierase/baselines.hpp"
#include "unierase/corpus.hpp"
#include "unierase/editor.hpp"
#include "unierase/evaluator.hpp"
#include "unierase/model.hpp"
#include "unierase/token_trainer.hpp"

namespace unierase {

// Scenario orchestration: corpus → injected base → unlearn (unierase or a
// fine-tuning baseline) → evaluation rows, with all artifacts persisted under
// one output directory.

struct ScenarioConfig {
    std::string scenario = "batch";   // batch | sequential | precise
    std::string method = "unierase";  // unierase | <forget>+<retain> baseline
    int n_entities = 200;
    int qa_per_entity = 20;
    int general_count = -1;  // <0: corpus default
    uint64_t seed = 0;
    double forget_fraction = 0.10;  // entity fraction (batch/sequential)
    int rounds = 5;                 // sequential only
    int inject_epochs = 30;
    double inject_lr = 1e-3;
    int aux_pairs = 19;       // precise: extra token-training pairs
    bool shared_token = true;  // tie the [UNL] embed/unembed rows
    TokenTrainConfig token;
    EditConfig edit;
    FineTuneConfig finetune;
    std::string out_dir = "runs/out";
    std::string base_checkpoint;  // reuse an injected base instead of training

    void validate() const;
};

// Key-value text config: one `key = value` per line, `#` comments. Unknown
// keys are rejected. CLI --set overrides reuse the same keys.
ScenarioConfig load_scenario_config(const std::string& path);
void apply_override(ScenarioConfig& cfg, const std::string& key, const std::string& value);

struct StageTime {
    std::string stage;
    double seconds = 0.0;
};

struct RunArtifacts {
    uint64_t corpus_hash = 0;
    std::vector<std::string> checkpoints;  // saved checkpoint paths
    std::vector<SummaryRow> rows;          // "base" first, then per-round rows
    std::vector<std::string> row_checkpoint_hex;  // weights hash per row
    std::vector<StageTime> wall;
    std::vector<double> chain_rates;   // unierase: per-round edit chain rates
    double round1_chain_final = -1.0;  // sequential: round-1 pairs at the end
    bool failed = false;
    std::string failure;
};

RunArtifacts run_batch(const ScenarioConfig& cfg);
RunArtifacts run_sequential(const ScenarioConfig& cfg);
RunArtifacts run_precise(const ScenarioConfig& cfg);
RunArtifacts run_scenario(const ScenarioConfig& cfg);  // dispatch on cfg.scenario

// JSON summary: scenario, method, corpus hash, rows with checkpoint hashes,
// wall-time ledger, chain rates, failure marker.
void save_run_summary(const RunArtifacts& art, const ScenarioConfig& cfg,
                      const std::string& path);

// Merges run summaries into one CSV + JSON comparison table. Summaries whose
// corpus hashes differ are refused; duplicate method rows keep the first.
void write_report(const std::vector<std::string>& summary_paths,
                  const std::string& csv_path, const std::string& json_path);

}  // namespace unierase
