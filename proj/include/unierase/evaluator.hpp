#pragma once

#include <string>
#include <vector>

#include "unierase/corpus.hpp"
#include "unierase/model.hpp"

namespace unierase {

// Six-metric evaluation protocol. Per QA pair: ROUGE-L recall, mean reference
// token probability, truth ratio (mapped per split role), token entropy of the
// greedy output, similarity of pre/post outputs under the frozen pre-model
// encoder, and a value-containment entailment proxy. Split-level scores:
// forget side aggregates the forget-mapped metrics arithmetically (FE), retain
// side aggregates the retain-mapped metrics harmonically (RE).

enum class TrMode { kForget, kRetain };

// LCS(ref,hyp) / |ref|.
double rouge_l_recall(const std::vector<int>& ref, const std::vector<int>& hyp);

// Arithmetic mean over answer tokens of p(a_t | q ⊕ a_<t).
double probability(const ModelParams& m, const std::vector<int>& q,
                   const std::vector<int>& a);

// Mean over perturbed statements of p(perturbed|q)/p(paraphrased|q), sequence
// probabilities geometric-mean normalized by length. Paraphrase probability
// underflow clamps to the smallest positive double (flagged).
double truth_ratio_raw(const ModelParams& m, const std::vector<int>& q,
                       const TruthRatioPack& pack, bool* flagged = nullptr);

double tr_forget_map(double tr);  // 1 − min(TR, 1/TR)
double tr_retain_map(double tr);  // max(0, 1 − TR)

// Raw ratio + mode-dependent mapping.
double truth_ratio(const ModelParams& m, const std::vector<int>& q,
                   const TruthRatioPack& pack, TrMode mode, bool* flagged = nullptr);

// −Σ f(t)·log f(t) / log(length) over unique output tokens; length < 2 is
// undefined and reported as 1 with the flag set.
double token_entropy(const std::vector<int>& out, bool* flagged = nullptr);

// max(0, cos) of mean-pooled final hidden states under the frozen encoder.
double similarity(const ModelParams& encoder, const std::vector<int>& a,
                  const std::vector<int>& b);

// 1 iff hyp contains ref's attribute value tokens contiguously.
bool entailment_proxy(const std::vector<int>& value_tokens, const std::vector<int>& hyp);

struct GenerationRecord {
    std::string question, reference, value;
    std::vector<int> output_ids;      // greedy output of the evaluated model
    std::vector<int> pre_output_ids;  // greedy output of the pre-unlearning model
    std::vector<double> ref_token_probs;
    double rouge = 0.0, prob = 0.0, tr_raw = 1.0, entropy = 0.0, sim = 0.0, es = 0.0;
    bool entropy_flagged = false, tr_flagged = false;
    bool exact = false;  // attribute value containment
    bool idk = false;    // idk-phrase (or unlearning-token) response
};

struct MetricReport {
    // Split means, truth ratio already mapped for the split role.
    double rouge = 0.0, prob = 0.0, tr_mapped = 0.0, entropy = 0.0, sim = 0.0, es = 0.0;
    double fe = 0.0;  // arithmetic mean of the six (forget mapping)
    double re = 0.0;  // harmonic mean of the six (retain mapping)
    double accuracy = 0.0, idk_rate = 0.0, mean_len = 0.0;
    bool zero_flagged = false;  // some harmonic input was 0
    int count = 0;
};

// Split-level aggregation; mode picks the metric mapping.
MetricReport aggregate(const std::vector<GenerationRecord>& records, TrMode mode);

struct BehaviorStats {
    double accuracy = 0.0, idk_rate = 0.0, mean_len = 0.0;
};

BehaviorStats behavior_stats(const ModelParams& m, const std::vector<QAPair>& pairs,
                             const std::vector<std::string>& idk, int max_len = 24);

struct EvalResult {
    MetricReport forget, retain, general;
    std::vector<GenerationRecord> forget_records, retain_records, general_records;
    // Summary row ([0,1] fractions; len in tokens).
    double fe = 0.0, re_retain = 0.0, re_general = 0.0, acc = 0.0, idk = 0.0,
           len = 0.0, ra = 0.0, balance = 0.0;
};

// Scores `post` on all three split roles; `pre` supplies the similarity
// encoder and reference outputs. `seed` fixes the truth-ratio statements.
EvalResult evaluate(const ModelParams& pre, const ModelParams& post,
                    const KnowledgeSplit& split, uint64_t seed);

struct SummaryRow {
    std::string method;
    double fe = 0.0, re_retain = 0.0, re_general = 0.0, acc = 0.0, idk = 0.0,
           len = 0.0, ra = 0.0, balance = 0.0;
};

SummaryRow summary_row(const std::string& method, const EvalResult& result);

// One JSON line per record plus a trailing summary object ([0,1] fractions).
void save_eval_records(const EvalResult& result, const std::string& method,
                       const std::string& path);

// CSV table, one row per method; score columns as percentages, Len in tokens.
// Header: method,FE,RE_retain,RE_general,Acc,Idk,Len,RA,Balance
void save_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path);

}  // namespace unierase
