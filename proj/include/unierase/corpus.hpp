#pragma once

// Deterministic synthetic knowledge: a fictitious-author QA universe (the
// injectable corpus), a disjoint general-knowledge universe (invented
// capitals + arithmetic), ignorance phrases, chat templating, and answer
// perturbation/paraphrase packs for truth-ratio evaluation.
//
// The tokenizer is word-level over a FIXED universe (template words, value
// pools, name pools, idk phrases, digits), so every corpus seed shares one
// vocabulary and checkpoints stay portable across seeds. Reserved ids:
//   0 <eot>   end of text
//   1 <begin> sequence start
//   2 <sys>   system marker      (chat template)
//   3 <user>  user marker        (chat template)
//   4 <asst>  assistant marker   (chat template)
// The unlearning token is NOT part of the tokenizer; it is added to a model's
// vocabulary at runtime and never produced from raw text.

#include <string>
#include <vector>

#include <unordered_map>

#include "unierase/common.hpp"

namespace unierase {

struct TokenSeq {
    std::vector<int> ids;
    bool templated = false;

    int size() const { return static_cast<int>(ids.size()); }
    bool empty() const { return ids.empty(); }
};

class Tokenizer {
public:
    static constexpr int kEot = 0;
    static constexpr int kBegin = 1;
    static constexpr int kSys = 2;
    static constexpr int kUser = 3;
    static constexpr int kAsst = 4;
    static constexpr int kReservedCount = 5;

    Tokenizer();

    int add_word(const std::string& w);  // idempotent, returns id
    void add_text(const std::string& text);

    int vocab_size() const { return static_cast<int>(words_.size()); }
    bool has(const std::string& w) const;
    int id(const std::string& w) const;  // throws InputError when unknown
    const std::string& word(int id) const;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    // index into words_ by string; linear probing over a simple hash map
    // would be overkill — std::unordered_map is fine here.
    std::unordered_map<std::string, int> index_;
};

struct QAPair {
    std::string question;
    std::string answer;
    int subject_begin = 0;  // token index range [begin,end) inside question
    int subject_end = 0;
    int entity_id = 0;
    std::string attribute;  // template key, e.g. "birth_year"
    std::string value;      // the fact's attribute value (always one token)
    std::string split_tag;  // "author" | "general" | later "forget"/"retain"
};

struct Corpus {
    std::vector<QAPair> author_pairs;
    std::vector<QAPair> general_pairs;
    std::vector<std::string> idk;
    uint64_t seed = 0;
    int n_entities = 0;
    int qa_per_entity = 0;

    uint64_t content_hash() const;
};

struct KnowledgeSplit {
    std::vector<QAPair> forget;   // D_f
    std::vector<QAPair> retain;   // D_r
    std::vector<QAPair> general;  // D_g
    std::vector<std::string> idk; // D_idk
};

struct TruthRatioPack {
    std::string paraphrased;             // ã
    std::vector<std::string> perturbed;  // â, ≥ 3 where the pool allows
};

// The shared fixed-universe tokenizer (reserved ids + every generatable word).
const Tokenizer& universe_tokenizer();

// general_count < 0 picks the default: half the author-pair count.
Corpus generate_synthetic(int n_entities, int qa_per_entity, uint64_t seed,
                          int general_count = -1);

// Entity-disjoint forget/retain partition of the author pairs; general pairs
// and idk phrases ride along. Rejects fractions that leave either side empty
// or starve the 4x general-to-forget ratio.
KnowledgeSplit split(const Corpus& corpus, double forget_fraction, uint64_t seed);

// Single-pair forget set for precise unlearning. The chosen pair's sibling
// pairs (same entity) are dropped from both sides to keep entity-disjointness.
KnowledgeSplit make_precise_split(const Corpus& corpus, uint64_t seed);

// Partition a split's forget set into `rounds` entity-disjoint round batches.
std::vector<std::vector<QAPair>> split_rounds(const KnowledgeSplit& s, int rounds);

// Chat template: [<begin> <sys> <user> q <asst>]; invertible.
TokenSeq apply_template(const TokenSeq& q);
TokenSeq strip_template(const TokenSeq& t);

// Perturbed + paraphrased answers for a templated pair. Throws InputError on
// pairs whose attribute is not from the generator's template set.
TruthRatioPack truth_ratio_pack(const QAPair& pair, uint64_t seed);

// Fresh forget-style pairs from the same templates but entities disjoint from
// `corpus` (auxiliary data for precise-mode token training).
std::vector<QAPair> auxiliary_pairs(const Corpus& corpus, int count, uint64_t seed);

// JSONL corpus file + plain-text idk file.
void save_corpus(const Corpus& corpus, const std::string& jsonl_path,
                 const std::string& idk_path);
Corpus load_corpus(const std::string& jsonl_path, const std::string& idk_path);

}  // namespace unierase
