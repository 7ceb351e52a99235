#include "unierase/evaluator.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

namespace unierase {

namespace {

using nlohmann::json;

std::vector<double> token_probs(const ModelParams& m, const std::vector<int>& q,
                                const std::vector<int>& a) {
    TokenSeq seq;
    seq.ids = q;
    seq.ids.insert(seq.ids.end(), a.begin(), a.end());
    Matrix lg = forward(m, seq);
    std::vector<double> probs;
    for (size_t t = 0; t < a.size(); ++t) {
        int row = static_cast<int>(q.size() + t) - 1;
        double mx = lg(row, 0);
        for (int j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(row, j));
        double z = 0.0;
        for (int j = 0; j < lg.cols(); ++j) z += std::exp(lg(row, j) - mx);
        probs.push_back(std::exp(lg(row, a[t]) - mx) / z);
    }
    return probs;
}

double norm_seq_prob(const ModelParams& m, const std::vector<int>& q,
                     const std::vector<int>& s) {
    UE_CHECK(!s.empty(), InputError, "norm_seq_prob: empty sequence");
    TokenSeq prefix, target;
    prefix.ids = q;
    target.ids = s;
    double lp = logprob(m, target, prefix);
    return std::exp(lp / static_cast<double>(s.size()));
}

bool contains_subseq(const std::vector<int>& hay, const std::vector<int>& needle) {
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (size_t i = 0; i + needle.size() <= hay.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), hay.begin() + i)) return true;
    return false;
}

bool is_idk_output(const std::vector<int>& out, const std::vector<std::vector<int>>& phrases,
                   int unl_id) {
    if (unl_id >= 0 && std::find(out.begin(), out.end(), unl_id) != out.end()) return true;
    for (const auto& p : phrases)
        if (contains_subseq(out, p)) return true;
    return false;
}

double harmonic(const double* vals, int n, bool* zero_flagged) {
    double inv = 0.0;
    for (int i = 0; i < n; ++i) {
        if (vals[i] <= 0.0) {
            if (zero_flagged) *zero_flagged = true;
            return 0.0;
        }
        inv += 1.0 / vals[i];
    }
    return static_cast<double>(n) / inv;
}

}  // namespace

double rouge_l_recall(const std::vector<int>& ref, const std::vector<int>& hyp) {
    UE_CHECK(!ref.empty(), InputError, "rouge_l_recall: empty reference");
    size_t n = ref.size(), m = hyp.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j)
            cur[j] = ref[i - 1] == hyp[j - 1] ? prev[j - 1] + 1
                                              : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(n);
}

double probability(const ModelParams& m, const std::vector<int>& q,
                   const std::vector<int>& a) {
    UE_CHECK(!a.empty(), InputError, "probability: empty answer");
    std::vector<double> probs = token_probs(m, q, a);
    double s = 0.0;
    for (double p : probs) s += p;
    return s / static_cast<double>(probs.size());
}

double truth_ratio_raw(const ModelParams& m, const std::vector<int>& q,
                       const TruthRatioPack& pack, bool* flagged) {
    UE_CHECK(!pack.perturbed.empty(), InputError, "truth_ratio: no perturbations");
    TokenCodec codec(m);
    double para = norm_seq_prob(m, q, codec.encode(pack.paraphrased));
    if (para < DBL_MIN) {
        para = DBL_MIN;
        if (flagged) *flagged = true;
    }
    double acc = 0.0;
    for (const std::string& s : pack.perturbed)
        acc += norm_seq_prob(m, q, codec.encode(s)) / para;
    return acc / static_cast<double>(pack.perturbed.size());
}

double tr_forget_map(double tr) { return 1.0 - std::min(tr, 1.0 / tr); }

double tr_retain_map(double tr) { return std::max(0.0, 1.0 - tr); }

double truth_ratio(const ModelParams& m, const std::vector<int>& q,
                   const TruthRatioPack& pack, TrMode mode, bool* flagged) {
    double tr = truth_ratio_raw(m, q, pack, flagged);
    return mode == TrMode::kForget ? tr_forget_map(tr) : tr_retain_map(tr);
}

double token_entropy(const std::vector<int>& out, bool* flagged) {
    if (out.size() < 2) {
        if (flagged) *flagged = true;
        return 1.0;
    }
    std::map<int, int> counts;
    for (int t : out) ++counts[t];
    double n = static_cast<double>(out.size());
    double h = 0.0;
    for (const auto& [tok, c] : counts) {
        (void)tok;
        double f = c / n;
        h -= f * std::log(f);
    }
    return h / std::log(n);
}

double similarity(const ModelParams& encoder, const std::vector<int>& a,
                  const std::vector<int>& b) {
    UE_CHECK(!a.empty() && !b.empty(), InputError, "similarity: empty output");
    auto pool = [&](const std::vector<int>& ids) {
        TokenSeq s;
        s.ids = ids;
        HiddenTrace tr;
        forward(encoder, s, &tr);
        const Matrix& h = tr.h.back();
        Matrix v(1, h.cols());
        for (int r = 0; r < h.rows(); ++r)
            for (int c = 0; c < h.cols(); ++c) v(0, c) += h(r, c);
        v *= 1.0 / h.rows();
        return v;
    };
    Matrix va = pool(a), vb = pool(b);
    double na = frobenius_norm(va), nb = frobenius_norm(vb);
    if (na < 1e-300 || nb < 1e-300) return 0.0;
    return std::max(0.0, dot_all(va, vb) / (na * nb));
}

bool entailment_proxy(const std::vector<int>& value_tokens, const std::vector<int>& hyp) {
    UE_CHECK(!value_tokens.empty(), InputError, "entailment_proxy: empty value");
    return contains_subseq(hyp, value_tokens);
}

MetricReport aggregate(const std::vector<GenerationRecord>& records, TrMode mode) {
    UE_CHECK(!records.empty(), InputError, "aggregate: no records");
    MetricReport rep;
    rep.count = static_cast<int>(records.size());
    double len = 0.0;
    for (const GenerationRecord& r : records) {
        rep.rouge += r.rouge;
        rep.prob += r.prob;
        rep.tr_mapped += mode == TrMode::kForget ? tr_forget_map(r.tr_raw)
                                                 : tr_retain_map(r.tr_raw);
        rep.entropy += r.entropy;
        rep.sim += r.sim;
        rep.es += r.es;
        rep.accuracy += r.exact ? 1.0 : 0.0;
        rep.idk_rate += r.idk ? 1.0 : 0.0;
        len += static_cast<double>(r.output_ids.size());
    }
    double n = static_cast<double>(rep.count);
    rep.rouge /= n;
    rep.prob /= n;
    rep.tr_mapped /= n;
    rep.entropy /= n;
    rep.sim /= n;
    rep.es /= n;
    rep.accuracy /= n;
    rep.idk_rate /= n;
    rep.mean_len = len / n;
    double vals[6];
    if (mode == TrMode::kForget) {
        vals[0] = 1.0 - rep.rouge;
        vals[1] = 1.0 - rep.prob;
        vals[2] = rep.tr_mapped;
        vals[3] = rep.entropy;
        vals[4] = 1.0 - rep.sim;
        vals[5] = 1.0 - rep.es;
    } else {
        vals[0] = rep.rouge;
        vals[1] = rep.prob;
        vals[2] = rep.tr_mapped;
        vals[3] = rep.entropy;
        vals[4] = rep.sim;
        vals[5] = rep.es;
    }
    double fe = 0.0;
    for (double v : vals) fe += v;
    rep.fe = fe / 6.0;
    rep.re = harmonic(vals, 6, &rep.zero_flagged);
    return rep;
}

BehaviorStats behavior_stats(const ModelParams& m, const std::vector<QAPair>& pairs,
                             const std::vector<std::string>& idk, int max_len) {
    UE_CHECK(!pairs.empty(), InputError, "behavior_stats: no pairs");
    TokenCodec codec(m);
    std::vector<std::vector<int>> phrases;
    for (const std::string& p : idk) phrases.push_back(codec.encode(p));
    BehaviorStats st;
    for (const QAPair& p : pairs) {
        TokenSeq prompt;
        prompt.ids = codec.encode(p.question);
        std::vector<int> out = generate(m, prompt, max_len).ids;
        if (entailment_proxy(codec.encode(p.value), out)) st.accuracy += 1.0;
        if (is_idk_output(out, phrases, m.unl_id)) st.idk_rate += 1.0;
        st.mean_len += static_cast<double>(out.size());
    }
    double n = static_cast<double>(pairs.size());
    st.accuracy /= n;
    st.idk_rate /= n;
    st.mean_len /= n;
    return st;
}

EvalResult evaluate(const ModelParams& pre, const ModelParams& post,
                    const KnowledgeSplit& split, uint64_t seed) {
    TokenCodec codec(post);
    std::vector<std::vector<int>> phrases;
    for (const std::string& p : split.idk) phrases.push_back(codec.encode(p));

    auto score_role = [&](const std::vector<QAPair>& pairs) {
        std::vector<GenerationRecord> out;
        for (const QAPair& pair : pairs) {
            GenerationRecord rec;
            rec.question = pair.question;
            rec.reference = pair.answer;
            rec.value = pair.value;
            std::vector<int> q = codec.encode(pair.question);
            std::vector<int> a = codec.encode(pair.answer);
            TokenSeq prompt;
            prompt.ids = q;
            rec.output_ids = generate(post, prompt, 24).ids;
            rec.pre_output_ids = generate(pre, prompt, 24).ids;
            rec.ref_token_probs = token_probs(post, q, a);
            double s = 0.0;
            for (double p : rec.ref_token_probs) s += p;
            rec.prob = s / static_cast<double>(rec.ref_token_probs.size());
            rec.rouge = rouge_l_recall(a, rec.output_ids);
            Fnv1a h;
            h.update(pair.question);
            h.update(seed);
            TruthRatioPack pack = truth_ratio_pack(pair, h.digest());
            rec.tr_raw = truth_ratio_raw(post, q, pack, &rec.tr_flagged);
            rec.entropy = token_entropy(rec.output_ids, &rec.entropy_flagged);
            rec.sim = rec.output_ids.empty() || rec.pre_output_ids.empty()
                          ? 0.0
                          : similarity(pre, rec.pre_output_ids, rec.output_ids);
            rec.es = entailment_proxy(codec.encode(pair.value), rec.output_ids) ? 1.0 : 0.0;
            rec.exact = rec.es > 0.5;
            rec.idk = is_idk_output(rec.output_ids, phrases, post.unl_id);
            out.push_back(std::move(rec));
        }
        return out;
    };

    EvalResult res;
    res.forget_records = score_role(split.forget);
    res.retain_records = score_role(split.retain);
    res.general_records = score_role(split.general);
    res.forget = aggregate(res.forget_records, TrMode::kForget);
    res.retain = aggregate(res.retain_records, TrMode::kRetain);
    res.general = aggregate(res.general_records, TrMode::kRetain);
    res.fe = res.forget.fe;
    res.re_retain = res.retain.re;
    res.re_general = res.general.re;
    res.acc = res.general.accuracy;
    res.idk = res.general.idk_rate;
    double tokens = 0.0;
    int count = 0;
    for (const auto* recs : {&res.forget_records, &res.retain_records, &res.general_records}) {
        for (const GenerationRecord& r : *recs) tokens += static_cast<double>(r.output_ids.size());
        count += static_cast<int>(recs->size());
    }
    res.len = count > 0 ? tokens / count : 0.0;
    res.ra = (res.re_retain + res.re_general + res.acc) / 3.0;
    res.balance = (res.fe + res.ra) / 2.0;
    return res;
}

SummaryRow summary_row(const std::string& method, const EvalResult& r) {
    return {method, r.fe, r.re_retain, r.re_general, r.acc, r.idk, r.len, r.ra, r.balance};
}

void save_eval_records(const EvalResult& result, const std::string& method,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_eval_records: cannot write " + path);
    auto dump_role = [&](const std::vector<GenerationRecord>& recs, const char* role) {
        for (const GenerationRecord& r : recs) {
            json line{{"record", "qa"},
                      {"role", role},
                      {"question", r.question},
                      {"reference", r.reference},
                      {"output_ids", r.output_ids},
                      {"pre_output_ids", r.pre_output_ids},
                      {"ref_token_probs", r.ref_token_probs},
                      {"rouge", r.rouge},
                      {"prob", r.prob},
                      {"tr_raw", r.tr_raw},
                      {"entropy", r.entropy},
                      {"sim", r.sim},
                      {"es", r.es},
                      {"exact", r.exact},
                      {"idk", r.idk}};
            out << line.dump() << '\n';
        }
    };
    dump_role(result.forget_records, "forget");
    dump_role(result.retain_records, "retain");
    dump_role(result.general_records, "general");
    json summary{{"record", "summary"},
                 {"method", method},
                 {"FE", result.fe},
                 {"RE_retain", result.re_retain},
                 {"RE_general", result.re_general},
                 {"Acc", result.acc},
                 {"Idk", result.idk},
                 {"Len", result.len},
                 {"RA", result.ra},
                 {"Balance", result.balance}};
    out << summary.dump() << '\n';
}

void save_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_summary_csv: cannot write " + path);
    out << "method,FE,RE_retain,RE_general,Acc,Idk,Len,RA,Balance\n";
    char buf[256];
    for (const SummaryRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f",
                      r.method.c_str(), 100.0 * r.fe, 100.0 * r.re_retain,
                      100.0 * r.re_general, 100.0 * r.acc, 100.0 * r.idk, r.len,
                      100.0 * r.ra, 100.0 * r.balance);
        out << buf << '\n';
    }
}

}  // namespace unierase
