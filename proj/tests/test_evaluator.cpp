#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unierase/corpus.hpp"
#include "unierase/evaluator.hpp"
#include "unierase/model.hpp"
#include "unierase/numerics.hpp"

using namespace unierase;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.n_heads = 2;
    cfg.context = 64;
    return cfg;
}

ModelParams zeroed(const ModelParams& src) {
    ModelParams m = src;
    auto wipe = [](Matrix& w) {
        for (int r = 0; r < w.rows(); ++r)
            for (int c = 0; c < w.cols(); ++c) w(r, c) = 0.0;
    };
    wipe(m.embed);
    wipe(m.unembed);
    wipe(m.pos);
    for (auto& l : m.layers) {
        wipe(l.wq);
        wipe(l.wk);
        wipe(l.wv);
        wipe(l.wo);
        wipe(l.w_up);
        wipe(l.w_dp);
        for (int c = 0; c < l.g1.cols(); ++c) l.g1(0, c) = 1.0;
        for (int c = 0; c < l.g2.cols(); ++c) l.g2(0, c) = 1.0;
    }
    return m;
}

// a metrically-perfect record under the given mapping mode
GenerationRecord ideal_record(TrMode mode) {
    GenerationRecord r;
    if (mode == TrMode::kForget) {
        r.rouge = 0.0;
        r.prob = 0.0;
        r.tr_raw = 0.0;
        r.entropy = 1.0;
        r.sim = 0.0;
        r.es = 0.0;
    } else {
        r.rouge = 1.0;
        r.prob = 1.0;
        r.tr_raw = 0.0;
        r.entropy = 1.0;
        r.sim = 1.0;
        r.es = 1.0;
    }
    r.output_ids = {5, 6, 7};
    return r;
}

}  // namespace

TEST_SUITE("evaluator") {

TEST_CASE("rouge recall counts the longest common subsequence over the reference") {
    std::vector<int> ref{1, 2, 3};
    CHECK(rouge_l_recall(ref, ref) == 1.0);
    CHECK(rouge_l_recall(ref, {7, 8, 9}) == 0.0);
    CHECK(rouge_l_recall(ref, {1, 9, 3}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(rouge_l_recall({1, 2, 3, 4}, {1, 2}) == doctest::Approx(0.5).epsilon(1e-12));
    // subsequence, not substring: gaps in the hypothesis still count
    CHECK(rouge_l_recall({1, 2, 3}, {1, 99, 2, 99, 3}) == 1.0);
    CHECK(rouge_l_recall(ref, {}) == 0.0);
    CHECK_THROWS_AS(rouge_l_recall({}, ref), InputError);
}

TEST_CASE("probability is the arithmetic mean of reference token probabilities") {
    ModelParams m = init_model(tiny_cfg(), universe_tokenizer(), 5);
    ModelParams zm = zeroed(m);
    std::vector<int> q{5, 6, 7}, a{8, 9};
    double v = static_cast<double>(zm.vocab_size());
    CHECK(probability(zm, q, a) == doctest::Approx(1.0 / v).epsilon(1e-12));

    // random model vs a by-hand softmax accumulation
    TokenSeq seq;
    seq.ids = q;
    seq.ids.insert(seq.ids.end(), a.begin(), a.end());
    Matrix lg = forward(m, seq);
    double acc = 0.0;
    for (size_t t = 0; t < a.size(); ++t) {
        int row = static_cast<int>(q.size() + t) - 1;
        double mx = lg(row, 0);
        for (int j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(row, j));
        double z = 0.0;
        for (int j = 0; j < lg.cols(); ++j) z += std::exp(lg(row, j) - mx);
        acc += std::exp(lg(row, a[t]) - mx) / z;
    }
    CHECK(probability(m, q, a) == doctest::Approx(acc / 2.0).epsilon(1e-12));
    CHECK_THROWS_AS(probability(m, q, {}), InputError);
}

TEST_CASE("truth ratio maps pin the indifference point and directions") {
    CHECK(tr_forget_map(1.0) == 0.0);
    CHECK(tr_retain_map(1.0) == 0.0);
    CHECK(tr_forget_map(0.5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(tr_retain_map(0.5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(tr_forget_map(2.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(tr_retain_map(2.0) == 0.0);
    CHECK(tr_retain_map(0.25) == doctest::Approx(0.75).epsilon(1e-12));
    // the forget map cannot tell a ratio from its reciprocal
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        double t = std::exp(rng.next_gauss());
        CHECK(tr_forget_map(t) == doctest::Approx(tr_forget_map(1.0 / t)).epsilon(1e-9));
        CHECK(tr_forget_map(t) >= 0.0);
        CHECK(tr_forget_map(t) <= 1.0);
        CHECK(tr_retain_map(t) >= 0.0);
        CHECK(tr_retain_map(t) <= 1.0);
    }
}

TEST_CASE("uniform predictions make every statement equally credible") {
    ModelParams zm = zeroed(init_model(tiny_cfg(), universe_tokenizer(), 5));
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    TokenCodec codec(zm);
    const QAPair& pair = corpus.author_pairs[0];
    TruthRatioPack pack = truth_ratio_pack(pair, 9);
    std::vector<int> q = codec.encode(pair.question);
    bool flagged = false;
    double tr = truth_ratio_raw(zm, q, pack, &flagged);
    // normalized probabilities depend only on length under uniform logits, and
    // perturbations share the paraphrase phrasing, hence equal lengths
    CHECK(tr == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(!flagged);
    CHECK(truth_ratio(zm, q, pack, TrMode::kForget) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(truth_ratio(zm, q, pack, TrMode::kRetain) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK_THROWS_AS(truth_ratio_raw(zm, q, TruthRatioPack{}, nullptr), InputError);
}

TEST_CASE("paraphrase probability underflow clamps and flags") {
    ModelParams m = init_model(tiny_cfg(), universe_tokenizer(), 5);
    m.unembed *= 2e4;  // absurdly confident logits force zero-probability strings
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    TokenCodec codec(m);
    bool found_flag = false;
    for (const QAPair& pair : corpus.author_pairs) {
        TruthRatioPack pack = truth_ratio_pack(pair, 9);
        bool flagged = false;
        double tr = truth_ratio_raw(m, codec.encode(pair.question), pack, &flagged);
        CHECK(std::isfinite(tr));
        found_flag = found_flag || flagged;
    }
    CHECK(found_flag);
}

TEST_CASE("token entropy measures output diversity on a log-length scale") {
    bool flagged = false;
    CHECK(token_entropy({3, 4, 5, 6}, &flagged) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(!flagged);
    CHECK(token_entropy({3, 3, 3, 3}, &flagged) == 0.0);
    CHECK(token_entropy({3, 3, 4, 4}, &flagged) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(!flagged);
    CHECK(token_entropy({3}, &flagged) == 1.0);
    CHECK(flagged);
    flagged = false;
    CHECK(token_entropy({}, &flagged) == 1.0);
    CHECK(flagged);
}

TEST_CASE("similarity is the truncated cosine of mean-pooled encoder states") {
    ModelParams enc = init_model(tiny_cfg(), universe_tokenizer(), 5);
    std::vector<int> a{5, 6, 7, 8}, b{9, 10, 11};
    CHECK(similarity(enc, a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(similarity(enc, a, b) == doctest::Approx(similarity(enc, b, a)).epsilon(1e-12));

    // replicate by hand: mean-pool the final hidden states, cosine, clamp
    auto pool = [&](const std::vector<int>& ids) {
        TokenSeq s;
        s.ids = ids;
        HiddenTrace tr;
        forward(enc, s, &tr);
        const Matrix& h = tr.h.back();
        std::vector<double> v(h.cols(), 0.0);
        for (int r = 0; r < h.rows(); ++r)
            for (int c = 0; c < h.cols(); ++c) v[c] += h(r, c) / h.rows();
        return v;
    };
    auto va = pool(a), vb = pool(b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < va.size(); ++i) {
        dot += va[i] * vb[i];
        na += va[i] * va[i];
        nb += vb[i] * vb[i];
    }
    double expect = std::max(0.0, dot / std::sqrt(na * nb));
    CHECK(similarity(enc, a, b) == doctest::Approx(expect).epsilon(1e-12));

    // degenerate encoder states have no direction to compare
    CHECK(similarity(zeroed(enc), a, b) == 0.0);
    CHECK_THROWS_AS(similarity(enc, {}, b), InputError);

    Rng rng(7);
    for (int i = 0; i < 30; ++i) {
        std::vector<int> x{static_cast<int>(rng.next_below(40) + 5),
                           static_cast<int>(rng.next_below(40) + 5)};
        std::vector<int> y{static_cast<int>(rng.next_below(40) + 5)};
        double s = similarity(enc, x, y);
        CHECK(s >= 0.0);
        CHECK(s <= 1.0 + 1e-12);
    }
}

TEST_CASE("entailment proxy detects the attribute value as a contiguous run") {
    CHECK(entailment_proxy({8, 9}, {5, 8, 9, 7}));
    CHECK(entailment_proxy({8}, {8}));
    CHECK(!entailment_proxy({8, 9}, {8, 7, 9}));  // broken run
    CHECK(!entailment_proxy({8, 9}, {9, 8}));
    CHECK(!entailment_proxy({8, 9}, {8}));
    CHECK(!entailment_proxy({8, 9}, {}));
    CHECK_THROWS_AS(entailment_proxy({}, {5}), InputError);

    // corpus-level: the paraphrased restatement still states the value
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    ModelParams m = init_model(tiny_cfg(), universe_tokenizer(), 5);
    TokenCodec codec(m);
    const QAPair& pair = corpus.author_pairs[2];
    TruthRatioPack pack = truth_ratio_pack(pair, 4);
    CHECK(entailment_proxy(codec.encode(pair.value), codec.encode(pack.paraphrased)));
    CHECK(entailment_proxy(codec.encode(pair.value), codec.encode(pair.answer)));
    CHECK(!entailment_proxy(codec.encode(pair.value), codec.encode(corpus.idk[0])));
}

TEST_CASE("aggregate reaches the ideal scores on metrically perfect records") {
    std::vector<GenerationRecord> forget_recs(3, ideal_record(TrMode::kForget));
    MetricReport f = aggregate(forget_recs, TrMode::kForget);
    CHECK(f.fe == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(!f.zero_flagged);
    CHECK(f.count == 3);

    std::vector<GenerationRecord> retain_recs(4, ideal_record(TrMode::kRetain));
    MetricReport r = aggregate(retain_recs, TrMode::kRetain);
    CHECK(r.re == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.mean_len == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("harmonic aggregation follows the textbook arithmetic") {
    GenerationRecord rec = ideal_record(TrMode::kRetain);
    rec.rouge = 0.5;  // mapped vector (0.5, 1, 1, 1, 1, 1)
    MetricReport rep = aggregate({rec}, TrMode::kRetain);
    CHECK(rep.re == doctest::Approx(6.0 / 7.0).epsilon(1e-12));

    rec.prob = 0.0;  // one zero collapses the harmonic mean
    rep = aggregate({rec}, TrMode::kRetain);
    CHECK(rep.re == 0.0);
    CHECK(rep.zero_flagged);
}

TEST_CASE("aggregate is permutation invariant and harmonically bounded") {
    Rng rng(11);
    std::vector<GenerationRecord> recs;
    for (int i = 0; i < 40; ++i) {
        GenerationRecord r;
        r.rouge = rng.next_double();
        r.prob = rng.next_double();
        r.tr_raw = std::exp(rng.next_gauss());
        r.entropy = rng.next_double();
        r.sim = rng.next_double();
        r.es = rng.next_below(2) ? 1.0 : 0.0;
        r.exact = rng.next_below(2) != 0;
        r.idk = rng.next_below(2) != 0;
        r.output_ids.assign(1 + rng.next_below(9), 5);
        recs.push_back(r);
    }
    MetricReport a = aggregate(recs, TrMode::kRetain);
    std::vector<GenerationRecord> shuffled = recs;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[17]);
    MetricReport b = aggregate(shuffled, TrMode::kRetain);
    CHECK(a.re == doctest::Approx(b.re).epsilon(1e-12));
    CHECK(a.fe == doctest::Approx(b.fe).epsilon(1e-12));
    CHECK(a.accuracy == doctest::Approx(b.accuracy).epsilon(1e-12));
    CHECK(a.idk_rate == doctest::Approx(b.idk_rate).epsilon(1e-12));
    CHECK(a.mean_len == doctest::Approx(b.mean_len).epsilon(1e-12));

    // harmonic ≤ arithmetic on the same mapped vector, and both within [0,1]
    double vals[6] = {a.rouge, a.prob, a.tr_mapped, a.entropy, a.sim, a.es};
    double arith = std::accumulate(vals, vals + 6, 0.0) / 6.0;
    CHECK(a.re <= arith + 1e-12);
    for (double v : vals) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(a.re >= 0.0);
    CHECK(a.re <= 1.0);
    CHECK(a.fe >= 0.0);
    CHECK(a.fe <= 1.0);

    CHECK_THROWS_AS(aggregate({}, TrMode::kRetain), InputError);
}

TEST_CASE("behavior stats on a blank model count empty answers as failures") {
    ModelParams zm = zeroed(init_model(tiny_cfg(), universe_tokenizer(), 5));
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    std::vector<QAPair> pairs(corpus.author_pairs.begin(), corpus.author_pairs.begin() + 4);
    BehaviorStats st = behavior_stats(zm, pairs, corpus.idk);
    CHECK(st.accuracy == 0.0);
    CHECK(st.idk_rate == 0.0);
    CHECK(st.mean_len == 0.0);
    CHECK_THROWS_AS(behavior_stats(zm, {}, corpus.idk), InputError);
}

TEST_CASE("full evaluation wires the summary out of its split reports") {
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    KnowledgeSplit sp = split(corpus, 0.34, 3);
    ModelParams pre = init_model(tiny_cfg(), universe_tokenizer(), 21);
    EvalResult res = evaluate(pre, pre, sp, 77);

    CHECK(res.forget_records.size() == sp.forget.size());
    CHECK(res.retain_records.size() == sp.retain.size());
    CHECK(res.general_records.size() == sp.general.size());
    CHECK(res.fe == res.forget.fe);
    CHECK(res.re_retain == res.retain.re);
    CHECK(res.re_general == res.general.re);
    CHECK(res.acc == res.general.accuracy);
    CHECK(res.idk == res.general.idk_rate);
    CHECK(res.ra ==
          doctest::Approx((res.re_retain + res.re_general + res.acc) / 3.0).epsilon(1e-12));
    CHECK(res.balance == doctest::Approx((res.fe + res.ra) / 2.0).epsilon(1e-12));

    // same model on both sides: outputs coincide, similarity is 1 when defined
    for (const GenerationRecord& r : res.retain_records) {
        CHECK(r.output_ids == r.pre_output_ids);
        if (!r.output_ids.empty()) CHECK(r.sim == doctest::Approx(1.0).epsilon(1e-9));
    }

    double tokens = 0.0;
    int n = 0;
    for (const auto* recs : {&res.forget_records, &res.retain_records, &res.general_records}) {
        for (const GenerationRecord& r : *recs) tokens += r.output_ids.size();
        n += static_cast<int>(recs->size());
    }
    CHECK(res.len == doctest::Approx(tokens / n).epsilon(1e-12));

    // bit-stable across identical calls
    EvalResult res2 = evaluate(pre, pre, sp, 77);
    CHECK(res2.fe == res.fe);
    CHECK(res2.balance == res.balance);
    CHECK(res2.len == res.len);
}

TEST_CASE("evaluation records round trip through the jsonl report") {
    Corpus corpus = generate_synthetic(3, 3, 11, 12);
    KnowledgeSplit sp = split(corpus, 0.34, 3);
    ModelParams pre = init_model(tiny_cfg(), universe_tokenizer(), 21);
    EvalResult res = evaluate(pre, pre, sp, 77);
    std::string path = "/tmp/ue_test_eval.jsonl";
    save_eval_records(res, "base", path);

    std::ifstream in(path);
    std::vector<nlohmann::json> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(nlohmann::json::parse(line));
    size_t total =
        sp.forget.size() + sp.retain.size() + sp.general.size() + 1;  // + summary
    REQUIRE(lines.size() == total);
    CHECK(lines[0]["record"] == "qa");
    CHECK(lines[0]["role"] == "forget");
    CHECK(lines[0]["question"] == res.forget_records[0].question);
    CHECK(lines[0]["rouge"] == doctest::Approx(res.forget_records[0].rouge));
    CHECK(lines.back()["record"] == "summary");
    CHECK(lines.back()["method"] == "base");
    CHECK(lines.back()["FE"] == doctest::Approx(res.fe));
    CHECK(lines.back()["Balance"] == doctest::Approx(res.balance));
    std::remove(path.c_str());
}

TEST_CASE("summary csv prints percentages in the published layout") {
    SummaryRow row;
    row.method = "unierase";
    row.fe = 0.7943;
    row.ra = 0.7133;
    row.balance = (row.fe + row.ra) / 2.0;
    row.re_retain = 0.8;
    row.re_general = 0.75;
    row.acc = 0.9;
    row.idk = 0.004;
    row.len = 7.25;
    std::string path = "/tmp/ue_test_summary.csv";
    save_summary_csv({row}, path);

    std::ifstream in(path);
    std::string header, data;
    REQUIRE(std::getline(in, header));
    REQUIRE(std::getline(in, data));
    CHECK(header == "method,FE,RE_retain,RE_general,Acc,Idk,Len,RA,Balance");
    std::vector<std::string> cells;
    std::stringstream ss(data);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 9);
    CHECK(cells[0] == "unierase");
    CHECK(cells[1] == "79.43");
    CHECK(cells[5] == "0.40");
    CHECK(cells[6] == "7.25");  // token count, not a percentage
    CHECK(cells[8] == "75.38");
    std::remove(path.c_str());
}

}  // TEST_SUITE
