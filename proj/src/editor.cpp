#include "unierase/editor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Dense>

#include <json.hpp>

namespace unierase {

namespace {

using nlohmann::json;

// Right-division X = B · M⁻¹ for a general (nonsymmetric) square M, via LU on
// Mᵀ Xᵀ = Bᵀ.
Matrix solve_right_general(const Matrix& b, const Matrix& m) {
    UE_CHECK(m.rows() == m.cols() && b.cols() == m.rows(), InputError,
             "solve_right_general: shape mismatch");
    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const EMat> me(m.data(), m.rows(), m.cols());
    Eigen::Map<const EMat> be(b.data(), b.rows(), b.cols());
    Eigen::PartialPivLU<EMat> lu(me.transpose());
    EMat xt = lu.solve(be.transpose());
    Matrix x(b.rows(), b.cols());
    Eigen::Map<EMat>(x.data(), x.rows(), x.cols()) = xt.transpose();
    x.check_finite("solve_right_general");
    return x;
}

struct PrefixedContext {
    std::vector<int> ids;
    int subject_last;  // local position of the subject's final token
};

// First context is the plain question; the rest prepend 2–10 random ordinary
// vocabulary words (reserved markers and the unlearning token excluded).
std::vector<PrefixedContext> prefix_contexts(const ModelParams& m, const TokenCodec& codec,
                                             const QAPair& pair, int n, uint64_t seed) {
    UE_CHECK(n >= 1, InputError, "prefix_contexts: need at least one context");
    std::vector<int> q = codec.encode(pair.question);
    UE_CHECK(pair.subject_begin >= 0 && pair.subject_end <= static_cast<int>(q.size()) &&
                 pair.subject_begin < pair.subject_end,
             InputError, "prefix_contexts: subject span does not resolve");
    Rng rng(seed ^ 0x9ef1ull);
    std::vector<PrefixedContext> out;
    out.push_back({q, pair.subject_end - 1});
    int lo = Tokenizer::kReservedCount;
    int hi = m.vocab_size() - 1;
    if (m.unl_id >= 0) hi = m.unl_id - 1;  // the token is always the last row
    UE_CHECK(hi >= lo, InputError, "prefix_contexts: vocabulary too small");
    for (int j = 1; j < n; ++j) {
        int len = rng.next_int(2, 10);
        std::vector<int> ids;
        for (int t = 0; t < len; ++t) ids.push_back(rng.next_int(lo, hi));
        ids.insert(ids.end(), q.begin(), q.end());
        UE_CHECK(static_cast<int>(ids.size()) <= m.cfg.context, InputError,
                 "prefix_contexts: context window exceeded");
        out.push_back({std::move(ids), len + pair.subject_end - 1});
    }
    return out;
}

std::vector<QAPair> capped_sample(std::vector<QAPair> pool, int cap, uint64_t seed) {
    if (static_cast<int>(pool.size()) <= cap) return pool;
    Rng rng(seed ^ 0xca99ull);
    std::vector<int> perm = rng.permutation(static_cast<int>(pool.size()));
    std::vector<QAPair> out;
    out.reserve(cap);
    for (int i = 0; i < cap; ++i) out.push_back(pool[perm[i]]);
    return out;
}

Matrix column_stack(const std::vector<Matrix>& rows) {
    UE_CHECK(!rows.empty(), InputError, "column_stack: no vectors");
    int d = rows.front().cols();
    Matrix out(d, static_cast<int>(rows.size()));
    for (size_t j = 0; j < rows.size(); ++j) {
        UE_CHECK(rows[j].rows() == 1 && rows[j].cols() == d, InputError,
                 "column_stack: inconsistent vector shapes");
        for (int i = 0; i < d; ++i) out(i, static_cast<int>(j)) = rows[j](0, i);
    }
    return out;
}

}  // namespace

Matrix compute_key(const ModelParams& m, const QAPair& pair, int layer, int n_prefixes,
                   uint64_t seed) {
    UE_CHECK(layer >= 0 && layer < m.cfg.n_layers, InputError,
             "compute_key: layer out of range");
    TokenCodec codec(m);
    auto contexts = prefix_contexts(m, codec, pair, n_prefixes, seed);
    Matrix acc = Matrix::zeros(1, m.cfg.d_ff);
    for (const auto& ctx : contexts) {
        TokenSeq s;
        s.ids = ctx.ids;
        acc += mlp_key(m, s, layer, ctx.subject_last);
    }
    acc *= 1.0 / static_cast<double>(contexts.size());
    return acc;
}

Matrix compute_value(const ModelParams& m, const QAPair& pair, int target_id, int layer,
                     int n_prefixes, const std::vector<QAPair>& retain_sample,
                     const EditConfig& cfg, std::vector<double>* objective_curve) {
    UE_CHECK(layer >= 0 && layer < m.cfg.n_layers, InputError,
             "compute_value: layer out of range");
    UE_CHECK(target_id >= 0 && target_id < m.vocab_size(), InputError,
             "compute_value: target id out of range");
    TokenCodec codec(m);
    auto contexts = prefix_contexts(m, codec, pair, n_prefixes, cfg.seed);

    // Extra KL-only contexts: retained questions about the same subject.
    std::vector<PrefixedContext> kl_extra;
    auto subject_of = [&](const QAPair& p) {
        std::vector<int> ids = codec.encode(p.question);
        return std::vector<int>(ids.begin() + p.subject_begin, ids.begin() + p.subject_end);
    };
    std::vector<int> subject = subject_of(pair);
    for (const QAPair& r : retain_sample) {
        if (subject_of(r) != subject) continue;
        std::vector<int> ids = codec.encode(r.question);
        kl_extra.push_back({ids, r.subject_end - 1});
    }

    // Per context: pre-edit hidden pieces (constants w.r.t. v) and row maps.
    struct Piece {
        Matrix base;     // h^{layer-1}+a^{layer}+m^{layer}, subject row minus m
        int sub_row;     // local substitution row
        int last_row;    // local prediction row
        Matrix ref_row;  // next-token log-probs of the untouched model (KL only)
        bool forget;     // CE context (true) vs KL-only retain context
    };
    std::vector<Piece> pieces;
    Matrix v_init;
    auto log_softmax_row = [](const Matrix& lg, int row) {
        double mx = lg(row, 0);
        for (int j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(row, j));
        double z = 0.0;
        for (int j = 0; j < lg.cols(); ++j) z += std::exp(lg(row, j) - mx);
        Matrix out(1, lg.cols());
        double lz = mx + std::log(z);
        for (int j = 0; j < lg.cols(); ++j) out(0, j) = lg(row, j) - lz;
        return out;
    };
    auto make_piece = [&](const PrefixedContext& ctx, bool forget, bool want_ref) {
        TokenSeq s;
        s.ids = ctx.ids;
        HiddenTrace tr;
        Matrix lg = forward(m, s, &tr);
        Piece pc;
        pc.base = tr.h[layer + 1];
        Matrix no_m = pc.base.row(ctx.subject_last);
        no_m -= tr.m[layer].row(ctx.subject_last);
        pc.base.set_row(ctx.subject_last, no_m);
        pc.sub_row = ctx.subject_last;
        pc.last_row = static_cast<int>(ctx.ids.size()) - 1;
        pc.forget = forget;
        if (want_ref) pc.ref_row = log_softmax_row(lg, pc.last_row);
        if (forget && pieces.empty()) v_init = tr.m[layer].row(ctx.subject_last);
        return pc;
    };
    for (size_t j = 0; j < contexts.size(); ++j)
        pieces.push_back(make_piece(contexts[j], true, j == 0));
    for (const auto& ctx : kl_extra) pieces.push_back(make_piece(ctx, false, true));

    if (cfg.v_steps == 0) return v_init;

    // Stack everything once; the layout never changes across steps.
    int total_rows = 0;
    RowSpans spans;
    for (const auto& pc : pieces) {
        spans.push_back({total_rows, pc.base.rows()});
        total_rows += pc.base.rows();
    }
    Matrix base_stack(total_rows, m.cfg.d_model);
    std::vector<int> sub_rows, ce_positions, ce_targets, kl_positions;
    std::vector<Matrix> kl_refs;
    for (size_t j = 0; j < pieces.size(); ++j) {
        const Piece& pc = pieces[j];
        int off = spans[j].first;
        for (int r = 0; r < pc.base.rows(); ++r)
            for (int c = 0; c < pc.base.cols(); ++c) base_stack(off + r, c) = pc.base(r, c);
        sub_rows.push_back(off + pc.sub_row);
        if (pc.forget) {
            ce_positions.push_back(off + pc.last_row);
            ce_targets.push_back(target_id);
        }
        if (pc.ref_row.rows() == 1) {
            kl_positions.push_back(off + pc.last_row);
            kl_refs.push_back(pc.ref_row);
        }
    }
    Matrix kl_ref_stack(static_cast<int>(kl_refs.size()), m.vocab_size());
    for (size_t i = 0; i < kl_refs.size(); ++i) kl_ref_stack.set_row(static_cast<int>(i), kl_refs[i]);

    double norm = frobenius_norm(v_init);
    if (norm < 1e-12) norm = 1.0;
    Matrix u = scale(v_init, 1.0 / norm);

    double last_finite = 0.0;
    if (objective_curve) objective_curve->clear();
    for (int step = 0; step < cfg.v_steps; ++step) {
        GradTape tape;
        ModelGraph graph(tape, m, ModelGraph::Watch::kNone);
        Var u_var = tape.param(u, 0);
        Var v_var = tape.scale(u_var, norm);
        Var h = tape.constant(base_stack);
        for (int row : sub_rows) h = tape.add_to_row(h, row, v_var);
        Var lg = graph.logits_from_hidden(layer + 1, h, spans);
        Var ce = tape.scale(tape.cross_entropy_sum(lg, ce_positions, ce_targets),
                            1.0 / static_cast<double>(ce_positions.size()));
        Var loss = ce;
        if (!kl_positions.empty() && cfg.kl_weight > 0.0) {
            Var kl = tape.kl_to_ref_rows(lg, kl_positions, kl_ref_stack);
            loss = tape.add(loss, tape.scale(kl, cfg.kl_weight /
                                                     static_cast<double>(kl_positions.size())));
        }
        double lv = tape.scalar_value(loss);
        if (!std::isfinite(lv)) throw TrainingError("compute_value: objective diverged", last_finite);
        last_finite = lv;
        if (objective_curve) objective_curve->push_back(lv);
        auto grads = tape.grad(loss);
        u -= scale(grads.at(0), cfg.v_rate);
    }
    return scale(u, norm);
}

KVMatrices assemble_kv(const ModelParams& m, const std::vector<QAPair>& forget,
                       const std::vector<QAPair>& retain_sample, int target_id, int layer,
                       const EditConfig& cfg) {
    UE_CHECK(!forget.empty(), InputError, "assemble_kv: empty forget list");
    UE_CHECK(!retain_sample.empty(), InputError, "assemble_kv: empty retain sample");
    std::vector<Matrix> kf, vf, kr;
    for (size_t i = 0; i < forget.size(); ++i) {
        uint64_t pair_seed = cfg.seed + 0x101 * (i + 1);
        EditConfig pair_cfg = cfg;
        pair_cfg.seed = pair_seed;
        kf.push_back(compute_key(m, forget[i], layer, cfg.prefix_count, pair_seed));
        vf.push_back(compute_value(m, forget[i], target_id, layer, cfg.prefix_count,
                                   retain_sample, pair_cfg));
    }
    for (const QAPair& p : retain_sample)
        kr.push_back(compute_key(m, p, layer, 1, cfg.seed));
    KVMatrices kv;
    kv.k_f = column_stack(kf);
    kv.v_f = column_stack(vf);
    kv.k_r = column_stack(kr);
    kv.v_r = matmul(m.layers[layer].w_dp, kv.k_r);
    kv.k_p = cfg.k_p;
    return kv;
}

Matrix solve_plain(const Matrix& w, const KVMatrices& kv) {
    UE_CHECK(w.cols() == kv.k_f.rows() && w.rows() == kv.v_f.rows(), InputError,
             "solve_plain: shape mismatch");
    UE_CHECK(kv.k_r.rows() == kv.k_f.rows(), InputError, "solve_plain: K_r shape mismatch");
    Matrix a = matmul_nt(kv.k_f, kv.k_f);
    a += matmul_nt(kv.k_r, kv.k_r);
    Matrix b = matmul_nt(sub(kv.v_f, matmul(w, kv.k_f)), kv.k_f);
    try {
        return solve_regularized(a, b, 0.0);
    } catch (const SingularSystemError&) {
        return solve_regularized(a, b, default_ridge(a));
    }
}

Matrix solve_nullspace(const Matrix& w, const KVMatrices& kv, const Matrix& p) {
    int dff = kv.k_f.rows();
    UE_CHECK(p.rows() == dff && p.cols() == dff, InputError,
             "solve_nullspace: projector shape mismatch");
    Matrix bp = matmul(matmul_nt(sub(kv.v_f, matmul(w, kv.k_f)), kv.k_f), p);
    Matrix mm = matmul(matmul_nt(kv.k_f, kv.k_f), p);
    if (kv.k_p.rows() == dff && kv.k_p.cols() > 0)
        mm += matmul(matmul_nt(kv.k_p, kv.k_p), p);
    for (int i = 0; i < dff; ++i) mm(i, i) += 1.0;
    Matrix y = solve_right_general(bp, mm);
    return matmul(y, p);  // exact scrub: retained keys stay invariant
}

double apply_edit(ModelParams& m, int layer, const Matrix& increment) {
    UE_CHECK(layer >= 0 && layer < m.cfg.n_layers, InputError, "apply_edit: bad layer");
    UE_CHECK(increment.same_shape(m.layers[layer].w_dp), InputError,
             "apply_edit: increment shape mismatch");
    increment.check_finite("apply_edit");
    m.layers[layer].w_dp += increment;
    return static_cast<double>(increment.rows()) * increment.cols() /
           static_cast<double>(m.param_count());
}

bool chain_success(const ModelParams& m, const UnlearnToken& tok, const QAPair& pair,
                   const std::vector<std::string>& d_idk) {
    TokenCodec codec(m);
    TokenSeq prompt;
    prompt.ids = codec.encode(pair.question);
    TokenSeq out = generate(m, prompt, 24);
    if (out.ids.empty() || out.ids.front() != tok.id) return false;
    auto next_unl = std::find(out.ids.begin() + 1, out.ids.end(), tok.id);
    std::vector<int> segment(out.ids.begin() + 1, next_unl);
    if (segment.empty()) return false;
    for (const std::string& phrase : d_idk)
        if (codec.encode(phrase) == segment) return true;
    return false;
}

namespace {

EditReport spread_edit(ModelParams& m, const UnlearnToken& tok, const KnowledgeSplit& split,
                       const EditConfig& cfg) {
    EditReport report;
    report.solver = cfg.solver;
    report.layers = cfg.layers;
    if (split.forget.empty()) {
        report.success_rate = 1.0;
        return report;
    }
    UE_CHECK(!cfg.layers.empty(), InputError, "edit: no layers configured");
    UE_CHECK(std::is_sorted(cfg.layers.begin(), cfg.layers.end()) &&
                 std::adjacent_find(cfg.layers.begin(), cfg.layers.end()) == cfg.layers.end(),
             InputError, "edit: layers must be strictly ascending");
    UE_CHECK(cfg.solver == "plain" || cfg.solver == "nullspace", InputError,
             "edit: unknown solver '" + cfg.solver + "'");
    UE_CHECK(tok.id == m.unl_id && tok.id >= 0, UsageError,
             "edit: unlearning token not registered in this model");

    std::vector<QAPair> retain_pool = split.retain;
    retain_pool.insert(retain_pool.end(), split.general.begin(), split.general.end());
    UE_CHECK(!retain_pool.empty(), InputError, "edit: empty retain pool");
    std::vector<QAPair> retain_sample =
        capped_sample(retain_pool, cfg.retain_sample_cap, cfg.seed);

    const int deepest = cfg.layers.back();
    const size_t n = split.forget.size();
    const double frac = 1.0 / static_cast<double>(cfg.layers.size());

    // Deepest-layer targets, computed once on the unedited model.
    std::vector<Matrix> residual(n);
    for (size_t i = 0; i < n; ++i) {
        uint64_t pair_seed = cfg.seed + 0x101 * (i + 1);
        EditConfig pair_cfg = cfg;
        pair_cfg.seed = pair_seed;
        Matrix k = compute_key(m, split.forget[i], deepest, cfg.prefix_count, pair_seed);
        Matrix v = compute_value(m, split.forget[i], tok.id, deepest, cfg.prefix_count,
                                 retain_sample, pair_cfg);
        Matrix cur = matmul_nt(m.layers[deepest].w_dp, k);  // d x 1
        Matrix r(1, m.cfg.d_model);
        for (int c = 0; c < m.cfg.d_model; ++c) r(0, c) = v(0, c) - cur(c, 0);
        residual[i] = r;
    }

    for (int layer : cfg.layers) {
        std::vector<Matrix> kf, vf, kr;
        for (size_t i = 0; i < n; ++i) {
            uint64_t pair_seed = cfg.seed + 0x101 * (i + 1);
            Matrix k = compute_key(m, split.forget[i], layer, cfg.prefix_count, pair_seed);
            Matrix cur = matmul_nt(m.layers[layer].w_dp, k);
            Matrix v(1, m.cfg.d_model);
            for (int c = 0; c < m.cfg.d_model; ++c)
                v(0, c) = cur(c, 0) + frac * residual[i](0, c);
            kf.push_back(k);
            vf.push_back(v);
        }
        for (const QAPair& p : retain_sample)
            kr.push_back(compute_key(m, p, layer, 1, cfg.seed));
        KVMatrices kv;
        kv.k_f = column_stack(kf);
        kv.v_f = column_stack(vf);
        kv.k_r = column_stack(kr);
        kv.v_r = matmul(m.layers[layer].w_dp, kv.k_r);
        kv.k_p = cfg.k_p;

        Matrix delta;
        if (cfg.solver == "plain") {
            delta = solve_plain(m.layers[layer].w_dp, kv);
        } else {
            Matrix p = null_space_projector(kv.k_r);
            delta = solve_nullspace(m.layers[layer].w_dp, kv, p);
        }
        apply_edit(m, layer, delta);
        report.increment_norms.push_back(frobenius_norm(delta));
        if (layer == cfg.layers.back()) report.forget_keys = kv.k_f;
    }

    int ok = 0;
    for (const QAPair& p : split.forget) {
        bool s = chain_success(m, tok, p, split.idk);
        report.success.push_back(s ? 1 : 0);
        if (s) ++ok;
    }
    report.success_rate = static_cast<double>(ok) / static_cast<double>(n);
    report.below_floor = report.success_rate < cfg.success_floor;
    return report;
}

}  // namespace

EditReport multi_layer_spread(ModelParams& m, const UnlearnToken& tok,
                              const KnowledgeSplit& split, const EditConfig& cfg) {
    return spread_edit(m, tok, split, cfg);
}

EditReport unierase(ModelParams& m, const UnlearnToken& tok, const KnowledgeSplit& split,
                    const EditConfig& cfg) {
    return spread_edit(m, tok, split, cfg);
}

void save_edit_manifest(const EditReport& report, const std::vector<QAPair>& forget,
                        const std::string& path) {
    UE_CHECK(forget.size() == report.success.size() || report.success.empty(), InputError,
             "save_edit_manifest: pair/flag count mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("save_edit_manifest: cannot write " + path);
    json header{{"record", "edit_header"},
                {"solver", report.solver},
                {"layers", report.layers},
                {"increment_norms", report.increment_norms},
                {"success_rate", report.success_rate},
                {"below_floor", report.below_floor}};
    out << header.dump() << '\n';
    for (size_t i = 0; i < report.success.size(); ++i) {
        json line{{"question", forget[i].question},
                  {"success", report.success[i] != 0}};
        out << line.dump() << '\n';
    }
}

}  // namespace unierase
