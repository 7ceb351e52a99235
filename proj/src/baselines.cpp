#include "unierase/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace unierase {

namespace {

using nlohmann::json;

std::string forget_name(LossSpec::Forget f) {
    switch (f) {
        case LossSpec::Forget::kGA: return "ga";
        case LossSpec::Forget::kIDK: return "idk";
        case LossSpec::Forget::kDPO: return "dpo";
        case LossSpec::Forget::kNPO: return "npo";
        case LossSpec::Forget::kME: return "me";
    }
    throw Error("unreachable");
}

std::string retain_name(LossSpec::Retain r) {
    switch (r) {
        case LossSpec::Retain::kGD: return "gd";
        case LossSpec::Retain::kKL: return "kl";
        case LossSpec::Retain::kAP: return "ap";
        case LossSpec::Retain::kNone: return "";
    }
    throw Error("unreachable");
}

std::vector<QAPair> capped_pool(const KnowledgeSplit& split, int cap, uint64_t seed) {
    std::vector<QAPair> pool = split.retain;
    pool.insert(pool.end(), split.general.begin(), split.general.end());
    if (static_cast<int>(pool.size()) <= cap) return pool;
    Rng rng(seed ^ 0xca99ull);
    std::vector<int> perm = rng.permutation(static_cast<int>(pool.size()));
    std::vector<QAPair> out;
    out.reserve(cap);
    for (int i = 0; i < cap; ++i) out.push_back(pool[perm[i]]);
    return out;
}

}  // namespace

bool LossSpec::needs_ref() const {
    return forget == Forget::kDPO || forget == Forget::kNPO || retain == Retain::kKL;
}

std::string LossSpec::name() const {
    std::string r = retain_name(retain);
    return r.empty() ? forget_name(forget) : forget_name(forget) + "+" + r;
}

LossSpec LossSpec::parse(const std::string& text) {
    std::string lower;
    for (char c : text) lower.push_back(static_cast<char>(std::tolower(c)));
    std::string f = lower, r;
    auto plus = lower.find('+');
    if (plus != std::string::npos) {
        f = lower.substr(0, plus);
        r = lower.substr(plus + 1);
    }
    LossSpec spec;
    if (f == "ga") spec.forget = Forget::kGA;
    else if (f == "idk") spec.forget = Forget::kIDK;
    else if (f == "dpo") spec.forget = Forget::kDPO;
    else if (f == "npo") spec.forget = Forget::kNPO;
    else if (f == "me") spec.forget = Forget::kME;
    else throw InputError("unknown forget loss '" + f + "'");
    if (r == "gd") spec.retain = Retain::kGD;
    else if (r == "kl") spec.retain = Retain::kKL;
    else if (r == "ap") spec.retain = Retain::kAP;
    else if (r.empty() || r == "none") spec.retain = Retain::kNone;
    else throw InputError("unknown retain loss '" + r + "'");
    return spec;
}

namespace {

struct Scored {
    std::vector<TrainItem> items;
    // Parallel to items: per-item sequence kind, owning pair index, ref
    // sequence log-prob (when a reference model is in play).
    enum Kind { kForgetAnswer, kForgetIdk, kForgetFull, kRetainAnswer, kRetainIdk };
    std::vector<Kind> kinds;
    std::vector<int> owner;
    std::vector<double> ref_logprob;
};

TrainItem full_row_item(const std::vector<int>& q, const std::vector<int>& a) {
    TrainItem it;
    it.ids = q;
    it.ids.insert(it.ids.end(), a.begin(), a.end());
    for (size_t p = 0; p + 1 < it.ids.size(); ++p) {
        it.positions.push_back(static_cast<int>(p));
        it.targets.push_back(it.ids[p + 1]);
    }
    return it;
}

double ref_seq_logprob(const ModelParams& ref, const std::vector<int>& q,
                       const std::vector<int>& a) {
    TokenSeq prefix, target;
    prefix.ids = q;
    target.ids = a;
    return logprob(ref, target, prefix);
}

// Global (position, target) lists for one stacked item.
void global_rows(const TrainItem& it, int span_begin, std::vector<int>& pos,
                 std::vector<int>& tgt) {
    pos.clear();
    tgt.clear();
    for (size_t j = 0; j < it.positions.size(); ++j) {
        pos.push_back(span_begin + it.positions[j]);
        tgt.push_back(it.targets[j]);
    }
}

}  // namespace

Var batch_objective(GradTape& tape, ModelGraph& graph, const ModelParams& m,
                    const ModelParams* ref, const std::vector<QAPair>& forget_batch,
                    const std::vector<QAPair>& retain_batch,
                    const std::vector<std::string>& idk, const LossSpec& spec,
                    uint64_t draw_seed, StepLoss* parts) {
    UE_CHECK(!forget_batch.empty(), InputError, "batch_objective: empty forget batch");
    UE_CHECK(!spec.needs_ref() || ref != nullptr, UsageError,
             "batch_objective: loss needs a reference model");
    const bool wants_retain = spec.retain != LossSpec::Retain::kNone;
    UE_CHECK(!wants_retain || !retain_batch.empty(), InputError,
             "batch_objective: retain loss with empty retain batch");
    const bool wants_idk_f =
        spec.forget == LossSpec::Forget::kIDK || spec.forget == LossSpec::Forget::kDPO;
    const bool wants_idk_r = spec.retain == LossSpec::Retain::kAP;
    UE_CHECK(!(wants_idk_f || wants_idk_r) || !idk.empty(), InputError,
             "batch_objective: loss needs idk phrases");

    TokenCodec codec(m);
    Rng draw(draw_seed ^ 0x1d4bull);
    auto pick_idk = [&]() { return codec.encode(idk[draw.next_below(idk.size())]); };

    Scored sc;
    auto push = [&](TrainItem it, Scored::Kind kind, int who, double ref_lp) {
        sc.items.push_back(std::move(it));
        sc.kinds.push_back(kind);
        sc.owner.push_back(who);
        sc.ref_logprob.push_back(ref_lp);
    };

    for (size_t i = 0; i < forget_batch.size(); ++i) {
        const QAPair& p = forget_batch[i];
        std::vector<int> q = codec.encode(p.question), a = codec.encode(p.answer);
        if (spec.forget == LossSpec::Forget::kME) {
            push(full_row_item(q, a), Scored::kForgetFull, static_cast<int>(i), 0.0);
            continue;
        }
        if (spec.forget != LossSpec::Forget::kIDK) {
            double lp = (spec.forget == LossSpec::Forget::kDPO ||
                         spec.forget == LossSpec::Forget::kNPO)
                            ? ref_seq_logprob(*ref, q, a)
                            : 0.0;
            push(make_lm_item(q, a), Scored::kForgetAnswer, static_cast<int>(i), lp);
        }
        if (wants_idk_f) {
            std::vector<int> w = pick_idk();
            double lp = spec.forget == LossSpec::Forget::kDPO ? ref_seq_logprob(*ref, q, w) : 0.0;
            push(make_lm_item(q, w), Scored::kForgetIdk, static_cast<int>(i), lp);
        }
    }
    if (wants_retain) {
        for (size_t i = 0; i < retain_batch.size(); ++i) {
            const QAPair& p = retain_batch[i];
            std::vector<int> q = codec.encode(p.question), a = codec.encode(p.answer);
            push(make_lm_item(q, a), Scored::kRetainAnswer, static_cast<int>(i), 0.0);
            if (wants_idk_r)
                push(make_lm_item(q, pick_idk()), Scored::kRetainIdk, static_cast<int>(i), 0.0);
        }
    }

    std::vector<int> gpos, gtgt;
    RowSpans spans;
    Var logits = graph.batch_logits(sc.items, gpos, gtgt, spans);

    // Per-item sequence NLL vars (1×1), built on demand.
    auto item_nll = [&](size_t idx) {
        std::vector<int> pos, tgt;
        global_rows(sc.items[idx], spans[idx].first, pos, tgt);
        return tape.cross_entropy_sum(logits, pos, tgt);
    };
    auto find_item = [&](Scored::Kind kind, int who) -> int {
        for (size_t idx = 0; idx < sc.items.size(); ++idx)
            if (sc.kinds[idx] == kind && sc.owner[idx] == who) return static_cast<int>(idx);
        throw Error("batch_objective: missing stacked item");
    };

    const int nf = static_cast<int>(forget_batch.size());
    Var forget_loss;
    switch (spec.forget) {
        case LossSpec::Forget::kGA:
        case LossSpec::Forget::kIDK: {
            Scored::Kind kind = spec.forget == LossSpec::Forget::kGA ? Scored::kForgetAnswer
                                                                     : Scored::kForgetIdk;
            std::vector<int> pos, tgt;
            int total = 0;
            for (size_t idx = 0; idx < sc.items.size(); ++idx) {
                if (sc.kinds[idx] != kind) continue;
                std::vector<int> p, t;
                global_rows(sc.items[idx], spans[idx].first, p, t);
                pos.insert(pos.end(), p.begin(), p.end());
                tgt.insert(tgt.end(), t.begin(), t.end());
                total += static_cast<int>(t.size());
            }
            Var ce = tape.cross_entropy_sum(logits, pos, tgt);
            double s = 1.0 / static_cast<double>(total);
            forget_loss = tape.scale(ce, spec.forget == LossSpec::Forget::kGA ? -s : s);
            break;
        }
        case LossSpec::Forget::kDPO: {
            std::vector<Var> terms;
            for (int i = 0; i < nf; ++i) {
                int iw = find_item(Scored::kForgetIdk, i);
                int il = find_item(Scored::kForgetAnswer, i);
                Var ce_w = item_nll(iw), ce_l = item_nll(il);
                // beta·[(logp_w − ref_w) − (logp_l − ref_l)], logp = −ce
                Var diff = tape.sub(ce_l, ce_w);
                diff = tape.add_const(diff, sc.ref_logprob[il] - sc.ref_logprob[iw]);
                terms.push_back(tape.logsigmoid(tape.scale(diff, spec.npo_beta)));
            }
            forget_loss = tape.scale(tape.sum_of(terms), -1.0 / nf);
            break;
        }
        case LossSpec::Forget::kNPO: {
            std::vector<Var> terms;
            for (int i = 0; i < nf; ++i) {
                int ia = find_item(Scored::kForgetAnswer, i);
                Var ce = item_nll(ia);
                // −beta·(logp − logp_ref) = beta·(ce + ref)
                Var arg = tape.scale(tape.add_const(ce, sc.ref_logprob[ia]), spec.npo_beta);
                terms.push_back(tape.logsigmoid(arg));
            }
            forget_loss = tape.scale(tape.sum_of(terms), -2.0 / (spec.npo_beta * nf));
            break;
        }
        case LossSpec::Forget::kME: {
            std::vector<int> pos;
            for (size_t idx = 0; idx < sc.items.size(); ++idx) {
                if (sc.kinds[idx] != Scored::kForgetFull) continue;
                for (int p : sc.items[idx].positions) pos.push_back(spans[idx].first + p);
            }
            Matrix uni(static_cast<int>(pos.size()), m.vocab_size());
            double lu = -std::log(static_cast<double>(m.vocab_size()));
            for (int r = 0; r < uni.rows(); ++r)
                for (int c = 0; c < uni.cols(); ++c) uni(r, c) = lu;
            Var kl = tape.kl_to_ref_rows(logits, pos, uni);
            forget_loss = tape.scale(kl, 1.0 / static_cast<double>(pos.size()));
            break;
        }
    }

    Var retain_loss;
    if (wants_retain) {
        const int nr = static_cast<int>(retain_batch.size());
        switch (spec.retain) {
            case LossSpec::Retain::kGD: {
                std::vector<int> pos, tgt;
                int total = 0;
                for (size_t idx = 0; idx < sc.items.size(); ++idx) {
                    if (sc.kinds[idx] != Scored::kRetainAnswer) continue;
                    std::vector<int> p, t;
                    global_rows(sc.items[idx], spans[idx].first, p, t);
                    pos.insert(pos.end(), p.begin(), p.end());
                    tgt.insert(tgt.end(), t.begin(), t.end());
                    total += static_cast<int>(t.size());
                }
                retain_loss = tape.scale(tape.cross_entropy_sum(logits, pos, tgt), 1.0 / total);
                break;
            }
            case LossSpec::Retain::kKL: {
                std::vector<int> pos;
                std::vector<Matrix> refs;
                for (size_t idx = 0; idx < sc.items.size(); ++idx) {
                    if (sc.kinds[idx] != Scored::kRetainAnswer) continue;
                    TokenSeq s;
                    s.ids = sc.items[idx].ids;
                    Matrix lg = forward(*ref, s);
                    for (int p : sc.items[idx].positions) {
                        pos.push_back(spans[idx].first + p);
                        double mx = lg(p, 0);
                        for (int j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(p, j));
                        double z = 0.0;
                        for (int j = 0; j < lg.cols(); ++j) z += std::exp(lg(p, j) - mx);
                        double lz = mx + std::log(z);
                        Matrix row(1, lg.cols());
                        for (int j = 0; j < lg.cols(); ++j) row(0, j) = lg(p, j) - lz;
                        refs.push_back(row);
                    }
                }
                Matrix ref_stack(static_cast<int>(refs.size()), m.vocab_size());
                for (size_t r = 0; r < refs.size(); ++r)
                    ref_stack.set_row(static_cast<int>(r), refs[r]);
                Var kl = tape.kl_to_ref_rows(logits, pos, ref_stack);
                retain_loss = tape.scale(kl, 1.0 / static_cast<double>(pos.size()));
                break;
            }
            case LossSpec::Retain::kAP: {
                std::vector<Var> terms;
                for (int i = 0; i < nr; ++i) {
                    Var ce_a = item_nll(find_item(Scored::kRetainAnswer, i));
                    Var ce_w = item_nll(find_item(Scored::kRetainIdk, i));
                    // −beta·(logp_idk − logp_a) = beta·(ce_idk − ce_a)
                    Var arg = tape.scale(tape.sub(ce_w, ce_a), spec.npo_beta);
                    terms.push_back(tape.logsigmoid(arg));
                }
                retain_loss = tape.scale(tape.sum_of(terms), -1.0 / (spec.npo_beta * nr));
                break;
            }
            case LossSpec::Retain::kNone:
                break;
        }
    }

    Var combined = tape.scale(forget_loss, spec.beta);
    if (wants_retain) combined = tape.add(combined, tape.scale(retain_loss, spec.gamma));
    if (parts) {
        parts->forget_term = tape.scalar_value(forget_loss);
        parts->retain_term = wants_retain ? tape.scalar_value(retain_loss) : 0.0;
        parts->combined = tape.scalar_value(combined);
    }
    return combined;
}

FineTuneReport finetune_unlearn(ModelParams& m, const KnowledgeSplit& split,
                                const LossSpec& spec, const FineTuneConfig& cfg) {
    UE_CHECK(!split.forget.empty(), InputError, "finetune_unlearn: empty forget set");
    UE_CHECK(cfg.epochs >= 0 && cfg.batch_size >= 1, InputError,
             "finetune_unlearn: bad epochs/batch size");
    const bool wants_retain = spec.retain != LossSpec::Retain::kNone;
    std::vector<QAPair> retain_sample = capped_pool(split, cfg.retain_sample_cap, cfg.seed);
    UE_CHECK(!wants_retain || !retain_sample.empty(), InputError,
             "finetune_unlearn: retain loss with empty retain pool");

    ModelParams ref;
    const ModelParams* ref_ptr = nullptr;
    if (spec.needs_ref()) {
        ref = m;  // frozen starting point
        ref_ptr = &ref;
    }

    const int nf = static_cast<int>(split.forget.size());
    const int nr = static_cast<int>(retain_sample.size());
    const int span = wants_retain ? std::max(nf, nr) : nf;
    const int steps_per_epoch = (span + cfg.batch_size - 1) / cfg.batch_size;

    FineTuneReport report;
    report.method = spec.name();
    Rng rng(cfg.seed ^ 0xba5e11ull);
    auto t0 = std::chrono::steady_clock::now();
    double last_finite = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> forder = rng.permutation(nf);
        std::vector<int> rorder = wants_retain ? rng.permutation(nr) : std::vector<int>{};
        double sum_c = 0.0, sum_f = 0.0, sum_r = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            std::vector<QAPair> fb, rb;
            for (int j = 0; j < cfg.batch_size; ++j)
                fb.push_back(split.forget[forder[(step * cfg.batch_size + j) % nf]]);
            if (wants_retain)
                for (int j = 0; j < cfg.batch_size; ++j)
                    rb.push_back(retain_sample[rorder[(step * cfg.batch_size + j) % nr]]);
            GradTape tape;
            ModelGraph graph(tape, m, ModelGraph::Watch::kAll);
            uint64_t draw_seed = cfg.seed + 0x9e37ull * (epoch * steps_per_epoch + step + 1);
            StepLoss parts;
            Var loss = batch_objective(tape, graph, m, ref_ptr, fb, rb, split.idk, spec,
                                       draw_seed, &parts);
            if (!std::isfinite(parts.combined))
                throw TrainingError("finetune_unlearn: objective diverged", last_finite);
            last_finite = parts.combined;
            auto grads = tape.grad(loss);
            graph.sgd_step(m, grads, cfg.lr);
            sum_c += parts.combined;
            sum_f += parts.forget_term;
            sum_r += parts.retain_term;
            ++report.steps;
        }
        report.epoch_losses.push_back(sum_c / steps_per_epoch);
        report.forget_epoch_losses.push_back(sum_f / steps_per_epoch);
        report.retain_epoch_losses.push_back(sum_r / steps_per_epoch);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void save_run_manifest(const FineTuneReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_run_manifest: cannot write " + path);
    json line{{"record", "finetune_run"},
              {"method", report.method},
              {"steps", report.steps},
              {"wall_seconds", report.wall_seconds},
              {"epoch_losses", report.epoch_losses},
              {"forget_epoch_losses", report.forget_epoch_losses},
              {"retain_epoch_losses", report.retain_epoch_losses}};
    out << line.dump() << '\n';
}

}  // namespace unierase
