#include "unierase/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace unierase {

namespace {

constexpr uint64_t kInitSalt = 0x0de1c0deull;

Matrix sinusoidal_table(int context, int d) {
    Matrix p(context, d);
    for (int t = 0; t < context; ++t)
        for (int j = 0; j < d; ++j) {
            double angle = t / std::pow(10000.0, (2.0 * (j / 2)) / d);
            p(t, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return p;
}

Matrix ones_row(int d) {
    Matrix g(1, d);
    for (int j = 0; j < d; ++j) g(0, j) = 1.0;
    return g;
}

Matrix xavier(int rows, int cols, Rng& rng) {
    return Matrix::randn(rows, cols, rng, std::sqrt(2.0 / (rows + cols)));
}

void hash_matrix_into(Fnv1a& h, const Matrix& m, int skip_row = -1) {
    h.update(static_cast<uint64_t>(m.rows()));
    h.update(static_cast<uint64_t>(m.cols()));
    for (int r = 0; r < m.rows(); ++r) {
        if (r == skip_row) continue;
        for (int c = 0; c < m.cols(); ++c) h.update(m(r, c));
    }
}

}  // namespace

long ModelParams::param_count() const {
    auto sz = [](const Matrix& m) { return static_cast<long>(m.rows()) * m.cols(); };
    long n = sz(embed) + sz(unembed);
    for (const auto& l : layers)
        n += sz(l.wq) + sz(l.wk) + sz(l.wv) + sz(l.wo) + sz(l.w_up) + sz(l.w_dp) +
             sz(l.g1) + sz(l.g2);
    return n;
}

ModelParams init_model(const ModelConfig& cfg, const Tokenizer& tok, uint64_t seed) {
    UE_CHECK(cfg.n_layers >= 1 && cfg.d_model >= 2 && cfg.d_ff >= 1 && cfg.n_heads >= 1,
             InputError, "init_model: bad architecture");
    UE_CHECK(cfg.d_model % cfg.n_heads == 0, InputError,
             "init_model: d_model must divide into heads");
    Rng rng(seed ^ kInitSalt);
    ModelParams m;
    m.cfg = cfg;
    m.vocab = tok.words();
    int n = static_cast<int>(m.vocab.size()), d = cfg.d_model;
    m.embed = Matrix::randn(n, d, rng, 0.02);
    m.unembed = Matrix::randn(n, d, rng, 0.02);
    m.pos = sinusoidal_table(cfg.context, d);
    m.layers.resize(cfg.n_layers);
    for (auto& l : m.layers) {
        l.wq = xavier(d, d, rng);
        l.wk = xavier(d, d, rng);
        l.wv = xavier(d, d, rng);
        l.wo = xavier(d, d, rng);
        l.w_up = xavier(cfg.d_ff, d, rng);
        l.w_dp = xavier(d, cfg.d_ff, rng);
        l.g1 = ones_row(d);
        l.g2 = ones_row(d);
    }
    return m;
}

uint64_t weights_hash(const ModelParams& m, bool skip_unl_rows) {
    Fnv1a h;
    int skip = skip_unl_rows ? m.unl_id : -1;
    hash_matrix_into(h, m.embed, skip);
    hash_matrix_into(h, m.unembed, skip);
    for (const auto& l : m.layers) {
        hash_matrix_into(h, l.wq);
        hash_matrix_into(h, l.wk);
        hash_matrix_into(h, l.wv);
        hash_matrix_into(h, l.wo);
        hash_matrix_into(h, l.w_up);
        hash_matrix_into(h, l.w_dp);
        hash_matrix_into(h, l.g1);
        hash_matrix_into(h, l.g2);
    }
    return h.digest();
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

namespace {
// Slot field codes. Per-layer fields are kFieldLayerBase + 16*layer + offset.
enum : int {
    kFieldEmbed = 0,
    kFieldUnembed = 1,
    kFieldUnlShared = 2,
    kFieldUnlE = 3,
    kFieldUnlU = 4,
    kFieldPos = 5,
    kFieldEmbedTable = 6,    // assembled table (may differ from raw weight var)
    kFieldUnembedTable = 7,
    kFieldLayerBase = 16,
    kOffWq = 0, kOffWk = 1, kOffWv = 2, kOffWo = 3,
    kOffWup = 4, kOffWdp = 5, kOffG1 = 6, kOffG2 = 7,
};
}  // namespace

ModelGraph::ModelGraph(GradTape& tape, const ModelParams& m, Watch watch)
    : tape_(tape), m_(m), watch_(watch) {
    ParamId next = 0;
    auto reg = [&](int layer, int field) {
        slots_.push_back({next, layer, field});
        watched_.push_back(next);
        return next++;
    };
    if (watch_ == Watch::kAll) {
        reg(-1, kFieldEmbed);
        reg(-1, kFieldUnembed);
        for (int l = 0; l < m_.cfg.n_layers; ++l)
            for (int off = kOffWq; off <= kOffG2; ++off)
                reg(l, kFieldLayerBase + 16 * l + off);
    } else if (watch_ == Watch::kUnlRows) {
        UE_CHECK(m_.unl_id >= 0, UsageError, "ModelGraph: no unlearning token registered");
        if (m_.unl_shared) {
            UE_CHECK(max_abs(sub(m_.embed.row(m_.unl_id), m_.unembed.row(m_.unl_id))) == 0.0,
                     UsageError, "ModelGraph: shared token rows diverged");
            reg(-1, kFieldUnlShared);
        } else {
            reg(-1, kFieldUnlE);
            reg(-1, kFieldUnlU);
        }
    }
}

Var ModelGraph::embed_table() {
    auto it = cache_.find(kFieldEmbedTable);
    if (it != cache_.end()) return it->second;
    Var table;
    if (watch_ == Watch::kAll) {
        table = tape_.param(m_.embed, slots_[0].pid);
    } else if (watch_ == Watch::kUnlRows) {
        Matrix base = m_.embed;
        base.set_row(m_.unl_id, Matrix::zeros(1, m_.cfg.d_model));
        Var row;
        if (m_.unl_shared) {
            row = tape_.param(m_.embed.row(m_.unl_id), slots_[0].pid);
            cache_.emplace(kFieldUnlShared, row);
        } else {
            row = tape_.param(m_.embed.row(m_.unl_id), slots_[0].pid);
        }
        table = tape_.add_to_row(tape_.constant(base), m_.unl_id, row);
    } else {
        table = tape_.constant(m_.embed);
    }
    cache_.emplace(kFieldEmbedTable, table);
    return table;
}

Var ModelGraph::unembed_table() {
    auto it = cache_.find(kFieldUnembedTable);
    if (it != cache_.end()) return it->second;
    Var table;
    if (watch_ == Watch::kAll) {
        table = tape_.param(m_.unembed, slots_[1].pid);
    } else if (watch_ == Watch::kUnlRows) {
        Matrix base = m_.unembed;
        base.set_row(m_.unl_id, Matrix::zeros(1, m_.cfg.d_model));
        Var row;
        if (m_.unl_shared) {
            embed_table();  // ensures the shared row param exists
            row = cache_.at(kFieldUnlShared);
        } else {
            row = tape_.param(m_.unembed.row(m_.unl_id), slots_[1].pid);
        }
        table = tape_.add_to_row(tape_.constant(base), m_.unl_id, row);
    } else {
        table = tape_.constant(m_.unembed);
    }
    cache_.emplace(kFieldUnembedTable, table);
    return table;
}

Var ModelGraph::block(int layer, Var h, const RowSpans& spans) {
    const LayerParams& l = m_.layers[layer];
    auto weight = [&](int off, const Matrix& w) {
        int field = kFieldLayerBase + 16 * layer + off;
        auto it = cache_.find(field);
        if (it != cache_.end()) return it->second;
        Var v;
        if (watch_ == Watch::kAll) {
            // slots_ order: embed, unembed, then 8 per layer.
            ParamId pid = slots_[2 + 8 * layer + off].pid;
            v = tape_.param(w, pid);
        } else {
            v = tape_.constant(w);
        }
        cache_.emplace(field, v);
        return v;
    };
    Var x1 = tape_.layernorm(h, weight(kOffG1, l.g1));
    Var q = tape_.matmul_nt(x1, weight(kOffWq, l.wq));
    Var k = tape_.matmul_nt(x1, weight(kOffWk, l.wk));
    Var v = tape_.matmul_nt(x1, weight(kOffWv, l.wv));
    Var attn = tape_.causal_attention(q, k, v, m_.cfg.n_heads, spans);
    Var a = tape_.matmul_nt(attn, weight(kOffWo, l.wo));
    Var ha = tape_.add(h, a);
    Var x2 = tape_.layernorm(ha, weight(kOffG2, l.g2));
    Var kk = tape_.gelu(tape_.matmul_nt(x2, weight(kOffWup, l.w_up)));
    Var mm = tape_.matmul_nt(kk, weight(kOffWdp, l.w_dp));
    trace_a_.push_back(a);
    trace_m_.push_back(mm);
    trace_k_.push_back(kk);
    Var out = tape_.add(ha, mm);
    trace_h_.push_back(out);
    return out;
}

Var ModelGraph::logits(const std::vector<std::vector<int>>& seqs, RowSpans& spans) {
    UE_CHECK(!seqs.empty(), InputError, "ModelGraph: no sequences");
    spans.clear();
    std::vector<int> ids, pos_ids;
    for (const auto& s : seqs) {
        UE_CHECK(!s.empty(), InputError, "ModelGraph: empty sequence");
        UE_CHECK(static_cast<int>(s.size()) <= m_.cfg.context, InputError,
                 "ModelGraph: sequence exceeds context window");
        spans.push_back({static_cast<int>(ids.size()), static_cast<int>(s.size())});
        for (size_t t = 0; t < s.size(); ++t) {
            UE_CHECK(s[t] >= 0 && s[t] < m_.vocab_size(), InputError,
                     "ModelGraph: token id out of range");
            ids.push_back(s[t]);
            pos_ids.push_back(static_cast<int>(t));
        }
    }
    Var emb = tape_.gather_rows(embed_table(), ids);
    Var pos = tape_.gather_rows(tape_.constant(m_.pos), pos_ids);
    Var h = tape_.add(emb, pos);
    trace_h0_ = h;
    for (int l = 0; l < m_.cfg.n_layers; ++l) h = block(l, h, spans);
    return tape_.matmul_nt(h, unembed_table());
}

Var ModelGraph::logits_from_hidden(int first_layer, Var hidden, const RowSpans& spans) {
    UE_CHECK(first_layer >= 0 && first_layer <= m_.cfg.n_layers, InputError,
             "ModelGraph: bad resume layer");
    Var h = hidden;
    for (int l = first_layer; l < m_.cfg.n_layers; ++l) h = block(l, h, spans);
    return tape_.matmul_nt(h, unembed_table());
}

Var ModelGraph::batch_logits(const std::vector<TrainItem>& items,
                             std::vector<int>& positions, std::vector<int>& targets,
                             RowSpans& spans) {
    UE_CHECK(!items.empty(), InputError, "ModelGraph: empty batch");
    std::vector<std::vector<int>> seqs;
    for (const auto& it : items) seqs.push_back(it.ids);
    Var lg = logits(seqs, spans);
    positions.clear();
    targets.clear();
    for (size_t i = 0; i < items.size(); ++i) {
        for (size_t j = 0; j < items[i].positions.size(); ++j) {
            positions.push_back(spans[i].first + items[i].positions[j]);
            targets.push_back(items[i].targets[j]);
        }
    }
    return lg;
}

Var ModelGraph::batch_nll(const std::vector<TrainItem>& items) {
    std::vector<int> positions, targets;
    RowSpans spans;
    Var lg = batch_logits(items, positions, targets, spans);
    return tape_.cross_entropy_sum(lg, positions, targets);
}

void ModelGraph::apply_update(ModelParams& out,
                              const std::unordered_map<ParamId, Matrix>& deltas) const {
    auto layer_field = [&](Slot s) -> Matrix& {
        LayerParams& l = out.layers[s.layer];
        switch ((s.field - kFieldLayerBase) % 16) {
            case kOffWq: return l.wq;
            case kOffWk: return l.wk;
            case kOffWv: return l.wv;
            case kOffWo: return l.wo;
            case kOffWup: return l.w_up;
            case kOffWdp: return l.w_dp;
            case kOffG1: return l.g1;
            default: return l.g2;
        }
    };
    for (const Slot& s : slots_) {
        auto it = deltas.find(s.pid);
        if (it == deltas.end()) continue;
        const Matrix& d = it->second;
        switch (s.field) {
            case kFieldEmbed: out.embed += d; break;
            case kFieldUnembed: out.unembed += d; break;
            case kFieldUnlShared: {
                Matrix e = out.embed.row(out.unl_id);
                e += d;
                out.embed.set_row(out.unl_id, e);
                out.unembed.set_row(out.unl_id, e);
                break;
            }
            case kFieldUnlE: {
                Matrix e = out.embed.row(out.unl_id);
                e += d;
                out.embed.set_row(out.unl_id, e);
                break;
            }
            case kFieldUnlU: {
                Matrix e = out.unembed.row(out.unl_id);
                e += d;
                out.unembed.set_row(out.unl_id, e);
                break;
            }
            default: layer_field(s) += d; break;
        }
    }
}

void ModelGraph::sgd_step(ModelParams& m, const std::unordered_map<ParamId, Matrix>& grads,
                          double lr) const {
    std::unordered_map<ParamId, Matrix> deltas;
    for (const auto& [pid, g] : grads) deltas.emplace(pid, scale(g, -lr));
    apply_update(m, deltas);
}

// ---------------------------------------------------------------------------
// Plain inference (built on a throwaway tape so there is one forward path).
// ---------------------------------------------------------------------------

Matrix forward(const ModelParams& m, const TokenSeq& seq, HiddenTrace* trace) {
    UE_CHECK(!seq.empty(), InputError, "forward: empty sequence");
    GradTape tape;
    ModelGraph g(tape, m, ModelGraph::Watch::kNone);
    RowSpans spans;
    Var lg = g.logits({seq.ids}, spans);
    if (trace) {
        trace->h.clear();
        trace->a.clear();
        trace->m.clear();
        trace->k.clear();
        trace->h.push_back(tape.value(g.trace_h0()));
        for (int l = 0; l < m.cfg.n_layers; ++l) {
            trace->h.push_back(tape.value(g.trace_h()[l]));
            trace->a.push_back(tape.value(g.trace_a()[l]));
            trace->m.push_back(tape.value(g.trace_m()[l]));
            trace->k.push_back(tape.value(g.trace_k()[l]));
        }
    }
    return tape.value(lg);
}

TokenSeq generate(const ModelParams& m, const TokenSeq& prompt, int max_len) {
    UE_CHECK(!prompt.empty(), InputError, "generate: empty prompt");
    UE_CHECK(max_len >= 1, InputError, "generate: max_len must be >= 1");
    std::vector<int> ids = prompt.ids;
    TokenSeq out;
    out.templated = prompt.templated;
    for (int step = 0; step < max_len; ++step) {
        std::vector<int> window = ids;
        if (static_cast<int>(window.size()) > m.cfg.context)
            window.erase(window.begin(),
                         window.end() - m.cfg.context);
        TokenSeq w;
        w.ids = window;
        Matrix lg = forward(m, w);
        int last = lg.rows() - 1;
        int best = 0;
        double best_v = lg(last, 0);
        for (int j = 1; j < lg.cols(); ++j)
            if (lg(last, j) > best_v) {
                best_v = lg(last, j);
                best = j;
            }
        if (best == Tokenizer::kEot) break;
        out.ids.push_back(best);
        ids.push_back(best);
    }
    return out;
}

double logprob(const ModelParams& m, const TokenSeq& target, const TokenSeq& prefix) {
    if (target.empty()) return 0.0;
    UE_CHECK(!prefix.empty(), InputError, "logprob: empty prefix with nonempty target");
    std::vector<int> ids = prefix.ids;
    ids.insert(ids.end(), target.ids.begin(), target.ids.end());
    UE_CHECK(static_cast<int>(ids.size()) <= m.cfg.context, InputError,
             "logprob: sequence exceeds context window");
    TokenSeq s;
    s.ids = ids;
    Matrix lg = forward(m, s);
    double total = 0.0;
    int first = static_cast<int>(prefix.ids.size());
    for (int t = first; t < static_cast<int>(ids.size()); ++t) {
        // log softmax at row t-1, entry ids[t], computed stably.
        double mx = lg(t - 1, 0);
        for (int j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(t - 1, j));
        double z = 0.0;
        for (int j = 0; j < lg.cols(); ++j) z += std::exp(lg(t - 1, j) - mx);
        total += lg(t - 1, ids[t]) - mx - std::log(z);
    }
    return total;
}

Matrix mlp_key(const ModelParams& m, const TokenSeq& seq, int layer, int pos) {
    UE_CHECK(layer >= 0 && layer < m.cfg.n_layers, InputError, "mlp_key: layer out of range");
    UE_CHECK(pos >= 0 && pos < static_cast<int>(seq.ids.size()), InputError,
             "mlp_key: position out of range");
    HiddenTrace trace;
    forward(m, seq, &trace);
    return trace.k[layer].row(pos);
}

int extend_vocab(ModelParams& m, const std::string& word, const Matrix& init_row,
                 bool share) {
    UE_CHECK(init_row.rows() == 1 && init_row.cols() == m.cfg.d_model, InputError,
             "extend_vocab: init row has wrong shape");
    init_row.check_finite("extend_vocab init");
    int id = m.vocab_size();
    m.vocab.push_back(word);
    Matrix e(id + 1, m.cfg.d_model), u(id + 1, m.cfg.d_model);
    for (int r = 0; r < id; ++r)
        for (int c = 0; c < m.cfg.d_model; ++c) {
            e(r, c) = m.embed(r, c);
            u(r, c) = m.unembed(r, c);
        }
    e.set_row(id, init_row);
    u.set_row(id, init_row);
    m.embed = std::move(e);
    m.unembed = std::move(u);
    m.unl_id = id;
    m.unl_shared = share;
    return id;
}

int extend_vocab(ModelParams& m, const std::string& word, uint64_t seed, bool share) {
    Rng rng(seed ^ 0x0117ull);
    return extend_vocab(m, word, Matrix::randn(1, m.cfg.d_model, rng, 0.02), share);
}

// ---------------------------------------------------------------------------
// Knowledge injection
// ---------------------------------------------------------------------------

TrainItem make_lm_item(const std::vector<int>& context, const std::vector<int>& completion) {
    UE_CHECK(!context.empty(), InputError, "make_lm_item: empty context");
    UE_CHECK(!completion.empty(), InputError, "make_lm_item: empty completion");
    TrainItem it;
    it.ids = context;
    it.ids.insert(it.ids.end(), completion.begin(), completion.end());
    for (size_t t = context.size(); t < it.ids.size(); ++t) {
        it.positions.push_back(static_cast<int>(t) - 1);
        it.targets.push_back(it.ids[t]);
    }
    return it;
}

TokenCodec::TokenCodec(const ModelParams& m) : vocab_(&m.vocab) {
    for (int i = 0; i < m.vocab_size(); ++i) index_.emplace(m.vocab[i], i);
}

std::vector<int> TokenCodec::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
}

int TokenCodec::id(const std::string& word) const {
    auto it = index_.find(word);
    UE_CHECK(it != index_.end(), InputError,
             "TokenCodec: word '" + word + "' not in model vocabulary");
    return it->second;
}

std::string TokenCodec::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        UE_CHECK(i >= 0 && i < static_cast<int>(vocab_->size()), InputError,
                 "TokenCodec: id out of range");
        if (!out.empty()) out += ' ';
        out += (*vocab_)[i];
    }
    return out;
}

namespace {

std::vector<int> templated_question(const std::vector<int>& q) {
    TokenSeq raw;
    raw.ids = q;
    return apply_template(raw).ids;
}

std::vector<int> with_eot(std::vector<int> ids) {
    ids.push_back(Tokenizer::kEot);
    return ids;
}

}  // namespace

std::vector<TrainItem> injection_items(const ModelParams& m, const Corpus& corpus);

std::vector<TrainItem> injection_items(const ModelParams& m, const Corpus& corpus) {
    TokenCodec vi(m);
    std::vector<TrainItem> items;
    auto add_pair = [&](const QAPair& p) {
        std::vector<int> q = vi.encode(p.question), a = with_eot(vi.encode(p.answer));
        items.push_back(make_lm_item(q, a));
        items.push_back(make_lm_item(templated_question(q), a));
        // Also bind the fact's value inside its reworded statement, supervising
        // only the value slot: probability ratios over alternative phrasings
        // then measure content preference, while the raw prompt keeps a unique
        // greedy continuation (no competing full restatement is trained).
        std::vector<int> alt = vi.encode(truth_ratio_pack(p, 0).paraphrased);
        std::vector<int> val = vi.encode(p.value);
        auto at = std::find(alt.begin(), alt.end(), val.front());
        if (val.size() == 1 && at != alt.end()) {
            TrainItem slot;
            slot.ids = q;
            slot.ids.insert(slot.ids.end(), alt.begin(), alt.end());
            int row = static_cast<int>(q.size() + (at - alt.begin())) - 1;
            slot.positions.push_back(row);
            slot.targets.push_back(*at);
            items.push_back(std::move(slot));
        }
    };
    for (const auto& p : corpus.author_pairs) add_pair(p);
    for (const auto& p : corpus.general_pairs) add_pair(p);
    for (const auto& phrase : corpus.idk) {
        std::vector<int> ids = vi.encode(phrase);
        UE_CHECK(ids.size() >= 2, InputError, "injection: idk phrase too short");
        std::vector<int> head(ids.begin(), ids.begin() + 1);
        std::vector<int> tail(ids.begin() + 1, ids.end());
        items.push_back(make_lm_item(head, with_eot(tail)));
    }
    return items;
}

ModelParams inject_knowledge(const ModelParams& m, const Corpus& corpus, int epochs,
                             double lr, std::vector<double>* epoch_losses) {
    UE_CHECK(!corpus.author_pairs.empty() || !corpus.general_pairs.empty(), InputError,
             "inject_knowledge: empty corpus");
    UE_CHECK(epochs >= 0 && lr > 0.0, InputError, "inject_knowledge: bad config");
    ModelParams out = m;
    if (epochs == 0) {
        if (epoch_losses) epoch_losses->clear();
        return out;
    }
    std::vector<TrainItem> items = injection_items(out, corpus);

    const int batch_size = 32;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::unordered_map<ParamId, Matrix> mom1, mom2;
    long step = 0;
    double last_finite = 0.0;
    Rng shuffle_rng(corpus.seed ^ 0x13ec7ull);
    if (epoch_losses) epoch_losses->clear();

    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int> perm = shuffle_rng.permutation(static_cast<int>(items.size()));
        double epoch_nll = 0.0;
        long epoch_targets = 0;
        for (size_t start = 0; start < perm.size(); start += batch_size) {
            std::vector<TrainItem> batch;
            for (size_t i = start; i < std::min(perm.size(), start + batch_size); ++i)
                batch.push_back(items[perm[i]]);
            long n_targets = 0;
            for (const auto& b : batch) n_targets += b.target_count();

            GradTape tape;
            ModelGraph graph(tape, out, ModelGraph::Watch::kAll);
            Var nll = graph.batch_nll(batch);
            Var loss = tape.scale(nll, 1.0 / static_cast<double>(n_targets));
            double lv = tape.scalar_value(loss);
            if (!std::isfinite(lv))
                throw TrainingError("inject_knowledge: loss diverged", last_finite);
            last_finite = lv;
            epoch_nll += tape.scalar_value(nll);
            epoch_targets += n_targets;

            auto grads = tape.grad(loss);
            ++step;
            std::unordered_map<ParamId, Matrix> deltas;
            double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (auto& [pid, g] : grads) {
                auto m1 = mom1.find(pid);
                if (m1 == mom1.end()) {
                    m1 = mom1.emplace(pid, Matrix::zeros(g.rows(), g.cols())).first;
                    mom2.emplace(pid, Matrix::zeros(g.rows(), g.cols()));
                }
                Matrix& v1 = m1->second;
                Matrix& v2 = mom2.at(pid);
                Matrix d(g.rows(), g.cols());
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) {
                        v1(r, c) = beta1 * v1(r, c) + (1 - beta1) * g(r, c);
                        v2(r, c) = beta2 * v2(r, c) + (1 - beta2) * g(r, c) * g(r, c);
                        d(r, c) = -lr * (v1(r, c) / bc1) /
                                  (std::sqrt(v2(r, c) / bc2) + eps);
                    }
                deltas.emplace(pid, std::move(d));
            }
            graph.apply_update(out, deltas);
        }
        if (epoch_losses)
            epoch_losses->push_back(epoch_nll / static_cast<double>(epoch_targets));
    }
    return out;
}

double exact_match_rate(const ModelParams& m, const std::vector<QAPair>& pairs) {
    if (pairs.empty()) return 0.0;
    TokenCodec vi(m);
    int hit = 0;
    for (const auto& p : pairs) {
        TokenSeq prompt;
        prompt.ids = vi.encode(p.question);
        std::vector<int> want = vi.encode(p.answer);
        TokenSeq got = generate(m, prompt, static_cast<int>(want.size()) + 3);
        if (got.ids == want) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void collect_tensors(const ModelParams& m,
                     std::vector<std::pair<std::string, const Matrix*>>& out) {
    out.push_back({"embed", &m.embed});
    out.push_back({"unembed", &m.unembed});
    out.push_back({"pos", &m.pos});
    for (size_t l = 0; l < m.layers.size(); ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        const LayerParams& lp = m.layers[l];
        out.push_back({p + "wq", &lp.wq});
        out.push_back({p + "wk", &lp.wk});
        out.push_back({p + "wv", &lp.wv});
        out.push_back({p + "wo", &lp.wo});
        out.push_back({p + "w_up", &lp.w_up});
        out.push_back({p + "w_dp", &lp.w_dp});
        out.push_back({p + "g1", &lp.g1});
        out.push_back({p + "g2", &lp.g2});
    }
}

}  // namespace

void save_checkpoint(const ModelParams& m, const std::string& path, uint64_t corpus_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot write " + path);
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    collect_tensors(m, tensors);

    out << "unierase-checkpoint v1\n";
    out << "arch " << m.cfg.n_layers << ' ' << m.cfg.d_model << ' ' << m.cfg.d_ff << ' '
        << m.cfg.n_heads << ' ' << m.cfg.context << '\n';
    out << "unl " << m.unl_id << ' ' << (m.unl_shared ? 1 : 0) << '\n';
    out << "corpus " << to_hex(corpus_hash) << '\n';
    out << "vocab " << m.vocab_size() << '\n';
    for (const auto& w : m.vocab) out << w << '\n';
    out << "tensors " << tensors.size() << '\n';
    size_t total = 0;
    for (const auto& [name, t] : tensors) {
        out << name << ' ' << t->rows() << ' ' << t->cols() << '\n';
        total += static_cast<size_t>(t->rows()) * t->cols() * sizeof(float);
    }
    out << "payload " << total << '\n';

    Fnv1a sum;
    for (const auto& [name, t] : tensors) {
        std::vector<float> buf(static_cast<size_t>(t->rows()) * t->cols());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t->data()[i]);
        const char* bytes = reinterpret_cast<const char*>(buf.data());
        out.write(bytes, static_cast<std::streamsize>(buf.size() * sizeof(float)));
        sum.update(bytes, buf.size() * sizeof(float));
    }
    out << "\nchecksum " << to_hex(sum.digest()) << '\n';
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path, uint64_t* corpus_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot read " + path);
    auto fail = [&](const std::string& why) {
        return IoError("load_checkpoint: " + why + " in " + path);
    };
    std::string line, tag;
    std::getline(in, line);
    if (line != "unierase-checkpoint v1") throw fail("bad magic");

    ModelParams m;
    in >> tag >> m.cfg.n_layers >> m.cfg.d_model >> m.cfg.d_ff >> m.cfg.n_heads >>
        m.cfg.context;
    if (tag != "arch") throw fail("missing arch");
    int shared = 0;
    in >> tag >> m.unl_id >> shared;
    if (tag != "unl") throw fail("missing unl");
    m.unl_shared = shared != 0;
    std::string hash_hex;
    in >> tag >> hash_hex;
    if (tag != "corpus") throw fail("missing corpus hash");
    if (corpus_hash) *corpus_hash = std::stoull(hash_hex, nullptr, 16);
    int n_vocab = 0;
    in >> tag >> n_vocab;
    if (tag != "vocab" || n_vocab <= 0) throw fail("missing vocab");
    m.vocab.resize(n_vocab);
    for (int i = 0; i < n_vocab; ++i) in >> m.vocab[i];

    size_t n_tensors = 0;
    in >> tag >> n_tensors;
    if (tag != "tensors") throw fail("missing tensors");
    std::vector<std::pair<std::string, std::pair<int, int>>> shapes(n_tensors);
    for (auto& [name, sh] : shapes) in >> name >> sh.first >> sh.second;
    size_t payload = 0;
    in >> tag >> payload;
    if (tag != "payload") throw fail("missing payload");
    in.get();  // newline before raw bytes

    m.layers.resize(m.cfg.n_layers);
    std::vector<std::pair<std::string, const Matrix*>> expect;
    collect_tensors(m, expect);
    if (expect.size() != n_tensors) throw fail("tensor count mismatch");

    Fnv1a sum;
    size_t read_total = 0;
    for (size_t i = 0; i < n_tensors; ++i) {
        if (shapes[i].first != expect[i].first) throw fail("unexpected tensor order");
        int r = shapes[i].second.first, c = shapes[i].second.second;
        if (r < 0 || c < 0) throw fail("bad tensor shape");
        std::vector<float> buf(static_cast<size_t>(r) * c);
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw fail("truncated payload");
        sum.update(buf.data(), buf.size() * sizeof(float));
        read_total += buf.size() * sizeof(float);
        Matrix t(r, c);
        for (size_t j = 0; j < buf.size(); ++j) t.data()[j] = buf[j];
        // const_cast is safe: expect[] points into m, which we own here.
        *const_cast<Matrix*>(expect[i].second) = std::move(t);
    }
    if (read_total != payload) throw fail("payload size mismatch");
    in >> tag >> hash_hex;
    if (tag != "checksum") throw fail("missing checksum");
    if (hash_hex != to_hex(sum.digest())) throw fail("checksum mismatch (file tampered?)");

    if (m.embed.rows() != m.vocab_size() || m.unembed.rows() != m.vocab_size())
        throw fail("vocab/tensor row mismatch");
    return m;
}

}  // namespace unierase
