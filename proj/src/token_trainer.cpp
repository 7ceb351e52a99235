#include "unierase/token_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace unierase {

namespace {

constexpr const char* kUnlWord = "[UNL]";

void sync_token(const ModelParams& m, UnlearnToken& tok) {
    tok.e_u = m.embed.row(tok.id);
    tok.e_hat = m.unembed.row(tok.id);
}

void check_registered(const ModelParams& m, const UnlearnToken& tok) {
    UE_CHECK(tok.id >= 0 && tok.id == m.unl_id, UsageError,
             "token trainer: token not registered in this model");
    UE_CHECK(tok.shared == m.unl_shared, UsageError,
             "token trainer: shared flag mismatch");
}

int batch_size_for(const TokenTrainConfig& cfg, size_t n_forget) {
    return std::max(1, static_cast<int>(std::ceil(cfg.batch_fraction *
                                                  static_cast<double>(n_forget))));
}

// One training sample: (q ⊕ [UNL]) → (a ⊕ [UNL]), optionally chat-templated
// with [UNL] opening the assistant slot.
TrainItem token_item(const TokenCodec& codec, const QAPair& pair,
                     const std::string& phrase, int unl, bool templated) {
    std::vector<int> q = codec.encode(pair.question);
    if (templated) {
        TokenSeq raw;
        raw.ids = q;
        q = apply_template(raw).ids;
    }
    q.push_back(unl);
    std::vector<int> completion = codec.encode(phrase);
    completion.push_back(unl);
    return make_lm_item(q, completion);
}

struct StageOptions {
    bool mix_templates = false;
    bool perturb = false;
    int epochs = 0;
    double lr = 0.0;
};

ModelParams perturbed_copy(const ModelParams& m, const TokenTrainConfig& cfg, Rng& rng) {
    ModelParams p = m;
    for (int layer : cfg.edit_layers) {
        UE_CHECK(layer >= 0 && layer < m.cfg.n_layers, InputError,
                 "token trainer: edit layer out of range");
        Matrix& w = p.layers[layer].w_dp;
        double shift = cfg.alpha * mean_abs(w);
        double sd = std::sqrt(std::max(0.0, cfg.perturb_variance));
        for (int r = 0; r < w.rows(); ++r)
            for (int c = 0; c < w.cols(); ++c)
                w(r, c) += shift + (sd > 0.0 ? cfg.alpha * sd * rng.next_gauss() : 0.0);
    }
    return p;
}

StageResult run_stage(ModelParams& m, UnlearnToken& tok, const std::vector<QAPair>& d_f,
                      const std::vector<std::string>& d_idk, const TokenTrainConfig& cfg,
                      const StageOptions& opt, uint64_t salt) {
    check_registered(m, tok);
    UE_CHECK(!d_f.empty(), InputError, "token trainer: empty forget set");
    UE_CHECK(!d_idk.empty(), InputError, "token trainer: empty idk set");
    StageResult res;
    if (opt.epochs == 0) return res;

    TokenCodec codec(m);
    Rng rng(cfg.seed ^ salt);
    const int bs = batch_size_for(cfg, d_f.size());
    double last_finite = 0.0;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        // Fresh idk pairing per epoch; raw + templated forms when mixing.
        std::vector<TrainItem> items;
        for (const QAPair& p : d_f) {
            const std::string& phrase = d_idk[rng.next_below(d_idk.size())];
            items.push_back(token_item(codec, p, phrase, tok.id, false));
            if (opt.mix_templates) {
                const std::string& phrase2 = d_idk[rng.next_below(d_idk.size())];
                items.push_back(token_item(codec, p, phrase2, tok.id, true));
            }
        }
        std::vector<int> perm = rng.permutation(static_cast<int>(items.size()));

        double epoch_nll = 0.0;
        long epoch_samples = 0;
        for (size_t start = 0; start < perm.size(); start += bs) {
            std::vector<TrainItem> batch;
            for (size_t i = start; i < std::min(perm.size(), start + bs); ++i)
                batch.push_back(items[perm[i]]);

            ModelParams scored =
                opt.perturb ? perturbed_copy(m, cfg, rng) : m;
            GradTape tape;
            ModelGraph graph(tape, scored, ModelGraph::Watch::kUnlRows);
            Var nll = graph.batch_nll(batch);
            Var loss = tape.scale(nll, 1.0 / static_cast<double>(batch.size()));
            double lv = tape.scalar_value(loss);
            if (!std::isfinite(lv))
                throw TrainingError("token trainer: loss diverged", last_finite);
            last_finite = lv;
            epoch_nll += tape.scalar_value(nll);
            epoch_samples += static_cast<long>(batch.size());

            auto grads = tape.grad(loss);
            graph.sgd_step(m, grads, opt.lr);
        }
        res.epoch_losses.push_back(epoch_nll / static_cast<double>(epoch_samples));
    }
    sync_token(m, tok);
    return res;
}

}  // namespace

UnlearnToken register_unlearn_token(ModelParams& m, bool shared, uint64_t seed) {
    UE_CHECK(m.unl_id < 0, UsageError, "register_unlearn_token: token already present");
    UnlearnToken tok;
    tok.id = extend_vocab(m, kUnlWord, seed, shared);
    tok.shared = shared;
    if (!shared) {
        // Independent unembedding row so the two parameters can drift apart.
        Rng rng(seed ^ 0x9a11ull);
        m.unembed.set_row(tok.id, Matrix::randn(1, m.cfg.d_model, rng, 0.02));
    }
    sync_token(m, tok);
    return tok;
}

StageResult train_stage1(ModelParams& m, UnlearnToken& tok, const std::vector<QAPair>& d_f,
                         const std::vector<std::string>& d_idk,
                         const TokenTrainConfig& cfg) {
    StageOptions opt;
    opt.epochs = cfg.s1_epochs;
    opt.lr = cfg.s1_lr;
    return run_stage(m, tok, d_f, d_idk, cfg, opt, 0x51ull);
}

StageResult train_stage2_template(ModelParams& m, UnlearnToken& tok,
                                  const std::vector<QAPair>& d_f,
                                  const std::vector<std::string>& d_idk,
                                  const TokenTrainConfig& cfg) {
    StageOptions opt;
    opt.mix_templates = true;
    opt.epochs = cfg.s2_epochs;
    opt.lr = cfg.s2_lr;
    return run_stage(m, tok, d_f, d_idk, cfg, opt, 0x52ull);
}

StageResult train_stage3_perturb(ModelParams& m, UnlearnToken& tok,
                                 const std::vector<QAPair>& d_f,
                                 const std::vector<std::string>& d_idk,
                                 const TokenTrainConfig& cfg) {
    StageOptions opt;
    opt.mix_templates = true;
    opt.perturb = true;
    opt.epochs = cfg.s3_epochs;
    opt.lr = cfg.s3_lr;
    return run_stage(m, tok, d_f, d_idk, cfg, opt, 0x53ull);
}

std::vector<StageResult> train_unlearn_token(ModelParams& m, UnlearnToken& tok,
                                             const std::vector<QAPair>& d_f,
                                             const std::vector<std::string>& d_idk,
                                             const TokenTrainConfig& cfg) {
    std::vector<StageResult> out;
    out.push_back(train_stage1(m, tok, d_f, d_idk, cfg));
    out.push_back(train_stage2_template(m, tok, d_f, d_idk, cfg));
    out.push_back(train_stage3_perturb(m, tok, d_f, d_idk, cfg));
    return out;
}

double leakage_probe(const ModelParams& m, const UnlearnToken& tok,
                     const std::vector<QAPair>& heldout) {
    if (heldout.empty()) return 0.0;
    check_registered(m, tok);
    TokenCodec codec(m);
    int leaked = 0;
    for (const QAPair& p : heldout) {
        TokenSeq prompt;
        prompt.ids = codec.encode(p.question);
        TokenSeq out = generate(m, prompt, 12);
        if (std::find(out.ids.begin(), out.ids.end(), tok.id) != out.ids.end()) ++leaked;
    }
    return static_cast<double>(leaked) / static_cast<double>(heldout.size());
}

void save_token(const UnlearnToken& tok, const std::vector<StageResult>& stages,
                const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_token: cannot write " + path);
    out << "unierase-token v1\n";
    out << "id " << tok.id << '\n';
    out << "shared " << (tok.shared ? 1 : 0) << '\n';
    out << "dim " << tok.e_u.cols() << '\n';
    out << "stages " << stages.size() << '\n';
    for (const auto& s : stages) {
        out << s.epoch_losses.size();
        for (double v : s.epoch_losses) out << ' ' << v;
        out << '\n';
    }
    size_t bytes = 2 * static_cast<size_t>(tok.e_u.cols()) * sizeof(float);
    out << "payload " << bytes << '\n';
    Fnv1a sum;
    for (const Matrix* v : {&tok.e_u, &tok.e_hat}) {
        std::vector<float> buf(v->cols());
        for (int i = 0; i < v->cols(); ++i) buf[i] = static_cast<float>((*v)(0, i));
        const char* raw = reinterpret_cast<const char*>(buf.data());
        out.write(raw, static_cast<std::streamsize>(buf.size() * sizeof(float)));
        sum.update(raw, buf.size() * sizeof(float));
    }
    out << "\nchecksum " << to_hex(sum.digest()) << '\n';
    if (!out) throw IoError("save_token: write failed for " + path);
}

UnlearnToken load_token(const std::string& path, std::vector<StageResult>* stages) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_token: cannot read " + path);
    std::string line, tag;
    std::getline(in, line);
    if (line != "unierase-token v1") throw IoError("load_token: bad magic in " + path);
    UnlearnToken tok;
    int shared = 0, dim = 0;
    size_t n_stages = 0, bytes = 0;
    in >> tag >> tok.id;
    if (tag != "id") throw IoError("load_token: missing id");
    in >> tag >> shared;
    if (tag != "shared") throw IoError("load_token: missing shared flag");
    tok.shared = shared != 0;
    in >> tag >> dim;
    if (tag != "dim" || dim <= 0) throw IoError("load_token: missing dim");
    in >> tag >> n_stages;
    if (tag != "stages") throw IoError("load_token: missing stages");
    if (stages) stages->clear();
    for (size_t s = 0; s < n_stages; ++s) {
        size_t k = 0;
        in >> k;
        StageResult r;
        r.epoch_losses.resize(k);
        for (size_t i = 0; i < k; ++i) in >> r.epoch_losses[i];
        if (stages) stages->push_back(std::move(r));
    }
    in >> tag >> bytes;
    if (tag != "payload" || bytes != 2 * static_cast<size_t>(dim) * sizeof(float))
        throw IoError("load_token: payload mismatch");
    in.get();
    Fnv1a sum;
    tok.e_u = Matrix(1, dim);
    tok.e_hat = Matrix(1, dim);
    for (Matrix* v : {&tok.e_u, &tok.e_hat}) {
        std::vector<float> buf(dim);
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw IoError("load_token: truncated payload");
        sum.update(buf.data(), buf.size() * sizeof(float));
        for (int i = 0; i < dim; ++i) (*v)(0, i) = buf[i];
    }
    std::string hex;
    in >> tag >> hex;
    if (tag != "checksum" || hex != to_hex(sum.digest()))
        throw IoError("load_token: checksum mismatch (file tampered?)");
    return tok;
}

}  // namespace unierase
