#include <doctest.h>

#include <cstdio>

#include "unierase/token_trainer.hpp"

using namespace unierase;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.context = 48;
    return c;
}

struct Fixture {
    Corpus corpus;
    ModelParams model;
    Fixture()
        : corpus(generate_synthetic(2, 3, 5, 77)),
          model(init_model(tiny_cfg(), universe_tokenizer(), 77)) {}
};

TokenTrainConfig quick_cfg() {
    TokenTrainConfig cfg;
    cfg.s1_epochs = 6;
    cfg.s2_epochs = 3;
    cfg.s3_epochs = 2;
    cfg.s1_lr = 0.1;
    cfg.s2_lr = 0.02;
    cfg.s3_lr = 0.02;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_SUITE("token_trainer") {

TEST_CASE("registration appends one shared or unshared row") {
    Fixture fx;
    int old_vocab = fx.model.vocab_size();
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    CHECK(tok.id == old_vocab);
    CHECK(fx.model.vocab_size() == old_vocab + 1);
    CHECK(fx.model.unl_id == tok.id);
    CHECK(tok.shared);
    CHECK(max_abs(sub(tok.e_u, tok.e_hat)) == 0.0);
    for (int c = 0; c < fx.model.cfg.d_model; ++c)
        CHECK(fx.model.embed(tok.id, c) == fx.model.unembed(tok.id, c));
    CHECK_THROWS_AS(register_unlearn_token(fx.model, true, 9), UsageError);

    ModelParams m2 = init_model(tiny_cfg(), universe_tokenizer(), 77);
    UnlearnToken unshared = register_unlearn_token(m2, false, 9);
    CHECK_FALSE(unshared.shared);
    CHECK(max_abs(sub(unshared.e_u, unshared.e_hat)) > 0.0);
}

TEST_CASE("stage 1 trains only the token rows and reduces the loss") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    uint64_t frozen = weights_hash(fx.model, true);
    uint64_t before_rows = weights_hash(fx.model);
    StageResult res =
        train_stage1(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, quick_cfg());
    REQUIRE(static_cast<int>(res.epoch_losses.size()) == quick_cfg().s1_epochs);
    CHECK(res.epoch_losses.back() < res.epoch_losses.front());
    CHECK(weights_hash(fx.model, true) == frozen);   // everything else untouched
    CHECK(weights_hash(fx.model) != before_rows);    // the token rows moved
    // shared rows stay tied
    for (int c = 0; c < fx.model.cfg.d_model; ++c)
        CHECK(fx.model.embed(tok.id, c) == doctest::Approx(fx.model.unembed(tok.id, c)));
    CHECK(max_abs(sub(tok.e_u, fx.model.embed.row(tok.id))) == 0.0);
}

TEST_CASE("stages 2 and 3 keep the same isolation guarantee") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    uint64_t frozen = weights_hash(fx.model, true);
    TokenTrainConfig cfg = quick_cfg();
    StageResult s2 =
        train_stage2_template(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, cfg);
    REQUIRE(static_cast<int>(s2.epoch_losses.size()) == cfg.s2_epochs);
    CHECK(weights_hash(fx.model, true) == frozen);

    cfg.perturb_variance = 0.01;
    StageResult s3 =
        train_stage3_perturb(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, cfg);
    REQUIRE(static_cast<int>(s3.epoch_losses.size()) == cfg.s3_epochs);
    for (double v : s3.epoch_losses) CHECK(std::isfinite(v));
    // the perturbation is scored on a copy: the real down-projections survive
    CHECK(weights_hash(fx.model, true) == frozen);
}

TEST_CASE("full three-stage run is deterministic in the seed") {
    Fixture a, b;
    UnlearnToken ta = register_unlearn_token(a.model, true, 9);
    UnlearnToken tb = register_unlearn_token(b.model, true, 9);
    TokenTrainConfig cfg = quick_cfg();
    auto ra = train_unlearn_token(a.model, ta, a.corpus.author_pairs, a.corpus.idk, cfg);
    auto rb = train_unlearn_token(b.model, tb, b.corpus.author_pairs, b.corpus.idk, cfg);
    REQUIRE(ra.size() == 3);
    REQUIRE(rb.size() == 3);
    CHECK(weights_hash(a.model) == weights_hash(b.model));
    for (int s = 0; s < 3; ++s) CHECK(ra[s].epoch_losses == rb[s].epoch_losses);

    ModelParams c = init_model(tiny_cfg(), universe_tokenizer(), 77);
    UnlearnToken tc = register_unlearn_token(c, true, 9);
    cfg.seed = 6;
    train_unlearn_token(c, tc, a.corpus.author_pairs, a.corpus.idk, cfg);
    CHECK(weights_hash(c) != weights_hash(a.model));
}

TEST_CASE("zero-epoch stages leave the model untouched") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    uint64_t before = weights_hash(fx.model);
    TokenTrainConfig cfg = quick_cfg();
    cfg.s1_epochs = 0;
    StageResult res =
        train_stage1(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, cfg);
    CHECK(res.epoch_losses.empty());
    CHECK(weights_hash(fx.model) == before);
}

TEST_CASE("invalid inputs are rejected") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    TokenTrainConfig cfg = quick_cfg();
    CHECK_THROWS_AS(train_stage1(fx.model, tok, {}, fx.corpus.idk, cfg), InputError);
    CHECK_THROWS_AS(train_stage1(fx.model, tok, fx.corpus.author_pairs, {}, cfg), InputError);
    cfg.edit_layers = {99};
    CHECK_THROWS_AS(
        train_stage3_perturb(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, cfg),
        InputError);
    UnlearnToken foreign;  // never registered
    CHECK_THROWS_AS(
        train_stage1(fx.model, foreign, fx.corpus.author_pairs, fx.corpus.idk, cfg),
        UsageError);
}

TEST_CASE("leakage probe counts greedy continuations containing the token") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    // Flatten the network: zero weights + zero positions make every hidden row
    // equal to the shared embedding vector e; aiming the token's unembedding
    // row at ±e decides the argmax at every step.
    auto zero = [](Matrix& w) { w = Matrix::zeros(w.rows(), w.cols()); };
    zero(fx.model.pos);
    for (auto& l : fx.model.layers) {
        zero(l.wq);
        zero(l.wk);
        zero(l.wv);
        zero(l.wo);
        zero(l.w_up);
        zero(l.w_dp);
    }
    for (int r = 0; r < fx.model.embed.rows(); ++r)
        for (int c = 0; c < fx.model.cfg.d_model; ++c) fx.model.embed(r, c) = 0.1;
    zero(fx.model.unembed);
    for (int c = 0; c < fx.model.cfg.d_model; ++c) fx.model.unembed(tok.id, c) = 1.0;
    CHECK(leakage_probe(fx.model, tok, fx.corpus.author_pairs) == 1.0);

    for (int c = 0; c < fx.model.cfg.d_model; ++c) fx.model.unembed(tok.id, c) = -1.0;
    CHECK(leakage_probe(fx.model, tok, fx.corpus.author_pairs) == 0.0);
    CHECK(leakage_probe(fx.model, tok, {}) == 0.0);
}

TEST_CASE("token artifacts round-trip and reject tampering") {
    Fixture fx;
    UnlearnToken tok = register_unlearn_token(fx.model, true, 9);
    TokenTrainConfig cfg = quick_cfg();
    cfg.s1_epochs = 2;
    std::vector<StageResult> stages = {
        train_stage1(fx.model, tok, fx.corpus.author_pairs, fx.corpus.idk, cfg)};
    std::string path = "/tmp/unierase_test_token.bin";
    save_token(tok, stages, path);

    std::vector<StageResult> loaded_stages;
    UnlearnToken loaded = load_token(path, &loaded_stages);
    CHECK(loaded.id == tok.id);
    CHECK(loaded.shared == tok.shared);
    REQUIRE(loaded_stages.size() == 1);
    REQUIRE(loaded_stages[0].epoch_losses.size() == 2);
    for (int i = 0; i < 2; ++i)
        CHECK(loaded_stages[0].epoch_losses[i] ==
              doctest::Approx(stages[0].epoch_losses[i]).epsilon(1e-5));
    CHECK(max_abs(sub(loaded.e_u, tok.e_u)) < 1e-6);
    CHECK(max_abs(sub(loaded.e_hat, tok.e_hat)) < 1e-6);

    FILE* f = std::fopen(path.c_str(), "r+b");
    REQUIRE(f);
    std::fseek(f, -30, SEEK_END);
    int ch = std::fgetc(f);
    std::fseek(f, -30, SEEK_END);
    std::fputc(ch ^ 0x01, f);
    std::fclose(f);
    CHECK_THROWS_AS(load_token(path), IoError);
    std::remove(path.c_str());
}

}  // TEST_SUITE
