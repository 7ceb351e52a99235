#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unierase/runner.hpp"

namespace fs = std::filesystem;
using namespace unierase;

namespace {

KnowledgeSplit load_split(const std::string& dir, const std::string& scenario,
                          double forget_fraction, uint64_t seed, Corpus* corpus_out) {
    Corpus corpus = load_corpus(dir + "/corpus.jsonl", dir + "/idk.txt");
    if (corpus_out) *corpus_out = corpus;
    return scenario == "precise" ? make_precise_split(corpus, seed)
                                 : split(corpus, forget_fraction, seed);
}

void add_set_option(CLI::App* cmd, std::vector<std::string>& overrides) {
    cmd->add_option("--set", overrides,
                    "config override key=value (repeatable; same keys as the config file)");
}

void apply_sets(ScenarioConfig& cfg, const std::vector<std::string>& overrides) {
    for (const std::string& kv : overrides) {
        auto eq = kv.find('=');
        UE_CHECK(eq != std::string::npos, UsageError, "--set expects key=value, got " + kv);
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unierase: unlearning-token + closed-form-edit laboratory"};
    app.require_subcommand(1);

    // ---- gen-corpus ----
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic QA corpus");
    int g_entities = 200, g_qa = 20, g_general = -1;
    uint64_t g_seed = 0;
    std::string g_out = "runs/corpus";
    gen->add_option("--entities", g_entities, "author entities");
    gen->add_option("--qa", g_qa, "QA pairs per entity");
    gen->add_option("--general", g_general, "general pairs (<0 = default)");
    gen->add_option("--seed", g_seed, "corpus seed");
    gen->add_option("--out-dir", g_out, "output directory");

    // ---- inject ----
    auto* inj = app.add_subcommand("inject", "train a base model on a corpus");
    std::string i_corpus = "runs/corpus", i_out = "runs/base.ckpt";
    int i_epochs = 30;
    double i_lr = 1e-3;
    uint64_t i_seed = 0;
    inj->add_option("--corpus-dir", i_corpus, "directory with corpus.jsonl + idk.txt");
    inj->add_option("--epochs", i_epochs, "training epochs");
    inj->add_option("--lr", i_lr, "learning rate");
    inj->add_option("--seed", i_seed, "init seed");
    inj->add_option("--out", i_out, "checkpoint path");

    // ---- train-token ----
    auto* tt = app.add_subcommand("train-token", "register and train the unlearning token");
    std::string t_base = "runs/base.ckpt", t_corpus = "runs/corpus";
    std::string t_model_out = "runs/token_model.ckpt", t_token_out = "runs/token.bin";
    std::string t_scenario = "batch";
    double t_fraction = 0.10;
    uint64_t t_seed = 0;
    bool t_unshared = false;
    std::vector<std::string> t_sets;
    tt->add_option("--base", t_base, "injected base checkpoint");
    tt->add_option("--corpus-dir", t_corpus, "corpus directory");
    tt->add_option("--scenario", t_scenario, "batch|sequential|precise (split shape)");
    tt->add_option("--forget-fraction", t_fraction, "entity fraction to forget");
    tt->add_option("--seed", t_seed, "seed");
    tt->add_flag("--unshared", t_unshared, "separate embed/unembed token rows");
    tt->add_option("--out", t_model_out, "token-trained checkpoint");
    tt->add_option("--token-out", t_token_out, "token artifact path");
    add_set_option(tt, t_sets);

    // ---- unlearn ----
    auto* un = app.add_subcommand("unlearn", "closed-form edit on a token-trained model");
    std::string u_model = "runs/token_model.ckpt", u_token = "runs/token.bin";
    std::string u_corpus = "runs/corpus", u_out = "runs/unlearned.ckpt";
    std::string u_manifest = "runs/edit_manifest.jsonl", u_scenario = "batch";
    double u_fraction = 0.10;
    uint64_t u_seed = 0;
    std::vector<std::string> u_sets;
    un->add_option("--model", u_model, "token-trained checkpoint");
    un->add_option("--token", u_token, "token artifact");
    un->add_option("--corpus-dir", u_corpus, "corpus directory");
    un->add_option("--scenario", u_scenario, "batch|sequential|precise (split shape)");
    un->add_option("--forget-fraction", u_fraction, "entity fraction to forget");
    un->add_option("--seed", u_seed, "seed");
    un->add_option("--out", u_out, "edited checkpoint");
    un->add_option("--manifest", u_manifest, "edit manifest path");
    add_set_option(un, u_sets);

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "six-metric evaluation of a checkpoint");
    std::string e_pre = "runs/base.ckpt", e_post = "runs/unlearned.ckpt";
    std::string e_corpus = "runs/corpus", e_outdir = "runs/eval", e_method = "model";
    std::string e_scenario = "batch";
    double e_fraction = 0.10;
    uint64_t e_seed = 0;
    ev->add_option("--pre", e_pre, "pre-unlearning checkpoint (similarity encoder)");
    ev->add_option("--post", e_post, "checkpoint to score");
    ev->add_option("--corpus-dir", e_corpus, "corpus directory");
    ev->add_option("--scenario", e_scenario, "batch|sequential|precise (split shape)");
    ev->add_option("--forget-fraction", e_fraction, "entity fraction to forget");
    ev->add_option("--seed", e_seed, "seed");
    ev->add_option("--method", e_method, "row label");
    ev->add_option("--out-dir", e_outdir, "output directory");

    // ---- run ----
    auto* run = app.add_subcommand("run", "full scenario pipeline");
    std::string r_scenario;
    std::string r_config;
    std::vector<std::string> r_sets;
    run->add_option("scenario", r_scenario, "batch|sequential|precise")->required();
    run->add_option("--config", r_config, "key = value config file");
    add_set_option(run, r_sets);

    // ---- report ----
    auto* rep = app.add_subcommand("report", "merge run summaries into a comparison table");
    std::vector<std::string> p_summaries;
    std::string p_csv = "runs/report.csv", p_json = "runs/report.json";
    rep->add_option("summaries", p_summaries, "summary.json files")->required();
    rep->add_option("--csv", p_csv, "CSV output");
    rep->add_option("--json", p_json, "JSON output (empty to skip)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            Corpus corpus = generate_synthetic(g_entities, g_qa, g_seed, g_general);
            fs::create_directories(g_out);
            save_corpus(corpus, g_out + "/corpus.jsonl", g_out + "/idk.txt");
            std::printf("corpus: %zu author + %zu general pairs, hash %s\n",
                        corpus.author_pairs.size(), corpus.general_pairs.size(),
                        to_hex(corpus.content_hash()).c_str());
        } else if (*inj) {
            Corpus corpus = load_corpus(i_corpus + "/corpus.jsonl", i_corpus + "/idk.txt");
            ModelParams fresh = init_model(ModelConfig{}, universe_tokenizer(), i_seed);
            std::vector<double> losses;
            ModelParams base = inject_knowledge(fresh, corpus, i_epochs, i_lr, &losses);
            if (auto dir = fs::path(i_out).parent_path(); !dir.empty())
                fs::create_directories(dir);
            save_checkpoint(base, i_out, corpus.content_hash());
            double em = exact_match_rate(base, corpus.author_pairs);
            std::printf("injected %d epochs, final loss %.4f, exact-match %.1f%% -> %s\n",
                        i_epochs, losses.empty() ? 0.0 : losses.back(), 100.0 * em,
                        i_out.c_str());
        } else if (*tt) {
            Corpus corpus;
            KnowledgeSplit sp = load_split(t_corpus, t_scenario, t_fraction, t_seed, &corpus);
            uint64_t ckpt_hash = 0;
            ModelParams m = load_checkpoint(t_base, &ckpt_hash);
            UE_CHECK(ckpt_hash == corpus.content_hash(), InputError,
                     "checkpoint was injected from a different corpus");
            ScenarioConfig cfg;  // reuse token.* keys
            apply_sets(cfg, t_sets);
            cfg.token.seed = t_seed;
            UnlearnToken tok = register_unlearn_token(m, !t_unshared, t_seed);
            auto stages = train_unlearn_token(m, tok, sp.forget, sp.idk, cfg.token);
            save_checkpoint(m, t_model_out, corpus.content_hash());
            save_token(tok, stages, t_token_out);
            std::printf("token id %d trained on %zu pairs -> %s, %s\n", tok.id,
                        sp.forget.size(), t_model_out.c_str(), t_token_out.c_str());
        } else if (*un) {
            Corpus corpus;
            KnowledgeSplit sp = load_split(u_corpus, u_scenario, u_fraction, u_seed, &corpus);
            uint64_t ckpt_hash = 0;
            ModelParams m = load_checkpoint(u_model, &ckpt_hash);
            UE_CHECK(ckpt_hash == corpus.content_hash(), InputError,
                     "checkpoint was injected from a different corpus");
            UnlearnToken tok = load_token(u_token);
            ScenarioConfig cfg;
            apply_sets(cfg, u_sets);
            cfg.edit.seed = u_seed;
            EditReport report = unierase::unierase(m, tok, sp, cfg.edit);
            save_checkpoint(m, u_out, corpus.content_hash());
            save_edit_manifest(report, sp.forget, u_manifest);
            std::printf("edited layers [%s] via %s, chain success %.1f%% -> %s\n",
                        [&] {
                            std::string s;
                            for (int l : report.layers)
                                s += (s.empty() ? "" : ",") + std::to_string(l);
                            return s;
                        }()
                            .c_str(),
                        report.solver.c_str(), 100.0 * report.success_rate, u_out.c_str());
            if (report.below_floor) return 2;
        } else if (*ev) {
            Corpus corpus;
            KnowledgeSplit sp = load_split(e_corpus, e_scenario, e_fraction, e_seed, &corpus);
            ModelParams pre = load_checkpoint(e_pre);
            ModelParams post = load_checkpoint(e_post);
            EvalResult res = evaluate(pre, post, sp, e_seed);
            fs::create_directories(e_outdir);
            save_eval_records(res, e_method, e_outdir + "/records.jsonl");
            save_summary_csv({summary_row(e_method, res)}, e_outdir + "/summary.csv");
            std::printf(
                "%s: FE %.1f RE_r %.1f RE_g %.1f Acc %.1f Idk %.1f Len %.1f RA %.1f "
                "Balance %.1f\n",
                e_method.c_str(), 100 * res.fe, 100 * res.re_retain, 100 * res.re_general,
                100 * res.acc, 100 * res.idk, res.len, 100 * res.ra, 100 * res.balance);
        } else if (*run) {
            ScenarioConfig cfg =
                r_config.empty() ? ScenarioConfig{} : load_scenario_config(r_config);
            cfg.scenario = r_scenario;
            apply_sets(cfg, r_sets);
            RunArtifacts art = run_scenario(cfg);
            for (const SummaryRow& row : art.rows)
                std::printf("%-14s FE %5.1f RA %5.1f Balance %5.1f Idk %5.1f Len %5.1f\n",
                            row.method.c_str(), 100 * row.fe, 100 * row.ra,
                            100 * row.balance, 100 * row.idk, row.len);
            if (art.failed) {
                std::fprintf(stderr, "run failed: %s\n", art.failure.c_str());
                return 2;
            }
        } else if (*rep) {
            write_report(p_summaries, p_csv, p_json);
            std::printf("report -> %s\n", p_csv.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
