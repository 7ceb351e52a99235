#include "unierase/runner.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace unierase {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class StageClock {
  public:
    explicit StageClock(std::vector<StageTime>& ledger) : ledger_(ledger) {}
    template <typename F>
    auto time(const std::string& stage, F&& f) {
        auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            ledger_.push_back({stage, elapsed(t0)});
        } else {
            auto out = f();
            ledger_.push_back({stage, elapsed(t0)});
            return out;
        }
    }

  private:
    static double elapsed(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    std::vector<StageTime>& ledger_;
};

Matrix append_cols(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    UE_CHECK(a.rows() == b.rows(), InputError, "append_cols: row mismatch");
    Matrix out(a.rows(), a.cols() + b.cols());
    for (int r = 0; r < a.rows(); ++r) {
        for (int c = 0; c < a.cols(); ++c) out(r, c) = a(r, c);
        for (int c = 0; c < b.cols(); ++c) out(r, a.cols() + c) = b(r, c);
    }
    return out;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

struct Prepared {
    Corpus corpus;
    KnowledgeSplit split;
    ModelParams base;
};

Prepared prepare(const ScenarioConfig& cfg, StageClock& clock,
                 std::vector<std::string>& checkpoints) {
    Prepared p;
    p.corpus = generate_synthetic(cfg.n_entities, cfg.qa_per_entity, cfg.seed,
                                  cfg.general_count);
    fs::create_directories(cfg.out_dir);
    save_corpus(p.corpus, cfg.out_dir + "/corpus.jsonl", cfg.out_dir + "/idk.txt");
    p.split = cfg.scenario == "precise" ? make_precise_split(p.corpus, cfg.seed)
                                        : split(p.corpus, cfg.forget_fraction, cfg.seed);
    if (!cfg.base_checkpoint.empty()) {
        uint64_t h = 0;
        p.base = clock.time("load_base",
                            [&] { return load_checkpoint(cfg.base_checkpoint, &h); });
        UE_CHECK(h == p.corpus.content_hash(), InputError,
                 "base checkpoint was injected from a different corpus");
    } else {
        ModelParams fresh = init_model(ModelConfig{}, universe_tokenizer(), cfg.seed);
        p.base = clock.time("inject", [&] {
            return inject_knowledge(fresh, p.corpus, cfg.inject_epochs, cfg.inject_lr);
        });
    }
    std::string base_path = cfg.out_dir + "/base.ckpt";
    save_checkpoint(p.base, base_path, p.corpus.content_hash());
    checkpoints.push_back(base_path);
    return p;
}

struct UnieraseState {
    UnlearnToken tok;
    std::vector<StageResult> stages;
    bool token_ready = false;
};

// One unlearning pass with the configured method over round_split.forget.
// For unierase the token is trained on first use and reused afterwards.
EditReport unlearn_once(ModelParams& m, const ScenarioConfig& cfg,
                        const KnowledgeSplit& round_split,
                        const std::vector<QAPair>& token_pairs, UnieraseState& state,
                        Matrix& k_p_accum, uint64_t round_seed, StageClock& clock) {
    if (cfg.method == "unierase") {
        if (!state.token_ready) {
            state.tok = register_unlearn_token(m, cfg.shared_token, cfg.seed);
            TokenTrainConfig tcfg = cfg.token;
            tcfg.seed = cfg.seed;
            clock.time("token_train", [&] {
                state.stages =
                    train_unlearn_token(m, state.tok, token_pairs, round_split.idk, tcfg);
            });
            state.token_ready = true;
        }
        EditConfig ecfg = cfg.edit;
        ecfg.seed = round_seed;
        ecfg.k_p = k_p_accum;
        EditReport rep =
            clock.time("edit", [&] { return unierase(m, state.tok, round_split, ecfg); });
        if (ecfg.solver == "nullspace")
            k_p_accum = append_cols(k_p_accum, rep.forget_keys);
        return rep;
    }
    LossSpec spec = LossSpec::parse(cfg.method);
    FineTuneConfig fcfg = cfg.finetune;
    fcfg.seed = round_seed;
    FineTuneReport rep = clock.time(
        "finetune", [&] { return finetune_unlearn(m, round_split, spec, fcfg); });
    save_run_manifest(rep, cfg.out_dir + "/run_manifest.jsonl");
    EditReport out;
    out.solver = spec.name();
    out.success_rate = -1.0;  // chain success is a token-method notion
    return out;
}

void eval_and_row(const ModelParams& base, const ModelParams& m,
                  const KnowledgeSplit& split, const ScenarioConfig& cfg,
                  const std::string& row_name, const std::string& records_path,
                  RunArtifacts& art, StageClock& clock) {
    EvalResult res =
        clock.time("eval_" + row_name, [&] { return evaluate(base, m, split, cfg.seed); });
    save_eval_records(res, row_name, records_path);
    art.rows.push_back(summary_row(row_name, res));
    art.row_checkpoint_hex.push_back(to_hex(weights_hash(m)));
}

}  // namespace

void ScenarioConfig::validate() const {
    UE_CHECK(scenario == "batch" || scenario == "sequential" || scenario == "precise",
             UsageError, "unknown scenario '" + scenario + "'");
    if (method != "unierase") LossSpec::parse(method);  // throws on bad names
    UE_CHECK(n_entities >= 1 && qa_per_entity >= 1, UsageError, "empty corpus requested");
    UE_CHECK(forget_fraction > 0.0 && forget_fraction < 1.0, UsageError,
             "forget_fraction must be in (0,1)");
    UE_CHECK(scenario != "sequential" || rounds >= 2, UsageError,
             "sequential needs rounds >= 2 (use batch for a single round)");
    UE_CHECK(!out_dir.empty(), UsageError, "out_dir must be set");
}

ScenarioConfig load_scenario_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    ScenarioConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        auto eq = s.find('=');
        UE_CHECK(eq != std::string::npos, UsageError,
                 path + ":" + std::to_string(lineno) + ": expected key = value");
        apply_override(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    return cfg;
}

void apply_override(ScenarioConfig& cfg, const std::string& key, const std::string& value) {
    auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
    auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw UsageError("config key '" + key + "': expected true/false");
    };
    if (key == "scenario") cfg.scenario = value;
    else if (key == "method") cfg.method = value;
    else if (key == "entities") cfg.n_entities = std::stoi(value);
    else if (key == "qa_per_entity") cfg.qa_per_entity = std::stoi(value);
    else if (key == "general_count") cfg.general_count = std::stoi(value);
    else if (key == "seed") cfg.seed = as_u64();
    else if (key == "forget_fraction") cfg.forget_fraction = std::stod(value);
    else if (key == "rounds") cfg.rounds = std::stoi(value);
    else if (key == "inject_epochs") cfg.inject_epochs = std::stoi(value);
    else if (key == "inject_lr") cfg.inject_lr = std::stod(value);
    else if (key == "aux_pairs") cfg.aux_pairs = std::stoi(value);
    else if (key == "shared_token") cfg.shared_token = as_bool();
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "base_checkpoint") cfg.base_checkpoint = value;
    else if (key == "token.s1_epochs") cfg.token.s1_epochs = std::stoi(value);
    else if (key == "token.s2_epochs") cfg.token.s2_epochs = std::stoi(value);
    else if (key == "token.s3_epochs") cfg.token.s3_epochs = std::stoi(value);
    else if (key == "token.s1_lr") cfg.token.s1_lr = std::stod(value);
    else if (key == "token.s2_lr") cfg.token.s2_lr = std::stod(value);
    else if (key == "token.s3_lr") cfg.token.s3_lr = std::stod(value);
    else if (key == "token.batch_fraction") cfg.token.batch_fraction = std::stod(value);
    else if (key == "token.alpha") cfg.token.alpha = std::stod(value);
    else if (key == "token.perturb_variance") cfg.token.perturb_variance = std::stod(value);
    else if (key == "token.edit_layers") cfg.token.edit_layers = parse_int_list(value);
    else if (key == "edit.layers") cfg.edit.layers = parse_int_list(value);
    else if (key == "edit.prefix_count") cfg.edit.prefix_count = std::stoi(value);
    else if (key == "edit.v_steps") cfg.edit.v_steps = std::stoi(value);
    else if (key == "edit.v_rate") cfg.edit.v_rate = std::stod(value);
    else if (key == "edit.kl_weight") cfg.edit.kl_weight = std::stod(value);
    else if (key == "edit.retain_cap") cfg.edit.retain_sample_cap = std::stoi(value);
    else if (key == "edit.solver") cfg.edit.solver = value;
    else if (key == "edit.success_floor") cfg.edit.success_floor = std::stod(value);
    else if (key == "ft.epochs") cfg.finetune.epochs = std::stoi(value);
    else if (key == "ft.lr") cfg.finetune.lr = std::stod(value);
    else if (key == "ft.batch_size") cfg.finetune.batch_size = std::stoi(value);
    else if (key == "ft.retain_cap") cfg.finetune.retain_sample_cap = std::stoi(value);
    else throw UsageError("unknown config key '" + key + "'");
}

RunArtifacts run_batch(const ScenarioConfig& cfg) {
    cfg.validate();
    UE_CHECK(cfg.scenario == "batch", UsageError, "run_batch: scenario mismatch");
    RunArtifacts art;
    StageClock clock(art.wall);
    Prepared p = prepare(cfg, clock, art.checkpoints);
    art.corpus_hash = p.corpus.content_hash();
    UE_CHECK(!p.split.forget.empty(), InputError, "run_batch: empty forget set");
    eval_and_row(p.base, p.base, p.split, cfg, "base", cfg.out_dir + "/eval_base.jsonl",
                 art, clock);
    ModelParams m = p.base;
    try {
        UnieraseState state;
        Matrix k_p;
        EditReport rep =
            unlearn_once(m, cfg, p.split, p.split.forget, state, k_p, cfg.seed, clock);
        if (cfg.method == "unierase") {
            art.chain_rates.push_back(rep.success_rate);
            save_token(state.tok, state.stages, cfg.out_dir + "/token.bin");
            save_edit_manifest(rep, p.split.forget, cfg.out_dir + "/edit_manifest.jsonl");
            if (rep.below_floor) {
                art.failed = true;
                art.failure = "chain success below configured floor";
            }
        }
        std::string post_path = cfg.out_dir + "/unlearned.ckpt";
        save_checkpoint(m, post_path, p.corpus.content_hash());
        art.checkpoints.push_back(post_path);
        eval_and_row(p.base, m, p.split, cfg, cfg.method,
                     cfg.out_dir + "/eval_post.jsonl", art, clock);
    } catch (const Error& e) {
        art.failed = true;
        art.failure = e.what();
    }
    save_run_summary(art, cfg, cfg.out_dir + "/summary.json");
    return art;
}

RunArtifacts run_sequential(const ScenarioConfig& cfg) {
    cfg.validate();
    UE_CHECK(cfg.scenario == "sequential", UsageError, "run_sequential: scenario mismatch");
    RunArtifacts art;
    StageClock clock(art.wall);
    Prepared p = prepare(cfg, clock, art.checkpoints);
    art.corpus_hash = p.corpus.content_hash();
    std::vector<std::vector<QAPair>> round_sets = split_rounds(p.split, cfg.rounds);
    eval_and_row(p.base, p.base, p.split, cfg, "base", cfg.out_dir + "/eval_base.jsonl",
                 art, clock);
    ModelParams m = p.base;
    try {
        UnieraseState state;
        Matrix k_p;
        std::vector<QAPair> cumulative;
        for (int r = 0; r < cfg.rounds; ++r) {
            KnowledgeSplit round_split{round_sets[r], p.split.retain, p.split.general,
                                       p.split.idk};
            EditReport rep = unlearn_once(m, cfg, round_split, round_sets[0], state, k_p,
                                          cfg.seed + r, clock);
            if (cfg.method == "unierase") art.chain_rates.push_back(rep.success_rate);
            cumulative.insert(cumulative.end(), round_sets[r].begin(), round_sets[r].end());
            KnowledgeSplit eval_split{cumulative, p.split.retain, p.split.general,
                                      p.split.idk};
            std::string row = cfg.method + ":r" + std::to_string(r + 1);
            eval_and_row(p.base, m, eval_split, cfg, row,
                         cfg.out_dir + "/eval_r" + std::to_string(r + 1) + ".jsonl", art,
                         clock);
        }
        if (cfg.method == "unierase") {
            int ok = 0;
            for (const QAPair& pair : round_sets[0])
                if (chain_success(m, state.tok, pair, p.split.idk)) ++ok;
            art.round1_chain_final =
                static_cast<double>(ok) / static_cast<double>(round_sets[0].size());
            save_token(state.tok, state.stages, cfg.out_dir + "/token.bin");
        }
        std::string post_path = cfg.out_dir + "/unlearned.ckpt";
        save_checkpoint(m, post_path, p.corpus.content_hash());
        art.checkpoints.push_back(post_path);
    } catch (const Error& e) {
        art.failed = true;
        art.failure = e.what();
    }
    save_run_summary(art, cfg, cfg.out_dir + "/summary.json");
    return art;
}

RunArtifacts run_precise(const ScenarioConfig& cfg) {
    cfg.validate();
    UE_CHECK(cfg.scenario == "precise", UsageError, "run_precise: scenario mismatch");
    RunArtifacts art;
    StageClock clock(art.wall);
    Prepared p = prepare(cfg, clock, art.checkpoints);
    art.corpus_hash = p.corpus.content_hash();
    UE_CHECK(p.split.forget.size() == 1, InputError, "run_precise: need exactly one pair");
    eval_and_row(p.base, p.base, p.split, cfg, "base", cfg.out_dir + "/eval_base.jsonl",
                 art, clock);
    ModelParams m = p.base;
    try {
        std::vector<QAPair> token_pairs = p.split.forget;
        if (cfg.method == "unierase" && cfg.aux_pairs > 0) {
            std::vector<QAPair> aux = auxiliary_pairs(p.corpus, cfg.aux_pairs, cfg.seed);
            token_pairs.insert(token_pairs.end(), aux.begin(), aux.end());
        }
        UnieraseState state;
        Matrix k_p;
        auto t0 = std::chrono::steady_clock::now();
        EditReport rep =
            unlearn_once(m, cfg, p.split, token_pairs, state, k_p, cfg.seed, clock);
        art.wall.push_back(
            {"unlearn_total",
             std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
        if (cfg.method == "unierase") {
            art.chain_rates.push_back(rep.success_rate);
            save_token(state.tok, state.stages, cfg.out_dir + "/token.bin");
            save_edit_manifest(rep, p.split.forget, cfg.out_dir + "/edit_manifest.jsonl");
            if (rep.below_floor) {
                art.failed = true;
                art.failure = "chain success below configured floor";
            }
        }
        std::string post_path = cfg.out_dir + "/unlearned.ckpt";
        save_checkpoint(m, post_path, p.corpus.content_hash());
        art.checkpoints.push_back(post_path);
        eval_and_row(p.base, m, p.split, cfg, cfg.method,
                     cfg.out_dir + "/eval_post.jsonl", art, clock);
    } catch (const Error& e) {
        art.failed = true;
        art.failure = e.what();
    }
    save_run_summary(art, cfg, cfg.out_dir + "/summary.json");
    return art;
}

RunArtifacts run_scenario(const ScenarioConfig& cfg) {
    if (cfg.scenario == "batch") return run_batch(cfg);
    if (cfg.scenario == "sequential") return run_sequential(cfg);
    if (cfg.scenario == "precise") return run_precise(cfg);
    throw UsageError("unknown scenario '" + cfg.scenario + "'");
}

void save_run_summary(const RunArtifacts& art, const ScenarioConfig& cfg,
                      const std::string& path) {
    json rows = json::array();
    for (size_t i = 0; i < art.rows.size(); ++i) {
        const SummaryRow& r = art.rows[i];
        rows.push_back({{"method", r.method},
                        {"FE", r.fe},
                        {"RE_retain", r.re_retain},
                        {"RE_general", r.re_general},
                        {"Acc", r.acc},
                        {"Idk", r.idk},
                        {"Len", r.len},
                        {"RA", r.ra},
                        {"Balance", r.balance},
                        {"checkpoint_hash",
                         i < art.row_checkpoint_hex.size() ? art.row_checkpoint_hex[i]
                                                           : ""}});
    }
    json wall = json::array();
    for (const StageTime& t : art.wall)
        wall.push_back({{"stage", t.stage}, {"seconds", t.seconds}});
    json j{{"record", "run_summary"},
           {"scenario", cfg.scenario},
           {"method", cfg.method},
           {"seed", cfg.seed},
           {"corpus_hash", to_hex(art.corpus_hash)},
           {"checkpoints", art.checkpoints},
           {"rows", rows},
           {"wall", wall},
           {"chain_rates", art.chain_rates},
           {"round1_chain_final", art.round1_chain_final},
           {"failed", art.failed},
           {"failure", art.failure}};
    std::ofstream out(path);
    if (!out) throw IoError("save_run_summary: cannot write " + path);
    out << j.dump(2) << '\n';
}

void write_report(const std::vector<std::string>& summary_paths,
                  const std::string& csv_path, const std::string& json_path) {
    UE_CHECK(!summary_paths.empty(), UsageError, "report: no summaries given");
    std::vector<SummaryRow> rows;
    std::vector<std::string> seen_methods;
    std::string corpus_hash;
    json merged = json::array();
    for (const std::string& path : summary_paths) {
        std::ifstream in(path);
        if (!in) throw IoError("report: cannot read " + path);
        json j = json::parse(in, nullptr, false);
        UE_CHECK(!j.is_discarded() && j.value("record", "") == "run_summary", InputError,
                 "report: " + path + " is not a run summary");
        std::string h = j.at("corpus_hash").get<std::string>();
        if (corpus_hash.empty()) corpus_hash = h;
        UE_CHECK(h == corpus_hash, InputError,
                 "report: corpus hash mismatch in " + path + " — refusing to merge");
        for (const json& r : j.at("rows")) {
            std::string method = r.at("method").get<std::string>();
            if (std::find(seen_methods.begin(), seen_methods.end(), method) !=
                seen_methods.end())
                continue;
            seen_methods.push_back(method);
            rows.push_back({method, r.at("FE").get<double>(),
                            r.at("RE_retain").get<double>(),
                            r.at("RE_general").get<double>(), r.at("Acc").get<double>(),
                            r.at("Idk").get<double>(), r.at("Len").get<double>(),
                            r.at("RA").get<double>(), r.at("Balance").get<double>()});
            merged.push_back(r);
        }
    }
    save_summary_csv(rows, csv_path);
    if (!json_path.empty()) {
        json j{{"record", "comparison"}, {"corpus_hash", corpus_hash}, {"rows", merged}};
        std::ofstream out(json_path);
        if (!out) throw IoError("report: cannot write " + json_path);
        out << j.dump(2) << '\n';
    }
}

}  // namespace unierase
