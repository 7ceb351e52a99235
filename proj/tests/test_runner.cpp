#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unierase/runner.hpp"

using namespace unierase;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string scratch_dir(const std::string& leaf) {
    fs::path p = fs::temp_directory_path() / ("uerun_" + leaf);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string write_text(const std::string& leaf, const std::string& body) {
    fs::path p = fs::temp_directory_path() / leaf;
    std::ofstream out(p);
    out << body;
    return p.string();
}

bool has_stage(const std::vector<StageTime>& wall, const std::string& stage) {
    for (const StageTime& t : wall)
        if (t.stage == stage) return true;
    return false;
}

// Small-but-real configuration shared by the end-to-end cases. One injection
// is paid for the first run; later runs reuse its base checkpoint.
ScenarioConfig tiny_cfg(const std::string& out_leaf) {
    ScenarioConfig cfg;
    cfg.n_entities = 3;
    cfg.qa_per_entity = 3;
    cfg.general_count = 8;
    cfg.seed = 11;
    cfg.forget_fraction = 0.34;
    cfg.inject_epochs = 3;
    cfg.inject_lr = 1.5e-3;
    cfg.token.s1_epochs = 2;
    cfg.token.s2_epochs = 1;
    cfg.token.s3_epochs = 1;
    cfg.edit.prefix_count = 3;
    cfg.edit.v_steps = 5;
    cfg.edit.retain_sample_cap = 40;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 4;
    cfg.finetune.lr = 1e-4;
    cfg.finetune.retain_sample_cap = 16;
    cfg.out_dir = scratch_dir(out_leaf);
    return cfg;
}

struct BatchLab {
    ScenarioConfig cfg1, cfg2;
    RunArtifacts run1, run2;
};

// Two identical batch unierase runs into separate directories; computed once.
const BatchLab& batch_lab() {
    static const BatchLab lab = [] {
        BatchLab out;
        out.cfg1 = tiny_cfg("batch1");
        out.cfg2 = tiny_cfg("batch2");
        out.run1 = run_batch(out.cfg1);
        out.run2 = run_batch(out.cfg2);
        return out;
    }();
    return lab;
}

SummaryRow fake_row(const std::string& method, double bump) {
    SummaryRow r;
    r.method = method;
    r.fe = 0.1 + bump;
    r.re_retain = 0.2 + bump;
    r.re_general = 0.3 + bump;
    r.acc = 0.4 + bump;
    r.idk = 0.05 + bump;
    r.len = 6.0 + bump;
    r.ra = 0.35 + bump;
    r.balance = 0.25 + bump;
    return r;
}

}  // namespace

TEST_SUITE("runner") {

TEST_CASE("config file parsing covers every key") {
    std::string path = write_text("uerun_cfg.txt", R"(# comment line

scenario = sequential
method = npo+kl
entities = 7
qa_per_entity = 4
general_count = 12
seed = 99
forget_fraction = 0.25
rounds = 3
inject_epochs = 9
inject_lr = 0.002
aux_pairs = 5
shared_token = false
out_dir = /tmp/uerun_cfg_out
base_checkpoint = /tmp/some.ckpt
token.s1_epochs = 6
token.s2_epochs = 4
token.s3_epochs = 3
token.s1_lr = 0.01
token.s2_lr = 0.001
token.s3_lr = 0.0001
token.batch_fraction = 0.5
token.alpha = 2.0
token.perturb_variance = 0.1
token.edit_layers = 0,2
edit.layers = 1,3
edit.prefix_count = 4
edit.v_steps = 7
edit.v_rate = 0.25
edit.kl_weight = 0.125
edit.retain_cap = 64
edit.solver = plain
edit.success_floor = 0.9
ft.epochs = 2
ft.lr = 0.0005
ft.batch_size = 16
ft.retain_cap = 32
)");
    ScenarioConfig cfg = load_scenario_config(path);
    CHECK(cfg.scenario == "sequential");
    CHECK(cfg.method == "npo+kl");
    CHECK(cfg.n_entities == 7);
    CHECK(cfg.qa_per_entity == 4);
    CHECK(cfg.general_count == 12);
    CHECK(cfg.seed == 99);
    CHECK(cfg.forget_fraction == doctest::Approx(0.25));
    CHECK(cfg.rounds == 3);
    CHECK(cfg.inject_epochs == 9);
    CHECK(cfg.inject_lr == doctest::Approx(0.002));
    CHECK(cfg.aux_pairs == 5);
    CHECK(cfg.shared_token == false);
    CHECK(cfg.out_dir == "/tmp/uerun_cfg_out");
    CHECK(cfg.base_checkpoint == "/tmp/some.ckpt");
    CHECK(cfg.token.s1_epochs == 6);
    CHECK(cfg.token.s2_epochs == 4);
    CHECK(cfg.token.s3_epochs == 3);
    CHECK(cfg.token.s1_lr == doctest::Approx(0.01));
    CHECK(cfg.token.s2_lr == doctest::Approx(0.001));
    CHECK(cfg.token.s3_lr == doctest::Approx(0.0001));
    CHECK(cfg.token.batch_fraction == doctest::Approx(0.5));
    CHECK(cfg.token.alpha == doctest::Approx(2.0));
    CHECK(cfg.token.perturb_variance == doctest::Approx(0.1));
    CHECK(cfg.token.edit_layers == std::vector<int>{0, 2});
    CHECK(cfg.edit.layers == std::vector<int>{1, 3});
    CHECK(cfg.edit.prefix_count == 4);
    CHECK(cfg.edit.v_steps == 7);
    CHECK(cfg.edit.v_rate == doctest::Approx(0.25));
    CHECK(cfg.edit.kl_weight == doctest::Approx(0.125));
    CHECK(cfg.edit.retain_sample_cap == 64);
    CHECK(cfg.edit.solver == "plain");
    CHECK(cfg.edit.success_floor == doctest::Approx(0.9));
    CHECK(cfg.finetune.epochs == 2);
    CHECK(cfg.finetune.lr == doctest::Approx(0.0005));
    CHECK(cfg.finetune.batch_size == 16);
    CHECK(cfg.finetune.retain_sample_cap == 32);
}

TEST_CASE("config parsing rejects malformed input") {
    ScenarioConfig cfg;
    CHECK_THROWS_AS(apply_override(cfg, "no_such_key", "1"), UsageError);
    CHECK_THROWS_AS(apply_override(cfg, "shared_token", "maybe"), UsageError);
    std::string bad = write_text("uerun_bad.txt", "scenario batch\n");
    CHECK_THROWS_AS(load_scenario_config(bad), UsageError);
    CHECK_THROWS_AS(load_scenario_config("/nonexistent/uerun.cfg"), IoError);
}

TEST_CASE("scenario validation rejects bad combinations") {
    ScenarioConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    ScenarioConfig bad = cfg;
    bad.scenario = "weird";
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = cfg;
    bad.method = "nonsense";
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = cfg;
    bad.n_entities = 0;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = cfg;
    bad.forget_fraction = 0.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad.forget_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = cfg;
    bad.scenario = "sequential";
    bad.rounds = 1;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = cfg;
    bad.out_dir = "";
    CHECK_THROWS_AS(bad.validate(), UsageError);

    CHECK_THROWS_AS(run_scenario(ScenarioConfig{.scenario = "weird"}), UsageError);
}

TEST_CASE("batch run produces rows, artifacts, and stage times") {
    const BatchLab& lab = batch_lab();
    const RunArtifacts& art = lab.run1;
    CHECK_FALSE(art.failed);
    CHECK(art.corpus_hash != 0);

    REQUIRE(art.rows.size() == 2);
    CHECK(art.rows[0].method == "base");
    CHECK(art.rows[1].method == "unierase");
    REQUIRE(art.row_checkpoint_hex.size() == 2);
    CHECK(art.row_checkpoint_hex[0].size() == 16);
    CHECK(art.row_checkpoint_hex[0] != art.row_checkpoint_hex[1]);

    REQUIRE(art.chain_rates.size() == 1);
    CHECK(art.chain_rates[0] >= 0.0);
    CHECK(art.chain_rates[0] <= 1.0);

    CHECK(has_stage(art.wall, "inject"));
    CHECK(has_stage(art.wall, "token_train"));
    CHECK(has_stage(art.wall, "edit"));
    CHECK(has_stage(art.wall, "eval_base"));
    CHECK(has_stage(art.wall, "eval_unierase"));
    for (const StageTime& t : art.wall) CHECK(t.seconds >= 0.0);

    for (const char* leaf :
         {"corpus.jsonl", "idk.txt", "base.ckpt", "unlearned.ckpt", "token.bin",
          "edit_manifest.jsonl", "eval_base.jsonl", "eval_post.jsonl", "summary.json"})
        CHECK_MESSAGE(fs::exists(fs::path(lab.cfg1.out_dir) / leaf), leaf);

    REQUIRE(art.checkpoints.size() == 2);
    uint64_t stored = 0;
    ModelParams post = load_checkpoint(art.checkpoints[1], &stored);
    CHECK(stored == art.corpus_hash);
    CHECK(to_hex(weights_hash(post)) == art.row_checkpoint_hex[1]);

    std::ifstream in(lab.cfg1.out_dir + "/summary.json");
    json j = json::parse(in);
    CHECK(j.at("record") == "run_summary");
    CHECK(j.at("scenario") == "batch");
    CHECK(j.at("method") == "unierase");
    CHECK(j.at("corpus_hash") == to_hex(art.corpus_hash));
    CHECK(j.at("rows").size() == 2);
    CHECK(j.at("failed") == false);
}

TEST_CASE("batch run is bit-reproducible across directories") {
    const BatchLab& lab = batch_lab();
    REQUIRE(lab.run2.rows.size() == lab.run1.rows.size());
    CHECK(lab.run1.row_checkpoint_hex == lab.run2.row_checkpoint_hex);
    CHECK(lab.run1.chain_rates == lab.run2.chain_rates);
    for (size_t i = 0; i < lab.run1.rows.size(); ++i) {
        CHECK(lab.run1.rows[i].fe == lab.run2.rows[i].fe);
        CHECK(lab.run1.rows[i].re_retain == lab.run2.rows[i].re_retain);
        CHECK(lab.run1.rows[i].re_general == lab.run2.rows[i].re_general);
        CHECK(lab.run1.rows[i].acc == lab.run2.rows[i].acc);
        CHECK(lab.run1.rows[i].idk == lab.run2.rows[i].idk);
        CHECK(lab.run1.rows[i].balance == lab.run2.rows[i].balance);
    }
    uint64_t h1 = 0, h2 = 0;
    ModelParams m1 = load_checkpoint(lab.cfg1.out_dir + "/unlearned.ckpt", &h1);
    ModelParams m2 = load_checkpoint(lab.cfg2.out_dir + "/unlearned.ckpt", &h2);
    CHECK(weights_hash(m1) == weights_hash(m2));
}

TEST_CASE("base checkpoint reuse skips injection and matches") {
    const BatchLab& lab = batch_lab();
    ScenarioConfig cfg = tiny_cfg("batch_reuse");
    cfg.base_checkpoint = lab.cfg1.out_dir + "/base.ckpt";
    RunArtifacts art = run_batch(cfg);
    CHECK_FALSE(art.failed);
    CHECK(has_stage(art.wall, "load_base"));
    CHECK_FALSE(has_stage(art.wall, "inject"));
    CHECK(art.row_checkpoint_hex == lab.run1.row_checkpoint_hex);
    CHECK(art.rows[0].balance == lab.run1.rows[0].balance);
    CHECK(art.rows[1].balance == lab.run1.rows[1].balance);
}

TEST_CASE("base checkpoint from another corpus is refused") {
    ScenarioConfig cfg = tiny_cfg("batch_badbase");
    ModelParams fresh = init_model(ModelConfig{}, universe_tokenizer(), cfg.seed);
    std::string path = cfg.out_dir + "/foreign.ckpt";
    save_checkpoint(fresh, path, 0xdeadbeefULL);
    cfg.base_checkpoint = path;
    CHECK_THROWS_AS(run_batch(cfg), InputError);
}

TEST_CASE("batch baseline finetune writes manifest and skips token artifacts") {
    const BatchLab& lab = batch_lab();
    ScenarioConfig cfg = tiny_cfg("batch_ga");
    cfg.method = "ga+gd";
    cfg.base_checkpoint = lab.cfg1.out_dir + "/base.ckpt";
    RunArtifacts art = run_batch(cfg);
    CHECK_FALSE(art.failed);
    REQUIRE(art.rows.size() == 2);
    CHECK(art.rows[1].method == "ga+gd");
    CHECK(art.chain_rates.empty());
    CHECK(has_stage(art.wall, "finetune"));
    CHECK_FALSE(has_stage(art.wall, "token_train"));
    CHECK_FALSE(fs::exists(fs::path(cfg.out_dir) / "token.bin"));

    std::ifstream in(cfg.out_dir + "/run_manifest.jsonl");
    REQUIRE(in.good());
    std::string line;
    REQUIRE(std::getline(in, line));
    json j = json::parse(line);
    CHECK(j.at("record") == "finetune_run");
    CHECK(j.at("method") == "ga+gd");
    CHECK(j.at("steps").get<int>() > 0);
}

TEST_CASE("sequential run tracks per-round chains and round-1 persistence") {
    const BatchLab& lab = batch_lab();
    ScenarioConfig cfg = tiny_cfg("seq");
    cfg.scenario = "sequential";
    cfg.rounds = 2;
    cfg.base_checkpoint = lab.cfg1.out_dir + "/base.ckpt";
    RunArtifacts art = run_sequential(cfg);
    CHECK_FALSE(art.failed);
    REQUIRE(art.rows.size() == 3);
    CHECK(art.rows[0].method == "base");
    CHECK(art.rows[1].method == "unierase:r1");
    CHECK(art.rows[2].method == "unierase:r2");
    REQUIRE(art.chain_rates.size() == 2);
    CHECK(art.round1_chain_final >= 0.0);
    CHECK(art.round1_chain_final <= 1.0);
    CHECK(fs::exists(fs::path(cfg.out_dir) / "eval_r1.jsonl"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "eval_r2.jsonl"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "token.bin"));
}

TEST_CASE("precise run unlearns one pair and logs total unlearn time") {
    const BatchLab& lab = batch_lab();
    ScenarioConfig cfg = tiny_cfg("precise");
    cfg.scenario = "precise";
    cfg.aux_pairs = 2;
    cfg.base_checkpoint = lab.cfg1.out_dir + "/base.ckpt";
    RunArtifacts art = run_precise(cfg);
    CHECK_FALSE(art.failed);
    REQUIRE(art.rows.size() == 2);
    CHECK(art.rows[1].method == "unierase");
    CHECK(has_stage(art.wall, "unlearn_total"));
    CHECK(has_stage(art.wall, "token_train"));
    CHECK(has_stage(art.wall, "edit"));
    REQUIRE(art.chain_rates.size() == 1);
}

TEST_CASE("report merges summaries, dedups methods, refuses foreign corpora") {
    std::string dir = scratch_dir("report");
    ScenarioConfig cfg;
    cfg.out_dir = dir;

    RunArtifacts a;
    a.corpus_hash = 0xabcULL;
    a.rows = {fake_row("base", 0.0), fake_row("unierase", 0.1)};
    a.row_checkpoint_hex = {"aaaa", "bbbb"};
    save_run_summary(a, cfg, dir + "/s1.json");

    RunArtifacts b;
    b.corpus_hash = 0xabcULL;
    b.rows = {fake_row("base", 0.3), fake_row("ga+gd", 0.2)};
    b.row_checkpoint_hex = {"cccc", "dddd"};
    save_run_summary(b, cfg, dir + "/s2.json");

    write_report({dir + "/s1.json", dir + "/s2.json"}, dir + "/report.csv",
                 dir + "/report.json");

    std::ifstream csv(dir + "/report.csv");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(csv, line)) lines.push_back(line);
    REQUIRE(lines.size() == 4);  // header + base + unierase + ga+gd
    CHECK(lines[0] == "method,FE,RE_retain,RE_general,Acc,Idk,Len,RA,Balance");
    CHECK(lines[1].rfind("base,", 0) == 0);
    CHECK(lines[2].rfind("unierase,", 0) == 0);
    CHECK(lines[3].rfind("ga+gd,", 0) == 0);
    // duplicate "base" row keeps the first summary's numbers (FE = 10.00%)
    CHECK(lines[1].find("10.00") != std::string::npos);

    std::ifstream jin(dir + "/report.json");
    json j = json::parse(jin);
    CHECK(j.at("record") == "comparison");
    CHECK(j.at("corpus_hash") == to_hex(0xabcULL));
    CHECK(j.at("rows").size() == 3);

    RunArtifacts c;
    c.corpus_hash = 0xdefULL;
    c.rows = {fake_row("npo+gd", 0.0)};
    c.row_checkpoint_hex = {"eeee"};
    save_run_summary(c, cfg, dir + "/s3.json");
    CHECK_THROWS_AS(
        write_report({dir + "/s1.json", dir + "/s3.json"}, dir + "/bad.csv", ""),
        InputError);

    std::string junk = write_text("uerun_junk.json", "{\"record\":\"other\"}\n");
    CHECK_THROWS_AS(write_report({junk}, dir + "/bad.csv", ""), InputError);
    CHECK_THROWS_AS(write_report({}, dir + "/bad.csv", ""), UsageError);
    CHECK_THROWS_AS(write_report({"/nonexistent/s.json"}, dir + "/bad.csv", ""), IoError);
}

}  // TEST_SUITE
