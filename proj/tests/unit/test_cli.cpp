#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "forgetbench/cli.hpp"
#include "forgetbench/error.hpp"
#include "forgetbench/rng.hpp"
#include "forgetbench/synthetic.hpp"
#include "forgetbench/trainer.hpp"

using namespace forgetbench;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

// Scratch directory with a 2-domain corpus and a fast cell config.
struct Workspace {
    fs::path root;

    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / name) {
        fs::remove_all(root);
        fs::create_directories(root);
        data::SyntheticCorpusOptions o;
        o.domains = 2;
        o.intents_per_domain = 2;
        o.train_per_intent = 10;
        o.val_per_intent = 4;
        o.test_per_intent = 4;
        o.oos_train = o.oos_val = o.oos_test = 2;
        spit(corpus(), data::generate_clinc_like_json(o));
    }
    ~Workspace() { fs::remove_all(root); }

    fs::path corpus() const { return root / "corpus.json"; }
    fs::path runs() const { return root / "runs"; }

    json cell(const std::string& arch, json strategies) const {
        return json{{"architecture", arch},
                    {"strategies", std::move(strategies)},
                    {"seed", 1},
                    {"tasks", 2},
                    {"subset_per_class", nullptr},
                    {"max_length", 12},
                    {"checkpoints", false},
                    {"data_dir", corpus().string()},
                    {"out_dir", runs().string()},
                    {"hyperparameters",
                     {{"embed_dim", 8},
                      {"hidden_dim", 8},
                      {"num_layers", 1},
                      {"num_heads", 2},
                      {"max_epochs", 3},
                      {"batch_size", 8},
                      {"buffer_capacity", 10}}}};
    }

    fs::path write(const std::string& name, const json& j) const {
        spit(root / name, j.dump());
        return root / name;
    }
};

trainer::ExperimentConfig parse(const json& j) { return trainer::ExperimentConfig::from_json(j.dump()); }

}  // namespace

// ------------------------------------------------------------------ config

TEST(Config, DefaultsAndRoundTrip) {
    const auto c = parse(json{{"architecture", "gru"}});
    EXPECT_EQ(c.architecture, models::Architecture::gru);
    EXPECT_TRUE(c.strategies.empty());
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.tasks, 10u);
    EXPECT_EQ(c.cell_name(), "gru-naive-seed42");
    const auto back = trainer::ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.hash(), c.hash());

    const auto joint = parse(json{{"architecture", "ann"}, {"strategies", {"joint"}}});
    EXPECT_EQ(joint.mode, trainer::RunMode::joint);
    EXPECT_EQ(joint.cell_name(), "ann-joint-seed42");
    const auto mix = parse(json{{"architecture", "transformer"}, {"strategies", {"HAT", "mir"}}, {"seed", 3}});
    EXPECT_EQ(mix.cell_name(), "transformer-mir+hat-seed3");
}

TEST(Config, HashIgnoresPathsOnly) {
    const json base{{"architecture", "ann"}, {"strategies", {"lwf"}}};
    auto moved = base;
    moved["data_dir"] = "/elsewhere";
    moved["out_dir"] = "/other";
    EXPECT_EQ(parse(base).hash(), parse(moved).hash());
    auto changed = base;
    changed["hyperparameters"] = {{"temperature", 3.0}};
    EXPECT_NE(parse(base).hash(), parse(changed).hash());
    auto reseeded = base;
    reseeded["seed"] = 43;
    EXPECT_NE(parse(base).hash(), parse(reseeded).hash());
}

TEST(Config, RejectsBadInput) {
    const std::vector<json> bad = {
        json{{"strategies", {"mir"}}},
        json{{"architecture", "lstm"}},
        json{{"architecture", "ann"}, {"strategy", {"mir"}}},
        json{{"architecture", "ann"}, {"strategies", {"ewc"}}},
        json{{"architecture", "ann"}, {"strategies", {"joint", "mir"}}},
        json{{"architecture", "ann"}, {"strategies", "mir"}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"lr", 0.1}}}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"learning_rate", -1.0}}}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"batch_size", 0}}}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"batch_size", "big"}}}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"optimizer", "rmsprop"}}}},
        json{{"architecture", "ann"}, {"hyperparameters", {{"temperature", 0.0}}}},
        json{{"architecture", "transformer"}, {"hyperparameters", {{"embed_dim", 10}, {"num_heads", 4}}}},
        json{{"architecture", "ann"}, {"tasks", 0}},
        json{{"architecture", "ann"}, {"seed", -1}},
    };
    for (const auto& j : bad) {
        EXPECT_THROW(parse(j), ConfigError) << j.dump();
    }
    EXPECT_THROW(trainer::ExperimentConfig::from_json("{oops"), ConfigError);
    EXPECT_THROW(trainer::ExperimentConfig::from_json("[1]"), ConfigError);
}

TEST(Config, ExpandGrid) {
    const json grid{{"architecture", {"ann", "gru"}},
                    {"strategies", {json::array(), {"mir"}, {"joint"}}},
                    {"seed", {1, 2}},
                    {"tasks", 5}};
    const auto cells = trainer::expand_grid(grid.dump());
    ASSERT_EQ(cells.size(), 12u);
    EXPECT_EQ(cells[0].cell_name(), "ann-naive-seed1");
    EXPECT_EQ(cells[1].cell_name(), "ann-naive-seed2");
    EXPECT_EQ(cells[2].cell_name(), "ann-mir-seed1");
    EXPECT_EQ(cells[11].cell_name(), "gru-joint-seed2");
    for (const auto& c : cells) EXPECT_EQ(c.tasks, 5u);

    const auto single = trainer::expand_grid(json{{"architecture", "ann"}, {"strategies", {"mir", "hat"}}}.dump());
    ASSERT_EQ(single.size(), 1u);
    EXPECT_EQ(single[0].strategy_name(), "mir+hat");

    EXPECT_THROW(trainer::expand_grid(json{{"architecture", json::array()}}.dump()), ConfigError);
    EXPECT_THROW(trainer::expand_grid(json{{"architecture", {"ann"}}, {"bogus", 1}}.dump()), ConfigError);
}

// ------------------------------------------------------------------ commands

TEST(Cli, ExitCodes) {
    EXPECT_EQ(cli::exit_code(ConfigError("x")), cli::kExitConfig);
    EXPECT_EQ(cli::exit_code(DataError("x")), cli::kExitData);
    EXPECT_EQ(cli::exit_code(IncompleteRunError("x")), cli::kExitIncomplete);
    EXPECT_EQ(cli::exit_code(std::runtime_error("x")), cli::kExitFailure);
}

TEST(Cli, RunSkipsCompleteCellsAndForceReruns) {
    Workspace ws("fb_cli_run");
    std::ostringstream log;
    cli::RunArgs args;
    args.config = ws.write("cell.json", ws.cell("ann", {"mir"}));
    const auto first = cli::cmd_run(args, log);
    EXPECT_EQ(first.cells_run, 1u);
    EXPECT_GT(first.training_steps, 0u);
    const fs::path dir = ws.runs() / "ann-mir-seed1";
    ASSERT_TRUE(trainer::run_complete(dir));
    const std::string acc = slurp(dir / "r_acc.csv");

    const auto again = cli::cmd_run(args, log);
    EXPECT_EQ(again.cells_run, 0u);
    EXPECT_EQ(again.cells_skipped, 1u);
    EXPECT_EQ(again.training_steps, 0u);

    args.force = true;
    const auto forced = cli::cmd_run(args, log);
    EXPECT_EQ(forced.cells_run, 1u);
    EXPECT_EQ(forced.training_steps, first.training_steps);
    EXPECT_EQ(slurp(dir / "r_acc.csv"), acc);

    // Same cell name, different config.
    auto changed = ws.cell("ann", {"mir"});
    changed["hyperparameters"]["learning_rate"] = 0.01;
    cli::RunArgs clash;
    clash.config = ws.write("changed.json", changed);
    EXPECT_THROW(cli::cmd_run(clash, log), ConfigError);
    clash.force = true;
    EXPECT_EQ(cli::cmd_run(clash, log).cells_run, 1u);
}

TEST(Cli, RunArgumentErrors) {
    Workspace ws("fb_cli_args");
    std::ostringstream log;
    cli::RunArgs none;
    EXPECT_THROW(cli::cmd_run(none, log), ConfigError);
    cli::RunArgs missing;
    missing.config = ws.root / "absent.json";
    EXPECT_THROW(cli::cmd_run(missing, log), ConfigError);
    auto cell = ws.cell("ann", json::array());
    cell["data_dir"] = (ws.root / "no_such_corpus.json").string();
    cli::RunArgs nodata;
    nodata.config = ws.write("nodata.json", cell);
    EXPECT_THROW(cli::cmd_run(nodata, log), DataError);
}

TEST(Cli, ReportPassesMetricsThroughExactly) {
    Workspace ws("fb_cli_report");
    std::ostringstream log;
    json grid = ws.cell("ann", json::array());
    grid["architecture"] = {"ann", "gru"};
    grid["strategies"] = {json::array(), {"lwf"}, {"hat"}, {"joint"}};
    cli::RunArgs args;
    args.grid = ws.write("grid.json", grid);
    args.jobs = 2;
    const auto summary = cli::cmd_run(args, log);
    EXPECT_EQ(summary.cells_run, 8u);

    // An incomplete run is listed, not fatal.
    fs::create_directories(ws.runs() / "ann-mir-seed1");
    fs::copy_file(ws.runs() / "ann-lwf-seed1" / "config.json", ws.runs() / "ann-mir-seed1" / "config.json");

    cli::ReportArgs rep;
    rep.runs = ws.runs();
    rep.out = ws.root / "report";
    const auto bundle = cli::cmd_report(rep, log);
    ASSERT_EQ(bundle.cells.size(), 8u);
    EXPECT_EQ(bundle.skipped.size(), 1u);
    EXPECT_TRUE(fs::exists(rep.out / "summary.csv"));
    EXPECT_TRUE(fs::exists(rep.out / "best_per_architecture.csv"));
    EXPECT_TRUE(fs::exists(rep.out / "curves" / "gru-hat-seed1.svg"));

    const json sj = json::parse(slurp(rep.out / "summary.json"));
    ASSERT_EQ(sj.at("cells").size(), 8u);
    for (const auto& cell : sj.at("cells")) {
        const json m = json::parse(slurp(ws.runs() / cell.at("cell").get<std::string>() / "metrics.json"));
        for (const char* key : {"aa", "af1", "bwt_acc", "bwt_f1", "avg_bwt_acc", "avg_bwt_f1"}) {
            EXPECT_EQ(cell.at(key), m.at(key)) << key;
        }
    }
    // CSV values parse back to the same doubles.
    std::istringstream csv(slurp(rep.out / "summary.csv"));
    std::string line;
    std::getline(csv, line);
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
        const json m = json::parse(slurp(ws.runs() / f[0] / "metrics.json"));
        EXPECT_EQ(std::stod(f[5]), m.at("aa").get<double>());
        EXPECT_EQ(std::stod(f[6]), m.at("af1").get<double>());
        ++rows;
    }
    EXPECT_EQ(rows, 8u);

    rep.formats = {"pdf"};
    EXPECT_THROW(cli::cmd_report(rep, log), ConfigError);
    rep.formats = {"csv"};
    rep.runs = ws.root / "empty";
    fs::create_directories(rep.runs);
    EXPECT_THROW(cli::cmd_report(rep, log), IncompleteRunError);
}

TEST(Report, BestPerArchitectureMatchesScan) {
    Rng rng(21);
    const std::vector<std::string> archs = {"ann", "gru", "transformer"};
    const std::vector<std::string> sets = {"naive", "joint", "mir", "lwf", "hat", "mir+hat", "lwf+hat"};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<report::CellSummary> cells;
        const std::size_t n = 1 + rng.below(15);
        for (std::size_t i = 0; i < n; ++i) {
            report::CellSummary c;
            c.architecture = archs[rng.below(archs.size())];
            c.strategies = sets[rng.below(sets.size())];
            c.cell = c.architecture + "-" + c.strategies + "-seed" + std::to_string(i);
            // Coarse values make ties common.
            c.metrics.aa = static_cast<double>(rng.below(4)) / 4.0;
            c.metrics.af1 = static_cast<double>(rng.below(3)) / 3.0;
            cells.push_back(c);
        }
        std::map<std::string, const report::CellSummary*> expected;
        for (const auto& c : cells) {
            if (c.strategies == "naive" || c.strategies == "joint") continue;
            auto& slot = expected[c.architecture];
            if (slot == nullptr) {
                slot = &c;
                continue;
            }
            const auto key = [](const report::CellSummary* x) {
                return std::make_tuple(x->metrics.aa, x->metrics.af1);
            };
            if (key(&c) > key(slot) || (key(&c) == key(slot) && c.cell < slot->cell)) slot = &c;
        }
        const auto best = report::best_per_architecture(cells);
        ASSERT_EQ(best.size(), expected.size());
        for (const auto& row : best) {
            ASSERT_TRUE(expected.count(row.architecture));
            EXPECT_EQ(row.cell, expected[row.architecture]->cell);
            EXPECT_EQ(row.aa, expected[row.architecture]->metrics.aa);
        }
    }
}

TEST(Report, SvgHasOneSeriesPerMetric) {
    report::CellSummary c;
    c.cell = "ann-mir-seed1";
    c.curve = {{1, 0.9, 0.8, std::nullopt, std::nullopt}, {2, 0.6, 0.5, -0.3, -0.2}};
    const std::string svg = report::curve_svg(c);
    std::size_t lines = 0;
    for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
    EXPECT_EQ(lines, 4u);
    EXPECT_EQ(svg.rfind("</svg>"), svg.size() - 7);
}

#ifdef FB_CLI_PATH
TEST(Cli, BinaryExitCodes) {
    Workspace ws("fb_cli_binary");
    const std::string bin = FB_CLI_PATH;
    auto run = [&](const std::string& args) {
        const int status = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    EXPECT_EQ(run("--help"), 0);
    EXPECT_EQ(run(""), cli::kExitConfig);
    EXPECT_EQ(run("frobnicate"), cli::kExitConfig);
    EXPECT_EQ(run("synth --out " + (ws.root / "s.json").string() + " --domains 1 --intents-per-domain 2"), 0);
    EXPECT_TRUE(fs::exists(ws.root / "s.json"));

    auto bad = ws.cell("ann", {"mir"});
    bad["hyperparameters"]["warmup"] = 3;
    EXPECT_EQ(run("run --config " + ws.write("bad.json", bad).string()), cli::kExitConfig);
    auto nodata = ws.cell("ann", {"mir"});
    nodata["data_dir"] = (ws.root / "missing.json").string();
    EXPECT_EQ(run("run --config " + ws.write("nodata.json", nodata).string()), cli::kExitData);
    fs::create_directories(ws.root / "runs_empty" / "x");
    spit(ws.root / "runs_empty" / "x" / "config.json", parse(ws.cell("ann", {"mir"})).to_json());
    EXPECT_EQ(run("report --runs " + (ws.root / "runs_empty").string() + " --out " + (ws.root / "rep").string()),
              cli::kExitIncomplete);
    EXPECT_EQ(run("run --config " + ws.write("ok.json", ws.cell("ann", json::array())).string()), 0);
    EXPECT_EQ(run("report --runs " + ws.runs().string() + " --out " + (ws.root / "rep").string() + " --format csv"),
              0);
}
#endif
