#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "feddf/harness.hpp"

using namespace feddf;
using namespace feddf::harness;
namespace fs = std::filesystem;

namespace {

const std::string kSmall = R"(schema_version = 1

[experiment]
name = small
seeds = 3
strategies = fedavg, feddf
threads = 1

[dataset]
classes = 3
dim = 2
per_class = 20
test_per_class = 20
radius = 2.0
scale = 0.4
val_fraction = 0.2

[partition]
alpha = 0.5
clients = 3

[fl]
rounds = 2
participation = 1.0
local_epochs = 2
local_lr = 0.1
local_batch = 8

[distill]
max_steps = 10
patience = 5
lr = 0.001

[pool]
kind = uniform
batch = 16

[model]
hidden = 8
activation = tanh

[grid]
enabled = true
resolution = 5
)";

std::string replace(std::string text, const std::string& from, const std::string& to) {
    const auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    return text.replace(pos, from.size(), to);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("feddf_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct EnvGuard {
    explicit EnvGuard(const char* value) {
        if (value) {
            setenv("FEDDF_OUTPUT_ROOT", value, 1);
        } else {
            unsetenv("FEDDF_OUTPUT_ROOT");
        }
    }
    ~EnvGuard() { unsetenv("FEDDF_OUTPUT_ROOT"); }
};

int exit_code(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("parses a complete config") {
    const auto c = parse_config(kSmall);
    CHECK(c.name == "small");
    CHECK(c.seeds == std::vector<std::uint64_t>{3});
    CHECK(c.strategies == std::vector<Strategy>{Strategy::fedavg, Strategy::feddf});
    CHECK(c.partition.client_count == 3);
    CHECK(c.fl.client_count == 3);
    CHECK(c.fl.local_batch == 8);
    CHECK(c.fl.distill.max_steps == 10);
    REQUIRE(c.prototypes.size() == 1);
    CHECK(c.prototypes[0].layer_widths == std::vector<int>{2, 8, 3});
    CHECK(c.prototypes[0].activation == Activation::tanh);
    CHECK(c.grid.enabled);
    CHECK_FALSE(c.fl.drop_worst_threshold.has_value());
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("every shipped config parses") {
    for (const auto& entry : fs::directory_iterator(FEDDF_CONFIG_DIR)) {
        if (entry.path().extension() != ".ini") continue;
        CAPTURE(entry.path().string());
        CHECK_NOTHROW(load_config(entry.path()).validate());
    }
}

TEST_CASE("unknown keys are rejected by name") {
    try {
        parse_config(replace(kSmall, "local_batch = 8", "local_batch = 8\nlocal_bacth = 8"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "fl.local_bacth");
    }
    CHECK_THROWS_AS(parse_config(replace(kSmall, "[grid]", "[gird]")), ConfigError);
}

TEST_CASE("schema version is required and checked") {
    CHECK_THROWS_AS(parse_config(replace(kSmall, "schema_version = 1", "")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "schema_version = 1", "schema_version = 2")), ConfigError);
}

TEST_CASE("seed lists and ranges") {
    CHECK(parse_config(replace(kSmall, "seeds = 3", "seeds = 0-4")).seeds ==
          std::vector<std::uint64_t>{0, 1, 2, 3, 4});
    CHECK(parse_config(replace(kSmall, "seeds = 3", "seeds = 7, 2, 9")).seeds == std::vector<std::uint64_t>{7, 2, 9});
    CHECK_THROWS_AS(parse_config(replace(kSmall, "seeds = 3", "seeds = 5-1")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "seeds = 3", "seeds = x")), ConfigError);
}

TEST_CASE("invalid values are config errors") {
    CHECK_THROWS_AS(parse_config(replace(kSmall, "alpha = 0.5", "alpha = 0")).validate(), ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "fedavg, feddf", "fedavg, fedsgd")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "activation = tanh", "activation = gelu")), ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "local_batch = 8", "local_batch = 8\ndrop_worst_threshold = 0.5")),
                    ConfigError);
    CHECK_THROWS_AS(parse_config(replace(kSmall, "patience = 5", "patience = 11")).validate(), ConfigError);
}

TEST_CASE("drop-worst defaults to 1.1 over the class count") {
    const auto c = parse_config(replace(kSmall, "local_batch = 8", "local_batch = 8\ndrop_worst = true"));
    REQUIRE(c.fl.drop_worst_threshold.has_value());
    CHECK(*c.fl.drop_worst_threshold == doctest::Approx(1.1 / 3));
}

TEST_CASE("output root follows the environment") {
    auto c = parse_config(kSmall);
    {
        EnvGuard env(nullptr);
        CHECK(resolve_output_dir(c) == fs::path("out") / "small");
        c.output_dir = "/tmp/elsewhere";
        CHECK(resolve_output_dir(c) == fs::path("/tmp/elsewhere"));
    }
    {
        EnvGuard env("/tmp/feddf_root");
        CHECK(resolve_output_dir(c) == fs::path("/tmp/feddf_root") / "small");
    }
}

TEST_CASE("rounds_to_target examples") {
    std::vector<MetricsRow> h(3);
    const Scalar acc[] = {0.3, 0.8, 0.7};
    for (int i = 0; i < 3; ++i) {
        h[static_cast<std::size_t>(i)].round = i + 1;
        h[static_cast<std::size_t>(i)].acc_fused = acc[i];
    }
    CHECK(rounds_to_target(h, 0.0) == 1);
    CHECK(rounds_to_target(h, 0.75) == 2);
    CHECK(rounds_to_target(h, 0.8) == 2);
    CHECK_FALSE(rounds_to_target(h, 1.01).has_value());
    CHECK_THROWS_AS(rounds_to_target({}, 0.5), PreconditionError);

    std::optional<int> prev = 1;
    for (Scalar t = 0; t <= 1.0; t += 0.05) {
        const auto r = rounds_to_target(h, t);
        if (prev && r) CHECK(*r >= *prev);
        if (!prev) CHECK_FALSE(r.has_value());
        prev = r;
    }
}

TEST_CASE("metrics rows round trip through JSONL") {
    MetricsRow row;
    row.round = 4;
    row.wall_ms = 12.5;
    row.acc_averaged = 0.1 + 0.2;
    row.acc_fused = 1.0 / 3;
    row.acc_ensemble = 0.9;
    row.distill_steps = 17;
    row.acc_per_prototype["a"] = {0.25, 0.5};
    row.acc_per_prototype["b"] = {2.0 / 7, 0.75};
    const auto line = to_jsonl(row);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(parse_metrics_row(line) == row);
}

TEST_CASE("grid points are y-major over the square") {
    const Matrix p = grid_points({-1, 1}, 3);
    REQUIRE(p.rows() == 9);
    CHECK(p(0, 0) == -1);
    CHECK(p(0, 1) == -1);
    CHECK(p(1, 0) == 0);
    CHECK(p(1, 1) == -1);
    CHECK(p(3, 0) == -1);
    CHECK(p(3, 1) == 0);
    CHECK(p(8, 0) == 1);
    CHECK(p(8, 1) == 1);
}

TEST_CASE("decision grids are distributions") {
    const Prototype proto{"m", {2, 6, 4}, Activation::tanh, Precision::full};
    const Model m{proto, init_params(proto, 3)};
    const Matrix g = decision_boundary_grid(m, {-2, 2}, 7);
    CHECK(g.rows() == 49);
    CHECK(g.cols() == 4);
    CHECK((g.rowwise().sum().array() - 1).abs().maxCoeff() <= 1e-12);

    const Matrix z = decision_boundary_grid(Model{proto, zero_params(proto)}, {-2, 2}, 4);
    CHECK((z.array() - 0.25).abs().maxCoeff() <= 1e-15);

    const std::vector<Model> ts{m, Model{proto, init_params(proto, 4)}};
    const Matrix e = ensemble_boundary_grid(ts, {-2, 2}, 5);
    CHECK((e.rowwise().sum().array() - 1).abs().maxCoeff() <= 1e-12);

    const Prototype wide{"w", {3, 4, 2}, Activation::tanh, Precision::full};
    CHECK_THROWS_AS(decision_boundary_grid(Model{wide, init_params(wide, 1)}, {-1, 1}, 3), ConfigError);
}

TEST_CASE("grid of a model that is even in x is mirror symmetric") {
    // Zero first-coordinate weights make the model independent of x.
    const Prototype proto{"m", {2, 5, 3}, Activation::relu, Precision::full};
    auto params = init_params(proto, 8);
    const auto slice = layer_slices(proto)[0];
    params.values.segment(slice.weight_offset, 5).setZero();
    const int res = 6;
    const Matrix g = decision_boundary_grid(Model{proto, params}, {-2, 2}, res);
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            CHECK((g.row(y * res + x) - g.row(y * res + (res - 1 - x))).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("grid csv layout") {
    const auto dir = scratch("grid");
    const Matrix pts = grid_points({0, 1}, 2);
    Matrix probs(4, 2);
    probs << 0.5, 0.5, 1, 0, 0, 1, 0.25, 0.75;
    write_grid_csv(pts, probs, dir / "g.csv");
    std::ifstream is(dir / "g.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "x,y,p0,p1");
    int rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    CHECK(rows == 4);
}

TEST_CASE("build_task is deterministic and covers the training split") {
    const auto c = parse_config(kSmall);
    const auto a = build_task(c, 3);
    const auto b = build_task(c, 3);
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.shards == b.shards);
    CHECK(a.clients.size() == 3);
    Eigen::Index total = 0;
    for (const auto& k : a.clients) total += k.size();
    CHECK(total == a.train.size());
    CHECK(a.train.size() + a.val.size() == 60);
    CHECK(a.test.size() == 60);
    CHECK_FALSE(build_task(c, 4).train.inputs == a.train.inputs);
}

TEST_CASE("run_experiment writes metrics, checkpoints, grids and summaries") {
    const auto dir = scratch("run");
    EnvGuard env(dir.c_str());
    const auto c = parse_config(kSmall);
    run_experiment(c);
    const auto seed_dir = dir / "small" / "seed_3";
    for (const char* f : {"metrics_fedavg.jsonl", "metrics_feddf.jsonl", "checkpoint_fedavg_mlp.bin",
                          "checkpoint_feddf_mlp.bin", "grid_fedavg_averaged_mlp.csv", "grid_feddf_fused_mlp.csv",
                          "grid_feddf_ensemble.csv", "grid_feddf_client0.csv", "summary.json"}) {
        CAPTURE(f);
        CHECK(fs::exists(seed_dir / f));
    }
    CHECK_FALSE(fs::exists(seed_dir / "grid_fedavg_fused_mlp.csv"));
    CHECK(fs::exists(dir / "small" / "summary.json"));

    std::ifstream metrics(seed_dir / "metrics_feddf.jsonl");
    std::vector<MetricsRow> rows;
    for (std::string line; std::getline(metrics, line);) rows.push_back(parse_metrics_row(line));
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].round == 2);
    CHECK(rows[0].acc_per_prototype.contains("mlp"));

    std::ifstream ck(seed_dir / "checkpoint_feddf_mlp.bin", std::ios::binary);
    CHECK(read_params(ck).values.size() == c.prototypes[0].param_count());

    const auto summary = nlohmann::json::parse(slurp(seed_dir / "summary.json"));
    CHECK(summary["schema_version"] == kSchemaVersion);
    CHECK(summary["strategies"]["feddf"]["acc_fused_by_round"].size() == 2);
    const auto top = nlohmann::json::parse(slurp(dir / "small" / "summary.json"));
    CHECK(top["strategies"]["fedavg"]["final_acc_fused"].size() == 1);
}

TEST_CASE("seed summaries are byte-identical across reruns and thread counts") {
    auto c = parse_config(kSmall);
    const auto a = summary_json(c, run_seed(c, 3));
    const auto b = summary_json(c, run_seed(c, 3));
    c.threads = 3;
    const auto t = summary_json(c, run_seed(c, 3));
    CHECK(a == b);
    CHECK(a == t);
}

TEST_CASE("fedavg and feddf see the same first-round clients") {
    const auto c = parse_config(kSmall);
    const auto res = run_seed(c, 3);
    REQUIRE(res.runs.size() == 2);
    const auto& avg = res.runs[0].history[0];
    const auto& df = res.runs[1].history[0];
    CHECK(avg.acc_averaged == df.acc_averaged);
    CHECK(avg.acc_ensemble == df.acc_ensemble);
    CHECK(avg.acc_fused == avg.acc_averaged);
}

TEST_CASE("relative targets use centralized accuracy") {
    const auto c = parse_config(replace(kSmall, "threads = 1", "threads = 1\ntarget_relative = 0.5\ncentralized_epochs = 5"));
    const auto res = run_seed(c, 3);
    REQUIRE(res.centralized_accuracy.has_value());
    REQUIRE(res.target.has_value());
    CHECK(*res.target == doctest::Approx(0.5 * *res.centralized_accuracy));
    const auto j = nlohmann::json::parse(summary_json(c, res));
    CHECK(j["strategies"]["fedavg"].contains("rounds_to_target"));
}

TEST_CASE("partition statistics") {
    const auto c = parse_config(replace(kSmall, "seeds = 3", "seeds = 1, 2"));
    const auto j = nlohmann::json::parse(partition_stats_json(c));
    REQUIRE(j["seeds"].size() == 2);
    for (const auto& s : j["seeds"]) {
        REQUIRE(s["clients"].size() == 3);
        int n = 0;
        for (const auto& k : s["clients"]) {
            int h = 0;
            for (const auto& v : k["histogram"]) h += v.get<int>();
            CHECK(h == k["n"].get<int>());
            n += h;
            CHECK(k["entropy"].get<double>() >= 0);
        }
        CHECK(n == 48);
    }
}

TEST_CASE("bound suite from config") {
    auto c = parse_config(kSmall);
    c.bound_instances = 3;
    c.bound_instance.m = 50;
    c.bound_instance.reference_size = 500;
    const auto r = run_bound_suite(c);
    CHECK(r.reports.size() == 3);
    CHECK(r.all_hold);
    CHECK_THROWS_AS(make_hypothesis_class("trees", -1, 1, 3), ConfigError);
}

TEST_CASE("command line exit codes") {
    const auto dir = scratch("cli");
    const std::string cli = FEDDF_CLI_PATH;
    const auto good = dir / "good.ini";
    std::ofstream(good) << kSmall;
    const auto bad = dir / "bad.ini";
    std::ofstream(bad) << replace(kSmall, "[grid]", "[gird]");
    const auto broken_csv = dir / "broken.ini";
    std::ofstream(broken_csv) << replace(kSmall, "[dataset]", "[dataset]\nkind = csv\npath = nowhere.csv\ntest_path = nowhere.csv");
    auto tiny_bound = replace(kSmall, "[grid]", "[bound]\ninstances = 2\nm = 40\nreference_size = 200\n\n[grid]");

    const std::string env = "FEDDF_OUTPUT_ROOT=" + dir.string() + " ";
    CHECK(exit_code(env + cli + " run " + good.string()) == 0);
    CHECK(fs::exists(dir / "small" / "summary.json"));
    CHECK(exit_code(env + cli + " run " + bad.string()) == 1);
    CHECK(exit_code(env + cli + " run " + (dir / "missing.ini").string()) == 1);
    CHECK(exit_code(cli + " frobnicate " + good.string()) == 1);
    CHECK(exit_code(env + cli + " partition-stats " + good.string()) == 0);
    const auto bound_cfg = dir / "bound.ini";
    std::ofstream(bound_cfg) << tiny_bound;
    CHECK(exit_code(cli + " bound-check " + bound_cfg.string()) == 0);
    CHECK(exit_code(env + cli + " run " + broken_csv.string()) == 1);
}
