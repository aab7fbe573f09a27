#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "feddf/errors.hpp"
#include "feddf/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

int cmd_run(const std::string& path) {
    const auto cfg = feddf::harness::load_config(path);
    feddf::harness::run_experiment(cfg);
    std::cout << feddf::harness::resolve_output_dir(cfg).string() << '\n';
    return kOk;
}

int cmd_bound_check(const std::string& path) {
    const auto cfg = feddf::harness::load_config(path);
    const auto suite = feddf::harness::run_bound_suite(cfg);
    nlohmann::json out;
    out["instances"] = suite.reports.size();
    out["holds_all"] = suite.all_hold;
    out["min_slack"] = suite.min_slack;
    out["vacuous"] = suite.vacuous;
    auto reports = nlohmann::json::array();
    for (const auto& r : suite.reports) reports.push_back(nlohmann::json::parse(feddf::bound::to_json(r)));
    out["reports"] = reports;
    std::cout << out.dump(2) << '\n';
    return kOk;
}

int cmd_partition_stats(const std::string& path) {
    const auto cfg = feddf::harness::load_config(path);
    std::cout << feddf::harness::partition_stats_json(cfg);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated ensemble-distillation simulator"};
    app.require_subcommand(1);

    std::string config;
    auto* run = app.add_subcommand("run", "Run every strategy and seed of an experiment");
    run->add_option("config", config, "Experiment config (INI)")->required();
    auto* bound = app.add_subcommand("bound-check", "Evaluate the generalization bound on seeded instances");
    bound->add_option("config", config, "Experiment config (INI)")->required();
    auto* stats = app.add_subcommand("partition-stats", "Print per-client class histograms");
    stats->add_option("config", config, "Experiment config (INI)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*run) return cmd_run(config);
        if (*bound) return cmd_bound_check(config);
        return cmd_partition_stats(config);
    } catch (const feddf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
}
