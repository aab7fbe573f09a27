#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "feddf/bound.hpp"
#include "feddf/flcore.hpp"

namespace feddf::harness {

inline constexpr int kSchemaVersion = 1;

struct DatasetSpec {
    std::string kind = "blobs";  // blobs | csv
    int classes = 3;
    int dim = 2;
    int modes = 1;  // Gaussian components per class; per_class counts samples per component
    int per_class = 200;
    int test_per_class = 200;
    std::string centers = "ring";  // ring | random
    Scalar radius = 2.0;
    Scalar spread = 1.0;
    std::uint64_t center_seed = 0;
    Scalar scale = 0.5;
    Scalar val_fraction = 0.1;
    std::filesystem::path path;       // csv: training data
    std::filesystem::path test_path;  // csv: test data
    std::filesystem::path pool_path;  // csv: held-out distillation inputs (labels ignored)
};

struct PoolSpec {
    std::string kind = "uniform";  // uniform | gaussian | heldout
    Scalar low = -3;
    Scalar high = 3;
    Scalar mean = 0;
    Scalar stddev = 1;
    // heldout with blobs: samples per component drawn for the pool. uniform/gaussian: size of a fixed
    // noise set, or 0 for fresh draws every batch.
    int size = 0;
    int batch = 64;
};

struct GridSpec {
    bool enabled = false;
    Scalar low = -3;
    Scalar high = 3;
    int resolution = 50;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string name = "experiment";
    std::vector<std::uint64_t> seeds{0};
    std::vector<Strategy> strategies{Strategy::fedavg};
    std::filesystem::path output_dir;
    int threads = 1;
    std::optional<Scalar> target_accuracy;
    std::optional<Scalar> target_relative;  // fraction of centralized accuracy
    int centralized_epochs = 50;

    DatasetSpec dataset;
    PartitionSpec partition;  // seed is re-derived per experiment seed
    FLConfig fl;              // strategy and seed are set per run
    PoolSpec pool;
    std::vector<Prototype> prototypes;
    GridSpec grid;

    // bound-check
    bound::InstanceSpec bound_instance;
    int bound_instances = 100;
    std::string bound_family = "signed_thresholds";
    Scalar bound_cut_low = -4;
    Scalar bound_cut_high = 4;
    int bound_cut_count = 41;
    Scalar bound_delta = 0.05;

    void validate() const;
};

/// Parses the INI-style config. Throws ConfigError naming the offending key.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});

/// Output root: $FEDDF_OUTPUT_ROOT/<name> when the variable is set, else `output_dir` (or out/<name>).
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

struct PrototypeAccuracy {
    Scalar averaged = 0;
    Scalar fused = 0;
    bool operator==(const PrototypeAccuracy&) const = default;
};

struct MetricsRow {
    int round = 0;
    Scalar wall_ms = 0;
    Scalar acc_averaged = 0;
    Scalar acc_fused = 0;
    Scalar acc_ensemble = 0;
    std::map<std::string, PrototypeAccuracy> acc_per_prototype;
    int distill_steps = 0;

    bool operator==(const MetricsRow&) const = default;
};

MetricsRow to_metrics_row(const RoundRecord& rec, Scalar wall_ms);
std::string to_jsonl(const MetricsRow& row);
MetricsRow parse_metrics_row(const std::string& line);

/// First round whose server-model accuracy (acc_fused) reaches `target`.
std::optional<int> rounds_to_target(const std::vector<MetricsRow>& history, Scalar target);

struct GridBounds {
    Scalar low = -3;
    Scalar high = 3;
};

/// resolution^2 points, y outer and x inner, spanning [low, high]^2.
Matrix grid_points(const GridBounds& bounds, int resolution);

/// Softmax probabilities at each grid point (rows follow grid_points order).
Matrix decision_boundary_grid(const Model& model, const GridBounds& bounds, int resolution);
Matrix ensemble_boundary_grid(std::span<const Model> teachers, const GridBounds& bounds, int resolution);

/// CSV `x,y,p0..p{C-1}`.
void write_grid_csv(const Matrix& points, const Matrix& probs, const std::filesystem::path& path);

struct TaskData {
    Dataset train;
    Dataset val;
    Dataset test;
    std::vector<Shard> shards;
    std::vector<Dataset> clients;
    std::vector<std::string> client_prototype;
    DistillPool pool;
};

/// Realizes data, server validation split, partition, and distillation pool for one seed.
TaskData build_task(const ExperimentConfig& cfg, std::uint64_t seed);

struct StrategyRun {
    Strategy strategy = Strategy::fedavg;
    std::vector<MetricsRow> history;
    std::vector<RoundRecord> records;
    ServerState final_state;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::optional<Scalar> centralized_accuracy;
    std::optional<Scalar> target;
    std::vector<StrategyRun> runs;
};

/// Accuracy of the first prototype trained on the pooled training data.
Scalar centralized_accuracy(const ExperimentConfig& cfg, const TaskData& task, std::uint64_t seed);

/// Runs every configured strategy for one seed in memory.
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed);
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const TaskData& task);

/// Deterministic per-seed summary (no timings).
std::string summary_json(const ExperimentConfig& cfg, const SeedResult& res);

/// Writes metrics JSONL, checkpoints, grids, and summaries under the resolved output dir.
void run_experiment(const ExperimentConfig& cfg);

struct BoundSuiteResult {
    std::vector<bound::BoundReport> reports;
    bool all_hold = true;
    Scalar min_slack = 0;
    int vacuous = 0;
};

BoundSuiteResult run_bound_suite(const ExperimentConfig& cfg);
bound::FiniteHypothesisClass make_hypothesis_class(const std::string& family, Scalar low, Scalar high, int count);

/// Per-seed class histograms and entropies as JSON.
std::string partition_stats_json(const ExperimentConfig& cfg);

}  // namespace feddf::harness
