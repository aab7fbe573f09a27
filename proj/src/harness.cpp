#include "feddf/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

namespace feddf::harness {

namespace pt = boost::property_tree;
using nlohmann::json;

namespace {

// Every accepted key, as "section.key" ("" section for top-level keys).
const std::set<std::string> kKnownKeys = {
    "schema_version",
    "experiment.name", "experiment.seeds", "experiment.strategies", "experiment.output_dir", "experiment.threads",
    "experiment.target_accuracy", "experiment.target_relative", "experiment.centralized_epochs",
    "dataset.kind", "dataset.classes", "dataset.dim", "dataset.per_class", "dataset.test_per_class",
    "dataset.modes", "dataset.centers", "dataset.radius", "dataset.spread", "dataset.center_seed", "dataset.scale",
    "dataset.val_fraction", "dataset.path", "dataset.test_path", "dataset.pool_path",
    "partition.alpha", "partition.clients",
    "fl.rounds", "fl.participation", "fl.local_epochs", "fl.local_lr", "fl.local_batch", "fl.prox_mu",
    "fl.momentum", "fl.drop_worst", "fl.drop_worst_threshold",
    "distill.max_steps", "distill.patience", "distill.lr", "distill.cosine", "distill.init",
    "pool.kind", "pool.low", "pool.high", "pool.mean", "pool.stddev", "pool.size", "pool.batch",
    "model.hidden", "model.activation", "model.precision", "model.prototypes",
    "grid.enabled", "grid.low", "grid.high", "grid.resolution",
    "bound.instances", "bound.clients", "bound.m", "bound.reference_size", "bound.max_shift", "bound.label_noise",
    "bound.delta", "bound.family", "bound.cut_low", "bound.cut_high", "bound.cut_count", "bound.seed",
};
const std::set<std::string> kPrototypeKeys = {"hidden", "activation", "precision"};

class Reader {
public:
    explicit Reader(const pt::ptree& tree) : tree_(tree) {}

    template <typename T>
    std::optional<T> opt(const std::string& key) const {
        const auto node = tree_.get_child_optional(pt::ptree::path_type(key, '.'));
        if (!node) return std::nullopt;
        std::string raw = boost::trim_copy(node->data());
        if constexpr (std::is_same_v<T, std::string>) {
            return raw;
        } else if constexpr (std::is_same_v<T, bool>) {
            boost::to_lower(raw);
            if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
            if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
            throw ConfigError("expected a boolean, got '" + raw + "'", key);
        } else {
            std::istringstream is(raw);
            T v{};
            is >> v;
            if (is.fail() || !is.eof()) throw ConfigError("cannot parse '" + raw + "'", key);
            return v;
        }
    }

    template <typename T>
    T get(const std::string& key, T fallback) const {
        return opt<T>(key).value_or(fallback);
    }

    template <typename T>
    std::optional<std::vector<T>> list(const std::string& key) const {
        const auto raw = opt<std::string>(key);
        if (!raw) return std::nullopt;
        std::vector<std::string> parts;
        boost::split(parts, *raw, boost::is_any_of(","));
        std::vector<T> out;
        for (auto p : parts) {
            boost::trim(p);
            if (p.empty()) continue;
            if constexpr (std::is_same_v<T, std::string>) {
                out.push_back(p);
            } else {
                std::istringstream is(p);
                T v{};
                is >> v;
                if (is.fail() || !is.eof()) throw ConfigError("cannot parse list item '" + p + "'", key);
                out.push_back(v);
            }
        }
        return out;
    }

private:
    const pt::ptree& tree_;
};

std::vector<std::uint64_t> parse_seeds(const Reader& r) {
    const auto raw = r.opt<std::string>("experiment.seeds");
    if (!raw) return {0};
    // "a-b" expands to the inclusive range.
    if (raw->find('-') != std::string::npos && raw->find(',') == std::string::npos) {
        std::vector<std::string> ends;
        boost::split(ends, *raw, boost::is_any_of("-"));
        try {
            const auto lo = std::stoull(boost::trim_copy(ends.at(0)));
            const auto hi = std::stoull(boost::trim_copy(ends.at(1)));
            if (hi < lo) throw ConfigError("empty seed range", "experiment.seeds");
            std::vector<std::uint64_t> out;
            for (auto s = lo; s <= hi; ++s) out.push_back(s);
            return out;
        } catch (const std::logic_error&) {
            throw ConfigError("cannot parse seed range '" + *raw + "'", "experiment.seeds");
        }
    }
    auto seeds = r.list<std::uint64_t>("experiment.seeds").value();
    if (seeds.empty()) throw ConfigError("no seeds", "experiment.seeds");
    return seeds;
}

Activation parse_activation(const std::string& s, const std::string& key) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + s + "'", key);
}

Precision parse_precision(const std::string& s, const std::string& key) {
    if (s == "full") return Precision::full;
    if (s == "binary_ste") return Precision::binary_ste;
    throw ConfigError("unknown precision '" + s + "'", key);
}

Prototype read_prototype(const Reader& r, const std::string& section, const std::string& id, int dim, int classes) {
    Prototype p;
    p.id = id;
    p.layer_widths.push_back(dim);
    for (int w : r.list<int>(section + ".hidden").value_or(std::vector<int>{32, 32})) {
        if (w < 1) throw ConfigError("hidden widths must be >= 1", section + ".hidden");
        p.layer_widths.push_back(w);
    }
    p.layer_widths.push_back(classes);
    p.activation = parse_activation(r.get<std::string>(section + ".activation", "relu"), section + ".activation");
    p.precision = parse_precision(r.get<std::string>(section + ".precision", "full"), section + ".precision");
    return p;
}

void check_keys(const pt::ptree& tree) {
    for (const auto& [section, node] : tree) {
        if (node.empty()) {
            if (!kKnownKeys.contains(section)) throw ConfigError("unknown key", section);
            continue;
        }
        const bool proto_section = section.rfind("prototype_", 0) == 0;
        for (const auto& [key, _] : node) {
            const std::string full = section + "." + key;
            if (proto_section ? !kPrototypeKeys.contains(key) : !kKnownKeys.contains(full)) {
                throw ConfigError("unknown key", full);
            }
        }
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    if (schema_version != kSchemaVersion) {
        throw ConfigError("unsupported schema_version " + std::to_string(schema_version), "schema_version");
    }
    if (seeds.empty()) throw ConfigError("no seeds", "experiment.seeds");
    if (strategies.empty()) throw ConfigError("no strategies", "experiment.strategies");
    if (threads < 1) throw ConfigError("threads must be >= 1", "experiment.threads");
    if (target_relative && !(*target_relative > 0)) throw ConfigError("must be positive", "experiment.target_relative");
    if (centralized_epochs < 0) throw ConfigError("must be >= 0", "experiment.centralized_epochs");
    if (dataset.kind == "blobs") {
        if (dataset.classes < 2) throw ConfigError("need at least 2 classes", "dataset.classes");
        if (dataset.dim < 1) throw ConfigError("dim must be >= 1", "dataset.dim");
        if (dataset.modes < 1) throw ConfigError("modes must be >= 1", "dataset.modes");
        if (dataset.per_class < 1) throw ConfigError("per_class must be >= 1", "dataset.per_class");
        if (dataset.test_per_class < 1) throw ConfigError("test_per_class must be >= 1", "dataset.test_per_class");
        if (dataset.centers != "ring" && dataset.centers != "random") {
            throw ConfigError("centers must be ring or random", "dataset.centers");
        }
        if (dataset.centers == "ring" && dataset.dim != 2) throw ConfigError("ring centers need dim = 2", "dataset.centers");
        if (!(dataset.scale >= 0)) throw ConfigError("scale must be >= 0", "dataset.scale");
    } else if (dataset.kind == "csv") {
        if (!std::filesystem::exists(dataset.path)) throw ConfigError("file not found", "dataset.path");
        if (!std::filesystem::exists(dataset.test_path)) throw ConfigError("file not found", "dataset.test_path");
        if (pool.kind == "heldout" && !std::filesystem::exists(dataset.pool_path)) {
            throw ConfigError("file not found", "dataset.pool_path");
        }
    } else {
        throw ConfigError("kind must be blobs or csv", "dataset.kind");
    }
    if (!(dataset.val_fraction > 0 && dataset.val_fraction < 1)) {
        throw ConfigError("val_fraction must lie in (0, 1)", "dataset.val_fraction");
    }
    if (!(partition.alpha > 0)) throw ConfigError("alpha must be positive", "partition.alpha");
    if (partition.client_count < 1) throw ConfigError("clients must be >= 1", "partition.clients");
    if (pool.kind != "uniform" && pool.kind != "gaussian" && pool.kind != "heldout") {
        throw ConfigError("kind must be uniform, gaussian or heldout", "pool.kind");
    }
    if (pool.kind == "uniform" && !(pool.low < pool.high)) throw ConfigError("low must be < high", "pool.low");
    if (pool.kind == "gaussian" && !(pool.stddev > 0)) throw ConfigError("stddev must be positive", "pool.stddev");
    if (pool.kind == "heldout" && dataset.kind == "blobs" && pool.size < 1) {
        throw ConfigError("held-out pool needs size >= 1", "pool.size");
    }
    if (pool.size < 0) throw ConfigError("size must be >= 0", "pool.size");
    if (pool.batch < 1) throw ConfigError("batch must be >= 1", "pool.batch");
    if (prototypes.empty()) throw ConfigError("no prototypes", "model.prototypes");
    for (auto s : strategies) {
        FLConfig f = fl;
        f.strategy = s;
        f.client_count = partition.client_count;
        f.threads = threads;
        f.validate();
    }
    if (grid.enabled) {
        if (grid.resolution < 2) throw ConfigError("resolution must be >= 2", "grid.resolution");
        if (!(grid.low < grid.high)) throw ConfigError("low must be < high", "grid.low");
    }
    if (bound_instances < 1) throw ConfigError("instances must be >= 1", "bound.instances");
    if (!(bound_delta > 0 && bound_delta < 1)) throw ConfigError("delta must lie in (0, 1)", "bound.delta");
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    pt::ptree tree;
    try {
        std::istringstream is(text);
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(e.message() + " (line " + std::to_string(e.line()) + ")", "config");
    }
    check_keys(tree);
    const Reader r(tree);
    ExperimentConfig c;

    const auto schema = r.opt<int>("schema_version");
    if (!schema) throw ConfigError("missing", "schema_version");
    c.schema_version = *schema;

    c.name = r.get<std::string>("experiment.name", c.name);
    c.seeds = parse_seeds(r);
    if (auto s = r.list<std::string>("experiment.strategies")) {
        c.strategies.clear();
        for (const auto& name : *s) c.strategies.push_back(parse_strategy(name));
    }
    if (auto out = r.opt<std::string>("experiment.output_dir")) c.output_dir = base_dir / *out;
    c.threads = r.get("experiment.threads", c.threads);
    c.target_accuracy = r.opt<Scalar>("experiment.target_accuracy");
    c.target_relative = r.opt<Scalar>("experiment.target_relative");
    c.centralized_epochs = r.get("experiment.centralized_epochs", c.centralized_epochs);

    auto& d = c.dataset;
    d.kind = r.get("dataset.kind", d.kind);
    d.classes = r.get("dataset.classes", d.classes);
    d.dim = r.get("dataset.dim", d.dim);
    d.per_class = r.get("dataset.per_class", d.per_class);
    d.test_per_class = r.get("dataset.test_per_class", d.test_per_class);
    d.modes = r.get("dataset.modes", d.modes);
    d.centers = r.get("dataset.centers", d.centers);
    d.radius = r.get("dataset.radius", d.radius);
    d.spread = r.get("dataset.spread", d.spread);
    d.center_seed = r.get("dataset.center_seed", d.center_seed);
    d.scale = r.get("dataset.scale", d.scale);
    d.val_fraction = r.get("dataset.val_fraction", d.val_fraction);
    if (auto p = r.opt<std::string>("dataset.path")) d.path = base_dir / *p;
    if (auto p = r.opt<std::string>("dataset.test_path")) d.test_path = base_dir / *p;
    if (auto p = r.opt<std::string>("dataset.pool_path")) d.pool_path = base_dir / *p;
    if (d.kind == "csv" && std::filesystem::exists(sidecar_path(d.path))) {
        std::ifstream meta_is(sidecar_path(d.path));
        const auto meta = json::parse(meta_is);
        d.classes = meta.at("class_count").get<int>();
        d.dim = meta.at("d").get<int>();
    }

    c.partition.alpha = r.get("partition.alpha", c.partition.alpha);
    c.partition.client_count = r.get("partition.clients", c.partition.client_count);

    auto& f = c.fl;
    f.rounds = r.get("fl.rounds", f.rounds);
    f.participation = r.get("fl.participation", f.participation);
    f.local_epochs = r.get("fl.local_epochs", f.local_epochs);
    f.local_lr = r.get("fl.local_lr", f.local_lr);
    f.local_batch = r.get("fl.local_batch", f.local_batch);
    f.prox_mu = r.get("fl.prox_mu", f.prox_mu);
    f.momentum = r.get("fl.momentum", f.momentum);
    if (r.get("fl.drop_worst", false)) {
        f.drop_worst_threshold = r.get("fl.drop_worst_threshold", default_drop_threshold(d.classes));
    } else if (r.opt<Scalar>("fl.drop_worst_threshold")) {
        throw ConfigError("set fl.drop_worst = true to use a threshold", "fl.drop_worst_threshold");
    }
    f.client_count = c.partition.client_count;

    auto& dc = f.distill;
    dc.max_steps = r.get("distill.max_steps", 500);
    dc.patience = r.get("distill.patience", std::min(100, dc.max_steps));
    dc.base_lr = r.get("distill.lr", dc.base_lr);
    dc.cosine = r.get("distill.cosine", dc.cosine);
    const auto init = r.get<std::string>("distill.init", "from_average");
    if (init == "from_average") {
        dc.init_mode = InitMode::from_average;
    } else if (init == "from_previous") {
        dc.init_mode = InitMode::from_previous;
    } else {
        throw ConfigError("init must be from_average or from_previous", "distill.init");
    }

    auto& p = c.pool;
    p.kind = r.get("pool.kind", p.kind);
    p.low = r.get("pool.low", p.low);
    p.high = r.get("pool.high", p.high);
    p.mean = r.get("pool.mean", p.mean);
    p.stddev = r.get("pool.stddev", p.stddev);
    p.size = r.get("pool.size", p.size);
    p.batch = r.get("pool.batch", p.batch);

    if (auto ids = r.list<std::string>("model.prototypes")) {
        for (const auto& id : *ids) {
            const std::string section = "prototype_" + id;
            if (!tree.get_child_optional(section)) throw ConfigError("missing section [" + section + "]", "model.prototypes");
            c.prototypes.push_back(read_prototype(r, section, id, d.dim, d.classes));
        }
    } else {
        c.prototypes.push_back(read_prototype(r, "model", "mlp", d.dim, d.classes));
    }

    c.grid.enabled = r.get("grid.enabled", c.grid.enabled);
    c.grid.low = r.get("grid.low", c.grid.low);
    c.grid.high = r.get("grid.high", c.grid.high);
    c.grid.resolution = r.get("grid.resolution", c.grid.resolution);

    c.bound_instances = r.get("bound.instances", c.bound_instances);
    c.bound_instance.K = r.get("bound.clients", c.bound_instance.K);
    c.bound_instance.m = r.get<std::int64_t>("bound.m", c.bound_instance.m);
    c.bound_instance.reference_size = r.get("bound.reference_size", c.bound_instance.reference_size);
    c.bound_instance.max_shift = r.get("bound.max_shift", c.bound_instance.max_shift);
    c.bound_instance.label_noise = r.get("bound.label_noise", c.bound_instance.label_noise);
    c.bound_instance.seed = r.get<std::uint64_t>("bound.seed", 0);
    c.bound_delta = r.get("bound.delta", c.bound_delta);
    c.bound_family = r.get("bound.family", c.bound_family);
    c.bound_cut_low = r.get("bound.cut_low", c.bound_cut_low);
    c.bound_cut_high = r.get("bound.cut_high", c.bound_cut_high);
    c.bound_cut_count = r.get("bound.cut_count", c.bound_cut_count);
    if (c.bound_instance.K < 1) throw ConfigError("clients must be >= 1", "bound.clients");
    if (c.bound_instance.m < 1) throw ConfigError("m must be >= 1", "bound.m");
    if (c.bound_instance.reference_size < 1) throw ConfigError("must be >= 1", "bound.reference_size");
    if (c.bound_cut_count < 1) throw ConfigError("cut_count must be >= 1", "bound.cut_count");

    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string(), "config");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
    if (const char* root = std::getenv("FEDDF_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
        return std::filesystem::path(root) / cfg.name;
    }
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return std::filesystem::path("out") / cfg.name;
}

MetricsRow to_metrics_row(const RoundRecord& rec, Scalar wall_ms) {
    MetricsRow row;
    row.round = rec.round;
    row.wall_ms = wall_ms;
    row.acc_averaged = rec.acc_averaged;
    row.acc_fused = rec.acc_fused;
    row.acc_ensemble = rec.acc_ensemble;
    row.distill_steps = rec.distill_steps_used;
    for (const auto& [pid, pr] : rec.per_prototype) row.acc_per_prototype[pid] = {pr.acc_averaged, pr.acc_fused};
    return row;
}

std::string to_jsonl(const MetricsRow& row) {
    json per = json::object();
    for (const auto& [pid, a] : row.acc_per_prototype) per[pid] = {{"averaged", a.averaged}, {"fused", a.fused}};
    json j = {{"round", row.round},
              {"wall_ms", row.wall_ms},
              {"acc_averaged", row.acc_averaged},
              {"acc_fused", row.acc_fused},
              {"acc_ensemble", row.acc_ensemble},
              {"acc_per_prototype", per},
              {"distill_steps", row.distill_steps}};
    return j.dump();
}

MetricsRow parse_metrics_row(const std::string& line) {
    const auto j = json::parse(line);
    MetricsRow row;
    row.round = j.at("round").get<int>();
    row.wall_ms = j.at("wall_ms").get<Scalar>();
    row.acc_averaged = j.at("acc_averaged").get<Scalar>();
    row.acc_fused = j.at("acc_fused").get<Scalar>();
    row.acc_ensemble = j.at("acc_ensemble").get<Scalar>();
    row.distill_steps = j.at("distill_steps").get<int>();
    for (const auto& [pid, a] : j.at("acc_per_prototype").items()) {
        row.acc_per_prototype[pid] = {a.at("averaged").get<Scalar>(), a.at("fused").get<Scalar>()};
    }
    return row;
}

std::optional<int> rounds_to_target(const std::vector<MetricsRow>& history, Scalar target) {
    if (history.empty()) throw PreconditionError("rounds_to_target: empty history");
    for (const auto& row : history) {
        if (row.acc_fused >= target) return row.round;
    }
    return std::nullopt;
}

Matrix grid_points(const GridBounds& bounds, int resolution) {
    if (resolution < 2) throw ConfigError("resolution must be >= 2", "grid.resolution");
    Matrix pts(static_cast<Eigen::Index>(resolution) * resolution, 2);
    const Scalar step = (bounds.high - bounds.low) / (resolution - 1);
    Eigen::Index r = 0;
    for (int iy = 0; iy < resolution; ++iy) {
        for (int ix = 0; ix < resolution; ++ix, ++r) {
            pts(r, 0) = bounds.low + step * ix;
            pts(r, 1) = bounds.low + step * iy;
        }
    }
    return pts;
}

Matrix decision_boundary_grid(const Model& model, const GridBounds& bounds, int resolution) {
    if (model.proto.input_dim() != 2) throw ConfigError("decision grids need 2-D inputs", "grid.enabled");
    return softmax_rows(predict_logits(model, grid_points(bounds, resolution)));
}

Matrix ensemble_boundary_grid(std::span<const Model> teachers, const GridBounds& bounds, int resolution) {
    for (const auto& t : teachers) {
        if (t.proto.input_dim() != 2) throw ConfigError("decision grids need 2-D inputs", "grid.enabled");
    }
    return softmax_rows(ensemble_logits(teachers, grid_points(bounds, resolution)));
}

void write_grid_csv(const Matrix& points, const Matrix& probs, const std::filesystem::path& path) {
    if (points.rows() != probs.rows()) throw ShapeError("write_grid_csv: row mismatch");
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path.string());
    os << "x,y";
    for (Eigen::Index c = 0; c < probs.cols(); ++c) os << ",p" << c;
    os << '\n' << std::setprecision(10);
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
        os << points(r, 0) << ',' << points(r, 1);
        for (Eigen::Index c = 0; c < probs.cols(); ++c) os << ',' << probs(r, c);
        os << '\n';
    }
}

namespace {

// Component j of a multi-modal blob set belongs to class j % classes.
void fold_modes(Dataset& data, int classes) {
    for (int& y : data.labels) y %= classes;
    data.class_count = classes;
}

}  // namespace

TaskData build_task(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto& d = cfg.dataset;
    TaskData task;
    Dataset full;
    Matrix pool_inputs;
    const int components = d.kind == "blobs" ? d.classes * d.modes : d.classes;
    if (d.kind == "blobs") {
        const Matrix centers = d.centers == "ring" ? ring_centers(components, d.radius)
                                                   : random_centers(components, d.dim, d.spread, d.center_seed);
        full = make_gaussian_blobs(components, d.per_class, centers, d.scale, derive_seed({seed, 10}));
        task.test = make_gaussian_blobs(components, d.test_per_class, centers, d.scale, derive_seed({seed, 11}));
        if (cfg.pool.kind == "heldout") {
            pool_inputs =
                make_gaussian_blobs(components, cfg.pool.size, centers, d.scale, derive_seed({seed, 12})).inputs;
        }
    } else {
        full = read_dataset_csv(d.path);
        task.test = read_dataset_csv(d.test_path);
        if (cfg.pool.kind == "heldout") pool_inputs = read_dataset_csv(d.pool_path).inputs;
    }
    auto split = split_train_val(full, d.val_fraction, derive_seed({seed, 13}));
    task.train = std::move(split.train);
    task.val = std::move(split.val);

    // With several modes per class the Dirichlet split runs over modes, so shards differ in input
    // region as well as in label mix.
    PartitionSpec ps = cfg.partition;
    ps.seed = derive_seed({seed, 14});
    task.shards = dirichlet_partition(task.train.labels, task.train.class_count, ps);
    if (components != d.classes) {
        fold_modes(task.train, d.classes);
        fold_modes(task.val, d.classes);
        fold_modes(task.test, d.classes);
    }
    for (std::size_t k = 0; k < task.shards.size(); ++k) {
        if (task.shards[k].empty()) throw ConfigError("more clients than training samples", "partition.clients");
        task.clients.push_back(task.train.subset(task.shards[k]));
        task.client_prototype.push_back(cfg.prototypes[k % cfg.prototypes.size()].id);
    }

    task.pool.batch_size = cfg.pool.batch;
    const int dim = static_cast<int>(task.train.dim());
    if (cfg.pool.kind == "heldout") {
        task.pool.source = HeldOutSource{std::move(pool_inputs)};
        return task;
    }
    if (cfg.pool.kind == "uniform") {
        task.pool.source = UniformNoiseSource{cfg.pool.low, cfg.pool.high, dim};
    } else {
        task.pool.source = GaussianNoiseSource{dim, cfg.pool.mean, cfg.pool.stddev};
    }
    // A positive size freezes a finite noise set drawn once per seed.
    if (cfg.pool.size > 0) {
        DistillPool draw{task.pool.source, cfg.pool.size};
        Rng rng(derive_seed({seed, 17}));
        task.pool.source = HeldOutSource{sample_distill_batch(draw, rng)};
    }
    return task;
}

Scalar centralized_accuracy(const ExperimentConfig& cfg, const TaskData& task, std::uint64_t seed) {
    const auto& proto = cfg.prototypes.front();
    const ParamVector init = init_params(proto, derive_seed({seed, 15}));
    Rng rng(derive_seed({seed, 16}));
    const ParamVector trained = client_local_update(proto, init, task.train, cfg.centralized_epochs, cfg.fl.local_lr,
                                                    cfg.fl.local_batch, std::nullopt, init, rng);
    return top1_accuracy(proto, trained, task.test);
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) { return run_seed(cfg, seed, build_task(cfg, seed)); }

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const TaskData& task) {
    SeedResult res;
    res.seed = seed;
    if (cfg.target_relative) {
        res.centralized_accuracy = centralized_accuracy(cfg, task, seed);
        res.target = *cfg.target_relative * *res.centralized_accuracy;
    } else if (cfg.target_accuracy) {
        res.target = cfg.target_accuracy;
    }
    for (auto strategy : cfg.strategies) {
        FLConfig f = cfg.fl;
        f.strategy = strategy;
        f.seed = seed;
        f.client_count = static_cast<int>(task.clients.size());
        f.threads = cfg.threads;
        f.distill.pool = task.pool;
        StrategyRun run;
        run.strategy = strategy;
        run.final_state = make_server_state(cfg.prototypes, f);
        for (int t = 0; t < f.rounds; ++t) {
            const auto t0 = std::chrono::steady_clock::now();
            RoundRecord rec = cfg.prototypes.size() == 1
                                  ? run_round_homogeneous(run.final_state, f, task.clients, task.val, task.test)
                                  : run_round_heterogeneous(run.final_state, f, task.clients, task.client_prototype,
                                                            task.val, task.test);
            const auto ms = std::chrono::duration<Scalar, std::milli>(std::chrono::steady_clock::now() - t0).count();
            run.history.push_back(to_metrics_row(rec, ms));
            if (!run.records.empty()) {
                run.records.back().teachers.clear();
                run.records.back().averaged.clear();
            }
            run.records.push_back(std::move(rec));
        }
        res.runs.push_back(std::move(run));
    }
    return res;
}

namespace {

json optional_json(const std::optional<Scalar>& v) { return v ? json(*v) : json(nullptr); }

json strategy_summary(const StrategyRun& run, const std::optional<Scalar>& target) {
    json s;
    json acc = json::array();
    for (const auto& row : run.history) acc.push_back(row.acc_fused);
    s["acc_fused_by_round"] = acc;
    if (!run.history.empty()) {
        const auto& last = run.history.back();
        s["final"] = {{"acc_averaged", last.acc_averaged},
                      {"acc_fused", last.acc_fused},
                      {"acc_ensemble", last.acc_ensemble}};
        if (target) {
            const auto r = rounds_to_target(run.history, *target);
            s["rounds_to_target"] = r ? json(*r) : json(nullptr);
        } else {
            s["rounds_to_target"] = nullptr;
        }
    }
    return s;
}

}  // namespace

std::string summary_json(const ExperimentConfig& cfg, const SeedResult& res) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["name"] = cfg.name;
    j["seed"] = res.seed;
    j["centralized_accuracy"] = optional_json(res.centralized_accuracy);
    j["target"] = optional_json(res.target);
    json strategies = json::object();
    for (const auto& run : res.runs) strategies[to_string(run.strategy)] = strategy_summary(run, res.target);
    j["strategies"] = strategies;
    return j.dump(2) + "\n";
}

void run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto root = resolve_output_dir(cfg);
    std::filesystem::create_directories(root);
    json aggregate;
    aggregate["schema_version"] = kSchemaVersion;
    aggregate["name"] = cfg.name;
    aggregate["seeds"] = cfg.seeds;
    json per_strategy = json::object();

    for (auto seed : cfg.seeds) {
        const auto dir = root / ("seed_" + std::to_string(seed));
        std::filesystem::create_directories(dir);
        const TaskData task = build_task(cfg, seed);
        const SeedResult res = run_seed(cfg, seed, task);

        for (const auto& run : res.runs) {
            const auto name = to_string(run.strategy);
            std::ofstream metrics(dir / ("metrics_" + name + ".jsonl"));
            for (const auto& row : run.history) metrics << to_jsonl(row) << '\n';
            for (const auto& [pid, params] : run.final_state.params) {
                std::ofstream ck(dir / ("checkpoint_" + name + "_" + pid + ".bin"), std::ios::binary);
                write_params(ck, params);
            }
            if (cfg.grid.enabled && !run.records.empty() && task.train.dim() == 2) {
                const auto& last = run.records.back();
                const GridBounds b{cfg.grid.low, cfg.grid.high};
                const Matrix pts = grid_points(b, cfg.grid.resolution);
                for (std::size_t i = 0; i < last.teachers.size(); ++i) {
                    write_grid_csv(pts, decision_boundary_grid(last.teachers[i], b, cfg.grid.resolution),
                                   dir / ("grid_" + name + "_client" + std::to_string(last.teacher_clients[i]) + ".csv"));
                }
                for (const auto& [pid, avg] : last.averaged) {
                    const Model m{run.final_state.prototypes.at(pid), avg};
                    write_grid_csv(pts, decision_boundary_grid(m, b, cfg.grid.resolution),
                                   dir / ("grid_" + name + "_averaged_" + pid + ".csv"));
                }
                if (is_distilling(run.strategy)) {
                    for (const auto& [pid, params] : run.final_state.params) {
                        Prototype served = run.final_state.prototypes.at(pid);
                        served.precision = Precision::full;
                        write_grid_csv(pts, decision_boundary_grid(Model{served, params}, b, cfg.grid.resolution),
                                       dir / ("grid_" + name + "_fused_" + pid + ".csv"));
                    }
                }
                if (!last.teachers.empty()) {
                    write_grid_csv(pts, ensemble_boundary_grid(last.teachers, b, cfg.grid.resolution),
                                   dir / ("grid_" + name + "_ensemble.csv"));
                }
            }
            auto& agg = per_strategy[name];
            if (!run.history.empty()) agg["final_acc_fused"].push_back(run.history.back().acc_fused);
            if (res.target) {
                const auto r = rounds_to_target(run.history, *res.target);
                agg["rounds_to_target"].push_back(r ? json(*r) : json(nullptr));
            }
        }
        std::ofstream(dir / "summary.json") << summary_json(cfg, res);
    }
    for (auto& [name, agg] : per_strategy.items()) {
        if (agg.contains("final_acc_fused")) {
            Scalar sum = 0;
            for (const auto& v : agg["final_acc_fused"]) sum += v.get<Scalar>();
            agg["mean_final_acc_fused"] = sum / static_cast<Scalar>(agg["final_acc_fused"].size());
        }
    }
    aggregate["strategies"] = per_strategy;
    std::ofstream(root / "summary.json") << aggregate.dump(2) << '\n';
}

bound::FiniteHypothesisClass make_hypothesis_class(const std::string& family, Scalar low, Scalar high, int count) {
    if (count < 1) throw ConfigError("cut_count must be >= 1", "bound.cut_count");
    std::vector<Scalar> cuts;
    for (int i = 0; i < count; ++i) cuts.push_back(count == 1 ? low : low + (high - low) * i / (count - 1));
    if (family == "thresholds") return bound::FiniteHypothesisClass::thresholds(cuts);
    if (family == "signed_thresholds") return bound::FiniteHypothesisClass::signed_thresholds(cuts);
    if (family == "stumps_2d") return bound::FiniteHypothesisClass::stumps_2d(cuts);
    throw ConfigError("unknown family '" + family + "'", "bound.family");
}

BoundSuiteResult run_bound_suite(const ExperimentConfig& cfg) {
    const auto H = make_hypothesis_class(cfg.bound_family, cfg.bound_cut_low, cfg.bound_cut_high, cfg.bound_cut_count);
    if (cfg.bound_family == "stumps_2d") throw ConfigError("the instance generator is 1-D", "bound.family");
    BoundSuiteResult out;
    out.min_slack = std::numeric_limits<Scalar>::infinity();
    for (int i = 0; i < cfg.bound_instances; ++i) {
        bound::InstanceSpec spec = cfg.bound_instance;
        spec.seed = derive_seed({cfg.bound_instance.seed, static_cast<std::uint64_t>(i)});
        const auto inst = bound::make_instance(spec);
        auto rep = bound::check_bound(cfg.bound_delta, H, inst.global_reference, inst.clients);
        out.all_hold = out.all_hold && rep.holds;
        out.min_slack = std::min(out.min_slack, rep.slack());
        if (rep.vacuous) ++out.vacuous;
        out.reports.push_back(std::move(rep));
    }
    return out;
}

std::string partition_stats_json(const ExperimentConfig& cfg) {
    json out;
    out["schema_version"] = kSchemaVersion;
    out["name"] = cfg.name;
    out["alpha"] = cfg.partition.alpha;
    json seeds = json::array();
    for (auto seed : cfg.seeds) {
        const TaskData task = build_task(cfg, seed);
        json clients = json::array();
        Scalar mean_entropy = 0;
        for (const auto& shard : task.shards) {
            const Scalar e = shard_class_entropy(task.train.labels, shard, task.train.class_count);
            mean_entropy += e;
            clients.push_back({{"n", shard.size()},
                               {"histogram", class_histogram(task.train.labels, shard, task.train.class_count)},
                               {"entropy", e}});
        }
        mean_entropy /= static_cast<Scalar>(task.shards.size());
        seeds.push_back({{"seed", seed}, {"clients", clients}, {"mean_entropy", mean_entropy}});
    }
    out["seeds"] = seeds;
    return out.dump(2) + "\n";
}

}  // namespace feddf::harness
