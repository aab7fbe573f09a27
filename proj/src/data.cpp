#include "feddf/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace feddf {

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (auto p : parts) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

void Dataset::validate() const {
    if (inputs.rows() < 1) throw PreconditionError("dataset is empty");
    if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
        throw PreconditionError("dataset label count does not match input rows");
    }
    for (int y : labels) {
        if (y < 0 || y >= class_count) throw PreconditionError("dataset label out of range");
    }
}

Dataset Dataset::subset(std::span<const int> indices) const {
    Dataset out;
    out.class_count = class_count;
    out.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(indices[i]);
        out.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
    }
    return out;
}

Dataset make_gaussian_blobs(int classes, int per_class, const Matrix& centers, Scalar scale, std::uint64_t seed) {
    if (per_class <= 0) throw PreconditionError("make_gaussian_blobs: per_class must be positive");
    if (centers.rows() != classes) throw ShapeError("make_gaussian_blobs: need one center per class");
    if (scale < 0) throw PreconditionError("make_gaussian_blobs: negative scale");
    Rng rng(seed);
    std::normal_distribution<Scalar> normal(0.0, 1.0);
    Dataset out;
    out.class_count = classes;
    out.inputs.resize(static_cast<Eigen::Index>(classes) * per_class, centers.cols());
    out.labels.reserve(static_cast<std::size_t>(classes) * per_class);
    Eigen::Index r = 0;
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i, ++r) {
            for (Eigen::Index j = 0; j < centers.cols(); ++j) {
                out.inputs(r, j) = centers(c, j) + scale * normal(rng);
            }
            out.labels.push_back(c);
        }
    }
    return out;
}

Matrix ring_centers(int classes, Scalar radius) {
    Matrix c(classes, 2);
    for (int k = 0; k < classes; ++k) {
        const Scalar a = 2 * std::numbers::pi * k / classes + std::numbers::pi / 2;
        c(k, 0) = radius * std::cos(a);
        c(k, 1) = radius * std::sin(a);
    }
    return c;
}

Matrix random_centers(int classes, int dim, Scalar spread, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<Scalar> normal(0.0, spread);
    Matrix c(classes, dim);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = normal(rng);
    return c;
}

std::vector<Shard> dirichlet_partition(std::span<const int> labels, int class_count, const PartitionSpec& spec) {
    if (labels.empty()) throw PreconditionError("dirichlet_partition: no labels");
    if (!(spec.alpha > 0)) throw ConfigError("alpha must be positive", "partition.alpha");
    if (spec.client_count < 1) throw ConfigError("client_count must be >= 1", "partition.clients");
    const auto k_clients = static_cast<std::size_t>(spec.client_count);

    Rng rng(spec.seed);
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        by_class.at(static_cast<std::size_t>(labels[i])).push_back(static_cast<int>(i));
    }

    std::vector<Shard> shards(k_clients);
    std::gamma_distribution<Scalar> gamma(spec.alpha, 1.0);
    std::vector<Scalar> props(k_clients);
    for (auto& idx : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        Scalar total = 0;
        for (auto& p : props) {
            p = gamma(rng);
            total += p;
        }
        if (!(total > 0)) {
            // All gamma draws underflowed (tiny alpha): the whole class goes to one client.
            std::fill(props.begin(), props.end(), 0.0);
            props[std::uniform_int_distribution<std::size_t>(0, k_clients - 1)(rng)] = 1.0;
            total = 1.0;
        }
        const auto n = static_cast<Scalar>(idx.size());
        Scalar cum = 0;
        std::size_t start = 0;
        for (std::size_t k = 0; k < k_clients; ++k) {
            cum += props[k] / total;
            const std::size_t end =
                (k + 1 == k_clients) ? idx.size() : std::min(idx.size(), static_cast<std::size_t>(std::floor(cum * n)));
            for (std::size_t i = start; i < std::max(start, end); ++i) shards[k].push_back(idx[i]);
            start = std::max(start, end);
        }
    }

    for (auto& shard : shards) {
        if (!shard.empty()) continue;
        std::vector<std::size_t> donors;
        for (std::size_t k = 0; k < k_clients; ++k) {
            if (shards[k].size() > 1) donors.push_back(k);
        }
        if (donors.empty()) break;  // fewer samples than clients
        auto& donor = shards[donors[std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng)]];
        const auto pick = std::uniform_int_distribution<std::size_t>(0, donor.size() - 1)(rng);
        shard.push_back(donor[pick]);
        donor.erase(donor.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    for (auto& shard : shards) std::sort(shard.begin(), shard.end());
    return shards;
}

std::vector<int> class_histogram(std::span<const int> labels, const Shard& shard, int class_count) {
    std::vector<int> h(static_cast<std::size_t>(class_count), 0);
    for (int i : shard) ++h.at(static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]));
    return h;
}

Scalar shard_class_entropy(std::span<const int> labels, const Shard& shard, int class_count) {
    if (shard.empty()) return 0;
    const auto h = class_histogram(labels, shard, class_count);
    Scalar e = 0;
    for (int c : h) {
        if (c == 0) continue;
        const Scalar p = static_cast<Scalar>(c) / static_cast<Scalar>(shard.size());
        e -= p * std::log(p);
    }
    return e;
}

int DistillPool::dim() const {
    return std::visit(
        [](const auto& s) -> int {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, HeldOutSource>) {
                return static_cast<int>(s.inputs.cols());
            } else {
                return s.dim;
            }
        },
        source);
}

namespace {

Matrix noise_batch(const DistillPool& pool, Rng& rng) {
    Matrix out(pool.batch_size, pool.dim());
    if (const auto* u = std::get_if<UniformNoiseSource>(&pool.source)) {
        std::uniform_real_distribution<Scalar> dist(u->low, u->high);
        for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
    } else if (const auto* g = std::get_if<GaussianNoiseSource>(&pool.source)) {
        std::normal_distribution<Scalar> dist(g->mean, g->stddev);
        for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
    }
    return out;
}

void check_pool(const DistillPool& pool) {
    if (pool.batch_size < 1) throw ConfigError("distill batch size must be >= 1", "distill.batch");
    if (const auto* h = std::get_if<HeldOutSource>(&pool.source); h && h->inputs.rows() == 0) {
        throw PreconditionError("held-out distillation pool is empty");
    }
}

}  // namespace

DistillSampler::DistillSampler(const DistillPool& pool, std::uint64_t seed) : pool_(pool), rng_(seed) {
    check_pool(pool);
}

Matrix DistillSampler::next() {
    const auto* h = std::get_if<HeldOutSource>(&pool_.source);
    if (h == nullptr) return noise_batch(pool_, rng_);
    const auto n = static_cast<std::size_t>(h->inputs.rows());
    Matrix out(pool_.batch_size, h->inputs.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        if (cursor_ >= order_.size()) {
            order_.resize(n);
            for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<int>(i);
            std::shuffle(order_.begin(), order_.end(), rng_);
            cursor_ = 0;
        }
        out.row(r) = h->inputs.row(order_[cursor_++]);
    }
    return out;
}

Matrix sample_distill_batch(const DistillPool& pool, Rng& rng) {
    check_pool(pool);
    DistillSampler s(pool, rng());
    return s.next();
}

TrainValSplit split_train_val(const Dataset& data, Scalar val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0 && val_fraction < 1)) {
        throw ConfigError("val_fraction must lie in (0, 1)", "dataset.val_fraction");
    }
    data.validate();
    Rng rng(seed);
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(data.class_count));
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[i])].push_back(static_cast<int>(i));
    }
    std::vector<int> train_idx;
    std::vector<int> val_idx;
    for (auto& idx : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<Scalar>(idx.size())));
        val_idx.insert(val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
        train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    }
    if (train_idx.empty() || val_idx.empty()) {
        throw PreconditionError("split_train_val: fraction leaves one side empty");
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {data.subset(train_idx), data.subset(val_idx)};
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
    auto p = csv_path;
    p += ".json";
    return p;
}

void write_dataset_csv(const Dataset& data, const std::filesystem::path& csv_path) {
    data.validate();
    std::ofstream os(csv_path);
    if (!os) throw Error("cannot open " + csv_path.string() + " for writing");
    for (Eigen::Index j = 0; j < data.dim(); ++j) os << 'x' << j << ',';
    os << "label\n";
    os << std::setprecision(17);
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        for (Eigen::Index j = 0; j < data.dim(); ++j) os << data.inputs(i, j) << ',';
        os << data.labels[static_cast<std::size_t>(i)] << '\n';
    }
    nlohmann::json meta{{"class_count", data.class_count}, {"n", data.size()}, {"d", data.dim()}};
    std::ofstream(sidecar_path(csv_path)) << meta.dump(2) << '\n';
}

Dataset read_dataset_csv(const std::filesystem::path& csv_path) {
    std::ifstream meta_is(sidecar_path(csv_path));
    if (!meta_is) throw ConfigError("missing sidecar " + sidecar_path(csv_path).string(), "dataset.path");
    const auto meta = nlohmann::json::parse(meta_is);
    const auto n = meta.at("n").get<Eigen::Index>();
    const auto d = meta.at("d").get<Eigen::Index>();

    std::ifstream is(csv_path);
    if (!is) throw ConfigError("cannot open " + csv_path.string(), "dataset.path");
    Dataset out;
    out.class_count = meta.at("class_count").get<int>();
    out.inputs.resize(n, d);
    out.labels.reserve(static_cast<std::size_t>(n));
    std::string line;
    std::getline(is, line);  // header
    Eigen::Index r = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (r >= n) throw Error(csv_path.string() + ": more rows than sidecar n");
        std::istringstream row(line);
        std::string cell;
        for (Eigen::Index j = 0; j < d; ++j) {
            if (!std::getline(row, cell, ',')) throw Error(csv_path.string() + ": short row");
            out.inputs(r, j) = std::stod(cell);
        }
        if (!std::getline(row, cell, ',')) throw Error(csv_path.string() + ": missing label");
        out.labels.push_back(std::stoi(cell));
        ++r;
    }
    if (r != n) throw Error(csv_path.string() + ": row count does not match sidecar n");
    out.validate();
    return out;
}

}  // namespace feddf
