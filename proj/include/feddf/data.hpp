#pragma once

#include <cstdint>
#include <initializer_list>
#include <filesystem>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "feddf/numerics.hpp"

namespace feddf {

using Rng = std::mt19937_64;

/// Mixes seed components into one 64-bit stream seed (via std::seed_seq).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

struct Dataset {
    Matrix inputs;            // n x d
    std::vector<int> labels;  // length n
    int class_count = 0;

    Eigen::Index size() const { return inputs.rows(); }
    Eigen::Index dim() const { return inputs.cols(); }

    /// Throws PreconditionError on empty data, length mismatch, or out-of-range labels.
    void validate() const;

    Dataset subset(std::span<const int> indices) const;
};

/// Isotropic Gaussian clusters, one per row of `centers`; output is class-major.
Dataset make_gaussian_blobs(int classes, int per_class, const Matrix& centers, Scalar scale, std::uint64_t seed);

/// `classes` centers evenly spaced on a circle of `radius` (2-D).
Matrix ring_centers(int classes, Scalar radius);

/// `classes` centers drawn from N(0, spread^2 I) in `dim` dimensions.
Matrix random_centers(int classes, int dim, Scalar spread, std::uint64_t seed);

struct PartitionSpec {
    Scalar alpha = 1.0;
    int client_count = 1;
    std::uint64_t seed = 0;
};

using Shard = std::vector<int>;

/// Per class, client proportions ~ Dir(alpha, ..., alpha); class indices are shuffled and cut at the
/// cumulative proportions. A client left empty receives one random sample from a client holding > 1.
std::vector<Shard> dirichlet_partition(std::span<const int> labels, int class_count, const PartitionSpec& spec);

/// Class histogram of one shard.
std::vector<int> class_histogram(std::span<const int> labels, const Shard& shard, int class_count);

/// Shannon entropy (nats) of a shard's class distribution.
Scalar shard_class_entropy(std::span<const int> labels, const Shard& shard, int class_count);

struct HeldOutSource {
    Matrix inputs;
};
struct UniformNoiseSource {
    Scalar low = -1;
    Scalar high = 1;
    int dim = 1;
};
struct GaussianNoiseSource {
    int dim = 1;
    Scalar mean = 0;
    Scalar stddev = 1;
};

/// Unlabeled input source for fusion. Held-out pools carry inputs only.
struct DistillPool {
    std::variant<HeldOutSource, UniformNoiseSource, GaussianNoiseSource> source;
    int batch_size = 1;

    int dim() const;
};

/// Stateful batch sampler. Held-out pools are visited without replacement within an epoch
/// and reshuffled between epochs.
class DistillSampler {
public:
    DistillSampler(const DistillPool& pool, std::uint64_t seed);
    Matrix next();

private:
    DistillPool pool_;
    Rng rng_;
    std::vector<int> order_;
    std::size_t cursor_ = 0;
};

/// One batch from `pool` using `rng`; held-out pools sample a fresh permutation prefix.
Matrix sample_distill_batch(const DistillPool& pool, Rng& rng);

struct TrainValSplit {
    Dataset train;
    Dataset val;
};

/// Stratified split: each class contributes round(val_fraction * n_c) samples to `val`.
TrainValSplit split_train_val(const Dataset& data, Scalar val_fraction, std::uint64_t seed);

/// CSV with header `x0..x{d-1},label` plus a JSON sidecar {class_count, n, d} at `<path>.json`.
void write_dataset_csv(const Dataset& data, const std::filesystem::path& csv_path);
Dataset read_dataset_csv(const std::filesystem::path& csv_path);
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

}  // namespace feddf
