#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feddf/data.hpp"
#include "feddf/models.hpp"

namespace feddf {

enum class Strategy { fedavg, fedprox, fedavgm, feddf, feddf_hetero };
enum class InitMode { from_average, from_previous };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);
bool is_distilling(Strategy s);

struct DistillConfig {
    int max_steps = 0;  // N
    int patience = 0;   // 0 disables early stopping
    Scalar base_lr = 1e-3;
    bool cosine = true;
    InitMode init_mode = InitMode::from_average;
    DistillPool pool{UniformNoiseSource{}, 1};

    void validate() const;
};

struct FLConfig {
    int rounds = 1;
    int client_count = 1;
    Scalar participation = 1.0;
    int local_epochs = 1;
    Scalar local_lr = 0.1;
    int local_batch = 32;
    Strategy strategy = Strategy::fedavg;
    Scalar prox_mu = 0;    // fedprox
    Scalar momentum = 0;   // fedavgm beta
    DistillConfig distill; // feddf, feddf_hetero
    std::optional<Scalar> drop_worst_threshold;
    std::uint64_t seed = 0;
    int threads = 1;

    int sampled_count() const;
    void validate() const;
};

/// Drop-worst threshold used when none is configured: 1.1 / class_count.
Scalar default_drop_threshold(int class_count);

struct ServerState {
    std::map<std::string, Prototype> prototypes;
    std::map<std::string, ParamVector> params;
    std::map<std::string, Vector> velocity;
    int round = 0;
    std::uint64_t seed = 0;
    Rng server_rng;
    std::optional<DistillSampler> sampler;
};

/// Fresh server state: one He-initialized model per prototype, zero velocities, and
/// independent rng streams for client sampling and for the distillation pool.
ServerState make_server_state(std::span<const Prototype> prototypes, const FLConfig& cfg);

/// Per-client stream for round `round`, independent of scheduling order.
Rng client_rng(std::uint64_t seed, int round, int client_id);

struct PrototypeRecord {
    Scalar acc_averaged = 0;
    Scalar acc_fused = 0;
    int distill_steps = 0;
    int sampled = 0;
};

/// acc_fused is the accuracy of the server model after the strategy's finishing step
/// (equal to acc_averaged for fedavg and fedprox).
struct RoundRecord {
    int round = 0;
    std::vector<int> sampled;
    std::vector<int> dropped;
    Scalar acc_averaged = 0;
    Scalar acc_fused = 0;
    Scalar acc_ensemble = 0;
    int distill_steps_used = 0;
    std::map<std::string, PrototypeRecord> per_prototype;

    // In-memory only: the received (post drop-worst) models and per-prototype averages.
    std::vector<Model> teachers;
    std::vector<int> teacher_clients;
    std::map<std::string, ParamVector> averaged;
};

/// Top-1 accuracy; argmax ties go to the lowest class index.
Scalar top1_accuracy(const Matrix& logits, std::span<const int> labels);
Scalar top1_accuracy(const Prototype& proto, const ParamVector& params, const Dataset& data);
inline Scalar top1_accuracy(const Model& m, const Dataset& data) { return top1_accuracy(m.proto, m.params, data); }

/// Uniformly random subset of size ceil(C * K), returned in ascending order.
std::vector<int> sample_clients(int client_count, Scalar participation, Rng& rng);

/// E epochs of shuffled mini-batch SGD on cross-entropy at a constant rate. With prox_mu > 0 the
/// gradient gains mu * (x - anchor).
ParamVector client_local_update(const Prototype& proto, const ParamVector& start, const Dataset& shard, int epochs,
                                Scalar lr, int batch, std::optional<Scalar> prox_mu, const ParamVector& anchor,
                                Rng& rng);

/// Indices of models whose validation accuracy exceeds `threshold`. If none survive, the single best is kept.
std::vector<std::size_t> drop_worst(std::span<const Model> models, const Dataset& val, Scalar threshold);

/// Uniform mean of the teachers' raw logits. Summation is order-independent.
Matrix ensemble_logits(std::span<const Model> teachers, const Matrix& batch);

struct FuseResult {
    ParamVector params;
    int steps_used = 0;
    Scalar best_val_accuracy = 0;
};

/// Distills the teacher ensemble into a student of `student_proto` starting from `init`:
/// Adam on KL(softmax(mean teacher logits) || softmax(student logits)) over pool batches, tracking the
/// best validation accuracy and stopping after `patience` steps without improvement.
FuseResult feddf_fuse(std::span<const Model> teachers, const Prototype& student_proto, const ParamVector& init,
                      const DistillConfig& cfg, const Dataset& val, DistillSampler& sampler);

/// One round over a single prototype.
RoundRecord run_round_homogeneous(ServerState& state, const FLConfig& cfg, std::span<const Dataset> clients,
                                  const Dataset& val, const Dataset& test);

/// One round where client k trains prototype `client_prototype[k]`. Each prototype averages its own group,
/// then (feddf strategies) distills from the ensemble of every received model.
RoundRecord run_round_heterogeneous(ServerState& state, const FLConfig& cfg, std::span<const Dataset> clients,
                                    std::span<const std::string> client_prototype, const Dataset& val,
                                    const Dataset& test);

}  // namespace feddf
