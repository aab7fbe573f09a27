#include "feddf/flcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace feddf {

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedprox: return "fedprox";
        case Strategy::fedavgm: return "fedavgm";
        case Strategy::feddf: return "feddf";
        case Strategy::feddf_hetero: return "feddf_hetero";
    }
    return "unknown";
}

Strategy parse_strategy(const std::string& s) {
    for (auto st : {Strategy::fedavg, Strategy::fedprox, Strategy::fedavgm, Strategy::feddf, Strategy::feddf_hetero}) {
        if (to_string(st) == s) return st;
    }
    throw ConfigError("unknown strategy '" + s + "'", "experiment.strategies");
}

bool is_distilling(Strategy s) { return s == Strategy::feddf || s == Strategy::feddf_hetero; }

void DistillConfig::validate() const {
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0", "distill.max_steps");
    if (patience < 0 || patience > std::max(max_steps, 0)) {
        throw ConfigError("patience must lie in [0, max_steps]", "distill.patience");
    }
    if (!(base_lr > 0)) throw ConfigError("lr must be positive", "distill.lr");
    if (pool.batch_size < 1) throw ConfigError("batch must be >= 1", "distill.batch");
}

int FLConfig::sampled_count() const {
    // Guard against products such as 0.7 * 10 = 7.000000000000001.
    return static_cast<int>(std::ceil(participation * client_count - 1e-9));
}

void FLConfig::validate() const {
    if (rounds < 0) throw ConfigError("rounds must be >= 0", "fl.rounds");
    if (client_count < 1) throw ConfigError("client count must be >= 1", "partition.clients");
    if (!(participation > 0 && participation <= 1)) {
        throw ConfigError("participation must lie in (0, 1]", "fl.participation");
    }
    if (sampled_count() < 1) throw ConfigError("ceil(C*K) must be >= 1", "fl.participation");
    if (local_epochs < 0) throw ConfigError("local_epochs must be >= 0", "fl.local_epochs");
    if (!(local_lr > 0)) throw ConfigError("local_lr must be positive", "fl.local_lr");
    if (local_batch < 1) throw ConfigError("local_batch must be >= 1", "fl.local_batch");
    if (!(prox_mu >= 0)) throw ConfigError("prox_mu must be >= 0", "fl.prox_mu");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)", "fl.momentum");
    if (threads < 1) throw ConfigError("threads must be >= 1", "experiment.threads");
    if (drop_worst_threshold && !(*drop_worst_threshold >= 0 && *drop_worst_threshold <= 1)) {
        throw ConfigError("drop_worst_threshold must lie in [0, 1]", "fl.drop_worst_threshold");
    }
    if (is_distilling(strategy)) distill.validate();
}

Scalar default_drop_threshold(int class_count) { return 1.1 / class_count; }

namespace {

constexpr std::uint64_t kServerStream = 0x5e7e5;
constexpr std::uint64_t kPoolStream = 0xd157;

}  // namespace

Rng client_rng(std::uint64_t seed, int round, int client_id) {
    return Rng(derive_seed({seed, 1, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client_id)}));
}

ServerState make_server_state(std::span<const Prototype> prototypes, const FLConfig& cfg) {
    if (prototypes.empty()) throw ConfigError("at least one prototype is required", "model");
    ServerState s;
    s.seed = cfg.seed;
    s.server_rng = Rng(derive_seed({cfg.seed, kServerStream}));
    std::uint64_t idx = 0;
    for (const auto& p : prototypes) {
        p.validate();
        if (s.prototypes.contains(p.id)) throw ConfigError("duplicate prototype id '" + p.id + "'", "model");
        s.prototypes.emplace(p.id, p);
        s.params.emplace(p.id, init_params(p, derive_seed({cfg.seed, 2, idx++})));
        s.velocity.emplace(p.id, Vector::Zero(p.param_count()));
    }
    if (is_distilling(cfg.strategy)) s.sampler.emplace(cfg.distill.pool, derive_seed({cfg.seed, kPoolStream}));
    return s;
}

Scalar top1_accuracy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows() == 0) throw PreconditionError("top1_accuracy: empty dataset");
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw ShapeError("top1_accuracy: label count");
    Eigen::Index correct = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, best)) best = c;
        }
        if (best == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<Scalar>(correct) / static_cast<Scalar>(logits.rows());
}

Scalar top1_accuracy(const Prototype& proto, const ParamVector& params, const Dataset& data) {
    if (data.size() == 0) throw PreconditionError("top1_accuracy: empty dataset");
    if (data.class_count != proto.class_count()) throw ShapeError("top1_accuracy: class count mismatch");
    return top1_accuracy(predict_logits(proto, params, data.inputs), data.labels);
}

std::vector<int> sample_clients(int client_count, Scalar participation, Rng& rng) {
    FLConfig probe;
    probe.client_count = client_count;
    probe.participation = participation;
    const int m = probe.sampled_count();
    std::vector<int> ids(static_cast<std::size_t>(client_count));
    std::iota(ids.begin(), ids.end(), 0);
    // Partial Fisher-Yates.
    for (int i = 0; i < m; ++i) {
        std::uniform_int_distribution<int> pick(i, client_count - 1);
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
    }
    ids.resize(static_cast<std::size_t>(m));
    std::sort(ids.begin(), ids.end());
    return ids;
}

ParamVector client_local_update(const Prototype& proto, const ParamVector& start, const Dataset& shard, int epochs,
                                Scalar lr, int batch, std::optional<Scalar> prox_mu, const ParamVector& anchor,
                                Rng& rng) {
    if (shard.size() == 0) throw PreconditionError("client_local_update: empty shard");
    if (shard.dim() != proto.input_dim()) throw ShapeError("client_local_update: shard width does not match prototype");
    if (batch < 1) throw PreconditionError("client_local_update: batch must be >= 1");
    const bool prox = prox_mu && *prox_mu > 0;
    if (prox && anchor.values.size() != start.values.size()) throw ShapeError("client_local_update: anchor length");

    ParamVector x = start;
    auto opt = OptimizerState::sgd(lr);
    std::vector<int> order(static_cast<std::size_t>(shard.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch)) {
            const auto len = std::min(order.size() - b, static_cast<std::size_t>(batch));
            const Dataset mb = shard.subset(std::span<const int>(order).subspan(b, len));
            Vector g = grad(LossKind::ce, proto, x, mb.inputs, mb.labels);
            if (prox) g += *prox_mu * (x.values - anchor.values);
            opt_step(opt, x.values, g);
        }
        require_finite(x.values, "client_local_update");
    }
    return x;
}

std::vector<std::size_t> drop_worst(std::span<const Model> models, const Dataset& val, Scalar threshold) {
    if (val.size() == 0) throw PreconditionError("drop_worst: empty validation set");
    std::vector<std::size_t> kept;
    std::size_t best = 0;
    Scalar best_acc = -1;
    for (std::size_t i = 0; i < models.size(); ++i) {
        const Scalar acc = top1_accuracy(models[i], val);
        if (acc > threshold) kept.push_back(i);
        if (acc > best_acc) {
            best_acc = acc;
            best = i;
        }
    }
    if (kept.empty() && !models.empty()) kept.push_back(best);
    return kept;
}

Matrix ensemble_logits(std::span<const Model> teachers, const Matrix& batch) {
    if (teachers.empty()) throw PreconditionError("ensemble_logits: no teachers");
    const int classes = teachers.front().proto.class_count();
    std::vector<Matrix> outs;
    outs.reserve(teachers.size());
    for (const auto& t : teachers) {
        if (t.proto.class_count() != classes) throw ConfigError("teachers disagree on class count", t.proto.id);
        outs.push_back(predict_logits(t, batch));
    }
    Matrix mean(batch.rows(), classes);
    std::vector<Scalar> vals(outs.size());
    const auto k = static_cast<Scalar>(outs.size());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        for (std::size_t t = 0; t < outs.size(); ++t) vals[t] = outs[t].data()[i];
        std::sort(vals.begin(), vals.end());
        Scalar s = 0;
        for (Scalar v : vals) s += v;
        mean.data()[i] = s / k;
    }
    return mean;
}

FuseResult feddf_fuse(std::span<const Model> teachers, const Prototype& student_proto, const ParamVector& init,
                      const DistillConfig& cfg, const Dataset& val, DistillSampler& sampler) {
    if (teachers.empty()) throw PreconditionError("feddf_fuse: empty teacher set");
    if (val.size() == 0) throw PreconditionError("feddf_fuse: empty validation set");
    if (init.prototype_id != student_proto.id) throw ShapeError("feddf_fuse: init does not match student prototype");
    cfg.validate();

    // The server student is always trained and served in full precision.
    Prototype student = student_proto;
    student.precision = Precision::full;

    FuseResult res{init, 0, top1_accuracy(student, init, val)};
    if (cfg.max_steps == 0) return res;

    ParamVector x = init;
    auto opt = OptimizerState::adam_with(cfg.base_lr, x.values.size(),
                                         cfg.cosine ? LrSchedule::cosine : LrSchedule::constant, cfg.max_steps);
    int since_best = 0;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        const Matrix batch = sampler.next();
        const Matrix target = softmax_rows(ensemble_logits(teachers, batch));
        const Vector g = grad(LossKind::kl_vs_target, student, x, batch, {}, &target);
        opt_step(opt, x.values, g);
        require_finite(x.values, "feddf_fuse");
        res.steps_used = step;
        const Scalar acc = top1_accuracy(student, x, val);
        if (acc > res.best_val_accuracy) {
            res.best_val_accuracy = acc;
            res.params = x;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
    }
    return res;
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    {
        std::vector<std::jthread> pool;
        const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

RoundRecord run_round(ServerState& state, const FLConfig& cfg, std::span<const Dataset> clients,
                      std::span<const std::string> client_prototype, const Dataset& val, const Dataset& test) {
    if (static_cast<int>(clients.size()) != cfg.client_count) {
        throw ConfigError("client dataset count does not match client_count", "partition.clients");
    }
    const int t = ++state.round;
    RoundRecord rec;
    rec.round = t;
    rec.sampled = sample_clients(cfg.client_count, cfg.participation, state.server_rng);

    const std::optional<Scalar> mu =
        cfg.strategy == Strategy::fedprox ? std::optional<Scalar>(cfg.prox_mu) : std::nullopt;
    std::vector<Model> received(rec.sampled.size());
    parallel_for(rec.sampled.size(), cfg.threads, [&](std::size_t i) {
        const int k = rec.sampled[i];
        const auto& pid = client_prototype[static_cast<std::size_t>(k)];
        const auto& proto = state.prototypes.at(pid);
        const auto& start = state.params.at(pid);
        Rng rng = client_rng(state.seed, t, k);
        received[i] = Model{proto, client_local_update(proto, start, clients[static_cast<std::size_t>(k)],
                                                       cfg.local_epochs, cfg.local_lr, cfg.local_batch, mu, start,
                                                       rng)};
    });

    std::vector<std::size_t> kept(received.size());
    std::iota(kept.begin(), kept.end(), 0);
    if (cfg.drop_worst_threshold) {
        kept = drop_worst(received, val, *cfg.drop_worst_threshold);
        for (std::size_t i = 0, j = 0; i < received.size(); ++i) {
            if (j < kept.size() && kept[j] == i) {
                ++j;
            } else {
                rec.dropped.push_back(rec.sampled[i]);
            }
        }
    }
    std::vector<Model> teachers;
    std::vector<int> teacher_client;
    for (auto i : kept) {
        teachers.push_back(received[i]);
        teacher_client.push_back(rec.sampled[i]);
    }
    rec.acc_ensemble = top1_accuracy(ensemble_logits(teachers, test.inputs), test.labels);

    for (auto& [pid, proto] : state.prototypes) {
        PrototypeRecord pr;
        std::vector<ParamVector> group;
        std::vector<Scalar> weights;
        for (std::size_t i = 0; i < teachers.size(); ++i) {
            if (teachers[i].proto.id != pid) continue;
            group.push_back(teachers[i].params);
            weights.push_back(static_cast<Scalar>(clients[static_cast<std::size_t>(teacher_client[i])].size()));
        }
        pr.sampled = static_cast<int>(group.size());
        ParamVector& current = state.params.at(pid);
        if (group.empty()) {
            // No participants: carry the prototype over unchanged.
            Prototype served = proto;
            if (is_distilling(cfg.strategy)) served.precision = Precision::full;
            pr.acc_averaged = pr.acc_fused = top1_accuracy(served, current, test);
            rec.per_prototype.emplace(pid, pr);
            continue;
        }
        ParamVector avg = average_params(group, weights);
        pr.acc_averaged = top1_accuracy(proto, avg, test);
        rec.averaged.emplace(pid, avg);

        switch (cfg.strategy) {
            case Strategy::fedavg:
            case Strategy::fedprox:
                current = std::move(avg);
                pr.acc_fused = pr.acc_averaged;
                break;
            case Strategy::fedavgm: {
                // v' = beta v + (x - avg); x' = x - v' = avg - beta v.
                Vector& v = state.velocity.at(pid);
                const Vector delta = current.values - avg.values;
                ParamVector next = avg;
                next.values -= cfg.momentum * v;
                v = cfg.momentum * v + delta;
                current = std::move(next);
                pr.acc_fused = top1_accuracy(proto, current, test);
                break;
            }
            case Strategy::feddf:
            case Strategy::feddf_hetero: {
                const ParamVector& init = cfg.distill.init_mode == InitMode::from_average ? avg : current;
                auto fused = feddf_fuse(teachers, proto, init, cfg.distill, val, *state.sampler);
                Prototype served = proto;
                served.precision = Precision::full;
                current = std::move(fused.params);
                pr.distill_steps = fused.steps_used;
                pr.acc_fused = top1_accuracy(served, current, test);
                break;
            }
        }
        rec.per_prototype.emplace(pid, pr);
    }

    Scalar sum_avg = 0;
    Scalar sum_fused = 0;
    for (const auto& [pid, pr] : rec.per_prototype) {
        sum_avg += pr.acc_averaged;
        sum_fused += pr.acc_fused;
        rec.distill_steps_used = std::max(rec.distill_steps_used, pr.distill_steps);
    }
    const auto np = static_cast<Scalar>(rec.per_prototype.size());
    rec.acc_averaged = sum_avg / np;
    rec.acc_fused = sum_fused / np;
    rec.teachers = std::move(teachers);
    rec.teacher_clients = std::move(teacher_client);
    return rec;
}

}  // namespace

RoundRecord run_round_homogeneous(ServerState& state, const FLConfig& cfg, std::span<const Dataset> clients,
                                  const Dataset& val, const Dataset& test) {
    if (state.prototypes.size() != 1) {
        throw ConfigError("homogeneous round requires exactly one prototype", "model");
    }
    const std::vector<std::string> map(clients.size(), state.prototypes.begin()->first);
    return run_round(state, cfg, clients, map, val, test);
}

RoundRecord run_round_heterogeneous(ServerState& state, const FLConfig& cfg, std::span<const Dataset> clients,
                                    std::span<const std::string> client_prototype, const Dataset& val,
                                    const Dataset& test) {
    if (client_prototype.size() != clients.size()) {
        throw ConfigError("client prototype map size does not match client count", "model.assignment");
    }
    for (const auto& pid : client_prototype) {
        if (!state.prototypes.contains(pid)) throw ConfigError("undeclared prototype '" + pid + "'", "model.assignment");
    }
    return run_round(state, cfg, clients, client_prototype, val, test);
}

}  // namespace feddf
