#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedmerge/data.hpp"
#include "fedmerge/errors.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

// Upload strategy. FedIT ships both factors, FedSA only A (B stays on the
// client), FFA-LoRA freezes A at its initial value and ships only B.
enum class Strategy { FedIT, FedSA, FfaLora, LocalOnly };

inline std::string strategy_name(Strategy s) {
    switch (s) {
    case Strategy::FedIT: return "fedit";
    case Strategy::FedSA: return "fedsa";
    case Strategy::FfaLora: return "ffa_lora";
    case Strategy::LocalOnly: return "local_only";
    }
    return "";
}

inline Strategy strategy_from_name(const std::string& name) {
    if (name == "fedit") { return Strategy::FedIT; }
    if (name == "fedsa") { return Strategy::FedSA; }
    if (name == "ffa_lora") { return Strategy::FfaLora; }
    if (name == "local_only") { return Strategy::LocalOnly; }
    throw ConfigError("unknown strategy '" + name + "'");
}

struct RoleSet {
    bool lora_a = false;
    bool lora_b = false;
};

inline RoleSet uploaded_roles(Strategy s) {
    switch (s) {
    case Strategy::FedIT: return {true, true};
    case Strategy::FedSA: return {true, false};
    case Strategy::FfaLora: return {false, true};
    case Strategy::LocalOnly: return {false, false};
    }
    return {};
}

inline GradMask train_mask(Strategy s) {
    // FFA-LoRA never updates A after initialization.
    if (s == Strategy::FfaLora) { return GradMask{false, true}; }
    return GradMask{true, true};
}

inline std::uint64_t params_per_round(Strategy s, const std::vector<LoraAdapter>& adapters) {
    const RoleSet roles = uploaded_roles(s);
    std::uint64_t n = 0;
    for (const LoraAdapter& ad : adapters) {
        if (roles.lora_a) { n += static_cast<std::uint64_t>(ad.r) * ad.n; }
        if (roles.lora_b) { n += static_cast<std::uint64_t>(ad.m) * ad.r; }
    }
    return n;
}

// Closed-form per-client upload bytes for one m x n layer of rank r over T
// rounds, metered at 32-bit parameter width:
//   FedIT 4*r*(m+n)*T, FedSA 4*r*n*T, FFA-LoRA 4*r*m*T, LocalOnly 0.
inline std::uint64_t ledger_predict(Strategy s, std::uint64_t r, std::uint64_t m, std::uint64_t n, std::uint64_t t_rounds,
                                    std::uint64_t bytes_per_param = 4) {
    switch (s) {
    case Strategy::FedIT: return bytes_per_param * r * (m + n) * t_rounds;
    case Strategy::FedSA: return bytes_per_param * r * n * t_rounds;
    case Strategy::FfaLora: return bytes_per_param * r * m * t_rounds;
    case Strategy::LocalOnly: return 0;
    }
    return 0;
}

struct LedgerEntry {
    std::size_t round = 0;
    int client = 0;
    bool upload = false;
    std::uint64_t bytes = 0;
    Strategy strategy = Strategy::LocalOnly;
};

struct CommLedger {
    std::vector<LedgerEntry> entries;

    void record(std::size_t round, int client, bool upload, std::uint64_t bytes, Strategy s) {
        entries.push_back(LedgerEntry{round, client, upload, bytes, s});
    }
    std::uint64_t total_up() const {
        std::uint64_t n = 0;
        for (const LedgerEntry& e : entries) { n += e.upload ? e.bytes : 0; }
        return n;
    }
    std::uint64_t total_down() const {
        std::uint64_t n = 0;
        for (const LedgerEntry& e : entries) { n += e.upload ? 0 : e.bytes; }
        return n;
    }
    std::uint64_t client_up(int client) const {
        std::uint64_t n = 0;
        for (const LedgerEntry& e : entries) { n += (e.upload && e.client == client) ? e.bytes : 0; }
        return n;
    }
};

struct FedConfig {
    std::size_t rounds = 1;
    std::size_t local_iters = 1;
    std::size_t batch_size = 8;
    double lr = 0.05;
    Strategy strategy = Strategy::FedIT;
    std::set<std::size_t> checkpoint_rounds; // snapshot after this round's aggregation
    std::uint64_t bytes_per_param = 4;       // transfers metered at float32 width
    bool record_metrics = true;
};

struct RoundMetric {
    std::size_t round = 0;
    int client = 0;
    Strategy strategy = Strategy::LocalOnly;
    double train_loss = 0.0;
    double test_loss = 0.0;
    double test_acc = 0.0;
    std::uint64_t up_bytes = 0;
    std::uint64_t down_bytes = 0;
};

struct FedResult {
    std::map<std::size_t, std::vector<LoraAdapter>> global_checkpoints;
    std::vector<std::vector<LoraAdapter>> client_adapters;        // after the final local step
    std::vector<std::vector<LoraAdapter>> final_broadcast_state;  // right after the last broadcast
    std::vector<LoraAdapter> global_adapters;                     // after the final aggregation
    CommLedger ledger;
    std::vector<RoundMetric> metrics;
};

namespace detail {

// Without-replacement mini-batch scheduler: a fresh shuffle per round, and a
// reshuffle whenever an epoch is exhausted mid-round.
class BatchScheduler {
public:
    BatchScheduler(std::size_t n, Rng rng) : indices_(n), rng_(rng), cursor_(n) {
        for (std::size_t i = 0; i < n; ++i) { indices_[i] = i; }
    }
    std::vector<std::size_t> next_batch(std::size_t batch_size) {
        std::vector<std::size_t> out;
        out.reserve(batch_size);
        while (out.size() < batch_size) {
            if (cursor_ >= indices_.size()) {
                rng_.shuffle(indices_);
                cursor_ = 0;
            }
            out.push_back(indices_[cursor_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> indices_;
    Rng rng_;
    std::size_t cursor_ = 0;
};

inline void local_steps(AdaptedModel& model, const ClientDataset& client, const FedConfig& cfg, const Rng& round_rng) {
    BatchScheduler sched(client.train.size(), round_rng.child("shuffle"));
    const GradMask mask = train_mask(cfg.strategy);
    const std::size_t bs = std::min(cfg.batch_size, client.train.size());
    for (std::size_t it = 0; it < cfg.local_iters; ++it) {
        const std::vector<std::size_t> idx = sched.next_batch(bs);
        std::vector<Example> batch;
        batch.reserve(idx.size());
        for (const std::size_t i : idx) { batch.push_back(client.train[i]); }
        const auto [loss, grad] = loss_and_grad(model, batch, mask);
        (void)loss;
        sgd_step(model.adapters, grad, cfg.lr, mask);
    }
}

inline void aggregate_uniform(std::vector<LoraAdapter>& global, const std::vector<std::vector<LoraAdapter>>& clients,
                              const RoleSet& roles) {
    const std::size_t n = clients.size();
    const long double inv_n = 1.0L / static_cast<long double>(n);
    for (std::size_t l = 0; l < global.size(); ++l) {
        if (roles.lora_a) {
            for (std::size_t k = 0; k < global[l].a.size(); ++k) {
                long double acc = 0.0L;
                for (std::size_t i = 0; i < n; ++i) { acc += clients[i][l].a[k]; }
                global[l].a[k] = static_cast<double>(acc * inv_n);
            }
        }
        if (roles.lora_b) {
            for (std::size_t k = 0; k < global[l].b.size(); ++k) {
                long double acc = 0.0L;
                for (std::size_t i = 0; i < n; ++i) { acc += clients[i][l].b[k]; }
                global[l].b[k] = static_cast<double>(acc * inv_n);
            }
        }
    }
}

inline void copy_roles(std::vector<LoraAdapter>& dst, const std::vector<LoraAdapter>& src, const RoleSet& roles) {
    for (std::size_t l = 0; l < dst.size(); ++l) {
        if (roles.lora_a) { dst[l].a = src[l].a; }
        if (roles.lora_b) { dst[l].b = src[l].b; }
    }
}

} // namespace detail

// One federated run: broadcast -> local SGD -> upload -> uniform average,
// repeated for cfg.rounds rounds over all clients (full participation, fixed
// ascending-id order). Blocks a strategy does not upload stay client-local
// across rounds.
inline FedResult run_fedit(const std::vector<ClientDataset>& clients, const ModelSpec& spec, const ParamVector& base,
                           const std::vector<LoraAdapter>& init_adapters, const FedConfig& cfg, const Rng& rng) {
    if (clients.empty()) { throw ConfigError("run_fedit: empty client list"); }
    if (cfg.batch_size == 0) { throw ConfigError("run_fedit: zero batch size"); }
    const RoleSet roles = uploaded_roles(cfg.strategy);
    const std::uint64_t round_params = params_per_round(cfg.strategy, init_adapters);
    const std::uint64_t round_bytes = cfg.bytes_per_param * round_params;

    FedResult result;
    result.global_adapters = init_adapters;
    result.client_adapters.assign(clients.size(), init_adapters);
    result.final_broadcast_state.assign(clients.size(), init_adapters);

    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        // broadcast
        for (std::size_t i = 0; i < clients.size(); ++i) {
            detail::copy_roles(result.client_adapters[i], result.global_adapters, roles);
            if (round_bytes > 0) { result.ledger.record(t, clients[i].client_id, false, round_bytes, cfg.strategy); }
        }
        if (t == cfg.rounds) { result.final_broadcast_state = result.client_adapters; }
        // local updates
        for (std::size_t i = 0; i < clients.size(); ++i) {
            AdaptedModel model{spec, base, result.client_adapters[i]};
            const Rng round_rng = rng.child("client", static_cast<std::uint64_t>(clients[i].client_id))
                                      .child("round", t);
            detail::local_steps(model, clients[i], cfg, round_rng);
            result.client_adapters[i] = std::move(model.adapters);
            if (round_bytes > 0) { result.ledger.record(t, clients[i].client_id, true, round_bytes, cfg.strategy); }
        }
        // aggregate uploaded blocks
        detail::aggregate_uniform(result.global_adapters, result.client_adapters, roles);
        if (cfg.record_metrics) {
            for (std::size_t i = 0; i < clients.size(); ++i) {
                const AdaptedModel model{spec, base, result.client_adapters[i]};
                RoundMetric m;
                m.round = t;
                m.client = clients[i].client_id;
                m.strategy = cfg.strategy;
                m.train_loss = evaluate(model, clients[i].train).loss;
                const Metrics test = evaluate(model, clients[i].test);
                m.test_loss = test.loss;
                m.test_acc = test.accuracy;
                m.up_bytes = round_bytes;
                m.down_bytes = round_bytes;
                result.metrics.push_back(m);
            }
        }
        if (cfg.checkpoint_rounds.count(t) != 0) { result.global_checkpoints[t] = result.global_adapters; }
    }
    return result;
}

struct LocalResult {
    std::map<std::size_t, std::vector<LoraAdapter>> checkpoints;
    std::vector<LoraAdapter> final_adapters;
    std::vector<RoundMetric> metrics;
};

// The same training kernel as a client step inside run_fedit, with no
// communication. Checkpoints are taken at the requested rounds.
inline LocalResult run_local(const ClientDataset& client, const ModelSpec& spec, const ParamVector& base,
                             const std::vector<LoraAdapter>& init_adapters, const FedConfig& cfg, const Rng& rng) {
    if (client.train.empty()) { throw ConfigError("run_local: client has no training data"); }
    if (cfg.batch_size == 0) { throw ConfigError("run_local: zero batch size"); }
    FedConfig local_cfg = cfg;
    local_cfg.strategy = Strategy::LocalOnly;

    LocalResult result;
    result.final_adapters = init_adapters;
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        AdaptedModel model{spec, base, result.final_adapters};
        const Rng round_rng = rng.child("client", static_cast<std::uint64_t>(client.client_id)).child("round", t);
        detail::local_steps(model, client, local_cfg, round_rng);
        result.final_adapters = std::move(model.adapters);
        if (cfg.record_metrics) {
            const AdaptedModel snap{spec, base, result.final_adapters};
            RoundMetric m;
            m.round = t;
            m.client = client.client_id;
            m.strategy = Strategy::LocalOnly;
            m.train_loss = evaluate(snap, client.train).loss;
            const Metrics test = evaluate(snap, client.test);
            m.test_loss = test.loss;
            m.test_acc = test.accuracy;
            result.metrics.push_back(m);
        }
        if (cfg.checkpoint_rounds.count(t) != 0) { result.checkpoints[t] = result.final_adapters; }
    }
    return result;
}

} // namespace fedmerge
