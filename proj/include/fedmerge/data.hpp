#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedmerge/errors.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

struct ClientDataset {
    int client_id = 0;
    std::vector<Example> train;
    std::vector<Example> test;
    std::string task_tag;
};

struct PoolConfig {
    std::size_t n_classes = 2;
    std::size_t d_in = 2;
    std::size_t size = 1000;     // total examples, balanced across classes
    double margin = 4.0;         // distance between class means
    double noise_std = 1.0;      // isotropic Gaussian noise around the mean
};

// Gaussian-mixture pool with fixed class geometry: the mixture means are a
// deterministic function of (n_classes, d_in, margin), so the seed only moves
// the draws. Two classes sit at +/- (margin/2) e_0; for k >= 3 class c sits at
// (margin/2) e_c (axis directions recycled with sign flips when k > d_in).
// margin = 0 makes all classes indistinguishable.
inline std::vector<Example> make_base_pool(const PoolConfig& cfg, Rng& rng) {
    if (cfg.n_classes < 2 || cfg.d_in == 0 || cfg.size == 0) {
        throw ConfigError("pool: n_classes>=2, d_in>0, size>0 required");
    }
    std::vector<std::vector<double>> means(cfg.n_classes, std::vector<double>(cfg.d_in, 0.0));
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        const std::size_t axis = c % cfg.d_in;
        double sign = (c / cfg.d_in) % 2 == 0 ? 1.0 : -1.0;
        if (cfg.n_classes == 2 && c == 1) { sign = -1.0; }
        means[c][cfg.n_classes == 2 ? 0 : axis] = sign * 0.5 * cfg.margin;
    }
    Rng draw_rng = rng.child("pool_draws");
    std::vector<Example> pool;
    pool.reserve(cfg.size);
    for (std::size_t i = 0; i < cfg.size; ++i) {
        const std::size_t c = i % cfg.n_classes; // balanced
        Example ex;
        ex.y = static_cast<int>(c);
        ex.x.resize(cfg.d_in);
        for (std::size_t j = 0; j < cfg.d_in; ++j) { ex.x[j] = means[c][j] + cfg.noise_std * draw_rng.normal(); }
        pool.push_back(std::move(ex));
    }
    Rng shuffle_rng = rng.child("pool_shuffle");
    shuffle_rng.shuffle(pool);
    return pool;
}

// Largest-remainder apportionment of `total` across nonnegative weights.
// Conserves the total exactly; ties go to the lower index.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& weights, std::size_t total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    if (wsum <= 0.0 || total == 0) {
        if (total != 0 && !weights.empty()) { out[0] = total; }
        return out;
    }
    std::vector<double> frac(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = weights[i] / wsum * static_cast<double>(total);
        out[i] = static_cast<std::size_t>(std::floor(exact));
        frac[i] = exact - std::floor(exact);
        assigned += out[i];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t i = 0; assigned < total; ++i) {
        out[order[i % order.size()]] += 1;
        assigned += 1;
    }
    return out;
}

namespace detail {

// quotas[class][client]; consumes pool examples grouped by class in order.
inline std::vector<ClientDataset> assign_by_quota(const std::vector<Example>& pool,
                                                  const std::vector<std::vector<std::size_t>>& train_quota,
                                                  const std::vector<std::vector<std::size_t>>& test_quota,
                                                  std::size_t n_classes, std::size_t n_clients,
                                                  const std::string& tag) {
    std::vector<std::vector<std::size_t>> by_class(n_classes);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        by_class[static_cast<std::size_t>(pool[i].y)].push_back(i);
    }
    std::vector<ClientDataset> clients(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
        clients[i].client_id = static_cast<int>(i);
        clients[i].task_tag = tag;
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::size_t need = 0;
        for (std::size_t i = 0; i < n_clients; ++i) { need += train_quota[c][i] + test_quota[c][i]; }
        if (need > by_class[c].size()) {
            throw ConfigError("partition: pool exhausted for class " + std::to_string(c) + " (need " +
                              std::to_string(need) + ", have " + std::to_string(by_class[c].size()) + ")");
        }
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < n_clients; ++i) {
            for (std::size_t k = 0; k < train_quota[c][i]; ++k) { clients[i].train.push_back(pool[by_class[c][cursor++]]); }
        }
        for (std::size_t i = 0; i < n_clients; ++i) {
            for (std::size_t k = 0; k < test_quota[c][i]; ++k) { clients[i].test.push_back(pool[by_class[c][cursor++]]); }
        }
    }
    // A pathological draw can leave a client empty; move single examples from
    // the largest split so every client has at least one of each.
    const auto repair = [&](auto member) {
        for (ClientDataset& cl : clients) {
            if (!(cl.*member).empty()) { continue; }
            ClientDataset* donor = nullptr;
            for (ClientDataset& other : clients) {
                if ((other.*member).size() > 1 && (donor == nullptr || (other.*member).size() > (donor->*member).size())) {
                    donor = &other;
                }
            }
            if (donor == nullptr) { throw ConfigError("partition: not enough examples to populate every client"); }
            (cl.*member).push_back((donor->*member).back());
            (donor->*member).pop_back();
        }
    };
    repair(&ClientDataset::train);
    repair(&ClientDataset::test);
    return clients;
}

} // namespace detail

// Dirichlet label skew: one proportion vector over clients per class, shared by
// the train and test splits, quotas rounded by largest remainder.
inline std::vector<ClientDataset> partition_dirichlet(const std::vector<Example>& pool, double alpha,
                                                      std::size_t n_clients, std::size_t train_per_client,
                                                      std::size_t test_per_client, std::size_t n_classes, Rng& rng) {
    if (alpha <= 0.0) { throw ConfigError("partition: alpha must be positive"); }
    if (n_clients == 0) { throw ConfigError("partition: n_clients must be >= 1"); }
    std::vector<double> class_weight(n_classes, 0.0);
    for (const Example& ex : pool) { class_weight[static_cast<std::size_t>(ex.y)] += 1.0; }
    const std::vector<std::size_t> train_per_class = largest_remainder(class_weight, n_clients * train_per_client);
    const std::vector<std::size_t> test_per_class = largest_remainder(class_weight, n_clients * test_per_client);

    Rng prop_rng = rng.child("dirichlet");
    std::vector<std::vector<std::size_t>> train_quota(n_classes), test_quota(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const std::vector<double> prop =
            n_clients == 1 ? std::vector<double>{1.0} : prop_rng.child(static_cast<std::uint64_t>(c)).dirichlet(alpha, n_clients);
        train_quota[c] = largest_remainder(prop, train_per_class[c]);
        test_quota[c] = largest_remainder(prop, test_per_class[c]);
    }
    return detail::assign_by_quota(pool, train_quota, test_quota, n_classes, n_clients, "dirichlet");
}

// Per-client task transformation: the identity, a label permutation (maximal
// conflict between clients) or a rotation of a 2-D feature plane (graded
// conflict).
struct TaskTransform {
    enum class Kind { Identity, LabelPerm, Rotate2D };
    Kind kind = Kind::Identity;
    std::vector<int> perm;       // LabelPerm
    double angle_rad = 0.0;      // Rotate2D, applied in the (ax0, ax1) plane
    std::size_t ax0 = 0, ax1 = 1;

    static TaskTransform identity() { return {}; }
    static TaskTransform label_perm(std::vector<int> p) {
        TaskTransform t;
        t.kind = Kind::LabelPerm;
        t.perm = std::move(p);
        return t;
    }
    static TaskTransform rotate2d(double angle_rad, std::size_t ax0 = 0, std::size_t ax1 = 1) {
        TaskTransform t;
        t.kind = Kind::Rotate2D;
        t.angle_rad = angle_rad;
        t.ax0 = ax0;
        t.ax1 = ax1;
        return t;
    }

    std::string tag() const {
        switch (kind) {
        case Kind::Identity: return "identity";
        case Kind::LabelPerm: {
            std::string s = "perm:";
            for (std::size_t i = 0; i < perm.size(); ++i) { s += (i ? "," : "") + std::to_string(perm[i]); }
            return s;
        }
        case Kind::Rotate2D: {
            std::ostringstream os;
            os << "rot:" << angle_rad * 180.0 / 3.14159265358979323846;
            return os.str();
        }
        }
        return "";
    }

    Example apply(const Example& ex) const {
        Example out = ex;
        if (kind == Kind::LabelPerm) {
            out.y = perm[static_cast<std::size_t>(ex.y)];
        } else if (kind == Kind::Rotate2D) {
            const double c = std::cos(angle_rad), s = std::sin(angle_rad);
            const double v0 = ex.x[ax0], v1 = ex.x[ax1];
            out.x[ax0] = c * v0 - s * v1;
            out.x[ax1] = s * v0 + c * v1;
        }
        return out;
    }
};

// One transform per client; an iid share of the pool is dealt to each client
// and mapped through its transform, so the clients' optimal models differ.
inline std::vector<ClientDataset> partition_distinct_tasks(const std::vector<Example>& pool,
                                                           const std::vector<TaskTransform>& tasks,
                                                           std::size_t train_per_client, std::size_t test_per_client,
                                                           Rng& rng) {
    const std::size_t n_clients = tasks.size();
    if (n_clients == 0) { throw ConfigError("partition: need one task per client"); }
    const std::size_t need = n_clients * (train_per_client + test_per_client);
    if (need > pool.size()) {
        throw ConfigError("partition: pool exhausted (need " + std::to_string(need) + ", have " +
                          std::to_string(pool.size()) + ")");
    }
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    Rng deal_rng = rng.child("task_deal");
    deal_rng.shuffle(order);
    std::vector<ClientDataset> clients(n_clients);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < n_clients; ++i) {
        clients[i].client_id = static_cast<int>(i);
        clients[i].task_tag = tasks[i].tag();
        for (std::size_t k = 0; k < train_per_client; ++k) { clients[i].train.push_back(tasks[i].apply(pool[order[cursor++]])); }
        for (std::size_t k = 0; k < test_per_client; ++k) { clients[i].test.push_back(tasks[i].apply(pool[order[cursor++]])); }
    }
    return clients;
}

// CSV schema: header x_0,...,x_{d-1},y then one row per example with 17
// significant digits per feature.
inline void export_examples_csv(const std::vector<Example>& examples, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    if (examples.empty()) { throw ConfigError("export: empty example set"); }
    const std::size_t d = examples[0].x.size();
    for (std::size_t j = 0; j < d; ++j) { f << "x_" << j << ","; }
    f << "y\n";
    char buf[40];
    for (const Example& ex : examples) {
        for (std::size_t j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", ex.x[j]);
            f << buf << ",";
        }
        f << ex.y << "\n";
    }
    if (!f) { throw IoError("write failed for '" + path + "'"); }
}

inline std::vector<Example> import_examples_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) { throw IoError("cannot open '" + path + "' for reading"); }
    std::string line;
    if (!std::getline(f, line)) { throw FormatError("csv: missing header in '" + path + "'"); }
    std::size_t d = 0;
    {
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) {
            if (col == "y") { break; }
            d += 1;
        }
    }
    if (d == 0) { throw FormatError("csv: no feature columns in '" + path + "'"); }
    std::vector<Example> out;
    while (std::getline(f, line)) {
        if (line.empty()) { continue; }
        std::stringstream ss(line);
        std::string col;
        Example ex;
        ex.x.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::getline(ss, col, ',')) { throw FormatError("csv: short row in '" + path + "'"); }
            ex.x[j] = std::stod(col);
        }
        if (!std::getline(ss, col, ',')) { throw FormatError("csv: missing label in '" + path + "'"); }
        ex.y = std::stoi(col);
        out.push_back(std::move(ex));
    }
    return out;
}

} // namespace fedmerge
