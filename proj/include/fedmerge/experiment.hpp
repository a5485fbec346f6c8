#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmerge/data.hpp"
#include "fedmerge/errors.hpp"
#include "fedmerge/federated.hpp"
#include "fedmerge/fisher.hpp"
#include "fedmerge/merge.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

// All floating-point CSV fields use 17 significant digits so values round-trip
// bit-exactly through text.
inline std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

enum class DataMode { Dirichlet, DistinctTasks };
enum class TaskKind { Identity, LabelPerm, Rotation };
enum class FisherLabelConfig { Auto, Exact, Sampled };

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "out";

    // data
    DataMode data_mode = DataMode::DistinctTasks;
    std::size_t n_clients = 8;
    std::size_t train_per_client = 40;
    std::size_t test_per_client = 200;
    std::size_t n_classes = 4;
    std::size_t d_in = 6;
    double margin = 3.0;
    double noise_std = 1.0;
    double alpha = 0.5;                 // Dirichlet concentration
    TaskKind task_kind = TaskKind::Rotation;
    double rotation_max_deg = 60.0;     // client angles spread over [-max, max]
    bool rotation_alternate = false;    // all clients at +/-max with alternating sign

    // model
    ModelSpec model;
    double init_scale = 1.0;            // A init std = init_scale / sqrt(rank)
    double base_scale = 0.1;            // random-base fallback when pretraining is off
    std::size_t pretrain_steps = 300;   // 0 disables the pre-trained backbone
    std::size_t pretrain_pool = 1000;
    double pretrain_lr = 0.1;

    // federated
    std::size_t rounds = 60;
    std::size_t t_fedit = 40;           // FedIT checkpoint used for merging
    std::size_t local_rounds = 30;
    std::size_t local_iters = 5;
    std::size_t batch_size = 10;
    double lr = 0.05;
    std::uint64_t bytes_per_param = 4;
    std::vector<Strategy> strategies = {Strategy::FedIT, Strategy::FedSA, Strategy::FfaLora, Strategy::LocalOnly};

    // fisher
    std::size_t fisher_batch = 30;
    FisherLabelConfig fisher_labels = FisherLabelConfig::Auto;
    double fisher_eps = 1e-8;
    std::size_t fisher_sample_draws = 1;

    // merge
    std::size_t grid_points = 11;
    std::size_t scan_points = 21;
    double degeneracy_tol = 1e-15;

    bool write_checkpoints = true;
    bool export_datasets = false; // client_<i>_{train,test}.csv alongside the run

    bool has_strategy(Strategy s) const {
        for (const Strategy x : strategies) {
            if (x == s) { return true; }
        }
        return false;
    }

    LabelMode resolved_label_mode() const {
        if (fisher_labels == FisherLabelConfig::Exact) { return LabelMode::ExactExpectation; }
        if (fisher_labels == FisherLabelConfig::Sampled) { return LabelMode::ModelSampled; }
        return n_classes <= 32 ? LabelMode::ExactExpectation : LabelMode::ModelSampled;
    }

    void validate() const {
        model.validate();
        if (n_clients == 0) { throw ConfigError("config: n_clients >= 1 required"); }
        if (train_per_client == 0 || test_per_client == 0) { throw ConfigError("config: per-client sizes must be positive"); }
        if (rounds == 0 || local_rounds == 0 || local_iters == 0) { throw ConfigError("config: round counts must be positive"); }
        if (t_fedit == 0 || t_fedit > rounds) { throw ConfigError("config: t_fedit must be in [1, rounds]"); }
        if (batch_size == 0) { throw ConfigError("config: batch_size >= 1 required"); }
        if (margin < 0.0 || noise_std < 0.0) { throw ConfigError("config: margin and noise_std must be nonnegative"); }
        if (alpha <= 0.0) { throw ConfigError("config: alpha must be positive"); }
        if (strategies.empty()) { throw ConfigError("config: at least one strategy required"); }
        if (fisher_batch < 2) { throw ConfigError("config: fisher batch_size >= 2 required"); }
        if (fisher_eps <= 0.0) { throw ConfigError("config: fisher epsilon must be positive"); }
        if (fisher_sample_draws == 0) { throw ConfigError("config: fisher sample_draws >= 1 required"); }
        if (grid_points < 2 || scan_points < 2) { throw ConfigError("config: grid_points and scan_points must be >= 2"); }
        if (model.d_in != d_in || model.n_classes != n_classes) {
            throw ConfigError("config: model dims must match data dims");
        }
        if (task_kind == TaskKind::Rotation && d_in < 2) { throw ConfigError("config: rotation tasks need d_in >= 2"); }
    }
};

// ---------------------------------------------------------------------------
// JSON config I/O. Unknown keys are rejected so typos fail loudly.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (allowed.count(key) == 0) { throw ConfigError("config: unknown key '" + key + "' in " + where); }
    }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("config: bad value for '") + key + "'");
        }
    }
}

} // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    detail::check_keys(
        j, {"seed", "output_dir", "data", "model", "federated", "fisher", "merge", "write_checkpoints", "export_datasets"},
        "top level");
    detail::maybe(j, "seed", cfg.seed);
    detail::maybe(j, "output_dir", cfg.output_dir);
    detail::maybe(j, "write_checkpoints", cfg.write_checkpoints);
    detail::maybe(j, "export_datasets", cfg.export_datasets);
    if (j.contains("data")) {
        const nlohmann::json& d = j.at("data");
        detail::check_keys(d,
                           {"mode", "n_clients", "train_per_client", "test_per_client", "n_classes", "d_in", "margin",
                            "noise_std", "alpha", "task_kind", "rotation_max_deg", "rotation_alternate"},
                           "data");
        std::string mode = cfg.data_mode == DataMode::Dirichlet ? "dirichlet" : "distinct_tasks";
        detail::maybe(d, "mode", mode);
        if (mode == "dirichlet") {
            cfg.data_mode = DataMode::Dirichlet;
        } else if (mode == "distinct_tasks") {
            cfg.data_mode = DataMode::DistinctTasks;
        } else {
            throw ConfigError("config: data.mode must be 'dirichlet' or 'distinct_tasks'");
        }
        detail::maybe(d, "n_clients", cfg.n_clients);
        detail::maybe(d, "train_per_client", cfg.train_per_client);
        detail::maybe(d, "test_per_client", cfg.test_per_client);
        detail::maybe(d, "n_classes", cfg.n_classes);
        detail::maybe(d, "d_in", cfg.d_in);
        detail::maybe(d, "margin", cfg.margin);
        detail::maybe(d, "noise_std", cfg.noise_std);
        detail::maybe(d, "alpha", cfg.alpha);
        std::string kind = "rotation";
        detail::maybe(d, "task_kind", kind);
        if (kind == "rotation") {
            cfg.task_kind = TaskKind::Rotation;
        } else if (kind == "label_perm") {
            cfg.task_kind = TaskKind::LabelPerm;
        } else if (kind == "identity") {
            cfg.task_kind = TaskKind::Identity;
        } else {
            throw ConfigError("config: data.task_kind must be 'rotation', 'label_perm' or 'identity'");
        }
        detail::maybe(d, "rotation_max_deg", cfg.rotation_max_deg);
        detail::maybe(d, "rotation_alternate", cfg.rotation_alternate);
    }
    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        detail::check_keys(
            m, {"architecture", "d_hidden", "rank", "init_scale", "base_scale", "pretrain_steps", "pretrain_pool",
                "pretrain_lr"},
            "model");
        std::string arch = "linear_softmax";
        detail::maybe(m, "architecture", arch);
        if (arch == "linear_softmax") {
            cfg.model.arch = Arch::LinearSoftmax;
        } else if (arch == "mlp1") {
            cfg.model.arch = Arch::Mlp1;
        } else {
            throw ConfigError("config: model.architecture must be 'linear_softmax' or 'mlp1'");
        }
        detail::maybe(m, "d_hidden", cfg.model.d_hidden);
        detail::maybe(m, "rank", cfg.model.rank);
        detail::maybe(m, "init_scale", cfg.init_scale);
        detail::maybe(m, "base_scale", cfg.base_scale);
        detail::maybe(m, "pretrain_steps", cfg.pretrain_steps);
        detail::maybe(m, "pretrain_pool", cfg.pretrain_pool);
        detail::maybe(m, "pretrain_lr", cfg.pretrain_lr);
    }
    if (j.contains("federated")) {
        const nlohmann::json& f = j.at("federated");
        detail::check_keys(f,
                           {"rounds", "t_fedit", "local_rounds", "local_iters", "batch_size", "lr", "bytes_per_param",
                            "strategies"},
                           "federated");
        detail::maybe(f, "rounds", cfg.rounds);
        detail::maybe(f, "t_fedit", cfg.t_fedit);
        detail::maybe(f, "local_rounds", cfg.local_rounds);
        detail::maybe(f, "local_iters", cfg.local_iters);
        detail::maybe(f, "batch_size", cfg.batch_size);
        detail::maybe(f, "lr", cfg.lr);
        detail::maybe(f, "bytes_per_param", cfg.bytes_per_param);
        if (f.contains("strategies")) {
            cfg.strategies.clear();
            for (const auto& s : f.at("strategies")) { cfg.strategies.push_back(strategy_from_name(s.get<std::string>())); }
        }
    }
    if (j.contains("fisher")) {
        const nlohmann::json& f = j.at("fisher");
        detail::check_keys(f, {"batch_size", "label_mode", "epsilon", "sample_draws"}, "fisher");
        detail::maybe(f, "batch_size", cfg.fisher_batch);
        std::string mode = "auto";
        detail::maybe(f, "label_mode", mode);
        if (mode == "auto") {
            cfg.fisher_labels = FisherLabelConfig::Auto;
        } else if (mode == "exact") {
            cfg.fisher_labels = FisherLabelConfig::Exact;
        } else if (mode == "sampled") {
            cfg.fisher_labels = FisherLabelConfig::Sampled;
        } else {
            throw ConfigError("config: fisher.label_mode must be 'auto', 'exact' or 'sampled'");
        }
        detail::maybe(f, "epsilon", cfg.fisher_eps);
        detail::maybe(f, "sample_draws", cfg.fisher_sample_draws);
    }
    if (j.contains("merge")) {
        const nlohmann::json& m = j.at("merge");
        detail::check_keys(m, {"grid_points", "scan_points", "degeneracy_tol"}, "merge");
        detail::maybe(m, "grid_points", cfg.grid_points);
        detail::maybe(m, "scan_points", cfg.scan_points);
        detail::maybe(m, "degeneracy_tol", cfg.degeneracy_tol);
    }
    cfg.model.d_in = cfg.d_in;
    cfg.model.n_classes = cfg.n_classes;
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) { throw IoError("cannot open config '" + path + "'"); }
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["write_checkpoints"] = cfg.write_checkpoints;
    j["export_datasets"] = cfg.export_datasets;
    j["data"]["mode"] = cfg.data_mode == DataMode::Dirichlet ? "dirichlet" : "distinct_tasks";
    j["data"]["n_clients"] = cfg.n_clients;
    j["data"]["train_per_client"] = cfg.train_per_client;
    j["data"]["test_per_client"] = cfg.test_per_client;
    j["data"]["n_classes"] = cfg.n_classes;
    j["data"]["d_in"] = cfg.d_in;
    j["data"]["margin"] = cfg.margin;
    j["data"]["noise_std"] = cfg.noise_std;
    j["data"]["alpha"] = cfg.alpha;
    j["data"]["task_kind"] = cfg.task_kind == TaskKind::Rotation ? "rotation"
                             : cfg.task_kind == TaskKind::LabelPerm ? "label_perm"
                                                                    : "identity";
    j["data"]["rotation_max_deg"] = cfg.rotation_max_deg;
    j["data"]["rotation_alternate"] = cfg.rotation_alternate;
    j["model"]["architecture"] = arch_name(cfg.model.arch);
    j["model"]["d_hidden"] = cfg.model.d_hidden;
    j["model"]["rank"] = cfg.model.rank;
    j["model"]["init_scale"] = cfg.init_scale;
    j["model"]["base_scale"] = cfg.base_scale;
    j["model"]["pretrain_steps"] = cfg.pretrain_steps;
    j["model"]["pretrain_pool"] = cfg.pretrain_pool;
    j["model"]["pretrain_lr"] = cfg.pretrain_lr;
    j["federated"]["rounds"] = cfg.rounds;
    j["federated"]["t_fedit"] = cfg.t_fedit;
    j["federated"]["local_rounds"] = cfg.local_rounds;
    j["federated"]["local_iters"] = cfg.local_iters;
    j["federated"]["batch_size"] = cfg.batch_size;
    j["federated"]["lr"] = cfg.lr;
    j["federated"]["bytes_per_param"] = cfg.bytes_per_param;
    std::vector<std::string> names;
    for (const Strategy s : cfg.strategies) { names.push_back(strategy_name(s)); }
    j["federated"]["strategies"] = names;
    j["fisher"]["batch_size"] = cfg.fisher_batch;
    j["fisher"]["label_mode"] = cfg.fisher_labels == FisherLabelConfig::Auto ? "auto"
                                : cfg.fisher_labels == FisherLabelConfig::Exact ? "exact"
                                                                                : "sampled";
    j["fisher"]["epsilon"] = cfg.fisher_eps;
    j["fisher"]["sample_draws"] = cfg.fisher_sample_draws;
    j["merge"]["grid_points"] = cfg.grid_points;
    j["merge"]["scan_points"] = cfg.scan_points;
    j["merge"]["degeneracy_tol"] = cfg.degeneracy_tol;
    return j;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct ClientMergeRow {
    int client = 0;
    double a = 0.0, b = 0.0, c = 0.0;
    double lambda_fedit = 0.0;
    double pred_trace = 0.0;
    bool degenerate = false;
    double acc_fedit = 0.0, acc_local = 0.0, acc_merged = 0.0;
    double lambda_grid = 0.0, acc_grid = 0.0;
    double acc_fisher_merge = 0.0;
    double lmc_barrier = 0.0;
    std::vector<GridPoint> grid_curve;
};

struct StrategySummary {
    Strategy strategy = Strategy::LocalOnly;
    double mean_test_acc = 0.0;
    double mean_test_loss = 0.0;
    std::uint64_t upload_bytes_per_client = 0;
    std::uint64_t upload_bytes_total = 0;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<ClientMergeRow> merge_rows;
    std::map<std::string, StrategySummary> strategies;
    nlohmann::json summary;
    bool merged = false; // merge stage executed
};

namespace detail {

inline std::vector<TaskTransform> build_tasks(const ExperimentConfig& cfg, Rng& rng) {
    std::vector<TaskTransform> tasks;
    for (std::size_t i = 0; i < cfg.n_clients; ++i) {
        switch (cfg.task_kind) {
        case TaskKind::Identity: tasks.push_back(TaskTransform::identity()); break;
        case TaskKind::LabelPerm: {
            std::vector<int> perm(cfg.n_classes);
            for (std::size_t c = 0; c < cfg.n_classes; ++c) { perm[c] = static_cast<int>(c); }
            Rng perm_rng = rng.child("perm", i);
            perm_rng.shuffle(perm);
            tasks.push_back(TaskTransform::label_perm(std::move(perm)));
            break;
        }
        case TaskKind::Rotation: {
            const double max_rad = cfg.rotation_max_deg * 3.14159265358979323846 / 180.0;
            double angle;
            if (cfg.rotation_alternate) {
                angle = (i % 2 == 0) ? max_rad : -max_rad;
            } else {
                angle = cfg.n_clients == 1 ? 0.0
                                           : -max_rad + 2.0 * max_rad * static_cast<double>(i) /
                                                            static_cast<double>(cfg.n_clients - 1);
            }
            tasks.push_back(TaskTransform::rotate2d(angle));
            break;
        }
        }
    }
    return tasks;
}

inline void write_rounds_csv(const std::string& path, const std::vector<RoundMetric>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f << "round,client,strategy,train_loss,test_loss,test_acc,up_bytes,down_bytes\n";
    for (const RoundMetric& m : rows) {
        f << m.round << "," << m.client << "," << strategy_name(m.strategy) << "," << g17(m.train_loss) << ","
          << g17(m.test_loss) << "," << g17(m.test_acc) << "," << m.up_bytes << "," << m.down_bytes << "\n";
    }
}

inline void write_comm_csv(const std::string& path, const std::vector<const CommLedger*>& ledgers) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f << "round,client,direction,strategy,bytes\n";
    for (const CommLedger* ledger : ledgers) {
        for (const LedgerEntry& e : ledger->entries) {
            f << e.round << "," << e.client << "," << (e.upload ? "up" : "down") << "," << strategy_name(e.strategy)
              << "," << e.bytes << "\n";
        }
    }
}

inline void write_merge_csv(const std::string& path, const std::vector<ClientMergeRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f << "client,a,b,c,lambda_fedit,pred_trace,acc_fedit,acc_local,acc_merged,lambda_grid,acc_grid\n";
    for (const ClientMergeRow& r : rows) {
        f << r.client << "," << g17(r.a) << "," << g17(r.b) << "," << g17(r.c) << "," << g17(r.lambda_fedit) << ","
          << g17(r.pred_trace) << "," << g17(r.acc_fedit) << "," << g17(r.acc_local) << "," << g17(r.acc_merged) << ","
          << g17(r.lambda_grid) << "," << g17(r.acc_grid) << "\n";
    }
}

inline void write_scan_csv(const std::string& path, const std::vector<GridPoint>& curve) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f << "lambda,loss,acc\n";
    for (const GridPoint& p : curve) { f << g17(p.lambda) << "," << g17(p.loss) << "," << g17(p.accuracy) << "\n"; }
}

inline void write_model_checkpoint(const std::string& dir, const std::string& stem, const AdaptedModel& model) {
    save_pvec(model_to_params(model), dir + "/" + stem + ".pvec");
    nlohmann::json desc;
    desc["architecture"] = arch_name(model.spec.arch);
    desc["d_in"] = model.spec.d_in;
    if (model.spec.arch == Arch::Mlp1) { desc["d_hidden"] = model.spec.d_hidden; }
    desc["n_classes"] = model.spec.n_classes;
    desc["rank"] = model.spec.rank;
    std::ofstream f(dir + "/" + stem + ".json", std::ios::trunc);
    if (!f) { throw IoError("cannot write checkpoint descriptor for " + stem); }
    f << desc.dump(2) << "\n";
}

inline std::vector<Example> pick_fisher_batch(const ClientDataset& client, std::size_t batch_size, Rng rng) {
    std::vector<std::size_t> idx(client.train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) { idx[i] = i; }
    rng.shuffle(idx);
    const std::size_t n = std::min(batch_size, idx.size());
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) { out.push_back(client.train[idx[i]]); }
    return out;
}

} // namespace detail

// Executes the full pipeline: data -> federated training (with a merge
// checkpoint at t_fedit) -> per-client local training -> per-client Fisher and
// cross-covariance estimation -> closed-form merge -> evaluation -> CSV/JSON
// artifacts under cfg.output_dir. Bit-reproducible given (config, seed).
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::filesystem::path out_dir(cfg.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) { throw IoError("cannot create output directory '" + cfg.output_dir + "'"); }

    Rng root(cfg.seed);

    // data
    PoolConfig pool_cfg;
    pool_cfg.n_classes = cfg.n_classes;
    pool_cfg.d_in = cfg.d_in;
    pool_cfg.margin = cfg.margin;
    pool_cfg.noise_std = cfg.noise_std;
    pool_cfg.size = 2 * cfg.n_clients * (cfg.train_per_client + cfg.test_per_client);
    Rng pool_rng = root.child("pool");
    const std::vector<Example> pool = make_base_pool(pool_cfg, pool_rng);
    Rng part_rng = root.child("partition");
    std::vector<ClientDataset> clients;
    if (cfg.data_mode == DataMode::Dirichlet) {
        clients = partition_dirichlet(pool, cfg.alpha, cfg.n_clients, cfg.train_per_client, cfg.test_per_client,
                                      cfg.n_classes, part_rng);
    } else {
        const std::vector<TaskTransform> tasks = detail::build_tasks(cfg, part_rng);
        clients = partition_distinct_tasks(pool, tasks, cfg.train_per_client, cfg.test_per_client, part_rng);
    }

    // shared initialization: a pre-trained backbone (trained on generic,
    // untransformed data that no client sees) plus one adapter init, so the
    // federated and local phases start from the same point
    Rng init_rng = root.child("init");
    ParamVector base;
    if (cfg.pretrain_steps > 0) {
        PoolConfig pre_cfg = pool_cfg;
        pre_cfg.size = cfg.pretrain_pool;
        Rng pre_rng = root.child("pretrain");
        const std::vector<Example> pre_pool = make_base_pool(pre_cfg, pre_rng);
        base = pretrain_base(cfg.model, pre_pool, cfg.pretrain_steps, cfg.batch_size, cfg.pretrain_lr, pre_rng);
    } else {
        base = make_base(cfg.model, init_rng, cfg.base_scale);
    }
    const std::vector<LoraAdapter> init = init_adapters(cfg.model, init_rng, cfg.init_scale);
    const Rng train_rng = root.child("train");

    ExperimentResult result;
    result.config = cfg;

    if (cfg.export_datasets) {
        for (const ClientDataset& client : clients) {
            const std::string stem = (out_dir / ("client_" + std::to_string(client.client_id))).string();
            export_examples_csv(client.train, stem + "_train.csv");
            export_examples_csv(client.test, stem + "_test.csv");
        }
    }

    std::vector<RoundMetric> all_metrics;
    std::vector<const CommLedger*> ledgers;
    std::map<std::string, FedResult> fed_runs;
    std::vector<LocalResult> local_runs;

    for (const Strategy strategy : cfg.strategies) {
        FedConfig fc;
        fc.local_iters = cfg.local_iters;
        fc.batch_size = cfg.batch_size;
        fc.lr = cfg.lr;
        fc.strategy = strategy;
        fc.bytes_per_param = cfg.bytes_per_param;
        if (strategy == Strategy::LocalOnly) {
            fc.rounds = cfg.local_rounds;
            fc.checkpoint_rounds = {cfg.local_rounds};
            for (const ClientDataset& client : clients) {
                local_runs.push_back(run_local(client, cfg.model, base, init, fc, train_rng));
                for (const RoundMetric& m : local_runs.back().metrics) { all_metrics.push_back(m); }
            }
        } else {
            fc.rounds = cfg.rounds;
            fc.checkpoint_rounds = {cfg.t_fedit, cfg.rounds};
            fed_runs[strategy_name(strategy)] = run_fedit(clients, cfg.model, base, init, fc, train_rng);
            const FedResult& run = fed_runs[strategy_name(strategy)];
            for (const RoundMetric& m : run.metrics) { all_metrics.push_back(m); }
        }
    }
    for (const auto& [name, run] : fed_runs) {
        (void)name;
        ledgers.push_back(&run.ledger);
    }

    // per-strategy summaries at their final round
    for (const Strategy strategy : cfg.strategies) {
        StrategySummary s;
        s.strategy = strategy;
        long double acc = 0.0L, loss = 0.0L;
        if (strategy == Strategy::LocalOnly) {
            for (std::size_t i = 0; i < clients.size(); ++i) {
                const AdaptedModel model{cfg.model, base, local_runs[i].final_adapters};
                const Metrics m = evaluate(model, clients[i].test);
                acc += m.accuracy;
                loss += m.loss;
            }
            s.upload_bytes_per_client = 0;
            s.upload_bytes_total = 0;
        } else {
            const FedResult& run = fed_runs[strategy_name(strategy)];
            const AdaptedModel global{cfg.model, base, run.global_adapters};
            for (const ClientDataset& client : clients) {
                const Metrics m = evaluate(global, client.test);
                acc += m.accuracy;
                loss += m.loss;
            }
            s.upload_bytes_per_client = run.ledger.client_up(clients[0].client_id);
            s.upload_bytes_total = run.ledger.total_up();
        }
        s.mean_test_acc = static_cast<double>(acc / static_cast<long double>(clients.size()));
        s.mean_test_loss = static_cast<double>(loss / static_cast<long double>(clients.size()));
        result.strategies[strategy_name(strategy)] = s;
    }

    // merge stage needs both the federated checkpoint and the local models
    const bool can_merge = cfg.has_strategy(Strategy::FedIT) && cfg.has_strategy(Strategy::LocalOnly);
    Rng fisher_rng = root.child("fisher");
    if (can_merge) {
        const FedResult& fed = fed_runs[strategy_name(Strategy::FedIT)];
        const std::vector<LoraAdapter>& fed_ckpt = fed.global_checkpoints.at(cfg.t_fedit);
        const AdaptedModel model_f{cfg.model, base, fed_ckpt};
        const LabelMode label_mode = cfg.resolved_label_mode();
        std::vector<double> grid(cfg.grid_points);
        for (std::size_t i = 0; i < cfg.grid_points; ++i) {
            grid[i] = static_cast<double>(i) / static_cast<double>(cfg.grid_points - 1);
        }
        for (std::size_t i = 0; i < clients.size(); ++i) {
            const ClientDataset& client = clients[i];
            const AdaptedModel model_l{cfg.model, base, local_runs[i].final_adapters};
            const std::vector<Example> batch =
                detail::pick_fisher_batch(client, cfg.fisher_batch, fisher_rng.child("batch", i));
            Rng label_rng_f = fisher_rng.child("labels_f", i);
            Rng label_rng_l = fisher_rng.child("labels_l", i);
            const ParamVector fisher_f =
                fisher_diag(model_f, batch, label_mode, &label_rng_f, cfg.fisher_sample_draws);
            const ParamVector fisher_l =
                fisher_diag(model_l, batch, label_mode, &label_rng_l, cfg.fisher_sample_draws);
            const ParamVector var_f = fisher_to_variance(fisher_f, cfg.fisher_eps);
            const ParamVector var_l = fisher_to_variance(fisher_l, cfg.fisher_eps);
            const CrossDiag cross = cross_corr(model_f, model_l, batch, var_f, var_l);
            const TraceTriple t = traces(var_f, var_l, cross);
            const MixingWeights w = optimal_weights(t.a, t.b, t.c, cfg.degeneracy_tol);

            ClientMergeRow row;
            row.client = client.client_id;
            row.a = t.a;
            row.b = t.b;
            row.c = t.c;
            row.lambda_fedit = w.lambda_fedit;
            row.degenerate = w.degenerate;
            row.pred_trace = merged_trace(t.a, t.b, t.c, w.lambda_fedit);

            const std::vector<LoraAdapter> merged = merge_adapters(fed_ckpt, local_runs[i].final_adapters, w);
            const AdaptedModel model_m{cfg.model, base, merged};
            row.acc_fedit = evaluate(model_f, client.test).accuracy;
            row.acc_local = evaluate(model_l, client.test).accuracy;
            row.acc_merged = evaluate(model_m, client.test).accuracy;

            const GridSearchResult gs =
                grid_search_lambda(cfg.model, base, fed_ckpt, local_runs[i].final_adapters, grid, client.test);
            row.lambda_grid = gs.best_lambda;
            for (const GridPoint& p : gs.curve) {
                if (p.lambda == gs.best_lambda) { row.acc_grid = p.accuracy; }
            }
            row.grid_curve = gs.curve;

            const FisherWeightedModel fw_f{adapters_to_params(fed_ckpt), fisher_f};
            const FisherWeightedModel fw_l{adapters_to_params(local_runs[i].final_adapters), fisher_l};
            const ParamVector fm = fisher_merge_baseline({fw_f, fw_l}, cfg.fisher_eps);
            const AdaptedModel model_fm{cfg.model, base, params_to_adapters(fed_ckpt, fm)};
            row.acc_fisher_merge = evaluate(model_fm, client.test).accuracy;

            const LmcScan scan =
                lmc_scan(cfg.model, effective_weights(model_f), effective_weights(model_l), client.test, cfg.scan_points);
            row.lmc_barrier = scan.barrier;
            detail::write_scan_csv((out_dir / ("scan_" + std::to_string(client.client_id) + ".csv")).string(),
                                   scan.curve);

            if (cfg.write_checkpoints) {
                detail::write_model_checkpoint(out_dir.string(),
                                               "ckpt_merged_r" + std::to_string(cfg.t_fedit) + "_c" +
                                                   std::to_string(client.client_id),
                                               model_m);
                const std::string cid = std::to_string(client.client_id);
                save_pvec(fisher_f, (out_dir / ("fisher_fedit_c" + cid + ".pvec")).string());
                save_pvec(fisher_l, (out_dir / ("fisher_local_c" + cid + ".pvec")).string());
            }
            result.merge_rows.push_back(std::move(row));
        }
        result.merged = true;
    }

    // artifacts
    detail::write_rounds_csv((out_dir / "rounds.csv").string(), all_metrics);
    detail::write_comm_csv((out_dir / "comm.csv").string(), ledgers);
    if (result.merged) { detail::write_merge_csv((out_dir / "merge.csv").string(), result.merge_rows); }
    if (cfg.write_checkpoints) {
        for (const auto& [name, run] : fed_runs) {
            for (const auto& [round, adapters] : run.global_checkpoints) {
                detail::write_model_checkpoint(out_dir.string(), "ckpt_" + name + "_r" + std::to_string(round),
                                               AdaptedModel{cfg.model, base, adapters});
            }
        }
        for (std::size_t i = 0; i < local_runs.size(); ++i) {
            detail::write_model_checkpoint(out_dir.string(),
                                           "ckpt_local_only_r" + std::to_string(cfg.local_rounds) + "_c" +
                                               std::to_string(clients[i].client_id),
                                           AdaptedModel{cfg.model, base, local_runs[i].final_adapters});
        }
    }

    // summary.json
    nlohmann::json summary;
    summary["seed"] = cfg.seed;
    summary["config"] = config_to_json(cfg);
    for (const auto& [name, s] : result.strategies) {
        summary["strategies"][name]["mean_test_acc"] = s.mean_test_acc;
        summary["strategies"][name]["mean_test_loss"] = s.mean_test_loss;
        summary["strategies"][name]["upload_bytes_per_client"] = s.upload_bytes_per_client;
        summary["strategies"][name]["upload_bytes_total"] = s.upload_bytes_total;
    }
    if (result.merged) {
        const FedResult& fed = fed_runs[strategy_name(Strategy::FedIT)];
        std::uint64_t upload_at_ckpt = 0;
        for (const LedgerEntry& e : fed.ledger.entries) {
            if (e.upload && e.round <= cfg.t_fedit && e.client == clients[0].client_id) { upload_at_ckpt += e.bytes; }
        }
        summary["merge"]["t_fedit"] = cfg.t_fedit;
        summary["merge"]["upload_bytes_per_client"] = upload_at_ckpt;
        long double acc_m = 0.0L, acc_g = 0.0L;
        for (const ClientMergeRow& r : result.merge_rows) {
            nlohmann::json jr;
            jr["client"] = r.client;
            jr["a"] = r.a;
            jr["b"] = r.b;
            jr["c"] = r.c;
            jr["lambda_fedit"] = r.lambda_fedit;
            jr["lambda_local"] = 1.0 - r.lambda_fedit;
            jr["degenerate"] = r.degenerate;
            jr["pred_trace"] = r.pred_trace;
            jr["acc_fedit"] = r.acc_fedit;
            jr["acc_local"] = r.acc_local;
            jr["acc_merged"] = r.acc_merged;
            jr["acc_grid"] = r.acc_grid;
            jr["lambda_grid"] = r.lambda_grid;
            jr["acc_fisher_merge"] = r.acc_fisher_merge;
            jr["lmc_barrier"] = r.lmc_barrier;
            nlohmann::json curve = nlohmann::json::array();
            for (const GridPoint& p : r.grid_curve) {
                curve.push_back({{"lambda", p.lambda}, {"loss", p.loss}, {"acc", p.accuracy}});
            }
            jr["grid_curve"] = curve;
            summary["merge"]["per_client"].push_back(jr);
            acc_m += r.acc_merged;
            acc_g += r.acc_grid;
        }
        summary["merge"]["mean_acc_merged"] = static_cast<double>(acc_m / static_cast<long double>(result.merge_rows.size()));
        summary["merge"]["mean_acc_grid"] = static_cast<double>(acc_g / static_cast<long double>(result.merge_rows.size()));
    }
    result.summary = summary;
    {
        std::ofstream f((out_dir / "summary.json").string(), std::ios::trunc);
        if (!f) { throw IoError("cannot write summary.json"); }
        f << summary.dump(2) << "\n";
    }
    return result;
}

// ---------------------------------------------------------------------------
// Trade-off table over a set of summary.json files: one row per method with
// per-client upload MiB and mean test accuracy. Merged rows are parameterized
// by the FedIT round used for merging.
// ---------------------------------------------------------------------------

struct TradeoffRow {
    std::string method;
    double upload_mb = 0.0; // per-client upload bytes / 2^20
    double mean_acc = 0.0;
};

inline std::vector<TradeoffRow> report_tradeoff(const std::vector<std::string>& summary_paths) {
    if (summary_paths.empty()) { throw ConfigError("tradeoff: need at least one summary.json"); }
    std::vector<TradeoffRow> rows;
    for (const std::string& path : summary_paths) {
        std::ifstream f(path);
        if (!f) { throw IoError("cannot open '" + path + "'"); }
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("tradeoff: bad summary '" + path + "': " + e.what());
        }
        if (!j.contains("strategies")) { throw ConfigError("tradeoff: summary '" + path + "' missing strategies"); }
        for (const auto& [name, s] : j.at("strategies").items()) {
            TradeoffRow r;
            r.method = name;
            r.upload_mb = static_cast<double>(s.at("upload_bytes_per_client").get<std::uint64_t>()) / 1048576.0;
            r.mean_acc = s.at("mean_test_acc").get<double>();
            rows.push_back(r);
        }
        if (j.contains("merge")) {
            TradeoffRow r;
            r.method = "merged_t" + std::to_string(j.at("merge").at("t_fedit").get<std::size_t>());
            r.upload_mb =
                static_cast<double>(j.at("merge").at("upload_bytes_per_client").get<std::uint64_t>()) / 1048576.0;
            r.mean_acc = j.at("merge").at("mean_acc_merged").get<double>();
            rows.push_back(r);
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const TradeoffRow& x, const TradeoffRow& y) {
        return x.method != y.method ? x.method < y.method : x.upload_mb < y.upload_mb;
    });
    // identical baseline rows repeat across runs of the same config
    rows.erase(std::unique(rows.begin(), rows.end(),
                           [](const TradeoffRow& x, const TradeoffRow& y) {
                               return x.method == y.method && x.upload_mb == y.upload_mb && x.mean_acc == y.mean_acc;
                           }),
               rows.end());
    return rows;
}

inline void write_tradeoff_csv(const std::vector<TradeoffRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f << "method,upload_mb,mean_acc\n";
    for (const TradeoffRow& r : rows) { f << r.method << "," << g17(r.upload_mb) << "," << g17(r.mean_acc) << "\n"; }
}

} // namespace fedmerge
