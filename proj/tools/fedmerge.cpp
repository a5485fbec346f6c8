// Experiment runner: configure -> train federated + local -> estimate Fisher
// -> merge -> evaluate -> CSV/JSON reports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmerge/experiment.hpp"
#include "fedmerge/merge.hpp"
#include "fedmerge/theory.hpp"
#include "fedmerge/version.hpp"

namespace {

// Matches one path component against a pattern with a single '*'.
bool component_matches(const std::string& name, const std::string& pattern) {
    const std::size_t star = pattern.find('*');
    if (star == std::string::npos) { return name == pattern; }
    const std::string prefix = pattern.substr(0, star);
    const std::string suffix = pattern.substr(star + 1);
    return name.size() >= prefix.size() + suffix.size() && name.rfind(prefix, 0) == 0 &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Expands '*' wildcards in any path component; plain paths pass through.
std::vector<std::string> expand_inputs(const std::vector<std::string>& patterns) {
    std::vector<std::string> out;
    for (const std::string& pattern : patterns) {
        if (pattern.find('*') == std::string::npos) {
            out.push_back(pattern);
            continue;
        }
        const std::filesystem::path p(pattern);
        std::vector<std::filesystem::path> frontier;
        frontier.push_back(p.is_absolute() ? p.root_path() : ".");
        for (const std::filesystem::path& part : p.relative_path()) {
            std::vector<std::filesystem::path> next;
            for (const std::filesystem::path& base : frontier) {
                if (part.string().find('*') == std::string::npos) {
                    if (std::filesystem::exists(base / part)) { next.push_back(base / part); }
                    continue;
                }
                if (!std::filesystem::is_directory(base)) { continue; }
                for (const auto& entry : std::filesystem::directory_iterator(base)) {
                    if (component_matches(entry.path().filename().string(), part.string())) {
                        next.push_back(entry.path());
                    }
                }
            }
            frontier = std::move(next);
        }
        std::vector<std::string> matched;
        for (const std::filesystem::path& m : frontier) { matched.push_back(m.lexically_normal().string()); }
        std::sort(matched.begin(), matched.end());
        out.insert(out.end(), matched.begin(), matched.end());
    }
    return out;
}

int run_theory(std::size_t trials, std::size_t samples, std::uint64_t seed, const std::string& out_path) {
    using namespace fedmerge;
    std::ofstream csv(out_path, std::ios::trunc);
    if (!csv) { throw IoError("cannot open '" + out_path + "' for writing"); }
    csv << "scenario_id,which,lambda,lhs,lhs_stderr,rhs,holds\n";
    Rng root(seed);
    std::size_t failures = 0;
    std::size_t escapes = 0;
    for (std::size_t id = 0; id < trials; ++id) {
        Rng gen = root.child("scenario", id);
        const QuadScenario sc = random_scenario(gen);
        const double a = sc.trace(sc.var_f);
        const double b = sc.trace(sc.var_l);
        const double c = sc.trace(sc.var_c);
        const MixingWeights w = optimal_weights(a, b, std::min({c, a, b}));
        const std::vector<std::pair<BoundTarget, double>> checks = {
            {BoundTarget::FedIT, 0.0},  {BoundTarget::Local, 0.0},   {BoundTarget::Merge, 0.0},
            {BoundTarget::Merge, 0.25}, {BoundTarget::Merge, 0.5},   {BoundTarget::Merge, 0.75},
            {BoundTarget::Merge, 1.0},  {BoundTarget::Merge, w.lambda_fedit},
        };
        std::size_t check_id = 0;
        for (const auto& [which, lambda] : checks) {
            Rng mc = gen.child("mc", check_id++);
            const BoundCheck bc = check_bound(sc, which, lambda, samples, mc);
            csv << id << "," << bound_target_name(which) << "," << g17(lambda) << "," << g17(bc.lhs) << ","
                << g17(bc.lhs_stderr) << "," << g17(bc.rhs) << "," << (bc.holds ? 1 : 0) << "\n";
            failures += bc.holds ? 0 : 1;
            escapes += bc.escapes;
        }
    }
    Rng cs_rng = root.child("trace_cs");
    const std::size_t cs_pass = check_trace_cs(10000, cs_rng);
    std::cout << "scenarios: " << trials << ", bound failures: " << failures << ", basin escapes: " << escapes
              << ", trace-CS passes: " << cs_pass << "/10000\n";
    std::cout << "wrote " << out_path << "\n";
    return (failures == 0 && cs_pass == 10000) ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated low-rank fine-tuning simulator with Fisher-weighted federated-local model merging"};
    app.set_version_flag("--version", std::string(FEDMERGE_VERSION));
    app.require_subcommand(0, 1);

    std::string config_path;
    std::string out_override;
    std::uint64_t seed_override = 0;
    bool has_seed = false;
    CLI::App* run = app.add_subcommand("run", "Run a full experiment from a JSON config");
    run->add_option("--config", config_path, "Path to the experiment JSON config")->required();
    run->add_option("--seed", seed_override, "Override the config seed")->each([&](const std::string&) { has_seed = true; });
    run->add_option("--out", out_override, "Override the config output directory");

    std::vector<std::string> tradeoff_inputs;
    std::string tradeoff_out = "tradeoff.csv";
    CLI::App* tradeoff = app.add_subcommand("tradeoff", "Aggregate summary.json files into a trade-off table");
    tradeoff->add_option("--inputs", tradeoff_inputs, "summary.json paths ('*' in the filename expands)")->required();
    tradeoff->add_option("--out", tradeoff_out, "Output CSV path");

    std::size_t theory_trials = 20;
    std::size_t theory_samples = 100000;
    std::uint64_t theory_seed = 7;
    std::string theory_out = "theory.csv";
    CLI::App* theory = app.add_subcommand("theory", "Run the excess-loss bound oracle on random scenarios");
    theory->add_option("--trials", theory_trials, "Number of random scenarios");
    theory->add_option("--samples", theory_samples, "Monte Carlo draws per check (>= 1e4)");
    theory->add_option("--seed", theory_seed, "Scenario seed");
    theory->add_option("--out", theory_out, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (run->parsed()) {
            fedmerge::ExperimentConfig cfg = fedmerge::load_config(config_path);
            if (has_seed) { cfg.seed = seed_override; }
            if (!out_override.empty()) { cfg.output_dir = out_override; }
            const fedmerge::ExperimentResult result = fedmerge::run_experiment(cfg);
            std::cout << "wrote " << cfg.output_dir << "/rounds.csv, comm.csv"
                      << (result.merged ? ", merge.csv, scan_*.csv" : "") << ", summary.json\n";
            for (const auto& [name, s] : result.strategies) {
                std::cout << name << ": mean test acc " << s.mean_test_acc << ", upload/client " << s.upload_bytes_per_client
                          << " B\n";
            }
            if (result.merged) {
                std::cout << "merged (t=" << cfg.t_fedit
                          << "): mean test acc " << result.summary["merge"]["mean_acc_merged"].get<double>() << "\n";
            }
            return 0;
        }
        if (tradeoff->parsed()) {
            const std::vector<std::string> inputs = expand_inputs(tradeoff_inputs);
            const std::vector<fedmerge::TradeoffRow> rows = fedmerge::report_tradeoff(inputs);
            fedmerge::write_tradeoff_csv(rows, tradeoff_out);
            std::cout << "wrote " << tradeoff_out << " (" << rows.size() << " rows)\n";
            return 0;
        }
        if (theory->parsed()) { return run_theory(theory_trials, theory_samples, theory_seed, theory_out); }
        std::cout << app.help();
        return 0;
    } catch (const fedmerge::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fedmerge::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
