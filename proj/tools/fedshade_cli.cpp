#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedshade/checkpoint.hpp"
#include "fedshade/errors.hpp"
#include "fedshade/experiment.hpp"
#include "fedshade/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fedshade::ExperimentConfig load_config(const std::string& path, const std::string& out,
                                       int64_t seed_offset) {
    auto config = fedshade::load_experiment_config(path);
    if (!out.empty()) config.out = out;
    if (seed_offset != 0) {
        config.seeds.data += uint64_t(seed_offset);
        config.seeds.model += uint64_t(seed_offset);
        config.seeds.defense += uint64_t(seed_offset);
        config.seeds.attack += uint64_t(seed_offset);
    }
    return config;
}

fedshade::AttackConfig load_attack_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw fedshade::ConfigError("cannot open config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& ex) {
        throw fedshade::ConfigError("invalid JSON in " + path + ": " + ex.what());
    }
    fedshade::AttackConfig ac;
    try {
        ac.kind = j.value("kind", ac.kind);
        ac.iterations = j.value("iterations", ac.iterations);
        ac.lr = j.value("lr", ac.lr);
        ac.tv_weight = j.value("tv_weight", ac.tv_weight);
        ac.bn_weight = j.value("bn_weight", ac.bn_weight);
        ac.l2_weight = j.value("l2_weight", ac.l2_weight);
        ac.distance = j.value("distance", ac.distance);
        ac.restarts = j.value("restarts", ac.restarts);
        ac.seed = j.value("seed", ac.seed);
        ac.batch_size = j.value("batch_size", ac.batch_size);
    } catch (const json::exception& ex) {
        throw fedshade::ConfigError("malformed attack config: " + std::string(ex.what()));
    }
    if (ac.kind != "optimization" && ac.kind != "model_based")
        throw fedshade::ConfigError("unknown attack kind '" + ac.kind + "'");
    return ac;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated-learning gradient-inversion testbed"};
    app.require_subcommand(1);

    std::string config_path, out_path, update_path, generator_path;
    int64_t seed_offset = 0;
    std::vector<std::string> run_dirs;

    auto* pretrain = app.add_subcommand("pretrain", "pretrain the shadow generator");
    pretrain->add_option("--config", config_path, "experiment config file")->required();
    pretrain->add_option("--out", out_path, "checkpoint output path")->required();
    pretrain->add_option("--seed", seed_offset, "offset applied to all configured seeds");

    auto* run = app.add_subcommand("run", "execute a full experiment");
    run->add_option("--config", config_path, "experiment config file")->required();
    run->add_option("--out", out_path, "output directory (overrides config)");
    run->add_option("--seed", seed_offset, "offset applied to all configured seeds");

    auto* attack = app.add_subcommand("attack", "attack a persisted update snapshot");
    attack->add_option("--update", update_path, "update checkpoint")->required();
    attack->add_option("--config", config_path, "attack config file");
    attack->add_option("--generator", generator_path,
                       "attacker generator checkpoint (model_based)");
    attack->add_option("--out", out_path, "output directory")->required();
    attack->add_option("--seed", seed_offset, "attack seed override");

    auto* report = app.add_subcommand("report", "regenerate reports for a run directory");
    report->add_option("--out", out_path, "run directory")->required();

    auto* compare = app.add_subcommand("compare", "aggregate runs into one table");
    compare->add_option("runs", run_dirs, "run directories")->required();
    compare->add_option("--out", out_path, "output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage problems are configuration errors
    }

    try {
        if (pretrain->parsed()) {
            auto config = load_config(config_path, "", seed_offset);
            fedshade::validate_experiment(config);
            auto gen =
                fedshade::pretrain_public_generator(config, config.seeds.defense);
            fedshade::Checkpoint ck;
            ck.manifest["kind"] = "shadow_generator";
            const auto& spec = gen.spec();
            ck.manifest["latent_dim"] = spec.latent_dim;
            ck.manifest["style_dim"] = spec.style_dim;
            ck.manifest["base_channels"] = spec.base_channels;
            ck.manifest["out_channels"] = spec.out_channels;
            ck.manifest["image_size"] = spec.image_size;
            for (const auto& name : gen.param_names())
                ck.arrays[name] = {gen.param(name).shape(), gen.param(name).data()};
            fedshade::save_checkpoint(out_path, ck);
            std::cout << "generator checkpoint written to " << out_path << "\n";
        } else if (run->parsed()) {
            auto config = load_config(config_path, out_path, seed_offset);
            auto art = fedshade::run_experiment(config);
            std::cout << "run complete: " << config.out.string() << " ("
                      << art.leakage.size() << " leakage rows)\n";
        } else if (attack->parsed()) {
            fedshade::AttackConfig ac;
            if (!config_path.empty()) ac = load_attack_config(config_path);
            if (seed_offset != 0) ac.seed = uint64_t(seed_offset);
            auto res = fedshade::attack_snapshot(update_path, ac, generator_path);
            fs::create_directories(out_path);
            json summary;
            summary["final_loss"] = res.final_loss;
            summary["inferred_labels"] = res.inferred_labels;
            summary["low_confidence"] = res.low_confidence;
            summary["restart_losses"] = res.restart_losses;
            for (size_t i = 0; i < res.reconstructions.size(); ++i) {
                fs::path f = fs::path(out_path) / ("recon_" + std::to_string(i) + ".pgm");
                fedshade::write_image(f, res.reconstructions[i]);
                summary["files"].push_back(f.filename().string());
            }
            std::ofstream(fs::path(out_path) / "attack.json") << summary.dump(2) << "\n";
            std::cout << "attack finished, loss " << res.final_loss << "\n";
        } else if (report->parsed()) {
            fedshade::emit_report(out_path);
            std::cout << "report regenerated under " << out_path << "\n";
        } else if (compare->parsed()) {
            std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
            fedshade::compare_runs(dirs, out_path);
            std::cout << "comparison written to " << out_path << "\n";
        }
    } catch (const fedshade::ConfigError& ex) {
        std::cerr << ex.what() << "\n";
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << ex.what() << "\n";
        return 2;
    }
    return 0;
}
