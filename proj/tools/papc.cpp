#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "papc/config.hpp"
#include "papc/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw papc::DatasetError("cannot open for writing: " + path);
    out << text;
    if (!out) throw papc::DatasetError("short write: " + path);
}

void write_metrics_csv(const std::string& path, const std::vector<double>& losses) {
    std::ostringstream out;
    out << "epoch,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
        out << i << "," << fmt_double(losses[i]) << "\n";
    }
    write_file(path, out.str());
}

std::string path_in(const std::string& out_dir, const std::string& name) {
    return (fs::path(out_dir) / name).string();
}

papc::Network load_ckpt(const std::string& out_dir, const std::string& name) {
    std::string path = path_in(out_dir, name);
    if (!fs::exists(path)) {
        throw papc::ConfigError("missing checkpoint " + path + " (run the training command first)");
    }
    return papc::load_network(path);
}

struct Thresholds {
    double papc = 0.0;
    double baseline = 0.0;
};

Thresholds load_thresholds(const std::string& out_dir) {
    std::string path = path_in(out_dir, "thresholds.json");
    if (!fs::exists(path)) {
        throw papc::ConfigError("missing " + path + " (run `papc calibrate` first)");
    }
    std::ifstream in(path);
    json j = json::parse(in, nullptr, true);
    Thresholds t;
    t.papc = j.at("papc").at("threshold").get<double>();
    t.baseline = j.at("baseline").at("threshold").get<double>();
    return t;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"papc: attention-based perception pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed_override = 0;
    bool quick = false;
    app.add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, "output directory (default: out)");
    CLI::Option* seed_opt = app.add_option("--seed", seed_override, "override the config seed");
    app.add_flag("--quick", quick, "small-budget profile for smoke runs");

    CLI::App* cmd_track = app.add_subcommand("gen-track", "write the track to track.json");
    CLI::App* cmd_data = app.add_subcommand("gen-data", "generate the expert dataset");
    CLI::App* cmd_mpnet = app.add_subcommand("train-mpnet", "train the trajectory regressor");
    bool direct_variant = false;
    cmd_mpnet->add_flag("--direct", direct_variant,
                        "regress focal points directly instead of spline coefficients");
    CLI::App* cmd_macula = app.add_subcommand("train-macula", "train the ROI steering head");
    CLI::App* cmd_base = app.add_subcommand("train-baseline", "train the full-image steering head");
    CLI::App* cmd_cal = app.add_subcommand("calibrate", "calibrate detection thresholds");
    CLI::App* cmd_eval = app.add_subcommand("evaluate", "run one obstacle episode");
    std::string method = "papc";
    int obstacle_override = -1;
    cmd_eval->add_option("--method", method, "papc|baseline")
        ->check(CLI::IsMember({"papc", "baseline"}));
    cmd_eval->add_option("--obstacle", obstacle_override, "novel obstacle index");
    CLI::App* cmd_cmp = app.add_subcommand("compare", "detection-distance comparison table");
    CLI::App* cmd_act = app.add_subcommand("dump-activations", "write pooled activation maps");
    int frame_index = 0;
    cmd_act->add_option("--frame", frame_index, "dataset frame to visualize");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        papc::RunConfig cfg;
        if (!config_path.empty()) cfg = papc::load_run_config(config_path);
        if (seed_opt->count() > 0) cfg.seed = seed_override;
        if (quick) cfg.apply_quick_profile();
        cfg.validate();

        fs::create_directories(out_dir);
        write_file(path_in(out_dir, "effective_config.json"), papc::run_config_to_json(cfg));

        std::string dataset_dir = path_in(out_dir, "dataset");

        if (cmd_track->parsed()) {
            papc::Track track = cfg.make_track();
            write_file(path_in(out_dir, "track.json"), papc::track_to_json(track));
            std::cerr << "[papc] wrote track.json: " << track.centerline.size()
                      << " waypoints, length " << track.total_length() << " m\n";
        } else if (cmd_data->parsed()) {
            papc::GenerateResult r = papc::generate_dataset(cfg, dataset_dir);
            std::cerr << "[papc] dataset: " << r.generated << " frames (" << r.skipped
                      << " skipped) in " << dataset_dir << "\n";
        } else if (cmd_mpnet->parsed()) {
            papc::Dataset data = papc::load_dataset(dataset_dir);
            papc::NetworkSpec spec = cfg.mpnet_spec();
            if (direct_variant) spec.layers.back().units = 2 * cfg.spline.n_focal;
            papc::Network net(spec);
            papc::MpnetVariant variant =
                direct_variant ? papc::MpnetVariant::kDirect : papc::MpnetVariant::kSpline;
            papc::MpnetTrainResult r = papc::train_mpnet(net, data, cfg, variant);
            std::string stem = direct_variant ? "mpnet_direct" : "mpnet";
            papc::save_network(net, path_in(out_dir, stem + ".ckpt"), cfg.mpnet.train.epochs);
            write_metrics_csv(path_in(out_dir, stem + "_metrics.csv"), r.epoch_losses);
            json eval{{"train_coeff_mse", r.train_coeff_mse},
                      {"test_coeff_mse", r.test_coeff_mse},
                      {"train_pixel_mse", r.train_pixel_mse},
                      {"test_pixel_mse", r.test_pixel_mse},
                      {"n_train", r.n_train},
                      {"n_test", r.n_test}};
            write_file(path_in(out_dir, stem + "_eval.json"), eval.dump(2) + "\n");
            std::cerr << "[papc] " << stem << ": test pixel MSE " << r.test_pixel_mse
                      << " px^2 over " << r.n_test << " held-out frames\n";
        } else if (cmd_macula->parsed()) {
            papc::Dataset data = papc::load_dataset(dataset_dir);
            papc::Network mpnet = load_ckpt(out_dir, "mpnet.ckpt");
            papc::Network net(cfg.macula_spec());
            papc::BayesTrainResult r = papc::train_macula(net, mpnet, data, cfg);
            papc::save_network(net, path_in(out_dir, "macula.ckpt"), cfg.macula.train.epochs);
            write_metrics_csv(path_in(out_dir, "macula_metrics.csv"), r.epoch_losses);
            std::cerr << "[papc] macula: steering MAE " << r.final_mae << " rad\n";
        } else if (cmd_base->parsed()) {
            papc::Dataset data = papc::load_dataset(dataset_dir);
            papc::Network net(cfg.baseline_spec());
            papc::BayesTrainResult r = papc::train_baseline(net, data, cfg);
            papc::save_network(net, path_in(out_dir, "baseline.ckpt"), cfg.baseline.train.epochs);
            write_metrics_csv(path_in(out_dir, "baseline_metrics.csv"), r.epoch_losses);
            std::cerr << "[papc] baseline: steering MAE " << r.final_mae << " rad\n";
        } else if (cmd_cal->parsed()) {
            papc::Track track = cfg.make_track();
            papc::Network mpnet = load_ckpt(out_dir, "mpnet.ckpt");
            papc::Network macula = load_ckpt(out_dir, "macula.ckpt");
            papc::Network baseline = load_ckpt(out_dir, "baseline.ckpt");
            papc::Calibration pc =
                papc::calibrate_threshold(cfg, track, papc::make_papc_perceiver(macula, mpnet, cfg));
            papc::Calibration bc = papc::calibrate_threshold(
                cfg, track, papc::make_baseline_perceiver(baseline, cfg));
            json j{{"papc",
                    {{"threshold", pc.threshold},
                     {"max_epistemic", pc.max_epistemic},
                     {"n_points", pc.n_points}}},
                   {"baseline",
                    {{"threshold", bc.threshold},
                     {"max_epistemic", bc.max_epistemic},
                     {"n_points", bc.n_points}}},
                   {"k_thr", cfg.inference.threshold_multiplier}};
            write_file(path_in(out_dir, "thresholds.json"), j.dump(2) + "\n");
            std::cerr << "[papc] thresholds: papc " << pc.threshold << ", baseline " << bc.threshold
                      << "\n";
        } else if (cmd_eval->parsed()) {
            papc::Track track = cfg.make_track();
            papc::Network mpnet = load_ckpt(out_dir, "mpnet.ckpt");
            Thresholds thr = load_thresholds(out_dir);
            papc::PerceiveFn perceive;
            papc::Network model = method == "papc" ? load_ckpt(out_dir, "macula.ckpt")
                                                   : load_ckpt(out_dir, "baseline.ckpt");
            double threshold = method == "papc" ? thr.papc : thr.baseline;
            if (method == "papc") {
                perceive = papc::make_papc_perceiver(model, mpnet, cfg);
            } else {
                perceive = papc::make_baseline_perceiver(model, cfg);
            }
            std::vector<papc::Obstacle> obstacles = cfg.novel_obstacles();
            int index = obstacle_override >= 0 ? obstacle_override : cfg.episode.obstacle_index;
            if (index < 0 || index >= static_cast<int>(obstacles.size())) {
                throw papc::ConfigError("obstacle index " + std::to_string(index) +
                                        " out of range (have " +
                                        std::to_string(obstacles.size()) + ")");
            }
            papc::Obstacle ob = obstacles[static_cast<std::size_t>(index)];
            std::array<double, 2> center = track.point_at(cfg.episode.obstacle_arc);
            ob.center_u = center[0];
            ob.center_v = center[1];
            papc::VehicleState start = papc::state_on_track(track, 0.0, cfg.mpc.target_speed);
            papc::EpisodeResult ep =
                papc::run_episode(cfg, track, {ob}, start, perceive, threshold,
                                  cfg.episode.max_steps, papc::mix_seed(cfg.seed, 0xe9a1));
            papc::write_episode_csv(ep, path_in(out_dir, "episode.csv"));
            json summary{{"method", method},
                         {"obstacle", index},
                         {"detected", ep.detected},
                         {"detection_distance", ep.detection_distance},
                         {"detection_frame", ep.detection_frame},
                         {"collided", ep.collided},
                         {"left_track", ep.left_track},
                         {"steps", ep.events.empty() ? 0 : ep.events.back().frame_index + 1}};
            write_file(path_in(out_dir, "episode_summary.json"), summary.dump(2) + "\n");
            std::cerr << "[papc] episode (" << method << "): "
                      << (ep.detected ? "detected at " + std::to_string(ep.detection_distance) + " m"
                                      : "no detection")
                      << "\n";
        } else if (cmd_cmp->parsed()) {
            papc::Track track = cfg.make_track();
            papc::Network mpnet = load_ckpt(out_dir, "mpnet.ckpt");
            papc::Network macula = load_ckpt(out_dir, "macula.ckpt");
            papc::Network baseline = load_ckpt(out_dir, "baseline.ckpt");
            Thresholds thr = load_thresholds(out_dir);
            papc::CompareOutcome outcome = papc::compare_methods(
                cfg, track, papc::make_papc_perceiver(macula, mpnet, cfg), thr.papc,
                papc::make_baseline_perceiver(baseline, cfg), thr.baseline);
            write_file(path_in(out_dir, "results.json"),
                       papc::compare_outcome_to_json(outcome, cfg));
            for (std::size_t o = 0; o < outcome.obstacle_names.size(); ++o) {
                std::cerr << "[papc] " << outcome.obstacle_names[o] << ": papc median "
                          << outcome.papc[o].median_d << " m, baseline median "
                          << outcome.baseline[o].median_d << " m\n";
            }
            std::cerr << "[papc] false positives: " << outcome.papc_false_positives << "/"
                      << outcome.obstacle_free_trials << "\n";
        } else if (cmd_act->parsed()) {
            papc::Dataset data = papc::load_dataset(dataset_dir);
            if (frame_index < 0 || frame_index >= static_cast<int>(data.frames.size())) {
                throw papc::ConfigError("frame index " + std::to_string(frame_index) +
                                        " out of range (have " +
                                        std::to_string(data.frames.size()) + ")");
            }
            papc::Network mpnet = load_ckpt(out_dir, "mpnet.ckpt");
            papc::Network macula = load_ckpt(out_dir, "macula.ckpt");
            papc::RoiStack stack = papc::rois_from_prediction(
                mpnet, data.frames[static_cast<std::size_t>(frame_index)].image, cfg);
            std::vector<std::string> paths = papc::dump_activation_maps(
                macula, papc::roi_stack_to_tensor(stack), path_in(out_dir, "activations"));
            std::cerr << "[papc] wrote " << paths.size() << " activation maps to "
                      << path_in(out_dir, "activations") << "\n";
        }
        return 0;
    } catch (const papc::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const papc::DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const papc::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
