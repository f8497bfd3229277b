#include "papc/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace papc {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_bytes(const std::string& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot open for writing: " + path);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw DatasetError("short write: " + path);
}

void write_text(const std::string& path, const std::string& text) {
    write_bytes(path, text.data(), text.size());
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string frame_name(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "frames/%s_%05d.%s", stem, i, ext);
    return buf;
}

// Projected-trajectory blob: uint16 LE count, uint16 LE 2, float32 LE (u, v) pairs.
std::vector<std::uint8_t> points_blob(const std::vector<PixelPoint>& pts) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(4 + pts.size() * 8);
    auto push16 = [&bytes](std::uint16_t v) {
        bytes.push_back(static_cast<std::uint8_t>(v & 0xff));
        bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    };
    push16(static_cast<std::uint16_t>(pts.size()));
    push16(2);
    auto push_f32 = [&bytes](float f) {
        std::uint8_t raw[4];
        std::memcpy(raw, &f, 4);
        bytes.insert(bytes.end(), raw, raw + 4);
    };
    for (const PixelPoint& p : pts) {
        push_f32(static_cast<float>(p.u));
        push_f32(static_cast<float>(p.v));
    }
    return bytes;
}

json state_to_json(const VehicleState& s) {
    return json{{"u", s.pos_u}, {"v", s.pos_v}, {"heading", s.heading},
                {"speed", s.speed}, {"t", s.timestamp}};
}

VehicleState state_from_json(const json& j) {
    VehicleState s;
    s.pos_u = j.at("u").get<double>();
    s.pos_v = j.at("v").get<double>();
    s.heading = j.at("heading").get<double>();
    s.speed = j.at("speed").get<double>();
    s.timestamp = j.at("t").get<double>();
    return s;
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

double u01(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

using LossFn = std::function<double(const std::vector<double>& out,
                                    const std::vector<double>& target,
                                    std::vector<double>* grad)>;

// Minibatch Adam over the given training indices; returns mean per-sample
// loss per epoch. Sample order and dropout draws are derived from `seed`.
std::vector<double> train_regression(Network& net, const std::vector<Tensor>& inputs,
                                     const std::vector<std::vector<double>>& targets,
                                     const std::vector<int>& train_idx, const TrainConfig& tc,
                                     std::uint64_t seed, const LossFn& loss_fn) {
    if (train_idx.empty()) throw TrainError("no training samples");
    AdamState adam(net.param_count());
    std::vector<double> params = net.flat_params();
    std::vector<double> epoch_losses;
    epoch_losses.reserve(static_cast<std::size_t>(tc.epochs));
    const std::vector<int>& out_shape = net.output_shape();
    for (int e = 0; e < tc.epochs; ++e) {
        std::vector<int> order =
            shuffled_indices(static_cast<int>(train_idx.size()),
                             mix_seed(seed, 1000 + static_cast<std::uint64_t>(e)));
        double loss_sum = 0.0;
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t batch_end = std::min(order.size(), i + static_cast<std::size_t>(tc.batch_size));
            std::vector<double> grad_acc(params.size(), 0.0);
            int batch_n = 0;
            for (; i < batch_end; ++i) {
                int idx = train_idx[static_cast<std::size_t>(order[i])];
                std::uint64_t sample_seed =
                    mix_seed(seed, 0x10000ULL + static_cast<std::uint64_t>(e) * 1000003ULL +
                                       static_cast<std::uint64_t>(idx));
                Trace trace;
                Tensor out = net.forward(inputs[static_cast<std::size_t>(idx)], ForwardMode::kTrain,
                                         sample_seed, &trace);
                std::vector<double> gout;
                double loss = loss_fn(out.data, targets[static_cast<std::size_t>(idx)], &gout);
                if (!std::isfinite(loss)) {
                    throw TrainError("non-finite loss at epoch " + std::to_string(e) + ", sample " +
                                     std::to_string(idx));
                }
                Tensor grad_out;
                grad_out.shape = out_shape;
                grad_out.data = std::move(gout);
                std::vector<double> flat = net.backward(trace, grad_out);
                for (std::size_t j = 0; j < grad_acc.size(); ++j) grad_acc[j] += flat[j];
                loss_sum += loss;
                ++batch_n;
            }
            for (double& g : grad_acc) g /= batch_n;
            adam.step(params, grad_acc, tc.learning_rate, tc.beta1, tc.beta2, tc.eps);
            net.set_flat_params(params);
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(train_idx.size()));
    }
    return epoch_losses;
}

// 90/10 split of [0, n) by seeded shuffle; tiny sets keep everything in train.
void split_train_test(int n, std::uint64_t seed, std::vector<int>* train, std::vector<int>* test) {
    std::vector<int> order = shuffled_indices(n, seed);
    int n_test = n >= 5 ? std::max(1, n / 10) : 0;
    test->assign(order.begin(), order.begin() + n_test);
    train->assign(order.begin() + n_test, order.end());
    std::sort(train->begin(), train->end());
    std::sort(test->begin(), test->end());
}

int thread_cap(std::size_t n_jobs) {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("PAPC_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) n = v;
    }
    return std::min<int>(n, static_cast<int>(std::max<std::size_t>(1, n_jobs)));
}

}  // namespace

Tensor image_to_tensor(const Image& img) {
    img.validate();
    Tensor t = Tensor::zeros({img.height, img.width, 3});
    for (std::size_t i = 0; i < img.data.size(); ++i) t.data[i] = img.data[i] / 255.0;
    return t;
}

Tensor downsample_half_tensor(const Image& img) {
    img.validate();
    if (img.height % 2 != 0 || img.width % 2 != 0) {
        throw DomainError("downsample_half_tensor: image dimensions must be even");
    }
    int h = img.height / 2;
    int w = img.width / 2;
    Tensor t = Tensor::zeros({h, w, 3});
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                double sum = img.at(2 * r, 2 * c, ch) + img.at(2 * r, 2 * c + 1, ch) +
                             img.at(2 * r + 1, 2 * c, ch) + img.at(2 * r + 1, 2 * c + 1, ch);
                t.data[static_cast<std::size_t>((r * w + c) * 3 + ch)] = sum / 4.0 / 255.0;
            }
        }
    }
    return t;
}

Tensor roi_stack_to_tensor(const RoiStack& stack) {
    stack.validate();
    Tensor t = Tensor::zeros({stack.n_roi, kRoiSize, kRoiSize, 3});
    for (std::size_t i = 0; i < stack.data.size(); ++i) t.data[i] = stack.data[i];
    return t;
}

CameraPose camera_pose_for(const RunConfig& cfg, const VehicleState& state) {
    return mount_pose(state, cfg.camera.height, cfg.camera.mount_pitch_rad());
}

VehicleState state_on_track_offset(const Track& track, double s, double lateral, double speed) {
    std::array<double, 2> p = track.point_at(s);
    std::array<double, 2> tan = track.tangent_at(s);
    VehicleState st;
    st.pos_u = p[0] - tan[1] * lateral;
    st.pos_v = p[1] + tan[0] * lateral;
    st.heading = std::atan2(tan[1], tan[0]);
    st.speed = speed;
    st.timestamp = 0.0;
    return st;
}

GenerateResult generate_dataset(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    Track track = cfg.make_track();
    Scene scene;
    scene.track = track;
    scene.validate();
    const CameraIntrinsics& intr = cfg.camera.intrinsics;
    auto pose_of = [&cfg](const VehicleState& s) { return camera_pose_for(cfg, s); };

    fs::create_directories(fs::path(out_dir) / "frames");

    VehicleState state = state_on_track(track, 0.0, cfg.mpc.target_speed);
    std::optional<PlannedTrajectory> warm;
    ControlInput held;  // applied when a solve fails, to keep the vehicle moving
    std::vector<std::string> index_lines;
    std::ostringstream log;
    GenerateResult result;
    result.requested = cfg.dataset.n_frames;

    for (int k = 0; k < cfg.dataset.n_frames; ++k) {
        std::optional<PlannedTrajectory> plan;
        try {
            plan = solve_ilqg(cfg.mpc, state, track, warm ? &*warm : nullptr);
        } catch (const SolverError& e) {
            ++result.skipped;
            log << "frame " << k << " skipped (solver): " << e.what() << "\n";
            warm.reset();
            state = step_dynamics(cfg.mpc.vehicle, state, held, cfg.mpc.dt);
            continue;
        }
        try {
            std::vector<PixelPoint> points = project_trajectory(plan->states, pose_of, intr);
            FitResult fitted = fit(points, cfg.spline.n_ctrl, cfg.spline.degree);
            Image img = render(scene, pose_of(state), intr);

            std::string img_rel = frame_name("img", k, "ppm");
            std::string pts_rel = frame_name("traj", k, "bin");
            write_image(img, (fs::path(out_dir) / img_rel).string());
            std::vector<std::uint8_t> blob = points_blob(points);
            write_bytes((fs::path(out_dir) / pts_rel).string(), blob.data(), blob.size());

            json planned;
            planned["cost"] = plan->cost;
            planned["converged"] = plan->converged;
            planned["value_reduction"] = plan->value_reduction;
            json pstates = json::array();
            for (const VehicleState& s : plan->states) {
                pstates.push_back({s.pos_u, s.pos_v, s.heading, s.speed, s.timestamp});
            }
            planned["states"] = std::move(pstates);
            json pcontrols = json::array();
            for (const ControlInput& c : plan->controls) {
                pcontrols.push_back({c.steering, c.throttle});
            }
            planned["controls"] = std::move(pcontrols);

            json line;
            line["i"] = k;
            line["image"] = img_rel;
            line["points"] = pts_rel;
            line["state"] = state_to_json(state);
            line["control"] = {{"steering", plan->controls[0].steering},
                               {"throttle", plan->controls[0].throttle}};
            line["spline"] = json::parse(spline_to_json(fitted.spline));
            line["fit_residual"] = fitted.max_residual;
            line["planned"] = std::move(planned);
            index_lines.push_back(line.dump());
            ++result.generated;
        } catch (const BehindCameraError& e) {
            ++result.skipped;
            log << "frame " << k << " skipped (projection): " << e.what() << "\n";
        } catch (const GeometryError& e) {
            ++result.skipped;
            log << "frame " << k << " skipped (fit): " << e.what() << "\n";
        }
        held = plan->controls[0];
        state = plan->states[1];
        PlannedTrajectory shifted = *plan;
        shifted.controls.erase(shifted.controls.begin());
        shifted.controls.push_back(shifted.controls.back());
        warm = std::move(shifted);
    }

    std::ostringstream index;
    for (const std::string& line : index_lines) index << line << "\n";
    write_text((fs::path(out_dir) / "index.jsonl").string(), index.str());
    std::ostringstream header;
    header << "generated " << result.generated << " skipped " << result.skipped << " of "
           << result.requested << "\n";
    write_text((fs::path(out_dir) / "generation_log.txt").string(), header.str() + log.str());

    if (result.skipped > cfg.dataset.max_skip_fraction * result.requested) {
        throw DatasetError("dataset generation skipped " + std::to_string(result.skipped) + " of " +
                           std::to_string(result.requested) + " frames (limit " +
                           fmt_double(cfg.dataset.max_skip_fraction * 100.0) + "%)");
    }
    return result;
}

Dataset load_dataset(const std::string& dir) {
    std::string text = read_text((fs::path(dir) / "index.jsonl").string());
    Dataset data;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DatasetError("index.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            Frame f;
            f.image = read_image((fs::path(dir) / j.at("image").get<std::string>()).string());
            f.vehicle_state = state_from_json(j.at("state"));
            f.expert_control.steering = j.at("control").at("steering").get<double>();
            f.expert_control.throttle = j.at("control").at("throttle").get<double>();
            f.spline_target = spline_from_json(j.at("spline").dump());
            const json& planned = j.at("planned");
            f.planned.cost = planned.at("cost").get<double>();
            f.planned.converged = planned.at("converged").get<bool>();
            f.planned.value_reduction = planned.at("value_reduction").get<double>();
            for (const json& s : planned.at("states")) {
                f.planned.states.push_back({s.at(0).get<double>(), s.at(1).get<double>(),
                                            s.at(2).get<double>(), s.at(3).get<double>(),
                                            s.at(4).get<double>()});
            }
            for (const json& c : planned.at("controls")) {
                f.planned.controls.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
            }
            data.frames.push_back(std::move(f));
        } catch (const json::exception& e) {
            throw DatasetError("index.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (data.frames.empty()) throw DatasetError("empty dataset index: " + dir);
    return data;
}

std::vector<PixelPoint> frame_focal_points(const Frame& frame, const RunConfig& cfg) {
    return sample_focal_points(frame.spline_target, cfg.spline.n_focal);
}

MpnetTrainResult train_mpnet(Network& net, const Dataset& data, const RunConfig& cfg,
                             MpnetVariant variant) {
    if (data.frames.empty()) throw TrainError("train_mpnet: empty dataset");
    int out_dim = variant == MpnetVariant::kSpline ? 2 * cfg.spline.n_ctrl : 2 * cfg.spline.n_focal;
    if (net.output_shape() != std::vector<int>{out_dim}) {
        throw TrainError("train_mpnet: network output " + shape_string(net.output_shape()) +
                         ", expected (" + std::to_string(out_dim) + ")");
    }
    int n = static_cast<int>(data.frames.size());
    std::vector<Tensor> inputs;
    std::vector<std::vector<double>> targets;
    inputs.reserve(static_cast<std::size_t>(n));
    targets.reserve(static_cast<std::size_t>(n));
    for (const Frame& f : data.frames) {
        inputs.push_back(image_to_tensor(f.image));
        if (variant == MpnetVariant::kSpline) {
            targets.push_back(f.spline_target.coefficients());
        } else {
            std::vector<double> t;
            for (const PixelPoint& p : frame_focal_points(f, cfg)) {
                t.push_back(p.u);
                t.push_back(p.v);
            }
            targets.push_back(std::move(t));
        }
    }

    std::uint64_t salt = variant == MpnetVariant::kSpline ? 11 : 12;
    std::uint64_t seed = mix_seed(cfg.seed, mix_seed(cfg.mpnet.train.seed, salt));
    std::vector<int> train_idx;
    std::vector<int> test_idx;
    split_train_test(n, mix_seed(seed, 1), &train_idx, &test_idx);

    LossFn loss_fn = [](const std::vector<double>& out, const std::vector<double>& target,
                        std::vector<double>* grad) {
        *grad = mse_loss_grad(out, target);
        return mse_loss(out, target);
    };

    MpnetTrainResult result;
    result.epoch_losses =
        train_regression(net, inputs, targets, train_idx, cfg.mpnet.train, seed, loss_fn);
    result.n_train = static_cast<int>(train_idx.size());
    result.n_test = static_cast<int>(test_idx.size());

    auto evaluate_split = [&](const std::vector<int>& idx, double* coeff_mse, double* pixel_mse) {
        if (idx.empty()) {
            *coeff_mse = 0.0;
            *pixel_mse = 0.0;
            return;
        }
        double coeff_sum = 0.0;
        double pixel_sum = 0.0;
        for (int i : idx) {
            Tensor out = net.forward(inputs[static_cast<std::size_t>(i)], ForwardMode::kDeterministic);
            coeff_sum += mse_loss(out.data, targets[static_cast<std::size_t>(i)]);
            std::vector<PixelPoint> pred;
            if (variant == MpnetVariant::kSpline) {
                PixelSpline sp = PixelSpline::from_coefficients(out.data, cfg.spline.degree);
                pred = sample_focal_points(sp, cfg.spline.n_focal);
            } else {
                for (std::size_t c = 0; c + 1 < out.data.size(); c += 2) {
                    pred.push_back({out.data[c], out.data[c + 1]});
                }
            }
            std::vector<PixelPoint> truth =
                frame_focal_points(data.frames[static_cast<std::size_t>(i)], cfg);
            double sum = 0.0;
            for (std::size_t p = 0; p < truth.size(); ++p) {
                double du = pred[p].u - truth[p].u;
                double dv = pred[p].v - truth[p].v;
                sum += du * du + dv * dv;
            }
            pixel_sum += sum / static_cast<double>(truth.size());
        }
        *coeff_mse = coeff_sum / static_cast<double>(idx.size());
        *pixel_mse = pixel_sum / static_cast<double>(idx.size());
    };
    evaluate_split(train_idx, &result.train_coeff_mse, &result.train_pixel_mse);
    if (test_idx.empty()) {
        result.test_coeff_mse = result.train_coeff_mse;
        result.test_pixel_mse = result.train_pixel_mse;
    } else {
        evaluate_split(test_idx, &result.test_coeff_mse, &result.test_pixel_mse);
    }
    return result;
}

RoiStack rois_from_prediction(const Network& mpnet, const Image& img, const RunConfig& cfg) {
    const CameraIntrinsics& intr = cfg.camera.intrinsics;
    Tensor out = mpnet.forward(image_to_tensor(img), ForwardMode::kDeterministic);
    PixelSpline spline = PixelSpline::from_coefficients(out.data, cfg.spline.degree);
    std::vector<PixelPoint> focal = sample_focal_points(spline, cfg.spline.n_focal);
    std::vector<ImagePoint> clamped;
    clamped.reserve(focal.size());
    for (const PixelPoint& p : focal) {
        ImagePoint ip = to_image_frame(p, intr);
        ip.col = std::clamp(ip.col, 0.0, static_cast<double>(intr.image_w - 1));
        ip.row = std::clamp(ip.row, 0.0, static_cast<double>(intr.image_h - 1));
        clamped.push_back(ip);
    }
    RoiWindowSet windows = build_roi_windows(clamped, cfg.roi.margin);
    if (windows.degenerate) {
        // All focal points coincided: attend the fovea tile n_focal times so
        // the stack keeps its trained shape.
        RoiWindow fovea = windows.windows.back();
        windows.windows.assign(static_cast<std::size_t>(cfg.spline.n_focal), fovea);
    }
    return crop_resize_stack(img, windows);
}

namespace {

BayesTrainResult train_bayes_head(Network& net, const std::vector<Tensor>& inputs,
                                  const std::vector<double>& steering, const TrainConfig& tc,
                                  std::uint64_t seed) {
    if (net.output_shape() != std::vector<int>{2}) {
        throw TrainError("expected a (mu, s) head, got output " + shape_string(net.output_shape()));
    }
    std::vector<std::vector<double>> targets;
    targets.reserve(steering.size());
    for (double y : steering) targets.push_back({y});
    std::vector<int> train_idx(inputs.size());
    std::iota(train_idx.begin(), train_idx.end(), 0);

    LossFn loss_fn = [](const std::vector<double>& out, const std::vector<double>& target,
                        std::vector<double>* grad) {
        std::vector<double> y{target[0]};
        std::vector<double> mu{out[0]};
        std::vector<double> s{out[1]};
        std::vector<double> d_mu;
        std::vector<double> d_s;
        heteroscedastic_loss_grad(y, mu, s, &d_mu, &d_s);
        *grad = {d_mu[0], d_s[0]};
        return heteroscedastic_loss(y, mu, s);
    };

    BayesTrainResult result;
    result.epoch_losses = train_regression(net, inputs, targets, train_idx, tc, seed, loss_fn);
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor out = net.forward(inputs[i], ForwardMode::kDeterministic);
        abs_sum += std::abs(out.data[0] - steering[i]);
    }
    result.final_mae = abs_sum / static_cast<double>(inputs.size());
    return result;
}

}  // namespace

BayesTrainResult train_macula(Network& net, const Network& mpnet, const Dataset& data,
                              const RunConfig& cfg) {
    if (data.frames.empty()) throw TrainError("train_macula: empty dataset");
    std::vector<Tensor> inputs;
    std::vector<double> steering;
    inputs.reserve(data.frames.size());
    steering.reserve(data.frames.size());
    for (const Frame& f : data.frames) {
        inputs.push_back(roi_stack_to_tensor(rois_from_prediction(mpnet, f.image, cfg)));
        steering.push_back(f.expert_control.steering);
    }
    std::uint64_t seed = mix_seed(cfg.seed, mix_seed(cfg.macula.train.seed, 13));
    return train_bayes_head(net, inputs, steering, cfg.macula.train, seed);
}

BayesTrainResult train_baseline(Network& net, const Dataset& data, const RunConfig& cfg) {
    if (data.frames.empty()) throw TrainError("train_baseline: empty dataset");
    std::vector<Tensor> inputs;
    std::vector<double> steering;
    inputs.reserve(data.frames.size());
    steering.reserve(data.frames.size());
    for (const Frame& f : data.frames) {
        inputs.push_back(downsample_half_tensor(f.image));
        steering.push_back(f.expert_control.steering);
    }
    std::uint64_t seed = mix_seed(cfg.seed, mix_seed(cfg.baseline.train.seed, 14));
    return train_bayes_head(net, inputs, steering, cfg.baseline.train, seed);
}

PerceiveFn make_papc_perceiver(const Network& macula, const Network& mpnet, const RunConfig& cfg) {
    return [&macula, &mpnet, cfg](const Image& img, std::uint64_t seed) {
        RoiStack stack = rois_from_prediction(mpnet, img, cfg);
        return mc_predict(macula, roi_stack_to_tensor(stack), cfg.inference.n_mc, seed);
    };
}

PerceiveFn make_baseline_perceiver(const Network& baseline, const RunConfig& cfg) {
    return [&baseline, cfg](const Image& img, std::uint64_t seed) {
        return mc_predict(baseline, downsample_half_tensor(img), cfg.inference.n_mc, seed);
    };
}

EpisodeResult run_episode(const RunConfig& cfg, const Track& track,
                          const std::vector<Obstacle>& obstacles, const VehicleState& start,
                          const PerceiveFn& perceive, double threshold, int max_steps,
                          std::uint64_t seed) {
    if (max_steps < 1) throw DomainError("run_episode: max_steps must be >= 1");
    Scene scene;
    scene.track = track;
    scene.obstacles = obstacles;
    scene.validate();
    const CameraIntrinsics& intr = cfg.camera.intrinsics;
    const BicycleParams& veh = cfg.mpc.vehicle;

    EpisodeResult res;
    VehicleState state = start;
    double steering_cmd = 0.0;
    for (int k = 0; k < max_steps; ++k) {
        if (k % cfg.inference.inference_every == 0) {
            Image img = render(scene, camera_pose_for(cfg, state), intr);
            ControlDistribution dist = perceive(img, mix_seed(seed, static_cast<std::uint64_t>(k)));
            double d_obs = -1.0;
            for (const Obstacle& ob : obstacles) {
                double d = distance_to_obstacle(state, ob);
                d_obs = d_obs < 0.0 ? d : std::min(d_obs, d);
            }
            bool detected = dist.epistemic_var > threshold;
            res.events.push_back({k, dist.epistemic_var, threshold, d_obs, detected});
            res.times.push_back(state.timestamp);
            res.aleatoric.push_back(dist.aleatoric_var);
            res.max_epistemic = std::max(res.max_epistemic, dist.epistemic_var);
            steering_cmd = std::clamp(dist.mean, -veh.steer_max, veh.steer_max);
            if (detected) {
                // Emergency stop: record the range and end the episode here.
                res.detected = true;
                res.detection_frame = k;
                res.detection_distance = d_obs >= 0.0 ? d_obs : 0.0;
                break;
            }
        }
        double accel = std::clamp(2.0 * (cfg.mpc.target_speed - state.speed), -veh.accel_max,
                                  veh.accel_max);
        state = step_dynamics(veh, state, {steering_cmd, accel}, cfg.mpc.dt);
        bool hit = false;
        for (const Obstacle& ob : obstacles) {
            if (distance_to_obstacle(state, ob) <= 0.0) hit = true;
        }
        if (hit) {
            res.collided = true;
            break;
        }
        TrackFrame tf = track_frame(track, state.pos_u, state.pos_v);
        if (std::abs(tf.lateral_offset) > track.half_width + 2.0) {
            res.left_track = true;
            break;
        }
    }
    res.final_state = state;
    return res;
}

void write_episode_csv(const EpisodeResult& episode, const std::string& path) {
    std::ostringstream out;
    out << "t,epistemic_var,aleatoric_var,distance_to_obstacle,detected\n";
    for (std::size_t i = 0; i < episode.events.size(); ++i) {
        const DetectionEvent& ev = episode.events[i];
        out << fmt_double(episode.times[i]) << "," << fmt_double(ev.epistemic_var) << ","
            << fmt_double(episode.aleatoric[i]) << "," << fmt_double(ev.distance_to_obstacle) << ","
            << (ev.detected ? 1 : 0) << "\n";
    }
    write_text(path, out.str());
}

Calibration calibrate_threshold(const RunConfig& cfg, const Track& track,
                                const PerceiveFn& perceive) {
    VehicleState start = state_on_track(track, 0.0, cfg.mpc.target_speed);
    EpisodeResult ep =
        run_episode(cfg, track, {}, start, perceive, std::numeric_limits<double>::infinity(),
                    cfg.inference.calibration_steps, mix_seed(cfg.seed, 0xca11b));
    if (ep.events.empty()) throw DatasetError("calibration episode produced no inference steps");
    Calibration cal;
    cal.max_epistemic = ep.max_epistemic;
    cal.threshold = cfg.inference.threshold_multiplier * ep.max_epistemic;
    cal.n_points = static_cast<int>(ep.events.size());
    return cal;
}

CompareOutcome compare_methods(const RunConfig& cfg, const Track& track, const PerceiveFn& papc,
                               double papc_threshold, const PerceiveFn& baseline,
                               double baseline_threshold) {
    std::vector<Obstacle> obstacles = cfg.novel_obstacles();
    if (obstacles.empty()) throw DomainError("compare_methods: no novel obstacles configured");
    int n_obs = static_cast<int>(obstacles.size());
    int n_trials = cfg.episode.n_trials;

    CompareOutcome outcome;
    bool builtin = cfg.obstacle_files.empty() && n_obs == 3;
    for (int o = 0; o < n_obs; ++o) {
        if (builtin) {
            outcome.obstacle_names.push_back(o == 0 ? "tall_box" : o == 1 ? "wide_box" : "small_box");
        } else {
            outcome.obstacle_names.push_back("obstacle_" + std::to_string(o));
        }
    }
    outcome.papc.resize(static_cast<std::size_t>(n_obs));
    outcome.baseline.resize(static_cast<std::size_t>(n_obs));
    outcome.obstacle_free_trials = n_trials;

    // Jobs: per obstacle x trial plus one obstacle-free sweep (obstacle = -1).
    struct Job {
        int obstacle;
        int trial;
    };
    std::vector<Job> jobs;
    for (int o = 0; o < n_obs; ++o) {
        for (int t = 0; t < n_trials; ++t) jobs.push_back({o, t});
    }
    for (int t = 0; t < n_trials; ++t) jobs.push_back({-1, t});

    std::vector<double> papc_dist(static_cast<std::size_t>(n_obs * n_trials), 0.0);
    std::vector<double> base_dist(static_cast<std::size_t>(n_obs * n_trials), 0.0);
    std::vector<char> false_pos(static_cast<std::size_t>(n_trials), 0);
    std::vector<std::string> errors(jobs.size());

    auto run_job = [&](const Job& job) {
        std::uint64_t trial_seed =
            mix_seed(cfg.seed, 0xc0000ULL + static_cast<std::uint64_t>(job.obstacle + 1) * 1000ULL +
                                   static_cast<std::uint64_t>(job.trial));
        std::mt19937_64 rng(trial_seed);
        double arc = u01(rng) * 3.0;
        double lateral = (u01(rng) * 2.0 - 1.0) * 0.5;
        VehicleState start = state_on_track_offset(track, arc, lateral, cfg.mpc.target_speed);
        if (job.obstacle < 0) {
            EpisodeResult ep = run_episode(cfg, track, {}, start, papc, papc_threshold,
                                           cfg.episode.max_steps, mix_seed(trial_seed, 3));
            false_pos[static_cast<std::size_t>(job.trial)] = ep.detected ? 1 : 0;
            return;
        }
        Obstacle ob = obstacles[static_cast<std::size_t>(job.obstacle)];
        std::array<double, 2> center = track.point_at(arc + cfg.episode.obstacle_arc);
        ob.center_u = center[0];
        ob.center_v = center[1];
        std::size_t slot = static_cast<std::size_t>(job.obstacle * n_trials + job.trial);
        EpisodeResult papc_ep = run_episode(cfg, track, {ob}, start, papc, papc_threshold,
                                            cfg.episode.max_steps, mix_seed(trial_seed, 1));
        papc_dist[slot] = papc_ep.detected ? papc_ep.detection_distance : 0.0;
        EpisodeResult base_ep = run_episode(cfg, track, {ob}, start, baseline, baseline_threshold,
                                            cfg.episode.max_steps, mix_seed(trial_seed, 2));
        base_dist[slot] = base_ep.detected ? base_ep.detection_distance : 0.0;
    };

    int n_threads = thread_cap(jobs.size());
    if (n_threads <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            try {
                run_job(jobs[i]);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        workers.reserve(static_cast<std::size_t>(n_threads));
        for (int w = 0; w < n_threads; ++w) {
            workers.emplace_back([&]() {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) return;
                    try {
                        run_job(jobs[i]);
                    } catch (const std::exception& e) {
                        errors[i] = e.what();
                    }
                }
            });
        }
        for (std::thread& w : workers) w.join();
    }
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (!errors[i].empty()) {
            throw Error("compare trial (obstacle " + std::to_string(jobs[i].obstacle) + ", trial " +
                        std::to_string(jobs[i].trial) + ") failed: " + errors[i]);
        }
    }

    auto fill_stats = [n_trials](MethodStats* stats, const std::vector<double>& flat, int o) {
        stats->distances.assign(flat.begin() + o * n_trials, flat.begin() + (o + 1) * n_trials);
        stats->min_d = *std::min_element(stats->distances.begin(), stats->distances.end());
        stats->max_d = *std::max_element(stats->distances.begin(), stats->distances.end());
        stats->avg_d = std::accumulate(stats->distances.begin(), stats->distances.end(), 0.0) /
                       static_cast<double>(n_trials);
        stats->median_d = median_of(stats->distances);
    };
    for (int o = 0; o < n_obs; ++o) {
        fill_stats(&outcome.papc[static_cast<std::size_t>(o)], papc_dist, o);
        fill_stats(&outcome.baseline[static_cast<std::size_t>(o)], base_dist, o);
    }
    outcome.papc_false_positives = 0;
    for (char f : false_pos) outcome.papc_false_positives += f;
    return outcome;
}

std::string compare_outcome_to_json(const CompareOutcome& outcome, const RunConfig& cfg) {
    json root;
    root["seed"] = cfg.seed;
    root["n_trials"] = cfg.episode.n_trials;
    root["k_thr"] = cfg.inference.threshold_multiplier;
    root["false_positives"] = {{"papc", outcome.papc_false_positives},
                               {"trials", outcome.obstacle_free_trials}};
    json obstacles = json::object();
    for (std::size_t o = 0; o < outcome.obstacle_names.size(); ++o) {
        auto method_json = [](const MethodStats& s) {
            return json{{"min", s.min_d},
                        {"avg", s.avg_d},
                        {"max", s.max_d},
                        {"median", s.median_d},
                        {"trials", s.distances}};
        };
        obstacles[outcome.obstacle_names[o]] = {{"papc", method_json(outcome.papc[o])},
                                                {"baseline", method_json(outcome.baseline[o])}};
    }
    root["obstacles"] = std::move(obstacles);
    return root.dump(2) + "\n";
}

std::vector<std::string> dump_activation_maps(const Network& macula, const Tensor& roi_input,
                                              const std::string& out_dir) {
    Trace trace;
    macula.forward(roi_input, ForwardMode::kDeterministic, 0, &trace);
    fs::create_directories(out_dir);
    std::vector<std::string> paths;
    int pool_ordinal = 0;
    for (std::size_t li = 0; li < macula.layer_count(); ++li) {
        if (macula.layer(li).kind() != "maxpool3d") continue;
        ++pool_ordinal;
        const Tensor& act = macula.activation(trace, li);
        if (act.shape.size() != 4) {
            throw DomainError("maxpool3d activation has shape " + shape_string(act.shape));
        }
        int depth = act.shape[0];
        int h = act.shape[1];
        int w = act.shape[2];
        int ch = act.shape[3];
        for (int d = 0; d < depth; ++d) {
            std::vector<double> map(static_cast<std::size_t>(h * w), 0.0);
            double lo = std::numeric_limits<double>::infinity();
            double hi = -std::numeric_limits<double>::infinity();
            for (int r = 0; r < h; ++r) {
                for (int c = 0; c < w; ++c) {
                    double sum = 0.0;
                    for (int k = 0; k < ch; ++k) {
                        sum += act.data[static_cast<std::size_t>(((d * h + r) * w + c) * ch + k)];
                    }
                    double mean = sum / ch;
                    map[static_cast<std::size_t>(r * w + c)] = mean;
                    lo = std::min(lo, mean);
                    hi = std::max(hi, mean);
                }
            }
            Image img = make_image(h, w);
            for (int r = 0; r < h; ++r) {
                for (int c = 0; c < w; ++c) {
                    double v = map[static_cast<std::size_t>(r * w + c)];
                    std::uint8_t g = 0;
                    if (hi > lo) {
                        g = static_cast<std::uint8_t>(std::lround((v - lo) / (hi - lo) * 255.0));
                    }
                    img.at(r, c, 0) = g;
                    img.at(r, c, 1) = g;
                    img.at(r, c, 2) = g;
                }
            }
            char name[64];
            std::snprintf(name, sizeof name, "pool%d_roi%d.ppm", pool_ordinal, d);
            std::string path = (fs::path(out_dir) / name).string();
            write_image(img, path);
            paths.push_back(path);
        }
    }
    if (pool_ordinal == 0) throw DomainError("network has no maxpool3d layers");
    return paths;
}

double median_of(std::vector<double> values) {
    if (values.empty()) throw DomainError("median of empty set");
    std::sort(values.begin(), values.end());
    std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace papc
