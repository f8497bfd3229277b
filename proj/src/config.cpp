#include "papc/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace papc {

using json = nlohmann::json;

double CameraConfig::mount_pitch_rad() const { return mount_pitch_deg * kPi / 180.0; }

namespace {

/// Strict accessor for one JSON object: typed getters with schema defaults,
/// unknown keys rejected with their full path.
class Section {
  public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    double number(const char* key, double def) {
        used_.insert(key);
        if (!j_.contains(key)) return def;
        if (!j_[key].is_number()) throw ConfigError(path_ + "." + key + ": expected a number");
        return j_[key].get<double>();
    }

    int integer(const char* key, int def) {
        used_.insert(key);
        if (!j_.contains(key)) return def;
        if (!j_[key].is_number_integer())
            throw ConfigError(path_ + "." + key + ": expected an integer");
        return j_[key].get<int>();
    }

    std::uint64_t u64(const char* key, std::uint64_t def) {
        used_.insert(key);
        if (!j_.contains(key)) return def;
        if (!j_[key].is_number_unsigned() && !j_[key].is_number_integer())
            throw ConfigError(path_ + "." + key + ": expected an unsigned integer");
        return j_[key].get<std::uint64_t>();
    }

    std::string str(const char* key, std::string def) {
        used_.insert(key);
        if (!j_.contains(key)) return def;
        if (!j_[key].is_string()) throw ConfigError(path_ + "." + key + ": expected a string");
        return j_[key].get<std::string>();
    }

    std::vector<std::string> str_list(const char* key) {
        used_.insert(key);
        std::vector<std::string> out;
        if (!j_.contains(key)) return out;
        if (!j_[key].is_array())
            throw ConfigError(path_ + "." + key + ": expected an array of strings");
        for (const auto& e : j_[key]) {
            if (!e.is_string())
                throw ConfigError(path_ + "." + key + ": expected an array of strings");
            out.push_back(e.get<std::string>());
        }
        return out;
    }

    json object(const char* key) {
        used_.insert(key);
        if (!j_.contains(key)) return json::object();
        if (!j_[key].is_object()) throw ConfigError(path_ + "." + key + ": expected an object");
        return j_[key];
    }

    void require(const char* key) const {
        if (!j_.contains(key))
            throw ConfigError("missing required key: " +
                              (path_.empty() ? std::string(key) : path_ + "." + key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key()))
                throw ConfigError("unknown key: " +
                                  (path_.empty() ? it.key() : path_ + "." + it.key()));
    }

  private:
    json j_;
    std::string path_;
    std::set<std::string> used_;
};

TrainConfig parse_train(const json& j, const std::string& path, TrainConfig def) {
    Section s(j, path);
    def.learning_rate = s.number("learning_rate", def.learning_rate);
    def.batch_size = s.integer("batch_size", def.batch_size);
    def.epochs = s.integer("epochs", def.epochs);
    def.beta1 = s.number("beta1", def.beta1);
    def.beta2 = s.number("beta2", def.beta2);
    def.eps = s.number("eps", def.eps);
    def.seed = s.u64("seed", def.seed);
    s.finish();
    return def;
}

json train_to_json(const TrainConfig& t) {
    json j;
    j["learning_rate"] = t.learning_rate;
    j["batch_size"] = t.batch_size;
    j["epochs"] = t.epochs;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["eps"] = t.eps;
    j["seed"] = t.seed;
    return j;
}

void check(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }

    RunConfig cfg;
    Section root(j, "");
    root.require("seed");
    cfg.seed = root.u64("seed", 0);

    {
        Section s(root.object("track"), "track");
        cfg.track.file = s.str("file", cfg.track.file);
        cfg.track.straight_length = s.number("straight_length", cfg.track.straight_length);
        cfg.track.radius = s.number("radius", cfg.track.radius);
        cfg.track.half_width = s.number("half_width", cfg.track.half_width);
        cfg.track.spacing = s.number("spacing", cfg.track.spacing);
        s.finish();
    }
    {
        Section s(root.object("camera"), "camera");
        cfg.camera.intrinsics.focal_length =
            s.number("focal_length", cfg.camera.intrinsics.focal_length);
        cfg.camera.intrinsics.offset_x = s.number("offset_x", cfg.camera.intrinsics.offset_x);
        cfg.camera.intrinsics.offset_y = s.number("offset_y", cfg.camera.intrinsics.offset_y);
        cfg.camera.intrinsics.image_h = s.integer("image_h", cfg.camera.intrinsics.image_h);
        cfg.camera.intrinsics.image_w = s.integer("image_w", cfg.camera.intrinsics.image_w);
        cfg.camera.intrinsics.z_near = s.number("z_near", cfg.camera.intrinsics.z_near);
        cfg.camera.height = s.number("height", cfg.camera.height);
        cfg.camera.mount_pitch_deg = s.number("mount_pitch_deg", cfg.camera.mount_pitch_deg);
        s.finish();
    }
    {
        Section s(root.object("mpc"), "mpc");
        cfg.mpc.horizon_steps = s.integer("horizon_steps", cfg.mpc.horizon_steps);
        cfg.mpc.dt = s.number("dt", cfg.mpc.dt);
        cfg.mpc.weight_center = s.number("weight_center", cfg.mpc.weight_center);
        cfg.mpc.weight_speed = s.number("weight_speed", cfg.mpc.weight_speed);
        cfg.mpc.weight_steer = s.number("weight_steer", cfg.mpc.weight_steer);
        cfg.mpc.weight_throttle = s.number("weight_throttle", cfg.mpc.weight_throttle);
        cfg.mpc.weight_center_terminal =
            s.number("weight_center_terminal", cfg.mpc.weight_center_terminal);
        cfg.mpc.weight_speed_terminal =
            s.number("weight_speed_terminal", cfg.mpc.weight_speed_terminal);
        cfg.mpc.target_speed = s.number("target_speed", cfg.mpc.target_speed);
        Section v(s.object("vehicle"), "mpc.vehicle");
        cfg.mpc.vehicle.wheelbase = v.number("wheelbase", cfg.mpc.vehicle.wheelbase);
        cfg.mpc.vehicle.steer_max = v.number("steer_max", cfg.mpc.vehicle.steer_max);
        cfg.mpc.vehicle.accel_max = v.number("accel_max", cfg.mpc.vehicle.accel_max);
        cfg.mpc.vehicle.drag = v.number("drag", cfg.mpc.vehicle.drag);
        v.finish();
        s.finish();
    }
    {
        Section s(root.object("spline"), "spline");
        cfg.spline.n_ctrl = s.integer("n_ctrl", cfg.spline.n_ctrl);
        cfg.spline.degree = s.integer("degree", cfg.spline.degree);
        cfg.spline.n_focal = s.integer("n_focal", cfg.spline.n_focal);
        s.finish();
    }
    {
        Section s(root.object("roi"), "roi");
        cfg.roi.margin = s.number("margin", cfg.roi.margin);
        s.finish();
    }
    {
        Section s(root.object("dataset"), "dataset");
        cfg.dataset.n_frames = s.integer("n_frames", cfg.dataset.n_frames);
        cfg.dataset.max_skip_fraction = s.number("max_skip_fraction", cfg.dataset.max_skip_fraction);
        s.finish();
    }
    {
        Section s(root.object("mpnet"), "mpnet");
        cfg.mpnet.train = parse_train(s.object("train"), "mpnet.train", cfg.mpnet.train);
        cfg.mpnet.channels1 = s.integer("channels1", cfg.mpnet.channels1);
        cfg.mpnet.channels2 = s.integer("channels2", cfg.mpnet.channels2);
        cfg.mpnet.channels3 = s.integer("channels3", cfg.mpnet.channels3);
        cfg.mpnet.dense_units = s.integer("dense_units", cfg.mpnet.dense_units);
        s.finish();
    }
    {
        Section s(root.object("macula"), "macula");
        cfg.macula.train = parse_train(s.object("train"), "macula.train", cfg.macula.train);
        cfg.macula.channels1 = s.integer("channels1", cfg.macula.channels1);
        cfg.macula.channels2 = s.integer("channels2", cfg.macula.channels2);
        cfg.macula.dense_units = s.integer("dense_units", cfg.macula.dense_units);
        cfg.macula.dropout_p = s.number("dropout_p", cfg.macula.dropout_p);
        s.finish();
    }
    {
        Section s(root.object("baseline"), "baseline");
        cfg.baseline.train = parse_train(s.object("train"), "baseline.train", cfg.baseline.train);
        cfg.baseline.channels1 = s.integer("channels1", cfg.baseline.channels1);
        cfg.baseline.channels2 = s.integer("channels2", cfg.baseline.channels2);
        cfg.baseline.dense_units = s.integer("dense_units", cfg.baseline.dense_units);
        cfg.baseline.dropout_p = s.number("dropout_p", cfg.baseline.dropout_p);
        s.finish();
    }
    {
        Section s(root.object("inference"), "inference");
        cfg.inference.n_mc = s.integer("n_mc", cfg.inference.n_mc);
        cfg.inference.threshold_multiplier =
            s.number("threshold_multiplier", cfg.inference.threshold_multiplier);
        cfg.inference.calibration_steps =
            s.integer("calibration_steps", cfg.inference.calibration_steps);
        cfg.inference.inference_every = s.integer("inference_every", cfg.inference.inference_every);
        s.finish();
    }
    {
        Section s(root.object("episode"), "episode");
        cfg.episode.max_steps = s.integer("max_steps", cfg.episode.max_steps);
        cfg.episode.obstacle_arc = s.number("obstacle_arc", cfg.episode.obstacle_arc);
        cfg.episode.obstacle_index = s.integer("obstacle_index", cfg.episode.obstacle_index);
        cfg.episode.n_trials = s.integer("n_trials", cfg.episode.n_trials);
        s.finish();
    }
    cfg.obstacle_files = root.str_list("obstacle_files");
    root.finish();

    cfg.validate();
    return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["track"] = {{"file", cfg.track.file},
                  {"straight_length", cfg.track.straight_length},
                  {"radius", cfg.track.radius},
                  {"half_width", cfg.track.half_width},
                  {"spacing", cfg.track.spacing}};
    j["camera"] = {{"focal_length", cfg.camera.intrinsics.focal_length},
                   {"offset_x", cfg.camera.intrinsics.offset_x},
                   {"offset_y", cfg.camera.intrinsics.offset_y},
                   {"image_h", cfg.camera.intrinsics.image_h},
                   {"image_w", cfg.camera.intrinsics.image_w},
                   {"z_near", cfg.camera.intrinsics.z_near},
                   {"height", cfg.camera.height},
                   {"mount_pitch_deg", cfg.camera.mount_pitch_deg}};
    j["mpc"] = {{"horizon_steps", cfg.mpc.horizon_steps},
                {"dt", cfg.mpc.dt},
                {"weight_center", cfg.mpc.weight_center},
                {"weight_speed", cfg.mpc.weight_speed},
                {"weight_steer", cfg.mpc.weight_steer},
                {"weight_throttle", cfg.mpc.weight_throttle},
                {"weight_center_terminal", cfg.mpc.weight_center_terminal},
                {"weight_speed_terminal", cfg.mpc.weight_speed_terminal},
                {"target_speed", cfg.mpc.target_speed},
                {"vehicle",
                 {{"wheelbase", cfg.mpc.vehicle.wheelbase},
                  {"steer_max", cfg.mpc.vehicle.steer_max},
                  {"accel_max", cfg.mpc.vehicle.accel_max},
                  {"drag", cfg.mpc.vehicle.drag}}}};
    j["spline"] = {{"n_ctrl", cfg.spline.n_ctrl},
                   {"degree", cfg.spline.degree},
                   {"n_focal", cfg.spline.n_focal}};
    j["roi"] = {{"margin", cfg.roi.margin}};
    j["dataset"] = {{"n_frames", cfg.dataset.n_frames},
                    {"max_skip_fraction", cfg.dataset.max_skip_fraction}};
    j["mpnet"] = {{"train", train_to_json(cfg.mpnet.train)},
                  {"channels1", cfg.mpnet.channels1},
                  {"channels2", cfg.mpnet.channels2},
                  {"channels3", cfg.mpnet.channels3},
                  {"dense_units", cfg.mpnet.dense_units}};
    j["macula"] = {{"train", train_to_json(cfg.macula.train)},
                   {"channels1", cfg.macula.channels1},
                   {"channels2", cfg.macula.channels2},
                   {"dense_units", cfg.macula.dense_units},
                   {"dropout_p", cfg.macula.dropout_p}};
    j["baseline"] = {{"train", train_to_json(cfg.baseline.train)},
                     {"channels1", cfg.baseline.channels1},
                     {"channels2", cfg.baseline.channels2},
                     {"dense_units", cfg.baseline.dense_units},
                     {"dropout_p", cfg.baseline.dropout_p}};
    j["inference"] = {{"n_mc", cfg.inference.n_mc},
                      {"threshold_multiplier", cfg.inference.threshold_multiplier},
                      {"calibration_steps", cfg.inference.calibration_steps},
                      {"inference_every", cfg.inference.inference_every}};
    j["episode"] = {{"max_steps", cfg.episode.max_steps},
                    {"obstacle_arc", cfg.episode.obstacle_arc},
                    {"obstacle_index", cfg.episode.obstacle_index},
                    {"n_trials", cfg.episode.n_trials}};
    j["obstacle_files"] = cfg.obstacle_files;
    return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open: " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return run_config_from_json(buffer.str());
}

void RunConfig::validate() const {
    if (track.file.empty()) {
        check(track.straight_length > 0.0, "track.straight_length must be > 0");
        check(track.radius > 0.0, "track.radius must be > 0");
        check(track.half_width > 0.0, "track.half_width must be > 0");
        check(track.spacing > 0.0, "track.spacing must be > 0");
    }
    try {
        camera.intrinsics.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("camera: ") + e.what());
    }
    check(camera.height > 0.0, "camera.height must be > 0");
    check(std::abs(camera.mount_pitch_deg) < 90.0, "camera.mount_pitch_deg must be in (-90, 90)");
    try {
        mpc.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("mpc: ") + e.what());
    }
    check(spline.degree >= 1, "spline.degree must be >= 1");
    check(spline.n_ctrl >= spline.degree + 1, "spline.n_ctrl must be >= degree + 1");
    check(spline.n_focal >= 2, "spline.n_focal must be >= 2");
    check(roi.margin >= 1.0, "roi.margin must be >= 1");
    check(dataset.n_frames >= 1, "dataset.n_frames must be >= 1");
    check(dataset.max_skip_fraction >= 0.0 && dataset.max_skip_fraction <= 1.0,
          "dataset.max_skip_fraction must be in [0,1]");
    const struct {
        const char* name;
        const TrainConfig& t;
    } trains[] = {{"mpnet", mpnet.train}, {"macula", macula.train}, {"baseline", baseline.train}};
    for (const auto& entry : trains) {
        try {
            entry.t.validate();
        } catch (const Error& e) {
            throw ConfigError(std::string(entry.name) + ".train: " + e.what());
        }
    }
    check(mpnet.channels1 >= 1 && mpnet.channels2 >= 1 && mpnet.channels3 >= 1,
          "mpnet.channels* must be >= 1");
    check(mpnet.dense_units >= 1, "mpnet.dense_units must be >= 1");
    check(macula.channels1 >= 1 && macula.channels2 >= 1, "macula.channels* must be >= 1");
    check(macula.dense_units >= 1, "macula.dense_units must be >= 1");
    check(macula.dropout_p >= 0.0 && macula.dropout_p < 1.0, "macula.dropout_p must be in [0,1)");
    check(baseline.channels1 >= 1 && baseline.channels2 >= 1, "baseline.channels* must be >= 1");
    check(baseline.dense_units >= 1, "baseline.dense_units must be >= 1");
    check(baseline.dropout_p >= 0.0 && baseline.dropout_p < 1.0,
          "baseline.dropout_p must be in [0,1)");
    check(inference.n_mc >= 1, "inference.n_mc must be >= 1");
    check(inference.threshold_multiplier > 0.0, "inference.threshold_multiplier must be > 0");
    check(inference.calibration_steps >= 1, "inference.calibration_steps must be >= 1");
    check(inference.inference_every >= 1, "inference.inference_every must be >= 1");
    check(episode.max_steps >= 1, "episode.max_steps must be >= 1");
    check(episode.obstacle_arc > 0.0, "episode.obstacle_arc must be > 0");
    check(episode.obstacle_index >= 0, "episode.obstacle_index must be >= 0");
    check(episode.n_trials >= 1, "episode.n_trials must be >= 1");
    check(camera.intrinsics.image_h % 2 == 0 && camera.intrinsics.image_w % 2 == 0,
          "camera.image_h and camera.image_w must be even");
}

void RunConfig::apply_quick_profile() {
    dataset.n_frames = 500;
    mpnet.train.epochs = 15;
    macula.train.epochs = 12;
    baseline.train.epochs = 12;
    inference.calibration_steps = 200;
    episode.max_steps = 450;
}

Track RunConfig::make_track() const {
    if (!track.file.empty()) {
        std::ifstream in(track.file);
        if (!in) throw ConfigError("track.file: cannot open: " + track.file);
        std::stringstream buffer;
        buffer << in.rdbuf();
        try {
            return track_from_json(buffer.str());
        } catch (const Error& e) {
            throw ConfigError("track.file: " + std::string(e.what()));
        }
    }
    return make_oval_track(track.straight_length, track.radius, track.half_width, track.spacing);
}

std::vector<Obstacle> RunConfig::novel_obstacles() const {
    if (!obstacle_files.empty()) {
        std::vector<Obstacle> all;
        for (const auto& file : obstacle_files) {
            std::ifstream in(file);
            if (!in) throw ConfigError("obstacle_files: cannot open: " + file);
            std::stringstream buffer;
            buffer << in.rdbuf();
            try {
                const std::vector<Obstacle> batch = obstacles_from_json(buffer.str());
                all.insert(all.end(), batch.begin(), batch.end());
            } catch (const Error& e) {
                throw ConfigError("obstacle_files: " + file + ": " + e.what());
            }
        }
        if (all.empty()) throw ConfigError("obstacle_files: no obstacles found");
        return all;
    }
    // Built-in novel trio: colors unseen in the training scene.
    Obstacle tall;
    tall.half_extent_u = 0.4;
    tall.half_extent_v = 0.4;
    tall.height = 1.2;
    tall.color = {220, 40, 40};
    tall.novel = true;
    Obstacle wide;
    wide.half_extent_u = 0.5;
    wide.half_extent_v = 1.2;
    wide.height = 0.4;
    wide.color = {40, 60, 220};
    wide.novel = true;
    Obstacle small;
    small.half_extent_u = 0.25;
    small.half_extent_v = 0.25;
    small.height = 0.3;
    small.color = {235, 220, 60};
    small.novel = true;
    return {tall, wide, small};
}

NetworkSpec RunConfig::mpnet_spec() const {
    NetworkSpec spec;
    spec.input_shape = {camera.intrinsics.image_h, camera.intrinsics.image_w, 3};
    spec.seed = mix_seed(seed, 101);
    spec.layers = {
        {.kind = "conv2d", .out_channels = mpnet.channels1, .kernel = 3, .stride = 2},
        {.kind = "relu"},
        {.kind = "conv2d", .out_channels = mpnet.channels2, .kernel = 3, .stride = 2},
        {.kind = "relu"},
        {.kind = "conv2d", .out_channels = mpnet.channels3, .kernel = 3, .stride = 2},
        {.kind = "relu"},
        {.kind = "flatten"},
        {.kind = "dense", .units = mpnet.dense_units},
        {.kind = "relu"},
        {.kind = "dense", .units = 2 * spline.n_ctrl},
    };
    return spec;
}

NetworkSpec RunConfig::macula_spec() const {
    NetworkSpec spec;
    spec.input_shape = {spline.n_focal, 32, 32, 3};
    spec.seed = mix_seed(seed, 102);
    spec.layers = {
        {.kind = "conv3d", .out_channels = macula.channels1},
        {.kind = "relu"},
        {.kind = "maxpool3d"},
        {.kind = "conv3d", .out_channels = macula.channels2},
        {.kind = "relu"},
        {.kind = "maxpool3d"},
        {.kind = "flatten"},
        {.kind = "dense", .units = macula.dense_units},
        {.kind = "relu"},
        {.kind = "dropout", .p = macula.dropout_p},
        {.kind = "dense", .units = 2},
    };
    return spec;
}

NetworkSpec RunConfig::baseline_spec() const {
    NetworkSpec spec;
    spec.input_shape = {camera.intrinsics.image_h / 2, camera.intrinsics.image_w / 2, 3};
    spec.seed = mix_seed(seed, 103);
    spec.layers = {
        {.kind = "conv2d", .out_channels = baseline.channels1, .kernel = 3, .stride = 2},
        {.kind = "relu"},
        {.kind = "conv2d", .out_channels = baseline.channels2, .kernel = 3, .stride = 2},
        {.kind = "relu"},
        {.kind = "flatten"},
        {.kind = "dense", .units = baseline.dense_units},
        {.kind = "relu"},
        {.kind = "dropout", .p = baseline.dropout_p},
        {.kind = "dense", .units = 2},
    };
    return spec;
}

}  // namespace papc
