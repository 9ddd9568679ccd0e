#pragma once

// Procedural toy tasks standing in for the full-scale simulator benchmarks:
// a bimodal 2-D reach task with a scripted expert (two mirrored waypoint
// branches) and a point-cloud scene task labelled with object centroids.

#include "xil/encoders.hpp"

#include <array>

namespace xil {

// ------------------------------------------------------------ bimodal reach

struct BimodalReachConfig {
    double start_x = 0.0, start_y = 0.0;
    double goal_x = 1.0, goal_y = 0.0;
    double waypoint_x = 0.5, waypoint_y = 0.4; // mirrored to -y on the down branch
    double dt = 0.05;
    int64_t horizon = 40;
    double success_radius = 0.05;
    double start_jitter = 0.02; // uniform square around the nominal start
    int64_t action_horizon = 8; // Ta
    int64_t history = 1;        // h
};

struct EnvState {
    double x = 0.0, y = 0.0;
    int64_t t = 0;
};

struct StepResult {
    EnvState state;
    bool done = false;
    bool success = false;
};

// state' = state + clip(action, -1, 1) * dt
inline StepResult env_step(const BimodalReachConfig& cfg, const EnvState& s, double ax, double ay) {
    if (!std::isfinite(ax) || !std::isfinite(ay)) throw NumericError("non-finite action");
    StepResult r;
    r.state.x = s.x + std::min(1.0, std::max(-1.0, ax)) * cfg.dt;
    r.state.y = s.y + std::min(1.0, std::max(-1.0, ay)) * cfg.dt;
    r.state.t = s.t + 1;
    const double dx = r.state.x - cfg.goal_x;
    const double dy = r.state.y - cfg.goal_y;
    r.success = std::sqrt(dx * dx + dy * dy) < cfg.success_radius;
    r.done = r.success || r.state.t >= cfg.horizon;
    return r;
}

// move toward the branch waypoint until past it, then toward the goal;
// per-axis clipped max-speed approach that arrives exactly
inline std::pair<double, double> expert_action(const BimodalReachConfig& cfg, const EnvState& s,
                                               bool branch_up) {
    const double wy = branch_up ? cfg.waypoint_y : -cfg.waypoint_y;
    double tx, ty;
    if (s.x < cfg.waypoint_x - 1e-9) {
        tx = cfg.waypoint_x;
        ty = wy;
    } else {
        tx = cfg.goal_x;
        ty = cfg.goal_y;
    }
    const double ax = std::min(1.0, std::max(-1.0, (tx - s.x) / cfg.dt));
    const double ay = std::min(1.0, std::max(-1.0, (ty - s.y) / cfg.dt));
    return {ax, ay};
}

struct Episode {
    std::vector<std::array<double, 2>> states;  // length T+1
    std::vector<std::array<double, 2>> actions; // length T
    bool branch_up = false;
    bool success = false;
};

inline Episode rollout_expert(const BimodalReachConfig& cfg, Rng& rng) {
    Episode ep;
    ep.branch_up = rng.uniform() < 0.5;
    EnvState s;
    s.x = cfg.start_x + rng.uniform(-cfg.start_jitter, cfg.start_jitter);
    s.y = cfg.start_y + rng.uniform(-cfg.start_jitter, cfg.start_jitter);
    ep.states.push_back({s.x, s.y});
    while (true) {
        auto [ax, ay] = expert_action(cfg, s, ep.branch_up);
        ep.actions.push_back({ax, ay});
        auto r = env_step(cfg, s, ax, ay);
        s = r.state;
        ep.states.push_back({s.x, s.y});
        if (r.done) {
            ep.success = r.success;
            break;
        }
    }
    return ep;
}

// 32x32 top-down view: goal and agent drawn as colored squares
inline std::vector<float> render_reach_image(const BimodalReachConfig& cfg, double x, double y) {
    const int64_t H = 32, W = 32;
    std::vector<float> img(static_cast<size_t>(H * W * 3), 0.1f);
    auto paint = [&](double wx, double wy, float r, float g, float b) {
        // world window x in [-0.3, 1.3], y in [-0.8, 0.8]
        const int64_t px = static_cast<int64_t>((wx + 0.3) / 1.6 * W);
        const int64_t py = static_cast<int64_t>((wy + 0.8) / 1.6 * H);
        for (int64_t dy = -1; dy <= 1; ++dy) {
            for (int64_t dx = -1; dx <= 1; ++dx) {
                const int64_t ix = px + dx, iy = py + dy;
                if (ix < 0 || ix >= W || iy < 0 || iy >= H) continue;
                float* p = img.data() + (iy * W + ix) * 3;
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
    };
    paint(cfg.goal_x, cfg.goal_y, 0.1f, 0.9f, 0.1f);
    paint(x, y, 0.9f, 0.1f, 0.1f);
    return img;
}

// chunked (observation history, Ta-action-sequence) supervision with stride 1
struct ReachDataset {
    BimodalReachConfig cfg;
    int64_t n_pairs = 0;
    std::vector<float> states;  // [n, h, 2]
    std::vector<float> actions; // [n, Ta, 2]
    std::vector<float> goal_ids; // [n]
    std::vector<float> branches; // [n], 1 = up

    int64_t history() const { return cfg.history; }
    int64_t action_horizon() const { return cfg.action_horizon; }
};

inline ReachDataset gen_bimodal_reach_dataset(const BimodalReachConfig& cfg, int64_t n_episodes, Rng rng) {
    if (n_episodes < 2) throw UsageError("need at least 2 episodes");
    ReachDataset ds;
    ds.cfg = cfg;
    const int64_t h = cfg.history;
    const int64_t ta = cfg.action_horizon;
    for (int64_t e = 0; e < n_episodes; ++e) {
        auto child = rng.split(static_cast<uint64_t>(e));
        auto ep = rollout_expert(cfg, child);
        if (!ep.success) throw NumericError("scripted expert failed to reach the goal");
        const int64_t T = static_cast<int64_t>(ep.actions.size());
        for (int64_t t = 0; t < T; ++t) {
            for (int64_t k = 0; k < h; ++k) {
                const int64_t idx = std::max<int64_t>(0, t - (h - 1) + k);
                ds.states.push_back(static_cast<float>(ep.states[static_cast<size_t>(idx)][0]));
                ds.states.push_back(static_cast<float>(ep.states[static_cast<size_t>(idx)][1]));
            }
            for (int64_t k = 0; k < ta; ++k) {
                if (t + k < T) {
                    ds.actions.push_back(static_cast<float>(ep.actions[static_cast<size_t>(t + k)][0]));
                    ds.actions.push_back(static_cast<float>(ep.actions[static_cast<size_t>(t + k)][1]));
                } else {
                    ds.actions.push_back(0.0f); // hold still once the episode is over
                    ds.actions.push_back(0.0f);
                }
            }
            ds.goal_ids.push_back(0.0f);
            ds.branches.push_back(ep.branch_up ? 1.0f : 0.0f);
            ds.n_pairs++;
        }
    }
    return ds;
}

// ------------------------------------------------------ point-cloud scene

struct PointCloudSceneConfig {
    int64_t n_points = 512;
    int64_t n_object = 256; // remainder is floor
    double area = 0.8;      // object center range
    double floor_extent = 1.5;
    // per-shape half extents (x, y) and heights; goal_id picks the shape
    std::array<double, 3> half_extent = {0.10, 0.16, 0.22};
    std::array<double, 3> height = {0.12, 0.24, 0.40};
};

struct PointCloudSample {
    std::vector<float> points;  // [n_points, 3]
    std::array<double, 3> centroid{};
    int64_t goal_id = 0;
};

inline PointCloudSample gen_pointcloud_scene(const PointCloudSceneConfig& cfg, int64_t goal_id, Rng& rng) {
    if (goal_id < 0 || goal_id > 2) throw UsageError("goal_id must be in {0,1,2}");
    PointCloudSample s;
    s.goal_id = goal_id;
    const double cx = rng.uniform(-cfg.area, cfg.area);
    const double cy = rng.uniform(-cfg.area, cfg.area);
    const double he = cfg.half_extent[static_cast<size_t>(goal_id)];
    const double hh = cfg.height[static_cast<size_t>(goal_id)];
    const double yaw = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double cyaw = std::cos(yaw), syaw = std::sin(yaw);
    s.centroid = {cx, cy, hh / 2.0};
    s.points.reserve(static_cast<size_t>(cfg.n_points * 3));
    for (int64_t i = 0; i < cfg.n_object; ++i) {
        const double u = rng.uniform(-he, he);
        const double v = rng.uniform(-he, he);
        const double w = rng.uniform(0.0, hh);
        s.points.push_back(static_cast<float>(cx + u * cyaw - v * syaw));
        s.points.push_back(static_cast<float>(cy + u * syaw + v * cyaw));
        s.points.push_back(static_cast<float>(w));
    }
    for (int64_t i = cfg.n_object; i < cfg.n_points; ++i) {
        s.points.push_back(static_cast<float>(rng.uniform(-cfg.floor_extent, cfg.floor_extent)));
        s.points.push_back(static_cast<float>(rng.uniform(-cfg.floor_extent, cfg.floor_extent)));
        s.points.push_back(0.0f);
    }
    return s;
}

struct PointCloudDataset {
    PointCloudSceneConfig cfg;
    int64_t n_samples = 0;
    std::vector<float> clouds;    // [n, n_points, 3]
    std::vector<float> centroids; // [n, 3]
    std::vector<float> goal_ids;  // [n]
};

inline PointCloudDataset gen_pointcloud_dataset(const PointCloudSceneConfig& cfg, int64_t n_samples,
                                                Rng rng) {
    PointCloudDataset ds;
    ds.cfg = cfg;
    ds.n_samples = n_samples;
    for (int64_t i = 0; i < n_samples; ++i) {
        auto child = rng.split(static_cast<uint64_t>(i));
        auto s = gen_pointcloud_scene(cfg, i % 3, child);
        ds.clouds.insert(ds.clouds.end(), s.points.begin(), s.points.end());
        for (double c : s.centroid) ds.centroids.push_back(static_cast<float>(c));
        ds.goal_ids.push_back(static_cast<float>(s.goal_id));
    }
    return ds;
}

} // namespace xil
