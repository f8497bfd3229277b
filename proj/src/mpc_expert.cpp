#include "papc/mpc_expert.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace papc {

namespace {

constexpr double kConvergenceTol = 1e-6;
constexpr int kMaxIterations = 100;
constexpr double kLambdaInit = 1e-9;
constexpr double kLambdaMin = 1e-10;
constexpr double kLambdaMax = 1e10;
constexpr int kLineSearchSteps = 11;  // alpha = 2^0 .. 2^-10

struct Rollout {
    Eigen::MatrixXd states;    // (T+1) x n
    Eigen::MatrixXd controls;  // T x m
    double cost = 0.0;
    bool finite = true;
};

Rollout open_loop_rollout(const IlqgProblem& problem, const Eigen::VectorXd& x0,
                          const Eigen::MatrixXd& u_init) {
    const int horizon = static_cast<int>(u_init.rows());
    const int n = problem.state_dim();
    const int m = problem.control_dim();
    Rollout r;
    r.states.resize(horizon + 1, n);
    r.controls.resize(horizon, m);
    r.states.row(0) = x0.transpose();
    Eigen::VectorXd x = x0;
    for (int k = 0; k < horizon; ++k) {
        const Eigen::VectorXd u = problem.clamp_control(u_init.row(k).transpose());
        r.controls.row(k) = u.transpose();
        r.cost += problem.running_cost(x, u, k);
        x = problem.dynamics(x, u);
        r.states.row(k + 1) = x.transpose();
        if (!x.allFinite()) {
            r.finite = false;
            return r;
        }
    }
    r.cost += problem.terminal_cost(x);
    r.finite = std::isfinite(r.cost);
    return r;
}

Rollout feedback_rollout(const IlqgProblem& problem, const Rollout& nominal,
                         const std::vector<Eigen::VectorXd>& k_ff,
                         const std::vector<Eigen::MatrixXd>& gain, double alpha) {
    const int horizon = static_cast<int>(nominal.controls.rows());
    Rollout r;
    r.states.resizeLike(nominal.states);
    r.controls.resizeLike(nominal.controls);
    r.states.row(0) = nominal.states.row(0);
    Eigen::VectorXd x = nominal.states.row(0).transpose();
    for (int k = 0; k < horizon; ++k) {
        const Eigen::VectorXd dx = problem.state_delta(x, nominal.states.row(k).transpose());
        Eigen::VectorXd u =
            nominal.controls.row(k).transpose() + alpha * k_ff[k] + gain[k] * dx;
        u = problem.clamp_control(u);
        r.controls.row(k) = u.transpose();
        r.cost += problem.running_cost(x, u, k);
        x = problem.dynamics(x, u);
        r.states.row(k + 1) = x.transpose();
        if (!x.allFinite()) {
            r.finite = false;
            return r;
        }
    }
    r.cost += problem.terminal_cost(x);
    r.finite = std::isfinite(r.cost);
    return r;
}

/// Per-step expansions of dynamics and cost around a nominal trajectory.
struct Expansion {
    std::vector<Eigen::MatrixXd> fx, fu;
    std::vector<Eigen::VectorXd> lx, lu;
    std::vector<Eigen::MatrixXd> lxx, luu, lux;
    Eigen::VectorXd vx_term;
    Eigen::MatrixXd vxx_term;
};

Expansion expand(const IlqgProblem& problem, const Rollout& nominal) {
    const int horizon = static_cast<int>(nominal.controls.rows());
    Expansion e;
    e.fx.resize(horizon);
    e.fu.resize(horizon);
    e.lx.resize(horizon);
    e.lu.resize(horizon);
    e.lxx.resize(horizon);
    e.luu.resize(horizon);
    e.lux.resize(horizon);
    for (int k = 0; k < horizon; ++k) {
        const Eigen::VectorXd x = nominal.states.row(k).transpose();
        const Eigen::VectorXd u = nominal.controls.row(k).transpose();
        problem.dynamics_jacobians(x, u, e.fx[k], e.fu[k]);
        problem.running_quadratics(x, u, k, e.lx[k], e.lu[k], e.lxx[k], e.luu[k], e.lux[k]);
    }
    problem.terminal_quadratics(nominal.states.row(horizon).transpose(), e.vx_term, e.vxx_term);
    return e;
}

struct BackwardResult {
    bool ok = false;
    std::vector<Eigen::VectorXd> k_ff;
    std::vector<Eigen::MatrixXd> gain;
    double g1 = 0.0;  // sum k'Qu
    double g2 = 0.0;  // sum 0.5 k'Quu k
};

BackwardResult backward_pass(const Expansion& e, double lambda) {
    const int horizon = static_cast<int>(e.fx.size());
    const int m = static_cast<int>(e.lu.front().size());
    BackwardResult r;
    r.k_ff.resize(horizon);
    r.gain.resize(horizon);
    Eigen::VectorXd vx = e.vx_term;
    Eigen::MatrixXd vxx = e.vxx_term;
    for (int k = horizon - 1; k >= 0; --k) {
        const Eigen::VectorXd qx = e.lx[k] + e.fx[k].transpose() * vx;
        const Eigen::VectorXd qu = e.lu[k] + e.fu[k].transpose() * vx;
        const Eigen::MatrixXd qxx = e.lxx[k] + e.fx[k].transpose() * vxx * e.fx[k];
        const Eigen::MatrixXd quu = e.luu[k] + e.fu[k].transpose() * vxx * e.fu[k];
        const Eigen::MatrixXd qux = e.lux[k] + e.fu[k].transpose() * vxx * e.fx[k];

        const Eigen::MatrixXd quu_reg =
            quu + lambda * Eigen::MatrixXd::Identity(m, m);
        Eigen::LLT<Eigen::MatrixXd> llt(quu_reg);
        if (llt.info() != Eigen::Success) return r;  // not PD: caller raises lambda

        r.k_ff[k] = -llt.solve(qu);
        r.gain[k] = -llt.solve(qux);

        r.g1 += r.k_ff[k].dot(qu);
        r.g2 += 0.5 * r.k_ff[k].dot(quu * r.k_ff[k]);

        vx = qx + r.gain[k].transpose() * quu * r.k_ff[k] + r.gain[k].transpose() * qu +
             qux.transpose() * r.k_ff[k];
        vxx = qxx + r.gain[k].transpose() * quu * r.gain[k] + r.gain[k].transpose() * qux +
              qux.transpose() * r.gain[k];
        vxx = 0.5 * (vxx + vxx.transpose()).eval();
    }
    r.ok = true;
    return r;
}

}  // namespace

IlqgSolution solve_ilqg_generic(const IlqgProblem& problem, const Eigen::VectorXd& x0,
                                const Eigen::MatrixXd& u_init, const IlqgObserver& observer) {
    if (x0.size() != problem.state_dim())
        throw DomainError("solve_ilqg: x0 dimension mismatch");
    if (u_init.rows() < 1 || u_init.cols() != problem.control_dim())
        throw DomainError("solve_ilqg: control sequence shape mismatch");
    if (!x0.allFinite()) throw DomainError("solve_ilqg: non-finite initial state");

    Rollout current = open_loop_rollout(problem, x0, u_init);
    if (!current.finite)
        throw SolverError("solve_ilqg: initial rollout produced a non-finite state or cost");

    IlqgSolution sol;
    sol.iteration_costs.push_back(current.cost);
    double lambda = kLambdaInit;
    if (observer) observer({0, current.cost, lambda, 0.0, current.states, current.controls});

    double expected = 0.0;
    bool converged = false;
    for (int iter = 1; iter <= kMaxIterations; ++iter) {
        const Expansion e = expand(problem, current);
        BackwardResult bw = backward_pass(e, lambda);
        while (!bw.ok) {
            lambda *= 10.0;
            if (lambda > kLambdaMax) break;
            bw = backward_pass(e, lambda);
        }
        if (!bw.ok) break;  // regularization exhausted; report best-so-far unconverged

        expected = -(bw.g1 + bw.g2);
        if (expected < kConvergenceTol) {
            converged = true;
            break;
        }

        bool accepted = false;
        double alpha = 1.0;
        for (int ls = 0; ls < kLineSearchSteps; ++ls, alpha *= 0.5) {
            Rollout cand = feedback_rollout(problem, current, bw.k_ff, bw.gain, alpha);
            if (!cand.finite || cand.cost >= current.cost) continue;
            current = std::move(cand);
            lambda = std::max(lambda / 2.0, kLambdaMin);
            sol.iteration_costs.push_back(current.cost);
            if (observer)
                observer({iter, current.cost, lambda,
                          -(alpha * bw.g1 + alpha * alpha * bw.g2), current.states,
                          current.controls});
            accepted = true;
            break;
        }
        if (!accepted) {
            lambda *= 10.0;
            if (lambda > kLambdaMax) break;
        }
    }

    sol.states = std::move(current.states);
    sol.controls = std::move(current.controls);
    sol.cost = current.cost;
    sol.converged = converged;
    sol.value_reduction = expected;
    return sol;
}

void OcpSpec::validate() const {
    if (horizon_steps < 2) throw DomainError("ocp: horizon_steps must be >= 2");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("ocp: dt must be positive");
    const double weights[] = {weight_center,   weight_speed,          weight_steer,
                              weight_throttle, weight_center_terminal, weight_speed_terminal};
    for (double w : weights)
        if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("ocp: weights must be >= 0");
    if (!(target_speed >= 0.0) || !std::isfinite(target_speed))
        throw DomainError("ocp: target_speed must be >= 0");
    if (!(vehicle.wheelbase > 0.0)) throw DomainError("ocp: wheelbase must be positive");
    if (!(vehicle.steer_max > 0.0) || !(vehicle.accel_max > 0.0))
        throw DomainError("ocp: control bounds must be positive");
    if (!(vehicle.drag >= 0.0)) throw DomainError("ocp: drag must be >= 0");
}

void PlannedTrajectory::validate() const {
    if (states.empty() || states.size() != controls.size() + 1)
        throw DomainError("plan: need states = controls + 1");
    if (!std::isfinite(cost)) throw DomainError("plan: non-finite cost");
    for (const auto& s : states)
        if (!s.finite()) throw DomainError("plan: non-finite state");
    for (const auto& c : controls)
        if (!c.finite()) throw DomainError("plan: non-finite control");
}

BicycleTrackingProblem::BicycleTrackingProblem(const OcpSpec& spec, const Track& track)
    : spec_(spec), track_(track) {
    spec.validate();
    track.validate();
}

Eigen::Vector4d BicycleTrackingProblem::pack(const VehicleState& s) {
    return {s.pos_u, s.pos_v, s.heading, s.speed};
}

Eigen::VectorXd BicycleTrackingProblem::clamp_control(const Eigen::VectorXd& u) const {
    Eigen::VectorXd out(2);
    out(0) = std::clamp(u(0), -spec_.vehicle.steer_max, spec_.vehicle.steer_max);
    out(1) = std::clamp(u(1), -spec_.vehicle.accel_max, spec_.vehicle.accel_max);
    return out;
}

Eigen::VectorXd BicycleTrackingProblem::state_delta(const Eigen::VectorXd& x,
                                                    const Eigen::VectorXd& x_ref) const {
    Eigen::VectorXd d = x - x_ref;
    d(2) = wrap_angle(d(2));
    return d;
}

Eigen::VectorXd BicycleTrackingProblem::dynamics(const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& u) const {
    const Eigen::VectorXd uc = clamp_control(u);
    const VehicleState s{x(0), x(1), x(2), x(3), 0.0};
    const ControlInput c{uc(0), uc(1)};
    const VehicleState n = step_dynamics(spec_.vehicle, s, c, spec_.dt);
    return pack(n);
}

void BicycleTrackingProblem::dynamics_jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                                Eigen::MatrixXd& fx, Eigen::MatrixXd& fu) const {
    const double h = 1e-6;
    fx.resize(4, 4);
    fu.resize(4, 2);
    for (int j = 0; j < 4; ++j) {
        Eigen::VectorXd xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        fx.col(j) = state_delta(dynamics(xp, u), dynamics(xm, u)) / (2.0 * h);
    }
    for (int j = 0; j < 2; ++j) {
        Eigen::VectorXd up = u, um = u;
        up(j) += h;
        um(j) -= h;
        fu.col(j) = state_delta(dynamics(x, up), dynamics(x, um)) / (2.0 * h);
    }
}

namespace {

struct CenterInfo {
    double offset = 0.0;  // signed lateral offset
    double n_u = 0.0;     // unit left normal of the matched segment
    double n_v = 0.0;
};

CenterInfo center_info(const Track& track, double pos_u, double pos_v) {
    const TrackFrame frame = track_frame(track, pos_u, pos_v);
    const std::array<double, 2> tan = track.tangent_at(frame.arc_length);
    return {frame.lateral_offset, -tan[1], tan[0]};
}

}  // namespace

double BicycleTrackingProblem::running_cost(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                            int) const {
    const CenterInfo c = center_info(track_, x(0), x(1));
    const double dv = x(3) - spec_.target_speed;
    return spec_.weight_center * c.offset * c.offset + spec_.weight_speed * dv * dv +
           spec_.weight_steer * u(0) * u(0) + spec_.weight_throttle * u(1) * u(1);
}

void BicycleTrackingProblem::running_quadratics(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                                int, Eigen::VectorXd& lx, Eigen::VectorXd& lu,
                                                Eigen::MatrixXd& lxx, Eigen::MatrixXd& luu,
                                                Eigen::MatrixXd& lux) const {
    const CenterInfo c = center_info(track_, x(0), x(1));
    const double dv = x(3) - spec_.target_speed;
    lx = Eigen::VectorXd::Zero(4);
    lx(0) = 2.0 * spec_.weight_center * c.offset * c.n_u;
    lx(1) = 2.0 * spec_.weight_center * c.offset * c.n_v;
    lx(3) = 2.0 * spec_.weight_speed * dv;
    lxx = Eigen::MatrixXd::Zero(4, 4);
    lxx(0, 0) = 2.0 * spec_.weight_center * c.n_u * c.n_u;
    lxx(0, 1) = 2.0 * spec_.weight_center * c.n_u * c.n_v;
    lxx(1, 0) = lxx(0, 1);
    lxx(1, 1) = 2.0 * spec_.weight_center * c.n_v * c.n_v;
    lxx(3, 3) = 2.0 * spec_.weight_speed;
    lu = Eigen::VectorXd(2);
    lu(0) = 2.0 * spec_.weight_steer * u(0);
    lu(1) = 2.0 * spec_.weight_throttle * u(1);
    luu = Eigen::MatrixXd::Zero(2, 2);
    luu(0, 0) = 2.0 * spec_.weight_steer;
    luu(1, 1) = 2.0 * spec_.weight_throttle;
    lux = Eigen::MatrixXd::Zero(2, 4);
}

double BicycleTrackingProblem::terminal_cost(const Eigen::VectorXd& x) const {
    const CenterInfo c = center_info(track_, x(0), x(1));
    const double dv = x(3) - spec_.target_speed;
    return spec_.weight_center_terminal * c.offset * c.offset +
           spec_.weight_speed_terminal * dv * dv;
}

void BicycleTrackingProblem::terminal_quadratics(const Eigen::VectorXd& x, Eigen::VectorXd& vx,
                                                 Eigen::MatrixXd& vxx) const {
    const CenterInfo c = center_info(track_, x(0), x(1));
    const double dv = x(3) - spec_.target_speed;
    vx = Eigen::VectorXd::Zero(4);
    vx(0) = 2.0 * spec_.weight_center_terminal * c.offset * c.n_u;
    vx(1) = 2.0 * spec_.weight_center_terminal * c.offset * c.n_v;
    vx(3) = 2.0 * spec_.weight_speed_terminal * dv;
    vxx = Eigen::MatrixXd::Zero(4, 4);
    vxx(0, 0) = 2.0 * spec_.weight_center_terminal * c.n_u * c.n_u;
    vxx(0, 1) = 2.0 * spec_.weight_center_terminal * c.n_u * c.n_v;
    vxx(1, 0) = vxx(0, 1);
    vxx(1, 1) = 2.0 * spec_.weight_center_terminal * c.n_v * c.n_v;
    vxx(3, 3) = 2.0 * spec_.weight_speed_terminal;
}

PlannedTrajectory solve_ilqg(const OcpSpec& spec, const VehicleState& x0, const Track& track,
                             const PlannedTrajectory* warm_start, const IlqgObserver& observer) {
    spec.validate();
    if (!x0.finite()) throw DomainError("solve_ilqg: non-finite initial state");
    const int horizon = spec.horizon_steps;

    Eigen::MatrixXd u_init = Eigen::MatrixXd::Zero(horizon, 2);
    if (warm_start != nullptr) {
        if (static_cast<int>(warm_start->controls.size()) != horizon)
            throw DomainError("solve_ilqg: warm start horizon mismatch");
        for (int k = 0; k < horizon; ++k) {
            u_init(k, 0) = warm_start->controls[k].steering;
            u_init(k, 1) = warm_start->controls[k].throttle;
        }
    }

    const BicycleTrackingProblem problem(spec, track);
    IlqgSolution sol =
        solve_ilqg_generic(problem, BicycleTrackingProblem::pack(x0), u_init, observer);

    PlannedTrajectory plan;
    plan.states.reserve(horizon + 1);
    plan.controls.reserve(horizon);
    plan.states.push_back(x0);
    for (int k = 0; k < horizon; ++k) {
        const ControlInput c{sol.controls(k, 0), sol.controls(k, 1)};
        plan.controls.push_back(c);
        plan.states.push_back(step_dynamics(spec.vehicle, plan.states.back(), c, spec.dt));
    }
    plan.cost = sol.cost;
    plan.converged = sol.converged;
    plan.value_reduction = sol.value_reduction;
    plan.iteration_costs = std::move(sol.iteration_costs);
    return plan;
}

double plan_cost(const OcpSpec& spec, const Track& track, const std::vector<VehicleState>& states,
                 const std::vector<ControlInput>& controls) {
    if (states.size() != controls.size() + 1)
        throw DomainError("plan_cost: need states = controls + 1");
    const BicycleTrackingProblem problem(spec, track);
    double total = 0.0;
    for (std::size_t k = 0; k < controls.size(); ++k) {
        const Eigen::Vector4d x = BicycleTrackingProblem::pack(states[k]);
        Eigen::Vector2d u(controls[k].steering, controls[k].throttle);
        total += problem.running_cost(x, u, static_cast<int>(k));
    }
    total += problem.terminal_cost(BicycleTrackingProblem::pack(states.back()));
    return total;
}

std::vector<RecedingStep> receding_horizon(const OcpSpec& spec, const VehicleState& x0,
                                           const Track& track, int n_steps) {
    if (n_steps < 1) throw DomainError("receding_horizon: n_steps must be >= 1");
    spec.validate();

    std::vector<RecedingStep> out;
    out.reserve(n_steps);
    VehicleState state = x0;
    PlannedTrajectory warm;
    bool have_warm = false;
    for (int step = 0; step < n_steps; ++step) {
        PlannedTrajectory plan;
        try {
            plan = solve_ilqg(spec, state, track, have_warm ? &warm : nullptr);
        } catch (const Error& e) {
            throw SolverError("receding_horizon: step " + std::to_string(step) + ": " + e.what());
        }
        const ControlInput applied = plan.controls.front();
        out.push_back({state, applied, plan});
        state = step_dynamics(spec.vehicle, state, applied, spec.dt);

        warm = plan;
        warm.controls.erase(warm.controls.begin());
        warm.controls.push_back(warm.controls.back());
        have_warm = true;
    }
    return out;
}

}  // namespace papc
