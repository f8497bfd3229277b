#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "papc/dynamics_track.hpp"

namespace papc {

/// Optimal-control problem description for the track-following expert.
struct OcpSpec {
    int horizon_steps = 50;  // T; plan covers T*dt seconds
    double dt = 0.02;
    double weight_center = 2.0;    // running centerline-offset cost
    double weight_speed = 0.5;     // running speed-error cost
    double weight_steer = 0.5;     // control quadratic, steering
    double weight_throttle = 0.1;  // control quadratic, throttle
    double weight_center_terminal = 10.0;
    double weight_speed_terminal = 1.0;
    double target_speed = 2.0;       // m/s
    BicycleParams vehicle;           // model + control bounds used by the solver

    void validate() const;
};

/// Open-loop plan returned by one solve.
struct PlannedTrajectory {
    std::vector<VehicleState> states;    // T+1 entries
    std::vector<ControlInput> controls;  // T entries
    double cost = 0.0;
    bool converged = false;
    double value_reduction = 0.0;          // expected reduction at termination
    std::vector<double> iteration_costs;   // initial rollout + each accepted iterate

    void validate() const;
};

/// Generic discrete-time problem consumed by the iLQG core. Tests substitute
/// analytic linear-quadratic instances through this interface.
class IlqgProblem {
  public:
    virtual ~IlqgProblem() = default;

    virtual int state_dim() const = 0;
    virtual int control_dim() const = 0;

    virtual Eigen::VectorXd dynamics(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const = 0;
    virtual void dynamics_jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                    Eigen::MatrixXd& fx, Eigen::MatrixXd& fu) const = 0;

    virtual double running_cost(const Eigen::VectorXd& x, const Eigen::VectorXd& u, int k) const = 0;
    virtual void running_quadratics(const Eigen::VectorXd& x, const Eigen::VectorXd& u, int k,
                                    Eigen::VectorXd& lx, Eigen::VectorXd& lu, Eigen::MatrixXd& lxx,
                                    Eigen::MatrixXd& luu, Eigen::MatrixXd& lux) const = 0;
    virtual double terminal_cost(const Eigen::VectorXd& x) const = 0;
    virtual void terminal_quadratics(const Eigen::VectorXd& x, Eigen::VectorXd& vx,
                                     Eigen::MatrixXd& vxx) const = 0;

    /// Clamp a candidate control to the problem's bounds (identity by default).
    virtual Eigen::VectorXd clamp_control(const Eigen::VectorXd& u) const { return u; }
    /// Difference x - x_ref in local coordinates (handles angle wrapping).
    virtual Eigen::VectorXd state_delta(const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& x_ref) const {
        return x - x_ref;
    }
};

/// Snapshot passed to the iteration observer: the initial rollout (iteration 0)
/// and every accepted iterate afterwards.
struct IlqgIterate {
    int iteration = 0;
    double cost = 0.0;
    double lambda = 0.0;
    double expected_reduction = 0.0;
    Eigen::MatrixXd states;    // (T+1) x n
    Eigen::MatrixXd controls;  // T x m
};
using IlqgObserver = std::function<void(const IlqgIterate&)>;

struct IlqgSolution {
    Eigen::MatrixXd states;    // (T+1) x n
    Eigen::MatrixXd controls;  // T x m
    double cost = 0.0;
    bool converged = false;
    double value_reduction = 0.0;
    std::vector<double> iteration_costs;
};

/// Gauss-Newton iLQG: backward quadratic value recursion with
/// Levenberg-Marquardt regularization plus forward line-search rollouts.
/// Accepted iterates never increase cost; converges when the expected value
/// reduction drops below 1e-6 (at most 100 iterations).
IlqgSolution solve_ilqg_generic(const IlqgProblem& problem, const Eigen::VectorXd& x0,
                                const Eigen::MatrixXd& u_init, const IlqgObserver& observer = {});

/// Centerline-tracking bicycle instance; state [pos_u, pos_v, heading, speed],
/// control [steering, throttle].
class BicycleTrackingProblem : public IlqgProblem {
  public:
    BicycleTrackingProblem(const OcpSpec& spec, const Track& track);

    int state_dim() const override { return 4; }
    int control_dim() const override { return 2; }
    Eigen::VectorXd dynamics(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override;
    void dynamics_jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u, Eigen::MatrixXd& fx,
                            Eigen::MatrixXd& fu) const override;
    double running_cost(const Eigen::VectorXd& x, const Eigen::VectorXd& u, int k) const override;
    void running_quadratics(const Eigen::VectorXd& x, const Eigen::VectorXd& u, int k,
                            Eigen::VectorXd& lx, Eigen::VectorXd& lu, Eigen::MatrixXd& lxx,
                            Eigen::MatrixXd& luu, Eigen::MatrixXd& lux) const override;
    double terminal_cost(const Eigen::VectorXd& x) const override;
    void terminal_quadratics(const Eigen::VectorXd& x, Eigen::VectorXd& vx,
                             Eigen::MatrixXd& vxx) const override;
    Eigen::VectorXd clamp_control(const Eigen::VectorXd& u) const override;
    Eigen::VectorXd state_delta(const Eigen::VectorXd& x,
                                const Eigen::VectorXd& x_ref) const override;

    static Eigen::Vector4d pack(const VehicleState& s);

  private:
    const OcpSpec& spec_;
    const Track& track_;
};

/// Solve the track-following problem from x0; warm_start supplies the initial
/// control sequence (zeros otherwise).
PlannedTrajectory solve_ilqg(const OcpSpec& spec, const VehicleState& x0, const Track& track,
                             const PlannedTrajectory* warm_start = nullptr,
                             const IlqgObserver& observer = {});

/// Cost of a state/control sequence under the tracking objective; the oracle
/// counterpart of PlannedTrajectory::cost.
double plan_cost(const OcpSpec& spec, const Track& track, const std::vector<VehicleState>& states,
                 const std::vector<ControlInput>& controls);

struct RecedingStep {
    VehicleState state;     // state the solve started from
    ControlInput control;   // first planned control, applied to the vehicle
    PlannedTrajectory plan; // full solve result at this state
};

/// Closed-loop expert: solve, apply the first control, step the dynamics,
/// warm-start the next solve with the shifted plan.
std::vector<RecedingStep> receding_horizon(const OcpSpec& spec, const VehicleState& x0,
                                           const Track& track, int n_steps);

}  // namespace papc
