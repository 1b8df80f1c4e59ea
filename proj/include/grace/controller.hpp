#pragma once

#include "grace/tape.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace grace {

/// Dual-ascent controller settings; defaults follow the training recipe
/// (tau 0.35, eta 0.0015, beta in [0.1, 5.0], EMA decay 0.99).
struct ControllerConfig {
  double tau = 0.35;
  double eta = 0.0015;
  double beta_init = 1.0;
  double beta_min = 0.1;
  double beta_max = 5.0;
  double ema_decay = 0.99;
  double omega = 1.0;
  void validate() const;
};

struct ControllerState {
  double beta = 1.0;
  double ema_loss = 0.0;
  long step = 0;
  bool initialized = false;

  static ControllerState init(const ControllerConfig& cfg) {
    ControllerState s;
    s.beta = cfg.beta_init;
    return s;
  }
};

/// One projected dual-ascent step: refresh the EMA with the incoming gated
/// loss (the first call seeds it), then
///   beta <- clamp(beta + eta * (ema - tau), beta_min, beta_max).
/// Non-finite losses are a domain error and leave the state untouched.
void update(ControllerState& state, double gdkd_loss, const ControllerConfig& cfg);

/// ce + beta * gdkd + omega * rcka with the current beta. beta is a plain
/// coefficient here; it moves only through update().
double total_loss(double ce, double gdkd, double rcka,
                  const ControllerState& state, const ControllerConfig& cfg);

Var total_loss_node(Tape& t, Var ce, Var gdkd, Var rcka,
                    const ControllerState& state, const ControllerConfig& cfg);

enum class ControlMode { adaptive, fixed };

struct TrajectoryPoint {
  long step = 0;
  double beta = 0.0;
  double ema_loss = 0.0;
  double raw_loss = 0.0;
};

/// Iterates the controller against a loss-response model (expected gated
/// loss as a monotone non-increasing function of beta) with optional
/// Gaussian observation noise. In fixed mode beta stays at beta_init.
std::vector<TrajectoryPoint> simulate_dynamics(
    const std::function<double(double)>& response, long steps,
    const ControllerConfig& cfg, ControlMode mode, double noise_sigma,
    std::uint64_t seed);

/// L(beta) = max(0, base - slope * beta); the affine model whose adaptive
/// fixed point is beta* with L(beta*) = tau.
struct AffineResponse {
  double base = 0.5;
  double slope = 0.1;
  double operator()(double beta) const {
    const double l = base - slope * beta;
    return l > 0.0 ? l : 0.0;
  }
};

}  // namespace grace
