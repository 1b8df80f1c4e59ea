#include "grace/controller.hpp"

#include "grace/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace grace {

void ControllerConfig::validate() const {
  if (!(beta_min >= 0.0 && beta_min <= beta_init && beta_init <= beta_max)) {
    throw std::domain_error("ControllerConfig: need 0 <= beta_min <= beta_init <= beta_max");
  }
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
    throw std::domain_error("ControllerConfig: ema_decay must lie in (0, 1)");
  }
  if (!(eta > 0.0) || !(tau > 0.0)) {
    throw std::domain_error("ControllerConfig: eta and tau must be positive");
  }
  if (omega < 0.0) {
    throw std::domain_error("ControllerConfig: omega must be nonnegative");
  }
}

void update(ControllerState& state, double gdkd_loss, const ControllerConfig& cfg) {
  if (!std::isfinite(gdkd_loss) || gdkd_loss < 0.0) {
    throw std::domain_error("controller update: gdkd loss must be finite and nonnegative");
  }
  if (!state.initialized) {
    state.ema_loss = gdkd_loss;  // seeding with the raw loss avoids warm-up bias
    state.initialized = true;
  } else {
    state.ema_loss = cfg.ema_decay * state.ema_loss + (1.0 - cfg.ema_decay) * gdkd_loss;
  }
  state.beta = std::clamp(state.beta + cfg.eta * (state.ema_loss - cfg.tau),
                          cfg.beta_min, cfg.beta_max);
  ++state.step;
}

double total_loss(double ce, double gdkd, double rcka,
                  const ControllerState& state, const ControllerConfig& cfg) {
  if (!std::isfinite(ce) || !std::isfinite(gdkd) || !std::isfinite(rcka)) {
    throw std::domain_error("total_loss: components must be finite");
  }
  return ce + state.beta * gdkd + cfg.omega * rcka;
}

Var total_loss_node(Tape& t, Var ce, Var gdkd, Var rcka,
                    const ControllerState& state, const ControllerConfig& cfg) {
  return add(t, ce, add(t, scale(t, gdkd, state.beta), scale(t, rcka, cfg.omega)));
}

std::vector<TrajectoryPoint> simulate_dynamics(
    const std::function<double(double)>& response, long steps,
    const ControllerConfig& cfg, ControlMode mode, double noise_sigma,
    std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ControllerState state = ControllerState::init(cfg);
  std::vector<TrajectoryPoint> out;
  out.reserve(static_cast<size_t>(steps));
  for (long k = 0; k < steps; ++k) {
    double raw = response(state.beta);
    if (noise_sigma > 0.0) raw = std::max(0.0, raw + noise_sigma * rng.normal());
    if (mode == ControlMode::adaptive) {
      update(state, raw, cfg);
    } else {
      // beta frozen; the EMA still tracks the observed loss
      if (!state.initialized) {
        state.ema_loss = raw;
        state.initialized = true;
      } else {
        state.ema_loss = cfg.ema_decay * state.ema_loss + (1.0 - cfg.ema_decay) * raw;
      }
      ++state.step;
    }
    out.push_back({state.step, state.beta, state.ema_loss, raw});
  }
  return out;
}

}  // namespace grace
