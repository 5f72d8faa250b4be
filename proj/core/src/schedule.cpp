#include "stickerlab/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace stickerlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 1 || t > steps())
    throw std::invalid_argument("alpha_bar: timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  return alpha_bars[t - 1];
}

double NoiseSchedule::snr(int t) const {
  const double ab = alpha_bar(t);
  return ab / (1.0 - ab);
}

double NoiseSchedule::logsnr(int t) const {
  const double ab = alpha_bar(t);
  if (ab == 0.0) return -kInf;
  return std::log(ab) - std::log1p(-ab);
}

double NoiseSchedule::max_time() const {
  // Exclude the exact zero-SNR endpoint: logSNR is -inf there.
  return zero_terminal_snr && alpha_bars.back() == 0.0 ? static_cast<double>(steps() - 1)
                                                       : static_cast<double>(steps());
}

double NoiseSchedule::logsnr_at(double u) const {
  const double hi = max_time();
  if (u < 1.0 - 1e-9 || u > hi + 1e-9)
    throw std::invalid_argument("logsnr_at: time " + std::to_string(u) + " outside [1," + std::to_string(hi) + "]");
  u = std::clamp(u, 1.0, hi);
  const int lo = std::min(static_cast<int>(std::floor(u)), static_cast<int>(hi) - 1);
  if (lo >= static_cast<int>(hi)) return logsnr(static_cast<int>(hi));
  const double frac = u - lo;
  if (frac == 0.0) return logsnr(lo);
  return logsnr(lo) * (1.0 - frac) + logsnr(lo + 1) * frac;
}

double NoiseSchedule::alpha_bar_at(double u) const { return sigmoid(logsnr_at(u)); }

void NoiseSchedule::validate() const {
  if (steps() < 2) throw std::invalid_argument("schedule: needs at least 2 timesteps");
  double prev = 1.0;
  for (int t = 1; t <= steps(); ++t) {
    const double b = betas[t - 1];
    const bool terminal_one = zero_terminal_snr && t == steps() && b == 1.0;
    if (!(b > 0.0 && (b < 1.0 || terminal_one)))
      throw std::invalid_argument("schedule: beta_" + std::to_string(t) + " = " + std::to_string(b) +
                                  " outside (0,1)");
    if (!(alpha_bars[t - 1] < prev))
      throw std::invalid_argument("schedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
    prev = alpha_bars[t - 1];
  }
  if (zero_terminal_snr && alpha_bars.back() != 0.0)
    throw std::invalid_argument("schedule: zero_terminal_snr set but alpha_bar_N != 0");
}

NoiseSchedule make_schedule(ScheduleKind kind, int n, PredictionType prediction_type) {
  if (n < 2) throw std::invalid_argument("make_schedule: N must be >= 2, got " + std::to_string(n));
  NoiseSchedule s;
  s.prediction_type = prediction_type;
  s.betas.resize(n);
  s.alpha_bars.resize(n);
  if (kind == ScheduleKind::linear) {
    // 1000-step linear beta range scaled so total noise is N-independent.
    const double k = 1000.0 / n;
    const double b0 = 1e-4 * k, b1 = 0.02 * k;
    if (b1 >= 1.0)
      throw std::invalid_argument("make_schedule: N=" + std::to_string(n) +
                                  " too small for the scaled linear schedule (beta_N >= 1); need N >= 21");
    double ab = 1.0;
    for (int t = 0; t < n; ++t) {
      s.betas[t] = n == 1 ? b0 : b0 + (b1 - b0) * t / (n - 1);
      ab *= 1.0 - s.betas[t];
      s.alpha_bars[t] = ab;
    }
  } else {
    const double off = 0.008;
    auto f = [&](double u) {
      const double c = std::cos((u / n + off) / (1.0 + off) * 1.5707963267948966);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev_ab = 1.0;
    double ab = 1.0;
    for (int t = 1; t <= n; ++t) {
      const double target = f(static_cast<double>(t)) / f0;
      double beta = 1.0 - target / prev_ab;
      beta = std::clamp(beta, 1e-8, 0.999);
      ab *= 1.0 - beta;
      s.betas[t - 1] = beta;
      s.alpha_bars[t - 1] = ab;
      prev_ab = ab;
    }
  }
  s.validate();
  return s;
}

NoiseSchedule rescale_zero_terminal_snr(const NoiseSchedule& in) {
  const int n = in.steps();
  if (in.alpha_bars.back() == 0.0)
    throw std::invalid_argument("rescale_zero_terminal_snr: schedule already has a zero terminal");
  std::vector<double> sq(n);
  for (int i = 0; i < n; ++i) sq[i] = std::sqrt(in.alpha_bars[i]);
  const double first = sq.front(), last = sq.back();
  const double gain = first / (first - last);
  NoiseSchedule out = in;
  out.zero_terminal_snr = true;
  for (int i = 0; i < n; ++i) {
    const double v = (sq[i] - last) * gain;
    out.alpha_bars[i] = v * v;
  }
  out.alpha_bars[0] = in.alpha_bars[0];  // fixed endpoint, exactly
  out.alpha_bars[n - 1] = 0.0;           // defining property, exactly
  double prev = 1.0;
  for (int i = 0; i < n; ++i) {
    out.betas[i] = 1.0 - out.alpha_bars[i] / prev;
    prev = out.alpha_bars[i];
  }
  out.validate();
  return out;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& s) {
  if (x0.shape() != noise.shape())
    throw std::invalid_argument("q_sample: x0 " + shape_str(x0.shape()) + " vs noise " + shape_str(noise.shape()));
  const double ab = s.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(noise, std::sqrt(1.0 - ab)));
}

Tensor convert(const Tensor& pred, const Tensor& z_t, double alpha_bar, Quantity from, Quantity to) {
  if (from == to) throw std::invalid_argument("convert: from == to");
  if (pred.shape() != z_t.shape())
    throw std::invalid_argument("convert: pred " + shape_str(pred.shape()) + " vs z " + shape_str(z_t.shape()));
  const double a = std::sqrt(alpha_bar);
  const double sg = std::sqrt(1.0 - alpha_bar);
  auto need = [&](double denom, const char* what) {
    if (denom == 0.0)
      throw std::domain_error(std::string("convert: ") + what + " undefined at alpha_bar=" +
                              std::to_string(alpha_bar));
  };
  switch (from) {
    case Quantity::eps:
      if (to == Quantity::x0) {
        need(a, "x0 from eps");  // x0 = (z - sigma e) / alpha
        return add(scale(z_t, 1.0 / a), scale(pred, -sg / a));
      }
      need(a, "v from eps");  // v = (e - sigma z) / alpha
      return add(scale(pred, 1.0 / a), scale(z_t, -sg / a));
    case Quantity::x0:
      if (to == Quantity::eps) {
        need(sg, "eps from x0");  // e = (z - alpha x) / sigma
        return add(scale(z_t, 1.0 / sg), scale(pred, -a / sg));
      }
      need(sg, "v from x0");  // v = (alpha z - x) / sigma
      return add(scale(z_t, a / sg), scale(pred, -1.0 / sg));
    case Quantity::v:
      if (to == Quantity::x0) return add(scale(z_t, a), scale(pred, -sg));  // x0 = alpha z - sigma v
      return add(scale(z_t, sg), scale(pred, a));                           // e = sigma z + alpha v
  }
  throw std::logic_error("convert: unreachable");
}

Tensor convert(const Tensor& pred, const Tensor& z_t, int t, const NoiseSchedule& s, Quantity from, Quantity to) {
  return convert(pred, z_t, s.alpha_bar(t), from, to);
}

Tensor v_target(const Tensor& x0, const Tensor& noise, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  return add(scale(noise, std::sqrt(ab)), scale(x0, -std::sqrt(1.0 - ab)));
}

std::vector<double> logsnr_linear_times(const NoiseSchedule& s, int n_steps) {
  if (n_steps < 2)
    throw std::invalid_argument("logsnr_linear_times: need at least 2 steps, got " + std::to_string(n_steps));
  const double u_hi = s.max_time();
  const double lam_noisy = s.logsnr_at(u_hi);  // smallest logSNR in range
  const double lam_clean = s.logsnr_at(1.0);   // largest
  std::vector<double> times(n_steps);
  for (int i = 0; i < n_steps; ++i) {
    const double lam = lam_noisy + (lam_clean - lam_noisy) * i / (n_steps - 1);
    // invert the piecewise-linear logSNR by bisection (strictly decreasing in u)
    double lo = 1.0, hi = u_hi;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (s.logsnr_at(mid) < lam)
        hi = mid;
      else
        lo = mid;
    }
    times[i] = 0.5 * (lo + hi);
  }
  times.front() = u_hi;  // exact endpoints
  times.back() = 1.0;
  return times;
}

NoiseSchedule ScheduleConfig::build() const {
  NoiseSchedule s = make_schedule(kind, steps, prediction_type);
  if (zero_terminal_snr) s = rescale_zero_terminal_snr(s);
  return s;
}

const char* to_string(PredictionType p) { return p == PredictionType::eps ? "eps" : "v"; }
const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

PredictionType prediction_type_from_string(const std::string& s) {
  if (s == "eps" || s == "epsilon") return PredictionType::eps;
  if (s == "v") return PredictionType::v;
  throw std::invalid_argument("unknown prediction type: " + s);
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

}  // namespace stickerlab
