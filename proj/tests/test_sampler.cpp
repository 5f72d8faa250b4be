#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "stickerlab/sampler.hpp"

using namespace stickerlab;

namespace {

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// x0-prediction proportional to z: the probability-flow ODE has the closed
// form z(b) = (sigma_b/sigma_a) z(a) exp(c (asinh e^b - asinh e^a)) in
// lambda = log(alpha/sigma).
ModelFn linear_toy_model(double c, const NoiseSchedule& s) {
  return [c, &s](const Tensor& z, double t, const ConditioningBundle&) {
    const double ab = s.alpha_bar_at(t);
    Tensor x0 = scale(z, c);
    const Quantity native = s.prediction_type == PredictionType::eps ? Quantity::eps : Quantity::v;
    return convert(x0, z, ab, Quantity::x0, native);
  };
}

ConditioningBundle empty_cond() {
  ConditioningBundle cond;
  cond.image_latent = Tensor::zeros({4, 2, 2});
  cond.text_embeddings.push_back(null_text_embedding(1));
  return cond;
}

}  // namespace

TEST_CASE("cfg_combine identities") {
  Rng rng(3);
  Tensor uu = Tensor::randn({2, 3}, rng);
  Tensor iu = Tensor::randn({2, 3}, rng);
  Tensor it = Tensor::randn({2, 3}, rng);

  SUBCASE("zero scales collapse to the unconditional") {
    Tensor out = cfg_combine(uu, iu, it, {0.0, 0.0});
    CHECK(out.data() == uu.data());
  }
  SUBCASE("unit scales telescope to the full conditional") {
    Tensor out = cfg_combine(uu, iu, it, {1.0, 1.0});
    CHECK(out.data() == it.data());
  }
  SUBCASE("scalar example") {
    Tensor a = Tensor::scalar(1.0), b = Tensor::scalar(2.0), c = Tensor::scalar(4.0);
    CHECK(cfg_combine(a, b, c, {8.0, 2.0}).item() == doctest::Approx(13.0).epsilon(1e-15));
  }
  SUBCASE("coefficients sum to one: constant shift passes through") {
    const double shift = 0.7321;
    Tensor u2 = add_scalar(uu, shift), i2 = add_scalar(iu, shift), t2 = add_scalar(it, shift);
    Tensor base = cfg_combine(uu, iu, it, {8.0, 2.0});
    Tensor moved = cfg_combine(u2, i2, t2, {8.0, 2.0});
    for (int64_t i = 0; i < base.size(); ++i)
      CHECK(moved.data()[i] - base.data()[i] == doctest::Approx(shift).epsilon(1e-12));
  }
  SUBCASE("shape mismatch rejected") {
    CHECK_THROWS_AS(cfg_combine(uu, iu, Tensor::zeros({3, 2}), {1.0, 1.0}), std::invalid_argument);
  }
}

TEST_CASE("adaptive guidance accounting: 8 guided of 15 gives 31 forwards") {
  auto s = make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps);
  int64_t calls = 0;
  ModelFn counting = [&](const Tensor& z, double, const ConditioningBundle&) {
    ++calls;
    return scale(z, 0.5);
  };
  SampleOptions opt;
  opt.solver = SolverKind::dpm;
  opt.n_steps = 15;
  opt.policy = {15, 8};
  opt.seed = 9;
  auto res = sample(counting, empty_cond(), s, {2, 4, 2, 2}, opt);
  CHECK(res.evals.unet_forwards == 31);
  CHECK(calls == 31);

  opt.policy = {15, 15};
  CHECK(sample(counting, empty_cond(), s, {2, 4, 2, 2}, opt).evals.unet_forwards == 45);
  opt.policy = {15, 0};
  CHECK(sample(counting, empty_cond(), s, {2, 4, 2, 2}, opt).evals.unet_forwards == 15);
}

TEST_CASE("full guidance at unit scales is bitwise the plain conditional run") {
  auto s = make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps);
  // model ignores conditioning, so all three guidance branches coincide
  ModelFn m = linear_toy_model(0.4, s);
  for (auto solver : {SolverKind::ddim, SolverKind::dpm, SolverKind::ddpm}) {
    SampleOptions guided;
    guided.solver = solver;
    guided.n_steps = 9;
    guided.scales = {1.0, 1.0};
    guided.policy = {9, 9};
    guided.seed = 4;
    SampleOptions plain = guided;
    plain.policy = {9, 0};
    auto a = sample(m, empty_cond(), s, {1, 4, 2, 2}, guided);
    auto b = sample(m, empty_cond(), s, {1, 4, 2, 2}, plain);
    CHECK(a.video.data.data() == b.video.data.data());
    CHECK(a.evals.unet_forwards == 27);
    CHECK(b.evals.unet_forwards == 9);
  }
}

TEST_CASE("eps prediction on a zero-terminal schedule is rejected") {
  auto s = rescale_zero_terminal_snr(make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps));
  ModelFn m = linear_toy_model(0.4, s);
  SampleOptions opt;
  opt.n_steps = 5;
  opt.policy = {5, 0};
  CHECK_THROWS_AS(sample(m, empty_cond(), s, {1, 4, 2, 2}, opt), std::invalid_argument);
}

TEST_CASE("sampling is bitwise deterministic in the seed") {
  auto s = rescale_zero_terminal_snr(make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::v));
  ModelFn m = linear_toy_model(0.3, s);
  for (auto solver : {SolverKind::ddim, SolverKind::dpm, SolverKind::ddpm}) {
    SampleOptions opt;
    opt.solver = solver;
    opt.n_steps = 7;
    opt.policy = {7, 3};
    opt.seed = 1234;
    auto a = sample(m, empty_cond(), s, {2, 4, 2, 2}, opt);
    auto b = sample(m, empty_cond(), s, {2, 4, 2, 2}, opt);
    CHECK(a.video.data.data() == b.video.data.data());
    opt.seed = 1235;
    auto c = sample(m, empty_cond(), s, {2, 4, 2, 2}, opt);
    CHECK(a.video.data.data() != c.video.data.data());
  }
}

TEST_CASE("first-order dpm step equals the ddim step") {
  Rng rng(17);
  Tensor z = Tensor::randn({8}, rng);
  Tensor x0 = Tensor::randn({8}, rng);
  const double lam_cur = -1.3, lam_next = -0.4;
  // consistent eps for this (z, x0) pair at lambda_cur
  const double ab = sigmoid(2.0 * lam_cur);
  Tensor eps = convert(x0, z, ab, Quantity::x0, Quantity::eps);
  Tensor a = ddim_step(z, x0, eps, lam_next);
  Tensor b = dpm_solver_step(z, x0, lam_cur, lam_next);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-10);
}

TEST_CASE("zero prediction: z scales purely by schedule coefficients") {
  auto s = make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps);
  ModelFn zero_x0 = [&s](const Tensor& z, double t, const ConditioningBundle&) {
    // x0 == 0 expressed as an eps prediction
    return convert(Tensor::zeros(z.shape()), z, s.alpha_bar_at(t), Quantity::x0, Quantity::eps);
  };
  SampleOptions opt;
  opt.solver = SolverKind::dpm;
  opt.n_steps = 6;
  opt.policy = {6, 0};
  opt.seed = 21;
  auto res = sample(zero_x0, empty_cond(), s, {1, 4, 2, 2}, opt);
  // product of sigma ratios telescopes; final sigma is 0
  for (double v : res.video.data.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  // interior check: one manual update with x0=0 scales by sigma ratio
  Rng rng(5);
  Tensor z = Tensor::randn({6}, rng);
  const double lam0 = -2.0, lam1 = -1.0;
  Tensor stepped = dpm_solver_step(z, Tensor::zeros({6}), lam0, lam1);
  const double ratio = std::sqrt(sigmoid(-2.0 * lam1)) / std::sqrt(sigmoid(-2.0 * lam0));
  for (int64_t i = 0; i < z.size(); ++i)
    CHECK(stepped.data()[i] == doctest::Approx(z.data()[i] * ratio).epsilon(1e-12));
}

TEST_CASE("linear toy denoiser: 15-step dpm beats 15-step ddim against the closed form") {
  auto s = make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps);
  const double c = 0.4;
  auto times = logsnr_linear_times(s, 15);
  std::vector<double> lams(times.size());
  for (size_t i = 0; i < times.size(); ++i) lams[i] = 0.5 * s.logsnr_at(times[i]);

  Rng rng(31);
  std::vector<double> unit(16);
  for (auto& v : unit) v = rng.uniform(-1.0, 1.0);
  Tensor z0 = Tensor::from_data({16}, std::move(unit));

  auto rollout = [&](bool second_order) {
    Tensor z = z0;
    Tensor x0_prev;
    bool have_prev = false;
    double lam_prev = 0.0;
    for (size_t i = 0; i + 1 < lams.size(); ++i) {
      Tensor x0 = scale(z, c);
      if (second_order) {
        z = dpm_solver_step(z, x0, lams[i], lams[i + 1], have_prev ? &x0_prev : nullptr, lam_prev);
      } else {
        const double ab = sigmoid(2.0 * lams[i]);
        Tensor eps = convert(x0, z, ab, Quantity::x0, Quantity::eps);
        z = ddim_step(z, x0, eps, lams[i + 1]);
      }
      x0_prev = x0;
      lam_prev = lams[i];
      have_prev = true;
    }
    return z;
  };

  // closed-form endpoint at the final grid lambda
  const double la = lams.front(), lb = lams.back();
  const double factor = std::sqrt(sigmoid(-2.0 * lb)) / std::sqrt(sigmoid(-2.0 * la)) *
                        std::exp(c * (std::asinh(std::exp(lb)) - std::asinh(std::exp(la))));

  Tensor dpm = rollout(true);
  Tensor ddim = rollout(false);
  double dpm_err = 0.0, ddim_err = 0.0;
  for (int64_t i = 0; i < z0.size(); ++i) {
    const double exact = z0.data()[i] * factor;
    dpm_err = std::max(dpm_err, std::abs(dpm.data()[i] - exact));
    ddim_err = std::max(ddim_err, std::abs(ddim.data()[i] - exact));
  }
  CHECK(dpm_err < 1e-3);
  CHECK(dpm_err < ddim_err);
}
