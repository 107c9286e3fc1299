#include "captoy/capacity.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "captoy/toy_data.hpp"

namespace captoy {
namespace {

DiagGaussian gauss1(double mean, double log_var) {
  return DiagGaussian(Vec{mean}, Vec{log_var});
}

std::vector<DiagGaussian> random_mixture_1d(int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DiagGaussian> out;
  for (int i = 0; i < count; ++i)
    out.push_back(gauss1(rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 0.5)));
  return out;
}

TEST(RAvg, StandardNormalPosteriorHasZeroRate) {
  const std::vector<DiagGaussian> posts{standard_normal(2), standard_normal(2)};
  EXPECT_EQ(r_avg(posts), 0.0);
}

TEST(Quadrature, IdenticalPosteriorsGiveZeroMiAndClosedFormMarginalKl) {
  const DiagGaussian q = gauss1(0.7, -0.4);
  const std::vector<DiagGaussian> posts{q, q, q};
  const CapacityReport rep = mi_quadrature(posts);
  EXPECT_EQ(rep.i_q, 0.0);
  EXPECT_TRUE(rep.reliable);
  EXPECT_NEAR(rep.aggregate_kl, kl_to_standard_normal(q), rep.error_bound + 1e-10);
  EXPECT_NEAR(rep.r_avg, kl_to_standard_normal(q), 1e-15);
}

TEST(Quadrature, WellSeparatedPairApproachesLogTwo) {
  const double log_var = 2.0 * std::log(0.5);
  const std::vector<DiagGaussian> posts{gauss1(-4.0, log_var), gauss1(4.0, log_var)};
  const CapacityReport rep = mi_quadrature(posts);
  EXPECT_NEAR(rep.i_q, std::log(2.0), 1e-6);
  const BoundCheck chk = check_flat_report(rep);
  EXPECT_TRUE(chk.pass);
}

TEST(Quadrature, MatchesMonteCarloOnRandomMixture) {
  const std::vector<DiagGaussian> posts = random_mixture_1d(8, 314159);
  const CapacityReport quad = mi_quadrature(posts);
  const CapacityReport mc = mi_monte_carlo(posts, 20000, 77);
  ASSERT_GT(mc.mc_std_err, 0.0);
  EXPECT_NEAR(quad.i_q, mc.i_q, 3.0 * mc.mc_std_err + quad.error_bound + 1e-9);
  EXPECT_NEAR(quad.r_avg, mc.r_avg, 1e-15);
}

TEST(Quadrature, DoublingResolutionStaysWithinReportedBound) {
  const std::vector<DiagGaussian> posts = random_mixture_1d(8, 2718);
  QuadratureOptions coarse;
  coarse.points_per_axis = 256;
  const CapacityReport rep_coarse = mi_quadrature(posts, coarse);
  const CapacityReport rep_fine = mi_quadrature(posts);
  EXPECT_LE(std::fabs(rep_fine.i_q - rep_coarse.i_q), rep_coarse.error_bound + 1e-12);
  EXPECT_LE(std::fabs(rep_fine.aggregate_kl - rep_coarse.aggregate_kl),
            rep_coarse.error_bound + 1e-12);
}

TEST(Quadrature, CoarseGridIsFlaggedUnreliable) {
  const double log_var = 2.0 * std::log(0.2);
  const std::vector<DiagGaussian> posts{gauss1(-3.0, log_var), gauss1(3.0, log_var)};
  QuadratureOptions opts;
  opts.points_per_axis = 8;
  const CapacityReport rep = mi_quadrature(posts, opts);
  EXPECT_FALSE(rep.reliable);
  EXPECT_GT(rep.error_bound, opts.tolerance);
}

TEST(Quadrature, RejectsBadInputs) {
  EXPECT_THROW(mi_quadrature({}), ConfigError);
  EXPECT_THROW(mi_quadrature({standard_normal(3)}), ConfigError);
  QuadratureOptions opts;
  opts.points_per_axis = 4;
  EXPECT_THROW(mi_quadrature({standard_normal(1)}, opts), ConfigError);
  const std::vector<DiagGaussian> too_many(4097, standard_normal(1));
  EXPECT_THROW(mi_quadrature(too_many), ConfigError);
}

TEST(Quadrature, TwoDimensionalIdentityHolds) {
  Rng rng(99);
  std::vector<DiagGaussian> posts;
  for (int i = 0; i < 4; ++i) {
    posts.push_back(DiagGaussian(Vec{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)},
                                 Vec{rng.uniform(-1.0, 0.3), rng.uniform(-1.0, 0.3)}));
  }
  QuadratureOptions opts;
  opts.points_per_axis = 128;
  const CapacityReport rep = mi_quadrature(posts, opts);
  EXPECT_TRUE(rep.reliable);
  const BoundCheck chk = check_flat_report(rep);
  EXPECT_TRUE(chk.pass) << (chk.failures.empty() ? "" : chk.failures.front());
}

TEST(MonteCarloMi, SingleExampleIsExactlyZero) {
  const std::vector<DiagGaussian> posts{gauss1(1.3, 0.2)};
  const CapacityReport rep = mi_monte_carlo(posts, 64, 5);
  EXPECT_EQ(rep.i_q, 0.0);
  EXPECT_EQ(rep.mc_std_err, 0.0);
  EXPECT_EQ(rep.aggregate_kl, rep.r_avg);
}

TEST(MonteCarloMi, DeterministicGivenSeed) {
  const std::vector<DiagGaussian> posts = random_mixture_1d(4, 12);
  const CapacityReport a = mi_monte_carlo(posts, 500, 42);
  const CapacityReport b = mi_monte_carlo(posts, 500, 42);
  const CapacityReport c = mi_monte_carlo(posts, 500, 43);
  EXPECT_EQ(a.i_q, b.i_q);
  EXPECT_EQ(a.mc_std_err, b.mc_std_err);
  EXPECT_NE(a.i_q, c.i_q);
}

TEST(FlatBounds, UntrainedModelSatisfiesInformationBounds) {
  ToySpec spec;
  spec.channels = 4;
  spec.num_text_classes = 3;
  spec.num_speakers = 2;
  spec.rng_seed = 21;
  spec.validate_and_default();
  const Dataset data = generate_dataset(spec, 16);

  ModelConfig cfg;
  cfg.channels = spec.channels;
  cfg.num_text_classes = spec.num_text_classes;
  cfg.num_speakers = spec.num_speakers;
  cfg.latent_dim = 1;
  cfg.hidden_dim = 16;
  const Model model(cfg, 7);

  const std::vector<DiagGaussian> posts = collect_posteriors(model, data);
  ASSERT_EQ(posts.size(), data.size());
  EXPECT_EQ(posts.front().dim(), 1);

  const BoundCheck chk = verify_flat_bounds(model, data);
  EXPECT_TRUE(chk.pass) << (chk.failures.empty() ? "" : chk.failures.front());
  EXPECT_TRUE(chk.report.reliable);
  EXPECT_LE(chk.report.error_bound, 1e-4);
}

TEST(FlatBounds, PerturbedReportFailsNegativeControl) {
  const std::vector<DiagGaussian> posts = random_mixture_1d(6, 8);
  CapacityReport rep = mi_quadrature(posts);
  ASSERT_TRUE(check_flat_report(rep).pass);

  CapacityReport broken_identity = rep;
  broken_identity.i_q += 0.5;
  const BoundCheck chk1 = check_flat_report(broken_identity);
  EXPECT_FALSE(chk1.pass);
  EXPECT_FALSE(chk1.failures.empty());

  CapacityReport negative_marginal = rep;
  negative_marginal.aggregate_kl = -1.0;
  EXPECT_FALSE(check_flat_report(negative_marginal).pass);
}

TEST(HierBounds, UntrainedModelSatisfiesBoundChain) {
  ToySpec spec;
  spec.channels = 4;
  spec.num_text_classes = 3;
  spec.num_speakers = 2;
  spec.rng_seed = 33;
  spec.validate_and_default();
  const Dataset data = generate_dataset(spec, 12);

  ModelConfig cfg;
  cfg.channels = spec.channels;
  cfg.num_text_classes = spec.num_text_classes;
  cfg.num_speakers = spec.num_speakers;
  cfg.latent_dim = 1;
  cfg.hidden_dim = 16;
  cfg.hierarchical = true;
  const Model model(cfg, 11);

  HierBoundOptions opts;
  opts.grid_points = 64;
  opts.marginal_samples = 64;
  opts.rate_samples = 64;
  opts.joint_mc_samples = 32;
  opts.seed = 3;
  const HierBoundCheck chk = verify_hier_bounds(model, data, opts);
  EXPECT_TRUE(chk.pass) << (chk.failures.empty() ? "" : chk.failures.front());
  EXPECT_GE(chk.q.r_avg_h, 0.0);
  EXPECT_GE(chk.q.i_q_zl, -1e-12);
  EXPECT_GE(chk.q.i_q_zh, -1e-9);
}

TEST(HierBounds, FlatModelThrows) {
  ToySpec spec;
  spec.channels = 4;
  spec.num_text_classes = 3;
  spec.num_speakers = 2;
  spec.validate_and_default();
  const Dataset data = generate_dataset(spec, 4);
  ModelConfig cfg;
  cfg.channels = spec.channels;
  cfg.num_text_classes = spec.num_text_classes;
  cfg.num_speakers = spec.num_speakers;
  cfg.latent_dim = 1;
  cfg.hidden_dim = 8;
  const Model model(cfg, 1);
  EXPECT_THROW(verify_hier_bounds(model, data), ConfigError);
}

TEST(Report, QuadratureTextFormat) {
  CapacityReport rep;
  rep.r_avg = 2.0;
  rep.i_q = 1.5;
  rep.aggregate_kl = 0.5;
  rep.method = MiMethod::quadrature;
  rep.grid.lo = Vec{-3.0};
  rep.grid.hi = Vec{3.0};
  rep.grid.points_per_axis = 512;
  rep.error_bound = 0.25;
  rep.reliable = true;
  std::ostringstream os;
  write_capacity_report(os, rep);
  EXPECT_EQ(os.str(),
            "r_avg=2\ni_q=1.5\naggregate_kl=0.5\nmethod=quadrature\n"
            "grid_points=512\ngrid_lo_0=-3\ngrid_hi_0=3\nerror_bound=0.25\nreliable=1\n");
}

TEST(Report, MonteCarloTextFormat) {
  CapacityReport rep;
  rep.r_avg = 1.0;
  rep.i_q = 0.75;
  rep.aggregate_kl = 0.25;
  rep.method = MiMethod::monte_carlo;
  rep.mc_std_err = 0.125;
  std::ostringstream os;
  write_capacity_report(os, rep);
  EXPECT_EQ(os.str(),
            "r_avg=1\ni_q=0.75\naggregate_kl=0.25\nmethod=monte_carlo\nmc_std_err=0.125\n");
}

}  // namespace
}  // namespace captoy
