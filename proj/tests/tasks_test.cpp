#include "captoy/tasks.hpp"

#include <gtest/gtest.h>

#include <vector>

namespace captoy {
namespace {

ToySpec small_spec(std::uint64_t seed) {
  ToySpec spec;
  spec.channels = 4;
  spec.num_text_classes = 3;
  spec.num_speakers = 2;
  spec.rng_seed = seed;
  spec.validate_and_default();
  return spec;
}

ModelConfig config_for(const ToySpec& spec, bool hierarchical) {
  ModelConfig cfg;
  cfg.channels = spec.channels;
  cfg.num_text_classes = spec.num_text_classes;
  cfg.num_speakers = spec.num_speakers;
  cfg.latent_dim = 2;
  cfg.hidden_dim = 12;
  cfg.hierarchical = hierarchical;
  return cfg;
}

TEST(Transfer, FlatSamplesAreIdenticalDecodes) {
  const ToySpec spec = small_spec(5);
  const Dataset data = generate_dataset(spec, 2);
  const Model model(config_for(spec, false), 3);
  TransferJob job;
  job.reference = data[0];
  job.target_y_t = data[0].y_t;
  job.target_y_s = data[0].y_s;
  job.num_samples = 3;
  const std::vector<Matrix> outs = transfer(model, job, 40);
  ASSERT_EQ(outs.size(), 3u);
  EXPECT_EQ(outs[0], outs[1]);
  EXPECT_EQ(outs[0], outs[2]);
  EXPECT_EQ(outs[0].cols(), spec.channels);
}

TEST(Transfer, FixedSeedIsBitReproducible) {
  const ToySpec spec = small_spec(6);
  const Dataset data = generate_dataset(spec, 2);
  const Model model(config_for(spec, true), 4);
  TransferJob job;
  job.reference = data[0];
  job.latent_level = LatentLevel::via_z_l;
  job.num_samples = 2;
  job.seed = 17;
  const std::vector<Matrix> a = transfer(model, job, 40);
  const std::vector<Matrix> b = transfer(model, job, 40);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);

  job.seed = 18;
  const std::vector<Matrix> c = transfer(model, job, 40);
  EXPECT_NE(a[0], c[0]);
}

TEST(Transfer, HierarchicalLevelsDrawDistinctSamples) {
  const ToySpec spec = small_spec(7);
  const Dataset data = generate_dataset(spec, 2);
  const Model model(config_for(spec, true), 9);
  for (LatentLevel level : {LatentLevel::via_z_h, LatentLevel::via_z_l}) {
    TransferJob job;
    job.reference = data[0];
    job.latent_level = level;
    job.num_samples = 2;
    const std::vector<Matrix> outs = transfer(model, job, 40);
    ASSERT_EQ(outs.size(), 2u);
    EXPECT_NE(outs[0], outs[1]);
  }
}

TEST(Transfer, ValidatesLevelAndCounts) {
  const ToySpec spec = small_spec(8);
  const Dataset data = generate_dataset(spec, 1);
  const Model flat_model(config_for(spec, false), 2);
  TransferJob job;
  job.reference = data[0];
  job.latent_level = LatentLevel::via_z_h;
  EXPECT_THROW(transfer(flat_model, job, 40), ConfigError);
  job.latent_level = LatentLevel::flat;
  job.num_samples = 0;
  EXPECT_THROW(transfer(flat_model, job, 40), ConfigError);
  job.num_samples = 1;
  EXPECT_THROW(transfer(flat_model, job, 0), ConfigError);
}

TEST(Transfer, DoesNotMutateModelParameters) {
  const ToySpec spec = small_spec(9);
  const Dataset data = generate_dataset(spec, 1);
  const Model model(config_for(spec, true), 5);
  std::vector<Matrix> before;
  for (std::size_t i = 0; i < model.params().count(); ++i)
    before.push_back(model.params().param(i).value);
  TransferJob job;
  job.reference = data[0];
  job.latent_level = LatentLevel::via_z_h;
  job.num_samples = 3;
  transfer(model, job, 40);
  for (std::size_t i = 0; i < model.params().count(); ++i)
    EXPECT_EQ(model.params().param(i).value, before[i]);
}

TEST(Transfer, MaxLenCapsFreeRunningOutput) {
  const ToySpec spec = small_spec(10);
  const Dataset data = generate_dataset(spec, 1);
  const Model model(config_for(spec, false), 6);
  TransferJob job;
  job.reference = data[0];
  const std::vector<Matrix> outs = transfer(model, job, 2);
  ASSERT_EQ(outs.size(), 1u);
  EXPECT_LE(outs[0].rows(), 2);
}

TEST(PriorSample, ZeroCountGivesEmptyList) {
  const ToySpec spec = small_spec(11);
  const Model model(config_for(spec, false), 1);
  EXPECT_TRUE(prior_sample(model, 0, 0, 0, 1, 40).empty());
}

TEST(PriorSample, DeterministicAndShaped) {
  const ToySpec spec = small_spec(12);
  for (bool hier : {false, true}) {
    const Model model(config_for(spec, hier), 2);
    const std::vector<Matrix> a = prior_sample(model, 1, 0, 2, 33, 40);
    const std::vector<Matrix> b = prior_sample(model, 1, 0, 2, 33, 40);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0], b[0]);
    EXPECT_EQ(a[1], b[1]);
    EXPECT_NE(a[0], a[1]);
    EXPECT_EQ(a[0].cols(), spec.channels);
    EXPECT_GE(a[0].rows(), 1);
  }
}

TEST(PriorSample, HeuristicBottleneckThrows) {
  const ToySpec spec = small_spec(13);
  ModelConfig cfg = config_for(spec, false);
  cfg.bottleneck = Bottleneck::tanh_heuristic;
  const Model model(cfg, 3);
  EXPECT_THROW(prior_sample(model, 0, 0, 1, 1, 40), ConfigError);
}

TEST(EvaluateTransfer, PerfectCopyOracleScoresZero) {
  const ToySpec spec = small_spec(14);
  const Dataset data = generate_dataset(spec, 6);
  const TransferSummary sum = evaluate_transfer_with(
      [](const Utterance& u, int) { return std::vector<Matrix>(3, u.frames); }, data);
  EXPECT_EQ(sum.ref_dist, 0.0);
  EXPECT_EQ(sum.inter_sample, 0.0);
  EXPECT_EQ(sum.count, 6);
}

TEST(EvaluateTransfer, InterSampleComparesFirstAgainstRest) {
  const ToySpec spec = small_spec(15);
  Dataset data = generate_dataset(spec, 1);
  Matrix first(1, spec.channels), second(1, spec.channels), third(1, spec.channels);
  second(0, 0) = 3.0;  // distance 3 from first
  third(0, 1) = 4.0;   // distance 4 from first
  const TransferSummary sum = evaluate_transfer_with(
      [&](const Utterance&, int) {
        return std::vector<Matrix>{first, second, third};
      },
      data);
  EXPECT_DOUBLE_EQ(sum.inter_sample, 3.5);
}

TEST(EvaluateTransfer, RunsEndToEndOnModel) {
  const ToySpec spec = small_spec(16);
  const Dataset data = generate_dataset(spec, 4);
  const Model model(config_for(spec, true), 21);
  TransferEvalOptions opts;
  opts.latent_level = LatentLevel::via_z_l;
  opts.num_samples = 3;
  const TransferSummary sum = evaluate_transfer(model, data, opts);
  EXPECT_EQ(sum.count, 4);
  EXPECT_GT(sum.ref_dist, 0.0);
  EXPECT_GT(sum.inter_sample, 0.0);

  const TransferSummary again = evaluate_transfer(model, data, opts);
  EXPECT_EQ(sum.ref_dist, again.ref_dist);
  EXPECT_EQ(sum.inter_sample, again.inter_sample);
}

TEST(FreeRunningCap, TwiceTheLongestUtterance) {
  const ToySpec spec = small_spec(17);
  const Dataset data = generate_dataset(spec, 8);
  int longest = 0;
  for (const Utterance& u : data) longest = std::max(longest, u.length());
  EXPECT_EQ(free_running_cap(data), 2 * longest);
}

}  // namespace
}  // namespace captoy
