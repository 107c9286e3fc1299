#include "captoy/toy_data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

using namespace captoy;

namespace {

ToySpec default_spec(std::uint64_t seed = 99) {
  ToySpec s;
  s.rng_seed = seed;
  s.validate_and_default();
  return s;
}

bool utterances_equal(const Utterance& a, const Utterance& b) {
  return a.frames == b.frames && a.y_t == b.y_t && a.y_s == b.y_s &&
         a.truth.amplitude == b.truth.amplitude && a.truth.tempo == b.truth.tempo &&
         a.truth.offset == b.truth.offset;
}

}  // namespace

TEST(ToySpec, DefaultBaseLengthsAreDistinctAndInRange) {
  const ToySpec s = default_spec();
  ASSERT_EQ(s.base_lengths.size(), 10u);
  for (int b : s.base_lengths) {
    EXPECT_GE(b, 12);
    EXPECT_LE(b, 40);
  }
  EXPECT_NE(s.base_lengths[0], s.base_lengths[9]);
}

TEST(ToySpec, RejectsDegenerateConfigs) {
  ToySpec s;
  s.num_text_classes = 1;
  EXPECT_THROW(s.validate_and_default(), ConfigError);

  ToySpec flat;
  flat.base_lengths.assign(10, 20);
  EXPECT_THROW(flat.validate_and_default(), ConfigError);

  ToySpec range;
  range.base_lengths = {12, 50, 12, 12, 12, 12, 12, 12, 12, 12};
  EXPECT_THROW(range.validate_and_default(), ConfigError);
}

TEST(ToyData, SameSeedGivesBitIdenticalDatasets) {
  const ToySpec s = default_spec(7);
  const Dataset a = generate_dataset(s, 50);
  const Dataset b = generate_dataset(s, 50);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(utterances_equal(a[i], b[i]));
}

TEST(ToyData, DifferentSeedsDiffer) {
  const Dataset a = generate_dataset(default_spec(1), 5);
  const Dataset b = generate_dataset(default_spec(2), 5);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!utterances_equal(a[i], b[i])) any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(ToyData, LengthsFollowTempoRule) {
  const ToySpec s = default_spec(13);
  const Dataset data = generate_dataset(s, 200);
  for (const Utterance& u : data) {
    EXPECT_GE(u.truth.tempo, 0.75);
    EXPECT_LE(u.truth.tempo, 1.25);
    const int expected =
        static_cast<int>(std::lround(s.base_lengths[static_cast<std::size_t>(u.y_t)] * u.truth.tempo));
    EXPECT_EQ(u.length(), expected);
    EXPECT_TRUE(u.frames.all_finite());
  }
}

TEST(ToyData, ClassFrequenciesWithinBinomialInterval) {
  const ToySpec s = default_spec(8);
  const Dataset data = generate_dataset(s, 1000);
  std::vector<int> counts(10, 0);
  for (const Utterance& u : data) counts[static_cast<std::size_t>(u.y_t)]++;
  // Binomial(1000, 0.1): mean 100, sd ~9.49; 99% two-sided interval ~[75, 125].
  for (int c : counts) {
    EXPECT_GE(c, 75);
    EXPECT_LE(c, 125);
  }
}

TEST(ToyData, NoiselessSynthesisEqualsTemplatePlusOffset) {
  const ToySpec s = default_spec(21);
  const ToyTables tables = build_tables(s);
  const Matrix frames = synth_frames(s, tables, 3, 1, 1.0, 1.0, nullptr);
  ASSERT_EQ(frames.rows(), s.base_lengths[3]);
  for (int t = 0; t < frames.rows(); ++t) {
    const double u = static_cast<double>(t) / frames.rows();
    for (int d = 0; d < s.channels; ++d) {
      const double expected = template_value(tables, 3, d, u) + tables.offset(1, d);
      EXPECT_DOUBLE_EQ(frames(t, d), expected);
    }
  }
}

TEST(ToyData, AmplitudeScalesTemplateOnly) {
  const ToySpec s = default_spec(22);
  const ToyTables tables = build_tables(s);
  const Matrix one = synth_frames(s, tables, 0, 0, 1.0, 1.0, nullptr);
  const Matrix two = synth_frames(s, tables, 0, 0, 2.0, 1.0, nullptr);
  for (int t = 0; t < one.rows(); ++t)
    for (int d = 0; d < s.channels; ++d) {
      const double tmpl = one(t, d) - tables.offset(0, d);
      EXPECT_NEAR(two(t, d), 2.0 * tmpl + tables.offset(0, d), 1e-12);
    }
}

TEST(ToyData, SplitIsDisjointAndOrderStable) {
  const Dataset data = generate_dataset(default_spec(8), 100);
  const auto [train, test] = split(data, 0.9);
  EXPECT_EQ(train.size(), 90u);
  EXPECT_EQ(test.size(), 10u);
  for (std::size_t i = 0; i < train.size(); ++i)
    EXPECT_TRUE(utterances_equal(train[i], data[i]));
  for (std::size_t i = 0; i < test.size(); ++i)
    EXPECT_TRUE(utterances_equal(test[i], data[90 + i]));
  EXPECT_THROW(split(data, 0.0), ConfigError);
  EXPECT_THROW(split(data, 1.0), ConfigError);
}

TEST(ToyDataIO, RoundTripIsBitExact) {
  ToySpec s = default_spec(77);
  const Dataset data = generate_dataset(s, 20);
  std::stringstream buf;
  write_dataset(buf, s, data);
  const auto [spec2, data2] = read_dataset(buf, "test buffer");
  EXPECT_EQ(spec2.channels, s.channels);
  EXPECT_EQ(spec2.num_text_classes, s.num_text_classes);
  EXPECT_EQ(spec2.num_speakers, s.num_speakers);
  EXPECT_EQ(spec2.base_lengths, s.base_lengths);
  EXPECT_EQ(spec2.rng_seed, s.rng_seed);
  ASSERT_EQ(data2.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_TRUE(utterances_equal(data[i], data2[i]));
}

TEST(ToyDataIO, TruncatedFileReportsByteOffset) {
  ToySpec s = default_spec(78);
  const Dataset data = generate_dataset(s, 3);
  std::stringstream buf;
  write_dataset(buf, s, data);
  const std::string full = buf.str();
  std::stringstream cut(full.substr(0, full.size() / 2));
  try {
    read_dataset(cut, "cut buffer");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
  }
}

TEST(ToyDataIO, BadMagicRejected) {
  std::stringstream buf;
  buf << "NOTDATA" << std::string(64, '\0');
  EXPECT_THROW(read_dataset(buf, "bogus"), DataError);
}

TEST(ToyDataIO, OutOfRangeLabelRejected) {
  ToySpec s = default_spec(79);
  Dataset data = generate_dataset(s, 1);
  data[0].y_t = 99;
  std::stringstream buf;
  write_dataset(buf, s, data);
  EXPECT_THROW(read_dataset(buf, "corrupt"), DataError);
}
