#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "pix2seq/codec.hpp"

namespace pix2seq {
namespace {

TEST(QuantizeTest, Endpoints) {
  EXPECT_EQ(quantize_coord(0.0, 1000), 0);
  EXPECT_EQ(quantize_coord(1.0, 1000), 999);
  EXPECT_EQ(quantize_coord(0.5, 1000), 499);
  EXPECT_DOUBLE_EQ(dequantize_coord(0, 1000), 0.0);
  EXPECT_DOUBLE_EQ(dequantize_coord(999, 1000), 1.0);
  EXPECT_NEAR(dequantize_coord(499, 1000), 499.0 / 999.0, 1e-15);
  EXPECT_NEAR(dequantize_coord(499, 1000), 0.4994994, 1e-7);
}

TEST(QuantizeTest, DomainErrors) {
  EXPECT_THROW(quantize_coord(-0.01, 10), std::domain_error);
  EXPECT_THROW(quantize_coord(1.01, 10), std::domain_error);
  EXPECT_THROW(quantize_coord(0.5, 1), std::domain_error);
  EXPECT_THROW(dequantize_coord(10, 10), std::domain_error);
  EXPECT_THROW(dequantize_coord(-1, 10), std::domain_error);
}

TEST(QuantizeTest, RoundTripAndMonotonicityProperty) {
  Rng rng(7);
  for (int i = 0; i < 20000; ++i) {
    const int n = static_cast<int>(rng.between(2, 2000));
    const double x = rng.uniform();
    const double y = rng.uniform();
    const int kx = quantize_coord(x, n);
    ASSERT_LT(std::abs(dequantize_coord(kx, n) - x), 1.0 / (n - 1));
    if (x <= y) { ASSERT_LE(kx, quantize_coord(y, n)); }
  }
}

TEST(VocabularyTest, LayoutAndPartition) {
  const Vocabulary v(1000, 80);
  EXPECT_EQ(v.size(), 1083);
  EXPECT_EQ(v.coord_token(0), 1);
  EXPECT_EQ(v.coord_token(999), 1000);
  EXPECT_EQ(v.class_token(0), 1001);
  EXPECT_EQ(v.noise_token(), 1081);
  EXPECT_EQ(v.na_token(), 1082);
  const Vocabulary small(5, 2);
  for (Token t = 0; t < small.size(); ++t) {
    const int hits = small.is_eos(t) + small.is_coord(t) + small.is_class(t) + small.is_noise(t) + small.is_na(t);
    EXPECT_EQ(hits, 1) << "token " << t;
  }
  EXPECT_THROW(small.kind(small.size()), std::domain_error);
}

TEST(EncodeObjectTest, Examples) {
  const Vocabulary v1000(1000, 3);
  EXPECT_EQ(encode_object({{0.2, 0.3, 0.6, 0.9}, 2}, v1000), (std::vector<Token>{200, 300, 600, 900, 1003}));
  EXPECT_EQ(encode_object({{0, 0, 1, 1}, 0}, v1000), (std::vector<Token>{1, 1, 1000, 1000, 1001}));
  const Vocabulary v10(10, 3);
  EXPECT_EQ(encode_object({{0.5, 0.5, 0.5, 0.5}, 0}, v10), (std::vector<Token>{5, 5, 5, 5, 11}));
}

TEST(OrderObjectsTest, DeterministicStrategies) {
  Rng rng(1);
  // areas 0.06 and 0.12
  std::vector<AnnotatedObject> objs{{{0.0, 0.0, 0.2, 0.3}, 0}, {{0.0, 0.0, 0.3, 0.4}, 1}};
  EXPECT_EQ(order_indices(objs, OrderingStrategy::area, rng), (std::vector<std::size_t>{1, 0}));

  std::vector<AnnotatedObject> corners{{{0.5, 0.5, 0.6, 0.6}, 0}, {{0.1, 0.1, 0.2, 0.2}, 0}};
  EXPECT_EQ(order_indices(corners, OrderingStrategy::dist2ori, rng), (std::vector<std::size_t>{1, 0}));

  for (auto s : kAllOrderings) EXPECT_TRUE(order_objects({}, s, rng).empty());
}

TEST(OrderObjectsTest, CompoundKeysAndStableTies) {
  Rng rng(1);
  std::vector<AnnotatedObject> objs{
      {{0.1, 0.1, 0.2, 0.2}, 1},  // small, class 1
      {{0.0, 0.0, 0.5, 0.5}, 1},  // large, class 1
      {{0.3, 0.3, 0.4, 0.4}, 0},
      {{0.3, 0.3, 0.4, 0.4}, 0},  // exact tie with 2
  };
  EXPECT_EQ(order_indices(objs, OrderingStrategy::class_id, rng), (std::vector<std::size_t>{2, 3, 0, 1}));
  EXPECT_EQ(order_indices(objs, OrderingStrategy::class_area, rng), (std::vector<std::size_t>{2, 3, 1, 0}));
  EXPECT_EQ(order_indices(objs, OrderingStrategy::class_dist2ori, rng), (std::vector<std::size_t>{2, 3, 1, 0}));

  const std::vector<std::string> names{"zebra", "apple"};
  EXPECT_EQ(order_indices(objs, OrderingStrategy::class_id, rng, &names), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(OrderObjectsTest, EveryStrategyIsAPermutation) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<AnnotatedObject> objs;
    const auto n = rng.below(12);
    for (std::uint64_t i = 0; i < n; ++i) {
      double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
      objs.push_back({{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)}, static_cast<int>(rng.below(4))});
    }
    for (auto s : kAllOrderings) {
      auto idx = order_indices(objs, s, rng);
      std::sort(idx.begin(), idx.end());
      for (std::size_t i = 0; i < idx.size(); ++i) ASSERT_EQ(idx[i], i);
    }
  }
}

TEST(OrderObjectsTest, RandomIsSeedReproducible) {
  std::vector<AnnotatedObject> objs(8);
  for (int i = 0; i < 8; ++i) objs[i].class_id = i;
  Rng a(42), b(42);
  EXPECT_EQ(order_objects(objs, OrderingStrategy::random, a), order_objects(objs, OrderingStrategy::random, b));
}

TEST(ConstructSequenceTest, Examples) {
  const Vocabulary v(1000, 3);
  Rng rng(0);
  auto one = construct_sequence({{{0.2, 0.3, 0.6, 0.9}, 2}}, v, OrderingStrategy::area, rng);
  EXPECT_EQ(one.target, (std::vector<Token>{200, 300, 600, 900, 1003, 0}));
  EXPECT_EQ(one.input, one.target);

  auto empty = construct_sequence({}, v, OrderingStrategy::random, rng);
  EXPECT_EQ(empty.target, std::vector<Token>{0});
  EXPECT_EQ(empty.weights, std::vector<float>{1.0f});

  auto two = construct_sequence({{{0.1, 0.1, 0.2, 0.2}, 0}, {{0.3, 0.3, 0.4, 0.4}, 1}}, v, OrderingStrategy::random, rng);
  EXPECT_EQ(two.size(), 11u);
  EXPECT_EQ(two.target.back(), 0);
  EXPECT_EQ(two.weights.size(), 11u);
}

TEST(ParseSequenceTest, Examples) {
  const Vocabulary v(1000, 3);
  auto parsed = parse_sequence({200, 300, 600, 900, 1003, 0}, v);
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_NEAR(parsed[0].box.y_min, 199.0 / 999, 1e-12);
  EXPECT_NEAR(parsed[0].box.x_min, 299.0 / 999, 1e-12);
  EXPECT_NEAR(parsed[0].box.y_max, 599.0 / 999, 1e-12);
  EXPECT_NEAR(parsed[0].box.x_max, 899.0 / 999, 1e-12);
  EXPECT_NEAR(parsed[0].box.y_min, 0.1992, 1e-4);
  EXPECT_EQ(parsed[0].class_token, 1003);

  EXPECT_TRUE(parse_sequence({0}, v).empty());
  EXPECT_TRUE(parse_sequence({200, 300, 600, 0}, v).empty());
  EXPECT_TRUE(parse_sequence({}, v).empty());
}

TEST(ParseSequenceTest, DropsMalformedAndRepairsInverted) {
  const Vocabulary v(10, 2);
  // class token in coordinate slot -> dropped; second tuple inverted -> swapped
  const std::vector<Token> tokens{11, 2, 3, 4, 11, 8, 9, 2, 3, 12, 5, 5, 5, 5, 13, 0, 1, 1, 2, 2, 11};
  auto parsed = parse_sequence(tokens, v);
  ASSERT_EQ(parsed.size(), 2u);
  EXPECT_EQ(parsed[0].slot, 1u);
  EXPECT_LE(parsed[0].box.y_min, parsed[0].box.y_max);
  EXPECT_LE(parsed[0].box.x_min, parsed[0].box.x_max);
  EXPECT_NEAR(parsed[0].box.y_min, 1.0 / 9, 1e-12);
  EXPECT_NEAR(parsed[0].box.y_max, 7.0 / 9, 1e-12);
  EXPECT_TRUE(v.is_noise(parsed[1].class_token));
}

TEST(ParseSequenceTest, CodecRoundTripProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int n_bins = static_cast<int>(rng.between(2, 2000));
    const Vocabulary v(n_bins, 5);
    std::vector<AnnotatedObject> objs;
    const auto n = rng.below(20);
    for (std::uint64_t i = 0; i < n; ++i) {
      double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
      objs.push_back({{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)}, static_cast<int>(rng.below(5))});
    }
    const auto seq = construct_sequence(objs, v, OrderingStrategy::area, rng);
    const auto parsed = parse_sequence(seq.target, v);
    ASSERT_EQ(parsed.size(), objs.size());
    Rng unused(0);
    const auto ordered = order_objects(objs, OrderingStrategy::area, unused);
    for (std::size_t i = 0; i < parsed.size(); ++i) {
      ASSERT_EQ(v.class_of(parsed[i].class_token), ordered[i].class_id);
      const double tol = 1.0 / (n_bins - 1);
      ASSERT_LT(std::abs(parsed[i].box.y_min - ordered[i].box.y_min), tol);
      ASSERT_LT(std::abs(parsed[i].box.x_max - ordered[i].box.x_max), tol);
    }
  }
}

TEST(TokenLinesTest, GoldenFormat) {
  std::ostringstream os;
  write_token_lines(os, {{200, 300, 600, 900, 1003, 0}, {0}});
  EXPECT_EQ(os.str(), "200 300 600 900 1003 0\n0\n");
  std::istringstream is(os.str());
  EXPECT_EQ(read_token_lines(is), (std::vector<std::vector<Token>>{{200, 300, 600, 900, 1003, 0}, {0}}));
  std::istringstream bad("1 2 x\n");
  EXPECT_THROW(read_token_lines(bad), std::runtime_error);
}

}  // namespace
}  // namespace pix2seq
