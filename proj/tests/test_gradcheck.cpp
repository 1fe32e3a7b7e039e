#include <gtest/gtest.h>

#include <cmath>

#include "adept/gradcheck.hpp"

using namespace adept;

TEST(GradCheck, EveryOpSuitePasses) {
  const auto results = gradcheck::run_all(1, "", 20);
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_EQ(r.instances, 20u) << r.op;
    EXPECT_LT(r.worst, gradcheck::kTolerance) << r.op;
  }
}

TEST(GradCheck, InjectedFaultIsDetected) {
  const auto results = gradcheck::run_all(1, "corrupted_square", 5, true);
  ASSERT_EQ(results.size(), 1u);
  EXPECT_FALSE(results[0].passed());
  EXPECT_GT(results[0].worst, 0.01);
}

TEST(GradCheck, FilterSelectsBySubstring) {
  const auto results = gradcheck::run_all(3, "softmax", 2);
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) EXPECT_NE(r.op.find("softmax"), std::string::npos);
  EXPECT_TRUE(gradcheck::run_all(3, "no_such_op", 2).empty());
}

TEST(GradCheck, RelativeErrorDefinition) {
  const std::vector<double> a{1.0, 2.0}, n{1.0, 2.0}, m{1.0, 2.2};
  EXPECT_EQ(gradcheck::relative_error(a, n), 0.0);
  EXPECT_NEAR(gradcheck::relative_error(a, m), 0.2 / (std::sqrt(5.0) + std::sqrt(1.0 + 4.84)), 1e-12);
}
