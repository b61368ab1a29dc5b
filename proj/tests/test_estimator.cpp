#include <gtest/gtest.h>
TEST(Placeholder, test_estimator) { SUCCEED(); }
