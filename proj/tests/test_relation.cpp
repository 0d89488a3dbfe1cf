#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "relt/error.hpp"
#include "relt/relation.hpp"

using namespace relt;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> init) {
  const std::size_t r = init.size(), c = init.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : init) {
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

constexpr double kHot = 0.7310585786300049;   // e / (1 + e)
constexpr double kCold = 0.2689414213699951;  // 1 / (1 + e)

}  // namespace

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_matrix(rows({{1, 0}}), rows({{1, 0}}))(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cosine_matrix(rows({{1, 0}}), rows({{0, 1}}))(0, 0), 0.0);
  EXPECT_NEAR(cosine_matrix(rows({{1, 0}}), rows({{0.6, 0.8}}))(0, 0), 0.6, 1e-15);
}

TEST(Cosine, ClampedAndChecked) {
  const Matrix a = rows({{1.0000001, 0}});
  EXPECT_EQ(cosine_matrix(a, a)(0, 0), 1.0);
  EXPECT_THROW(cosine_matrix(rows({{1, 0}}), rows({{1, 0, 0}})), Error);
}

TEST(Softmax, Examples) {
  const Vector p = softmax(std::vector<double>{1, 0}, 1.0);
  EXPECT_NEAR(p[0], kHot, 1e-6);
  EXPECT_NEAR(p[1], kCold, 1e-6);
  const Vector u = softmax(std::vector<double>{2.5, 2.5, 2.5, 2.5}, 0.03);
  for (double v : u) EXPECT_DOUBLE_EQ(v, 0.25);
  const Vector sharp = softmax(std::vector<double>{1, 0}, 0.01);
  EXPECT_NEAR(sharp[0], 1.0, 1e-15);
  EXPECT_NEAR(sharp[1] / std::exp(-100.0), 1.0, 1e-12);
}

TEST(Softmax, Errors) {
  EXPECT_THROW(softmax(std::vector<double>{1, 2}, 0.0), Error);
  EXPECT_THROW(softmax(std::vector<double>{1, 2}, -1.0), Error);
  EXPECT_THROW(softmax(std::vector<double>{}, 1.0), Error);
  EXPECT_THROW(softmax(std::vector<double>{1, NAN}, 1.0), Error);
}

TEST(Softmax, ShiftInvariance) {
  // Dyadic values and integer shifts keep every subtraction exact, so the
  // stabilized result is bitwise identical.
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> q(-4096, 4096);
  for (int trial = 0; trial < 200; ++trial) {
    Vector v(7), w(7);
    const double c = q(gen);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = q(gen) / 1024.0;
      w[i] = v[i] + c;
    }
    EXPECT_EQ(softmax(v, 0.5), softmax(w, 0.5));
  }
  // Arbitrary reals: equal up to rounding of the shifted inputs.
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Vector v(9), w(9);
    const double c = 10 * n(gen);
    for (std::size_t i = 0; i < v.size(); ++i) w[i] = (v[i] = n(gen)) + c;
    const Vector a = softmax(v, 0.1), b = softmax(w, 0.1);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Softmax, MatchesLongDoubleOracle) {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> n(0, 1);
  for (double t : {0.01, 0.1, 1.0, 5.0}) {
    Vector v(12);
    for (double& x : v) x = n(gen);
    const Vector got = softmax(v, t), want = oracle::softmax(v, t);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
  }
}

TEST(Relation, SingleAnchorRowsAreOne) {
  std::mt19937_64 gen(1);
  const auto r = anchor_target_relation(testutil::random_unit_rows(5, 4, gen),
                                        testutil::random_unit_rows(1, 4, gen), 0.01);
  EXPECT_EQ(r.normalization, Normalization::over_anchors);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.values(i, 0), 1.0);
}

TEST(Relation, IdentityExamples) {
  const Matrix id = Matrix::identity(2);
  for (const auto& r :
       {anchor_target_relation(id, id, 1.0), target_normalized_relation(id, id, 1.0)}) {
    EXPECT_NEAR(r.values(0, 0), kHot, 1e-6);
    EXPECT_NEAR(r.values(0, 1), kCold, 1e-6);
    EXPECT_NEAR(r.values(1, 0), kCold, 1e-6);
    EXPECT_NEAR(r.values(1, 1), kHot, 1e-6);
  }
  const auto sharp = anchor_target_relation(id, id, 0.01);
  EXPECT_LT(sharp.values(0, 1), 1e-40);
  EXPECT_NEAR(sharp.values(0, 0), 1.0, 1e-40);
}

TEST(Relation, SingleTargetColumnsAreOne) {
  std::mt19937_64 gen(2);
  const auto r = target_normalized_relation(testutil::random_unit_rows(1, 6, gen),
                                            testutil::random_unit_rows(4, 6, gen), 0.01);
  EXPECT_EQ(r.normalization, Normalization::over_targets);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.values(0, j), 1.0);
}

TEST(Relation, OrthogonalSelfRelationIsIdentity) {
  const Matrix id = Matrix::identity(16);
  const auto r = anchor_target_relation(id, id, 0.01);
  double off = 0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      if (i != j) off = std::max(off, r.values(i, j));
  EXPECT_LT(off, 1e-20);
}

TEST(Relation, StochasticityOnLargeShapes) {
  std::mt19937_64 gen(4);
  struct Shape { std::size_t c_tar, c_anc, dim; };
  for (const Shape s : {Shape{1, 1, 3}, Shape{7, 3, 5}, Shape{64, 80, 128}, Shape{256, 100, 512}}) {
    const Matrix t = testutil::random_unit_rows(s.c_tar, s.dim, gen);
    const Matrix a = testutil::random_unit_rows(s.c_anc, s.dim, gen);
    for (double tau : {0.01, 1.0}) {
      const auto set = build_relation_set(t, a, tau);
      for (std::size_t i = 0; i < s.c_tar; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < s.c_anc; ++j) {
          row += set.over_anchors.values(i, j);
          EXPECT_GT(set.over_anchors.values(i, j), 0.0);
          EXPECT_LE(set.over_anchors.values(i, j), 1.0);
        }
        EXPECT_NEAR(row, 1.0, 1e-9);
      }
      for (std::size_t j = 0; j < s.c_anc; ++j) {
        double col = 0;
        for (std::size_t i = 0; i < s.c_tar; ++i) col += set.over_targets.values(i, j);
        EXPECT_NEAR(col, 1.0, 1e-9);
      }
    }
  }
}

TEST(Relation, SetMatchesSeparateBuildsAndCountsOnce) {
  std::mt19937_64 gen(6);
  const Matrix t = testutil::random_unit_rows(6, 8, gen), a = testutil::random_unit_rows(5, 8, gen);
  const auto before = relation_build_count();
  const auto set = build_relation_set(t, a, 0.05);
  EXPECT_EQ(relation_build_count() - before, 1u);
  EXPECT_EQ(set.over_anchors.values, anchor_target_relation(t, a, 0.05).values);
  EXPECT_EQ(set.over_targets.values, target_normalized_relation(t, a, 0.05).values);
  EXPECT_EQ(relation_build_count() - before, 3u);
  normalize_relation(cosine_matrix(t, a), Normalization::over_anchors, 0.05);
  EXPECT_EQ(relation_build_count() - before, 3u);
}

TEST(ImageAnchor, Examples) {
  const Matrix id = Matrix::identity(2);
  const Vector p = image_anchor_relation(std::vector<double>{1, 0}, id, 1.0);
  EXPECT_NEAR(p[0], kHot, 1e-6);
  EXPECT_NEAR(p[1], kCold, 1e-6);

  const double s = 1 / std::sqrt(2.0);
  const Vector u = image_anchor_relation(std::vector<double>{s, s}, id, 0.01);
  EXPECT_NEAR(u[0], 0.5, 1e-15);
  EXPECT_NEAR(u[1], 0.5, 1e-15);

  const Matrix id4 = Matrix::identity(4);
  const Vector hot = image_anchor_relation(id4.row(0), id4, 0.01);
  EXPECT_NEAR(hot[0], 1.0, 1e-20);
  EXPECT_THROW(image_anchor_relation(std::vector<double>{1, 0, 0}, id, 1.0), Error);
}

TEST(Balance, Examples) {
  RelationMatrix r{Matrix::identity(2), Normalization::over_targets, 1.0};
  EXPECT_NEAR(marginal_balance(r), 1.0, 1e-15);
  RelationMatrix degenerate{rows({{1, 1}, {0, 0}}), Normalization::over_targets, 1.0};
  EXPECT_EQ(marginal_balance(degenerate), 0.0);
  RelationMatrix wrong{Matrix::identity(2), Normalization::over_anchors, 1.0};
  EXPECT_THROW(marginal_balance(wrong), Error);
}

TEST(Balance, BoundedAndOneOnlyWhenUniform) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = target_normalized_relation(testutil::random_unit_rows(6, 5, gen),
                                              testutil::random_unit_rows(9, 5, gen), 0.2);
    const double b = marginal_balance(r);
    EXPECT_GE(b, 0.0);
    EXPECT_LT(b, 1.0);
  }
  RelationMatrix uniform{Matrix(4, 3, 0.25), Normalization::over_targets, 1.0};
  EXPECT_NEAR(marginal_balance(uniform), 1.0, 1e-15);
}

TEST(Relation, CsvHasNineSignificantDigits) {
  const auto path = std::filesystem::temp_directory_path() / "relt_relation.csv";
  const Matrix id = Matrix::identity(2);
  write_relation_csv(anchor_target_relation(id, id, 1.0), path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "0.731058579,0.268941421");
  std::filesystem::remove(path);
}
