#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support.hpp"

namespace {

using namespace mfm;
using namespace mfm::testing;

Matrix line(std::initializer_list<double> xs) {
    Matrix m(static_cast<Eigen::Index>(xs.size()), 1);
    Eigen::Index i = 0;
    for (double x : xs) {
        m(i++, 0) = x;
    }
    return m;
}

bool is_permutation_of_n(const std::vector<std::size_t>& p, std::size_t n) {
    if (p.size() != n) {
        return false;
    }
    std::vector<std::size_t> s = p;
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < n; ++i) {
        if (s[i] != i) {
            return false;
        }
    }
    return true;
}

double plan_cost(const Matrix& src, const Matrix& tgt, const CouplingPlan& p) {
    double c = 0.0;
    for (std::size_t i = 0; i < p.source.size(); ++i) {
        c += (src.row(to_index(p.source[i])) - tgt.row(to_index(p.target[i]))).squaredNorm();
    }
    return c;
}

TEST(Assignment, HandSolvedThreeByThree) {
    Matrix c(3, 3);
    c << 4, 1, 3, 2, 0, 5, 3, 2, 2;
    const Assignment a = solve_assignment(c);
    EXPECT_EQ(a.cost, 5.0);
    EXPECT_EQ(a.column_of_row, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(Assignment, EmptyAndNonSquare) {
    EXPECT_EQ(solve_assignment(Matrix(0, 0)).cost, 0.0);
    EXPECT_THROW(solve_assignment(Matrix::Zero(2, 3)), ShapeError);
    Matrix bad = Matrix::Zero(2, 2);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(solve_assignment(bad), NumericError);
}

TEST(Assignment, MatchesBruteForceOnRealAndIntegerCosts) {
    Rng rng(7);
    for (int rep = 0; rep < 200; ++rep) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(7));
        Matrix c = random_matrix(n, n, rng, 0.0, 10.0);
        if (rep % 2 == 1) {
            // Integer costs force many ties.
            c = c.array().floor().matrix();
        }
        const Assignment a = solve_assignment(c);
        ASSERT_TRUE(is_permutation_of_n(a.column_of_row, to_size(n)));
        double sum = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            sum += c(r, to_index(a.column_of_row[to_size(r)]));
        }
        EXPECT_EQ(a.cost, sum);
        EXPECT_EQ(a.cost, brute_force_assignment(c)) << "instance " << rep;
    }
}

TEST(OtPairs, LineExample) {
    const CouplingPlan p = ot_pairs(line({0, 10}), line({11, 1}));
    EXPECT_EQ(p.target, (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(p.total_cost, 2.0);
}

TEST(OtPairs, IdenticalBatchesGiveIdentity) {
    Rng rng(8);
    const Matrix x = random_matrix(50, 3, rng);
    const CouplingPlan p = ot_pairs(x, x);
    EXPECT_EQ(p.total_cost, 0.0);
    for (std::size_t i = 0; i < 50; ++i) {
        EXPECT_EQ(p.target[i], i);
    }
}

TEST(OtPairs, BruteForceOptimalityOnRandomBatches) {
    Rng rng(9);
    for (int rep = 0; rep < 200; ++rep) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(7));
        const Matrix a = random_matrix(n, 2, rng);
        const Matrix b = random_matrix(n, 2, rng);
        const CouplingPlan p = ot_pairs(a, b);
        EXPECT_EQ(p.total_cost, brute_force_assignment(squared_distances(a, b)));
        EXPECT_NEAR(p.total_cost, plan_cost(a, b, p), 1e-12);
    }
}

TEST(OtPairs, CostIsAtMostIndependentCost) {
    Rng rng(10);
    for (int rep = 0; rep < 50; ++rep) {
        const Matrix a = random_matrix(40, 2, rng);
        const Matrix b = random_matrix(40, 2, rng, 0.0, 3.0);
        EXPECT_LE(ot_pairs(a, b).total_cost, independent_pairs(a, b, rng).total_cost + 1e-12);
    }
}

TEST(OtPairs, CostIsInvariantToTargetOrder) {
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        const Matrix a = random_matrix(30, 3, rng);
        const Matrix b = random_matrix(30, 3, rng);
        const std::vector<std::size_t> perm = rng.permutation(30);
        Matrix shuffled(30, 3);
        for (std::size_t i = 0; i < 30; ++i) {
            shuffled.row(to_index(i)) = b.row(to_index(perm[i]));
        }
        EXPECT_NEAR(ot_pairs(a, b).total_cost, ot_pairs(a, shuffled).total_cost, 1e-12);
    }
}

TEST(OtPairs, RejectsMismatchedOrNonFiniteBatches) {
    EXPECT_THROW(ot_pairs(Matrix::Zero(3, 2), Matrix::Zero(4, 2)), ShapeError);
    Matrix bad = Matrix::Zero(2, 2);
    bad(1, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(ot_pairs(bad, Matrix::Zero(2, 2)), NumericError);
}

TEST(IndependentPairs, SinglePair) {
    const CouplingPlan p = independent_pairs(line({1}), line({2}), 5);
    EXPECT_EQ(p.source, (std::vector<std::size_t>{0}));
    EXPECT_EQ(p.target, (std::vector<std::size_t>{0}));
    EXPECT_EQ(p.total_cost, 1.0);
}

TEST(IndependentPairs, IsABijectionAndSeedDeterministic) {
    Rng rng(12);
    const Matrix a = random_matrix(5, 2, rng);
    const Matrix b = random_matrix(5, 2, rng);
    const CouplingPlan p = independent_pairs(a, b, 99);
    EXPECT_TRUE(is_permutation_of_n(p.target, 5));
    EXPECT_TRUE(is_permutation_of_n(p.source, 5));
    EXPECT_EQ(p.target, independent_pairs(a, b, 99).target);
    EXPECT_NEAR(p.total_cost, plan_cost(a, b, p), 1e-12);
    EXPECT_THROW(independent_pairs(a, random_matrix(4, 2, rng), 1), ShapeError);
}

TEST(IndependentPairs, VisitsManyPermutations) {
    Rng rng(13);
    const Matrix a = random_matrix(4, 1, rng);
    std::set<std::vector<std::size_t>> seen;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        seen.insert(independent_pairs(a, a, seed).target);
    }
    EXPECT_EQ(seen.size(), 24U);
}

TEST(CouplingKindNames, RoundTrip) {
    EXPECT_EQ(coupling_from_string(to_string(CouplingKind::Ot)), CouplingKind::Ot);
    EXPECT_EQ(coupling_from_string(to_string(CouplingKind::Independent)), CouplingKind::Independent);
    EXPECT_THROW(coupling_from_string("sinkhorn"), ValidationError);
}

} // namespace
