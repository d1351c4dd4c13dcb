#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

namespace {

using namespace mfm;
using namespace mfm::testing;

Vector vec2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

MetricField constant_metric(const Vector& g, double eps = 0.25) {
    const Eigen::Index d = g.size();
    Matrix w(1, d);
    for (Eigen::Index a = 0; a < d; ++a) {
        w(0, a) = 1.0 / g(a) - eps;
    }
    return MetricField(RbfMetric(Matrix::Zero(1, d), Matrix::Zero(1, d), w, eps));
}

/// Two unequal clusters above and below the chord from (-1, 0) to (1, 0).
Matrix flanking_clusters(Rng& rng) {
    Matrix pts(50, 2);
    for (Eigen::Index i = 0; i < 50; ++i) {
        const bool upper = i < 30;
        pts(i, 0) = rng.uniform(-0.8, 0.8);
        pts(i, 1) = (upper ? 0.5 : -0.7) + rng.normal(0.0, 0.05);
    }
    return pts;
}

double max_deviation_from_chord(const DiscretePath& p) {
    const Vector x0 = p.points.row(0).transpose();
    const Vector x1 = p.points.bottomRows(1).transpose();
    const Vector u = (x1 - x0).normalized();
    double worst = 0.0;
    for (Eigen::Index k = 0; k < p.points.rows(); ++k) {
        const Vector r = p.points.row(k).transpose() - x0;
        worst = std::max(worst, (r - r.dot(u) * u).norm());
    }
    return worst;
}

// --- path functionals ---------------------------------------------------------

TEST(PathLength, ChordUnderIdentity) {
    const DiscretePath p = DiscretePath::chord(vec2(0, 0), vec2(3, 4), 7);
    EXPECT_NEAR(path_length(p, MetricField::identity()), 5.0, 1e-14);
}

TEST(PathLength, UnitSquarePerimeter) {
    DiscretePath p;
    p.points.resize(5, 2);
    p.points << 0, 0, 1, 0, 1, 1, 0, 1, 0, 0;
    EXPECT_EQ(path_length(p, MetricField::identity()), 4.0);
}

TEST(PathLength, ConstantDiagonalMetric) {
    const DiscretePath p = DiscretePath::chord(vec2(0, 0), vec2(1, 0), 4);
    EXPECT_NEAR(path_length(p, constant_metric(vec2(4, 1), 0.1)), 2.0, 1e-12);
}

TEST(DiscreteEnergy, GradientMatchesFiniteDifferences) {
    Rng rng(60);
    const MetricField g(LandMetric(random_matrix(30, 2, rng), 0.4, 1e-2));
    DiscretePath p;
    p.points = random_matrix(6, 2, rng);
    const Matrix ad = discrete_energy_gradient(p, g);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < p.points.size(); ++i) {
        DiscretePath q = p;
        q.points.data()[i] += h;
        const double up = discrete_energy(q, g);
        q.points.data()[i] -= 2 * h;
        const double down = discrete_energy(q, g);
        EXPECT_NEAR(ad.data()[i], (up - down) / (2 * h), 1e-5 * std::max(1.0, std::abs(ad.data()[i])));
    }
}

TEST(DiscreteEnergy, CauchySchwarzBoundsSquaredLength) {
    Rng rng(61);
    const MetricField g(LandMetric(random_matrix(30, 2, rng), 0.4, 1e-2));
    for (int rep = 0; rep < 100; ++rep) {
        DiscretePath p;
        p.points = random_matrix(static_cast<Eigen::Index>(2 + rng.below(12)), 2, rng);
        const double len = path_length(p, g);
        EXPECT_LE(len * len, discrete_energy(p, g) * (1.0 + 1e-9));
    }
}

// --- solver -------------------------------------------------------------------

TEST(Geodesic, IdentityMetricKeepsTheChord) {
    Rng rng(62);
    for (int rep = 0; rep < 20; ++rep) {
        const Vector x0 = random_vector(3, rng, -3, 3);
        const Vector x1 = random_vector(3, rng, -3, 3);
        const GeodesicSolution s = solve_discrete_geodesic(x0, x1, MetricField::identity(), 16);
        EXPECT_TRUE(s.converged);
        EXPECT_LT(max_deviation_from_chord(s.path), 1e-6);
        EXPECT_NEAR(s.energy, (x1 - x0).squaredNorm(), 1e-9 * (x1 - x0).squaredNorm());
    }
}

TEST(Geodesic, LandClustersPullThePathOffTheChord) {
    Rng rng(63);
    const MetricField g(LandMetric(flanking_clusters(rng), 0.25, 1e-3));
    const GeodesicSolution s = solve_discrete_geodesic(vec2(-1, 0), vec2(1, 0), g, 32);
    EXPECT_LT(s.energy, s.chord_energy);
    EXPECT_EQ(s.chord_energy, discrete_energy(DiscretePath::chord(vec2(-1, 0), vec2(1, 0), 32), g));
    EXPECT_GT(max_deviation_from_chord(s.path), 0.1);
}

TEST(Geodesic, AcceptedEnergiesNeverIncreaseAndEndsStayPinned) {
    Rng rng(64);
    const MetricField g(LandMetric(random_matrix(80, 2, rng, -2, 2), 0.3, 1e-3));
    for (int rep = 0; rep < 20; ++rep) {
        const Vector x0 = random_vector(2, rng, -2, 2);
        const Vector x1 = random_vector(2, rng, -2, 2);
        const GeodesicSolution s = solve_discrete_geodesic(x0, x1, g, 24);
        for (std::size_t k = 1; k < s.energy_trace.size(); ++k) {
            EXPECT_LE(s.energy_trace[k], s.energy_trace[k - 1]);
        }
        EXPECT_LE(s.energy, s.chord_energy);
        EXPECT_EQ(s.energy, s.energy_trace.back());
        EXPECT_EQ(Vector(s.path.points.row(0).transpose()), x0);
        EXPECT_EQ(Vector(s.path.points.bottomRows(1).transpose()), x1);
    }
}

TEST(Geodesic, RefinementConvergesAtSecondOrder) {
    // Under exact per-segment integration a nested grid could only lower the
    // energy. Midpoint evaluation perturbs each level by O(1/M^2), so the
    // converged energies instead form a sequence whose successive differences
    // shrink by about 4 per halving.
    Rng rng(65);
    const MetricField g(LandMetric(flanking_clusters(rng), 0.25, 1e-3));
    std::vector<double> e;
    for (std::size_t m : {8U, 16U, 32U, 64U}) {
        e.push_back(solve_discrete_geodesic(vec2(-1, 0), vec2(1, 0), g, m).energy);
    }
    for (std::size_t k = 2; k < e.size(); ++k) {
        const double ratio = (e[k - 1] - e[k - 2]) / (e[k] - e[k - 1]);
        EXPECT_NEAR(ratio, 4.0, 0.6) << "levels " << k - 2 << ".." << k;
    }
    EXPECT_LT(std::abs(e[3] - e[2]), 1e-3 * e[3]);
}

TEST(Geodesic, RefinedGridEnergyIsBelowTheCoarseSolutionItContains) {
    // The exact nested statement: the fine-grid solution beats the coarse
    // solution with midpoints inserted, evaluated on the fine grid.
    Rng rng(73);
    const MetricField g(LandMetric(flanking_clusters(rng), 0.25, 1e-3));
    const GeodesicSolution coarse = solve_discrete_geodesic(vec2(-1, 0), vec2(1, 0), g, 16);
    DiscretePath embedded;
    embedded.points.resize(33, 2);
    for (Eigen::Index k = 0; k < 16; ++k) {
        embedded.points.row(2 * k) = coarse.path.points.row(k);
        embedded.points.row(2 * k + 1) = 0.5 * (coarse.path.points.row(k) + coarse.path.points.row(k + 1));
    }
    embedded.points.row(32) = coarse.path.points.row(16);
    const GeodesicSolution fine = solve_discrete_geodesic(vec2(-1, 0), vec2(1, 0), g, 32);
    EXPECT_LE(fine.energy, discrete_energy(embedded, g) * (1.0 + 1e-6));
}

TEST(Geodesic, IterationCapReturnsBestSoFar) {
    Rng rng(66);
    const MetricField g(LandMetric(flanking_clusters(rng), 0.25, 1e-3));
    GeodesicSolverConfig cfg;
    cfg.max_iters = 3;
    cfg.grad_tol = 0.0;
    const GeodesicSolution s = solve_discrete_geodesic(vec2(-1, 0), vec2(1, 0), g, 32, cfg);
    EXPECT_FALSE(s.converged);
    EXPECT_EQ(s.iterations, 3U);
    EXPECT_LE(s.energy, s.chord_energy);
}

TEST(Geodesic, RejectsTooFewSegments) {
    EXPECT_THROW(solve_discrete_geodesic(vec2(0, 0), vec2(1, 1), MetricField::identity(), 1), ValidationError);
}

// --- containment --------------------------------------------------------------

TEST(Containment, PathThroughTheDataIsContained) {
    Rng rng(67);
    DiscretePath p;
    p.points = random_matrix(10, 2, rng);
    const ContainmentReport r = check_containment(p, p.points, {0.1, 0.05, 1.0, 1.0});
    EXPECT_EQ(r.max_distance, 0.0);
    EXPECT_TRUE(r.contained);
}

TEST(Containment, FarWaypointIsNotContained) {
    const double rho = 0.2;
    Matrix data(2, 2);
    data << 0, 0, 0, 0.1;
    DiscretePath p;
    p.points.resize(2, 2);
    p.points << 0, 0, 3 * rho, -3 * rho;
    const ContainmentReport r = check_containment(p, data, {rho, 0.1, 1.0, 1.0});
    EXPECT_FALSE(r.contained);
    EXPECT_NEAR(r.max_distance, 3 * rho * std::sqrt(2.0), 1e-15);
}

TEST(Containment, SpecIsValidated) {
    const DiscretePath p = DiscretePath::chord(vec2(0, 0), vec2(1, 0), 2);
    EXPECT_THROW(check_containment(p, p.points, {0.1, 0.2, 1.0, 1.0}), ValidationError);
    EXPECT_THROW(check_containment(p, p.points, {0.1, 0.05, 0.0, 1.0}), ValidationError);
}

TEST(Containment, ArchLandGeodesicsStayNearTheData) {
    const SyntheticData arch = generate_arch(1000, 11);
    Matrix pooled(2000, 2);
    pooled << arch.source, arch.target;
    const MetricField g(LandMetric(pooled, 0.125, 1e-3));
    const double rho = 2 * 0.1;
    Rng rng(68);
    for (int rep = 0; rep < 5; ++rep) {
        const Vector x0 = arch.source.row(to_index(rng.below(1000))).transpose();
        const Vector x1 = arch.target.row(to_index(rng.below(1000))).transpose();
        const GeodesicSolution s = solve_discrete_geodesic(x0, x1, g, 32);
        const ContainmentReport r = check_containment(s.path, pooled, {rho, 0.1, 1.0, 1.0});
        EXPECT_TRUE(r.contained) << "max distance " << r.max_distance;
    }
}

// --- interpolant comparison -------------------------------------------------------

TEST(DistanceToPolyline, Examples) {
    Matrix pts(3, 2);
    pts << 0, 0, 1, 0, 1, 1;
    RowVector q(2);
    q << 0.5, 0.3;
    EXPECT_DOUBLE_EQ(distance_to_polyline(q, pts), 0.3);
    q << 2, 2;
    EXPECT_DOUBLE_EQ(distance_to_polyline(q, pts), std::sqrt(2.0));
}

TEST(InterpolantVsGeodesic, ZeroCorrectionUnderIdentityHasNoGap) {
    Rng rng(69);
    const InterpolantModel zero = InterpolantModel::zero(2);
    for (int rep = 0; rep < 10; ++rep) {
        const Vector x0 = random_vector(2, rng);
        const Vector x1 = random_vector(2, rng);
        const GeodesicGap gap = interpolant_vs_geodesic(zero, MetricField::identity(), x0, x1, 16);
        EXPECT_NEAR(gap.energy_gap, 0.0, 1e-9);
        EXPECT_LT(gap.max_pointwise_gap, 1e-9);
    }
}

TEST(InterpolantVsGeodesic, TrainingClosesTheGapOnArch) {
    const SyntheticData arch = generate_arch(1000, 12);
    Matrix pooled(2000, 2);
    pooled << arch.source, arch.target;
    const MetricField g(LandMetric(pooled, 0.125, 1e-3));
    std::vector<SegmentData> segs{{0.0, 1.0, arch.source, arch.target}};
    PairStream stream(segs, CouplingKind::Ot, 256, Rng(70));
    const PairBatch val = fixed_pairs(segs, CouplingKind::Ot, Rng(71), 256);
    Rng init(72);
    const InterpolantModel untrained = InterpolantModel::init(2, 64, 3, init);
    InterpolantModel trained = untrained;
    InterpolantTrainConfig cfg;
    cfg.fit = {40, 3, nn::OptimizerConfig::adam(1e-3)};
    train_interpolant(trained, g, stream, val, cfg);
    double trained_gap = 0.0;
    double untrained_gap = 0.0;
    for (Eigen::Index i = 0; i < 10; ++i) {
        const Vector x0 = val.x0.row(i).transpose();
        const Vector x1 = val.x1.row(i).transpose();
        trained_gap += interpolant_vs_geodesic(trained, g, x0, x1, 32).relative_energy_gap;
        untrained_gap += interpolant_vs_geodesic(untrained, g, x0, x1, 32).relative_energy_gap;
    }
    EXPECT_LT(trained_gap, untrained_gap);
}

} // namespace
