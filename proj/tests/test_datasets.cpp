#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "support.hpp"

namespace {

using namespace mfm;
using namespace mfm::testing;

double sample_std(const Eigen::ArrayXd& v) {
    return std::sqrt((v - v.mean()).square().sum() / static_cast<double>(v.size() - 1));
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

// --- generators ---------------------------------------------------------------

TEST(Arch, RadialNoiseMatchesItsScale) {
    const SyntheticData d = generate_arch(5000, 1);
    for (const Matrix* m : {&d.source, &d.target, &d.truth}) {
        const Eigen::ArrayXd r = m->rowwise().norm().array() - 1.0;
        EXPECT_NEAR(sample_std(r), 0.1, 0.02);
        EXPECT_NEAR(r.mean(), 0.0, 0.01);
        EXPECT_EQ(m->rows(), 5000);
        EXPECT_EQ(m->cols(), 2);
    }
}

TEST(Arch, SourceAndTargetSitAtOppositeEnds) {
    // Angle pi * |N(0, 1 / 2pi)| has mean sqrt(2 / pi) / 2. Radial noise is
    // switched off so atan2 never folds a point from below the axis.
    ArcConfig cfg;
    cfg.radial_noise = 0.0;
    const std::size_t n = 5000;
    const SyntheticData d = generate_arch(n, 2, cfg);
    const double mean_angle = std::sqrt(2.0 / std::numbers::pi) / 2.0;
    const double se = 0.5 * std::sqrt(1.0 - 2.0 / std::numbers::pi) / std::sqrt(static_cast<double>(n));
    Eigen::ArrayXd a0(d.source.rows());
    Eigen::ArrayXd a1(d.target.rows());
    for (Eigen::Index i = 0; i < a0.size(); ++i) {
        a0(i) = std::atan2(d.source(i, 1), d.source(i, 0));
        a1(i) = std::atan2(d.target(i, 1), d.target(i, 0));
    }
    EXPECT_NEAR(a0.mean(), mean_angle, 3 * se);
    EXPECT_NEAR(std::numbers::pi - a1.mean(), mean_angle, 3 * se);
}

TEST(Arch, TruthIsTheMidpointOfTheSortedPairing) {
    // No radial noise: the truth angles are the averages of the sorted source and target angles.
    ArcConfig cfg;
    cfg.radial_noise = 0.0;
    const SyntheticData d = generate_arch(300, 3, cfg);
    std::vector<double> a0, a1, mid;
    for (Eigen::Index i = 0; i < 300; ++i) {
        a0.push_back(std::atan2(d.source(i, 1), d.source(i, 0)));
        a1.push_back(std::atan2(d.target(i, 1), d.target(i, 0)));
        mid.push_back(std::atan2(d.truth(i, 1), d.truth(i, 0)));
    }
    std::sort(a0.begin(), a0.end());
    std::sort(a1.begin(), a1.end());
    std::sort(mid.begin(), mid.end());
    for (std::size_t i = 0; i < 300; ++i) {
        EXPECT_NEAR(mid[i], 0.5 * (a0[i] + a1[i]), 1e-12);
    }
}

TEST(Generators, AreSeedDeterministic) {
    const SyntheticData a = generate_arch(500, 7);
    const SyntheticData b = generate_arch(500, 7);
    EXPECT_EQ(a.source, b.source);
    EXPECT_EQ(a.target, b.target);
    EXPECT_EQ(a.truth, b.truth);
    EXPECT_NE(a.source, generate_arch(500, 8).source);
    EXPECT_EQ(generate_sphere(300, 4).truth, generate_sphere(300, 4).truth);
    EXPECT_EQ(generate_gaussian_line(20, 3, 2, 5)[1].points, generate_gaussian_line(20, 3, 2, 5)[1].points);
    EXPECT_THROW(generate_arch(0, 1), ValidationError);
}

TEST(Sphere, EveryPointHasUnitNorm) {
    const SyntheticData d = generate_sphere(2000, 5);
    for (const Matrix* m : {&d.source, &d.target, &d.truth}) {
        EXPECT_LE((m->rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
        EXPECT_EQ(m->cols(), 3);
    }
}

TEST(Sphere, SourceLatitudeMeanNearThePole) {
    const std::size_t n = 5000;
    const SyntheticData d = generate_sphere(n, 6);
    const double s = 1.0 / (2.0 * std::numbers::pi);
    const double mean = std::numbers::pi * s * std::sqrt(2.0 / std::numbers::pi);
    const double sd = std::numbers::pi * s * std::sqrt(1.0 - 2.0 / std::numbers::pi);
    const double se = sd / std::sqrt(static_cast<double>(n));
    const Eigen::ArrayXd theta0 = d.source.col(2).array().acos();
    const Eigen::ArrayXd theta1 = d.target.col(2).array().acos();
    EXPECT_NEAR(theta0.mean(), mean, 3 * se);
    EXPECT_NEAR(std::numbers::pi - theta1.mean(), mean, 3 * se);
}

TEST(GaussianLine, MarginalsMoveAlongTheFirstAxis) {
    const auto ms = generate_gaussian_line(4000, 3, 2, 9, 2.0, 0.5);
    ASSERT_EQ(ms.size(), 3U);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(ms[k].time, static_cast<double>(k));
        const RowVector mu = ms[k].points.colwise().mean();
        EXPECT_NEAR(mu(0), 2.0 * static_cast<double>(k), 0.03);
        EXPECT_NEAR(mu(1), 0.0, 0.03);
    }
}

// --- CSV ----------------------------------------------------------------------

TEST(Csv, TwoRowsGiveTwoSingletonMarginals) {
    const auto dir = scratch_dir("csv_two");
    write_file(dir / "m.csv", "t,x0,x1\n1,3.5,4\n0,1,2\n");
    const auto ms = load_marginals_csv(dir / "m.csv");
    ASSERT_EQ(ms.size(), 2U);
    EXPECT_EQ(ms[0].time, 0.0);
    EXPECT_EQ(ms[1].time, 1.0);
    EXPECT_EQ(ms[0].points(0, 1), 2.0);
    EXPECT_EQ(ms[1].points(0, 0), 3.5);
}

TEST(Csv, NaNRowsAreDroppedAndCounted) {
    const auto dir = scratch_dir("csv_nan");
    write_file(dir / "m.csv", "t,x0,x1\n0,1,2\n0,nan,2\n1,5,6\n");
    CsvReport rep;
    const auto ms = load_marginals_csv(dir / "m.csv", {}, &rep);
    EXPECT_EQ(rep.rows_read, 3U);
    EXPECT_EQ(rep.rows_dropped, 1U);
    EXPECT_EQ(ms[0].points.rows(), 1);
}

TEST(Csv, RoundTripIsBitExact) {
    const auto dir = scratch_dir("csv_round");
    Rng rng(10);
    std::vector<Marginal> ms;
    for (int k = 0; k < 3; ++k) {
        Matrix p = random_matrix(25, 4, rng, -1e3, 1e3);
        p(0, 0) = 1.0 / 3.0;
        p(1, 1) = -2.5e-300;
        ms.push_back({0.5 * k, p});
    }
    save_marginals_csv(dir / "m.csv", ms);
    const auto back = load_marginals_csv(dir / "m.csv");
    ASSERT_EQ(back.size(), 3U);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(back[k].time, ms[k].time);
        EXPECT_EQ(back[k].points, ms[k].points);
    }
    save_points_csv(dir / "p.csv", ms[1].points);
    EXPECT_EQ(load_points_csv(dir / "p.csv"), ms[1].points);
}

TEST(Csv, NamedSchemaSelectsColumns) {
    const auto dir = scratch_dir("csv_schema");
    write_file(dir / "m.csv", "day,pc2,junk,pc1\n0,1,hello,2\n3,4,x,5\n");
    const auto ms = load_marginals_csv(dir / "m.csv", CsvSchema{"day", {"pc1", "pc2"}});
    ASSERT_EQ(ms.size(), 2U);
    EXPECT_EQ(ms[1].time, 3.0);
    EXPECT_EQ(ms[1].points(0, 0), 5.0);
    EXPECT_EQ(ms[1].points(0, 1), 4.0);
}

TEST(Csv, MalformedFilesAreRejected) {
    const auto dir = scratch_dir("csv_bad");
    write_file(dir / "cols.csv", "t,x0\n0,1,2\n");
    write_file(dir / "num.csv", "t,x0\n0,abc\n");
    write_file(dir / "missing.csv", "t,y\n0,1\n");
    write_file(dir / "empty.csv", "t,x0\n0,nan\n");
    write_file(dir / "gap.csv", "t,x0,x2\n0,1,2\n");
    for (const char* f : {"cols.csv", "num.csv", "missing.csv", "empty.csv", "gap.csv", "absent.csv"}) {
        EXPECT_THROW(load_marginals_csv(dir / f), IoError) << f;
    }
    EXPECT_THROW(load_marginals_csv(dir / "cols.csv", CsvSchema{"t", {"x9"}}), IoError);
}

// --- whitening ------------------------------------------------------------------

TEST(Whiten, HandStatistics) {
    Matrix x(2, 1);
    x << 0, 2;
    const WhitenTransform w = fit_whiten(x);
    EXPECT_EQ(w.mean(0), 1.0);
    EXPECT_EQ(w.stddev(0), 1.0);
    Matrix q(1, 1);
    q << 2;
    EXPECT_EQ(apply_whiten(w, q)(0, 0), 1.0);
}

TEST(Whiten, ConstantDimensionIsClamped) {
    const Matrix x = Matrix::Constant(5, 2, 3.0);
    const WhitenTransform w = fit_whiten(x);
    EXPECT_TRUE(w.clamped);
    EXPECT_EQ(w.stddev(0), kMinStd);
    EXPECT_TRUE((apply_whiten(w, x).array() == 0.0).all());
}

TEST(Whiten, InverseRecoversTheData) {
    Rng rng(11);
    Matrix x = random_matrix(200, 5, rng, -50, 50);
    x.col(2) *= 1e-3;
    const WhitenTransform w = fit_whiten(x);
    EXPECT_LE((invert_whiten(w, apply_whiten(w, x)) - x).cwiseAbs().maxCoeff(), 1e-10);
    const Matrix z = apply_whiten(w, x);
    EXPECT_LE(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Whiten, PooledFitOverMarginals) {
    Rng rng(12);
    const Matrix a = random_matrix(10, 2, rng);
    const Matrix b = random_matrix(30, 2, rng);
    Matrix all(40, 2);
    all << a, b;
    const WhitenTransform pooled = fit_whiten(std::vector<Marginal>{{0.0, a}, {1.0, b}});
    const WhitenTransform direct = fit_whiten(all);
    EXPECT_EQ(pooled.mean, direct.mean);
    EXPECT_EQ(pooled.stddev, direct.stddev);
}

// --- splits ---------------------------------------------------------------------

std::vector<std::vector<double>> sorted_rows(const Matrix& m) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r;
        for (Eigen::Index a = 0; a < m.cols(); ++a) {
            r.push_back(m(i, a));
        }
        rows.push_back(std::move(r));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
}

TEST(Split, NinetyTen) {
    Rng rng(13);
    const Matrix x = random_matrix(10, 2, rng);
    const Split s = split(x, 0.9, 1);
    EXPECT_EQ(s.train.rows(), 9);
    EXPECT_EQ(s.validation.rows(), 1);
}

TEST(Split, UnionIsTheOriginalMultiset) {
    Rng rng(14);
    Matrix x = random_matrix(57, 3, rng);
    x.row(5) = x.row(6); // a duplicate must survive too
    const Split s = split(x, 0.9, 2);
    Matrix joined(57, 3);
    joined << s.train, s.validation;
    EXPECT_EQ(sorted_rows(joined), sorted_rows(x));
}

TEST(Split, SeedFixesMembership) {
    Rng rng(15);
    const Matrix x = random_matrix(40, 2, rng);
    EXPECT_EQ(split(x, 0.75, 3).train, split(x, 0.75, 3).train);
    EXPECT_NE(split(x, 0.75, 3).train, split(x, 0.75, 4).train);
}

TEST(Split, StratifiedPerMarginal) {
    const auto ms = generate_gaussian_line(101, 4, 2, 16);
    const MarginalSplit s = split_marginals(ms, 0.9, Rng(17));
    ASSERT_EQ(s.train.size(), 4U);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(static_cast<double>(s.train[k].points.rows()), 0.9 * 101, 1.0);
        EXPECT_EQ(s.train[k].points.rows() + s.validation[k].points.rows(), 101);
        EXPECT_EQ(s.train[k].time, ms[k].time);
    }
}

TEST(Split, RejectsBadArguments) {
    EXPECT_THROW(split(Matrix::Zero(1, 2), 0.9, 1), ValidationError);
    EXPECT_THROW(split(Matrix::Zero(5, 2), 1.0, 1), ValidationError);
    EXPECT_THROW(split(Matrix::Zero(5, 2), 0.0, 1), ValidationError);
}

} // namespace
