#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <functional>

#include "support.hpp"

namespace {

using namespace mfm;
using namespace mfm::testing;

double selu_by_hand(double z) {
    const double lambda = 1.0507009873554805;
    const double alpha = 1.6732632423543772;
    return z > 0.0 ? lambda * z : lambda * alpha * (std::exp(z) - 1.0);
}

// --- MLP forward ------------------------------------------------------------

TEST(Mlp, ZeroNetworkMapsEverythingToZero) {
    const nn::MlpParams p = nn::MlpParams::zeros(3, 16, 2, 2);
    Rng rng(1);
    const Matrix out = nn::mlp_forward(p, random_matrix(5, 3, rng, -10, 10));
    EXPECT_EQ(out.rows(), 5);
    EXPECT_EQ(out.cols(), 2);
    EXPECT_TRUE((out.array() == 0.0).all());
}

TEST(Mlp, IdentityLinearLayer) {
    nn::MlpParams p;
    p.weights.push_back(Matrix::Identity(2, 2));
    p.biases.push_back(Matrix::Zero(1, 2));
    Vector x(2);
    x << 1.0, 2.0;
    const Vector y = nn::mlp_forward(p, x);
    EXPECT_EQ(y(0), 1.0);
    EXPECT_EQ(y(1), 2.0);
}

TEST(Mlp, HandSetDepthTwoNetworkMatchesScalarRecomputation) {
    // 1 -> 2 -> 2 -> 1 with fixed weights.
    nn::MlpParams p;
    Matrix w0(2, 1);
    w0 << 0.7, -1.3;
    Matrix b0(1, 2);
    b0 << 0.1, 0.2;
    Matrix w1(2, 2);
    w1 << 0.5, -0.4, 0.9, 0.3;
    Matrix b1(1, 2);
    b1 << -0.05, 0.15;
    Matrix w2(1, 2);
    w2 << 1.1, -0.6;
    Matrix b2(1, 1);
    b2 << 0.25;
    p.weights = {w0, w1, w2};
    p.biases = {b0, b1, b2};

    const double x = 0.5;
    const double h00 = selu_by_hand(0.7 * x + 0.1);
    const double h01 = selu_by_hand(-1.3 * x + 0.2);
    const double h10 = selu_by_hand(0.5 * h00 - 0.4 * h01 - 0.05);
    const double h11 = selu_by_hand(0.9 * h00 + 0.3 * h01 + 0.15);
    const double expected = 1.1 * h10 - 0.6 * h11 + 0.25;

    Vector in(1);
    in << x;
    EXPECT_NEAR(nn::mlp_forward(p, in)(0), expected, 1e-14);

    nn::Tape tape;
    const nn::Var out = nn::mlp_forward(nn::bind(tape, p), tape.constant(Matrix::Constant(1, 1, x)));
    EXPECT_NEAR(out.scalar(), expected, 1e-14);
}

TEST(Mlp, ShapeMismatchIsRejected) {
    Rng rng(2);
    const nn::MlpParams p = nn::MlpParams::init(3, 8, 2, 1, rng);
    EXPECT_THROW(nn::mlp_forward(p, Matrix(Matrix::Zero(4, 2))), ShapeError);
    nn::MlpParams broken = p;
    broken.biases[1] = Matrix::Zero(1, 3);
    EXPECT_THROW(broken.validate(), ShapeError);
}

TEST(Mlp, InitIsSeedDeterministicAndBounded) {
    Rng a(5);
    Rng b(5);
    const nn::MlpParams p = nn::MlpParams::init(4, 32, 3, 2, a);
    const nn::MlpParams q = nn::MlpParams::init(4, 32, 3, 2, b);
    EXPECT_TRUE(p == q);
    EXPECT_EQ(p.depth(), 3U);
    EXPECT_EQ(p.parameter_count(), (4U * 32 + 32) + 2 * (32U * 32 + 32) + (32U * 2 + 2));
    EXPECT_LE(p.weights[0].cwiseAbs().maxCoeff(), 0.5);
}

// --- tape -------------------------------------------------------------------

TEST(Tape, SquareHasAnalyticDerivative) {
    nn::Tape tape;
    const nn::Var w = tape.leaf(Matrix::Constant(1, 1, 3.0));
    const nn::Var f = nn::square(w);
    tape.backward(f);
    EXPECT_EQ(f.scalar(), 9.0);
    EXPECT_EQ(w.grad()(0, 0), 6.0);
}

TEST(Tape, SeluGradientMatchesFiniteDifferenceAtMinusOne) {
    nn::Tape tape;
    const nn::Var w = tape.leaf(Matrix::Constant(1, 1, -1.0));
    tape.backward(nn::selu(w));
    const double h = 1e-6;
    const double fd = (selu_by_hand(-1.0 + h) - selu_by_hand(-1.0 - h)) / (2.0 * h);
    EXPECT_LE(std::abs(w.grad()(0, 0) - fd) / std::abs(fd), 1e-6);
}

TEST(Tape, ConstantsContributeNoGradient) {
    nn::Tape tape;
    const nn::Var w = tape.leaf(Matrix::Constant(2, 2, 1.5));
    const nn::Var c = tape.constant(Matrix::Constant(2, 2, 4.0));
    const nn::Var f = nn::sum(nn::square(c)) + nn::sum(w) * tape.constant_scalar(0.0);
    tape.backward(f);
    EXPECT_TRUE((w.grad().array() == 0.0).all());
    EXPECT_TRUE((tape.grad(c.index()).array() == 0.0).all());
}

TEST(Tape, UnreachedLeafHasZeroGradient) {
    nn::Tape tape;
    const nn::Var used = tape.leaf(Matrix::Constant(1, 1, 2.0));
    const nn::Var unused = tape.leaf(Matrix::Constant(3, 1, 2.0));
    tape.backward(nn::square(used));
    EXPECT_EQ(unused.grad().rows(), 3);
    EXPECT_TRUE((unused.grad().array() == 0.0).all());
}

TEST(Tape, BackwardNeedsScalarOutput) {
    nn::Tape tape;
    const nn::Var w = tape.leaf(Matrix::Ones(2, 2));
    EXPECT_THROW(tape.backward(w), ContractError);
}

TEST(Tape, BroadcastingOpsMatchFiniteDifferences) {
    // f = 0.7 * mean_rows(row_sum(softplus(A * r + c) - square(A) * s)) with
    // r a row vector, c a column vector and s a scalar, all trainable.
    Rng rng(11);
    std::array<Matrix, 4> args = {random_matrix(4, 3, rng), random_matrix(1, 3, rng), random_matrix(4, 1, rng),
                                  random_matrix(1, 1, rng)};
    auto eval = [](const std::array<Matrix, 4>& in, std::array<Matrix, 4>* grads) {
        nn::Tape t;
        const nn::Var a = t.leaf(in[0]);
        const nn::Var r = t.leaf(in[1]);
        const nn::Var c = t.leaf(in[2]);
        const nn::Var s = t.leaf(in[3]);
        const nn::Var f = 0.7 * nn::mean_rows(nn::row_sum(nn::softplus(a * r + c) - nn::square(a) * s));
        if (grads != nullptr) {
            t.backward(f);
            *grads = {a.grad(), r.grad(), c.grad(), s.grad()};
        }
        return f.scalar();
    };
    std::array<Matrix, 4> grads;
    eval(args, &grads);
    const double h = 1e-6;
    for (std::size_t k = 0; k < args.size(); ++k) {
        ASSERT_EQ(grads[k].rows(), args[k].rows());
        ASSERT_EQ(grads[k].cols(), args[k].cols());
        for (Eigen::Index i = 0; i < args[k].size(); ++i) {
            const double orig = args[k].data()[i];
            args[k].data()[i] = orig + h;
            const double up = eval(args, nullptr);
            args[k].data()[i] = orig - h;
            const double down = eval(args, nullptr);
            args[k].data()[i] = orig;
            EXPECT_NEAR(grads[k].data()[i], (up - down) / (2.0 * h), 1e-8) << "argument " << k << " entry " << i;
        }
    }
}

TEST(Tape, MlpGradientsMatchFiniteDifferences) {
    Rng rng(3);
    const nn::MlpParams p = nn::MlpParams::init(3, 10, 2, 2, rng);
    const Matrix x = random_matrix(6, 3, rng);
    const Matrix y = random_matrix(6, 2, rng);
    auto loss = [&](const nn::MlpParams& q) {
        const Matrix r = nn::mlp_forward(q, x) - y;
        return r.squaredNorm() / static_cast<double>(x.rows());
    };
    nn::Tape tape;
    const nn::MlpBinding b = nn::bind(tape, p);
    const nn::Var out = nn::mlp_forward(b, tape.constant(x));
    const nn::Var l = nn::mean_rows(nn::row_sum(nn::square(out - tape.constant(y))));
    EXPECT_NEAR(l.scalar(), loss(p), 1e-13);
    tape.backward(l);
    const Vector ad = flatten(nn::gradients(b, p));
    const Vector fd = finite_difference_gradient(p, loss, 1e-6);
    EXPECT_LE(relative_error(ad, fd), 1e-7);
}

TEST(Tape, FrozenBindingHasNoLeaves) {
    Rng rng(4);
    const nn::MlpParams p = nn::MlpParams::init(2, 4, 1, 1, rng);
    nn::Tape tape;
    const nn::MlpBinding b = nn::bind(tape, p, false);
    for (std::size_t i = 0; i < tape.size(); ++i) {
        EXPECT_FALSE(tape.node(i).requires_grad);
    }
    (void)b;
}

// --- optimizers -------------------------------------------------------------

TEST(Optimizer, ZeroGradientWithoutDecayLeavesParametersUnchanged) {
    nn::Optimizer opt(nn::OptimizerConfig::adam(0.1));
    Matrix w = Matrix::Constant(2, 3, 0.75);
    const Matrix g = Matrix::Zero(2, 3);
    for (int i = 0; i < 5; ++i) {
        opt.step({&w}, {&g});
    }
    EXPECT_TRUE((w.array() == 0.75).all());
    EXPECT_EQ(opt.step_count(), 5U);
    EXPECT_TRUE((opt.first_moments()[0].array() == 0.0).all());
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
    nn::Optimizer opt(nn::OptimizerConfig::adam(0.1));
    Matrix w = Matrix::Zero(1, 1);
    const Matrix g = Matrix::Ones(1, 1);
    opt.step({&w}, {&g});
    // m_hat = 1, v_hat = 1: w = -0.1 * 1 / (1 + 1e-8).
    const double expected = -0.1 / (1.0 + 1e-8);
    EXPECT_NEAR(w(0, 0), expected, 1e-15);
    EXPECT_NEAR(w(0, 0), -0.1, 1e-8);
}

TEST(Optimizer, AdamMatchesHandRolledRecurrenceOverSeveralSteps) {
    nn::Optimizer opt(nn::OptimizerConfig::adam(0.01));
    Matrix w = Matrix::Constant(1, 1, 0.3);
    double ref = 0.3;
    double m = 0.0;
    double v = 0.0;
    const double grads[] = {0.5, -1.2, 0.1, 2.0};
    for (int k = 0; k < 4; ++k) {
        const Matrix g = Matrix::Constant(1, 1, grads[k]);
        opt.step({&w}, {&g});
        m = 0.9 * m + 0.1 * grads[k];
        v = 0.999 * v + 0.001 * grads[k] * grads[k];
        const double mh = m / (1.0 - std::pow(0.9, k + 1));
        const double vh = v / (1.0 - std::pow(0.999, k + 1));
        ref -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(w(0, 0), ref, 1e-14);
}

TEST(Optimizer, AdamWDecayIsDecoupled) {
    nn::Optimizer opt(nn::OptimizerConfig::adamw(1e-3, 1e-5));
    Matrix w = Matrix::Ones(1, 1);
    const Matrix g = Matrix::Zero(1, 1);
    opt.step({&w}, {&g});
    EXPECT_DOUBLE_EQ(w(0, 0), 1.0 - 1e-3 * 1e-5 * 1.0);
}

TEST(Optimizer, RejectsBadHyperparameters) {
    EXPECT_THROW(nn::Optimizer(nn::OptimizerConfig::adam(0.0)), ValidationError);
    EXPECT_THROW(nn::Optimizer(nn::OptimizerConfig::adamw(1e-3, -1.0)), ValidationError);
}

// --- checkpoints ------------------------------------------------------------

TEST(Checkpoint, MlpRoundTripIsBitExact) {
    Rng rng(9);
    nn::MlpParams p = nn::MlpParams::init(5, 7, 3, 2, rng);
    p.weights[1](0, 0) = 1.0 / 3.0;
    p.biases[0](0, 1) = -2.5e-300;
    const auto dir = scratch_dir("ckpt");
    nn::to_archive(p).save(dir / "net.ckpt");
    const nn::MlpParams q = nn::mlp_from_archive(nn::Archive::load(dir / "net.ckpt"));
    EXPECT_TRUE(p == q);
}

TEST(Checkpoint, FormatDoubleRoundTrips) {
    Rng rng(10);
    for (int i = 0; i < 1000; ++i) {
        const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.below(200)) - 100);
        EXPECT_EQ(nn::parse_double(nn::format_double(v)), v);
    }
}

TEST(Checkpoint, CorruptArchivesAreRejected) {
    EXPECT_THROW(nn::Archive::parse("not an archive"), IoError);
    EXPECT_THROW(nn::Archive::parse("mfm-archive 1\nkind mlp\ntensor w0 2 2\n1 2 3\n"), IoError);
    EXPECT_THROW(nn::Archive::parse("mfm-archive 99\nkind mlp\nend\n"), IoError);
    nn::Archive a;
    a.kind = "interpolant";
    EXPECT_THROW(nn::mlp_from_archive(a), IoError);
}

} // namespace
