#include <gtest/gtest.h>

#include <cmath>

#include "gmem/memory_bank.hpp"
#include "support.hpp"

using namespace gmem;
using gmem::testing::expect_gradients_match;
using gmem::testing::max_abs_diff;

namespace {

MemoryConfig small(std::size_t slots = 3, std::size_t dm = 4) {
    MemoryConfig c;
    c.slots = slots;
    c.memory_dim = dm;
    c.init_std = 0.5;
    return c;
}

Tensor randn(Shape s, std::uint64_t seed, double std = 1.0) {
    Rng rng(seed);
    return random_normal(std::move(s), std, rng);
}

void zero_biases(MemoryBank& m) {
    for (Parameter* p : m.parameters())
        if (p->value.rank() == 1) p->value = Tensor(p->value.shape());
}

Consolidation consolidate(MemoryBank& m, Tape& t, const Tensor& old, const Tensor& enc, UpdateRule rule = UpdateRule::gated) {
    return m.consolidate(t, t.constant(old), t.constant(enc), rule);
}

// softmax(q·kᵀ/√d)·v for one query row, evaluated term by term.
std::vector<double> attend_row(const std::vector<double>& q, const std::vector<std::vector<double>>& keys,
                               const std::vector<std::vector<double>>& values) {
    const double d = static_cast<double>(q.size());
    std::vector<double> w;
    double z = 0.0;
    for (const auto& k : keys) {
        double dot = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * k[i];
        w.push_back(std::exp(dot / std::sqrt(d)));
        z += w.back();
    }
    std::vector<double> out(values[0].size(), 0.0);
    for (std::size_t s = 0; s < keys.size(); ++s)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w[s] / z * values[s][j];
    return out;
}

}  // namespace

TEST(Encode, ZeroInputWithZeroBiasesGivesZero) {
    MemoryBank m(small(), 6);
    zero_biases(m);
    Tape t(false);
    EXPECT_EQ(m.encode(t, t.constant(Tensor({5, 6}))).value(), Tensor({5, 4}));
}

TEST(Encode, ShapeLawAndMismatch) {
    MemoryBank m(small(), 6);
    Tape t(false);
    EXPECT_EQ(m.encode(t, t.constant(Tensor({5, 6}, 0.2))).value().shape(), (Shape{5, 4}));
    EXPECT_THROW(m.encode(t, t.constant(Tensor({5, 4}))), DimensionError);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
    MemoryBank m(small(), 6);
    Parameter h("h", randn({5, 6}, 1));
    auto ps = m.parameters();
    auto loss = [&](Tape& t) { return ad::sum_squares(m.encode(t, t.param(h))); };
    expect_gradients_match(loss, {&h, ps[1], ps[2], ps[3], ps[4]});
}

TEST(Decode, ZeroInputWithZeroBiasesGivesZero) {
    MemoryBank m(small(), 6);
    zero_biases(m);
    Tape t(false);
    EXPECT_EQ(m.decode(t, t.constant(Tensor({5, 4}))).value(), Tensor({5, 6}));
}

TEST(Decode, ShapeLawAndMismatch) {
    MemoryBank m(small(), 6);
    Tape t(false);
    EXPECT_EQ(m.decode(t, t.constant(Tensor({2, 4}, 0.2))).value().shape(), (Shape{2, 6}));
    EXPECT_THROW(m.decode(t, t.constant(Tensor({2, 6}))), DimensionError);
}

TEST(Decode, GradientMatchesFiniteDifferences) {
    MemoryBank m(small(), 6);
    Parameter r("r", randn({3, 4}, 2));
    auto ps = m.parameters();
    auto loss = [&](Tape& t) { return ad::sum_squares(m.decode(t, t.param(r))); };
    expect_gradients_match(loss, {&r, ps[5], ps[6], ps[7], ps[8]});
}

TEST(Consolidate, GateClosedKeepsOldMemory) {
    MemoryBank m(small(), 6);
    m.gate_bias().value = Tensor({4}, -1e9);
    const Tensor old = randn({3, 4}, 3), enc = randn({5, 4}, 4);
    Tape t(false);
    EXPECT_LE(max_abs_diff(consolidate(m, t, old, enc).memory.value(), old), 1e-12);
}

TEST(Consolidate, GateOpenTakesAttendedSummary) {
    MemoryBank m(small(), 6);
    m.gate_bias().value = Tensor({4}, 1e9);
    const Tensor old = randn({3, 4}, 3), enc = randn({5, 4}, 4);
    Tape t(false);
    const Consolidation c = consolidate(m, t, old, enc);
    EXPECT_LE(max_abs_diff(c.memory.value(), c.attended.value()), 1e-12);
}

TEST(Consolidate, ScalarHandEvaluation) {
    MemoryBank m(small(1, 1), 1);
    for (Parameter* p : {&m.write_query(), &m.write_key(), &m.write_value()}) p->value = Tensor::matrix({{1.0}});
    m.gate_weight().value = Tensor({2, 1});
    m.gate_bias().value = Tensor({1});
    Tape t(false);
    const Consolidation c = consolidate(m, t, Tensor::matrix({{0.0}}), Tensor::matrix({{2.0}}));
    EXPECT_EQ(c.attention.value()[0], 1.0);
    EXPECT_EQ(c.attended.value()[0], 2.0);
    EXPECT_EQ(c.gate.value()[0], 0.5);
    EXPECT_EQ(c.memory.value()[0], 1.0);
}

TEST(Consolidate, MatchesTermByTermAttention) {
    MemoryBank m(small(), 6);
    const Tensor old = randn({3, 4}, 5), enc = randn({2, 4}, 6);
    Tape t(false);
    const Consolidation c = consolidate(m, t, old, enc);
    const Tensor q = kernel::matmul(old, m.write_query().value), k = kernel::matmul(enc, m.write_key().value),
                 v = kernel::matmul(enc, m.write_value().value);
    auto rows = [](const Tensor& x) {
        std::vector<std::vector<double>> r(x.rows(), std::vector<double>(x.cols()));
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) r[i][j] = x(i, j);
        return r;
    };
    for (std::size_t s = 0; s < 3; ++s) {
        const auto expect = attend_row(rows(q)[s], rows(k), rows(v));
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(c.attended.value()(s, j), expect[j], 1e-12);
    }
    EXPECT_EQ(c.attention.value().shape(), (Shape{3, 2}));
}

TEST(Consolidate, GateStrictlyInsideUnitIntervalAndUpdateIsConvex) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        MemoryConfig cfg = small();
        cfg.seed = seed;
        MemoryBank m(cfg, 6);
        const Tensor old = randn({3, 4}, 10 + seed, 2.0), enc = randn({6, 4}, 20 + seed, 2.0);
        Tape t(false);
        const Consolidation c = consolidate(m, t, old, enc);
        for (std::size_t i = 0; i < c.gate.value().size(); ++i) {
            const double g = c.gate.value()[i];
            EXPECT_GT(g, 0.0);
            EXPECT_LT(g, 1.0);
            const double lo = std::min(old[i], c.attended.value()[i]), hi = std::max(old[i], c.attended.value()[i]);
            EXPECT_GE(c.memory.value()[i], lo);
            EXPECT_LE(c.memory.value()[i], hi);
            EXPECT_TRUE(std::isfinite(c.memory.value()[i]));
        }
    }
}

TEST(Consolidate, OverwriteAndFrozenRules) {
    MemoryBank m(small(), 6);
    const Tensor old = randn({3, 4}, 7), enc = randn({5, 4}, 8);
    Tape t(false);
    const Consolidation o = consolidate(m, t, old, enc, UpdateRule::overwrite);
    EXPECT_EQ(o.memory.value(), o.attended.value());
    const Consolidation f = consolidate(m, t, old, enc, UpdateRule::frozen);
    EXPECT_EQ(f.memory.value(), old);
}

TEST(Consolidate, GateWeightGradientMatchesFiniteDifferences) {
    MemoryBank m(small(), 6);
    const Tensor old = randn({3, 4}, 9), enc = randn({5, 4}, 10);
    auto loss = [&](Tape& t) { return ad::sum_squares(m.consolidate(t, t.constant(old), t.constant(enc)).memory); };
    expect_gradients_match(loss, {&m.gate_weight(), &m.gate_bias(), &m.write_query(), &m.write_key(), &m.write_value()});
}

TEST(Consolidate, PureFunction) {
    MemoryBank m(small(), 6);
    const Tensor old = randn({3, 4}, 11), enc = randn({5, 4}, 12);
    Tape t1(false), t2(false);
    EXPECT_EQ(consolidate(m, t1, old, enc).memory.value(), consolidate(m, t2, old, enc).memory.value());
}

TEST(Consolidate, RejectsMismatchedShapes) {
    MemoryBank m(small(), 6);
    Tape t(false);
    EXPECT_THROW(consolidate(m, t, Tensor({2, 4}), Tensor({5, 4})), DimensionError);
    EXPECT_THROW(consolidate(m, t, Tensor({3, 4}), Tensor({5, 3})), DimensionError);
}

TEST(Retrieve, SingleSlotReturnsItsValueRow) {
    MemoryBank m(small(1, 4), 6);
    const Tensor mem = randn({1, 4}, 13), enc = randn({3, 4}, 14);
    Tape t(false);
    const Retrieval r = m.retrieve(t, t.constant(mem), t.constant(enc));
    const Tensor v = kernel::matmul(mem, m.read_value().value);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.attention.value()(i, 0), 1.0);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.read.value()(i, j), v(0, j), 1e-15);
    }
}

TEST(Retrieve, IdenticalSlotsGiveIdenticalRows) {
    MemoryBank m(small(5, 4), 6);
    const Tensor row = randn({1, 4}, 15);
    Tensor mem({5, 4});
    for (std::size_t s = 0; s < 5; ++s)
        for (std::size_t j = 0; j < 4; ++j) mem(s, j) = row(0, j);
    Tape t(false);
    const Tensor r = m.retrieve(t, t.constant(mem), t.constant(randn({4, 4}, 16))).read.value();
    for (std::size_t i = 1; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r(i, j), r(0, j), 1e-15);
}

TEST(Retrieve, TwoSlotsHandConstructed) {
    MemoryBank m(small(2, 1), 1);
    m.read_query().value = Tensor::matrix({{1.0}});
    m.read_key().value = Tensor::matrix({{2.0}});
    m.read_value().value = Tensor::matrix({{3.0}});
    const Tensor mem = Tensor::matrix({{1.0}, {-0.5}}), enc = Tensor::matrix({{0.7}, {-1.2}});
    Tape t(false);
    const Retrieval r = m.retrieve(t, t.constant(mem), t.constant(enc));
    for (std::size_t i = 0; i < 2; ++i) {
        const double q = enc(i, 0);
        const double l0 = q * 2.0, l1 = q * -1.0;
        const double w0 = 1.0 / (1.0 + std::exp(l1 - l0));
        EXPECT_NEAR(r.logits.value()(i, 0), l0, 1e-15);
        EXPECT_NEAR(r.logits.value()(i, 1), l1, 1e-15);
        EXPECT_NEAR(r.read.value()(i, 0), w0 * 3.0 + (1.0 - w0) * -1.5, 1e-14);
    }
}

TEST(Retrieve, MultiHeadMatchesPerHeadAttention) {
    MemoryConfig cfg = small(3, 4);
    cfg.heads = 2;
    MemoryBank m(cfg, 6);
    const Tensor mem = randn({3, 4}, 17), enc = randn({2, 4}, 18);
    Tape t(false);
    const Tensor r = m.retrieve(t, t.constant(mem), t.constant(enc)).read.value();
    const Tensor q = kernel::matmul(enc, m.read_query().value), k = kernel::matmul(mem, m.read_key().value),
                 v = kernel::matmul(mem, m.read_value().value);
    for (std::size_t h = 0; h < 2; ++h) {
        auto part = [h](const Tensor& x) {
            std::vector<std::vector<double>> out(x.rows());
            for (std::size_t i = 0; i < x.rows(); ++i) out[i] = {x(i, 2 * h), x(i, 2 * h + 1)};
            return out;
        };
        for (std::size_t i = 0; i < 2; ++i) {
            const auto expect = attend_row(part(q)[i], part(k), part(v));
            EXPECT_NEAR(r(i, 2 * h), expect[0], 1e-12);
            EXPECT_NEAR(r(i, 2 * h + 1), expect[1], 1e-12);
        }
    }
}

TEST(Retrieve, GradientMatchesFiniteDifferences) {
    MemoryConfig cfg = small(3, 4);
    cfg.heads = 2;
    MemoryBank m(cfg, 6);
    Parameter mem("mem", randn({3, 4}, 19)), enc("enc", randn({2, 4}, 20));
    auto loss = [&](Tape& t) {
        const Retrieval r = m.retrieve(t, t.param(mem), t.param(enc));
        return ad::add(ad::sum_squares(r.read), ad::sum_squares(MemoryBank::importance_scores(r.logits)));
    };
    expect_gradients_match(loss, {&mem, &enc, &m.read_query(), &m.read_key(), &m.read_value()});
}

TEST(ImportanceScores, ZeroLogitsGiveUniformDistribution) {
    Tape t(false);
    const Tensor s = MemoryBank::importance_scores(t.constant(Tensor({3, 4}))).value();
    const SlotScores sc = MemoryBank::scores_from(s);
    EXPECT_EQ(sc.s, Tensor({4}));
    for (double p : sc.p.values()) EXPECT_NEAR(p, 0.25, 1e-15);
}

TEST(ImportanceScores, SingleRowIsReturnedAsIs) {
    Tape t(false);
    const Tensor row = Tensor::matrix({{0.5, -2.0, 3.0}});
    EXPECT_EQ(MemoryBank::importance_scores(t.constant(row)).value(), row);
}

TEST(ImportanceScores, MeanOverQueryPositions) {
    Tape t(false);
    const Tensor s = MemoryBank::importance_scores(t.constant(Tensor::matrix({{1, 3}, {3, 5}}))).value();
    EXPECT_EQ(s, Tensor::matrix({{2, 4}}));
    const SlotScores sc = MemoryBank::scores_from(s);
    EXPECT_NEAR(sc.p[0] + sc.p[1], 1.0, 1e-12);
}

TEST(MemoryBank, RejectsInvalidConfigs) {
    EXPECT_THROW(MemoryBank(small(0, 4), 6), ConfigError);
    EXPECT_THROW(MemoryBank(small(3, 0), 6), ConfigError);
    MemoryConfig c = small(3, 4);
    c.heads = 3;
    EXPECT_THROW(MemoryBank(c, 6), ConfigError);
    c = small(3, 4);
    c.init_std = -1.0;
    EXPECT_THROW(MemoryBank(c, 6), ConfigError);
}

TEST(MemoryBank, ParameterCountFollowsShapes) {
    const std::size_t S = 3, m = 4, d = 6;
    MemoryBank bank(small(S, m), d);
    const std::size_t expect = S * m + (d * m + m + m * m + m) + (m * m + m + m * d + d) + 3 * m * m + (2 * m * m + m) + 3 * m * m;
    EXPECT_EQ(bank.parameter_count(), expect);
    for (const Parameter* p : bank.parameters()) EXPECT_TRUE(p->trainable) << p->name;
}

TEST(MemoryBank, InitialSlotsFollowConfiguredSpread) {
    MemoryConfig c = small(64, 32);
    c.init_std = 0.02;
    MemoryBank bank(c, 6);
    double ss = 0.0;
    for (double v : bank.init_slots().value.values()) ss += v * v;
    EXPECT_NEAR(std::sqrt(ss / (64.0 * 32.0)), 0.02, 0.002);
}
