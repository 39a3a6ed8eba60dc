#include <gtest/gtest.h>

#include "gmem/memory_loop.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace gmem;
using gmem::testing::max_abs_diff;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.backbone.vocab_size = 10;
    c.backbone.hidden_dim = 4;
    c.backbone.layers = 1;
    c.backbone.heads = 2;
    c.backbone.max_segment_len = 3;
    c.backbone.init_std = 0.5;
    c.memory.slots = 2;
    c.memory.memory_dim = 2;
    return c;
}

ModelConfig small() {
    ModelConfig c;
    c.backbone.vocab_size = 16;
    c.backbone.hidden_dim = 8;
    c.backbone.max_segment_len = 5;
    c.backbone.init_std = 0.3;
    c.memory.slots = 3;
    c.memory.memory_dim = 4;
    return c;
}

const std::vector<Segment> kEpisode{{1, 5, 9, 2}, {7, 7, 3}, {0, 15, 4, 8, 6}};

}  // namespace

TEST(Step, MatchesStraightLineReference) {
    GMemModel model(tiny());
    reference::Weights w;
    w.add(model.backbone().parameters());
    w.add(model.trainable_parameters());
    const std::vector<TokenId> tokens{4, 9, 1};
    Rng rng(3);
    const Tensor memory = random_normal({2, 2}, 1.0, rng);

    const StepOutput out = model.step(tokens, memory);
    const reference::StepResult ref = reference::step(w, tiny().backbone, tokens, reference::as_mat(memory));
    EXPECT_LE(max_abs_diff(out.logits, reference::as_tensor(ref.logits)), 1e-12);
    EXPECT_LE(max_abs_diff(out.memory, reference::as_tensor(ref.memory)), 1e-12);
    EXPECT_LE(max_abs_diff(out.retrieval_attention, reference::as_tensor(ref.retrieval_attention)), 1e-12);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out.scores.s[i], ref.scores[i], 1e-12);
    double gmin = 1.0, gmax = 0.0, gsum = 0.0;
    for (const auto& row : ref.gate)
        for (double g : row) gmin = std::min(gmin, g), gmax = std::max(gmax, g), gsum += g / 4.0;
    EXPECT_NEAR(out.gate_stats.mean, gsum, 1e-12);
    EXPECT_NEAR(out.gate_stats.min, gmin, 1e-12);
    EXPECT_NEAR(out.gate_stats.max, gmax, 1e-12);
    EXPECT_EQ(out.logits.shape(), (Shape{3, 10}));
    EXPECT_TRUE(out.logits.all_finite());
}

TEST(Step, ClosedInjectionGateReproducesVanillaLogits) {
    GMemModel model(small());
    model.injection().gate_bias().value = Tensor({8}, -1e9);
    const Tensor mem = model.memory().init_slots().value;
    for (const auto& seg : kEpisode) EXPECT_EQ(model.step(seg, mem).logits, model.backbone().vanilla_logits(seg));
}

TEST(Step, BackboneUnchangedAfterSteps) {
    GMemModel model(small());
    const auto before = model.backbone().fingerprint();
    Tape t;
    EpisodeTrace tr = model.run_episode(t, kEpisode);
    t.backward(ad::sum_squares(tr.steps.back().logits));
    EXPECT_EQ(model.backbone().fingerprint(), before);
}

TEST(RunEpisode, SingleSegmentEqualsOneStep) {
    GMemModel model(small());
    const EpisodeOutput ep = model.run_episode(std::vector<Segment>{kEpisode[0]});
    const StepOutput st = model.step(kEpisode[0], model.memory().init_slots().value);
    ASSERT_EQ(ep.logits.size(), 1u);
    EXPECT_EQ(ep.logits[0], st.logits);
    EXPECT_EQ(ep.final_memory, st.memory);
    EXPECT_EQ(ep.scores[0].s, st.scores.s);
}

TEST(RunEpisode, BothGatesClosedGivesVanillaLogitsPerSegment) {
    GMemModel model(small());
    const EpisodeOutput ep = model.run_episode(kEpisode, LoopOptions::vanilla());
    for (std::size_t k = 0; k < kEpisode.size(); ++k) EXPECT_EQ(ep.logits[k], model.backbone().vanilla_logits(kEpisode[k]));
    EXPECT_EQ(ep.final_memory, model.memory().init_slots().value);
}

TEST(RunEpisode, ForcedGateBiasesGiveVanillaLogits) {
    GMemModel model(small());
    model.injection().gate_bias().value = Tensor({8}, -1e9);
    model.memory().gate_bias().value = Tensor({4}, -1e9);
    const EpisodeOutput ep = model.run_episode(kEpisode);
    for (std::size_t k = 0; k < kEpisode.size(); ++k) EXPECT_EQ(ep.logits[k], model.backbone().vanilla_logits(kEpisode[k]));
    EXPECT_LE(max_abs_diff(ep.final_memory, model.memory().init_slots().value), 1e-12);
}

TEST(RunEpisode, MemoryIsTheOnlyCrossSegmentChannel) {
    GMemModel model(small());
    std::vector<Segment> changed = kEpisode;
    changed[0] = {3, 3, 3};
    changed[1] = {12, 1};
    LoopOptions frozen;
    frozen.rule = UpdateRule::frozen;
    EXPECT_EQ(model.run_episode(kEpisode, frozen).logits.back(), model.run_episode(changed, frozen).logits.back());
    EXPECT_NE(model.run_episode(kEpisode).logits.back(), model.run_episode(changed).logits.back());
}

TEST(RunEpisode, EmptyEpisodeIsInputError) {
    GMemModel model(small());
    EXPECT_THROW(model.run_episode(std::vector<Segment>{}), InputError);
}

TEST(RunEpisode, Deterministic) {
    GMemModel a(small()), b(small());
    const EpisodeOutput x = a.run_episode(kEpisode), y = b.run_episode(kEpisode);
    EXPECT_EQ(x.logits, y.logits);
    EXPECT_EQ(x.final_memory, y.final_memory);
}

TEST(RunEpisode, PrecomputedHiddenStatesGiveSameResult) {
    GMemModel model(small());
    const std::vector<Tensor> hidden = model.hidden_states(kEpisode);
    EXPECT_EQ(model.run_episode(kEpisode).logits, model.run_episode(kEpisode, {}, &hidden).logits);
}

TEST(RunEpisode, LastSegmentLossReachesEarlierConsolidations) {
    GMemModel model(small());
    {
        auto loss = [&](Tape& t) {
            EpisodeTrace tr = model.run_episode(t, kEpisode);
            return ad::cross_entropy(tr.steps.back().logits, std::vector<std::size_t>{2, 4}, std::vector<std::size_t>{5, 11});
        };
        gmem::testing::expect_gradients_match(loss, model.trainable_parameters());
    }
    double norm = 0.0;
    for (double g : model.memory().write_key().grad.values()) norm += g * g;
    EXPECT_GT(norm, 0.0);
}

TEST(RunEpisode, TruncationWindowCutsGradientPaths) {
    GMemModel model(small());
    LoopOptions opt;
    opt.bptt_window = 1;
    for (Parameter* p : model.trainable_parameters()) p->zero_grad();
    Tape t;
    EpisodeTrace tr = model.run_episode(t, kEpisode, opt);
    t.backward(ad::sum_squares(tr.steps.back().logits));
    EXPECT_EQ(model.memory().write_key().grad, Tensor(model.memory().write_key().value.shape()));
    EXPECT_EQ(model.memory().init_slots().grad, Tensor(model.memory().init_slots().value.shape()));
    EXPECT_NE(model.memory().read_key().grad, Tensor(model.memory().read_key().value.shape()));
}

TEST(GMemModel, ParameterRatioLimit) {
    ModelConfig c;
    const double ratio = GMemModel(c).parameter_ratio();
    EXPECT_GT(ratio, 0.0);
    c.max_param_ratio = ratio * 1.01;
    EXPECT_NO_THROW(GMemModel{c});
    c.max_param_ratio = ratio * 0.99;
    EXPECT_THROW(GMemModel{c}, ConfigError);
}

TEST(GMemModel, OnlyMemoryParametersAreTrainable) {
    GMemModel model(small());
    for (Parameter* p : model.trainable_parameters()) EXPECT_TRUE(p->trainable) << p->name;
    for (const Parameter* p : model.backbone().parameters()) EXPECT_FALSE(p->trainable) << p->name;
}
