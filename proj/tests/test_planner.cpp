#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <string>

#include "tinyvlm/error.hpp"
#include "liveness_sim.hpp"
#include "tinyvlm/planner.hpp"

using namespace tinyvlm;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no tinyvlm::Error thrown";
    return ErrorCode::InvalidArgument;
}

constexpr std::uint64_t KB = 1024;

PlanInputs fig3() { return {892 * KB, 5 * KB, 285 * KB, 0}; }

}  // namespace

TEST(PeakActivation, SingleLayerArithmetic) {
    LayerGraph g;
    g.input_shape = {100, 100, 3};
    g.layers.push_back(make_conv2d(3, 8, 2, 2, 0, std::vector<float>(8 * 2 * 2 * 3), std::vector<float>(8)));
    EXPECT_EQ(peak_activation(g, 1), 50'000u);
    EXPECT_EQ(peak_activation(g, 4), 200'000u);
    EXPECT_EQ(peak_activation(g), 200'000u);
    g.calibrated = true;
    EXPECT_EQ(peak_activation(g), 50'000u);
}

TEST(PeakActivation, ResidualKeepsSkipLive) {
    LayerGraph g;
    g.input_shape = {4, 4, 8};
    g.layers.push_back(make_inverted_residual(8, 8, 2, 1));
    // expanded 256 + depthwise 256 + pending skip 128.
    EXPECT_EQ(peak_activation(g, 1), 640u);
    g.layers[0] = make_inverted_residual(8, 16, 2, 1);
    EXPECT_EQ(peak_activation(g, 1), 512u);
}

TEST(PeakActivation, MatchesLivenessSimulation) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t eb = trial % 2 ? 1 : 4;
        const auto [g, sim] = testing_graphs::random_graph(rng, eb);
        ASSERT_NO_THROW(activation_point_shapes(g, g.layers.size() - 1)) << "trial " << trial;
        EXPECT_EQ(peak_activation(g, eb), sim.peak()) << "trial " << trial;
    }
}

TEST(PeakActivation, UnresolvedShapes) {
    LayerGraph g;
    g.layers.push_back(make_relu6());
    EXPECT_EQ(code_of([&] { peak_activation(g, 1); }), ErrorCode::UnresolvedShapes);
    g.input_shape = {4, 4, 3};
    g.layers[0] = make_pointwise(5, 2, std::vector<float>(10), std::vector<float>(2));
    EXPECT_EQ(code_of([&] { peak_activation(g, 1); }), ErrorCode::UnresolvedShapes);
}

TEST(Plan, MemoryLayoutFigure) {
    const auto r = plan(fig3(), PlatformSpec::preset("stm32h7"));
    EXPECT_TRUE(r.feasible);
    EXPECT_TRUE(r.violating_item.empty());
    EXPECT_EQ(r.used(RegionRole::Flash), 892 * KB + 5120);
    EXPECT_EQ(*r.slack(RegionRole::Flash), 2 * 1024 * KB - 892 * KB - 5120);
    EXPECT_EQ(*r.slack(RegionRole::Flash), 1'178'624u);
    EXPECT_EQ(r.used(RegionRole::Sram), 285 * KB);
    EXPECT_EQ(r.peak_activation_bytes, 291'840u);
    ASSERT_EQ(r.placements.size(), 4u);
    EXPECT_EQ(r.placements[0], (Placement{"weights", RegionRole::Flash, 892 * KB}));
    EXPECT_EQ(r.placements[1], (Placement{"embeddings", RegionRole::Flash, 5120}));
    EXPECT_EQ(r.placements[2], (Placement{"activations", RegionRole::Sram, 285 * KB}));
    EXPECT_TRUE(plan(fig3(), PlatformSpec::preset("stm32h7_512k")).feasible);
    const auto text = render_layout(r);
    EXPECT_NE(text.find("weights"), std::string::npos);
    EXPECT_NE(text.find("activations"), std::string::npos);
}

TEST(Plan, OversizedTableIsNamed) {
    PlanInputs in = fig3();
    in.table_bytes = 3 * 1024 * KB;
    const auto r = plan(in, PlatformSpec::preset("stm32h7"));
    EXPECT_FALSE(r.feasible);
    EXPECT_EQ(r.violating_item, "embeddings");
    for (const auto& u : r.regions) EXPECT_LE(u.used, u.capacity);
}

TEST(Plan, TinyInputsFitEverywhere) {
    for (const auto& name : PlatformSpec::preset_names()) {
        const auto r = plan(PlanInputs{0, 64, 0, 0}, PlatformSpec::preset(name));
        EXPECT_TRUE(r.feasible) << name;
    }
}

TEST(Plan, AcceleratorRegionsPreferred) {
    const auto r = plan(PlanInputs{25 * KB, 5 * KB, 40 * KB, 3 * KB}, PlatformSpec::preset("max78000"));
    ASSERT_TRUE(r.feasible);
    for (const auto& p : r.placements) {
        const bool weight_item = p.item == "weights" || p.item == "embeddings";
        EXPECT_EQ(p.region, weight_item ? RegionRole::AccelWeight : RegionRole::AccelData) << p.item;
    }
    EXPECT_EQ(r.used(RegionRole::Sram), 0u);
    // Weights too big for the accelerator fall back to flash.
    const auto big = plan(PlanInputs{480 * KB, 5 * KB, 40 * KB, 0}, PlatformSpec::preset("max78000"));
    EXPECT_TRUE(big.feasible);
    EXPECT_EQ(big.placements[0].region, RegionRole::Flash);
    EXPECT_EQ(big.placements[1].region, RegionRole::AccelWeight);
}

TEST(Plan, MonotoneInCapacity) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::uint64_t> cap(1, 100), item(0, 80);
    int checked = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        PlatformSpec spec{"rand", 1, {{RegionRole::Flash, cap(rng)}, {RegionRole::Sram, cap(rng)}}};
        if (trial % 2) spec.regions.push_back({RegionRole::AccelWeight, cap(rng)});
        if (trial % 3) spec.regions.push_back({RegionRole::AccelData, cap(rng)});
        if (trial % 5 == 0) spec.regions.push_back({RegionRole::Tcm, cap(rng)});
        const PlanInputs in{item(rng), item(rng), item(rng), item(rng)};
        const bool before = plan(in, spec).feasible;
        auto bigger = spec;
        bigger.regions[rng() % bigger.regions.size()].capacity += cap(rng);
        const auto after = plan(in, bigger);
        if (before) {
            ++checked;
            EXPECT_TRUE(after.feasible) << "trial " << trial;
        }
        for (const auto& u : after.regions) {
            std::uint64_t sum = 0;
            for (const auto& p : after.placements)
                if (p.region == u.region) sum += p.bytes;
            EXPECT_EQ(sum, u.used);
        }
    }
    EXPECT_GT(checked, 100);
}

TEST(MaxClasses, WorkedExamples) {
    EXPECT_EQ(classes_for_slack(10'240, 128, 1), 80u);
    EXPECT_EQ(classes_for_slack(64'000, 64, 1), 1000u);
    EXPECT_EQ(classes_for_slack(100, 128, 1), 0u);

    const PlanInputs base{892 * KB, 0, 285 * KB, 0};
    PlatformSpec spec{"tight", 1, {{RegionRole::Flash, 892 * KB + 10'240}, {RegionRole::Sram, 512 * KB}}};
    EXPECT_EQ(max_classes(spec, base, 128, 1), 80u);
    spec.regions[0].capacity = 892 * KB + 64'000;
    EXPECT_EQ(max_classes(spec, base, 64, 1), 1000u);
    EXPECT_EQ(max_classes(spec, base, 64'001, 1), 0u);
    const auto stm = PlatformSpec::preset("stm32h7");
    EXPECT_EQ(max_classes(stm, base, 256, 1), 1'178'624u / 256u + 5120u / 256u);
    spec.regions[0].capacity = 100 * KB;
    EXPECT_EQ(code_of([&] { max_classes(spec, base, 64, 1); }), ErrorCode::InfeasibleBase);
}

TEST(Platform, DataFilesMatchPresets) {
    for (const auto& name : PlatformSpec::preset_names()) {
        const auto spec = PlatformSpec::from_file(std::string(TINYVLM_SOURCE_DIR) + "/platforms/" + name + ".txt");
        EXPECT_EQ(spec, PlatformSpec::preset(name)) << name;
        EXPECT_EQ(PlatformSpec::parse(spec.to_text()), spec) << name;
    }
}

TEST(Platform, ParseErrors) {
    EXPECT_EQ(code_of([] { PlatformSpec::parse("name=x\nflash=1M\n"); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { PlatformSpec::parse("name=x\nflash=1M\nsram=0\n"); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { PlatformSpec::parse("name=x\nflash=1G\nsram=1\n"); }), ErrorCode::ParseError);
    EXPECT_EQ(code_of([] { PlatformSpec::parse("name=x\nflash=1M\nsram=1\ndram=4\n"); }), ErrorCode::ParseError);
    EXPECT_EQ(code_of([] { PlatformSpec::parse("flash 1M\n"); }), ErrorCode::ParseError);
    EXPECT_EQ(code_of([] { PlatformSpec::parse("name=x\nflash=1M\nflash=2M\nsram=1\n"); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { PlatformSpec::preset("nope"); }), ErrorCode::InvalidArgument);
    const auto ok = PlatformSpec::parse("# comment\n name = a # trailing\nflash=3K\nsram=12\n");
    EXPECT_EQ(ok.name, "a");
    EXPECT_EQ(*ok.capacity(RegionRole::Flash), 3072u);
    EXPECT_EQ(*ok.capacity(RegionRole::Sram), 12u);
}

TEST(Plan, FromGraphAndTable) {
    const LayerGraph g = desk_preset(42);
    const auto in = plan_inputs(g, nullptr);
    EXPECT_EQ(in.weight_bytes, model_size_bytes(g, Precision::F32));
    EXPECT_EQ(in.activation_bytes, peak_activation(g, 4));
    EXPECT_EQ(in.io_bytes, 32u * 32u * 3u);
    EXPECT_TRUE(plan(g, nullptr, PlatformSpec::preset("stm32h7")).feasible);
}
