#include <gtest/gtest.h>

#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/encoder.hpp"
#include "tinyvlm/zeroshot.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run tvlm(const std::string& args) {
    const std::string cmd = std::string(TVLM_BINARY) + " " + args + " 2>/dev/null";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("tvlm_cli_" + std::to_string(::getpid()) + "_" +
               ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string at(const std::string& name) const { return (dir / name).string(); }

    // Demo encoder, i8 table and query image.
    void make_demo() {
        ASSERT_EQ(tvlm("make-demo --out-dir " + dir.string()).code, 0);
        ASSERT_EQ(tvlm("embed-build --csv " + at("classes.csv") + " --precision i8 --out " + at("t.tve")).code, 0);
    }

    fs::path dir;
};

}  // namespace

TEST_F(Cli, HelpOnEveryCommand) {
    for (const char* c : {"", "embed-build", "select-dim", "infer", "train-toy", "gradcheck", "plan", "compress",
                          "compress embed", "compress bench-attn", "make-model", "make-demo"}) {
        const auto r = tvlm(std::string(c) + " --help");
        EXPECT_EQ(r.code, 0) << c;
        EXPECT_NE(r.out.find("--help"), std::string::npos) << c;
    }
    EXPECT_NE(tvlm("plan --help").out.find("--platform"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(tvlm("").code, 1);
    EXPECT_EQ(tvlm("no-such-command").code, 1);
    EXPECT_EQ(tvlm("select-dim --classes 80").code, 1);
    EXPECT_EQ(tvlm("select-dim --classes x --budget 1").code, 1);
}

TEST_F(Cli, SelectDim) {
    const auto r = tvlm("select-dim --classes 80 --budget 10240 --bytes-per-value 1 --ladder 16,32,64,128,256");
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["schema_version"], 1);
    EXPECT_EQ(j["dim"], 128);
    EXPECT_EQ(tvlm("select-dim --classes 80 --budget 1279").code, 2);
    EXPECT_EQ(json::parse(tvlm("select-dim --classes 80 --budget 1280").out)["dim"], 16);
}

TEST_F(Cli, EmbedBuild) {
    std::mt19937_64 rng(42);
    std::normal_distribution<double> nd;
    {
        std::ofstream f(at("c.csv"));
        f << "class,template";
        for (int i = 0; i < 64; ++i) f << ",e" << i;
        f << "\n";
        for (int k = 0; k < 80; ++k) {
            f << "c" << k << ",a photo";
            for (int i = 0; i < 64; ++i) f << "," << nd(rng);
            f << "\n";
        }
    }
    const auto r = tvlm("embed-build --csv " + at("c.csv") + " --precision i8 --out " + at("t.tve"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(json::parse(r.out)["payload_bytes"], 5120);
    const auto t = tinyvlm::unpack(tinyvlm::read_file_bytes(at("t.tve")));
    EXPECT_EQ(t.size(), 80u);
    EXPECT_EQ(t.dim(), 64u);

    {
        std::ofstream f(at("c.csv"), std::ios::app);
        f << "c3,again";
        for (int i = 0; i < 64; ++i) f << ",0.5";
        f << "\n";
    }
    const auto dup = tvlm("embed-build --csv " + at("c.csv") + " --out " + at("t2.tve"));
    EXPECT_NE(dup.code, 0);
    EXPECT_FALSE(fs::exists(at("t2.tve")));
}

TEST_F(Cli, InferGolden) {
    make_demo();
    const std::string args =
        "infer --image " + at("query.ppm") + " --model " + at("model.tvg") + " --table " + at("t.tve") + " --path f32";
    const auto r = tvlm(args);
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(r.out, slurp(std::string(TINYVLM_SOURCE_DIR) + "/tests/golden/infer_f32.json"));
    EXPECT_EQ(tvlm(args).out, r.out);

    // The golden numbers agree with the library's float path.
    const auto golden = json::parse(r.out);
    const auto g = tinyvlm::read_graph_file(at("model.tvg"));
    const auto t = tinyvlm::unpack(tinyvlm::read_file_bytes(at("t.tve")));
    const auto p = tinyvlm::run_pipeline(tinyvlm::read_ppm_file(at("query.ppm")), g, t, t.dim(),
                                         tinyvlm::InferencePath::F32);
    EXPECT_EQ(golden["class_index"], p.class_index);
    ASSERT_EQ(golden["scores"].size(), p.scores.size());
    for (std::size_t k = 0; k < p.scores.size(); ++k) EXPECT_NEAR(golden["scores"][k].get<double>(), p.scores[k], 5e-7);

    const auto i8 = tvlm("infer --image " + at("query.ppm") + " --model " + at("model.tvg") + " --table " +
                         at("t.tve") + " --path i8");
    ASSERT_EQ(i8.code, 0);
    EXPECT_EQ(json::parse(i8.out)["class_index"], golden["class_index"]);
}

TEST_F(Cli, InferErrors) {
    make_demo();
    const std::string base = " --model " + at("model.tvg") + " --table " + at("t.tve");
    EXPECT_NE(tvlm("infer --image " + at("missing.ppm") + base).code, 0);
    EXPECT_NE(tvlm("infer --image " + at("query.ppm") + base + " --dim 512").code, 0);
    EXPECT_NE(tvlm("infer --image " + at("query.ppm") + base + " --path f16").code, 0);
}

TEST_F(Cli, GradcheckSeed42) {
    const auto r = tvlm("gradcheck --seed 42");
    EXPECT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["seed"], 42);
    EXPECT_TRUE(j["passed"].get<bool>());
    EXPECT_EQ(j["checks"].size(), 5u);
}

TEST_F(Cli, PlanFigureNumbers) {
    const auto r = tvlm("plan --platform stm32h7 --weights-bytes 913408 --table-bytes 5120 --activation-bytes 291840");
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out)["layout"];
    EXPECT_TRUE(j["feasible"].get<bool>());
    EXPECT_EQ(j["regions"][0]["region"], "flash");
    EXPECT_EQ(j["regions"][0]["used"], 918528);
    EXPECT_EQ(j["regions"][0]["slack"], 1178624);
    EXPECT_EQ(j["regions"][1]["used"], 291840);

    const auto file = tvlm("plan --platform " + std::string(TINYVLM_SOURCE_DIR) +
                           "/platforms/stm32h7.txt --weights-bytes 913408 --table-bytes 5120 --activation-bytes 291840");
    EXPECT_EQ(file.out, r.out);
    EXPECT_EQ(tvlm("plan --platform stm32h7 --table-bytes 3000000").code, 2);
    EXPECT_EQ(tvlm("plan --platform nowhere").code, 2);
}

TEST_F(Cli, PlanFromFiles) {
    make_demo();
    const auto r = tvlm("plan --model " + at("model.tvg") + " --table " + at("t.tve") + " --platform esp32s3 --dim 64");
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_TRUE(j["layout"]["feasible"].get<bool>());
    EXPECT_GT(j["max_classes"].get<std::uint64_t>(), 1000u);
}

TEST_F(Cli, CompressCommands) {
    const auto b = tvlm("compress bench-attn --n 64 --d 16");
    ASSERT_EQ(b.code, 0);
    const auto j = json::parse(b.out);
    EXPECT_LT(j["linear_multiplies"].get<std::uint64_t>(), j["naive_multiplies"].get<std::uint64_t>());
    EXPECT_LT(j["max_abs_diff"].get<double>(), 1e-8);
    EXPECT_EQ(j["fused_attention_params"], 768);

    make_demo();
    const auto e = tvlm("compress embed --table " + at("t.tve") + " --clusters 2 --rank 3 --residual 10 --out " +
                        at("f.tvc"));
    ASSERT_EQ(e.code, 0);
    const auto je = json::parse(e.out);
    EXPECT_EQ(je["residual_entries"], 10);
    EXPECT_TRUE(fs::exists(at("f.tvc")));
    EXPECT_EQ(tvlm("compress embed --table " + at("t.tve") + " --clusters 20").code, 2);
}

TEST_F(Cli, TrainToyIsReproducible) {
    const auto a = tvlm("train-toy --epochs 3 --seed 7 --out " + at("v.tvg"));
    const auto b = tvlm("train-toy --epochs 3 --seed 7");
    ASSERT_EQ(a.code, 0);
    const auto ja = json::parse(a.out), jb = json::parse(b.out);
    EXPECT_EQ(ja["seed"], 7);
    EXPECT_EQ(ja["steps"], 12);
    EXPECT_EQ(ja["curve"], jb["curve"]);
    EXPECT_NO_THROW(tinyvlm::read_graph_file(at("v.tvg")));
}

TEST_F(Cli, MakeModel) {
    const auto r = tvlm("make-model --preset desk --calibrate 4 --out " + at("m.tvg"));
    ASSERT_EQ(r.code, 0);
    EXPECT_TRUE(json::parse(r.out)["calibrated"].get<bool>());
    ASSERT_EQ(tvlm("make-model --preset desk --calibrate 4 --out " + at("m2.tvg")).code, 0);
    EXPECT_EQ(tinyvlm::read_file_bytes(at("m.tvg")), tinyvlm::read_file_bytes(at("m2.tvg")));
    EXPECT_EQ(tvlm("make-model --preset lenet --out " + at("m3.tvg")).code, 2);
}
