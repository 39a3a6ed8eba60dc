#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gmem/checkpoint.hpp"
#include "gmem/experiments.hpp"

using namespace gmem;
namespace fs = std::filesystem;

#ifndef GMEM_CLI
#error "GMEM_CLI must name the gmem executable"
#endif

namespace {

const char* kTinyConfig = R"(# small enough for a few seconds per command
hidden_dim = 16
layers = 1
heads = 2
pretrain_steps = 10
pretrain_batch_size = 4
slots = 4
memory_dim = 8
hops = 1
distractors = 2
train_examples = 40
test_examples = 24
steps = 6
batch_size = 4
checkpoint_every = 3
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("gmem_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        spit(dir_ / "tiny.cfg", kTinyConfig);
    }
    void TearDown() override { fs::remove_all(dir_); }

    int run(const std::string& args) {
        const std::string cmd = std::string("\"") + GMEM_CLI + "\" " + args + " > \"" + (dir_ / "stdout.txt").string() +
                                "\" 2> \"" + (dir_ / "stderr.txt").string() + "\"";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    std::string out() const { return slurp(dir_ / "stdout.txt"); }
    std::string err() const { return slurp(dir_ / "stderr.txt"); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }
    std::string cfg() const { return path("tiny.cfg"); }

    fs::path dir_;
};

RunConfig tiny_config() { return parse_config(kTinyConfig); }

}  // namespace

TEST(Config, DefaultsRoundTrip) {
    const RunConfig d;
    EXPECT_EQ(to_text(parse_config(to_text(d))), to_text(d));
    EXPECT_EQ(to_text(parse_config(documented_defaults())), to_text(d));
    EXPECT_EQ(to_text(parse_config("")), to_text(d));
}

TEST(Config, ModifiedValuesRoundTrip) {
    RunConfig c = parse_config("lr = 0.1\nlambda_entropy = 0.05 # comment\n  slots=32  \ntask = relation\nupdate_rule = overwrite\n");
    EXPECT_EQ(c.train.adam.lr, 0.1);
    EXPECT_EQ(c.train.weights.entropy, 0.05);
    EXPECT_EQ(c.model.memory.slots, 32u);
    EXPECT_EQ(c.task.kind, TaskKind::relation);
    EXPECT_EQ(c.train.loop.rule, UpdateRule::overwrite);
    set_config_value(c, "lambda_sparsity", "0.30000000000000004");
    EXPECT_EQ(to_text(parse_config(to_text(c))), to_text(c));
    EXPECT_EQ(parse_config(to_text(c)).train.weights.sparsity, 0.30000000000000004);
}

TEST(Config, EveryKeyIsDocumented) {
    std::istringstream in(documented_defaults());
    std::string line, prev;
    std::size_t keys = 0;
    while (std::getline(in, line)) {
        if (!line.starts_with("#")) {
            EXPECT_TRUE(prev.starts_with("# ") && prev.size() > 3) << line;
            ++keys;
        }
        prev = line;
    }
    const std::string text = to_text(RunConfig{});
    EXPECT_EQ(keys, static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("slots = 4\nslots = 8\n"), ConfigError);
    EXPECT_THROW(parse_config("slots 4\n"), ConfigError);
    EXPECT_THROW(parse_config("slots = \n"), ConfigError);
    EXPECT_THROW(parse_config("slots = four\n"), ConfigError);
    EXPECT_THROW(parse_config("slots = -4\n"), ConfigError);
    EXPECT_THROW(parse_config("lr = 1e-3x\n"), ConfigError);
    EXPECT_THROW(parse_config("task = hotpot\n"), ConfigError);
    EXPECT_THROW(parse_config("lambda_entropy = -0.1\n"), ConfigError);
    EXPECT_THROW(parse_config("entities = 60\n"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/gmem.cfg"), ConfigError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    RunConfig cfg = tiny_config();
    cfg.pretrain.steps = 0;
    GMemModel model(build_backbone(cfg), cfg.model.memory);
    const DatasetSplits data = build_data(cfg);
    Trainer tr(model, data.train, cfg.train);
    tr.run();
    const std::string bytes = serialize(capture(model, &tr.optimizer(), tr.step(), snapshot_text(cfg)));
    EXPECT_EQ(bytes.substr(0, 4), "GMEM");
    EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\0\0\0", 4));
    const Checkpoint back = deserialize(bytes);
    EXPECT_EQ(back.step, 6u);
    EXPECT_EQ(back.config_text, snapshot_text(cfg));
    EXPECT_EQ(serialize(back), bytes);

    const auto file = fs::temp_directory_path() / "gmem_ckpt_roundtrip.gmem";
    save_checkpoint(file.string(), back);
    EXPECT_EQ(slurp(file), bytes);
    save_checkpoint(file.string(), load_checkpoint(file.string()));
    EXPECT_EQ(slurp(file), bytes);
    fs::remove(file);

    GMemModel other(Backbone(cfg.model.backbone), cfg.model.memory);
    restore(back, other);
    EXPECT_EQ(other.backbone().fingerprint(), model.backbone().fingerprint());
    const Dataset& test = data.test;
    EXPECT_EQ(other.run_episode(test[0].segments).logits, model.run_episode(test[0].segments).logits);
}

TEST(Checkpoint, CorruptBytesAreIoErrors) {
    Checkpoint c;
    c.tensors.emplace_back("a", Tensor::matrix({{1, 2}, {3, 4}}));
    c.tensors.emplace_back("b", Tensor::vector({5}));
    c.step = 9;
    c.config_text = "slots = 4\n";
    const std::string bytes = serialize(c);
    for (std::size_t n = 0; n < bytes.size(); ++n) EXPECT_THROW(deserialize(bytes.substr(0, n)), IoError) << "prefix " << n;
    EXPECT_THROW(deserialize(bytes + "x"), IoError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize(bad), IoError);
    bad = bytes;
    bad[4] = 2;
    EXPECT_THROW(deserialize(bad), IoError);
    EXPECT_THROW(load_checkpoint("/nonexistent/x.gmem"), IoError);
}

TEST(Checkpoint, MismatchedModelIsConfigError) {
    RunConfig cfg = tiny_config();
    cfg.pretrain.steps = 0;
    GMemModel model(build_backbone(cfg), cfg.model.memory);
    const Checkpoint c = capture(model, nullptr, 0, snapshot_text(cfg));
    MemoryConfig wider = cfg.model.memory;
    wider.slots = 8;
    GMemModel other(Backbone(cfg.model.backbone), wider);
    EXPECT_THROW(restore(c, other), ConfigError);
    Adam adam(model.trainable_parameters(), {});
    EXPECT_THROW(restore(c, model, &adam), ConfigError);
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("generate --config " + cfg()), 2);
    EXPECT_EQ(run("generate --config " + path("missing.cfg") + " --out " + path("d.txt")), 2);
    spit(dir_ / "bad.cfg", "slots = 4\nbogus = 1\n");
    EXPECT_EQ(run("train --config " + path("bad.cfg") + " --out " + path("run")), 2);
    EXPECT_NE(err().find("bogus"), std::string::npos);
    EXPECT_EQ(run("eval --checkpoint " + path("x.gmem") + " --memory sideways"), 2);
    EXPECT_EQ(run("gradcheck --corrupt no.such.tensor"), 2);
    EXPECT_EQ(run("ablate-slots --config " + cfg() + " --slots 4 --seeds 0"), 2);
}

TEST_F(Cli, IoErrorsExitWithThree) {
    EXPECT_EQ(run("eval --checkpoint " + path("missing.gmem")), 3);
    spit(dir_ / "junk.gmem", "GMEM\x01");
    EXPECT_EQ(run("eval --checkpoint " + path("junk.gmem")), 3);
    EXPECT_EQ(run("generate --config " + cfg() + " --out /nonexistent/dir/d.txt"), 3);
    EXPECT_EQ(run("train --config " + cfg() + " --data " + path("missing.txt") + " --out " + path("run")), 3);
}

TEST_F(Cli, NumericalAbortExitsWithFour) {
    spit(dir_ / "nan.cfg", std::string(kTinyConfig) + "lr = 1e300\nclip_norm = 0\n");
    EXPECT_EQ(run("train --config " + path("nan.cfg") + " --out " + path("run")), 4);
    EXPECT_NE(err().find("numerical"), std::string::npos) << err();
}

TEST_F(Cli, DefaultsCommandPrintsAParsableConfig) {
    ASSERT_EQ(run("defaults"), 0);
    EXPECT_EQ(to_text(parse_config(out())), to_text(RunConfig{}));
}

TEST_F(Cli, GenerateIsDeterministicAndMatchesTheLibrary) {
    ASSERT_EQ(run("generate --config " + cfg() + " --out " + path("a.txt")), 0);
    ASSERT_EQ(run("generate --config " + cfg() + " --out " + path("b.txt")), 0);
    ASSERT_EQ(run("generate --config " + cfg() + " --out " + path("t.txt") + " --split test"), 0);
    EXPECT_EQ(slurp(dir_ / "a.txt"), slurp(dir_ / "b.txt"));
    EXPECT_EQ(read_dataset(path("a.txt")), build_data(tiny_config()).train);
    EXPECT_EQ(read_dataset(path("t.txt")), build_data(tiny_config()).test);
}

TEST_F(Cli, TrainWritesReproducibleOutputs) {
    ASSERT_EQ(run("train --config " + cfg() + " --out " + path("a")), 0) << err();
    ASSERT_EQ(run("train --config " + cfg() + " --out " + path("b")), 0) << err();
    const std::string metrics = slurp(dir_ / "a" / "metrics.csv");
    EXPECT_TRUE(metrics.starts_with("step,clm,sparsity,entropy,total,slot_entropy,gate_mean,answer_acc\n"));
    EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 7);
    for (const char* f : {"metrics.csv", "checkpoint.gmem", "checkpoint-3.gmem", "checkpoint-6.gmem"})
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    EXPECT_EQ(parse_config(slurp(dir_ / "a" / "config.txt")).out_dir, path("a"));
    EXPECT_FALSE(slurp(dir_ / "a" / "train.log").empty());
    EXPECT_EQ(load_checkpoint(path("a/checkpoint.gmem")).config_text, snapshot_text(tiny_config()));
}

TEST_F(Cli, ResumeMatchesAnUninterruptedRun) {
    ASSERT_EQ(run("train --config " + cfg() + " --out " + path("full")), 0) << err();
    ASSERT_EQ(run("train --config " + cfg() + " --out " + path("cut")), 0) << err();
    fs::remove(dir_ / "cut" / "checkpoint.gmem");
    fs::remove(dir_ / "cut" / "checkpoint-6.gmem");
    ASSERT_EQ(run("train --resume " + path("cut/checkpoint-3.gmem") + " --out " + path("cut")), 0) << err();
    for (const char* f : {"metrics.csv", "checkpoint.gmem", "checkpoint-6.gmem"})
        EXPECT_EQ(slurp(dir_ / "full" / f), slurp(dir_ / "cut" / f)) << f;

    spit(dir_ / "other.cfg", std::string(kTinyConfig) + "lr = 0.01\n");
    EXPECT_EQ(run("train --config " + path("other.cfg") + " --resume " + path("cut/checkpoint-3.gmem") + " --out " + path("cut")), 2);
}

TEST_F(Cli, EvalIsReproducible) {
    ASSERT_EQ(run("train --config " + cfg() + " --out " + path("r")), 0) << err();
    const std::string ckpt = path("r/checkpoint.gmem");
    ASSERT_EQ(run("eval --checkpoint " + ckpt + " --report " + path("a.csv")), 0) << err();
    ASSERT_EQ(run("eval --checkpoint " + ckpt + " --report " + path("b.csv")), 0) << err();
    EXPECT_EQ(slurp(dir_ / "a.csv"), slurp(dir_ / "b.csv"));
    EXPECT_TRUE(slurp(dir_ / "a.csv").starts_with("memory,examples,exact_match,token_f1,slot_entropy,mean_abs_score\non,24,"));
    ASSERT_EQ(run("eval --checkpoint " + ckpt + " --memory off"), 0);
    EXPECT_TRUE(out().starts_with("memory,examples,exact_match,token_f1,slot_entropy,mean_abs_score\noff,24,"));
    ASSERT_EQ(run("generate --config " + cfg() + " --out " + path("t.txt") + " --split test"), 0);
    ASSERT_EQ(run("eval --checkpoint " + ckpt + " --data " + path("t.txt") + " --config " + cfg() + " --report " + path("c.csv")), 0);
    EXPECT_EQ(slurp(dir_ / "c.csv"), slurp(dir_ / "a.csv"));
    spit(dir_ / "other.cfg", std::string(kTinyConfig) + "slots = 8\n");
    EXPECT_EQ(run("eval --checkpoint " + ckpt + " --config " + path("other.cfg")), 2);
}

TEST_F(Cli, GradcheckPassesAndCatchesCorruption) {
    ASSERT_EQ(run("gradcheck"), 0) << err();
    const std::string report = out();
    GMemModel model(gradcheck_config().model);
    for (const Parameter* p : model.trainable_parameters()) {
        const std::string key = "\n" + p->name + ",";
        const auto first = report.find(key);
        EXPECT_NE(first, std::string::npos) << p->name;
        EXPECT_EQ(report.find(key, first + 1), std::string::npos) << p->name;
    }
    EXPECT_EQ(run("gradcheck --corrupt inject.gate.w"), 1);
    EXPECT_NE(out().find("inject.gate.w,"), std::string::npos);
}

TEST_F(Cli, AblateSlotsRowsAreSorted) {
    ASSERT_EQ(run("ablate-slots --config " + cfg() + " --slots 8,4 --seeds 1 --out " + path("a.csv")), 0) << err();
    std::istringstream in(slurp(dir_ / "a.csv"));
    std::string header, r1, r2, extra;
    std::getline(in, header);
    std::getline(in, r1);
    std::getline(in, r2);
    EXPECT_EQ(header, "slots,em,f1,train_seconds,param_count");
    EXPECT_TRUE(r1.starts_with("4,"));
    EXPECT_TRUE(r2.starts_with("8,"));
    EXPECT_FALSE(std::getline(in, extra));
    ASSERT_EQ(run("ablate-slots --config " + cfg() + " --slots 4 --seeds 1"), 0) << err();
    const std::string single = out();
    EXPECT_EQ(std::count(single.begin(), single.end(), '\n'), 2);
    const std::string row = single.substr(single.find('\n') + 1);
    auto em_f1 = [](const std::string& r) { return r.substr(0, r.find(',', r.find(',', 2) + 1)); };
    EXPECT_EQ(em_f1(row), em_f1(r1));
}
