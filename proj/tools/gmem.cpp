// gmem: generate data, train, evaluate, gradient-check and ablate the gated
// memory model. Exit codes: 0 ok, 1 check failed, 2 usage or configuration,
// 3 I/O, 4 numerical abort.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "gmem/checkpoint.hpp"
#include "gmem/experiments.hpp"

namespace fs = std::filesystem;
using namespace gmem;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

class TrainLog {
public:
    explicit TrainLog(const fs::path& path) : out_(path, std::ios::app) {
        if (!out_) throw IoError("cannot open '" + path.string() + "'");
    }
    void line(const std::string& msg) {
        const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

// Metrics rows with step <= `keep`, header included.
std::string metrics_prefix(const fs::path& path, std::uint64_t keep) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "' to resume");
    std::string line, out;
    if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("'" + path.string() + "' is not a metrics file");
    out = line + "\n";
    while (std::getline(in, line)) {
        if (std::stoull(line.substr(0, line.find(','))) > keep) break;
        out += line + "\n";
    }
    return out;
}

Dataset data_or_generate(const std::string& path, const RunConfig& cfg, bool test) {
    if (!path.empty()) return read_dataset(path);
    DatasetSplits s = build_data(cfg);
    return test ? std::move(s.test) : std::move(s.train);
}

int cmd_generate(const std::string& config, const std::string& out, const std::string& split) {
    const RunConfig cfg = load_config(config);
    const DatasetSplits s = build_data(cfg);
    write_dataset(split == "test" ? s.test : s.train, out);
    return kOk;
}

int cmd_train(const std::string& config, const std::string& data_path, std::string out, const std::string& resume) {
    RunConfig cfg;
    std::optional<Checkpoint> ckpt;
    if (!resume.empty()) {
        ckpt = load_checkpoint(resume);
        cfg = parse_config(ckpt->config_text);
        if (!config.empty() && snapshot_text(load_config(config)) != ckpt->config_text) {
            throw ConfigError("--config differs from the configuration stored in '" + resume + "'");
        }
    } else {
        cfg = config_or_default(config);
        if (!config.empty() && out.empty()) out = load_config(config).out_dir;
    }
    if (out.empty()) out = cfg.out_dir;
    cfg.out_dir = out;
    const fs::path dir(out);
    make_dir(dir);
    TrainLog log(dir / "train.log");
    const std::string snapshot = snapshot_text(cfg);
    write_file(dir / "config.txt", to_text(cfg));

    const Dataset train = data_or_generate(data_path, cfg, false);
    Backbone backbone = ckpt ? Backbone(cfg.model.backbone) : build_backbone(cfg);
    GMemModel model(std::move(backbone), cfg.model.memory, cfg.model.max_param_ratio);
    if (ckpt) restore(*ckpt, model);
    log.line("parameters: trainable " + std::to_string(model.trainable_parameter_count()) + ", ratio " +
             detail::format_value(model.parameter_ratio()));

    Trainer trainer(model, train, cfg.train);
    std::ofstream metrics;
    const fs::path metrics_path = dir / "metrics.csv";
    if (ckpt) {
        restore(*ckpt, model, &trainer.optimizer());
        const std::string kept = metrics_prefix(metrics_path, ckpt->step);
        metrics.open(metrics_path, std::ios::binary | std::ios::trunc);
        metrics << kept;
        log.line("resumed from '" + resume + "' at step " + std::to_string(ckpt->step));
    } else {
        metrics.open(metrics_path, std::ios::binary | std::ios::trunc);
        metrics << kMetricsHeader << '\n';
    }
    if (!metrics) throw IoError("cannot write '" + metrics_path.string() + "'");

    auto save = [&](const fs::path& path) {
        save_checkpoint(path.string(), capture(model, &trainer.optimizer(), trainer.step(), snapshot));
    };
    try {
        trainer.run([&](const MetricsRow& r) {
            metrics << format_metrics(r) << '\n';
            if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0) {
                metrics.flush();
                save(dir / ("checkpoint-" + std::to_string(r.step) + ".gmem"));
                log.line("step " + std::to_string(r.step) + " clm " + detail::format_value(r.clm) + " answer_acc " +
                         detail::format_value(r.answer_acc));
            }
        });
    } catch (const NumericalError& e) {
        metrics.flush();
        log.line(std::string("aborted: ") + e.what());
        throw;
    }
    metrics.flush();
    if (!metrics) throw IoError("failed writing '" + metrics_path.string() + "'");
    save(dir / "checkpoint.gmem");
    log.line("finished at step " + std::to_string(trainer.step()));
    std::cout << "trained " << trainer.step() << " steps; outputs in " << dir.string() << "\n";
    return kOk;
}

LoopOptions memory_mode(const std::string& mode, const RunConfig& cfg) {
    if (mode == "on") return cfg.train.loop;
    if (mode == "off") return LoopOptions::vanilla();
    LoopOptions o = cfg.train.loop;
    o.rule = UpdateRule::overwrite;
    return o;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config, const std::string& data_path,
             const std::string& mode, const std::string& report_path) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = parse_config(ckpt.config_text);
    if (!config.empty() && snapshot_text(load_config(config)) != ckpt.config_text) {
        throw ConfigError("--config differs from the configuration stored in '" + ckpt_path + "'");
    }
    GMemModel model(Backbone(cfg.model.backbone), cfg.model.memory, cfg.model.max_param_ratio);
    restore(ckpt, model);
    const Dataset data = data_or_generate(data_path, cfg, true);
    check_dataset(data, model.backbone());
    const EvalReport r = evaluate(model, data, memory_mode(mode, cfg));

    std::ostringstream csv;
    csv.precision(17);
    csv << "memory,examples,exact_match,token_f1,slot_entropy,mean_abs_score\n"
        << mode << ',' << r.examples << ',' << r.exact_match << ',' << r.token_f1 << ',' << r.slot_entropy << ','
        << r.mean_abs_score << '\n';
    if (report_path.empty()) {
        std::cout << csv.str();
    } else {
        write_file(report_path, csv.str());
    }
    std::cerr << std::fixed << std::setprecision(4) << "memory " << mode << ": " << r.examples << " examples, EM "
              << r.exact_match << ", token F1 " << r.token_f1;
    for (const auto& [hops, em] : r.per_hop) std::cerr << ", " << hops << "-hop EM " << em;
    std::cerr << "\n";
    return kOk;
}

int cmd_gradcheck(const std::string& config, const std::string& corrupt) {
    const RunConfig cfg = config.empty() ? gradcheck_config() : load_config(config);
    const GradCheckReport r = run_gradcheck(cfg, corrupt);
    std::cout << "tensor,count,max_rel_error,max_abs_error,pass\n";
    std::cout.precision(3);
    for (const auto& row : r.rows) {
        std::cout << row.name << ',' << row.count << ',' << std::scientific << row.max_rel_error << ','
                  << row.max_abs_error << std::defaultfloat << ',' << (row.pass ? "yes" : "no") << '\n';
    }
    std::cerr << (r.pass ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    return r.pass ? kOk : kCheckFailed;
}

int cmd_ablate(const std::string& config, const std::vector<std::size_t>& slots, std::size_t seeds,
               const std::string& out) {
    const RunConfig cfg = config_or_default(config);
    const DatasetSplits data = build_data(cfg);
    const Backbone backbone = build_backbone(cfg);
    std::ofstream file;
    if (!out.empty()) {
        file.open(out, std::ios::binary | std::ios::trunc);
        if (!file) throw IoError("cannot write '" + out + "'");
    }
    std::ostream& os = out.empty() ? std::cout : file;
    os << kAblationHeader << '\n';
    ablate_slots(cfg, backbone, data, slots, seeds, [&](const AblationRow& r) { os << format_ablation(r) << std::endl; });
    if (!os) throw IoError("failed writing ablation results");
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gated latent memory on a frozen causal LM"};
    app.require_subcommand(1);

    std::string config, out, data, resume, checkpoint, memory = "on", split = "train", corrupt, report;
    std::vector<std::size_t> slots{4, 8, 16, 32};
    std::size_t seeds = 3;

    auto* gen = app.add_subcommand("generate", "write a task dataset");
    gen->add_option("--config", config, "run configuration")->required();
    gen->add_option("--out", out, "dataset file")->required();
    gen->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

    auto* train = app.add_subcommand("train", "train the memory module");
    train->add_option("--config", config, "run configuration (defaults when omitted)");
    train->add_option("--data", data, "training dataset (generated from the config when omitted)");
    train->add_option("--out", out, "output directory (config out_dir when omitted)");
    train->add_option("--resume", resume, "checkpoint to continue from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--config", config, "must match the checkpoint's configuration when given");
    eval->add_option("--data", data, "dataset (test split generated from the config when omitted)");
    eval->add_option("--memory", memory, "on, off or overwrite-baseline")
        ->check(CLI::IsMember({"on", "off", "overwrite-baseline"}));
    eval->add_option("--report", report, "CSV report path (stdout when omitted)");

    auto* grad = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
    grad->add_option("--config", config, "configuration (smallest config when omitted)");
    grad->add_option("--corrupt", corrupt, "scale this tensor's analytic gradient by 1.01");

    auto* ablate = app.add_subcommand("ablate-slots", "accuracy against slot count");
    ablate->add_option("--config", config, "run configuration (defaults when omitted)");
    ablate->add_option("--slots", slots, "slot counts")->delimiter(',');
    ablate->add_option("--seeds", seeds, "seeds per slot count");
    ablate->add_option("--out", out, "CSV path (stdout when omitted)");

    auto* defaults = app.add_subcommand("defaults", "print every configuration key with its default");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_generate(config, out, split);
        if (*train) return cmd_train(config, data, out, resume);
        if (*eval) return cmd_eval(checkpoint, config, data, memory, report);
        if (*grad) return cmd_gradcheck(config, corrupt);
        if (*ablate) return cmd_ablate(config, slots, seeds, out);
        if (*defaults) {
            std::cout << documented_defaults();
            return kOk;
        }
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kNumerical;
    } catch (const ContractError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kCheckFailed;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
