#include "fuseclip/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "fuseclip/binio.hpp"
#include "fuseclip/checkpoint.hpp"
#include "fuseclip/config.hpp"
#include "fuseclip/dataset.hpp"
#include "fuseclip/errors.hpp"
#include "fuseclip/eval.hpp"
#include "fuseclip/training.hpp"

namespace fuseclip {
namespace {

namespace fs = std::filesystem;

// Bad invocation that is not a config-tree problem (clobbering, missing run state).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::string out;
    std::string data;
    std::string checkpoint;
    std::string in;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
    std::string loss_mask;
    std::string variants = "L1,L2,L3";
    std::string metrics;
    bool resume = false;
    bool no_clobber = false;
};

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

Json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

// defaults <- config file <- --set assignments; command flags are applied by the caller.
Json base_tree(const Options& o) {
    Json tree = to_json(RunConfig{});
    if (!o.config_path.empty()) tree.merge_patch(read_json_file(o.config_path));
    for (const auto& s : o.sets) apply_override(tree, s);
    return tree;
}

RunConfig finish_config(const Json& tree) {
    RunConfig cfg = run_config_from_json(tree);
    cfg.validate();
    return cfg;
}

fs::path normalized(const std::string& p) {
    fs::path path = fs::path(p).lexically_normal();
    if (!path.has_filename() && path.has_parent_path()) path = path.parent_path();
    return path;
}

// Creates `dir` (one level). Its parent must already exist.
fs::path prepare_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("an output directory is required (--out)");
    const fs::path path = normalized(dir);
    const fs::path parent = fs::absolute(path).parent_path();
    if (!fs::is_directory(parent)) throw ConfigError("parent of output directory does not exist: " + parent.string());
    if (fs::exists(path) && !fs::is_directory(path)) throw ConfigError(path.string() + " exists and is not a directory");
    fs::create_directory(path);
    return path;
}

void guard_clobber(const fs::path& dir, const std::vector<std::string>& names, bool no_clobber) {
    if (!no_clobber) return;
    for (const auto& n : names)
        if (fs::exists(dir / n)) throw UsageError("refusing to overwrite " + (dir / n).string() + " (--no-clobber)");
}

void write_json(const fs::path& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---- data ------------------------------------------------------------------

struct LoadedData {
    Dataset main;
    std::optional<Dataset> guided;
};

Json world_file(const World& world) {
    Json words = Json::array();
    for (std::size_t t = 0; t < world.vocab_size(); ++t) words.push_back(world.word(static_cast<TokenId>(t)));
    return Json{{"digest", hex64(world.digest())}, {"config", world_to_json(world.config())}, {"vocabulary", words}};
}

LoadedData load_data(const RunConfig& cfg, bool need_guided) {
    const fs::path dir = cfg.data.dir;
    const World world(cfg.world);
    const fs::path wf = dir / "world.json";
    if (!fs::exists(wf)) throw IoError("no dataset in " + dir.string() + " (run gen-data first)");
    const Json stored = read_json_file(wf);
    if (stored.value("digest", std::string{}) != hex64(world.digest()))
        throw CompatibilityError("datasets in " + dir.string() + " were generated for a different world");
    LoadedData d{read_dataset(dir / "main.bin"), std::nullopt};
    check_dataset_matches(d.main, world);
    const fs::path gp = dir / "guided.bin";
    if (fs::exists(gp)) {
        d.guided = read_dataset(gp);
        check_dataset_matches(*d.guided, world);
    } else if (need_guided) {
        throw IoError("guided data requested but " + gp.string() + " is missing");
    }
    return d;
}

int cmd_gen_data(const Options& o, std::ostream& out) {
    Json tree = base_tree(o);
    if (o.seed) tree["data"]["seed"] = *o.seed;
    if (!o.out.empty()) tree["data"]["dir"] = o.out;
    const RunConfig cfg = finish_config(tree);
    const std::vector<std::string> files{"world.json", "main.bin", "guided.bin", "config.json"};
    // Everything is built in memory first so a failure leaves no partial files.
    const World world(cfg.world);
    const Dataset main = generate_main_dataset(world, cfg.data.n_main, derive_seed(cfg.data.seed, 0));
    std::optional<Dataset> guided;
    if (cfg.data.n_guided > 0)
        guided = generate_guided_dataset(world, cfg.data.n_guided, derive_seed(cfg.data.seed, 1));
    const auto main_bytes = encode_dataset(main);
    const auto guided_bytes = guided ? encode_dataset(*guided) : std::vector<std::uint8_t>{};

    const fs::path dir = prepare_dir(cfg.data.dir);
    guard_clobber(dir, files, o.no_clobber);
    write_file_bytes(dir / "main.bin", main_bytes);
    if (guided)
        write_file_bytes(dir / "guided.bin", guided_bytes);
    else
        fs::remove(dir / "guided.bin");
    write_json(dir / "world.json", world_file(world));
    write_json(dir / "config.json", to_json(cfg));
    out << "main " << main.size() << " records (" << world.n_identities() << " identities)\n"
        << "guided " << (guided ? guided->size() : 0) << " records\n"
        << "world digest " << hex64(world.digest()) << "\n"
        << "wrote " << dir.string() << "\n";
    return kExitOk;
}

// ---- training run directories ------------------------------------------------

class RunDir {
public:
    RunDir(fs::path dir, bool resume, std::uint64_t resume_step) : dir_(std::move(dir)) {
        if (resume) {
            trim(dir_ / "metrics.jsonl", resume_step);
            trim(dir_ / "timing.jsonl", resume_step);
        } else {
            for (const auto& entry : fs::directory_iterator(dir_)) {
                const auto name = entry.path().filename().string();
                if (name.rfind("ckpt-", 0) == 0 || name == "last.fck" || name == "metrics.jsonl" ||
                    name == "timing.jsonl" || name == "diagnostics.json")
                    fs::remove(entry.path());
            }
        }
        metrics_.open(dir_ / "metrics.jsonl", std::ios::app);
        timing_.open(dir_ / "timing.jsonl", std::ios::app);
        if (!metrics_ || !timing_) throw IoError("cannot open metrics files in " + dir_.string());
        start_ = std::chrono::steady_clock::now();
    }

    void record(const Json& rec) {
        metrics_ << rec.dump() << "\n";
        metrics_.flush();
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        timing_ << Json{{"step", rec["step"]}, {"wall_s", wall}}.dump() << "\n";
        timing_.flush();
        last_ = rec;
    }

    void save(const Checkpoint& ck) {
        const auto bytes = encode_checkpoint(ck);
        char name[32];
        std::snprintf(name, sizeof name, "ckpt-%06llu.fck", static_cast<unsigned long long>(ck.step));
        write_file_bytes(dir_ / name, bytes);
        write_file_bytes(dir_ / "last.fck", bytes);
    }

    const Json& last_record() const { return last_; }
    const fs::path& path() const { return dir_; }

private:
    // Drops records past the resume point so the stream continues seamlessly.
    static void trim(const fs::path& file, std::uint64_t step) {
        if (!fs::exists(file)) return;
        std::ifstream in(file);
        std::string line, kept;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (Json::parse(line).value("step", std::uint64_t{0}) <= step) kept += line + "\n";
        }
        in.close();
        write_text_file(file, kept);
    }

    fs::path dir_;
    std::ofstream metrics_, timing_;
    std::chrono::steady_clock::time_point start_;
    Json last_;
};

const std::vector<std::string> kRunFiles{"config.json", "metrics.jsonl", "timing.jsonl", "last.fck"};

struct RunSetup {
    RunConfig cfg;
    fs::path dir;
    std::optional<Checkpoint> resume_from;
};

// Shared by both training commands. `patch` applies command-specific flags.
template <class Patch>
RunSetup setup_run(const Options& o, CheckpointKind kind, Patch patch) {
    RunSetup s;
    if (o.out.empty()) throw ConfigError("a run directory is required (--out)");
    Json tree;
    if (o.resume) {
        s.dir = normalized(o.out);
        if (!fs::exists(s.dir / "last.fck")) throw UsageError("--resume: no checkpoint in " + s.dir.string());
        s.resume_from = load_checkpoint(s.dir / "last.fck");
        if (s.resume_from->kind != kind) throw CompatibilityError("--resume: checkpoint in run directory is of another kind");
        // The run's own config is the base; flags may only change how far this invocation goes.
        tree = Json::parse(s.resume_from->config_json);
        tree["pretrain"]["stop_after"] = 0;
        tree["diffusion"]["stop_after"] = 0;
        if (!o.config_path.empty()) tree.merge_patch(read_json_file(o.config_path));
        for (const auto& a : o.sets) apply_override(tree, a);
    } else {
        tree = base_tree(o);
    }
    if (!o.data.empty()) tree["data"]["dir"] = o.data;
    patch(tree);
    s.cfg = finish_config(tree);
    if (s.resume_from) {
        RunConfig a = s.cfg, b = run_config_from_json(Json::parse(s.resume_from->config_json));
        a.pretrain.stop_after = b.pretrain.stop_after = 0;
        a.diffusion.stop_after = b.diffusion.stop_after = 0;
        if (to_json(a) != to_json(b)) throw ConfigError("--resume: config differs from the interrupted run");
    } else {
        s.dir = prepare_dir(o.out);
        guard_clobber(s.dir, kRunFiles, o.no_clobber);
    }
    write_json(s.dir / "config.json", to_json(s.cfg));
    return s;
}

template <class Trainer>
int drive(Trainer& trainer, RunSetup& s, const char* label, std::size_t steps, std::ostream& out) {
    RunDir run(s.dir, s.resume_from.has_value(), s.resume_from ? s.resume_from->step : 0);
    if (s.resume_from) trainer.restore(*s.resume_from);
    const auto first = trainer.current_step();
    try {
        trainer.run([&](const Json& r) { run.record(r); }, [&](const Checkpoint& ck) { run.save(ck); });
    } catch (const NumericError& e) {
        write_json(s.dir / "diagnostics.json", Json{{"error", e.what()}, {"state", trainer.diagnostics()}});
        throw;
    }
    out << label << ": steps " << first << " -> " << trainer.current_step() << " of " << steps;
    if (run.last_record().contains("loss")) out << ", last logged loss " << run.last_record()["loss"].get<double>();
    out << "\ncheckpoint " << (s.dir / "last.fck").string() << "\n";
    return kExitOk;
}

void patch_pretrain_flags(const Options& o, Json& tree) {
    if (o.seed) tree["pretrain"]["seed"] = *o.seed;
    if (o.lambda) tree["pretrain"]["lambda"] = *o.lambda;
    if (!o.loss_mask.empty()) tree["pretrain"]["loss_mask"] = o.loss_mask;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
    auto s = setup_run(o, CheckpointKind::Pretrain, [&](Json& t) { patch_pretrain_flags(o, t); });
    auto data = load_data(s.cfg, s.cfg.pretrain.loss.guided_probability > 0.0);
    Pretrainer trainer(s.cfg, data.main, data.guided ? &*data.guided : nullptr);
    return drive(trainer, s, "pretrain", s.cfg.pretrain.steps, out);
}

int cmd_train_diffusion(const Options& o, std::ostream& out) {
    auto s = setup_run(o, CheckpointKind::Diffusion, [&](Json& t) {
        if (o.seed) t["diffusion"]["seed"] = *o.seed;
        if (!o.checkpoint.empty()) t["diffusion"]["encoder_checkpoint"] = o.checkpoint;
    });
    auto data = load_data(s.cfg, s.cfg.diffusion.use_guided);
    std::optional<Checkpoint> encoder_ck;
    if (s.cfg.diffusion.encoder_checkpoint != "untrained")
        encoder_ck = load_checkpoint(s.cfg.diffusion.encoder_checkpoint);
    DiffusionTrainer trainer(s.cfg, data.main, data.guided ? &*data.guided : nullptr,
                             encoder_ck ? &*encoder_ck : nullptr);
    return drive(trainer, s, "train-diffusion", s.cfg.diffusion.steps, out);
}

// ---- evaluation --------------------------------------------------------------

int cmd_eval(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const RunConfig trained = run_config_from_json(Json::parse(ck.config_json));
    Json tree = to_json(trained);
    if (!o.config_path.empty()) tree.merge_patch(read_json_file(o.config_path));
    for (const auto& a : o.sets) apply_override(tree, a);
    if (o.seed) tree["eval"]["seed"] = *o.seed;
    if (!o.metrics.empty()) tree["eval"]["metrics"] = split_list(o.metrics);
    const RunConfig cfg = finish_config(tree);
    if (!(cfg.world == trained.world)) throw CompatibilityError("checkpoint was trained on a different world");
    if (!(cfg.encoder == trained.encoder)) throw CompatibilityError("checkpoint has different encoder dims");

    const fs::path dir = prepare_dir(o.out);
    guard_clobber(dir, {"eval.json", "eval.csv", "identity_projection.csv"}, o.no_clobber);
    const LoadedModel model = load_model(ck);
    const EvalReport report = run_eval(model, cfg.eval);
    write_json(dir / "eval.json", report.to_json());
    write_text_file(dir / "eval.csv", report.to_csv());
    if (report.has_identity)
        write_text_file(dir / "identity_projection.csv", projection_csv(report.identity));
    else
        fs::remove(dir / "identity_projection.csv");
    for (const auto& [k, v] : report.metrics.items()) out << std::left << std::setw(24) << k << v.dump() << "\n";
    return kExitOk;
}

// ---- ablation ------------------------------------------------------------------

int cmd_ablate(const Options& o, std::ostream& out) {
    Json tree = base_tree(o);
    if (!o.data.empty()) tree["data"]["dir"] = o.data;
    if (o.seed) {
        tree["pretrain"]["seed"] = *o.seed;
        tree["diffusion"]["seed"] = *o.seed;
        tree["eval"]["seed"] = *o.seed;
    }
    if (o.lambda) tree["pretrain"]["lambda"] = *o.lambda;
    const RunConfig cfg = finish_config(tree);
    std::vector<LossVariant> variants;
    for (const auto& v : split_list(o.variants)) variants.push_back(parse_loss_variant(v));
    if (variants.empty()) throw ConfigError("--variants is empty");

    const fs::path dir = prepare_dir(o.out);
    guard_clobber(dir, {"ablation.json", "ablation.csv", "ablation.txt"}, o.no_clobber);
    write_json(dir / "config.json", to_json(cfg));
    auto data = load_data(cfg, cfg.pretrain.loss.guided_probability > 0.0);
    auto hook = [&](LossVariant v, const Checkpoint& pre, const Checkpoint& diff) {
        const fs::path vd = dir / to_string(v);
        fs::create_directories(vd);
        save_checkpoint(pre, vd / "pretrain.fck");
        save_checkpoint(diff, vd / "diffusion.fck");
    };
    const AblationResult r = run_ablation(cfg, variants, data.main, data.guided ? &*data.guided : nullptr, hook);
    write_json(dir / "ablation.json", r.to_json());
    write_text_file(dir / "ablation.csv", r.to_csv());
    write_text_file(dir / "ablation.txt", r.to_table());
    out << r.to_table();
    const bool any_failed = std::any_of(r.rows.begin(), r.rows.end(), [](const AblationRow& x) { return x.failed; });
    return any_failed ? kExitFailure : kExitOk;
}

// ---- report --------------------------------------------------------------------

std::string fmt(const Json& v) {
    if (!v.is_number()) return v.dump();
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v.get<double>();
    return s.str();
}

int cmd_report(const Options& o, std::ostream& out) {
    if (o.in.empty()) throw ConfigError("report needs --in DIR");
    const fs::path dir = normalized(o.in);
    std::ostringstream r;
    bool any = false;
    if (fs::exists(dir / "metrics.jsonl")) {
        std::ifstream in(dir / "metrics.jsonl");
        std::string line;
        Json first, last;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            last = Json::parse(line);
            if (n++ == 0) first = last;
        }
        if (n > 0) {
            r << "training: " << n << " logged steps, loss " << fmt(first["loss"]) << " at step " << first["step"]
              << " -> " << fmt(last["loss"]) << " at step " << last["step"] << "\n";
            any = true;
        }
    }
    if (fs::exists(dir / "eval.json")) {
        const Json e = read_json_file(dir / "eval.json");
        r << "evaluation (seed " << e["seed"] << ")\n";
        for (const auto& [k, v] : e["metrics"].items()) r << "  " << std::left << std::setw(24) << k << fmt(v) << "\n";
        any = true;
    }
    if (fs::exists(dir / "ablation.json")) {
        const Json a = read_json_file(dir / "ablation.json");
        r << "ablation\n  " << std::left << std::setw(8) << "variant" << std::setw(10) << "face_sim" << std::setw(12)
          << "random_pair" << std::setw(12) << "text_align" << "mmd\n";
        for (const auto& row : a["rows"]) {
            r << "  " << std::setw(8) << row["variant"].get<std::string>();
            if (row["status"] == "FAILED") {
                r << "FAILED: " << row["error"].get<std::string>() << "\n";
                continue;
            }
            r << std::setw(10) << fmt(row["face_sim"]) << std::setw(12) << fmt(row["face_sim_random_pair"])
              << std::setw(12) << fmt(row["text_align"]) << fmt(row["mmd"]) << "\n";
        }
        for (const auto& c : a["checks"])
            r << "  [" << c["status"].get<std::string>() << "] " << c["check"].get<std::string>() << ": "
              << c["detail"].get<std::string>() << "\n";
        r << "  verdict " << a["verdict"].get<std::string>() << "\n";
        any = true;
    }
    if (!any) throw IoError("nothing to report in " + dir.string());
    write_text_file(dir / "report.txt", r.str());
    out << r.str();
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint identity-text encoder: data, training, evaluation and ablation"};
    app.name("fuseclip");
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON config file layered over the defaults");
        sub->add_option("--set", o.sets, "Override one key, e.g. --set pretrain.steps=200 (repeatable)");
        sub->add_option("--seed", o.seed, "Seed of this command's stage");
        sub->add_flag("--no-clobber", o.no_clobber, "Refuse to overwrite existing outputs");
    };
    auto* gen = app.add_subcommand("gen-data", "Generate the main and guided datasets and the world file");
    common(gen);
    gen->add_option("--out", o.out, "Dataset directory (default: data.dir)");

    auto* pre = app.add_subcommand("pretrain", "Alignment pre-training of the fusion encoder");
    common(pre);
    pre->add_option("--out", o.out, "Run directory")->required();
    pre->add_option("--data", o.data, "Dataset directory (overrides data.dir)");
    pre->add_flag("--resume", o.resume, "Continue the run in --out from its last checkpoint");
    pre->add_option("--loss-mask", o.loss_mask, "Loss variant L1, L2 or L3");
    pre->add_option("--lambda", o.lambda, "Guided-data probability");

    auto* dif = app.add_subcommand("train-diffusion", "Train the conditional denoiser");
    common(dif);
    dif->add_option("--out", o.out, "Run directory")->required();
    dif->add_option("--data", o.data, "Dataset directory (overrides data.dir)");
    dif->add_option("--checkpoint", o.checkpoint, "Pre-training checkpoint, or 'untrained'");
    dif->add_flag("--resume", o.resume, "Continue the run in --out from its last checkpoint");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    common(ev);
    ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();
    ev->add_option("--out", o.out, "Report directory")->required();
    ev->add_option("--metrics", o.metrics, "Comma list of zero-shot, identity, generation (default: all applicable)");

    auto* ab = app.add_subcommand("ablate", "Train and compare loss variants");
    common(ab);
    ab->add_option("--out", o.out, "Ablation directory")->required();
    ab->add_option("--data", o.data, "Dataset directory (overrides data.dir)");
    ab->add_option("--variants", o.variants, "Comma list of variants")->capture_default_str();
    ab->add_option("--lambda", o.lambda, "Guided-data probability");

    auto* rep = app.add_subcommand("report", "Render the results found in a directory");
    rep->add_option("--in", o.in, "Run, eval or ablation directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_gen_data(o, out);
        if (*pre) return cmd_pretrain(o, out);
        if (*dif) return cmd_train_diffusion(o, out);
        if (*ev) return cmd_eval(o, out);
        if (*ab) return cmd_ablate(o, out);
        if (*rep) return cmd_report(o, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const CompatibilityError& e) {
        err << "incompatible: " << e.what() << "\n";
        return kExitCompatibility;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace fuseclip
