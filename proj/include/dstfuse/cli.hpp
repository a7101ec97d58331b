#pragma once

// Command-line surface: corpus generation, training, evaluation, phenomenon
// probes and gate-trace export. Every run records its effective configuration
// into the output directory before doing any work, so any artifact can be
// reproduced from run_config.json plus the seed inside it.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <CLI11.hpp>

#include "dstfuse/trainer.hpp"

namespace dstfuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;      // bad flags, unknown names, bad config files
inline constexpr int kExitValidation = 3;  // corpora/checkpoints/predictions failing checks
inline constexpr int kExitRuntime = 4;     // io failures, numeric blowups, the rest

struct RunConfig {
    std::string command;
    std::string config_path;
    std::string corpus_dir;
    std::string checkpoint;
    std::string spec_path;
    std::string variant = "dual";
    std::string preset = "desk";
    std::string mode = "normal";
    std::string decode = "argmax";
    std::string probe = "deleted-value";
    std::string split = "test";
    std::string phase = "both";  // both | teacher-forcing-only
    std::string dialogues;       // comma-separated id filter for trace export
    std::string out_dir;
    std::uint64_t seed = 0;
    int threads = 1;
    bool resume = false;
    bool augment = false;
    int augment_limit = -1;
    // Training overrides; sentinel values mean "keep the preset's choice".
    double lr = 0.0;
    int epochs = 0;
    int batch_size = 0;
    double sampling_prob = -1.0;
    int patience = 0;

    nlohmann::json to_json() const {
        return {{"command", command},
                {"config", config_path},
                {"corpus", corpus_dir},
                {"checkpoint", checkpoint},
                {"spec", spec_path},
                {"variant", variant},
                {"preset", preset},
                {"mode", mode},
                {"decode", decode},
                {"probe", probe},
                {"split", split},
                {"phase", phase},
                {"dialogues", dialogues},
                {"out", out_dir},
                {"seed", seed},
                {"threads", threads},
                {"resume", resume},
                {"augment", augment},
                {"augment_limit", augment_limit},
                {"lr", lr},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"sampling_prob", sampling_prob},
                {"patience", patience}};
    }
};

namespace detail {

inline std::string underscored(std::string s) {
    for (char& c : s)
        if (c == '-') c = '_';
    return s;
}

/// Apply a config file on top of the defaults. Flags parsed afterwards win.
inline void apply_config_file(RunConfig& rc, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "corpus") rc.corpus_dir = value.get<std::string>();
            else if (key == "checkpoint") rc.checkpoint = value.get<std::string>();
            else if (key == "spec") rc.spec_path = value.get<std::string>();
            else if (key == "variant") rc.variant = value.get<std::string>();
            else if (key == "preset") rc.preset = value.get<std::string>();
            else if (key == "mode") rc.mode = value.get<std::string>();
            else if (key == "decode") rc.decode = value.get<std::string>();
            else if (key == "probe") rc.probe = value.get<std::string>();
            else if (key == "split") rc.split = value.get<std::string>();
            else if (key == "phase") rc.phase = value.get<std::string>();
            else if (key == "dialogues") rc.dialogues = value.get<std::string>();
            else if (key == "out") rc.out_dir = value.get<std::string>();
            else if (key == "seed") rc.seed = value.get<std::uint64_t>();
            else if (key == "threads") rc.threads = value.get<int>();
            else if (key == "resume") rc.resume = value.get<bool>();
            else if (key == "augment") rc.augment = value.get<bool>();
            else if (key == "augment_limit") rc.augment_limit = value.get<int>();
            else if (key == "lr") rc.lr = value.get<double>();
            else if (key == "epochs") rc.epochs = value.get<int>();
            else if (key == "batch_size") rc.batch_size = value.get<int>();
            else if (key == "sampling_prob") rc.sampling_prob = value.get<double>();
            else if (key == "patience") rc.patience = value.get<int>();
            else throw ConfigError("config file " + path.string() + ": unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
}

/// --out wins; otherwise a timestamped directory under $DSTFUSE_OUT_ROOT
/// (default ./runs) keeps each run's artifacts together.
inline std::filesystem::path resolve_out_dir(const RunConfig& rc) {
    if (!rc.out_dir.empty()) return rc.out_dir;
    const char* root_env = std::getenv("DSTFUSE_OUT_ROOT");
    const std::filesystem::path root = root_env ? root_env : "runs";
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    std::ostringstream leaf;
    leaf << rc.command << '-' << stamp << '-' << ::getpid();
    return root / leaf.str();
}

inline std::filesystem::path prepare_out_dir(RunConfig& rc) {
    auto out = resolve_out_dir(rc);
    rc.out_dir = out.string();
    std::filesystem::create_directories(out);
    std::ofstream rec(out / "run_config.json");
    if (!rec) throw IoError("cannot write " + (out / "run_config.json").string());
    rec << rc.to_json().dump(2) << '\n';
    return out;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline const std::vector<Dialogue>& pick_split(const CorpusSplit& corpus,
                                               const std::string& split) {
    if (split == "train") return corpus.train;
    if (split == "dev") return corpus.dev;
    if (split == "test") return corpus.test;
    throw ConfigError("unknown split: " + split + " (expected train, dev or test)");
}

inline void require_matching_ontology(const Model& model, const CorpusSplit& corpus) {
    if (ontology_to_json(model.ontology()) != ontology_to_json(corpus.ontology))
        throw ValidationError(
            "checkpoint ontology does not match the corpus ontology; "
            "evaluate against the corpus the model was trained on");
}

inline TrainingConfig training_config_for(const RunConfig& rc) {
    TrainingConfig cfg =
        rc.preset == "paper" ? TrainingConfig::paper() : TrainingConfig::desk();
    if (rc.preset != "paper" && rc.preset != "desk")
        throw ConfigError("unknown preset: " + rc.preset + " (expected desk or paper)");
    if (rc.lr > 0) cfg.peak_lr = rc.lr;
    if (rc.epochs > 0) cfg.epochs_budget = rc.epochs;
    if (rc.batch_size > 0) cfg.batch_size = rc.batch_size;
    if (rc.sampling_prob >= 0) cfg.sampling_prob = rc.sampling_prob;
    if (rc.patience > 0) cfg.patience_epochs = rc.patience;
    cfg.seed = rc.seed;
    if (rc.phase == "teacher-forcing-only") cfg.scheduled_phase = false;
    else if (rc.phase != "both")
        throw ConfigError("unknown phase: " + rc.phase +
                          " (expected both or teacher-forcing-only)");
    return cfg;
}

inline ModelConfig model_config_for(const RunConfig& rc) {
    if (rc.preset == "paper") return ModelConfig::paper();
    if (rc.preset == "desk") return ModelConfig::desk();
    throw ConfigError("unknown preset: " + rc.preset + " (expected desk or paper)");
}

// -- command bodies ---------------------------------------------------------

inline void cmd_gen_corpus(RunConfig& rc) {
    CorpusSpec spec;
    if (!rc.spec_path.empty()) {
        std::ifstream in(rc.spec_path);
        if (!in) throw ConfigError("cannot open spec file: " + rc.spec_path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("spec file " + rc.spec_path + ": " + e.what());
        }
        spec = CorpusSpec::from_json(j);
    }
    auto out = prepare_out_dir(rc);
    auto corpus = generate_corpus(spec, rc.seed);
    save_corpus(corpus, out);
    write_json(out / "corpus_spec.json", spec.to_json());
    std::cout << "wrote corpus: " << corpus.train.size() << " train / " << corpus.dev.size()
              << " dev / " << corpus.test.size() << " test dialogues under " << out.string()
              << "\n";
}

inline void cmd_train(RunConfig& rc) {
    if (rc.corpus_dir.empty()) throw ConfigError("train needs --corpus");
    auto corpus = load_corpus(rc.corpus_dir);
    auto cfg = training_config_for(rc);
    auto mcfg = model_config_for(rc);
    auto variant = parse_variant(underscored(rc.variant));
    auto out = prepare_out_dir(rc);

    Model model(corpus.ontology, Vocabulary::build(corpus), mcfg, variant, rc.seed);
    auto result = train(model, corpus, cfg, out, rc.threads, {}, rc.resume);

    write_json(out / "train_result.json",
               {{"best_dev_joint", result.best_dev_joint},
                {"best_epoch", result.best_epoch},
                {"best_phase", result.best_phase},
                {"epochs_run", result.history.size()},
                {"checkpoint", result.checkpoint_path.string()},
                {"variant", variant_name(variant)}});
    std::cout << "best dev joint accuracy " << result.best_dev_joint << " at epoch "
              << result.best_epoch << " (" << result.best_phase << "); checkpoint: "
              << result.checkpoint_path.string() << "\n";
}

inline void cmd_eval(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
    if (rc.corpus_dir.empty()) throw ConfigError("eval needs --corpus");
    auto model = load_checkpoint_model(rc.checkpoint);
    auto corpus = load_corpus(rc.corpus_dir);
    require_matching_ontology(*model, corpus);
    const auto& dialogues = pick_split(corpus, rc.split);
    if (dialogues.empty()) throw ValidationError("split '" + rc.split + "' is empty");
    auto out = prepare_out_dir(rc);

    auto report = evaluate_joint(*model, dialogues, parse_eval_mode(underscored(rc.mode)),
                                 parse_decode_mode(rc.decode), rc.split, rc.threads);
    write_json(out / "report.json", report.to_json());
    std::cout << "joint accuracy " << report.joint_accuracy << " on " << rc.split << " ("
              << report.turns << " turns, mode " << report.mode << ", variant "
              << report.variant << ")\n";
}

inline void cmd_probe(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("probe needs --checkpoint");
    if (rc.corpus_dir.empty()) throw ConfigError("probe needs --corpus");
    const std::string which = underscored(rc.probe);
    if (which != "deleted_value" && which != "related_slot")
        throw ConfigError("unknown probe: " + rc.probe +
                          " (expected deleted-value or related-slot)");
    auto model = load_checkpoint_model(rc.checkpoint);
    auto corpus = load_corpus(rc.corpus_dir);
    require_matching_ontology(*model, corpus);
    std::vector<Dialogue> set = pick_split(corpus, rc.split);
    if (rc.augment) {
        if (which != "deleted_value")
            throw ConfigError("--augment applies to the deleted-value probe only");
        std::vector<Dialogue> templates;
        for (const auto& d : set)
            if (d.tags.count(kTagDeleted)) templates.push_back(d);
        if (templates.empty())
            throw ValidationError("split '" + rc.split + "' has no deleted-value dialogues");
        set = augment_deleted_value(templates, corpus.ontology, rc.augment_limit);
    }
    auto out = prepare_out_dir(rc);

    auto decode = parse_decode_mode(rc.decode);
    auto report = which == "deleted_value"
                      ? deleted_value_probe(*model, set, decode, rc.threads)
                      : related_slot_probe(*model, set, decode, rc.threads);
    write_json(out / "probe.json", report.to_json(/*include_log=*/true));
    std::cout << report.probe << " success rate " << report.rate << " (" << report.successes
              << "/" << report.instances << " instances)\n";
}

inline void cmd_trace_gates(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("trace-gates needs --checkpoint");
    if (rc.corpus_dir.empty()) throw ConfigError("trace-gates needs --corpus");
    auto model = load_checkpoint_model(rc.checkpoint);
    auto corpus = load_corpus(rc.corpus_dir);
    require_matching_ontology(*model, corpus);
    std::vector<Dialogue> set = pick_split(corpus, rc.split);
    if (!rc.dialogues.empty()) {
        std::set<std::string> wanted;
        std::stringstream ss(rc.dialogues);
        for (std::string id; std::getline(ss, id, ',');)
            if (!id.empty()) wanted.insert(id);
        std::vector<Dialogue> filtered;
        for (const auto& d : set)
            if (wanted.erase(d.id)) filtered.push_back(d);
        if (!wanted.empty())
            throw ValidationError("dialogue id not found in split '" + rc.split +
                                  "': " + *wanted.begin());
        set = std::move(filtered);
    }
    if (set.empty()) throw ValidationError("no dialogues selected for trace export");
    auto out = prepare_out_dir(rc);

    auto traces = collect_gate_traces(*model, set, parse_decode_mode(rc.decode), rc.threads);
    write_gate_csv(traces, out / "traces.csv");
    std::cout << "wrote " << traces.size() << " gate readings for " << set.size()
              << " dialogues to " << (out / "traces.csv").string() << "\n";
}

}  // namespace detail

/// Parse and run one command. Returns a process exit code; never throws.
inline int run_cli(int argc, const char* const* argv) {
    RunConfig rc;
    try {
        // The config file seeds the defaults, so flags parsed below override it.
        for (int i = 1; i < argc; ++i) {
            const std::string arg = argv[i];
            if (arg == "--config" && i + 1 < argc)
                detail::apply_config_file(rc, argv[i + 1]);
            else if (arg.rfind("--config=", 0) == 0)
                detail::apply_config_file(rc, arg.substr(9));
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    CLI::App app{"dialogue-state fusion: corpora, training, evaluation, probes"};
    app.require_subcommand(1);

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", rc.config_path, "JSON config file (flags override it)");
        cmd->add_option("--seed", rc.seed, "root seed for this run");
        cmd->add_option("--out", rc.out_dir,
                        "output directory (default: timestamped under $DSTFUSE_OUT_ROOT)");
        cmd->add_option("--threads", rc.threads, "worker threads");
    };
    auto add_model_source = [&](CLI::App* cmd) {
        cmd->add_option("--checkpoint", rc.checkpoint, "model checkpoint file");
        cmd->add_option("--corpus", rc.corpus_dir, "corpus directory");
        cmd->add_option("--split", rc.split, "corpus split: train, dev or test");
        cmd->add_option("--decode", rc.decode, "decode mode: argmax or gated");
    };

    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
    add_common(gen);
    gen->add_option("--spec", rc.spec_path, "corpus spec JSON (defaults used when omitted)");

    auto* tr = app.add_subcommand("train", "train a model on a corpus");
    add_common(tr);
    tr->add_option("--corpus", rc.corpus_dir, "corpus directory");
    tr->add_option("--variant", rc.variant,
                   "base, turn, passage, dual, no-gate or single");
    tr->add_option("--preset", rc.preset, "desk or paper");
    tr->add_option("--phase", rc.phase, "both or teacher-forcing-only");
    tr->add_option("--lr", rc.lr, "peak learning rate override");
    tr->add_option("--epochs", rc.epochs, "epoch budget override");
    tr->add_option("--batch-size", rc.batch_size, "batch size override");
    tr->add_option("--sampling-prob", rc.sampling_prob, "scheduled-sampling probability");
    tr->add_option("--patience", rc.patience, "early-stopping patience override");
    tr->add_flag("--resume", rc.resume, "continue from the best checkpoint in --out");

    auto* ev = app.add_subcommand("eval", "score joint accuracy on a split");
    add_common(ev);
    add_model_source(ev);
    ev->add_option("--mode", rc.mode, "normal or teacher-forcing");

    auto* pr = app.add_subcommand("probe", "run a phenomenon probe");
    add_common(pr);
    add_model_source(pr);
    pr->add_option("--probe", rc.probe, "deleted-value or related-slot");
    pr->add_flag("--augment", rc.augment, "expand deleted-value templates over candidates");
    pr->add_option("--augment-limit", rc.augment_limit,
                   "cap augmented probes per template (-1 = all)");

    auto* tg = app.add_subcommand("trace-gates", "export per-gate scalar traces as CSV");
    add_common(tg);
    add_model_source(tg);
    tg->add_option("--dialogues", rc.dialogues, "comma-separated dialogue ids to keep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) rc.command = "gen-corpus", detail::cmd_gen_corpus(rc);
        else if (tr->parsed()) rc.command = "train", detail::cmd_train(rc);
        else if (ev->parsed()) rc.command = "eval", detail::cmd_eval(rc);
        else if (pr->parsed()) rc.command = "probe", detail::cmd_probe(rc);
        else if (tg->parsed()) rc.command = "trace-gates", detail::cmd_trace_gates(rc);
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const OntologyError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace dstfuse
