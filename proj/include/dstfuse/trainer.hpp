#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstfuse/evaluation.hpp"

namespace dstfuse {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct TrainingConfig {
    int batch_size = 2;
    double peak_lr = 2e-3;
    double warmup_proportion = 0.1;
    int patience_epochs = 15;
    int epochs_budget = 50;       // also fixes the schedule: total steps = budget x steps/epoch
    double sampling_prob = 0.5;   // phase-2 coin; phase 1 always runs at 0
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    bool scheduled_phase = true;  // false trains with teacher forcing only

    /// Desk recipe: small batches buy optimizer steps, which are the scarce
    /// resource on a single CPU core.
    static TrainingConfig desk() { return {}; }

    /// Published optimization recipe: batch 2, peak learning rate 1e-4,
    /// warmup proportion 0.1, patience 15.
    static TrainingConfig paper() {
        TrainingConfig c;
        c.batch_size = 2;
        c.peak_lr = 1e-4;
        return c;
    }

    nlohmann::json to_json() const {
        return {{"batch_size", batch_size},
                {"peak_lr", peak_lr},
                {"warmup_proportion", warmup_proportion},
                {"patience_epochs", patience_epochs},
                {"epochs_budget", epochs_budget},
                {"sampling_prob", sampling_prob},
                {"clip_norm", clip_norm},
                {"seed", seed},
                {"scheduled_phase", scheduled_phase}};
    }
    static TrainingConfig from_json(const nlohmann::json& j) {
        TrainingConfig c;
        c.batch_size = j.at("batch_size").get<int>();
        c.peak_lr = j.at("peak_lr").get<double>();
        c.warmup_proportion = j.at("warmup_proportion").get<double>();
        c.patience_epochs = j.at("patience_epochs").get<int>();
        c.epochs_budget = j.at("epochs_budget").get<int>();
        c.sampling_prob = j.at("sampling_prob").get<double>();
        c.clip_norm = j.at("clip_norm").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.scheduled_phase = j.at("scheduled_phase").get<bool>();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Linear warmup to the peak, then linear decay to zero. Steps count from 1.
struct LrSchedule {
    double peak_lr = 1e-3;
    int total_steps = 2;
    int warmup_steps = 1;

    double lr_at(int step) const {
        if (step <= 0) return 0.0;
        if (step <= warmup_steps)
            return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
        if (step >= total_steps) return 0.0;
        return peak_lr * static_cast<double>(total_steps - step) /
               static_cast<double>(total_steps - warmup_steps);
    }
};

inline LrSchedule make_schedule(double peak_lr, double warmup_proportion, int total_steps) {
    if (peak_lr <= 0) throw ConfigError("peak learning rate must be positive");
    if (warmup_proportion < 0 || warmup_proportion >= 1)
        throw ConfigError("warmup proportion must lie in [0, 1)");
    LrSchedule s;
    s.peak_lr = peak_lr;
    s.total_steps = std::max(total_steps, 2);
    const int w = static_cast<int>(std::llround(warmup_proportion * s.total_steps));
    s.warmup_steps = std::min(std::max(w, 1), s.total_steps - 1);
    return s;
}

/// Scale all gradients by a common factor so their global L2 norm does not
/// exceed max_norm. Returns the pre-clip norm.
inline double clip_gradients(const std::vector<TensorPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (max_norm > 0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p->grad) g *= scale;
    }
    return norm;
}

class Adam {
public:
    Adam(const NamedParams& params, LrSchedule schedule, double clip_norm, double beta1 = 0.9,
         double beta2 = 0.999, double epsilon = 1e-8)
        : sched_(schedule), clip_(clip_norm), b1_(beta1), b2_(beta2), eps_(epsilon) {
        for (const auto& [name, p] : params) {
            if (!p->requires_grad)
                throw ConfigError("optimizer given a frozen tensor: " + name);
            params_.push_back(p);
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }

    void zero_grad() const {
        for (const auto& p : params_) p->zero_grad();
    }

    void step() {
        clip_gradients(params_, clip_);
        ++t_;
        last_lr_ = sched_.lr_at(t_);
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            for (std::size_t j = 0; j < p.numel(); ++j) {
                const double g = p.grad[j];
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
                p.data[j] -= last_lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
        }
    }

    int steps_done() const { return t_; }
    double last_lr() const { return last_lr_; }
    const LrSchedule& schedule() const { return sched_; }

private:
    std::vector<TensorPtr> params_;
    std::vector<std::vector<double>> m_, v_;
    LrSchedule sched_;
    double clip_, b1_, b2_, eps_;
    int t_ = 0;
    double last_lr_ = 0.0;
};

// ---------------------------------------------------------------------------
// Scheduled sampling
// ---------------------------------------------------------------------------

/// Per-turn coin: with probability sampling_prob the model's own prediction
/// feeds the next turn, otherwise the gold state does. A probability of zero
/// draws nothing, so teacher forcing is the exact degenerate case.
inline const State& sample_states(const State& gold_prev, const State& predicted_prev,
                                  double sampling_prob, Rng& rng) {
    return (sampling_prob > 0.0 && rng.bernoulli(sampling_prob)) ? predicted_prev : gold_prev;
}

namespace detail {

struct DialogueRunStats {
    double dst = 0, stp = 0;
    int predicted_feeds = 0;
};

/// Forward + backward for one dialogue. The joint loss is scaled by
/// `loss_scale` (1/batch) before backprop so batch gradients average.
inline DialogueRunStats train_on_dialogue(Model& model, const Dialogue& dialogue,
                                          double sampling_prob, DecodeMode decode,
                                          double loss_scale, Rng& rng) {
    Tape tape;
    DialoguePass pass(model, &tape, dialogue, /*training=*/true, rng);
    std::vector<TurnHeads> heads;
    heads.reserve(dialogue.turns.size());
    const TurnHeads* prev_heads = nullptr;
    std::vector<TensorPtr> dst_terms, stp_terms;
    State gold_prev = all_none_state(model.ontology());
    State pred_prev = gold_prev;
    DialogueRunStats stats;

    for (std::size_t t = 0; t < dialogue.turns.size(); ++t) {
        try {
            const State& prev =
                t == 0 ? gold_prev : sample_states(gold_prev, pred_prev, sampling_prob, rng);
            if (&prev == &pred_prev) ++stats.predicted_feeds;
            const auto& core = pass.run_turn(prev);
            heads.push_back(compute_heads(&tape, model, core, prev_heads, true, rng));
            prev_heads = &heads.back();
            dst_terms.push_back(dst_turn_loss(&tape, model, heads.back(), dialogue.turns[t].state));
            stp_terms.push_back(
                stp_turn_loss(&tape, model, heads.back(), dialogue.turns[t].state, gold_prev));
            if (sampling_prob > 0.0)
                pred_prev = decode_state(model, heads.back(), pred_prev, decode);
            gold_prev = dialogue.turns[t].state;
        } catch (const NumericError& e) {
            throw NumericError("dialogue " + dialogue.id + " turn " + std::to_string(t + 1) +
                               ": " + e.what());
        }
    }
    try {
        auto dst = sum_scalars(&tape, dst_terms);
        auto stp = sum_scalars(&tape, stp_terms);
        stats.dst = dst->data[0];
        stats.stp = stp->data[0];
        auto joint = sum_scalars(&tape, {dst, stp});
        tape.backward(affine(&tape, joint, loss_scale, 0.0));
    } catch (const NumericError& e) {
        throw NumericError("dialogue " + dialogue.id + ": " + std::string(e.what()));
    }
    return stats;
}

}  // namespace detail

/// Deterministic data-parallel gradient computation. Each worker owns a full
/// model replica; a batch's dialogues are assigned round-robin, per-dialogue
/// gradients land in per-dialogue buffers, and the merge into the primary
/// model always runs in dialogue order — so results are bit-identical for any
/// worker count.
class TrainerPool {
public:
    TrainerPool(Model& primary, int workers)
        : primary_(primary), workers_(std::max(workers, 1)) {
        auto src = primary_.all_tensors();
        for (int w = 0; w < workers_; ++w) {
            auto rep = std::make_unique<Model>(primary.ontology(), primary.vocab(),
                                              primary.config(), primary.variant(), 0);
            rep->bypass_turn_gate = primary.bypass_turn_gate;
            rep->bypass_passage_gate = primary.bypass_passage_gate;
            auto dst = rep->all_tensors();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i].second->data = src[i].second->data;
            rep->refresh_frozen_caches();
            replicas_.push_back(std::move(rep));
        }
    }

    int workers() const { return workers_; }

    /// Copy the primary's trainable parameters into every replica. Call after
    /// each optimizer step or external weight load.
    void sync() {
        auto src = primary_.trainable_params();
        for (auto& rep : replicas_) {
            auto dst = rep->trainable_params();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i].second->data = src[i].second->data;
        }
    }

    struct BatchOutcome {
        double dst = 0, stp = 0;
        int predicted_feeds = 0;
    };

    /// Run one batch and accumulate averaged gradients into the primary
    /// model's grad buffers (which the caller should have zeroed).
    BatchOutcome run_batch(const std::vector<const Dialogue*>& batch, std::vector<Rng>& rngs,
                           double sampling_prob, DecodeMode decode) {
        const std::size_t bn = batch.size();
        if (rngs.size() != bn) throw DimensionError("one RNG stream per batch dialogue required");
        auto primary_params = primary_.trainable_params();
        if (slots_.size() < bn) slots_.resize(bn);
        std::vector<detail::DialogueRunStats> stats(bn);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers_));

        auto work = [&](int w) {
            try {
                Model& m = *replicas_[static_cast<std::size_t>(w)];
                auto params = m.trainable_params();
                for (std::size_t i = static_cast<std::size_t>(w); i < bn;
                     i += static_cast<std::size_t>(workers_)) {
                    for (auto& [name, p] : params) p->zero_grad();
                    stats[i] = detail::train_on_dialogue(m, *batch[i], sampling_prob, decode,
                                                         1.0 / static_cast<double>(bn), rngs[i]);
                    auto& slot = slots_[i];
                    slot.resize(params.size());
                    for (std::size_t j = 0; j < params.size(); ++j)
                        slot[j] = params[j].second->grad;
                }
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        };
        if (workers_ == 1) {
            work(0);
        } else {
            std::vector<std::thread> threads;
            for (int w = 0; w < workers_; ++w) threads.emplace_back(work, w);
            for (auto& t : threads) t.join();
        }
        for (const auto& err : errors)
            if (err) std::rethrow_exception(err);

        BatchOutcome out;
        for (std::size_t i = 0; i < bn; ++i) {
            for (std::size_t j = 0; j < primary_params.size(); ++j) {
                auto& grad = primary_params[j].second->grad;
                const auto& add = slots_[i][j];
                for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += add[k];
            }
            out.dst += stats[i].dst;
            out.stp += stats[i].stp;
            out.predicted_feeds += stats[i].predicted_feeds;
        }
        return out;
    }

private:
    Model& primary_;
    int workers_;
    std::vector<std::unique_ptr<Model>> replicas_;
    std::vector<std::vector<std::vector<double>>> slots_;  // [dialogue][param][coord]
};

struct EpochMetrics {
    double mean_dst = 0, mean_stp = 0;
    int dialogues = 0;
    int predicted_feeds = 0;

    double mean_joint() const { return mean_dst + mean_stp; }
};

/// One pass over the shuffled training set with gradient accumulation per
/// batch. Losses are reported as per-dialogue means over the epoch.
inline EpochMetrics run_epoch(TrainerPool& pool, const std::vector<Dialogue>& train, Adam& opt,
                              double sampling_prob, DecodeMode decode, int batch_size, Rng& rng) {
    if (train.empty()) throw ValidationError("training epoch needs a nonempty corpus");
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    std::vector<const Dialogue*> order;
    order.reserve(train.size());
    for (const auto& d : train) order.push_back(&d);
    detail::shuffle_vec(order, rng);

    EpochMetrics met;
    met.dialogues = static_cast<int>(train.size());
    double sum_dst = 0, sum_stp = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t bn =
            std::min<std::size_t>(static_cast<std::size_t>(batch_size), order.size() - start);
        std::vector<const Dialogue*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(start + bn));
        std::vector<Rng> rngs;
        rngs.reserve(bn);
        for (std::size_t i = 0; i < bn; ++i) rngs.push_back(rng.split());
        opt.zero_grad();
        auto out = pool.run_batch(batch, rngs, sampling_prob, decode);
        sum_dst += out.dst;
        sum_stp += out.stp;
        met.predicted_feeds += out.predicted_feeds;
        opt.step();
        pool.sync();
    }
    met.mean_dst = sum_dst / static_cast<double>(train.size());
    met.mean_stp = sum_stp / static_cast<double>(train.size());
    return met;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'T', 'F'};

struct CheckpointMeta {
    int epoch = 0;  // overall epoch count across phases
    std::string phase;
    double best_dev_joint = 0.0;
    std::string rng_state;
    int epoch_in_phase = 0;  // epochs completed inside `phase`, for resuming
};

namespace detail {

inline void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw IoError("checkpoint truncated while reading " + what);
}

struct CheckpointFile {
    nlohmann::json header;
    std::ifstream in;
};

inline CheckpointFile open_checkpoint(const std::filesystem::path& path) {
    CheckpointFile f;
    f.in.open(path, std::ios::binary);
    if (!f.in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[4];
    read_bytes(f.in, magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("not a checkpoint file (bad magic): " + path.string());
    std::uint32_t version = 0;
    read_bytes(f.in, &version, sizeof version, "version");
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
    std::uint64_t hlen = 0;
    read_bytes(f.in, &hlen, sizeof hlen, "header length");
    std::string hbuf(hlen, '\0');
    read_bytes(f.in, hbuf.data(), hlen, "header");
    try {
        f.header = nlohmann::json::parse(hbuf);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header: " + std::string(e.what()));
    }
    return f;
}

inline CheckpointMeta meta_from_header(const nlohmann::json& header) {
    const auto& m = header.at("meta");
    CheckpointMeta meta;
    meta.epoch = m.at("epoch").get<int>();
    meta.phase = m.at("phase").get<std::string>();
    meta.best_dev_joint = m.at("best_dev_joint").get<double>();
    meta.rng_state = m.at("rng_state").get<std::string>();
    meta.epoch_in_phase = m.at("epoch_in_phase").get<int>();
    return meta;
}

/// Read the tensor payload into an existing model whose manifest must match.
inline void fill_tensors(CheckpointFile& f, Model& model) {
    auto tensors = model.all_tensors();
    const auto& manifest = f.header.at("tensors");
    if (manifest.size() != tensors.size())
        throw ValidationError("checkpoint holds " + std::to_string(manifest.size()) +
                              " tensors, model expects " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& entry = manifest[i];
        auto& [name, t] = tensors[i];
        if (entry.at("name").get<std::string>() != name)
            throw ValidationError("checkpoint tensor order mismatch at '" + name + "'");
        if (entry.at("shape").get<std::vector<int>>() != t->shape)
            throw ValidationError("checkpoint shape mismatch for tensor '" + name + "'");
        read_bytes(f.in, t->data.data(), t->numel() * sizeof(double), "tensor " + name);
    }
    f.in.peek();
    if (!f.in.eof()) throw IoError("trailing bytes after checkpoint payload");
    for (auto& [name, p] : model.trainable_params()) p->zero_grad();
    model.refresh_frozen_caches();
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const CheckpointMeta& meta) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tensors = model.all_tensors();
    nlohmann::json header;
    header["variant"] = variant_name(model.variant());
    header["model_config"] = model.config().to_json();
    header["ontology"] = detail::ontology_to_json(model.ontology());
    header["vocab"] = model.vocab().to_json();
    header["meta"] = {{"epoch", meta.epoch},
                      {"phase", meta.phase},
                      {"best_dev_joint", meta.best_dev_joint},
                      {"rng_state", meta.rng_state},
                      {"epoch_in_phase", meta.epoch_in_phase}};
    auto manifest = nlohmann::json::array();
    for (const auto& [name, t] : tensors)
        manifest.push_back({{"name", name}, {"shape", t->shape}});
    header["tensors"] = manifest;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    const std::string hbuf = header.dump();
    detail::write_bytes(out, kCheckpointMagic, 4);
    detail::write_bytes(out, &kCheckpointVersion, sizeof kCheckpointVersion);
    const std::uint64_t hlen = hbuf.size();
    detail::write_bytes(out, &hlen, sizeof hlen);
    detail::write_bytes(out, hbuf.data(), hbuf.size());
    for (const auto& [name, t] : tensors)
        detail::write_bytes(out, t->data.data(), t->numel() * sizeof(double));
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

/// Load into a model that must already match the checkpoint's variant,
/// configuration, ontology and vocabulary.
inline CheckpointMeta load_checkpoint_into(const std::filesystem::path& path, Model& model) {
    auto f = detail::open_checkpoint(path);
    if (f.header.at("variant").get<std::string>() != variant_name(model.variant()))
        throw ValidationError("checkpoint variant '" +
                              f.header.at("variant").get<std::string>() +
                              "' does not match model variant '" +
                              variant_name(model.variant()) + "'");
    if (f.header.at("model_config") != model.config().to_json())
        throw ValidationError("checkpoint model configuration does not match");
    if (f.header.at("ontology") != detail::ontology_to_json(model.ontology()))
        throw ValidationError("checkpoint ontology does not match the model's ontology");
    if (f.header.at("vocab") != model.vocab().to_json())
        throw ValidationError("checkpoint vocabulary does not match the model's vocabulary");
    detail::fill_tensors(f, model);
    return detail::meta_from_header(f.header);
}

/// Reconstruct a model entirely from a checkpoint (ontology, vocabulary and
/// configuration travel inside the file).
inline std::unique_ptr<Model> load_checkpoint_model(const std::filesystem::path& path,
                                                    CheckpointMeta* meta_out = nullptr) {
    auto f = detail::open_checkpoint(path);
    auto ontology = detail::ontology_from_json(f.header.at("ontology"), "checkpoint " + path.string());
    auto vocab = Vocabulary::from_json(f.header.at("vocab"));
    auto config = ModelConfig::from_json(f.header.at("model_config"));
    auto variant = parse_variant(f.header.at("variant").get<std::string>());
    auto model = std::make_unique<Model>(std::move(ontology), std::move(vocab), config, variant,
                                         /*seed=*/0);
    detail::fill_tensors(f, *model);
    if (meta_out) *meta_out = detail::meta_from_header(f.header);
    return model;
}

// ---------------------------------------------------------------------------
// The two-phase training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;  // counts across phases
    std::string phase;
    double l_dst = 0, l_stp = 0, dev_joint = 0, lr = 0;
    int predicted_feeds = 0;
    int epochs_since_best = 0;
    bool new_best = false;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},
                {"phase", phase},
                {"l_dst", l_dst},
                {"l_stp", l_stp},
                {"dev_joint", dev_joint},
                {"lr", lr},
                {"predicted_feeds", predicted_feeds},
                {"epochs_since_best", epochs_since_best},
                {"new_best", new_best}};
    }
};

struct TrainResult {
    double best_dev_joint = -1.0;
    int best_epoch = -1;
    std::string best_phase;
    std::filesystem::path checkpoint_path;
    std::vector<EpochRecord> history;
};

struct TrainHooks {
    /// Called right before each phase's optimizer is built; phase 1 has
    /// already reloaded the phase-0 best weights at this point.
    std::function<void(int phase_index, Model&)> on_phase_start;
    /// Return true to end training after the epoch just recorded; the best
    /// checkpoint written so far is reloaded as usual.
    std::function<bool(const EpochRecord&)> stop_when;
};

/// Phase 0 trains with teacher forcing; phase 1 restarts from the best
/// phase-0 weights with scheduled sampling, a fresh optimizer and a fresh
/// schedule. A checkpoint is written on every new best dev joint accuracy,
/// and the model holds the overall best weights on return.
///
/// With `resume` the loop restarts from the best checkpoint in `out_dir`:
/// epoch counters, the best score and the shuffling RNG continue from the
/// saved state, and the metrics log is appended to. The optimizer itself is
/// rebuilt (checkpoints deliberately hold no optimizer state).
inline TrainResult train(Model& model, const CorpusSplit& corpus, const TrainingConfig& cfg,
                         const std::filesystem::path& out_dir, int threads = 1,
                         const TrainHooks& hooks = {}, bool resume = false) {
    if (cfg.epochs_budget < 1) throw ConfigError("epochs budget must be at least 1");
    if (cfg.sampling_prob < 0 || cfg.sampling_prob > 1)
        throw ConfigError("sampling probability must lie in [0, 1]");
    validate_corpus(corpus);
    if (corpus.train.empty()) throw ValidationError("training split is empty");
    if (corpus.dev.empty()) throw ValidationError("dev split is empty");

    std::filesystem::create_directories(out_dir);
    TrainResult res;
    res.checkpoint_path = out_dir / "best.ckpt";
    Rng train_rng(cfg.seed);
    int overall = 0;
    int start_phase = 0, start_epoch_in_phase = 0;
    if (resume) {
        if (!std::filesystem::exists(res.checkpoint_path))
            throw ConfigError("cannot resume: no checkpoint at " + res.checkpoint_path.string());
        const auto meta = load_checkpoint_into(res.checkpoint_path, model);
        res.best_dev_joint = meta.best_dev_joint;
        res.best_epoch = meta.epoch;
        res.best_phase = meta.phase;
        train_rng.restore(meta.rng_state);
        start_phase = meta.phase == "scheduled_sampling" ? 1 : 0;
        start_epoch_in_phase = meta.epoch_in_phase;
        overall = meta.epoch;
    }
    std::ofstream metrics(out_dir / "metrics.jsonl",
                          resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.jsonl").string());

    TrainerPool pool(model, threads);
    const int steps_per_epoch = static_cast<int>(
        (corpus.train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
        static_cast<std::size_t>(cfg.batch_size));

    const int phases = cfg.scheduled_phase ? 2 : 1;
    bool stop_requested = false;
    for (int phase = start_phase; phase < phases && !stop_requested; ++phase) {
        const bool sampled = phase == 1;
        const std::string phase_name = sampled ? "scheduled_sampling" : "teacher_forcing";
        const double p = sampled ? cfg.sampling_prob : 0.0;
        if (sampled && res.best_epoch >= 0) {
            load_checkpoint_into(res.checkpoint_path, model);
            pool.sync();
        }
        if (hooks.on_phase_start) hooks.on_phase_start(phase, model);
        Adam opt(model.trainable_params(),
                 make_schedule(cfg.peak_lr, cfg.warmup_proportion,
                               cfg.epochs_budget * steps_per_epoch),
                 cfg.clip_norm);
        int stale = 0;
        const int first_epoch = phase == start_phase ? start_epoch_in_phase : 0;
        for (int e = first_epoch; e < cfg.epochs_budget; ++e) {
            auto met = run_epoch(pool, corpus.train, opt, p, DecodeMode::kArgmax, cfg.batch_size,
                                 train_rng);
            auto dev = evaluate_joint(model, corpus.dev, EvalMode::kNormal, DecodeMode::kArgmax,
                                      "dev", threads);
            ++overall;
            const bool new_best = dev.joint_accuracy > res.best_dev_joint;
            if (new_best) {
                res.best_dev_joint = dev.joint_accuracy;
                res.best_epoch = overall;
                res.best_phase = phase_name;
                stale = 0;
                save_checkpoint(res.checkpoint_path, model,
                                CheckpointMeta{overall, phase_name, dev.joint_accuracy,
                                               train_rng.state(), e + 1});
            } else {
                ++stale;
            }
            EpochRecord rec{overall,       phase_name, met.mean_dst, met.mean_stp,
                            dev.joint_accuracy, opt.last_lr(), met.predicted_feeds,
                            stale,         new_best};
            res.history.push_back(rec);
            metrics << rec.to_json().dump() << '\n';
            metrics.flush();
            if (hooks.stop_when && hooks.stop_when(rec)) {
                stop_requested = true;
                break;
            }
            if (stale >= cfg.patience_epochs) break;
        }
    }
    load_checkpoint_into(res.checkpoint_path, model);
    pool.sync();
    return res;
}

}  // namespace dstfuse
