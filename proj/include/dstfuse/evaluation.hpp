#pragma once

#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstfuse/objectives.hpp"

namespace dstfuse {

enum class EvalMode { kNormal, kTeacherForcing };

inline std::string eval_mode_name(EvalMode m) {
    return m == EvalMode::kNormal ? "normal" : "teacher_forcing";
}

inline EvalMode parse_eval_mode(const std::string& name) {
    if (name == "normal") return EvalMode::kNormal;
    if (name == "teacher_forcing" || name == "tf") return EvalMode::kTeacherForcing;
    throw ConfigError("unknown evaluation mode: " + name);
}

namespace detail {

/// Run fn(i) for i in [0, n); with more than one thread the indices are
/// distributed dynamically. The first exception thrown wins and is rethrown
/// on the caller's thread.
template <typename Fn>
void parallel_over(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline std::string canon_value(const std::string& v) {
    std::size_t b = 0, e = v.size();
    while (b < e && std::isspace(static_cast<unsigned char>(v[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(v[e - 1]))) --e;
    std::string out = v.substr(b, e - b);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline bool values_match(const std::string& a, const std::string& b) {
    return canon_value(a) == canon_value(b);
}

}  // namespace detail

struct DialoguePrediction {
    std::vector<State> states;  // post-turn predicted state, one per turn
    std::vector<GateTraceRecord> traces;
};

/// Decode a whole dialogue. Normal mode feeds the model's own previous
/// prediction back as the last dialogue state; teacher-forcing mode feeds the
/// gold state, making each turn independent of earlier mistakes.
inline DialoguePrediction predict_dialogue(Model& model, const Dialogue& dialogue, EvalMode mode,
                                           DecodeMode decode) {
    Rng rng(0);  // evaluation never draws randomness
    DialoguePass pass(model, nullptr, dialogue, /*training=*/false, rng);
    DialoguePrediction out;
    out.states.reserve(dialogue.turns.size());
    std::vector<TurnHeads> heads;
    heads.reserve(dialogue.turns.size());
    const TurnHeads* prev_heads = nullptr;
    State prev = all_none_state(model.ontology());
    for (std::size_t t = 0; t < dialogue.turns.size(); ++t) {
        const auto& core = pass.run_turn(prev);
        heads.push_back(compute_heads(nullptr, model, core, prev_heads, false, rng));
        prev_heads = &heads.back();
        out.states.push_back(decode_state(model, heads.back(), prev, decode));
        prev = mode == EvalMode::kNormal ? out.states.back() : dialogue.turns[t].state;
    }
    out.traces = pass.traces();
    return out;
}

inline std::vector<State> predict_states(Model& model, const Dialogue& dialogue, EvalMode mode,
                                         DecodeMode decode) {
    return predict_dialogue(model, dialogue, mode, decode).states;
}

using Predictions = std::map<std::string, std::vector<State>>;
using StatePredictor = std::function<std::vector<State>(const Dialogue&)>;

inline StatePredictor neural_predictor(Model& model, EvalMode mode, DecodeMode decode) {
    return [&model, mode, decode](const Dialogue& d) {
        return predict_states(model, d, mode, decode);
    };
}

/// Protocol anchor: echoes the gold annotation.
inline StatePredictor oracle_predictor() {
    return [](const Dialogue& d) {
        std::vector<State> out;
        for (const auto& t : d.turns) out.push_back(t.state);
        return out;
    };
}

/// Protocol anchor: predicts none for every slot at every turn.
inline StatePredictor constant_none_predictor(const Ontology& ont) {
    State none = all_none_state(ont);
    return [none](const Dialogue& d) {
        return std::vector<State>(d.turns.size(), none);
    };
}

/// Forward passes are safe to run concurrently on one model: evaluation never
/// writes to parameters and the frozen-encoder caches are warmed up front.
inline Predictions predict_corpus(Model& model, const std::vector<Dialogue>& dialogues,
                                  EvalMode mode, DecodeMode decode, int threads = 1) {
    std::vector<std::vector<State>> rows(dialogues.size());
    detail::parallel_over(dialogues.size(), threads, [&](std::size_t i) {
        rows[i] = predict_states(model, dialogues[i], mode, decode);
    });
    Predictions out;
    for (std::size_t i = 0; i < dialogues.size(); ++i) out[dialogues[i].id] = std::move(rows[i]);
    return out;
}

struct EvalReport {
    double joint_accuracy = 0.0;
    std::map<std::string, double> per_slot;
    std::string mode;
    std::string corpus_id;
    std::string variant;
    int turns = 0;

    nlohmann::json to_json() const {
        return {{"joint_accuracy", joint_accuracy}, {"per_slot", per_slot},  {"mode", mode},
                {"corpus_id", corpus_id},           {"variant", variant},    {"turns", turns}};
    }
};

/// Exact-match joint accuracy: a turn counts iff every slot matches gold.
/// `predictions` must cover every (dialogue, turn) of `gold`.
inline EvalReport score_joint_accuracy(const Predictions& predictions,
                                       const std::vector<Dialogue>& gold, const Ontology& ont,
                                       const std::string& mode_label,
                                       const std::string& corpus_id = "",
                                       const std::string& variant = "") {
    if (gold.empty()) throw ValidationError("joint accuracy needs at least one dialogue");
    EvalReport report;
    report.mode = mode_label;
    report.corpus_id = corpus_id;
    report.variant = variant;
    std::map<std::string, int> slot_hits;
    int joint_hits = 0, turns = 0;
    for (const auto& d : gold) {
        auto it = predictions.find(d.id);
        if (it == predictions.end())
            throw ValidationError("predictions missing for dialogue " + d.id);
        if (it->second.size() != d.turns.size())
            throw ValidationError("dialogue " + d.id + ": " + std::to_string(it->second.size()) +
                                  " predicted turns for " + std::to_string(d.turns.size()) +
                                  " gold turns");
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            const State& pred = it->second[t];
            bool all = true;
            for (const auto& slot : ont.slots) {
                auto pit = pred.find(slot);
                if (pit == pred.end())
                    throw ValidationError("dialogue " + d.id + " turn " + std::to_string(t + 1) +
                                          ": prediction is missing slot " + slot);
                const bool hit = detail::values_match(pit->second, d.turns[t].state.at(slot));
                if (hit) ++slot_hits[slot];
                all = all && hit;
            }
            joint_hits += all ? 1 : 0;
            ++turns;
        }
    }
    report.turns = turns;
    report.joint_accuracy = static_cast<double>(joint_hits) / turns;
    for (const auto& slot : ont.slots)
        report.per_slot[slot] = static_cast<double>(slot_hits[slot]) / turns;
    return report;
}

inline EvalReport evaluate_joint(Model& model, const std::vector<Dialogue>& dialogues,
                                 EvalMode mode, DecodeMode decode,
                                 const std::string& corpus_id = "", int threads = 1) {
    return score_joint_accuracy(predict_corpus(model, dialogues, mode, decode, threads), dialogues,
                                model.ontology(), eval_mode_name(mode), corpus_id,
                                variant_name(model.variant()));
}

// ---------------------------------------------------------------------------
// Phenomenon probes
// ---------------------------------------------------------------------------

struct ProbeInstance {
    std::string dialogue_id;
    int turn = 0;  // 1-based phenomenon turn
    std::string slot;
    std::string predicted_before;  // deleted-value probe only
    std::string predicted;
    std::string expected;
    bool success = false;

    nlohmann::json to_json() const {
        return {{"dialogue_id", dialogue_id}, {"turn", turn},        {"slot", slot},
                {"predicted_before", predicted_before}, {"predicted", predicted},
                {"expected", expected},       {"success", success}};
    }
};

struct ProbeReport {
    std::string probe;
    std::size_t instances = 0;
    std::size_t successes = 0;
    double rate = 0.0;
    bool empty = true;
    std::vector<ProbeInstance> log;

    nlohmann::json to_json(bool include_log = false) const {
        nlohmann::json j = {{"probe", probe},
                            {"instances", instances},
                            {"successes", successes},
                            {"rate", rate},
                            {"empty", empty}};
        if (include_log) {
            auto arr = nlohmann::json::array();
            for (const auto& e : log) arr.push_back(e.to_json());
            j["log"] = arr;
        }
        return j;
    }
};

/// Deleted-value protocol: an instance is every (dialogue, turn, slot) where
/// the gold value reverts from non-none to none. Tracking succeeds when the
/// model held exactly the soon-deleted value at the turn before the deletion
/// and predicts none at the deletion turn itself; holding an arbitrary wrong
/// value does not count, or a position-based guesser would score here.
inline ProbeReport score_deleted_value(const std::vector<Dialogue>& dialogues,
                                       const std::vector<std::vector<State>>& preds,
                                       const Ontology& ont) {
    if (dialogues.size() != preds.size())
        throw ValidationError("probe predictions do not cover the probe set");
    ProbeReport report;
    report.probe = "deleted_value";
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        const auto& d = dialogues[i];
        if (preds[i].size() != d.turns.size())
            throw ValidationError("dialogue " + d.id + ": prediction/turn count mismatch");
        State prev = all_none_state(ont);
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            for (const auto& slot : ont.slots) {
                if (prev.at(slot) == kNone || d.turns[t].state.at(slot) != kNone) continue;
                // Deletions cannot happen at the first turn: the state before
                // turn 1 is all none by definition.
                ProbeInstance inst;
                inst.dialogue_id = d.id;
                inst.turn = static_cast<int>(t) + 1;
                inst.slot = slot;
                inst.predicted_before = preds[i][t - 1].at(slot);
                inst.predicted = preds[i][t].at(slot);
                inst.expected = kNone;
                inst.success = detail::values_match(inst.predicted_before, prev.at(slot)) &&
                               inst.predicted == kNone;
                report.successes += inst.success ? 1 : 0;
                ++report.instances;
                report.log.push_back(std::move(inst));
            }
            prev = d.turns[t].state;
        }
    }
    if (report.instances == 0)
        throw ValidationError("deleted-value probe set contains no deletion turns");
    report.empty = false;
    report.rate = static_cast<double>(report.successes) / static_cast<double>(report.instances);
    return report;
}

/// Related-slot protocol: an instance is every (dialogue, turn, target slot)
/// where a linked slot takes on the source slot's previous value without that
/// value being spoken in the turn. Tracking succeeds when the model predicts
/// exactly the carried value at that turn.
inline ProbeReport score_related_slot(const std::vector<Dialogue>& dialogues,
                                      const std::vector<std::vector<State>>& preds,
                                      const Ontology& ont) {
    if (dialogues.size() != preds.size())
        throw ValidationError("probe predictions do not cover the probe set");
    ProbeReport report;
    report.probe = "related_slot";
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        const auto& d = dialogues[i];
        if (preds[i].size() != d.turns.size())
            throw ValidationError("dialogue " + d.id + ": prediction/turn count mismatch");
        State prev = all_none_state(ont);
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            for (const auto& [src, tgt] : ont.links) {
                const auto& carried = d.turns[t].state.at(tgt);
                if (carried == kNone || carried == prev.at(tgt) || carried != prev.at(src))
                    continue;
                auto tokens = tokenize(d.turns[t].user);
                if (std::find(tokens.begin(), tokens.end(), carried) != tokens.end()) continue;
                ProbeInstance inst;
                inst.dialogue_id = d.id;
                inst.turn = static_cast<int>(t) + 1;
                inst.slot = tgt;
                inst.predicted = preds[i][t].at(tgt);
                inst.expected = carried;
                inst.success = detail::values_match(inst.predicted, carried);
                report.successes += inst.success ? 1 : 0;
                ++report.instances;
                report.log.push_back(std::move(inst));
            }
            prev = d.turns[t].state;
        }
    }
    if (report.instances == 0)
        throw ValidationError("related-slot probe set contains no carryover turns");
    report.empty = false;
    report.rate = static_cast<double>(report.successes) / static_cast<double>(report.instances);
    return report;
}

namespace detail {

inline std::vector<std::vector<State>> predictions_for(const StatePredictor& predictor,
                                                       const std::vector<Dialogue>& dialogues) {
    std::vector<std::vector<State>> preds;
    preds.reserve(dialogues.size());
    for (const auto& d : dialogues) preds.push_back(predictor(d));
    return preds;
}

inline std::vector<std::vector<State>> predictions_for(Model& model,
                                                       const std::vector<Dialogue>& dialogues,
                                                       DecodeMode decode, int threads) {
    std::vector<std::vector<State>> preds(dialogues.size());
    parallel_over(dialogues.size(), threads, [&](std::size_t i) {
        preds[i] = predict_states(model, dialogues[i], EvalMode::kNormal, decode);
    });
    return preds;
}

}  // namespace detail

/// Probes always run the model in normal mode: the whole point is whether its
/// own state feedback carries the phenomenon.
inline ProbeReport deleted_value_probe(const StatePredictor& predictor,
                                       const std::vector<Dialogue>& dialogues,
                                       const Ontology& ont) {
    return score_deleted_value(dialogues, detail::predictions_for(predictor, dialogues), ont);
}

inline ProbeReport deleted_value_probe(Model& model, const std::vector<Dialogue>& dialogues,
                                       DecodeMode decode = DecodeMode::kArgmax, int threads = 1) {
    return score_deleted_value(dialogues,
                               detail::predictions_for(model, dialogues, decode, threads),
                               model.ontology());
}

inline ProbeReport related_slot_probe(const StatePredictor& predictor,
                                      const std::vector<Dialogue>& dialogues,
                                      const Ontology& ont) {
    return score_related_slot(dialogues, detail::predictions_for(predictor, dialogues), ont);
}

inline ProbeReport related_slot_probe(Model& model, const std::vector<Dialogue>& dialogues,
                                      DecodeMode decode = DecodeMode::kArgmax, int threads = 1) {
    return score_related_slot(dialogues,
                              detail::predictions_for(model, dialogues, decode, threads),
                              model.ontology());
}

// ---------------------------------------------------------------------------
// Gate trace export
// ---------------------------------------------------------------------------

inline std::vector<GateTraceRecord> collect_gate_traces(Model& model,
                                                        const std::vector<Dialogue>& dialogues,
                                                        DecodeMode decode = DecodeMode::kArgmax,
                                                        int threads = 1) {
    if (model.variant() == Variant::kBase)
        throw ConfigError("no gates in variant " + variant_name(model.variant()));
    std::vector<std::vector<GateTraceRecord>> rows(dialogues.size());
    detail::parallel_over(dialogues.size(), threads, [&](std::size_t i) {
        rows[i] = predict_dialogue(model, dialogues[i], EvalMode::kNormal, decode).traces;
    });
    std::vector<GateTraceRecord> out;
    for (auto& r : rows)
        for (auto& rec : r) out.push_back(std::move(rec));
    return out;
}

inline void write_gate_csv(const std::vector<GateTraceRecord>& traces,
                           const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "dialogue_id,turn,slot,gate_name,weight\n";
    out << std::setprecision(17);
    for (const auto& t : traces)
        out << t.dialogue_id << ',' << t.turn << ',' << t.slot << ',' << t.gate << ','
            << t.weight << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline void export_gate_traces(Model& model, const std::vector<Dialogue>& dialogues,
                               const std::filesystem::path& path,
                               DecodeMode decode = DecodeMode::kArgmax, int threads = 1) {
    write_gate_csv(collect_gate_traces(model, dialogues, decode, threads), path);
}

}  // namespace dstfuse
