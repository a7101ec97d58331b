#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstfuse/corpus.hpp"
#include "dstfuse/encoders.hpp"
#include "dstfuse/nn.hpp"

namespace dstfuse {

/// The four published wirings plus the two comparison networks.
enum class Variant {
    kBase,              // slot-utterance attention only; no state or passage gates
    kTurnLevel,         // adds slot-state attention fused by the turn gate
    kPassageLevel,      // adds state-enhance attention fused by the passage gate
    kDualLevel,         // both of the above
    kComparativeNoGate, // turn gate replaced by cascaded attention
    kComparativeSingle, // sequence encoder sees {c_1..c_{t-1}, m_t}
};

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kBase: return "base";
        case Variant::kTurnLevel: return "turn_level";
        case Variant::kPassageLevel: return "passage_level";
        case Variant::kDualLevel: return "dual_level";
        case Variant::kComparativeNoGate: return "comparative_no_gate";
        case Variant::kComparativeSingle: return "comparative_single";
    }
    throw ConfigError("unknown variant enum value");
}

inline Variant parse_variant(const std::string& name) {
    if (name == "base") return Variant::kBase;
    if (name == "turn" || name == "turn_level") return Variant::kTurnLevel;
    if (name == "passage" || name == "passage_level") return Variant::kPassageLevel;
    if (name == "dual" || name == "dual_level") return Variant::kDualLevel;
    if (name == "no-gate" || name == "comparative_no_gate") return Variant::kComparativeNoGate;
    if (name == "single" || name == "comparative_single") return Variant::kComparativeSingle;
    throw ConfigError("unknown variant: " + name);
}

inline bool variant_has_turn_gate(Variant v) {
    return v == Variant::kTurnLevel || v == Variant::kDualLevel ||
           v == Variant::kComparativeSingle;
}
inline bool variant_has_passage_gate(Variant v) {
    return v == Variant::kPassageLevel || v == Variant::kDualLevel;
}

struct ModelConfig {
    int d = 48;
    int heads = 4;
    int utt_layers = 2;  // depth of the compact text encoder that stands in for BERT
    int seq_layers = 2;  // depth of the transformer over turn vectors
    int dff = 192;
    int max_seq_len = 64;
    double dropout = 0.0;  // synthetic corpora barely overfit; capacity is the bottleneck

    static ModelConfig desk() { return {}; }

    /// Published hyperparameters: hidden 784, 4 heads, 6-layer turn encoder,
    /// sequence length 64. Only the text encoder depth is ours (the original
    /// uses a pretrained 12-layer model).
    static ModelConfig paper() {
        ModelConfig c;
        c.d = 784;
        c.heads = 4;
        c.utt_layers = 2;
        c.seq_layers = 6;
        c.dff = 3136;
        c.max_seq_len = 64;
        c.dropout = 0.1;
        return c;
    }

    nlohmann::json to_json() const {
        return {{"d", d},
                {"heads", heads},
                {"utt_layers", utt_layers},
                {"seq_layers", seq_layers},
                {"dff", dff},
                {"max_seq_len", max_seq_len},
                {"dropout", dropout}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d = j.at("d").get<int>();
        c.heads = j.at("heads").get<int>();
        c.utt_layers = j.at("utt_layers").get<int>();
        c.seq_layers = j.at("seq_layers").get<int>();
        c.dff = j.at("dff").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.dropout = j.at("dropout").get<double>();
        return c;
    }
};

/// Sigmoid gate producing a convex combination of two branches:
/// g = sigmoid(W [x; y] + b), output = (1-g)*other + g*gated where the gated
/// branch is chosen by `gate_on_first`.
struct FusionGate {
    Linear w;

    FusionGate() = default;
    FusionGate(int d, Rng& rng) : w(2 * d, d, rng) {}

    std::pair<TensorPtr, TensorPtr> fuse(Tape* tape, const TensorPtr& x, const TensorPtr& y,
                                         bool gate_on_first) const {
        auto g = sigmoid(tape, w.forward(tape, concat_cols(tape, {x, y})));
        auto fused = gate_on_first ? convex_mix(tape, g, x, y) : convex_mix(tape, g, y, x);
        return {fused, g};
    }

    void collect(const std::string& prefix, NamedParams& out) const { w.collect(prefix, out); }
};

struct GateTraceRecord {
    std::string dialogue_id;
    int turn = 0;  // 1-based
    std::string slot;
    std::string gate;  // "turn" | "balance" | "passage"
    double weight = 0;
};

/// Per-slot final features for one turn, in canonical slot order.
struct TurnCore {
    std::vector<TensorPtr> f;  // each [1 x d]
};

/// The full tracker. All components are constructed for every variant in a
/// fixed order from one seed, so two models built with the same seed share
/// parameter values regardless of variant — the reduction equivalences in
/// the tests depend on this.
class Model {
public:
    Model(Ontology ontology, Vocabulary vocab, ModelConfig cfg, Variant variant,
          std::uint64_t seed)
        : ontology_(std::move(ontology)),
          vocab_(std::move(vocab)),
          cfg_(cfg),
          variant_(variant),
          init_rng_(seed),
          fixed_(vocab_, ontology_, cfg.d, init_rng_),
          tunable_(vocab_,
                   TunableEncoderConfig{cfg.d, cfg.heads, cfg.utt_layers, cfg.dff,
                                        cfg.max_seq_len},
                   init_rng_),
          attn_state_(cfg.d, cfg.heads, init_rng_),
          attn_utterance_(cfg.d, cfg.heads, init_rng_),
          attn_passage_(cfg.d, cfg.heads, init_rng_),
          attn_enhance_(cfg.d, cfg.heads, init_rng_),
          turn_gate_(cfg.d, init_rng_),
          balance_gate_(cfg.d, init_rng_),
          passage_gate_(cfg.d, init_rng_),
          seq_positions_(sinusoidal_positions(cfg.max_seq_len, cfg.d)),
          proj_(cfg.d, cfg.d, init_rng_),
          proj_norm_(cfg.d),
          stp_wc_(cfg.d, cfg.d, init_rng_),
          stp_wp_(2 * cfg.d, 1, init_rng_) {
        for (int l = 0; l < cfg.seq_layers; ++l)
            seq_layers_.emplace_back(cfg.d, cfg.heads, cfg.dff, init_rng_);
        fixed_.warm_cache(ontology_);
        for (const auto& slot : ontology_.slots) {
            std::vector<TensorPtr> rows;
            for (const auto& v : ontology_.candidates(slot))
                rows.push_back(fixed_.encode_value(v));
            candidate_rows_[slot] = concat_rows(nullptr, rows);
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const Ontology& ontology() const { return ontology_; }
    const Vocabulary& vocab() const { return vocab_; }
    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }
    void set_variant(Variant v) { variant_ = v; }

    const FixedEncoder& fixed() const { return fixed_; }
    const TunableEncoder& tunable() const { return tunable_; }
    const MultiHeadAttention& attn_state() const { return attn_state_; }
    const MultiHeadAttention& attn_enhance() const { return attn_enhance_; }

    /// Frozen h^v rows for every candidate of `slot`, in candidate order.
    const TensorPtr& candidate_matrix(const std::string& slot) const {
        auto it = candidate_rows_.find(slot);
        if (it == candidate_rows_.end()) throw OntologyError("unknown slot: " + slot);
        return it->second;
    }

    NamedParams trainable_params() const {
        NamedParams out;
        tunable_.collect("tunable", out);
        attn_state_.collect("attn_state", out);
        attn_utterance_.collect("attn_utterance", out);
        attn_passage_.collect("attn_passage", out);
        attn_enhance_.collect("attn_enhance", out);
        turn_gate_.collect("turn_gate", out);
        balance_gate_.collect("balance_gate", out);
        passage_gate_.collect("passage_gate", out);
        for (std::size_t l = 0; l < seq_layers_.size(); ++l)
            seq_layers_[l].collect("seq_layer" + std::to_string(l), out);
        proj_.collect("proj", out);
        proj_norm_.collect("proj_norm", out);
        stp_wc_.collect("stp_wc", out);
        stp_wp_.collect("stp_wp", out);
        return out;
    }

    /// Everything a checkpoint must persist: trainable parameters plus the
    /// frozen encoder tensors (kept verbatim so loads never re-derive them).
    NamedParams all_tensors() const {
        NamedParams out = trainable_params();
        out.emplace_back("fixed.table", fixed_.table());
        out.emplace_back("fixed.pool", fixed_.pool());
        return out;
    }

    /// After checkpoint load rewrites the frozen tensors, derived caches
    /// (pair/value vectors, candidate matrices) must be rebuilt.
    void refresh_frozen_caches() {
        fixed_.clear_cache();
        fixed_.warm_cache(ontology_);
        candidate_rows_.clear();
        for (const auto& slot : ontology_.slots) {
            std::vector<TensorPtr> rows;
            for (const auto& v : ontology_.candidates(slot))
                rows.push_back(fixed_.encode_value(v));
            candidate_rows_[slot] = concat_rows(nullptr, rows);
        }
    }

    void zero_grad() const {
        for (auto& [name, p] : trainable_params()) p->zero_grad();
    }

    // Output heads (value projection and state-transition predictor).
    const Linear& proj() const { return proj_; }
    const NormParams& proj_norm() const { return proj_norm_; }
    const Linear& stp_wc() const { return stp_wc_; }
    const Linear& stp_wp() const { return stp_wp_; }

    // Reduction hooks for equivalence tests: structurally bypass a gate so
    // its branch passes through untouched (no trace recorded).
    bool bypass_turn_gate = false;
    bool bypass_passage_gate = false;

    friend class DialoguePass;

private:
    Ontology ontology_;
    Vocabulary vocab_;
    ModelConfig cfg_;
    Variant variant_;
    Rng init_rng_;

    FixedEncoder fixed_;
    TunableEncoder tunable_;
    MultiHeadAttention attn_state_;      // Attention_1: slot over last state
    MultiHeadAttention attn_utterance_;  // Attention_2: slot over turn tokens
    MultiHeadAttention attn_passage_;    // Attention_3: slot over turn sequence
    MultiHeadAttention attn_enhance_;    // Attention_4: feature over last state
    FusionGate turn_gate_;
    FusionGate balance_gate_;
    FusionGate passage_gate_;
    std::vector<TransformerLayer> seq_layers_;
    TensorPtr seq_positions_;
    Linear proj_;
    NormParams proj_norm_;
    Linear stp_wc_;
    Linear stp_wp_;
    std::map<std::string, TensorPtr> candidate_rows_;
};

/// Incremental forward pass over one dialogue on one tape. Turn t consumes
/// the caller-chosen previous state (gold, predicted, or sampled), so both
/// teacher forcing and scheduled sampling drive the same code path. Prefix
/// turn vectors are cached; the turn-sequence encoder is re-run from scratch
/// each turn over the cached prefix.
class DialoguePass {
public:
    DialoguePass(Model& model, Tape* tape, const Dialogue& dialogue, bool training, Rng& rng)
        : model_(model), tape_(tape), dialogue_(dialogue), training_(training), rng_(rng) {
        const auto n = model_.ontology_.slots.size();
        c_seq_.resize(n);
        m_seq_.resize(n);
    }

    int turns_done() const { return static_cast<int>(outputs_.size()); }
    int turns_total() const { return static_cast<int>(dialogue_.turns.size()); }
    const std::vector<TurnCore>& outputs() const { return outputs_; }
    const std::vector<GateTraceRecord>& traces() const { return traces_; }

    /// Compute f_t^s for every slot at the next turn, feeding `prev_state`
    /// as the last dialogue state.
    const TurnCore& run_turn(const State& prev_state) {
        const int t = turns_done();
        if (t >= turns_total())
            throw ValidationError("dialogue " + dialogue_.id + " has no turn " +
                                  std::to_string(t + 1));
        if (t == 0)
            for (const auto& [slot, value] : prev_state)
                if (value != kNone)
                    throw ValidationError("first-turn previous state must be all none (slot " +
                                          slot + ")");

        const auto& ont = model_.ontology_;
        const auto& turn = dialogue_.turns[static_cast<std::size_t>(t)];
        auto h_tokens = model_.tunable_.encode_utterance(
            tape_, turn.system, turn.user, model_.cfg_.dropout, training_, rng_);
        auto h_state = model_.fixed_.encode_last_state(ont, prev_state);

        TurnCore core;
        for (std::size_t s = 0; s < ont.slots.size(); ++s) {
            const auto& slot = ont.slots[s];
            auto h_slot = model_.fixed_.encode_slot(slot);

            auto c = model_.attn_utterance_.forward(tape_, h_slot, h_tokens, h_tokens).out;
            c_seq_[s].push_back(c);

            TensorPtr m = c;
            const Variant v = model_.variant_;
            if (v == Variant::kComparativeNoGate) {
                // Attention-only merge: the state summary becomes the query
                // for a second pass over the turn tokens.
                auto l = model_.attn_state_.forward(tape_, h_slot, h_state, h_state).out;
                m = model_.attn_utterance_.forward(tape_, l, h_tokens, h_tokens).out;
            } else if (variant_has_turn_gate(v)) {
                if (model_.bypass_turn_gate) {
                    m = c;
                } else {
                    auto l = model_.attn_state_.forward(tape_, h_slot, h_state, h_state).out;
                    auto [fused, g] = model_.turn_gate_.fuse(tape_, c, l, /*gate_on_first=*/false);
                    m = fused;
                    record(t, slot, "turn", g);
                }
            }
            m_seq_[s].push_back(m);

            // Sequence input: every prefix turn vector plus the current one.
            std::vector<TensorPtr> seq;
            if (v == Variant::kComparativeSingle) {
                for (int k = 0; k < t; ++k) seq.push_back(c_seq_[s][static_cast<std::size_t>(k)]);
                seq.push_back(m);
            } else {
                seq = m_seq_[s];
            }
            auto x = concat_rows(tape_, seq);
            std::vector<int> pos(seq.size());
            for (std::size_t i = 0; i < seq.size(); ++i) pos[i] = static_cast<int>(i);
            x = add(tape_, x, gather_rows(tape_, model_.seq_positions_, pos));
            for (const auto& layer : model_.seq_layers_)
                x = layer.forward(tape_, x, model_.cfg_.dropout, training_, rng_);

            auto m_pl = model_.attn_passage_.forward(tape_, h_slot, x, x).out;
            auto [f_pl, g_bal] =
                model_.balance_gate_.fuse(tape_, m, m_pl, /*gate_on_first=*/true);
            if (v != Variant::kBase) record(t, slot, "balance", g_bal);

            TensorPtr f = f_pl;
            if (variant_has_passage_gate(v) && !model_.bypass_passage_gate) {
                auto f_enh = model_.attn_enhance_.forward(tape_, f_pl, h_state, h_state).out;
                auto [fused, g_pl] =
                    model_.passage_gate_.fuse(tape_, f_pl, f_enh, /*gate_on_first=*/false);
                f = fused;
                record(t, slot, "passage", g_pl);
            }
            core.f.push_back(f);
        }
        outputs_.push_back(std::move(core));
        return outputs_.back();
    }

private:
    void record(int t, const std::string& slot, const char* gate, const TensorPtr& g) {
        double mean = 0;
        for (double v : g->data) mean += v;
        mean /= static_cast<double>(g->data.size());
        traces_.push_back(GateTraceRecord{dialogue_.id, t + 1, slot, gate, mean});
    }

    Model& model_;
    Tape* tape_;
    const Dialogue& dialogue_;
    bool training_;
    Rng& rng_;
    std::vector<TurnCore> outputs_;
    std::vector<GateTraceRecord> traces_;
    std::vector<std::vector<TensorPtr>> c_seq_;  // [slot][turn]
    std::vector<std::vector<TensorPtr>> m_seq_;  // [slot][turn]
};

struct DialogueForward {
    std::vector<TurnCore> cores;
    std::vector<GateTraceRecord> traces;
};

/// Whole-dialogue forward with externally fixed previous states; entry t of
/// `prev_states` is the state BEFORE turn t (entry 0 must be all none).
inline DialogueForward forward_dialogue(Model& model, Tape* tape, const Dialogue& dialogue,
                                        const std::vector<State>& prev_states, bool training,
                                        Rng& rng) {
    if (prev_states.size() != dialogue.turns.size())
        throw ValidationError("dialogue " + dialogue.id + ": got " +
                              std::to_string(prev_states.size()) + " previous states for " +
                              std::to_string(dialogue.turns.size()) + " turns");
    DialoguePass pass(model, tape, dialogue, training, rng);
    for (const auto& st : prev_states) pass.run_turn(st);
    return DialogueForward{pass.outputs(), pass.traces()};
}

}  // namespace dstfuse
