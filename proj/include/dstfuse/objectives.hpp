#pragma once

#include <string>
#include <vector>

#include "dstfuse/model.hpp"

namespace dstfuse {

enum class DecodeMode { kArgmax, kGated };

inline DecodeMode parse_decode_mode(const std::string& name) {
    if (name == "argmax") return DecodeMode::kArgmax;
    if (name == "gated") return DecodeMode::kGated;
    throw ConfigError("unknown decode mode: " + name);
}

/// o_t^s = LayerNorm(Linear(Dropout(f_t^s))).
inline TensorPtr project_feature(Tape* tape, const Model& model, const TensorPtr& f,
                                 bool training, Rng& rng) {
    auto x = dropout(tape, f, model.config().dropout, training, rng);
    return model.proj_norm().forward(tape, model.proj().forward(tape, x));
}

/// p(v) = softmax over candidates of the negated Euclidean distance; the
/// nearest candidate takes the highest probability.
inline TensorPtr value_distribution(Tape* tape, const TensorPtr& o, const TensorPtr& candidates) {
    return softmax(tape, distance_scores(tape, o, candidates), 1);
}

/// Per-turn classifier outputs for every slot, in canonical slot order.
struct TurnHeads {
    std::vector<TensorPtr> value_probs;  // [1 x |V_s|+1] per slot
    std::vector<TensorPtr> stp_probs;    // [1 x 1] per slot, strictly in (0,1)
    std::vector<TensorPtr> stp_ctx;      // [1 x d] per slot, tanh-bounded
};

/// Value distribution and state-transition probability for one turn's core
/// features. `prev` supplies c_{t-1} for the transition head; at the first
/// turn it is null and a zero vector stands in.
inline TurnHeads compute_heads(Tape* tape, const Model& model, const TurnCore& core,
                               const TurnHeads* prev, bool training, Rng& rng) {
    const auto& ont = model.ontology();
    if (core.f.size() != ont.slots.size())
        throw DimensionError("turn core does not cover every slot");
    TurnHeads out;
    for (std::size_t s = 0; s < ont.slots.size(); ++s) {
        auto o = project_feature(tape, model, core.f[s], training, rng);
        out.value_probs.push_back(value_distribution(tape, o, model.candidate_matrix(ont.slots[s])));
        auto c = tanh_op(tape, model.stp_wc().forward(tape, core.f[s]));
        TensorPtr c_prev = prev ? prev->stp_ctx[s] : zeros({1, model.config().d});
        out.stp_ctx.push_back(c);
        out.stp_probs.push_back(
            sigmoid(tape, model.stp_wp().forward(tape, concat_cols(tape, {c, c_prev}))));
    }
    return out;
}

/// Argmax mode takes each slot's most probable value; gated mode only
/// updates a slot when its transition head says so, otherwise the previous
/// value is kept.
inline State decode_state(const Model& model, const TurnHeads& heads, const State& prev,
                          DecodeMode mode) {
    const auto& ont = model.ontology();
    State out;
    for (std::size_t s = 0; s < ont.slots.size(); ++s) {
        const auto& slot = ont.slots[s];
        if (mode == DecodeMode::kGated && heads.stp_probs[s]->data[0] < 0.5) {
            out[slot] = prev.at(slot);
            continue;
        }
        const auto& p = heads.value_probs[s]->data;
        std::size_t best = 0;
        for (std::size_t i = 1; i < p.size(); ++i)
            if (p[i] > p[best]) best = i;
        out[slot] = ont.candidates(slot)[best];
    }
    return out;
}

/// Sum over slots of -log p(gold value) for one turn.
inline TensorPtr dst_turn_loss(Tape* tape, const Model& model, const TurnHeads& heads,
                               const State& gold) {
    const auto& ont = model.ontology();
    std::vector<TensorPtr> terms;
    for (std::size_t s = 0; s < ont.slots.size(); ++s) {
        const auto& slot = ont.slots[s];
        auto it = gold.find(slot);
        if (it == gold.end()) throw ValidationError("gold state is missing slot " + slot);
        const int idx = ont.value_index(slot, it->second);
        terms.push_back(affine(tape, pick(tape, log_op(tape, heads.value_probs[s]), idx), -1.0, 0.0));
    }
    return sum_scalars(tape, terms);
}

/// Transition label: 1 iff the gold value changed versus the previous gold
/// state (the state before turn 1 is all none).
inline int transition_label(const State& gold, const State& gold_prev, const std::string& slot) {
    return gold.at(slot) != gold_prev.at(slot) ? 1 : 0;
}

/// Full binary cross-entropy over the per-slot update probabilities.
inline TensorPtr stp_turn_loss(Tape* tape, const Model& model, const TurnHeads& heads,
                               const State& gold, const State& gold_prev) {
    const auto& ont = model.ontology();
    std::vector<TensorPtr> terms;
    for (std::size_t s = 0; s < ont.slots.size(); ++s) {
        const auto& p = heads.stp_probs[s];
        if (transition_label(gold, gold_prev, ont.slots[s]))
            terms.push_back(affine(tape, log_op(tape, p), -1.0, 0.0));
        else
            terms.push_back(affine(tape, log_op(tape, affine(tape, p, -1.0, 1.0)), -1.0, 0.0));
    }
    return sum_scalars(tape, terms);
}

struct DialogueLoss {
    TensorPtr dst, stp, joint;
    std::vector<TurnHeads> heads;  // per turn, for decoding and inspection
};

/// Forward a whole dialogue with fixed previous states and assemble the
/// joint objective: L_joint = L_dst + L_stp, both summed over turns and
/// slots.
inline DialogueLoss dialogue_loss(Model& model, Tape* tape, const Dialogue& dialogue,
                                  const std::vector<State>& prev_states, bool training,
                                  Rng& rng) {
    auto fwd = forward_dialogue(model, tape, dialogue, prev_states, training, rng);
    DialogueLoss out;
    out.heads.reserve(dialogue.turns.size());  // prev_heads points into this vector
    std::vector<TensorPtr> dst_terms, stp_terms;
    const TurnHeads* prev_heads = nullptr;
    State gold_prev = all_none_state(model.ontology());
    for (std::size_t t = 0; t < dialogue.turns.size(); ++t) {
        out.heads.push_back(
            compute_heads(tape, model, fwd.cores[t], prev_heads, training, rng));
        prev_heads = &out.heads.back();
        const auto& gold = dialogue.turns[t].state;
        dst_terms.push_back(dst_turn_loss(tape, model, out.heads.back(), gold));
        stp_terms.push_back(stp_turn_loss(tape, model, out.heads.back(), gold, gold_prev));
        gold_prev = gold;
    }
    out.dst = sum_scalars(tape, dst_terms);
    out.stp = sum_scalars(tape, stp_terms);
    out.joint = sum_scalars(tape, {out.dst, out.stp});
    return out;
}

}  // namespace dstfuse
