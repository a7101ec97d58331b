#pragma once

// Small shared setups for the trainer / evaluation / CLI suites: a 3-slot
// hand ontology with one cross-domain link, a 2-turn dialogue exercising it,
// and a compact model configuration that keeps forward passes fast.

#include <cstring>

#include "dstfuse/corpus.hpp"
#include "dstfuse/model.hpp"

namespace fixtures {

inline dstfuse::Ontology micro_ontology() {
    dstfuse::Ontology o;
    o.domains = {"restaurant", "taxi"};
    o.slots = {"restaurant-food", "restaurant-name", "taxi-destination"};
    o.values["restaurant-food"] = {"none", "chinese", "indian", "thai"};
    o.values["restaurant-name"] = {"none", "tang", "golden_wok", "rice_house"};
    o.values["taxi-destination"] = {"none", "tang", "golden_wok", "rice_house"};
    o.links = {{"restaurant-name", "taxi-destination"}};
    o.validate();
    return o;
}

inline dstfuse::Dialogue micro_dialogue(const dstfuse::Ontology& ont) {
    dstfuse::Dialogue d;
    d.id = "micro-1";
    dstfuse::Turn t1;
    t1.system = "";
    t1.user = "i want the restaurant food to be chinese";
    t1.state = dstfuse::all_none_state(ont);
    t1.state["restaurant-food"] = "chinese";
    dstfuse::Turn t2;
    t2.system = "i can offer the tang for the restaurant shall i book it";
    t2.user = "yes and i also need a taxi there";
    t2.state = t1.state;
    t2.state["restaurant-name"] = "tang";
    t2.state["taxi-destination"] = "tang";
    d.turns = {t1, t2};
    dstfuse::validate_dialogue(d, ont);
    return d;
}

inline dstfuse::Vocabulary micro_vocab(const dstfuse::Ontology& ont,
                                       const std::vector<dstfuse::Dialogue>& dialogues) {
    dstfuse::CorpusSplit c;
    c.ontology = ont;
    c.train = dialogues;
    return dstfuse::Vocabulary::build(c);
}

inline dstfuse::ModelConfig micro_config(double dropout = 0.0) {
    dstfuse::ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.utt_layers = 1;
    cfg.seq_layers = 1;
    cfg.dff = 32;
    cfg.max_seq_len = 32;
    cfg.dropout = dropout;
    return cfg;
}

/// A generated corpus small enough for unit tests: 3 domains (8 slots),
/// 4 candidate values per slot.
inline dstfuse::CorpusSplit small_corpus(int count = 30, std::uint64_t seed = 5,
                                         double deleted = 0.25, double related = 0.25) {
    dstfuse::CorpusSpec spec;
    spec.ontology.n_domains = 3;
    spec.ontology.values_per_slot = 4;
    spec.ontology.n_links = 2;
    spec.count = count;
    spec.mix.deleted_value = deleted;
    spec.mix.related_slot = related;
    spec.min_train_phenomenon_frac = 0.0;
    return dstfuse::generate_corpus(spec, seed);
}

inline bool same_bits(const dstfuse::TensorPtr& a, const dstfuse::TensorPtr& b) {
    if (a->shape != b->shape) return false;
    return std::memcmp(a->data.data(), b->data.data(), a->data.size() * sizeof(double)) == 0;
}

}  // namespace fixtures
