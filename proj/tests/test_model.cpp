#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <set>

#include "dstfuse/model.hpp"
#include "dstfuse/objectives.hpp"

using namespace dstfuse;

namespace {

Ontology micro_ontology() {
    Ontology o;
    o.domains = {"restaurant", "taxi"};
    o.slots = {"restaurant-food", "restaurant-name", "taxi-destination"};
    o.values["restaurant-food"] = {"none", "chinese", "indian", "thai"};
    o.values["restaurant-name"] = {"none", "tang", "golden_wok", "rice_house"};
    o.values["taxi-destination"] = {"none", "tang", "golden_wok", "rice_house"};
    o.links = {{"restaurant-name", "taxi-destination"}};
    o.validate();
    return o;
}

Dialogue micro_dialogue(const Ontology& ont) {
    Dialogue d;
    d.id = "micro-1";
    Turn t1;
    t1.system = "";
    t1.user = "i want the restaurant food to be chinese";
    t1.state = all_none_state(ont);
    t1.state["restaurant-food"] = "chinese";
    Turn t2;
    t2.system = "i can offer the tang for the restaurant shall i book it";
    t2.user = "yes and i also need a taxi there";
    t2.state = t1.state;
    t2.state["restaurant-name"] = "tang";
    t2.state["taxi-destination"] = "tang";
    d.turns = {t1, t2};
    validate_dialogue(d, ont);
    return d;
}

Vocabulary micro_vocab(const Ontology& ont, const Dialogue& d) {
    CorpusSplit c;
    c.ontology = ont;
    c.train = {d};
    return Vocabulary::build(c);
}

ModelConfig micro_config(double dropout = 0.0) {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.utt_layers = 1;
    cfg.seq_layers = 1;
    cfg.dff = 32;
    cfg.max_seq_len = 32;
    cfg.dropout = dropout;
    return cfg;
}

std::vector<State> gold_prev_states(const Ontology& ont, const Dialogue& d) {
    std::vector<State> prev = {all_none_state(ont)};
    for (std::size_t t = 0; t + 1 < d.turns.size(); ++t) prev.push_back(d.turns[t].state);
    return prev;
}

bool same_bits(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) return false;
    return std::memcmp(a->data.data(), b->data.data(), a->data.size() * sizeof(double)) == 0;
}

bool all_finite(const TensorPtr& t) {
    for (double v : t->data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

TEST_CASE("variant names round-trip and aliases parse") {
    for (Variant v : {Variant::kBase, Variant::kTurnLevel, Variant::kPassageLevel,
                      Variant::kDualLevel, Variant::kComparativeNoGate,
                      Variant::kComparativeSingle})
        CHECK(parse_variant(variant_name(v)) == v);
    CHECK(parse_variant("turn") == Variant::kTurnLevel);
    CHECK(parse_variant("passage") == Variant::kPassageLevel);
    CHECK(parse_variant("dual") == Variant::kDualLevel);
    CHECK(parse_variant("no-gate") == Variant::kComparativeNoGate);
    CHECK(parse_variant("single") == Variant::kComparativeSingle);
    CHECK_THROWS_AS(parse_variant("bert"), ConfigError);
}

TEST_CASE("every variant produces finite slot features") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    auto prev = gold_prev_states(ont, dia);

    for (Variant v : {Variant::kBase, Variant::kTurnLevel, Variant::kPassageLevel,
                      Variant::kDualLevel, Variant::kComparativeNoGate,
                      Variant::kComparativeSingle}) {
        Model model(ont, vocab, micro_config(), v, 11);
        Rng rng(5);
        auto fwd = forward_dialogue(model, nullptr, dia, prev, /*training=*/false, rng);
        REQUIRE(fwd.cores.size() == 2);
        for (const auto& core : fwd.cores) {
            REQUIRE(core.f.size() == ont.slots.size());
            for (const auto& f : core.f) {
                CHECK(f->shape == std::vector<int>{1, 16});
                CHECK(all_finite(f));
            }
        }
    }
}

TEST_CASE("gate trace counts follow the variant") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    auto prev = gold_prev_states(ont, dia);
    const std::size_t cells = dia.turns.size() * ont.slots.size();  // 2 x 3

    struct Expect {
        Variant v;
        std::set<std::string> gates;
    };
    const std::vector<Expect> table = {
        {Variant::kBase, {}},
        {Variant::kTurnLevel, {"turn", "balance"}},
        {Variant::kPassageLevel, {"balance", "passage"}},
        {Variant::kDualLevel, {"turn", "balance", "passage"}},
        {Variant::kComparativeNoGate, {"balance"}},
        {Variant::kComparativeSingle, {"turn", "balance"}},
    };
    for (const auto& expect : table) {
        Model model(ont, vocab, micro_config(), expect.v, 11);
        Rng rng(5);
        auto fwd = forward_dialogue(model, nullptr, dia, prev, false, rng);
        CHECK(fwd.traces.size() == cells * expect.gates.size());
        std::set<std::string> seen;
        for (const auto& tr : fwd.traces) {
            seen.insert(tr.gate);
            CHECK(tr.dialogue_id == dia.id);
            CHECK((tr.turn == 1 || tr.turn == 2));
            CHECK(ont.has_slot(tr.slot));
            CHECK(tr.weight > 0.0);
            CHECK(tr.weight < 1.0);
        }
        CHECK(seen == expect.gates);
        // Each (turn, slot, gate) cell appears exactly once.
        std::set<std::string> keys;
        for (const auto& tr : fwd.traces)
            keys.insert(std::to_string(tr.turn) + "|" + tr.slot + "|" + tr.gate);
        CHECK(keys.size() == fwd.traces.size());
    }
}

TEST_CASE("fusion gates emit convex combinations") {
    Rng rng(31);
    FusionGate gate(8, rng);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> xs(8), ys(8);
        for (auto& v : xs) v = rng.normal(0, 2);
        for (auto& v : ys) v = rng.normal(0, 2);
        auto x = make_tensor({1, 8}, xs);
        auto y = make_tensor({1, 8}, ys);
        auto [fused, g] = gate.fuse(nullptr, x, y, /*gate_on_first=*/true);
        for (int j = 0; j < 8; ++j) {
            CHECK(g->data[j] > 0.0);
            CHECK(g->data[j] < 1.0);
            const double lo = std::min(xs[j], ys[j]);
            const double hi = std::max(xs[j], ys[j]);
            CHECK(fused->data[j] >= lo - 1e-12);
            CHECK(fused->data[j] <= hi + 1e-12);
        }
        // gate_on_first weighs x by g; flipping the flag weighs y instead.
        auto [flipped, g2] = gate.fuse(nullptr, x, y, /*gate_on_first=*/false);
        for (int j = 0; j < 8; ++j) {
            const double expect =
                g->data[j] * ys[j] + (1.0 - g->data[j]) * xs[j];
            CHECK(flipped->data[j] == Catch::Approx(expect).margin(1e-12));
        }
    }
}

TEST_CASE("turn features ignore future turns") {
    auto ont = micro_ontology();
    auto vocab_dia = micro_dialogue(ont);

    Dialogue three = vocab_dia;
    Turn t3;
    t3.system = "is there anything more";
    t3.user = "no thank you that is all";
    t3.state = three.turns.back().state;
    three.turns.push_back(t3);

    Dialogue altered = three;
    altered.turns[2].user = "i want the restaurant food to be thai";
    altered.turns[2].state["restaurant-food"] = "thai";

    auto vocab = micro_vocab(ont, three);
    auto prev3 = gold_prev_states(ont, three);
    auto prev_alt = gold_prev_states(ont, altered);

    for (Variant v : {Variant::kDualLevel, Variant::kComparativeSingle}) {
        Model model(ont, vocab, micro_config(), v, 23);
        Rng r1(5), r2(5);
        auto a = forward_dialogue(model, nullptr, three, prev3, false, r1);
        auto b = forward_dialogue(model, nullptr, altered, prev_alt, false, r2);
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t s = 0; s < ont.slots.size(); ++s)
                CHECK(same_bits(a.cores[t].f[s], b.cores[t].f[s]));
        // The perturbed turn itself must differ, or the check is vacuous.
        bool third_differs = false;
        for (std::size_t s = 0; s < ont.slots.size(); ++s)
            if (!same_bits(a.cores[2].f[s], b.cores[2].f[s])) third_differs = true;
        CHECK(third_differs);
    }
}

TEST_CASE("same seed shares parameters across variants") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);

    Model base(ont, vocab, micro_config(), Variant::kBase, 99);
    Model dual(ont, vocab, micro_config(), Variant::kDualLevel, 99);
    Model other(ont, vocab, micro_config(), Variant::kDualLevel, 100);

    auto pa = base.trainable_params();
    auto pb = dual.trainable_params();
    auto pc = other.trainable_params();
    REQUIRE(pa.size() == pb.size());
    bool any_diff_seed_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(same_bits(pa[i].second, pb[i].second));
        if (!same_bits(pa[i].second, pc[i].second)) any_diff_seed_diff = true;
    }
    CHECK(any_diff_seed_diff);
    CHECK(same_bits(base.fixed().table(), dual.fixed().table()));
    CHECK(same_bits(base.fixed().pool(), dual.fixed().pool()));
}

TEST_CASE("parameter names and tensors are distinct") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    Model model(ont, vocab, micro_config(), Variant::kDualLevel, 7);

    auto params = model.all_tensors();
    std::set<std::string> names;
    std::set<const Tensor*> ptrs;
    for (const auto& [name, t] : params) {
        CHECK(names.insert(name).second);
        CHECK(ptrs.insert(t.get()).second);
    }
    // Frozen tensors ride along for checkpoints but carry no gradient.
    std::size_t frozen = 0;
    for (const auto& [name, t] : params)
        if (!t->requires_grad) {
            ++frozen;
            CHECK(t->grad.empty());
        }
    CHECK(frozen == 2);

    // The four attention blocks must not share weights.
    const auto& a1 = model.attn_state();
    const auto& a4 = model.attn_enhance();
    NamedParams p1, p4;
    a1.collect("a", p1);
    a4.collect("a", p4);
    bool identical = true;
    for (std::size_t i = 0; i < p1.size(); ++i)
        if (!same_bits(p1[i].second, p4[i].second)) identical = false;
    CHECK_FALSE(identical);
}

TEST_CASE("bypassing gates reduces a variant to its ancestor bit for bit") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    auto prev = gold_prev_states(ont, dia);
    const std::uint64_t seed = 1234;

    auto run = [&](Model& m) {
        Rng rng(5);
        return forward_dialogue(m, nullptr, dia, prev, false, rng);
    };
    auto expect_equal = [&](const DialogueForward& a, const DialogueForward& b) {
        for (std::size_t t = 0; t < dia.turns.size(); ++t)
            for (std::size_t s = 0; s < ont.slots.size(); ++s)
                REQUIRE(same_bits(a.cores[t].f[s], b.cores[t].f[s]));
    };

    Model base(ont, vocab, micro_config(), Variant::kBase, seed);
    Model turn(ont, vocab, micro_config(), Variant::kTurnLevel, seed);
    Model dual(ont, vocab, micro_config(), Variant::kDualLevel, seed);

    auto base_out = run(base);
    auto turn_out = run(turn);
    auto dual_out = run(dual);

    SECTION("dual minus the passage gate equals turn level") {
        dual.bypass_passage_gate = true;
        expect_equal(run(dual), turn_out);
    }
    SECTION("dual minus both gates equals base") {
        dual.bypass_turn_gate = true;
        dual.bypass_passage_gate = true;
        expect_equal(run(dual), base_out);
    }
    SECTION("turn level minus the turn gate equals base") {
        turn.bypass_turn_gate = true;
        expect_equal(run(turn), base_out);
    }
    SECTION("without bypasses the variants genuinely differ") {
        bool differ = false;
        for (std::size_t s = 0; s < ont.slots.size(); ++s)
            if (!same_bits(dual_out.cores[1].f[s], base_out.cores[1].f[s])) differ = true;
        CHECK(differ);
    }
}

TEST_CASE("previous-state bookkeeping is validated") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    Model model(ont, vocab, micro_config(), Variant::kDualLevel, 3);
    Rng rng(5);

    std::vector<State> too_few = {all_none_state(ont)};
    CHECK_THROWS_AS(forward_dialogue(model, nullptr, dia, too_few, false, rng),
                    ValidationError);

    State bad_first = all_none_state(ont);
    bad_first["restaurant-food"] = "thai";
    DialoguePass pass(model, nullptr, dia, false, rng);
    CHECK_THROWS_AS(pass.run_turn(bad_first), ValidationError);

    DialoguePass pass2(model, nullptr, dia, false, rng);
    pass2.run_turn(all_none_state(ont));
    pass2.run_turn(dia.turns[0].state);
    CHECK_THROWS_AS(pass2.run_turn(dia.turns[1].state), ValidationError);
}

TEST_CASE("evaluation passes are deterministic, training dropout is not") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    auto prev = gold_prev_states(ont, dia);
    Model model(ont, vocab, micro_config(0.3), Variant::kDualLevel, 17);

    Rng r1(5), r2(99);
    auto a = forward_dialogue(model, nullptr, dia, prev, false, r1);
    auto b = forward_dialogue(model, nullptr, dia, prev, false, r2);
    for (std::size_t s = 0; s < ont.slots.size(); ++s)
        CHECK(same_bits(a.cores[1].f[s], b.cores[1].f[s]));

    Rng r3(5), r4(99);
    Tape t3, t4;
    auto c = forward_dialogue(model, &t3, dia, prev, true, r3);
    auto d = forward_dialogue(model, &t4, dia, prev, true, r4);
    bool differ = false;
    for (std::size_t s = 0; s < ont.slots.size(); ++s)
        if (!same_bits(c.cores[1].f[s], d.cores[1].f[s])) differ = true;
    CHECK(differ);
}

TEST_CASE("gradients reach every trainable component of the dual variant") {
    auto ont = micro_ontology();
    auto dia = micro_dialogue(ont);
    auto vocab = micro_vocab(ont, dia);
    auto prev = gold_prev_states(ont, dia);
    Model model(ont, vocab, micro_config(), Variant::kDualLevel, 29);

    Tape tape;
    Rng rng(5);
    auto loss = dialogue_loss(model, &tape, dia, prev, false, rng);
    REQUIRE(loss.joint->data.size() == 1);
    CHECK(std::isfinite(loss.joint->data[0]));
    model.zero_grad();
    tape.backward(loss.joint);

    for (const auto& [name, p] : model.trainable_params()) {
        double norm = 0;
        for (double g : p->grad) norm += g * g;
        INFO(name);
        CHECK(norm > 0.0);
    }
    CHECK(model.fixed().table()->grad.empty());
    CHECK(model.fixed().pool()->grad.empty());
}
