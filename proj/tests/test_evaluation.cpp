#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dstfuse/evaluation.hpp"
#include "fixtures.hpp"

using namespace dstfuse;
using fixtures::micro_config;
using fixtures::micro_dialogue;
using fixtures::micro_ontology;
using fixtures::micro_vocab;
using fixtures::small_corpus;

namespace {

/// Two 5-turn dialogues on the micro ontology; the tail turns keep the state.
std::vector<Dialogue> counting_dialogues(const Ontology& ont) {
    std::vector<Dialogue> out;
    for (int k = 1; k <= 2; ++k) {
        Dialogue d = micro_dialogue(ont);
        d.id = "micro-" + std::to_string(k);
        while (d.turns.size() < 5) {
            Turn t;
            t.system = "anything else i can help with";
            t.user = "no that is all for now";
            t.state = d.turns.back().state;
            d.turns.push_back(t);
        }
        validate_dialogue(d, ont);
        out.push_back(std::move(d));
    }
    return out;
}

Predictions gold_predictions(const std::vector<Dialogue>& dialogues) {
    Predictions preds;
    for (const auto& d : dialogues) {
        std::vector<State> states;
        for (const auto& t : d.turns) states.push_back(t.state);
        preds[d.id] = std::move(states);
    }
    return preds;
}

std::vector<Dialogue> all_dialogues(const CorpusSplit& c) {
    std::vector<Dialogue> out = c.train;
    out.insert(out.end(), c.dev.begin(), c.dev.end());
    out.insert(out.end(), c.test.begin(), c.test.end());
    return out;
}

Model micro_model(Variant v, std::uint64_t seed = 7) {
    auto ont = micro_ontology();
    auto dialogues = std::vector<Dialogue>{micro_dialogue(ont)};
    auto vocab = micro_vocab(ont, dialogues);
    return Model(ont, vocab, micro_config(), v, seed);
}

}  // namespace

TEST_CASE("evaluation mode names round trip") {
    CHECK(parse_eval_mode("normal") == EvalMode::kNormal);
    CHECK(parse_eval_mode("teacher_forcing") == EvalMode::kTeacherForcing);
    CHECK(parse_eval_mode("tf") == EvalMode::kTeacherForcing);
    CHECK(eval_mode_name(EvalMode::kNormal) == "normal");
    CHECK(eval_mode_name(EvalMode::kTeacherForcing) == "teacher_forcing");
    CHECK_THROWS_AS(parse_eval_mode("free_running"), ConfigError);
}

TEST_CASE("oracle predictions score perfect joint accuracy") {
    auto corpus = small_corpus(24);
    auto dialogues = all_dialogues(corpus);
    auto oracle = oracle_predictor();
    Predictions preds;
    for (const auto& d : dialogues) preds[d.id] = oracle(d);
    auto report = score_joint_accuracy(preds, dialogues, corpus.ontology, "normal", "unit");
    CHECK(report.joint_accuracy == 1.0);
    CHECK(report.turns > 0);
    REQUIRE(report.per_slot.size() == corpus.ontology.slots.size());
    for (const auto& [slot, acc] : report.per_slot) CHECK(acc == 1.0);
    CHECK(report.mode == "normal");
    CHECK(report.corpus_id == "unit");
}

TEST_CASE("constant-none predictions miss informed turns") {
    auto corpus = small_corpus(24);
    auto dialogues = all_dialogues(corpus);
    auto none = constant_none_predictor(corpus.ontology);
    Predictions preds;
    for (const auto& d : dialogues) preds[d.id] = none(d);
    auto report = score_joint_accuracy(preds, dialogues, corpus.ontology, "normal");
    CHECK(report.joint_accuracy < 0.5);
}

TEST_CASE("joint accuracy counts exactly the all-slots-correct turns") {
    auto ont = micro_ontology();
    auto dialogues = counting_dialogues(ont);
    auto preds = gold_predictions(dialogues);
    preds["micro-2"][2]["restaurant-food"] = "indian";  // gold is chinese

    auto report = score_joint_accuracy(preds, dialogues, ont, "normal");
    CHECK(report.turns == 10);
    CHECK(report.joint_accuracy == Catch::Approx(0.9));
    CHECK(report.per_slot.at("restaurant-food") == Catch::Approx(0.9));
    CHECK(report.per_slot.at("restaurant-name") == 1.0);
    CHECK(report.per_slot.at("taxi-destination") == 1.0);
}

TEST_CASE("value comparison canonicalizes case and whitespace") {
    CHECK(detail::values_match("  CHINESE ", "chinese"));
    CHECK(detail::values_match("tang", "Tang"));
    CHECK_FALSE(detail::values_match("tang", "golden_wok"));

    auto ont = micro_ontology();
    auto dialogues = counting_dialogues(ont);
    auto preds = gold_predictions(dialogues);
    preds["micro-1"][0]["restaurant-food"] = "  Chinese ";
    auto report = score_joint_accuracy(preds, dialogues, ont, "normal");
    CHECK(report.joint_accuracy == 1.0);
}

TEST_CASE("prediction coverage gaps are rejected with the offending location") {
    auto ont = micro_ontology();
    auto dialogues = counting_dialogues(ont);

    SECTION("missing dialogue") {
        auto preds = gold_predictions(dialogues);
        preds.erase("micro-2");
        CHECK_THROWS_WITH(score_joint_accuracy(preds, dialogues, ont, "normal"),
                          Catch::Matchers::ContainsSubstring("micro-2"));
    }
    SECTION("turn count mismatch") {
        auto preds = gold_predictions(dialogues);
        preds["micro-1"].pop_back();
        CHECK_THROWS_AS(score_joint_accuracy(preds, dialogues, ont, "normal"), ValidationError);
    }
    SECTION("missing slot") {
        auto preds = gold_predictions(dialogues);
        preds["micro-1"][3].erase("taxi-destination");
        CHECK_THROWS_WITH(score_joint_accuracy(preds, dialogues, ont, "normal"),
                          Catch::Matchers::ContainsSubstring("taxi-destination"));
    }
    SECTION("empty gold set") {
        CHECK_THROWS_AS(score_joint_accuracy({}, {}, ont, "normal"), ValidationError);
    }
}

TEST_CASE("model evaluation produces covering, in-ontology predictions") {
    auto model = micro_model(Variant::kDualLevel);
    auto ont = model.ontology();
    auto dialogues = counting_dialogues(ont);

    for (auto mode : {EvalMode::kNormal, EvalMode::kTeacherForcing}) {
        auto states = predict_states(model, dialogues[0], mode, DecodeMode::kArgmax);
        REQUIRE(states.size() == dialogues[0].turns.size());
        for (const auto& st : states) {
            REQUIRE(st.size() == ont.slots.size());
            for (const auto& [slot, value] : st) {
                const auto& cands = ont.candidates(slot);
                CHECK(std::find(cands.begin(), cands.end(), value) != cands.end());
            }
        }
    }
    auto report = evaluate_joint(model, dialogues, EvalMode::kNormal, DecodeMode::kArgmax, "unit");
    CHECK(report.joint_accuracy >= 0.0);
    CHECK(report.joint_accuracy <= 1.0);
    CHECK(report.variant == "dual_level");
}

TEST_CASE("teacher forcing and normal mode agree on the first turn") {
    auto model = micro_model(Variant::kDualLevel);
    auto dialogues = counting_dialogues(model.ontology());
    auto normal = predict_states(model, dialogues[0], EvalMode::kNormal, DecodeMode::kArgmax);
    auto forced = predict_states(model, dialogues[0], EvalMode::kTeacherForcing,
                                 DecodeMode::kArgmax);
    // Both feed the all-none state into turn 1, so that prediction is shared.
    CHECK(normal[0] == forced[0]);
}

TEST_CASE("deleted-value probe anchors") {
    auto corpus = small_corpus(20, 11, /*deleted=*/1.0, /*related=*/0.0);
    auto dialogues = all_dialogues(corpus);
    const auto& ont = corpus.ontology;

    auto oracle_report = deleted_value_probe(oracle_predictor(), dialogues, ont);
    CHECK(oracle_report.rate == 1.0);
    CHECK(oracle_report.instances >= dialogues.size());
    CHECK_FALSE(oracle_report.empty);
    CHECK(oracle_report.successes == oracle_report.instances);

    auto none_report = deleted_value_probe(constant_none_predictor(ont), dialogues, ont);
    CHECK(none_report.rate == 0.0);
    CHECK(none_report.instances == oracle_report.instances);

    // A sticky predictor follows gold but never reverts a slot to none:
    // it fails every instance from the other direction.
    StatePredictor sticky = [&](const Dialogue& d) {
        std::vector<State> out;
        State prev = all_none_state(ont);
        for (const auto& t : d.turns) {
            State st = t.state;
            for (const auto& slot : ont.slots)
                if (st.at(slot) == kNone && prev.at(slot) != kNone) st[slot] = prev.at(slot);
            prev = st;
            out.push_back(st);
        }
        return out;
    };
    auto sticky_report = deleted_value_probe(sticky, dialogues, ont);
    CHECK(sticky_report.rate == 0.0);

    for (const auto& inst : oracle_report.log) {
        CHECK(inst.turn >= 2);  // deletions cannot happen at turn 1
        CHECK(inst.expected == kNone);
    }
}

TEST_CASE("related-slot probe anchors") {
    auto corpus = small_corpus(20, 13, /*deleted=*/0.0, /*related=*/1.0);
    auto dialogues = all_dialogues(corpus);
    const auto& ont = corpus.ontology;

    auto oracle_report = related_slot_probe(oracle_predictor(), dialogues, ont);
    CHECK(oracle_report.rate == 1.0);
    CHECK(oracle_report.instances >= dialogues.size());

    auto none_report = related_slot_probe(constant_none_predictor(ont), dialogues, ont);
    CHECK(none_report.rate == 0.0);
    CHECK(none_report.instances == oracle_report.instances);

    std::set<std::string> targets;
    for (const auto& [src, tgt] : ont.links) targets.insert(tgt);
    for (const auto& inst : oracle_report.log) {
        CHECK(inst.expected != kNone);
        CHECK(targets.count(inst.slot) == 1);
        // The carried value is never spoken in the phenomenon turn.
        const Dialogue* d = nullptr;
        for (const auto& cand : dialogues)
            if (cand.id == inst.dialogue_id) d = &cand;
        REQUIRE(d != nullptr);
        auto tokens = tokenize(d->turns[static_cast<std::size_t>(inst.turn - 1)].user);
        CHECK(std::find(tokens.begin(), tokens.end(), inst.expected) == tokens.end());
    }
}

TEST_CASE("probes reject phenomenon-free corpora") {
    auto corpus = small_corpus(10, 17, /*deleted=*/0.0, /*related=*/0.0);
    auto dialogues = all_dialogues(corpus);
    const auto& ont = corpus.ontology;
    CHECK_THROWS_AS(deleted_value_probe(oracle_predictor(), dialogues, ont), ValidationError);
    CHECK_THROWS_AS(related_slot_probe(oracle_predictor(), dialogues, ont), ValidationError);
}

TEST_CASE("gate trace export writes one row per turn, slot and gate") {
    auto model = micro_model(Variant::kDualLevel);
    auto dialogues = counting_dialogues(model.ontology());

    auto traces = collect_gate_traces(model, dialogues);
    // 2 dialogues x 5 turns x 3 slots x 3 gates in the dual variant
    REQUIRE(traces.size() == 2 * 5 * 3 * 3);
    for (const auto& t : traces) {
        CHECK(t.weight > 0.0);
        CHECK(t.weight < 1.0);
        CHECK((t.gate == "turn" || t.gate == "balance" || t.gate == "passage"));
    }

    auto path = std::filesystem::temp_directory_path() / "dstfuse_traces_test.csv";
    write_gate_csv(traces, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "dialogue_id,turn,slot,gate_name,weight");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 4);
    }
    CHECK(rows == traces.size());
    std::filesystem::remove(path);
}

TEST_CASE("gate trace export refuses the gateless baseline") {
    auto model = micro_model(Variant::kBase);
    auto dialogues = counting_dialogues(model.ontology());
    CHECK_THROWS_WITH(collect_gate_traces(model, dialogues),
                      Catch::Matchers::ContainsSubstring("no gates in variant"));
}

TEST_CASE("parallel prediction matches sequential prediction") {
    auto corpus = small_corpus(16, 19);
    auto dialogues = all_dialogues(corpus);
    auto vocab = Vocabulary::build(corpus);
    Model model(corpus.ontology, vocab, micro_config(), Variant::kDualLevel, 3);

    auto seq = predict_corpus(model, dialogues, EvalMode::kNormal, DecodeMode::kArgmax, 1);
    auto par = predict_corpus(model, dialogues, EvalMode::kNormal, DecodeMode::kArgmax, 4);
    CHECK(seq == par);

    auto report_seq = evaluate_joint(model, dialogues, EvalMode::kNormal, DecodeMode::kArgmax,
                                     "unit", 1);
    auto report_par = evaluate_joint(model, dialogues, EvalMode::kNormal, DecodeMode::kArgmax,
                                     "unit", 4);
    CHECK(report_seq.joint_accuracy == report_par.joint_accuracy);
    CHECK(report_seq.per_slot == report_par.per_slot);
}

TEST_CASE("parallel driver propagates worker exceptions") {
    CHECK_THROWS_AS(detail::parallel_over(64, 4,
                                          [](std::size_t i) {
                                              if (i == 33) throw ValidationError("boom");
                                          }),
                    ValidationError);
    std::atomic<int> hits{0};
    detail::parallel_over(100, 8, [&](std::size_t) { hits.fetch_add(1); });
    CHECK(hits.load() == 100);
}

TEST_CASE("report serialization carries the headline numbers") {
    auto ont = micro_ontology();
    auto dialogues = counting_dialogues(ont);
    auto report = score_joint_accuracy(gold_predictions(dialogues), dialogues, ont, "normal",
                                       "unit", "dual_level");
    auto j = report.to_json();
    CHECK(j.at("joint_accuracy").get<double>() == 1.0);
    CHECK(j.at("mode").get<std::string>() == "normal");
    CHECK(j.at("variant").get<std::string>() == "dual_level");
    CHECK(j.at("per_slot").size() == 3);

    auto corpus = small_corpus(10, 23, 1.0, 0.0);
    auto probe = deleted_value_probe(oracle_predictor(), all_dialogues(corpus), corpus.ontology);
    auto pj = probe.to_json(/*include_log=*/true);
    CHECK(pj.at("probe").get<std::string>() == "deleted_value");
    CHECK(pj.at("rate").get<double>() == 1.0);
    CHECK(pj.at("log").size() == probe.instances);
    CHECK_FALSE(probe.to_json().contains("log"));
}
