#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstfuse/errors.hpp"
#include "dstfuse/rng.hpp"

namespace dstfuse {

inline constexpr const char* kNone = "none";
inline constexpr int kSchemaVersion = 1;

/// Multi-domain schema: slot names are "<domain>-<word>" and every slot's
/// candidate list starts with "none". Links mark target slots whose values
/// are carried over from a source slot in another domain.
struct Ontology {
    std::vector<std::string> domains;
    std::vector<std::string> slots;  // canonical order, fixed for a run
    std::map<std::string, std::vector<std::string>> values;
    std::vector<std::pair<std::string, std::string>> links;  // source -> target

    bool has_slot(const std::string& s) const { return values.count(s) != 0; }

    const std::vector<std::string>& candidates(const std::string& slot) const {
        auto it = values.find(slot);
        if (it == values.end()) throw OntologyError("unknown slot: " + slot);
        return it->second;
    }

    int value_index(const std::string& slot, const std::string& value) const {
        const auto& cands = candidates(slot);
        auto it = std::find(cands.begin(), cands.end(), value);
        if (it == cands.end())
            throw OntologyError("value '" + value + "' not a candidate of slot " + slot);
        return static_cast<int>(it - cands.begin());
    }

    static std::string slot_domain(const std::string& slot) {
        auto pos = slot.find('-');
        return pos == std::string::npos ? slot : slot.substr(0, pos);
    }
    static std::string slot_word(const std::string& slot) {
        auto pos = slot.find('-');
        return pos == std::string::npos ? slot : slot.substr(pos + 1);
    }

    void validate() const {
        if (domains.empty()) throw ValidationError("ontology has no domains");
        if (slots.empty()) throw ValidationError("ontology has no slots");
        std::set<std::string> seen;
        for (const auto& s : slots) {
            if (!seen.insert(s).second) throw ValidationError("duplicate slot: " + s);
            if (std::find(domains.begin(), domains.end(), slot_domain(s)) == domains.end())
                throw ValidationError("slot " + s + " names an unknown domain");
            auto it = values.find(s);
            if (it == values.end()) throw ValidationError("slot " + s + " has no value list");
            const auto& vs = it->second;
            if (std::find(vs.begin(), vs.end(), kNone) == vs.end())
                throw ValidationError("slot " + s + " candidate list lacks 'none'");
            std::set<std::string> uniq(vs.begin(), vs.end());
            if (uniq.size() != vs.size())
                throw ValidationError("slot " + s + " has duplicate candidate values");
        }
        if (values.size() != slots.size())
            throw ValidationError("value table lists a slot missing from the slot list");
        for (const auto& [src, tgt] : links) {
            if (!has_slot(src) || !has_slot(tgt))
                throw ValidationError("link references unknown slot " + src + " -> " + tgt);
            if (src == tgt) throw ValidationError("link connects a slot to itself: " + src);
            // Linked slots must share a value space beyond the ubiquitous "none".
            bool overlap = false;
            const auto& tv = candidates(tgt);
            for (const auto& v : candidates(src))
                if (v != kNone && std::find(tv.begin(), tv.end(), v) != tv.end()) {
                    overlap = true;
                    break;
                }
            if (!overlap)
                throw ValidationError("linked slots " + src + " -> " + tgt +
                                      " have disjoint value spaces");
        }
    }
};

using State = std::map<std::string, std::string>;

struct Turn {
    std::string system;
    std::string user;
    State state;  // full gold state after this turn
};

inline constexpr const char* kTagDeleted = "deleted_value";
inline constexpr const char* kTagRelated = "related_slot";

struct Dialogue {
    std::string id;
    std::set<std::string> tags;
    std::vector<Turn> turns;
};

struct CorpusSplit {
    Ontology ontology;
    std::vector<Dialogue> train, dev, test;
    std::uint64_t seed = 0;
};

inline State all_none_state(const Ontology& ont) {
    State s;
    for (const auto& slot : ont.slots) s[slot] = kNone;
    return s;
}

/// Lowercased whitespace tokenization; the corpus keeps every value a single
/// underscore-joined token so this is lossless.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n') {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void validate_dialogue(const Dialogue& d, const Ontology& ont) {
    if (d.id.empty()) throw ValidationError("dialogue with empty id");
    if (d.turns.empty()) throw ValidationError("dialogue " + d.id + " has no turns");
    for (const auto& tag : d.tags)
        if (tag != kTagDeleted && tag != kTagRelated)
            throw ValidationError("dialogue " + d.id + " carries unknown tag: " + tag);

    for (std::size_t t = 0; t < d.turns.size(); ++t) {
        const auto& turn = d.turns[t];
        if (turn.system.empty() && turn.user.empty())
            throw ValidationError("dialogue " + d.id + " turn " + std::to_string(t + 1) +
                                  " has neither system nor user text");
        for (const auto& slot : ont.slots)
            if (turn.state.find(slot) == turn.state.end())
                throw ValidationError("dialogue " + d.id + " turn " + std::to_string(t + 1) +
                                      " state is missing slot " + slot);
        for (const auto& [slot, value] : turn.state) {
            if (!ont.has_slot(slot))
                throw ValidationError("dialogue " + d.id + " state names unknown slot " + slot);
            const auto& cands = ont.candidates(slot);
            if (std::find(cands.begin(), cands.end(), value) == cands.end())
                throw ValidationError("dialogue " + d.id + " slot " + slot +
                                      " holds out-of-ontology value '" + value + "'");
        }
    }

    if (d.tags.count(kTagDeleted)) {
        bool witnessed = false;
        State prev = all_none_state(ont);
        for (const auto& turn : d.turns) {
            for (const auto& slot : ont.slots)
                if (prev.at(slot) != kNone && turn.state.at(slot) == kNone) witnessed = true;
            prev = turn.state;
        }
        if (!witnessed)
            throw ValidationError("dialogue " + d.id +
                                  " tagged deleted_value but no slot ever reverts to none");
    }

    if (d.tags.count(kTagRelated)) {
        bool witnessed = false;
        State prev = all_none_state(ont);
        for (const auto& turn : d.turns) {
            for (const auto& [src, tgt] : ont.links) {
                const auto& nv = turn.state.at(tgt);
                if (nv != kNone && nv != prev.at(tgt) && nv == prev.at(src)) {
                    // Carried value must be absent from the user utterance —
                    // resolvable only through the previous state.
                    auto toks = tokenize(turn.user);
                    if (std::find(toks.begin(), toks.end(), nv) == toks.end()) witnessed = true;
                }
            }
            prev = turn.state;
        }
        if (!witnessed)
            throw ValidationError("dialogue " + d.id +
                                  " tagged related_slot but no linked carryover turn found");
    }
}

// ---------------------------------------------------------------------------
// Ontology generation
// ---------------------------------------------------------------------------

struct OntologySpec {
    int n_domains = 3;
    int values_per_slot = 10;
    int n_links = 2;
};

namespace detail {

struct CatalogDomain {
    const char* name;
    std::vector<const char*> slot_words;
};

inline const std::vector<CatalogDomain>& domain_catalog() {
    static const std::vector<CatalogDomain> cat = {
        {"restaurant", {"food", "area", "name"}},
        {"hotel", {"area", "stars", "name"}},
        {"taxi", {"destination", "departure"}},
        {"attraction", {"kind", "area", "name"}},
        {"shop", {"goods", "area", "name"}},
    };
    return cat;
}

// (source, target) pairs the generator may link when both domains are present.
inline const std::vector<std::pair<const char*, const char*>>& link_catalog() {
    static const std::vector<std::pair<const char*, const char*>> cat = {
        {"restaurant-name", "taxi-destination"},
        {"hotel-name", "taxi-departure"},
        {"attraction-name", "taxi-destination"},
        {"shop-name", "taxi-departure"},
    };
    return cat;
}

inline std::vector<std::string> lexicon_for(const std::string& slot) {
    static const std::map<std::string, std::vector<std::string>> pools = {
        {"restaurant-food",
         {"chinese", "italian", "indian", "thai", "korean", "british", "mexican", "japanese",
          "turkish", "french", "spanish", "greek", "lebanese", "persian", "vietnamese",
          "malaysian", "portuguese", "african", "cuban", "polish"}},
        {"restaurant-area",
         {"centre", "north", "south", "east", "west", "riverside", "old_town", "new_town",
          "harbour", "uptown", "downtown", "midtown", "lakeside", "hillside", "seafront",
          "parkside", "westgate", "eastgate", "northgate", "southgate"}},
        {"restaurant-name",
         {"tang", "rice_house", "graffiti", "nirala", "cotto", "zizzi", "bedouin", "clowns",
          "anatolia", "dojo", "panahar", "gardenia", "bloomsbury", "kohinoor", "lucky_star",
          "meghna", "prezzo", "rajmahal", "sitar", "varsity"}},
        {"hotel-area",
         {"centre", "north", "south", "east", "west", "riverside", "old_town", "new_town",
          "harbour", "uptown", "downtown", "midtown", "lakeside", "hillside", "seafront",
          "parkside", "westgate", "eastgate", "northgate", "southgate"}},
        {"hotel-stars",
         {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
          "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
          "eighteen", "nineteen", "twenty"}},
        {"hotel-name",
         {"acorn", "arbury", "lensfield", "leverton", "warkworth", "alpha_milton", "kirkwood",
          "gonville", "huntingdon", "cityroomz", "allenbell", "carolina", "avalon", "aylesbray",
          "lovell", "worth_house", "limehouse", "finches", "archway", "ashley"}},
        {"attraction-kind",
         {"museum", "cinema", "park", "theatre", "gallery", "stadium", "aquarium", "zoo",
          "castle", "library", "arcade", "garden", "planetarium", "observatory", "funfair",
          "billiards", "concert_hall", "boat_tour", "market", "church"}},
        {"attraction-area",
         {"centre", "north", "south", "east", "west", "riverside", "old_town", "new_town",
          "harbour", "uptown", "downtown", "midtown", "lakeside", "hillside", "seafront",
          "parkside", "westgate", "eastgate", "northgate", "southgate"}},
        {"attraction-name",
         {"ballare", "cineworld", "junction", "tenpin", "vue", "funky_fun_house", "milton_park",
          "byard_art", "cherry_hinton", "clare_hall", "corpus_christi", "downing", "emmanuel",
          "great_st_mary", "holy_trinity", "jesus_green", "kambar", "kings_hedges",
          "lynne_strover", "magdalene"}},
        {"shop-goods",
         {"books", "shoes", "toys", "clothes", "flowers", "antiques", "records", "jewelry",
          "paints", "bicycles", "kitchenware", "candles", "fabrics", "lamps", "rugs", "watches",
          "hats", "teas", "spices", "tools"}},
        {"shop-area",
         {"centre", "north", "south", "east", "west", "riverside", "old_town", "new_town",
          "harbour", "uptown", "downtown", "midtown", "lakeside", "hillside", "seafront",
          "parkside", "westgate", "eastgate", "northgate", "southgate"}},
        {"shop-name",
         {"paperchase", "oxfam", "fopp", "scotsdales", "heffers", "ryder_and_amies", "cuckoo",
          "podarok", "remnant_kings", "lilac_rose", "seasalt", "joules", "whittard", "bowns",
          "dandelion", "cambsec", "talking_t", "nomads", "jacks_on_trinity", "hardys"}},
    };
    auto it = pools.find(slot);
    if (it != pools.end()) return it->second;
    return {};
}

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
}

}  // namespace detail

inline Ontology generate_ontology(const OntologySpec& spec, std::uint64_t seed) {
    const auto& catalog = detail::domain_catalog();
    if (spec.n_domains < 2) throw ConfigError("ontology needs at least two domains");
    if (spec.n_domains > static_cast<int>(catalog.size()))
        throw ConfigError("ontology spec asks for more domains than the catalog provides");
    if (spec.values_per_slot < 3)
        throw ConfigError("each slot needs at least three candidate values");
    if (spec.n_links < 1) throw ConfigError("ontology needs at least one cross-domain link");

    Rng rng(seed);
    Ontology ont;
    for (int i = 0; i < spec.n_domains; ++i) {
        const auto& dom = catalog[i];
        ont.domains.emplace_back(dom.name);
        for (const char* w : dom.slot_words)
            ont.slots.push_back(std::string(dom.name) + "-" + w);
    }

    std::set<std::string> chosen(ont.slots.begin(), ont.slots.end());
    for (const auto& [src, tgt] : detail::link_catalog()) {
        if (static_cast<int>(ont.links.size()) == spec.n_links) break;
        if (!chosen.count(src) || !chosen.count(tgt)) continue;
        // One source per target keeps carryover unambiguous.
        bool taken = false;
        for (const auto& l : ont.links)
            if (l.second == tgt) taken = true;
        if (!taken) ont.links.emplace_back(src, tgt);
    }
    if (static_cast<int>(ont.links.size()) < spec.n_links)
        throw ConfigError("link spec exceeds the cross-domain pairs available for these domains");

    std::set<std::string> link_targets;
    for (const auto& l : ont.links) link_targets.insert(l.second);

    for (const auto& slot : ont.slots) {
        if (link_targets.count(slot)) continue;  // filled from its source below
        auto pool = detail::lexicon_for(slot);
        for (int k = static_cast<int>(pool.size()); k < spec.values_per_slot; ++k)
            pool.push_back(Ontology::slot_word(slot) + "_" + std::to_string(k));
        detail::shuffle_vec(pool, rng);
        std::vector<std::string> vals = {kNone};
        vals.insert(vals.end(), pool.begin(), pool.begin() + spec.values_per_slot);
        ont.values[slot] = std::move(vals);
    }
    for (const auto& [src, tgt] : ont.links) ont.values[tgt] = ont.values.at(src);

    ont.validate();
    return ont;
}

// ---------------------------------------------------------------------------
// Dialogue generation
// ---------------------------------------------------------------------------

struct PhenomenonMix {
    double deleted_value = 0.25;
    double related_slot = 0.25;
};

namespace detail {

/// Builds one dialogue turn by turn, materializing the full gold state after
/// each turn. Utterance templates are the single source of truth for state
/// updates, so gold annotations follow the text by construction.
class DialogueBuilder {
public:
    DialogueBuilder(const Ontology& ont, Rng& rng, std::string id)
        : ont_(ont), rng_(rng), state_(all_none_state(ont)) {
        d_.id = std::move(id);
    }

    Dialogue finish() && { return std::move(d_); }
    void tag(const std::string& t) { d_.tags.insert(t); }
    int size() const { return static_cast<int>(d_.turns.size()); }
    const State& state() const { return state_; }

    std::string ask_more() {
        static const std::vector<std::string> pool = {
            "what else can i do for you", "sure thing anything else",
            "okay noted anything else", "certainly what else do you need"};
        return pool[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    }

    std::string pick_value(const std::string& slot, const std::string& avoid = "") {
        const auto& cands = ont_.candidates(slot);
        std::vector<std::string> usable;
        for (const auto& v : cands)
            if (v != kNone && v != avoid && v != state_.at(slot)) usable.push_back(v);
        if (usable.empty()) throw OntologyError("no usable value for slot " + slot);
        return usable[static_cast<std::size_t>(
            rng_.uniform_int(0, static_cast<int>(usable.size()) - 1))];
    }

    void inform(const std::vector<std::pair<std::string, std::string>>& updates, bool first) {
        std::string text;
        for (std::size_t i = 0; i < updates.size(); ++i) {
            const auto& [slot, value] = updates[i];
            text += (i == 0 ? "i want the " : " and the ");
            text += Ontology::slot_domain(slot) + " " + Ontology::slot_word(slot) + " to be " + value;
        }
        push(first ? "" : ask_more(), text, updates);
    }

    void offer(const std::string& domain, const std::string& value, bool accept) {
        const std::string slot = domain + "-name";
        const std::string sys = "i can offer the " + value + " for the " + domain +
                                " shall i book it";
        if (accept)
            push(sys, "yes please book it", {{slot, value}});
        else
            push(sys, "no i do not like that one", {});
    }

    /// Booking failure: neither utterance names the slot, the domain, or the
    /// value, so resolving which slot reverts to none requires the previous
    /// state (at most one name slot is non-none when this fires).
    void delete_booked(const std::string& domain) {
        push("sorry i could not complete that booking", "okay please find me a different one",
             {{domain + "-name", std::string(kNone)}});
    }

    /// Coreference turn: the carried value never appears in the text.
    void carry(const std::string& src, const std::string& tgt) {
        const std::string v = state_.at(src);
        if (v == kNone) throw OntologyError("carry from an empty source slot " + src);
        const std::string word = Ontology::slot_word(tgt);
        const std::string dom = Ontology::slot_domain(src);
        const std::string text = word == "departure" ? "i need a taxi from the " + dom
                                                     : "i also need a taxi to the " + dom;
        push("anything else today", text, {{tgt, v}});
    }

    void chat_filler() { push(ask_more(), "nothing else right now", {}); }

    void close() { push("is there anything more", "no thank you that is all", {}); }

private:
    void push(std::string sys, std::string user,
              const std::vector<std::pair<std::string, std::string>>& updates) {
        for (const auto& [slot, value] : updates) state_.at(slot) = value;
        d_.turns.push_back(Turn{std::move(sys), std::move(user), state_});
    }

    const Ontology& ont_;
    Rng& rng_;
    Dialogue d_;
    State state_;
};

struct DomainInfo {
    std::string name;
    std::vector<std::string> informable;  // non-name, non-link-target slots
    bool has_name = false;
};

inline std::vector<DomainInfo> informable_domains(const Ontology& ont) {
    std::set<std::string> targets;
    for (const auto& l : ont.links) targets.insert(l.second);
    std::vector<DomainInfo> out;
    for (const auto& dom : ont.domains) {
        DomainInfo info;
        info.name = dom;
        for (const auto& slot : ont.slots) {
            if (Ontology::slot_domain(slot) != dom || targets.count(slot)) continue;
            if (Ontology::slot_word(slot) == "name")
                info.has_name = true;
            else
                info.informable.push_back(slot);
        }
        if (!info.informable.empty() || info.has_name) out.push_back(std::move(info));
    }
    return out;
}

}  // namespace detail

inline std::vector<Dialogue> generate_dialogues(const Ontology& ont, int count,
                                                const PhenomenonMix& mix, std::uint64_t seed) {
    if (count <= 0) throw ConfigError("dialogue count must be positive");
    if (mix.deleted_value < 0 || mix.related_slot < 0 ||
        mix.deleted_value + mix.related_slot > 1.0)
        throw ConfigError("phenomenon mix fractions must be nonnegative and sum to at most 1");
    if (!ont.links.empty() && mix.related_slot > 0) {
        // fine: carryover requires a link, which the ontology guarantees
    }

    Rng rng(seed);

    // Quota-based category assignment keeps phenomenon fractions exact.
    const int n_deleted = static_cast<int>(mix.deleted_value * count + 0.5);
    const int n_related = static_cast<int>(mix.related_slot * count + 0.5);
    enum Category { kPlain, kDeleted, kRelated };
    std::vector<Category> cats;
    for (int i = 0; i < n_deleted; ++i) cats.push_back(kDeleted);
    for (int i = 0; i < n_related; ++i) cats.push_back(kRelated);
    while (static_cast<int>(cats.size()) < count) cats.push_back(kPlain);
    cats.resize(static_cast<std::size_t>(count));
    detail::shuffle_vec(cats, rng);

    auto domains = detail::informable_domains(ont);
    std::vector<detail::DomainInfo> bookable;  // domains that can host offer/delete
    for (const auto& d : domains)
        if (d.has_name && !d.informable.empty()) bookable.push_back(d);
    if (bookable.empty()) throw OntologyError("ontology has no bookable domain with a name slot");

    std::vector<std::pair<std::string, std::string>> usable_links;
    for (const auto& [src, tgt] : ont.links)
        for (const auto& d : bookable)
            if (Ontology::slot_domain(src) == d.name) usable_links.emplace_back(src, tgt);
    if (usable_links.empty() && n_related > 0)
        throw OntologyError("related_slot dialogues need a link sourced from a bookable domain");

    std::vector<Dialogue> out;
    out.reserve(static_cast<std::size_t>(count));

    for (int i = 0; i < count; ++i) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "d%05d", i);
        detail::DialogueBuilder b(ont, rng, idbuf);

        auto pick_bookable = [&]() -> const detail::DomainInfo& {
            return bookable[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(bookable.size()) - 1))];
        };
        auto pick_informable_slot = [&](const detail::DomainInfo& d) {
            return d.informable[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(d.informable.size()) - 1))];
        };
        // Fillers only touch non-name slots, so booking bookkeeping stays clean.
        auto filler = [&]() {
            const int kind = rng.uniform_int(0, 2);
            if (kind == 0) {
                b.chat_filler();
                return;
            }
            const auto& d = domains[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(domains.size()) - 1))];
            if (d.informable.empty()) {
                b.chat_filler();
                return;
            }
            const auto slot = pick_informable_slot(d);
            b.inform({{slot, b.pick_value(slot)}}, false);
        };
        auto first_inform = [&](const detail::DomainInfo& d) {
            const auto s1 = pick_informable_slot(d);
            if (d.informable.size() > 1 && rng.bernoulli(0.4)) {
                auto s2 = pick_informable_slot(d);
                while (s2 == s1) s2 = pick_informable_slot(d);
                b.inform({{s1, b.pick_value(s1)}, {s2, b.pick_value(s2)}}, true);
            } else {
                b.inform({{s1, b.pick_value(s1)}}, true);
            }
        };

        const Category cat = cats[static_cast<std::size_t>(i)];
        if (cat == kDeleted) {
            const int target_len = rng.uniform_int(6, 9);
            const auto& dom = pick_bookable();
            const detail::DomainInfo* other = nullptr;
            for (const auto& cand : bookable)
                if (cand.name != dom.name) other = &cand;
            first_inform(dom);
            // Rejected offers — in the other bookable domain and often in this
            // one — mean the live booking cannot be read off the most recent
            // offer in the text; only the carried state names the slot that
            // the failure turn reverts.
            const std::string v = b.pick_value(dom.name + "-name");
            if (other) b.offer(other->name, b.pick_value(other->name + "-name"), false);
            if (rng.bernoulli(0.6)) b.offer(dom.name, b.pick_value(dom.name + "-name", v), false);
            b.offer(dom.name, v, true);
            // At least one turn with no mention of the booked value must sit
            // between booking and failure, so only state carries it forward.
            filler();
            while (b.size() < target_len - 2 && rng.bernoulli(0.4)) filler();
            if (other && rng.bernoulli(0.5))
                b.offer(other->name, b.pick_value(other->name + "-name"), false);
            b.delete_booked(dom.name);
            b.tag(kTagDeleted);
            if (b.size() < target_len && rng.bernoulli(0.5))
                b.offer(dom.name, b.pick_value(dom.name + "-name", v), true);
            while (b.size() < target_len - 1) filler();
            if (b.size() < target_len) b.close();
        } else if (cat == kRelated) {
            const int target_len = rng.uniform_int(4, 8);
            const auto& link = usable_links[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(usable_links.size()) - 1))];
            const detail::DomainInfo* dom = nullptr;
            for (const auto& d : bookable)
                if (d.name == Ontology::slot_domain(link.first)) dom = &d;
            first_inform(*dom);
            if (rng.bernoulli(0.5))
                b.offer(dom->name, b.pick_value(dom->name + "-name"), false);
            b.offer(dom->name, b.pick_value(dom->name + "-name"), true);
            while (b.size() < target_len - 2 && rng.bernoulli(0.5)) filler();
            b.carry(link.first, link.second);
            b.tag(kTagRelated);
            while (b.size() < target_len - 1) filler();
            if (b.size() < target_len) b.close();
        } else {
            const int target_len = rng.uniform_int(3, 8);
            const auto& dom = pick_bookable();
            first_inform(dom);
            if (b.size() < target_len - 1 && rng.bernoulli(0.35))
                b.offer(dom.name, b.pick_value(dom.name + "-name"), false);
            if (b.size() < target_len - 1 && rng.bernoulli(0.7))
                b.offer(dom.name, b.pick_value(dom.name + "-name"), true);
            // Explicitly-set taxi slots keep carryover from being a reflex:
            // a taxi mention sometimes comes with its own literal value.
            if (!ont.links.empty() && b.size() < target_len - 1 && rng.bernoulli(0.3)) {
                const auto& link = ont.links[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<int>(ont.links.size()) - 1))];
                b.inform({{link.second, b.pick_value(link.second)}}, false);
            }
            while (b.size() < target_len - 1) filler();
            b.close();
        }

        Dialogue d = std::move(b).finish();
        validate_dialogue(d, ont);
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deleted-value augmentation
// ---------------------------------------------------------------------------

/// Expand deleted-value templates by swapping the deleted value for every
/// other candidate of its slot, rewriting text and states consistently.
/// `limit` < 0 means no cap.
inline std::vector<Dialogue> augment_deleted_value(const std::vector<Dialogue>& templates,
                                                   const Ontology& ont, int limit = -1) {
    std::vector<Dialogue> probes;
    for (const auto& tmpl : templates) {
        if (!tmpl.tags.count(kTagDeleted))
            throw ValidationError("augmentation template " + tmpl.id + " lacks the deleted_value tag");

        // Locate the first deletion event: (slot, value deleted).
        std::string slot, value;
        State prev = all_none_state(ont);
        for (const auto& turn : tmpl.turns) {
            for (const auto& s : ont.slots)
                if (slot.empty() && prev.at(s) != kNone && turn.state.at(s) == kNone) {
                    slot = s;
                    value = prev.at(s);
                }
            prev = turn.state;
        }
        if (slot.empty())
            throw ValidationError("template " + tmpl.id + " has no deletion event");

        int k = 0;
        for (const auto& sub : ont.candidates(slot)) {
            if (sub == kNone || sub == value) continue;
            if (limit >= 0 && static_cast<int>(probes.size()) == limit) return probes;
            Dialogue probe;
            probe.id = tmpl.id + "-a" + std::to_string(k++);
            probe.tags = tmpl.tags;
            for (const auto& turn : tmpl.turns) {
                Turn nt;
                auto rewrite_text = [&](const std::string& text) {
                    auto toks = tokenize(text);
                    std::string out;
                    for (std::size_t i = 0; i < toks.size(); ++i) {
                        if (i) out += ' ';
                        out += (toks[i] == value ? sub : toks[i]);
                    }
                    return out;
                };
                nt.system = rewrite_text(turn.system);
                nt.user = rewrite_text(turn.user);
                for (const auto& [s, v] : turn.state) nt.state[s] = (v == value ? sub : v);
                probe.turns.push_back(std::move(nt));
            }
            validate_dialogue(probe, ont);  // substitution must preserve every invariant
            probes.push_back(std::move(probe));
        }
    }
    return probes;
}

// ---------------------------------------------------------------------------
// Corpus assembly
// ---------------------------------------------------------------------------

struct CorpusSpec {
    OntologySpec ontology;
    int count = 2000;
    PhenomenonMix mix;
    double train_frac = 0.8;
    double dev_frac = 0.1;
    double min_train_phenomenon_frac = 0.2;

    nlohmann::json to_json() const {
        return {{"ontology",
                 {{"n_domains", ontology.n_domains},
                  {"values_per_slot", ontology.values_per_slot},
                  {"n_links", ontology.n_links}}},
                {"count", count},
                {"mix",
                 {{"deleted_value", mix.deleted_value}, {"related_slot", mix.related_slot}}},
                {"train_frac", train_frac},
                {"dev_frac", dev_frac},
                {"min_train_phenomenon_frac", min_train_phenomenon_frac}};
    }

    /// Strict parse: every field must be present, so a typo in a spec file
    /// fails loudly with the field name instead of silently using a default.
    static CorpusSpec from_json(const nlohmann::json& j) {
        CorpusSpec spec;
        try {
            const auto& o = j.at("ontology");
            spec.ontology.n_domains = o.at("n_domains").get<int>();
            spec.ontology.values_per_slot = o.at("values_per_slot").get<int>();
            spec.ontology.n_links = o.at("n_links").get<int>();
            spec.count = j.at("count").get<int>();
            const auto& m = j.at("mix");
            spec.mix.deleted_value = m.at("deleted_value").get<double>();
            spec.mix.related_slot = m.at("related_slot").get<double>();
            spec.train_frac = j.at("train_frac").get<double>();
            spec.dev_frac = j.at("dev_frac").get<double>();
            spec.min_train_phenomenon_frac = j.at("min_train_phenomenon_frac").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("corpus spec: " + std::string(e.what()));
        }
        return spec;
    }
};

inline void validate_corpus(const CorpusSplit& corpus, double min_train_phenomenon_frac = 0.0) {
    corpus.ontology.validate();
    std::set<std::string> ids;
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
        for (const auto& d : *split) {
            validate_dialogue(d, corpus.ontology);
            if (!ids.insert(d.id).second)
                throw ValidationError("dialogue id appears in more than one place: " + d.id);
        }
    if (min_train_phenomenon_frac > 0 && !corpus.train.empty()) {
        double del = 0, rel = 0;
        for (const auto& d : corpus.train) {
            if (d.tags.count(kTagDeleted)) ++del;
            if (d.tags.count(kTagRelated)) ++rel;
        }
        const double n = static_cast<double>(corpus.train.size());
        if (del / n < min_train_phenomenon_frac || rel / n < min_train_phenomenon_frac)
            throw ValidationError("train split underrepresents a phenomenon (deleted " +
                                  std::to_string(del / n) + ", related " +
                                  std::to_string(rel / n) + ")");
    }
}

inline CorpusSplit generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    if (spec.train_frac <= 0 || spec.dev_frac < 0 || spec.train_frac + spec.dev_frac >= 1.0)
        throw ConfigError("split fractions must leave room for train/dev/test");
    Rng root(seed);
    Rng ont_rng = root.split();
    Rng gen_rng = root.split();
    Rng split_rng = root.split();

    CorpusSplit corpus;
    corpus.seed = seed;
    corpus.ontology = generate_ontology(spec.ontology, ont_rng.uniform_int(0, 1 << 30));
    auto dialogues = generate_dialogues(corpus.ontology, spec.count, spec.mix,
                                        gen_rng.uniform_int(0, 1 << 30));

    // Stratified split: each phenomenon category is divided 80/10/10 on its
    // own, so split-level fractions track the corpus-level mix.
    auto category = [](const Dialogue& d) {
        if (d.tags.count(kTagDeleted)) return 1;
        if (d.tags.count(kTagRelated)) return 2;
        return 0;
    };
    for (int cat = 0; cat < 3; ++cat) {
        std::vector<Dialogue> group;
        for (auto& d : dialogues)
            if (category(d) == cat) group.push_back(std::move(d));
        detail::shuffle_vec(group, split_rng);
        const int n = static_cast<int>(group.size());
        const int n_train = static_cast<int>(n * spec.train_frac);
        const int n_dev = static_cast<int>(n * spec.dev_frac);
        for (int i = 0; i < n; ++i) {
            if (i < n_train)
                corpus.train.push_back(std::move(group[static_cast<std::size_t>(i)]));
            else if (i < n_train + n_dev)
                corpus.dev.push_back(std::move(group[static_cast<std::size_t>(i)]));
            else
                corpus.test.push_back(std::move(group[static_cast<std::size_t>(i)]));
        }
    }
    detail::shuffle_vec(corpus.train, split_rng);
    detail::shuffle_vec(corpus.dev, split_rng);
    detail::shuffle_vec(corpus.test, split_rng);

    validate_corpus(corpus, spec.min_train_phenomenon_frac);
    return corpus;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json ontology_to_json(const Ontology& ont) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["domains"] = ont.domains;
    j["slots"] = ont.slots;
    j["values"] = ont.values;
    auto links = nlohmann::json::array();
    for (const auto& [src, tgt] : ont.links) links.push_back({src, tgt});
    j["links"] = links;
    return j;
}

inline Ontology ontology_from_json(const nlohmann::json& j, const std::string& where) {
    for (const char* field : {"schema_version", "domains", "slots", "values", "links"})
        if (!j.contains(field)) throw IoError(where + ": missing field '" + field + "'");
    if (j["schema_version"].get<int>() != kSchemaVersion)
        throw IoError(where + ": unsupported schema_version");
    Ontology ont;
    ont.domains = j["domains"].get<std::vector<std::string>>();
    ont.slots = j["slots"].get<std::vector<std::string>>();
    ont.values = j["values"].get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& l : j["links"]) {
        if (!l.is_array() || l.size() != 2) throw IoError(where + ": malformed link entry");
        ont.links.emplace_back(l[0].get<std::string>(), l[1].get<std::string>());
    }
    ont.validate();
    return ont;
}

inline nlohmann::json dialogue_to_json(const Dialogue& d) {
    nlohmann::json j;
    j["id"] = d.id;
    j["tags"] = d.tags;  // std::set keeps tag order canonical
    auto turns = nlohmann::json::array();
    for (const auto& t : d.turns)
        turns.push_back({{"system", t.system}, {"user", t.user}, {"state", t.state}});
    j["turns"] = turns;
    return j;
}

inline Dialogue dialogue_from_json(const nlohmann::json& j, const std::string& where) {
    for (const char* field : {"id", "tags", "turns"})
        if (!j.contains(field)) throw IoError(where + ": missing field '" + field + "'");
    Dialogue d;
    d.id = j["id"].get<std::string>();
    for (const auto& t : j["tags"]) d.tags.insert(t.get<std::string>());
    for (const auto& tj : j["turns"]) {
        for (const char* field : {"system", "user", "state"})
            if (!tj.contains(field)) throw IoError(where + ": turn missing field '" + field + "'");
        Turn t;
        t.system = tj["system"].get<std::string>();
        t.user = tj["user"].get<std::string>();
        t.state = tj["state"].get<State>();
        d.turns.push_back(std::move(t));
    }
    return d;
}

}  // namespace detail

inline void save_dialogues_jsonl(const std::filesystem::path& path,
                                 const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& d : dialogues) out << detail::dialogue_to_json(d).dump() << '\n';
}

inline std::vector<Dialogue> load_dialogues_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<Dialogue> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path.filename().string() + " line " + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(where + ": " + e.what());
        }
        try {
            out.push_back(detail::dialogue_from_json(j, where));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(where + ": " + e.what());
        }
    }
    return out;
}

inline void save_corpus(const CorpusSplit& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "ontology.json");
        if (!out) throw IoError("cannot write " + (dir / "ontology.json").string());
        out << detail::ontology_to_json(corpus.ontology).dump(2) << '\n';
    }
    {
        nlohmann::json meta;
        meta["schema_version"] = kSchemaVersion;
        meta["seed"] = corpus.seed;
        meta["counts"] = {{"train", corpus.train.size()},
                          {"dev", corpus.dev.size()},
                          {"test", corpus.test.size()}};
        std::ofstream out(dir / "meta.json");
        if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
        out << meta.dump(2) << '\n';
    }
    save_dialogues_jsonl(dir / "train.jsonl", corpus.train);
    save_dialogues_jsonl(dir / "dev.jsonl", corpus.dev);
    save_dialogues_jsonl(dir / "test.jsonl", corpus.test);
}

inline CorpusSplit load_corpus(const std::filesystem::path& dir) {
    CorpusSplit corpus;
    const auto opath = dir / "ontology.json";
    std::ifstream in(opath);
    if (!in) throw IoError("cannot open: " + opath.string());
    nlohmann::json oj;
    try {
        oj = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(opath.string() + ": " + e.what());
    }
    corpus.ontology = detail::ontology_from_json(oj, opath.filename().string());

    const auto mpath = dir / "meta.json";
    std::ifstream min(mpath);
    if (!min) throw IoError("cannot open: " + mpath.string());
    nlohmann::json mj;
    try {
        mj = nlohmann::json::parse(min);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(mpath.string() + ": " + e.what());
    }
    if (!mj.contains("schema_version") || mj["schema_version"].get<int>() != kSchemaVersion)
        throw IoError(mpath.string() + ": unsupported schema_version");
    if (mj.contains("seed")) corpus.seed = mj["seed"].get<std::uint64_t>();

    corpus.train = load_dialogues_jsonl(dir / "train.jsonl");
    corpus.dev = load_dialogues_jsonl(dir / "dev.jsonl");
    corpus.test = load_dialogues_jsonl(dir / "test.jsonl");
    validate_corpus(corpus);
    return corpus;
}

}  // namespace dstfuse
