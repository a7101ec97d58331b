#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dstfuse/corpus.hpp"
#include "dstfuse/nn.hpp"
#include "dstfuse/tensor.hpp"

namespace dstfuse {

/// Token table shared by both encoders. Indices are dense; the four special
/// tokens occupy the first four slots.
class Vocabulary {
public:
    static constexpr const char* kPad = "[pad]";
    static constexpr const char* kUnk = "[unk]";
    static constexpr const char* kCls = "[cls]";
    static constexpr const char* kSep = "[sep]";

    Vocabulary() { for (const char* t : {kPad, kUnk, kCls, kSep}) add(t); }

    static Vocabulary build(const CorpusSplit& corpus) {
        Vocabulary v;
        std::set<std::string> seen;
        for (const auto& dom : corpus.ontology.domains) seen.insert(dom);
        for (const auto& slot : corpus.ontology.slots) {
            seen.insert(slot);
            seen.insert(Ontology::slot_word(slot));
            for (const auto& val : corpus.ontology.candidates(slot)) seen.insert(val);
        }
        for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
            for (const auto& d : *split)
                for (const auto& t : d.turns) {
                    for (auto& tok : tokenize(t.system)) seen.insert(tok);
                    for (auto& tok : tokenize(t.user)) seen.insert(tok);
                }
        for (const auto& tok : seen) v.add(tok);
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int pad() const { return 0; }
    int unk() const { return 1; }
    int cls() const { return 2; }
    int sep() const { return 3; }

    /// Unknown tokens resolve to [unk]; nothing throws.
    int lookup(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? unk() : it->second;
    }

    const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }

    std::vector<int> lookup_all(const std::vector<std::string>& tokens) const {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(lookup(t));
        return out;
    }

    nlohmann::json to_json() const { return nlohmann::json(tokens_); }

    static Vocabulary from_json(const nlohmann::json& j) {
        Vocabulary v;
        v.tokens_.clear();
        v.index_.clear();
        for (const auto& t : j) v.add(t.get<std::string>());
        for (const char* t : {kPad, kUnk, kCls, kSep})
            if (v.index_.count(t) == 0) throw IoError("vocabulary is missing special token " + std::string(t));
        if (v.tokens_[0] != kPad || v.tokens_[1] != kUnk || v.tokens_[2] != kCls ||
            v.tokens_[3] != kSep)
            throw IoError("vocabulary special tokens are out of place");
        return v;
    }

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    void add(const std::string& token) {
        if (index_.count(token)) return;
        index_[token] = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
    }

    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

/// Frozen embedding encoder for states, slots and values. Encodings are
/// constants: they carry no gradient buffer, so backward passes cannot touch
/// them even by accident. Everything is cached — frozen implies cacheable.
class FixedEncoder {
public:
    FixedEncoder(const Vocabulary& vocab, const Ontology& ontology, int d, Rng& rng)
        : vocab_(&vocab), d_(d) {
        std::vector<double> emb(static_cast<std::size_t>(vocab.size()) * d);
        for (auto& v : emb) v = rng.normal(0.0, 1.0);
        table_ = make_tensor({vocab.size(), d}, std::move(emb), /*requires_grad=*/false);
        pool_ = xavier_uniform(d, d, rng);
        pool_->requires_grad = false;
        pool_->grad.clear();
        for (const auto& s : ontology.slots) slots_.insert(s);
    }

    /// Mean-pool token embeddings, then a fixed projection with tanh.
    TensorPtr encode_tokens(const std::vector<int>& ids) const {
        if (ids.empty()) throw ValidationError("fixed encoder got an empty token sequence");
        auto rows = gather_rows(nullptr, table_, ids);
        auto pooled = zeros({1, d_});
        for (int i = 0; i < rows->shape[0]; ++i)
            for (int j = 0; j < d_; ++j)
                pooled->data[static_cast<std::size_t>(j)] += rows->at(i, j);
        for (auto& v : pooled->data) v /= static_cast<double>(ids.size());
        return tanh_op(nullptr, matmul(nullptr, pooled, pool_));
    }

    /// [CLS] slot [SEP] value [SEP]; the per-slot-value vector of the last
    /// dialogue state. Unknown slots are errors, unknown values map to [unk].
    TensorPtr encode_slot_value_pair(const std::string& slot, const std::string& value) const {
        if (!slots_.count(slot)) throw OntologyError("unknown slot: " + slot);
        const std::string key = slot + '\x1f' + value;
        auto it = pair_cache_.find(key);
        if (it != pair_cache_.end()) return it->second;
        std::vector<int> ids = {vocab_->cls()};
        for (const auto& t : tokenize(slot)) ids.push_back(vocab_->lookup(t));
        ids.push_back(vocab_->sep());
        for (const auto& t : tokenize(value)) ids.push_back(vocab_->lookup(t));
        ids.push_back(vocab_->sep());
        return pair_cache_.emplace(key, encode_tokens(ids)).first->second;
    }

    TensorPtr encode_slot(const std::string& slot) const {
        auto it = bare_cache_.find("s\x1f" + slot);
        if (it != bare_cache_.end()) return it->second;
        std::vector<int> ids;
        for (const auto& t : tokenize(slot)) ids.push_back(vocab_->lookup(t));
        return bare_cache_.emplace("s\x1f" + slot, encode_tokens(ids)).first->second;
    }

    TensorPtr encode_value(const std::string& value) const {
        auto it = bare_cache_.find("v\x1f" + value);
        if (it != bare_cache_.end()) return it->second;
        std::vector<int> ids;
        for (const auto& t : tokenize(value)) ids.push_back(vocab_->lookup(t));
        return bare_cache_.emplace("v\x1f" + value, encode_tokens(ids)).first->second;
    }

    /// Rows follow the canonical ontology slot order.
    TensorPtr encode_last_state(const Ontology& ontology, const State& state) const {
        std::vector<TensorPtr> rows;
        rows.reserve(ontology.slots.size());
        for (const auto& slot : ontology.slots) {
            auto it = state.find(slot);
            if (it == state.end())
                throw ValidationError("state is missing slot " + slot);
            rows.push_back(encode_slot_value_pair(slot, it->second));
        }
        return concat_rows(nullptr, rows);
    }

    /// Fill every cache the model will need; afterwards the encoder is
    /// read-only and freely shareable.
    void warm_cache(const Ontology& ontology) const {
        for (const auto& slot : ontology.slots) {
            encode_slot(slot);
            for (const auto& value : ontology.candidates(slot)) {
                encode_value(value);
                encode_slot_value_pair(slot, value);
            }
        }
    }

    const TensorPtr& table() const { return table_; }
    const TensorPtr& pool() const { return pool_; }
    int dim() const { return d_; }

    /// Drop derived vectors (used after checkpoint load overwrites the
    /// frozen tensors in place).
    void clear_cache() const {
        pair_cache_.clear();
        bare_cache_.clear();
    }

private:
    const Vocabulary* vocab_;
    int d_;
    TensorPtr table_;
    TensorPtr pool_;
    std::set<std::string> slots_;
    mutable std::map<std::string, TensorPtr> pair_cache_;
    mutable std::map<std::string, TensorPtr> bare_cache_;
};

struct TunableEncoderConfig {
    int d = 64;
    int heads = 4;
    int layers = 2;
    int dff = 256;
    int max_seq_len = 64;
};

/// Trainable transformer encoder over one turn's text:
/// [CLS] system [SEP] user [SEP], truncated from the front of the system
/// utterance when over length.
class TunableEncoder {
public:
    TunableEncoder() = default;
    TunableEncoder(const Vocabulary& vocab, const TunableEncoderConfig& cfg, Rng& rng)
        : vocab_(&vocab), cfg_(cfg) {
        std::vector<double> emb(static_cast<std::size_t>(vocab.size()) * cfg.d);
        for (auto& v : emb) v = rng.normal(0.0, 0.02);
        embedding_ = make_tensor({vocab.size(), cfg.d}, std::move(emb), /*requires_grad=*/true);
        positions_ = sinusoidal_positions(cfg.max_seq_len, cfg.d);
        for (int l = 0; l < cfg.layers; ++l)
            layers_.emplace_back(cfg.d, cfg.heads, cfg.dff, rng);
    }

    std::vector<int> build_input(const std::vector<std::string>& system,
                                 const std::vector<std::string>& user) const {
        if (system.empty() && user.empty())
            throw ValidationError("utterance encoder needs at least one non-empty side");
        std::vector<std::string> sys = system, usr = user;
        // Length budget: [CLS] + sys + [SEP] + usr + [SEP].
        auto total = [&]() { return 3 + sys.size() + usr.size(); };
        while (total() > static_cast<std::size_t>(cfg_.max_seq_len) && !sys.empty())
            sys.erase(sys.begin());
        while (total() > static_cast<std::size_t>(cfg_.max_seq_len) && !usr.empty())
            usr.erase(usr.begin());
        std::vector<int> ids = {vocab_->cls()};
        for (const auto& t : sys) ids.push_back(vocab_->lookup(t));
        ids.push_back(vocab_->sep());
        for (const auto& t : usr) ids.push_back(vocab_->lookup(t));
        ids.push_back(vocab_->sep());
        return ids;
    }

    /// One gradient-carrying d-vector per token position.
    TensorPtr encode(Tape* tape, const std::vector<int>& ids, double dropout_rate, bool training,
                     Rng& rng) const {
        if (ids.empty()) throw ValidationError("utterance encoder got an empty token sequence");
        std::vector<int> pos(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
        auto x = add(tape, gather_rows(tape, embedding_, ids),
                     gather_rows(tape, positions_, pos));
        for (const auto& layer : layers_)
            x = layer.forward(tape, x, dropout_rate, training, rng);
        return x;
    }

    TensorPtr encode_utterance(Tape* tape, const std::string& system, const std::string& user,
                               double dropout_rate, bool training, Rng& rng) const {
        return encode(tape, build_input(tokenize(system), tokenize(user)), dropout_rate, training,
                      rng);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".embedding", embedding_);
        for (std::size_t l = 0; l < layers_.size(); ++l)
            layers_[l].collect(prefix + ".layer" + std::to_string(l), out);
    }

    const TensorPtr& embedding() const { return embedding_; }
    const TunableEncoderConfig& config() const { return cfg_; }

private:
    const Vocabulary* vocab_ = nullptr;
    TunableEncoderConfig cfg_;
    TensorPtr embedding_;
    TensorPtr positions_;
    std::vector<TransformerLayer> layers_;
};

}  // namespace dstfuse
