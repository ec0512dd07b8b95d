#pragma once
// External knowledge store: (term, definition, definition embedding) triples
// with a reserved no-object entry at index 0. The definition embedder is a
// deterministic character-3-gram feature hasher, so the store needs no
// pretrained text encoder; files produced elsewhere may carry their own
// embeddings and the store treats them identically. Embeddings are computed
// once at ingest and never change afterwards (the knowledge encoder is
// frozen); mutations only append or drop whole entries.
//
// Thread model: single writer, multiple readers. Mutating member functions
// require exclusive access; code that shares a store across threads hands
// out copies or synchronizes externally.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nocrek/errors.hpp"
#include "nocrek/linalg.hpp"

namespace nocrek {

inline constexpr const char* kNoObjectTerm = "<no_object>";

struct KnowledgeEntry {
    std::string term;        // unique, non-empty, lowercase
    std::string definition;
    Vec embedding;           // unit norm, except no-object which is all zero
};

// Lowercase and collapse runs of whitespace to single spaces.
inline std::string normalize_term(const std::string& raw) {
    std::string out;
    bool in_space = false;
    for (char ch : raw) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            in_space = !out.empty();
            continue;
        }
        if (in_space) {
            out.push_back(' ');
            in_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    return out;
}

namespace detail {

inline std::uint64_t fnv1a64(const char* s, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(s[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

// Deterministic definition embedder: signed hashing of character 3-grams
// into D buckets, then L2 normalization. Similar texts share 3-grams and
// land on nearby unit vectors, which is the only property the retrieval
// pipeline needs from the text side.
inline Vec embed_definition(const std::string& definition, std::size_t dimension) {
    std::string text = normalize_term(definition);
    if (text.empty())
        throw EmptyDefinitionError("embed_definition: definition is empty after trimming");

    Vec v(dimension, 0.0);
    auto add_gram = [&](const char* s, std::size_t n) {
        const std::uint64_t h = detail::fnv1a64(s, n);
        const std::size_t bucket = static_cast<std::size_t>(h % dimension);
        v[bucket] += (h & 0x8000000000000000ULL) ? -1.0 : 1.0;
    };
    if (text.size() < 3) {
        add_gram(text.data(), text.size());
    } else {
        for (std::size_t i = 0; i + 3 <= text.size(); ++i) add_gram(text.data() + i, 3);
    }
    if (is_zero(v))  // opposing signs can cancel on very short texts
        add_gram(text.data(), text.size());
    normalize(v);
    return v;
}

class KnowledgeStore {
public:
    KnowledgeStore() = default;

    // Fresh store holding only the reserved no-object entry.
    explicit KnowledgeStore(std::size_t dimension) : dimension_(dimension) {
        entries_.push_back({kNoObjectTerm, "reserved: absence of any object",
                            Vec(dimension, 0.0)});
        index_[kNoObjectTerm] = 0;
    }

    std::size_t dimension() const { return dimension_; }
    std::uint64_t revision() const { return revision_; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<KnowledgeEntry>& entries() const { return entries_; }
    const KnowledgeEntry& entry(std::size_t i) const { return entries_[i]; }

    bool contains(const std::string& term) const {
        return index_.count(normalize_term(term)) > 0;
    }

    std::optional<std::size_t> find(const std::string& term) const {
        auto it = index_.find(normalize_term(term));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const Vec& embedding_of(const std::string& term) const {
        auto idx = find(term);
        if (!idx)
            throw UnknownTermError("term not in knowledge store: " + term);
        return entries_[*idx].embedding;
    }

    // Append (term, definition) pairs; embeddings are computed here unless
    // supplied. Existing entries are untouched. The revision ticks even for
    // an empty batch so callers can treat every call as a mutation event.
    void add_entries(const std::vector<std::pair<std::string, std::string>>& batch) {
        std::vector<KnowledgeEntry> prepared;
        prepared.reserve(batch.size());
        for (const auto& [raw_term, definition] : batch) {
            const std::string term = normalize_term(raw_term);
            if (term.empty())
                throw EmptyDefinitionError("add_entries: empty term");
            if (contains(term))
                throw DuplicateTermError("add_entries: duplicate term: " + term);
            for (const auto& p : prepared)
                if (p.term == term)
                    throw DuplicateTermError("add_entries: duplicate term in batch: " + term);
            Vec emb = term == kNoObjectTerm ? Vec(dimension_, 0.0)
                                            : embed_definition(definition, dimension_);
            prepared.push_back({term, definition, std::move(emb)});
        }
        append_prepared(std::move(prepared));
    }

    // As add_entries but with embeddings supplied by the caller (e.g. read
    // from a knowledge file produced with a real text encoder). Supplied
    // vectors are L2-normalized at ingest; zero vectors are rejected since
    // that direction is reserved for no-object.
    void add_entries_with_embeddings(std::vector<KnowledgeEntry> batch) {
        for (auto& e : batch) {
            e.term = normalize_term(e.term);
            if (e.term.empty())
                throw EmptyDefinitionError("add_entries: empty term");
            if (contains(e.term))
                throw DuplicateTermError("add_entries: duplicate term: " + e.term);
            if (e.embedding.size() != dimension_)
                throw SchemaMismatchError("add_entries: embedding dimension mismatch for " + e.term);
            if (is_zero(e.embedding))
                throw SchemaMismatchError("add_entries: zero embedding for " + e.term);
            normalize(e.embedding);
        }
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t j = i + 1; j < batch.size(); ++j)
                if (batch[i].term == batch[j].term)
                    throw DuplicateTermError("add_entries: duplicate term in batch: " + batch[i].term);
        append_prepared(std::move(batch));
    }

    void remove_entries(const std::vector<std::string>& terms) {
        std::vector<std::size_t> doomed;
        for (const auto& raw : terms) {
            const std::string term = normalize_term(raw);
            if (term == kNoObjectTerm)
                throw ReservedTermError("remove_entries: cannot remove " + term);
            auto idx = find(term);
            if (!idx)
                throw UnknownTermError("remove_entries: unknown term: " + term);
            doomed.push_back(*idx);
        }
        std::sort(doomed.begin(), doomed.end());
        doomed.erase(std::unique(doomed.begin(), doomed.end()), doomed.end());
        for (auto it = doomed.rbegin(); it != doomed.rend(); ++it)
            entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(*it));
        rebuild_index();
        ++revision_;
    }

    bool operator==(const KnowledgeStore& o) const {
        if (dimension_ != o.dimension_ || entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].term != o.entries_[i].term) return false;
            if (entries_[i].definition != o.entries_[i].definition) return false;
            if (entries_[i].embedding != o.entries_[i].embedding) return false;
        }
        return true;
    }

    // --- persistence (JSON Lines; header line carries dimension/revision) ---

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out)
            throw IoFailureError("save_store: cannot open " + path);
        nlohmann::ordered_json header;
        header["dimension"] = dimension_;
        header["revision"] = revision_;
        out << header.dump() << "\n";
        for (const auto& e : entries_) {
            nlohmann::ordered_json line;
            line["term"] = e.term;
            line["definition"] = e.definition;
            line["embedding"] = e.embedding;
            out << line.dump() << "\n";
        }
        if (!out)
            throw IoFailureError("save_store: write failed for " + path);
    }

    static KnowledgeStore load(const std::string& path) {
        std::ifstream in(path);
        if (!in)
            throw IoFailureError("load_store: cannot open " + path);
        std::string line;
        if (!std::getline(in, line))
            throw SchemaMismatchError("load_store: missing header line");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaMismatchError(std::string("load_store: bad header: ") + e.what());
        }
        if (!header.contains("dimension") || !header["dimension"].is_number_unsigned())
            throw SchemaMismatchError("load_store: header lacks dimension");

        KnowledgeStore store;
        store.dimension_ = header["dimension"].get<std::size_t>();
        if (store.dimension_ == 0)
            throw SchemaMismatchError("load_store: dimension must be positive");
        store.revision_ = header.value("revision", std::uint64_t{0});

        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw SchemaMismatchError(std::string("load_store: bad entry line: ") + e.what());
            }
            KnowledgeEntry e;
            e.term = normalize_term(j.value("term", std::string{}));
            e.definition = j.value("definition", std::string{});
            if (e.term.empty())
                throw SchemaMismatchError("load_store: entry without term");
            if (store.index_.count(e.term))
                throw SchemaMismatchError("load_store: duplicate term: " + e.term);
            if (j.contains("embedding")) {
                e.embedding = j["embedding"].get<Vec>();
                if (e.embedding.size() != store.dimension_)
                    throw SchemaMismatchError("load_store: embedding dimension mismatch for " + e.term);
                if (e.term == kNoObjectTerm) {
                    if (!is_zero(e.embedding))
                        throw SchemaMismatchError("load_store: no-object embedding must be zero");
                } else if (std::abs(l2_norm(e.embedding) - 1.0) > 1e-9) {
                    throw SchemaMismatchError("load_store: embedding not unit norm for " + e.term);
                }
            } else if (e.term == kNoObjectTerm) {
                e.embedding = Vec(store.dimension_, 0.0);
            } else {
                e.embedding = embed_definition(e.definition, store.dimension_);
            }
            store.index_[e.term] = store.entries_.size();
            store.entries_.push_back(std::move(e));
        }
        if (store.entries_.empty() || store.entries_[0].term != kNoObjectTerm)
            throw SchemaMismatchError(std::string("load_store: first entry must be ") + kNoObjectTerm);
        return store;
    }

private:
    void append_prepared(std::vector<KnowledgeEntry> prepared) {
        for (auto& e : prepared) {
            index_[e.term] = entries_.size();
            entries_.push_back(std::move(e));
        }
        ++revision_;
    }

    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].term] = i;
    }

    std::vector<KnowledgeEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t dimension_ = 0;
    std::uint64_t revision_ = 0;
};

inline void save_store(const KnowledgeStore& store, const std::string& path) {
    store.save(path);
}
inline KnowledgeStore load_store(const std::string& path) {
    return KnowledgeStore::load(path);
}

// Reads an additions file: same JSONL layout as a store file but without the
// no-object requirement. Used by update-knowledge --add.
inline std::vector<KnowledgeEntry> read_entry_file(const std::string& path,
                                                   std::size_t expected_dim) {
    std::ifstream in(path);
    if (!in)
        throw IoFailureError("read_entry_file: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw SchemaMismatchError("read_entry_file: missing header line");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("dimension"))
        throw SchemaMismatchError("read_entry_file: header lacks dimension");
    if (header["dimension"].get<std::size_t>() != expected_dim)
        throw SchemaMismatchError("read_entry_file: dimension mismatch");

    std::vector<KnowledgeEntry> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        KnowledgeEntry e;
        e.term = normalize_term(j.value("term", std::string{}));
        e.definition = j.value("definition", std::string{});
        if (e.term.empty())
            throw SchemaMismatchError("read_entry_file: entry without term");
        if (j.contains("embedding")) {
            e.embedding = j["embedding"].get<Vec>();
            if (e.embedding.size() != expected_dim)
                throw SchemaMismatchError("read_entry_file: embedding dimension mismatch");
            if (is_zero(e.embedding))
                throw SchemaMismatchError("read_entry_file: zero embedding for " + e.term);
            normalize(e.embedding);
        } else {
            e.embedding = embed_definition(e.definition, expected_dim);
        }
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace nocrek
