#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nocrek/knowledge.hpp"
#include "nocrek/rng.hpp"

using namespace nocrek;

namespace {

std::string temp_path(const char* tag) {
    return (std::filesystem::temp_directory_path() /
            (std::string("nocrek_knowledge_") + tag + ".jsonl")).string();
}

KnowledgeStore small_store(std::size_t dim = 16) {
    KnowledgeStore s(dim);
    s.add_entries({{"kettle", "a metal pot with a spout used to boil water"},
                   {"lantern", "a portable case holding a light source"},
                   {"tripod", "a three legged stand supporting instruments"}});
    return s;
}

} // namespace

TEST_CASE("embed_definition is deterministic and unit norm") {
    const std::string text = "a striped equine mammal of the african plains";
    const Vec a = embed_definition(text, 64);
    const Vec b = embed_definition(text, 64);
    REQUIRE(a == b);  // bitwise
    REQUIRE(std::abs(l2_norm(a) - 1.0) < 1e-9);
}

TEST_CASE("embed_definition purity over repeated calls") {
    const Vec first = embed_definition("some definition text", 32);
    for (int i = 0; i < 1000; ++i)
        REQUIRE(embed_definition("some definition text", 32) == first);
}

TEST_CASE("embed_definition rejects empty text") {
    REQUIRE_THROWS_AS(embed_definition("   ", 16), EmptyDefinitionError);
    REQUIRE_THROWS_AS(embed_definition("", 16), EmptyDefinitionError);
}

TEST_CASE("embed_definition handles short and unusual text") {
    const Vec v = embed_definition("ox", 16);
    REQUIRE(std::abs(l2_norm(v) - 1.0) < 1e-9);
}

TEST_CASE("no-object entry is the zero vector at index 0") {
    KnowledgeStore s(8);
    REQUIRE(s.size() == 1);
    REQUIRE(s.entry(0).term == kNoObjectTerm);
    REQUIRE(is_zero(s.entry(0).embedding));
    REQUIRE(s.entry(0).embedding.size() == 8);
}

TEST_CASE("add_entries appends, keeps old embeddings, bumps revision") {
    KnowledgeStore s = small_store();
    const Vec kettle_before = s.embedding_of("kettle");
    const auto rev = s.revision();
    s.add_entries({{"gourd", "a hard shelled fruit often dried and hollowed"}});
    REQUIRE(s.size() == 5);
    REQUIRE(s.revision() == rev + 1);
    REQUIRE(s.embedding_of("kettle") == kettle_before);
}

TEST_CASE("add_entries with empty batch only ticks revision") {
    KnowledgeStore s = small_store();
    KnowledgeStore copy = s;
    const auto rev = s.revision();
    s.add_entries({});
    REQUIRE(s.size() == copy.size());
    REQUIRE(s.revision() == rev + 1);
    for (std::size_t i = 0; i < s.size(); ++i)
        REQUIRE(s.entry(i).embedding == copy.entry(i).embedding);
}

TEST_CASE("store can grow from train size to inference size") {
    // Mirrors the 72+1 -> 600+1 growth pattern at full configuration.
    KnowledgeStore s(32);
    std::vector<std::pair<std::string, std::string>> seen;
    for (int i = 0; i < 72; ++i)
        seen.push_back({"seenterm" + std::to_string(i), "definition number " + std::to_string(i)});
    s.add_entries(seen);
    REQUIRE(s.size() == 73);
    std::vector<std::pair<std::string, std::string>> novel;
    for (int i = 0; i < 528; ++i)
        novel.push_back({"novelterm" + std::to_string(i), "novel definition " + std::to_string(i)});
    s.add_entries(novel);
    REQUIRE(s.size() == 601);
}

TEST_CASE("duplicate term is rejected and store left unmodified") {
    KnowledgeStore s = small_store();
    KnowledgeStore before = s;
    REQUIRE_THROWS_AS(s.add_entries({{"gourd", "x"}, {"kettle", "y"}}), DuplicateTermError);
    REQUIRE(s == before);
    REQUIRE(s.revision() == before.revision());
}

TEST_CASE("remove_entries edge cases") {
    KnowledgeStore s = small_store();
    SECTION("removing everything but the reserved entry") {
        s.remove_entries({"kettle", "lantern", "tripod"});
        REQUIRE(s.size() == 1);
        REQUIRE(s.entry(0).term == kNoObjectTerm);
    }
    SECTION("removing the reserved entry is refused") {
        REQUIRE_THROWS_AS(s.remove_entries({kNoObjectTerm}), ReservedTermError);
    }
    SECTION("unknown term") {
        REQUIRE_THROWS_AS(s.remove_entries({"ghost"}), UnknownTermError);
    }
}

TEST_CASE("add then remove restores an entry-wise identical store") {
    KnowledgeStore s = small_store();
    KnowledgeStore before = s;
    s.add_entries({{"easel", "an upright frame for holding a canvas"},
                   {"sundial", "a plate that tells time from a shadow"}});
    s.remove_entries({"easel", "sundial"});
    REQUIRE(s == before);          // entries identical
    REQUIRE(s.revision() == before.revision() + 2);
}

TEST_CASE("terms are normalized to lowercase with single spaces") {
    KnowledgeStore s(16);
    s.add_entries({{"  Tea   Kettle ", "a vessel"}});
    REQUIRE(s.contains("tea kettle"));
    REQUIRE(s.entry(1).term == "tea kettle");
}

TEST_CASE("save/load round trip is exact") {
    KnowledgeStore s = small_store();
    s.add_entries({{"x", "y"}});  // extra revision tick
    const std::string path = temp_path("roundtrip");
    save_store(s, path);
    KnowledgeStore loaded = load_store(path);
    REQUIRE(loaded == s);
    REQUIRE(loaded.revision() == s.revision());
    REQUIRE(loaded.dimension() == s.dimension());
    std::remove(path.c_str());
}

TEST_CASE("load rejects malformed files") {
    const std::string path = temp_path("bad");
    SECTION("duplicate terms") {
        std::ofstream out(path);
        out << R"({"dimension":4})" << "\n";
        out << R"({"term":"<no_object>","definition":"r","embedding":[0,0,0,0]})" << "\n";
        out << R"({"term":"cat","definition":"a","embedding":[1,0,0,0]})" << "\n";
        out << R"({"term":"cat","definition":"b","embedding":[0,1,0,0]})" << "\n";
        out.close();
        REQUIRE_THROWS_AS(load_store(path), SchemaMismatchError);
    }
    SECTION("embedding dimension mismatch") {
        std::ofstream out(path);
        out << R"({"dimension":4})" << "\n";
        out << R"({"term":"<no_object>","definition":"r","embedding":[0,0,0,0]})" << "\n";
        out << R"({"term":"cat","definition":"a","embedding":[1,0,0]})" << "\n";
        out.close();
        REQUIRE_THROWS_AS(load_store(path), SchemaMismatchError);
    }
    SECTION("missing no-object entry") {
        std::ofstream out(path);
        out << R"({"dimension":4})" << "\n";
        out << R"({"term":"cat","definition":"a","embedding":[1,0,0,0]})" << "\n";
        out.close();
        REQUIRE_THROWS_AS(load_store(path), SchemaMismatchError);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_store("/nonexistent/dir/store.jsonl"), IoFailureError);
    }
    std::remove(path.c_str());
}

TEST_CASE("every non-reserved embedding is unit norm") {
    Rng rng(99);
    KnowledgeStore s(24);
    std::vector<std::pair<std::string, std::string>> batch;
    for (int i = 0; i < 40; ++i) {
        std::string def = "definition";
        for (int w = 0; w < 5; ++w) def += " w" + std::to_string(rng.next_u64() % 1000);
        batch.push_back({"term" + std::to_string(i), def});
    }
    s.add_entries(batch);
    for (std::size_t i = 1; i < s.size(); ++i)
        REQUIRE(std::abs(l2_norm(s.entry(i).embedding) - 1.0) < 1e-9);
}

TEST_CASE("supplied embeddings are normalized at ingest") {
    KnowledgeStore s(4);
    s.add_entries_with_embeddings({{"beam", "a ray", {2.0, 0.0, 0.0, 0.0}}});
    REQUIRE(s.embedding_of("beam") == Vec{1.0, 0.0, 0.0, 0.0});
    REQUIRE_THROWS_AS(
        s.add_entries_with_embeddings({{"void", "nothing", {0.0, 0.0, 0.0, 0.0}}}),
        SchemaMismatchError);
}
