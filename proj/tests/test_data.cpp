#include "confdec/data.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace confdec;

namespace {

Example sample_example() {
    Example ex;
    ex.id = "e1";
    ex.table.fields = {{{"name"}, {"walter", "smallwood"}}, {{"birth", "place"}, {"lisbon"}}, {{"name"}, {"ann"}}};
    ex.reference = {"walter", "smallwood", "from", "lisbon", "."};
    ex.support = {SupportLabel::Supported, SupportLabel::Supported, SupportLabel::Template, SupportLabel::Supported,
                  SupportLabel::Template};
    return ex;
}

std::set<std::string> table_values(const SourceTable& t) {
    std::set<std::string> out;
    for (const auto& f : t.fields) out.insert(f.value.begin(), f.value.end());
    return out;
}

}  // namespace

TEST_CASE("tokenize splits on whitespace") {
    CHECK(tokenize("  a b\t\tc\n") == std::vector<std::string>{"a", "b", "c"});
    CHECK(tokenize("").empty());
    CHECK(join_tokens({"x", "y"}) == "x y");
}

TEST_CASE("vocabulary reserves the special block and maps unknowns") {
    Vocabulary v;
    CHECK(v.size() == Vocabulary::kReservedCount);
    CHECK(v.token(Vocabulary::kNull) == "<null>");
    const int a = v.add("alpha");
    CHECK(v.add("alpha") == a);
    CHECK(v.id("beta") == Vocabulary::kUnk);
    CHECK_FALSE(v.find("beta").has_value());
    CHECK(v.decode(v.encode({"alpha", "beta"})) == std::vector<std::string>{"alpha", "<unk>"});
}

TEST_CASE("build_vocab orders by frequency then lexicographically and honors the cap") {
    Dataset d(1);
    d[0].table.fields = {{{"k"}, {"b", "a"}}};
    d[0].reference = {"b", "c", "a", "b"};
    const Vocabulary v = build_vocab(d);
    CHECK(v.token(Vocabulary::kReservedCount) == "b");
    CHECK(v.token(Vocabulary::kReservedCount + 1) == "a");
    CHECK(v.token(Vocabulary::kReservedCount + 2) == "c");
    CHECK(v.token(Vocabulary::kReservedCount + 3) == "k");
    CHECK(build_vocab(d, Vocabulary::kReservedCount + 2).size() == Vocabulary::kReservedCount + 2);
}

TEST_CASE("linearize and delinearize are inverse, duplicate keys kept in order") {
    const Example ex = sample_example();
    Dataset d{ex};
    const Vocabulary v = build_vocab(d);
    const LinearizedSource src = linearize(ex.table, v);
    CHECK(src.ids.size() == src.provenance.size());
    CHECK(src.ids.front() == Vocabulary::kKey);
    CHECK(src.ids.back() == Vocabulary::kFieldSep);
    CHECK(delinearize(src, v) == ex.table);
    for (std::size_t i = 0; i < src.ids.size(); ++i)
        if (src.provenance[i].role == TokenRole::Value) CHECK(table_values(ex.table).count(v.token(src.ids[i])) == 1);
}

TEST_CASE("encode_example appends EOS") {
    const Example ex = sample_example();
    const Vocabulary v = build_vocab(Dataset{ex});
    const EncodedExample enc = encode_example(ex, v);
    CHECK(enc.target.size() == ex.reference.size() + 1);
    CHECK(enc.target.back() == Vocabulary::kEos);
    CHECK(enc.source == linearize(ex.table, v).ids);
}

TEST_CASE("JSONL round trip and error reporting") {
    const auto dir = std::filesystem::temp_directory_path() / "confdec_data_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "d.jsonl").string();
    Dataset d{sample_example(), sample_example()};
    d[1].id = "e2";
    d[1].support.clear();
    save_dataset(path, d);
    const Dataset back = load_dataset(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].table == d[0].table);
    CHECK(back[0].reference == d[0].reference);
    CHECK(back[0].support == d[0].support);
    CHECK(back[1].support.empty());

    {
        std::ofstream out(path);
        out << format_example(d[0]) << "\n\n{\"table\": [[\"k\"]], \"reference\": \"x\"}\n";
    }
    try {
        load_dataset(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_example(R"({"table": [], "reference": "a b", "support_labels": ["template"]})"), DataError);
    CHECK_THROWS_AS(parse_example("not json"), DataError);
    CHECK_THROWS_AS(load_dataset((dir / "missing.jsonl").string()), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic corpus: sizes, labels and divergence") {
    SynthConfig cfg;
    cfg.num_train = 400;
    cfg.num_valid = 50;
    cfg.num_test = 50;
    cfg.divergence_rate = 0.3;
    const SyntheticCorpus c = generate_synthetic(cfg);
    REQUIRE(c.train.size() == 400);
    REQUIRE(c.valid.size() == 50);
    REQUIRE(c.test.size() == 50);

    std::size_t divergent = 0;
    for (const auto& ex : c.train) {
        REQUIRE(ex.support.size() == ex.reference.size());
        REQUIRE(ex.table.fields.size() >= cfg.min_fields);
        REQUIRE(ex.table.fields.size() <= cfg.max_fields);
        const auto values = table_values(ex.table);
        std::size_t unsupported = 0;
        for (std::size_t i = 0; i < ex.reference.size(); ++i) {
            const bool in_table = values.count(ex.reference[i]) > 0;
            switch (ex.support[i]) {
                case SupportLabel::Supported: REQUIRE(in_table); break;
                case SupportLabel::Unsupported:
                    REQUIRE_FALSE(in_table);
                    ++unsupported;
                    break;
                case SupportLabel::Template: break;
            }
        }
        REQUIRE(unsupported <= 1);
        divergent += unsupported;
    }
    CHECK(divergent == 120);
}

TEST_CASE("synthetic corpus is deterministic in the seed") {
    SynthConfig cfg;
    cfg.num_train = 30;
    cfg.num_valid = cfg.num_test = 5;
    const SyntheticCorpus a = generate_synthetic(cfg);
    const SyntheticCorpus b = generate_synthetic(cfg);
    cfg.seed = 8;
    const SyntheticCorpus c = generate_synthetic(cfg);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(format_example(a.train[i]) == format_example(b.train[i]));
    }
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) differs |= format_example(a.train[i]) != format_example(c.train[i]);
    CHECK(differs);
}

TEST_CASE("synthetic corpus rejects infeasible settings") {
    SynthConfig cfg;
    cfg.divergence_rate = 1.5;
    CHECK_THROWS_AS(generate_synthetic(cfg), std::invalid_argument);
    cfg = SynthConfig{};
    cfg.min_fields = 5;
    cfg.max_fields = 4;
    CHECK_THROWS_AS(generate_synthetic(cfg), std::invalid_argument);
}
