#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "refrag/corpus.hpp"

using namespace refrag;
using namespace refrag::corpus;

TEST_CASE("build_vocab: sizes, specials, determinism") {
    Vocab v = build_vocab("ab");
    CHECK(v.size() == 4); // a, b, pad, bos
    CHECK(v.pad_id != v.bos_id);
    CHECK(v.encode('a') == 0);
    CHECK(v.encode('b') == 1);

    Vocab w = build_vocab("aaaa");
    CHECK(w.size() == 3); // a + two specials

    CHECK_THROWS_AS(build_vocab(""), std::invalid_argument);
    CHECK_THROWS_AS(v.encode('z'), std::invalid_argument);

    // Sorted id assignment is reproducible regardless of symbol order.
    Vocab x1 = build_vocab("bca");
    Vocab x2 = build_vocab("cab");
    CHECK(x1.symbols == x2.symbols);
}

TEST_CASE("make_datapoints: window counts") {
    std::vector<int> stream(10, 1);
    CHECK(make_datapoints(stream, 3, 2).size() == 2);
    stream.resize(4);
    CHECK(make_datapoints(stream, 3, 2).empty());
    stream.assign(4096 * 3, 0);
    CHECK(make_datapoints(stream, 2048, 2048).size() == 3); // floor(12288 / 4096)
    CHECK_THROWS_AS(make_datapoints(stream, 0, 2), std::invalid_argument);
}

TEST_CASE("make_datapoints: deterministic and non-overlapping") {
    std::vector<int> stream(101);
    for (size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<int>(i);
    auto a = make_datapoints(stream, 7, 3);
    auto b = make_datapoints(stream, 7, 3);
    CHECK(a.size() == 10);
    int expect = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        for (int tok : a[i].tokens) CHECK(tok == expect++);
        CHECK(a[i].s + a[i].o == static_cast<int64_t>(a[i].tokens.size()));
    }
}

TEST_CASE("chunk_context: counts and padding") {
    const int pad = 99;
    std::vector<int> ctx(2048, 1);
    CHECK(chunk_context(ctx, 16, pad).size() == 128);
    CHECK(chunk_context(ctx, 32, pad).size() == 64);
    for (const auto& c : chunk_context(ctx, 16, pad)) CHECK_FALSE(c.padded);

    ctx.resize(100);
    auto chunks = chunk_context(ctx, 16, pad);
    CHECK(chunks.size() == 7); // ceil(100/16)
    CHECK(chunks.back().padded);
    int pads = 0;
    for (int t : chunks.back().token_ids) pads += t == pad ? 1 : 0;
    CHECK(pads == 12); // 7*16 - 100

    CHECK_THROWS_AS(chunk_context(ctx, 0, pad), std::invalid_argument);
    CHECK_THROWS_AS(chunk_context(ctx, -3, pad), std::invalid_argument);
}

TEST_CASE("chunk round trip over randomized shapes") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t s = 1 + rng.below(80);
        const int64_t k = 1 + rng.below(s);
        std::vector<int> ctx(static_cast<size_t>(s));
        for (auto& t : ctx) t = static_cast<int>(rng.below(50));
        auto chunks = chunk_context(ctx, k, /*pad_id=*/777);
        CHECK(static_cast<int64_t>(chunks.size()) == (s + k - 1) / k);
        std::vector<int> rebuilt;
        for (const auto& c : chunks) {
            CHECK(static_cast<int64_t>(c.token_ids.size()) == k);
            for (int t : c.token_ids)
                if (t != 777) rebuilt.push_back(t);
        }
        CHECK(rebuilt == ctx);
    }
}

TEST_CASE("synthetic corpus: deterministic, sized, fact statements present") {
    CorpusSpec spec;
    spec.chars = 20000;
    spec.seed = 9;
    auto c1 = generate_corpus(spec);
    auto c2 = generate_corpus(spec);
    CHECK(c1.text == c2.text);
    CHECK(static_cast<int64_t>(c1.text.size()) == spec.chars);
    CHECK(c1.facts.keys.size() == 64);
    CHECK(c1.facts.values.size() == 8);
    // Planted statements are findable verbatim.
    int found = 0;
    for (size_t i = 0; i < c1.facts.keys.size(); ++i)
        found += c1.text.find(c1.facts.statement(i)) != std::string::npos ? 1 : 0;
    CHECK(found > 0);

    Vocab v = build_vocab(c1.text);
    CHECK_NOTHROW(encode(v, c1.text));
    CHECK_THROWS_AS(generate_corpus(CorpusSpec{.chars = 0}), std::invalid_argument);
}

TEST_CASE("needle tasks: planted facts recoverable from the context") {
    CorpusSpec spec;
    spec.chars = 5000;
    auto corpus = generate_corpus(spec);
    Vocab v = build_vocab(corpus.text);
    auto tasks = make_needle_tasks(v, corpus.facts, 60, 20, 4, /*planted=*/true);
    CHECK(tasks.size() == 20);
    for (const auto& t : tasks) {
        CHECK(static_cast<int64_t>(t.context.size()) == 60);
        // "[key=value]" with the answer's value must appear in the context.
        std::string ctx = decode_text(v, t.context);
        std::string q = decode_text(v, t.question);          // "?ab="
        std::string key = q.substr(1, q.size() - 2);
        std::string val = decode_text(v, t.answer);          // "xyz."
        val.pop_back();
        CHECK(ctx.find("[" + key + "=" + val + "]") != std::string::npos);
    }
    // Absent-key control: the asked key must not occur in the context.
    auto absent = make_needle_tasks(v, corpus.facts, 60, 20, 4, /*planted=*/false);
    for (const auto& t : absent) {
        std::string ctx = decode_text(v, t.context);
        std::string q = decode_text(v, t.question);
        std::string key = q.substr(1, q.size() - 2);
        CHECK(ctx.find("[" + key + "=") == std::string::npos);
    }
}

TEST_CASE("datapoint jsonl round trip") {
    std::vector<DataPoint> dps;
    for (int i = 0; i < 3; ++i) {
        DataPoint dp;
        dp.s = 4;
        dp.o = 2;
        dp.tokens = {i, 1, 2, 3, 4, 5};
        dps.push_back(dp);
    }
    const std::string path = "test_dps.jsonl";
    write_datapoints_jsonl(path, dps);
    auto back = read_datapoints_jsonl(path);
    REQUIRE(back.size() == dps.size());
    for (size_t i = 0; i < dps.size(); ++i) {
        CHECK(back[i].tokens == dps[i].tokens);
        CHECK(back[i].s == dps[i].s);
        CHECK(back[i].o == dps[i].o);
    }
    std::remove(path.c_str());
}
