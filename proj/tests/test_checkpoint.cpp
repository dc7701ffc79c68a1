#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "refrag/checkpoint.hpp"

using namespace refrag;

namespace {
model::ModelConfig small_cfg() {
    model::ModelConfig cfg;
    cfg.vocab = 14;
    cfg.k = 4;
    cfg.enc = {16, 1, 2, 16};
    cfg.dec = {32, 2, 2, 128};
    cfg.init_seed = 3;
    return cfg;
}
} // namespace

TEST_CASE("model archive round trip preserves every parameter and the config") {
    model::RefragModel m;
    m.init(small_cfg());
    // Touch optimizer state so the round trip covers it.
    Rng rng(5);
    for (ag::Param* p : m.all_params()) {
        for (auto& v : p->m.data) v = rng.gaussian();
        for (auto& v : p->v.data) v = std::fabs(rng.gaussian());
    }
    ckpt::ArchiveMeta meta;
    meta.stage = "cpt";
    meta.step = 123;
    meta.seed = 99;
    meta.opt_t = 55;
    const std::string path = "ckpt_test.bin";
    ckpt::save_model(path, m, meta);

    model::RefragModel back;
    auto loaded = ckpt::load_model(path, back);
    CHECK(loaded.stage == "cpt");
    CHECK(loaded.step == 123);
    CHECK(loaded.seed == 99);
    CHECK(loaded.opt_t == 55);
    CHECK(back.cfg.vocab == m.cfg.vocab);
    CHECK(back.cfg.dec.dim == m.cfg.dec.dim);

    auto pa = m.all_params();
    auto pb = back.all_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->value.data == pb[i]->value.data);
        CHECK(pa[i]->m.data == pb[i]->m.data);
        CHECK(pa[i]->v.data == pb[i]->v.data);
    }
    CHECK(m.decoder_fingerprint() == back.decoder_fingerprint());
    std::remove(path.c_str());
}

TEST_CASE("missing and malformed archives are rejected") {
    model::RefragModel m;
    CHECK_THROWS_WITH_AS(ckpt::load_model("no_such_file.bin", m),
                         doctest::Contains("checkpoint not found"), std::runtime_error);

    const std::string path = "garbage.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "this is not an archive at all, just bytes";
    }
    CHECK_THROWS_AS(ckpt::load_model(path, m), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("generic archive: policy-style param list by name") {
    ag::Param a, b;
    a.init("alpha", {3, 2});
    b.init("beta", {4});
    for (size_t i = 0; i < a.value.data.size(); ++i) a.value.data[i] = 0.5 * static_cast<double>(i);
    for (size_t i = 0; i < b.value.data.size(); ++i) b.value.data[i] = -1.0 * static_cast<double>(i);

    ckpt::ArchiveMeta meta;
    meta.kind = "policy";
    meta.config_json = "{\"width\": 3}";
    const std::string path = "policy_test.bin";
    ckpt::save_archive(path, meta, {&a, &b});

    ag::Param a2, b2;
    a2.init("alpha", {3, 2});
    b2.init("beta", {4});
    auto loaded = ckpt::load_archive(path, {&b2, &a2}); // order-independent
    CHECK(loaded.kind == "policy");
    CHECK(a2.value.data == a.value.data);
    CHECK(b2.value.data == b.value.data);

    ag::Param wrong;
    wrong.init("alpha", {2, 3});
    CHECK_THROWS_AS(ckpt::load_archive(path, {&wrong}), std::runtime_error);
    ag::Param missing;
    missing.init("gamma", {4});
    CHECK_THROWS_AS(ckpt::load_archive(path, {&missing}), std::runtime_error);
    std::remove(path.c_str());
}
