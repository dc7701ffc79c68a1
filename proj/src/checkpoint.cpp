#include "refrag/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace refrag::ckpt {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'R', 'F', 'R', 'G', 'L', 'A', 'B', '\0'};
constexpr uint32_t kVersion = 1;

struct ArrayEntry {
    std::string name;
    std::vector<int64_t> shape;
    uint64_t offset; // in doubles, from start of payload
    uint64_t count;
};

json meta_to_json(const ArchiveMeta& meta) {
    json j;
    j["kind"] = meta.kind;
    j["stage"] = meta.stage;
    j["step"] = meta.step;
    j["seed"] = meta.seed;
    j["opt_t"] = meta.opt_t;
    j["config"] = meta.config_json.empty() ? json::object() : json::parse(meta.config_json);
    return j;
}

ArchiveMeta meta_from_json(const json& j) {
    ArchiveMeta meta;
    meta.kind = j.value("kind", "");
    meta.stage = j.value("stage", "");
    meta.step = j.value("step", 0);
    meta.seed = j.value("seed", 0ull);
    meta.opt_t = j.value("opt_t", 0);
    meta.config_json = j.contains("config") ? j["config"].dump() : "";
    return meta;
}

json read_header(std::ifstream& in, const std::string& path) {
    char magic[8];
    uint32_t version = 0;
    uint64_t header_len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: " + path + " is not a refrag-lab archive");
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported archive version in " + path);
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
    return json::parse(header);
}

} // namespace

void save_archive(const std::string& path, const ArchiveMeta& meta,
                  const std::vector<const ag::Param*>& params, bool with_opt_state) {
    json header = meta_to_json(meta);
    header["with_opt_state"] = with_opt_state;
    json arrays = json::array();
    uint64_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor& t) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["count"] = t.data.size();
        arrays.push_back(e);
        offset += t.data.size();
    };
    for (const ag::Param* p : params) {
        add_entry(p->name, p->value);
        if (with_opt_state) {
            add_entry(p->name + ".m", p->m);
            add_entry(p->name + ".v", p->v);
        }
    }
    header["arrays"] = arrays;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint32_t version = kVersion;
    const uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const ag::Param* p : params) {
        out.write(reinterpret_cast<const char*>(p->value.data.data()),
                  static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
        if (with_opt_state) {
            out.write(reinterpret_cast<const char*>(p->m.data.data()),
                      static_cast<std::streamsize>(p->m.data.size() * sizeof(double)));
            out.write(reinterpret_cast<const char*>(p->v.data.data()),
                      static_cast<std::streamsize>(p->v.data.size() * sizeof(double)));
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

ArchiveMeta peek_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint not found: " + path);
    return meta_from_json(read_header(in, path));
}

ArchiveMeta load_archive(const std::string& path, const std::vector<ag::Param*>& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint not found: " + path);
    json header = read_header(in, path);
    const std::streampos payload_start = in.tellg();

    std::map<std::string, ArrayEntry> index;
    for (const auto& e : header.at("arrays")) {
        ArrayEntry a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<std::vector<int64_t>>();
        a.offset = e.at("offset").get<uint64_t>();
        a.count = e.at("count").get<uint64_t>();
        index[a.name] = a;
    }
    auto read_into = [&](const ArrayEntry& e, Tensor& t) {
        if (t.shape != e.shape)
            throw std::runtime_error("checkpoint: shape mismatch for array " + e.name);
        in.seekg(payload_start + static_cast<std::streamoff>(e.offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(e.count * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated payload reading " + e.name);
    };
    const bool with_opt = header.value("with_opt_state", false);
    for (ag::Param* p : params) {
        auto it = index.find(p->name);
        if (it == index.end())
            throw std::runtime_error("checkpoint: missing array " + p->name + " in " + path);
        read_into(it->second, p->value);
        if (with_opt) {
            read_into(index.at(p->name + ".m"), p->m);
            read_into(index.at(p->name + ".v"), p->v);
        }
    }
    return meta_from_json(header);
}

void save_model(const std::string& path, model::RefragModel& m, const ArchiveMeta& meta,
                bool with_opt_state) {
    ArchiveMeta full = meta;
    full.kind = "model";
    full.config_json = config_to_json(m.cfg);
    std::vector<const ag::Param*> params;
    for (ag::Param* p : m.all_params()) params.push_back(p);
    save_archive(path, full, params, with_opt_state);
}

ArchiveMeta load_model(const std::string& path, model::RefragModel& out) {
    ArchiveMeta meta = peek_meta(path);
    if (meta.kind != "model")
        throw std::runtime_error("checkpoint: " + path + " holds a '" + meta.kind +
                                 "' archive, expected a model");
    out.init(config_from_json(meta.config_json));
    std::vector<ag::Param*> params = out.all_params();
    return load_archive(path, params);
}

std::string config_to_json(const model::ModelConfig& cfg) {
    json j;
    j["vocab"] = cfg.vocab;
    j["k"] = cfg.k;
    j["question_first"] = cfg.question_first;
    j["init_seed"] = cfg.init_seed;
    j["enc"] = {{"dim", cfg.enc.dim},
                {"layers", cfg.enc.layers},
                {"heads", cfg.enc.heads},
                {"max_positions", cfg.enc.max_positions}};
    j["dec"] = {{"dim", cfg.dec.dim},
                {"layers", cfg.dec.layers},
                {"heads", cfg.dec.heads},
                {"max_positions", cfg.dec.max_positions}};
    return j.dump();
}

model::ModelConfig config_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    model::ModelConfig cfg;
    cfg.vocab = j.at("vocab").get<int64_t>();
    cfg.k = j.at("k").get<int64_t>();
    cfg.question_first = j.value("question_first", true);
    cfg.init_seed = j.value("init_seed", 42ull);
    const auto& e = j.at("enc");
    cfg.enc.dim = e.at("dim").get<int64_t>();
    cfg.enc.layers = e.at("layers").get<int>();
    cfg.enc.heads = e.at("heads").get<int>();
    cfg.enc.max_positions = e.at("max_positions").get<int64_t>();
    const auto& d = j.at("dec");
    cfg.dec.dim = d.at("dim").get<int64_t>();
    cfg.dec.layers = d.at("layers").get<int>();
    cfg.dec.heads = d.at("heads").get<int>();
    cfg.dec.max_positions = d.at("max_positions").get<int64_t>();
    return cfg;
}

} // namespace refrag::ckpt
