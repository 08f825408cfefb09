#include <cstring>
#include <fstream>

#include "stackunet/errors.hpp"
#include "stackunet/model.hpp"
#include "stackunet/serialize.hpp"

namespace stackunet {

namespace {

constexpr char kMagic[4] = {'S', 'U', 'N', 'C'};
constexpr uint32_t kFormatVersion = 1;

void write_raw(std::ofstream& f, const void* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

void read_raw(std::ifstream& f, void* p, size_t n) {
    f.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (!f) throw DataError("checkpoint: truncated file");
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    using nlohmann::json;
    json arrays = json::array();
    for (const Param& p : model.graph.params()) {
        arrays.push_back({{"name", p.name}, {"shape", p.shape}, {"kind", "param"}});
    }
    for (const StateArray& s : model.graph.state()) {
        arrays.push_back({{"name", s.name}, {"shape", s.shape}, {"kind", "state"}});
    }
    json header = {
        {"format_version", kFormatVersion},
        {"topology", model.bare_block ? "single_block" : "cascade"},
        {"spec", cascade_spec_to_json(model.spec)},
        {"seed", model.seed},
        {"arrays", arrays},
    };
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open for writing: " + path.string());
    write_raw(f, kMagic, 4);
    write_raw(f, &kFormatVersion, sizeof(kFormatVersion));
    const uint64_t hlen = hs.size();
    write_raw(f, &hlen, sizeof(hlen));
    write_raw(f, hs.data(), hs.size());
    for (const Param& p : model.graph.params()) {
        write_raw(f, p.value.data(), p.value.size() * sizeof(float));
    }
    for (const StateArray& s : model.graph.state()) {
        write_raw(f, s.value.data(), s.value.size() * sizeof(float));
    }
    if (!f) throw DataError("checkpoint: write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    using nlohmann::json;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open: " + path.string());

    char magic[4];
    read_raw(f, magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("checkpoint: bad magic in " + path.string());
    }
    uint32_t version = 0;
    read_raw(f, &version, sizeof(version));
    if (version != kFormatVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    uint64_t hlen = 0;
    read_raw(f, &hlen, sizeof(hlen));
    std::string hs(hlen, '\0');
    read_raw(f, hs.data(), hlen);

    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: bad header: ") + e.what());
    }

    const CascadeSpec spec = cascade_spec_from_json(header.at("spec"));
    const uint64_t seed = header.at("seed").get<uint64_t>();
    const std::string topology = header.value("topology", "cascade");
    Model model = topology == "single_block"
                      ? build_single_block(spec.block, spec.input_channels, seed)
                      : build_cascade(spec, seed);

    // fill arrays by name so the payload is robust to internal reordering
    auto find_param = [&](const std::string& name) -> std::vector<float>* {
        for (Param& p : model.graph.params()) {
            if (p.name == name) return &p.value;
        }
        for (StateArray& s : model.graph.state()) {
            if (s.name == name) return &s.value;
        }
        return nullptr;
    };

    for (const auto& a : header.at("arrays")) {
        const std::string name = a.at("name");
        size_t count = 1;
        for (int d : a.at("shape").get<std::vector<int>>()) count *= size_t(d);
        std::vector<float>* dst = find_param(name);
        if (dst == nullptr) throw DataError("checkpoint: unknown array '" + name + "'");
        if (dst->size() != count) {
            throw DataError("checkpoint: array '" + name + "' has " + std::to_string(count) +
                            " values, model expects " + std::to_string(dst->size()));
        }
        read_raw(f, dst->data(), count * sizeof(float));
    }
    return model;
}

}  // namespace stackunet
