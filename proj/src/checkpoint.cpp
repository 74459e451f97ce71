#include "mgnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mgnet {

namespace {

constexpr char kMagic[8] = {'M', 'G', 'N', 'C', 'K', 'P', 'T', '\0'};

nlohmann::json section_index(const NamedTensors& ts, int64_t& offset) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, t] : ts.items) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        offset += t.numel();
        arr.push_back(std::move(e));
    }
    return arr;
}

void write_section(std::ofstream& f, const NamedTensors& ts) {
    for (const auto& [name, t] : ts.items)
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel()) * 8);
}

NamedTensors read_section(const nlohmann::json& idx, const std::vector<double>& payload) {
    NamedTensors out;
    for (const auto& e : idx) {
        Shape shape = e.at("shape").get<Shape>();
        const int64_t offset = e.at("offset").get<int64_t>();
        const int64_t n = numel_of(shape);
        check(offset >= 0 && offset + n <= static_cast<int64_t>(payload.size()),
              "checkpoint: tensor '" + e.at("name").get<std::string>() +
                  "' is truncated or out of bounds");
        std::vector<double> v(payload.begin() + offset, payload.begin() + offset + n);
        out.add(e.at("name").get<std::string>(), Tensor::from_data(shape, std::move(v)));
    }
    return out;
}

}  // namespace

void save_container(const std::string& path, const Container& c) {
    int64_t offset = 0;
    nlohmann::json header;
    header["meta"] = c.meta;
    header["params"] = section_index(c.params, offset);
    header["buffers"] = section_index(c.buffers, offset);
    header["opt_state"] = section_index(c.opt_state, offset);
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "cannot open checkpoint for writing: " + path);
    f.write(kMagic, 8);
    const uint32_t version = c.version;
    f.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    write_section(f, c.params);
    write_section(f, c.buffers);
    write_section(f, c.opt_state);
    f.flush();
    check(f.good(), "write failed for checkpoint: " + path);
}

Container load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint file not found: " + path);
    char magic[8];
    f.read(magic, 8);
    check(f.good() && std::memcmp(magic, kMagic, 8) == 0,
          "not a checkpoint container: " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    check(version == kCheckpointVersion,
          "checkpoint format version mismatch: file has version " + std::to_string(version) +
              ", this build reads version " + std::to_string(kCheckpointVersion));
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    check(f.good(), "truncated checkpoint header: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    check(f.good(), "truncated checkpoint header: " + path);
    nlohmann::json header = nlohmann::json::parse(hs);

    std::vector<double> payload;
    {
        const auto pos = f.tellg();
        f.seekg(0, std::ios::end);
        const auto end = f.tellg();
        f.seekg(pos);
        const int64_t bytes = static_cast<int64_t>(end - pos);
        check(bytes % 8 == 0, "checkpoint payload is not 8-byte aligned: " + path);
        payload.resize(static_cast<size_t>(bytes / 8));
        f.read(reinterpret_cast<char*>(payload.data()), bytes);
        check(f.good(), "truncated checkpoint payload: " + path);
    }

    Container c;
    c.version = version;
    c.meta = header.value("meta", nlohmann::json::object());
    c.params = read_section(header.at("params"), payload);
    c.buffers = read_section(header.at("buffers"), payload);
    c.opt_state = read_section(header.at("opt_state"), payload);
    return c;
}

}  // namespace mgnet
