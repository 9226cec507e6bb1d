#include <cat/checkpoint.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <unordered_map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace cat {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'A', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

struct Entry {
    std::string name;
    std::vector<int> shape;
    std::uint64_t offset = 0; // element offset into the float payload
    std::uint64_t numel = 0;
};

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Vocab& vocab,
                     const CatModel& model, AdamStateT<float>* adam, int epochs_done) {
    auto named = model.params();

    std::vector<Entry> entries;
    std::vector<float> payload;
    auto append = [&](const std::string& name, const std::vector<int>& shape,
                      const std::vector<float>& values) {
        entries.push_back({name, shape, payload.size(), values.size()});
        payload.insert(payload.end(), values.begin(), values.end());
    };
    for (const auto& [name, tensor] : named) append(name, tensor.shape(), tensor.values());

    const bool with_adam = adam != nullptr && !adam->first_moments().empty();
    if (with_adam) {
        auto& m = adam->first_moments();
        auto& v = adam->second_moments();
        if (m.size() != named.size())
            throw std::invalid_argument("checkpoint: adam state tracks " + std::to_string(m.size()) +
                                        " tensors but the model has " + std::to_string(named.size()));
        for (size_t i = 0; i < named.size(); ++i) {
            append("adam.m." + named[i].first, named[i].second.shape(), m[i]);
            append("adam.v." + named[i].first, named[i].second.shape(), v[i]);
        }
    }

    json header;
    header["format_version"] = kFormatVersion;
    header["config"] = json::parse(config_to_json_string(cfg));
    header["vocab"] = vocab.tokens();
    header["vocab_hash"] = vocab.hash();
    header["epochs_done"] = epochs_done;
    if (with_adam) header["adam_step"] = adam->step();
    header["params"] = json::array();
    for (const auto& e : entries)
        header["params"].push_back(
            {{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"numel", e.numel}});
    const std::string header_bytes = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, header_bytes.size());
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kMagic))
        throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
    const std::uint64_t header_len = read_u64(in);
    std::string header_bytes(header_len, '\0');
    in.read(header_bytes.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error(path + ": truncated header");

    json header;
    try {
        header = json::parse(header_bytes);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": corrupt header: " + e.what());
    }
    if (header.at("format_version").get<int>() != kFormatVersion)
        throw std::runtime_error(path + ": unsupported format version " +
                                 header.at("format_version").dump());

    LoadedCheckpoint loaded;
    loaded.config = config_from_json_string(header.at("config").dump());
    loaded.config.validate();

    std::vector<std::string> tokens;
    for (const auto& t : header.at("vocab")) tokens.push_back(t.get<std::string>());
    loaded.vocab = Vocab(std::move(tokens));
    const auto stored_hash = header.at("vocab_hash").get<std::uint64_t>();
    if (loaded.vocab.hash() != stored_hash)
        throw std::runtime_error(path + ": vocabulary hash mismatch (stored " +
                                 std::to_string(stored_hash) + ", recomputed " +
                                 std::to_string(loaded.vocab.hash()) + ")");

    std::vector<Entry> entries;
    std::uint64_t total = 0;
    for (const auto& p : header.at("params")) {
        Entry e;
        e.name = p.at("name").get<std::string>();
        for (const auto& d : p.at("shape")) e.shape.push_back(d.get<int>());
        e.offset = p.at("offset").get<std::uint64_t>();
        e.numel = p.at("numel").get<std::uint64_t>();
        total = std::max(total, e.offset + e.numel);
        entries.push_back(std::move(e));
    }
    std::vector<float> payload(total);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(total * sizeof(float)));
    if (!in) throw std::runtime_error(path + ": truncated payload");

    std::unordered_map<std::string, const Entry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;

    std::mt19937 rng(static_cast<std::uint32_t>(loaded.config.seed));
    loaded.model = CatModel(loaded.config, loaded.vocab.size(), rng);
    auto named = loaded.model.params();

    auto copy_into = [&](const std::string& name, std::vector<float>& dst, long expect) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error(path + ": checkpoint is missing tensor '" + name + "'");
        const Entry& e = *it->second;
        if (static_cast<long>(e.numel) != expect)
            throw std::runtime_error(path + ": tensor '" + name + "' holds " +
                                     std::to_string(e.numel) + " values, model expects " +
                                     std::to_string(expect));
        dst.assign(payload.begin() + static_cast<long>(e.offset),
                   payload.begin() + static_cast<long>(e.offset + e.numel));
        by_name.erase(it);
    };

    for (auto& [name, tensor] : named) copy_into(name, tensor.values(), tensor.numel());

    if (header.contains("epochs_done")) loaded.epochs_done = header.at("epochs_done").get<int>();
    loaded.has_adam = header.contains("adam_step");
    loaded.adam = AdamStateT<float>(loaded.config.adam);
    if (loaded.has_adam) {
        auto& m = loaded.adam.first_moments();
        auto& v = loaded.adam.second_moments();
        m.resize(named.size());
        v.resize(named.size());
        for (size_t i = 0; i < named.size(); ++i) {
            copy_into("adam.m." + named[i].first, m[i], named[i].second.numel());
            copy_into("adam.v." + named[i].first, v[i], named[i].second.numel());
        }
        loaded.adam.set_step(header.at("adam_step").get<long>());
    }
    if (!by_name.empty())
        throw std::runtime_error(path + ": checkpoint holds unexpected tensor '" +
                                 by_name.begin()->first + "'");
    return loaded;
}

} // namespace cat
