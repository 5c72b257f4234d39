#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/tensor.hpp"
#include "kdlab/transformer.hpp"

namespace kdlab {

static_assert(std::endian::native == std::endian::little, "checkpoint container assumes a little-endian host");

// Binary tensor container:
//   magic "KDT1"
//   u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//               row-major 64-bit little-endian floats
class Checkpoint {
public:
    std::vector<std::pair<std::string, Tensor>> entries;

    void add(std::string name, Tensor t) { entries.emplace_back(std::move(name), std::move(t)); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
        out.write("KDT1", 4);
        write_u32(out, static_cast<std::uint32_t>(entries.size()));
        for (const auto& [name, t] : entries) {
            if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: tensor name too long: " + name);
            if (t.rank() > 0xFF) throw std::invalid_argument("checkpoint: tensor rank too large");
            write_u16(out, static_cast<std::uint16_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
            out.write(reinterpret_cast<const char*>(&rank), 1);
            for (std::size_t d = 0; d < t.rank(); ++d) write_u32(out, static_cast<std::uint32_t>(t.size(d)));
            out.write(reinterpret_cast<const char*>(t.data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "KDT1", 4) != 0)
            throw std::runtime_error("checkpoint: '" + path + "' is not a KDT1 container");
        const std::uint32_t count = read_u32(in);
        Checkpoint ckpt;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint16_t name_len = read_u16(in);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            std::uint8_t rank = 0;
            in.read(reinterpret_cast<char*>(&rank), 1);
            Shape shape(rank);
            for (std::uint8_t d = 0; d < rank; ++d) shape[d] = read_u32(in);
            std::vector<double> data(shape_numel(shape));
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
            if (!in) throw std::runtime_error("checkpoint: truncated container '" + path + "'");
            ckpt.add(std::move(name), Tensor::from(std::move(shape), std::move(data)));
        }
        return ckpt;
    }

private:
    static void write_u16(std::ofstream& out, std::uint16_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static void write_u32(std::ofstream& out, std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static std::uint16_t read_u16(std::ifstream& in) {
        std::uint16_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        return v;
    }
    static std::uint32_t read_u32(std::ifstream& in) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        return v;
    }
};

// Model checkpoints carry the architecture as a reserved rank-1 tensor so a
// single file round-trips to a usable model.
inline constexpr const char* kConfigTensorName = "__config__";

inline Tensor config_to_tensor(const ModelConfig& c) {
    return Tensor::from({7}, {static_cast<double>(c.num_layers), static_cast<double>(c.num_heads),
                              static_cast<double>(c.hidden_size), static_cast<double>(c.ff_size),
                              static_cast<double>(c.vocab_size), static_cast<double>(c.max_seq_len), c.dropout});
}

inline ModelConfig config_from_tensor(const Tensor& t) {
    if (t.rank() != 1 || t.numel() != 7) throw std::runtime_error("checkpoint: malformed __config__ tensor");
    ModelConfig c;
    c.num_layers = static_cast<int>(t(0));
    c.num_heads = static_cast<int>(t(1));
    c.hidden_size = static_cast<int>(t(2));
    c.ff_size = static_cast<int>(t(3));
    c.vocab_size = static_cast<int>(t(4));
    c.max_seq_len = static_cast<int>(t(5));
    c.dropout = t(6);
    return c;
}

inline void save_model(const TransformerModel& model, const std::string& path) {
    Checkpoint ckpt;
    ckpt.add(kConfigTensorName, config_to_tensor(model.config));
    for (const auto& [name, t] : model.named_parameters()) ckpt.add(name, t);
    ckpt.save(path);
}

inline TransformerModel load_model(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    const Tensor* cfg_tensor = ckpt.find(kConfigTensorName);
    if (cfg_tensor == nullptr) throw std::runtime_error("checkpoint: '" + path + "' has no __config__ tensor");
    const ModelConfig cfg = config_from_tensor(*cfg_tensor);
    TransformerModel model = zeros_model(cfg);
    for (auto& [name, t] : model.named_parameters()) {
        const Tensor* src = ckpt.find(name);
        if (src == nullptr) throw std::runtime_error("checkpoint: '" + path + "' is missing tensor '" + name + "'");
        if (src->shape() != t.shape())
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_str(src->shape()) +
                                     ", expected " + shape_str(t.shape()));
        Tensor dst = t;
        dst.values() = src->values();
    }
    return model;
}

} // namespace kdlab
