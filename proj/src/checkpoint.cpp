#include "povt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint/dataset IO assumes a little-endian host");

namespace povt {

namespace {

constexpr char kMagic[8] = {'P', 'O', 'V', 'T', 'C', 'K', 'P', 'T'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is, const std::string& what) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error("checkpoint: truncated while reading " + what + " at offset " +
                                 std::to_string(is.tellg()));
    return v;
}

uint64_t read_u64(std::istream& is, const std::string& what) {
    uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw std::runtime_error("checkpoint: truncated while reading " + what);
    return v;
}

} // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
    for (const auto& [n, _] : tensors_)
        if (n == name) throw std::invalid_argument("checkpoint: duplicate tensor " + name);
    tensors_.emplace_back(name, t);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, _] : tensors_)
        if (n == name) return true;
    return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors_)
        if (n == name) return t;
    throw std::runtime_error("checkpoint: missing tensor " + name);
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 8);
    write_u32(os, kVersion);
    write_u64(os, config_json.size());
    os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    write_u32(os, static_cast<uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) write_u32(os, static_cast<uint32_t>(t.dim(i)));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(double)) * t.size());
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(is, "version");
    if (version != kVersion)
        throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kVersion) + ")");
    Checkpoint ck;
    const uint64_t cfg_len = read_u64(is, "config length");
    ck.config_json.resize(cfg_len);
    if (!is.read(ck.config_json.data(), static_cast<std::streamsize>(cfg_len)))
        throw std::runtime_error("checkpoint: truncated config block");
    const uint32_t count = read_u32(is, "tensor count");
    for (uint32_t k = 0; k < count; ++k) {
        const uint32_t name_len = read_u32(is, "tensor name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw std::runtime_error("checkpoint: truncated tensor name");
        const uint32_t ndim = read_u32(is, "tensor rank");
        Shape shape(ndim);
        for (uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(read_u32(is, "tensor dim"));
        Tensor t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data()),
                     static_cast<std::streamsize>(sizeof(double)) * t.size()))
            throw std::runtime_error("checkpoint: truncated data for tensor " + name +
                                     " at offset " + std::to_string(is.tellg()));
        ck.tensors_.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

} // namespace povt
