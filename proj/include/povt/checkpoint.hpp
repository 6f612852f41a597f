#pragma once

#include "povt/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace povt {

// Versioned binary container shared by the codec and the prior: magic bytes
// "POVTCKPT", a u32 version, a JSON config block, then named tensor blobs
// with shape headers. All multi-byte fields little-endian, data float64.
class Checkpoint {
public:
    static constexpr uint32_t kVersion = 1;

    std::string config_json = "{}";

    void add(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

} // namespace povt
