#pragma once

// Binary checkpoint, little-endian throughout:
//   "GMEM"  u32 version  u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload
//   u64 step  u32 config length  config text
// The container is self-describing; `restore` matches tensors to a model by
// name and shape.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gmem/memory_loop.hpp"
#include "gmem/optimizer.hpp"

namespace gmem {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::uint64_t step = 0;
    std::string config_text;

    const Tensor* find(std::string_view name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void bytes(std::string_view s) { out_.append(s); }
    std::string take() { return std::move(out_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string out_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view in) : in_(in) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(get(8)); }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const noexcept { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
    detail::ByteWriter w;
    w.bytes("GMEM");
    w.u32(c.version);
    w.u32(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        for (double v : t.values()) w.f64(v);
    }
    w.u64(c.step);
    w.u32(static_cast<std::uint32_t>(c.config_text.size()));
    w.bytes(c.config_text);
    return w.take();
}

inline Checkpoint deserialize(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(4) != "GMEM") throw IoError("not a checkpoint (bad magic)");
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(c.version));
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(r.bytes(r.u32()));
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw IoError("checkpoint tensor '" + name + "' has implausible rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = r.u64();
            if (d != 0 && n > (std::uint64_t{1} << 40) / d) throw IoError("checkpoint tensor '" + name + "' is too large");
            n *= d;
        }
        if (bytes.size() / 8 < n) throw IoError("checkpoint truncated in tensor '" + name + "'");
        Tensor t(shape);
        for (auto& v : t.values()) v = r.f64();
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    c.step = r.u64();
    c.config_text = std::string(r.bytes(r.u32()));
    if (!r.done()) throw IoError("trailing bytes after checkpoint");
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    const std::string bytes = serialize(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

/// Backbone, memory, injection and (when given) optimizer state.
inline Checkpoint capture(GMemModel& model, const Adam* adam, std::uint64_t step, std::string config_text) {
    Checkpoint c;
    c.step = step;
    c.config_text = std::move(config_text);
    for (const Parameter* p : model.backbone().parameters()) c.tensors.emplace_back(p->name, p->value);
    const ParamRefs trainable = model.trainable_parameters();
    for (const Parameter* p : trainable) c.tensors.emplace_back(p->name, p->value);
    if (adam) {
        for (std::size_t k = 0; k < trainable.size(); ++k) c.tensors.emplace_back("adam.m." + trainable[k]->name, adam->first_moments()[k]);
        for (std::size_t k = 0; k < trainable.size(); ++k) c.tensors.emplace_back("adam.v." + trainable[k]->name, adam->second_moments()[k]);
    }
    return c;
}

/// Loads weights (and optimizer state when `adam` is given) into a model built
/// from the same configuration. Missing tensors or shape mismatches are
/// configuration errors.
inline void restore(const Checkpoint& c, GMemModel& model, Adam* adam = nullptr) {
    auto load = [&](const std::string& name, Tensor& into) {
        const Tensor* t = c.find(name);
        if (!t) throw ConfigError("checkpoint lacks tensor '" + name + "'");
        if (t->shape() != into.shape()) {
            throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(t->shape()) + ", model expects " +
                              shape_str(into.shape()));
        }
        into = *t;
    };
    for (Parameter* p : model.backbone().parameters()) load(p->name, p->value);
    const ParamRefs trainable = model.trainable_parameters();
    for (Parameter* p : trainable) load(p->name, p->value);
    if (adam) {
        for (std::size_t k = 0; k < trainable.size(); ++k) load("adam.m." + trainable[k]->name, adam->first_moments()[k]);
        for (std::size_t k = 0; k < trainable.size(); ++k) load("adam.v." + trainable[k]->name, adam->second_moments()[k]);
        adam->set_steps_taken(c.step);
    }
}

}  // namespace gmem
