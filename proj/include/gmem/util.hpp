#pragma once

#include <bit>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "gmem/tensor.hpp"

namespace gmem {

using Rng = std::mt19937_64;

using TokenId = std::int32_t;
using Segment = std::vector<TokenId>;

inline Tensor random_normal(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

/// FNV-1a over raw bytes; used to fingerprint frozen weights.
class Fnv1a {
public:
    void update(std::span<const std::byte> bytes) {
        for (auto b : bytes) {
            hash_ ^= static_cast<std::uint64_t>(b);
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const Tensor& t) { update(std::as_bytes(std::span(t.values()))); }
    void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
    std::uint64_t digest() const noexcept { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Mix a base seed with a stream index so sibling generators stay independent.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace gmem
