#pragma once

// Shared error types, index conventions and small helpers.
//
// Index conventions used across the library:
//   - layers and channels are 1-based (layer 1 is the first decoder block,
//     channel 1 is the first hidden dimension); ranges are inclusive
//   - token positions and sequence indices are 0-based
// Conversions to 0-based storage happen at the lowest level only.

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace poshid {

// Raised when a linear solve or similar numeric step cannot proceed.
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Inclusive 1-based layer range [lo, hi].
struct LayerRange {
    int lo = 1;
    int hi = 1;

    bool contains(int layer) const { return layer >= lo && layer <= hi; }
    void validate(int n_layers, const std::string& what) const {
        require(lo >= 1 && hi >= lo && hi <= n_layers,
                what + ": layer range [" + std::to_string(lo) + "," + std::to_string(hi) +
                    "] outside [1," + std::to_string(n_layers) + "]");
    }
};

// Contiguous set of token positions [begin, end), 0-based, with a semantic label.
struct Segment {
    int begin = 0;
    int end = 0;  // exclusive
    std::string label;

    int size() const { return end - begin; }
    bool contains(int pos) const { return pos >= begin && pos < end; }
    void validate(int seq_len, const std::string& what) const {
        require(begin >= 0 && end > begin && end <= seq_len,
                what + ": segment [" + std::to_string(begin) + "," + std::to_string(end) +
                    ") invalid for sequence length " + std::to_string(seq_len));
    }
};

// Shortest round-trip decimal rendering; locale-free and deterministic, so
// emitted CSV/SVG/JSON bytes are reproducible.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// SplitMix64 step; used to derive independent sub-seeds from one master seed
// so that parallel work never shares generator state.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace poshid
