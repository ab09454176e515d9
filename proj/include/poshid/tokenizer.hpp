#pragma once

// Byte-level tokenizer: ids 0..255 are raw bytes, id 256 is BOS. encode()
// prepends BOS so position 0 is always the begin-of-sequence marker;
// decode() drops it. Round-trips are byte-exact by construction.

#include <string>
#include <vector>

#include "poshid/common.hpp"

namespace poshid {

constexpr int kBosId = 256;
constexpr int kByteVocab = 257;  // 256 bytes + BOS

inline std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size() + 1);
    ids.push_back(kBosId);
    for (unsigned char ch : text) ids.push_back(static_cast<int>(ch));
    return ids;
}

inline std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        require(id >= 0 && id < kByteVocab, "decode: token id out of range");
        if (id == kBosId) continue;
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

}  // namespace poshid
