#pragma once
// Visibility masks for the two contextual memories.
//
// For query position t (0-based) and stored pair i, all conjoined with
// same-document membership:
//
//   short-term: t-h+1 <= i <= t-1      (trailing window of h-1 pairs)
//   long-term:  i <= t-m               ("before position t-m", inclusive)
//
// m <= h guarantees the two windows meet or overlap (no blind gap).

#include <cstdint>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic {

struct MaskSet {
    int seq_len = 0;
    std::vector<std::uint8_t> short_mask;  // [seq_len * seq_len], row = query
    std::vector<std::uint8_t> long_mask;
    std::vector<std::uint8_t> doc_mask;    // same-document indicator (causal)
    std::vector<int> short_counts;         // visible pairs per query row
    std::vector<int> long_counts;
};

inline MaskSet build_masks(int seq_len, int h, int m, const std::vector<int>& doc_ids) {
    detail::require(seq_len >= 1, "build_masks: seq_len must be >= 1");
    detail::require(1 <= m && m <= h, "build_masks: need 1 <= m <= h (no-gap window design)");
    detail::require(static_cast<int>(doc_ids.size()) == seq_len, "build_masks: doc_ids length");
    MaskSet ms;
    ms.seq_len = seq_len;
    std::size_t n2 = static_cast<std::size_t>(seq_len) * seq_len;
    ms.short_mask.assign(n2, 0);
    ms.long_mask.assign(n2, 0);
    ms.doc_mask.assign(n2, 0);
    ms.short_counts.assign(seq_len, 0);
    ms.long_counts.assign(seq_len, 0);
    for (int t = 0; t < seq_len; ++t) {
        std::size_t row = static_cast<std::size_t>(t) * seq_len;
        for (int i = 0; i <= t; ++i) {
            if (doc_ids[i] != doc_ids[t]) continue;
            ms.doc_mask[row + i] = 1;
            bool in_short = i >= t - h + 1 && i <= t - 1;
            bool in_long = i <= t - m;
            if (in_short) {
                ms.short_mask[row + i] = 1;
                ++ms.short_counts[t];
            }
            if (in_long) {
                ms.long_mask[row + i] = 1;
                ++ms.long_counts[t];
            }
        }
    }
    return ms;
}

// Plain causal same-document mask (pair i visible iff i <= t), used by the
// position-encoded attention comparator.
inline std::vector<std::uint8_t> causal_doc_mask(const std::vector<int>& doc_ids) {
    int seq_len = static_cast<int>(doc_ids.size());
    std::vector<std::uint8_t> m(static_cast<std::size_t>(seq_len) * seq_len, 0);
    for (int t = 0; t < seq_len; ++t)
        for (int i = 0; i <= t; ++i)
            if (doc_ids[i] == doc_ids[t]) m[static_cast<std::size_t>(t) * seq_len + i] = 1;
    return m;
}

}  // namespace mosaic
