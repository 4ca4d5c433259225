#pragma once

#include <cstdint>
#include <vector>

#include "mddet/head.hpp"

namespace mddet {

// Teacher predictions carried as distillation soft labels; suppressed
// candidates contribute nothing to the distillation terms.
struct SoftLabelGrid {
    int hg = 0, wg = 0, n_anchors = 0, classes = 0;
    std::vector<double> obj;
    std::vector<double> cls;
    std::vector<BBox> box;
    std::vector<std::uint8_t> suppressed;

    int idx(int y, int x, int a) const { return (y * wg + x) * n_anchors + a; }
    int candidates() const { return hg * wg * n_anchors; }

    // No-FM-NMS path: every candidate kept.
    static SoftLabelGrid from_decoded_all_kept(const DecodedGrid& d);
};

// Feature-Map-NMS. A candidate is suppressed when any candidate with the same
// class argmax inside the window centered on its cell (Chebyshev cell distance
// <= (window-1)/2, all anchors, including its own cell) has strictly higher
// objectness, or equal objectness and an earlier (row, col, anchor) position.
// Survivors are exactly the per-class local maxima, which makes the operation
// idempotent and order-independent.
SoftLabelGrid fm_nms(const DecodedGrid& teacher, int window);

struct SuppressionStats {
    long long kept = 0;
    long long suppressed = 0;
    std::vector<long long> kept_per_class;
    std::vector<long long> suppressed_per_class;
};

SuppressionStats suppression_stats(const SoftLabelGrid& grid);

int class_argmax(const std::vector<double>& cls, int candidate, int classes);

}  // namespace mddet
