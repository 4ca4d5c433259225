#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mddet/tensor.hpp"

namespace mddet {

// Center-format box, normalized to image size.
struct BBox {
    double cx = 0, cy = 0, w = 0, h = 0;
};

double iou(const BBox& a, const BBox& b);

// Head tensor channel layout, per anchor block of size K+5:
//   [tx, ty, tw, th, t_obj, class logits 0..K-1]
// Decode applies sigmoid to tx/ty/t_obj, softmax over class logits, and the
// anchor-relative exponential size transform:
//   cx = (sigmoid(tx) + cell_x) / W_g        w = anchor_w * exp(tw) / W_g
// tw/th are clamped at +40 to keep outputs finite; clamped slots carry zero
// size gradient (flagged in size_clamped).
struct DecodedGrid {
    int hg = 0, wg = 0, n_anchors = 0, classes = 0;
    std::vector<std::pair<double, double>> anchors;  // cell units
    std::vector<double> obj;                 // per candidate
    std::vector<double> cls;                 // per candidate * classes
    std::vector<BBox> box;
    std::vector<std::uint8_t> size_clamped;  // bit 1: w clamped, bit 2: h clamped

    int idx(int y, int x, int a) const { return (y * wg + x) * n_anchors + a; }
    int candidates() const { return hg * wg * n_anchors; }
};

DecodedGrid decode(const Tensor4& raw, int sample,
                   const std::vector<std::pair<double, double>>& anchors, int classes);

struct TargetGrid {
    int hg = 0, wg = 0, n_anchors = 0, classes = 0;
    std::vector<std::uint8_t> responsible;  // per candidate
    std::vector<double> obj_gt;             // IoU(decoded prediction, GT); 0 when not responsible
    std::vector<int> cls_gt;                // class index; -1 when not responsible
    std::vector<BBox> box_gt;
    int dropped = 0;  // GTs that found no free anchor in their cell
};

// For each GT the cell containing its center is responsible; the free anchor
// with the best co-centered shape IoU wins (ties to the lowest index). A later
// GT landing in an occupied cell takes the best remaining anchor.
TargetGrid assign_targets(const std::vector<std::pair<int, BBox>>& gts,
                          int hg, int wg,
                          const std::vector<std::pair<double, double>>& anchors,
                          const DecodedGrid& decoded);

struct Detection {
    BBox box;
    double objectness = 0;
    int cls = 0;
    double score = 0;  // objectness * max class prob
};

std::vector<Detection> flatten_detections(const DecodedGrid& decoded, double obj_threshold);

}  // namespace mddet
