#include "mddet/head.hpp"

#include <algorithm>
#include <cmath>

namespace mddet {

namespace {
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
constexpr double kSizeLogitClamp = 40.0;
}  // namespace

double iou(const BBox& a, const BBox& b) {
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
    const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
    const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
    const double ih = std::min(ay1, by1) - std::max(ay0, by0);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni <= 0 ? 0.0 : inter / uni;
}

DecodedGrid decode(const Tensor4& raw, int sample,
                   const std::vector<std::pair<double, double>>& anchors, int classes) {
    const int n_anchors = static_cast<int>(anchors.size());
    const int want = n_anchors * (classes + 5);
    if (raw.c != want)
        throw std::invalid_argument("decode: raw tensor has " + std::to_string(raw.c) +
                                    " channels, need N*(K+5) = " + std::to_string(want));
    if (sample < 0 || sample >= raw.n)
        throw std::invalid_argument("decode: sample index out of range");

    DecodedGrid g;
    g.hg = raw.h;
    g.wg = raw.w;
    g.n_anchors = n_anchors;
    g.classes = classes;
    g.anchors = anchors;
    const int cand = g.candidates();
    g.obj.resize(cand);
    g.cls.resize(static_cast<std::size_t>(cand) * classes);
    g.box.resize(cand);
    g.size_clamped.assign(cand, 0);

    for (int y = 0; y < g.hg; ++y)
        for (int x = 0; x < g.wg; ++x)
            for (int a = 0; a < n_anchors; ++a) {
                const int base = a * (classes + 5);
                const int i = g.idx(y, x, a);
                const double tx = raw.at(sample, base + 0, y, x);
                const double ty = raw.at(sample, base + 1, y, x);
                double tw = raw.at(sample, base + 2, y, x);
                double th = raw.at(sample, base + 3, y, x);
                const double to = raw.at(sample, base + 4, y, x);

                if (tw > kSizeLogitClamp) {
                    tw = kSizeLogitClamp;
                    g.size_clamped[i] |= 1;
                }
                if (th > kSizeLogitClamp) {
                    th = kSizeLogitClamp;
                    g.size_clamped[i] |= 2;
                }

                g.obj[i] = sigmoid(to);
                BBox& b = g.box[i];
                b.cx = (sigmoid(tx) + x) / g.wg;
                b.cy = (sigmoid(ty) + y) / g.hg;
                b.w = anchors[a].first * std::exp(tw) / g.wg;
                b.h = anchors[a].second * std::exp(th) / g.hg;

                // stable softmax over the class logits
                double mx = raw.at(sample, base + 5, y, x);
                for (int k = 1; k < classes; ++k)
                    mx = std::max(mx, raw.at(sample, base + 5 + k, y, x));
                double sum = 0.0;
                for (int k = 0; k < classes; ++k) {
                    const double e = std::exp(raw.at(sample, base + 5 + k, y, x) - mx);
                    g.cls[static_cast<std::size_t>(i) * classes + k] = e;
                    sum += e;
                }
                for (int k = 0; k < classes; ++k)
                    g.cls[static_cast<std::size_t>(i) * classes + k] /= sum;
            }
    return g;
}

namespace {

// IoU of two co-centered boxes: used for anchor assignment.
double shape_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    const double uni = w1 * h1 + w2 * h2 - inter;
    return uni <= 0 ? 0.0 : inter / uni;
}

}  // namespace

TargetGrid assign_targets(const std::vector<std::pair<int, BBox>>& gts,
                          int hg, int wg,
                          const std::vector<std::pair<double, double>>& anchors,
                          const DecodedGrid& decoded) {
    if (decoded.hg != hg || decoded.wg != wg ||
        decoded.n_anchors != static_cast<int>(anchors.size()))
        throw std::invalid_argument("assign_targets: decoded grid dims do not match");

    TargetGrid t;
    t.hg = hg;
    t.wg = wg;
    t.n_anchors = static_cast<int>(anchors.size());
    t.classes = decoded.classes;
    const int cand = hg * wg * t.n_anchors;
    t.responsible.assign(cand, 0);
    t.obj_gt.assign(cand, 0.0);
    t.cls_gt.assign(cand, -1);
    t.box_gt.assign(cand, BBox{});

    for (const auto& [cls, box] : gts) {
        if (cls < 0 || cls >= decoded.classes)
            throw std::invalid_argument("assign_targets: class index " + std::to_string(cls) +
                                        " out of range");
        const int cell_x = std::min(wg - 1, std::max(0, static_cast<int>(box.cx * wg)));
        const int cell_y = std::min(hg - 1, std::max(0, static_cast<int>(box.cy * hg)));

        int best_a = -1;
        double best = -1.0;
        for (int a = 0; a < t.n_anchors; ++a) {
            if (t.responsible[decoded.idx(cell_y, cell_x, a)]) continue;  // taken by earlier GT
            const double s = shape_iou(box.w, box.h, anchors[a].first / wg,
                                       anchors[a].second / hg);
            if (s > best) {  // strict: ties keep the lowest index
                best = s;
                best_a = a;
            }
        }
        if (best_a < 0) {
            ++t.dropped;  // all anchors in this cell already claimed
            continue;
        }
        const int i = decoded.idx(cell_y, cell_x, best_a);
        t.responsible[i] = 1;
        t.obj_gt[i] = iou(decoded.box[i], box);
        t.cls_gt[i] = cls;
        t.box_gt[i] = box;
    }
    return t;
}

std::vector<Detection> flatten_detections(const DecodedGrid& decoded, double obj_threshold) {
    if (obj_threshold < 0.0 || obj_threshold > 1.0)
        throw std::invalid_argument("flatten_detections: threshold must be in [0,1]");
    std::vector<Detection> out;
    const int cand = decoded.candidates();
    for (int i = 0; i < cand; ++i) {
        if (decoded.obj[i] < obj_threshold) continue;
        int best_k = 0;
        double best_p = decoded.cls[static_cast<std::size_t>(i) * decoded.classes];
        for (int k = 1; k < decoded.classes; ++k) {
            const double p = decoded.cls[static_cast<std::size_t>(i) * decoded.classes + k];
            if (p > best_p) {
                best_p = p;
                best_k = k;
            }
        }
        out.push_back({decoded.box[i], decoded.obj[i], best_k, decoded.obj[i] * best_p});
    }
    return out;
}

}  // namespace mddet
