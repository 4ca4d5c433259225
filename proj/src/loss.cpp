#include "mddet/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace mddet {

namespace {

void require_dims(const DecodedGrid& s, int hg, int wg, int n, int k, const char* where) {
    if (s.hg != hg || s.wg != wg || s.n_anchors != n || s.classes != k)
        throw std::invalid_argument(std::string(where) + ": grid dims mismatch");
}

// value and d(value)/d(pred) of the elementary regression term
inline double pair_term(double target, double pred, LossNorm norm, double& dpred) {
    const double d = pred - target;
    if (norm == LossNorm::L2) {
        dpred = 2.0 * d;
        return d * d;
    }
    dpred = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    return std::abs(d);
}

}  // namespace

void detection_loss(const DecodedGrid& student, const TargetGrid& targets, const LossConfig& cfg,
                    LossBreakdown& out, DecodedGrad* grad) {
    require_dims(student, targets.hg, targets.wg, targets.n_anchors, targets.classes,
                 "detection_loss");
    const int cand = student.candidates();
    const int K = student.classes;

    double f_obj = 0, f_cls = 0, f_bb = 0;
    for (int i = 0; i < cand; ++i) {
        const bool resp = targets.responsible[i] != 0;
        const double w_obj = resp ? 1.0 : cfg.noobj_weight;
        double d;
        f_obj += w_obj * pair_term(targets.obj_gt[i], student.obj[i], cfg.norm, d);
        if (grad) grad->obj[i] += w_obj * d;

        if (!resp) continue;

        for (int k = 0; k < K; ++k) {
            const double p_gt = (k == targets.cls_gt[i]) ? 1.0 : 0.0;
            f_cls += pair_term(p_gt, student.cls[static_cast<std::size_t>(i) * K + k], cfg.norm, d);
            if (grad) grad->cls[static_cast<std::size_t>(i) * K + k] += d;
        }

        const BBox& p = student.box[i];
        const BBox& t = targets.box_gt[i];
        f_bb += cfg.coord_weight * pair_term(t.cx, p.cx, cfg.norm, d);
        if (grad) grad->cx[i] += cfg.coord_weight * d;
        f_bb += cfg.coord_weight * pair_term(t.cy, p.cy, cfg.norm, d);
        if (grad) grad->cy[i] += cfg.coord_weight * d;
        f_bb += cfg.coord_weight * pair_term(std::sqrt(t.w), std::sqrt(p.w), cfg.norm, d);
        if (grad) grad->sw[i] += cfg.coord_weight * d;
        f_bb += cfg.coord_weight * pair_term(std::sqrt(t.h), std::sqrt(p.h), cfg.norm, d);
        if (grad) grad->sh[i] += cfg.coord_weight * d;
    }
    out.obj_det = f_obj;
    out.cls_det = f_cls;
    out.bbox_det = f_bb;
}

double distill_objectness(const DecodedGrid& student, const SoftLabelGrid& soft,
                          const LossConfig& cfg, DecodedGrad* grad) {
    require_dims(student, soft.hg, soft.wg, soft.n_anchors, soft.classes, "distill_objectness");
    double term = 0;
    for (int i = 0; i < student.candidates(); ++i) {
        if (soft.suppressed[i] && !cfg.fmnms_objectness_passthrough) continue;
        double d;
        term += cfg.lambda_d * pair_term(soft.obj[i], student.obj[i], cfg.norm, d);
        if (grad) grad->obj[i] += cfg.lambda_d * d;
    }
    return term;
}

double distill_class(const DecodedGrid& student, const SoftLabelGrid& soft,
                     const LossConfig& cfg, DecodedGrad* grad) {
    require_dims(student, soft.hg, soft.wg, soft.n_anchors, soft.classes, "distill_class");
    const int K = student.classes;
    double term = 0;
    for (int i = 0; i < student.candidates(); ++i) {
        if (soft.suppressed[i]) continue;
        const double scale = cfg.lambda_d * (cfg.objectness_scaling ? soft.obj[i] : 1.0);
        for (int k = 0; k < K; ++k) {
            const std::size_t ik = static_cast<std::size_t>(i) * K + k;
            double d;
            term += scale * pair_term(soft.cls[ik], student.cls[ik], cfg.norm, d);
            if (grad) grad->cls[ik] += scale * d;
        }
    }
    return term;
}

double distill_bbox(const DecodedGrid& student, const SoftLabelGrid& soft,
                    const LossConfig& cfg, DecodedGrad* grad) {
    require_dims(student, soft.hg, soft.wg, soft.n_anchors, soft.classes, "distill_bbox");
    double term = 0;
    for (int i = 0; i < student.candidates(); ++i) {
        if (soft.suppressed[i]) continue;
        const double scale =
            cfg.lambda_d * cfg.coord_weight * (cfg.objectness_scaling ? soft.obj[i] : 1.0);
        const BBox& p = student.box[i];
        const BBox& t = soft.box[i];
        double d;
        term += scale * pair_term(t.cx, p.cx, cfg.norm, d);
        if (grad) grad->cx[i] += scale * d;
        term += scale * pair_term(t.cy, p.cy, cfg.norm, d);
        if (grad) grad->cy[i] += scale * d;
        term += scale * pair_term(std::sqrt(t.w), std::sqrt(p.w), cfg.norm, d);
        if (grad) grad->sw[i] += scale * d;
        term += scale * pair_term(std::sqrt(t.h), std::sqrt(p.h), cfg.norm, d);
        if (grad) grad->sh[i] += scale * d;
    }
    return term;
}

LossBreakdown total_loss(const DecodedGrid& student, const TargetGrid* targets,
                         const SoftLabelGrid* soft, const LossConfig& cfg, DecodedGrad* grad) {
    LossBreakdown out;
    if (cfg.mode == LossMode::Labeled) {
        if (!targets) throw std::invalid_argument("total_loss: labeled mode requires targets");
        detection_loss(student, *targets, cfg, out, grad);
    } else {
        if (!soft) throw std::invalid_argument("total_loss: unlabeled mode requires soft labels");
    }
    if (soft && cfg.lambda_d != 0.0) {
        out.obj_distill = distill_objectness(student, *soft, cfg, grad);
        out.cls_distill = distill_class(student, *soft, cfg, grad);
        out.bbox_distill = distill_bbox(student, *soft, cfg, grad);
    }
    out.total = out.obj_det + out.obj_distill + out.cls_det + out.cls_distill + out.bbox_det +
                out.bbox_distill;
    return out;
}

void decode_backward(const DecodedGrid& decoded, const DecodedGrad& grad, Tensor4& raw_grad,
                     int sample) {
    const int K = decoded.classes;
    const int want = decoded.n_anchors * (K + 5);
    if (raw_grad.c != want || raw_grad.h != decoded.hg || raw_grad.w != decoded.wg)
        throw std::invalid_argument("decode_backward: raw_grad shape " + raw_grad.shape_str() +
                                    " does not match decoded grid");

    for (int y = 0; y < decoded.hg; ++y)
        for (int x = 0; x < decoded.wg; ++x)
            for (int a = 0; a < decoded.n_anchors; ++a) {
                const int i = decoded.idx(y, x, a);
                const int base = a * (K + 5);

                // sigmoid'(t) expressed through the forward value
                const double o = decoded.obj[i];
                raw_grad.at(sample, base + 4, y, x) += grad.obj[i] * o * (1.0 - o);

                const double sx = decoded.box[i].cx * decoded.wg - x;
                const double sy = decoded.box[i].cy * decoded.hg - y;
                raw_grad.at(sample, base + 0, y, x) +=
                    grad.cx[i] * sx * (1.0 - sx) / decoded.wg;
                raw_grad.at(sample, base + 1, y, x) +=
                    grad.cy[i] * sy * (1.0 - sy) / decoded.hg;

                // d sqrt(w)/d tw = sqrt(w)/2; zero where the size logit was clamped
                if (!(decoded.size_clamped[i] & 1))
                    raw_grad.at(sample, base + 2, y, x) +=
                        grad.sw[i] * 0.5 * std::sqrt(decoded.box[i].w);
                if (!(decoded.size_clamped[i] & 2))
                    raw_grad.at(sample, base + 3, y, x) +=
                        grad.sh[i] * 0.5 * std::sqrt(decoded.box[i].h);

                // softmax jacobian
                double dot = 0.0;
                for (int k = 0; k < K; ++k)
                    dot += grad.cls[static_cast<std::size_t>(i) * K + k] *
                           decoded.cls[static_cast<std::size_t>(i) * K + k];
                for (int k = 0; k < K; ++k) {
                    const double pk = decoded.cls[static_cast<std::size_t>(i) * K + k];
                    raw_grad.at(sample, base + 5 + k, y, x) +=
                        pk * (grad.cls[static_cast<std::size_t>(i) * K + k] - dot);
                }
            }
}

}  // namespace mddet
