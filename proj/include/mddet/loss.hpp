#pragma once

#include <vector>

#include "mddet/fmnms.hpp"
#include "mddet/head.hpp"
#include "mddet/tensor.hpp"

namespace mddet {

// Six additive objective terms. Box terms operate on (cx, cy, sqrt w, sqrt h).
struct LossBreakdown {
    double obj_det = 0, obj_distill = 0;
    double cls_det = 0, cls_distill = 0;
    double bbox_det = 0, bbox_distill = 0;
    double total = 0;
};

enum class LossMode { Labeled, Unlabeled };
enum class LossNorm { L2, L1 };

struct LossConfig {
    double lambda_d = 1.0;      // distillation weight
    double coord_weight = 5.0;  // box regression weight
    double noobj_weight = 0.5;  // objectness weight on non-responsible slots
    LossMode mode = LossMode::Labeled;
    bool objectness_scaling = true;            // ablation: teacher-objectness scaling
    bool fmnms_objectness_passthrough = false;  // suppressed candidates still hit Eq. 2
    LossNorm norm = LossNorm::L2;
};

// Gradient with respect to decoded quantities; fed into decode_backward.
struct DecodedGrad {
    std::vector<double> obj, cls;
    std::vector<double> cx, cy, sw, sh;

    void init(int candidates, int classes) {
        obj.assign(candidates, 0.0);
        cls.assign(static_cast<std::size_t>(candidates) * classes, 0.0);
        cx.assign(candidates, 0.0);
        cy.assign(candidates, 0.0);
        sw.assign(candidates, 0.0);
        sh.assign(candidates, 0.0);
    }
};

// Detection terms: objectness over every candidate (noobj_weight off the
// responsible slots), class and box terms over responsible slots only.
void detection_loss(const DecodedGrid& student, const TargetGrid& targets, const LossConfig& cfg,
                    LossBreakdown& out, DecodedGrad* grad);

// Distillation terms over unsuppressed soft-label candidates. The objectness
// term is unscaled; class and box terms are scaled by teacher objectness
// (or 1 when objectness scaling is disabled).
double distill_objectness(const DecodedGrid& student, const SoftLabelGrid& soft,
                          const LossConfig& cfg, DecodedGrad* grad);
double distill_class(const DecodedGrid& student, const SoftLabelGrid& soft,
                     const LossConfig& cfg, DecodedGrad* grad);
double distill_bbox(const DecodedGrid& student, const SoftLabelGrid& soft,
                    const LossConfig& cfg, DecodedGrad* grad);

// Unified objective. Labeled mode needs targets (detection + optional
// distillation); unlabeled mode needs soft labels and produces distillation
// terms only.
LossBreakdown total_loss(const DecodedGrid& student, const TargetGrid* targets,
                         const SoftLabelGrid* soft, const LossConfig& cfg, DecodedGrad* grad);

// Chain rule from decoded quantities into the raw head tensor (accumulates
// into the given sample's slice).
void decode_backward(const DecodedGrid& decoded, const DecodedGrad& grad, Tensor4& raw_grad,
                     int sample);

}  // namespace mddet
