#include "mddet/fmnms.hpp"

#include <stdexcept>

namespace mddet {

int class_argmax(const std::vector<double>& cls, int candidate, int classes) {
    const std::size_t base = static_cast<std::size_t>(candidate) * classes;
    int best = 0;
    for (int k = 1; k < classes; ++k)
        if (cls[base + k] > cls[base + best]) best = k;
    return best;
}

SoftLabelGrid SoftLabelGrid::from_decoded_all_kept(const DecodedGrid& d) {
    SoftLabelGrid s;
    s.hg = d.hg;
    s.wg = d.wg;
    s.n_anchors = d.n_anchors;
    s.classes = d.classes;
    s.obj = d.obj;
    s.cls = d.cls;
    s.box = d.box;
    s.suppressed.assign(d.candidates(), 0);
    return s;
}

SoftLabelGrid fm_nms(const DecodedGrid& teacher, int window) {
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("fm_nms: window must be odd and >= 1, got " +
                                    std::to_string(window));
    SoftLabelGrid s = SoftLabelGrid::from_decoded_all_kept(teacher);
    const int radius = (window - 1) / 2;
    const int n = teacher.n_anchors;

    std::vector<int> argmax(teacher.candidates());
    for (int i = 0; i < teacher.candidates(); ++i)
        argmax[i] = class_argmax(teacher.cls, i, teacher.classes);

    for (int y = 0; y < teacher.hg; ++y)
        for (int x = 0; x < teacher.wg; ++x)
            for (int a = 0; a < n; ++a) {
                const int i = teacher.idx(y, x, a);
                const double oi = teacher.obj[i];
                bool beaten = false;
                for (int vy = std::max(0, y - radius);
                     vy <= std::min(teacher.hg - 1, y + radius) && !beaten; ++vy)
                    for (int vx = std::max(0, x - radius);
                         vx <= std::min(teacher.wg - 1, x + radius) && !beaten; ++vx)
                        for (int va = 0; va < n; ++va) {
                            const int j = teacher.idx(vy, vx, va);
                            if (j == i || argmax[j] != argmax[i]) continue;
                            const double oj = teacher.obj[j];
                            if (oj > oi || (oj == oi && j < i)) {  // scan-order tie break
                                beaten = true;
                                break;
                            }
                        }
                if (beaten) s.suppressed[i] = 1;
            }
    return s;
}

SuppressionStats suppression_stats(const SoftLabelGrid& grid) {
    SuppressionStats st;
    st.kept_per_class.assign(grid.classes, 0);
    st.suppressed_per_class.assign(grid.classes, 0);
    for (int i = 0; i < grid.candidates(); ++i) {
        const int k = class_argmax(grid.cls, i, grid.classes);
        if (grid.suppressed[i]) {
            ++st.suppressed;
            ++st.suppressed_per_class[k];
        } else {
            ++st.kept;
            ++st.kept_per_class[k];
        }
    }
    return st;
}

}  // namespace mddet
