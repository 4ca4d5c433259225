#include "mddet/ops.hpp"

#include <algorithm>
#include <cmath>

#include "mddet/threading.hpp"

namespace mddet {

namespace {

struct ConvDims {
    int oh = 0, ow = 0, k = 0, positions = 0;  // per-sample output positions
};

ConvDims conv_dims(const Tensor4& input, const ConvLayer& layer) {
    const int kh = layer.weight.h, kw = layer.weight.w;
    if (kh != kw || (kh != 1 && kh != 3))
        throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3, got " +
                                    std::to_string(kh) + "x" + std::to_string(kw));
    if (layer.weight.c != input.c)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(input.c) +
                                    " do not match layer in_ch " + std::to_string(layer.weight.c));
    if (layer.stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (layer.pad < 0) throw std::invalid_argument("conv2d: pad must be non-negative");
    ConvDims d;
    d.oh = (input.h + 2 * layer.pad - kh) / layer.stride + 1;
    d.ow = (input.w + 2 * layer.pad - kw) / layer.stride + 1;
    if (d.oh <= 0 || d.ow <= 0)
        throw std::invalid_argument("conv2d: empty output for input " + input.shape_str());
    d.k = input.c * kh * kw;
    d.positions = d.oh * d.ow;
    return d;
}

// col is (k) x (n * positions), k index = (ic*kH + ky)*kW + kx.
std::vector<double> im2col(const Tensor4& input, const ConvLayer& layer, const ConvDims& d) {
    const int kh = layer.weight.h, kw = layer.weight.w;
    const int stride = layer.stride, pad = layer.pad;
    std::vector<double> col(static_cast<std::size_t>(d.k) * input.n * d.positions, 0.0);
    const std::size_t cols = static_cast<std::size_t>(input.n) * d.positions;
    for (int ic = 0; ic < input.c; ++ic) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const std::size_t krow = (static_cast<std::size_t>(ic) * kh + ky) * kw + kx;
                double* dst = col.data() + krow * cols;
                for (int b = 0; b < input.n; ++b) {
                    const double* src = input.v.data() + input.index(b, ic, 0, 0);
                    double* out = dst + static_cast<std::size_t>(b) * d.positions;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= input.h) { out += d.ow; continue; }
                        const double* row = src + static_cast<std::size_t>(iy) * input.w;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            *out++ = (ix >= 0 && ix < input.w) ? row[ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
    return col;
}

}  // namespace

ConvLayer make_conv(int out_ch, int in_ch, int k, int stride, int pad) {
    if (k != 1 && k != 3)
        throw std::invalid_argument("make_conv: kernel must be 1 or 3, got " + std::to_string(k));
    ConvLayer l;
    l.weight = Tensor4(out_ch, in_ch, k, k);
    l.bias.assign(out_ch, 0.0);
    l.stride = stride;
    l.pad = pad;
    return l;
}

Tensor4 conv2d(const Tensor4& input, const ConvLayer& layer) {
    const ConvDims d = conv_dims(input, layer);
    const int oc = layer.weight.n;
    Tensor4 out(input.n, oc, d.oh, d.ow);

    const std::vector<double> col = im2col(input, layer, d);
    const std::size_t pp = static_cast<std::size_t>(input.n) * d.positions;

    // Seed each output row with its bias, then accumulate k ascending: matches
    // a nested-loop conv that starts from the bias term.
    parallel_for(static_cast<std::size_t>(oc), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c)
            for (int b = 0; b < input.n; ++b) {
                double* dst = out.v.data() + out.index(b, static_cast<int>(c), 0, 0);
                std::fill(dst, dst + d.positions, layer.bias[c]);
            }
    });
    // out rows are (b, oc) blocks; gemm wants (oc, b*positions). Use strided
    // row walks. k is unrolled by 4 but each output element still accumulates
    // its terms in ascending k order, one rounding per term.
    parallel_for(static_cast<std::size_t>(oc), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            const double* wrow = layer.weight.v.data() + c * d.k;
            for (int b = 0; b < input.n; ++b) {
                double* crow = out.v.data() + out.index(b, static_cast<int>(c), 0, 0);
                const double* bbase = col.data() + static_cast<std::size_t>(b) * d.positions;
                int k = 0;
                for (; k + 4 <= d.k; k += 4) {
                    const double w0 = wrow[k], w1 = wrow[k + 1], w2 = wrow[k + 2], w3 = wrow[k + 3];
                    const double* b0 = bbase + static_cast<std::size_t>(k) * pp;
                    const double* b1 = b0 + pp;
                    const double* b2 = b1 + pp;
                    const double* b3 = b2 + pp;
                    for (int p = 0; p < d.positions; ++p) {
                        double t = crow[p];
                        t += w0 * b0[p];
                        t += w1 * b1[p];
                        t += w2 * b2[p];
                        t += w3 * b3[p];
                        crow[p] = t;
                    }
                }
                for (; k < d.k; ++k) {
                    const double wv = wrow[k];
                    const double* bk = bbase + static_cast<std::size_t>(k) * pp;
                    for (int p = 0; p < d.positions; ++p) crow[p] += wv * bk[p];
                }
            }
        }
    });
    return out;
}

ConvGrads conv2d_backward(const Tensor4& input, const ConvLayer& layer, const Tensor4& out_grad) {
    const ConvDims d = conv_dims(input, layer);
    const int oc = layer.weight.n;
    if (out_grad.n != input.n || out_grad.c != oc || out_grad.h != d.oh || out_grad.w != d.ow)
        throw std::invalid_argument("conv2d_backward: out_grad shape " + out_grad.shape_str() +
                                    " does not match forward output");

    ConvGrads g;
    g.weight = Tensor4(oc, input.c, layer.weight.h, layer.weight.w);
    g.bias.assign(oc, 0.0);
    g.input = Tensor4(input.n, input.c, input.h, input.w);

    const std::vector<double> col = im2col(input, layer, d);
    const std::size_t pp = static_cast<std::size_t>(input.n) * d.positions;

    // weight grad: dW[c][k] = sum over (b, pos) ascending of og * col.
    // Four k rows share one pass over the og stream.
    parallel_for(static_cast<std::size_t>(oc), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            double* wg = g.weight.v.data() + c * d.k;
            double bg = 0.0;
            for (int b = 0; b < input.n; ++b) {
                const double* og = out_grad.v.data() + out_grad.index(b, static_cast<int>(c), 0, 0);
                for (int p = 0; p < d.positions; ++p) bg += og[p];
            }
            g.bias[c] = bg;
            int k = 0;
            for (; k + 4 <= d.k; k += 4) {
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                for (int b = 0; b < input.n; ++b) {
                    const double* og = out_grad.v.data() + out_grad.index(b, static_cast<int>(c), 0, 0);
                    const double* b0 = col.data() + static_cast<std::size_t>(k) * pp +
                                       static_cast<std::size_t>(b) * d.positions;
                    const double* b1 = b0 + pp;
                    const double* b2 = b1 + pp;
                    const double* b3 = b2 + pp;
                    for (int p = 0; p < d.positions; ++p) {
                        const double o = og[p];
                        a0 += o * b0[p];
                        a1 += o * b1[p];
                        a2 += o * b2[p];
                        a3 += o * b3[p];
                    }
                }
                wg[k] = a0;
                wg[k + 1] = a1;
                wg[k + 2] = a2;
                wg[k + 3] = a3;
            }
            for (; k < d.k; ++k) {
                const double* brow = col.data() + static_cast<std::size_t>(k) * pp;
                double acc = 0.0;
                for (int b = 0; b < input.n; ++b) {
                    const double* og = out_grad.v.data() + out_grad.index(b, static_cast<int>(c), 0, 0);
                    const double* bcol = brow + static_cast<std::size_t>(b) * d.positions;
                    for (int p = 0; p < d.positions; ++p) acc += og[p] * bcol[p];
                }
                wg[k] = acc;
            }
        }
    });

    // col grad: dcol[k][bp] = sum over oc ascending of W[oc][k] * og[oc][bp].
    std::vector<double> col_grad(col.size(), 0.0);
    parallel_for(static_cast<std::size_t>(d.k), [&](std::size_t k0, std::size_t k1) {
        for (std::size_t k = k0; k < k1; ++k) {
            double* dst = col_grad.data() + k * pp;
            for (int b = 0; b < input.n; ++b) {
                double* drow = dst + static_cast<std::size_t>(b) * d.positions;
                int c = 0;
                for (; c + 4 <= oc; c += 4) {
                    const double w0 = layer.weight.v[static_cast<std::size_t>(c) * d.k + k];
                    const double w1 = layer.weight.v[static_cast<std::size_t>(c + 1) * d.k + k];
                    const double w2 = layer.weight.v[static_cast<std::size_t>(c + 2) * d.k + k];
                    const double w3 = layer.weight.v[static_cast<std::size_t>(c + 3) * d.k + k];
                    const double* o0 = out_grad.v.data() + out_grad.index(b, c, 0, 0);
                    const double* o1 = o0 + d.positions;
                    const double* o2 = o1 + d.positions;
                    const double* o3 = o2 + d.positions;
                    for (int p = 0; p < d.positions; ++p) {
                        double t = drow[p];
                        t += w0 * o0[p];
                        t += w1 * o1[p];
                        t += w2 * o2[p];
                        t += w3 * o3[p];
                        drow[p] = t;
                    }
                }
                for (; c < oc; ++c) {
                    const double wv = layer.weight.v[static_cast<std::size_t>(c) * d.k + k];
                    const double* og = out_grad.v.data() + out_grad.index(b, c, 0, 0);
                    for (int p = 0; p < d.positions; ++p) drow[p] += wv * og[p];
                }
            }
        }
    });

    // col2im scatter, fixed (k, b, pos) order.
    const int kh = layer.weight.h, kw = layer.weight.w;
    for (int ic = 0; ic < input.c; ++ic)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const std::size_t krow = (static_cast<std::size_t>(ic) * kh + ky) * kw + kx;
                const double* src = col_grad.data() + krow * pp;
                for (int b = 0; b < input.n; ++b) {
                    const double* s = src + static_cast<std::size_t>(b) * d.positions;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int iy = oy * layer.stride + ky - layer.pad;
                        if (iy < 0 || iy >= input.h) { s += d.ow; continue; }
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int ix = ox * layer.stride + kx - layer.pad;
                            if (ix >= 0 && ix < input.w) g.input.at(b, ic, iy, ix) += s[ox];
                        }
                        s += d.ow;
                    }
                }
            }
    return g;
}

Tensor4 leaky_relu(const Tensor4& t, double slope) {
    if (slope < 0.0 || slope >= 1.0)
        throw std::invalid_argument("leaky_relu: slope must be in [0,1)");
    Tensor4 out = t;
    for (double& x : out.v)
        if (x <= 0.0) x *= slope;
    return out;
}

Tensor4 leaky_relu_backward(const Tensor4& output, double slope, const Tensor4& out_grad) {
    require_same_shape(output, out_grad, "leaky_relu_backward");
    Tensor4 g = out_grad;
    for (std::size_t i = 0; i < g.v.size(); ++i)
        if (output.v[i] <= 0.0) g.v[i] *= slope;
    return g;
}

MaxPoolResult maxpool2(const Tensor4& t) {
    if (t.h % 2 != 0 || t.w % 2 != 0)
        throw std::invalid_argument("maxpool2: spatial dims must be even, got " + t.shape_str());
    MaxPoolResult r;
    r.out = Tensor4(t.n, t.c, t.h / 2, t.w / 2);
    r.argmax.resize(r.out.size());
    std::size_t o = 0;
    for (int b = 0; b < t.n; ++b)
        for (int c = 0; c < t.c; ++c)
            for (int oy = 0; oy < r.out.h; ++oy)
                for (int ox = 0; ox < r.out.w; ++ox, ++o) {
                    std::size_t best_idx = t.index(b, c, oy * 2, ox * 2);
                    double best = t.v[best_idx];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = t.index(b, c, oy * 2 + dy, ox * 2 + dx);
                            if (t.v[idx] > best) { best = t.v[idx]; best_idx = idx; }
                        }
                    r.out.v[o] = best;
                    r.argmax[o] = static_cast<std::uint32_t>(best_idx);
                }
    return r;
}

Tensor4 maxpool2_backward(const MaxPoolResult& fwd, const Tensor4& in_shape_like, const Tensor4& out_grad) {
    require_same_shape(fwd.out, out_grad, "maxpool2_backward");
    Tensor4 g(in_shape_like.n, in_shape_like.c, in_shape_like.h, in_shape_like.w);
    for (std::size_t o = 0; o < out_grad.v.size(); ++o)
        g.v[fwd.argmax[o]] += out_grad.v[o];
    return g;
}

Tensor4 channel_norm_train(const Tensor4& t, NormParams& p, NormCache& cache, bool update_running) {
    const int C = t.c;
    if (static_cast<int>(p.gamma.size()) != C)
        throw std::invalid_argument("channel_norm: gamma length " + std::to_string(p.gamma.size()) +
                                    " does not match channels " + std::to_string(C));
    const std::size_t m = static_cast<std::size_t>(t.n) * t.h * t.w;
    const std::size_t plane = static_cast<std::size_t>(t.h) * t.w;
    cache.inv_std.assign(C, 0.0);
    cache.xhat = Tensor4(t.n, t.c, t.h, t.w);
    Tensor4 out(t.n, t.c, t.h, t.w);

    std::vector<double> mean(C, 0.0), var(C, 0.0);
    parallel_for(static_cast<std::size_t>(C), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            double s = 0.0;
            for (int b = 0; b < t.n; ++b) {
                const double* src = t.v.data() + t.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i) s += src[i];
            }
            const double mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (int b = 0; b < t.n; ++b) {
                const double* src = t.v.data() + t.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = src[i] - mu;
                    sq += d * d;
                }
            }
            const double v = sq / static_cast<double>(m);
            mean[c] = mu;
            var[c] = v;
            const double inv = 1.0 / std::sqrt(v + kNormEps);
            cache.inv_std[c] = inv;
            const double gam = p.gamma[c], bet = p.beta[c];
            for (int b = 0; b < t.n; ++b) {
                const double* src = t.v.data() + t.index(b, static_cast<int>(c), 0, 0);
                double* xh = cache.xhat.v.data() + cache.xhat.index(b, static_cast<int>(c), 0, 0);
                double* dst = out.v.data() + out.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double h = (src[i] - mu) * inv;
                    xh[i] = h;
                    dst[i] = gam * h + bet;
                }
            }
        }
    });
    if (update_running) {
        for (int c = 0; c < C; ++c) {
            p.running_mean[c] = kRunningDecay * p.running_mean[c] + (1.0 - kRunningDecay) * mean[c];
            p.running_var[c] = kRunningDecay * p.running_var[c] + (1.0 - kRunningDecay) * var[c];
        }
    }
    return out;
}

Tensor4 channel_norm_eval(const Tensor4& t, const NormParams& p) {
    const int C = t.c;
    if (static_cast<int>(p.gamma.size()) != C)
        throw std::invalid_argument("channel_norm: gamma length " + std::to_string(p.gamma.size()) +
                                    " does not match channels " + std::to_string(C));
    const std::size_t plane = static_cast<std::size_t>(t.h) * t.w;
    Tensor4 out(t.n, t.c, t.h, t.w);
    parallel_for(static_cast<std::size_t>(C), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            const double inv = 1.0 / std::sqrt(p.running_var[c] + kNormEps);
            const double gam = p.gamma[c], bet = p.beta[c], mu = p.running_mean[c];
            for (int b = 0; b < t.n; ++b) {
                const double* src = t.v.data() + t.index(b, static_cast<int>(c), 0, 0);
                double* dst = out.v.data() + out.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i) dst[i] = gam * (src[i] - mu) * inv + bet;
            }
        }
    });
    return out;
}

NormGrads channel_norm_backward(const NormParams& p, const NormCache& cache, const Tensor4& out_grad) {
    require_same_shape(cache.xhat, out_grad, "channel_norm_backward");
    const int C = out_grad.c;
    const std::size_t m = static_cast<std::size_t>(out_grad.n) * out_grad.h * out_grad.w;
    const std::size_t plane = static_cast<std::size_t>(out_grad.h) * out_grad.w;
    NormGrads g;
    g.input = Tensor4(out_grad.n, out_grad.c, out_grad.h, out_grad.w);
    g.gamma.assign(C, 0.0);
    g.beta.assign(C, 0.0);
    parallel_for(static_cast<std::size_t>(C), [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            double dg = 0.0, db = 0.0;
            for (int b = 0; b < out_grad.n; ++b) {
                const double* og = out_grad.v.data() + out_grad.index(b, static_cast<int>(c), 0, 0);
                const double* xh = cache.xhat.v.data() + cache.xhat.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    dg += og[i] * xh[i];
                    db += og[i];
                }
            }
            g.gamma[c] = dg;
            g.beta[c] = db;
            const double scale = p.gamma[c] * cache.inv_std[c];
            const double mean_db = db / static_cast<double>(m);
            const double mean_dg = dg / static_cast<double>(m);
            for (int b = 0; b < out_grad.n; ++b) {
                const double* og = out_grad.v.data() + out_grad.index(b, static_cast<int>(c), 0, 0);
                const double* xh = cache.xhat.v.data() + cache.xhat.index(b, static_cast<int>(c), 0, 0);
                double* dst = g.input.v.data() + g.input.index(b, static_cast<int>(c), 0, 0);
                for (std::size_t i = 0; i < plane; ++i)
                    dst[i] = scale * (og[i] - mean_db - xh[i] * mean_dg);
            }
        }
    });
    return g;
}

Tensor4 space_to_depth(const Tensor4& t, int block) {
    if (block < 1) throw std::invalid_argument("space_to_depth: block must be positive");
    if (t.h % block != 0 || t.w % block != 0)
        throw std::invalid_argument("space_to_depth: dims " + t.shape_str() +
                                    " not divisible by block " + std::to_string(block));
    const int b2 = block * block;
    Tensor4 out(t.n, t.c * b2, t.h / block, t.w / block);
    for (int b = 0; b < t.n; ++b)
        for (int c = 0; c < t.c; ++c)
            for (int dy = 0; dy < block; ++dy)
                for (int dx = 0; dx < block; ++dx) {
                    const int oc = c * b2 + dy * block + dx;
                    for (int oy = 0; oy < out.h; ++oy)
                        for (int ox = 0; ox < out.w; ++ox)
                            out.at(b, oc, oy, ox) = t.at(b, c, oy * block + dy, ox * block + dx);
                }
    return out;
}

Tensor4 depth_to_space(const Tensor4& t, int block) {
    if (block < 1) throw std::invalid_argument("depth_to_space: block must be positive");
    const int b2 = block * block;
    if (t.c % b2 != 0)
        throw std::invalid_argument("depth_to_space: channels " + std::to_string(t.c) +
                                    " not divisible by block^2");
    Tensor4 out(t.n, t.c / b2, t.h * block, t.w * block);
    for (int b = 0; b < t.n; ++b)
        for (int c = 0; c < out.c; ++c)
            for (int dy = 0; dy < block; ++dy)
                for (int dx = 0; dx < block; ++dx) {
                    const int ic = c * b2 + dy * block + dx;
                    for (int iy = 0; iy < t.h; ++iy)
                        for (int ix = 0; ix < t.w; ++ix)
                            out.at(b, c, iy * block + dy, ix * block + dx) = t.at(b, ic, iy, ix);
                }
    return out;
}

Tensor4 concat_channels(const std::vector<const Tensor4*>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
    const Tensor4& first = *parts[0];
    int total_c = 0;
    for (const Tensor4* p : parts) {
        if (p->n != first.n || p->h != first.h || p->w != first.w)
            throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                        first.shape_str() + " vs " + p->shape_str());
        total_c += p->c;
    }
    Tensor4 out(first.n, total_c, first.h, first.w);
    const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;
    for (int b = 0; b < first.n; ++b) {
        int co = 0;
        for (const Tensor4* p : parts) {
            const double* src = p->v.data() + p->index(b, 0, 0, 0);
            double* dst = out.v.data() + out.index(b, co, 0, 0);
            std::copy(src, src + static_cast<std::size_t>(p->c) * plane, dst);
            co += p->c;
        }
    }
    return out;
}

std::vector<Tensor4> split_channels(const Tensor4& t, const std::vector<int>& channel_sizes) {
    int total = 0;
    for (int c : channel_sizes) total += c;
    if (total != t.c)
        throw std::invalid_argument("split_channels: sizes sum " + std::to_string(total) +
                                    " != channels " + std::to_string(t.c));
    std::vector<Tensor4> parts;
    parts.reserve(channel_sizes.size());
    const std::size_t plane = static_cast<std::size_t>(t.h) * t.w;
    int co = 0;
    for (int cs : channel_sizes) {
        Tensor4 part(t.n, cs, t.h, t.w);
        for (int b = 0; b < t.n; ++b) {
            const double* src = t.v.data() + t.index(b, co, 0, 0);
            double* dst = part.v.data() + part.index(b, 0, 0, 0);
            std::copy(src, src + static_cast<std::size_t>(cs) * plane, dst);
        }
        co += cs;
        parts.push_back(std::move(part));
    }
    return parts;
}

}  // namespace mddet
