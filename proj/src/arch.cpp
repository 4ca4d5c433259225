#include "mddet/arch.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mddet/rng.hpp"

namespace mddet {

namespace {

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

// key=value fields after the keyword
std::string field(const std::vector<std::string>& toks, const std::string& key,
                  const std::string& fallback = "", bool required = false) {
    for (std::size_t i = 1; i < toks.size(); ++i) {
        auto eq = toks[i].find('=');
        if (eq != std::string::npos && toks[i].substr(0, eq) == key)
            return toks[i].substr(eq + 1);
    }
    if (required) throw std::invalid_argument("network spec: missing field '" + key + "'");
    return fallback;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const std::string& t : split(s, ','))
        out.push_back(std::stoi(t));
    return out;
}

bool is_pow2(int x) { return x > 0 && (x & (x - 1)) == 0; }

void add_into(Tensor4& dst, Tensor4&& src) {
    if (dst.size() == 0) {
        dst = std::move(src);
        return;
    }
    require_same_shape(dst, src, "gradient accumulation");
    for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

}  // namespace

std::string NetworkSpec::serialize() const {
    std::ostringstream os;
    os << "# mddet network spec v1\n";
    os << "input channels=" << in_channels << "\n";
    os << "classes " << classes << "\n";
    os << "anchors ";
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (i) os << ",";
        os << fmt_double(anchors[i].first) << "x" << fmt_double(anchors[i].second);
    }
    os << "\n";
    os << "merge_mode " << (merge_with_maxpool ? "max" : "stack") << "\n";
    for (const LayerSpec& ls : layers) {
        if (const auto* c = std::get_if<ConvSpec>(&ls)) {
            os << "conv out=" << c->out_ch << " k=" << c->k << " stride=" << c->stride
               << " pad=" << c->pad << " norm=" << (c->norm ? 1 : 0)
               << " act=" << (c->act == Activation::LeakyRelu ? "lrelu" : "none") << "\n";
        } else if (std::holds_alternative<MaxPoolSpec>(ls)) {
            os << "maxpool2\n";
        } else if (const auto* m = std::get_if<StackMergeSpec>(&ls)) {
            std::string srcs, bns, blocks;
            for (std::size_t i = 0; i < m->sources.size(); ++i) {
                if (i) {
                    srcs += ",";
                    bns += ",";
                    blocks += ",";
                }
                srcs += std::to_string(m->sources[i].layer);
                bns += std::to_string(m->sources[i].bottleneck_ch);
                blocks += std::to_string(m->sources[i].block);
            }
            os << "stack_merge sources=" << srcs << " bottleneck=" << bns
               << " block=" << blocks << "\n";
        } else if (const auto* h = std::get_if<HeadSpec>(&ls)) {
            os << "head out=" << h->out_ch << "\n";
        }
    }
    return os.str();
}

NetworkSpec NetworkSpec::parse(const std::string& text) {
    NetworkSpec spec;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> toks;
        {
            std::istringstream ls(line);
            std::string t;
            while (ls >> t) toks.push_back(t);
        }
        const std::string& kw = toks[0];
        try {
            if (kw == "input") {
                spec.in_channels = std::stoi(field(toks, "channels", "3"));
            } else if (kw == "classes") {
                spec.classes = std::stoi(toks.at(1));
            } else if (kw == "anchors") {
                spec.anchors.clear();
                for (const std::string& a : split(toks.at(1), ',')) {
                    auto xy = split(a, 'x');
                    if (xy.size() != 2) throw std::invalid_argument("bad anchor '" + a + "'");
                    spec.anchors.emplace_back(std::stod(xy[0]), std::stod(xy[1]));
                }
            } else if (kw == "merge_mode") {
                spec.merge_with_maxpool = (toks.at(1) == "max");
            } else if (kw == "conv") {
                ConvSpec c;
                c.out_ch = std::stoi(field(toks, "out", "", true));
                c.k = std::stoi(field(toks, "k", "3"));
                c.stride = std::stoi(field(toks, "stride", "1"));
                c.pad = std::stoi(field(toks, "pad", "1"));
                c.norm = std::stoi(field(toks, "norm", "1")) != 0;
                c.act = field(toks, "act", "lrelu") == "none" ? Activation::None
                                                              : Activation::LeakyRelu;
                spec.layers.emplace_back(c);
            } else if (kw == "maxpool2") {
                spec.layers.emplace_back(MaxPoolSpec{});
            } else if (kw == "stack_merge") {
                StackMergeSpec m;
                auto srcs = parse_int_list(field(toks, "sources", "", true));
                auto bns = parse_int_list(field(toks, "bottleneck", "", true));
                auto blocks = parse_int_list(field(toks, "block", "", true));
                if (srcs.size() != bns.size() || srcs.size() != blocks.size())
                    throw std::invalid_argument("stack_merge field lengths differ");
                for (std::size_t i = 0; i < srcs.size(); ++i)
                    m.sources.push_back({srcs[i], bns[i], blocks[i]});
                spec.layers.emplace_back(m);
            } else if (kw == "head") {
                HeadSpec h;
                h.out_ch = std::stoi(field(toks, "out", "", true));
                spec.layers.emplace_back(h);
            } else {
                throw std::invalid_argument("unknown keyword '" + kw + "'");
            }
        } catch (const std::exception& e) {
            throw std::invalid_argument("network spec line " + std::to_string(lineno) + ": " +
                                        e.what());
        }
    }
    return spec;
}

NetworkSpec NetworkSpec::load_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open network spec: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

void NetworkSpec::save_file(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write network spec: " + path.string());
    f << serialize();
}

std::vector<std::pair<double, double>> default_anchors() {
    // five priors spanning aspect ratios 0.5..2 at two scales, in cell units
    return {{0.85, 0.85}, {0.6, 1.2}, {1.2, 0.6}, {1.7, 1.7}, {1.2, 2.4}};
}

std::pair<NetworkSpec, NetworkSpec> reference_specs(
    int classes, const std::vector<std::pair<double, double>>& anchors) {
    const int head_ch = static_cast<int>(anchors.size()) * (classes + 5);

    NetworkSpec teacher;
    teacher.classes = classes;
    teacher.anchors = anchors;
    teacher.layers = {
        ConvSpec{32, 3, 1, 1, true, Activation::LeakyRelu},   // 0
        MaxPoolSpec{},                                        // 1   /2
        ConvSpec{64, 3, 1, 1, true, Activation::LeakyRelu},   // 2
        MaxPoolSpec{},                                        // 3   /4
        ConvSpec{96, 3, 1, 1, true, Activation::LeakyRelu},   // 4
        MaxPoolSpec{},                                        // 5   /8
        ConvSpec{224, 3, 1, 1, true, Activation::LeakyRelu},  // 6
        MaxPoolSpec{},                                        // 7   /16
        ConvSpec{256, 3, 1, 1, true, Activation::LeakyRelu},  // 8   tail width 256
        ConvSpec{256, 1, 1, 0, true, Activation::LeakyRelu},  // 9
        HeadSpec{head_ch},                                    // 10
    };

    NetworkSpec student;
    student.classes = classes;
    student.anchors = anchors;
    student.layers = {
        ConvSpec{8, 3, 1, 1, true, Activation::LeakyRelu},    // 0
        MaxPoolSpec{},                                        // 1   /2
        ConvSpec{16, 3, 1, 1, true, Activation::LeakyRelu},   // 2
        MaxPoolSpec{},                                        // 3   /4   merge source
        ConvSpec{32, 3, 1, 1, true, Activation::LeakyRelu},   // 4
        MaxPoolSpec{},                                        // 5   /8   merge source
        ConvSpec{48, 3, 1, 1, true, Activation::LeakyRelu},   // 6
        MaxPoolSpec{},                                        // 7   /16  trunk
        // stacked merge of the last three stages; earlier sources compressed
        // harder (16->2 vs 32->6)
        StackMergeSpec{{{7, 0, 1}, {5, 6, 2}, {3, 2, 4}}},    // 8   48+24+32 = 104 ch
        ConvSpec{128, 3, 1, 1, true, Activation::LeakyRelu},  // 9   tail width 128
        ConvSpec{128, 1, 1, 0, true, Activation::LeakyRelu},  // 10  trailing 1x1
        ConvSpec{128, 1, 1, 0, true, Activation::LeakyRelu},  // 11  trailing 1x1
        HeadSpec{head_ch},                                    // 12
    };

    return {teacher, student};
}

// ---------------------------------------------------------------------------

Network Network::build(const NetworkSpec& spec, std::uint64_t seed) {
    if (spec.in_channels < 1) throw std::invalid_argument("build_network: in_channels < 1");
    if (spec.layers.empty()) throw std::invalid_argument("build_network: no layers");

    Network net;
    net.spec_ = spec;
    int ch = spec.in_channels;
    int ds = 1;
    int unit_seq = 0;

    auto init_unit = [&](ConvUnit& u, int out_ch, int in_ch, int k, int stride, int pad,
                         bool norm, Activation act) {
        u.conv = make_conv(out_ch, in_ch, k, stride, pad);
        const double limit = std::sqrt(6.0 / (static_cast<double>(in_ch) * k * k));
        Rng rng(Rng::mix(seed, 0x75D0 + unit_seq));
        ++unit_seq;
        for (double& x : u.conv.weight.v) x = rng.uniform(-limit, limit);
        u.has_norm = norm;
        if (norm) u.norm = NormParams(out_ch);
        u.act = act;
        u.weight_grad = Tensor4(out_ch, in_ch, k, k);
        u.bias_grad.assign(out_ch, 0.0);
        if (norm) {
            u.gamma_grad.assign(out_ch, 0.0);
            u.beta_grad.assign(out_ch, 0.0);
        }
    };

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& ls = spec.layers[i];
        Layer layer;
        layer.spec = ls;
        const std::string at = "layer " + std::to_string(i);

        if (const auto* c = std::get_if<ConvSpec>(&ls)) {
            if (c->out_ch < 1) throw std::invalid_argument(at + ": conv out_ch < 1");
            layer.units.resize(1);
            init_unit(layer.units[0], c->out_ch, ch, c->k, c->stride, c->pad, c->norm, c->act);
            ch = c->out_ch;
            ds *= c->stride;
        } else if (std::holds_alternative<MaxPoolSpec>(ls)) {
            ds *= 2;
        } else if (const auto* m = std::get_if<StackMergeSpec>(&ls)) {
            if (m->sources.empty()) throw std::invalid_argument(at + ": merge with no sources");
            int merged_ch = 0;
            int merge_ds = -1;
            for (const MergeSource& s : m->sources) {
                if (s.layer < 0 || s.layer >= static_cast<int>(i))
                    throw std::invalid_argument(at + ": dangling merge source " +
                                                std::to_string(s.layer));
                if (s.block < 1) throw std::invalid_argument(at + ": merge block < 1");
                if (spec.merge_with_maxpool && !is_pow2(s.block))
                    throw std::invalid_argument(at + ": max-merge block must be a power of 2");
                const Layer& src = net.layers_[s.layer];
                const int src_ch = src.out_channels;
                const int contrib = (s.bottleneck_ch > 0 ? s.bottleneck_ch : src_ch);
                merged_ch += spec.merge_with_maxpool ? contrib : contrib * s.block * s.block;
                const int eff_ds = src.downsample * s.block;
                if (merge_ds == -1) merge_ds = eff_ds;
                if (eff_ds != merge_ds)
                    throw std::invalid_argument(at + ": merge source " + std::to_string(s.layer) +
                                                " resizes to downsample " + std::to_string(eff_ds) +
                                                ", expected " + std::to_string(merge_ds));
                if (s.bottleneck_ch > 0) {
                    layer.units.emplace_back();
                    init_unit(layer.units.back(), s.bottleneck_ch, src_ch, 1, 1, 0, true,
                              Activation::LeakyRelu);
                }
            }
            layer.source_caches.resize(m->sources.size());
            ch = merged_ch;
            ds = merge_ds;
        } else if (const auto* h = std::get_if<HeadSpec>(&ls)) {
            if (i + 1 != spec.layers.size())
                throw std::invalid_argument(at + ": head must be the final layer");
            if (spec.classes > 0 && !spec.anchors.empty() && h->out_ch != spec.head_channels())
                throw std::invalid_argument(
                    at + ": head channels " + std::to_string(h->out_ch) + " != N*(K+5) = " +
                    std::to_string(spec.head_channels()));
            layer.units.resize(1);
            init_unit(layer.units[0], h->out_ch, ch, 1, 1, 0, false, Activation::None);
            ch = h->out_ch;
        }

        layer.out_channels = ch;
        layer.downsample = ds;
        net.layers_.push_back(std::move(layer));
    }
    if (!std::holds_alternative<HeadSpec>(spec.layers.back()))
        throw std::invalid_argument("build_network: last layer must be a head");
    return net;
}

Tensor4 Network::run_unit(ConvUnit& unit, const Tensor4& in, ForwardMode mode) {
    Tensor4 x = conv2d(in, unit.conv);
    if (unit.has_norm) {
        x = (mode == ForwardMode::Eval)
                ? channel_norm_eval(x, unit.norm)
                : channel_norm_train(x, unit.norm, unit.norm_cache, mode == ForwardMode::Train);
    }
    if (unit.act == Activation::LeakyRelu) x = leaky_relu(x, kLeakySlope);
    return x;
}

Tensor4 Network::forward(const Tensor4& batch, ForwardMode mode) {
    if (batch.c != spec_.in_channels)
        throw std::invalid_argument("forward: input channels " + std::to_string(batch.c) +
                                    " != spec in_channels " + std::to_string(spec_.in_channels));
    const int ds = downsample_factor();
    if (batch.h % ds != 0 || batch.w % ds != 0)
        throw std::invalid_argument("forward: input " + batch.shape_str() +
                                    " not divisible by downsample factor " + std::to_string(ds));

    acts_.assign(layers_.size(), Tensor4());
    input_cache_ = batch;
    const Tensor4* cur = &input_cache_;

    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Layer& layer = layers_[i];
        if (std::holds_alternative<ConvSpec>(layer.spec) ||
            std::holds_alternative<HeadSpec>(layer.spec)) {
            acts_[i] = run_unit(layer.units[0], *cur, mode);
        } else if (std::holds_alternative<MaxPoolSpec>(layer.spec)) {
            MaxPoolResult r = maxpool2(*cur);
            layer.pool_argmax = std::move(r.argmax);
            acts_[i] = std::move(r.out);
        } else if (const auto* m = std::get_if<StackMergeSpec>(&layer.spec)) {
            std::vector<Tensor4> parts;
            parts.reserve(m->sources.size());
            std::size_t u = 0;
            for (std::size_t si = 0; si < m->sources.size(); ++si) {
                const MergeSource& s = m->sources[si];
                const Tensor4& src = acts_[s.layer];
                SourceCache& cache = layer.source_caches[si];
                Tensor4 y = (s.bottleneck_ch > 0) ? run_unit(layer.units[u++], src, mode) : src;
                if (spec_.merge_with_maxpool) {
                    cache.chain.clear();
                    Tensor4 z = y;
                    for (int b = s.block; b > 1; b /= 2) {
                        MaxPoolResult r = maxpool2(z);
                        z = r.out;
                        cache.chain.push_back(std::move(r));
                    }
                    cache.bottleneck_out = std::move(y);
                    parts.push_back(std::move(z));
                } else {
                    Tensor4 z = (s.block == 1) ? y : space_to_depth(y, s.block);
                    cache.bottleneck_out = std::move(y);
                    parts.push_back(std::move(z));
                }
            }
            std::vector<const Tensor4*> ptrs;
            for (const Tensor4& p : parts) ptrs.push_back(&p);
            acts_[i] = concat_channels(ptrs);
        }
        cur = &acts_[i];
    }
    have_cache_ = (mode != ForwardMode::Eval);
    return acts_.back();
}

Tensor4 Network::unit_backward(ConvUnit& unit, const Tensor4& unit_in, const Tensor4& unit_out,
                               const Tensor4& out_grad) {
    Tensor4 g = out_grad;
    if (unit.act == Activation::LeakyRelu) g = leaky_relu_backward(unit_out, kLeakySlope, g);
    if (unit.has_norm) {
        NormGrads ng = channel_norm_backward(unit.norm, unit.norm_cache, g);
        std::copy(ng.gamma.begin(), ng.gamma.end(), unit.gamma_grad.begin());
        std::copy(ng.beta.begin(), ng.beta.end(), unit.beta_grad.begin());
        g = std::move(ng.input);
    }
    ConvGrads cg = conv2d_backward(unit_in, unit.conv, g);
    std::copy(cg.weight.v.begin(), cg.weight.v.end(), unit.weight_grad.v.begin());
    std::copy(cg.bias.begin(), cg.bias.end(), unit.bias_grad.begin());
    return std::move(cg.input);
}

void Network::backward(const Tensor4& head_grad) {
    if (!have_cache_)
        throw std::logic_error("backward: no cached forward pass (run forward in Train mode)");
    require_same_shape(head_grad, acts_.back(), "backward head_grad");

    std::vector<Tensor4> gbuf(layers_.size());
    gbuf.back() = head_grad;

    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
        Layer& layer = layers_[i];
        Tensor4& g = gbuf[i];
        if (g.size() == 0) continue;  // unused branch
        const Tensor4& layer_in = (i == 0) ? input_cache_ : acts_[i - 1];

        if (std::holds_alternative<ConvSpec>(layer.spec) ||
            std::holds_alternative<HeadSpec>(layer.spec)) {
            Tensor4 gi = unit_backward(layer.units[0], layer_in, acts_[i], g);
            if (i > 0) add_into(gbuf[i - 1], std::move(gi));
        } else if (std::holds_alternative<MaxPoolSpec>(layer.spec)) {
            Tensor4 gi(layer_in.n, layer_in.c, layer_in.h, layer_in.w);
            for (std::size_t o = 0; o < g.v.size(); ++o)
                gi.v[layer.pool_argmax[o]] += g.v[o];
            if (i > 0) add_into(gbuf[i - 1], std::move(gi));
        } else if (const auto* m = std::get_if<StackMergeSpec>(&layer.spec)) {
            std::vector<int> sizes;
            for (std::size_t si = 0; si < m->sources.size(); ++si) {
                const MergeSource& s = m->sources[si];
                const int src_ch = layers_[s.layer].out_channels;
                const int contrib = (s.bottleneck_ch > 0 ? s.bottleneck_ch : src_ch);
                sizes.push_back(spec_.merge_with_maxpool ? contrib
                                                         : contrib * s.block * s.block);
            }
            std::vector<Tensor4> parts = split_channels(g, sizes);
            std::size_t u = 0;
            for (std::size_t si = 0; si < m->sources.size(); ++si) {
                const MergeSource& s = m->sources[si];
                SourceCache& cache = layer.source_caches[si];
                Tensor4 gs = std::move(parts[si]);
                if (spec_.merge_with_maxpool) {
                    for (int j = static_cast<int>(cache.chain.size()) - 1; j >= 0; --j) {
                        const Tensor4& step_in = (j == 0) ? cache.bottleneck_out
                                                          : cache.chain[j - 1].out;
                        gs = maxpool2_backward(cache.chain[j], step_in, gs);
                    }
                } else if (s.block > 1) {
                    gs = depth_to_space(gs, s.block);
                }
                if (s.bottleneck_ch > 0)
                    gs = unit_backward(layer.units[u++], acts_[s.layer], cache.bottleneck_out, gs);
                add_into(gbuf[s.layer], std::move(gs));
            }
        }
        g = Tensor4();  // release
    }
}

std::vector<std::span<double>> Network::param_views() {
    std::vector<std::span<double>> out;
    for (Layer& layer : layers_)
        for (ConvUnit& u : layer.units) {
            out.emplace_back(u.conv.weight.v);
            if (!u.has_norm) out.emplace_back(u.conv.bias);
            if (u.has_norm) {
                out.emplace_back(u.norm.gamma);
                out.emplace_back(u.norm.beta);
            }
        }
    return out;
}

std::vector<std::span<const double>> Network::grad_views() const {
    std::vector<std::span<const double>> out;
    for (const Layer& layer : layers_)
        for (const ConvUnit& u : layer.units) {
            out.emplace_back(u.weight_grad.v);
            if (!u.has_norm) out.emplace_back(u.bias_grad);
            if (u.has_norm) {
                out.emplace_back(u.gamma_grad);
                out.emplace_back(u.beta_grad);
            }
        }
    return out;
}

std::vector<std::span<double>> Network::state_views() {
    std::vector<std::span<double>> out;
    for (Layer& layer : layers_)
        for (ConvUnit& u : layer.units) {
            out.emplace_back(u.conv.weight.v);
            if (!u.has_norm) out.emplace_back(u.conv.bias);
            if (u.has_norm) {
                out.emplace_back(u.norm.gamma);
                out.emplace_back(u.norm.beta);
                out.emplace_back(u.norm.running_mean);
                out.emplace_back(u.norm.running_var);
            }
        }
    return out;
}

long long Network::param_count() const {
    long long n = 0;
    for (const Layer& layer : layers_)
        for (const ConvUnit& u : layer.units) {
            n += static_cast<long long>(u.conv.weight.size());
            if (!u.has_norm) n += static_cast<long long>(u.conv.bias.size());
            if (u.has_norm) n += 2LL * static_cast<long long>(u.norm.gamma.size());
        }
    return n;
}

long long Network::flops_estimate(int input_h, int input_w) const {
    long long macs = 0;
    std::vector<std::pair<int, int>> dims(layers_.size());
    int h = input_h, w = input_w;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& layer = layers_[i];
        if (const auto* c = std::get_if<ConvSpec>(&layer.spec)) {
            const ConvUnit& u = layer.units[0];
            h = (h + 2 * c->pad - c->k) / c->stride + 1;
            w = (w + 2 * c->pad - c->k) / c->stride + 1;
            macs += static_cast<long long>(h) * w * u.conv.weight.n * u.conv.weight.c *
                    u.conv.weight.h * u.conv.weight.w;
        } else if (std::holds_alternative<MaxPoolSpec>(layer.spec)) {
            h /= 2;
            w /= 2;
        } else if (const auto* m = std::get_if<StackMergeSpec>(&layer.spec)) {
            int out_h = 0, out_w = 0;
            for (const MergeSource& s : m->sources) {
                auto [sh, sw] = dims[s.layer];
                if (s.bottleneck_ch > 0)
                    macs += static_cast<long long>(sh) * sw *
                            layers_[s.layer].out_channels * s.bottleneck_ch;
                out_h = sh / s.block;
                out_w = sw / s.block;
            }
            h = out_h;
            w = out_w;
        } else if (std::holds_alternative<HeadSpec>(layer.spec)) {
            const ConvUnit& u = layer.units[0];
            macs += static_cast<long long>(h) * w * u.conv.weight.n * u.conv.weight.c;
        }
        dims[i] = {h, w};
    }
    return macs;
}

int Network::downsample_factor() const {
    return layers_.empty() ? 1 : layers_.back().downsample;
}

}  // namespace mddet
