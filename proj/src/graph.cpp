#include "stackunet/graph.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "stackunet/errors.hpp"

namespace stackunet {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Input: return "input";
        case LayerKind::Conv: return "conv";
        case LayerKind::TransposedConv: return "tconv";
        case LayerKind::UpsampleNearest: return "upsample";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Relu: return "relu";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::Concat: return "concat";
        case LayerKind::Add: return "add";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// graph construction

int Graph::append(Node n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

void Graph::check_src(int src) const {
    if (src < 0 || src >= int(nodes_.size())) {
        throw ConfigError("graph: bad source node id " + std::to_string(src));
    }
}

int Graph::add_input(int channels) {
    if (!nodes_.empty()) throw ConfigError("graph: input must be the first node");
    Node n;
    n.kind = LayerKind::Input;
    n.name = "input";
    n.out_channels = channels;
    return append(std::move(n));
}

int Graph::add_conv(int src, int out_c, int ksize, const std::string& name, int block) {
    check_src(src);
    if (ksize != 1 && ksize != 3) throw ConfigError("conv: kernel size must be 1 or 3");
    Node n;
    n.kind = LayerKind::Conv;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = nodes_[src].out_channels;
    n.out_channels = out_c;
    n.ksize = ksize;

    Param w;
    w.name = name + "/weight";
    w.shape = {out_c, n.in_channels, ksize, ksize};
    w.value.assign(size_t(out_c) * n.in_channels * ksize * ksize, 0.0f);
    params_.push_back(std::move(w));
    n.p_weight = int(params_.size()) - 1;

    Param b;
    b.name = name + "/bias";
    b.shape = {out_c};
    b.value.assign(out_c, 0.0f);
    params_.push_back(std::move(b));
    n.p_bias = int(params_.size()) - 1;
    return append(std::move(n));
}

int Graph::add_tconv(int src, int out_c, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::TransposedConv;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = nodes_[src].out_channels;
    n.out_channels = out_c;
    n.ksize = 2;

    Param w;
    w.name = name + "/weight";
    w.shape = {n.in_channels, out_c, 2, 2};
    w.value.assign(size_t(n.in_channels) * out_c * 4, 0.0f);
    params_.push_back(std::move(w));
    n.p_weight = int(params_.size()) - 1;

    Param b;
    b.name = name + "/bias";
    b.shape = {out_c};
    b.value.assign(out_c, 0.0f);
    params_.push_back(std::move(b));
    n.p_bias = int(params_.size()) - 1;
    return append(std::move(n));
}

int Graph::add_upsample_nearest(int src, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::UpsampleNearest;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = n.out_channels = nodes_[src].out_channels;
    return append(std::move(n));
}

int Graph::add_maxpool(int src, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::MaxPool;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = n.out_channels = nodes_[src].out_channels;
    return append(std::move(n));
}

int Graph::add_batchnorm(int src, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::BatchNorm;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = n.out_channels = nodes_[src].out_channels;
    const int c = n.out_channels;

    Param g;
    g.name = name + "/gamma";
    g.shape = {c};
    g.value.assign(c, 1.0f);
    params_.push_back(std::move(g));
    n.p_gamma = int(params_.size()) - 1;

    Param b;
    b.name = name + "/beta";
    b.shape = {c};
    b.value.assign(c, 0.0f);
    params_.push_back(std::move(b));
    n.p_beta = int(params_.size()) - 1;

    StateArray rm;
    rm.name = name + "/running_mean";
    rm.shape = {c};
    rm.value.assign(c, 0.0f);
    state_.push_back(std::move(rm));
    n.s_run_mean = int(state_.size()) - 1;

    StateArray rv;
    rv.name = name + "/running_var";
    rv.shape = {c};
    rv.value.assign(c, 1.0f);
    state_.push_back(std::move(rv));
    n.s_run_var = int(state_.size()) - 1;
    return append(std::move(n));
}

int Graph::add_relu(int src, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::Relu;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = n.out_channels = nodes_[src].out_channels;
    return append(std::move(n));
}

int Graph::add_sigmoid(int src, const std::string& name, int block) {
    check_src(src);
    Node n;
    n.kind = LayerKind::Sigmoid;
    n.name = name;
    n.block = block;
    n.in = {src};
    n.in_channels = n.out_channels = nodes_[src].out_channels;
    return append(std::move(n));
}

int Graph::add_concat(const std::vector<int>& srcs, const std::string& name, int block) {
    if (srcs.empty()) throw ConfigError("concat: needs at least one source");
    Node n;
    n.kind = LayerKind::Concat;
    n.name = name;
    n.block = block;
    int total = 0;
    for (int s : srcs) {
        check_src(s);
        total += nodes_[s].out_channels;
    }
    n.in = srcs;
    n.in_channels = n.out_channels = total;
    return append(std::move(n));
}

int Graph::add_add(int a, int b, const std::string& name, int block) {
    check_src(a);
    check_src(b);
    if (nodes_[a].out_channels != nodes_[b].out_channels) {
        throw ConfigError("add: channel mismatch " + std::to_string(nodes_[a].out_channels) +
                          " vs " + std::to_string(nodes_[b].out_channels) + " at " + name);
    }
    Node n;
    n.kind = LayerKind::Add;
    n.name = name;
    n.block = block;
    n.in = {a, b};
    n.in_channels = n.out_channels = nodes_[a].out_channels;
    return append(std::move(n));
}

void Graph::set_output(int id) {
    check_src(id);
    output_id_ = id;
    consumer_count_.assign(nodes_.size(), 0);
    for (const Node& n : nodes_) {
        for (int s : n.in) consumer_count_[s]++;
    }
}

void Graph::init_params(Rng& rng) {
    for (Node& n : nodes_) {
        if (n.kind == LayerKind::Conv || n.kind == LayerKind::TransposedConv) {
            Param& w = params_[n.p_weight];
            const double fan_in = double(n.in_channels) * n.ksize * n.ksize;
            const double std = std::sqrt(2.0 / fan_in);
            for (float& x : w.value) x = float(rng.normal() * std);
            // biases stay zero
        }
        // batchnorm gamma/beta and running stats keep their construction values
    }
}

int64_t Graph::param_count() const {
    int64_t total = 0;
    for (const Param& p : params_) total += int64_t(p.count());
    return total;
}

std::map<int, int64_t> Graph::param_count_by_block() const {
    std::map<int, int64_t> by_block;
    for (const Node& n : nodes_) {
        int64_t c = 0;
        for (int pi : {n.p_weight, n.p_bias, n.p_gamma, n.p_beta}) {
            if (pi >= 0) c += int64_t(params_[pi].count());
        }
        if (c > 0) by_block[n.block] += c;
    }
    return by_block;
}

void Graph::zero_grads() {
    for (Param& p : params_) {
        if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0f);
        else std::fill(p.grad.begin(), p.grad.end(), 0.0f);
    }
}

// ---------------------------------------------------------------------------
// conv lowering

namespace {

// cols has ic*k*k rows and H*W columns; row r = (c*k + ky)*k + kx.
void im2col(const float* x, int ic, int H, int W, int k, int pad, float* cols) {
    const size_t hw = size_t(H) * W;
    for (int c = 0; c < ic; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = cols + (size_t((c * k + ky) * k + kx)) * hw;
                const int dy = ky - pad, dx = kx - pad;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(W - 1, W - 1 - dx);
                for (int y = 0; y < H; ++y) {
                    float* drow = dst + size_t(y) * W;
                    const int in_y = y + dy;
                    if (in_y < 0 || in_y >= H || x0 > x1) {
                        std::memset(drow, 0, sizeof(float) * W);
                        continue;
                    }
                    const float* srow = x + (size_t(c) * H + in_y) * W;
                    if (x0 > 0) std::memset(drow, 0, sizeof(float) * x0);
                    std::memcpy(drow + x0, srow + x0 + dx, sizeof(float) * (x1 - x0 + 1));
                    if (x1 + 1 < W) std::memset(drow + x1 + 1, 0, sizeof(float) * (W - x1 - 1));
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds columns back into the image.
void col2im_add(const float* cols, int ic, int H, int W, int k, int pad, float* dx) {
    const size_t hw = size_t(H) * W;
    for (int c = 0; c < ic; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = cols + (size_t((c * k + ky) * k + kx)) * hw;
                const int dy = ky - pad, dx_off = kx - pad;
                const int x0 = std::max(0, -dx_off);
                const int x1 = std::min(W - 1, W - 1 - dx_off);
                if (x0 > x1) continue;
                for (int y = 0; y < H; ++y) {
                    const int in_y = y + dy;
                    if (in_y < 0 || in_y >= H) continue;
                    const float* srow = src + size_t(y) * W;
                    float* drow = dx + (size_t(c) * H + in_y) * W + dx_off;
                    for (int xx = x0; xx <= x1; ++xx) drow[xx] += srow[xx];
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// forward

const Tensor& Graph::forward(const Tensor& input, bool training) {
    if (output_id_ < 0) throw ConfigError("graph: set_output not called");
    if (input.c != nodes_[0].out_channels) {
        throw ConfigError("graph: input has " + std::to_string(input.c) + " channels, expected " +
                          std::to_string(nodes_[0].out_channels));
    }

    std::vector<int> pending;
    if (!training) pending = consumer_count_;

    nodes_[0].out_t = input;

    for (size_t i = 1; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        const Tensor& x = nodes_[n.in[0]].out_t;
        const int N = x.n, H = x.h, W = x.w;

        switch (n.kind) {
            case LayerKind::Conv: {
                const int k = n.ksize, pad = k / 2;
                const int ic = n.in_channels, oc = n.out_channels;
                n.out_t = Tensor(N, oc, H, W);
                const size_t hw = size_t(H) * W;
                const Param& wp = params_[n.p_weight];
                const Param& bp = params_[n.p_bias];
                CMapM wm(wp.value.data(), oc, size_t(ic) * k * k);
                for (int s = 0; s < N; ++s) {
                    MapM ym(n.out_t.ptr(s), oc, hw);
                    if (k == 1) {
                        CMapM xm(x.ptr(s), ic, hw);
                        ym.noalias() = wm * xm;
                    } else {
                        scratch_.resize(size_t(ic) * k * k * hw);
                        im2col(x.ptr(s), ic, H, W, k, pad, scratch_.data());
                        CMapM cm(scratch_.data(), size_t(ic) * k * k, hw);
                        ym.noalias() = wm * cm;
                    }
                    for (int o = 0; o < oc; ++o) ym.row(o).array() += bp.value[o];
                }
                break;
            }
            case LayerKind::TransposedConv: {
                const int ic = n.in_channels, oc = n.out_channels;
                n.out_t = Tensor(N, oc, 2 * H, 2 * W);
                const size_t hw = size_t(H) * W;
                const Param& wp = params_[n.p_weight];
                const Param& bp = params_[n.p_bias];
                CMapM wr(wp.value.data(), ic, size_t(oc) * 4);
                scratch_.resize(size_t(oc) * 4 * hw);
                for (int s = 0; s < N; ++s) {
                    CMapM xm(x.ptr(s), ic, hw);
                    MapM mm(scratch_.data(), size_t(oc) * 4, hw);
                    mm.noalias() = wr.transpose() * xm;
                    for (int o = 0; o < oc; ++o) {
                        for (int ky = 0; ky < 2; ++ky) {
                            for (int kx = 0; kx < 2; ++kx) {
                                const float* src =
                                    scratch_.data() + (size_t(o) * 4 + ky * 2 + kx) * hw;
                                const float bias = bp.value[o];
                                for (int y = 0; y < H; ++y) {
                                    float* drow = n.out_t.ptr(s, o) +
                                                  size_t(2 * y + ky) * (2 * W) + kx;
                                    const float* srow = src + size_t(y) * W;
                                    for (int xx = 0; xx < W; ++xx) drow[2 * xx] = srow[xx] + bias;
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::UpsampleNearest: {
                n.out_t = Tensor(N, n.out_channels, 2 * H, 2 * W);
                for (int s = 0; s < N; ++s) {
                    for (int c = 0; c < n.out_channels; ++c) {
                        const float* sp = x.ptr(s, c);
                        float* dp = n.out_t.ptr(s, c);
                        for (int y = 0; y < H; ++y) {
                            for (int xx = 0; xx < W; ++xx) {
                                const float v = sp[size_t(y) * W + xx];
                                float* d0 = dp + size_t(2 * y) * (2 * W) + 2 * xx;
                                d0[0] = v;
                                d0[1] = v;
                                d0[2 * W] = v;
                                d0[2 * W + 1] = v;
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::MaxPool: {
                if (H % 2 != 0 || W % 2 != 0) {
                    throw ConfigError("maxpool at " + n.name + ": spatial size " +
                                      std::to_string(H) + "x" + std::to_string(W) +
                                      " not divisible by 2");
                }
                const int Ho = H / 2, Wo = W / 2;
                n.out_t = Tensor(N, n.out_channels, Ho, Wo);
                if (training) n.pool_arg.assign(n.out_t.size(), 0);
                for (int s = 0; s < N; ++s) {
                    for (int c = 0; c < n.out_channels; ++c) {
                        const float* sp = x.ptr(s, c);
                        float* dp = n.out_t.ptr(s, c);
                        uint8_t* ap = training
                                          ? n.pool_arg.data() +
                                                (size_t(s) * n.out_channels + c) * Ho * Wo
                                          : nullptr;
                        for (int y = 0; y < Ho; ++y) {
                            for (int xx = 0; xx < Wo; ++xx) {
                                const float* p = sp + size_t(2 * y) * W + 2 * xx;
                                float best = p[0];
                                uint8_t arg = 0;
                                if (p[1] > best) { best = p[1]; arg = 1; }
                                if (p[W] > best) { best = p[W]; arg = 2; }
                                if (p[W + 1] > best) { best = p[W + 1]; arg = 3; }
                                dp[size_t(y) * Wo + xx] = best;
                                if (ap) ap[size_t(y) * Wo + xx] = arg;
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const int C = n.out_channels;
                const size_t m = size_t(N) * H * W;
                n.out_t = Tensor(N, C, H, W);
                const Param& gp = params_[n.p_gamma];
                const Param& bp = params_[n.p_beta];
                StateArray& rm = state_[n.s_run_mean];
                StateArray& rv = state_[n.s_run_var];
                if (training) {
                    n.bn_mean.assign(C, 0.0f);
                    n.bn_invstd.assign(C, 0.0f);
                }
                for (int c = 0; c < C; ++c) {
                    float mean, invstd;
                    if (training) {
                        double sum = 0.0, sumsq = 0.0;
                        for (int s = 0; s < N; ++s) {
                            const float* sp = x.ptr(s, c);
                            for (size_t j = 0; j < size_t(H) * W; ++j) {
                                sum += sp[j];
                                sumsq += double(sp[j]) * sp[j];
                            }
                        }
                        const double mu = sum / double(m);
                        const double var = std::max(0.0, sumsq / double(m) - mu * mu);
                        mean = float(mu);
                        invstd = float(1.0 / std::sqrt(var + n.bn_eps));
                        n.bn_mean[c] = mean;
                        n.bn_invstd[c] = invstd;
                        const double unbiased = m > 1 ? var * double(m) / double(m - 1) : var;
                        rm.value[c] = (1.0f - n.bn_momentum) * rm.value[c] + n.bn_momentum * mean;
                        rv.value[c] =
                            (1.0f - n.bn_momentum) * rv.value[c] + n.bn_momentum * float(unbiased);
                    } else {
                        mean = rm.value[c];
                        invstd = float(1.0 / std::sqrt(double(rv.value[c]) + n.bn_eps));
                    }
                    const float g = gp.value[c], b = bp.value[c];
                    for (int s = 0; s < N; ++s) {
                        const float* sp = x.ptr(s, c);
                        float* dp = n.out_t.ptr(s, c);
                        for (size_t j = 0; j < size_t(H) * W; ++j) {
                            dp[j] = g * (sp[j] - mean) * invstd + b;
                        }
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                n.out_t = Tensor(N, n.out_channels, H, W);
                for (size_t j = 0; j < x.size(); ++j) {
                    n.out_t.data[j] = x.data[j] > 0.0f ? x.data[j] : 0.0f;
                }
                break;
            }
            case LayerKind::Sigmoid: {
                n.out_t = Tensor(N, n.out_channels, H, W);
                for (size_t j = 0; j < x.size(); ++j) {
                    n.out_t.data[j] = 1.0f / (1.0f + std::exp(-x.data[j]));
                }
                break;
            }
            case LayerKind::Concat: {
                n.out_t = Tensor(N, n.out_channels, H, W);
                for (int s = 0; s < N; ++s) {
                    int coff = 0;
                    for (int srcid : n.in) {
                        const Tensor& t = nodes_[srcid].out_t;
                        if (t.h != H || t.w != W) {
                            throw ConfigError("concat at " + n.name + ": spatial mismatch");
                        }
                        std::memcpy(n.out_t.ptr(s, coff), t.ptr(s),
                                    sizeof(float) * t.sample_size());
                        coff += t.c;
                    }
                }
                break;
            }
            case LayerKind::Add: {
                const Tensor& b = nodes_[n.in[1]].out_t;
                n.out_t = Tensor(N, n.out_channels, H, W);
                for (size_t j = 0; j < x.size(); ++j) n.out_t.data[j] = x.data[j] + b.data[j];
                break;
            }
            case LayerKind::Input:
                throw ConfigError("graph: unexpected input node");
        }

        if (!training) {
            for (int srcid : n.in) {
                if (--pending[srcid] == 0 && srcid != output_id_) {
                    nodes_[srcid].out_t.release();
                }
            }
        }
    }
    return nodes_[output_id_].out_t;
}

// ---------------------------------------------------------------------------
// backward

void Graph::backward(const Tensor& dout) {
    if (output_id_ < 0) throw ConfigError("graph: set_output not called");
    Node& out_node = nodes_[output_id_];
    if (!dout.same_shape(out_node.out_t)) {
        throw ConfigError("backward: gradient shape " + dout.shape_str() +
                          " does not match output " + out_node.out_t.shape_str());
    }
    for (Param& p : params_) {
        if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0f);
    }
    for (Node& n : nodes_) n.grad_t = Tensor();
    out_node.grad_t = dout;

    auto ensure_grad = [&](int id) -> Tensor& {
        Node& n = nodes_[id];
        if (n.grad_t.size() == 0) {
            const Tensor& t = n.out_t;
            n.grad_t = Tensor(t.n, t.c, t.h, t.w);
        }
        return n.grad_t;
    };

    for (int i = output_id_; i >= 1; --i) {
        Node& n = nodes_[i];
        if (n.grad_t.size() == 0) continue;  // not on the path to the output
        const Tensor& dy = n.grad_t;
        const Tensor& x = nodes_[n.in[0]].out_t;
        const int N = x.n, H = x.h, W = x.w;

        switch (n.kind) {
            case LayerKind::Conv: {
                const int k = n.ksize, pad = k / 2;
                const int ic = n.in_channels, oc = n.out_channels;
                const size_t hw = size_t(H) * W;
                Param& wp = params_[n.p_weight];
                Param& bp = params_[n.p_bias];
                Tensor& dx = ensure_grad(n.in[0]);
                CMapM wm(wp.value.data(), oc, size_t(ic) * k * k);
                MapM dwm(wp.grad.data(), oc, size_t(ic) * k * k);
                for (int s = 0; s < N; ++s) {
                    CMapM dym(dy.ptr(s), oc, hw);
                    // fixed-order accumulation: Eigen's redux peels to an
                    // alignment boundary, so its summation order (and the
                    // low bits) would depend on the buffer address
                    for (int o = 0; o < oc; ++o) {
                        const float* gp = dy.ptr(s, o);
                        double bsum = 0.0;
                        for (size_t t = 0; t < hw; ++t) bsum += gp[t];
                        bp.grad[o] += float(bsum);
                    }
                    if (k == 1) {
                        CMapM xm(x.ptr(s), ic, hw);
                        dwm.noalias() += dym * xm.transpose();
                        MapM dxm(dx.ptr(s), ic, hw);
                        dxm.noalias() += wm.transpose() * dym;
                    } else {
                        scratch_.resize(size_t(ic) * k * k * hw);
                        im2col(x.ptr(s), ic, H, W, k, pad, scratch_.data());
                        CMapM cm(scratch_.data(), size_t(ic) * k * k, hw);
                        dwm.noalias() += dym * cm.transpose();
                        scratch2_.resize(size_t(ic) * k * k * hw);
                        MapM dcm(scratch2_.data(), size_t(ic) * k * k, hw);
                        dcm.noalias() = wm.transpose() * dym;
                        col2im_add(scratch2_.data(), ic, H, W, k, pad, dx.ptr(s));
                    }
                }
                break;
            }
            case LayerKind::TransposedConv: {
                const int ic = n.in_channels, oc = n.out_channels;
                const size_t hw = size_t(H) * W;
                Param& wp = params_[n.p_weight];
                Param& bp = params_[n.p_bias];
                Tensor& dx = ensure_grad(n.in[0]);
                CMapM wr(wp.value.data(), ic, size_t(oc) * 4);
                MapM dwr(wp.grad.data(), ic, size_t(oc) * 4);
                scratch_.resize(size_t(oc) * 4 * hw);
                for (int s = 0; s < N; ++s) {
                    // gather dY into the (oc*4) x (H*W) layout used by forward
                    for (int o = 0; o < oc; ++o) {
                        double bsum = 0.0;
                        for (int ky = 0; ky < 2; ++ky) {
                            for (int kx = 0; kx < 2; ++kx) {
                                float* drow_m = scratch_.data() + (size_t(o) * 4 + ky * 2 + kx) * hw;
                                for (int y = 0; y < H; ++y) {
                                    const float* srow = dy.ptr(s, o) +
                                                        size_t(2 * y + ky) * (2 * W) + kx;
                                    for (int xx = 0; xx < W; ++xx) {
                                        const float v = srow[2 * xx];
                                        drow_m[size_t(y) * W + xx] = v;
                                        bsum += v;
                                    }
                                }
                            }
                        }
                        bp.grad[o] += float(bsum);
                    }
                    CMapM dmm(scratch_.data(), size_t(oc) * 4, hw);
                    CMapM xm(x.ptr(s), ic, hw);
                    MapM dxm(dx.ptr(s), ic, hw);
                    dxm.noalias() += wr * dmm;
                    dwr.noalias() += xm * dmm.transpose();
                }
                break;
            }
            case LayerKind::UpsampleNearest: {
                Tensor& dx = ensure_grad(n.in[0]);
                for (int s = 0; s < N; ++s) {
                    for (int c = 0; c < n.out_channels; ++c) {
                        const float* gp = dy.ptr(s, c);
                        float* dp = dx.ptr(s, c);
                        for (int y = 0; y < H; ++y) {
                            for (int xx = 0; xx < W; ++xx) {
                                const float* g0 = gp + size_t(2 * y) * (2 * W) + 2 * xx;
                                dp[size_t(y) * W + xx] +=
                                    g0[0] + g0[1] + g0[2 * W] + g0[2 * W + 1];
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::MaxPool: {
                const int Ho = H / 2, Wo = W / 2;
                Tensor& dx = ensure_grad(n.in[0]);
                for (int s = 0; s < N; ++s) {
                    for (int c = 0; c < n.out_channels; ++c) {
                        const float* gp = dy.ptr(s, c);
                        const uint8_t* ap =
                            n.pool_arg.data() + (size_t(s) * n.out_channels + c) * Ho * Wo;
                        float* dp = dx.ptr(s, c);
                        for (int y = 0; y < Ho; ++y) {
                            for (int xx = 0; xx < Wo; ++xx) {
                                const uint8_t a = ap[size_t(y) * Wo + xx];
                                const int iy = 2 * y + (a >> 1), ix = 2 * xx + (a & 1);
                                dp[size_t(iy) * W + ix] += gp[size_t(y) * Wo + xx];
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const int C = n.out_channels;
                const size_t m = size_t(N) * H * W;
                Param& gp = params_[n.p_gamma];
                Param& bp = params_[n.p_beta];
                Tensor& dx = ensure_grad(n.in[0]);
                for (int c = 0; c < C; ++c) {
                    const float mean = n.bn_mean[c], invstd = n.bn_invstd[c];
                    double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
                    for (int s = 0; s < N; ++s) {
                        const float* xp = x.ptr(s, c);
                        const float* gp2 = dy.ptr(s, c);
                        for (size_t j = 0; j < size_t(H) * W; ++j) {
                            const double xhat = double(xp[j] - mean) * invstd;
                            s1 += gp2[j];
                            s2 += double(gp2[j]) * xhat;
                        }
                    }
                    gp.grad[c] += float(s2);
                    bp.grad[c] += float(s1);
                    const double g = gp.value[c];
                    const double k1 = s1 / double(m), k2 = s2 / double(m);
                    for (int s = 0; s < N; ++s) {
                        const float* xp = x.ptr(s, c);
                        const float* gp2 = dy.ptr(s, c);
                        float* dp = dx.ptr(s, c);
                        for (size_t j = 0; j < size_t(H) * W; ++j) {
                            const double xhat = double(xp[j] - mean) * invstd;
                            dp[j] += float(g * invstd * (gp2[j] - k1 - xhat * k2));
                        }
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                Tensor& dx = ensure_grad(n.in[0]);
                for (size_t j = 0; j < dy.size(); ++j) {
                    if (n.out_t.data[j] > 0.0f) dx.data[j] += dy.data[j];
                }
                break;
            }
            case LayerKind::Sigmoid: {
                Tensor& dx = ensure_grad(n.in[0]);
                for (size_t j = 0; j < dy.size(); ++j) {
                    const float y = n.out_t.data[j];
                    dx.data[j] += dy.data[j] * y * (1.0f - y);
                }
                break;
            }
            case LayerKind::Concat: {
                int coff = 0;
                for (int srcid : n.in) {
                    Tensor& dx = ensure_grad(srcid);
                    for (int s = 0; s < N; ++s) {
                        const float* gp = dy.ptr(s, coff);
                        float* dp = dx.ptr(s);
                        for (size_t j = 0; j < dx.sample_size(); ++j) dp[j] += gp[j];
                    }
                    coff += dx.c;
                }
                break;
            }
            case LayerKind::Add: {
                Tensor& da = ensure_grad(n.in[0]);
                Tensor& db = ensure_grad(n.in[1]);
                for (size_t j = 0; j < dy.size(); ++j) {
                    da.data[j] += dy.data[j];
                    db.data[j] += dy.data[j];
                }
                break;
            }
            case LayerKind::Input:
                break;
        }
        n.grad_t.release();
    }
}

}  // namespace stackunet
