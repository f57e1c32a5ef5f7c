#include "gift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "gift/errors.hpp"

namespace gift {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

void check_shape(const std::vector<std::int64_t>& shape) {
    for (auto e : shape) {
        if (e <= 0) {
            std::ostringstream os;
            os << "tensor shape must have positive extents, got [";
            for (std::size_t i = 0; i < shape.size(); ++i)
                os << (i ? "," : "") << shape[i];
            os << "]";
            throw shape_error(os.str());
        }
    }
}

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

NodePtr make_node(std::vector<std::int64_t> shape, bool requires_grad) {
    check_shape(shape);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<std::size_t>(shape_numel(n->shape)), 0.0);
    n->requires_grad = requires_grad;
    return n;
}

const TensorNode& req(const Tensor& t, const char* what) {
    if (!t.defined()) throw shape_error(std::string(what) + ": undefined tensor");
    return *t.node();
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

/// Attach parents + backward closure to an output node when the tape is live.
void record(const NodePtr& out, std::vector<NodePtr> parents, std::function<void()> fn) {
    bool live = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) live = true;
    if (!live) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

} // namespace

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    auto n = make_node(std::move(shape), requires_grad);
    std::fill(n->data.begin(), n->data.end(), value);
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> values,
                         bool requires_grad) {
    auto n = make_node(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(values.size()) != n->numel())
        throw shape_error("from_data: " + std::to_string(values.size()) +
                          " values for shape " + shape_str(n->shape));
    n->data = std::move(values);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar_value(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

const std::vector<std::int64_t>& Tensor::shape() const { return req(*this, "shape").shape; }

std::int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw shape_error("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return req(*this, "numel").numel(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double* Tensor::data() { return req(*this, "data").data.empty() ? nullptr : node_->data.data(); }
const double* Tensor::data() const {
    return req(*this, "data").data.empty() ? nullptr : node_->data.data();
}

const double* Tensor::grad_data() const {
    if (!node_ || node_->grad.empty()) return nullptr;
    return node_->grad.data();
}

std::vector<double>& Tensor::grad() {
    req(*this, "grad");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const auto& n = req(*this, "at");
    if (idx.size() != n.shape.size())
        throw shape_error("at: rank mismatch for " + shape_str(n.shape));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        if (i < 0 || i >= n.shape[k]) throw shape_error("at: index out of bounds");
        flat = flat * n.shape[k] + i;
        ++k;
    }
    return n.data[static_cast<std::size_t>(flat)];
}

void Tensor::set(std::initializer_list<std::int64_t> idx, double v) {
    const auto& n = req(*this, "set");
    if (idx.size() != n.shape.size())
        throw shape_error("set: rank mismatch for " + shape_str(n.shape));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        if (i < 0 || i >= n.shape[k]) throw shape_error("set: index out of bounds");
        flat = flat * n.shape[k] + i;
        ++k;
    }
    node_->data[static_cast<std::size_t>(flat)] = v;
}

double Tensor::scalar() const {
    const auto& n = req(*this, "scalar");
    if (n.numel() != 1) throw shape_error("scalar: tensor has " + std::to_string(n.numel()) + " elements");
    return n.data[0];
}

Tensor Tensor::detach() const {
    const auto& n = req(*this, "detach");
    return from_data(n.shape, n.data, false);
}

bool Tensor::all_finite() const {
    const auto& n = req(*this, "all_finite");
    for (double v : n.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- conv2d -----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
    const auto& xn = req(input, "conv2d input");
    const auto& wn = req(weight, "conv2d weight");
    const auto& bn = req(bias, "conv2d bias");
    if (xn.shape.size() != 4) throw shape_error("conv2d: input must be [N,C,H,W], got " + shape_str(xn.shape));
    if (wn.shape.size() != 4) throw shape_error("conv2d: weight must be [OC,IC,kh,kw], got " + shape_str(wn.shape));
    const std::int64_t N = xn.shape[0], C = xn.shape[1], H = xn.shape[2], W = xn.shape[3];
    const std::int64_t OC = wn.shape[0], IC = wn.shape[1], KH = wn.shape[2], KW = wn.shape[3];
    if (IC != C)
        throw shape_error("conv2d: input has " + std::to_string(C) + " channels but weight expects " +
                          std::to_string(IC));
    if (bn.shape.size() != 1 || bn.shape[0] != OC)
        throw shape_error("conv2d: bias must be [" + std::to_string(OC) + "], got " + shape_str(bn.shape));
    if (stride < 1) throw shape_error("conv2d: stride must be positive");
    if (padding < 0) throw shape_error("conv2d: padding must be non-negative");
    const std::int64_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - KW) / stride + 1;
    if (H + 2 * padding < KH || W + 2 * padding < KW || OH < 1 || OW < 1)
        throw shape_error("conv2d: kernel " + shape_str(wn.shape) + " does not fit padded input " +
                          shape_str(xn.shape) + " with padding " + std::to_string(padding));

    auto out = make_node({N, OC, OH, OW}, false);
    const double* X = xn.data.data();
    const double* Wt = wn.data.data();
    const double* B = bn.data.data();
    double* Y = out->data.data();
    const std::int64_t s = stride, p = padding;

    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            double* yplane = Y + ((n * OC + oc) * OH) * OW;
            std::fill(yplane, yplane + OH * OW, B[oc]);
            for (std::int64_t ic = 0; ic < C; ++ic) {
                const double* xplane = X + ((n * C + ic) * H) * W;
                const double* wrow = Wt + ((oc * IC + ic) * KH) * KW;
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const double w = wrow[kh * KW + kw];
                        // output columns whose sampled input column is in range
                        std::int64_t ow0 = 0;
                        while (ow0 < OW && ow0 * s - p + kw < 0) ++ow0;
                        std::int64_t ow1 = OW;
                        while (ow1 > ow0 && (ow1 - 1) * s - p + kw >= W) --ow1;
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) continue;
                            const double* xr = xplane + ih * W - p + kw;
                            double* yr = yplane + oh * OW;
                            if (s == 1) {
                                for (std::int64_t ow = ow0; ow < ow1; ++ow) yr[ow] += w * xr[ow];
                            } else {
                                for (std::int64_t ow = ow0; ow < ow1; ++ow) yr[ow] += w * xr[ow * s];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor result(out);
    if (any_grad({&input, &weight, &bias})) {
        TensorNode* xp = input.node().get();
        TensorNode* wp = weight.node().get();
        TensorNode* bp = bias.node().get();
        TensorNode* op = out.get();
        record(out, {input.node(), weight.node(), bias.node()},
               [xp, wp, bp, op, N, C, H, W, OC, IC, KH, KW, OH, OW, s, p]() {
            const double* G = op->grad.data();
            const double* X = xp->data.data();
            const double* Wt = wp->data.data();
            if (bp->requires_grad) {
                bp->ensure_grad();
                double* gb = bp->grad.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        const double* gp = G + ((n * OC + oc) * OH) * OW;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
                        gb[oc] += acc;
                    }
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                double* gw = wp->grad.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        const double* gplane = G + ((n * OC + oc) * OH) * OW;
                        for (std::int64_t ic = 0; ic < C; ++ic) {
                            const double* xplane = X + ((n * C + ic) * H) * W;
                            for (std::int64_t kh = 0; kh < KH; ++kh)
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    std::int64_t ow0 = 0;
                                    while (ow0 < OW && ow0 * s - p + kw < 0) ++ow0;
                                    std::int64_t ow1 = OW;
                                    while (ow1 > ow0 && (ow1 - 1) * s - p + kw >= W) --ow1;
                                    double acc = 0.0;
                                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                                        const std::int64_t ih = oh * s - p + kh;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* xr = xplane + ih * W - p + kw;
                                        const double* gr = gplane + oh * OW;
                                        if (s == 1) {
                                            for (std::int64_t ow = ow0; ow < ow1; ++ow) acc += gr[ow] * xr[ow];
                                        } else {
                                            for (std::int64_t ow = ow0; ow < ow1; ++ow) acc += gr[ow] * xr[ow * s];
                                        }
                                    }
                                    gw[((oc * IC + ic) * KH + kh) * KW + kw] += acc;
                                }
                        }
                    }
            }
            if (xp->requires_grad) {
                xp->ensure_grad();
                double* gx = xp->grad.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        const double* gplane = G + ((n * OC + oc) * OH) * OW;
                        for (std::int64_t ic = 0; ic < C; ++ic) {
                            double* gxplane = gx + ((n * C + ic) * H) * W;
                            const double* wrow = Wt + ((oc * IC + ic) * KH) * KW;
                            for (std::int64_t kh = 0; kh < KH; ++kh)
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    const double w = wrow[kh * KW + kw];
                                    std::int64_t ow0 = 0;
                                    while (ow0 < OW && ow0 * s - p + kw < 0) ++ow0;
                                    std::int64_t ow1 = OW;
                                    while (ow1 > ow0 && (ow1 - 1) * s - p + kw >= W) --ow1;
                                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                                        const std::int64_t ih = oh * s - p + kh;
                                        if (ih < 0 || ih >= H) continue;
                                        double* gxr = gxplane + ih * W - p + kw;
                                        const double* gr = gplane + oh * OW;
                                        if (s == 1) {
                                            for (std::int64_t ow = ow0; ow < ow1; ++ow) gxr[ow] += w * gr[ow];
                                        } else {
                                            for (std::int64_t ow = ow0; ow < ow1; ++ow) gxr[ow * s] += w * gr[ow];
                                        }
                                    }
                                }
                        }
                    }
            }
        });
    }
    return result;
}

// ---- instance_norm ----------------------------------------------------------

Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps, const Tensor& mask) {
    const auto& xn = req(input, "instance_norm input");
    const auto& gn = req(gamma, "instance_norm gamma");
    const auto& bn = req(beta, "instance_norm beta");
    if (xn.shape.size() != 4)
        throw shape_error("instance_norm: input must be [N,C,H,W], got " + shape_str(xn.shape));
    const std::int64_t N = xn.shape[0], C = xn.shape[1], H = xn.shape[2], W = xn.shape[3];
    if (gn.shape != std::vector<std::int64_t>{C} || bn.shape != std::vector<std::int64_t>{C})
        throw shape_error("instance_norm: gamma/beta must be [" + std::to_string(C) + "]");
    const double* M = nullptr;
    if (mask.defined()) {
        const auto& mn = req(mask, "instance_norm mask");
        if (mn.shape != std::vector<std::int64_t>{N, 1, H, W})
            throw shape_error("instance_norm: mask must be [N,1,H,W], got " + shape_str(mn.shape));
        M = mn.data.data();
    }

    const std::int64_t P = H * W;
    auto out = make_node({N, C, H, W}, false);
    // per-plane statistics kept for the backward pass
    auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N * C));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N * C));
    auto msum = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N), 0.0);

    for (std::int64_t n = 0; n < N; ++n) {
        double cnt = static_cast<double>(P);
        const double* mp = M ? M + n * P : nullptr;
        if (mp) {
            cnt = 0.0;
            for (std::int64_t i = 0; i < P; ++i)
                if (mp[i] > 0.5) cnt += 1.0;
            if (cnt < 2.0) { mp = nullptr; cnt = static_cast<double>(P); } // degenerate mask: full plane
        }
        (*msum)[static_cast<std::size_t>(n)] = mp ? cnt : -1.0; // -1 marks "unmasked"
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xp = xn.data.data() + ((n * C + c) * P);
            double mu = 0.0;
            if (mp) {
                for (std::int64_t i = 0; i < P; ++i)
                    if (mp[i] > 0.5) mu += xp[i];
            } else {
                for (std::int64_t i = 0; i < P; ++i) mu += xp[i];
            }
            mu /= cnt;
            double var = 0.0;
            if (mp) {
                for (std::int64_t i = 0; i < P; ++i)
                    if (mp[i] > 0.5) { const double d = xp[i] - mu; var += d * d; }
            } else {
                for (std::int64_t i = 0; i < P; ++i) { const double d = xp[i] - mu; var += d * d; }
            }
            var /= cnt;
            const double is = 1.0 / std::sqrt(var + eps);
            (*mean)[static_cast<std::size_t>(n * C + c)] = mu;
            (*inv_std)[static_cast<std::size_t>(n * C + c)] = is;
            const double g = gn.data[static_cast<std::size_t>(c)];
            const double bb = bn.data[static_cast<std::size_t>(c)];
            double* yp = out->data.data() + ((n * C + c) * P);
            for (std::int64_t i = 0; i < P; ++i) yp[i] = g * ((xp[i] - mu) * is) + bb;
        }
    }

    Tensor result(out);
    if (any_grad({&input, &gamma, &beta})) {
        TensorNode* xp = input.node().get();
        TensorNode* gp = gamma.node().get();
        TensorNode* bp = beta.node().get();
        TensorNode* op = out.get();
        NodePtr mnode = mask.defined() ? mask.node() : nullptr;
        record(out, {input.node(), gamma.node(), beta.node()},
               [xp, gp, bp, op, mnode, mean, inv_std, msum, N, C, P]() {
            const double* G = op->grad.data();
            const double* X = xp->data.data();
            const double* M = mnode ? mnode->data.data() : nullptr;
            for (std::int64_t n = 0; n < N; ++n) {
                const bool masked = (*msum)[static_cast<std::size_t>(n)] >= 0.0 && M;
                const double cnt = masked ? (*msum)[static_cast<std::size_t>(n)] : static_cast<double>(P);
                const double* mp = masked ? M + n * P : nullptr;
                for (std::int64_t c = 0; c < C; ++c) {
                    const double mu = (*mean)[static_cast<std::size_t>(n * C + c)];
                    const double is = (*inv_std)[static_cast<std::size_t>(n * C + c)];
                    const double g = gp->data[static_cast<std::size_t>(c)];
                    const double* xrow = X + (n * C + c) * P;
                    const double* grow = G + (n * C + c) * P;
                    double sum_dy = 0.0, sum_dy_y = 0.0, sum_g = 0.0, sum_gy = 0.0;
                    for (std::int64_t i = 0; i < P; ++i) {
                        const double y = (xrow[i] - mu) * is;
                        const double dy = g * grow[i];
                        sum_dy += dy;
                        sum_dy_y += dy * y;
                        sum_g += grow[i];
                        sum_gy += grow[i] * y;
                    }
                    if (gp->requires_grad) {
                        gp->ensure_grad();
                        gp->grad[static_cast<std::size_t>(c)] += sum_gy;
                    }
                    if (bp->requires_grad) {
                        bp->ensure_grad();
                        bp->grad[static_cast<std::size_t>(c)] += sum_g;
                    }
                    if (xp->requires_grad) {
                        xp->ensure_grad();
                        double* gxrow = xp->grad.data() + (n * C + c) * P;
                        // statistics depend only on masked cells; every output
                        // cell depends on the statistics
                        for (std::int64_t i = 0; i < P; ++i) {
                            const double y = (xrow[i] - mu) * is;
                            double dx = g * grow[i] * is;
                            const bool in_stats = !mp || mp[i] > 0.5;
                            if (in_stats) dx -= is / cnt * (sum_dy + y * sum_dy_y);
                            gxrow[i] += dx;
                        }
                    }
                }
            }
        });
    }
    return result;
}

// ---- relu -------------------------------------------------------------------

Tensor relu(const Tensor& input) {
    const auto& xn = req(input, "relu input");
    auto out = make_node(xn.shape, false);
    for (std::size_t i = 0; i < xn.data.size(); ++i)
        out->data[i] = xn.data[i] > 0.0 ? xn.data[i] : 0.0;
    Tensor result(out);
    if (input.requires_grad()) {
        TensorNode* xp = input.node().get();
        TensorNode* op = out.get();
        record(out, {input.node()}, [xp, op]() {
            xp->ensure_grad();
            const double* G = op->grad.data();
            for (std::size_t i = 0; i < xp->data.size(); ++i)
                if (xp->data[i] > 0.0) xp->grad[i] += G[i];
        });
    }
    return result;
}

// ---- avg_pool2d -------------------------------------------------------------

Tensor avg_pool2d(const Tensor& input, int window, int stride) {
    const auto& xn = req(input, "avg_pool2d input");
    if (xn.shape.size() != 4)
        throw shape_error("avg_pool2d: input must be [N,C,H,W], got " + shape_str(xn.shape));
    if (window < 1 || stride < 1) throw shape_error("avg_pool2d: window and stride must be positive");
    const std::int64_t N = xn.shape[0], C = xn.shape[1], H = xn.shape[2], W = xn.shape[3];
    const std::int64_t OH = (H - window) / stride + 1;
    const std::int64_t OW = (W - window) / stride + 1;
    if (H < window || W < window)
        throw shape_error("avg_pool2d: window larger than input " + shape_str(xn.shape));
    auto out = make_node({N, C, OH, OW}, false);
    const double inv = 1.0 / (static_cast<double>(window) * window);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* xp = xn.data.data() + nc * H * W;
        double* yp = out->data.data() + nc * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (int dy = 0; dy < window; ++dy) {
                    const double* xr = xp + (oh * stride + dy) * W + ow * stride;
                    for (int dx = 0; dx < window; ++dx) acc += xr[dx];
                }
                yp[oh * OW + ow] = acc * inv;
            }
    }
    Tensor result(out);
    if (input.requires_grad()) {
        TensorNode* xp = input.node().get();
        TensorNode* op = out.get();
        const int wnd = window, st = stride;
        record(out, {input.node()}, [xp, op, N, C, H, W, OH, OW, wnd, st, inv]() {
            xp->ensure_grad();
            const double* G = op->grad.data();
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                double* gx = xp->grad.data() + nc * H * W;
                const double* gp = G + nc * OH * OW;
                for (std::int64_t oh = 0; oh < OH; ++oh)
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const double g = gp[oh * OW + ow] * inv;
                        for (int dy = 0; dy < wnd; ++dy) {
                            double* gr = gx + (oh * st + dy) * W + ow * st;
                            for (int dx = 0; dx < wnd; ++dx) gr[dx] += g;
                        }
                    }
            }
        });
    }
    return result;
}

// ---- matmul / transpose -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& an = req(a, "matmul lhs");
    const auto& bn = req(b, "matmul rhs");
    if (an.shape.size() != 2 || bn.shape.size() != 2)
        throw shape_error("matmul: operands must be rank-2, got " + shape_str(an.shape) + " x " +
                          shape_str(bn.shape));
    const std::int64_t M = an.shape[0], K = an.shape[1], K2 = bn.shape[0], N = bn.shape[1];
    if (K != K2)
        throw shape_error("matmul: inner dimensions differ, " + shape_str(an.shape) + " x " +
                          shape_str(bn.shape));
    auto out = make_node({M, N}, false);
    const double* A = an.data.data();
    const double* B = bn.data.data();
    double* Y = out->data.data();
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = A[i * K + k];
            const double* br = B + k * N;
            double* yr = Y + i * N;
            for (std::int64_t j = 0; j < N; ++j) yr[j] += av * br[j];
        }
    Tensor result(out);
    if (any_grad({&a, &b})) {
        TensorNode* ap = a.node().get();
        TensorNode* bp = b.node().get();
        TensorNode* op = out.get();
        record(out, {a.node(), b.node()}, [ap, bp, op, M, K, N]() {
            const double* G = op->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::int64_t i = 0; i < M; ++i)
                    for (std::int64_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        const double* gr = G + i * N;
                        const double* br = bp->data.data() + k * N;
                        for (std::int64_t j = 0; j < N; ++j) acc += gr[j] * br[j];
                        ap->grad[static_cast<std::size_t>(i * K + k)] += acc;
                    }
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::int64_t k = 0; k < K; ++k)
                    for (std::int64_t i = 0; i < M; ++i) {
                        const double av = ap->data[static_cast<std::size_t>(i * K + k)];
                        const double* gr = G + i * N;
                        double* gb = bp->grad.data() + k * N;
                        for (std::int64_t j = 0; j < N; ++j) gb[j] += av * gr[j];
                    }
            }
        });
    }
    return result;
}

Tensor transpose2d(const Tensor& a) {
    const auto& an = req(a, "transpose2d");
    if (an.shape.size() != 2)
        throw shape_error("transpose2d: operand must be rank-2, got " + shape_str(an.shape));
    const std::int64_t M = an.shape[0], N = an.shape[1];
    auto out = make_node({N, M}, false);
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j)
            out->data[static_cast<std::size_t>(j * M + i)] = an.data[static_cast<std::size_t>(i * N + j)];
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op, M, N]() {
            ap->ensure_grad();
            for (std::int64_t i = 0; i < M; ++i)
                for (std::int64_t j = 0; j < N; ++j)
                    ap->grad[static_cast<std::size_t>(i * N + j)] +=
                        op->grad[static_cast<std::size_t>(j * M + i)];
        });
    }
    return result;
}

// ---- bilinear_sample ----------------------------------------------------------

Tensor bilinear_sample(const Tensor& map, double x, double y, bool* valid) {
    const auto& mn = req(map, "bilinear_sample map");
    if (mn.shape.size() != 3)
        throw shape_error("bilinear_sample: map must be [C,H,W], got " + shape_str(mn.shape));
    const std::int64_t C = mn.shape[0], H = mn.shape[1], W = mn.shape[2];
    auto out = make_node({C}, false);
    const bool inside = x >= 0.0 && x <= static_cast<double>(W - 1) &&
                        y >= 0.0 && y <= static_cast<double>(H - 1);
    if (valid) *valid = inside;
    if (!inside) return Tensor(out); // zero vector, off the tape

    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    // corner weights; out-of-grid corners always carry weight exactly 0
    struct Corner { std::int64_t cx, cy; double w; };
    Corner corners[4] = {
        {x0, y0, (1.0 - fx) * (1.0 - fy)},
        {x0 + 1, y0, fx * (1.0 - fy)},
        {x0, y0 + 1, (1.0 - fx) * fy},
        {x0 + 1, y0 + 1, fx * fy},
    };
    for (const auto& c : corners) {
        if (c.w == 0.0 || c.cx >= W || c.cy >= H) continue;
        const double* src = mn.data.data() + (c.cy * W + c.cx);
        for (std::int64_t ch = 0; ch < C; ++ch)
            out->data[static_cast<std::size_t>(ch)] += c.w * src[ch * H * W];
    }
    Tensor result(out);
    if (map.requires_grad()) {
        TensorNode* mp = map.node().get();
        TensorNode* op = out.get();
        std::vector<Corner> cs(corners, corners + 4);
        record(out, {map.node()}, [mp, op, cs, C, H, W]() {
            mp->ensure_grad();
            const double* G = op->grad.data();
            for (const auto& c : cs) {
                if (c.w == 0.0 || c.cx >= W || c.cy >= H) continue;
                double* dst = mp->grad.data() + (c.cy * W + c.cx);
                for (std::int64_t ch = 0; ch < C; ++ch) dst[ch * H * W] += c.w * G[ch];
            }
        });
    }
    return result;
}

// ---- group_stencil_conv ---------------------------------------------------------

Tensor group_stencil_conv(const Tensor& f, const Tensor& weight, const Tensor& bias) {
    const auto& fn = req(f, "group_stencil_conv input");
    const auto& wn = req(weight, "group_stencil_conv weight");
    const auto& bn = req(bias, "group_stencil_conv bias");
    if (fn.shape.size() != 3)
        throw shape_error("group_stencil_conv: input must be [A,B,IC], got " + shape_str(fn.shape));
    if (wn.shape.size() != 4 || wn.shape[2] != 3 || wn.shape[3] != 3)
        throw shape_error("group_stencil_conv: weight must be [OC,IC,3,3], got " + shape_str(wn.shape));
    const std::int64_t A = fn.shape[0], B = fn.shape[1], IC = fn.shape[2];
    const std::int64_t OC = wn.shape[0];
    if (wn.shape[1] != IC)
        throw shape_error("group_stencil_conv: input has " + std::to_string(IC) +
                          " channels but weight expects " + std::to_string(wn.shape[1]));
    if (bn.shape.size() != 1 || bn.shape[0] != OC)
        throw shape_error("group_stencil_conv: bias must be [" + std::to_string(OC) + "]");

    auto out = make_node({A, B, OC}, false);
    const double* F = fn.data.data();
    const double* Wt = wn.data.data();
    for (std::int64_t a = 0; a < A; ++a)
        for (std::int64_t b = 0; b < B; ++b) {
            double* yr = out->data.data() + (a * B + b) * OC;
            for (std::int64_t i = 0; i < OC; ++i) yr[i] = bn.data[static_cast<std::size_t>(i)];
            for (int da = -1; da <= 1; ++da) {
                const std::int64_t sa = a + da;
                if (sa < 0 || sa >= A) continue;
                for (int db = -1; db <= 1; ++db) {
                    const std::int64_t sb = b + db;
                    if (sb < 0 || sb >= B) continue;
                    const double* fr = F + (sa * B + sb) * IC;
                    const std::int64_t koff = (da + 1) * 3 + (db + 1);
                    for (std::int64_t i = 0; i < OC; ++i) {
                        const double* wr = Wt + (i * IC) * 9 + koff;
                        double acc = 0.0;
                        for (std::int64_t c = 0; c < IC; ++c) acc += fr[c] * wr[c * 9];
                        yr[i] += acc;
                    }
                }
            }
        }

    Tensor result(out);
    if (any_grad({&f, &weight, &bias})) {
        TensorNode* fp = f.node().get();
        TensorNode* wp = weight.node().get();
        TensorNode* bp = bias.node().get();
        TensorNode* op = out.get();
        record(out, {f.node(), weight.node(), bias.node()}, [fp, wp, bp, op, A, B, IC, OC]() {
            const double* G = op->grad.data();
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::int64_t ab = 0; ab < A * B; ++ab) {
                    const double* gr = G + ab * OC;
                    for (std::int64_t i = 0; i < OC; ++i) bp->grad[static_cast<std::size_t>(i)] += gr[i];
                }
            }
            const bool need_f = fp->requires_grad;
            const bool need_w = wp->requires_grad;
            if (need_f) fp->ensure_grad();
            if (need_w) wp->ensure_grad();
            if (!need_f && !need_w) return;
            for (std::int64_t a = 0; a < A; ++a)
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* gr = G + (a * B + b) * OC;
                    for (int da = -1; da <= 1; ++da) {
                        const std::int64_t sa = a + da;
                        if (sa < 0 || sa >= A) continue;
                        for (int db = -1; db <= 1; ++db) {
                            const std::int64_t sb = b + db;
                            if (sb < 0 || sb >= B) continue;
                            const std::int64_t koff = (da + 1) * 3 + (db + 1);
                            const double* fr = fp->data.data() + (sa * B + sb) * IC;
                            double* gf = need_f ? fp->grad.data() + (sa * B + sb) * IC : nullptr;
                            for (std::int64_t i = 0; i < OC; ++i) {
                                const double g = gr[i];
                                if (g == 0.0) continue;
                                const double* wr = wp->data.data() + (i * IC) * 9 + koff;
                                if (need_f)
                                    for (std::int64_t c = 0; c < IC; ++c) gf[c] += g * wr[c * 9];
                                if (need_w) {
                                    double* gw = wp->grad.data() + (i * IC) * 9 + koff;
                                    for (std::int64_t c = 0; c < IC; ++c) gw[c * 9] += g * fr[c];
                                }
                            }
                        }
                    }
                }
        });
    }
    return result;
}

// ---- elementwise glue ---------------------------------------------------------

namespace {

void check_same_shape(const TensorNode& a, const TensorNode& b, const char* what) {
    if (a.shape != b.shape)
        throw shape_error(std::string(what) + ": shapes differ, " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const auto& an = req(a, "add");
    const auto& bn = req(b, "add");
    check_same_shape(an, bn, "add");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] + bn.data[i];
    Tensor result(out);
    if (any_grad({&a, &b})) {
        TensorNode* ap = a.node().get();
        TensorNode* bp = b.node().get();
        TensorNode* op = out.get();
        record(out, {a.node(), b.node()}, [ap, bp, op]() {
            const double* G = op->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < bp->data.size(); ++i) bp->grad[i] += G[i];
            }
        });
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const auto& an = req(a, "sub");
    const auto& bn = req(b, "sub");
    check_same_shape(an, bn, "sub");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] - bn.data[i];
    Tensor result(out);
    if (any_grad({&a, &b})) {
        TensorNode* ap = a.node().get();
        TensorNode* bp = b.node().get();
        TensorNode* op = out.get();
        record(out, {a.node(), b.node()}, [ap, bp, op]() {
            const double* G = op->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < bp->data.size(); ++i) bp->grad[i] -= G[i];
            }
        });
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const auto& an = req(a, "mul");
    const auto& bn = req(b, "mul");
    check_same_shape(an, bn, "mul");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] * bn.data[i];
    Tensor result(out);
    if (any_grad({&a, &b})) {
        TensorNode* ap = a.node().get();
        TensorNode* bp = b.node().get();
        TensorNode* op = out.get();
        record(out, {a.node(), b.node()}, [ap, bp, op]() {
            const double* G = op->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i] * bp->data[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < bp->data.size(); ++i) bp->grad[i] += G[i] * ap->data[i];
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double c) {
    const auto& an = req(a, "scale");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] * c;
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op, c]() {
            ap->ensure_grad();
            const double* G = op->grad.data();
            for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i] * c;
        });
    }
    return result;
}

Tensor add_scalar(const Tensor& a, double c) {
    const auto& an = req(a, "add_scalar");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] + c;
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op]() {
            ap->ensure_grad();
            const double* G = op->grad.data();
            for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i];
        });
    }
    return result;
}

Tensor sum_all(const Tensor& a) {
    const auto& an = req(a, "sum_all");
    auto out = make_node({1}, false);
    double acc = 0.0;
    for (double v : an.data) acc += v;
    out->data[0] = acc;
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op]() {
            ap->ensure_grad();
            const double g = op->grad[0];
            for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += g;
        });
    }
    return result;
}

Tensor sqrt_elem(const Tensor& a) {
    const auto& an = req(a, "sqrt_elem");
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = std::sqrt(an.data[i]);
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op]() {
            ap->ensure_grad();
            const double* G = op->grad.data();
            for (std::size_t i = 0; i < ap->data.size(); ++i) {
                const double y = op->data[i];
                if (y > 0.0) ap->grad[i] += G[i] / (2.0 * y); // subgradient 0 at x=0
            }
        });
    }
    return result;
}

Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
    const auto& an = req(a, "div_by_scalar");
    const auto& sn = req(s, "div_by_scalar divisor");
    if (sn.numel() != 1) throw shape_error("div_by_scalar: divisor must have a single element");
    const double sv = sn.data[0];
    auto out = make_node(an.shape, false);
    for (std::size_t i = 0; i < an.data.size(); ++i) out->data[i] = an.data[i] / sv;
    Tensor result(out);
    if (any_grad({&a, &s})) {
        TensorNode* ap = a.node().get();
        TensorNode* sp = s.node().get();
        TensorNode* op = out.get();
        record(out, {a.node(), s.node()}, [ap, sp, op, sv]() {
            const double* G = op->grad.data();
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += G[i] / sv;
            }
            if (sp->requires_grad) {
                sp->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < ap->data.size(); ++i) acc += G[i] * ap->data[i];
                sp->grad[0] -= acc / (sv * sv);
            }
        });
    }
    return result;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw shape_error("stack_rows: no rows");
    const auto& first = req(rows[0], "stack_rows");
    std::vector<std::int64_t> row_shape = first.shape;
    const std::int64_t row_n = first.numel();
    std::vector<std::int64_t> out_shape;
    out_shape.push_back(static_cast<std::int64_t>(rows.size()));
    for (auto e : row_shape) out_shape.push_back(e);
    auto out = make_node(out_shape, false);
    bool needs_grad = false;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& rn = req(rows[r], "stack_rows");
        if (rn.shape != row_shape) throw shape_error("stack_rows: row shapes differ");
        std::copy(rn.data.begin(), rn.data.end(),
                  out->data.begin() + static_cast<std::ptrdiff_t>(r * row_n));
        needs_grad = needs_grad || rn.requires_grad;
    }
    Tensor result(out);
    if (needs_grad) {
        std::vector<NodePtr> parents;
        parents.reserve(rows.size());
        for (const auto& r : rows) parents.push_back(r.node());
        TensorNode* op = out.get();
        std::vector<TensorNode*> raw;
        raw.reserve(rows.size());
        for (const auto& p : parents) raw.push_back(p.get());
        record(out, parents, [raw, op, row_n]() {
            const double* G = op->grad.data();
            for (std::size_t r = 0; r < raw.size(); ++r) {
                if (!raw[r]->requires_grad) continue;
                raw[r]->ensure_grad();
                const double* g = G + r * static_cast<std::size_t>(row_n);
                for (std::int64_t i = 0; i < row_n; ++i)
                    raw[r]->grad[static_cast<std::size_t>(i)] += g[i];
            }
        });
    }
    return result;
}

Tensor reshape(const Tensor& a, std::vector<std::int64_t> new_shape) {
    const auto& an = req(a, "reshape");
    check_shape(new_shape);
    if (shape_numel(new_shape) != an.numel())
        throw shape_error("reshape: cannot view " + shape_str(an.shape) + " as " + shape_str(new_shape));
    auto out = make_node(new_shape, false);
    out->data = an.data;
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op]() {
            ap->ensure_grad();
            for (std::size_t i = 0; i < ap->data.size(); ++i) ap->grad[i] += op->grad[i];
        });
    }
    return result;
}

Tensor max_over_rows(const Tensor& a) {
    const auto& an = req(a, "max_over_rows");
    if (an.shape.size() != 2) throw shape_error("max_over_rows: operand must be rank-2");
    const std::int64_t R = an.shape[0], C = an.shape[1];
    auto out = make_node({C}, false);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(C), 0);
    for (std::int64_t c = 0; c < C; ++c) {
        double best = an.data[static_cast<std::size_t>(c)];
        std::int64_t bi = 0;
        for (std::int64_t r = 1; r < R; ++r) {
            const double v = an.data[static_cast<std::size_t>(r * C + c)];
            if (v > best) { best = v; bi = r; }
        }
        out->data[static_cast<std::size_t>(c)] = best;
        (*argmax)[static_cast<std::size_t>(c)] = bi;
    }
    Tensor result(out);
    if (a.requires_grad()) {
        TensorNode* ap = a.node().get();
        TensorNode* op = out.get();
        record(out, {a.node()}, [ap, op, argmax, C]() {
            ap->ensure_grad();
            for (std::int64_t c = 0; c < C; ++c)
                ap->grad[static_cast<std::size_t>((*argmax)[static_cast<std::size_t>(c)] * C + c)] +=
                    op->grad[static_cast<std::size_t>(c)];
        });
    }
    return result;
}

Tensor l2_distance(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return sqrt_elem(sum_all(mul(d, d)));
}

Tensor l2_normalize(const Tensor& v, bool* degenerate) {
    const auto& vn = req(v, "l2_normalize");
    double sq = 0.0;
    for (double x : vn.data) sq += x * x;
    if (sq == 0.0) {
        if (degenerate) *degenerate = true;
        return Tensor::zeros(vn.shape);
    }
    if (degenerate) *degenerate = false;
    Tensor n = sqrt_elem(sum_all(mul(v, v)));
    return div_by_scalar(v, n);
}

// ---- backward -----------------------------------------------------------------

void backward(const Tensor& loss) {
    const auto& ln = req(loss, "backward loss");
    if (ln.numel() != 1)
        throw shape_error("backward: loss must be scalar, got " + shape_str(ln.shape));
    if (!loss.requires_grad()) return; // constant graph, nothing to do

    // iterative post-order topological sort
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].get();
            ++next;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn();
        }
    }
}

} // namespace gift
