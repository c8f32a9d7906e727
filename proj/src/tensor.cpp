#include "heightfusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace hf {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (auto e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
    }
}

std::shared_ptr<detail::TensorNode> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_op_output(std::string op, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs,
                      std::function<void(detail::TensorNode&)> backward_fn) {
    auto node = make_leaf(std::move(shape), std::move(data), false);
    bool any_grad = false;
    for (const auto& t : inputs) any_grad = any_grad || t.requires_grad();
    if (g_grad_enabled && any_grad) {
        node->requires_grad = true;
        node->op = std::move(op);
        node->backward_fn = std::move(backward_fn);
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    }
    return Tensor(std::move(node));
}

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }

int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }

std::int64_t Tensor::numel() const { return node_->numel(); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

bool Tensor::has_grad() const { return node_->has_grad; }

std::span<const double> Tensor::grad() const {
    if (!node_->has_grad) throw std::invalid_argument("tensor has no accumulated gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->data.size(), 0.0);
    node_->has_grad = false;
}

void Tensor::backward() const {
    auto* root = node_.get();
    if (root->numel() != 1) {
        throw std::invalid_argument("backward requires a scalar root, got shape " + shape_str(root->shape));
    }
    if (root->op.empty()) {
        throw std::invalid_argument("backward on a detached root: no recorded graph");
    }

    // post-order DFS over requires-grad ancestry; each node visited once
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            auto* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) node->ensure_grad();
    root->grad[0] += 1.0;
    root->has_grad = true;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
    for (auto* node : order) {
        if (node->op.empty()) node->has_grad = true;  // leaves keep their accumulation
    }
}

// ---- op helpers ------------------------------------------------------------

namespace {

struct Dims4 {
    std::int64_t n, c, h, w;
};

Dims4 dims4(const Tensor& t, const char* what) {
    if (t.ndim() != 4) {
        throw std::invalid_argument(std::string(what) + " must be 4-d NCHW, got shape " + shape_str(t.shape()));
    }
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

// col layout: K x M with K = I*KH*KW (channel-major), M = OH*OW
void im2col(const double* in, std::int64_t I, std::int64_t H, std::int64_t W,
            std::int64_t KH, std::int64_t KW, std::int64_t OH, std::int64_t OW,
            std::int64_t stride, std::int64_t pad, double* col) {
    const std::int64_t M = OH * OW;
    for (std::int64_t i = 0; i < I; ++i) {
        const double* plane = in + i * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw) {
                double* row = col + ((i * KH + kh) * KW + kw) * M;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t y = oh * stride - pad + kh;
                    if (y < 0 || y >= H) {
                        std::fill(row + oh * OW, row + (oh + 1) * OW, 0.0);
                        continue;
                    }
                    const double* src = plane + y * W;
                    double* dst = row + oh * OW;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t x = ow * stride - pad + kw;
                        dst[ow] = (x >= 0 && x < W) ? src[x] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, std::int64_t I, std::int64_t H, std::int64_t W,
                std::int64_t KH, std::int64_t KW, std::int64_t OH, std::int64_t OW,
                std::int64_t stride, std::int64_t pad, double* in_grad) {
    const std::int64_t M = OH * OW;
    for (std::int64_t i = 0; i < I; ++i) {
        double* plane = in_grad + i * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw) {
                const double* row = col + ((i * KH + kh) * KW + kw) * M;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t y = oh * stride - pad + kh;
                    if (y < 0 || y >= H) continue;
                    double* dst = plane + y * W;
                    const double* src = row + oh * OW;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t x = ow * stride - pad + kw;
                        if (x >= 0 && x < W) dst[x] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, int stride, int padding) {
    const auto in = dims4(input, "conv2d input");
    const auto wt = dims4(weight, "conv2d weight");
    if (stride <= 0) throw std::invalid_argument("conv2d stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d padding must be non-negative");
    if (in.c != wt.c) {
        throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(input.shape()) +
                                    " vs weight " + shape_str(weight.shape()));
    }
    const std::int64_t O = wt.n, I = wt.c, KH = wt.h, KW = wt.w;
    if (in.h + 2 * padding < KH || in.w + 2 * padding < KW) {
        throw std::invalid_argument("conv2d kernel larger than padded input: input " +
                                    shape_str(input.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias) {
        if (bias->ndim() != 1 || bias->dim(0) != O) {
            throw std::invalid_argument("conv2d bias must have shape [" + std::to_string(O) +
                                        "], got " + shape_str(bias->shape()));
        }
    }
    const std::int64_t OH = (in.h + 2 * padding - KH) / stride + 1;
    const std::int64_t OW = (in.w + 2 * padding - KW) / stride + 1;
    if (OH <= 0 || OW <= 0) {
        throw std::invalid_argument("conv2d produces zero-extent output for input " + shape_str(input.shape()));
    }

    const std::int64_t K = I * KH * KW;
    const std::int64_t M = OH * OW;
    const std::int64_t N = in.n;

    std::vector<double> out(static_cast<std::size_t>(N * O * M), 0.0);
    const double* in_ptr = input.data().data();
    const double* w_ptr = weight.data().data();
    const double* b_ptr = bias ? bias->data().data() : nullptr;

    std::vector<double> col(static_cast<std::size_t>(K * M));
    for (std::int64_t n = 0; n < N; ++n) {
        im2col(in_ptr + n * I * in.h * in.w, I, in.h, in.w, KH, KW, OH, OW, stride, padding, col.data());
        double* out_n = out.data() + n * O * M;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::int64_t o = 0; o < O; ++o) {
            double* dst = out_n + o * M;
            if (b_ptr) std::fill(dst, dst + M, b_ptr[o]);
            const double* wrow = w_ptr + o * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double a = wrow[k];
                const double* src = col.data() + k * M;
                for (std::int64_t m = 0; m < M; ++m) dst[m] += a * src[m];
            }
        }
    }

    std::vector<Tensor> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias.has_value();
    auto in_node = input.node_ptr();
    auto w_node = weight.node_ptr();
    const int s = stride, p = padding;

    return make_op_output(
        "conv2d", {N, O, OH, OW}, std::move(out), std::move(inputs),
        [in_node, w_node, has_bias, s, p](detail::TensorNode& self) {
            const auto& ish = in_node->shape;
            const auto& wsh = w_node->shape;
            const std::int64_t N = ish[0], I = ish[1], H = ish[2], W = ish[3];
            const std::int64_t O = wsh[0], KH = wsh[2], KW = wsh[3];
            const std::int64_t OH = self.shape[2], OW = self.shape[3];
            const std::int64_t K = I * KH * KW;
            const std::int64_t M = OH * OW;
            const double* gout = self.grad.data();

            detail::TensorNode* wn = self.parents[1].get();
            detail::TensorNode* in_n = self.parents[0].get();
            detail::TensorNode* bn = has_bias ? self.parents[2].get() : nullptr;

            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t o = 0; o < O; ++o) {
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const double* g = gout + (n * O + o) * M;
                        for (std::int64_t m = 0; m < M; ++m) acc += g[m];
                    }
                    bn->grad[static_cast<std::size_t>(o)] += acc;
                }
                bn->has_grad = true;
            }

            std::vector<double> col(static_cast<std::size_t>(K * M));
            const bool need_w = wn->requires_grad;
            const bool need_in = in_n->requires_grad;
            if (need_w) wn->ensure_grad();
            if (need_in) in_n->ensure_grad();

            std::vector<double> dcol;
            if (need_in) dcol.assign(static_cast<std::size_t>(K * M), 0.0);

            for (std::int64_t n = 0; n < N; ++n) {
                if (need_w) {
                    im2col(in_n->data.data() + n * I * H * W, I, H, W, KH, KW, OH, OW, s, p, col.data());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                    for (std::int64_t o = 0; o < O; ++o) {
                        const double* g = gout + (n * O + o) * M;
                        double* wrow = wn->grad.data() + o * K;
                        for (std::int64_t k = 0; k < K; ++k) {
                            const double* src = col.data() + k * M;
                            double acc = 0.0;
                            for (std::int64_t m = 0; m < M; ++m) acc += g[m] * src[m];
                            wrow[k] += acc;
                        }
                    }
                }
                if (need_in) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                    for (std::int64_t k = 0; k < K; ++k) {
                        double* drow = dcol.data() + k * M;
                        std::fill(drow, drow + M, 0.0);
                        for (std::int64_t o = 0; o < O; ++o) {
                            const double a = wn->data[static_cast<std::size_t>(o * K + k)];
                            const double* g = gout + (n * O + o) * M;
                            for (std::int64_t m = 0; m < M; ++m) drow[m] += a * g[m];
                        }
                    }
                    col2im_add(dcol.data(), I, H, W, KH, KW, OH, OW, s, p,
                               in_n->grad.data() + n * I * H * W);
                }
            }
            if (need_w) wn->has_grad = true;
            if (need_in) in_n->has_grad = true;
        });
}

// ---- elementwise / pooling ops ----------------------------------------------

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.data().begin(), input.data().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto in_node = input.node_ptr();
    return make_op_output("relu", input.shape(), std::move(out), {input},
                          [in_node](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              const auto n = p->data.size();
                              for (std::size_t i = 0; i < n; ++i) {
                                  if (p->data[i] > 0.0) p->grad[i] += self.grad[i];
                              }
                              p->has_grad = true;
                          });
}

Tensor max_pool2d(const Tensor& input, int kernel, int stride) {
    const auto in = dims4(input, "max_pool2d input");
    if (kernel <= 0 || stride <= 0) throw std::invalid_argument("max_pool2d kernel and stride must be positive");
    if (kernel > in.h || kernel > in.w) {
        throw std::invalid_argument("max_pool2d kernel " + std::to_string(kernel) +
                                    " exceeds spatial extents of input " + shape_str(input.shape()));
    }
    const std::int64_t OH = (in.h - kernel) / stride + 1;
    const std::int64_t OW = (in.w - kernel) / stride + 1;
    const std::int64_t planes = in.n * in.c;
    std::vector<double> out(static_cast<std::size_t>(planes * OH * OW));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
    const double* src = input.data().data();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* plane = src + pl * in.h * in.w;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                std::int64_t best_idx = -1;
                double best = 0.0;
                for (std::int64_t kh = 0; kh < kernel; ++kh) {
                    for (std::int64_t kw = 0; kw < kernel; ++kw) {
                        const std::int64_t idx = (oh * stride + kh) * in.w + (ow * stride + kw);
                        const double v = plane[idx];
                        if (best_idx < 0 || v > best) {  // ties keep the first in row-major order
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                const std::int64_t o = (pl * OH + oh) * OW + ow;
                out[static_cast<std::size_t>(o)] = best;
                (*argmax)[static_cast<std::size_t>(o)] = pl * in.h * in.w + best_idx;
            }
        }
    }
    return make_op_output("max_pool2d", {in.n, in.c, OH, OW}, std::move(out), {input},
                          [argmax](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              for (std::size_t i = 0; i < argmax->size(); ++i) {
                                  p->grad[static_cast<std::size_t>((*argmax)[i])] += self.grad[i];
                              }
                              p->has_grad = true;
                          });
}

namespace {
inline std::int64_t bin_lo(std::int64_t i, std::int64_t in, std::int64_t out) { return i * in / out; }
inline std::int64_t bin_hi(std::int64_t i, std::int64_t in, std::int64_t out) {
    return ((i + 1) * in + out - 1) / out;  // ceil
}
}  // namespace

Tensor adaptive_avg_pool2d(const Tensor& input, int out_h, int out_w) {
    const auto in = dims4(input, "adaptive_avg_pool2d input");
    if (out_h <= 0 || out_w <= 0 || out_h > in.h || out_w > in.w) {
        throw std::invalid_argument("adaptive_avg_pool2d invalid target size " + std::to_string(out_h) +
                                    "x" + std::to_string(out_w) + " for input " + shape_str(input.shape()));
    }
    const std::int64_t planes = in.n * in.c;
    std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
    const double* src = input.data().data();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* plane = src + pl * in.h * in.w;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
            const std::int64_t y0 = bin_lo(oh, in.h, out_h), y1 = bin_hi(oh, in.h, out_h);
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
                const std::int64_t x0 = bin_lo(ow, in.w, out_w), x1 = bin_hi(ow, in.w, out_w);
                double acc = 0.0;
                for (std::int64_t y = y0; y < y1; ++y) {
                    for (std::int64_t x = x0; x < x1; ++x) acc += plane[y * in.w + x];
                }
                out[static_cast<std::size_t>((pl * out_h + oh) * out_w + ow)] =
                    acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
        }
    }
    const std::int64_t ih = in.h, iw = in.w;
    const int oh_ = out_h, ow_ = out_w;
    return make_op_output("adaptive_avg_pool2d", {in.n, in.c, out_h, out_w}, std::move(out), {input},
                          [ih, iw, oh_, ow_](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              const std::int64_t planes = self.shape[0] * self.shape[1];
                              for (std::int64_t pl = 0; pl < planes; ++pl) {
                                  double* gplane = p->grad.data() + pl * ih * iw;
                                  for (std::int64_t oh = 0; oh < oh_; ++oh) {
                                      const std::int64_t y0 = bin_lo(oh, ih, oh_), y1 = bin_hi(oh, ih, oh_);
                                      for (std::int64_t ow = 0; ow < ow_; ++ow) {
                                          const std::int64_t x0 = bin_lo(ow, iw, ow_), x1 = bin_hi(ow, iw, ow_);
                                          const double g = self.grad[static_cast<std::size_t>((pl * oh_ + oh) * ow_ + ow)] /
                                                           static_cast<double>((y1 - y0) * (x1 - x0));
                                          for (std::int64_t y = y0; y < y1; ++y) {
                                              for (std::int64_t x = x0; x < x1; ++x) gplane[y * iw + x] += g;
                                          }
                                      }
                                  }
                              }
                              p->has_grad = true;
                          });
}

namespace {

struct LerpIdx {
    std::int64_t i0, i1;
    double frac;
};

// half-pixel centers: src = (dst + 0.5) * in/out - 0.5, clamped
LerpIdx lerp_index(std::int64_t dst, std::int64_t in, std::int64_t out) {
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::int64_t i0 = static_cast<std::int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace

Tensor bilinear_upsample(const Tensor& input, int out_h, int out_w) {
    const auto in = dims4(input, "bilinear_upsample input");
    if (out_h < in.h || out_w < in.w) {
        throw std::invalid_argument("bilinear_upsample cannot downscale: input " + shape_str(input.shape()) +
                                    " to " + std::to_string(out_h) + "x" + std::to_string(out_w));
    }
    const std::int64_t planes = in.n * in.c;
    std::vector<LerpIdx> rows(static_cast<std::size_t>(out_h)), cols(static_cast<std::size_t>(out_w));
    for (std::int64_t y = 0; y < out_h; ++y) rows[static_cast<std::size_t>(y)] = lerp_index(y, in.h, out_h);
    for (std::int64_t x = 0; x < out_w; ++x) cols[static_cast<std::size_t>(x)] = lerp_index(x, in.w, out_w);

    std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
    const double* src = input.data().data();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const double* plane = src + pl * in.h * in.w;
        double* dst = out.data() + pl * out_h * out_w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            const auto& ry = rows[static_cast<std::size_t>(y)];
            const double* r0 = plane + ry.i0 * in.w;
            const double* r1 = plane + ry.i1 * in.w;
            for (std::int64_t x = 0; x < out_w; ++x) {
                const auto& cx = cols[static_cast<std::size_t>(x)];
                // lerp form keeps constant inputs bit-exact
                const double top = r0[cx.i0] + cx.frac * (r0[cx.i1] - r0[cx.i0]);
                const double bot = r1[cx.i0] + cx.frac * (r1[cx.i1] - r1[cx.i0]);
                dst[y * out_w + x] = top + ry.frac * (bot - top);
            }
        }
    }
    auto rows_p = std::make_shared<std::vector<LerpIdx>>(std::move(rows));
    auto cols_p = std::make_shared<std::vector<LerpIdx>>(std::move(cols));
    const std::int64_t ih = in.h, iw = in.w;
    return make_op_output("bilinear_upsample", {in.n, in.c, out_h, out_w}, std::move(out), {input},
                          [rows_p, cols_p, ih, iw](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              const std::int64_t planes = self.shape[0] * self.shape[1];
                              const std::int64_t oh = self.shape[2], ow = self.shape[3];
                              for (std::int64_t pl = 0; pl < planes; ++pl) {
                                  double* gplane = p->grad.data() + pl * ih * iw;
                                  const double* g = self.grad.data() + pl * oh * ow;
                                  for (std::int64_t y = 0; y < oh; ++y) {
                                      const auto& ry = (*rows_p)[static_cast<std::size_t>(y)];
                                      for (std::int64_t x = 0; x < ow; ++x) {
                                          const auto& cx = (*cols_p)[static_cast<std::size_t>(x)];
                                          const double gv = g[y * ow + x];
                                          const double wy1 = ry.frac, wy0 = 1.0 - ry.frac;
                                          const double wx1 = cx.frac, wx0 = 1.0 - cx.frac;
                                          gplane[ry.i0 * iw + cx.i0] += gv * wy0 * wx0;
                                          gplane[ry.i0 * iw + cx.i1] += gv * wy0 * wx1;
                                          gplane[ry.i1 * iw + cx.i0] += gv * wy1 * wx0;
                                          gplane[ry.i1 * iw + cx.i1] += gv * wy1 * wx1;
                                      }
                                  }
                              }
                              p->has_grad = true;
                          });
}

// ---- shape ops ---------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& inputs, int axis) {
    if (inputs.empty()) throw std::invalid_argument("concat of zero tensors");
    const int nd = inputs[0].ndim();
    if (axis < 0 || axis >= nd) {
        throw std::invalid_argument("concat axis " + std::to_string(axis) + " out of range for " +
                                    std::to_string(nd) + "-d tensors");
    }
    Shape out_shape = inputs[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& t : inputs) {
        if (t.ndim() != nd) throw std::invalid_argument("concat rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d != axis && t.dim(d) != out_shape[static_cast<std::size_t>(d)]) {
                throw std::invalid_argument("concat extent mismatch on axis " + std::to_string(d) + ": " +
                                            shape_str(t.shape()) + " vs " + shape_str(inputs[0].shape()));
            }
        }
        axis_total += t.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    // outer = product of dims before axis, inner = product after
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    std::vector<double> out(static_cast<std::size_t>(outer * axis_total * inner));
    std::int64_t offset = 0;
    for (const auto& t : inputs) {
        const std::int64_t e = t.dim(axis);
        const double* src = t.data().data();
        for (std::int64_t u = 0; u < outer; ++u) {
            double* dst = out.data() + (u * axis_total + offset) * inner;
            std::memcpy(dst, src + u * e * inner, static_cast<std::size_t>(e * inner) * sizeof(double));
        }
        offset += e;
    }
    auto extents = std::make_shared<std::vector<std::int64_t>>();
    for (const auto& t : inputs) extents->push_back(t.dim(axis));
    return make_op_output("concat", out_shape, std::move(out), inputs,
                          [extents, outer, inner, axis_total](detail::TensorNode& self) {
                              std::int64_t offset = 0;
                              for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                                  auto* p = self.parents[pi].get();
                                  const std::int64_t e = (*extents)[pi];
                                  if (p->requires_grad) {
                                      p->ensure_grad();
                                      for (std::int64_t u = 0; u < outer; ++u) {
                                          const double* g = self.grad.data() + (u * axis_total + offset) * inner;
                                          double* dst = p->grad.data() + u * e * inner;
                                          for (std::int64_t j = 0; j < e * inner; ++j) dst[j] += g[j];
                                      }
                                      p->has_grad = true;
                                  }
                                  offset += e;
                              }
                          });
}

Tensor slice(const Tensor& input, int axis, std::int64_t start, std::int64_t length) {
    const int nd = input.ndim();
    if (axis < 0 || axis >= nd) throw std::invalid_argument("slice axis out of range");
    const std::int64_t e = input.dim(axis);
    if (start < 0 || length <= 0 || start + length > e) {
        throw std::invalid_argument("slice range [" + std::to_string(start) + ", " +
                                    std::to_string(start + length) + ") out of bounds for extent " +
                                    std::to_string(e));
    }
    Shape out_shape = input.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= input.dim(d);
    for (int d = axis + 1; d < nd; ++d) inner *= input.dim(d);

    std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
    const double* src = input.data().data();
    for (std::int64_t u = 0; u < outer; ++u) {
        std::memcpy(out.data() + u * length * inner, src + (u * e + start) * inner,
                    static_cast<std::size_t>(length * inner) * sizeof(double));
    }
    return make_op_output("slice", out_shape, std::move(out), {input},
                          [outer, inner, e, start, length](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              for (std::int64_t u = 0; u < outer; ++u) {
                                  const double* g = self.grad.data() + u * length * inner;
                                  double* dst = p->grad.data() + (u * e + start) * inner;
                                  for (std::int64_t j = 0; j < length * inner; ++j) dst[j] += g[j];
                              }
                              p->has_grad = true;
                          });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return make_op_output("add", a.shape(), std::move(out), {a, b},
                          [](detail::TensorNode& self) {
                              for (auto& parent : self.parents) {
                                  auto* p = parent.get();
                                  if (!p->requires_grad) continue;
                                  p->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
                                  p->has_grad = true;
                              }
                          });
}

Tensor scale(const Tensor& input, double factor) {
    std::vector<double> out(input.data().begin(), input.data().end());
    for (auto& v : out) v *= factor;
    return make_op_output("scale", input.shape(), std::move(out), {input},
                          [factor](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += factor * self.grad[i];
                              p->has_grad = true;
                          });
}

Tensor sum(const Tensor& input) {
    double acc = 0.0;
    for (double v : input.data()) acc += v;
    return make_op_output("sum", {}, {acc}, {input},
                          [](detail::TensorNode& self) {
                              auto* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              const double g = self.grad[0];
                              for (auto& v : p->grad) v += g;
                              p->has_grad = true;
                          });
}

Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, double beta) {
    if (beta <= 0.0) throw std::invalid_argument("smooth_l1_loss beta must be positive");
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("smooth_l1_loss shape mismatch: " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    }
    if (target.requires_grad()) {
        throw std::invalid_argument("smooth_l1_loss target must not carry a gradient");
    }
    const auto p = pred.data();
    const auto t = target.data();
    const std::size_t n = p.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = p[i] - t[i];
        const double ad = std::abs(d);
        acc += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
    }
    acc /= static_cast<double>(n);
    return make_op_output("smooth_l1_loss", {}, {acc}, {pred, target},
                          [beta](detail::TensorNode& self) {
                              auto* pn = self.parents[0].get();
                              auto* tn = self.parents[1].get();
                              if (!pn->requires_grad) return;
                              pn->ensure_grad();
                              const double g = self.grad[0] / static_cast<double>(pn->data.size());
                              for (std::size_t i = 0; i < pn->data.size(); ++i) {
                                  const double d = pn->data[i] - tn->data[i];
                                  const double dd = std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                                  pn->grad[i] += g * dd;
                              }
                              pn->has_grad = true;
                          });
}

}  // namespace hf
