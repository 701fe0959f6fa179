#include "derma/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <utility>

#include "derma/rng.hpp"

namespace derma {

namespace {

struct ImageDims {
    int batch, h, w, c;
    bool batched;
};

ImageDims image_dims(const Tensor& t, const char* op) {
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    throw std::invalid_argument(std::string(op) + ": expected HxWxC or BxHxWxC input, got " +
                                t.shape_str());
}

struct RowDims {
    std::int64_t rows;
    int cols;
};

// Flatten all leading axes; the last axis is the feature/channel axis.
RowDims row_dims(const Tensor& t, const char* op) {
    if (t.rank() < 1) throw std::invalid_argument(std::string(op) + ": rank-0 tensor");
    int c = t.dim(t.rank() - 1);
    return {t.size() / c, c};
}

// C[m x n] = A[m x k] * B[k x n]; rows of C are independent.
void gemm(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m >= 32)
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * n;
        std::fill(crow, crow + n, 0.0f);
        const float* arow = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m >= 32)
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        float* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<std::size_t>(j) * k;
            float acc = 0.0f;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
}

// col[p, r] with p = oy*out_w + ox and r = (ky*kw + kx)*C + c; zero outside.
void im2col(const float* img, int h, int w, int c, int kh, int kw, int stride,
            const kernels::Conv2DGeometry& g, float* col) {
    const int patch = kh * kw * c;
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            float* dst = col + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - g.pad_top;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - g.pad_left;
                    float* cell = dst + (static_cast<std::size_t>(ky) * kw + kx) * c;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill(cell, cell + c, 0.0f);
                    } else {
                        const float* src = img + (static_cast<std::size_t>(iy) * w + ix) * c;
                        std::copy(src, src + c, cell);
                    }
                }
            }
        }
    }
}

// Scatter-add of the column gradient back onto the image gradient.
void col2im_add(const float* col, int h, int w, int c, int kh, int kw, int stride,
                const kernels::Conv2DGeometry& g, float* img_grad) {
    const int patch = kh * kw * c;
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            const float* src = col + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - g.pad_top;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - g.pad_left;
                    if (ix < 0 || ix >= w) continue;
                    const float* cell = src + (static_cast<std::size_t>(ky) * kw + kx) * c;
                    float* dst = img_grad + (static_cast<std::size_t>(iy) * w + ix) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += cell[ch];
                }
            }
        }
    }
}

constexpr float kSigmoidMin = 1e-12f;
constexpr float kSigmoidMax = 1.0f - 1.2e-7f;
constexpr float kProbFloor = 1e-35f;
constexpr double kLogClamp = 1e-12;

}  // namespace

// ---------------------------------------------------------------------------
// GradTape
// ---------------------------------------------------------------------------

void GradTape::check_id(TensorId id) const {
    if (id < 0 || id >= static_cast<TensorId>(nodes_.size())) {
        throw std::invalid_argument("tensor id " + std::to_string(id) + " is not on this tape");
    }
}

TensorId GradTape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<TensorId>(nodes_.size() - 1);
}

TensorId GradTape::record(Tensor value, std::function<void(GradTape&)> backward_fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = static_cast<bool>(backward_fn);
    n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return static_cast<TensorId>(nodes_.size() - 1);
}

const Tensor& GradTape::value(TensorId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].value;
}

bool GradTape::requires_grad(TensorId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
}

Tensor& GradTape::grad_slot(TensorId id) {
    check_id(id);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_ready) {
        n.grad = Tensor(n.value.shape());
        n.grad_ready = true;
    }
    return n.grad;
}

const Tensor& GradTape::grad(TensorId id) { return grad_slot(id); }

void GradTape::accumulate_grad(TensorId id, const Tensor& contribution) {
    check_id(id);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    Tensor& g = grad_slot(id);
    if (!g.same_shape(contribution)) {
        throw std::invalid_argument("gradient shape " + contribution.shape_str() +
                                    " does not match value shape " + g.shape_str());
    }
    float* gd = g.data();
    const float* cd = contribution.data();
    for (std::int64_t i = 0, e = g.size(); i < e; ++i) gd[i] += cd[i];
}

void GradTape::backward(TensorId scalar_output) {
    check_id(scalar_output);
    if (consumed_) throw std::invalid_argument("tape already consumed by a previous backward()");
    const Node& out = nodes_[static_cast<std::size_t>(scalar_output)];
    if (out.value.size() != 1) {
        throw std::invalid_argument("backward() requires a scalar output, got " +
                                    out.value.shape_str());
    }
    consumed_ = true;
    grad_slot(scalar_output)[0] = 1.0f;
    for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad_ready && n.backward_fn) n.backward_fn(*this);
    }
}

void GradTape::clear() {
    nodes_.clear();
    consumed_ = false;
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace kernels {

Conv2DGeometry conv2d_geometry(int in_h, int in_w, int kernel_h, int kernel_w, int stride,
                               Padding padding) {
    if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
    Conv2DGeometry g{};
    if (padding == Padding::Same) {
        g.out_h = (in_h + stride - 1) / stride;
        g.out_w = (in_w + stride - 1) / stride;
        const int pad_h = std::max((g.out_h - 1) * stride + kernel_h - in_h, 0);
        const int pad_w = std::max((g.out_w - 1) * stride + kernel_w - in_w, 0);
        g.pad_top = pad_h / 2;
        g.pad_left = pad_w / 2;
    } else {
        if (in_h < kernel_h || in_w < kernel_w) {
            throw std::invalid_argument("conv2d: kernel larger than input with valid padding");
        }
        g.out_h = (in_h - kernel_h) / stride + 1;
        g.out_w = (in_w - kernel_w) / stride + 1;
        g.pad_top = 0;
        g.pad_left = 0;
    }
    return g;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels_t, const Tensor& bias, int stride,
              Padding padding) {
    const ImageDims d = image_dims(input, "conv2d");
    if (kernels_t.rank() != 4) {
        throw std::invalid_argument("conv2d: kernels must be KhxKwxCxF, got " +
                                    kernels_t.shape_str());
    }
    const int kh = kernels_t.dim(0), kw = kernels_t.dim(1);
    const int kc = kernels_t.dim(2), f = kernels_t.dim(3);
    if (kc != d.c) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(d.c) +
                                    " channels but kernels expect " + std::to_string(kc));
    }
    if (bias.rank() != 1 || bias.dim(0) != f) {
        throw std::invalid_argument("conv2d: bias must have one entry per filter");
    }
    const Conv2DGeometry g = conv2d_geometry(d.h, d.w, kh, kw, stride, padding);

    std::vector<int> out_shape = d.batched ? std::vector<int>{d.batch, g.out_h, g.out_w, f}
                                           : std::vector<int>{g.out_h, g.out_w, f};
    Tensor out(std::move(out_shape));

    const int patch = kh * kw * d.c;
    const std::int64_t sites = static_cast<std::int64_t>(g.out_h) * g.out_w;
    const std::int64_t in_stride = static_cast<std::int64_t>(d.h) * d.w * d.c;
    const std::int64_t out_stride = sites * f;

#pragma omp parallel for schedule(static) if (d.batch > 1)
    for (int b = 0; b < d.batch; ++b) {
        std::vector<float> col(static_cast<std::size_t>(sites) * patch);
        im2col(input.data() + b * in_stride, d.h, d.w, d.c, kh, kw, stride, g, col.data());
        float* dst = out.data() + b * out_stride;
        gemm(col.data(), kernels_t.data(), dst, static_cast<int>(sites), patch, f);
        for (std::int64_t p = 0; p < sites; ++p) {
            float* row = dst + p * f;
            for (int j = 0; j < f; ++j) row[j] += bias[j];
        }
    }
    return out;
}

Tensor maxpool2d(const Tensor& input, std::vector<std::int64_t>* argmax_out) {
    const ImageDims d = image_dims(input, "maxpool2d");
    if (d.h < 2 || d.w < 2) {
        throw std::invalid_argument("maxpool2d: 2x2 window larger than input " + input.shape_str());
    }
    const int oh = d.h / 2, ow = d.w / 2;
    std::vector<int> out_shape = d.batched ? std::vector<int>{d.batch, oh, ow, d.c}
                                           : std::vector<int>{oh, ow, d.c};
    Tensor out(std::move(out_shape));
    if (argmax_out) argmax_out->assign(static_cast<std::size_t>(out.size()), 0);

    const float* in = input.data();
    float* o = out.data();
    std::int64_t oi = 0;
    for (int b = 0; b < d.batch; ++b) {
        const std::int64_t base = static_cast<std::int64_t>(b) * d.h * d.w * d.c;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                for (int ch = 0; ch < d.c; ++ch, ++oi) {
                    std::int64_t best_idx =
                        base + (static_cast<std::int64_t>(2 * y) * d.w + 2 * x) * d.c + ch;
                    float best = in[best_idx];
                    // first max wins on ties (row-major scan)
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::int64_t idx =
                                base +
                                (static_cast<std::int64_t>(2 * y + dy) * d.w + (2 * x + dx)) * d.c +
                                ch;
                            if (in[idx] > best) {
                                best = in[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    o[oi] = best;
                    if (argmax_out) (*argmax_out)[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }
    return out;
}

static void check_bn_params(const RowDims& rd, const Tensor& gamma, const Tensor& beta,
                            const Tensor& mean, const Tensor& var) {
    for (const Tensor* t : {&gamma, &beta, &mean, &var}) {
        if (t->rank() != 1 || t->dim(0) != rd.cols) {
            throw std::invalid_argument("batchnorm: parameter vectors must have length " +
                                        std::to_string(rd.cols) + ", got " + t->shape_str());
        }
    }
}

Tensor batchnorm_infer(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                       const Tensor& moving_mean, const Tensor& moving_var, float eps) {
    const RowDims rd = row_dims(input, "batchnorm");
    check_bn_params(rd, gamma, beta, moving_mean, moving_var);
    std::vector<float> inv(static_cast<std::size_t>(rd.cols));
    for (int c = 0; c < rd.cols; ++c) {
        const float v = moving_var[c] + eps;
        if (v <= 0.0f) throw std::invalid_argument("batchnorm: var + eps must be positive");
        inv[static_cast<std::size_t>(c)] = 1.0f / std::sqrt(v);
    }
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    for (std::int64_t r = 0; r < rd.rows; ++r) {
        const float* irow = in + r * rd.cols;
        float* orow = o + r * rd.cols;
        for (int c = 0; c < rd.cols; ++c) {
            orow[c] = (irow[c] - moving_mean[c]) * inv[static_cast<std::size_t>(c)] * gamma[c] +
                      beta[c];
        }
    }
    return out;
}

Tensor batchnorm_train(const Tensor& input, const Tensor& gamma, const Tensor& beta, float eps,
                       BatchStats& stats_out) {
    const RowDims rd = row_dims(input, "batchnorm");
    if (gamma.rank() != 1 || gamma.dim(0) != rd.cols || !beta.same_shape(gamma)) {
        throw std::invalid_argument("batchnorm: gamma/beta must have length " +
                                    std::to_string(rd.cols));
    }
    if (eps <= 0.0f) throw std::invalid_argument("batchnorm: var + eps must be positive");
    Tensor mean({rd.cols});
    Tensor var({rd.cols});
    const float* in = input.data();
    const float inv_n = 1.0f / static_cast<float>(rd.rows);
    for (std::int64_t r = 0; r < rd.rows; ++r) {
        const float* irow = in + r * rd.cols;
        for (int c = 0; c < rd.cols; ++c) mean[c] += irow[c];
    }
    for (int c = 0; c < rd.cols; ++c) mean[c] *= inv_n;
    for (std::int64_t r = 0; r < rd.rows; ++r) {
        const float* irow = in + r * rd.cols;
        for (int c = 0; c < rd.cols; ++c) {
            const float d = irow[c] - mean[c];
            var[c] += d * d;
        }
    }
    for (int c = 0; c < rd.cols; ++c) var[c] *= inv_n;

    Tensor out(input.shape());
    float* o = out.data();
    std::vector<float> inv(static_cast<std::size_t>(rd.cols));
    for (int c = 0; c < rd.cols; ++c) {
        inv[static_cast<std::size_t>(c)] = 1.0f / std::sqrt(var[c] + eps);
    }
    for (std::int64_t r = 0; r < rd.rows; ++r) {
        const float* irow = in + r * rd.cols;
        float* orow = o + r * rd.cols;
        for (int c = 0; c < rd.cols; ++c) {
            orow[c] = (irow[c] - mean[c]) * inv[static_cast<std::size_t>(c)] * gamma[c] + beta[c];
        }
    }
    stats_out.mean = std::move(mean);
    stats_out.var = std::move(var);
    return out;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    if (weights.rank() != 2) {
        throw std::invalid_argument("dense: weights must be NxU, got " + weights.shape_str());
    }
    const int n = weights.dim(0), u = weights.dim(1);
    if (bias.rank() != 1 || bias.dim(0) != u) {
        throw std::invalid_argument("dense: bias must have length " + std::to_string(u));
    }
    int batch = 1;
    bool batched = false;
    if (input.rank() == 1) {
        if (input.dim(0) != n) {
            throw std::invalid_argument("dense: input length " + std::to_string(input.dim(0)) +
                                        " does not match weight rows " + std::to_string(n));
        }
    } else if (input.rank() == 2) {
        if (input.dim(1) != n) {
            throw std::invalid_argument("dense: input width " + std::to_string(input.dim(1)) +
                                        " does not match weight rows " + std::to_string(n));
        }
        batch = input.dim(0);
        batched = true;
    } else {
        throw std::invalid_argument("dense: expected rank 1 or 2 input, got " + input.shape_str());
    }
    Tensor out(batched ? std::vector<int>{batch, u} : std::vector<int>{u});
    gemm(input.data(), weights.data(), out.data(), batch, n, u);
    float* o = out.data();
    for (int b = 0; b < batch; ++b) {
        float* row = o + static_cast<std::size_t>(b) * u;
        for (int j = 0; j < u; ++j) row[j] += bias[j];
    }
    return out;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    for (std::int64_t i = 0, e = input.size(); i < e; ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;
    return out;
}

Tensor sigmoid(const Tensor& input) {
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    for (std::int64_t i = 0, e = input.size(); i < e; ++i) {
        const float x = in[i];
        float y;
        if (x >= 0.0f) {
            y = 1.0f / (1.0f + std::exp(-x));
        } else {
            const float e_x = std::exp(x);
            y = e_x / (1.0f + e_x);
        }
        o[i] = std::min(std::max(y, kSigmoidMin), kSigmoidMax);
    }
    return out;
}

Tensor softmax(const Tensor& input) {
    const RowDims rd = row_dims(input, "softmax");
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    for (std::int64_t r = 0; r < rd.rows; ++r) {
        const float* irow = in + r * rd.cols;
        float* orow = o + r * rd.cols;
        float mx = irow[0];
        for (int c = 1; c < rd.cols; ++c) mx = std::max(mx, irow[c]);
        float sum = 0.0f;
        for (int c = 0; c < rd.cols; ++c) {
            orow[c] = std::exp(irow[c] - mx);
            sum += orow[c];
        }
        const float inv = 1.0f / sum;
        for (int c = 0; c < rd.cols; ++c) orow[c] = std::max(orow[c] * inv, kProbFloor);
    }
    return out;
}

Tensor dropout_train(const Tensor& input, float rate, std::uint64_t seed,
                     std::vector<float>* scaled_mask_out) {
    if (!(rate >= 0.0f && rate < 1.0f)) {
        throw std::invalid_argument("dropout: rate must be in [0, 1)");
    }
    Rng rng(seed);
    const float scale = 1.0f / (1.0f - rate);
    Tensor out(input.shape());
    if (scaled_mask_out) scaled_mask_out->assign(static_cast<std::size_t>(input.size()), 0.0f);
    const float* in = input.data();
    float* o = out.data();
    for (std::int64_t i = 0, e = input.size(); i < e; ++i) {
        const float keep = rng.uniform_float() >= rate ? scale : 0.0f;
        o[i] = in[i] * keep;
        if (scaled_mask_out) (*scaled_mask_out)[static_cast<std::size_t>(i)] = keep;
    }
    return out;
}

double cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2) {
        throw std::invalid_argument("cross_entropy: probs must be BxK, got " + probs.shape_str());
    }
    const int batch = probs.dim(0), k = probs.dim(1);
    if (static_cast<int>(labels.size()) != batch) {
        throw std::invalid_argument("cross_entropy: label count does not match batch");
    }
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
        const int label = labels[static_cast<std::size_t>(b)];
        if (label < 0 || label >= k) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                        " out of range for " + std::to_string(k) + " classes");
        }
        const double p = std::max(
            static_cast<double>(probs[static_cast<std::int64_t>(b) * k + label]), kLogClamp);
        total -= std::log(p);
    }
    return total / batch;
}

double binary_cross_entropy(const Tensor& scores, const std::vector<int>& labels) {
    const std::int64_t batch = scores.size();
    if (static_cast<std::int64_t>(labels.size()) != batch) {
        throw std::invalid_argument("binary_cross_entropy: label count does not match batch");
    }
    double total = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y != 0 && y != 1) {
            throw std::invalid_argument("binary_cross_entropy: labels must be 0 or 1");
        }
        const double s = static_cast<double>(scores[b]);
        if (s < 0.0 || s > 1.0) {
            throw std::invalid_argument("binary_cross_entropy: scores must lie in [0, 1]");
        }
        total -= y * std::log(std::max(s, kLogClamp)) +
                 (1 - y) * std::log(std::max(1.0 - s, kLogClamp));
    }
    return total / static_cast<double>(batch);
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Taped ops. Each precomputes the id its output node will get (next_id) so
// the backward closure can capture it by value.
// ---------------------------------------------------------------------------

TensorId conv2d(GradTape& tape, TensorId input, TensorId kernels_id, TensorId bias, int stride,
                Padding padding) {
    Tensor out = kernels::conv2d(tape.value(input), tape.value(kernels_id), tape.value(bias),
                                 stride, padding);
    const bool rg = tape.requires_grad(input) || tape.requires_grad(kernels_id) ||
                    tape.requires_grad(bias);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (rg) {
        fn = [=](GradTape& t) {
            const Tensor& x = t.value(input);
            const Tensor& w = t.value(kernels_id);
            const Tensor& dy = t.grad_slot(out_id);

            const ImageDims d = image_dims(x, "conv2d");
            const int kh = w.dim(0), kw = w.dim(1), f = w.dim(3);
            const auto g = kernels::conv2d_geometry(d.h, d.w, kh, kw, stride, padding);
            const int patch = kh * kw * d.c;
            const std::int64_t sites = static_cast<std::int64_t>(g.out_h) * g.out_w;
            const std::int64_t in_stride = static_cast<std::int64_t>(d.h) * d.w * d.c;
            const std::int64_t out_stride = sites * f;

            if (t.requires_grad(bias)) {
                Tensor& db = t.grad_slot(bias);
                for (int b = 0; b < d.batch; ++b) {
                    const float* dyb = dy.data() + b * out_stride;
                    for (std::int64_t p = 0; p < sites; ++p) {
                        for (int j = 0; j < f; ++j) db[j] += dyb[p * f + j];
                    }
                }
            }
            if (t.requires_grad(input)) {
                Tensor& dx = t.grad_slot(input);
#pragma omp parallel for schedule(static) if (d.batch > 1)
                for (int b = 0; b < d.batch; ++b) {
                    std::vector<float> dcol(static_cast<std::size_t>(sites) * patch);
                    gemm_nt(dy.data() + b * out_stride, w.data(), dcol.data(),
                            static_cast<int>(sites), f, patch);
                    col2im_add(dcol.data(), d.h, d.w, d.c, kh, kw, stride, g,
                               dx.data() + b * in_stride);
                }
            }
            if (t.requires_grad(kernels_id)) {
                Tensor& dw = t.grad_slot(kernels_id);
                std::vector<float> col(static_cast<std::size_t>(sites) * patch);
                for (int b = 0; b < d.batch; ++b) {
                    im2col(x.data() + b * in_stride, d.h, d.w, d.c, kh, kw, stride, g, col.data());
                    const float* dyb = dy.data() + b * out_stride;
                    float* dwp = dw.data();
#pragma omp parallel for schedule(static) if (patch >= 16)
                    for (int r = 0; r < patch; ++r) {
                        float* dwrow = dwp + static_cast<std::size_t>(r) * f;
                        for (std::int64_t p = 0; p < sites; ++p) {
                            const float cv = col[static_cast<std::size_t>(p) * patch + r];
                            const float* dyrow = dyb + p * f;
                            for (int j = 0; j < f; ++j) dwrow[j] += cv * dyrow[j];
                        }
                    }
                }
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId maxpool2d(GradTape& tape, TensorId input) {
    std::vector<std::int64_t> argmax;
    Tensor out = kernels::maxpool2d(tape.value(input), &argmax);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id, argmax = std::move(argmax)](GradTape& t) {
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            for (std::int64_t i = 0, e = dy.size(); i < e; ++i) {
                dx[argmax[static_cast<std::size_t>(i)]] += dy[i];
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId batchnorm(GradTape& tape, TensorId input, TensorId gamma, TensorId beta,
                   const Tensor& moving_mean, const Tensor& moving_var, float eps, Mode mode,
                   BatchStats* stats_out) {
    const Tensor& x = tape.value(input);
    const Tensor& g = tape.value(gamma);
    const Tensor& b = tape.value(beta);

    Tensor out;
    Tensor mean, var;
    if (mode == Mode::Infer) {
        out = kernels::batchnorm_infer(x, g, b, moving_mean, moving_var, eps);
        mean = moving_mean;
        var = moving_var;
    } else {
        BatchStats stats;
        out = kernels::batchnorm_train(x, g, b, eps, stats);
        mean = stats.mean;
        var = stats.var;
        if (stats_out) *stats_out = std::move(stats);
    }

    const bool rg =
        tape.requires_grad(input) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (rg) {
        const bool train_stats = mode == Mode::Train;
        fn = [=, mean = std::move(mean), var = std::move(var)](GradTape& t) {
            const Tensor& xv = t.value(input);
            const Tensor& gv = t.value(gamma);
            const Tensor& dy = t.grad_slot(out_id);
            const RowDims rd = row_dims(xv, "batchnorm");

            std::vector<float> inv(static_cast<std::size_t>(rd.cols));
            for (int c = 0; c < rd.cols; ++c) {
                inv[static_cast<std::size_t>(c)] = 1.0f / std::sqrt(var[c] + eps);
            }

            // per-channel sums of dy and dy * xhat
            std::vector<float> sum_dy(static_cast<std::size_t>(rd.cols), 0.0f);
            std::vector<float> sum_dyx(static_cast<std::size_t>(rd.cols), 0.0f);
            for (std::int64_t r = 0; r < rd.rows; ++r) {
                const float* xrow = xv.data() + r * rd.cols;
                const float* dyrow = dy.data() + r * rd.cols;
                for (int c = 0; c < rd.cols; ++c) {
                    const float xhat = (xrow[c] - mean[c]) * inv[static_cast<std::size_t>(c)];
                    sum_dy[static_cast<std::size_t>(c)] += dyrow[c];
                    sum_dyx[static_cast<std::size_t>(c)] += dyrow[c] * xhat;
                }
            }
            if (t.requires_grad(beta)) {
                Tensor& db = t.grad_slot(beta);
                for (int c = 0; c < rd.cols; ++c) db[c] += sum_dy[static_cast<std::size_t>(c)];
            }
            if (t.requires_grad(gamma)) {
                Tensor& dg = t.grad_slot(gamma);
                for (int c = 0; c < rd.cols; ++c) dg[c] += sum_dyx[static_cast<std::size_t>(c)];
            }
            if (t.requires_grad(input)) {
                Tensor& dx = t.grad_slot(input);
                const float inv_n = 1.0f / static_cast<float>(rd.rows);
                for (std::int64_t r = 0; r < rd.rows; ++r) {
                    const float* xrow = xv.data() + r * rd.cols;
                    const float* dyrow = dy.data() + r * rd.cols;
                    float* dxrow = dx.data() + r * rd.cols;
                    for (int c = 0; c < rd.cols; ++c) {
                        const float ic = inv[static_cast<std::size_t>(c)];
                        if (train_stats) {
                            const float xhat = (xrow[c] - mean[c]) * ic;
                            dxrow[c] += gv[c] * ic *
                                        (dyrow[c] - sum_dy[static_cast<std::size_t>(c)] * inv_n -
                                         xhat * sum_dyx[static_cast<std::size_t>(c)] * inv_n);
                        } else {
                            // moving stats are constants in infer mode
                            dxrow[c] += gv[c] * ic * dyrow[c];
                        }
                    }
                }
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId dense(GradTape& tape, TensorId input, TensorId weights, TensorId bias) {
    Tensor out = kernels::dense(tape.value(input), tape.value(weights), tape.value(bias));
    const bool rg = tape.requires_grad(input) || tape.requires_grad(weights) ||
                    tape.requires_grad(bias);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (rg) {
        fn = [=](GradTape& t) {
            const Tensor& x = t.value(input);
            const Tensor& w = t.value(weights);
            const Tensor& dy = t.grad_slot(out_id);
            const int n = w.dim(0), u = w.dim(1);
            const int batch = x.rank() == 2 ? x.dim(0) : 1;

            if (t.requires_grad(bias)) {
                Tensor& db = t.grad_slot(bias);
                for (int b = 0; b < batch; ++b) {
                    const float* dyrow = dy.data() + static_cast<std::size_t>(b) * u;
                    for (int j = 0; j < u; ++j) db[j] += dyrow[j];
                }
            }
            if (t.requires_grad(input)) {
                Tensor& dx = t.grad_slot(input);
#pragma omp parallel for schedule(static) if (batch >= 32)
                for (int b = 0; b < batch; ++b) {
                    const float* dyrow = dy.data() + static_cast<std::size_t>(b) * u;
                    float* dxrow = dx.data() + static_cast<std::size_t>(b) * n;
                    for (int i = 0; i < n; ++i) {
                        const float* wrow = w.data() + static_cast<std::size_t>(i) * u;
                        float acc = 0.0f;
                        for (int j = 0; j < u; ++j) acc += dyrow[j] * wrow[j];
                        dxrow[i] += acc;
                    }
                }
            }
            if (t.requires_grad(weights)) {
                Tensor& dw = t.grad_slot(weights);
#pragma omp parallel for schedule(static) if (n >= 64)
                for (int i = 0; i < n; ++i) {
                    float* dwrow = dw.data() + static_cast<std::size_t>(i) * u;
                    for (int b = 0; b < batch; ++b) {
                        const float xv = x[static_cast<std::int64_t>(b) * n + i];
                        const float* dyrow = dy.data() + static_cast<std::size_t>(b) * u;
                        for (int j = 0; j < u; ++j) dwrow[j] += xv * dyrow[j];
                    }
                }
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId relu(GradTape& tape, TensorId input) {
    Tensor out = kernels::relu(tape.value(input));
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id](GradTape& t) {
            const Tensor& x = t.value(input);
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            for (std::int64_t i = 0, e = x.size(); i < e; ++i) {
                if (x[i] > 0.0f) dx[i] += dy[i];
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId sigmoid(GradTape& tape, TensorId input) {
    Tensor out = kernels::sigmoid(tape.value(input));
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id](GradTape& t) {
            const Tensor& y = t.value(out_id);
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            for (std::int64_t i = 0, e = y.size(); i < e; ++i) {
                dx[i] += dy[i] * y[i] * (1.0f - y[i]);
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId softmax(GradTape& tape, TensorId input) {
    Tensor out = kernels::softmax(tape.value(input));
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id](GradTape& t) {
            const Tensor& y = t.value(out_id);
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            const RowDims rd = row_dims(y, "softmax");
            for (std::int64_t r = 0; r < rd.rows; ++r) {
                const float* yrow = y.data() + r * rd.cols;
                const float* dyrow = dy.data() + r * rd.cols;
                float* dxrow = dx.data() + r * rd.cols;
                float dot = 0.0f;
                for (int c = 0; c < rd.cols; ++c) dot += dyrow[c] * yrow[c];
                for (int c = 0; c < rd.cols; ++c) dxrow[c] += yrow[c] * (dyrow[c] - dot);
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId dropout(GradTape& tape, TensorId input, float rate, Mode mode, std::uint64_t seed) {
    if (!(rate >= 0.0f && rate < 1.0f)) {
        throw std::invalid_argument("dropout: rate must be in [0, 1)");
    }
    if (mode == Mode::Infer) {
        Tensor out = tape.value(input);
        const TensorId out_id = tape.next_id();
        std::function<void(GradTape&)> fn;
        if (tape.requires_grad(input)) {
            fn = [input, out_id](GradTape& t) {
                t.accumulate_grad(input, t.grad_slot(out_id));
            };
        }
        return tape.record(std::move(out), std::move(fn));
    }
    std::vector<float> mask;
    Tensor out = kernels::dropout_train(tape.value(input), rate, seed, &mask);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id, mask = std::move(mask)](GradTape& t) {
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            for (std::int64_t i = 0, e = dy.size(); i < e; ++i) {
                dx[i] += dy[i] * mask[static_cast<std::size_t>(i)];
            }
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId reshape(GradTape& tape, TensorId input, std::vector<int> shape) {
    Tensor out = tape.value(input).reshaped(std::move(shape));
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, out_id](GradTape& t) {
            const Tensor& dy = t.grad_slot(out_id);
            Tensor& dx = t.grad_slot(input);
            for (std::int64_t i = 0, e = dy.size(); i < e; ++i) dx[i] += dy[i];
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId pick(GradTape& tape, TensorId input, std::int64_t flat_index) {
    const Tensor& x = tape.value(input);
    if (flat_index < 0 || flat_index >= x.size()) {
        throw std::invalid_argument("pick: index out of range");
    }
    Tensor out = Tensor::scalar(x[flat_index]);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, flat_index, out_id](GradTape& t) {
            const Tensor& dy = t.grad_slot(out_id);
            t.grad_slot(input)[flat_index] += dy[0];
        };
    }
    return tape.record(std::move(out), std::move(fn));
}

TensorId select_column_sum(GradTape& tape, TensorId input, int column) {
    const Tensor& x = tape.value(input);
    if (x.rank() != 2) {
        throw std::invalid_argument("select_column_sum: expected rank-2 input, got " +
                                    x.shape_str());
    }
    const int batch = x.dim(0), k = x.dim(1);
    if (column < 0 || column >= k) {
        throw std::invalid_argument("select_column_sum: column out of range");
    }
    float total = 0.0f;
    for (int b = 0; b < batch; ++b) total += x[static_cast<std::int64_t>(b) * k + column];
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(input)) {
        fn = [input, column, batch, k, out_id](GradTape& t) {
            const float g = t.grad_slot(out_id)[0];
            Tensor& dx = t.grad_slot(input);
            for (int b = 0; b < batch; ++b) dx[static_cast<std::int64_t>(b) * k + column] += g;
        };
    }
    return tape.record(Tensor::scalar(total), std::move(fn));
}

TensorId cross_entropy(GradTape& tape, TensorId probs, const std::vector<int>& labels) {
    const Tensor& p = tape.value(probs);
    const double loss = kernels::cross_entropy(p, labels);
    const int k = p.dim(1);
    // rough sanity on the precondition that rows are probability vectors
    for (int b = 0; b < p.dim(0); ++b) {
        float sum = 0.0f;
        for (int c = 0; c < k; ++c) sum += p[static_cast<std::int64_t>(b) * k + c];
        if (std::abs(sum - 1.0f) > 1e-3f) {
            throw std::invalid_argument("cross_entropy: probability rows must sum to 1");
        }
    }
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(probs)) {
        fn = [probs, labels, k, out_id](GradTape& t) {
            const Tensor& p = t.value(probs);
            const float g = t.grad_slot(out_id)[0];
            Tensor& dp = t.grad_slot(probs);
            const int batch = p.dim(0);
            const float inv_b = 1.0f / static_cast<float>(batch);
            for (int b = 0; b < batch; ++b) {
                const std::int64_t idx =
                    static_cast<std::int64_t>(b) * k + labels[static_cast<std::size_t>(b)];
                const float pv = std::max(p[idx], 1e-12f);
                dp[idx] += -g * inv_b / pv;
            }
        };
    }
    return tape.record(Tensor::scalar(static_cast<float>(loss)), std::move(fn));
}

TensorId binary_cross_entropy(GradTape& tape, TensorId scores, const std::vector<int>& labels) {
    const Tensor& s = tape.value(scores);
    const double loss = kernels::binary_cross_entropy(s, labels);
    const TensorId out_id = tape.next_id();
    std::function<void(GradTape&)> fn;
    if (tape.requires_grad(scores)) {
        fn = [scores, labels, out_id](GradTape& t) {
            const Tensor& s = t.value(scores);
            const float g = t.grad_slot(out_id)[0];
            Tensor& ds = t.grad_slot(scores);
            const std::int64_t batch = s.size();
            const float inv_b = 1.0f / static_cast<float>(batch);
            for (std::int64_t b = 0; b < batch; ++b) {
                const int y = labels[static_cast<std::size_t>(b)];
                const float sv = s[b];
                const float d = y == 1 ? -1.0f / std::max(sv, 1e-12f)
                                       : 1.0f / std::max(1.0f - sv, 1e-12f);
                ds[b] += g * inv_b * d;
            }
        };
    }
    return tape.record(Tensor::scalar(static_cast<float>(loss)), std::move(fn));
}

}  // namespace derma
