#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "derma/tensor.hpp"

namespace derma {

using TensorId = std::int32_t;

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

/// Batch statistics produced by a train-mode batchnorm. The caller (the
/// training loop) folds them into the moving averages; the op itself never
/// mutates its parameter tensors.
struct BatchStats {
    Tensor mean;
    Tensor var;  // biased (1/N)
};

/// Reverse-mode tape over whole-tensor primitives.
///
/// Every tensor that participates in differentiation lives on the tape as a
/// node: leaves are added with leaf(), ops record one node per output.
/// backward() seeds the scalar output with gradient 1 and replays the nodes
/// in exact reverse order of recording (creation order is already a
/// topological order). A tape is consumable exactly once; clear() resets it
/// for reuse.
class GradTape {
public:
    TensorId leaf(Tensor value, bool requires_grad = true);

    const Tensor& value(TensorId id) const;
    /// Accumulated gradient; only meaningful after backward(). Zero tensor
    /// if the node never received a contribution.
    const Tensor& grad(TensorId id);

    void backward(TensorId scalar_output);
    bool consumed() const { return consumed_; }
    int size() const { return static_cast<int>(nodes_.size()); }
    void clear();

    // --- used by op implementations ---
    /// Id the next record()/leaf() call will return.
    TensorId next_id() const { return static_cast<TensorId>(nodes_.size()); }
    TensorId record(Tensor value, std::function<void(GradTape&)> backward_fn);
    bool requires_grad(TensorId id) const;
    /// Gradient slot, zero-initialized on first access.
    Tensor& grad_slot(TensorId id);
    void accumulate_grad(TensorId id, const Tensor& contribution);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(GradTape&)> backward_fn;
        bool requires_grad = false;
        bool grad_ready = false;
    };

    void check_id(TensorId id) const;

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Each takes ids of tape-resident tensors, records
// the forward result and returns its id. Image tensors are HxWxC or BxHxWxC;
// the channel axis of batchnorm is always the last axis.
// ---------------------------------------------------------------------------

TensorId conv2d(GradTape& tape, TensorId input, TensorId kernels, TensorId bias, int stride,
                Padding padding);
TensorId maxpool2d(GradTape& tape, TensorId input);
TensorId batchnorm(GradTape& tape, TensorId input, TensorId gamma, TensorId beta,
                   const Tensor& moving_mean, const Tensor& moving_var, float eps, Mode mode,
                   BatchStats* stats_out = nullptr);
TensorId dense(GradTape& tape, TensorId input, TensorId weights, TensorId bias);
TensorId relu(GradTape& tape, TensorId input);
TensorId sigmoid(GradTape& tape, TensorId input);
TensorId softmax(GradTape& tape, TensorId input);  // over the last axis
TensorId dropout(GradTape& tape, TensorId input, float rate, Mode mode, std::uint64_t seed);
TensorId reshape(GradTape& tape, TensorId input, std::vector<int> shape);

/// Scalar y = t[flat_index].
TensorId pick(GradTape& tape, TensorId input, std::int64_t flat_index);
/// Scalar y = sum_b t[b, column] for a rank-2 input.
TensorId select_column_sum(GradTape& tape, TensorId input, int column);

/// Mean over the batch of -log p[label], probabilities clamped at 1e-12.
TensorId cross_entropy(GradTape& tape, TensorId probs, const std::vector<int>& labels);
/// Mean over the batch of -[y log s + (1-y) log(1-s)], clamped at 1e-12.
TensorId binary_cross_entropy(GradTape& tape, TensorId scores, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Forward-only kernels (no tape). The taped ops above call these for their
// forward values.
// ---------------------------------------------------------------------------
namespace kernels {

struct Conv2DGeometry {
    int out_h, out_w;
    int pad_top, pad_left;
};
Conv2DGeometry conv2d_geometry(int in_h, int in_w, int kernel_h, int kernel_w, int stride,
                               Padding padding);

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
              Padding padding);
Tensor maxpool2d(const Tensor& input, std::vector<std::int64_t>* argmax_out = nullptr);
Tensor batchnorm_infer(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                       const Tensor& moving_mean, const Tensor& moving_var, float eps);
Tensor batchnorm_train(const Tensor& input, const Tensor& gamma, const Tensor& beta, float eps,
                       BatchStats& stats_out);
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor softmax(const Tensor& input);
/// Train-mode dropout; infer mode is the identity and has no kernel.
Tensor dropout_train(const Tensor& input, float rate, std::uint64_t seed,
                     std::vector<float>* scaled_mask_out = nullptr);

double cross_entropy(const Tensor& probs, const std::vector<int>& labels);
double binary_cross_entropy(const Tensor& scores, const std::vector<int>& labels);

}  // namespace kernels

}  // namespace derma
