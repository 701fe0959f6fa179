#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "derma/autodiff.hpp"
#include "derma/tensor.hpp"

namespace derma::model {

inline constexpr float kBatchNormEps = 1e-3f;
inline constexpr float kBatchNormMomentum = 0.99f;
inline constexpr float kDefaultDropoutRate = 0.5f;

enum class HeadKind { SevenWay, Binary };
enum class ActKind { Relu, Sigmoid, Softmax };

int head_width(HeadKind head);

// --- layer descriptors -----------------------------------------------------

struct Conv2DSpec {
    int filters;
    int kernel_h = 3, kernel_w = 3;
    Padding padding = Padding::Same;
};
struct MaxPool2DSpec {};  // fixed 2x2 window, stride 2, floor semantics
struct BatchNormSpec {};
struct DenseSpec {
    int units;
};
struct DropoutSpec {
    float rate = kDefaultDropoutRate;
};
struct FlattenSpec {};
struct ReshapeSpec {
    std::vector<int> shape;  // per-sample target shape
};
struct ActivationSpec {
    ActKind fn;
};
/// Opaque pretrained feature extractor. It contributes its declared
/// parameter count to the accounting but owns no tensors; at runtime the
/// model consumes precomputed feature vectors in its place.
struct BackboneSpec {
    int feature_dim;
    std::int64_t declared_param_count;
};

using LayerConfig = std::variant<Conv2DSpec, MaxPool2DSpec, BatchNormSpec, DenseSpec, DropoutSpec,
                                 FlattenSpec, ReshapeSpec, ActivationSpec, BackboneSpec>;

struct LayerSpec {
    std::string name;  // stable id; auto-assigned from the type when empty
    LayerConfig config;
};

struct ArchitectureSpec {
    std::vector<int> input_shape;
    std::vector<LayerSpec> layers;
    HeadKind head = HeadKind::SevenWay;
};

// --- accounting ------------------------------------------------------------

struct LayerSummary {
    std::string name;
    std::string type;
    std::vector<int> output_shape;  // per-sample
    std::int64_t params = 0;
    std::int64_t trainable = 0;
    std::int64_t non_trainable = 0;
};

struct ParamCounts {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    std::int64_t non_trainable = 0;
};

/// Copy of the spec with every layer carrying its final (auto-assigned) name.
ArchitectureSpec with_layer_names(const ArchitectureSpec& spec);

/// Shape and parameter propagation; throws std::invalid_argument when the
/// spec does not shape-check end to end.
std::vector<LayerSummary> summarize(const ArchitectureSpec& spec);

/// Symbolic counts; never allocates parameter tensors.
ParamCounts param_count(const ArchitectureSpec& spec);

const char* layer_type_name(const LayerConfig& config);

// --- parameters ------------------------------------------------------------

struct NamedTensor {
    std::string name;
    Tensor value;
    bool trainable = true;
};

/// Ordered map of layer-qualified parameter names ("conv2d/kernel", ...) to
/// tensors. Iteration follows insertion (layer) order so downstream passes
/// are deterministic.
class ModelParams {
public:
    void add(std::string name, Tensor value, bool trainable);
    bool has(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool trainable(const std::string& name) const;
    const std::vector<NamedTensor>& items() const { return items_; }
    std::vector<NamedTensor>& items() { return items_; }
    std::size_t size() const { return items_.size(); }
    std::int64_t element_count() const;
    bool operator==(const ModelParams& other) const;

private:
    std::vector<NamedTensor> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Allocate and initialize parameters: He-uniform kernels, zero biases and
/// means, unit gammas and variances. Deterministic per seed.
ModelParams build(const ArchitectureSpec& spec, std::uint64_t seed);

// --- presets ---------------------------------------------------------------

/// "model1a" | "model1b" | "model2a" | "model2b"
ArchitectureSpec preset(const std::string& name);
std::vector<std::string> preset_names();
/// True when the spec contains a Backbone layer (runtime input is a feature
/// vector rather than an image).
bool needs_features(const ArchitectureSpec& spec);

// --- inference / taped execution -------------------------------------------

struct ForwardOut {
    Tensor probs;   // B x K head probabilities
    Tensor logits;  // B x K pre-activation scores
};

/// Pure forward pass. The batch is either [B, ...input_shape], a single
/// sample [...input_shape], or the flattened equivalent; models with a
/// Backbone layer take [B, feature_dim] feature batches instead.
ForwardOut forward(const ModelParams& params, const ArchitectureSpec& spec, const Tensor& batch,
                   Mode mode, std::uint64_t dropout_seed = 0);

struct BatchNormUpdate {
    std::string layer_name;
    Tensor mean;
    Tensor var;
};

struct TapedForward {
    TensorId input = -1;
    TensorId logits = -1;
    TensorId probs = -1;
    std::vector<BatchNormUpdate> bn_updates;                   // train mode only
    std::unordered_map<std::string, TensorId> param_ids;       // trainable leaves
};

/// Forward pass recorded on a tape. Parameters enter the tape as leaves
/// (trainable ones with gradients); train mode reports the batch statistics
/// every batchnorm layer used so the caller can update moving averages.
TapedForward forward_taped(GradTape& tape, const ModelParams& params,
                           const ArchitectureSpec& spec, const Tensor& batch, Mode mode,
                           std::uint64_t dropout_seed = 0, bool input_requires_grad = false);

/// moving := momentum * moving + (1 - momentum) * batch_stat
void apply_bn_updates(ModelParams& params, const std::vector<BatchNormUpdate>& updates,
                      float momentum = kBatchNormMomentum);

// --- persistence -----------------------------------------------------------

/// Single-file checkpoint: magic + JSON manifest (names, shapes, trainable
/// flags, spec, format version) + raw little-endian float32 payload.
void save_checkpoint(const ModelParams& params, const ArchitectureSpec& spec,
                     const std::string& path);
std::pair<ModelParams, ArchitectureSpec> load_checkpoint(const std::string& path);

std::string spec_to_json_string(const ArchitectureSpec& spec);
ArchitectureSpec spec_from_json_string(const std::string& text);

}  // namespace derma::model
