#include "derma/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "derma/rng.hpp"

namespace derma::model {

using nlohmann::json;

int head_width(HeadKind head) { return head == HeadKind::SevenWay ? 7 : 1; }

const char* layer_type_name(const LayerConfig& config) {
    struct Namer {
        const char* operator()(const Conv2DSpec&) const { return "conv2d"; }
        const char* operator()(const MaxPool2DSpec&) const { return "max_pooling2d"; }
        const char* operator()(const BatchNormSpec&) const { return "batch_normalization"; }
        const char* operator()(const DenseSpec&) const { return "dense"; }
        const char* operator()(const DropoutSpec&) const { return "dropout"; }
        const char* operator()(const FlattenSpec&) const { return "flatten"; }
        const char* operator()(const ReshapeSpec&) const { return "reshape"; }
        const char* operator()(const ActivationSpec&) const { return "activation"; }
        const char* operator()(const BackboneSpec&) const { return "backbone"; }
    };
    return std::visit(Namer{}, config);
}

ArchitectureSpec with_layer_names(const ArchitectureSpec& spec) {
    ArchitectureSpec named = spec;
    std::unordered_map<std::string, int> counters;
    for (auto& layer : named.layers) {
        const std::string type = layer_type_name(layer.config);
        int& count = counters[type];
        if (layer.name.empty()) {
            layer.name = count == 0 ? type : type + "_" + std::to_string(count);
        }
        ++count;
    }
    return named;
}

namespace {

struct Propagation {
    ArchitectureSpec named;
    std::vector<LayerSummary> rows;
    std::vector<std::vector<int>> input_shapes;  // per-sample shape entering each layer
};

Propagation propagate(const ArchitectureSpec& spec) {
    Propagation out;
    out.named = with_layer_names(spec);
    shape_product(spec.input_shape);  // validates extents
    std::vector<int> cur = spec.input_shape;

    for (const auto& layer : out.named.layers) {
        out.input_shapes.push_back(cur);
        LayerSummary row;
        row.name = layer.name;
        row.type = layer_type_name(layer.config);

        if (const auto* conv = std::get_if<Conv2DSpec>(&layer.config)) {
            if (cur.size() != 3) {
                throw std::invalid_argument("layer " + layer.name + ": conv2d needs HxWxC input, got " +
                                            shape_to_string(cur));
            }
            if (conv->filters <= 0 || conv->kernel_h <= 0 || conv->kernel_w <= 0) {
                throw std::invalid_argument("layer " + layer.name + ": invalid conv2d geometry");
            }
            const auto g = kernels::conv2d_geometry(cur[0], cur[1], conv->kernel_h, conv->kernel_w,
                                                    1, conv->padding);
            const std::int64_t kparams = static_cast<std::int64_t>(conv->kernel_h) *
                                         conv->kernel_w * cur[2] * conv->filters;
            row.params = kparams + conv->filters;
            row.trainable = row.params;
            cur = {g.out_h, g.out_w, conv->filters};
        } else if (std::holds_alternative<MaxPool2DSpec>(layer.config)) {
            if (cur.size() != 3 || cur[0] < 2 || cur[1] < 2) {
                throw std::invalid_argument("layer " + layer.name +
                                            ": max_pooling2d window larger than input " +
                                            shape_to_string(cur));
            }
            cur = {cur[0] / 2, cur[1] / 2, cur[2]};
        } else if (std::holds_alternative<BatchNormSpec>(layer.config)) {
            const int c = cur.back();
            row.params = 4LL * c;
            row.trainable = 2LL * c;
            row.non_trainable = 2LL * c;
        } else if (const auto* d = std::get_if<DenseSpec>(&layer.config)) {
            if (cur.size() != 1) {
                throw std::invalid_argument("layer " + layer.name + ": dense needs a flat input, got " +
                                            shape_to_string(cur));
            }
            if (d->units <= 0) {
                throw std::invalid_argument("layer " + layer.name + ": dense units must be positive");
            }
            row.params = static_cast<std::int64_t>(cur[0]) * d->units + d->units;
            row.trainable = row.params;
            cur = {d->units};
        } else if (const auto* drop = std::get_if<DropoutSpec>(&layer.config)) {
            if (!(drop->rate >= 0.0f && drop->rate < 1.0f)) {
                throw std::invalid_argument("layer " + layer.name + ": dropout rate must be in [0, 1)");
            }
        } else if (std::holds_alternative<FlattenSpec>(layer.config)) {
            cur = {static_cast<int>(shape_product(cur))};
        } else if (const auto* rs = std::get_if<ReshapeSpec>(&layer.config)) {
            if (shape_product(rs->shape) != shape_product(cur)) {
                throw std::invalid_argument("layer " + layer.name + ": cannot reshape " +
                                            shape_to_string(cur) + " to " + shape_to_string(rs->shape));
            }
            cur = rs->shape;
        } else if (std::holds_alternative<ActivationSpec>(layer.config)) {
            // shape preserved
        } else if (const auto* bb = std::get_if<BackboneSpec>(&layer.config)) {
            if (bb->feature_dim <= 0 || bb->declared_param_count < 0) {
                throw std::invalid_argument("layer " + layer.name + ": invalid backbone declaration");
            }
            row.params = bb->declared_param_count;
            // frozen pretrained function: all declared parameters non-trainable here
            row.non_trainable = bb->declared_param_count;
            cur = {bb->feature_dim};
        }
        row.output_shape = cur;
        out.rows.push_back(std::move(row));
    }

    const int k = head_width(spec.head);
    if (cur.size() != 1 || cur[0] != k) {
        throw std::invalid_argument("head expects " + std::to_string(k) +
                                    " outputs but layers end with " + shape_to_string(cur));
    }
    return out;
}

void write_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void write_f32_le(std::string& out, float f) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

float read_f32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(v);
}

constexpr char kCheckpointMagic[9] = "DACKPT01";
constexpr int kCheckpointVersion = 1;

json layer_to_json(const LayerSpec& layer) {
    json j;
    j["type"] = layer_type_name(layer.config);
    j["name"] = layer.name;
    if (const auto* conv = std::get_if<Conv2DSpec>(&layer.config)) {
        j["filters"] = conv->filters;
        j["kernel"] = {conv->kernel_h, conv->kernel_w};
        j["padding"] = conv->padding == Padding::Same ? "same" : "valid";
    } else if (const auto* d = std::get_if<DenseSpec>(&layer.config)) {
        j["units"] = d->units;
    } else if (const auto* drop = std::get_if<DropoutSpec>(&layer.config)) {
        j["rate"] = drop->rate;
    } else if (const auto* rs = std::get_if<ReshapeSpec>(&layer.config)) {
        j["shape"] = rs->shape;
    } else if (const auto* act = std::get_if<ActivationSpec>(&layer.config)) {
        j["fn"] = act->fn == ActKind::Relu ? "relu"
                  : act->fn == ActKind::Sigmoid ? "sigmoid"
                                                : "softmax";
    } else if (const auto* bb = std::get_if<BackboneSpec>(&layer.config)) {
        j["feature_dim"] = bb->feature_dim;
        j["declared_params"] = bb->declared_param_count;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec layer;
    layer.name = j.value("name", std::string());
    const std::string type = j.at("type").get<std::string>();
    if (type == "conv2d") {
        Conv2DSpec conv;
        conv.filters = j.at("filters").get<int>();
        const auto k = j.at("kernel");
        conv.kernel_h = k.at(0).get<int>();
        conv.kernel_w = k.at(1).get<int>();
        const std::string pad = j.value("padding", "same");
        if (pad != "same" && pad != "valid") {
            throw std::invalid_argument("unknown conv2d padding '" + pad + "'");
        }
        conv.padding = pad == "same" ? Padding::Same : Padding::Valid;
        layer.config = conv;
    } else if (type == "max_pooling2d") {
        layer.config = MaxPool2DSpec{};
    } else if (type == "batch_normalization") {
        layer.config = BatchNormSpec{};
    } else if (type == "dense") {
        layer.config = DenseSpec{j.at("units").get<int>()};
    } else if (type == "dropout") {
        layer.config = DropoutSpec{j.at("rate").get<float>()};
    } else if (type == "flatten") {
        layer.config = FlattenSpec{};
    } else if (type == "reshape") {
        layer.config = ReshapeSpec{j.at("shape").get<std::vector<int>>()};
    } else if (type == "activation") {
        const std::string fn = j.at("fn").get<std::string>();
        ActKind kind;
        if (fn == "relu") {
            kind = ActKind::Relu;
        } else if (fn == "sigmoid") {
            kind = ActKind::Sigmoid;
        } else if (fn == "softmax") {
            kind = ActKind::Softmax;
        } else {
            throw std::invalid_argument("unknown activation '" + fn + "'");
        }
        layer.config = ActivationSpec{kind};
    } else if (type == "backbone") {
        layer.config = BackboneSpec{j.at("feature_dim").get<int>(),
                                    j.at("declared_params").get<std::int64_t>()};
    } else {
        throw std::invalid_argument("unknown layer type '" + type + "'");
    }
    return layer;
}

json spec_to_json(const ArchitectureSpec& spec) {
    json j;
    j["input_shape"] = spec.input_shape;
    j["head"] = spec.head == HeadKind::SevenWay ? "seven_way" : "binary";
    j["layers"] = json::array();
    const ArchitectureSpec named = with_layer_names(spec);
    for (const auto& layer : named.layers) j["layers"].push_back(layer_to_json(layer));
    return j;
}

ArchitectureSpec spec_from_json(const json& j) {
    ArchitectureSpec spec;
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    const std::string head = j.at("head").get<std::string>();
    if (head == "seven_way") {
        spec.head = HeadKind::SevenWay;
    } else if (head == "binary") {
        spec.head = HeadKind::Binary;
    } else {
        throw std::invalid_argument("unknown head '" + head + "'");
    }
    for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
    return spec;
}

}  // namespace

std::vector<LayerSummary> summarize(const ArchitectureSpec& spec) { return propagate(spec).rows; }

ParamCounts param_count(const ArchitectureSpec& spec) {
    ParamCounts counts;
    for (const auto& row : summarize(spec)) {
        counts.total += row.params;
        counts.trainable += row.trainable;
        counts.non_trainable += row.non_trainable;
    }
    return counts;
}

// --- ModelParams -------------------------------------------------------------

void ModelParams::add(std::string name, Tensor value, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = items_.size();
    items_.push_back(NamedTensor{std::move(name), std::move(value), trainable});
}

bool ModelParams::has(const std::string& name) const { return index_.count(name) != 0; }

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no parameter named '" + name + "'");
    return items_[it->second].value;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no parameter named '" + name + "'");
    return items_[it->second].value;
}

bool ModelParams::trainable(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no parameter named '" + name + "'");
    return items_[it->second].trainable;
}

std::int64_t ModelParams::element_count() const {
    std::int64_t n = 0;
    for (const auto& item : items_) n += item.value.size();
    return n;
}

bool ModelParams::operator==(const ModelParams& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        const auto& a = items_[i];
        const auto& b = other.items_[i];
        if (a.name != b.name || a.trainable != b.trainable || !a.value.same_shape(b.value)) {
            return false;
        }
        if (std::memcmp(a.value.data(), b.value.data(),
                        sizeof(float) * static_cast<std::size_t>(a.value.size())) != 0) {
            return false;
        }
    }
    return true;
}

// --- build -------------------------------------------------------------------

ModelParams build(const ArchitectureSpec& spec, std::uint64_t seed) {
    const Propagation prop = propagate(spec);
    ModelParams params;
    Rng rng(seed);

    auto he_uniform = [&rng](Tensor& t, std::int64_t fan_in) {
        const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
        for (std::int64_t i = 0, e = t.size(); i < e; ++i) t[i] = rng.uniform(-limit, limit);
    };

    for (std::size_t i = 0; i < prop.named.layers.size(); ++i) {
        const auto& layer = prop.named.layers[i];
        const auto& in_shape = prop.input_shapes[i];
        if (const auto* conv = std::get_if<Conv2DSpec>(&layer.config)) {
            Tensor kernel({conv->kernel_h, conv->kernel_w, in_shape[2], conv->filters});
            he_uniform(kernel, static_cast<std::int64_t>(conv->kernel_h) * conv->kernel_w *
                                   in_shape[2]);
            params.add(layer.name + "/kernel", std::move(kernel), true);
            params.add(layer.name + "/bias", Tensor({conv->filters}), true);
        } else if (std::holds_alternative<BatchNormSpec>(layer.config)) {
            const int c = in_shape.back();
            params.add(layer.name + "/gamma", Tensor::full({c}, 1.0f), true);
            params.add(layer.name + "/beta", Tensor({c}), true);
            params.add(layer.name + "/moving_mean", Tensor({c}), false);
            params.add(layer.name + "/moving_var", Tensor::full({c}, 1.0f), false);
        } else if (const auto* d = std::get_if<DenseSpec>(&layer.config)) {
            Tensor kernel({in_shape[0], d->units});
            he_uniform(kernel, in_shape[0]);
            params.add(layer.name + "/kernel", std::move(kernel), true);
            params.add(layer.name + "/bias", Tensor({d->units}), true);
        }
    }
    return params;
}

// --- presets -----------------------------------------------------------------

namespace {

void push_act(ArchitectureSpec& spec, ActKind fn) {
    spec.layers.push_back({"", ActivationSpec{fn}});
}

ArchitectureSpec model2(HeadKind head) {
    ArchitectureSpec spec;
    spec.head = head;
    if (head == HeadKind::Binary) {
        // the binary variant takes flattened pixels and restores the image shape
        spec.input_shape = {22500};
        spec.layers.push_back({"", ReshapeSpec{{75, 100, 3}}});
    } else {
        spec.input_shape = {75, 100, 3};
    }
    auto conv = [&](int filters) {
        spec.layers.push_back({"", Conv2DSpec{filters, 3, 3, Padding::Same}});
        push_act(spec, ActKind::Relu);
    };
    auto pool = [&] { spec.layers.push_back({"", MaxPool2DSpec{}}); };
    auto bn = [&] { spec.layers.push_back({"", BatchNormSpec{}}); };
    auto dense_relu_bn = [&](int units) {
        spec.layers.push_back({"", DenseSpec{units}});
        push_act(spec, ActKind::Relu);
        bn();
    };

    conv(32);
    pool();
    bn();
    conv(64);
    conv(64);
    pool();
    bn();
    conv(128);
    conv(128);
    pool();
    bn();
    conv(256);
    conv(256);
    pool();
    spec.layers.push_back({"", FlattenSpec{}});
    spec.layers.push_back({"", DropoutSpec{kDefaultDropoutRate}});
    dense_relu_bn(256);
    dense_relu_bn(128);
    dense_relu_bn(64);
    dense_relu_bn(32);
    spec.layers.push_back({"classifier", DenseSpec{head_width(head)}});
    return spec;
}

ArchitectureSpec model1(HeadKind head) {
    ArchitectureSpec spec;
    spec.head = head;
    if (head == HeadKind::Binary) {
        spec.input_shape = {22500};
        spec.layers.push_back({"", ReshapeSpec{{75, 100, 3}}});
    } else {
        // the 7-way table carries no reshape row; each preset follows its table
        spec.input_shape = {75, 100, 3};
    }
    spec.layers.push_back({"mobilenet_1.00_224", BackboneSpec{1024, 3228864}});
    spec.layers.push_back({"", DropoutSpec{kDefaultDropoutRate}});
    spec.layers.push_back({"", BatchNormSpec{}});
    spec.layers.push_back({"", DenseSpec{256}});
    push_act(spec, ActKind::Relu);
    spec.layers.push_back({"", DropoutSpec{kDefaultDropoutRate}});
    spec.layers.push_back({"", BatchNormSpec{}});
    spec.layers.push_back({"", DenseSpec{head_width(head)}});
    return spec;
}

}  // namespace

ArchitectureSpec preset(const std::string& name) {
    if (name == "model1a") return model1(HeadKind::SevenWay);
    if (name == "model1b") return model1(HeadKind::Binary);
    if (name == "model2a") return model2(HeadKind::SevenWay);
    if (name == "model2b") return model2(HeadKind::Binary);
    throw std::invalid_argument("unknown preset '" + name +
                                "' (expected model1a, model1b, model2a or model2b)");
}

std::vector<std::string> preset_names() { return {"model1a", "model1b", "model2a", "model2b"}; }

bool needs_features(const ArchitectureSpec& spec) {
    for (const auto& layer : spec.layers) {
        if (std::holds_alternative<BackboneSpec>(layer.config)) return true;
    }
    return false;
}

// --- forward -----------------------------------------------------------------

namespace {

struct RunOptions {
    Mode mode = Mode::Infer;
    std::uint64_t dropout_seed = 0;
    bool params_require_grad = false;
    bool input_requires_grad = false;
};

Tensor normalize_batch(const ArchitectureSpec& spec, const Tensor& batch, int* batch_size) {
    const std::vector<int>& in = spec.input_shape;
    const std::int64_t per_sample = shape_product(in);

    const auto& s = batch.shape();
    // [B, ...input_shape]
    if (static_cast<int>(s.size()) == static_cast<int>(in.size()) + 1 &&
        std::equal(in.begin(), in.end(), s.begin() + 1)) {
        *batch_size = s[0];
        return batch;
    }
    // [...input_shape]
    if (s == in) {
        *batch_size = 1;
        std::vector<int> shape{1};
        shape.insert(shape.end(), in.begin(), in.end());
        return batch.reshaped(std::move(shape));
    }
    // flattened per-sample rows
    if (s.size() == 2 && s[1] == per_sample) {
        *batch_size = s[0];
        std::vector<int> shape{s[0]};
        shape.insert(shape.end(), in.begin(), in.end());
        return batch.reshaped(std::move(shape));
    }
    if (s.size() == 1 && s[0] == per_sample) {
        *batch_size = 1;
        std::vector<int> shape{1};
        shape.insert(shape.end(), in.begin(), in.end());
        return batch.reshaped(std::move(shape));
    }
    throw std::invalid_argument("batch shape " + batch.shape_str() + " does not match model input " +
                                shape_to_string(in));
}

TapedForward run_layers(GradTape& tape, const ModelParams& params, const ArchitectureSpec& spec,
                        const Tensor& batch, const RunOptions& opts) {
    const Propagation prop = propagate(spec);
    TapedForward out;

    // models with a backbone start from precomputed feature vectors
    std::size_t start = 0;
    int batch_size = 0;
    Tensor input;
    std::optional<std::size_t> backbone_index;
    for (std::size_t i = 0; i < prop.named.layers.size(); ++i) {
        if (std::holds_alternative<BackboneSpec>(prop.named.layers[i].config)) {
            backbone_index = i;
            break;
        }
    }
    if (backbone_index) {
        const auto& bb = std::get<BackboneSpec>(prop.named.layers[*backbone_index].config);
        const auto& s = batch.shape();
        if (s.size() == 2 && s[1] == bb.feature_dim) {
            batch_size = s[0];
            input = batch;
        } else if (s.size() == 1 && s[0] == bb.feature_dim) {
            batch_size = 1;
            input = batch.reshaped({1, bb.feature_dim});
        } else {
            throw std::invalid_argument(
                "model with a backbone expects precomputed feature batches of width " +
                std::to_string(bb.feature_dim) + ", got " + batch.shape_str());
        }
        start = *backbone_index + 1;
    } else {
        input = normalize_batch(spec, batch, &batch_size);
    }

    TensorId cur = tape.leaf(std::move(input), opts.input_requires_grad);
    out.input = cur;

    auto param_leaf = [&](const std::string& name) {
        const bool rg = opts.params_require_grad && params.trainable(name);
        const TensorId id = tape.leaf(params.at(name), rg);
        out.param_ids.emplace(name, id);
        return id;
    };

    for (std::size_t i = start; i < prop.named.layers.size(); ++i) {
        const auto& layer = prop.named.layers[i];
        if (const auto* conv = std::get_if<Conv2DSpec>(&layer.config)) {
            const TensorId k = param_leaf(layer.name + "/kernel");
            const TensorId b = param_leaf(layer.name + "/bias");
            cur = conv2d(tape, cur, k, b, 1, conv->padding);
        } else if (std::holds_alternative<MaxPool2DSpec>(layer.config)) {
            cur = maxpool2d(tape, cur);
        } else if (std::holds_alternative<BatchNormSpec>(layer.config)) {
            const TensorId gamma = param_leaf(layer.name + "/gamma");
            const TensorId beta = param_leaf(layer.name + "/beta");
            BatchStats stats;
            cur = batchnorm(tape, cur, gamma, beta, params.at(layer.name + "/moving_mean"),
                            params.at(layer.name + "/moving_var"), kBatchNormEps, opts.mode,
                            opts.mode == Mode::Train ? &stats : nullptr);
            if (opts.mode == Mode::Train) {
                out.bn_updates.push_back(
                    BatchNormUpdate{layer.name, std::move(stats.mean), std::move(stats.var)});
            }
        } else if (std::holds_alternative<DenseSpec>(layer.config)) {
            const TensorId k = param_leaf(layer.name + "/kernel");
            const TensorId b = param_leaf(layer.name + "/bias");
            cur = dense(tape, cur, k, b);
        } else if (const auto* drop = std::get_if<DropoutSpec>(&layer.config)) {
            cur = dropout(tape, cur, drop->rate, opts.mode,
                          mix_seed(opts.dropout_seed, static_cast<std::uint64_t>(i)));
        } else if (std::holds_alternative<FlattenSpec>(layer.config)) {
            const int flat = static_cast<int>(shape_product(prop.rows[i].output_shape));
            cur = reshape(tape, cur, {batch_size, flat});
        } else if (const auto* rs = std::get_if<ReshapeSpec>(&layer.config)) {
            std::vector<int> shape{batch_size};
            shape.insert(shape.end(), rs->shape.begin(), rs->shape.end());
            cur = reshape(tape, cur, std::move(shape));
        } else if (const auto* act = std::get_if<ActivationSpec>(&layer.config)) {
            switch (act->fn) {
                case ActKind::Relu: cur = relu(tape, cur); break;
                case ActKind::Sigmoid: cur = sigmoid(tape, cur); break;
                case ActKind::Softmax: cur = softmax(tape, cur); break;
            }
        } else if (std::holds_alternative<BackboneSpec>(layer.config)) {
            throw std::invalid_argument("layer " + layer.name +
                                        ": only one leading backbone is supported");
        }
    }

    out.logits = cur;
    out.probs = spec.head == HeadKind::SevenWay ? softmax(tape, cur) : sigmoid(tape, cur);
    return out;
}

}  // namespace

ForwardOut forward(const ModelParams& params, const ArchitectureSpec& spec, const Tensor& batch,
                   Mode mode, std::uint64_t dropout_seed) {
    GradTape tape;
    RunOptions opts;
    opts.mode = mode;
    opts.dropout_seed = dropout_seed;
    const TapedForward run = run_layers(tape, params, spec, batch, opts);
    return ForwardOut{tape.value(run.probs), tape.value(run.logits)};
}

TapedForward forward_taped(GradTape& tape, const ModelParams& params, const ArchitectureSpec& spec,
                           const Tensor& batch, Mode mode, std::uint64_t dropout_seed,
                           bool input_requires_grad) {
    RunOptions opts;
    opts.mode = mode;
    opts.dropout_seed = dropout_seed;
    opts.params_require_grad = true;
    opts.input_requires_grad = input_requires_grad;
    return run_layers(tape, params, spec, batch, opts);
}

void apply_bn_updates(ModelParams& params, const std::vector<BatchNormUpdate>& updates,
                      float momentum) {
    for (const auto& u : updates) {
        Tensor& mm = params.at(u.layer_name + "/moving_mean");
        Tensor& mv = params.at(u.layer_name + "/moving_var");
        for (std::int64_t c = 0, e = mm.size(); c < e; ++c) {
            mm[c] = momentum * mm[c] + (1.0f - momentum) * u.mean[c];
            mv[c] = momentum * mv[c] + (1.0f - momentum) * u.var[c];
        }
    }
}

// --- persistence ---------------------------------------------------------------

std::string spec_to_json_string(const ArchitectureSpec& spec) { return spec_to_json(spec).dump(); }

ArchitectureSpec spec_from_json_string(const std::string& text) {
    return spec_from_json(json::parse(text));
}

void save_checkpoint(const ModelParams& params, const ArchitectureSpec& spec,
                     const std::string& path) {
    json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["spec"] = spec_to_json(spec);
    manifest["tensors"] = json::array();
    for (const auto& item : params.items()) {
        json t;
        t["name"] = item.name;
        t["shape"] = item.value.shape();
        t["trainable"] = item.trainable;
        t["count"] = item.value.size();
        manifest["tensors"].push_back(std::move(t));
    }
    const std::string manifest_text = manifest.dump();

    std::string out;
    out.reserve(16 + manifest_text.size() +
                static_cast<std::size_t>(params.element_count()) * 4);
    out.append(kCheckpointMagic, 8);
    write_u64_le(out, manifest_text.size());
    out.append(manifest_text);
    for (const auto& item : params.items()) {
        for (std::int64_t i = 0, e = item.value.size(); i < e; ++i) {
            write_f32_le(out, item.value[i]);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint to '" + path + "'");
}

std::pair<ModelParams, ArchitectureSpec> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("'" + path + "' is not a checkpoint file (bad magic)");
    }
    const std::uint64_t manifest_len = read_u64_le(p + 8);
    if (16 + manifest_len > bytes.size()) {
        throw std::runtime_error("corrupt manifest: declared length exceeds file size");
    }
    json manifest;
    try {
        manifest = json::parse(bytes.substr(16, manifest_len));
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("corrupt manifest: ") + e.what());
    }
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unknown checkpoint format version " + std::to_string(version));
    }
    ArchitectureSpec spec = spec_from_json(manifest.at("spec"));

    ModelParams params;
    std::size_t offset = 16 + manifest_len;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        const bool trainable = t.at("trainable").get<bool>();
        const std::int64_t count = t.at("count").get<std::int64_t>();
        if (count != shape_product(shape)) {
            throw std::runtime_error("checkpoint tensor '" + name +
                                     "' shape does not match its element count");
        }
        if (offset + static_cast<std::size_t>(count) * 4 > bytes.size()) {
            throw std::runtime_error("checkpoint payload length too short for tensor '" + name +
                                     "'");
        }
        Tensor value(shape);
        for (std::int64_t i = 0; i < count; ++i) {
            value[i] = read_f32_le(p + offset + static_cast<std::size_t>(i) * 4);
        }
        offset += static_cast<std::size_t>(count) * 4;
        params.add(name, std::move(value), trainable);
    }
    if (offset != bytes.size()) {
        throw std::runtime_error("checkpoint payload length has " +
                                 std::to_string(bytes.size() - offset) + " trailing bytes");
    }
    return {std::move(params), std::move(spec)};
}

}  // namespace derma::model
