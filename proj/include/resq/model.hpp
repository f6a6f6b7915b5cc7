#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/tape.hpp"
#include "resq/tensor.hpp"

namespace resq {

enum class LayerKind { dense, conv, relu, pool, flatten };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

// One step of the forward walk. Only dense and conv layers carry parameters;
// the others are markers so the architecture is fully described by the list.
struct Layer {
    std::string name;
    LayerKind kind;
    Parameter weight;  // dense [in,out], conv [F,C,kh,kw]
    Parameter bias;    // dense [out], conv [F]

    bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv; }
};

// Additive parameter perturbations keyed by layer name, used to express a
// faulted forward pass whose gradient still reaches the clean weights.
struct LayerDelta {
    Tensor weight;
    Tensor bias;
};
using WeightDeltas = std::map<std::string, LayerDelta>;

struct Model {
    std::vector<Layer> layers;
    int num_classes = 0;
    std::vector<std::size_t> input_shape;  // per-example shape, e.g. [C,H,W]

    Layer* find_layer(const std::string& name);
    const Layer* find_layer(const std::string& name) const;
    // every Parameter in layer order, weight before bias
    std::vector<Parameter*> parameters();
    std::vector<std::string> parametric_layer_names() const;
};

std::size_t parameter_count(const Model& m);

// dense-relu stack: flatten, fc1, relu1, ..., fcN. He-initialized weights,
// zero biases.
Model build_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                int classes, std::uint64_t seed);

// conv1(8@3x3), relu1, pool1, conv2(16@3x3), relu2, pool2, flatten, fc1
Model build_cnn(std::size_t channels, std::size_t side, int classes, std::uint64_t seed);

// Records the full forward pass on the tape. With track_params the layer
// parameters enter as bound leaves (their grad channels fill on backward);
// otherwise they enter as constants. `deltas` adds a constant perturbation
// to named layers' parameters, so backward treats the fault as transparent.
Var forward_on_tape(Model& m, Tape& tape, Var x, bool track_params = true,
                    const WeightDeltas* deltas = nullptr);

// Tape-free inference.
Tensor forward(const Model& m, const Tensor& x);

struct FeatureOutput {
    Tensor logits;
    Tensor features;  // softmax input; coincides with logits here
};

FeatureOutput forward_with_features(const Model& m, const Tensor& x);

// argmax match rate over the dataset, evaluated in minibatches
double accuracy(const Model& m, const Dataset& ds, std::size_t batch_size = 64);

// argmax per row
std::vector<int> predict(const Model& m, const Tensor& x);

}  // namespace resq
