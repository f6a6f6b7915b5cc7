#include "resq/model.hpp"

#include <cmath>
#include <set>

#include "resq/errors.hpp"
#include "resq/rng.hpp"

namespace resq {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv: return "conv";
        case LayerKind::relu: return "relu";
        case LayerKind::pool: return "pool";
        case LayerKind::flatten: return "flatten";
    }
    return "unknown";
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "dense") return LayerKind::dense;
    if (name == "conv") return LayerKind::conv;
    if (name == "relu") return LayerKind::relu;
    if (name == "pool") return LayerKind::pool;
    if (name == "flatten") return LayerKind::flatten;
    throw FormatError("unknown layer kind '" + name + "'");
}

Layer* Model::find_layer(const std::string& name) {
    for (auto& l : layers)
        if (l.name == name) return &l;
    return nullptr;
}

const Layer* Model::find_layer(const std::string& name) const {
    for (const auto& l : layers)
        if (l.name == name) return &l;
    return nullptr;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> ps;
    for (auto& l : layers) {
        if (!l.has_params()) continue;
        ps.push_back(&l.weight);
        ps.push_back(&l.bias);
    }
    return ps;
}

std::vector<std::string> Model::parametric_layer_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers)
        if (l.has_params()) names.push_back(l.name);
    return names;
}

std::size_t parameter_count(const Model& m) {
    std::size_t n = 0;
    for (const auto& l : m.layers) {
        if (!l.has_params()) continue;
        n += l.weight.value.size() + l.bias.value.size();
    }
    return n;
}

namespace {

Tensor he_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.vec()) v = rng.normal() * stddev;
    return t;
}

Layer marker(std::string name, LayerKind kind) {
    Layer l;
    l.name = std::move(name);
    l.kind = kind;
    return l;
}

void check_unique_names(const Model& m) {
    std::set<std::string> seen;
    for (const auto& l : m.layers) {
        if (!seen.insert(l.name).second) {
            throw ContractError("duplicate layer name '" + l.name + "'");
        }
    }
}

}  // namespace

Model build_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, int classes,
                std::uint64_t seed) {
    if (hidden.empty()) throw ContractError("build_mlp needs at least one hidden layer");
    if (classes < 2) throw ContractError("build_mlp needs at least 2 classes");
    Rng rng(seed);
    Model m;
    m.num_classes = classes;
    m.input_shape = {input_dim};
    m.layers.push_back(marker("flatten", LayerKind::flatten));

    std::size_t in = input_dim;
    std::vector<std::size_t> widths = hidden;
    widths.push_back(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < widths.size(); ++i) {
        const std::size_t out = widths[i];
        Layer l;
        l.name = "fc" + std::to_string(i + 1);
        l.kind = LayerKind::dense;
        l.weight = {l.name + ".weight", he_init({in, out}, in, rng), true};
        l.bias = {l.name + ".bias", Tensor({out}), true};
        m.layers.push_back(std::move(l));
        if (i + 1 < widths.size()) {
            m.layers.push_back(marker("relu" + std::to_string(i + 1), LayerKind::relu));
        }
        in = out;
    }
    check_unique_names(m);
    return m;
}

Model build_cnn(std::size_t channels, std::size_t side, int classes, std::uint64_t seed) {
    if (side < 8) {
        throw DimensionError("build_cnn needs side >= 8 to survive two conv+pool stages, got " +
                             std::to_string(side));
    }
    if (classes < 2) throw ContractError("build_cnn needs at least 2 classes");
    Rng rng(seed);
    Model m;
    m.num_classes = classes;
    m.input_shape = {channels, side, side};

    const std::size_t f1 = 8, f2 = 16;
    auto conv_layer = [&](const std::string& name, std::size_t in_c, std::size_t out_c) {
        Layer l;
        l.name = name;
        l.kind = LayerKind::conv;
        l.weight = {name + ".weight", he_init({out_c, in_c, 3, 3}, in_c * 9, rng), true};
        l.bias = {name + ".bias", Tensor({out_c}), true};
        return l;
    };
    m.layers.push_back(conv_layer("conv1", channels, f1));
    m.layers.push_back(marker("relu1", LayerKind::relu));
    m.layers.push_back(marker("pool1", LayerKind::pool));
    m.layers.push_back(conv_layer("conv2", f1, f2));
    m.layers.push_back(marker("relu2", LayerKind::relu));
    m.layers.push_back(marker("pool2", LayerKind::pool));
    m.layers.push_back(marker("flatten", LayerKind::flatten));

    // trace the spatial extent through conv(3)/pool(ceil-2) twice
    std::size_t s = side - 2;   // conv1
    s = (s + 1) / 2;            // pool1
    if (s < 3) throw DimensionError("build_cnn: side too small after first pool");
    s = s - 2;                  // conv2
    s = (s + 1) / 2;            // pool2
    const std::size_t flat = f2 * s * s;

    Layer fc;
    fc.name = "fc1";
    fc.kind = LayerKind::dense;
    fc.weight = {"fc1.weight", he_init({flat, static_cast<std::size_t>(classes)}, flat, rng), true};
    fc.bias = {"fc1.bias", Tensor({static_cast<std::size_t>(classes)}), true};
    m.layers.push_back(std::move(fc));
    check_unique_names(m);
    return m;
}

namespace {

void check_input_shape(const Model& m, const Tensor& x) {
    bool ok = x.rank() == m.input_shape.size() + 1;
    if (ok) {
        for (std::size_t i = 0; i < m.input_shape.size(); ++i) {
            // 0 is a wildcard: a loaded checkpoint pins the channel count but
            // cannot recover spatial dims, so those stay unconstrained
            ok = ok && (m.input_shape[i] == 0 || x.shape()[i + 1] == m.input_shape[i]);
        }
    }
    // an MLP also accepts un-flattened [batch,C,H,W] input with matching size
    if (!ok && m.input_shape.size() == 1 && x.rank() >= 2) {
        ok = x.size() / x.shape()[0] == m.input_shape[0];
    }
    if (!ok) {
        throw DimensionError("model input " + shape_str(x.shape()) + " does not match per-example shape " +
                             shape_str(m.input_shape));
    }
}

}  // namespace

Var forward_on_tape(Model& m, Tape& tape, Var x, bool track_params, const WeightDeltas* deltas) {
    check_input_shape(m, tape.value(x));
    Var h = x;
    for (auto& l : m.layers) {
        switch (l.kind) {
            case LayerKind::relu: h = tape.relu(h); break;
            case LayerKind::pool: h = tape.avg_pool2(h); break;
            case LayerKind::flatten: h = tape.flatten(h); break;
            case LayerKind::dense:
            case LayerKind::conv: {
                Var w = track_params ? tape.leaf(l.weight.value) : tape.constant(l.weight.value);
                Var b = track_params ? tape.leaf(l.bias.value) : tape.constant(l.bias.value);
                if (deltas) {
                    auto it = deltas->find(l.name);
                    if (it != deltas->end()) {
                        w = tape.add(w, tape.constant(it->second.weight));
                        b = tape.add(b, tape.constant(it->second.bias));
                    }
                }
                h = l.kind == LayerKind::dense ? tape.matmul(h, w) : tape.conv2d(h, w, 1);
                h = tape.add_bias(h, b);
                break;
            }
        }
    }
    return h;
}

Tensor forward(const Model& m, const Tensor& x) {
    check_input_shape(m, x);
    Tensor h = x;
    for (const auto& l : m.layers) {
        switch (l.kind) {
            case LayerKind::relu: h = kernels::relu(h); break;
            case LayerKind::pool: h = kernels::avg_pool2(h); break;
            case LayerKind::flatten: h = kernels::flatten(h); break;
            case LayerKind::dense:
                h = kernels::add_bias(kernels::matmul(h, l.weight.value), l.bias.value);
                break;
            case LayerKind::conv:
                h = kernels::add_bias(kernels::conv2d(h, l.weight.value, 1), l.bias.value);
                break;
        }
    }
    return h;
}

FeatureOutput forward_with_features(const Model& m, const Tensor& x) {
    Tensor logits = forward(m, x);
    return {logits, logits};
}

std::vector<int> predict(const Model& m, const Tensor& x) {
    Tensor logits = forward(m, x);
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    std::vector<int> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < cols; ++j)
            if (logits[i * cols + j] > logits[i * cols + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const Model& m, const Dataset& ds, std::size_t batch_size) {
    if (ds.size() == 0) throw ContractError("accuracy on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        const std::size_t end = std::min(ds.size(), start + batch_size);
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        const auto preds = predict(m, batch_inputs(ds, idx));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (preds[k] == ds.labels[idx[k]]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace resq
