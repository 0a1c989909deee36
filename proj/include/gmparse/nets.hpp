#pragma once

#include "gmparse/adam.hpp"
#include "gmparse/checkpoint.hpp"
#include "gmparse/ops.hpp"

// Layer building blocks. Every layer owns its Parameters, is constructed from
// (name, dims, seed) with Kaiming-uniform fan-in weights and zero biases, and
// registers itself on a tape per forward call. Seeds are derived per layer so
// widening one network elsewhere never shifts another layer's draw.

namespace gmparse::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Activation { identity, relu, leaky_relu, tanh, sigmoid };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "leaky_relu") return Activation::leaky_relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "sigmoid") return Activation::sigmoid;
    throw ValueError("unknown activation: " + s);
}

template <class T>
Var<T> apply_activation(Var<T> x, Activation a) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return ad::relu(x);
        case Activation::leaky_relu: return ad::leaky_relu(x, T(0.2));
        case Activation::tanh: return ad::tanh_op(x);
        case Activation::sigmoid: return ad::sigmoid(x);
    }
    throw ValueError("unknown activation");
}

template <class T>
TensorND<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
    const T bound = T(std::sqrt(6.0 / double(fan_in)));
    return TensorND<T>::uniform(shape, -bound, bound, seed);
}

template <class T>
struct Conv2d {
    Parameter<T> w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(const std::string& name, int ci, int co, int k, int stride_, int pad_, std::uint64_t seed)
        : w(name + ".w", kaiming_uniform<T>(Shape{co, ci, k, k}, std::size_t(ci) * k * k, seed)),
          b(name + ".b", TensorND<T>::zeros(Shape{co})),
          stride(stride_),
          pad(pad_) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::conv2d(x, t.param(w), t.param(b), stride, pad); }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&w); out.push_back(&b); }
    void tensors(NamedTensors<T>& out) { out.push_back({w.name, &w.value}); out.push_back({b.name, &b.value}); }
};

template <class T>
struct ConvTranspose2d {
    Parameter<T> w, b;
    int stride = 1, pad = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(const std::string& name, int ci, int co, int k, int stride_, int pad_, std::uint64_t seed)
        : w(name + ".w", kaiming_uniform<T>(Shape{ci, co, k, k}, std::size_t(ci) * k * k, seed)),
          b(name + ".b", TensorND<T>::zeros(Shape{co})),
          stride(stride_),
          pad(pad_) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::conv_transpose2d(x, t.param(w), t.param(b), stride, pad); }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&w); out.push_back(&b); }
    void tensors(NamedTensors<T>& out) { out.push_back({w.name, &w.value}); out.push_back({b.name, &b.value}); }
};

template <class T>
struct Linear {
    Parameter<T> w, b;

    Linear() = default;
    Linear(const std::string& name, int fin, int fout, std::uint64_t seed)
        : w(name + ".w", kaiming_uniform<T>(Shape{fout, fin}, std::size_t(fin), seed)),
          b(name + ".b", TensorND<T>::zeros(Shape{fout})) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::linear(x, t.param(w), t.param(b)); }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&w); out.push_back(&b); }
    void tensors(NamedTensors<T>& out) { out.push_back({w.name, &w.value}); out.push_back({b.name, &b.value}); }
};

template <class T>
struct BatchNorm2d {
    Parameter<T> gamma, beta;
    TensorND<T> running_mean, running_var;
    T momentum = T(0.1), eps = T(1e-5);

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, int c)
        : gamma(name + ".gamma", TensorND<T>::full(Shape{c}, T(1))),
          beta(name + ".beta", TensorND<T>::zeros(Shape{c})),
          running_mean(TensorND<T>::zeros(Shape{c})),
          running_var(TensorND<T>::full(Shape{c}, T(1))) {}

    // update_running=false keeps training-mode statistics pure functions of
    // the batch (finite-difference checking relies on this).
    Var<T> operator()(Tape<T>& t, Var<T> x, bool training, bool update_running = true) {
        return ad::batch_norm(x, t.param(gamma), t.param(beta), update_running ? &running_mean : nullptr,
                              update_running ? &running_var : nullptr, training, momentum, eps);
    }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&gamma); out.push_back(&beta); }
    void tensors(NamedTensors<T>& out) {
        out.push_back({gamma.name, &gamma.value});
        out.push_back({beta.name, &beta.value});
        out.push_back({gamma.name.substr(0, gamma.name.size() - 6) + ".running_mean", &running_mean});
        out.push_back({gamma.name.substr(0, gamma.name.size() - 6) + ".running_var", &running_var});
    }
};

template <class T>
struct InstanceNorm2d {
    Parameter<T> gamma, beta;
    T eps = T(1e-5);

    InstanceNorm2d() = default;
    InstanceNorm2d(const std::string& name, int c)
        : gamma(name + ".gamma", TensorND<T>::full(Shape{c}, T(1))), beta(name + ".beta", TensorND<T>::zeros(Shape{c})) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::instance_norm(x, t.param(gamma), t.param(beta), eps); }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&gamma); out.push_back(&beta); }
    void tensors(NamedTensors<T>& out) { out.push_back({gamma.name, &gamma.value}); out.push_back({beta.name, &beta.value}); }
};

template <class T>
struct LayerNorm2d {
    Parameter<T> gamma, beta;
    T eps = T(1e-5);

    LayerNorm2d() = default;
    LayerNorm2d(const std::string& name, int c)
        : gamma(name + ".gamma", TensorND<T>::full(Shape{c}, T(1))), beta(name + ".beta", TensorND<T>::zeros(Shape{c})) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::layer_norm(x, t.param(gamma), t.param(beta), eps); }
    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&gamma); out.push_back(&beta); }
    void tensors(NamedTensors<T>& out) { out.push_back({gamma.name, &gamma.value}); out.push_back({beta.name, &beta.value}); }
};

enum class NormKind { none, batch, instance, layer };

inline const char* to_string(NormKind k) {
    switch (k) {
        case NormKind::none: return "none";
        case NormKind::batch: return "batch";
        case NormKind::instance: return "instance";
        case NormKind::layer: return "layer";
    }
    return "?";
}

inline NormKind norm_from_string(const std::string& s) {
    if (s == "none") return NormKind::none;
    if (s == "batch") return NormKind::batch;
    if (s == "instance") return NormKind::instance;
    if (s == "layer") return NormKind::layer;
    throw ValueError("unknown norm kind: " + s);
}

// One of the three normalizations (or none), behind a single interface.
template <class T>
struct NormLayer {
    NormKind kind = NormKind::none;
    BatchNorm2d<T> bn;
    InstanceNorm2d<T> in;
    LayerNorm2d<T> ln;

    NormLayer() = default;
    NormLayer(const std::string& name, int c, NormKind k) : kind(k) {
        switch (k) {
            case NormKind::none: break;
            case NormKind::batch: bn = BatchNorm2d<T>(name, c); break;
            case NormKind::instance: in = InstanceNorm2d<T>(name, c); break;
            case NormKind::layer: ln = LayerNorm2d<T>(name, c); break;
        }
    }

    Var<T> operator()(Tape<T>& t, Var<T> x, bool training, bool update_running = true) {
        switch (kind) {
            case NormKind::none: return x;
            case NormKind::batch: return bn(t, x, training, update_running);
            case NormKind::instance: return in(t, x);
            case NormKind::layer: return ln(t, x);
        }
        throw ValueError("unknown norm kind");
    }
    void collect(std::vector<Parameter<T>*>& out) {
        switch (kind) {
            case NormKind::none: break;
            case NormKind::batch: bn.collect(out); break;
            case NormKind::instance: in.collect(out); break;
            case NormKind::layer: ln.collect(out); break;
        }
    }
    void tensors(NamedTensors<T>& out) {
        switch (kind) {
            case NormKind::none: break;
            case NormKind::batch: bn.tensors(out); break;
            case NormKind::instance: in.tensors(out); break;
            case NormKind::layer: ln.tensors(out); break;
        }
    }
};

// conv(3x3, pad 1) -> maxpool(2) while the map is at least 2x2 -> ReLU,
// repeated; then flattened. The shared trunk shape of every classifier here.
template <class T>
struct ConvStack {
    std::vector<Conv2d<T>> convs;
    std::vector<bool> pooled;
    int out_h = 0, out_w = 0, out_c = 0;

    ConvStack() = default;
    ConvStack(const std::string& name, int in_ch, int in_h, int in_w, const std::vector<int>& channels,
              std::uint64_t master_seed) {
        int c = in_ch, h = in_h, w = in_w;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            const std::string lname = name + ".conv" + std::to_string(i);
            convs.emplace_back(lname, c, channels[i], 3, 1, 1, derive_seed(master_seed, lname));
            c = channels[i];
            const bool pool = h >= 2 && w >= 2;
            pooled.push_back(pool);
            if (pool) {
                h = (h - 2) / 2 + 1;
                w = (w - 2) / 2 + 1;
            }
        }
        out_h = h;
        out_w = w;
        out_c = c;
    }

    int flat_dim() const { return out_c * out_h * out_w; }

    // Returns the flattened [N, flat_dim] features.
    Var<T> operator()(Tape<T>& t, Var<T> x) {
        for (std::size_t i = 0; i < convs.size(); ++i) {
            x = convs[i](t, x);
            if (pooled[i]) x = ad::maxpool2d(x, 2, 2);
            x = ad::relu(x);
        }
        return ad::reshape(x, Shape{x.shape()[0], flat_dim()});
    }
    void collect(std::vector<Parameter<T>*>& out) {
        for (auto& c : convs) c.collect(out);
    }
    void tensors(NamedTensors<T>& out) {
        for (auto& c : convs) c.tensors(out);
    }
};

// Fully connected stack with ReLU between layers and a linear last layer.
template <class T>
struct Mlp {
    std::vector<Linear<T>> layers;

    Mlp() = default;
    Mlp(const std::string& name, const std::vector<int>& dims, std::uint64_t master_seed) {
        if (dims.size() < 2) throw ValueError("mlp: need at least input and output dims");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            const std::string lname = name + ".fc" + std::to_string(i);
            layers.emplace_back(lname, dims[i], dims[i + 1], derive_seed(master_seed, lname));
        }
    }

    Var<T> operator()(Tape<T>& t, Var<T> x) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i](t, x);
            if (i + 1 < layers.size()) x = ad::relu(x);
        }
        return x;
    }
    void collect(std::vector<Parameter<T>*>& out) {
        for (auto& l : layers) l.collect(out);
    }
    void tensors(NamedTensors<T>& out) {
        for (auto& l : layers) l.tensors(out);
    }
};

}  // namespace gmparse::nn
