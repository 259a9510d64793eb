#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridpatch/graph.hpp"

namespace gridpatch {

/// Named, ordered collection of trainable tensors.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor value) {
        if (index_.count(name)) throw std::invalid_argument("parameter set: duplicate name " + name);
        index_.emplace(name, tensors_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(value));
        return tensors_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t position(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("parameter set: no tensor named " + name);
        return it->second;
    }
    Tensor& operator[](const std::string& name) { return tensors_[position(name)]; }
    const Tensor& operator[](const std::string& name) const { return tensors_[position(name)]; }
    Tensor& at(std::size_t i) { return tensors_.at(i); }
    const Tensor& at(std::size_t i) const { return tensors_.at(i); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    std::size_t size() const noexcept { return tensors_.size(); }
    std::vector<Tensor>& tensors() noexcept { return tensors_; }
    const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
        return a.names_ == b.names_ && a.tensors_ == b.tensors_;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

/// Leaf ids of a parameter set bound into one graph, in set order.
struct BoundParams {
    std::vector<NodeId> ids;
    NodeId operator[](std::size_t i) const { return ids[i]; }
};

inline BoundParams bind(Graph& g, const ParameterSet& params, bool trainable) {
    BoundParams b;
    b.ids.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        b.ids.push_back(trainable ? g.parameter(params.at(i), params.name(i)) : g.constant(params.at(i), params.name(i)));
    return b;
}

inline std::vector<Tensor> collect(const Gradients& grads, const BoundParams& bound) {
    std::vector<Tensor> out;
    out.reserve(bound.ids.size());
    for (auto id : bound.ids) out.push_back(grads.at(id));
    return out;
}

/// Plain gradient descent: p <- p - lr * g.
inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double learning_rate) {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
    if (params.size() != grads.size()) throw ShapeError("sgd_step: parameter and gradient counts differ");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].shape() != grads[i].shape())
            throw ShapeError("sgd_step: parameter " + to_string(params[i].shape()) + " vs gradient " +
                             to_string(grads[i].shape()));
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= learning_rate * grads[i][j];
}

/// Adam with bias correction. Moment buffers are created lazily on the first step.
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size()) throw ShapeError("adam: parameter and gradient counts differ");
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.shape());
                v_.emplace_back(p.shape());
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].shape() != grads[i].shape()) throw ShapeError("adam: shape mismatch");
            for (std::size_t j = 0; j < params[i].size(); ++j) {
                const double g = grads[i][j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                params[i][j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
            }
        }
    }

    double learning_rate() const noexcept { return lr_; }
    void set_learning_rate(double lr) noexcept { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// Glorot-uniform initialized matrix.
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// JSON document:
//   { "format": "GRIDPATCH-CKPT-1",
//     "meta":   { ...model-specific settings... },
//     "tensors": [ { "name": str, "shape": [int...], "values": [double...] }, ... ] }
// Doubles are written with round-trip precision.

inline constexpr const char* kCheckpointFormat = "GRIDPATCH-CKPT-1";

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    ParameterSet params;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json doc;
    doc["format"] = kCheckpointFormat;
    doc["meta"] = ckpt.meta;
    auto& arr = doc["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        const auto& t = ckpt.params.at(i);
        arr.push_back({{"name", ckpt.params.name(i)}, {"shape", t.shape()}, {"values", t.storage()}});
    }
    return doc;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || doc.value("format", std::string{}) != kCheckpointFormat)
        throw std::runtime_error(std::string("checkpoint: missing or unsupported format header (expected ") +
                                 kCheckpointFormat + ")");
    Checkpoint ckpt;
    ckpt.meta = doc.value("meta", nlohmann::json::object());
    for (const auto& entry : doc.at("tensors")) {
        ckpt.params.add(entry.at("name").get<std::string>(),
                        Tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>()));
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path);
    if (!out) throw std::ios_base::failure("checkpoint: cannot open " + path + " for writing");
    out << checkpoint_to_json(ckpt).dump() << '\n';
    if (!out) throw std::ios_base::failure("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::ios_base::failure("checkpoint: cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: " + path + " is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(doc);
}

}  // namespace gridpatch
