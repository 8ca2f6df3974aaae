// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

namespace sg {

struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Full training state at one step: parameters, Adam moments, sampler RNG
// state and the config fingerprint that guards against mixing runs.
struct CheckpointRecord {
    uint64_t fingerprint = 0;
    uint64_t step = 0;
    ModelConfig config;
    std::vector<std::string> names;        // parameter block names, layout order
    std::vector<std::pair<int, int>> shapes;
    std::vector<std::vector<float>> weights;
    std::vector<std::vector<float>> moment1;
    std::vector<std::vector<float>> moment2;
    Rng::State rng_state{};
};

// FNV-1a over a canonical string; stable across platforms.
uint64_t fnv1a64(const std::string &s);

CheckpointRecord make_checkpoint(const Model<float> &model, uint64_t fingerprint, uint64_t step,
                                 const std::vector<std::vector<float>> &m1,
                                 const std::vector<std::vector<float>> &m2,
                                 const Rng::State &rng_state);

// Rebuilds a model (any scalar type) from a record.
template <typename T>
Model<T> model_from_checkpoint(const CheckpointRecord &ckpt) {
    Model<T> m = Model<T>::zeros(ckpt.config);
    auto &ps = m.params();
    if (ps.size() != ckpt.weights.size()) {
        throw IntegrityError("checkpoint: parameter count mismatch");
    }
    for (size_t i = 0; i < ps.size(); ++i) {
        if (ps[i].name != ckpt.names[i] || ps[i].w.size() != ckpt.weights[i].size()) {
            throw IntegrityError("checkpoint: parameter block mismatch at " + ckpt.names[i]);
        }
        for (size_t j = 0; j < ps[i].w.size(); ++j) {
            ps[i].w[j] = static_cast<T>(ckpt.weights[i][j]);
        }
    }
    return m;
}

// Binary format: header (magic, version, fingerprint, step, model config),
// then named parameter blocks as little-endian f32 arrays with shape
// manifests, then the two moment sets and the RNG state.
void save_checkpoint(const std::string &path, const CheckpointRecord &ckpt);
CheckpointRecord load_checkpoint(const std::string &path);

// Header-only peek used for schedule scans.
struct CheckpointInfo {
    uint64_t fingerprint = 0;
    uint64_t step = 0;
};
CheckpointInfo peek_checkpoint(const std::string &path);

}  // namespace sg
