// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "model.hpp"

namespace sg {

struct TrainConfig {
    double lr = 5e-5;
    int warmup_steps = 1000;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int batch_size = 16;
    double grad_clip_norm = 1.0;
    int total_steps = 20000;
    uint64_t seed = 42;
    int log_every = 50;

    void validate() const {
        if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("train config: betas must lie in (0, 1)");
        if (grad_clip_norm <= 0.0)
            throw std::invalid_argument("train config: grad_clip_norm must be > 0");
        if (batch_size < 1 || total_steps < 0)
            throw std::invalid_argument("train config: bad batch size / step count");
        if (warmup_steps < 0 || warmup_steps > total_steps)
            throw std::invalid_argument("train config: warmup must lie in [0, total_steps]");
    }
};

// Linear warmup to the base rate, then linear decay to zero at total_steps.
double lr_at(int step, const TrainConfig &cfg);

// Scales all gradients so the global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
double clip_gradients(std::span<std::vector<float> *> grads, double max_norm);

// Strictly increasing step list containing 0.
struct CheckpointSchedule {
    std::vector<int> steps;

    void validate(int total_steps) const;
    bool contains(int step) const;

    // The schedule used across the study: dense early steps, then every 500
    // to 10000 and every 1000 after, truncated to total_steps.
    static CheckpointSchedule standard(int total_steps);
};

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

using MetricsSink = std::function<void(const StepMetrics &)>;
using CheckpointSink = std::function<void(const CheckpointRecord &)>;

// Draws batches by walking a seeded shuffle of chunk order, reshuffling per
// epoch. The sequence of batches is a pure function of (seed, chunk count,
// batch size), so resuming replays the walk rather than persisting it.
class BatchSampler {
public:
    BatchSampler(uint64_t seed, size_t n_chunks, int batch_size);
    std::vector<size_t> next_batch();
    void skip_steps(uint64_t steps);
    Rng::State rng_state() const { return rng_.save_state(); }

private:
    void reshuffle();
    Rng rng_;
    std::vector<size_t> order_;
    size_t pos_ = 0;
    int batch_size_;
};

// Causal-LM training: per step samples a batch, computes mean masked
// cross-entropy on next-token targets, clips the global gradient norm and
// applies a decoupled-weight-decay Adam update on the warmup/decay schedule.
// Checkpoints are emitted exactly at scheduled steps. Throws on NaN loss,
// naming the step.
void train(Model<float> &model, std::span<const CorpusChunk> chunks, const TrainConfig &cfg,
           const CheckpointSchedule &schedule, int pad_id, uint64_t fingerprint,
           const CheckpointSink &on_checkpoint, const MetricsSink &on_metrics = nullptr,
           const CheckpointRecord *resume_from = nullptr);

}  // namespace sg
