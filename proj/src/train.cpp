// SPDX-License-Identifier: Apache-2.0
#include "train.hpp"

#include <algorithm>
#include <cmath>

namespace sg {

double lr_at(int step, const TrainConfig &cfg) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double denom = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    if (denom <= 0.0) return step >= cfg.total_steps ? 0.0 : cfg.lr;
    return cfg.lr * std::max(0.0, static_cast<double>(cfg.total_steps - step) / denom);
}

double clip_gradients(std::span<std::vector<float> *> grads, double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip_gradients: max_norm must be > 0");
    double sq = 0.0;
    for (const auto *g : grads) {
        for (float v : *g) sq += static_cast<double>(v) * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const float scale = static_cast<float>(max_norm / norm);
        for (auto *g : grads) {
            for (float &v : *g) v *= scale;
        }
    }
    return norm;
}

void CheckpointSchedule::validate(int total_steps) const {
    if (steps.empty() || steps.front() != 0)
        throw std::invalid_argument("checkpoint schedule must start at step 0");
    for (size_t i = 1; i < steps.size(); ++i) {
        if (steps[i] <= steps[i - 1])
            throw std::invalid_argument("checkpoint schedule must be strictly increasing");
    }
    if (steps.back() > total_steps)
        throw std::invalid_argument("checkpoint schedule exceeds total_steps");
}

bool CheckpointSchedule::contains(int step) const {
    return std::binary_search(steps.begin(), steps.end(), step);
}

CheckpointSchedule CheckpointSchedule::standard(int total_steps) {
    std::vector<int> pts = {0, 150, 300};
    for (int s = 500; s <= 10000; s += 500) pts.push_back(s);
    for (int s = 11000; s <= 20000; s += 1000) pts.push_back(s);
    CheckpointSchedule sched;
    for (int s : pts) {
        if (s <= total_steps) sched.steps.push_back(s);
    }
    if (sched.steps.empty() || sched.steps.back() != total_steps) {
        sched.steps.push_back(total_steps);
    }
    return sched;
}

BatchSampler::BatchSampler(uint64_t seed, size_t n_chunks, int batch_size)
    : rng_(seed), batch_size_(batch_size) {
    if (n_chunks == 0) throw std::invalid_argument("batch sampler: no chunks");
    order_.resize(n_chunks);
    for (size_t i = 0; i < n_chunks; ++i) order_[i] = i;
    reshuffle();
}

void BatchSampler::reshuffle() {
    rng_.shuffle(order_);
    pos_ = 0;
}

std::vector<size_t> BatchSampler::next_batch() {
    std::vector<size_t> batch;
    batch.reserve(static_cast<size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        if (pos_ >= order_.size()) reshuffle();
        batch.push_back(order_[pos_++]);
    }
    return batch;
}

void BatchSampler::skip_steps(uint64_t steps) {
    for (uint64_t s = 0; s < steps; ++s) {
        for (int i = 0; i < batch_size_; ++i) {
            if (pos_ >= order_.size()) reshuffle();
            ++pos_;
        }
    }
}

void train(Model<float> &model, std::span<const CorpusChunk> chunks, const TrainConfig &cfg,
           const CheckpointSchedule &schedule, int pad_id, uint64_t fingerprint,
           const CheckpointSink &on_checkpoint, const MetricsSink &on_metrics,
           const CheckpointRecord *resume_from) {
    cfg.validate();
    schedule.validate(cfg.total_steps);
    if (chunks.empty()) throw std::invalid_argument("train: no chunks");

    auto &params = model.params();
    std::vector<std::vector<float>> m1(params.size()), m2(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m1[i].assign(params[i].w.size(), 0.0f);
        m2[i].assign(params[i].w.size(), 0.0f);
    }

    BatchSampler sampler(cfg.seed, chunks.size(), cfg.batch_size);
    int start_step = 0;
    if (resume_from) {
        if (resume_from->fingerprint != fingerprint)
            throw IntegrityError("train: resume checkpoint has a different config fingerprint");
        start_step = static_cast<int>(resume_from->step);
        m1 = resume_from->moment1;
        m2 = resume_from->moment2;
        if (m1.size() != params.size())
            throw IntegrityError("train: resume checkpoint lacks optimizer state");
        sampler.skip_steps(resume_from->step);
    }

    auto emit_checkpoint = [&](int step) {
        on_checkpoint(make_checkpoint(model, fingerprint, static_cast<uint64_t>(step), m1, m2,
                                      sampler.rng_state()));
    };
    if (!resume_from && schedule.contains(0)) {
        emit_checkpoint(0);
    }

    std::vector<std::vector<int>> batch_tokens(static_cast<size_t>(cfg.batch_size));
    for (int step = start_step + 1; step <= cfg.total_steps; ++step) {
        const std::vector<size_t> batch = sampler.next_batch();
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch_tokens[static_cast<size_t>(b)] = chunks[batch[static_cast<size_t>(b)]].tokens;
        }

        Graph<float> g;
        TapeRefs refs = model.build_tape(g, batch_tokens, pad_id, /*with_loss=*/true);
        const double loss = static_cast<double>(g.value(refs.loss)[0]);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
        }
        g.backward(refs.loss);

        // Fixed parameter order gives a deterministic global norm and update.
        std::vector<std::vector<float>> grads(params.size());
        std::vector<std::vector<float> *> grad_ptrs(params.size());
        for (const auto &[pi, leaf] : refs.param_leaves) {
            auto gspan = g.has_grad(leaf) ? g.grad(leaf) : std::span<const float>{};
            grads[static_cast<size_t>(pi)].assign(gspan.begin(), gspan.end());
            if (grads[static_cast<size_t>(pi)].empty()) {
                grads[static_cast<size_t>(pi)].assign(params[static_cast<size_t>(pi)].w.size(),
                                                      0.0f);
            }
            grad_ptrs[static_cast<size_t>(pi)] = &grads[static_cast<size_t>(pi)];
        }
        const double grad_norm = clip_gradients(grad_ptrs, cfg.grad_clip_norm);

        const double lr = lr_at(step, cfg);
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        for (size_t i = 0; i < params.size(); ++i) {
            const bool decay = params[i].kind == ParamKind::kWeight && cfg.weight_decay != 0.0;
            float *wp = params[i].w.data();
            float *m1p = m1[i].data();
            float *m2p = m2[i].data();
            const float *gp = grads[i].data();
            const size_t n = params[i].w.size();
            for (size_t j = 0; j < n; ++j) {
                const double gv = gp[j];
                const double nm1 = cfg.beta1 * m1p[j] + (1.0 - cfg.beta1) * gv;
                const double nm2 = cfg.beta2 * m2p[j] + (1.0 - cfg.beta2) * gv * gv;
                m1p[j] = static_cast<float>(nm1);
                m2p[j] = static_cast<float>(nm2);
                double update = (nm1 / bc1) / (std::sqrt(nm2 / bc2) + cfg.eps);
                if (decay) update += cfg.weight_decay * wp[j];
                wp[j] = static_cast<float>(wp[j] - lr * update);
            }
        }

        if (on_metrics && (step % cfg.log_every == 0 || step == cfg.total_steps || step == 1)) {
            on_metrics(StepMetrics{step, loss, lr, grad_norm});
        }
        if (schedule.contains(step)) {
            emit_checkpoint(step);
        }
    }
}

}  // namespace sg
