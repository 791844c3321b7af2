// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Staged learning-rate program, MoE coefficient decay, AdamW with global-norm
// clipping, and gradient accumulation normalized over the whole global batch.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "deskmoe/errors.hpp"
#include "deskmoe/model_config.hpp"
#include "deskmoe/ops.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

struct Stage {
    std::string name;
    std::size_t total_steps = 1;
    std::size_t warmup_steps = 0;
    double lr_max = 3e-4;
    double lr_min = 3e-5;
    double alpha_max = 0.01;
    double beta_max = 0.001;
    double rope_base = 10000.0;
    std::size_t global_batch = 1;
    std::size_t micro_batch = 1;
    std::size_t grad_accum_steps = 1;

    void validate() const {
        if (total_steps < 1) throw ConfigError("stage " + name + ": total_steps must be >= 1");
        if (warmup_steps > total_steps) throw ConfigError("stage " + name + ": warmup_steps exceeds total_steps");
        if (lr_min > lr_max || lr_min < 0.0) throw ConfigError("stage " + name + ": need 0 <= lr_min <= lr_max");
        if (grad_accum_steps < 1) throw ConfigError("stage " + name + ": grad_accum_steps must be >= 1");
        if (alpha_max < 0.0 || beta_max < 0.0) throw ConfigError("stage " + name + ": negative MoE coefficient");
        if (!(rope_base > 0.0)) throw ConfigError("stage " + name + ": rope_base must be positive");
    }
};

struct StagePlan {
    std::vector<Stage> stages;

    void validate() const {
        if (stages.empty()) throw ConfigError("stage plan is empty");
        for (const auto& s : stages) s.validate();
    }

    std::size_t total_steps() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.total_steps;
        return n;
    }

    // Steps of all stages before `stage`.
    std::size_t offset(std::size_t stage) const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < stage; ++i) n += stages.at(i).total_steps;
        return n;
    }

    // The three pretraining stages of the 30B recipe. Stage lengths for the
    // first two follow from token budgets (8T and 4T) at 4096-token sequences.
    static StagePlan reference_pretraining() {
        StagePlan plan;
        Stage s1;
        s1.name = "pretrain";
        s1.total_steps = 339084;  // 8e12 / (5760 * 4096)
        s1.warmup_steps = 3000;
        s1.lr_max = 3.0e-4;
        s1.lr_min = 3.0e-5;
        s1.global_batch = 5760;
        Stage s2;
        s2.name = "anneal";
        s2.total_steps = 113028;  // 4e12 / (8640 * 4096)
        s2.warmup_steps = 2000;
        s2.lr_max = 1.5e-4;
        s2.lr_min = 3.0e-5;
        s2.global_batch = 8640;
        Stage s3;
        s3.name = "long_context";
        s3.total_steps = 2200;
        s3.warmup_steps = 0;
        s3.lr_max = 3.0e-5;
        s3.lr_min = 3.0e-5;
        s3.rope_base = 1.0e6;
        s3.global_batch = 2160;
        plan.stages = {s1, s2, s3};
        return plan;
    }

    // Supervised fine-tuning stage: warmup ratio 0.02, cosine to zero,
    // micro-batch 1 with 4 accumulation steps.
    static Stage reference_sft(std::string name, std::size_t total_steps) {
        Stage s;
        s.name = std::move(name);
        s.total_steps = total_steps;
        s.warmup_steps = static_cast<std::size_t>(std::llround(0.02 * static_cast<double>(total_steps)));
        s.lr_max = 3.0e-5;
        s.lr_min = 0.0;
        s.alpha_max = 0.0;
        s.beta_max = 0.0;
        s.micro_batch = 1;
        s.grad_accum_steps = 4;
        s.global_batch = 4;
        return s;
    }
};

// Linear warmup from 0 to lr_max over warmup_steps, then cosine from lr_max at
// step == warmup_steps down to lr_min at the final step.
inline double lr_at_step(const Stage& s, std::size_t step) {
    if (step >= s.total_steps) {
        throw ScheduleError(detail::cat("step ", step, " outside stage ", s.name, " of ", s.total_steps, " steps"));
    }
    if (step < s.warmup_steps) return s.lr_max * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const std::size_t span = s.total_steps - 1 - s.warmup_steps;
    if (span == 0) return s.lr_max;
    const double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
    return s.lr_min + (s.lr_max - s.lr_min) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

inline double lr_at_step(const StagePlan& plan, std::size_t stage, std::size_t step) {
    if (stage >= plan.stages.size()) throw ScheduleError(detail::cat("no stage ", stage));
    return lr_at_step(plan.stages[stage], step);
}

struct MoeCoefficients {
    double alpha = 0.0;
    double beta = 0.0;
};

// Linear decay to zero spanning the whole plan: the stage's maxima scaled by
// 1 - g / (G - 1), g the global step and G the plan length.
inline MoeCoefficients moe_coeff_at_step(const StagePlan& plan, std::size_t stage, std::size_t step) {
    if (stage >= plan.stages.size()) throw ScheduleError(detail::cat("no stage ", stage));
    const auto& s = plan.stages[stage];
    if (step >= s.total_steps) throw ScheduleError(detail::cat("step ", step, " outside stage ", s.name));
    const std::size_t total = plan.total_steps();
    const double g = static_cast<double>(plan.offset(stage) + step);
    const double f = total > 1 ? 1.0 - g / static_cast<double>(total - 1) : 1.0;
    return {s.alpha_max * f, s.beta_max * f};
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

struct StepReport {
    double grad_norm = 0.0;     // before clipping
    double clipped_norm = 0.0;  // after clipping
    double loss = 0.0;          // filled by accumulated_step
    double normalizer = 0.0;    // global token or sample count
};

template <typename T>
struct Moments {
    std::vector<T> m;
    std::vector<T> v;
};

// Only parameters with requires_grad are touched; frozen ones keep their
// exact bits and get no optimizer state.
template <typename T>
class AdamW {
   public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps() const { return step_; }
    const std::map<std::string, Moments<T>>& moments() const { return state_; }
    void reset() {
        state_.clear();
        step_ = 0;
    }

    StepReport step(ParamSet<T>& params, double lr) {
        if (lr < 0.0) throw ConfigError("negative learning rate");
        double sq = 0.0;
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (auto g : p.grad()) {
                if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + name);
                sq += static_cast<double>(g) * static_cast<double>(g);
            }
        }
        StepReport report;
        report.grad_norm = std::sqrt(sq);
        double coef = 1.0;
        if (cfg_.clip_norm > 0.0 && report.grad_norm > cfg_.clip_norm) coef = cfg_.clip_norm / report.grad_norm;
        report.clipped_norm = report.grad_norm * coef;

        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            auto& st = state_[name];
            if (st.m.empty()) {
                st.m.assign(p.numel(), T(0));
                st.v.assign(p.numel(), T(0));
            }
            auto w = p.data();
            const bool has = p.has_grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = has ? static_cast<double>(p.grad()[i]) * coef : 0.0;
                const double m = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
                st.m[i] = static_cast<T>(m);
                st.v[i] = static_cast<T>(v);
                if (lr == 0.0) continue;
                const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (update + cfg_.weight_decay * w[i]));
            }
        }
        return report;
    }

   private:
    AdamWConfig cfg_;
    std::size_t step_ = 0;
    std::map<std::string, Moments<T>> state_;
};

template <typename T>
void zero_grads(ParamSet<T>& params) {
    for (auto& [name, p] : params)
        if (p.has_grad()) p.zero_grad();
}

template <typename T>
struct MicroLoss {
    Tensor<T> loss_sum;     // summed (not averaged) loss of the micro-batch
    double tokens = 0;      // loss-bearing tokens
    double samples = 0;     // sequences
};

enum class Normalization {
    global_tokens,       // divide the accumulated gradient by all loss-bearing tokens in the global batch
    global_samples,      // divide by the number of samples in the global batch
    per_micro_mean,      // mean of per-micro-batch means (the uncorrected baseline)
};

// Runs each micro-batch closure under its own tape, backpropagates its summed
// loss, and normalizes once by the global count, which makes the update equal
// to one step on the concatenated batch.
template <typename T>
StepReport accumulated_step(const std::vector<std::function<MicroLoss<T>()>>& micro, ParamSet<T>& params,
                            AdamW<T>& opt, double lr, Normalization norm = Normalization::global_tokens) {
    if (micro.empty()) throw EmptyBatchError("accumulated_step: no micro-batches");
    zero_grads(params);
    double tokens = 0, samples = 0, loss_total = 0, mean_of_means = 0;
    for (const auto& fn : micro) {
        Tape tape;
        TapeScope scope(tape);
        MicroLoss<T> ml = fn();
        tokens += ml.tokens;
        samples += ml.samples;
        loss_total += static_cast<double>(ml.loss_sum.item());
        if (norm == Normalization::per_micro_mean) {
            if (ml.tokens <= 0) throw EmptyBatchError("accumulated_step: micro-batch without loss tokens");
            const double w = 1.0 / (ml.tokens * static_cast<double>(micro.size()));
            mean_of_means += static_cast<double>(ml.loss_sum.item()) * w;
            tape.backward(scale(ml.loss_sum, static_cast<T>(w)));
        } else {
            tape.backward(ml.loss_sum);
        }
    }
    StepReport report;
    if (norm == Normalization::per_micro_mean) {
        report.normalizer = static_cast<double>(micro.size());
        report.loss = mean_of_means;
    } else {
        const double denom = norm == Normalization::global_tokens ? tokens : samples;
        if (denom <= 0) throw EmptyBatchError("accumulated_step: global batch has zero count");
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (auto& g : p.grad()) g = static_cast<T>(static_cast<double>(g) / denom);
        }
        report.normalizer = denom;
        report.loss = loss_total / denom;
    }
    auto r = opt.step(params, lr);
    r.loss = report.loss;
    r.normalizer = report.normalizer;
    return r;
}

}  // namespace deskmoe
