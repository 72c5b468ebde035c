#pragma once

#include <cmath>
#include <cstdint>

#include "caplab/errors.hpp"
#include "caplab/matrix.hpp"

namespace caplab {
namespace numkit {

/// A trainable tensor: value, gradient accumulator and Adam moments, all of
/// one shape. Layers accumulate into grad; adam_step consumes and clears it.
struct ParamTensor {
    DenseMatrix value;
    DenseMatrix grad;
    DenseMatrix adam_m;
    DenseMatrix adam_v;
    std::uint64_t step_count{0};
    bool decay{true}; // false for biases and the temperature scalar

    ParamTensor() = default;
    explicit ParamTensor(DenseMatrix initial)
        : value(std::move(initial)),
          grad(value.rows, value.cols),
          adam_m(value.rows, value.cols),
          adam_v(value.rows, value.cols) {}

    std::size_t size() const { return value.size(); }
    void zero_grad() { grad.fill(0.0); }
};

struct AdamConfig {
    double beta1{0.9};
    double beta2{0.999};
    double epsilon{1e-8};
};

/// One bias-corrected Adam step with decoupled weight decay:
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Increments step_count and zeroes the gradient.
inline void adam_step(ParamTensor& p, double lr, double weight_decay,
                      const AdamConfig& cfg = {}) {
    if (lr < 0.0) throw ParameterError("adam_step: negative learning rate");
    if (!all_finite(p.grad))
        throw DivergedError("adam_step: non-finite gradient entries");

    p.step_count += 1;
    const double t = static_cast<double>(p.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);

    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.data[i];
        double& m = p.adam_m.data[i];
        double& v = p.adam_v.data[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        const double wd = p.decay ? weight_decay : 0.0;
        p.value.data[i] -=
            lr * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + wd * p.value.data[i]);
    }
    p.zero_grad();
}

/// Linear warmup to base_lr over warmup_epochs, then cosine decay to zero at
/// the last step of training.
struct ScheduleConfig {
    double base_lr{0.0};
    std::uint64_t warmup_epochs{0};
    std::uint64_t total_epochs{0};
    std::uint64_t steps_per_epoch{0};

    std::uint64_t total_steps() const { return total_epochs * steps_per_epoch; }
    std::uint64_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }

    void validate() const {
        if (base_lr < 0.0) throw ParameterError("ScheduleConfig: base_lr must be >= 0");
        if (warmup_epochs == 0 || warmup_epochs >= total_epochs)
            throw ParameterError("ScheduleConfig: need 0 < warmup_epochs < total_epochs");
        if (steps_per_epoch == 0)
            throw ParameterError("ScheduleConfig: steps_per_epoch must be >= 1");
    }
};

inline double lr_at(const ScheduleConfig& sched, std::uint64_t global_step) {
    sched.validate();
    const std::uint64_t total = sched.total_steps();
    if (global_step >= total)
        throw ScheduleError("lr_at: step " + std::to_string(global_step) +
                            " past schedule end " + std::to_string(total));
    const std::uint64_t warm = sched.warmup_steps();
    if (global_step < warm)
        return sched.base_lr * static_cast<double>(global_step) / static_cast<double>(warm);
    // Cosine phase spans [warm, total-1] and hits exactly zero at the final step.
    const std::uint64_t span = total - 1 - warm;
    if (span == 0) return sched.base_lr;
    const double phase = static_cast<double>(global_step - warm) / static_cast<double>(span);
    return sched.base_lr * 0.5 * (1.0 + std::cos(M_PI * phase));
}

} // namespace numkit
} // namespace caplab
