#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "minipost/data.hpp"
#include "minipost/metrics.hpp"
#include "minipost/model.hpp"
#include "minipost/optim.hpp"
#include "minipost/rng.hpp"

namespace minipost {

enum class LrSchedule { kCosine, kConstant };

struct SFTConfig {
    double learning_rate = 2e-5;
    int epochs = 2;
    int global_batch = 32;  // packed rows per optimizer step
    double warmup_ratio = 0.05;
    LrSchedule schedule = LrSchedule::kCosine;
    int pack_len = 256;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables

    void validate() const {
        if (learning_rate <= 0) {
            throw std::invalid_argument("SFTConfig: learning_rate must be > 0");
        }
        if (warmup_ratio < 0 || warmup_ratio >= 1) {
            throw std::invalid_argument("SFTConfig: warmup_ratio must be in [0, 1)");
        }
        if (epochs < 0 || global_batch < 1 || pack_len < 2) {
            throw std::invalid_argument("SFTConfig: bad epochs/global_batch/pack_len");
        }
    }
};

// Linear warmup to the peak rate over warmup_ratio * total_steps, then
// cosine decay to zero (or a constant plateau). With no warmup the peak
// applies from step 0.
inline double lr_at(int step, int total_steps, const SFTConfig& cfg) {
    if (step < 0 || step > total_steps) {
        throw std::invalid_argument("lr_at: step outside [0, total_steps]");
    }
    const double peak = cfg.learning_rate;
    const double warmup = cfg.warmup_ratio * total_steps;
    if (warmup > 0 && step < warmup) {
        return peak * static_cast<double>(step) / warmup;
    }
    if (cfg.schedule == LrSchedule::kConstant) {
        return peak;
    }
    const double span = total_steps - warmup;
    if (span <= 0) {
        return peak;
    }
    const double progress = (static_cast<double>(step) - warmup) / span;
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Token-mean masked cross entropy over every segment of every packed row,
// built on one shared tape so a single backward covers the whole batch.
// Segments are forwarded independently: positions restart per segment and
// attention cannot cross example boundaries.
template <typename Scalar>
Value<Scalar> packed_ce_loss(Tape<Scalar>& tape,
                             typename TransformerLM<Scalar>::Bound& bound,
                             TransformerLM<Scalar>& model,
                             std::span<const PackedBatch> rows) {
    Value<Scalar> total;
    std::size_t active = 0;
    for (const auto& row : rows) {
        for (auto [begin, end] : row.segments) {
            if (end - begin < 2) continue;
            std::span<const int> seg(row.tokens.data() + begin,
                                     static_cast<std::size_t>(end - begin));
            std::vector<int> inputs(seg.begin(), seg.end() - 1);
            std::vector<int> targets(seg.begin() + 1, seg.end());
            std::vector<std::uint8_t> mask(
                row.loss_mask.begin() + begin + 1, row.loss_mask.begin() + end);
            const std::size_t n = mask_active_count(mask);
            if (n == 0) continue;
            active += n;
            Value<Scalar> z = model.logits(bound, inputs);
            Value<Scalar> part = cross_entropy(z, std::move(targets),
                                               std::move(mask), Reduction::kSum);
            total = total.valid() ? add(total, part) : part;
        }
    }
    if (!total.valid()) {
        return tape.constant_scalar(Scalar(0));
    }
    return scale(total, Scalar(1) / static_cast<Scalar>(active));
}

// Stacked per-segment logits for one packed row (pack_len x V); padding
// rows are zero. Exists so tests can compare packed and standalone
// forwards directly.
template <typename Scalar>
MatX<Scalar> forward_packed(TransformerLM<Scalar>& model, const PackedBatch& row) {
    Tape<Scalar> tape;
    auto bound = model.bind(tape, false);
    MatX<Scalar> out = MatX<Scalar>::Zero(row.pack_len, model.config().vocab_size);
    for (auto [begin, end] : row.segments) {
        std::span<const int> seg(row.tokens.data() + begin,
                                 static_cast<std::size_t>(end - begin));
        out.middleRows(begin, end - begin) = model.logits(bound, seg).data();
    }
    return out;
}

// Stage-1 supervised fine-tuning loop.
template <typename Scalar>
class SftTrainer {
public:
    SftTrainer(TransformerLM<Scalar>& model, SFTConfig cfg,
               JsonlWriter* metrics = nullptr)
        : model_(model), cfg_(cfg), metrics_(metrics),
          optimizer_(model.parameters(),
                     AdamWConfig<Scalar>{Scalar(0.9), Scalar(0.999), Scalar(1e-8),
                                         static_cast<Scalar>(cfg.weight_decay)}) {
        cfg_.validate();
    }

    // One optimizer step over a group of packed rows; returns the pre-step
    // loss. A NaN loss aborts with a diagnostics dump appended to metrics.
    double step(std::span<const PackedBatch> rows) {
        Tape<Scalar> tape;
        auto bound = model_.bind(tape, true);
        Value<Scalar> loss = packed_ce_loss(tape, bound, model_, rows);
        const double loss_v = static_cast<double>(loss.scalar());
        if (std::isnan(loss_v)) {
            if (metrics_) {
                metrics_->append({{"event", "abort"},
                                  {"reason", "nan_loss"},
                                  {"step", step_}});
            }
            throw std::runtime_error("sft_step: NaN loss at step " +
                                     std::to_string(step_));
        }
        optimizer_.zero_grad();
        tape.backward(loss);
        auto params = model_.parameters();
        clip_grad_norm<Scalar>(params, static_cast<Scalar>(cfg_.clip_norm));
        const double lr = lr_at(step_, std::max(total_steps_, step_ + 1), cfg_);
        optimizer_.step(static_cast<Scalar>(lr));
        if (metrics_) {
            metrics_->append({{"step", step_}, {"loss", loss_v}, {"lr", lr}});
        }
        ++step_;
        return loss_v;
    }

    // Epochs over the packed rows with a seeded per-epoch shuffle.
    void train(std::vector<PackedBatch> rows) {
        const int batches_per_epoch = static_cast<int>(
            (rows.size() + cfg_.global_batch - 1) / cfg_.global_batch);
        total_steps_ = cfg_.epochs * batches_per_epoch;
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            Rng rng(derive_seed(cfg_.seed, "sft-epoch",
                                static_cast<std::uint64_t>(epoch)));
            rng.shuffle(rows);
            for (std::size_t i = 0; i < rows.size();
                 i += static_cast<std::size_t>(cfg_.global_batch)) {
                const std::size_t n =
                    std::min(rows.size() - i, static_cast<std::size_t>(cfg_.global_batch));
                step(std::span<const PackedBatch>(rows.data() + i, n));
            }
        }
    }

    void set_total_steps(int total) { total_steps_ = total; }
    int steps_taken() const { return step_; }

private:
    TransformerLM<Scalar>& model_;
    SFTConfig cfg_;
    JsonlWriter* metrics_;
    AdamW<Scalar> optimizer_;
    int step_ = 0;
    int total_steps_ = 0;
};

}  // namespace minipost
