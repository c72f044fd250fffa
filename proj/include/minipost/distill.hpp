#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "minipost/data.hpp"
#include "minipost/metrics.hpp"
#include "minipost/model.hpp"
#include "minipost/optim.hpp"
#include "minipost/residency.hpp"
#include "minipost/rng.hpp"

namespace minipost {

enum class DistillMode { kFull, kTopK };

// Teacher next-token distribution at one position: either the complete
// probability vector or the top-K (id, probability) pairs plus the
// leftover tail mass.
template <typename Scalar>
struct DistillTarget {
    DistillMode mode = DistillMode::kFull;
    VecX<Scalar> probs;                          // full mode
    std::vector<std::pair<int, Scalar>> topk;    // top-K mode, sorted desc
    Scalar tail_mass = Scalar(0);

    void validate(int vocab_size) const {
        if (mode == DistillMode::kFull) {
            if (probs.size() != vocab_size) {
                throw std::invalid_argument("DistillTarget: probs size mismatch");
            }
            if ((probs.array() < Scalar(0)).any()) {
                throw std::invalid_argument("DistillTarget: negative probability");
            }
            if (std::abs(probs.sum() - Scalar(1)) > Scalar(1e-9)) {
                throw std::invalid_argument("DistillTarget: full probs must sum to 1");
            }
        } else {
            if (topk.empty()) {
                throw std::invalid_argument("DistillTarget: empty top-K support");
            }
            std::vector<bool> seen(static_cast<std::size_t>(vocab_size), false);
            Scalar prev = std::numeric_limits<Scalar>::max();
            for (const auto& [id, p] : topk) {
                if (id < 0 || id >= vocab_size) {
                    throw std::invalid_argument("DistillTarget: id out of vocab");
                }
                if (seen[static_cast<std::size_t>(id)]) {
                    throw std::invalid_argument("DistillTarget: duplicate id in top-K");
                }
                seen[static_cast<std::size_t>(id)] = true;
                if (p < Scalar(0) || p > prev + Scalar(1e-12)) {
                    throw std::invalid_argument(
                        "DistillTarget: top-K probabilities must be sorted descending");
                }
                prev = p;
            }
        }
    }
};

struct DistillConfig {
    double student_fraction = 0.25;  // probability of an on-policy (student-generated) sequence
    DistillMode mode = DistillMode::kFull;
    int k = 0;  // top-K support size (top-K mode only)
    double learning_rate = 1e-6;
    int epochs = 1;
    int batch_size = 8;
    int max_completion = 128;
    double temperature = 1.0;
    double top_p = 0.95;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    double clip_norm = 1.0;

    void validate(int vocab_size) const {
        if (student_fraction < 0 || student_fraction > 1) {
            throw std::invalid_argument("DistillConfig: student_fraction must be in [0,1]");
        }
        if (mode == DistillMode::kTopK && (k < 1 || k > vocab_size)) {
            throw std::invalid_argument("DistillConfig: top-K needs 1 <= k <= vocab");
        }
        if (learning_rate <= 0 || batch_size < 1 || epochs < 0 ||
            max_completion < 1) {
            throw std::invalid_argument("DistillConfig: bad optimizer/sampling fields");
        }
    }
};

enum class SequenceSource { kOnPolicy, kReference };

// Bernoulli(student_fraction): on-policy means the student generates the
// sequence, reference means it is drawn from the fine-tuning corpus.
inline SequenceSource choose_source(double student_fraction, Rng& rng) {
    if (student_fraction < 0 || student_fraction > 1) {
        throw std::invalid_argument("choose_source: fraction must be in [0,1]");
    }
    return rng.bernoulli(student_fraction) ? SequenceSource::kOnPolicy
                                           : SequenceSource::kReference;
}

// Teacher distribution for one position from a raw logit row.
template <typename Scalar>
DistillTarget<Scalar> make_distill_target(const RowX<Scalar>& logits,
                                          DistillMode mode, int k) {
    VecX<Scalar> p(logits.size());
    {
        const Scalar m = logits.maxCoeff();
        VecX<Scalar> e = (logits.array() - m).exp().transpose();
        p = e / e.sum();
    }
    DistillTarget<Scalar> t;
    t.mode = mode;
    if (mode == DistillMode::kFull) {
        t.probs = std::move(p);
        return t;
    }
    std::vector<int> order(static_cast<std::size_t>(p.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[a] > p[b]; });
    Scalar kept = Scalar(0);
    for (int i = 0; i < k; ++i) {
        t.topk.emplace_back(order[static_cast<std::size_t>(i)],
                            p[order[static_cast<std::size_t>(i)]]);
        kept += p[order[static_cast<std::size_t>(i)]];
    }
    t.tail_mass = std::max(Scalar(0), Scalar(1) - kept);
    return t;
}

// Scalar forward KL (teacher -> student) for one position. Full mode
// compares on the whole vocabulary; top-K renormalizes the teacher over
// its support and the student over the same support, so the result is a
// proper KL on that shared support. Student log-probabilities come from a
// max-subtracted log-softmax, so finite logits can never produce NaN.
template <typename Scalar>
Scalar forward_kl(const DistillTarget<Scalar>& target,
                  const VecX<Scalar>& student_logits) {
    if (!student_logits.allFinite()) {
        throw std::invalid_argument("forward_kl: non-finite student logits");
    }
    if (target.mode == DistillMode::kFull) {
        if (target.probs.size() != student_logits.size()) {
            throw std::invalid_argument("forward_kl: vocab size mismatch");
        }
        const Scalar m = student_logits.maxCoeff();
        const Scalar lse = std::log((student_logits.array() - m).exp().sum());
        Scalar kl = Scalar(0);
        for (Eigen::Index v = 0; v < target.probs.size(); ++v) {
            const Scalar p = target.probs[v];
            if (p > Scalar(0)) {
                const Scalar ls = student_logits[v] - m - lse;
                kl += p * (std::log(p) - ls);
            }
        }
        return kl;
    }
    Scalar teacher_mass = Scalar(0);
    for (const auto& [id, p] : target.topk) {
        if (id >= student_logits.size()) {
            throw std::invalid_argument("forward_kl: support id out of range");
        }
        teacher_mass += p;
    }
    if (teacher_mass <= Scalar(0)) {
        throw std::invalid_argument("forward_kl: zero teacher mass on support");
    }
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (const auto& [id, p] : target.topk) {
        m = std::max(m, student_logits[id]);
    }
    Scalar lse = Scalar(0);
    for (const auto& [id, p] : target.topk) {
        lse += std::exp(student_logits[id] - m);
    }
    lse = std::log(lse);
    Scalar kl = Scalar(0);
    for (const auto& [id, p] : target.topk) {
        const Scalar q = p / teacher_mass;
        if (q > Scalar(0)) {
            const Scalar ls = student_logits[id] - m - lse;
            kl += q * (std::log(q) - ls);
        }
    }
    return kl;
}

// Fused tape op: sum over rows of weight[t] * KL(target[t] || softmax of
// student logits row t). Gradient wrt a logit row is
// weight * (student_prob - teacher_prob) on the compared support.
template <typename Scalar>
Value<Scalar> forward_kl_rows(Value<Scalar> student_logits,
                              std::vector<DistillTarget<Scalar>> targets,
                              std::vector<Scalar> weights) {
    Tape<Scalar>& tape = *student_logits.tape();
    tape.check_handle(student_logits);
    const auto& z = student_logits.data();
    if (static_cast<Eigen::Index>(targets.size()) != z.rows() ||
        static_cast<Eigen::Index>(weights.size()) != z.rows()) {
        throw std::invalid_argument("forward_kl_rows: one target/weight per row");
    }
    Scalar total = Scalar(0);
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
        if (weights[static_cast<std::size_t>(t)] == Scalar(0)) continue;
        total += weights[static_cast<std::size_t>(t)] *
                 forward_kl<Scalar>(targets[static_cast<std::size_t>(t)],
                                    z.row(t).transpose());
    }
    MatX<Scalar> out(1, 1);
    out(0, 0) = total;
    const int iz = student_logits.id();
    return tape.make_node(
        std::move(out), tape.requires_grad(iz),
        [iz, targets = std::move(targets),
         weights = std::move(weights)](Tape<Scalar>& t, int self) {
            const Scalar g = t.grad_buf(self)(0, 0);
            const auto& z = t.value_of(iz);
            auto& gz = t.grad_buf(iz);
            for (Eigen::Index r = 0; r < z.rows(); ++r) {
                const Scalar w = weights[static_cast<std::size_t>(r)];
                if (w == Scalar(0)) continue;
                const auto& target = targets[static_cast<std::size_t>(r)];
                if (target.mode == DistillMode::kFull) {
                    const Scalar m = z.row(r).maxCoeff();
                    RowX<Scalar> s = (z.row(r).array() - m).exp();
                    s /= s.sum();
                    gz.row(r).array() +=
                        g * w * (s.array() - target.probs.transpose().array());
                } else {
                    Scalar teacher_mass = Scalar(0);
                    Scalar m = -std::numeric_limits<Scalar>::infinity();
                    for (const auto& [id, p] : target.topk) {
                        teacher_mass += p;
                        m = std::max(m, z(r, id));
                    }
                    Scalar sum = Scalar(0);
                    for (const auto& [id, p] : target.topk) {
                        sum += std::exp(z(r, id) - m);
                    }
                    for (const auto& [id, p] : target.topk) {
                        const Scalar s = std::exp(z(r, id) - m) / sum;
                        gz(r, id) += g * w * (s - p / teacher_mass);
                    }
                }
            }
        });
}

// Rendered-template prompt prefix: everything through the <asst> marker.
inline TokenSequence prompt_of(const TokenSequence& rendered) {
    TokenSequence out;
    for (std::size_t i = 0; i < rendered.ids.size(); ++i) {
        out.push_back(rendered.ids[i], 0);
        if (rendered.ids[i] == tok::kAsst) {
            return out;
        }
    }
    throw std::invalid_argument("prompt_of: sequence has no <asst> marker");
}

// Teacher targets along a sequence: entry t is the distribution over the
// token at position t+1 (aligned with next-token training targets).
template <typename Scalar>
std::vector<DistillTarget<Scalar>> teacher_targets(TransformerLM<Scalar>& teacher,
                                                   std::span<const int> tokens,
                                                   DistillMode mode, int k) {
    Tape<Scalar> tape;
    MatX<Scalar> z = teacher.logits(tape, tokens, false).data();
    std::vector<DistillTarget<Scalar>> out;
    out.reserve(static_cast<std::size_t>(z.rows() - 1));
    for (Eigen::Index t = 0; t + 1 < z.rows(); ++t) {
        out.push_back(make_distill_target<Scalar>(RowX<Scalar>(z.row(t)), mode, k));
    }
    return out;
}

// One-position-per-line JSON dump of distillation targets for offline
// inspection.
template <typename Scalar>
void dump_targets_jsonl(const std::filesystem::path& path,
                        std::span<const DistillTarget<Scalar>> targets) {
    JsonlWriter writer(path);
    for (const auto& t : targets) {
        nlohmann::json j;
        if (t.mode == DistillMode::kFull) {
            j["mode"] = "full";
            std::vector<double> p(t.probs.data(), t.probs.data() + t.probs.size());
            j["probs"] = p;
        } else {
            j["mode"] = "topk";
            auto entries = nlohmann::json::array();
            for (const auto& [id, p] : t.topk) {
                entries.push_back({id, static_cast<double>(p)});
            }
            j["entries"] = entries;
            j["tail_mass"] = static_cast<double>(t.tail_mass);
        }
        writer.append(j);
    }
}

// Mean full-support forward KL (teacher -> student) over the masked
// positions of held-out sequences; the evaluation metric for distillation
// quality, independent of the training mode.
template <typename Scalar>
double mean_forward_kl(TransformerLM<Scalar>& teacher,
                       TransformerLM<Scalar>& student,
                       std::span<const TokenSequence> heldout) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& seq : heldout) {
        seq.validate();
        if (seq.size() < 2) continue;
        auto targets = teacher_targets<Scalar>(teacher, seq.ids, DistillMode::kFull, 0);
        Tape<Scalar> tape;
        MatX<Scalar> z = student.logits(tape, seq.ids, false).data();
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            if (!seq.loss_mask.empty() && !seq.loss_mask[t + 1]) continue;
            total += static_cast<double>(forward_kl<Scalar>(
                targets[t], VecX<Scalar>(z.row(static_cast<Eigen::Index>(t)).transpose())));
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

// Stage-2 on-policy distillation: lambda-mixed data sourcing, teacher
// scoring, forward-KL objective on the student. The residency scheduler
// tracks which model occupies the fast tier through the
// sample -> score -> update cycle.
template <typename Scalar>
class OpdTrainer {
public:
    OpdTrainer(TransformerLM<Scalar>& student, TransformerLM<Scalar>& teacher,
               DistillConfig cfg, std::vector<TokenSequence> corpus,
               JsonlWriter* metrics = nullptr)
        : student_(student), teacher_(teacher), cfg_(cfg),
          corpus_(std::move(corpus)), metrics_(metrics),
          optimizer_(student.parameters(),
                     AdamWConfig<Scalar>{Scalar(0.9), Scalar(0.999), Scalar(1e-8),
                                         static_cast<Scalar>(cfg.weight_decay)}),
          source_rng_(derive_seed(cfg.seed, "opd-source")),
          data_rng_(derive_seed(cfg.seed, "opd-data")) {
        if (student_.config().vocab_size != teacher_.config().vocab_size) {
            throw std::invalid_argument(
                "OpdTrainer: student and teacher must share a vocabulary");
        }
        cfg_.validate(student_.config().vocab_size);
        if (corpus_.empty()) {
            throw std::invalid_argument("OpdTrainer: empty reference corpus");
        }
        for (const auto& seq : corpus_) seq.validate();
        residency_.register_model("student");
        residency_.register_model("teacher");
    }

    // One optimizer step over a batch of lambda-mixed sequences; returns
    // the batch loss (token-mean forward KL).
    double step() {
        std::vector<TokenSequence> batch;
        int on_policy = 0;
        {
            auto token = residency_.acquire("student");
            for (int i = 0; i < cfg_.batch_size; ++i) {
                const auto& ref =
                    corpus_[data_rng_.below(corpus_.size())];
                if (choose_source(cfg_.student_fraction, source_rng_) ==
                    SequenceSource::kOnPolicy) {
                    ++on_policy;
                    SamplingParams params;
                    params.temperature = cfg_.temperature;
                    params.top_p = cfg_.top_p;
                    params.max_new_tokens = cfg_.max_completion;
                    Rng sample_rng(derive_seed(cfg_.seed, "opd-sample",
                                               static_cast<std::uint64_t>(step_),
                                               static_cast<std::uint64_t>(i)));
                    batch.push_back(
                        student_.sample(prompt_of(ref), params, sample_rng));
                } else {
                    batch.push_back(ref);
                }
            }
        }

        std::vector<std::vector<DistillTarget<Scalar>>> targets;
        {
            auto token = residency_.acquire("teacher");
            for (const auto& seq : batch) {
                targets.push_back(seq.size() >= 2
                                      ? teacher_targets<Scalar>(teacher_, seq.ids,
                                                                cfg_.mode, cfg_.k)
                                      : std::vector<DistillTarget<Scalar>>{});
            }
        }

        double loss_v = 0.0;
        {
            auto token = residency_.acquire("student");
            Scalar total_weight = Scalar(0);
            for (const auto& seq : batch) {
                for (std::size_t t = 1; t < seq.size(); ++t) {
                    if (!seq.loss_mask.empty() && seq.loss_mask[t]) {
                        total_weight += Scalar(1);
                    }
                }
            }
            Tape<Scalar> tape;
            auto bound = student_.bind(tape, true);
            Value<Scalar> loss;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const auto& seq = batch[b];
                if (seq.size() < 2 || targets[b].empty()) continue;
                std::vector<int> inputs(seq.ids.begin(), seq.ids.end() - 1);
                std::vector<Scalar> weights(inputs.size(), Scalar(0));
                for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
                    if (!seq.loss_mask.empty() && seq.loss_mask[t + 1]) {
                        weights[t] = Scalar(1);
                    }
                }
                Value<Scalar> z = student_.logits(bound, inputs);
                Value<Scalar> part = forward_kl_rows(z, targets[b], std::move(weights));
                loss = loss.valid() ? add(loss, part) : part;
            }
            if (!loss.valid() || total_weight == Scalar(0)) {
                loss = tape.constant_scalar(Scalar(0));
            } else {
                loss = scale(loss, Scalar(1) / total_weight);
            }
            loss_v = static_cast<double>(loss.scalar());
            optimizer_.zero_grad();
            tape.backward(loss);
            auto params = student_.parameters();
            clip_grad_norm<Scalar>(params, static_cast<Scalar>(cfg_.clip_norm));
            optimizer_.step(static_cast<Scalar>(cfg_.learning_rate));
        }

        if (metrics_) {
            metrics_->append({{"step", step_},
                              {"loss", loss_v},
                              {"on_policy", on_policy}});
        }
        ++step_;
        return loss_v;
    }

    void train(int steps) {
        for (int i = 0; i < steps; ++i) {
            step();
        }
    }

    // cfg.epochs passes over the corpus at the configured batch size
    void train_epochs() {
        const int per_epoch = static_cast<int>(
            (corpus_.size() + cfg_.batch_size - 1) /
            static_cast<std::size_t>(cfg_.batch_size));
        train(cfg_.epochs * per_epoch);
    }

    const ResidencyScheduler& residency() const { return residency_; }
    int steps_taken() const { return step_; }

private:
    TransformerLM<Scalar>& student_;
    TransformerLM<Scalar>& teacher_;
    DistillConfig cfg_;
    std::vector<TokenSequence> corpus_;
    JsonlWriter* metrics_;
    AdamW<Scalar> optimizer_;
    Rng source_rng_;
    Rng data_rng_;
    ResidencyScheduler residency_;
    int step_ = 0;
};

}  // namespace minipost
