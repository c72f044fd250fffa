#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "minipost/autodiff.hpp"
#include "minipost/checkpoint.hpp"
#include "minipost/rng.hpp"
#include "minipost/tokens.hpp"

namespace minipost {

struct ModelConfig {
    int vocab_size = tok::kVocabSize;
    int layers = 4;
    int model_dim = 128;
    int heads = 4;
    int context_len = 256;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 4) throw std::invalid_argument("ModelConfig: vocab_size must be >= 4");
        if (context_len < 2) throw std::invalid_argument("ModelConfig: context_len must be >= 2");
        if (layers < 1 || heads < 1 || model_dim < 1) {
            throw std::invalid_argument("ModelConfig: layers/heads/model_dim must be positive");
        }
        if (model_dim % heads != 0) {
            throw std::invalid_argument("ModelConfig: model_dim must be divisible by heads");
        }
    }

    int head_dim() const { return model_dim / heads; }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size}, {"layers", layers},
                {"model_dim", model_dim},   {"heads", heads},
                {"context_len", context_len}, {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.layers = j.at("layers").get<int>();
        c.model_dim = j.at("model_dim").get<int>();
        c.heads = j.at("heads").get<int>();
        c.context_len = j.at("context_len").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 1.0;
    int max_new_tokens = 64;
    bool greedy = false;
};

// Next-token logits as a function of the running token prefix. Sampling is
// written against this signature so tests can script arbitrary logit
// sources.
template <typename Scalar>
using NextLogitFn = std::function<VecX<Scalar>(const std::vector<int>&)>;

// Draws up to max_new_tokens, stopping early at eos_id or when the prefix
// reaches context_len. Returns prompt + completion, with loss mask 1 on
// generated tokens. greedy (or temperature -> 0) takes the argmax, lowest
// index on ties, and consumes no randomness.
template <typename Scalar>
TokenSequence sample_tokens(const NextLogitFn<Scalar>& next_logits,
                            const TokenSequence& prompt,
                            const SamplingParams& params, Rng& rng,
                            int eos_id, int context_len) {
    if (prompt.ids.empty()) {
        throw std::invalid_argument("sample_tokens: prompt must be nonempty");
    }
    TokenSequence out;
    out.ids = prompt.ids;
    out.loss_mask.assign(prompt.ids.size(), 0);
    const bool greedy = params.greedy || params.temperature < 1e-12;
    for (int step = 0; step < params.max_new_tokens; ++step) {
        if (static_cast<int>(out.ids.size()) >= context_len) break;
        VecX<Scalar> logits = next_logits(out.ids);
        int next = 0;
        if (greedy) {
            Eigen::Index arg;
            logits.maxCoeff(&arg);
            next = static_cast<int>(arg);
        } else {
            Eigen::VectorXd z = logits.template cast<double>() / params.temperature;
            const double m = z.maxCoeff();
            Eigen::VectorXd p = (z.array() - m).exp();
            p /= p.sum();
            if (params.top_p < 1.0) {
                std::vector<int> order(static_cast<std::size_t>(p.size()));
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return p[a] > p[b];
                });
                Eigen::VectorXd keep = Eigen::VectorXd::Zero(p.size());
                double cum = 0.0;
                for (int idx : order) {
                    keep[idx] = p[idx];
                    cum += p[idx];
                    if (cum >= params.top_p) break;
                }
                p = keep / keep.sum();
            }
            next = rng.categorical(p);
        }
        out.push_back(next, 1);
        if (next == eos_id) break;
    }
    return out;
}

// Decoder-only causal language model over the byte vocabulary: learned
// token + absolute position embeddings, pre-norm blocks with per-head
// attention projections and a GELU MLP, untied output head.
//
// Parameters are immutable during sampling; training requires exclusive
// access. The object is pinned in memory once constructed (parameter
// pointers are handed to optimizers).
template <typename Scalar>
class TransformerLM {
public:
    explicit TransformerLM(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.model_dim;
        const int dh = cfg_.head_dim();
        const Scalar init_std = Scalar(0.08);
        int pidx = 0;
        auto gauss = [&](int rows, int cols, const std::string& name) {
            Rng rng(derive_seed(cfg_.seed, "model-init", static_cast<std::uint64_t>(pidx++)));
            MatX<Scalar> m(rows, cols);
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                for (Eigen::Index j = 0; j < m.cols(); ++j) {
                    m(i, j) = static_cast<Scalar>(rng.normal()) * init_std;
                }
            }
            return Parameter<Scalar>(name, std::move(m));
        };
        auto ones_row = [&](const std::string& name) {
            return Parameter<Scalar>(name, MatX<Scalar>::Ones(1, d));
        };
        tok_emb_ = gauss(cfg_.vocab_size, d, "tok_emb");
        pos_emb_ = gauss(cfg_.context_len, d, "pos_emb");
        layers_.resize(static_cast<std::size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            auto& L = layers_[static_cast<std::size_t>(l)];
            const std::string base = "layer" + std::to_string(l) + ".";
            L.attn_gain = ones_row(base + "attn_gain");
            for (int h = 0; h < cfg_.heads; ++h) {
                const std::string hb = base + "head" + std::to_string(h) + ".";
                L.wq.push_back(gauss(d, dh, hb + "wq"));
                L.wk.push_back(gauss(d, dh, hb + "wk"));
                L.wv.push_back(gauss(d, dh, hb + "wv"));
                L.wo.push_back(gauss(dh, d, hb + "wo"));
            }
            L.mlp_gain = ones_row(base + "mlp_gain");
            L.w1 = gauss(d, 4 * d, base + "mlp.w1");
            L.b1 = Parameter<Scalar>(base + "mlp.b1", MatX<Scalar>::Zero(1, 4 * d));
            L.w2 = gauss(4 * d, d, base + "mlp.w2");
            L.b2 = Parameter<Scalar>(base + "mlp.b2", MatX<Scalar>::Zero(1, d));
        }
        final_gain_ = ones_row("final_gain");
        lm_head_ = gauss(d, cfg_.vocab_size, "lm_head");
    }

    TransformerLM(const TransformerLM&) = delete;
    TransformerLM& operator=(const TransformerLM&) = delete;

    const ModelConfig& config() const { return cfg_; }

    std::vector<Parameter<Scalar>*> parameters() {
        std::vector<Parameter<Scalar>*> out;
        out.push_back(&tok_emb_);
        out.push_back(&pos_emb_);
        for (auto& L : layers_) {
            out.push_back(&L.attn_gain);
            for (auto& p : L.wq) out.push_back(&p);
            for (auto& p : L.wk) out.push_back(&p);
            for (auto& p : L.wv) out.push_back(&p);
            for (auto& p : L.wo) out.push_back(&p);
            out.push_back(&L.mlp_gain);
            out.push_back(&L.w1);
            out.push_back(&L.b1);
            out.push_back(&L.w2);
            out.push_back(&L.b2);
        }
        out.push_back(&final_gain_);
        out.push_back(&lm_head_);
        return out;
    }

    // Parameter leaves bound once per tape; reuse the binding across every
    // forward recorded on that tape so gradients from all segments land in
    // the same accumulators.
    struct Bound {
        Tape<Scalar>* tape = nullptr;
        Value<Scalar> tok_emb, pos_emb, final_gain, lm_head;
        struct Layer {
            Value<Scalar> attn_gain, mlp_gain, w1, b1, w2, b2;
            std::vector<Value<Scalar>> wq, wk, wv, wo;
        };
        std::vector<Layer> layers;
    };

    Bound bind(Tape<Scalar>& tape, bool trainable) {
        Bound b;
        b.tape = &tape;
        auto bind_one = [&](Parameter<Scalar>& p) {
            return trainable ? tape.param(p) : tape.constant(p.data);
        };
        b.tok_emb = bind_one(tok_emb_);
        b.pos_emb = bind_one(pos_emb_);
        for (auto& L : layers_) {
            typename Bound::Layer bl;
            bl.attn_gain = bind_one(L.attn_gain);
            for (std::size_t h = 0; h < L.wq.size(); ++h) {
                bl.wq.push_back(bind_one(L.wq[h]));
                bl.wk.push_back(bind_one(L.wk[h]));
                bl.wv.push_back(bind_one(L.wv[h]));
                bl.wo.push_back(bind_one(L.wo[h]));
            }
            bl.mlp_gain = bind_one(L.mlp_gain);
            bl.w1 = bind_one(L.w1);
            bl.b1 = bind_one(L.b1);
            bl.w2 = bind_one(L.w2);
            bl.b2 = bind_one(L.b2);
            b.layers.push_back(std::move(bl));
        }
        b.final_gain = bind_one(final_gain_);
        b.lm_head = bind_one(lm_head_);
        return b;
    }

    // Final hidden states (T x d) for one sequence. Positions restart at 0,
    // so packed segments forwarded separately match standalone forwards
    // exactly.
    Value<Scalar> hidden(const Bound& b, std::span<const int> tokens) const {
        check_tokens(tokens);
        Tape<Scalar>& tape = *b.tape;
        const int T = static_cast<int>(tokens.size());
        std::vector<int> ids(tokens.begin(), tokens.end());
        std::vector<int> pos(static_cast<std::size_t>(T));
        std::iota(pos.begin(), pos.end(), 0);
        Value<Scalar> x = add(gather_rows(b.tok_emb, std::move(ids)),
                              gather_rows(b.pos_emb, std::move(pos)));
        const Scalar inv_sqrt_dh =
            Scalar(1) / std::sqrt(static_cast<Scalar>(cfg_.head_dim()));
        for (const auto& L : b.layers) {
            Value<Scalar> xn = mul_rowvec(rms_norm(x), L.attn_gain);
            Value<Scalar> attn_out;
            for (std::size_t h = 0; h < L.wq.size(); ++h) {
                Value<Scalar> q = matmul(xn, L.wq[h]);
                Value<Scalar> k = matmul(xn, L.wk[h]);
                Value<Scalar> v = matmul(xn, L.wv[h]);
                Value<Scalar> p = causal_row_softmax(scale(matmul_nt(q, k), inv_sqrt_dh));
                Value<Scalar> head = matmul(matmul(p, v), L.wo[h]);
                attn_out = (h == 0) ? head : add(attn_out, head);
            }
            x = add(x, attn_out);
            Value<Scalar> mn = mul_rowvec(rms_norm(x), L.mlp_gain);
            Value<Scalar> up = gelu(add_rowvec(matmul(mn, L.w1), L.b1));
            Value<Scalar> down = add_rowvec(matmul(up, L.w2), L.b2);
            x = add(x, down);
        }
        return mul_rowvec(rms_norm(x), b.final_gain);
    }

    // Logits (T x V); position t depends only on tokens <= t.
    Value<Scalar> logits(const Bound& b, std::span<const int> tokens) const {
        return matmul(hidden(b, tokens), b.lm_head);
    }

    Value<Scalar> logits(Tape<Scalar>& tape, std::span<const int> tokens,
                         bool trainable) {
        Bound b = bind(tape, trainable);
        return logits(b, tokens);
    }

    // Logits for the final position only; runs the trunk on a throwaway
    // constant tape and applies the output head to one row.
    VecX<Scalar> next_token_logits(std::span<const int> tokens) {
        Tape<Scalar> tape;
        Bound b = bind(tape, false);
        Value<Scalar> h = hidden(b, tokens);
        return (h.data().row(h.rows() - 1) * lm_head_.data).transpose();
    }

    NextLogitFn<Scalar> next_logit_fn() {
        return [this](const std::vector<int>& prefix) {
            return next_token_logits(prefix);
        };
    }

    TokenSequence sample(const TokenSequence& prompt, const SamplingParams& params,
                         Rng& rng) {
        return sample_tokens<Scalar>(next_logit_fn(), prompt, params, rng,
                                     tok::kEos, cfg_.context_len);
    }

    // Entry t is log p(token[t+1] | tokens <= t); length T-1.
    VecX<Scalar> sequence_log_probs(std::span<const int> tokens) {
        if (tokens.size() < 2) {
            throw std::invalid_argument("sequence_log_probs: need at least 2 tokens");
        }
        Tape<Scalar> tape;
        Value<Scalar> z = logits(tape, tokens, false);
        Value<Scalar> ls = log_softmax(z);
        VecX<Scalar> out(static_cast<Eigen::Index>(tokens.size()) - 1);
        for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
            out[static_cast<Eigen::Index>(t)] =
                ls.data()(static_cast<Eigen::Index>(t), tokens[t + 1]);
        }
        return out;
    }

    void copy_weights_from(TransformerLM& other) {
        auto dst = parameters();
        auto src = other.parameters();
        if (dst.size() != src.size()) {
            throw std::invalid_argument("copy_weights_from: parameter count mismatch");
        }
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i]->data.rows() != src[i]->data.rows() ||
                dst[i]->data.cols() != src[i]->data.cols()) {
                throw std::invalid_argument("copy_weights_from: shape mismatch at " +
                                            dst[i]->name);
            }
            dst[i]->data = src[i]->data;
        }
    }

    void save(const std::filesystem::path& path) {
        Checkpoint ckpt;
        ckpt.metadata = cfg_.to_json().dump();
        for (auto* p : parameters()) {
            ckpt.tensors.push_back(to_blob<Scalar>(p->name, p->data));
        }
        save_checkpoint(path, ckpt);
    }

    void load_tensors(const Checkpoint& ckpt) {
        for (auto* p : parameters()) {
            const TensorBlob* b = ckpt.find(p->name);
            if (!b) {
                throw std::runtime_error("checkpoint is missing tensor '" + p->name + "'");
            }
            MatX<Scalar> m = from_blob<Scalar>(*b);
            if (m.rows() != p->data.rows() || m.cols() != p->data.cols()) {
                throw std::runtime_error("checkpoint tensor '" + p->name +
                                         "' has unexpected shape");
            }
            p->data = std::move(m);
        }
    }

    static TransformerLM load(const std::filesystem::path& path) {
        Checkpoint ckpt = load_checkpoint(path);
        ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(ckpt.metadata));
        TransformerLM model(cfg);
        model.load_tensors(ckpt);
        return model;
    }

    TransformerLM(TransformerLM&&) = default;

private:
    void check_tokens(std::span<const int> tokens) const {
        if (tokens.empty()) {
            throw std::invalid_argument("forward: empty token sequence");
        }
        if (static_cast<int>(tokens.size()) > cfg_.context_len) {
            throw std::invalid_argument(
                "forward: sequence length " + std::to_string(tokens.size()) +
                " exceeds context_len " + std::to_string(cfg_.context_len));
        }
        for (int id : tokens) {
            if (id < 0 || id >= cfg_.vocab_size) {
                throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                            " outside vocab of size " +
                                            std::to_string(cfg_.vocab_size));
            }
        }
    }

    struct LayerParams {
        Parameter<Scalar> attn_gain, mlp_gain, w1, b1, w2, b2;
        std::vector<Parameter<Scalar>> wq, wk, wv, wo;
    };

    ModelConfig cfg_;
    Parameter<Scalar> tok_emb_, pos_emb_, final_gain_, lm_head_;
    std::vector<LayerParams> layers_;
};

}  // namespace minipost
