#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

// Architectural tuple (L, A_h, d_h, d_f) plus vocabulary and length limits.
struct ModelConfig {
    int num_layers = 0;
    int num_heads = 0;
    int hidden_size = 0;
    int ff_size = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    double dropout = 0.0; // always 0 at desk scale; kept as a config field

    int head_size() const { return hidden_size / num_heads; }

    void validate() const {
        if (num_layers < 1 || num_heads < 1 || hidden_size < 1 || ff_size < 1 || vocab_size < 1 || max_seq_len < 1)
            throw std::invalid_argument("ModelConfig: all dimensions must be positive");
        if (hidden_size % num_heads != 0)
            throw std::invalid_argument("ModelConfig: hidden_size " + std::to_string(hidden_size) +
                                        " not divisible by num_heads " + std::to_string(num_heads));
    }

    bool same_layer_shape(const ModelConfig& o) const {
        return num_heads == o.num_heads && hidden_size == o.hidden_size && ff_size == o.ff_size;
    }
};

// Full-size presets (vocab 30K, the monolingual setting) and proportionally
// shrunk desk presets sized for CPU minutes.
inline ModelConfig preset_config(const std::string& name) {
    auto table = [](int l, int ah, int dh, int df) {
        return ModelConfig{l, ah, dh, df, 30000, 512, 0.0};
    };
    auto desk = [](int l, int ah, int dh, int df) {
        return ModelConfig{l, ah, dh, df, 256, 64, 0.0};
    };
    if (name == "teacher") return table(12, 12, 768, 3072);
    if (name == "6l-distilbert") return table(6, 12, 768, 3072);
    if (name == "6l") return table(6, 12, 384, 1536);
    if (name == "4l") return table(4, 12, 576, 768);
    if (name == "3l") return table(3, 12, 384, 1024);
    if (name == "desk-teacher") return desk(4, 4, 64, 128);
    if (name == "desk-6l-distilbert") return desk(2, 4, 64, 128);
    if (name == "desk-6l") return desk(2, 4, 32, 64);
    if (name == "desk-4l") return desk(1, 4, 48, 32);
    if (name == "desk-3l") return desk(1, 4, 32, 40);
    throw std::invalid_argument("preset_config: unknown preset '" + name + "'");
}

inline const std::vector<std::string>& table_preset_names() {
    static const std::vector<std::string> names = {"teacher", "6l-distilbert", "6l", "4l", "3l"};
    return names;
}

inline const std::vector<std::string>& desk_preset_names() {
    static const std::vector<std::string> names = {"desk-teacher", "desk-6l-distilbert", "desk-6l", "desk-4l",
                                                   "desk-3l"};
    return names;
}

// Closed-form parameter count for a config; include_head adds the vocabulary
// projection. The headless count is what model-size tables conventionally
// report for encoders.
inline std::size_t config_parameter_count(const ModelConfig& c, bool include_head = true) {
    const auto dh = static_cast<std::size_t>(c.hidden_size);
    const auto df = static_cast<std::size_t>(c.ff_size);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    const std::size_t embeddings = v * dh + static_cast<std::size_t>(c.max_seq_len) * dh;
    const std::size_t attn = 4 * (dh * dh + dh);
    const std::size_t ff = dh * df + df + df * dh + dh;
    const std::size_t norms = 4 * dh;
    const std::size_t per_layer = attn + ff + norms;
    std::size_t total = embeddings + static_cast<std::size_t>(c.num_layers) * per_layer;
    if (include_head) total += dh * v + v;
    return total;
}

struct LayerParams {
    Tensor wq, bq; // d_h x d_h, d_h; heads are column blocks
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo; // attention output projection
    Tensor ln1_g, ln1_b;
    Tensor ff1_w, ff1_b; // d_h x d_f
    Tensor ff2_w, ff2_b; // d_f x d_h
    Tensor ln2_g, ln2_b;
};

class TransformerModel {
public:
    ModelConfig config;
    Tensor tok_emb; // |V| x d_h
    Tensor pos_emb; // max_seq_len x d_h
    std::vector<LayerParams> layers;
    Tensor out_w; // d_h x |V|
    Tensor out_b;

    // Named parameters in a fixed canonical order (checkpoint layout order).
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("embed.token", tok_emb);
        out.emplace_back("embed.position", pos_emb);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer." + std::to_string(i) + ".";
            const LayerParams& l = layers[i];
            out.emplace_back(p + "attn.wq", l.wq);
            out.emplace_back(p + "attn.bq", l.bq);
            out.emplace_back(p + "attn.wk", l.wk);
            out.emplace_back(p + "attn.bk", l.bk);
            out.emplace_back(p + "attn.wv", l.wv);
            out.emplace_back(p + "attn.bv", l.bv);
            out.emplace_back(p + "attn.wo", l.wo);
            out.emplace_back(p + "attn.bo", l.bo);
            out.emplace_back(p + "ln1.gain", l.ln1_g);
            out.emplace_back(p + "ln1.bias", l.ln1_b);
            out.emplace_back(p + "ff.w1", l.ff1_w);
            out.emplace_back(p + "ff.b1", l.ff1_b);
            out.emplace_back(p + "ff.w2", l.ff2_w);
            out.emplace_back(p + "ff.b2", l.ff2_b);
            out.emplace_back(p + "ln2.gain", l.ln2_g);
            out.emplace_back(p + "ln2.bias", l.ln2_b);
        }
        out.emplace_back("head.weight", out_w);
        out.emplace_back("head.bias", out_b);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void set_requires_grad(bool b) {
        for (Tensor& t : parameters()) t.set_requires_grad(b);
    }

    void zero_grad() {
        for (Tensor& t : parameters()) t.zero_grad();
    }

    // Total number of stored parameter scalars.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : parameters()) n += t.numel();
        return n;
    }

    // Parameter count excluding the output head, matching how encoder model
    // sizes are conventionally reported.
    std::size_t encoder_parameter_count() const {
        return parameter_count() - out_w.numel() - out_b.numel();
    }

    TransformerModel clone() const {
        TransformerModel m;
        m.config = config;
        auto copy = [](const Tensor& t) { return t.clone(); };
        m.tok_emb = copy(tok_emb);
        m.pos_emb = copy(pos_emb);
        for (const LayerParams& l : layers) {
            LayerParams c;
            c.wq = copy(l.wq); c.bq = copy(l.bq);
            c.wk = copy(l.wk); c.bk = copy(l.bk);
            c.wv = copy(l.wv); c.bv = copy(l.bv);
            c.wo = copy(l.wo); c.bo = copy(l.bo);
            c.ln1_g = copy(l.ln1_g); c.ln1_b = copy(l.ln1_b);
            c.ff1_w = copy(l.ff1_w); c.ff1_b = copy(l.ff1_b);
            c.ff2_w = copy(l.ff2_w); c.ff2_b = copy(l.ff2_b);
            c.ln2_g = copy(l.ln2_g); c.ln2_b = copy(l.ln2_b);
            m.layers.push_back(std::move(c));
        }
        m.out_w = copy(out_w);
        m.out_b = copy(out_b);
        return m;
    }
};

// Everything the distillation losses consume from one forward pass.
struct ForwardTrace {
    std::vector<Tensor> hidden_states;          // H_0 .. H_L, each |x| x d_h
    std::vector<std::vector<Tensor>> queries;   // [layer][head], |x| x d_k
    std::vector<std::vector<Tensor>> keys;
    std::vector<std::vector<Tensor>> values;
    std::vector<std::vector<Tensor>> attentions; // [layer][head], |x| x |x|
    Tensor logits;                               // |x| x |V|
};

struct ForwardOptions {
    Graph* graph = nullptr;
    bool with_logits = true;
    // Number of real (non-pad) tokens; content is left-aligned. 0 = all real.
    std::size_t n_real = 0;
};

namespace detail {

template <typename WeightInit>
TransformerModel build_model(const ModelConfig& config, WeightInit&& weight) {
    config.validate();
    const auto dh = static_cast<std::size_t>(config.hidden_size);
    const auto df = static_cast<std::size_t>(config.ff_size);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    TransformerModel m;
    m.config = config;
    m.tok_emb = weight(Shape{v, dh});
    m.pos_emb = weight(Shape{static_cast<std::size_t>(config.max_seq_len), dh});
    for (int i = 0; i < config.num_layers; ++i) {
        LayerParams l;
        l.wq = weight(Shape{dh, dh});
        l.bq = Tensor::zeros({dh}, true);
        l.wk = weight(Shape{dh, dh});
        l.bk = Tensor::zeros({dh}, true);
        l.wv = weight(Shape{dh, dh});
        l.bv = Tensor::zeros({dh}, true);
        l.wo = weight(Shape{dh, dh});
        l.bo = Tensor::zeros({dh}, true);
        l.ln1_g = Tensor::full({dh}, 1.0, true);
        l.ln1_b = Tensor::zeros({dh}, true);
        l.ff1_w = weight(Shape{dh, df});
        l.ff1_b = Tensor::zeros({df}, true);
        l.ff2_w = weight(Shape{df, dh});
        l.ff2_b = Tensor::zeros({dh}, true);
        l.ln2_g = Tensor::full({dh}, 1.0, true);
        l.ln2_b = Tensor::zeros({dh}, true);
        m.layers.push_back(std::move(l));
    }
    m.out_w = weight(Shape{dh, v});
    m.out_b = Tensor::zeros({v}, true);
    return m;
}

} // namespace detail

// Deterministic init: truncated-normal(0.02) weights, zero biases, unit gains.
inline TransformerModel init_parameters(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return detail::build_model(config, [&rng](Shape s) { return Tensor::trunc_normal(std::move(s), rng, 0.02, true); });
}

// Zero-weight skeleton; checkpoint loading fills the values in.
inline TransformerModel zeros_model(const ModelConfig& config) {
    return detail::build_model(config, [](Shape s) { return Tensor::zeros(std::move(s), true); });
}

// Student built by copying selected teacher layers plus embeddings and the
// output head. Layer shapes must match the teacher exactly.
inline TransformerModel init_from_teacher_layers(const ModelConfig& student_cfg, const TransformerModel& teacher,
                                                 const std::vector<int>& picked_layers) {
    student_cfg.validate();
    if (!student_cfg.same_layer_shape(teacher.config) || student_cfg.vocab_size != teacher.config.vocab_size ||
        student_cfg.max_seq_len != teacher.config.max_seq_len)
        throw std::invalid_argument(
            "init_from_teacher_layers: teacher-layer initialization requires each student layer to share the "
            "teacher's layer architecture (A_h, d_h, d_f) and embedding shapes; student (" +
            std::to_string(student_cfg.num_heads) + ", " + std::to_string(student_cfg.hidden_size) + ", " +
            std::to_string(student_cfg.ff_size) + ") vs teacher (" + std::to_string(teacher.config.num_heads) + ", " +
            std::to_string(teacher.config.hidden_size) + ", " + std::to_string(teacher.config.ff_size) + ")");
    if (static_cast<int>(picked_layers.size()) != student_cfg.num_layers)
        throw std::invalid_argument("init_from_teacher_layers: need exactly " +
                                    std::to_string(student_cfg.num_layers) + " picked layers, got " +
                                    std::to_string(picked_layers.size()));
    for (int j : picked_layers)
        if (j < 1 || j > teacher.config.num_layers)
            throw std::invalid_argument("init_from_teacher_layers: teacher layer " + std::to_string(j) +
                                        " out of range [1, " + std::to_string(teacher.config.num_layers) + "]");
    TransformerModel m;
    m.config = student_cfg;
    auto copy = [](const Tensor& t) {
        Tensor c = t.detach();
        c.set_requires_grad(true);
        return c;
    };
    m.tok_emb = copy(teacher.tok_emb);
    m.pos_emb = copy(teacher.pos_emb);
    for (int j : picked_layers) {
        const LayerParams& src = teacher.layers[static_cast<std::size_t>(j - 1)];
        LayerParams l;
        l.wq = copy(src.wq); l.bq = copy(src.bq);
        l.wk = copy(src.wk); l.bk = copy(src.bk);
        l.wv = copy(src.wv); l.bv = copy(src.bv);
        l.wo = copy(src.wo); l.bo = copy(src.bo);
        l.ln1_g = copy(src.ln1_g); l.ln1_b = copy(src.ln1_b);
        l.ff1_w = copy(src.ff1_w); l.ff1_b = copy(src.ff1_b);
        l.ff2_w = copy(src.ff2_w); l.ff2_b = copy(src.ff2_b);
        l.ln2_g = copy(src.ln2_g); l.ln2_b = copy(src.ln2_b);
        m.layers.push_back(std::move(l));
    }
    m.out_w = copy(teacher.out_w);
    m.out_b = copy(teacher.out_b);
    return m;
}

// Encoder forward pass. Post-norm residual order: sublayer output is added to
// its input, then layer-normalized. Exposes every intermediate the
// distillation losses need.
inline ForwardTrace forward(const TransformerModel& model, const std::vector<int>& tokens,
                            const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len))
        throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of range [0, " +
                                        std::to_string(cfg.vocab_size) + ")");
    const std::size_t n = tokens.size();
    const std::size_t n_real = opts.n_real == 0 ? n : opts.n_real;
    if (n_real > n) throw std::invalid_argument("forward: n_real exceeds sequence length");
    Graph* g = opts.graph;
    const auto heads = static_cast<std::size_t>(cfg.num_heads);
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.head_size()));

    // Additive pad mask on attention scores: -1e9 on key columns >= n_real.
    Tensor score_mask;
    if (n_real < n) {
        score_mask = Tensor::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = n_real; j < n; ++j) score_mask(i, j) = -1e9;
    }

    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    ForwardTrace trace;
    Tensor h = ops::add(g, ops::embedding_rows(g, model.tok_emb, tokens),
                        ops::row_select(g, model.pos_emb, positions));
    trace.hidden_states.push_back(h);

    for (const LayerParams& l : model.layers) {
        Tensor q_all = ops::add_bias(g, ops::matmul(g, h, l.wq), l.bq);
        Tensor k_all = ops::add_bias(g, ops::matmul(g, h, l.wk), l.bk);
        Tensor v_all = ops::add_bias(g, ops::matmul(g, h, l.wv), l.bv);
        std::vector<Tensor> q = ops::split_cols(g, q_all, heads);
        std::vector<Tensor> k = ops::split_cols(g, k_all, heads);
        std::vector<Tensor> v = ops::split_cols(g, v_all, heads);

        std::vector<Tensor> head_outputs;
        std::vector<Tensor> attn_probs;
        head_outputs.reserve(heads);
        for (std::size_t a = 0; a < heads; ++a) {
            Tensor scores = ops::scale(g, ops::matmul(g, q[a], ops::transpose(g, k[a])), inv_sqrt_dk);
            if (n_real < n) scores = ops::add(g, scores, score_mask);
            Tensor probs = ops::softmax_rows(g, scores);
            attn_probs.push_back(probs);
            head_outputs.push_back(ops::matmul(g, probs, v[a]));
        }
        Tensor mha = ops::add_bias(g, ops::matmul(g, ops::concat_cols(g, head_outputs), l.wo), l.bo);
        h = ops::layernorm(g, ops::add(g, h, mha), l.ln1_g, l.ln1_b);

        Tensor ff = ops::add_bias(
            g, ops::matmul(g, ops::gelu(g, ops::add_bias(g, ops::matmul(g, h, l.ff1_w), l.ff1_b)), l.ff2_w), l.ff2_b);
        h = ops::layernorm(g, ops::add(g, h, ff), l.ln2_g, l.ln2_b);

        trace.hidden_states.push_back(h);
        trace.queries.push_back(std::move(q));
        trace.keys.push_back(std::move(k));
        trace.values.push_back(std::move(v));
        trace.attentions.push_back(std::move(attn_probs));
    }

    if (opts.with_logits) trace.logits = ops::add_bias(g, ops::matmul(g, h, model.out_w), model.out_b);
    return trace;
}

} // namespace kdlab
