#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "kdlab/tensor.hpp"
#include "kdlab/transformer.hpp"

namespace kdlab {

// phi: student layer index (1-based) -> set of teacher layer indices.
struct LayerMapping {
    int student_layers = 0;
    int teacher_layers = 0;
    std::map<int, std::vector<int>> phi; // sorted, deduplicated; absent key = empty set

    std::vector<int> mapped(int student_layer) const {
        auto it = phi.find(student_layer);
        return it == phi.end() ? std::vector<int>{} : it->second;
    }

    std::vector<std::pair<int, int>> pairs() const {
        std::vector<std::pair<int, int>> out;
        for (const auto& [i, js] : phi)
            for (int j : js) out.emplace_back(i, j);
        return out;
    }

    void validate() const {
        for (const auto& [i, js] : phi) {
            if (i < 1 || i > student_layers)
                throw std::invalid_argument("LayerMapping: student layer " + std::to_string(i) + " out of [1, " +
                                            std::to_string(student_layers) + "]");
            for (int j : js)
                if (j < 1 || j > teacher_layers)
                    throw std::invalid_argument("LayerMapping: teacher layer " + std::to_string(j) + " out of [1, " +
                                                std::to_string(teacher_layers) + "]");
        }
    }
};

namespace detail {

inline void check_mapping_args(int ls, int lt, const char* name) {
    if (ls < 1 || lt < ls)
        throw std::invalid_argument(std::string(name) + ": need 1 <= Ls <= Lt, got Ls=" + std::to_string(ls) +
                                    " Lt=" + std::to_string(lt));
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

} // namespace detail

// Only the last teacher layer, distilled into the last student layer.
inline LayerMapping mapping_single(int ls, int lt) {
    detail::check_mapping_args(ls, lt, "mapping_single");
    LayerMapping m{ls, lt, {}};
    m.phi[ls] = {lt};
    return m;
}

// phi(i) = {Lt - Ls + i}: the last Ls teacher layers, one per student layer.
inline LayerMapping mapping_last(int ls, int lt) {
    detail::check_mapping_args(ls, lt, "mapping_last");
    LayerMapping m{ls, lt, {}};
    for (int i = 1; i <= ls; ++i) m.phi[i] = {lt - ls + i};
    return m;
}

// phi(i) = {k*i} with k = ceil(Lt/Ls), clamped to Lt for non-divisible shapes.
inline LayerMapping mapping_uniform(int ls, int lt) {
    detail::check_mapping_args(ls, lt, "mapping_uniform");
    const int k = detail::ceil_div(lt, ls);
    LayerMapping m{ls, lt, {}};
    for (int i = 1; i <= ls; ++i) m.phi[i] = {std::min(k * i, lt)};
    return m;
}

// phi(i) = {k(i-1)+1, ..., min(k*i, Lt)}: k consecutive teacher layers per
// student layer, partitioning [1, Lt].
inline LayerMapping mapping_uniform_cons(int ls, int lt) {
    detail::check_mapping_args(ls, lt, "mapping_uniform_cons");
    const int k = detail::ceil_div(lt, ls);
    LayerMapping m{ls, lt, {}};
    for (int i = 1; i <= ls; ++i) {
        std::vector<int> js;
        for (int j = k * (i - 1) + 1; j <= std::min(k * i, lt); ++j) js.push_back(j);
        if (!js.empty()) m.phi[i] = std::move(js);
    }
    return m;
}

// Union of the Uniform and Last selections, deduplicated per student layer.
inline LayerMapping mapping_uniform_plus_last(int ls, int lt) {
    detail::check_mapping_args(ls, lt, "mapping_uniform_plus_last");
    const LayerMapping uni = mapping_uniform(ls, lt);
    const LayerMapping last = mapping_last(ls, lt);
    LayerMapping m{ls, lt, {}};
    for (int i = 1; i <= ls; ++i) {
        std::set<int> js;
        for (int j : uni.mapped(i)) js.insert(j);
        for (int j : last.mapped(i)) js.insert(j);
        m.phi[i] = std::vector<int>(js.begin(), js.end());
    }
    return m;
}

inline LayerMapping mapping_by_name(const std::string& name, int ls, int lt) {
    if (name == "single") return mapping_single(ls, lt);
    if (name == "last") return mapping_last(ls, lt);
    if (name == "uniform") return mapping_uniform(ls, lt);
    if (name == "uniform-cons") return mapping_uniform_cons(ls, lt);
    if (name == "uniform+last") return mapping_uniform_plus_last(ls, lt);
    throw std::invalid_argument("mapping_by_name: unknown strategy '" + name +
                                "' (expected single|last|uniform|uniform-cons|uniform+last)");
}

// Trainable linear transformations used by the projected-MSE losses.
struct ProjectionBank {
    // Hidden-state transfer: (student layer, teacher layer) -> d_h^S x d_h^T.
    std::map<std::pair<int, int>, Tensor> hidden;
    // Direct Q/K/V transfer: [alpha][relation head] -> d_r^S x d_r^T, alpha in {Q, K, V}.
    std::array<std::vector<Tensor>, 3> qkv;

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& [key, t] : hidden) out.push_back(t);
        for (const auto& per_alpha : qkv)
            for (const Tensor& t : per_alpha) out.push_back(t);
        return out;
    }

    void zero_grad() {
        for (Tensor& t : parameters()) t.zero_grad();
    }

    static ProjectionBank for_hidden(const LayerMapping& mapping, int dh_student, int dh_teacher, Rng& rng,
                                     bool identity_init = false) {
        ProjectionBank bank;
        for (const auto& [i, j] : mapping.pairs()) {
            if (identity_init) {
                if (dh_student != dh_teacher)
                    throw std::invalid_argument("ProjectionBank: identity init needs d_h^S == d_h^T");
                bank.hidden[{i, j}] = Tensor::eye(static_cast<std::size_t>(dh_student), true);
            } else {
                bank.hidden[{i, j}] = Tensor::trunc_normal({static_cast<std::size_t>(dh_student),
                                                            static_cast<std::size_t>(dh_teacher)},
                                                           rng, 0.02, true);
            }
        }
        return bank;
    }

    static ProjectionBank for_qkv(int relation_heads, int dr_student, int dr_teacher, Rng& rng,
                                  bool identity_init = false) {
        ProjectionBank bank;
        for (auto& per_alpha : bank.qkv) {
            for (int a = 0; a < relation_heads; ++a) {
                if (identity_init) {
                    if (dr_student != dr_teacher)
                        throw std::invalid_argument("ProjectionBank: identity init needs d_r^S == d_r^T");
                    per_alpha.push_back(Tensor::eye(static_cast<std::size_t>(dr_student), true));
                } else {
                    per_alpha.push_back(Tensor::trunc_normal({static_cast<std::size_t>(dr_student),
                                                              static_cast<std::size_t>(dr_teacher)},
                                                             rng, 0.02, true));
                }
            }
        }
        return bank;
    }
};

// Re-orthogonalizes the rows of every Q/K/V projection in place (modified
// Gram-Schmidt). Requires d_r^S <= d_r^T so rows can be orthonormal.
inline void orthogonalize_rows(Tensor& w) {
    const std::size_t m = w.rows(), n = w.cols();
    if (m > n)
        throw std::invalid_argument("orthogonalize_rows: " + shape_str(w.shape()) +
                                    " has more rows than columns; rows cannot be orthonormal");
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < i; ++p) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += w(i, j) * w(p, j);
            for (std::size_t j = 0; j < n; ++j) w(i, j) -= dot * w(p, j);
        }
        double norm = 0.0;
        for (std::size_t j = 0; j < n; ++j) norm += w(i, j) * w(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw std::runtime_error("orthogonalize_rows: degenerate (near-zero) row");
        for (std::size_t j = 0; j < n; ++j) w(i, j) /= norm;
    }
}

enum class Method { OutputDistribution, HiddenState, MiniLMv2, DirectMiniLM, CosineHiddenState };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::OutputDistribution: return "od";
        case Method::HiddenState: return "hs";
        case Method::MiniLMv2: return "minilmv2";
        case Method::DirectMiniLM: return "direct-minilm";
        case Method::CosineHiddenState: return "cosine-hs";
    }
    return "?";
}

inline Method method_by_name(const std::string& name) {
    if (name == "od") return Method::OutputDistribution;
    if (name == "hs") return Method::HiddenState;
    if (name == "minilmv2") return Method::MiniLMv2;
    if (name == "direct-minilm") return Method::DirectMiniLM;
    if (name == "cosine-hs") return Method::CosineHiddenState;
    throw std::invalid_argument("method_by_name: unknown method '" + name +
                                "' (expected od|hs|minilmv2|direct-minilm|cosine-hs)");
}

// Everything that selects and parameterizes one distillation objective.
struct DistillSpec {
    Method method = Method::HiddenState;
    LayerMapping mapping;                // HS / CosineHS
    int teacher_layer = 0;               // MiniLMv2 / DirectMiniLM (1-based)
    double temperature = 1.0;            // OD
    int relation_heads = 0;              // MiniLMv2 / DirectMiniLM
    bool orthogonality_constraint = false; // DirectMiniLM analysis mode
    bool od_all_positions = false;       // OD supervises all (vs masked) positions
    bool identity_projections = false;   // identity init for projected losses

    struct Validation {
        std::vector<std::string> errors;
        std::vector<std::string> warnings;
        bool ok() const { return errors.empty(); }
    };

    Validation validate(const ModelConfig& student, const ModelConfig& teacher) const {
        Validation v;
        const bool mha = method == Method::MiniLMv2 || method == Method::DirectMiniLM;
        const bool hs = method == Method::HiddenState || method == Method::CosineHiddenState;
        if (method == Method::OutputDistribution) {
            if (temperature <= 0.0) v.errors.push_back("output temperature must be > 0");
            if (student.vocab_size != teacher.vocab_size)
                v.errors.push_back("output distribution transfer needs equal student/teacher vocabularies");
        }
        if (hs) {
            if (mapping.phi.empty()) v.errors.push_back("hidden-state transfer needs a layer mapping");
            if (mapping.student_layers != student.num_layers || mapping.teacher_layers != teacher.num_layers)
                v.errors.push_back("layer mapping was built for (" + std::to_string(mapping.student_layers) + ", " +
                                   std::to_string(mapping.teacher_layers) + "), models are (" +
                                   std::to_string(student.num_layers) + ", " + std::to_string(teacher.num_layers) +
                                   ")");
            if (method == Method::CosineHiddenState && student.hidden_size != teacher.hidden_size)
                v.errors.push_back("cosine hidden-state transfer requires d_h^S == d_h^T");
        }
        if (mha) {
            if (relation_heads < 1) v.errors.push_back("relation head count must be >= 1");
            else {
                if (student.hidden_size % relation_heads != 0)
                    v.errors.push_back("relation head count " + std::to_string(relation_heads) +
                                       " does not divide student hidden size " + std::to_string(student.hidden_size));
                if (teacher.hidden_size % relation_heads != 0)
                    v.errors.push_back("relation head count " + std::to_string(relation_heads) +
                                       " does not divide teacher hidden size " + std::to_string(teacher.hidden_size));
            }
            if (teacher_layer < 1 || teacher_layer > teacher.num_layers)
                v.errors.push_back("teacher layer " + std::to_string(teacher_layer) + " out of range [1, " +
                                   std::to_string(teacher.num_layers) + "]");
            else if (teacher_layer < teacher.num_layers - 2)
                v.warnings.push_back("teacher layer " + std::to_string(teacher_layer) +
                                     " is outside the explored set {L^T, L^T-1, L^T-2} = {" +
                                     std::to_string(teacher.num_layers) + ", " +
                                     std::to_string(teacher.num_layers - 1) + ", " +
                                     std::to_string(teacher.num_layers - 2) + "}");
            if (method == Method::DirectMiniLM && orthogonality_constraint &&
                student.hidden_size > teacher.hidden_size)
                v.errors.push_back("orthogonality constraint needs d_r^S <= d_r^T");
        }
        return v;
    }
};

// --- losses -----------------------------------------------------------------

// Temperature-scaled output-distribution loss over the selected positions:
// T^2 * CE(softmax(z_T / T), softmax(z_S / T)), teacher side detached.
inline Tensor od_loss(Graph* g, const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
                      const std::vector<std::size_t>& positions) {
    if (temperature <= 0.0) throw std::invalid_argument("od_loss: temperature must be > 0");
    if (teacher_logits.shape() != student_logits.shape())
        throw std::invalid_argument("od_loss: logits shape mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                                    shape_str(student_logits.shape()));
    if (positions.empty()) throw std::invalid_argument("od_loss: no supervised positions selected");
    Tensor zs = ops::row_select(g, student_logits, positions);
    Tensor zt = ops::row_select(nullptr, teacher_logits, positions);
    Tensor target = ops::softmax_rows(nullptr, ops::scale(nullptr, zt, 1.0 / temperature));
    Tensor ce = ops::soft_cross_entropy(g, target, ops::scale(g, zs, 1.0 / temperature));
    return ops::scale(g, ce, temperature * temperature);
}

// Shared projected-MSE path: sum over pairs of MSE(student * W, target).
// Both the hidden-state loss and the direct Q/K/V loss feed it.
inline Tensor projected_mse_sum(Graph* g, const std::vector<std::tuple<Tensor, Tensor, Tensor>>& triples) {
    if (triples.empty()) throw std::invalid_argument("projected_mse_sum: no (student, projection, target) triples");
    Tensor total;
    bool first = true;
    for (const auto& [student, projection, target] : triples) {
        Tensor term = ops::mse(g, ops::matmul(g, student, projection), target);
        total = first ? term : ops::add(g, total, term);
        first = false;
    }
    return total;
}

// Eq-style hidden-state transfer: sum over mapped (i, j) pairs of
// MSE(H_i^S W_i^j, H_j^T).
inline Tensor hs_loss(Graph* g, const ForwardTrace& student, const ForwardTrace& teacher, const LayerMapping& mapping,
                      const ProjectionBank& projections) {
    std::vector<std::tuple<Tensor, Tensor, Tensor>> triples;
    for (const auto& [i, j] : mapping.pairs()) {
        auto it = projections.hidden.find({i, j});
        if (it == projections.hidden.end())
            throw std::invalid_argument("hs_loss: missing projection for mapped pair (" + std::to_string(i) + ", " +
                                        std::to_string(j) + ")");
        triples.emplace_back(student.hidden_states.at(static_cast<std::size_t>(i)), it->second,
                             teacher.hidden_states.at(static_cast<std::size_t>(j)).detach());
    }
    return projected_mse_sum(g, triples);
}

// Mean over mapped pairs and positions of (1 - cosine similarity).
inline Tensor cosine_hs_loss(Graph* g, const ForwardTrace& student, const ForwardTrace& teacher,
                             const LayerMapping& mapping) {
    auto pairs = mapping.pairs();
    if (pairs.empty()) throw std::invalid_argument("cosine_hs_loss: empty layer mapping");
    Tensor total;
    bool first = true;
    for (const auto& [i, j] : pairs) {
        const Tensor& hs = student.hidden_states.at(static_cast<std::size_t>(i));
        const Tensor ht = teacher.hidden_states.at(static_cast<std::size_t>(j)).detach();
        if (hs.cols() != ht.cols())
            throw std::invalid_argument("cosine_hs_loss: requires d_h^S == d_h^T, got " + shape_str(hs.shape()) +
                                        " vs " + shape_str(ht.shape()));
        Tensor term = ops::cosine_row_loss(g, hs, ht);
        total = first ? term : ops::add(g, total, term);
        first = false;
    }
    return ops::scale(g, total, 1.0 / static_cast<double>(pairs.size()));
}

// Concatenate per-head matrices along features, re-split into A_r equal parts.
inline std::vector<Tensor> concat_resplit(Graph* g, const std::vector<Tensor>& per_head, int relation_heads) {
    if (per_head.empty()) throw std::invalid_argument("concat_resplit: no input heads");
    Tensor all = ops::concat_cols(g, per_head);
    if (relation_heads < 1 || all.cols() % static_cast<std::size_t>(relation_heads) != 0)
        throw std::invalid_argument("concat_resplit: " + std::to_string(relation_heads) +
                                    " relation heads do not divide feature width " + std::to_string(all.cols()));
    return ops::split_cols(g, all, static_cast<std::size_t>(relation_heads));
}

// Scaled Gram logits A A^T / sqrt(d_r); softmax of these is the relation matrix.
inline Tensor relation_logits(Graph* g, const Tensor& slice) {
    ops::detail::require_rank2(slice, "relation_logits");
    const double inv = 1.0 / std::sqrt(static_cast<double>(slice.cols()));
    return ops::scale(g, ops::matmul(g, slice, ops::transpose(g, slice)), inv);
}

inline Tensor relation_matrix(Graph* g, const Tensor& slice) { return ops::softmax_rows(g, relation_logits(g, slice)); }

namespace detail {

// Gathers the re-split Q/K/V slices of one layer: result[alpha][a].
inline std::array<std::vector<Tensor>, 3> resplit_qkv(Graph* g, const ForwardTrace& trace, int layer,
                                                      int relation_heads) {
    const auto li = static_cast<std::size_t>(layer - 1);
    if (li >= trace.queries.size())
        throw std::invalid_argument("resplit_qkv: layer " + std::to_string(layer) + " out of range [1, " +
                                    std::to_string(trace.queries.size()) + "]");
    return {concat_resplit(g, trace.queries[li], relation_heads), concat_resplit(g, trace.keys[li], relation_heads),
            concat_resplit(g, trace.values[li], relation_heads)};
}

} // namespace detail

// Sum over alpha in {Q, K, V} and relation heads of CE between the teacher's
// relation matrix (detached target) and the student's relation logits.
inline Tensor minilmv2_loss(Graph* g, const ForwardTrace& student, const ForwardTrace& teacher, int student_layer,
                            int teacher_layer, int relation_heads) {
    if (student_layer != static_cast<int>(student.queries.size()))
        throw std::invalid_argument("minilmv2_loss: single mapping distills into the last student layer " +
                                    std::to_string(student.queries.size()) + ", got layer " +
                                    std::to_string(student_layer));
    auto s = detail::resplit_qkv(g, student, student_layer, relation_heads);
    auto t = detail::resplit_qkv(nullptr, teacher, teacher_layer, relation_heads);
    Tensor total;
    bool first = true;
    for (int alpha = 0; alpha < 3; ++alpha) {
        for (int a = 0; a < relation_heads; ++a) {
            Tensor target = relation_matrix(nullptr, t[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)]);
            Tensor logits = relation_logits(g, s[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)]);
            Tensor term = ops::soft_cross_entropy(g, target, logits);
            total = first ? term : ops::add(g, total, term);
            first = false;
        }
    }
    return total;
}

// Direct Q/K/V transfer: sum over alpha and relation heads of
// MSE(A^S W, A^T), sharing the projected-MSE path with hs_loss.
inline Tensor direct_minilm_loss(Graph* g, const ForwardTrace& student, const ForwardTrace& teacher, int student_layer,
                                 int teacher_layer, int relation_heads, const ProjectionBank& projections) {
    if (student_layer != static_cast<int>(student.queries.size()))
        throw std::invalid_argument("direct_minilm_loss: single mapping distills into the last student layer " +
                                    std::to_string(student.queries.size()) + ", got layer " +
                                    std::to_string(student_layer));
    auto s = detail::resplit_qkv(g, student, student_layer, relation_heads);
    auto t = detail::resplit_qkv(nullptr, teacher, teacher_layer, relation_heads);
    std::vector<std::tuple<Tensor, Tensor, Tensor>> triples;
    for (int alpha = 0; alpha < 3; ++alpha) {
        const auto& per_alpha = projections.qkv[static_cast<std::size_t>(alpha)];
        if (static_cast<int>(per_alpha.size()) != relation_heads)
            throw std::invalid_argument("direct_minilm_loss: missing projections (have " +
                                        std::to_string(per_alpha.size()) + ", need " + std::to_string(relation_heads) +
                                        " per alpha)");
        for (int a = 0; a < relation_heads; ++a)
            triples.emplace_back(s[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)],
                                 per_alpha[static_cast<std::size_t>(a)],
                                 t[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)].detach());
    }
    return projected_mse_sum(g, triples);
}

// The constrained-DirectMiniLM limit form: sum over alpha and relation heads
// of MSE between raw student and teacher Gram matrices.
inline Tensor gram_mse_loss(Graph* g, const ForwardTrace& student, const ForwardTrace& teacher, int student_layer,
                            int teacher_layer, int relation_heads) {
    auto s = detail::resplit_qkv(g, student, student_layer, relation_heads);
    auto t = detail::resplit_qkv(nullptr, teacher, teacher_layer, relation_heads);
    Tensor total;
    bool first = true;
    for (int alpha = 0; alpha < 3; ++alpha) {
        for (int a = 0; a < relation_heads; ++a) {
            const Tensor& as = s[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)];
            const Tensor& at = t[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(a)];
            Tensor gram_s = ops::matmul(g, as, ops::transpose(g, as));
            Tensor gram_t = ops::matmul(nullptr, at, ops::transpose(nullptr, at));
            Tensor term = ops::mse(g, gram_s, gram_t);
            total = first ? term : ops::add(g, total, term);
            first = false;
        }
    }
    return total;
}

} // namespace kdlab
