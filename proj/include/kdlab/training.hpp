#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "kdlab/data.hpp"
#include "kdlab/objectives.hpp"
#include "kdlab/tensor.hpp"
#include "kdlab/transformer.hpp"

#include "json.hpp"

namespace kdlab {

// --- optimizer ----------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Per-parameter first/second moment accumulators plus the shared step count.
struct OptimizerState {
    AdamWConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;

    explicit OptimizerState(const std::vector<Tensor>& params, AdamWConfig cfg = {}) : config(cfg) {
        for (const Tensor& p : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }
};

// One decoupled-weight-decay Adam step with bias-corrected moments.
// Parameters with no gradient are decayed only.
inline void adamw_step(std::vector<Tensor>& params, OptimizerState& state, double lr) {
    if (params.size() != state.m.size())
        throw std::invalid_argument("adamw_step: optimizer state built for " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        auto& vals = p.values();
        const bool has_grad = p.has_grad();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double g = has_grad ? p.grad()[j] : 0.0;
            auto& mj = state.m[i][j];
            auto& vj = state.v[i][j];
            mj = state.config.beta1 * mj + (1.0 - state.config.beta1) * g;
            vj = state.config.beta2 * vj + (1.0 - state.config.beta2) * g * g;
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            vals[j] -= lr * (mhat / (std::sqrt(vhat) + state.config.eps) + state.config.weight_decay * vals[j]);
        }
    }
}

// --- schedule -----------------------------------------------------------------

struct TrainConfig {
    double peak_lr = 5e-4;
    double warmup_fraction = 0.05;
    long total_steps = 0;
    int batch_size = 32;
    int seq_len = 256;
    std::uint64_t seed = 1;
    std::string stage = "distill"; // teacher-pretrain | distill | od-after-distill
    AdamWConfig adamw;
    bool grad_clip = false;
    double clip_norm = 1.0;
    bool prefetch_batches = true;

    void validate() const {
        if (peak_lr <= 0.0) throw std::invalid_argument("TrainConfig: peak_lr must be > 0");
        if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
            throw std::invalid_argument("TrainConfig: warmup_fraction must be in (0, 1)");
        if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
        if (batch_size < 1 || seq_len < 4) throw std::invalid_argument("TrainConfig: bad batch_size/seq_len");
    }

    // Appendix-style defaults: peak 5e-4 for HS/MHA stages, 3e-4 for the OD
    // stage, 5% linear warmup then linear decay, batch 32, sequence length 256.
    static TrainConfig full_scale(const std::string& stage_name) {
        TrainConfig c;
        c.stage = stage_name;
        c.peak_lr = stage_name == "od-after-distill" ? 3e-4 : 5e-4;
        return c;
    }

    // Shrinks steps, batch and sequence length for CPU minutes; the schedule
    // shape (warmup fraction, decay) is untouched.
    static TrainConfig desk(const std::string& stage_name, long steps, std::uint64_t seed_value) {
        TrainConfig c = full_scale(stage_name);
        c.total_steps = steps;
        c.batch_size = 8;
        c.seq_len = 64;
        c.seed = seed_value;
        return c;
    }
};

// Linear warmup to peak over the first warmup_fraction of steps, then linear
// decay to zero at total_steps.
inline double lr_at(long step, const TrainConfig& config) {
    const double total = static_cast<double>(config.total_steps);
    const double warmup_end = config.warmup_fraction * total;
    if (step <= 0) return 0.0;
    if (step >= config.total_steps) return 0.0;
    const double s = static_cast<double>(step);
    if (s <= warmup_end) return config.peak_lr * s / warmup_end;
    return config.peak_lr * (total - s) / (total - warmup_end);
}

// --- run manifest ---------------------------------------------------------

struct LossRecord {
    long step = 0;
    std::string stage;
    double loss = 0.0;
    double lr = 0.0;
};

struct RunManifest {
    nlohmann::json spec;
    nlohmann::json train_config;
    std::string teacher_checkpoint;
    std::string final_checkpoint;
    std::vector<LossRecord> loss_log;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["spec"] = spec;
        j["train_config"] = train_config;
        j["teacher_checkpoint"] = teacher_checkpoint;
        j["final_checkpoint"] = final_checkpoint;
        nlohmann::json log = nlohmann::json::array();
        for (const LossRecord& r : loss_log) log.push_back({{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr}});
        j["loss_log"] = log;
        return j;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("manifest: cannot open '" + path + "' for writing");
        out << to_json().dump(2) << '\n';
    }

    void save_loss_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("loss log: cannot open '" + path + "' for writing");
        out << "step,stage,loss,lr\n";
        out.precision(17);
        for (const LossRecord& r : loss_log) out << r.step << ',' << r.stage << ',' << r.loss << ',' << r.lr << '\n';
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"peak_lr", c.peak_lr},        {"warmup_fraction", c.warmup_fraction},
            {"total_steps", c.total_steps}, {"batch_size", c.batch_size},
            {"seq_len", c.seq_len},         {"seed", c.seed},
            {"stage", c.stage},             {"grad_clip", c.grad_clip}};
}

inline nlohmann::json spec_to_json(const DistillSpec& spec) {
    nlohmann::json j;
    j["method"] = method_name(spec.method);
    if (spec.method == Method::HiddenState || spec.method == Method::CosineHiddenState) {
        nlohmann::json phi;
        for (const auto& [i, js] : spec.mapping.phi) phi[std::to_string(i)] = js;
        j["mapping"] = phi;
    } else if (spec.method == Method::MiniLMv2 || spec.method == Method::DirectMiniLM) {
        j["teacher_layer"] = spec.teacher_layer;
        j["relation_heads"] = spec.relation_heads;
        if (spec.method == Method::DirectMiniLM) j["orthogonality_constraint"] = spec.orthogonality_constraint;
    } else {
        j["temperature"] = spec.temperature;
        j["od_all_positions"] = spec.od_all_positions;
    }
    return j;
}

// --- deterministic batch stream -------------------------------------------

// Yields batch `b` as a pure function of (dataset, seed, b): sequence order
// reshuffles per epoch, MLM corruption reseeds per batch. A bounded prefetch
// thread may run ahead; results cannot depend on the overlap.
class BatchStream {
public:
    BatchStream(const std::vector<std::vector<int>>& sequences, const std::vector<int>& probe_labels,
                std::size_t batch_size, std::size_t max_len, std::uint64_t seed, MaskOptions mask_opts,
                const Vocab& vocab)
        : sequences_(sequences), probe_labels_(probe_labels), batch_size_(batch_size), max_len_(max_len), seed_(seed),
          mask_opts_(mask_opts), vocab_(vocab) {
        if (sequences.empty()) throw std::invalid_argument("BatchStream: empty corpus");
        if (sequences.size() < batch_size)
            throw std::invalid_argument("BatchStream: corpus smaller than one batch (" +
                                        std::to_string(sequences.size()) + " < " + std::to_string(batch_size) + ")");
        batches_per_epoch_ = sequences.size() / batch_size;
    }

    std::size_t batches_per_epoch() const { return batches_per_epoch_; }

    Batch batch_at(std::size_t step) const {
        const std::size_t epoch = step / batches_per_epoch_;
        const std::size_t slot = step % batches_per_epoch_;
        std::vector<std::size_t> order(sequences_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(seed_ * 0x9E3779B97F4A7C15ull + epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(slot * batch_size_),
                                         order.begin() + static_cast<std::ptrdiff_t>((slot + 1) * batch_size_));
        Batch b = make_batch(sequences_, probe_labels_, indices, max_len_);
        if (mask_opts_.mask_prob > 0.0) b = mask_batch(b, mask_opts_, seed_ ^ (0xA5A5A5A5ull + step * 0x100000001B3ull), vocab_);
        return b;
    }

private:
    const std::vector<std::vector<int>>& sequences_;
    const std::vector<int>& probe_labels_;
    std::size_t batch_size_;
    std::size_t max_len_;
    std::uint64_t seed_;
    MaskOptions mask_opts_;
    const Vocab& vocab_;
    std::size_t batches_per_epoch_ = 0;
};

// Bounded single-producer handoff queue (capacity 2) so batch assembly can
// overlap the previous step's compute.
class BatchPrefetcher {
public:
    BatchPrefetcher(const BatchStream& stream, long total_steps, bool enabled) : stream_(stream) {
        if (!enabled) return;
        worker_ = std::thread([this, total_steps] {
            for (long s = 0; s < total_steps; ++s) {
                Batch b = stream_.batch_at(static_cast<std::size_t>(s));
                std::unique_lock<std::mutex> lk(mu_);
                cv_space_.wait(lk, [this] { return queue_.size() < 2 || stopped_; });
                if (stopped_) return;
                queue_.push_back(std::move(b));
                cv_item_.notify_one();
            }
        });
    }

    ~BatchPrefetcher() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stopped_ = true;
        }
        cv_space_.notify_all();
        if (worker_.joinable()) worker_.join();
    }

    Batch next(long step) {
        if (!worker_.joinable()) return stream_.batch_at(static_cast<std::size_t>(step));
        std::unique_lock<std::mutex> lk(mu_);
        cv_item_.wait(lk, [this] { return !queue_.empty(); });
        Batch b = std::move(queue_.front());
        queue_.pop_front();
        cv_space_.notify_one();
        return b;
    }

private:
    const BatchStream& stream_;
    std::thread worker_;
    std::mutex mu_;
    std::condition_variable cv_item_, cv_space_;
    std::deque<Batch> queue_;
    bool stopped_ = false;
};

// --- shared loop pieces -----------------------------------------------------

namespace detail {

inline void clip_gradients(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor& p : params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double s = max_norm / norm;
    for (Tensor& p : params)
        if (p.has_grad())
            for (double& g : p.grad_mutable()) g *= s;
}

inline std::vector<std::size_t> supervised_positions(const Batch& batch, std::size_t row) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < batch.n_real[row]; ++c)
        if (batch.label(row, c) >= 0) out.push_back(c);
    return out;
}

inline std::vector<std::size_t> real_positions(const Batch& batch, std::size_t row) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < batch.n_real[row]; ++c) out.push_back(c);
    return out;
}

// Masked-LM cross entropy for one row: -log softmax(logits)[label], averaged
// over this row's supervised positions (weight = count for batch averaging).
inline Tensor mlm_row_loss(Graph* g, const Tensor& logits, const Batch& batch, std::size_t row,
                           const std::vector<std::size_t>& positions) {
    const std::size_t v = logits.cols();
    Tensor selected = ops::row_select(g, logits, positions);
    Tensor target = Tensor::zeros({positions.size(), v});
    for (std::size_t r = 0; r < positions.size(); ++r)
        target(r, static_cast<std::size_t>(batch.label(row, positions[r]))) = 1.0;
    return ops::soft_cross_entropy(g, target, selected);
}

inline double checksum(const std::vector<Tensor>& params) {
    double acc = 0.0;
    std::size_t k = 1;
    for (const Tensor& p : params)
        for (double v : p.values()) acc += v * static_cast<double>(k++ % 97);
    return acc;
}

} // namespace detail

// --- teacher pretraining ------------------------------------------------------

struct PretrainResult {
    TransformerModel model;
    RunManifest manifest;
};

// Masked-language-model pretraining of a toy teacher on the given corpus.
inline PretrainResult pretrain_teacher(const std::vector<std::vector<int>>& corpus, const Vocab& vocab,
                                       const ModelConfig& model_cfg, const TrainConfig& config,
                                       std::function<void(long, double)> on_step = nullptr) {
    config.validate();
    if (corpus.size() < static_cast<std::size_t>(config.batch_size))
        throw std::invalid_argument("pretrain_teacher: corpus smaller than one batch");
    TransformerModel model = init_parameters(model_cfg, config.seed);
    std::vector<Tensor> params = model.parameters();
    OptimizerState opt(params, config.adamw);
    const std::vector<int> no_labels;
    BatchStream stream(corpus, no_labels, static_cast<std::size_t>(config.batch_size),
                       static_cast<std::size_t>(config.seq_len), config.seed, MaskOptions{}, vocab);
    BatchPrefetcher prefetch(stream, config.total_steps, config.prefetch_batches);

    RunManifest manifest;
    manifest.train_config = train_config_to_json(config);
    manifest.spec = {{"method", "mlm-pretrain"}};
    for (long step = 0; step < config.total_steps; ++step) {
        Batch batch = prefetch.next(step);
        Graph graph;
        Tensor loss;
        std::size_t total_positions = 0;
        std::vector<std::pair<Tensor, std::size_t>> row_losses;
        for (std::size_t r = 0; r < batch.batch_size; ++r) {
            auto positions = detail::supervised_positions(batch, r);
            if (positions.empty()) continue;
            ForwardOptions fwd;
            fwd.graph = &graph;
            std::vector<int> row = batch.row(r);
            row.resize(batch.n_real[r]);
            ForwardTrace trace = forward(model, row, fwd);
            row_losses.emplace_back(detail::mlm_row_loss(&graph, trace.logits, batch, r, positions), positions.size());
            total_positions += positions.size();
        }
        if (row_losses.empty()) continue;
        bool first = true;
        for (auto& [row_loss, n] : row_losses) {
            Tensor weighted = ops::scale(&graph, row_loss, static_cast<double>(n) / static_cast<double>(total_positions));
            loss = first ? weighted : ops::add(&graph, loss, weighted);
            first = false;
        }
        model.zero_grad();
        graph.backward(loss);
        if (config.grad_clip) detail::clip_gradients(params, config.clip_norm);
        const double lr = lr_at(step + 1, config);
        adamw_step(params, opt, lr);
        manifest.loss_log.push_back({step, "teacher-pretrain", loss.item(), lr});
        if (on_step) on_step(step, loss.item());
    }
    return {std::move(model), std::move(manifest)};
}

// Masked-token accuracy of a model over held-out sequences.
inline double mlm_accuracy(const TransformerModel& model, const std::vector<std::vector<int>>& heldout,
                           const Vocab& vocab, std::uint64_t seed, std::size_t max_len) {
    const std::vector<int> no_labels;
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < heldout.size(); ++i) {
        Batch b = make_batch(heldout, no_labels, {i}, max_len);
        b = mask_batch(b, MaskOptions{}, seed + i, vocab);
        auto positions = detail::supervised_positions(b, 0);
        if (positions.empty()) continue;
        ForwardTrace trace = forward(model, b.row(0));
        for (std::size_t pos : positions) {
            const double* row = trace.logits.data() + pos * trace.logits.cols();
            std::size_t best = 0;
            for (std::size_t jv = 1; jv < trace.logits.cols(); ++jv)
                if (row[jv] > row[best]) best = jv;
            correct += static_cast<int>(best) == b.label(0, pos) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// Accuracy of always predicting the most frequent supervised token.
inline double majority_token_accuracy(const std::vector<std::vector<int>>& heldout, const Vocab& vocab,
                                      std::uint64_t seed, std::size_t max_len) {
    const std::vector<int> no_labels;
    std::map<int, std::size_t> freq;
    for (std::size_t i = 0; i < heldout.size(); ++i) {
        Batch b = make_batch(heldout, no_labels, {i}, max_len);
        b = mask_batch(b, MaskOptions{}, seed + i, vocab);
        for (std::size_t pos : detail::supervised_positions(b, 0)) ++freq[b.label(0, pos)];
    }
    std::size_t best = 0, total = 0;
    for (const auto& [tok, n] : freq) {
        total += n;
        best = std::max(best, n);
    }
    return total == 0 ? 0.0 : static_cast<double>(best) / static_cast<double>(total);
}

// --- distillation ---------------------------------------------------------

struct DistillResult {
    TransformerModel student;
    ProjectionBank projections;
    RunManifest manifest;
};

struct DistillInit {
    // Optional teacher-layer copy init (architecture-constrained case).
    std::vector<int> teacher_layers;
};

// Runs one distillation objective in isolation, training the student and any
// projections jointly. Teacher parameters are never touched.
inline DistillResult distill(const TransformerModel& teacher, const ModelConfig& student_cfg, const DistillSpec& spec,
                             const TrainConfig& config, const std::vector<std::vector<int>>& corpus,
                             const Vocab& vocab, const DistillInit& init = {},
                             std::function<void(long, double)> on_step = nullptr,
                             const TransformerModel* initial_student = nullptr) {
    config.validate();
    auto validation = spec.validate(student_cfg, teacher.config);
    if (!validation.ok()) {
        std::string msg = "distill: invalid spec:";
        for (const std::string& e : validation.errors) msg += "\n  - " + e;
        throw std::invalid_argument(msg);
    }

    TransformerModel student;
    if (initial_student != nullptr) {
        student = initial_student->clone();
    } else if (!init.teacher_layers.empty()) {
        student = init_from_teacher_layers(student_cfg, teacher, init.teacher_layers);
    } else {
        student = init_parameters(student_cfg, config.seed);
    }
    student.set_requires_grad(true);

    Rng proj_rng(config.seed ^ 0xBEEFCAFEull);
    ProjectionBank projections;
    if (spec.method == Method::HiddenState) {
        projections = ProjectionBank::for_hidden(spec.mapping, student_cfg.hidden_size, teacher.config.hidden_size,
                                                 proj_rng, spec.identity_projections);
    } else if (spec.method == Method::DirectMiniLM) {
        projections = ProjectionBank::for_qkv(spec.relation_heads, student_cfg.hidden_size / spec.relation_heads,
                                              teacher.config.hidden_size / spec.relation_heads, proj_rng,
                                              spec.identity_projections);
        if (spec.orthogonality_constraint)
            for (auto& per_alpha : projections.qkv)
                for (Tensor& w : per_alpha) orthogonalize_rows(w);
    }

    std::vector<Tensor> params = student.parameters();
    for (const Tensor& t : projections.parameters()) params.push_back(t);
    OptimizerState opt(params, config.adamw);

    // OD transfer supervises MLM-corrupted positions by default; the other
    // objectives consume clean sequences.
    MaskOptions mask_opts;
    mask_opts.mask_prob = spec.method == Method::OutputDistribution && !spec.od_all_positions ? 0.15 : 0.0;
    const std::vector<int> no_labels;
    BatchStream stream(corpus, no_labels, static_cast<std::size_t>(config.batch_size),
                       static_cast<std::size_t>(config.seq_len), config.seed, mask_opts, vocab);
    BatchPrefetcher prefetch(stream, config.total_steps, config.prefetch_batches);

    RunManifest manifest;
    manifest.spec = spec_to_json(spec);
    manifest.train_config = train_config_to_json(config);

    const int last_student_layer = student_cfg.num_layers;
    for (long step = 0; step < config.total_steps; ++step) {
        Batch batch = prefetch.next(step);
        Graph graph;
        std::vector<std::pair<Tensor, double>> row_losses; // (loss, weight)
        double total_weight = 0.0;
        for (std::size_t r = 0; r < batch.batch_size; ++r) {
            std::vector<int> row = batch.row(r);
            row.resize(batch.n_real[r]); // forward the real-token prefix only
            ForwardOptions teacher_fwd; // no graph: teacher side is detached
            teacher_fwd.with_logits = spec.method == Method::OutputDistribution;
            ForwardOptions student_fwd = teacher_fwd;
            student_fwd.graph = &graph;
            Tensor row_loss;
            double weight = 1.0;
            if (spec.method == Method::OutputDistribution) {
                auto positions = spec.od_all_positions ? detail::real_positions(batch, r)
                                                       : detail::supervised_positions(batch, r);
                if (positions.empty()) continue;
                ForwardTrace ts = forward(student, row, student_fwd);
                ForwardTrace tt = forward(teacher, row, teacher_fwd);
                row_loss = od_loss(&graph, tt.logits, ts.logits, spec.temperature, positions);
                weight = static_cast<double>(positions.size());
            } else {
                ForwardTrace ts = forward(student, row, student_fwd);
                ForwardTrace tt = forward(teacher, row, teacher_fwd);
                switch (spec.method) {
                    case Method::HiddenState:
                        row_loss = hs_loss(&graph, ts, tt, spec.mapping, projections);
                        break;
                    case Method::CosineHiddenState:
                        row_loss = cosine_hs_loss(&graph, ts, tt, spec.mapping);
                        break;
                    case Method::MiniLMv2:
                        row_loss = minilmv2_loss(&graph, ts, tt, last_student_layer, spec.teacher_layer,
                                                 spec.relation_heads);
                        break;
                    case Method::DirectMiniLM:
                        row_loss = direct_minilm_loss(&graph, ts, tt, last_student_layer, spec.teacher_layer,
                                                      spec.relation_heads, projections);
                        break;
                    default:
                        throw std::logic_error("distill: unhandled method");
                }
            }
            row_losses.emplace_back(row_loss, weight);
            total_weight += weight;
        }
        if (row_losses.empty()) continue;
        Tensor loss;
        bool first = true;
        for (auto& [row_loss, weight] : row_losses) {
            Tensor weighted = ops::scale(&graph, row_loss, weight / total_weight);
            loss = first ? weighted : ops::add(&graph, loss, weighted);
            first = false;
        }
        student.zero_grad();
        projections.zero_grad();
        graph.backward(loss);
        if (config.grad_clip) detail::clip_gradients(params, config.clip_norm);
        const double lr = lr_at(step + 1, config);
        adamw_step(params, opt, lr);
        if (spec.method == Method::DirectMiniLM && spec.orthogonality_constraint)
            for (auto& per_alpha : projections.qkv)
                for (Tensor& w : per_alpha) orthogonalize_rows(w);
        manifest.loss_log.push_back({step, config.stage, loss.item(), lr});
        if (on_step) on_step(step, loss.item());
    }
    return {std::move(student), std::move(projections), std::move(manifest)};
}

// Multi-stage distillation: an HS-style stage, then an OD stage initialized
// from the stage-1 checkpoint (projections are dropped; Eq.-5-style transfer
// has none).
inline DistillResult distill_multistage(const TransformerModel& teacher, const ModelConfig& student_cfg,
                                        const DistillSpec& hs_spec, const DistillSpec& od_spec,
                                        const TrainConfig& hs_config, const TrainConfig& od_config,
                                        const std::vector<std::vector<int>>& corpus, const Vocab& vocab,
                                        std::function<void(long, double)> on_step = nullptr) {
    if (od_spec.method != Method::OutputDistribution)
        throw std::invalid_argument("distill_multistage: stage 2 must be output-distribution transfer");
    DistillResult stage1 = distill(teacher, student_cfg, hs_spec, hs_config, corpus, vocab, {}, on_step);
    DistillResult stage2 =
        distill(teacher, student_cfg, od_spec, od_config, corpus, vocab, {}, on_step, &stage1.student);
    RunManifest manifest;
    manifest.spec = {{"stage1", stage1.manifest.spec}, {"stage2", stage2.manifest.spec}};
    manifest.train_config = {{"stage1", stage1.manifest.train_config}, {"stage2", stage2.manifest.train_config}};
    for (const LossRecord& r : stage1.manifest.loss_log) manifest.loss_log.push_back(r);
    for (const LossRecord& r : stage2.manifest.loss_log) {
        LossRecord shifted = r;
        shifted.step += hs_config.total_steps;
        manifest.loss_log.push_back(shifted);
    }
    stage2.manifest = std::move(manifest);
    return stage2;
}

// --- probe finetuning -------------------------------------------------------

struct ProbeConfig {
    long steps = 300;
    double lr = 0.05;
    std::uint64_t seed = 1;
    double train_fraction = 0.8;
    bool finetune_body = false; // default: linear probe on frozen features
    long body_steps = 0;        // used only when finetune_body
    double body_lr = 1e-4;
};

// Attaches a linear 2-way head on the first-position hidden state of the last
// layer, trains it, and reports held-out accuracy.
inline double probe_finetune(const TransformerModel& model_in, const std::vector<std::vector<int>>& sequences,
                             const std::vector<int>& labels, const ProbeConfig& cfg) {
    if (sequences.size() != labels.size() || sequences.size() < 8)
        throw std::invalid_argument("probe_finetune: need matched sequences/labels (at least 8)");
    int n_classes = 0;
    for (int l : labels) n_classes = std::max(n_classes, l + 1);
    if (n_classes < 2) throw std::invalid_argument("probe_finetune: need at least two classes");

    TransformerModel model = model_in.clone();
    const auto dh = static_cast<std::size_t>(model.config.hidden_size);
    const auto max_len = static_cast<std::size_t>(model.config.max_seq_len);
    const std::size_t n_train = static_cast<std::size_t>(cfg.train_fraction * static_cast<double>(sequences.size()));

    Rng rng(cfg.seed);
    Tensor head_w = Tensor::trunc_normal({dh, static_cast<std::size_t>(n_classes)}, rng, 0.02, true);
    Tensor head_b = Tensor::zeros({static_cast<std::size_t>(n_classes)}, true);

    auto cls_state = [&](const std::vector<int>& seq, Graph* g) {
        ForwardOptions fwd;
        fwd.graph = g;
        fwd.with_logits = false;
        ForwardTrace trace = forward(model, wrap_sequence(seq, max_len), fwd);
        return ops::row_select(g, trace.hidden_states.back(), {0});
    };

    // Frozen body: compute first-position features once.
    std::vector<Tensor> features;
    if (!cfg.finetune_body) {
        features.reserve(sequences.size());
        for (const auto& seq : sequences) features.push_back(cls_state(seq, nullptr));
    } else {
        model.set_requires_grad(true);
        std::vector<Tensor> params = model.parameters();
        params.push_back(head_w);
        params.push_back(head_b);
        OptimizerState opt(params, {});
        for (long step = 0; step < cfg.body_steps; ++step) {
            const std::size_t i = rng.below(n_train);
            Graph graph;
            Tensor logits = ops::add_bias(&graph, ops::matmul(&graph, cls_state(sequences[i], &graph), head_w), head_b);
            Tensor target = Tensor::zeros({1, static_cast<std::size_t>(n_classes)});
            target(0, static_cast<std::size_t>(labels[i])) = 1.0;
            Tensor loss = ops::soft_cross_entropy(&graph, target, logits);
            for (Tensor& p : params) p.zero_grad();
            graph.backward(loss);
            adamw_step(params, opt, cfg.body_lr);
        }
        features.reserve(sequences.size());
        for (const auto& seq : sequences) features.push_back(cls_state(seq, nullptr));
    }

    // Full-batch Adam on the linear head over the training split.
    std::vector<Tensor> head_params = {head_w, head_b};
    OptimizerState opt(head_params, {});
    for (long step = 0; step < cfg.steps; ++step) {
        Graph graph;
        Tensor loss;
        bool first = true;
        for (std::size_t i = 0; i < n_train; ++i) {
            Tensor logits = ops::add_bias(&graph, ops::matmul(&graph, features[i], head_w), head_b);
            Tensor target = Tensor::zeros({1, static_cast<std::size_t>(n_classes)});
            target(0, static_cast<std::size_t>(labels[i])) = 1.0;
            Tensor term = ops::soft_cross_entropy(&graph, target, logits);
            loss = first ? term : ops::add(&graph, loss, term);
            first = false;
        }
        loss = ops::scale(&graph, loss, 1.0 / static_cast<double>(n_train));
        head_w.zero_grad();
        head_b.zero_grad();
        graph.backward(loss);
        adamw_step(head_params, opt, cfg.lr);
    }

    std::size_t correct = 0, total = 0;
    for (std::size_t i = n_train; i < sequences.size(); ++i) {
        Tensor logits = ops::add_bias(nullptr, ops::matmul(nullptr, features[i], head_w), head_b);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits(0, c) > logits(0, best)) best = c;
        correct += static_cast<int>(best) == labels[i] ? 1 : 0;
        ++total;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Checksum used by tests to prove the teacher is never updated.
inline double parameter_checksum(const TransformerModel& model) { return detail::checksum(model.parameters()); }

} // namespace kdlab
