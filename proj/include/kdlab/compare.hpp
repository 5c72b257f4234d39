#pragma once

#include <atomic>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kdlab/training.hpp"

namespace kdlab {

// One (method, strategy) row of the comparison table.
struct CompareCellSpec {
    std::string method;        // od | hs | minilmv2 | direct-minilm | cosine-hs | multistage
    std::string strategy;      // mapping name for hs/cosine-hs/multistage, "L"/"L-1"/"L-2" for MHA methods
    int relation_heads = 0;    // 0 = per-method default
    double temperature = 1.0;
};

struct CompareConfig {
    std::vector<CompareCellSpec> cells;
    std::vector<std::string> students; // preset names
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    TrainConfig train;
    TrainConfig od_stage; // used by "multistage" cells
    ProbeConfig probe;
    int threads = 1;
    bool include_baseline = true; // random-init student, probe-finetuned
    bool include_teacher = true;
};

struct CompareCellResult {
    std::string method;
    std::string strategy;
    std::string student;
    std::vector<double> accuracies; // one per seed
    bool failed = false;
    std::string error;
    bool best_per_method = false;

    double mean() const {
        if (accuracies.empty()) return 0.0;
        double m = 0.0;
        for (double a : accuracies) m += a;
        return m / static_cast<double>(accuracies.size());
    }

    double stdev() const {
        if (accuracies.size() < 2) return 0.0;
        const double m = mean();
        double v = 0.0;
        for (double a : accuracies) v += (a - m) * (a - m);
        return std::sqrt(v / static_cast<double>(accuracies.size()));
    }
};

struct ComparisonTable {
    std::vector<CompareCellResult> cells;

    std::string to_csv() const {
        std::ostringstream out;
        out << "method,strategy,student,mean_accuracy,std_accuracy,seeds,best_per_method,status\n";
        out << std::fixed << std::setprecision(6);
        for (const CompareCellResult& c : cells) {
            out << c.method << ',' << c.strategy << ',' << c.student << ',';
            if (c.failed) out << ",," << c.accuracies.size() << ",0,failed:" << c.error;
            else
                out << c.mean() << ',' << c.stdev() << ',' << c.accuracies.size() << ','
                    << (c.best_per_method ? 1 : 0) << ",ok";
            out << '\n';
        }
        return out.str();
    }

    // Aligned-text view, derived from the same rows the CSV reports.
    std::string render() const {
        std::ostringstream out;
        out << std::left << std::setw(16) << "method" << std::setw(16) << "strategy" << std::setw(20) << "student"
            << std::setw(18) << "accuracy" << "best\n";
        out << std::string(74, '-') << '\n';
        for (const CompareCellResult& c : cells) {
            std::ostringstream acc;
            if (c.failed) acc << "FAILED";
            else acc << std::fixed << std::setprecision(3) << c.mean() << " (" << std::setprecision(3) << c.stdev() << ")";
            out << std::left << std::setw(16) << c.method << std::setw(16) << c.strategy << std::setw(20) << c.student
                << std::setw(18) << acc.str() << (c.best_per_method ? "*" : "") << '\n';
        }
        return out.str();
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("comparison table: cannot open '" + path + "' for writing");
        out << to_csv();
    }
};

namespace detail {

inline int teacher_layer_of(const std::string& strategy, int lt) {
    if (strategy == "L") return lt;
    if (strategy == "L-1") return lt - 1;
    if (strategy == "L-2") return lt - 2;
    throw std::invalid_argument("teacher layer strategy '" + strategy + "' not recognized (expected L|L-1|L-2)");
}

inline int default_relation_heads(const std::string& method, const ModelConfig& student, const ModelConfig& teacher) {
    // MiniLMv2 favors finer-grained relation heads (A_r > A_h); the direct
    // variant uses A_r = A_h. Both must divide the two hidden sizes.
    int ar = method == "minilmv2" ? 2 * student.num_heads : student.num_heads;
    while (ar > 1 && (student.hidden_size % ar != 0 || teacher.hidden_size % ar != 0)) --ar;
    return std::max(ar, 1);
}

} // namespace detail

inline DistillSpec cell_to_spec(const CompareCellSpec& cell, const ModelConfig& student, const ModelConfig& teacher) {
    DistillSpec spec;
    if (cell.method == "od") {
        spec.method = Method::OutputDistribution;
        spec.temperature = cell.temperature;
    } else if (cell.method == "hs" || cell.method == "cosine-hs" || cell.method == "multistage") {
        spec.method = cell.method == "cosine-hs" ? Method::CosineHiddenState : Method::HiddenState;
        spec.mapping = mapping_by_name(cell.strategy, student.num_layers, teacher.num_layers);
    } else if (cell.method == "minilmv2" || cell.method == "direct-minilm") {
        spec.method = cell.method == "minilmv2" ? Method::MiniLMv2 : Method::DirectMiniLM;
        spec.teacher_layer = detail::teacher_layer_of(cell.strategy, teacher.num_layers);
        spec.relation_heads =
            cell.relation_heads > 0 ? cell.relation_heads : detail::default_relation_heads(cell.method, student, teacher);
    } else {
        throw std::invalid_argument("unknown method '" + cell.method + "'");
    }
    return spec;
}

// Distills + probe-finetunes every (cell, student) over the configured seeds.
// Cells may run in parallel; each cell is deterministic given its seed list.
inline ComparisonTable run_comparison(const TransformerModel& teacher, const CompareConfig& config,
                                      const std::vector<std::vector<int>>& corpus, const Vocab& vocab,
                                      const std::vector<std::vector<int>>& probe_seqs,
                                      const std::vector<int>& probe_labels) {
    struct Job {
        CompareCellSpec cell;
        std::string student;
    };
    std::vector<Job> jobs;
    for (const auto& cell : config.cells)
        for (const std::string& student : config.students) jobs.push_back({cell, student});
    if (config.include_baseline)
        for (const std::string& student : config.students) jobs.push_back({{"baseline", "-"}, student});

    std::vector<CompareCellResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const Job& job = jobs[i];
            CompareCellResult& res = results[i];
            res.method = job.cell.method;
            res.strategy = job.cell.strategy;
            res.student = job.student;
            try {
                const ModelConfig student_cfg = preset_config(job.student);
                for (std::uint64_t seed : config.seeds) {
                    TransformerModel distilled;
                    if (job.cell.method == "baseline") {
                        distilled = init_parameters(student_cfg, seed);
                    } else if (job.cell.method == "multistage") {
                        DistillSpec hs_spec = cell_to_spec(job.cell, student_cfg, teacher.config);
                        DistillSpec od_spec;
                        od_spec.method = Method::OutputDistribution;
                        od_spec.temperature = job.cell.temperature;
                        TrainConfig hs_cfg = config.train;
                        hs_cfg.seed = seed;
                        TrainConfig od_cfg = config.od_stage;
                        od_cfg.seed = seed;
                        od_cfg.stage = "od-after-distill";
                        distilled = distill_multistage(teacher, student_cfg, hs_spec, od_spec, hs_cfg, od_cfg, corpus,
                                                       vocab)
                                        .student;
                    } else {
                        DistillSpec spec = cell_to_spec(job.cell, student_cfg, teacher.config);
                        TrainConfig cfg = config.train;
                        cfg.seed = seed;
                        distilled = distill(teacher, student_cfg, spec, cfg, corpus, vocab).student;
                    }
                    ProbeConfig probe = config.probe;
                    probe.seed = seed;
                    res.accuracies.push_back(probe_finetune(distilled, probe_seqs, probe_labels, probe));
                }
            } catch (const std::exception& e) {
                res.failed = true;
                res.error = e.what();
            }
        }
    };
    const int n_threads = std::max(config.threads, 1);
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    ComparisonTable table;
    table.cells = std::move(results);
    if (config.include_teacher) {
        CompareCellResult row;
        row.method = "teacher";
        row.strategy = "-";
        row.student = "teacher";
        for (std::uint64_t seed : config.seeds) {
            ProbeConfig probe = config.probe;
            probe.seed = seed;
            row.accuracies.push_back(probe_finetune(teacher, probe_seqs, probe_labels, probe));
        }
        table.cells.push_back(std::move(row));
    }

    // Best strategy per (method, student), mirroring the underline semantics.
    for (auto& c : table.cells) {
        if (c.failed || c.method == "baseline" || c.method == "teacher") continue;
        bool best = true;
        for (const auto& other : table.cells) {
            if (other.failed || &other == &c) continue;
            if (other.method == c.method && other.student == c.student && other.mean() > c.mean()) best = false;
        }
        c.best_per_method = best;
    }
    return table;
}

} // namespace kdlab
