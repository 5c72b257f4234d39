#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "kdlab/transformer.hpp"

namespace kdlab {

struct LatencyRow {
    std::string preset;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    int runs = 0;
    int warmup = 0;
    int threads = 1;
    int batch = 1;
    int seq_len = 0;
    bool with_head = false;
    std::string timestamp;
};

struct LatencyReport {
    std::vector<LatencyRow> rows;

    std::string to_csv() const {
        std::ostringstream out;
        out << "preset,mean_ms,std_ms,runs,warmup,threads,batch,seq_len,with_head,timestamp\n";
        out << std::fixed << std::setprecision(4);
        for (const LatencyRow& r : rows)
            out << r.preset << ',' << r.mean_ms << ',' << r.std_ms << ',' << r.runs << ',' << r.warmup << ','
                << r.threads << ',' << r.batch << ',' << r.seq_len << ',' << (r.with_head ? 1 : 0) << ','
                << r.timestamp << '\n';
        return out.str();
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("latency report: cannot open '" + path + "' for writing");
        out << to_csv();
    }
};

struct BenchOptions {
    int batch = 1;
    int seq_len = 64;
    int runs = 5;
    int warmup = 2;
    int threads = 1;
    // Encoder-only timing by default: deployed students serve features, and
    // the 30K-vocab output head would otherwise dominate the small presets.
    bool with_head = false;
    std::uint64_t seed = 7;
};

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

// Times inference-mode forward passes of one model; warmup runs are discarded.
inline LatencyRow measure_latency(const TransformerModel& model, const std::string& preset_name,
                                  const BenchOptions& opts) {
    if (opts.runs < 5) throw std::invalid_argument("measure_latency: protocol requires at least 5 timed runs");
    if (opts.seq_len < 1 || opts.seq_len > model.config.max_seq_len)
        throw std::invalid_argument("measure_latency: seq_len out of range");
    Rng rng(opts.seed);
    std::vector<std::vector<int>> inputs;
    for (int b = 0; b < opts.batch; ++b) {
        std::vector<int> tokens(static_cast<std::size_t>(opts.seq_len));
        for (int& t : tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.config.vocab_size)));
        inputs.push_back(std::move(tokens));
    }
    ForwardOptions fwd;
    fwd.with_logits = opts.with_head;

    auto one_pass = [&] {
        for (const auto& tokens : inputs) {
            ForwardTrace trace = forward(model, tokens, fwd);
            (void)trace;
        }
    };
    for (int w = 0; w < opts.warmup; ++w) one_pass();

    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(opts.runs));
    for (int r = 0; r < opts.runs; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        one_pass();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(samples.size());

    LatencyRow row;
    row.preset = preset_name;
    row.mean_ms = mean;
    row.std_ms = std::sqrt(var);
    row.runs = opts.runs;
    row.warmup = opts.warmup;
    row.threads = opts.threads;
    row.batch = opts.batch;
    row.seq_len = opts.seq_len;
    row.with_head = opts.with_head;
    row.timestamp = utc_timestamp();
    return row;
}

// Random-initializes each preset in turn (memory is released between presets).
inline LatencyReport bench_presets(const std::vector<std::string>& presets, const BenchOptions& opts) {
    LatencyReport report;
    for (const std::string& name : presets) {
        const ModelConfig cfg = preset_config(name);
        TransformerModel model = init_parameters(cfg, opts.seed);
        report.rows.push_back(measure_latency(model, name, opts));
    }
    return report;
}

// Architecture-search reward: (1 - hs_loss) * (lat_s / (0.6 * lat_t))^-0.06.
inline double nas_reward(double hs_loss_value, double lat_s, double lat_t) {
    if (lat_s <= 0.0 || lat_t <= 0.0)
        throw std::invalid_argument("nas_reward: latencies must be positive (got lat_s=" + std::to_string(lat_s) +
                                    ", lat_t=" + std::to_string(lat_t) + ")");
    if (hs_loss_value < 0.0 || hs_loss_value > 1.0)
        throw std::invalid_argument("nas_reward: hs_loss must lie in [0, 1], got " + std::to_string(hs_loss_value));
    return (1.0 - hs_loss_value) * std::pow(lat_s / (0.6 * lat_t), -0.06);
}

} // namespace kdlab
