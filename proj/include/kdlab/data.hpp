#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdlab/rng.hpp"

namespace kdlab {

// Whitespace-token vocabulary with fixed reserved ids.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kReserved = 5;

    Vocab() : id_to_token_{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"} { reindex(); }

    int capacity = 0; // the |V| the paired model uses; ids never reach it

    int size() const { return static_cast<int>(id_to_token_.size()); }

    int id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    const std::string& token_of(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        id_to_token_.push_back(token);
        const int id = static_cast<int>(id_to_token_.size()) - 1;
        token_to_id_[token] = id;
        return id;
    }

    std::vector<int> encode(const std::string& line) const {
        std::vector<int> ids;
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) ids.push_back(id_of(tok));
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token_of(ids[i]);
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("vocab: cannot open '" + path + "' for writing");
        out << capacity << '\n';
        for (std::size_t i = kReserved; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("vocab: cannot open '" + path + "'");
        Vocab v;
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("vocab: empty file '" + path + "'");
        v.capacity = std::stoi(line);
        while (std::getline(in, line))
            if (!line.empty()) v.add(line);
        return v;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;

    void reindex() {
        token_to_id_.clear();
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<int>(i);
    }
};

// Frequency-ranked tokens up to max_size total ids; ties break lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (max_size < Vocab::kReserved + 1)
        throw std::invalid_argument("build_vocab: max_size must leave room for reserved ids");
    std::map<std::string, std::size_t> freq;
    for (const std::string& line : corpus) {
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) ++freq[tok];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    v.capacity = max_size;
    for (const auto& [tok, n] : ranked) {
        if (v.size() >= max_size) break;
        v.add(tok);
    }
    return v;
}

// One padded batch: ids/mask/labels are batch x width row-major.
struct Batch {
    std::size_t batch_size = 0;
    std::size_t width = 0;
    std::vector<int> ids;            // padded with kPad
    std::vector<int> attention_mask; // 1 over real tokens, 0 over padding
    std::vector<int> mlm_labels;     // original id at corrupted positions, -1 elsewhere
    std::vector<int> probe_labels;   // one per sequence, -1 if absent
    std::vector<std::size_t> n_real; // real tokens per row

    int id(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
    int label(std::size_t r, std::size_t c) const { return mlm_labels[r * width + c]; }

    std::vector<int> row(std::size_t r) const {
        return std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(r * width),
                                ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
    }
};

// Wraps each encoded sequence as [CLS] tokens [SEP], truncated to max_len.
inline std::vector<int> wrap_sequence(const std::vector<int>& ids, std::size_t max_len) {
    if (max_len < 3) throw std::invalid_argument("wrap_sequence: max_len must be >= 3");
    std::vector<int> out;
    out.push_back(Vocab::kCls);
    for (std::size_t i = 0; i < ids.size() && i + 2 < max_len; ++i) out.push_back(ids[i]);
    out.push_back(Vocab::kSep);
    return out;
}

// Assembles rows `indices` of `sequences` into one batch padded to the
// longest row, never beyond max_len.
inline Batch make_batch(const std::vector<std::vector<int>>& sequences, const std::vector<int>& probe_labels,
                        const std::vector<std::size_t>& indices, std::size_t max_len) {
    Batch b;
    b.batch_size = indices.size();
    std::vector<std::vector<int>> rows;
    rows.reserve(indices.size());
    std::size_t width = 0;
    for (std::size_t idx : indices) {
        rows.push_back(wrap_sequence(sequences.at(idx), max_len));
        width = std::max(width, rows.back().size());
    }
    b.width = width;
    b.ids.assign(b.batch_size * width, Vocab::kPad);
    b.attention_mask.assign(b.batch_size * width, 0);
    b.mlm_labels.assign(b.batch_size * width, -1);
    b.n_real.resize(b.batch_size);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        b.n_real[r] = rows[r].size();
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            b.ids[r * width + c] = rows[r][c];
            b.attention_mask[r * width + c] = 1;
        }
        b.probe_labels.push_back(probe_labels.empty() ? -1 : probe_labels.at(indices[r]));
    }
    return b;
}

struct MaskOptions {
    double mask_prob = 0.15;
    bool use_80_10_10 = true; // false: every selected position becomes [MASK]
};

// Standard MLM corruption: Bernoulli(mask_prob) over non-special tokens,
// then 80% [MASK] / 10% random token / 10% keep. Labels record original ids.
inline Batch mask_batch(const Batch& batch, const MaskOptions& opts, std::uint64_t seed, const Vocab& vocab) {
    if (opts.mask_prob < 0.0 || opts.mask_prob > 1.0)
        throw std::invalid_argument("mask_batch: mask_prob must be in [0, 1]");
    if (vocab.size() <= Vocab::kReserved)
        throw std::invalid_argument("mask_batch: vocabulary has no maskable tokens");
    Batch out = batch;
    Rng rng(seed);
    for (std::size_t r = 0; r < out.batch_size; ++r) {
        for (std::size_t c = 0; c < out.n_real[r]; ++c) {
            const int tok = out.ids[r * out.width + c];
            if (tok < Vocab::kReserved) continue;
            if (!rng.bernoulli(opts.mask_prob)) continue;
            out.mlm_labels[r * out.width + c] = tok;
            if (!opts.use_80_10_10) {
                out.ids[r * out.width + c] = Vocab::kMask;
                continue;
            }
            const double roll = rng.uniform();
            if (roll < 0.8) {
                out.ids[r * out.width + c] = Vocab::kMask;
            } else if (roll < 0.9) {
                out.ids[r * out.width + c] =
                    Vocab::kReserved + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.size() - Vocab::kReserved)));
            } // else keep the original token
        }
    }
    return out;
}

// --- synthetic corpus --------------------------------------------------------
//
// Sequences follow a cyclic class walk: each language has `classes` token
// classes; the walk steps forward (mode 0) or backward (mode 1) through the
// cycle, with occasional uniform noise. The surface token within a class
// persists with probability `persist`. The final token echoes the opening
// token, giving attention a long-range dependency. The probe label is the
// walk direction, which is invisible to unigram statistics.

struct SynthConfig {
    int num_seqs = 4096;
    std::uint64_t seed = 1;
    int num_languages = 2;
    int classes = 3;
    int tokens_per_class = 4;
    double class_noise = 0.05;
    double persist = 0.75;
    int min_len = 24; // content tokens, before [CLS]/[SEP]
    int max_len = 48;
};

struct SynthCorpus {
    std::vector<std::string> lines;
    std::vector<int> probe_labels;
};

inline std::string synth_token(int language, int cls, int index) {
    return "l" + std::to_string(language) + "c" + std::to_string(cls) + "t" + std::to_string(index);
}

// Recomputes the probe label from a generated line; -1 if the line does not
// determine it. The label is the cycle direction of the class walk.
inline int synth_label_of(const std::string& line, int classes) {
    std::istringstream ss(line);
    std::string tok;
    std::vector<int> cls_seq;
    while (ss >> tok) {
        const auto c_pos = tok.find('c');
        const auto t_pos = tok.find('t', 1);
        if (c_pos == std::string::npos || t_pos == std::string::npos) return -1;
        cls_seq.push_back(std::stoi(tok.substr(c_pos + 1, t_pos - c_pos - 1)));
    }
    if (cls_seq.size() < 2) return -1;
    // Majority vote over observed transitions (noise steps are a minority).
    int forward = 0, backward = 0;
    for (std::size_t i = 0; i + 1 < cls_seq.size(); ++i) {
        if (cls_seq[i + 1] == (cls_seq[i] + 1) % classes) ++forward;
        else if (cls_seq[i + 1] == (cls_seq[i] + classes - 1) % classes) ++backward;
    }
    if (forward == backward) return -1;
    return forward > backward ? 0 : 1;
}

inline SynthCorpus synth_corpus(const SynthConfig& cfg) {
    if (cfg.num_seqs < 1 || cfg.num_languages < 1 || cfg.classes < 3 || cfg.tokens_per_class < 1 ||
        cfg.min_len < 4 || cfg.max_len < cfg.min_len)
        throw std::invalid_argument("synth_corpus: bad generator config");
    Rng rng(cfg.seed);
    SynthCorpus out;
    out.lines.reserve(static_cast<std::size_t>(cfg.num_seqs));
    for (int s = 0; s < cfg.num_seqs; ++s) {
        const int language = rng.range(0, cfg.num_languages - 1);
        const int mode = rng.range(0, 1);
        const int len = rng.range(cfg.min_len, cfg.max_len);
        const int step = mode == 0 ? 1 : cfg.classes - 1;
        int cls = rng.range(0, cfg.classes - 1);
        int idx = rng.range(0, cfg.tokens_per_class - 1);
        const int first_cls = cls, first_idx = idx;
        std::string line;
        for (int t = 0; t < len; ++t) {
            if (t > 0) {
                if (rng.bernoulli(cfg.class_noise)) cls = rng.range(0, cfg.classes - 1);
                else cls = (cls + step) % cfg.classes;
                if (!rng.bernoulli(cfg.persist)) idx = rng.range(0, cfg.tokens_per_class - 1);
            }
            const bool echo = t == len - 1;
            const int c = echo ? first_cls : cls;
            const int i = echo ? first_idx : idx;
            if (t) line += ' ';
            line += synth_token(language, c, i);
        }
        // Regenerate the rare sequences whose noisy walk obscures the mode.
        if (synth_label_of(line, cfg.classes) != mode) {
            --s;
            continue;
        }
        out.lines.push_back(std::move(line));
        out.probe_labels.push_back(mode);
    }
    return out;
}

// --- corpus / label file io --------------------------------------------------

inline void save_lines(const std::vector<std::string>& lines, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const std::string& l : lines) out << l << '\n';
}

inline std::vector<std::string> load_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

inline void save_probe_labels(const std::vector<int>& labels, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "line_index,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) out << i << ',' << labels[i] << '\n';
}

inline std::vector<int> load_probe_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<int> labels;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("probe labels: empty file '" + path + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("probe labels: malformed line '" + line + "'");
        labels.push_back(std::stoi(line.substr(comma + 1)));
    }
    return labels;
}

// Pre-tokenized format: one line per sequence of space-separated integer ids.
inline std::vector<std::vector<int>> load_pretokenized(const std::string& path) {
    std::vector<std::vector<int>> out;
    for (const std::string& line : load_lines(path)) {
        std::vector<int> ids;
        std::istringstream ss(line);
        int id;
        while (ss >> id) ids.push_back(id);
        out.push_back(std::move(ids));
    }
    return out;
}

inline std::vector<std::vector<int>> encode_corpus(const std::vector<std::string>& lines, const Vocab& vocab) {
    std::vector<std::vector<int>> out;
    out.reserve(lines.size());
    for (const std::string& l : lines) out.push_back(vocab.encode(l));
    return out;
}

} // namespace kdlab
