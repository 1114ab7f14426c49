#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "cobalt/common.hpp"
#include "cobalt/rng.hpp"
#include "cobalt/tensor.hpp"

namespace cobalt {

// Codebook of K concept vectors with EMA update state. Codes are compared
// against unit-normalized slot representations but are not normalized
// themselves; usage counters record cumulative assignments.
struct ConceptDictionary {
    int K = 0;
    int dim = 0;
    double alpha_c = 0.9;
    TensorPtr codes; // K × d
    std::vector<std::uint64_t> usage;

    void validate() const {
        if (K < 1) throw ConfigError("codebook: K must be >= 1");
        if (alpha_c < 0.0 || alpha_c > 1.0) throw ConfigError("codebook: alpha_c must lie in [0,1]");
        for (double v : codes->values)
            if (!std::isfinite(v)) throw ConfigError("codebook: non-finite code entry");
    }
};

inline ConceptDictionary init_dictionary(int K, int dim, double alpha_c, Rng& rng) {
    ConceptDictionary d;
    d.K = K;
    d.dim = dim;
    d.alpha_c = alpha_c;
    d.codes = make_tensor({K, dim});
    const double dev = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& v : d.codes->values) v = rng.normal(0.0, dev);
    d.usage.assign(static_cast<std::size_t>(K), 0);
    d.validate();
    return d;
}

// Soft student assignment: p_s (K × N) with column j the softmax over codes
// of -||C_i - z̄_j||² / tau_s, z̄ the row-unit-normalized slots. The codebook
// is under stop-gradient: only z_s receives gradients.
inline TensorPtr assign_student(Tape* tape, const TensorPtr& z_s, const ConceptDictionary& dict,
                                double tau_s) {
    require(tau_s > 0.0, "assign_student: tau_s must be positive, got ", tau_s);
    require(z_s->cols() == dict.dim, "assign_student: slot dim ", z_s->cols(), " != code dim ", dict.dim);
    auto zbar = ops::row_l2_normalize(tape, z_s, "slot row");
    auto d2 = ops::sqdist_cols(tape, detach(dict.codes), zbar); // K × N
    return ops::softmax_cols(tape, ops::scale(tape, d2, -1.0), tau_s);
}

// Hard teacher assignment: nearest code per slot, ties to the lowest index.
// Input rows are unit-normalized internally.
inline std::vector<int> assign_teacher(const Tensor& z_t, const ConceptDictionary& dict) {
    require(z_t.cols() == dict.dim, "assign_teacher: slot dim ", z_t.cols(), " != code dim ", dict.dim);
    const int N = z_t.rows(), d = dict.dim;
    std::vector<int> out(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        std::span<const double> row(z_t.values.data() + static_cast<std::size_t>(i) * d,
                                    static_cast<std::size_t>(d));
        auto zbar = l2_normalized(row, strcat("teacher slot row ", i));
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < dict.K; ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) {
                const double diff = dict.codes->at(j, k) - zbar[static_cast<std::size_t>(k)];
                s += diff * diff;
            }
            if (s < best_d) {
                best_d = s;
                best = j;
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

// One batch of teacher slot vectors with their assignments and active flags.
// Rows of `slots` are expected in the same (unit-normalized) space the
// assignments were computed in.
struct TeacherBatch {
    std::vector<std::vector<double>> slots;
    std::vector<int> assignments;
    std::vector<bool> active;
};

// EMA codebook update: every code with at least one assigned active slot
// moves to alpha_c * code + (1 - alpha_c) * mean(assigned slots); codes with
// no assignment stay bitwise unchanged. Usage counters accumulate.
inline void update_codebook(ConceptDictionary& dict, const TeacherBatch& batch) {
    const std::size_t n = batch.slots.size();
    require(batch.assignments.size() == n && batch.active.size() == n,
            "update_codebook: batch field lengths disagree");
    std::vector<std::vector<double>> sums(static_cast<std::size_t>(dict.K),
                                          std::vector<double>(static_cast<std::size_t>(dict.dim), 0.0));
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(dict.K), 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!batch.active[i]) continue;
        const int j = batch.assignments[i];
        require(j >= 0 && j < dict.K, "update_codebook: assignment ", j, " out of range");
        require(batch.slots[i].size() == static_cast<std::size_t>(dict.dim),
                "update_codebook: slot dim mismatch");
        for (int k = 0; k < dict.dim; ++k) sums[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] += batch.slots[i][static_cast<std::size_t>(k)];
        counts[static_cast<std::size_t>(j)]++;
    }
    for (int j = 0; j < dict.K; ++j) {
        const auto c = counts[static_cast<std::size_t>(j)];
        if (c == 0) continue;
        for (int k = 0; k < dict.dim; ++k) {
            const double mean = sums[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] / static_cast<double>(c);
            dict.codes->at(j, k) = dict.alpha_c * dict.codes->at(j, k) + (1.0 - dict.alpha_c) * mean;
        }
        dict.usage[static_cast<std::size_t>(j)] += c;
    }
}

// L_vq = -Σ_{i: I_i} log p_s[p_t(i), i]; inactive slots contribute nothing.
// Gradients flow into p_s only (teacher assignments are plain integers).
inline TensorPtr vq_loss(Tape* tape, const TensorPtr& p_s, const std::vector<int>& p_t,
                         const std::vector<bool>& indicator) {
    const int K = p_s->rows(), N = p_s->cols();
    require(static_cast<int>(p_t.size()) == N, "vq_loss: assignment count ", p_t.size(),
            " != slot count ", N);
    require(indicator.size() == p_t.size(), "vq_loss: indicator length mismatch");
    std::vector<double> mask(p_s->size(), 0.0);
    for (int i = 0; i < N; ++i) {
        if (!indicator[static_cast<std::size_t>(i)]) continue;
        const int j = p_t[static_cast<std::size_t>(i)];
        require(j >= 0 && j < K, "vq_loss: assignment ", j, " out of range for K=", K);
        mask[static_cast<std::size_t>(j) * N + i] = 1.0;
    }
    auto picked = ops::mul_const(tape, ops::log_clamped(tape, p_s), mask);
    return ops::scale(tape, ops::sum_all(tape, picked), -1.0);
}

// Number of distinct codes appearing in a collection of assignments.
inline int distinct_codes(const std::vector<int>& assignments, int K) {
    std::vector<bool> seen(static_cast<std::size_t>(K), false);
    int n = 0;
    for (int a : assignments)
        if (a >= 0 && a < K && !seen[static_cast<std::size_t>(a)]) {
            seen[static_cast<std::size_t>(a)] = true;
            ++n;
        }
    return n;
}

// ---------------------------------------------------------------------------
// JSON export for the balancer and for inspection
// ---------------------------------------------------------------------------

inline nlohmann::json dictionary_to_json(const ConceptDictionary& dict) {
    nlohmann::json j;
    j["K"] = dict.K;
    j["d"] = dict.dim;
    j["alpha_c"] = dict.alpha_c;
    auto codes = nlohmann::json::array();
    for (int i = 0; i < dict.K; ++i) {
        auto row = nlohmann::json::array();
        for (int k = 0; k < dict.dim; ++k) row.push_back(dict.codes->at(i, k));
        codes.push_back(std::move(row));
    }
    j["codes"] = std::move(codes);
    j["usage"] = dict.usage;
    return j;
}

inline ConceptDictionary dictionary_from_json(const nlohmann::json& j) {
    ConceptDictionary d;
    d.K = j.at("K").get<int>();
    d.dim = j.at("d").get<int>();
    d.alpha_c = j.at("alpha_c").get<double>();
    d.codes = make_tensor({d.K, d.dim});
    const auto& codes = j.at("codes");
    if (static_cast<int>(codes.size()) != d.K) throw ArtifactError("codebook json: bad code count");
    for (int i = 0; i < d.K; ++i)
        for (int k = 0; k < d.dim; ++k) d.codes->at(i, k) = codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
    d.usage = j.value("usage", std::vector<std::uint64_t>(static_cast<std::size_t>(d.K), 0));
    d.validate();
    return d;
}

inline void save_dictionary(const std::filesystem::path& path, const ConceptDictionary& dict) {
    std::ofstream os(path);
    if (!os) throw ArtifactError(strcat("cannot write codebook ", path.string()));
    os << dictionary_to_json(dict).dump(2) << "\n";
}

inline ConceptDictionary load_dictionary(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ArtifactError(strcat("missing codebook ", path.string()));
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(strcat("corrupt codebook ", path.string(), ": ", e.what()));
    }
    return dictionary_from_json(j);
}

} // namespace cobalt
