#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cobalt/common.hpp"
#include "cobalt/rng.hpp"

namespace cobalt {

// One sample's concept membership after stage 1: the distinct codebook
// indices of its active teacher slots with their attention mass (fraction of
// patch columns won by the slots carrying that concept).
struct AssignmentRecord {
    std::uint32_t sample_id = 0;
    int class_label = 0;
    std::vector<int> concepts;
    std::vector<double> mass;
};

// Per-concept, per-class sample sets T_{c,y} with the weights and sampling
// probabilities derived from them. Only concepts with at least one sample
// appear ("active" clusters).
struct ClusterTable {
    struct Cell {
        int class_label = 0;
        std::vector<std::uint32_t> samples;
    };
    struct Cluster {
        int concept_id = 0;
        std::vector<Cell> cells; // sorted by class_label
    };
    std::vector<Cluster> clusters; // sorted by concept_id

    const Cluster* find(int concept_id) const {
        for (const auto& c : clusters)
            if (c.concept_id == concept_id) return &c;
        return nullptr;
    }
};

// A sample with concepts {c1, c2} joins both T_{c1, y} and T_{c2, y}.
inline ClusterTable build_cluster_table(const std::vector<AssignmentRecord>& records) {
    require(!records.empty(), "build_cluster_table: no records");
    std::map<int, std::map<int, std::vector<std::uint32_t>>> cells;
    for (const auto& r : records)
        for (int c : r.concepts) cells[c][r.class_label].push_back(r.sample_id);
    ClusterTable table;
    for (auto& [concept_id, by_class] : cells) {
        ClusterTable::Cluster cluster;
        cluster.concept_id = concept_id;
        for (auto& [y, ids] : by_class) cluster.cells.push_back({y, std::move(ids)});
        table.clusters.push_back(std::move(cluster));
    }
    return table;
}

// p_{c,y} = w_{c,y}^λ / Σ_ŷ w_{c,ŷ}^λ with w_{c,y} = 1/|T_{c,y}|, over the
// classes present in cluster c. Returned in the cluster's cell order.
inline std::vector<double> class_sampling_probs(const ClusterTable::Cluster& cluster, double lambda) {
    require(lambda >= 0.0, "class_sampling_probs: lambda must be >= 0, got ", lambda);
    require(!cluster.cells.empty(), "class_sampling_probs: inactive cluster ", cluster.concept_id);
    std::vector<double> w;
    w.reserve(cluster.cells.size());
    double total = 0.0;
    for (const auto& cell : cluster.cells) {
        require(!cell.samples.empty(), "class_sampling_probs: empty cell in cluster ", cluster.concept_id);
        const double weight = std::pow(1.0 / static_cast<double>(cell.samples.size()), lambda);
        w.push_back(weight);
        total += weight;
    }
    for (auto& v : w) v /= total;
    return w;
}

inline std::vector<double> class_sampling_probs(const ClusterTable& table, int concept_id, double lambda) {
    const auto* cluster = table.find(concept_id);
    require(cluster != nullptr, "class_sampling_probs: concept ", concept_id, " has no samples");
    return class_sampling_probs(*cluster, lambda);
}

// One batch of sample ids: per element, a uniform active cluster, then a
// class by p_{c,y}, then a uniform member of T_{c,y}. Draws with replacement.
inline std::vector<std::uint32_t> draw_batch(const ClusterTable& table, int n, double lambda, Rng& rng) {
    require(n >= 0, "draw_batch: negative batch size");
    require(!table.clusters.empty(), "draw_batch: table has no active cluster");
    std::vector<std::uint32_t> batch;
    batch.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& cluster = table.clusters[rng.uniform_index(table.clusters.size())];
        const auto probs = class_sampling_probs(cluster, lambda);
        double u = rng.uniform();
        std::size_t pick = probs.size() - 1;
        double acc = 0.0;
        for (std::size_t k = 0; k < probs.size(); ++k) {
            acc += probs[k];
            if (u < acc) {
                pick = k;
                break;
            }
        }
        const auto& cell = cluster.cells[pick];
        batch.push_back(cell.samples[rng.uniform_index(cell.samples.size())]);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Silhouette score and λ selection
// ---------------------------------------------------------------------------

// Standard mean silhouette with Euclidean distance: per point, a = mean
// intra-cluster distance (excluding self), b = min over other clusters of the
// mean distance, s = (b - a) / max(a, b). Singleton-cluster points and the
// a = b = 0 case score 0.
inline double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int>& cluster_ids) {
    require(points.size() == cluster_ids.size(), "silhouette: points/ids length mismatch");
    require(!points.empty(), "silhouette: no points");
    std::map<int, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < points.size(); ++i) clusters[cluster_ids[i]].push_back(i);
    require(clusters.size() >= 2, "silhouette: need at least 2 clusters, got ", clusters.size());

    auto dist = [&](std::size_t i, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < points[i].size(); ++k) {
            const double d = points[i][k] - points[j][k];
            s += d * d;
        }
        return std::sqrt(s);
    };

    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& own = clusters[cluster_ids[i]];
        if (own.size() == 1) continue; // singleton scores 0
        double a = 0.0;
        for (std::size_t j : own)
            if (j != i) a += dist(i, j);
        a /= static_cast<double>(own.size() - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [cid, members] : clusters) {
            if (cid == cluster_ids[i]) continue;
            double m = 0.0;
            for (std::size_t j : members) m += dist(i, j);
            b = std::min(b, m / static_cast<double>(members.size()));
        }
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;
    }
    return total / static_cast<double>(points.size());
}

// λ = 2 when the clusters are poorly separated (score <= 0.8), else 1.
inline double select_lambda(double mean_silhouette) {
    require(mean_silhouette >= -1.0 && mean_silhouette <= 1.0, "select_lambda: score ",
            mean_silhouette, " outside [-1, 1]");
    return mean_silhouette <= 0.8 ? 2.0 : 1.0;
}

// ---------------------------------------------------------------------------
// Group inference and worst-group accuracy
// ---------------------------------------------------------------------------

// Groups keyed by (class, attribute-or-concept) with members given as indices
// into the evaluation order. A sample may belong to several groups.
struct GroupAssignment {
    std::vector<std::pair<int, int>> keys; // (class, concept/attribute)
    std::vector<std::vector<std::size_t>> members;
};

// One group per (class, active concept) combination present in the records.
inline GroupAssignment infer_groups(const std::vector<AssignmentRecord>& records) {
    require(!records.empty(), "infer_groups: no records");
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i)
        for (int c : records[i].concepts) groups[{records[i].class_label, c}].push_back(i);
    GroupAssignment out;
    for (auto& [key, members] : groups) {
        out.keys.push_back(key);
        out.members.push_back(std::move(members));
    }
    return out;
}

// Singleton grouping from per-sample (class, attribute) pairs; used for
// ground-truth groups.
inline GroupAssignment groups_from_labels(const std::vector<int>& classes, const std::vector<int>& attrs) {
    require(classes.size() == attrs.size(), "groups_from_labels: length mismatch");
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < classes.size(); ++i) groups[{classes[i], attrs[i]}].push_back(i);
    GroupAssignment out;
    for (auto& [key, members] : groups) {
        out.keys.push_back(key);
        out.members.push_back(std::move(members));
    }
    return out;
}

struct GroupStat {
    int class_label = 0;
    int attribute = 0;
    std::size_t size = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
    bool considered = false; // met min_group_size
};

struct WorstGroupResult {
    double worst = 0.0;
    std::vector<GroupStat> table;
};

// Per-group accuracy (a sample counts in every group it belongs to); worst is
// the minimum over groups meeting min_group_size. Rejects when no group
// qualifies.
inline WorstGroupResult worst_group_accuracy(const std::vector<int>& predictions,
                                             const std::vector<int>& labels,
                                             const GroupAssignment& groups,
                                             std::size_t min_group_size = 10) {
    require(predictions.size() == labels.size(), "worst_group_accuracy: predictions/labels mismatch");
    WorstGroupResult res;
    res.worst = std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t g = 0; g < groups.keys.size(); ++g) {
        GroupStat stat;
        stat.class_label = groups.keys[g].first;
        stat.attribute = groups.keys[g].second;
        stat.size = groups.members[g].size();
        for (std::size_t idx : groups.members[g]) {
            require(idx < predictions.size(), "worst_group_accuracy: member index out of range");
            if (predictions[idx] == labels[idx]) stat.correct++;
        }
        stat.accuracy = stat.size > 0 ? static_cast<double>(stat.correct) / static_cast<double>(stat.size) : 0.0;
        stat.considered = stat.size >= min_group_size;
        if (stat.considered) {
            any = true;
            res.worst = std::min(res.worst, stat.accuracy);
        }
        res.table.push_back(stat);
    }
    if (!any)
        throw std::invalid_argument(strcat("worst_group_accuracy: no group reaches min size ",
                                           min_group_size, "; try a smaller threshold"));
    return res;
}

// ---------------------------------------------------------------------------
// Persistence: newline-delimited assignment records, cluster-table summary
// ---------------------------------------------------------------------------

inline void save_assignments(const std::filesystem::path& path, const std::vector<AssignmentRecord>& records) {
    std::ofstream os(path);
    if (!os) throw ArtifactError(strcat("cannot write assignments ", path.string()));
    for (const auto& r : records) {
        nlohmann::json j;
        j["sample_id"] = r.sample_id;
        j["y"] = r.class_label;
        j["concepts"] = r.concepts;
        j["mass"] = r.mass;
        os << j.dump() << "\n";
    }
}

inline std::vector<AssignmentRecord> load_assignments(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ArtifactError(strcat("missing assignments ", path.string()));
    std::vector<AssignmentRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            AssignmentRecord r;
            r.sample_id = j.at("sample_id").get<std::uint32_t>();
            r.class_label = j.at("y").get<int>();
            r.concepts = j.at("concepts").get<std::vector<int>>();
            r.mass = j.at("mass").get<std::vector<double>>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ArtifactError(strcat("corrupt assignment record at ", path.string(), ":", line_no,
                                       ": ", e.what()));
        }
    }
    return out;
}

inline nlohmann::json cluster_summary_json(const ClusterTable& table, double lambda, double silhouette_score) {
    nlohmann::json j;
    j["lambda"] = lambda;
    j["silhouette"] = silhouette_score;
    auto clusters = nlohmann::json::array();
    for (const auto& cluster : table.clusters) {
        nlohmann::json cj;
        cj["concept"] = cluster.concept_id;
        const auto probs = class_sampling_probs(cluster, lambda);
        auto cells = nlohmann::json::array();
        for (std::size_t k = 0; k < cluster.cells.size(); ++k) {
            nlohmann::json cell;
            cell["y"] = cluster.cells[k].class_label;
            cell["count"] = cluster.cells[k].samples.size();
            cell["p"] = probs[k];
            cells.push_back(std::move(cell));
        }
        cj["cells"] = std::move(cells);
        clusters.push_back(std::move(cj));
    }
    j["clusters"] = std::move(clusters);
    return j;
}

} // namespace cobalt
