#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cobalt/balancer.hpp"
#include "cobalt/common.hpp"
#include "cobalt/conceptvq.hpp"
#include "cobalt/objectives.hpp"
#include "cobalt/rng.hpp"
#include "cobalt/slotnet.hpp"
#include "cobalt/synthgen.hpp"
#include "cobalt/tensor.hpp"

namespace cobalt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct Stage1Config {
    int n_slots = 4;
    int codebook_size = 8;
    int dim = 16;
    int width = 32;
    int proj_hidden = 64;
    double tau_s = 0.1;
    double tau_t = 0.07;
    double tau_c = 0.1;
    double alpha_c = 0.9;
    double alpha_t = 0.99;
    int teacher_period = 0; // 0 = auto: 1 with augmentation, 20 without
    double center_rate = 0.9;
    int epochs = 20;
    int batch_size = 32;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool augment = true;
    double crop_min_scale = 0.5;
    double crop_max_scale = 1.0;
    double brightness = 0.2;
    int silhouette_max_points = 2000;

    int effective_period() const { return teacher_period > 0 ? teacher_period : (augment ? 1 : 20); }
};

struct Stage2Config {
    int hidden = 32;
    int epochs = 20;
    int batch_size = 32;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::optional<double> lambda; // unset: chosen from the silhouette score
    std::string early_stop = "avg"; // hg | ig | avg
    std::string sampler = "cobalt"; // cobalt | iid
    int min_group_size = 10;
};

struct TrainConfig {
    DatasetSpec dataset;
    Stage1Config stage1;
    Stage2Config stage2;
    std::uint64_t seed = 1;
};

inline void validate(const Stage1Config& c) {
    if (c.n_slots < 1) throw ConfigError("stage1: n_slots must be >= 1");
    if (c.codebook_size < 1) throw ConfigError("stage1: codebook_size must be >= 1");
    if (c.dim < 1 || c.width < 1 || c.proj_hidden < 1) throw ConfigError("stage1: bad layer sizes");
    if (c.tau_s <= 0 || c.tau_t <= 0 || c.tau_c <= 0)
        throw ConfigError("stage1: temperatures must be positive");
    if (c.alpha_c < 0 || c.alpha_c > 1) throw ConfigError("stage1: alpha_c must lie in [0,1]");
    if (c.alpha_t < 0 || c.alpha_t > 1) throw ConfigError("stage1: alpha_t must lie in [0,1]");
    if (c.teacher_period < 0) throw ConfigError("stage1: teacher_period must be >= 0");
    if (c.center_rate < 0 || c.center_rate > 1) throw ConfigError("stage1: center_rate must lie in [0,1]");
    if (c.epochs < 1 || c.batch_size < 1) throw ConfigError("stage1: epochs and batch_size must be >= 1");
    if (c.lr < 0 || c.weight_decay < 0) throw ConfigError("stage1: negative learning rate or decay");
    if (c.crop_min_scale <= 0 || c.crop_min_scale > c.crop_max_scale || c.crop_max_scale > 1.0)
        throw ConfigError("stage1: crop scale range invalid");
    if (c.silhouette_max_points < 2) throw ConfigError("stage1: silhouette_max_points too small");
}

inline void validate(const Stage2Config& c) {
    if (c.hidden < 1) throw ConfigError("stage2: hidden must be >= 1");
    if (c.epochs < 1 || c.batch_size < 1) throw ConfigError("stage2: epochs and batch_size must be >= 1");
    if (c.lr < 0 || c.weight_decay < 0) throw ConfigError("stage2: negative learning rate or decay");
    if (c.lambda && *c.lambda < 0) throw ConfigError("stage2: lambda must be >= 0");
    if (c.early_stop != "hg" && c.early_stop != "ig" && c.early_stop != "avg")
        throw ConfigError(strcat("stage2: unknown early-stop strategy '", c.early_stop, "'"));
    if (c.sampler != "cobalt" && c.sampler != "iid")
        throw ConfigError(strcat("stage2: unknown sampler '", c.sampler, "'"));
    if (c.min_group_size < 1) throw ConfigError("stage2: min_group_size must be >= 1");
}

inline void validate(const TrainConfig& c) {
    validate(c.dataset);
    validate(c.stage1);
    validate(c.stage2);
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["dataset"] = spec_to_json(c.dataset);
    nlohmann::json s1;
    s1["n_slots"] = c.stage1.n_slots;
    s1["codebook_size"] = c.stage1.codebook_size;
    s1["dim"] = c.stage1.dim;
    s1["width"] = c.stage1.width;
    s1["proj_hidden"] = c.stage1.proj_hidden;
    s1["tau_s"] = c.stage1.tau_s;
    s1["tau_t"] = c.stage1.tau_t;
    s1["tau_c"] = c.stage1.tau_c;
    s1["alpha_c"] = c.stage1.alpha_c;
    s1["alpha_t"] = c.stage1.alpha_t;
    s1["teacher_period"] = c.stage1.teacher_period;
    s1["center_rate"] = c.stage1.center_rate;
    s1["epochs"] = c.stage1.epochs;
    s1["batch_size"] = c.stage1.batch_size;
    s1["lr"] = c.stage1.lr;
    s1["momentum"] = c.stage1.momentum;
    s1["weight_decay"] = c.stage1.weight_decay;
    s1["augment"] = c.stage1.augment;
    s1["crop_min_scale"] = c.stage1.crop_min_scale;
    s1["crop_max_scale"] = c.stage1.crop_max_scale;
    s1["brightness"] = c.stage1.brightness;
    s1["silhouette_max_points"] = c.stage1.silhouette_max_points;
    j["stage1"] = std::move(s1);
    nlohmann::json s2;
    s2["hidden"] = c.stage2.hidden;
    s2["epochs"] = c.stage2.epochs;
    s2["batch_size"] = c.stage2.batch_size;
    s2["lr"] = c.stage2.lr;
    s2["momentum"] = c.stage2.momentum;
    s2["weight_decay"] = c.stage2.weight_decay;
    if (c.stage2.lambda) s2["lambda"] = *c.stage2.lambda;
    s2["early_stop"] = c.stage2.early_stop;
    s2["sampler"] = c.stage2.sampler;
    s2["min_group_size"] = c.stage2.min_group_size;
    j["stage2"] = std::move(s2);
    j["seed"] = c.seed;
    return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        if (j.contains("dataset")) c.dataset = spec_from_json(j["dataset"]);
        if (j.contains("stage1")) {
            const auto& s = j["stage1"];
            c.stage1.n_slots = s.value("n_slots", c.stage1.n_slots);
            c.stage1.codebook_size = s.value("codebook_size", c.stage1.codebook_size);
            c.stage1.dim = s.value("dim", c.stage1.dim);
            c.stage1.width = s.value("width", c.stage1.width);
            c.stage1.proj_hidden = s.value("proj_hidden", c.stage1.proj_hidden);
            c.stage1.tau_s = s.value("tau_s", c.stage1.tau_s);
            c.stage1.tau_t = s.value("tau_t", c.stage1.tau_t);
            c.stage1.tau_c = s.value("tau_c", c.stage1.tau_c);
            c.stage1.alpha_c = s.value("alpha_c", c.stage1.alpha_c);
            c.stage1.alpha_t = s.value("alpha_t", c.stage1.alpha_t);
            c.stage1.teacher_period = s.value("teacher_period", c.stage1.teacher_period);
            c.stage1.center_rate = s.value("center_rate", c.stage1.center_rate);
            c.stage1.epochs = s.value("epochs", c.stage1.epochs);
            c.stage1.batch_size = s.value("batch_size", c.stage1.batch_size);
            c.stage1.lr = s.value("lr", c.stage1.lr);
            c.stage1.momentum = s.value("momentum", c.stage1.momentum);
            c.stage1.weight_decay = s.value("weight_decay", c.stage1.weight_decay);
            c.stage1.augment = s.value("augment", c.stage1.augment);
            c.stage1.crop_min_scale = s.value("crop_min_scale", c.stage1.crop_min_scale);
            c.stage1.crop_max_scale = s.value("crop_max_scale", c.stage1.crop_max_scale);
            c.stage1.brightness = s.value("brightness", c.stage1.brightness);
            c.stage1.silhouette_max_points = s.value("silhouette_max_points", c.stage1.silhouette_max_points);
        }
        if (j.contains("stage2")) {
            const auto& s = j["stage2"];
            c.stage2.hidden = s.value("hidden", c.stage2.hidden);
            c.stage2.epochs = s.value("epochs", c.stage2.epochs);
            c.stage2.batch_size = s.value("batch_size", c.stage2.batch_size);
            c.stage2.lr = s.value("lr", c.stage2.lr);
            c.stage2.momentum = s.value("momentum", c.stage2.momentum);
            c.stage2.weight_decay = s.value("weight_decay", c.stage2.weight_decay);
            if (s.contains("lambda") && !s["lambda"].is_null()) c.stage2.lambda = s["lambda"].get<double>();
            c.stage2.early_stop = s.value("early_stop", c.stage2.early_stop);
            c.stage2.sampler = s.value("sampler", c.stage2.sampler);
            c.stage2.min_group_size = s.value("min_group_size", c.stage2.min_group_size);
        }
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(strcat("config: ", e.what()));
    }
    return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(strcat("cannot open config ", path.string()));
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(strcat("config ", path.string(), ": ", e.what()));
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stage-1 model and per-sample forward
// ---------------------------------------------------------------------------

struct Stage1Model {
    BranchShape shape;
    BranchParams student, teacher;
    PredictorParams predictor;
    ConceptDictionary dict;
    CenterState center;
    double tau_s = 0.1, tau_t = 0.07, tau_c = 0.1;

    std::vector<TensorPtr> trainable() const {
        auto out = student.tensors();
        for (auto& t : predictor.tensors()) out.push_back(t);
        return out;
    }
};

inline Stage1Model init_stage1_model(const Stage1Config& cfg, int patch_dim, std::uint64_t seed) {
    Stage1Model m;
    m.shape.patch_dim = patch_dim;
    m.shape.width = cfg.width;
    m.shape.proj_hidden = cfg.proj_hidden;
    m.shape.dim = cfg.dim;
    m.shape.n_slots = cfg.n_slots;
    Rng rng(derive_seed(seed, "stage1_init"));
    m.student = init_branch(m.shape, rng, true);
    m.teacher = clone_branch(m.student, false);
    m.predictor = init_predictor(cfg.dim, rng, true);
    m.dict = init_dictionary(cfg.codebook_size, cfg.dim, cfg.alpha_c, rng);
    m.center.rate = cfg.center_rate;
    m.center.init(cfg.n_slots);
    m.tau_s = cfg.tau_s;
    m.tau_t = cfg.tau_t;
    m.tau_c = cfg.tau_c;
    return m;
}

// Teacher-side view of one sample: centered, sharpened attention plus the
// quantities consumed by the codebook EMA and assignment records.
struct TeacherOutputs {
    TensorPtr attention;                        // A_t (N × P), constant
    TensorPtr z;                                // pooled slots (N × d), constant
    std::vector<bool> active;                   // m_t
    std::vector<double> wins;                   // per-slot patch-win fraction
    std::vector<int> assignments;               // p_t
    std::vector<std::vector<double>> zbar_rows; // unit-normalized teacher slots
    std::vector<double> mean_logits;            // per-slot mean raw logit
};

// `patches_y` is the already-encoded teacher patch matrix for this sample so
// batched encoding can be shared across the batch.
inline TeacherOutputs teacher_outputs(const Stage1Model& model, const TensorPtr& y_t) {
    TeacherOutputs out;
    auto raw = attention_logits(nullptr, model.teacher.slots, y_t);
    const int N = raw->rows(), P = raw->cols();
    out.mean_logits.assign(static_cast<std::size_t>(N), 0.0);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < P; ++j) out.mean_logits[static_cast<std::size_t>(i)] += raw->at(i, j);
        out.mean_logits[static_cast<std::size_t>(i)] /= P;
    }
    std::vector<double> centered(raw->size());
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < P; ++j)
            centered[static_cast<std::size_t>(i) * P + j] =
                raw->at(i, j) - model.center.center[static_cast<std::size_t>(i)];
    out.attention = ops::softmax_cols(nullptr, make_tensor(raw->shape, std::move(centered)), model.tau_t);
    out.z = pool_concepts(nullptr, out.attention, y_t);
    out.active = active_slot_mask(*out.attention);
    out.wins = slot_win_fractions(*out.attention);
    out.assignments = assign_teacher(*out.z, model.dict);
    out.zbar_rows.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        std::span<const double> row(out.z->values.data() + static_cast<std::size_t>(i) * out.z->cols(),
                                    static_cast<std::size_t>(out.z->cols()));
        out.zbar_rows.push_back(l2_normalized(row, strcat("teacher slot row ", i)));
    }
    return out;
}

struct SampleLoss {
    TensorPtr total, l_dis, l_con, l_vq;
    TeacherOutputs teacher;
};

// Full Eq.-5 loss for one sample. The student branch runs on the tape; the
// teacher branch and codebook are constants (stop-gradient).
inline SampleLoss stage1_sample_loss(Tape* tape, const Stage1Model& model, const TensorPtr& y_s,
                                     const TensorPtr& y_t, const std::vector<int>& overlap) {
    SampleLoss out;
    auto a_s = slot_attention(tape, model.student.slots, y_s, model.tau_s);
    auto z_s = pool_concepts(tape, a_s, y_s);
    out.teacher = teacher_outputs(model, y_t);
    auto m_s = active_slot_mask(*a_s);
    auto indicator = common_slot_indicator(m_s, out.teacher.active);
    auto aligned = align_teacher_attention(*out.teacher.attention, overlap, y_s->rows());
    out.l_dis = distill_loss(tape, aligned.attention, a_s, aligned.mask);
    out.l_con = contrast_loss(tape, z_s, out.teacher.z, indicator, model.predictor, model.tau_c).loss;
    auto p_s = assign_student(tape, z_s, model.dict, model.tau_s);
    out.l_vq = vq_loss(tape, p_s, out.teacher.assignments, indicator);
    out.total = total_loss(tape, out.l_dis, out.l_con, out.l_vq);
    return out;
}

// Convenience wrapper when starting from raw patch matrices.
inline SampleLoss stage1_sample_loss_from_patches(Tape* tape, const Stage1Model& model,
                                                  const TensorPtr& patches_s, const TensorPtr& patches_t,
                                                  const std::vector<int>& overlap) {
    auto y_s = encode_patches(tape, model.student, patches_s);
    auto y_t = encode_patches(nullptr, model.teacher, patches_t);
    return stage1_sample_loss(tape, model, y_s, y_t, overlap);
}

// ---------------------------------------------------------------------------
// Run directory layout
// ---------------------------------------------------------------------------

namespace paths {

inline std::filesystem::path stage1_dir(const std::filesystem::path& run) { return run / "stage1"; }
inline std::filesystem::path stage2_dir(const std::filesystem::path& run, const std::string& sampler,
                                        const std::string& strategy) {
    return run / strcat("stage2_", sampler, "_", strategy);
}
inline std::filesystem::path student_ckpt(const std::filesystem::path& run) {
    return stage1_dir(run) / "student.cbsn";
}
inline std::filesystem::path teacher_ckpt(const std::filesystem::path& run) {
    return stage1_dir(run) / "teacher.cbsn";
}
inline std::filesystem::path codebook(const std::filesystem::path& run) {
    return stage1_dir(run) / "codebook.json";
}
inline std::filesystem::path assignments(const std::filesystem::path& run, const std::string& split) {
    return stage1_dir(run) / strcat("assignments_", split, ".ndjson");
}
inline std::filesystem::path stage1_metrics(const std::filesystem::path& run) {
    return stage1_dir(run) / "metrics.ndjson";
}
inline std::filesystem::path cluster_summary(const std::filesystem::path& run) {
    return stage1_dir(run) / "cluster_summary.json";
}

} // namespace paths

// ---------------------------------------------------------------------------
// Stage-1 training
// ---------------------------------------------------------------------------

struct Stage1Result {
    Stage1Model model;
    std::vector<AssignmentRecord> train_records, val_records;
    int final_codes_in_use = 0;
    std::vector<nlohmann::json> epoch_metrics;
};

// Deterministic inference pass (augmentation off) emitting one assignment
// record per sample: concepts are the distinct codes of active teacher slots,
// mass is the per-concept sum of patch-win fractions.
inline std::vector<AssignmentRecord> assignment_pass(const Stage1Model& model,
                                                     const std::vector<SyntheticSample>& samples,
                                                     int patch) {
    std::vector<AssignmentRecord> records;
    records.reserve(samples.size());
    for (const auto& sample : samples) {
        auto y_t = encode_project(nullptr, model.teacher, sample.image, patch);
        auto t = teacher_outputs(model, y_t);
        AssignmentRecord rec;
        rec.sample_id = sample.sample_id;
        rec.class_label = sample.class_label;
        std::map<int, double> mass;
        for (std::size_t i = 0; i < t.active.size(); ++i)
            if (t.active[i]) mass[t.assignments[i]] += t.wins[i];
        for (const auto& [concept_id, m] : mass) {
            rec.concepts.push_back(concept_id);
            rec.mass.push_back(m);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline Stage1Result train_stage1(const TrainConfig& config, const Dataset& dataset,
                                 const std::filesystem::path& run_dir) {
    validate(config);
    const auto& cfg = config.stage1;
    const int patch = dataset.spec.patch_size;
    const int patch_dim = patch * patch * 3;
    const int P = (dataset.spec.image_size / patch) * (dataset.spec.image_size / patch);
    require(!dataset.train.empty(), "train_stage1: empty training split");

    auto model = init_stage1_model(cfg, patch_dim, config.seed);
    SgdMomentum opt(model.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay);
    EmaSchedule schedule{cfg.alpha_t, cfg.effective_period()};
    AugConfig aug;
    aug.enabled = cfg.augment;
    aug.min_scale = cfg.crop_min_scale;
    aug.max_scale = cfg.crop_max_scale;
    aug.brightness = cfg.brightness;

    std::filesystem::create_directories(paths::stage1_dir(run_dir));
    std::ofstream metrics_out(paths::stage1_metrics(run_dir));
    if (!metrics_out) throw ArtifactError(strcat("cannot write ", paths::stage1_metrics(run_dir).string()));

    Stage1Result result;
    const int n = static_cast<int>(dataset.train.size());
    const int B = std::min(cfg.batch_size, n);
    const int steps_per_epoch = std::max(1, n / B);
    std::int64_t step = 0;
    int collapse_streak = 0;

    std::vector<int> order(dataset.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(config.seed, "stage1_shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double sum_dis = 0, sum_con = 0, sum_vq = 0, sum_total = 0;
        std::set<int> codes_seen;

        for (int s = 0; s < steps_per_epoch; ++s) {
            // assemble the batch's view pairs
            std::vector<TensorPtr> xs, xt;
            std::vector<std::vector<int>> overlaps;
            const int b0 = s * B;
            const int bsz = std::min(B, n - b0);
            for (int b = 0; b < bsz; ++b) {
                const auto& sample = dataset.train[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + b)])];
                auto vp = make_views(sample, patch, aug,
                                     derive_seed(config.seed, "aug", static_cast<std::uint64_t>(epoch),
                                                 sample.sample_id));
                xs.push_back(extract_patches(vp.view_s, patch));
                xt.push_back(extract_patches(vp.view_t, patch));
                overlaps.push_back(std::move(vp.overlap));
            }
            // batched encoding: stack patches, encode once per branch, slice
            auto stack = [&](const std::vector<TensorPtr>& parts) {
                auto all = make_tensor({static_cast<int>(parts.size()) * P, patch_dim});
                for (std::size_t b = 0; b < parts.size(); ++b)
                    std::copy(parts[b]->values.begin(), parts[b]->values.end(),
                              all->values.begin() + static_cast<std::ptrdiff_t>(b) * P * patch_dim);
                return all;
            };
            Tape tape;
            auto ys_all = encode_patches(&tape, model.student, stack(xs));
            auto yt_all = encode_patches(nullptr, model.teacher, stack(xt));

            TensorPtr batch_loss;
            TeacherBatch teacher_batch;
            std::vector<double> center_mean(static_cast<std::size_t>(cfg.n_slots), 0.0);
            double step_dis = 0, step_con = 0, step_vq = 0;
            for (int b = 0; b < bsz; ++b) {
                auto y_s = ops::slice_rows(&tape, ys_all, b * P, P);
                auto y_t = ops::slice_rows(nullptr, yt_all, b * P, P);
                auto parts = stage1_sample_loss(&tape, model, y_s, y_t, overlaps[static_cast<std::size_t>(b)]);
                batch_loss = b == 0 ? parts.total : ops::add(&tape, batch_loss, parts.total);
                step_dis += parts.l_dis->values[0];
                step_con += parts.l_con->values[0];
                step_vq += parts.l_vq->values[0];
                for (std::size_t i = 0; i < parts.teacher.active.size(); ++i) {
                    teacher_batch.slots.push_back(parts.teacher.zbar_rows[i]);
                    teacher_batch.assignments.push_back(parts.teacher.assignments[i]);
                    teacher_batch.active.push_back(parts.teacher.active[i]);
                    if (parts.teacher.active[i]) codes_seen.insert(parts.teacher.assignments[i]);
                    center_mean[i] += parts.teacher.mean_logits[i] / bsz;
                }
            }
            batch_loss = ops::scale(&tape, batch_loss, 1.0 / bsz);
            opt.zero_grad();
            tape.backward(batch_loss);
            opt.step();
            ++step;
            ema_update_teacher(model.student, model.teacher, schedule, step);
            model.center.update_mean(center_mean);
            update_codebook(model.dict, teacher_batch);

            sum_dis += step_dis / bsz;
            sum_con += step_con / bsz;
            sum_vq += step_vq / bsz;
            sum_total += batch_loss->values[0];
        }

        nlohmann::json row;
        row["epoch"] = epoch;
        row["l_dis"] = sum_dis / steps_per_epoch;
        row["l_con"] = sum_con / steps_per_epoch;
        row["l_vq"] = sum_vq / steps_per_epoch;
        row["loss"] = sum_total / steps_per_epoch;
        row["codes_in_use"] = codes_seen.size();
        metrics_out << row.dump() << "\n";
        result.epoch_metrics.push_back(row);
        result.final_codes_in_use = static_cast<int>(codes_seen.size());

        collapse_streak = static_cast<int>(codes_seen.size()) < 2 ? collapse_streak + 1 : 0;
        if (collapse_streak >= 3)
            throw CollapseError(strcat("stage1: representation collapse — fewer than 2 distinct codes "
                                       "in use for 3 consecutive epochs (epoch ", epoch, ")"));
    }
    metrics_out.close();

    result.train_records = assignment_pass(model, dataset.train, patch);
    result.val_records = assignment_pass(model, dataset.val, patch);

    write_branch_checkpoint(paths::student_ckpt(run_dir), model.student);
    write_branch_checkpoint(paths::teacher_ckpt(run_dir), model.teacher, &model.center);
    save_dictionary(paths::codebook(run_dir), model.dict);
    save_assignments(paths::assignments(run_dir, "train"), result.train_records);
    save_assignments(paths::assignments(run_dir, "val"), result.val_records);

    result.model = std::move(model);
    return result;
}

// Loads the frozen teacher + codebook from a finished stage-1 run.
inline Stage1Model load_stage1_model(const TrainConfig& config, const std::filesystem::path& run_dir) {
    Stage1Model m;
    m.tau_s = config.stage1.tau_s;
    m.tau_t = config.stage1.tau_t;
    m.tau_c = config.stage1.tau_c;
    m.center.rate = config.stage1.center_rate;
    m.teacher = read_branch_checkpoint(paths::teacher_ckpt(run_dir), false, &m.center);
    m.student = read_branch_checkpoint(paths::student_ckpt(run_dir), false);
    m.dict = load_dictionary(paths::codebook(run_dir));
    m.shape.n_slots = m.teacher.slots->rows();
    m.shape.dim = m.teacher.slots->cols();
    m.shape.patch_dim = m.teacher.embed_w->rows();
    m.shape.width = m.teacher.embed_w->cols();
    m.shape.proj_hidden = m.teacher.proj1_w->cols();
    if (m.center.center.empty()) m.center.init(m.shape.n_slots);
    Rng dummy(0);
    m.predictor = init_predictor(m.shape.dim, dummy, false);
    return m;
}

// ---------------------------------------------------------------------------
// Silhouette features and λ selection
// ---------------------------------------------------------------------------

struct SilhouetteChoice {
    double score = 0.0;
    double lambda = 1.0;
    int n_points = 0;
    int n_clusters = 0;
    bool degenerate = false; // fewer than 2 dominant concepts
};

// Per-sample concept feature: attention-mass-weighted mean of the active
// slots' unit-normalized representations; cluster id is the concept with the
// largest mass. Evaluated on an evenly strided subsample for λ selection.
inline SilhouetteChoice silhouette_lambda(const Stage1Model& model,
                                          const std::vector<SyntheticSample>& samples, int patch,
                                          int max_points) {
    std::vector<std::vector<double>> points;
    std::vector<int> cluster_ids;
    const std::size_t n = samples.size();
    const std::size_t stride = std::max<std::size_t>(1, n / static_cast<std::size_t>(max_points));
    for (std::size_t idx = 0; idx < n && points.size() < static_cast<std::size_t>(max_points); idx += stride) {
        auto y_t = encode_project(nullptr, model.teacher, samples[idx].image, patch);
        auto t = teacher_outputs(model, y_t);
        std::vector<double> feature(static_cast<std::size_t>(model.shape.dim), 0.0);
        double total_mass = 0.0;
        std::map<int, double> mass;
        for (std::size_t i = 0; i < t.active.size(); ++i) {
            if (!t.active[i]) continue;
            for (int k = 0; k < model.shape.dim; ++k)
                feature[static_cast<std::size_t>(k)] += t.wins[i] * t.zbar_rows[i][static_cast<std::size_t>(k)];
            total_mass += t.wins[i];
            mass[t.assignments[i]] += t.wins[i];
        }
        if (total_mass <= 0.0 || mass.empty()) continue;
        for (auto& v : feature) v /= total_mass;
        int dominant = mass.begin()->first;
        double best = mass.begin()->second;
        for (const auto& [concept_id, m] : mass)
            if (m > best) {
                best = m;
                dominant = concept_id;
            }
        points.push_back(std::move(feature));
        cluster_ids.push_back(dominant);
    }
    SilhouetteChoice out;
    out.n_points = static_cast<int>(points.size());
    out.n_clusters = static_cast<int>(std::set<int>(cluster_ids.begin(), cluster_ids.end()).size());
    if (out.n_clusters < 2) {
        // a single dominant concept is maximal non-separation
        out.degenerate = true;
        out.score = 0.0;
        out.lambda = 2.0;
        return out;
    }
    out.score = silhouette(points, cluster_ids);
    out.lambda = select_lambda(out.score);
    return out;
}

// ---------------------------------------------------------------------------
// Stage-2 classifier
// ---------------------------------------------------------------------------

struct ClassifierParams {
    TensorPtr w1, b1, w2, b2;

    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const {
        return {{"fc1_w", w1}, {"fc1_b", b1}, {"fc2_w", w2}, {"fc2_b", b2}};
    }
    std::vector<TensorPtr> tensors() const { return {w1, b1, w2, b2}; }
};

inline ClassifierParams init_classifier(int input_dim, int hidden, int n_classes, Rng& rng,
                                        bool requires_grad) {
    ClassifierParams p;
    auto init = [&](int fi, int fo) {
        auto t = make_tensor({fi, fo}, requires_grad);
        const double dev = 1.0 / std::sqrt(static_cast<double>(fi));
        for (auto& v : t->values) v = rng.normal(0.0, dev);
        return t;
    };
    p.w1 = init(input_dim, hidden);
    p.b1 = make_tensor({hidden}, requires_grad);
    p.w2 = init(hidden, n_classes);
    p.b2 = make_tensor({n_classes}, requires_grad);
    return p;
}

inline ClassifierParams clone_classifier(const ClassifierParams& src) {
    ClassifierParams p;
    auto copy = [](const TensorPtr& t) {
        auto c = make_tensor(t->shape);
        c->values = t->values;
        return c;
    };
    p.w1 = copy(src.w1);
    p.b1 = copy(src.b1);
    p.w2 = copy(src.w2);
    p.b2 = copy(src.b2);
    return p;
}

inline TensorPtr classifier_logits(Tape* tape, const ClassifierParams& p, const TensorPtr& x) {
    auto h = ops::relu(tape, ops::add_rowvec(tape, ops::matmul(tape, x, p.w1), p.b1));
    return ops::add_rowvec(tape, ops::matmul(tape, h, p.w2), p.b2);
}

inline TensorPtr flatten_images(const std::vector<SyntheticSample>& samples, const std::vector<int>& idx) {
    require(!idx.empty(), "flatten_images: empty index list");
    const int dim = static_cast<int>(samples[0].image.data.size());
    auto X = make_tensor({static_cast<int>(idx.size()), dim});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& img = samples[static_cast<std::size_t>(idx[b])].image.data;
        std::copy(img.begin(), img.end(), X->values.begin() + static_cast<std::ptrdiff_t>(b) * dim);
    }
    return X;
}

inline std::vector<int> classifier_predict(const ClassifierParams& p,
                                           const std::vector<SyntheticSample>& samples, int batch = 256) {
    std::vector<int> preds;
    preds.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        std::vector<int> idx;
        for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch)); ++i)
            idx.push_back(static_cast<int>(i));
        auto logits = classifier_logits(nullptr, p, flatten_images(samples, idx));
        for (int r = 0; r < logits->rows(); ++r) {
            std::span<const double> row(logits->values.data() + static_cast<std::size_t>(r) * logits->cols(),
                                        static_cast<std::size_t>(logits->cols()));
            preds.push_back(argmax_lowest(row));
        }
    }
    return preds;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double average = 0.0;
    double worst = 0.0;
    std::vector<GroupStat> table;
    std::vector<int> predictions;
};

inline EvalResult evaluate_split(const ClassifierParams& classifier,
                                 const std::vector<SyntheticSample>& samples,
                                 const GroupAssignment& groups, int min_group_size) {
    require(!samples.empty(), "evaluate: empty split");
    EvalResult res;
    res.predictions = classifier_predict(classifier, samples);
    std::vector<int> labels;
    labels.reserve(samples.size());
    for (const auto& s : samples) labels.push_back(s.class_label);
    double correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (res.predictions[i] == labels[i]) correct += 1.0;
    res.average = correct / static_cast<double>(labels.size());
    auto wg = worst_group_accuracy(res.predictions, labels, groups, static_cast<std::size_t>(min_group_size));
    res.worst = wg.worst;
    res.table = std::move(wg.table);
    return res;
}

inline GroupAssignment ground_truth_grouping(const std::vector<SyntheticSample>& samples) {
    std::vector<int> classes, attrs;
    classes.reserve(samples.size());
    for (const auto& s : samples) {
        classes.push_back(s.class_label);
        attrs.push_back(s.color_attribute);
    }
    return groups_from_labels(classes, attrs);
}

// Inferred grouping for a split: records must be ordered like the split.
inline GroupAssignment inferred_grouping(const std::vector<AssignmentRecord>& records,
                                         const std::vector<SyntheticSample>& samples) {
    require(records.size() == samples.size(), "inferred grouping: record count ", records.size(),
            " does not match split size ", samples.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        require(records[i].sample_id == samples[i].sample_id,
                "inferred grouping: record order mismatch at position ", i);
    return infer_groups(records);
}

// ---------------------------------------------------------------------------
// Stage-2 training
// ---------------------------------------------------------------------------

struct Stage2Result {
    ClassifierParams classifier; // best checkpoint per the early-stop criterion
    int best_epoch = -1;
    double best_criterion = 0.0;
    double lambda_used = 1.0;
    double silhouette_score = 0.0;
    std::vector<nlohmann::json> epoch_metrics;
};

inline Stage2Result train_stage2(const TrainConfig& config, const Dataset& dataset,
                                 const std::filesystem::path& run_dir) {
    validate(config);
    const auto& cfg = config.stage2;
    const bool cobalt_mode = cfg.sampler == "cobalt";
    require(!dataset.train.empty() && !dataset.val.empty(), "train_stage2: empty split");

    // index of sample_id -> position in the training split
    std::map<std::uint32_t, int> train_pos;
    for (std::size_t i = 0; i < dataset.train.size(); ++i)
        train_pos[dataset.train[i].sample_id] = static_cast<int>(i);

    ClusterTable table;
    double lambda = cfg.lambda.value_or(1.0);
    double sil_score = 0.0;
    std::vector<AssignmentRecord> val_records;
    const auto val_assign_path = paths::assignments(run_dir, "val");
    if (std::filesystem::exists(val_assign_path)) val_records = load_assignments(val_assign_path);

    if (cobalt_mode) {
        const auto train_assign_path = paths::assignments(run_dir, "train");
        if (!std::filesystem::exists(train_assign_path))
            throw ArtifactError(strcat("stage2: sampler 'cobalt' needs stage-1 assignments at ",
                                       train_assign_path.string(), "; run the discovery stage first"));
        auto records = load_assignments(train_assign_path);
        table = build_cluster_table(records);
        if (!cfg.lambda.has_value()) {
            const auto summary_path = paths::cluster_summary(run_dir);
            if (std::filesystem::exists(summary_path)) {
                std::ifstream is(summary_path);
                nlohmann::json j;
                try {
                    is >> j;
                    lambda = j.at("lambda").get<double>();
                    sil_score = j.value("silhouette", 0.0);
                } catch (const nlohmann::json::exception& e) {
                    throw ArtifactError(strcat("corrupt cluster summary ", summary_path.string(), ": ", e.what()));
                }
            } else {
                auto model = load_stage1_model(config, run_dir);
                auto choice = silhouette_lambda(model, dataset.train, dataset.spec.patch_size,
                                                config.stage1.silhouette_max_points);
                lambda = choice.lambda;
                sil_score = choice.score;
                // persist the choice so later runs (and reruns on the same
                // artifacts) sample identically without touching images
                std::ofstream os(summary_path);
                os << cluster_summary_json(table, lambda, sil_score).dump(2) << "\n";
            }
        }
    }
    if (cfg.early_stop == "ig" && val_records.empty())
        throw ArtifactError(strcat("stage2: early-stop 'ig' needs stage-1 val assignments at ",
                                   val_assign_path.string()));

    const auto out_dir = paths::stage2_dir(run_dir, cfg.sampler, cfg.early_stop);
    std::filesystem::create_directories(out_dir);
    std::ofstream metrics_out(out_dir / "metrics.ndjson");
    if (!metrics_out) throw ArtifactError(strcat("cannot write ", (out_dir / "metrics.ndjson").string()));

    const int input_dim = static_cast<int>(dataset.train[0].image.data.size());
    Rng init_rng(derive_seed(config.seed, "stage2_init"));
    auto classifier = init_classifier(input_dim, cfg.hidden, dataset.spec.n_classes, init_rng, true);
    SgdMomentum opt(classifier.tensors(), cfg.lr, cfg.momentum, cfg.weight_decay);

    auto val_gt_groups = ground_truth_grouping(dataset.val);
    GroupAssignment val_ig_groups;
    if (!val_records.empty()) val_ig_groups = inferred_grouping(val_records, dataset.val);
    std::vector<int> val_labels;
    for (const auto& s : dataset.val) val_labels.push_back(s.class_label);

    const int n = static_cast<int>(dataset.train.size());
    const int B = std::min(cfg.batch_size, n);
    const int steps_per_epoch = std::max(1, n / B);

    Stage2Result result;
    result.lambda_used = lambda;
    result.silhouette_score = sil_score;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng batch_rng(derive_seed(config.seed, "stage2_batch", static_cast<std::uint64_t>(epoch)));
        double loss_sum = 0.0;
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::vector<int> idx;
            idx.reserve(static_cast<std::size_t>(B));
            if (cobalt_mode) {
                for (auto id : draw_batch(table, B, lambda, batch_rng)) {
                    auto it = train_pos.find(id);
                    require(it != train_pos.end(), "stage2: sampled unknown sample_id ", id);
                    idx.push_back(it->second);
                }
            } else {
                for (int b = 0; b < B; ++b)
                    idx.push_back(static_cast<int>(batch_rng.uniform_index(static_cast<std::uint64_t>(n))));
            }
            std::vector<int> labels;
            labels.reserve(idx.size());
            for (int i : idx) labels.push_back(dataset.train[static_cast<std::size_t>(i)].class_label);
            Tape tape;
            auto loss = ops::softmax_xent_rows(&tape, classifier_logits(&tape, classifier,
                                                                        flatten_images(dataset.train, idx)),
                                               labels);
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            loss_sum += loss->values[0];
        }

        // validation metrics
        auto val_preds = classifier_predict(classifier, dataset.val);
        double correct = 0;
        for (std::size_t i = 0; i < val_labels.size(); ++i)
            if (val_preds[i] == val_labels[i]) correct += 1.0;
        const double val_avg = correct / static_cast<double>(val_labels.size());
        const double val_worst_hg =
            worst_group_accuracy(val_preds, val_labels, val_gt_groups, static_cast<std::size_t>(cfg.min_group_size)).worst;
        std::optional<double> val_worst_ig;
        if (!val_records.empty())
            val_worst_ig = worst_group_accuracy(val_preds, val_labels, val_ig_groups,
                                                static_cast<std::size_t>(cfg.min_group_size)).worst;

        nlohmann::json row;
        row["epoch"] = epoch;
        row["train_loss"] = loss_sum / steps_per_epoch;
        row["val_avg"] = val_avg;
        row["val_worst_hg"] = val_worst_hg;
        if (val_worst_ig)
            row["val_worst_ig"] = *val_worst_ig;
        else
            row["val_worst_ig"] = nullptr;
        metrics_out << row.dump() << "\n";
        result.epoch_metrics.push_back(row);

        double criterion = val_avg;
        if (cfg.early_stop == "hg") criterion = val_worst_hg;
        if (cfg.early_stop == "ig") criterion = *val_worst_ig;
        if (result.best_epoch < 0 || criterion > result.best_criterion) {
            result.best_epoch = epoch;
            result.best_criterion = criterion;
            result.classifier = clone_classifier(classifier);
        }
    }
    metrics_out.close();

    write_checkpoint(out_dir / "classifier.cbsn", result.classifier.named_tensors());
    nlohmann::json summary;
    summary["sampler"] = cfg.sampler;
    summary["early_stop"] = cfg.early_stop;
    summary["best_epoch"] = result.best_epoch;
    summary["best_criterion"] = result.best_criterion;
    if (cobalt_mode) {
        summary["lambda"] = lambda;
        summary["silhouette"] = sil_score;
    }
    std::ofstream sm(out_dir / "train_summary.json");
    sm << summary.dump(2) << "\n";
    return result;
}

inline ClassifierParams load_classifier(const std::filesystem::path& ckpt_path) {
    auto tensors = read_checkpoint(ckpt_path);
    auto take = [&](const char* name) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ArtifactError(strcat("classifier checkpoint ", ckpt_path.string(), " lacks ", name));
        return it->second;
    };
    ClassifierParams p;
    p.w1 = take("fc1_w");
    p.b1 = take("fc1_b");
    p.w2 = take("fc2_w");
    p.b2 = take("fc2_b");
    return p;
}

} // namespace cobalt
