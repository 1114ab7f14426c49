#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cobalt/common.hpp"
#include "cobalt/rng.hpp"
#include "cobalt/synthgen.hpp"
#include "cobalt/tensor.hpp"

namespace cobalt {

// Sizes of one branch: per-patch linear embedding, a small MLP, a two-layer
// projector down to the slot dimension, and N learned slot vectors.
struct BranchShape {
    int patch_dim = 0;   // patch_size² * 3
    int width = 32;      // embedding / MLP width
    int proj_hidden = 64;
    int dim = 16;        // d: projector output = slot dimension
    int n_slots = 4;     // N
};

struct BranchParams {
    TensorPtr embed_w, embed_b; // patch_dim -> width
    TensorPtr mlp_w, mlp_b;     // width -> width
    TensorPtr proj1_w, proj1_b; // width -> proj_hidden
    TensorPtr proj2_w, proj2_b; // proj_hidden -> dim
    TensorPtr slots;            // N × d

    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const {
        return {{"embed_w", embed_w}, {"embed_b", embed_b}, {"mlp_w", mlp_w},
                {"mlp_b", mlp_b},     {"proj1_w", proj1_w}, {"proj1_b", proj1_b},
                {"proj2_w", proj2_w}, {"proj2_b", proj2_b}, {"slots", slots}};
    }

    std::vector<TensorPtr> tensors() const {
        std::vector<TensorPtr> out;
        for (auto& [name, t] : named_tensors()) out.push_back(t);
        return out;
    }
};

inline TensorPtr init_weight(Rng& rng, int fan_in, int fan_out, bool requires_grad) {
    auto t = make_tensor({fan_in, fan_out}, requires_grad);
    const double dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t->values) v = rng.normal(0.0, dev);
    return t;
}

// Slot vectors start at N(0, 1/sqrt(d)) so initial attention stays near-uniform.
inline BranchParams init_branch(const BranchShape& shape, Rng& rng, bool requires_grad) {
    BranchParams p;
    p.embed_w = init_weight(rng, shape.patch_dim, shape.width, requires_grad);
    p.embed_b = make_tensor({shape.width}, requires_grad);
    p.mlp_w = init_weight(rng, shape.width, shape.width, requires_grad);
    p.mlp_b = make_tensor({shape.width}, requires_grad);
    p.proj1_w = init_weight(rng, shape.width, shape.proj_hidden, requires_grad);
    p.proj1_b = make_tensor({shape.proj_hidden}, requires_grad);
    p.proj2_w = init_weight(rng, shape.proj_hidden, shape.dim, requires_grad);
    p.proj2_b = make_tensor({shape.dim}, requires_grad);
    p.slots = make_tensor({shape.n_slots, shape.dim}, requires_grad);
    const double dev = 1.0 / std::sqrt(static_cast<double>(shape.dim));
    for (auto& v : p.slots->values) v = rng.normal(0.0, dev);
    return p;
}

inline BranchParams clone_branch(const BranchParams& src, bool requires_grad) {
    BranchParams p;
    auto copy = [&](const TensorPtr& t) {
        auto c = make_tensor(t->shape, requires_grad);
        c->values = t->values;
        return c;
    };
    p.embed_w = copy(src.embed_w);
    p.embed_b = copy(src.embed_b);
    p.mlp_w = copy(src.mlp_w);
    p.mlp_b = copy(src.mlp_b);
    p.proj1_w = copy(src.proj1_w);
    p.proj1_b = copy(src.proj1_b);
    p.proj2_w = copy(src.proj2_w);
    p.proj2_b = copy(src.proj2_b);
    p.slots = copy(src.slots);
    return p;
}

// Flattens a view into its patch matrix (P × patch_dim), patches in row-major
// grid order, pixels row-major within the patch. Pixel values are remapped
// from [0,1] to [-1,1]; raw pixel vectors are nearly parallel across patches,
// which flattens slot logits after a few random ReLU layers.
inline TensorPtr extract_patches(const Image& view, int patch) {
    require(view.h == view.w, "extract_patches: image must be square");
    require(patch > 0 && view.h % patch == 0, "extract_patches: size ", view.h,
            " not divisible into patches of ", patch);
    const int grid = view.h / patch;
    const int P = grid * grid;
    const int pdim = patch * patch * 3;
    auto X = make_tensor({P, pdim});
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const int p = pr * grid + pc;
            int k = 0;
            for (int r = 0; r < patch; ++r)
                for (int c = 0; c < patch; ++c)
                    for (int ch = 0; ch < 3; ++ch)
                        X->at(p, k++) = 2.0 * view.at(pr * patch + r, pc * patch + c, ch) - 1.0;
        }
    return X;
}

// Per-patch embed + MLP + projector: X (P × patch_dim) -> y (P × d).
// Rows are processed independently, so the map is permutation-equivariant.
// Leaky activations keep patch directions from folding together at init.
inline TensorPtr encode_patches(Tape* tape, const BranchParams& params, const TensorPtr& patches) {
    require(patches->cols() == params.embed_w->rows(), "encode: patch dim ", patches->cols(),
            " does not match embedding input ", params.embed_w->rows());
    auto h = ops::leaky_relu(tape, ops::add_rowvec(tape, ops::matmul(tape, patches, params.embed_w), params.embed_b));
    auto h2 = ops::leaky_relu(tape, ops::add_rowvec(tape, ops::matmul(tape, h, params.mlp_w), params.mlp_b));
    auto p1 = ops::leaky_relu(tape, ops::add_rowvec(tape, ops::matmul(tape, h2, params.proj1_w), params.proj1_b));
    return ops::add_rowvec(tape, ops::matmul(tape, p1, params.proj2_w), params.proj2_b);
}

inline TensorPtr encode_project(Tape* tape, const BranchParams& params, const Image& view, int patch) {
    return encode_patches(tape, params, extract_patches(view, patch));
}

// ---------------------------------------------------------------------------
// Slot attention and pooling
// ---------------------------------------------------------------------------

// A = softmax over the slot axis of (S̄ · ȳᵀ) / τ, optionally with a center
// vector subtracted from the logits first (teacher branch only). Every patch
// column of A sums to 1.
inline TensorPtr slot_attention(Tape* tape, const TensorPtr& slots, const TensorPtr& patches, double tau,
                                const std::vector<double>* center = nullptr) {
    require(tau > 0.0, "slot_attention: temperature must be positive, got ", tau);
    auto sbar = ops::row_l2_normalize(tape, slots, "slot row");
    auto ybar = ops::row_l2_normalize(tape, patches, "patch row");
    auto logits = ops::matmul_nt(tape, sbar, ybar); // N × P
    if (center != nullptr) {
        require(static_cast<int>(center->size()) == logits->rows(),
                "slot_attention: center length ", center->size(), " != slot count ", logits->rows());
        std::vector<double> expanded(logits->size());
        for (int i = 0; i < logits->rows(); ++i)
            for (int j = 0; j < logits->cols(); ++j)
                expanded[static_cast<std::size_t>(i) * logits->cols() + j] = -(*center)[static_cast<std::size_t>(i)];
        logits = ops::add(tape, logits, make_tensor(logits->shape, std::move(expanded)));
    }
    return ops::softmax_cols(tape, logits, tau);
}

// z = A · y  (N × d pooled concept representations)
inline TensorPtr pool_concepts(Tape* tape, const TensorPtr& attention, const TensorPtr& patches) {
    return ops::matmul(tape, attention, patches);
}

// m_i = true iff slot i wins the argmax of at least one patch column.
// Ties go to the lowest slot index.
inline std::vector<bool> active_slot_mask(const Tensor& attention) {
    const int N = attention.rows(), P = attention.cols();
    std::vector<bool> mask(static_cast<std::size_t>(N), false);
    for (int j = 0; j < P; ++j) {
        int best = 0;
        for (int i = 1; i < N; ++i)
            if (attention.at(i, j) > attention.at(best, j)) best = i;
        mask[static_cast<std::size_t>(best)] = true;
    }
    return mask;
}

// Per-slot fraction of patch columns won (used as attention mass downstream).
inline std::vector<double> slot_win_fractions(const Tensor& attention) {
    const int N = attention.rows(), P = attention.cols();
    std::vector<double> wins(static_cast<std::size_t>(N), 0.0);
    for (int j = 0; j < P; ++j) {
        int best = 0;
        for (int i = 1; i < N; ++i)
            if (attention.at(i, j) > attention.at(best, j)) best = i;
        wins[static_cast<std::size_t>(best)] += 1.0;
    }
    for (auto& w : wins) w /= P;
    return wins;
}

// I_i = m_s,i AND m_t,i — slots activated in both branches.
inline std::vector<bool> common_slot_indicator(const std::vector<bool>& m_s, const std::vector<bool>& m_t) {
    require(m_s.size() == m_t.size(), "indicator: mask lengths differ (", m_s.size(), " vs ", m_t.size(), ")");
    std::vector<bool> out(m_s.size());
    for (std::size_t i = 0; i < m_s.size(); ++i) out[i] = m_s[i] && m_t[i];
    return out;
}

// ---------------------------------------------------------------------------
// Teacher EMA
// ---------------------------------------------------------------------------

struct EmaSchedule {
    double alpha_t = 0.99;
    int period = 1; // 20 for the no-augmentation configuration

    void validate() const {
        if (alpha_t < 0.0 || alpha_t > 1.0) throw ConfigError("ema: alpha_t must lie in [0,1]");
        if (period < 1) throw ConfigError("ema: update period must be >= 1");
    }
};

// When step ≡ 0 (mod period), every teacher tensor becomes
// alpha_t * teacher + (1 - alpha_t) * student; otherwise unchanged.
inline void ema_update_teacher(const BranchParams& student, BranchParams& teacher,
                               const EmaSchedule& schedule, std::int64_t step) {
    schedule.validate();
    require(step >= 1, "ema: step must be >= 1, got ", step);
    if (step % schedule.period != 0) return;
    auto st = student.tensors();
    auto tt = teacher.tensors();
    for (std::size_t k = 0; k < st.size(); ++k) {
        require(st[k]->shape == tt[k]->shape, "ema: shape mismatch in tensor ", k);
        for (std::size_t i = 0; i < st[k]->size(); ++i)
            tt[k]->values[i] = schedule.alpha_t * tt[k]->values[i] +
                               (1.0 - schedule.alpha_t) * st[k]->values[i];
    }
}

// Running center for teacher attention logits (collapse avoidance): the
// center tracks the per-slot mean logit and is subtracted before the teacher
// softmax; sharpening comes from tau_t < tau_s.
struct CenterState {
    std::vector<double> center;
    double rate = 0.9;

    void init(int n_slots) { center.assign(static_cast<std::size_t>(n_slots), 0.0); }

    void update(const Tensor& raw_logits) {
        require(center.size() == static_cast<std::size_t>(raw_logits.rows()),
                "center: slot count changed");
        const int N = raw_logits.rows(), P = raw_logits.cols();
        std::vector<double> mean(static_cast<std::size_t>(N), 0.0);
        for (int i = 0; i < N; ++i) {
            for (int j = 0; j < P; ++j) mean[static_cast<std::size_t>(i)] += raw_logits.at(i, j);
            mean[static_cast<std::size_t>(i)] /= P;
        }
        update_mean(mean);
    }

    // EMA toward an externally accumulated per-slot mean logit (one update
    // per training step over the whole batch).
    void update_mean(const std::vector<double>& mean) {
        require(mean.size() == center.size(), "center: mean length mismatch");
        for (std::size_t i = 0; i < center.size(); ++i)
            center[i] = rate * center[i] + (1.0 - rate) * mean[i];
    }
};

// Raw (pre-temperature, pre-centering) attention logits: S̄ · ȳᵀ.
inline TensorPtr attention_logits(Tape* tape, const TensorPtr& slots, const TensorPtr& patches) {
    auto sbar = ops::row_l2_normalize(tape, slots, "slot row");
    auto ybar = ops::row_l2_normalize(tape, patches, "patch row");
    return ops::matmul_nt(tape, sbar, ybar);
}

// ---------------------------------------------------------------------------
// Checkpoints: named tensor records
// ---------------------------------------------------------------------------

constexpr std::uint16_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, TensorPtr>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArtifactError(strcat("cannot write checkpoint ", path.string()));
    os.write("CBSN", 4);
    io::write_u16(os, kCheckpointVersion);
    io::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        io::write_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(t->shape.size()));
        for (int d : t->shape) io::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t->values) io::write_f64(os, v);
    }
}

inline std::map<std::string, TensorPtr> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArtifactError(strcat("missing checkpoint ", path.string()));
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "CBSN")
        throw ArtifactError(strcat("bad magic in checkpoint ", path.string()));
    if (io::read_u16(is) != kCheckpointVersion)
        throw ArtifactError(strcat("unsupported checkpoint version in ", path.string()));
    const auto count = io::read_u32(is);
    std::map<std::string, TensorPtr> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto name_len = io::read_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int rank = is.get();
        std::vector<int> shape;
        for (int r = 0; r < rank; ++r) shape.push_back(static_cast<int>(io::read_u32(is)));
        auto t = make_tensor(shape);
        for (auto& v : t->values) v = io::read_f64(is);
        if (!is) throw ArtifactError(strcat("truncated checkpoint ", path.string()));
        out[name] = t;
    }
    return out;
}

inline void write_branch_checkpoint(const std::filesystem::path& path, const BranchParams& params,
                                    const CenterState* center = nullptr) {
    auto tensors = params.named_tensors();
    if (center != nullptr)
        tensors.emplace_back("center", make_tensor({static_cast<int>(center->center.size())},
                                                   std::vector<double>(center->center)));
    write_checkpoint(path, tensors);
}

inline BranchParams read_branch_checkpoint(const std::filesystem::path& path, bool requires_grad,
                                           CenterState* center = nullptr) {
    auto tensors = read_checkpoint(path);
    auto take = [&](const char* name) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ArtifactError(strcat("checkpoint ", path.string(), " lacks tensor ", name));
        it->second->requires_grad = requires_grad;
        if (requires_grad) it->second->ensure_grad();
        return it->second;
    };
    BranchParams p;
    p.embed_w = take("embed_w");
    p.embed_b = take("embed_b");
    p.mlp_w = take("mlp_w");
    p.mlp_b = take("mlp_b");
    p.proj1_w = take("proj1_w");
    p.proj1_b = take("proj1_b");
    p.proj2_w = take("proj2_w");
    p.proj2_b = take("proj2_b");
    p.slots = take("slots");
    if (center != nullptr) {
        auto it = tensors.find("center");
        if (it != tensors.end()) center->center = it->second->values;
    }
    return p;
}

// FNV-1a over the raw value bytes; used to verify teacher immutability.
inline std::uint64_t tensor_checksum(const BranchParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : params.tensors())
        for (double v : t->values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    return h;
}

} // namespace cobalt
