#pragma once

#include <string>
#include <vector>

#include "cobalt/common.hpp"
#include "cobalt/rng.hpp"
#include "cobalt/tensor.hpp"

namespace cobalt {

// Two-layer predictor (d -> 2d -> d) applied to student slot representations
// before the contrastive comparison.
struct PredictorParams {
    TensorPtr w1, b1; // d -> hidden
    TensorPtr w2, b2; // hidden -> d

    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const {
        return {{"pred_w1", w1}, {"pred_b1", b1}, {"pred_w2", w2}, {"pred_b2", b2}};
    }

    std::vector<TensorPtr> tensors() const { return {w1, b1, w2, b2}; }
};

inline PredictorParams init_predictor(int dim, Rng& rng, bool requires_grad, int hidden = 0) {
    if (hidden <= 0) hidden = 2 * dim;
    PredictorParams p;
    auto init = [&](int fi, int fo) {
        auto t = make_tensor({fi, fo}, requires_grad);
        const double dev = 1.0 / std::sqrt(static_cast<double>(fi));
        for (auto& v : t->values) v = rng.normal(0.0, dev);
        return t;
    };
    p.w1 = init(dim, hidden);
    p.b1 = make_tensor({hidden}, requires_grad);
    p.w2 = init(hidden, dim);
    p.b2 = make_tensor({dim}, requires_grad);
    return p;
}

inline TensorPtr predictor_forward(Tape* tape, const PredictorParams& p, const TensorPtr& z) {
    // leaky activation: a plain relu can zero an entire row, and the
    // contrastive loss normalizes predictor rows
    auto h = ops::leaky_relu(tape, ops::add_rowvec(tape, ops::matmul(tape, z, p.w1), p.b1));
    return ops::add_rowvec(tape, ops::matmul(tape, h, p.w2), p.b2);
}

// ---------------------------------------------------------------------------
// Overlap mask and teacher-column alignment
// ---------------------------------------------------------------------------

// Re-indexes teacher attention columns through the overlap map so that column
// p of the result and of A_s refer to the same source region, and builds the
// binary mask M (N×P, all rows identical): M_{ip} = 1 iff student patch p has
// a counterpart in the teacher view.
struct AlignedTeacher {
    TensorPtr attention;      // N × P_s, constant
    std::vector<double> mask; // N × P_s binary, row-identical
};

inline AlignedTeacher align_teacher_attention(const Tensor& a_t, const std::vector<int>& overlap,
                                              int p_student) {
    const int N = a_t.rows(), P_t = a_t.cols();
    require(static_cast<int>(overlap.size()) == P_t, "align: overlap map length ", overlap.size(),
            " != teacher patch count ", P_t);
    AlignedTeacher out;
    out.attention = make_tensor({N, p_student});
    out.mask.assign(static_cast<std::size_t>(N) * p_student, 0.0);
    for (int i = 0; i < P_t; ++i) {
        const int j = overlap[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        require(j < p_student, "align: mapped student patch ", j, " out of range ", p_student);
        for (int n = 0; n < N; ++n) {
            out.attention->at(n, j) = a_t.at(n, i);
            out.mask[static_cast<std::size_t>(n) * p_student + j] = 1.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

// L_dis = -Σ_N Σ_P M ∘ A_t log A_s, teacher under stop-gradient, log clamped
// at kEpsProb. Teacher attention must already be aligned to student patch
// order, with M zero outside the overlap.
inline TensorPtr distill_loss(Tape* tape, const TensorPtr& a_t_aligned, const TensorPtr& a_s,
                              const std::vector<double>& mask) {
    require(a_t_aligned->shape == a_s->shape, "distill_loss: attention shapes disagree");
    require(mask.size() == a_s->size(), "distill_loss: mask size mismatch");
    std::vector<double> weights(mask.size());
    const auto frozen = detach(a_t_aligned);
    for (std::size_t i = 0; i < mask.size(); ++i) weights[i] = mask[i] * frozen->values[i];
    auto weighted = ops::mul_const(tape, ops::log_clamped(tape, a_s), weights);
    return ops::scale(tape, ops::sum_all(tape, weighted), -1.0);
}

struct ContrastResult {
    TensorPtr loss;
    bool degenerate = false; // no active common slot: loss defined as 0
};

// InfoNCE over the active-common slot set: each active slot's predicted
// student representation is scored against its own teacher target, normalized
// across the active set. Gradients flow only through the student/predictor
// path; z_t is treated as constant.
inline ContrastResult contrast_loss(Tape* tape, const TensorPtr& z_s, const TensorPtr& z_t,
                                    const std::vector<bool>& indicator, const PredictorParams& predictor,
                                    double tau_c) {
    require(tau_c > 0.0, "contrast_loss: tau_c must be positive, got ", tau_c);
    require(z_s->rows() == z_t->rows() && z_s->cols() == z_t->cols(),
            "contrast_loss: slot shapes disagree");
    require(static_cast<int>(indicator.size()) == z_s->rows(),
            "contrast_loss: indicator length mismatch");
    std::vector<int> active;
    for (std::size_t i = 0; i < indicator.size(); ++i)
        if (indicator[i]) active.push_back(static_cast<int>(i));
    ContrastResult out;
    if (active.empty()) {
        out.loss = scalar_tensor(0.0);
        out.degenerate = true;
        return out;
    }
    auto zbar_s = ops::row_l2_normalize(tape, z_s, "student slot row");
    auto pred = ops::row_l2_normalize(tape, predictor_forward(tape, predictor, zbar_s),
                                      "predicted slot row");
    auto zbar_t = ops::row_l2_normalize(tape, detach(z_t), "teacher slot row");
    auto sims = ops::rows_dot(tape, pred, zbar_t);                  // N
    auto v = ops::scale(tape, ops::select(tape, sims, active), 1.0 / tau_c); // active sims / tau
    // mean over active i of [logsumexp(v) - v_i]
    auto lse = ops::logsumexp(tape, v);
    out.loss = ops::sub(tape, lse, ops::mean_all(tape, v));
    return out;
}

// Plain unweighted sum of the three stage-1 terms; rejects non-finite parts.
inline TensorPtr total_loss(Tape* tape, const TensorPtr& l_dis, const TensorPtr& l_con,
                            const TensorPtr& l_vq) {
    const std::pair<const char*, const TensorPtr*> parts[] = {
        {"l_dis", &l_dis}, {"l_con", &l_con}, {"l_vq", &l_vq}};
    for (const auto& [name, t] : parts) {
        require((*t)->size() == 1, "total_loss: ", name, " is not scalar");
        require(std::isfinite((*t)->values[0]), "total_loss: ", name, " is non-finite (",
                (*t)->values[0], ")");
    }
    return ops::add(tape, ops::add(tape, l_dis, l_con), l_vq);
}

} // namespace cobalt
