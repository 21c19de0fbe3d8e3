#pragma once

#include <vector>

#include "adapter.hpp"
#include "attention.hpp"
#include "common.hpp"

namespace miva {

// Reference (non-tape) forms of the n-adapter combination rules. The
// sampling/training graph realizes the same arithmetic through tape ops; unit
// tests hold these two implementations against each other.

// One SA slot's members for one composed adapter.
template <typename T>
struct ComposedSlotAdapter {
    const CfaLayerT<T>* ref1;
    const CfaLayerT<T>* prev;
    Mat<T> lambda;  // 1x2 from that adapter's phi module
    T weight;
};

// SA(f_i) + sum_j w_j (lambda2_j CFA_j(f_i, f_1) + lambda3_j CFA_j(f_i, f_prev))
template <typename T>
Mat<T> compose_sa(const Mat<T>& f_i, const Mat<T>& f_1, const Mat<T>& f_prev,
                  const AttentionParams<T>& base,
                  const std::vector<ComposedSlotAdapter<T>>& adapters) {
    Mat<T> out = self_attention(f_i, base);
    for (auto& a : adapters) {
        if (a.weight == T(0)) continue;
        Mat<T> contrib = a.lambda(0, 0) * cfa(f_i, f_1, base, *a.ref1);
        contrib += a.lambda(0, 1) * cfa(f_i, f_prev, base, *a.prev);
        out += a.weight * contrib;
    }
    return out;
}

// base + sum_j w_j (out_j - base): weighted residual summation for sites
// whose adapters replace rather than add (CA, temporal SA).
template <typename T>
Mat<T> compose_residuals(const Mat<T>& base_output, const std::vector<Mat<T>>& adapter_outputs,
                         const std::vector<T>& w) {
    MIVA_CHECK(adapter_outputs.size() == w.size(),
               "compose_residuals: %zu outputs vs %zu weights", adapter_outputs.size(),
               w.size());
    Mat<T> out = base_output;
    for (size_t j = 0; j < w.size(); j++) {
        MIVA_CHECK(adapter_outputs[j].rows() == base_output.rows() &&
                       adapter_outputs[j].cols() == base_output.cols(),
                   "compose_residuals: shape mismatch at adapter %zu", j);
        if (w[j] == T(0)) continue;
        out += w[j] * (adapter_outputs[j] - base_output);
    }
    return out;
}

}  // namespace miva
