#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dstfuse/tensor.hpp"

namespace dstfuse {

struct GradCheckReport {
    bool ok = true;
    double max_error = 0.0;     // worst relative discrepancy over all coordinates
    std::size_t coords = 0;     // coordinates compared
    std::string worst;          // human-readable location of the worst coordinate
};

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must construct the graph from the given leaves on the given tape
/// and return the scalar loss; it is called repeatedly and must be a pure
/// function of the leaf values. Relative error uses a floor so coordinates
/// near zero are compared absolutely.
inline GradCheckReport check_gradients(
    const std::function<TensorPtr(Tape&, const std::vector<TensorPtr>&)>& build,
    const std::vector<TensorPtr>& leaves, double step = 1e-5, double tolerance = 1e-4) {
    auto eval = [&](const std::vector<TensorPtr>& ls) {
        Tape tape;
        auto loss = build(tape, ls);
        if (loss->numel() != 1) throw DimensionError("gradient check requires a scalar loss");
        return loss->data[0];
    };

    // The builder must be deterministic, otherwise finite differences are
    // meaningless; two evaluations at the same point must agree bitwise.
    const double probe1 = eval(leaves);
    const double probe2 = eval(leaves);
    if (probe1 != probe2)
        throw NumericError("gradient check: loss is not deterministic across evaluations");

    // Analytic pass.
    for (auto& l : leaves) l->zero_grad();
    {
        Tape tape;
        auto loss = build(tape, leaves);
        tape.backward(loss);
    }

    GradCheckReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        if (!leaf->has_grad()) continue;
        for (std::size_t i = 0; i < leaf->data.size(); ++i) {
            const double saved = leaf->data[i];
            leaf->data[i] = saved + step;
            const double up = eval(leaves);
            leaf->data[i] = saved - step;
            const double down = eval(leaves);
            leaf->data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = leaf->grad[i];
            // The floor keeps roundoff noise in the difference quotient from
            // dominating coordinates whose true gradient is near zero; a real
            // backward bug on such a coordinate still lands far above any
            // sane tolerance (e.g. a dropped 1e-3 gradient scores 1.0).
            const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-3);
            const double err = std::abs(numeric - analytic) / denom;
            ++report.coords;
            if (err > report.max_error) {
                report.max_error = err;
                report.worst = "leaf " + std::to_string(li) + " coord " + std::to_string(i) +
                               " analytic " + std::to_string(analytic) + " numeric " +
                               std::to_string(numeric);
            }
        }
    }
    report.ok = report.max_error <= tolerance;
    return report;
}

}  // namespace dstfuse
