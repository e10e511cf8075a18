#include "mvreg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mvreg {

GradCheckResult gradient_check(ParamStore& store, const std::function<Var(Tape&)>& build,
                               double step, int max_per_param, uint64_t seed) {
    store.zero_grad();
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    auto eval = [&]() {
        Tape tape;
        Var loss = build(tape);
        return tape.value(loss).data[0];
    };

    Rng rng(seed);
    GradCheckResult res;
    for (Param* p : store.all()) {
        const int n = static_cast<int>(p->value.size());
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        if (n > max_per_param) {
            // Fisher-Yates prefix shuffle
            for (int i = 0; i < max_per_param; ++i)
                std::swap(idx[i], idx[rng.uniform_int(i, n - 1)]);
            idx.resize(max_per_param);
        }
        for (int i : idx) {
            const double orig = p->value.data[i];
            p->value.data[i] = orig + step;
            const double fp = eval();
            p->value.data[i] = orig - step;
            const double fm = eval();
            p->value.data[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = p->grad.data[i];
            // differences below the FD noise floor count as agreement
            const double diff = std::abs(an - fd);
            const double rel =
                diff <= 1e-8 ? 0.0 : diff / std::max(std::abs(an) + std::abs(fd), 1e-6);
            res.checked += 1;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = p->name;
            }
        }
    }
    return res;
}

}  // namespace mvreg
