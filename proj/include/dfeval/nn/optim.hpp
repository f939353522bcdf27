#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfeval/nn/autograd.hpp"
#include "dfeval/rng.hpp"

namespace dfeval::nn {

enum class ParamGroup { Backbone, Head };

inline std::string_view group_name(ParamGroup g) { return g == ParamGroup::Backbone ? "backbone" : "head"; }

struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::Backbone;
    Var var;
};

/// He-normal weights (std sqrt(2 / fan_in)) unless `sd` is given; biases
/// start at zero.
inline Parameter make_parameter(std::string name, ParamGroup group, std::vector<int> shape, int fan_in, Rng& rng,
                                bool is_bias = false, double sd = 0.0) {
    std::vector<double> v(shape_numel(shape), 0.0);
    if (!is_bias) {
        if (sd <= 0.0) sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& x : v) x = sd * rng.normal();
    }
    Parameter p{std::move(name), group, leaf(std::move(v), std::move(shape), true)};
    p.var->parameter = true;
    return p;
}

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// Applies one update to each parameter from its accumulated gradient.
    /// Parameters without a gradient buffer are left untouched.
    void step(const std::vector<Parameter*>& params) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (Parameter* p : params) {
            auto& node = *p->var;
            if (node.grad.empty()) continue;
            auto& st = state_[p->name];
            if (st.m.empty()) {
                st.m.assign(node.numel(), 0.0);
                st.v.assign(node.numel(), 0.0);
            }
            for (std::size_t i = 0; i < node.numel(); ++i) {
                const double g = node.grad[i];
                st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g;
                st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g * g;
                node.value[i] -= lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
            }
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

} // namespace dfeval::nn
