#pragma once

#include "treet/model.hpp"

#include <cmath>
#include <vector>

namespace treet {

struct AdamConfig {
    double lr = 8e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam in ascent form: step() moves the parameters along the gradient of an
// objective that is being maximized.
class Adam {
public:
    Adam(const ModelConfig& cfg, AdamConfig acfg = {})
        : acfg_(acfg), m_(ModelParams::zeros(cfg)), v_(ModelParams::zeros(cfg)) {}

    void step(ModelParams& params, const ModelParams& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(acfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(acfg_.beta2, t_);
        auto pb = blocks(params);
        auto gb = blocks(const_cast<ModelParams&>(grads));
        auto mb = blocks(m_);
        auto vb = blocks(v_);
        for (std::size_t i = 0; i < pb.size(); ++i) {
            auto& m = *mb[i];
            auto& v = *vb[i];
            const auto& g = *gb[i];
            m = acfg_.beta1 * m + (1.0 - acfg_.beta1) * g;
            v = acfg_.beta2 * v.array().matrix() +
                (1.0 - acfg_.beta2) * g.array().square().matrix();
            pb[i]->array() += acfg_.lr * (m.array() / bc1) /
                              ((v.array() / bc2).sqrt() + acfg_.eps);
        }
    }

    long iterations() const { return t_; }

private:
    static std::vector<Eigen::MatrixXd*> blocks(ModelParams& p) {
        std::vector<Eigen::MatrixXd*> out;
        p.for_each_block([&out](const std::string&, Eigen::MatrixXd& m) { out.push_back(&m); });
        return out;
    }

    AdamConfig acfg_;
    long t_ = 0;
    ModelParams m_, v_;
};

}  // namespace treet
