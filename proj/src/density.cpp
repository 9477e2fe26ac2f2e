#include "treet/density.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace treet {

Eigen::VectorXd make_grid(double center, double sigma, int count, double span) {
    if (count < 2 || sigma <= 0.0 || span <= 0.0)
        throw std::invalid_argument("bad grid parameters");
    Eigen::VectorXd g(count);
    const double lo = center - span * sigma, hi = center + span * sigma;
    const double step = (hi - lo) / (count - 1);
    for (int i = 0; i < count; ++i) g(i) = lo + step * i;
    return g;
}

DensityGrid conditional_density(const ModelParams& params, const Eigen::MatrixXd& history,
                                const Eigen::VectorXd& present_rest,
                                const Eigen::VectorXd& grid,
                                const std::function<double(double)>& log_ref) {
    const auto& cfg = params.config;
    const int l = cfg.memory;
    if (history.rows() != cfg.input_dim || history.cols() != l)
        throw std::invalid_argument("history must be d_i x memory");
    if (present_rest.size() != cfg.input_dim - 1)
        throw std::invalid_argument("present_rest must carry the non-Y input rows");
    const int ng = static_cast<int>(grid.size());
    if (ng < 2) throw std::invalid_argument("grid needs at least two points");

    // One batch item per grid value: identical history, present Y set to the
    // grid value.
    SequenceBatch seq;
    seq.batch = ng;
    seq.length = l + 1;
    seq.values.resize(cfg.input_dim, static_cast<Eigen::Index>(ng) * (l + 1));
    for (int g = 0; g < ng; ++g) {
        auto cols = seq.values.middleCols(static_cast<Eigen::Index>(g) * (l + 1), l + 1);
        cols.leftCols(l) = history;
        cols.col(l)(0) = grid(g);
        if (present_rest.size() > 0) cols.col(l).tail(present_rest.size()) = present_rest;
    }
    ForwardCache cache;
    forward(seq, params, nullptr, cache);

    DensityGrid out;
    out.points = grid;
    out.spacing = grid(1) - grid(0);
    Eigen::VectorXd logw(ng);
    for (int g = 0; g < ng; ++g) logw(g) = cache.out(0, g) + log_ref(grid(g));
    const double m = logw.maxCoeff();
    if (!std::isfinite(m)) throw std::runtime_error("density weights are all zero");
    out.log_scale = m;
    out.weights = (logw.array() - m).exp();
    const double total = out.weights.sum();
    if (!(total > 0.0) || !std::isfinite(total))
        throw std::runtime_error("density normalizer is degenerate");
    out.prob = out.weights / total;
    if (out.prob(0) > 1e-3 || out.prob(ng - 1) > 1e-3)
        std::cerr << "warning: density grid may not cover the bulk "
                     "(endpoint mass " << std::max(out.prob(0), out.prob(ng - 1)) << ")\n";
    return out;
}

Divergences kl_tv(const DensityGrid& p, const DensityGrid& q) {
    if (p.points.size() != q.points.size() ||
        (p.points - q.points).cwiseAbs().maxCoeff() > 1e-9)
        throw std::invalid_argument("kl_tv requires identical grids");
    Divergences d;
    for (Eigen::Index i = 0; i < p.prob.size(); ++i) {
        const double pi = p.prob(i);
        const double qi = std::max(q.prob(i), 1e-12);
        if (pi > 0.0) d.kl += pi * std::log(pi / qi);
        d.tv += std::abs(pi - q.prob(i));
    }
    d.tv *= 0.5;
    return d;
}

DensityGrid grid_masses(const std::function<double(double)>& log_pdf,
                        const Eigen::VectorXd& grid, bool normalize) {
    DensityGrid out;
    out.points = grid;
    out.spacing = grid(1) - grid(0);
    out.weights.resize(grid.size());
    for (Eigen::Index i = 0; i < grid.size(); ++i)
        out.weights(i) = std::exp(log_pdf(grid(i))) * out.spacing;
    const double total = out.weights.sum();
    out.prob = normalize ? Eigen::VectorXd(out.weights / total) : out.weights;
    return out;
}

KalmanPredictive kalman_conditional(const ChannelSpec& hmm,
                                    const Eigen::VectorXd& y_history) {
    if (hmm.alpha * hmm.alpha >= 1.0)
        throw std::invalid_argument("stationary prior needs |alpha| < 1");
    return kalman_conditional(hmm, y_history, 0.0,
                              hmm.noise_var / (1.0 - hmm.alpha * hmm.alpha));
}

KalmanPredictive kalman_conditional(const ChannelSpec& hmm, const Eigen::VectorXd& y_history,
                                    double x0, double p0) {
    if (hmm.kind != ChannelKind::Hmm)
        throw std::invalid_argument("kalman_conditional needs an hmm spec");
    if (hmm.beta != 0.0)
        throw std::invalid_argument("kalman_conditional supports beta = 0 only");
    if (hmm.noise != NoiseKind::Gaussian)
        throw std::invalid_argument("kalman_conditional supports Gaussian noise only");
    const double a = hmm.alpha, g = hmm.gamma;
    const double qw = hmm.noise_var, rv = hmm.obs_noise_var;
    double xh = x0, pp = p0;  // prior of the state at the first history step
    for (Eigen::Index t = 0; t < y_history.size(); ++t) {
        const double s = g * g * pp + rv;
        const double k = pp * g / s;
        xh += k * (y_history(t) - g * xh);
        pp *= (1.0 - k * g);
        // time update
        xh *= a;
        pp = a * a * pp + qw;
    }
    return KalmanPredictive{g * xh, g * g * pp + rv};
}

double AnalyticDensity::log_pdf(double y) const {
    if (gaussian) {
        return -0.5 * std::log(2.0 * std::numbers::pi * variance) -
               0.5 * (y - mean) * (y - mean) / variance;
    }
    if (y < lo || y > hi) return -std::numeric_limits<double>::infinity();
    return -std::log(hi - lo);
}

AnalyticDensity analytic_reference_density(const ChannelSpec& hmm, double x_t) {
    if (hmm.kind != ChannelKind::Hmm)
        throw std::invalid_argument("analytic_reference_density needs an hmm spec");
    AnalyticDensity d;
    if (hmm.noise == NoiseKind::Gaussian) {
        d.gaussian = true;
        d.mean = hmm.gamma * x_t;
        d.variance = hmm.obs_noise_var;
    } else {
        d.gaussian = false;
        d.lo = hmm.gamma * x_t - 1.0;
        d.hi = hmm.gamma * x_t + 1.0;
    }
    return d;
}

}  // namespace treet
