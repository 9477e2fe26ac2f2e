#pragma once

#include "treet/model.hpp"
#include "treet/processes.hpp"

#include <Eigen/Dense>

#include <functional>

namespace treet {

// Normalized conditional density on a uniform grid.
struct DensityGrid {
    Eigen::VectorXd points;   // grid values (uniform spacing)
    double spacing = 0.0;
    Eigen::VectorXd weights;  // unnormalized (scaled by exp(-log_scale))
    double log_scale = 0.0;
    Eigen::VectorXd prob;     // normalized masses, sum exactly 1
};

// Uniform grid of `count` points spanning center +- span * sigma.
Eigen::VectorXd make_grid(double center, double sigma, int count = 1601, double span = 8.0);

// Recovers P(y | context) from a trained log-ratio network: evaluates the
// per-step output with each grid value substituted at the present position,
// forms exp(output) * ref(y) and normalizes over the grid.
//   history:       d_i x memory past input columns
//   present_rest:  the non-Y rows of the present input column (empty for a
//                  Y-only network)
//   log_ref:       log density of the reference measure at a grid value
DensityGrid conditional_density(const ModelParams& params, const Eigen::MatrixXd& history,
                                const Eigen::VectorXd& present_rest,
                                const Eigen::VectorXd& grid,
                                const std::function<double(double)>& log_ref);

// KL divergence (nats) and total variation between two grids (q floored at
// 1e-12 inside the log).
struct Divergences {
    double kl = 0.0;
    double tv = 0.0;
};
Divergences kl_tv(const DensityGrid& p, const DensityGrid& q);

// Grid masses of a continuous density: Riemann weights pdf(y) * spacing.
// `normalize` rescales the masses to sum exactly 1.
DensityGrid grid_masses(const std::function<double(double)>& log_pdf,
                        const Eigen::VectorXd& grid, bool normalize = true);

// Predictive density of Y_t given y-history for the no-delay Gaussian
// hidden-state model (beta = 0): standard predict/update recursion.
struct KalmanPredictive {
    double mean = 0.0;
    double variance = 0.0;
};
KalmanPredictive kalman_conditional(const ChannelSpec& hmm,
                                    const Eigen::VectorXd& y_history);
// Variant with a known initial state (x0 with variance p0).
KalmanPredictive kalman_conditional(const ChannelSpec& hmm, const Eigen::VectorXd& y_history,
                                    double x0, double p0);

// Density of Y_t given the latent X_t: Gaussian N(gamma x, sigma_V^2) or the
// shifted uniform for uniform observation noise.
struct AnalyticDensity {
    bool gaussian = true;
    double mean = 0.0;
    double variance = 1.0;  // Gaussian case
    double lo = 0.0, hi = 0.0;  // uniform case

    double log_pdf(double y) const;
};
AnalyticDensity analytic_reference_density(const ChannelSpec& hmm, double x_t);

}  // namespace treet
