#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace treet {

enum class OracleMethod { ClosedForm, WaterFilling, PolynomialRoot, MonteCarlo };

struct OracleResult {
    double value = 0.0;  // nats
    OracleMethod method = OracleMethod::ClosedForm;
    double error_bar = 0.0;
};

constexpr double kLn2 = 0.6931471805599453;
inline double nats_to_bits(double nats) { return nats / kLn2; }
inline double bits_to_nats(double bits) { return bits * kLn2; }

// C = 0.5 log(1 + P / sigma^2), nats.
OracleResult awgn_capacity(double p, double sigma2);

// Noise power spectral densities sampled on `grid` points over one period.
Eigen::VectorXd ma_noise_psd(double alpha, double sigma2, int delay = 1, int grid = 4096);
Eigen::VectorXd ar1_noise_psd(double alpha, double sigma2, int grid = 4096);

// Feedforward capacity of an additive Gaussian channel with the given noise
// psd under power P: water level via bisection, capacity by the integral.
OracleResult water_filling_capacity(const Eigen::VectorXd& noise_psd, double p);

// Feedback capacity of the MA(1) Gaussian channel: -log(x0) with x0 the
// unique root in (0, 1) of (P/sigma^2) x^2 = (1 - x^2)(1 - |alpha| x)^2.
OracleResult ma1_feedback_capacity(double alpha, double p, double sigma2);

// Noise autocovariances (lags 0..len-1).
Eigen::VectorXd ma_autocov(double alpha, double sigma2, int delay, int len);
Eigen::VectorXd ar1_autocov(double alpha, double sigma2, int len);

// Brute-force feedforward check: optimal Gaussian mutual information per
// symbol over a finite horizon with circulant noise covariance.
OracleResult circulant_gaussian_capacity(const Eigen::VectorXd& autocov, int horizon,
                                         double p);

// Finite-horizon directed-information optimization over linear feedback
// policies (X = B Z + V with strictly causal B): projected gradient ascent
// with a dual-updated power multiplier.
OracleResult gaussian_feedback_di_capacity(const Eigen::VectorXd& autocov, int horizon,
                                           double p, int iterations = 4000);

// Monte-Carlo ground truth of the threshold benchmark's order-1 transfer
// entropy: TE = P(Y >= lambda) * (-0.5 log(1 - rho^2)). Refuses n_mc < 1e4.
OracleResult benchmark_te_oracle(double lambda, double rho, long n_mc, std::uint64_t seed);

// Independent route for tests: the same quantity as a difference of
// Monte-Carlo conditional entropies.
double benchmark_te_entropy_mc(double lambda, double rho, long n_mc, std::uint64_t seed);

// CSV rows (spec, value, method, error_bar) for report joins.
struct OracleRow {
    std::string spec;
    OracleResult result;
};
void write_oracle_table(const std::string& path, const std::vector<OracleRow>& rows);

const char* oracle_method_name(OracleMethod m);

}  // namespace treet
