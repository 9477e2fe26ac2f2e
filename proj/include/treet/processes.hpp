#pragma once

#include "treet/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace treet {

enum class ChannelKind { Awgn, Gma, Gar, Benchmark, Hmm };
enum class NoiseKind { Gaussian, Uniform };

// A stationary channel / process definition covering every synthetic system
// used by the estimator, the capacity optimizer and the density experiments.
struct ChannelSpec {
    ChannelKind kind = ChannelKind::Awgn;
    double alpha = 0.0;        // gma/gar coefficient, hmm AR(1) coefficient
    double beta = 0.0;         // hmm delayed-tap coefficient
    double gamma = 1.0;        // hmm observation gain
    int delay = 1;             // gma noise delay k, hmm state delay k
    double noise_var = 1.0;    // sigma^2 (gma/gar/awgn), hmm sigma_W^2
    double obs_noise_var = 1.0;  // hmm sigma_V^2
    NoiseKind noise = NoiseKind::Gaussian;
    double lambda = 0.0;       // benchmark threshold
    double rho = 0.9;          // benchmark coupling
    double power = 1.0;        // input power constraint P
    bool feedback = false;

    void validate() const;
    std::string describe() const;
};

// Aligned samples of two scalar (or vector) processes with seed provenance.
struct TimeSeriesPair {
    Eigen::MatrixXd x;  // d_x x n
    Eigen::MatrixXd y;  // d_y x n
    std::uint64_t seed = 0;
    ChannelSpec spec;

    Eigen::Index length() const { return x.cols(); }
};

// Coupled benchmark process: X_t, Z_t iid N(0,1);
// Y_t = Z_t when Y_{t-1} < lambda, else rho*X_{t-1} + sqrt(1-rho^2)*Z_t,
// with Y_0 = Z_0.
TimeSeriesPair gen_benchmark(Eigen::Index n, double lambda, double rho, std::uint64_t seed);

// Additive-noise channels on a given input sequence. Noise recursions are
// warmed up over max(delay, 100) burn-in steps before being applied.
//   awgn: Z iid N(0, sigma^2)
//   gma(alpha, k): Z_t = N_t + alpha * N_{t-k}
//   gar(alpha):    Z_t = N_t + alpha * Z_{t-1}
Eigen::MatrixXd apply_channel(const Eigen::MatrixXd& x, const ChannelSpec& spec,
                              std::uint64_t seed);

// Hidden-state process: X_t = alpha X_{t-1} + beta X_{t-k} + W_t,
// Y_t = gamma X_t + V_t. Noise is Gaussian(0, sigma^2) or uniform on [-1,1].
TimeSeriesPair gen_hmm(Eigen::Index n, double alpha, double beta, double gamma, int k,
                       NoiseKind noise, double sigma_w2, double sigma_v2,
                       std::uint64_t seed);

struct StationarityResult {
    bool stationary = false;
    double min_root_modulus = 0.0;
};

// Roots of 1 - alpha z - beta z^k; stationary iff all lie outside the unit
// circle.
StationarityResult stationarity_check(double alpha, double beta, int k);

// Scales the batch so its mean square equals P exactly.
void power_normalize(Eigen::MatrixXd& x, double p);

// Step-wise form of the additive-noise channels, for generators that must
// interleave channel use with sample generation (e.g. feedback). The noise
// recursion is warmed up at construction exactly like apply_channel.
class StepChannel {
public:
    StepChannel(const ChannelSpec& spec, Eigen::Index batch, std::uint64_t seed);
    // x_t: d x batch inputs at one time step; returns y_t of the same shape.
    Eigen::MatrixXd step(const Eigen::MatrixXd& x_t);

private:
    ChannelSpec spec_;
    Eigen::Index batch_;
    Rng rng_;
    Eigen::MatrixXd noise_hist_;  // d*batch x delay ring buffer of raw noise (gma)
    Eigen::VectorXd ar_state_;    // d*batch accumulated noise (gar)
    long t_ = 0;
};

// Dataset export: CSV columns (t, x..., y...) and a compact binary block with
// a JSON header {n, d_x, d_y, seed, spec}.
void save_dataset_csv(const std::string& path, const TimeSeriesPair& data);
void save_dataset_binary(const std::string& path, const TimeSeriesPair& data);
TimeSeriesPair load_dataset_binary(const std::string& path);

}  // namespace treet
