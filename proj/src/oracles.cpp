#include "treet/oracles.hpp"

#include "treet/processes.hpp"
#include "treet/rng.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace treet {

OracleResult awgn_capacity(double p, double sigma2) {
    if (p <= 0.0 || sigma2 <= 0.0)
        throw std::invalid_argument("awgn capacity needs P > 0 and sigma^2 > 0");
    return OracleResult{0.5 * std::log1p(p / sigma2), OracleMethod::ClosedForm, 0.0};
}

Eigen::VectorXd ma_noise_psd(double alpha, double sigma2, int delay, int grid) {
    Eigen::VectorXd psd(grid);
    for (int j = 0; j < grid; ++j) {
        const double f = (j + 0.5) / grid;
        psd(j) = sigma2 *
                 (1.0 + alpha * alpha +
                  2.0 * alpha * std::cos(2.0 * std::numbers::pi * delay * f));
    }
    return psd;
}

Eigen::VectorXd ar1_noise_psd(double alpha, double sigma2, int grid) {
    Eigen::VectorXd psd(grid);
    for (int j = 0; j < grid; ++j) {
        const double f = (j + 0.5) / grid;
        psd(j) = sigma2 / (1.0 + alpha * alpha -
                           2.0 * alpha * std::cos(2.0 * std::numbers::pi * f));
    }
    return psd;
}

OracleResult water_filling_capacity(const Eigen::VectorXd& noise_psd, double p) {
    if (noise_psd.size() == 0 || (noise_psd.array() <= 0.0).any())
        throw std::invalid_argument("noise psd must be positive");
    if (p <= 0.0) throw std::invalid_argument("power must be positive");
    const double df = 1.0 / static_cast<double>(noise_psd.size());
    auto allocated = [&](double nu) {
        return (nu - noise_psd.array()).max(0.0).sum() * df;
    };
    double lo = noise_psd.minCoeff(), hi = noise_psd.maxCoeff() + p;
    if (allocated(hi) < p) {
        throw std::runtime_error("water-filling bisection bracket failed: allocated(" +
                                 std::to_string(hi) + ") < P");
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (allocated(mid) < p ? lo : hi) = mid;
    }
    const double nu = 0.5 * (lo + hi);
    const double cap =
        0.5 * ((nu - noise_psd.array()).max(0.0) / noise_psd.array()).log1p().sum() * df;
    return OracleResult{cap, OracleMethod::WaterFilling, 0.0};
}

OracleResult ma1_feedback_capacity(double alpha, double p, double sigma2) {
    if (std::abs(alpha) > 1.0)
        throw std::invalid_argument("ma1 feedback capacity needs |alpha| <= 1");
    if (p <= 0.0 || sigma2 <= 0.0)
        throw std::invalid_argument("ma1 feedback capacity needs P > 0, sigma^2 > 0");
    const double a = std::abs(alpha);
    const double snr = p / sigma2;
    // f(x) = snr x^2 - (1 - x^2)(1 - a x)^2 is -1 at 0 and snr > 0 at 1.
    auto f = [&](double x) {
        const double b = 1.0 - a * x;
        return snr * x * x - (1.0 - x * x) * b * b;
    };
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    const double x0 = 0.5 * (lo + hi);
    if (!(x0 > 0.0 && x0 < 1.0)) {
        throw std::runtime_error(
            "ma1 feedback capacity: no valid root in (0, 1); f(0)=" + std::to_string(f(0.0)) +
            " f(1)=" + std::to_string(f(1.0)));
    }
    return OracleResult{-std::log(x0), OracleMethod::PolynomialRoot, 0.0};
}

Eigen::VectorXd ma_autocov(double alpha, double sigma2, int delay, int len) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(len);
    r(0) = sigma2 * (1.0 + alpha * alpha);
    if (delay < len) r(delay) = sigma2 * alpha;
    return r;
}

Eigen::VectorXd ar1_autocov(double alpha, double sigma2, int len) {
    Eigen::VectorXd r(len);
    const double v0 = sigma2 / (1.0 - alpha * alpha);
    for (int k = 0; k < len; ++k) r(k) = v0 * std::pow(alpha, k);
    return r;
}

OracleResult circulant_gaussian_capacity(const Eigen::VectorXd& autocov, int horizon,
                                         double p) {
    if (horizon < 2 || autocov.size() < 1)
        throw std::invalid_argument("bad circulant capacity arguments");
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(horizon, horizon);
    for (int i = 0; i < horizon; ++i) {
        for (int j = 0; j < horizon; ++j) {
            int lag = std::abs(i - j);
            lag = std::min(lag, horizon - lag);  // wrap-around embedding
            if (lag < autocov.size()) cov(i, j) = autocov(lag);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd lam = es.eigenvalues();
    if ((lam.array() <= 0.0).any())
        throw std::runtime_error("circulant noise covariance not positive definite");
    // Water-fill over the numeric eigenvalues with total power horizon * P.
    auto allocated = [&](double nu) { return (nu - lam.array()).max(0.0).sum(); };
    const double total = horizon * p;
    double lo = lam.minCoeff(), hi = lam.maxCoeff() + total;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (allocated(mid) < total ? lo : hi) = mid;
    }
    const double nu = 0.5 * (lo + hi);
    const double cap =
        0.5 * ((nu - lam.array()).max(0.0) / lam.array()).log1p().sum() / horizon;
    return OracleResult{cap, OracleMethod::ClosedForm, 0.0};
}

OracleResult gaussian_feedback_di_capacity(const Eigen::VectorXd& autocov, int horizon,
                                           double p, int iterations) {
    if (horizon < 2) throw std::invalid_argument("horizon must be >= 2");
    const int n = horizon;
    Eigen::MatrixXd kz = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const int lag = std::abs(i - j);
            if (lag < autocov.size()) kz(i, j) = autocov(lag);
        }
    const double logdet_kz = Eigen::LLT<Eigen::MatrixXd>(kz)
                                 .matrixL()
                                 .toDenseMatrix()
                                 .diagonal()
                                 .array()
                                 .log()
                                 .sum() * 2.0;

    // X = B Z + V, B strictly lower triangular, V ~ N(0, K_V) independent.
    // K_Y = (I+B) K_Z (I+B)^T + K_V; maximize (logdet K_Y - logdet K_Z)/(2n)
    // subject to tr(B K_Z B^T + K_V) = nP. The multiplier mu is dual-updated;
    // K_V is re-optimized in closed form (water-filling in the eigenbasis)
    // every iteration.
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd kv = Eigen::MatrixXd::Identity(n, n) * p;
    double mu = 0.5 / (p + autocov(0));
    const double step = 0.02;
    double best = -1.0;
    for (int it = 0; it < iterations; ++it) {
        const Eigen::MatrixXd ib = Eigen::MatrixXd::Identity(n, n) + b;
        const Eigen::MatrixXd a = ib * kz * ib.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
        const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(1e-12);
        // Closed-form K_V for the current mu.
        const Eigen::VectorXd v = (0.5 / mu - lam.array()).max(0.0).matrix();
        kv = es.eigenvectors() * v.asDiagonal() * es.eigenvectors().transpose();

        const Eigen::MatrixXd ky = a + kv;
        const Eigen::MatrixXd ky_inv = ky.llt().solve(Eigen::MatrixXd::Identity(n, n));
        // Ascent direction for B under the penalized objective.
        Eigen::MatrixXd grad = ky_inv * ib * kz - 2.0 * mu * b * kz;
        grad = grad.triangularView<Eigen::StrictlyLower>();
        b += step * grad;

        const double used = (b * kz * b.transpose()).trace() + kv.trace();
        mu *= std::exp(0.05 * (used / (n * p) - 1.0));
        mu = std::min(std::max(mu, 1e-8), 1e8);

        if (it + 1 == iterations || (it % 100) == 99) {
            // Feasible evaluation: rescale onto the power constraint.
            Eigen::MatrixXd bs = b, kvs = kv;
            const double raw = (bs * kz * bs.transpose()).trace() + kvs.trace();
            if (raw > n * p) {
                const double c2 = n * p / raw;
                bs *= std::sqrt(c2);
                kvs *= c2;
            }
            const Eigen::MatrixXd ibf = Eigen::MatrixXd::Identity(n, n) + bs;
            const Eigen::MatrixXd kyf = ibf * kz * ibf.transpose() + kvs +
                                        1e-12 * Eigen::MatrixXd::Identity(n, n);
            const double logdet_ky = Eigen::LLT<Eigen::MatrixXd>(kyf)
                                         .matrixL()
                                         .toDenseMatrix()
                                         .diagonal()
                                         .array()
                                         .log()
                                         .sum() * 2.0;
            best = std::max(best, (logdet_ky - logdet_kz) / (2.0 * n));
        }
    }
    return OracleResult{best, OracleMethod::MonteCarlo, 0.0};
}

OracleResult benchmark_te_oracle(double lambda, double rho, long n_mc, std::uint64_t seed) {
    if (n_mc < 10000)
        throw std::invalid_argument("benchmark TE oracle needs n_mc >= 1e4");
    if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("rho must be in [0, 1]");
    const double coef = rho == 0.0 ? 0.0 : -0.5 * std::log1p(-rho * rho);
    const TimeSeriesPair data = gen_benchmark(n_mc, lambda, rho, seed);
    // Batch means for the error bar.
    const int nb = 20;
    const long per = n_mc / nb;
    Eigen::VectorXd means(nb);
    for (int b = 0; b < nb; ++b) {
        long cnt = 0;
        for (long t = b * per; t < (b + 1) * per; ++t)
            if (data.y(0, t) >= lambda) ++cnt;
        means(b) = static_cast<double>(cnt) / per;
    }
    const double phat = means.mean();
    const double sd = std::sqrt((means.array() - phat).square().sum() / (nb - 1));
    const double se = sd / std::sqrt(static_cast<double>(nb));
    return OracleResult{phat * coef, OracleMethod::MonteCarlo, se * coef};
}

double benchmark_te_entropy_mc(double lambda, double rho, long n_mc, std::uint64_t seed) {
    if (n_mc < 10000) throw std::invalid_argument("n_mc >= 1e4 required");
    const TimeSeriesPair data = gen_benchmark(n_mc, lambda, rho, seed);
    const double var2 = 1.0 - rho * rho;
    auto log_normal = [](double y, double mean, double var) {
        return -0.5 * std::log(2.0 * std::numbers::pi * var) -
               0.5 * (y - mean) * (y - mean) / var;
    };
    double h_past = 0.0, h_full = 0.0;
    long cnt = 0;
    for (long t = 1; t < n_mc; ++t) {
        const double y = data.y(0, t);
        // Given only Y_{t-1}, the conditional law is standard normal either way.
        h_past += -log_normal(y, 0.0, 1.0);
        if (data.y(0, t - 1) < lambda)
            h_full += -log_normal(y, 0.0, 1.0);
        else
            h_full += -log_normal(y, rho * data.x(0, t - 1), var2);
        ++cnt;
    }
    return (h_past - h_full) / static_cast<double>(cnt);
}

const char* oracle_method_name(OracleMethod m) {
    switch (m) {
        case OracleMethod::ClosedForm: return "closed-form";
        case OracleMethod::WaterFilling: return "water-filling";
        case OracleMethod::PolynomialRoot: return "polynomial-root";
        case OracleMethod::MonteCarlo: return "monte-carlo";
    }
    return "unknown";
}

void write_oracle_table(const std::string& path, const std::vector<OracleRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write oracle table: " + path);
    out.precision(10);
    out << "spec,value,method,error_bar\n";
    for (const auto& r : rows)
        out << r.spec << ',' << r.result.value << ',' << oracle_method_name(r.result.method)
            << ',' << r.result.error_bar << '\n';
}

}  // namespace treet
