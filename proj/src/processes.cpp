#include "treet/processes.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace treet {

using nlohmann::json;

void ChannelSpec::validate() const {
    if (noise_var <= 0.0 && kind != ChannelKind::Hmm)
        throw std::invalid_argument("noise variance must be positive");
    if (power <= 0.0) throw std::invalid_argument("power constraint must be positive");
    switch (kind) {
        case ChannelKind::Gar:
            if (std::abs(alpha) >= 1.0)
                throw std::invalid_argument("gar requires |alpha| < 1");
            break;
        case ChannelKind::Gma:
            if (delay < 1) throw std::invalid_argument("gma delay must be >= 1");
            break;
        case ChannelKind::Benchmark:
            if (rho < 0.0 || rho > 1.0)
                throw std::invalid_argument("benchmark rho must be in [0, 1]");
            break;
        case ChannelKind::Hmm: {
            const auto st = stationarity_check(alpha, beta, delay);
            if (!st.stationary) {
                std::ostringstream msg;
                msg << "hmm parameters are non-stationary: characteristic root of modulus "
                    << st.min_root_modulus << " inside the unit circle";
                throw std::invalid_argument(msg.str());
            }
            break;
        }
        case ChannelKind::Awgn:
            break;
    }
}

std::string ChannelSpec::describe() const {
    std::ostringstream s;
    switch (kind) {
        case ChannelKind::Awgn: s << "awgn(var=" << noise_var << ")"; break;
        case ChannelKind::Gma: s << "gma(alpha=" << alpha << ",k=" << delay << ",var=" << noise_var << ")"; break;
        case ChannelKind::Gar: s << "gar(alpha=" << alpha << ",var=" << noise_var << ")"; break;
        case ChannelKind::Benchmark: s << "benchmark(lambda=" << lambda << ",rho=" << rho << ")"; break;
        case ChannelKind::Hmm:
            s << "hmm(alpha=" << alpha << ",beta=" << beta << ",gamma=" << gamma
              << ",k=" << delay << ",noise=" << (noise == NoiseKind::Gaussian ? "gauss" : "unif")
              << ")";
            break;
    }
    if (feedback) s << "+fb";
    s << ",P=" << power;
    return s.str();
}

TimeSeriesPair gen_benchmark(Eigen::Index n, double lambda, double rho, std::uint64_t seed) {
    if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("rho must be in [0, 1]");
    if (n < 1) throw std::invalid_argument("n must be >= 1");
    Rng rng(seed);
    TimeSeriesPair out;
    out.seed = seed;
    out.spec.kind = ChannelKind::Benchmark;
    out.spec.lambda = lambda;
    out.spec.rho = rho;
    out.x.resize(1, n);
    out.y.resize(1, n);
    const double comp = std::sqrt(1.0 - rho * rho);
    double y_prev = 0.0;
    for (Eigen::Index t = 0; t < n; ++t) {
        const double xt = rng.normal();
        const double zt = rng.normal();
        double yt;
        if (t == 0) {
            yt = zt;
        } else if (y_prev < lambda) {
            yt = zt;
        } else {
            yt = rho * out.x(0, t - 1) + comp * zt;
        }
        out.x(0, t) = xt;
        out.y(0, t) = yt;
        y_prev = yt;
    }
    return out;
}

Eigen::MatrixXd apply_channel(const Eigen::MatrixXd& x, const ChannelSpec& spec,
                              std::uint64_t seed) {
    spec.validate();
    if (!x.allFinite()) throw std::invalid_argument("channel input is not finite");
    const Eigen::Index d = x.rows(), n = x.cols();
    Rng rng(seed);
    const double sigma = std::sqrt(spec.noise_var);
    Eigen::MatrixXd z(d, n);
    switch (spec.kind) {
        case ChannelKind::Awgn: {
            if (spec.noise_var == 0.0) {
                z.setZero();
            } else {
                for (Eigen::Index t = 0; t < n; ++t)
                    for (Eigen::Index r = 0; r < d; ++r) z(r, t) = rng.normal(0.0, sigma);
            }
            break;
        }
        case ChannelKind::Gma: {
            const int k = spec.delay;
            const Eigen::Index burn = std::max<Eigen::Index>(k, 100);
            Eigen::MatrixXd noise(d, burn + n);
            for (Eigen::Index t = 0; t < burn + n; ++t)
                for (Eigen::Index r = 0; r < d; ++r)
                    noise(r, t) = spec.noise_var == 0.0 ? 0.0 : rng.normal(0.0, sigma);
            for (Eigen::Index t = 0; t < n; ++t)
                z.col(t) = noise.col(burn + t) + spec.alpha * noise.col(burn + t - k);
            break;
        }
        case ChannelKind::Gar: {
            const Eigen::Index burn = 100;
            Eigen::VectorXd state = Eigen::VectorXd::Zero(d);
            for (Eigen::Index t = 0; t < burn + n; ++t) {
                for (Eigen::Index r = 0; r < d; ++r) {
                    const double nt = spec.noise_var == 0.0 ? 0.0 : rng.normal(0.0, sigma);
                    state(r) = nt + spec.alpha * state(r);
                }
                if (t >= burn) z.col(t - burn) = state;
            }
            break;
        }
        default:
            throw std::invalid_argument("apply_channel supports awgn, gma and gar kinds");
    }
    return x + z;
}

TimeSeriesPair gen_hmm(Eigen::Index n, double alpha, double beta, double gamma, int k,
                       NoiseKind noise, double sigma_w2, double sigma_v2,
                       std::uint64_t seed) {
    if (k < 0) throw std::invalid_argument("hmm delay must be >= 0");
    const auto st = stationarity_check(alpha, beta, k);
    if (!st.stationary) {
        std::ostringstream msg;
        msg << "hmm parameters non-stationary: min characteristic root modulus "
            << st.min_root_modulus << " <= 1";
        throw std::invalid_argument(msg.str());
    }
    Rng rng(seed);
    const double sw = std::sqrt(sigma_w2), sv = std::sqrt(sigma_v2);
    auto draw_w = [&]() {
        return noise == NoiseKind::Gaussian ? rng.normal(0.0, sw) : rng.uniform(-1.0, 1.0);
    };
    auto draw_v = [&]() {
        return noise == NoiseKind::Gaussian ? rng.normal(0.0, sv) : rng.uniform(-1.0, 1.0);
    };
    // Transient from the zero initial state; floor keeps the no-delay case
    // warmed up as well.
    const Eigen::Index burn = std::max<Eigen::Index>(10 * std::max(k, 1), 100);
    const Eigen::Index lag = std::max(k, 1);
    std::vector<double> buf(lag, 0.0);  // buf[t % lag] holds X_t once written
    TimeSeriesPair out;
    out.seed = seed;
    out.spec.kind = ChannelKind::Hmm;
    out.spec.alpha = alpha;
    out.spec.beta = beta;
    out.spec.gamma = gamma;
    out.spec.delay = k;
    out.spec.noise = noise;
    out.spec.noise_var = sigma_w2;
    out.spec.obs_noise_var = sigma_v2;
    out.x.resize(1, n);
    out.y.resize(1, n);
    double x_prev = 0.0;
    for (Eigen::Index t = 0; t < burn + n; ++t) {
        double xt;
        if (k == 0) {
            // beta multiplies the same-time value; solve the implicit form.
            xt = (alpha * x_prev + draw_w()) / (1.0 - beta);
        } else {
            const double x_delay = buf[t % lag];  // written k steps ago = X_{t-k}
            xt = alpha * x_prev + beta * x_delay + draw_w();
        }
        const double yt = gamma * xt + draw_v();
        buf[t % lag] = xt;
        x_prev = xt;
        if (t >= burn) {
            out.x(0, t - burn) = xt;
            out.y(0, t - burn) = yt;
        }
    }
    return out;
}

StationarityResult stationarity_check(double alpha, double beta, int k) {
    if (k < 0) throw std::invalid_argument("k must be >= 0");
    // p(z) = 1 - alpha z - beta z^k; for k == 0 the beta term shifts the
    // constant: p(z) = (1 - beta) - alpha z.
    std::vector<double> coeff;  // coeff[i] multiplies z^i
    if (k == 0) {
        coeff = {1.0 - beta, -alpha};
    } else {
        coeff.assign(static_cast<std::size_t>(std::max(k, 1)) + 1, 0.0);
        coeff[0] = 1.0;
        coeff[1] -= alpha;
        coeff[static_cast<std::size_t>(k)] -= beta;
    }
    while (coeff.size() > 1 && coeff.back() == 0.0) coeff.pop_back();
    StationarityResult res;
    if (coeff.size() == 1) {
        // Constant polynomial: no roots, trivially stationary unless it is 0.
        res.stationary = coeff[0] != 0.0;
        res.min_root_modulus = std::numeric_limits<double>::infinity();
        return res;
    }
    const std::size_t deg = coeff.size() - 1;
    Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
    for (std::size_t i = 0; i + 1 < deg; ++i) companion(i + 1, i) = 1.0;
    for (std::size_t i = 0; i < deg; ++i)
        companion(i, deg - 1) = -coeff[i] / coeff[deg];
    Eigen::EigenSolver<Eigen::MatrixXd> solver(companion, /*computeEigenvectors=*/false);
    res.min_root_modulus = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i)
        res.min_root_modulus = std::min(res.min_root_modulus, std::abs(solver.eigenvalues()(i)));
    res.stationary = res.min_root_modulus > 1.0;
    return res;
}

void power_normalize(Eigen::MatrixXd& x, double p) {
    if (p <= 0.0) throw std::invalid_argument("power must be positive");
    const double ms = x.array().square().mean();
    if (ms <= 0.0) throw std::invalid_argument("cannot power-normalize an all-zero batch");
    x *= std::sqrt(p / ms);
}

StepChannel::StepChannel(const ChannelSpec& spec, Eigen::Index batch, std::uint64_t seed)
    : spec_(spec), batch_(batch), rng_(seed) {
    spec_.validate();
    if (spec_.kind != ChannelKind::Awgn && spec_.kind != ChannelKind::Gma &&
        spec_.kind != ChannelKind::Gar)
        throw std::invalid_argument("step channel supports awgn, gma and gar kinds");
    if (batch_ < 1) throw std::invalid_argument("step channel batch must be >= 1");
}

Eigen::MatrixXd StepChannel::step(const Eigen::MatrixXd& x_t) {
    const Eigen::Index d = x_t.rows();
    if (x_t.cols() != batch_) throw std::invalid_argument("step channel batch mismatch");
    const Eigen::Index rows = d * batch_;
    const double sigma = std::sqrt(spec_.noise_var);
    if (t_ == 0) {
        // Warm up the recursion from the zero state, mirroring apply_channel.
        const long burn = std::max<long>(spec_.kind == ChannelKind::Gma ? spec_.delay : 0, 100);
        if (spec_.kind == ChannelKind::Gma) noise_hist_.setZero(rows, spec_.delay);
        if (spec_.kind == ChannelKind::Gar) ar_state_.setZero(rows);
        for (long b = 0; b < burn; ++b) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                const double nt = spec_.noise_var == 0.0 ? 0.0 : rng_.normal(0.0, sigma);
                if (spec_.kind == ChannelKind::Gma)
                    noise_hist_(r, (t_ + b) % spec_.delay) = nt;
                else if (spec_.kind == ChannelKind::Gar)
                    ar_state_(r) = nt + spec_.alpha * ar_state_(r);
            }
        }
        t_ = burn;
    }
    Eigen::MatrixXd z(d, batch_);
    for (Eigen::Index c = 0; c < batch_; ++c) {
        for (Eigen::Index r = 0; r < d; ++r) {
            const Eigen::Index flat = c * d + r;
            const double nt = spec_.noise_var == 0.0 ? 0.0 : rng_.normal(0.0, sigma);
            double zt = nt;
            switch (spec_.kind) {
                case ChannelKind::Gma: {
                    zt = nt + spec_.alpha * noise_hist_(flat, t_ % spec_.delay);
                    noise_hist_(flat, t_ % spec_.delay) = nt;
                    break;
                }
                case ChannelKind::Gar:
                    zt = nt + spec_.alpha * ar_state_(flat);
                    ar_state_(flat) = zt;
                    break;
                default:
                    break;
            }
            z(r, c) = zt;
        }
    }
    ++t_;
    return x_t + z;
}

namespace {

json spec_to_json(const ChannelSpec& s) {
    return json{{"kind", static_cast<int>(s.kind)},
                {"alpha", s.alpha},
                {"beta", s.beta},
                {"gamma", s.gamma},
                {"delay", s.delay},
                {"noise_var", s.noise_var},
                {"obs_noise_var", s.obs_noise_var},
                {"noise", static_cast<int>(s.noise)},
                {"lambda", s.lambda},
                {"rho", s.rho},
                {"power", s.power},
                {"feedback", s.feedback}};
}

ChannelSpec spec_from_json(const json& j) {
    ChannelSpec s;
    s.kind = static_cast<ChannelKind>(j.at("kind").get<int>());
    s.alpha = j.at("alpha");
    s.beta = j.at("beta");
    s.gamma = j.at("gamma");
    s.delay = j.at("delay");
    s.noise_var = j.at("noise_var");
    s.obs_noise_var = j.at("obs_noise_var");
    s.noise = static_cast<NoiseKind>(j.at("noise").get<int>());
    s.lambda = j.at("lambda");
    s.rho = j.at("rho");
    s.power = j.at("power");
    s.feedback = j.at("feedback");
    return s;
}

}  // namespace

void save_dataset_csv(const std::string& path, const TimeSeriesPair& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dataset CSV: " + path);
    out.precision(12);
    out << "t";
    for (Eigen::Index r = 0; r < data.x.rows(); ++r) out << ",x" << r;
    for (Eigen::Index r = 0; r < data.y.rows(); ++r) out << ",y" << r;
    out << '\n';
    for (Eigen::Index t = 0; t < data.length(); ++t) {
        out << t;
        for (Eigen::Index r = 0; r < data.x.rows(); ++r) out << ',' << data.x(r, t);
        for (Eigen::Index r = 0; r < data.y.rows(); ++r) out << ',' << data.y(r, t);
        out << '\n';
    }
}

void save_dataset_binary(const std::string& path, const TimeSeriesPair& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset: " + path);
    json header{{"n", data.length()},
                {"d_x", data.x.rows()},
                {"d_y", data.y.rows()},
                {"seed", data.seed},
                {"spec", spec_to_json(data.spec)}};
    const std::string htext = header.dump();
    const std::uint64_t magic = 0x5445455444415441ULL;  // "TEETDATA"
    const std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(hlen));
    out.write(reinterpret_cast<const char*>(data.x.data()),
              static_cast<std::streamsize>(sizeof(double) * data.x.size()));
    out.write(reinterpret_cast<const char*>(data.y.data()),
              static_cast<std::streamsize>(sizeof(double) * data.y.size()));
}

TimeSeriesPair load_dataset_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read dataset: " + path);
    std::uint64_t magic = 0, hlen = 0;
    in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    if (magic != 0x5445455444415441ULL) throw std::runtime_error("bad dataset magic");
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    const json header = json::parse(htext);
    TimeSeriesPair data;
    data.seed = header.at("seed");
    data.spec = spec_from_json(header.at("spec"));
    const Eigen::Index n = header.at("n"), dx = header.at("d_x"), dy = header.at("d_y");
    data.x.resize(dx, n);
    data.y.resize(dy, n);
    in.read(reinterpret_cast<char*>(data.x.data()),
            static_cast<std::streamsize>(sizeof(double) * data.x.size()));
    in.read(reinterpret_cast<char*>(data.y.data()),
            static_cast<std::streamsize>(sizeof(double) * data.y.size()));
    if (!in) throw std::runtime_error("truncated dataset: " + path);
    return data;
}

}  // namespace treet
