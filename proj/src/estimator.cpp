#include "treet/estimator.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace treet {

ReferenceSpec ReferenceSpec::fixed_uniform(const Eigen::VectorXd& lo,
                                           const Eigen::VectorXd& hi) {
    if (lo.size() != hi.size() || ((hi - lo).array() <= 0.0).any())
        throw std::invalid_argument("fixed-uniform bounds must satisfy lo < hi");
    ReferenceSpec s;
    s.kind = ReferenceKind::FixedUniform;
    s.lo = lo;
    s.hi = hi;
    return s;
}

ReferenceSpec ReferenceSpec::fixed_uniform(double lo, double hi) {
    Eigen::VectorXd l(1), h(1);
    l << lo;
    h << hi;
    return fixed_uniform(l, h);
}

Eigen::MatrixXd sample_reference(const Eigen::MatrixXd& y_values, const ReferenceSpec& spec,
                                 Eigen::Index count, Rng& rng) {
    if (count < 1) throw std::invalid_argument("reference sample count must be >= 1");
    const Eigen::Index d = spec.kind == ReferenceKind::FixedUniform
                               ? spec.lo.size()
                               : y_values.rows();
    Eigen::MatrixXd out(d, count);
    switch (spec.kind) {
        case ReferenceKind::BoundingBox: {
            if (y_values.size() == 0)
                throw std::invalid_argument("bounding-box reference needs a non-empty batch");
            Eigen::VectorXd lo = y_values.rowwise().minCoeff();
            Eigen::VectorXd hi = y_values.rowwise().maxCoeff();
            for (Eigen::Index r = 0; r < d; ++r) {
                if (lo(r) >= hi(r)) {
                    const double pad =
                        std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(lo(r)));
                    std::cerr << "warning: degenerate reference box in dimension " << r
                              << "; widening by machine epsilon\n";
                    lo(r) -= pad;
                    hi(r) += pad;
                }
            }
            for (Eigen::Index c = 0; c < count; ++c)
                for (Eigen::Index r = 0; r < d; ++r) out(r, c) = rng.uniform(lo(r), hi(r));
            break;
        }
        case ReferenceKind::FixedUniform:
            for (Eigen::Index c = 0; c < count; ++c)
                for (Eigen::Index r = 0; r < d; ++r)
                    out(r, c) = rng.uniform(spec.lo(r), spec.hi(r));
            break;
        case ReferenceKind::CustomDensity:
            if (!spec.sampler) throw std::invalid_argument("custom reference needs a sampler");
            for (Eigen::Index c = 0; c < count; ++c) out.col(c) = spec.sampler(rng);
            break;
    }
    return out;
}

DvPotentialResult dv_from_outputs(const Eigen::VectorXd& joint, const Eigen::VectorXd& ref) {
    if (joint.size() == 0 || ref.size() == 0)
        throw std::invalid_argument("DV potential needs non-empty outputs");
    DvPotentialResult r;
    r.joint_outputs = joint;
    r.ref_outputs = ref;
    r.joint_mean = joint.mean();
    const double m = ref.maxCoeff();
    const double sum_exp = (ref.array() - m).exp().sum();
    if (!std::isfinite(sum_exp) || sum_exp <= 0.0)
        throw std::runtime_error("overflow in the DV reference term");
    r.ref_log_mean_exp = m + std::log(sum_exp) - std::log(static_cast<double>(ref.size()));
    r.value = r.joint_mean - r.ref_log_mean_exp;
    if (!std::isfinite(r.value)) throw std::runtime_error("non-finite DV potential");
    return r;
}

WindowBatch make_windows(const TimeSeriesPair& data, int count, int length, int memory,
                         bool include_x, const ReferenceSpec& ref, Rng& rng) {
    if (count < 1) throw std::invalid_argument("window count must be >= 1");
    if (length <= memory) throw std::invalid_argument("window length must exceed memory");
    const Eigen::Index n = data.length();
    if (n < length) throw std::invalid_argument("stream shorter than one window");
    const Eigen::Index dy = data.y.rows();
    const Eigen::Index dx = include_x ? data.x.rows() : 0;
    const int nvalid = length - memory;

    WindowBatch wb;
    wb.seq.batch = count;
    wb.seq.length = length;
    wb.seq.values.resize(dy + dx, static_cast<Eigen::Index>(count) * length);
    for (int b = 0; b < count; ++b) {
        const Eigen::Index start =
            static_cast<Eigen::Index>(rng.integer(static_cast<std::uint64_t>(n - length + 1)));
        auto cols = wb.seq.values.middleCols(static_cast<Eigen::Index>(b) * length, length);
        cols.topRows(dy) = data.y.middleCols(start, length);
        if (dx > 0) cols.bottomRows(dx) = data.x.middleCols(start, length);
    }

    // One reference draw per valid output position, boxed over the batch's Y.
    const Eigen::Index nref = static_cast<Eigen::Index>(count) * nvalid;
    const Eigen::MatrixXd refs =
        sample_reference(wb.seq.values.topRows(dy), ref, nref, rng);
    wb.ref_inputs.resize(dy + dx, nref);
    for (int b = 0; b < count; ++b) {
        for (int i = 0; i < nvalid; ++i) {
            const Eigen::Index cv = static_cast<Eigen::Index>(b) * nvalid + i;
            const Eigen::Index cj = static_cast<Eigen::Index>(b) * length + memory + i;
            wb.ref_inputs.col(cv).head(dy) = refs.col(cv);
            if (dx > 0) wb.ref_inputs.col(cv).tail(dx) = wb.seq.values.col(cj).tail(dx);
        }
    }
    return wb;
}

namespace {

DvPotentialResult dv_forward(const ModelParams& params, const WindowBatch& batch,
                             ForwardCache& cache) {
    forward(batch.seq, params, &batch.ref_inputs, cache);
    return dv_from_outputs(cache.out.row(0).transpose(), cache.out_r.row(0).transpose());
}

// Sensitivities of the DV value w.r.t. the two output vectors.
void dv_output_grads(const DvPotentialResult& r, Eigen::MatrixXd& d_out,
                     Eigen::MatrixXd& d_out_ref) {
    const Eigen::Index nj = r.joint_outputs.size(), nr = r.ref_outputs.size();
    d_out.resize(1, nj);
    d_out.setConstant(1.0 / static_cast<double>(nj));
    d_out_ref.resize(1, nr);
    const double lse = r.ref_log_mean_exp + std::log(static_cast<double>(nr));
    d_out_ref.row(0) = -(r.ref_outputs.array() - lse).exp().transpose();
}

}  // namespace

DvPotentialResult dv_potential(const ModelParams& params, const WindowBatch& batch) {
    static thread_local ForwardCache cache;  // reuses activation buffers
    return dv_forward(params, batch, cache);
}

DvPotentialResult dv_train_step(ModelParams& params, Adam& opt, const WindowBatch& batch) {
    static thread_local ForwardCache cache;
    const DvPotentialResult r = dv_forward(params, batch, cache);
    Eigen::MatrixXd d_out, d_out_ref;
    dv_output_grads(r, d_out, d_out_ref);
    const BackwardResult back = backward(batch.seq, params, cache, d_out, d_out_ref);
    opt.step(params, back.grads);
    return r;
}

DvInputGrads dv_input_grads(const ModelParams& params, const WindowBatch& batch) {
    ForwardCache cache;
    DvInputGrads out;
    out.result = dv_forward(params, batch, cache);
    Eigen::MatrixXd d_out, d_out_ref;
    dv_output_grads(out.result, d_out, d_out_ref);
    BackwardResult back = backward(batch.seq, params, cache, d_out, d_out_ref);
    out.d_inputs = std::move(back.d_inputs);
    out.d_ref_inputs = std::move(back.d_ref_inputs);
    return out;
}

TimeSeriesPair IidGaussianSource::generate(Eigen::Index n, std::uint64_t seed) const {
    Rng rng(seed);
    TimeSeriesPair out;
    out.seed = seed;
    out.x.resize(1, n);
    out.y.resize(1, n);
    for (Eigen::Index t = 0; t < n; ++t) {
        out.x(0, t) = rng.normal();
        out.y(0, t) = rng.normal();
    }
    return out;
}

TimeSeriesPair ChannelSource::generate(Eigen::Index n, std::uint64_t seed) const {
    Rng rng(substream(seed, 17));
    TimeSeriesPair out;
    out.seed = seed;
    out.spec = spec_;
    out.x.resize(1, n);
    const double amp = std::sqrt(spec_.power);
    for (Eigen::Index t = 0; t < n; ++t) out.x(0, t) = rng.normal(0.0, amp);
    out.y = apply_channel(out.x, spec_, substream(seed, 18));
    return out;
}

int TrainConfig::effective_batches() const {
    if (batches_per_epoch > 0) return batches_per_epoch;
    const long outputs_per_batch =
        static_cast<long>(batch_size) * (effective_window() - memory);
    return static_cast<int>(
        std::max<long>(1, (samples_per_epoch + outputs_per_batch - 1) / outputs_per_batch));
}

void TrainConfig::validate() const {
    if (batch_size < 1 || max_epochs < 1 || samples_per_epoch < 1 || memory < 0 ||
        patience < 1 || tolerance <= 0.0 || learning_rate <= 0.0 || divergence_cap <= 0.0)
        throw std::invalid_argument("train config fields must be positive");
    if (effective_window() <= memory)
        throw std::invalid_argument("window must exceed memory");
}

namespace {

ModelConfig arch_for(const TrainConfig& cfg, int input_dim, int memory) {
    ModelConfig a = cfg.arch;
    a.input_dim = input_dim;
    a.memory = memory;
    a.output_dim = 1;
    if (a.max_len < cfg.effective_window()) a.max_len = cfg.effective_window();
    a.validate();
    return a;
}

// Pool outputs of several window batches into one DV potential.
DvPotentialResult dv_pooled(const ModelParams& params,
                            const std::vector<WindowBatch>& batches) {
    std::vector<double> joint, ref;
    for (const auto& b : batches) {
        ForwardCache cache;
        forward(b.seq, params, &b.ref_inputs, cache);
        for (Eigen::Index c = 0; c < cache.out.cols(); ++c) joint.push_back(cache.out(0, c));
        for (Eigen::Index c = 0; c < cache.out_r.cols(); ++c) ref.push_back(cache.out_r(0, c));
    }
    Eigen::VectorXd j = Eigen::Map<Eigen::VectorXd>(joint.data(), joint.size());
    Eigen::VectorXd r = Eigen::Map<Eigen::VectorXd>(ref.data(), ref.size());
    return dv_from_outputs(j, r);
}

}  // namespace

PotentialTrainSpec standard_spec(const DataSource& source, int memory,
                                 const TrainConfig& cfg, const ReferenceSpec& ref) {
    PotentialTrainSpec spec;
    spec.arch_y = arch_for(cfg, source.y_dim(), memory);
    spec.arch_xy = arch_for(cfg, source.y_dim() + source.x_dim(), memory);
    const int window = cfg.effective_window();
    spec.build_y = [window, memory, ref](const TimeSeriesPair& data, int count, Rng& rng) {
        return make_windows(data, count, window, memory, false, ref, rng);
    };
    spec.build_xy = [window, memory, ref](const TimeSeriesPair& data, int count, Rng& rng) {
        return make_windows(data, count, window, memory, true, ref, rng);
    };
    return spec;
}

TrainResult train_potentials(const DataSource& source, const TrainConfig& cfg,
                             const PotentialTrainSpec& spec) {
    cfg.validate();
    const int batches = cfg.effective_batches();

    TrainResult res;
    res.params_y = ModelParams::init(spec.arch_y, substream(cfg.seed, 1));
    res.params_xy = ModelParams::init(spec.arch_xy, substream(cfg.seed, 2));
    Adam opt_y(spec.arch_y, AdamConfig{cfg.learning_rate});
    Adam opt_xy(spec.arch_xy, AdamConfig{cfg.learning_rate});

    double ema = 0.0;
    bool ema_started = false;
    std::vector<double> ema_trail;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const TimeSeriesPair data =
            source.generate(cfg.samples_per_epoch, substream(cfg.seed, 1000 + epoch));
        Rng rng(substream(cfg.seed, 5000 + epoch));
        for (int it = 0; it < batches; ++it) {
            // One batch of sub-sequence starts shared by both networks.
            Rng rng_y = rng.split(2 * it);
            Rng rng_xy = rng_y;  // identical starts and reference stream
            const WindowBatch by = spec.build_y(data, cfg.batch_size, rng_y);
            const WindowBatch bxy = spec.build_xy(data, cfg.batch_size, rng_xy);
            dv_train_step(res.params_y, opt_y, by);
            dv_train_step(res.params_xy, opt_xy, bxy);
        }

        // Monitoring estimate on fresh windows.
        const int window = cfg.effective_window();
        Rng mrng(substream(cfg.seed, 9000 + epoch));
        const TimeSeriesPair mdata = source.generate(
            std::max<Eigen::Index>(window * 4L, cfg.monitor_windows * 2L),
            substream(cfg.seed, 13000 + epoch));
        Rng mrng2 = mrng;
        const WindowBatch my = spec.build_y(mdata, cfg.monitor_windows, mrng);
        const WindowBatch mxy = spec.build_xy(mdata, cfg.monitor_windows, mrng2);
        const double dy = dv_potential(res.params_y, my).value;
        const double dxy = dv_potential(res.params_xy, mxy).value;
        const double te = dxy - dy;

        ema = ema_started ? cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * te : te;
        ema_started = true;
        ema_trail.push_back(ema);
        res.history.push_back(EpochRecord{epoch, dy, dxy, te, ema});

        if (std::abs(te) > cfg.divergence_cap) {
            res.diverged = true;
            std::ostringstream msg;
            msg << "diverged at epoch " << epoch << ": |TE| = " << std::abs(te) << " > cap "
                << cfg.divergence_cap;
            res.message = msg.str();
            return res;
        }
        if (static_cast<int>(ema_trail.size()) > cfg.patience) {
            const auto tail = ema_trail.end() - cfg.patience - 1;
            double lo = *tail, hi = *tail;
            for (auto it2 = tail; it2 != ema_trail.end(); ++it2) {
                lo = std::min(lo, *it2);
                hi = std::max(hi, *it2);
            }
            if (hi - lo < cfg.tolerance) {
                res.converged = true;
                std::ostringstream msg;
                msg << "converged at epoch " << epoch;
                res.message = msg.str();
                return res;
            }
        }
    }
    res.message = "stopped at max_epochs";
    return res;
}

TreetEstimate evaluate_potentials(const ModelParams& params_y, const ModelParams& params_xy,
                                  const DataSource& source, long n_eval, std::uint64_t seed,
                                  const TrainConfig& cfg, const PotentialTrainSpec& spec,
                                  int outputs_per_window) {
    if (n_eval < 1) throw std::invalid_argument("n_eval must be >= 1");
    long want = (n_eval + outputs_per_window - 1) / outputs_per_window;  // windows
    const TimeSeriesPair data = source.generate(
        std::max<Eigen::Index>(n_eval, cfg.effective_window() * 4L), substream(seed, 31));

    std::vector<WindowBatch> by, bxy;
    Rng rng(substream(seed, 32));
    while (want > 0) {
        const int take = static_cast<int>(std::min<long>(want, cfg.batch_size));
        Rng rng_y = rng.split(static_cast<std::uint64_t>(want));
        Rng rng_xy = rng_y;
        by.push_back(spec.build_y(data, take, rng_y));
        bxy.push_back(spec.build_xy(data, take, rng_xy));
        want -= take;
    }

    TreetEstimate est;
    est.d_y = dv_pooled(params_y, by);
    est.d_xy = dv_pooled(params_xy, bxy);
    est.te_value = est.d_xy.value - est.d_y.value;
    est.n_eval = static_cast<long>(est.d_y.joint_outputs.size());
    est.memory = cfg.memory;
    est.seed = seed;
    return est;
}

TrainResult train_estimator(const DataSource& source, int memory, const TrainConfig& cfg_in,
                            const ReferenceSpec& ref) {
    TrainConfig cfg = cfg_in;
    cfg.memory = memory;
    cfg.validate();
    return train_potentials(source, cfg, standard_spec(source, memory, cfg, ref));
}

TreetEstimate evaluate(const ModelParams& params_y, const ModelParams& params_xy,
                       const DataSource& source, int memory, long n_eval,
                       const ReferenceSpec& ref, std::uint64_t seed,
                       const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.memory = memory;
    const PotentialTrainSpec spec = standard_spec(source, memory, cfg, ref);
    return evaluate_potentials(params_y, params_xy, source, n_eval, seed, cfg, spec,
                               cfg.effective_window() - memory);
}

}  // namespace treet
