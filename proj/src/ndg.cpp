#include "treet/ndg.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace treet {

ModelConfig NdgConfig::network_config(int y_dim) const {
    ModelConfig a = arch;
    a.input_dim = input_dim(y_dim);
    a.output_dim = noise_dim;
    a.memory = memory;
    if (a.max_len < memory + 1) a.max_len = memory + 1;
    a.validate();
    return a;
}

void NdgConfig::validate() const {
    if (noise_dim < 1) throw std::invalid_argument("noise_dim must be >= 1");
    if (memory < 1) throw std::invalid_argument("memory must be >= 1");
    if (update_period < 1) throw std::invalid_argument("update_period must be >= 1");
    if (learning_rate <= 0.0) throw std::invalid_argument("learning_rate must be positive");
}

namespace {

void accumulate(ModelParams& dst, const ModelParams& src) {
    std::vector<Eigen::MatrixXd*> blocks;
    dst.for_each_block(
        [&blocks](const std::string&, Eigen::MatrixXd& m) { blocks.push_back(&m); });
    std::size_t i = 0;
    src.for_each_block([&blocks, &i](const std::string&, const Eigen::MatrixXd& m) {
        *blocks[i++] += m;
    });
}

// Input column layout per step: [X rows, (Y rows,) U rows]; the noise rows
// are zero in history positions and the X (and Y) rows are zero at the
// present position.
void fill_history_column(Eigen::Ref<Eigen::VectorXd> col, const Eigen::VectorXd& x,
                         const Eigen::VectorXd* y, int d_x, int d_y) {
    col.setZero();
    col.head(d_x) = x;
    if (y) col.segment(d_x, d_y) = *y;
}

void fill_present_column(Eigen::Ref<Eigen::VectorXd> col, const Eigen::VectorXd& u, int d_x,
                         bool feedback, int d_y) {
    col.setZero();
    col.tail(u.size()) = u;
    (void)d_x;
    (void)feedback;
    (void)d_y;
}

}  // namespace

Eigen::VectorXd ndg_step(const NdgState& state, const Eigen::VectorXd& u,
                         const ModelParams& params, const NdgConfig& cfg) {
    cfg.validate();
    const int h = static_cast<int>(state.x_hist.cols());
    if (h > cfg.memory)
        throw std::invalid_argument("ndg state history longer than the memory contract");
    if (cfg.feedback && state.y_hist.cols() != h)
        throw std::invalid_argument("feedback history length mismatch");
    if (u.size() != cfg.noise_dim) throw std::invalid_argument("noise dimension mismatch");
    const int d_y = cfg.feedback ? static_cast<int>(state.y_hist.rows()) : 1;
    const int d_i = cfg.input_dim(d_y);
    if (params.config.input_dim != d_i)
        throw std::invalid_argument("ndg params built for a different input layout");

    SequenceBatch seq;
    seq.batch = 1;
    seq.length = h + 1;
    seq.values.setZero(d_i, h + 1);
    for (int j = 0; j < h; ++j) {
        Eigen::VectorXd yj;
        if (cfg.feedback) yj = state.y_hist.col(j);
        fill_history_column(seq.values.col(j), state.x_hist.col(j),
                            cfg.feedback ? &yj : nullptr, cfg.noise_dim, d_y);
    }
    fill_present_column(seq.values.col(h), u, cfg.noise_dim, cfg.feedback, d_y);

    ForwardCache cache;
    forward(seq, params, nullptr, cache, /*first_output=*/h);
    return cache.out.col(0);
}

namespace {

struct GenerationTrace {
    GeneratedBatch batch;
    std::vector<SequenceBatch> step_inputs;  // one per step
    std::vector<ForwardCache> step_caches;   // filled when keep_caches
};

GenerationTrace run_generation(const ModelParams& params_phi, const NdgConfig& cfg,
                               const ChannelSpec& channel, int batch, std::uint64_t seed,
                               bool keep_caches) {
    cfg.validate();
    channel.validate();
    if (batch < 1) throw std::invalid_argument("generation batch must be >= 1");
    const int d_x = cfg.noise_dim;
    const int d_y = d_x;  // additive channels preserve the dimension
    const int t_len = cfg.memory + 1;
    const int d_i = cfg.input_dim(d_y);
    if (params_phi.config.input_dim != d_i || params_phi.config.output_dim != d_x)
        throw std::invalid_argument("ndg params do not match the generation layout");

    GenerationTrace tr;
    auto& gen = tr.batch;
    gen.batch = batch;
    gen.length = t_len;
    gen.x.setZero(d_x, static_cast<Eigen::Index>(batch) * t_len);
    gen.y.setZero(d_y, static_cast<Eigen::Index>(batch) * t_len);
    gen.u.resize(d_x, static_cast<Eigen::Index>(batch) * t_len);
    gen.x_raw.setZero(d_x, static_cast<Eigen::Index>(batch) * t_len);
    gen.scale.resize(t_len);

    Rng noise_rng(substream(seed, 101));
    for (Eigen::Index c = 0; c < gen.u.cols(); ++c)
        for (int r = 0; r < d_x; ++r) gen.u(r, c) = noise_rng.uniform(-1.0, 1.0);

    StepChannel chan(channel, batch, substream(seed, 103));

    tr.step_inputs.resize(t_len);
    if (keep_caches) tr.step_caches.resize(t_len);

    for (int i = 0; i < t_len; ++i) {
        SequenceBatch& seq = tr.step_inputs[i];
        seq.batch = batch;
        seq.length = i + 1;
        seq.values.setZero(d_i, static_cast<Eigen::Index>(batch) * (i + 1));
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index base = static_cast<Eigen::Index>(b) * (i + 1);
            const Eigen::Index gbase = static_cast<Eigen::Index>(b) * t_len;
            for (int j = 0; j < i; ++j) {
                seq.values.col(base + j).head(d_x) = gen.x.col(gbase + j);
                if (cfg.feedback)
                    seq.values.col(base + j).segment(d_x, d_y) = gen.y.col(gbase + j);
            }
            seq.values.col(base + i).tail(d_x) = gen.u.col(gbase + i);
        }
        ForwardCache local;
        ForwardCache& cache = keep_caches ? tr.step_caches[i] : local;
        forward(seq, params_phi, nullptr, cache, /*first_output=*/i);

        // cache.out is d_x x batch: raw generator outputs at this step.
        double mean_sq = cache.out.array().square().mean();
        if (mean_sq <= 0.0)
            throw std::runtime_error("generator emitted an all-zero step; cannot normalize");
        const double s = std::sqrt(channel.power / mean_sq);
        gen.scale(i) = s;
        const Eigen::MatrixXd x_hat = s * cache.out;
        const Eigen::MatrixXd y_t = chan.step(x_hat);
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index gbase = static_cast<Eigen::Index>(b) * t_len;
            gen.x_raw.col(gbase + i) = cache.out.col(b);
            gen.x.col(gbase + i) = x_hat.col(b);
            gen.y.col(gbase + i) = y_t.col(b);
        }
    }
    return tr;
}

}  // namespace

GeneratedBatch generate_sequence(const ModelParams& params_phi, const NdgConfig& cfg,
                                 const ChannelSpec& channel, int batch,
                                 std::uint64_t seed) {
    return run_generation(params_phi, cfg, channel, batch, seed, false).batch;
}

WindowBatch windows_from_generated(const GeneratedBatch& gen, bool include_x,
                                   const ReferenceSpec& ref, Rng& rng) {
    const Eigen::Index d_y = gen.y.rows();
    const Eigen::Index d_x = include_x ? gen.x.rows() : 0;
    WindowBatch wb;
    wb.seq.batch = gen.batch;
    wb.seq.length = gen.length;
    wb.seq.values.resize(d_y + d_x, gen.y.cols());
    wb.seq.values.topRows(d_y) = gen.y;
    if (d_x > 0) wb.seq.values.bottomRows(d_x) = gen.x;

    const Eigen::MatrixXd refs = sample_reference(gen.y, ref, gen.batch, rng);
    wb.ref_inputs.resize(d_y + d_x, gen.batch);
    for (int b = 0; b < gen.batch; ++b) {
        wb.ref_inputs.col(b).head(d_y) = refs.col(b);
        if (d_x > 0)
            wb.ref_inputs.col(b).tail(d_x) =
                gen.x.col(static_cast<Eigen::Index>(b) * gen.length + gen.length - 1);
    }
    return wb;
}

double generated_te(const ModelParams& params_y, const ModelParams& params_xy,
                    const GeneratedBatch& gen, const ReferenceSpec& ref,
                    std::uint64_t ref_seed) {
    Rng rng_y(substream(ref_seed, 1));
    Rng rng_xy = rng_y;
    const WindowBatch wy = windows_from_generated(gen, false, ref, rng_y);
    const WindowBatch wxy = windows_from_generated(gen, true, ref, rng_xy);
    return dv_potential(params_xy, wxy).value - dv_potential(params_y, wy).value;
}

AttentionHeatmap attention_heatmap(const ModelParams& params_xy, const WindowBatch& batch) {
    ForwardCache cache;
    forward(batch.seq, params_xy, nullptr, cache);
    const int band = params_xy.config.memory + 1;
    const int heads = params_xy.config.head_count;
    AttentionHeatmap hm;
    hm.per_sequence.setZero(batch.seq.batch, band);
    for (int b = 0; b < batch.seq.batch; ++b) {
        for (int i = 0; i < cache.nvalid; ++i) {
            const Eigen::Index cv = static_cast<Eigen::Index>(b) * cache.nvalid + i;
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < band; ++j)
                    hm.per_sequence(b, band - 1 - j) += cache.attw(h * band + j, cv);
        }
        hm.per_sequence.row(b) /= static_cast<double>(cache.nvalid * heads);
    }
    hm.mean = hm.per_sequence.colwise().mean();
    return hm;
}

OptimizeResult optimize_capacity(const ChannelSpec& channel, int memory,
                                 const OptimizeConfig& cfg_in) {
    OptimizeConfig cfg = cfg_in;
    cfg.ndg.memory = memory;
    cfg.ndg.validate();
    channel.validate();
    TrainConfig& tc = cfg.train;
    tc.memory = memory;
    tc.window = memory + 1;  // generated sequences carry one output each
    tc.validate();

    const int d_x = cfg.ndg.noise_dim;
    const int d_y = d_x;
    const int t_len = memory + 1;

    ModelConfig arch_y = tc.arch;
    arch_y.input_dim = d_y;
    arch_y.output_dim = 1;
    arch_y.memory = memory;
    if (arch_y.max_len < t_len) arch_y.max_len = t_len;
    ModelConfig arch_xy = arch_y;
    arch_xy.input_dim = d_x + d_y;
    arch_y.validate();
    arch_xy.validate();
    const ModelConfig arch_phi = cfg.ndg.network_config(d_y);

    OptimizeResult res;
    res.params_phi = ModelParams::init(arch_phi, substream(tc.seed, 3));
    res.params_y = ModelParams::init(arch_y, substream(tc.seed, 1));
    res.params_xy = ModelParams::init(arch_xy, substream(tc.seed, 2));
    Adam opt_y(arch_y, AdamConfig{tc.learning_rate});
    Adam opt_xy(arch_xy, AdamConfig{tc.learning_rate});
    Adam opt_phi(arch_phi, AdamConfig{cfg.ndg.learning_rate});

    const long steps_per_batch = static_cast<long>(tc.batch_size) * t_len;
    const int batches = tc.batches_per_epoch > 0
                            ? tc.batches_per_epoch
                            : static_cast<int>(std::max<long>(
                                  1, (tc.samples_per_epoch + steps_per_batch - 1) /
                                         steps_per_batch));

    const ReferenceSpec ref = ReferenceSpec::bounding_box();
    double ema = 0.0;
    bool ema_started = false;
    std::vector<double> trail;

    for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
        const bool ndg_epoch = (epoch % cfg.ndg.update_period) == cfg.ndg.update_period - 1;
        for (int it = 0; it < batches; ++it) {
            const std::uint64_t it_seed =
                substream(tc.seed, 40000ULL + 1000ULL * epoch + it);
            if (!ndg_epoch) {
                const GeneratedBatch gen = generate_sequence(
                    res.params_phi, cfg.ndg, channel, tc.batch_size, it_seed);
                Rng rng_y(substream(it_seed, 7));
                Rng rng_xy = rng_y;
                const WindowBatch wy = windows_from_generated(gen, false, ref, rng_y);
                const WindowBatch wxy = windows_from_generated(gen, true, ref, rng_xy);
                dv_train_step(res.params_y, opt_y, wy);
                dv_train_step(res.params_xy, opt_xy, wxy);
                continue;
            }

            // Generator step: ascend TE through the generated samples with the
            // estimator frozen.
            GenerationTrace tr = run_generation(res.params_phi, cfg.ndg, channel,
                                                tc.batch_size, it_seed, true);
            const GeneratedBatch& gen = tr.batch;
            Rng rng_y(substream(it_seed, 7));
            Rng rng_xy = rng_y;
            const WindowBatch wy = windows_from_generated(gen, false, ref, rng_y);
            const WindowBatch wxy = windows_from_generated(gen, true, ref, rng_xy);
            const DvInputGrads gy = dv_input_grads(res.params_y, wy);
            const DvInputGrads gxy = dv_input_grads(res.params_xy, wxy);

            // d(TE)/dY and d(TE)/dX on the window layout [Y; X].
            Eigen::MatrixXd d_y_steps(d_y, gen.y.cols());
            Eigen::MatrixXd d_x_steps(d_x, gen.x.cols());
            d_y_steps = gxy.d_inputs.topRows(d_y) - gy.d_inputs.topRows(d_y);
            d_x_steps = gxy.d_inputs.bottomRows(d_x);
            // Reference columns re-use the generated X at the present position.
            for (int b = 0; b < gen.batch; ++b) {
                const Eigen::Index present =
                    static_cast<Eigen::Index>(b) * t_len + (t_len - 1);
                d_x_steps.col(present) += gxy.d_ref_inputs.col(b).tail(d_x);
            }
            // Additive channel: Y = X_hat + Z, so X_hat inherits dY one-to-one.
            d_x_steps += d_y_steps;

            // Back through the per-step batch normalization.
            Eigen::MatrixXd d_raw(d_x, gen.x.cols());
            for (int i = 0; i < t_len; ++i) {
                double corr = 0.0, mean_sq = 0.0;
                for (int b = 0; b < gen.batch; ++b) {
                    const Eigen::Index c = static_cast<Eigen::Index>(b) * t_len + i;
                    corr += d_x_steps.col(c).dot(gen.x_raw.col(c));
                    mean_sq += gen.x_raw.col(c).squaredNorm();
                }
                const double denom = static_cast<double>(gen.batch) * d_x;
                mean_sq /= denom;
                const double s = gen.scale(i);
                for (int b = 0; b < gen.batch; ++b) {
                    const Eigen::Index c = static_cast<Eigen::Index>(b) * t_len + i;
                    d_raw.col(c) = s * d_x_steps.col(c) -
                                   (s / (mean_sq * denom)) * corr * gen.x_raw.col(c);
                }
            }

            // Per-step backward through the generator; histories are detached
            // so each step only contributes through its own forward.
            ModelParams phi_grads = ModelParams::zeros(arch_phi);
            for (int i = 0; i < t_len; ++i) {
                Eigen::MatrixXd d_out(d_x, gen.batch);
                for (int b = 0; b < gen.batch; ++b)
                    d_out.col(b) = d_raw.col(static_cast<Eigen::Index>(b) * t_len + i);
                const BackwardResult br =
                    backward(tr.step_inputs[i], res.params_phi, tr.step_caches[i], d_out);
                accumulate(phi_grads, br.grads);
            }
            opt_phi.step(res.params_phi, phi_grads);
        }

        // Per-epoch monitoring on a fresh generated batch.
        const std::uint64_t mseed = substream(tc.seed, 90000ULL + epoch);
        const GeneratedBatch mgen = generate_sequence(res.params_phi, cfg.ndg, channel,
                                                      std::min(tc.batch_size, 1024), mseed);
        Rng rng_y(substream(mseed, 7));
        Rng rng_xy = rng_y;
        const WindowBatch wy = windows_from_generated(mgen, false, ref, rng_y);
        const WindowBatch wxy = windows_from_generated(mgen, true, ref, rng_xy);
        const double dyv = dv_potential(res.params_y, wy).value;
        const double dxyv = dv_potential(res.params_xy, wxy).value;
        const double te = dxyv - dyv;
        ema = ema_started ? tc.ema_decay * ema + (1.0 - tc.ema_decay) * te : te;
        ema_started = true;
        trail.push_back(ema);
        res.history.push_back(EpochRecord{epoch, dyv, dxyv, te, ema});

        if (std::abs(te) > tc.divergence_cap) {
            res.diverged = true;
            std::ostringstream msg;
            msg << "diverged at epoch " << epoch << ": |TE| = " << std::abs(te);
            res.message = msg.str();
            return res;
        }
        if (static_cast<int>(trail.size()) > tc.patience) {
            double lo = trail[trail.size() - tc.patience - 1], hi = lo;
            for (std::size_t k = trail.size() - tc.patience - 1; k < trail.size(); ++k) {
                lo = std::min(lo, trail[k]);
                hi = std::max(hi, trail[k]);
            }
            if (hi - lo < tc.tolerance) {
                res.converged = true;
                break;
            }
        }
    }

    // Final evaluation on a larger fresh batch.
    const GeneratedBatch egen = generate_sequence(res.params_phi, cfg.ndg, channel,
                                                  cfg.eval_batch, substream(tc.seed, 777));
    res.te_star = generated_te(res.params_y, res.params_xy, egen, ref,
                               substream(tc.seed, 778));
    if (res.message.empty())
        res.message = res.converged ? "converged" : "stopped at max_epochs";
    return res;
}

}  // namespace treet
