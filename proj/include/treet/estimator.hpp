#pragma once

#include "treet/adam.hpp"
#include "treet/model.hpp"
#include "treet/processes.hpp"
#include "treet/rng.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace treet {

enum class ReferenceKind { BoundingBox, FixedUniform, CustomDensity };

// Reference measure on the Y alphabet. The default draws uniformly from the
// bounding box of the current batch; FixedUniform uses given bounds; a custom
// density supplies its own sampler and log-density.
struct ReferenceSpec {
    ReferenceKind kind = ReferenceKind::BoundingBox;
    Eigen::VectorXd lo, hi;  // FixedUniform bounds per Y dimension
    std::function<Eigen::VectorXd(Rng&)> sampler;                // CustomDensity
    std::function<double(const Eigen::VectorXd&)> log_density;   // CustomDensity

    static ReferenceSpec bounding_box() { return {}; }
    static ReferenceSpec fixed_uniform(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
    static ReferenceSpec fixed_uniform(double lo, double hi);
};

// Draw `count` i.i.d. reference samples (d_y rows). For the bounding-box kind
// the box is the per-dimension min/max of y_values; degenerate dimensions are
// widened by machine epsilon (with a warning on stderr).
Eigen::MatrixXd sample_reference(const Eigen::MatrixXd& y_values, const ReferenceSpec& spec,
                                 Eigen::Index count, Rng& rng);

// One evaluation of a DV potential.
struct DvPotentialResult {
    double joint_mean = 0.0;
    double ref_log_mean_exp = 0.0;
    double value = 0.0;  // joint_mean - ref_log_mean_exp
    Eigen::VectorXd joint_outputs, ref_outputs;  // per-step g evaluations
};

// Assemble a DV potential from raw network outputs (log-sum-exp with max
// subtraction on the reference side).
DvPotentialResult dv_from_outputs(const Eigen::VectorXd& joint, const Eigen::VectorXd& ref);

// A batch of aligned windows ready for one network: inputs stack the Y rows
// first, then the X rows; ref_inputs are the valid-position input columns
// with the Y part replaced by reference draws.
struct WindowBatch {
    SequenceBatch seq;
    Eigen::MatrixXd ref_inputs;  // d_i x batch*(length - memory)
};

// Cut `count` windows of `length` steps at seeded random offsets from a
// stream, drawing one reference sample per valid output position.
WindowBatch make_windows(const TimeSeriesPair& data, int count, int length, int memory,
                         bool include_x, const ReferenceSpec& ref, Rng& rng);

// DV potential of one window batch; no parameter updates.
DvPotentialResult dv_potential(const ModelParams& params, const WindowBatch& batch);

// One gradient-ascent step on the DV potential.
DvPotentialResult dv_train_step(ModelParams& params, Adam& opt, const WindowBatch& batch);

// DV potential together with its gradient w.r.t. the window inputs (used by
// the generator optimization, where gradients flow into the samples).
struct DvInputGrads {
    DvPotentialResult result;
    Eigen::MatrixXd d_inputs;      // d_i x batch*length
    Eigen::MatrixXd d_ref_inputs;  // d_i x batch*nvalid
};
DvInputGrads dv_input_grads(const ModelParams& params, const WindowBatch& batch);

// --- data sources -----------------------------------------------------------

// Stationary (X, Y) stream for training. Implementations must be pure
// functions of (parameters, seed).
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual int x_dim() const = 0;
    virtual int y_dim() const = 0;
    virtual TimeSeriesPair generate(Eigen::Index n, std::uint64_t seed) const = 0;
};

// Eq-style threshold benchmark process.
class BenchmarkSource final : public DataSource {
public:
    BenchmarkSource(double lambda, double rho) : lambda_(lambda), rho_(rho) {}
    int x_dim() const override { return 1; }
    int y_dim() const override { return 1; }
    TimeSeriesPair generate(Eigen::Index n, std::uint64_t seed) const override {
        return gen_benchmark(n, lambda_, rho_, seed);
    }

private:
    double lambda_, rho_;
};

// Independent i.i.d. standard Gaussian pair (true TE = 0).
class IidGaussianSource final : public DataSource {
public:
    int x_dim() const override { return 1; }
    int y_dim() const override { return 1; }
    TimeSeriesPair generate(Eigen::Index n, std::uint64_t seed) const override;
};

// i.i.d. Gaussian input with power P pushed through an additive-noise channel.
class ChannelSource final : public DataSource {
public:
    explicit ChannelSource(const ChannelSpec& spec) : spec_(spec) {}
    int x_dim() const override { return 1; }
    int y_dim() const override { return 1; }
    TimeSeriesPair generate(Eigen::Index n, std::uint64_t seed) const override;

private:
    ChannelSpec spec_;
};

// Hidden-state process; X carries the latent state.
class HmmSource final : public DataSource {
public:
    explicit HmmSource(const ChannelSpec& spec) : spec_(spec) { spec_.validate(); }
    int x_dim() const override { return 1; }
    int y_dim() const override { return 1; }
    TimeSeriesPair generate(Eigen::Index n, std::uint64_t seed) const override {
        return gen_hmm(n, spec_.alpha, spec_.beta, spec_.gamma, spec_.delay, spec_.noise,
                       spec_.noise_var, spec_.obs_noise_var, seed);
    }

private:
    ChannelSpec spec_;
};

// Fixed, pre-loaded data (e.g. from CSV); generate() ignores n and returns
// the stored stream.
class FixedSource final : public DataSource {
public:
    explicit FixedSource(TimeSeriesPair data) : data_(std::move(data)) {}
    int x_dim() const override { return static_cast<int>(data_.x.rows()); }
    int y_dim() const override { return static_cast<int>(data_.y.rows()); }
    TimeSeriesPair generate(Eigen::Index, std::uint64_t) const override { return data_; }

private:
    TimeSeriesPair data_;
};

// --- training ---------------------------------------------------------------

struct TrainConfig {
    int batch_size = 1024;
    double learning_rate = 8e-3;
    int max_epochs = 200;
    long samples_per_epoch = 100000;
    int memory = 30;             // l
    int window = 0;              // L; 0 means memory + 30
    int batches_per_epoch = 0;   // 0: derived from samples_per_epoch
    double tolerance = 1e-3;     // convergence epsilon on the EMA TE
    int patience = 10;           // epochs the EMA must stay within tolerance
    double ema_decay = 0.9;
    double divergence_cap = 50.0;  // abort when |TE| exceeds this (nats)
    long eval_samples = 0;       // n_eval; 0 means samples_per_epoch
    int monitor_windows = 512;   // per-epoch monitoring batch (windows)
    std::uint64_t seed = 1;
    ModelConfig arch;            // input_dim/memory/output_dim set per network

    int effective_window() const { return window > 0 ? window : memory + 30; }
    int effective_batches() const;
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double d_y = 0.0, d_xy = 0.0, te_raw = 0.0, te_ema = 0.0;
};

struct TrainResult {
    ModelParams params_y, params_xy;
    std::vector<EpochRecord> history;
    bool converged = false;
    bool diverged = false;
    std::string message;
};

// Final estimate: both potentials evaluated over fresh windows.
struct TreetEstimate {
    double te_value = 0.0;
    DvPotentialResult d_y, d_xy;
    long n_eval = 0;
    int memory = 0;
    std::uint64_t seed = 0;
};

// Window construction hook: lets callers change how sub-sequences are cut
// (the analyze command builds asymmetric-history windows this way).
using WindowBuilder = std::function<WindowBatch(const TimeSeriesPair&, int count, Rng&)>;

struct PotentialTrainSpec {
    ModelConfig arch_y, arch_xy;
    WindowBuilder build_y, build_xy;
};

// Core loop shared by every training entry point: per epoch, draw fresh data
// from the source, ascend each potential on mini-batches, monitor the TE
// estimate, stop on convergence or divergence.
TrainResult train_potentials(const DataSource& source, const TrainConfig& cfg,
                             const PotentialTrainSpec& spec);

// Pooled evaluation of both potentials over ~n_eval fresh output positions.
TreetEstimate evaluate_potentials(const ModelParams& params_y, const ModelParams& params_xy,
                                  const DataSource& source, long n_eval, std::uint64_t seed,
                                  const TrainConfig& cfg, const PotentialTrainSpec& spec,
                                  int outputs_per_window);

// Standard symmetric-memory spec (window L, memory l, inputs [Y] and [Y; X]).
PotentialTrainSpec standard_spec(const DataSource& source, int memory,
                                 const TrainConfig& cfg, const ReferenceSpec& ref);

// Algorithm entry points.
TrainResult train_estimator(const DataSource& source, int memory, const TrainConfig& cfg,
                            const ReferenceSpec& ref);

TreetEstimate evaluate(const ModelParams& params_y, const ModelParams& params_xy,
                       const DataSource& source, int memory, long n_eval,
                       const ReferenceSpec& ref, std::uint64_t seed,
                       const TrainConfig& cfg);

}  // namespace treet
