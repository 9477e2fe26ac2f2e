#pragma once

#include "treet/estimator.hpp"
#include "treet/model.hpp"
#include "treet/processes.hpp"

#include <cstdint>
#include <vector>

namespace treet {

// Neural distribution generator: maps i.i.d. noise (plus its own past
// outputs, and channel feedback when present) to channel inputs.
struct NdgConfig {
    int noise_dim = 1;        // d_x; noise law is uniform [-1,1]^d
    int memory = 10;          // l
    bool feedback = false;
    double learning_rate = 8e-4;
    int update_period = 4;    // one generator epoch per this many epochs
    ModelConfig arch;         // attention/ff dims; input/output dims derived

    // Input rows per step: [X, U] or [X, Y, U] with feedback.
    int input_dim(int y_dim = 1) const {
        return feedback ? 2 * noise_dim + y_dim : 2 * noise_dim;
    }
    ModelConfig network_config(int y_dim = 1) const;
    void validate() const;
};

// Rolling per-sequence state: generated history and (optionally) feedback
// history, both detached from gradients.
struct NdgState {
    Eigen::MatrixXd x_hist;  // d_x x h, oldest first, h <= memory
    Eigen::MatrixXd y_hist;  // d_y x h (feedback only)
    int step = 0;
};

// One generation step: builds the input sequence ([X_i, 0] for history,
// [0, U_t] at the present; Y rows inserted before U when feedback is on),
// runs the generator causally and returns the present output. Gradients flow
// only through the present step.
Eigen::VectorXd ndg_step(const NdgState& state, const Eigen::VectorXd& u,
                         const ModelParams& params, const NdgConfig& cfg);

// A generated dataset: sequences of length memory+1, channel applied step by
// step, inputs normalized to the power constraint per step across the batch.
struct GeneratedBatch {
    Eigen::MatrixXd x;        // d_x x B*T, normalized channel inputs
    Eigen::MatrixXd y;        // d_y x B*T channel outputs
    Eigen::MatrixXd u;        // d_x x B*T noise draws
    Eigen::MatrixXd x_raw;    // pre-normalization generator outputs
    Eigen::VectorXd scale;    // per-step normalization factors (T)
    int batch = 0, length = 0;
};

GeneratedBatch generate_sequence(const ModelParams& params_phi, const NdgConfig& cfg,
                                 const ChannelSpec& channel, int batch,
                                 std::uint64_t seed);

struct OptimizeConfig {
    TrainConfig train;         // TREET side (lr, batch, epochs, tolerance...)
    NdgConfig ndg;
    int eval_batch = 4096;     // sequences for the final evaluation
};

struct OptimizeResult {
    double te_star = 0.0;
    ModelParams params_phi, params_y, params_xy;
    std::vector<EpochRecord> history;
    bool converged = false;
    bool diverged = false;
    std::string message;
};

// Alternating optimization: TREET epochs train both potentials on freshly
// generated batches; every update_period-th epoch ascends the generator on
// the full TE objective with the estimator frozen.
OptimizeResult optimize_capacity(const ChannelSpec& channel, int memory,
                                 const OptimizeConfig& cfg);

// Mean attention weight of the joint branch per relative lag (0..memory),
// one row per sequence in the batch plus a grand mean.
struct AttentionHeatmap {
    Eigen::MatrixXd per_sequence;  // B x (memory+1), column r = relative lag r
    Eigen::VectorXd mean;          // memory+1
};
AttentionHeatmap attention_heatmap(const ModelParams& params_xy, const WindowBatch& batch);

// TE of a generated batch under the given estimator networks (no updates).
double generated_te(const ModelParams& params_y, const ModelParams& params_xy,
                    const GeneratedBatch& gen, const ReferenceSpec& ref,
                    std::uint64_t ref_seed);

// Window batches over a generated dataset (window = full sequence, one valid
// output at the last position).
WindowBatch windows_from_generated(const GeneratedBatch& gen, bool include_x,
                                   const ReferenceSpec& ref, Rng& rng);

}  // namespace treet
