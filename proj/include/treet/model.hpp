#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace treet {

enum class Activation { Elu, Relu, Tanh };
enum class Combine { ConcatNorm, Residual };
enum class PosEncoding { Sinusoidal, Learned };

// Architecture of one sequence model: value/position embedding, a banded
// causal attention layer (window = memory + 1 positions), a feature combine
// stage, one feed-forward block with residual, and a dense head emitting
// output_dim values per time step.
struct ModelConfig {
    int input_dim = 1;    // d_i
    int embed_dim = 32;   // d_e
    int head_count = 1;   // h
    int head_dim = 32;    // d_m
    int ff_dim = 64;      // d_r
    int output_dim = 1;   // d_o
    int memory = 30;      // l: each query attends its present + l past steps
    Activation activation = Activation::Elu;
    Combine combine = Combine::ConcatNorm;
    PosEncoding pos_encoding = PosEncoding::Sinusoidal;
    int max_len = 512;    // learned position table length; cap on sequence length

    // Width of the stream entering the feed-forward block.
    int stream_dim() const { return combine == Combine::ConcatNorm ? 2 * embed_dim : embed_dim; }
    void validate() const;  // throws std::invalid_argument on a bad field
};

// Banded causal attention mask. Entry (q, k) is active iff 0 <= q-k <= window.
struct FpcaMask {
    int window = 0;  // l
    int length = 0;  // N

    static FpcaMask banded(int window, int length);
    bool active(int q, int k) const {
        return k >= 0 && k <= q && q - k <= window && q < length;
    }
    // Dense 0/1 view, handy in tests.
    Eigen::MatrixXi dense() const;
};

// All learnable weights of one network. Matrices are column-major; biases are
// stored as single-column matrices so every block can be visited uniformly.
struct ModelParams {
    ModelConfig config;

    Eigen::MatrixXd w_embed;                      // d_e x d_i
    Eigen::MatrixXd pos_table;                    // d_e x max_len (Learned only)
    std::vector<Eigen::MatrixXd> w_q, w_k, w_v;   // per head: d_m x d_e
    std::vector<Eigen::MatrixXd> w_o;             // per head: d_e x d_m
    Eigen::MatrixXd w_ff1, b_ff1;                 // d_r x d_s, d_r x 1
    Eigen::MatrixXd w_ff2, b_ff2;                 // d_s x d_r, d_s x 1
    Eigen::MatrixXd w_head, b_head;               // d_o x d_s, d_o x 1

    static ModelParams zeros(const ModelConfig& cfg);
    // Uniform fan-in init: U[-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

    void for_each_block(const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn);
    void for_each_block(
        const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const;

    std::size_t parameter_count() const;
    bool all_finite() const;
    // Name of the first block containing a non-finite entry, or empty string.
    std::string first_nonfinite_block() const;
};

// A batch of aligned input sequences. Column b*length + t holds the input
// vector of batch item b at time t.
struct SequenceBatch {
    Eigen::MatrixXd values;  // d_i x (batch * length)
    int batch = 0;
    int length = 0;

    void validate(const ModelConfig& cfg) const;
};

// Fixed sinusoidal position encoding, d_e x length.
Eigen::MatrixXd sinusoidal_encoding(int embed_dim, int length);

// Activations stored by forward() for the exact backward pass. The reference
// branch mirrors the joint branch and is filled only when reference inputs
// are supplied.
struct ForwardCache {
    int batch = 0, length = 0, first_output = 0, nvalid = 0;
    bool has_ref = false;

    Eigen::MatrixXd xpe;       // d_e x B*N
    Eigen::MatrixXd q;         // h*d_m x B*Nv
    Eigen::MatrixXd k, v;      // h*d_m x B*N
    Eigen::MatrixXd attw;      // h*(l+1) x B*Nv  band weights, slot j <-> key t-l+j
    Eigen::MatrixXd headout;   // h*d_m x B*Nv
    Eigen::MatrixXd attn_raw;  // d_e x B*Nv
    Eigen::MatrixXd s_in, s;   // d_s x B*Nv
    Eigen::VectorXd ln1_mean, ln1_istd;
    Eigen::MatrixXd ff_pre, ff_act;  // d_r x B*Nv
    Eigen::MatrixXd z_in, z;         // d_s x B*Nv
    Eigen::VectorXd ln2_mean, ln2_istd;
    Eigen::MatrixXd out;       // d_o x B*Nv

    Eigen::MatrixXd ref_in;    // d_i x B*Nv
    Eigen::MatrixXd xpe_r;     // d_e x B*Nv
    Eigen::MatrixXd q_r, k_r, v_r;  // h*d_m x B*Nv
    Eigen::MatrixXd attw_r;    // h*(l+1) x B*Nv  slot l <-> reference key
    Eigen::MatrixXd headout_r, attn_raw_r;
    Eigen::MatrixXd s_in_r, s_r;
    Eigen::VectorXd ln1_mean_r, ln1_istd_r;
    Eigen::MatrixXd ff_pre_r, ff_act_r, z_in_r, z_r;
    Eigen::VectorXd ln2_mean_r, ln2_istd_r;
    Eigen::MatrixXd out_r;

    // Instrumentation: number of (query, key) pairs visited by the banded
    // attention. Grows as B * Nv * (l+1), i.e. linear in the window size.
    std::uint64_t key_visits = 0;
};

struct BackwardResult {
    ModelParams grads;
    Eigen::MatrixXd d_inputs;      // d_i x B*N
    Eigen::MatrixXd d_ref_inputs;  // d_i x B*Nv (zero-sized without ref branch)
};

// --- nn-core operations ---------------------------------------------------

// Value embedding plus position encoding: column (b,t) = W1 * x + E_t.
Eigen::MatrixXd embed(const SequenceBatch& x, const ModelParams& p);

// Banded-attention sublayer on an embedded sequence: per head,
// residual + W_O * (softmax over the active window of K^T q) * V.
// Queries with a truncated window (t < window) normalize over what exists.
Eigen::MatrixXd fpca_attention(const Eigen::MatrixXd& xpe, const ModelParams& p,
                               const FpcaMask& mask, int batch);

// Reference variant: at each query position the query, and the key/value of
// the present slot, come from xpe_ref; past keys/values are reused from xpe.
Eigen::MatrixXd modified_fpca_attention(const Eigen::MatrixXd& xpe,
                                        const Eigen::MatrixXd& xpe_ref,
                                        const ModelParams& p, const FpcaMask& mask,
                                        int batch);

// Full forward pass. Emits per-step outputs for positions
// first_output..length-1 of every batch item (first_output = -1 means
// config.memory). If ref_inputs is non-null (d_i x B*Nv), the reference
// branch runs in the same pass with shared weights and fills out_r.
void forward(const SequenceBatch& x, const ModelParams& p,
             const Eigen::MatrixXd* ref_inputs, ForwardCache& cache,
             int first_output = -1);

// Exact reverse-mode gradients for a scalar objective with sensitivities
// d_out (d_o x B*Nv) and, when the reference branch ran, d_out_ref.
BackwardResult backward(const SequenceBatch& x, const ModelParams& p,
                        const ForwardCache& cache, const Eigen::MatrixXd& d_out,
                        const Eigen::MatrixXd& d_out_ref = Eigen::MatrixXd());

// Gradient of objective(outputs) w.r.t. every parameter block, computed by a
// single forward + backward. The closure receives the joint-branch outputs
// and must fill d_out with the objective's sensitivity to them.
ModelParams grad(const SequenceBatch& x, const ModelParams& p,
                 const std::function<double(const Eigen::MatrixXd& out,
                                            Eigen::MatrixXd& d_out)>& objective,
                 int first_output = -1);

}  // namespace treet
