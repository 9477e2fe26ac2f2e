#include "treet/model.hpp"

#include "treet/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace treet {

namespace {

constexpr double kLayerNormEps = 1e-5;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

Eigen::MatrixXd apply_activation(Activation a, const Eigen::MatrixXd& x) {
    switch (a) {
        case Activation::Elu:
            // exp runs on the clamped values only, keeping the pass vectorized.
            return (x.array().min(0.0).exp() - 1.0 + x.array().max(0.0)).matrix();
        case Activation::Relu:
            return x.cwiseMax(0.0);
        case Activation::Tanh:
            return x.array().tanh();
    }
    return x;
}

Eigen::MatrixXd activation_grad(Activation a, const Eigen::MatrixXd& upstream,
                                const Eigen::MatrixXd& pre) {
    switch (a) {
        case Activation::Elu:
            // ELU'(x) = 1 for x > 0 and e^x otherwise = exp(min(x, 0)).
            return (upstream.array() * pre.array().min(0.0).exp()).matrix();
        case Activation::Relu:
            return (pre.array() > 0.0).select(upstream, 0.0);
        case Activation::Tanh: {
            const Eigen::ArrayXXd t = pre.array().tanh();
            return (upstream.array() * (1.0 - t.square())).matrix();
        }
    }
    return upstream;
}

// y = (x - mean) * istd, feature-wise per column; no affine terms.
void layer_norm_forward(const Eigen::MatrixXd& x, Eigen::MatrixXd& y,
                        Eigen::VectorXd& mean, Eigen::VectorXd& istd) {
    const Eigen::Index d = x.rows();
    const Eigen::RowVectorXd mu = x.colwise().mean();
    y = x.rowwise() - mu;
    const Eigen::RowVectorXd is =
        (y.array().square().colwise().sum() / static_cast<double>(d) + kLayerNormEps)
            .rsqrt();
    y.array().rowwise() *= is.array();
    mean = mu.transpose();
    istd = is.transpose();
}

Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& y,
                                    const Eigen::VectorXd& istd) {
    const Eigen::RowVectorXd m_dy = dy.colwise().mean();
    const Eigen::RowVectorXd m_dyy = (dy.array() * y.array()).colwise().mean();
    Eigen::MatrixXd dx = dy.rowwise() - m_dy;
    dx -= (y.array().rowwise() * m_dyy.array()).matrix();
    dx.array().rowwise() *= istd.transpose().array();
    return dx;
}

}  // namespace

void ModelConfig::validate() const {
    require(input_dim >= 1, "input_dim must be >= 1");
    require(embed_dim >= 1, "embed_dim must be >= 1");
    require(head_count >= 1, "head_count must be >= 1");
    require(head_dim >= 1, "head_dim must be >= 1");
    require(ff_dim >= 1, "ff_dim must be >= 1");
    require(output_dim >= 1, "output_dim must be >= 1");
    require(memory >= 0, "memory must be >= 0");
    require(max_len >= 1, "max_len must be >= 1");
}

FpcaMask FpcaMask::banded(int window, int length) {
    require(window >= 0, "mask window must be >= 0");
    require(length >= 1, "mask length must be >= 1");
    return FpcaMask{window, length};
}

Eigen::MatrixXi FpcaMask::dense() const {
    Eigen::MatrixXi m = Eigen::MatrixXi::Zero(length, length);
    for (int q = 0; q < length; ++q)
        for (int k = 0; k <= q; ++k)
            if (active(q, k)) m(q, k) = 1;
    return m;
}

void SequenceBatch::validate(const ModelConfig& cfg) const {
    require(batch >= 1 && length >= 1, "sequence batch must be non-empty");
    require(values.rows() == cfg.input_dim, "input dimension mismatch");
    require(values.cols() == static_cast<Eigen::Index>(batch) * length,
            "sequence batch column count mismatch");
    require(values.allFinite(), "sequence batch contains non-finite values");
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const int ds = cfg.stream_dim();
    p.w_embed = Eigen::MatrixXd::Zero(cfg.embed_dim, cfg.input_dim);
    if (cfg.pos_encoding == PosEncoding::Learned)
        p.pos_table = Eigen::MatrixXd::Zero(cfg.embed_dim, cfg.max_len);
    p.w_q.assign(cfg.head_count, Eigen::MatrixXd::Zero(cfg.head_dim, cfg.embed_dim));
    p.w_k.assign(cfg.head_count, Eigen::MatrixXd::Zero(cfg.head_dim, cfg.embed_dim));
    p.w_v.assign(cfg.head_count, Eigen::MatrixXd::Zero(cfg.head_dim, cfg.embed_dim));
    p.w_o.assign(cfg.head_count, Eigen::MatrixXd::Zero(cfg.embed_dim, cfg.head_dim));
    p.w_ff1 = Eigen::MatrixXd::Zero(cfg.ff_dim, ds);
    p.b_ff1 = Eigen::MatrixXd::Zero(cfg.ff_dim, 1);
    p.w_ff2 = Eigen::MatrixXd::Zero(ds, cfg.ff_dim);
    p.b_ff2 = Eigen::MatrixXd::Zero(ds, 1);
    p.w_head = Eigen::MatrixXd::Zero(cfg.output_dim, ds);
    p.b_head = Eigen::MatrixXd::Zero(cfg.output_dim, 1);
    return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = zeros(cfg);
    Rng rng(seed);
    auto fill = [&rng](Eigen::MatrixXd& m, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
    };
    fill(p.w_embed, cfg.input_dim);
    if (cfg.pos_encoding == PosEncoding::Learned) fill(p.pos_table, cfg.embed_dim);
    for (int h = 0; h < cfg.head_count; ++h) {
        fill(p.w_q[h], cfg.embed_dim);
        fill(p.w_k[h], cfg.embed_dim);
        fill(p.w_v[h], cfg.embed_dim);
        fill(p.w_o[h], cfg.head_dim);
    }
    fill(p.w_ff1, cfg.stream_dim());
    fill(p.w_ff2, cfg.ff_dim);
    fill(p.w_head, cfg.stream_dim());
    return p;
}

void ModelParams::for_each_block(
    const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn) {
    fn("w_embed", w_embed);
    if (pos_table.size() > 0) fn("pos_table", pos_table);
    for (std::size_t h = 0; h < w_q.size(); ++h) {
        const std::string idx = std::to_string(h);
        fn("w_q." + idx, w_q[h]);
        fn("w_k." + idx, w_k[h]);
        fn("w_v." + idx, w_v[h]);
        fn("w_o." + idx, w_o[h]);
    }
    fn("w_ff1", w_ff1);
    fn("b_ff1", b_ff1);
    fn("w_ff2", w_ff2);
    fn("b_ff2", b_ff2);
    fn("w_head", w_head);
    fn("b_head", b_head);
}

void ModelParams::for_each_block(
    const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each_block(
        [&fn](const std::string& name, Eigen::MatrixXd& m) { fn(name, m); });
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for_each_block([&n](const std::string&, const Eigen::MatrixXd& m) { n += m.size(); });
    return n;
}

bool ModelParams::all_finite() const { return first_nonfinite_block().empty(); }

std::string ModelParams::first_nonfinite_block() const {
    std::string bad;
    for_each_block([&bad](const std::string& name, const Eigen::MatrixXd& m) {
        if (bad.empty() && !m.allFinite()) bad = name;
    });
    return bad;
}

Eigen::MatrixXd sinusoidal_encoding(int embed_dim, int length) {
    Eigen::MatrixXd e(embed_dim, length);
    for (int t = 0; t < length; ++t) {
        for (int i = 0; i < embed_dim; ++i) {
            const double freq = std::pow(10000.0, -2.0 * (i / 2) / embed_dim);
            e(i, t) = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
        }
    }
    return e;
}

namespace {

Eigen::MatrixXd position_encoding(const ModelParams& p, int length) {
    if (p.config.pos_encoding == PosEncoding::Learned) {
        require(length <= p.config.max_len, "sequence longer than learned position table");
        return p.pos_table.leftCols(length);
    }
    return sinusoidal_encoding(p.config.embed_dim, length);
}

}  // namespace

Eigen::MatrixXd embed(const SequenceBatch& x, const ModelParams& p) {
    x.validate(p.config);
    Eigen::MatrixXd xpe = p.w_embed * x.values;
    const Eigen::MatrixXd e = position_encoding(p, x.length);
    for (int b = 0; b < x.batch; ++b)
        xpe.middleCols(static_cast<Eigen::Index>(b) * x.length, x.length) += e;
    return xpe;
}

namespace {

// Softmax over band scores with max subtraction. scores has w entries;
// returns normalized weights in place.
void band_softmax(Eigen::VectorXd& scores) {
    const double m = scores.maxCoeff();
    scores = (scores.array() - m).exp();
    scores /= scores.sum();
}

struct AttentionSizes {
    int batch, length, first, nvalid, window, heads, dm;
};

// Banded attention over packed matrices.
//   q: h*d_m x B*Nv (queries at valid positions), k, v: h*d_m x B*N.
// When ref pointers are given, the present slot (band slot `window`) of each
// query uses k_ref/v_ref at the query's own valid column.
//
// Full-window batches (first >= window) take a vectorized path: one shifted
// block pass per relative lag. Truncated windows fall back to the per-query
// loop.
void attention_forward(const AttentionSizes& sz, const Eigen::MatrixXd& q,
                       const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                       const Eigen::MatrixXd* k_ref, const Eigen::MatrixXd* v_ref,
                       Eigen::MatrixXd& attw, Eigen::MatrixXd& headout,
                       std::uint64_t& key_visits) {
    const int band = sz.window + 1;
    attw.setZero(static_cast<Eigen::Index>(sz.heads) * band,
                 static_cast<Eigen::Index>(sz.batch) * sz.nvalid);
    headout.setZero(static_cast<Eigen::Index>(sz.heads) * sz.dm,
                    static_cast<Eigen::Index>(sz.batch) * sz.nvalid);

    if (sz.first >= sz.window) {
        for (int b = 0; b < sz.batch; ++b) {
            const Eigen::Index qc0 = static_cast<Eigen::Index>(b) * sz.nvalid;
            const Eigen::Index kc0 = static_cast<Eigen::Index>(b) * sz.length + sz.first;
            for (int h = 0; h < sz.heads; ++h) {
                const Eigen::Index hr = static_cast<Eigen::Index>(h) * sz.dm;
                const auto qb = q.block(hr, qc0, sz.dm, sz.nvalid);
                auto s = attw.block(static_cast<Eigen::Index>(h) * band, qc0, band, sz.nvalid);
                const int npast = sz.window + (k_ref ? 0 : 1);
                for (int j = 0; j < npast; ++j) {
                    const int lag = sz.window - j;
                    s.row(j) = (k.block(hr, kc0 - lag, sz.dm, sz.nvalid).array() * qb.array())
                                   .colwise()
                                   .sum();
                }
                if (k_ref)
                    s.row(band - 1) =
                        (k_ref->block(hr, qc0, sz.dm, sz.nvalid).array() * qb.array())
                            .colwise()
                            .sum();
                // Column softmax with max subtraction.
                const Eigen::RowVectorXd mx = s.colwise().maxCoeff();
                s = (s.rowwise() - mx).array().exp();
                const Eigen::RowVectorXd sum = s.colwise().sum();
                s.array().rowwise() /= sum.array();

                auto ho = headout.block(hr, qc0, sz.dm, sz.nvalid);
                for (int j = 0; j < npast; ++j) {
                    const int lag = sz.window - j;
                    ho.array() += v.block(hr, kc0 - lag, sz.dm, sz.nvalid).array().rowwise() *
                                  s.row(j).array();
                }
                if (v_ref)
                    ho.array() += v_ref->block(hr, qc0, sz.dm, sz.nvalid).array().rowwise() *
                                  s.row(band - 1).array();
                key_visits += static_cast<std::uint64_t>(sz.nvalid) * band;
            }
        }
        return;
    }

    Eigen::VectorXd scores(band);
    for (int b = 0; b < sz.batch; ++b) {
        for (int i = 0; i < sz.nvalid; ++i) {
            const int t = sz.first + i;
            const Eigen::Index cv = static_cast<Eigen::Index>(b) * sz.nvalid + i;
            const int j0 = std::max(0, sz.window - t);
            // Past keys occupy slots j0..window-1 (or ..window without ref).
            const int npast = sz.window - j0 + (k_ref ? 0 : 1);
            const Eigen::Index c0 = static_cast<Eigen::Index>(b) * sz.length + t - sz.window + j0;
            for (int h = 0; h < sz.heads; ++h) {
                const auto qv = q.col(cv).segment(static_cast<Eigen::Index>(h) * sz.dm, sz.dm);
                const int w = sz.window - j0 + 1;
                auto sc = scores.head(w);
                if (npast > 0)
                    sc.head(npast) =
                        k.block(static_cast<Eigen::Index>(h) * sz.dm, c0, sz.dm, npast)
                            .transpose() * qv;
                if (k_ref)
                    sc(w - 1) =
                        k_ref->col(cv).segment(static_cast<Eigen::Index>(h) * sz.dm, sz.dm).dot(qv);
                Eigen::VectorXd wts = sc;
                band_softmax(wts);
                attw.col(cv).segment(static_cast<Eigen::Index>(h) * band + j0, w) = wts;
                auto ho = headout.col(cv).segment(static_cast<Eigen::Index>(h) * sz.dm, sz.dm);
                if (npast > 0)
                    ho = v.block(static_cast<Eigen::Index>(h) * sz.dm, c0, sz.dm, npast) *
                         wts.head(npast);
                if (v_ref)
                    ho += wts(w - 1) *
                          v_ref->col(cv).segment(static_cast<Eigen::Index>(h) * sz.dm, sz.dm);
                key_visits += static_cast<std::uint64_t>(w);
            }
        }
    }
}

// Reverse of attention_forward. Accumulates into dq, dk, dv (and the ref
// slots when given).
void attention_backward(const AttentionSizes& sz, const Eigen::MatrixXd& q,
                        const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                        const Eigen::MatrixXd* k_ref, const Eigen::MatrixXd* v_ref,
                        const Eigen::MatrixXd& attw, const Eigen::MatrixXd& dheadout,
                        Eigen::MatrixXd& dq, Eigen::MatrixXd& dk, Eigen::MatrixXd& dv,
                        Eigen::MatrixXd* dk_ref, Eigen::MatrixXd* dv_ref) {
    const int band = sz.window + 1;

    if (sz.first >= sz.window) {
        Eigen::MatrixXd dw(band, sz.nvalid), ds(band, sz.nvalid);
        for (int b = 0; b < sz.batch; ++b) {
            const Eigen::Index qc0 = static_cast<Eigen::Index>(b) * sz.nvalid;
            const Eigen::Index kc0 = static_cast<Eigen::Index>(b) * sz.length + sz.first;
            for (int h = 0; h < sz.heads; ++h) {
                const Eigen::Index hr = static_cast<Eigen::Index>(h) * sz.dm;
                const auto qb = q.block(hr, qc0, sz.dm, sz.nvalid);
                const auto g = dheadout.block(hr, qc0, sz.dm, sz.nvalid);
                const auto w = attw.block(static_cast<Eigen::Index>(h) * band, qc0, band,
                                          sz.nvalid);
                const int npast = sz.window + (k_ref ? 0 : 1);
                for (int j = 0; j < npast; ++j) {
                    const int lag = sz.window - j;
                    dw.row(j) = (v.block(hr, kc0 - lag, sz.dm, sz.nvalid).array() * g.array())
                                    .colwise()
                                    .sum();
                }
                if (v_ref)
                    dw.row(band - 1) =
                        (v_ref->block(hr, qc0, sz.dm, sz.nvalid).array() * g.array())
                            .colwise()
                            .sum();
                const Eigen::RowVectorXd wsum =
                    (w.array() * dw.array()).colwise().sum();
                ds = w.array() * (dw.array().rowwise() - wsum.array());

                auto dqb = dq.block(hr, qc0, sz.dm, sz.nvalid);
                for (int j = 0; j < npast; ++j) {
                    const int lag = sz.window - j;
                    dqb.array() += k.block(hr, kc0 - lag, sz.dm, sz.nvalid).array().rowwise() *
                                   ds.row(j).array();
                    dk.block(hr, kc0 - lag, sz.dm, sz.nvalid).array() +=
                        qb.array().rowwise() * ds.row(j).array();
                    dv.block(hr, kc0 - lag, sz.dm, sz.nvalid).array() +=
                        g.array().rowwise() * w.row(j).array();
                }
                if (k_ref) {
                    dqb.array() += k_ref->block(hr, qc0, sz.dm, sz.nvalid).array().rowwise() *
                                   ds.row(band - 1).array();
                    dk_ref->block(hr, qc0, sz.dm, sz.nvalid).array() +=
                        qb.array().rowwise() * ds.row(band - 1).array();
                    dv_ref->block(hr, qc0, sz.dm, sz.nvalid).array() +=
                        g.array().rowwise() * w.row(band - 1).array();
                }
            }
        }
        return;
    }

    for (int b = 0; b < sz.batch; ++b) {
        for (int i = 0; i < sz.nvalid; ++i) {
            const int t = sz.first + i;
            const Eigen::Index cv = static_cast<Eigen::Index>(b) * sz.nvalid + i;
            const int j0 = std::max(0, sz.window - t);
            const int w = sz.window - j0 + 1;
            const int npast = sz.window - j0 + (k_ref ? 0 : 1);
            const Eigen::Index c0 = static_cast<Eigen::Index>(b) * sz.length + t - sz.window + j0;
            for (int h = 0; h < sz.heads; ++h) {
                const Eigen::Index hr = static_cast<Eigen::Index>(h) * sz.dm;
                const auto qv = q.col(cv).segment(hr, sz.dm);
                const auto g = dheadout.col(cv).segment(hr, sz.dm);
                const auto wts = attw.col(cv).segment(static_cast<Eigen::Index>(h) * band + j0, w);
                Eigen::VectorXd dwts(w);
                if (npast > 0)
                    dwts.head(npast) = v.block(hr, c0, sz.dm, npast).transpose() * g;
                if (v_ref) dwts(w - 1) = v_ref->col(cv).segment(hr, sz.dm).dot(g);
                const double wsum = wts.dot(dwts);
                const Eigen::VectorXd dscores = wts.array() * (dwts.array() - wsum);
                // dv: rank-1 update with the attention weights
                if (npast > 0) {
                    dv.block(hr, c0, sz.dm, npast).noalias() +=
                        g * wts.head(npast).transpose();
                    dq.col(cv).segment(hr, sz.dm).noalias() +=
                        k.block(hr, c0, sz.dm, npast) * dscores.head(npast);
                    dk.block(hr, c0, sz.dm, npast).noalias() +=
                        qv * dscores.head(npast).transpose();
                }
                if (v_ref) {
                    dv_ref->col(cv).segment(hr, sz.dm).noalias() += wts(w - 1) * g;
                    dq.col(cv).segment(hr, sz.dm).noalias() +=
                        dscores(w - 1) * k_ref->col(cv).segment(hr, sz.dm);
                    dk_ref->col(cv).segment(hr, sz.dm).noalias() += dscores(w - 1) * qv;
                }
            }
        }
    }
}

// Post-attention stack shared by both branches: combine, feed-forward with
// residual, optional norms, dense head.
struct StackRefs {
    Eigen::MatrixXd *s_in, *s, *ff_pre, *ff_act, *z_in, *z, *out;
    Eigen::VectorXd *ln1_mean, *ln1_istd, *ln2_mean, *ln2_istd;
};

void stack_forward(const ModelParams& p, const Eigen::MatrixXd& attn_raw,
                   const Eigen::MatrixXd& xpe_resid, StackRefs r) {
    const auto& cfg = p.config;
    if (cfg.combine == Combine::ConcatNorm) {
        r.s_in->resize(cfg.stream_dim(), attn_raw.cols());
        r.s_in->topRows(cfg.embed_dim) = attn_raw;
        r.s_in->bottomRows(cfg.embed_dim) = xpe_resid;
        layer_norm_forward(*r.s_in, *r.s, *r.ln1_mean, *r.ln1_istd);
    } else {
        *r.s_in = xpe_resid + attn_raw;
        *r.s = *r.s_in;
    }
    r.ff_pre->noalias() = p.w_ff1 * (*r.s);
    r.ff_pre->colwise() += Eigen::VectorXd(p.b_ff1.col(0));
    *r.ff_act = apply_activation(cfg.activation, *r.ff_pre);
    r.z_in->noalias() = p.w_ff2 * (*r.ff_act);
    *r.z_in += *r.s;
    r.z_in->colwise() += Eigen::VectorXd(p.b_ff2.col(0));
    if (cfg.combine == Combine::ConcatNorm) {
        layer_norm_forward(*r.z_in, *r.z, *r.ln2_mean, *r.ln2_istd);
    } else {
        *r.z = *r.z_in;
    }
    r.out->noalias() = p.w_head * (*r.z);
    r.out->colwise() += Eigen::VectorXd(p.b_head.col(0));
}

struct StackGrads {
    Eigen::MatrixXd d_attn_raw;   // d_e x cols
    Eigen::MatrixXd d_xpe_resid;  // d_e x cols
};

StackGrads stack_backward(const ModelParams& p, const ForwardCache& cache, bool ref_branch,
                          const Eigen::MatrixXd& d_out, ModelParams& grads) {
    const auto& cfg = p.config;
    const auto& z = ref_branch ? cache.z_r : cache.z;
    const auto& z_in = ref_branch ? cache.z_in_r : cache.z_in;
    const auto& ln2_istd = ref_branch ? cache.ln2_istd_r : cache.ln2_istd;
    const auto& ff_act = ref_branch ? cache.ff_act_r : cache.ff_act;
    const auto& ff_pre = ref_branch ? cache.ff_pre_r : cache.ff_pre;
    const auto& s = ref_branch ? cache.s_r : cache.s;
    const auto& s_in = ref_branch ? cache.s_in_r : cache.s_in;
    const auto& ln1_istd = ref_branch ? cache.ln1_istd_r : cache.ln1_istd;

    grads.w_head.noalias() += d_out * z.transpose();
    grads.b_head.col(0) += d_out.rowwise().sum();
    Eigen::MatrixXd dz = p.w_head.transpose() * d_out;

    Eigen::MatrixXd dz_in = (cfg.combine == Combine::ConcatNorm)
                                ? layer_norm_backward(dz, z, ln2_istd)
                                : std::move(dz);
    (void)z_in;

    grads.w_ff2.noalias() += dz_in * ff_act.transpose();
    grads.b_ff2.col(0) += dz_in.rowwise().sum();
    Eigen::MatrixXd dff_act = p.w_ff2.transpose() * dz_in;
    Eigen::MatrixXd dff_pre = activation_grad(cfg.activation, dff_act, ff_pre);
    grads.w_ff1.noalias() += dff_pre * s.transpose();
    grads.b_ff1.col(0) += dff_pre.rowwise().sum();
    Eigen::MatrixXd ds = dz_in;  // residual path around the feed-forward
    ds.noalias() += p.w_ff1.transpose() * dff_pre;

    Eigen::MatrixXd ds_in = (cfg.combine == Combine::ConcatNorm)
                                ? layer_norm_backward(ds, s, ln1_istd)
                                : std::move(ds);
    (void)s_in;

    StackGrads out;
    if (cfg.combine == Combine::ConcatNorm) {
        out.d_attn_raw = ds_in.topRows(cfg.embed_dim);
        out.d_xpe_resid = ds_in.bottomRows(cfg.embed_dim);
    } else {
        out.d_attn_raw = ds_in;
        out.d_xpe_resid = std::move(ds_in);
    }
    return out;
}

void check_outputs_finite(const Eigen::MatrixXd& out, int nvalid, int first, const char* branch) {
    if (out.allFinite()) return;
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
        if (!out.col(c).allFinite()) {
            std::ostringstream msg;
            msg << "non-finite " << branch << " output at batch item " << c / nvalid
                << ", position " << first + static_cast<int>(c % nvalid);
            throw std::runtime_error(msg.str());
        }
    }
}

}  // namespace

Eigen::MatrixXd fpca_attention(const Eigen::MatrixXd& xpe, const ModelParams& p,
                               const FpcaMask& mask, int batch) {
    const auto& cfg = p.config;
    require(batch >= 1, "batch must be >= 1");
    require(xpe.rows() == cfg.embed_dim, "embedded dim mismatch");
    require(xpe.cols() == static_cast<Eigen::Index>(batch) * mask.length,
            "mask length does not match sequence length");
    const int n = mask.length;
    AttentionSizes sz{batch, n, 0, n, mask.window, cfg.head_count, cfg.head_dim};
    Eigen::MatrixXd q(static_cast<Eigen::Index>(cfg.head_count) * cfg.head_dim, xpe.cols());
    Eigen::MatrixXd k = q, v = q;
    for (int h = 0; h < cfg.head_count; ++h) {
        const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
        q.middleRows(hr, cfg.head_dim).noalias() = p.w_q[h] * xpe;
        k.middleRows(hr, cfg.head_dim).noalias() = p.w_k[h] * xpe;
        v.middleRows(hr, cfg.head_dim).noalias() = p.w_v[h] * xpe;
    }
    Eigen::MatrixXd attw, headout;
    std::uint64_t visits = 0;
    attention_forward(sz, q, k, v, nullptr, nullptr, attw, headout, visits);
    Eigen::MatrixXd out = xpe;
    for (int h = 0; h < cfg.head_count; ++h)
        out.noalias() += p.w_o[h] *
                         headout.middleRows(static_cast<Eigen::Index>(h) * cfg.head_dim,
                                            cfg.head_dim);
    check_outputs_finite(out, n, 0, "attention");
    return out;
}

Eigen::MatrixXd modified_fpca_attention(const Eigen::MatrixXd& xpe,
                                        const Eigen::MatrixXd& xpe_ref,
                                        const ModelParams& p, const FpcaMask& mask,
                                        int batch) {
    const auto& cfg = p.config;
    require(xpe.rows() == xpe_ref.rows() && xpe.cols() == xpe_ref.cols(),
            "xpe and xpe_ref must have the same shape");
    require(xpe.cols() == static_cast<Eigen::Index>(batch) * mask.length,
            "mask length does not match sequence length");
    const int n = mask.length;
    AttentionSizes sz{batch, n, 0, n, mask.window, cfg.head_count, cfg.head_dim};
    const Eigen::Index hd = static_cast<Eigen::Index>(cfg.head_count) * cfg.head_dim;
    Eigen::MatrixXd k(hd, xpe.cols()), v(hd, xpe.cols());
    Eigen::MatrixXd q_r(hd, xpe.cols()), k_r(hd, xpe.cols()), v_r(hd, xpe.cols());
    for (int h = 0; h < cfg.head_count; ++h) {
        const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
        k.middleRows(hr, cfg.head_dim).noalias() = p.w_k[h] * xpe;
        v.middleRows(hr, cfg.head_dim).noalias() = p.w_v[h] * xpe;
        q_r.middleRows(hr, cfg.head_dim).noalias() = p.w_q[h] * xpe_ref;
        k_r.middleRows(hr, cfg.head_dim).noalias() = p.w_k[h] * xpe_ref;
        v_r.middleRows(hr, cfg.head_dim).noalias() = p.w_v[h] * xpe_ref;
    }
    Eigen::MatrixXd attw, headout;
    std::uint64_t visits = 0;
    attention_forward(sz, q_r, k, v, &k_r, &v_r, attw, headout, visits);
    Eigen::MatrixXd out = xpe_ref;
    for (int h = 0; h < cfg.head_count; ++h)
        out.noalias() += p.w_o[h] *
                         headout.middleRows(static_cast<Eigen::Index>(h) * cfg.head_dim,
                                            cfg.head_dim);
    check_outputs_finite(out, n, 0, "attention");
    return out;
}

void forward(const SequenceBatch& x, const ModelParams& p,
             const Eigen::MatrixXd* ref_inputs, ForwardCache& cache, int first_output) {
    const auto& cfg = p.config;
    x.validate(cfg);
    const int n = x.length;
    const int first = first_output < 0 ? cfg.memory : first_output;
    require(first >= 0 && first < n, "no valid output positions: length must exceed memory");
    const int nvalid = n - first;
    const Eigen::Index bn = static_cast<Eigen::Index>(x.batch) * n;
    const Eigen::Index bv = static_cast<Eigen::Index>(x.batch) * nvalid;

    // Scalar state reset; matrix members are overwritten below and keep their
    // buffers across calls of the same shape.
    cache.batch = x.batch;
    cache.length = n;
    cache.first_output = first;
    cache.nvalid = nvalid;
    cache.has_ref = false;
    cache.key_visits = 0;

    const Eigen::MatrixXd e = position_encoding(p, n);
    cache.xpe.resize(cfg.embed_dim, bn);
    cache.xpe.noalias() = p.w_embed * x.values;
    for (int b = 0; b < x.batch; ++b)
        cache.xpe.middleCols(static_cast<Eigen::Index>(b) * n, n) += e;

    // Pack the valid-position columns once; the post-attention stack only
    // ever sees these.
    Eigen::MatrixXd xpe_valid(cfg.embed_dim, bv);
    for (int b = 0; b < x.batch; ++b)
        xpe_valid.middleCols(static_cast<Eigen::Index>(b) * nvalid, nvalid) =
            cache.xpe.middleCols(static_cast<Eigen::Index>(b) * n + first, nvalid);

    const Eigen::Index hd = static_cast<Eigen::Index>(cfg.head_count) * cfg.head_dim;
    cache.q.resize(hd, bv);
    cache.k.resize(hd, bn);
    cache.v.resize(hd, bn);
    for (int h = 0; h < cfg.head_count; ++h) {
        const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
        cache.q.middleRows(hr, cfg.head_dim).noalias() = p.w_q[h] * xpe_valid;
        cache.k.middleRows(hr, cfg.head_dim).noalias() = p.w_k[h] * cache.xpe;
        cache.v.middleRows(hr, cfg.head_dim).noalias() = p.w_v[h] * cache.xpe;
    }

    AttentionSizes sz{x.batch, n, first, nvalid, cfg.memory, cfg.head_count, cfg.head_dim};
    attention_forward(sz, cache.q, cache.k, cache.v, nullptr, nullptr, cache.attw,
                      cache.headout, cache.key_visits);
    cache.attn_raw.setZero(cfg.embed_dim, bv);
    for (int h = 0; h < cfg.head_count; ++h)
        cache.attn_raw.noalias() +=
            p.w_o[h] * cache.headout.middleRows(static_cast<Eigen::Index>(h) * cfg.head_dim,
                                                cfg.head_dim);

    stack_forward(p, cache.attn_raw, xpe_valid,
                  StackRefs{&cache.s_in, &cache.s, &cache.ff_pre, &cache.ff_act, &cache.z_in,
                            &cache.z, &cache.out, &cache.ln1_mean, &cache.ln1_istd,
                            &cache.ln2_mean, &cache.ln2_istd});
    check_outputs_finite(cache.out, nvalid, first, "joint");

    if (ref_inputs == nullptr) return;

    require(ref_inputs->rows() == cfg.input_dim && ref_inputs->cols() == bv,
            "reference inputs must be d_i x batch*valid");
    require(ref_inputs->allFinite(), "reference inputs contain non-finite values");
    cache.has_ref = true;
    cache.ref_in = *ref_inputs;

    cache.xpe_r.noalias() = p.w_embed * cache.ref_in;
    for (int b = 0; b < x.batch; ++b)
        cache.xpe_r.middleCols(static_cast<Eigen::Index>(b) * nvalid, nvalid) +=
            e.middleCols(first, nvalid);

    cache.q_r.resize(hd, bv);
    cache.k_r.resize(hd, bv);
    cache.v_r.resize(hd, bv);
    for (int h = 0; h < cfg.head_count; ++h) {
        const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
        cache.q_r.middleRows(hr, cfg.head_dim).noalias() = p.w_q[h] * cache.xpe_r;
        cache.k_r.middleRows(hr, cfg.head_dim).noalias() = p.w_k[h] * cache.xpe_r;
        cache.v_r.middleRows(hr, cfg.head_dim).noalias() = p.w_v[h] * cache.xpe_r;
    }
    attention_forward(sz, cache.q_r, cache.k, cache.v, &cache.k_r, &cache.v_r, cache.attw_r,
                      cache.headout_r, cache.key_visits);
    cache.attn_raw_r.setZero(cfg.embed_dim, bv);
    for (int h = 0; h < cfg.head_count; ++h)
        cache.attn_raw_r.noalias() +=
            p.w_o[h] * cache.headout_r.middleRows(static_cast<Eigen::Index>(h) * cfg.head_dim,
                                                  cfg.head_dim);

    stack_forward(p, cache.attn_raw_r, cache.xpe_r,
                  StackRefs{&cache.s_in_r, &cache.s_r, &cache.ff_pre_r, &cache.ff_act_r,
                            &cache.z_in_r, &cache.z_r, &cache.out_r, &cache.ln1_mean_r,
                            &cache.ln1_istd_r, &cache.ln2_mean_r, &cache.ln2_istd_r});
    check_outputs_finite(cache.out_r, nvalid, first, "reference");
}

BackwardResult backward(const SequenceBatch& x, const ModelParams& p,
                        const ForwardCache& cache, const Eigen::MatrixXd& d_out,
                        const Eigen::MatrixXd& d_out_ref) {
    const auto& cfg = p.config;
    const int n = cache.length, first = cache.first_output, nvalid = cache.nvalid;
    const Eigen::Index bn = static_cast<Eigen::Index>(cache.batch) * n;
    const Eigen::Index bv = static_cast<Eigen::Index>(cache.batch) * nvalid;
    require(d_out.rows() == cfg.output_dim && d_out.cols() == bv, "d_out shape mismatch");
    const bool with_ref = d_out_ref.size() > 0;
    require(!with_ref || cache.has_ref, "reference sensitivities without a reference pass");

    BackwardResult res;
    res.grads = ModelParams::zeros(cfg);
    const Eigen::Index hd = static_cast<Eigen::Index>(cfg.head_count) * cfg.head_dim;

    // Re-pack the valid xpe columns (needed for projection weight grads).
    Eigen::MatrixXd xpe_valid(cfg.embed_dim, bv);
    for (int b = 0; b < cache.batch; ++b)
        xpe_valid.middleCols(static_cast<Eigen::Index>(b) * nvalid, nvalid) =
            cache.xpe.middleCols(static_cast<Eigen::Index>(b) * n + first, nvalid);

    Eigen::MatrixXd dxpe = Eigen::MatrixXd::Zero(cfg.embed_dim, bn);
    Eigen::MatrixXd dxpe_valid = Eigen::MatrixXd::Zero(cfg.embed_dim, bv);
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(hd, bv);
    Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(hd, bn);
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(hd, bn);

    AttentionSizes sz{cache.batch, n, first, nvalid, cfg.memory, cfg.head_count, cfg.head_dim};

    // Joint branch.
    {
        StackGrads sg = stack_backward(p, cache, false, d_out, res.grads);
        dxpe_valid += sg.d_xpe_resid;
        Eigen::MatrixXd dheadout(hd, bv);
        for (int h = 0; h < cfg.head_count; ++h) {
            const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
            res.grads.w_o[h].noalias() +=
                sg.d_attn_raw * cache.headout.middleRows(hr, cfg.head_dim).transpose();
            dheadout.middleRows(hr, cfg.head_dim).noalias() =
                p.w_o[h].transpose() * sg.d_attn_raw;
        }
        attention_backward(sz, cache.q, cache.k, cache.v, nullptr, nullptr, cache.attw,
                           dheadout, dq, dk, dv, nullptr, nullptr);
    }

    // Reference branch: shares K/V of past positions with the joint branch.
    Eigen::MatrixXd dxpe_r;
    if (with_ref) {
        Eigen::MatrixXd dq_r = Eigen::MatrixXd::Zero(hd, bv);
        Eigen::MatrixXd dk_r = Eigen::MatrixXd::Zero(hd, bv);
        Eigen::MatrixXd dv_r = Eigen::MatrixXd::Zero(hd, bv);
        dxpe_r = Eigen::MatrixXd::Zero(cfg.embed_dim, bv);

        StackGrads sg = stack_backward(p, cache, true, d_out_ref, res.grads);
        dxpe_r += sg.d_xpe_resid;
        Eigen::MatrixXd dheadout_r(hd, bv);
        for (int h = 0; h < cfg.head_count; ++h) {
            const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
            res.grads.w_o[h].noalias() +=
                sg.d_attn_raw * cache.headout_r.middleRows(hr, cfg.head_dim).transpose();
            dheadout_r.middleRows(hr, cfg.head_dim).noalias() =
                p.w_o[h].transpose() * sg.d_attn_raw;
        }
        attention_backward(sz, cache.q_r, cache.k, cache.v, &cache.k_r, &cache.v_r,
                           cache.attw_r, dheadout_r, dq_r, dk, dv, &dk_r, &dv_r);

        for (int h = 0; h < cfg.head_count; ++h) {
            const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
            res.grads.w_q[h].noalias() +=
                dq_r.middleRows(hr, cfg.head_dim) * cache.xpe_r.transpose();
            res.grads.w_k[h].noalias() +=
                dk_r.middleRows(hr, cfg.head_dim) * cache.xpe_r.transpose();
            res.grads.w_v[h].noalias() +=
                dv_r.middleRows(hr, cfg.head_dim) * cache.xpe_r.transpose();
            dxpe_r.noalias() += p.w_q[h].transpose() * dq_r.middleRows(hr, cfg.head_dim);
            dxpe_r.noalias() += p.w_k[h].transpose() * dk_r.middleRows(hr, cfg.head_dim);
            dxpe_r.noalias() += p.w_v[h].transpose() * dv_r.middleRows(hr, cfg.head_dim);
        }
    }

    // Projection weights and scatter back to the full sequence.
    for (int h = 0; h < cfg.head_count; ++h) {
        const Eigen::Index hr = static_cast<Eigen::Index>(h) * cfg.head_dim;
        res.grads.w_q[h].noalias() += dq.middleRows(hr, cfg.head_dim) * xpe_valid.transpose();
        res.grads.w_k[h].noalias() += dk.middleRows(hr, cfg.head_dim) * cache.xpe.transpose();
        res.grads.w_v[h].noalias() += dv.middleRows(hr, cfg.head_dim) * cache.xpe.transpose();
        dxpe_valid.noalias() += p.w_q[h].transpose() * dq.middleRows(hr, cfg.head_dim);
        dxpe.noalias() += p.w_k[h].transpose() * dk.middleRows(hr, cfg.head_dim);
        dxpe.noalias() += p.w_v[h].transpose() * dv.middleRows(hr, cfg.head_dim);
    }
    for (int b = 0; b < cache.batch; ++b)
        dxpe.middleCols(static_cast<Eigen::Index>(b) * n + first, nvalid) +=
            dxpe_valid.middleCols(static_cast<Eigen::Index>(b) * nvalid, nvalid);

    // Embedding backward.
    res.grads.w_embed.noalias() += dxpe * x.values.transpose();
    res.d_inputs.noalias() = p.w_embed.transpose() * dxpe;
    if (cfg.pos_encoding == PosEncoding::Learned) {
        for (int b = 0; b < cache.batch; ++b)
            res.grads.pos_table.leftCols(n) +=
                dxpe.middleCols(static_cast<Eigen::Index>(b) * n, n);
    }
    if (with_ref) {
        res.grads.w_embed.noalias() += dxpe_r * cache.ref_in.transpose();
        res.d_ref_inputs.noalias() = p.w_embed.transpose() * dxpe_r;
        if (cfg.pos_encoding == PosEncoding::Learned) {
            for (int b = 0; b < cache.batch; ++b)
                res.grads.pos_table.middleCols(first, nvalid) +=
                    dxpe_r.middleCols(static_cast<Eigen::Index>(b) * nvalid, nvalid);
        }
    }

    const std::string bad = res.grads.first_nonfinite_block();
    if (!bad.empty())
        throw std::runtime_error("non-finite gradient in parameter block " + bad);
    return res;
}

ModelParams grad(const SequenceBatch& x, const ModelParams& p,
                 const std::function<double(const Eigen::MatrixXd&, Eigen::MatrixXd&)>& objective,
                 int first_output) {
    ForwardCache cache;
    forward(x, p, nullptr, cache, first_output);
    Eigen::MatrixXd d_out = Eigen::MatrixXd::Zero(cache.out.rows(), cache.out.cols());
    objective(cache.out, d_out);
    return backward(x, p, cache, d_out).grads;
}

}  // namespace treet
