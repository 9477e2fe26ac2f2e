#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "treet/adam.hpp"
#include "treet/io.hpp"
#include "treet/model.hpp"
#include "treet/rng.hpp"

#include <cmath>
#include <filesystem>

using namespace treet;

namespace {

ModelConfig small_config(Combine combine = Combine::ConcatNorm,
                         PosEncoding pe = PosEncoding::Sinusoidal) {
    ModelConfig cfg;
    cfg.input_dim = 2;
    cfg.embed_dim = 4;
    cfg.head_count = 2;
    cfg.head_dim = 3;
    cfg.ff_dim = 5;
    cfg.output_dim = 1;
    cfg.memory = 2;
    cfg.combine = combine;
    cfg.pos_encoding = pe;
    cfg.max_len = 16;
    return cfg;
}

SequenceBatch random_batch(const ModelConfig& cfg, int batch, int length,
                           std::uint64_t seed) {
    Rng rng(seed);
    SequenceBatch x;
    x.batch = batch;
    x.length = length;
    x.values.resize(cfg.input_dim, static_cast<Eigen::Index>(batch) * length);
    for (Eigen::Index c = 0; c < x.values.cols(); ++c)
        for (Eigen::Index r = 0; r < x.values.rows(); ++r) x.values(r, c) = rng.normal();
    return x;
}

// Independent single-head causal attention (full history), written directly
// from the definition; oracle for the l = N-1 case.
Eigen::MatrixXd naive_causal_attention(const Eigen::MatrixXd& xpe,
                                       const Eigen::MatrixXd& wq,
                                       const Eigen::MatrixXd& wk,
                                       const Eigen::MatrixXd& wv,
                                       const Eigen::MatrixXd& wo) {
    const Eigen::Index n = xpe.cols();
    Eigen::MatrixXd out = xpe;
    for (Eigen::Index t = 0; t < n; ++t) {
        const Eigen::VectorXd q = wq * xpe.col(t);
        Eigen::VectorXd scores(t + 1);
        for (Eigen::Index j = 0; j <= t; ++j) scores(j) = (wk * xpe.col(j)).dot(q);
        scores.array() -= scores.maxCoeff();
        Eigen::VectorXd w = scores.array().exp();
        w /= w.sum();
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(wv.rows());
        for (Eigen::Index j = 0; j <= t; ++j) acc += w(j) * (wv * xpe.col(j));
        out.col(t) += wo * acc;
    }
    return out;
}

// Central finite differences over every entry of every block.
void gradient_check(const ModelConfig& cfg, bool with_ref, double tol = 1e-4) {
    const int batch = 2, length = 5;
    SequenceBatch x = random_batch(cfg, batch, length, 7);
    ModelParams p = ModelParams::init(cfg, 11);
    const int nvalid = length - cfg.memory;
    const Eigen::Index bv = static_cast<Eigen::Index>(batch) * nvalid;

    Eigen::MatrixXd ref_inputs;
    if (with_ref) {
        Rng rng(23);
        ref_inputs.resize(cfg.input_dim, bv);
        for (Eigen::Index c = 0; c < bv; ++c)
            for (Eigen::Index r = 0; r < cfg.input_dim; ++r) ref_inputs(r, c) = rng.normal();
    }

    // Fixed random sensitivities so every output matters.
    Rng wrng(31);
    Eigen::MatrixXd wj(cfg.output_dim, bv), wr(cfg.output_dim, bv);
    for (Eigen::Index c = 0; c < bv; ++c)
        for (Eigen::Index r = 0; r < cfg.output_dim; ++r) {
            wj(r, c) = wrng.normal();
            wr(r, c) = wrng.normal();
        }

    auto objective = [&](const ModelParams& params) {
        ForwardCache cache;
        forward(x, params, with_ref ? &ref_inputs : nullptr, cache);
        double f = (wj.array() * cache.out.array()).sum();
        if (with_ref) f += (wr.array() * cache.out_r.array()).sum();
        return f;
    };

    ForwardCache cache;
    forward(x, p, with_ref ? &ref_inputs : nullptr, cache);
    const BackwardResult back =
        backward(x, p, cache, wj, with_ref ? wr : Eigen::MatrixXd());

    const double h = 1e-5;
    std::vector<Eigen::MatrixXd*> pblocks, gblocks;
    std::vector<std::string> names;
    p.for_each_block([&](const std::string& n, Eigen::MatrixXd& m) {
        pblocks.push_back(&m);
        names.push_back(n);
    });
    ModelParams grads = back.grads;
    grads.for_each_block([&](const std::string&, Eigen::MatrixXd& m) {
        gblocks.push_back(&m);
    });

    for (std::size_t bi = 0; bi < pblocks.size(); ++bi) {
        Eigen::MatrixXd fd = Eigen::MatrixXd::Zero(pblocks[bi]->rows(), pblocks[bi]->cols());
        for (Eigen::Index cc = 0; cc < pblocks[bi]->cols(); ++cc)
            for (Eigen::Index rr = 0; rr < pblocks[bi]->rows(); ++rr) {
                const double orig = (*pblocks[bi])(rr, cc);
                (*pblocks[bi])(rr, cc) = orig + h;
                const double fp = objective(p);
                (*pblocks[bi])(rr, cc) = orig - h;
                const double fm = objective(p);
                (*pblocks[bi])(rr, cc) = orig;
                fd(rr, cc) = (fp - fm) / (2.0 * h);
            }
        const double denom = std::max(fd.norm(), 1e-8);
        const double rel = (fd - *gblocks[bi]).norm() / denom;
        INFO("block ", names[bi], " with_ref=", with_ref);
        CHECK(rel < tol);
    }

    // Input gradients (both the sequence and the reference inputs).
    {
        Eigen::MatrixXd fd = Eigen::MatrixXd::Zero(x.values.rows(), x.values.cols());
        for (Eigen::Index cc = 0; cc < x.values.cols(); ++cc)
            for (Eigen::Index rr = 0; rr < x.values.rows(); ++rr) {
                const double orig = x.values(rr, cc);
                x.values(rr, cc) = orig + h;
                const double fp = objective(p);
                x.values(rr, cc) = orig - h;
                const double fm = objective(p);
                x.values(rr, cc) = orig;
                fd(rr, cc) = (fp - fm) / (2.0 * h);
            }
        const double rel = (fd - back.d_inputs).norm() / std::max(fd.norm(), 1e-8);
        INFO("input gradients, with_ref=", with_ref);
        CHECK(rel < tol);
    }
    if (with_ref) {
        Eigen::MatrixXd fd = Eigen::MatrixXd::Zero(ref_inputs.rows(), ref_inputs.cols());
        for (Eigen::Index cc = 0; cc < ref_inputs.cols(); ++cc)
            for (Eigen::Index rr = 0; rr < ref_inputs.rows(); ++rr) {
                const double orig = ref_inputs(rr, cc);
                ref_inputs(rr, cc) = orig + h;
                const double fp = objective(p);
                ref_inputs(rr, cc) = orig - h;
                const double fm = objective(p);
                ref_inputs(rr, cc) = orig;
                fd(rr, cc) = (fp - fm) / (2.0 * h);
            }
        const double rel = (fd - back.d_ref_inputs).norm() / std::max(fd.norm(), 1e-8);
        INFO("reference input gradients");
        CHECK(rel < tol);
    }
}

}  // namespace

TEST_CASE("config and mask validation") {
    ModelConfig bad = small_config();
    bad.embed_dim = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(FpcaMask::banded(-1, 4), std::invalid_argument);

    const FpcaMask m = FpcaMask::banded(2, 6);
    const Eigen::MatrixXi d = m.dense();
    for (int q = 0; q < 6; ++q)
        for (int k = 0; k < 6; ++k)
            CHECK(d(q, k) == ((k <= q && q - k <= 2) ? 1 : 0));
    // Every row q >= l has exactly l+1 active entries.
    for (int q = 2; q < 6; ++q) CHECK(d.row(q).sum() == 3);
}

TEST_CASE("embed: identity, zero input, linearity") {
    ModelConfig cfg = small_config(Combine::ConcatNorm, PosEncoding::Learned);
    cfg.input_dim = cfg.embed_dim;  // identity embedding possible
    ModelParams p = ModelParams::zeros(cfg);
    p.w_embed.setIdentity();

    SequenceBatch x = random_batch(cfg, 2, 6, 3);
    // W1 = I, E = 0: embedding equals the input.
    CHECK((embed(x, p) - x.values).norm() == 0.0);

    // Zero input: output equals E broadcast over the batch.
    Rng rng(5);
    for (Eigen::Index c = 0; c < p.pos_table.cols(); ++c)
        for (Eigen::Index r = 0; r < p.pos_table.rows(); ++r) p.pos_table(r, c) = rng.normal();
    SequenceBatch zero = x;
    zero.values.setZero();
    const Eigen::MatrixXd e = embed(zero, p);
    for (int b = 0; b < 2; ++b)
        CHECK((e.middleCols(b * 6, 6) - p.pos_table.leftCols(6)).norm() == 0.0);

    // Linearity: perturbing x by delta changes the embedding by W1*delta.
    ModelParams pr = ModelParams::init(cfg, 9);
    Eigen::MatrixXd delta = Eigen::MatrixXd::Random(cfg.input_dim, x.values.cols());
    SequenceBatch xd = x;
    xd.values += delta;
    const Eigen::MatrixXd diff = embed(xd, pr) - embed(x, pr);
    CHECK((diff - pr.w_embed * delta).norm() < 1e-12);
}

TEST_CASE("fpca attention: full window equals standard causal attention") {
    ModelConfig cfg = small_config();
    cfg.head_count = 1;
    const int n = 7;
    cfg.memory = n - 1;
    ModelParams p = ModelParams::init(cfg, 13);
    SequenceBatch x = random_batch(cfg, 1, n, 17);
    const Eigen::MatrixXd xpe = embed(x, p);
    const Eigen::MatrixXd got = fpca_attention(xpe, p, FpcaMask::banded(n - 1, n), 1);
    const Eigen::MatrixXd want =
        naive_causal_attention(xpe, p.w_q[0], p.w_k[0], p.w_v[0], p.w_o[0]);
    CHECK((got - want).norm() < 1e-12);
}

TEST_CASE("fpca attention: zero queries give uniform window averages") {
    ModelConfig cfg = small_config();
    cfg.head_count = 1;
    cfg.memory = 3;
    const int n = 10;
    ModelParams p = ModelParams::init(cfg, 19);
    p.w_q[0].setZero();
    SequenceBatch x = random_batch(cfg, 1, n, 23);
    const Eigen::MatrixXd xpe = embed(x, p);
    const Eigen::MatrixXd got = fpca_attention(xpe, p, FpcaMask::banded(3, n), 1);
    for (int t = 3; t < n; ++t) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.head_dim);
        for (int j = t - 3; j <= t; ++j) mean += p.w_v[0] * xpe.col(j);
        mean /= 4.0;
        const Eigen::VectorXd want = xpe.col(t) + p.w_o[0] * mean;
        CHECK((got.col(t) - want).norm() < 1e-12);
    }
}

TEST_CASE("fpca attention: causality and window locality are bit-exact") {
    ModelConfig cfg = small_config();
    cfg.memory = 3;
    const int n = 12, t = 6;
    ModelParams p = ModelParams::init(cfg, 29);
    SequenceBatch x = random_batch(cfg, 1, n, 31);
    const Eigen::MatrixXd base = fpca_attention(embed(x, p), p, FpcaMask::banded(3, n), 1);

    SequenceBatch future = x;
    future.values.col(t + 1).array() += 4.2;  // future of position t
    const Eigen::MatrixXd fut = fpca_attention(embed(future, p), p, FpcaMask::banded(3, n), 1);
    for (int s = 0; s <= t; ++s) CHECK((fut.col(s) - base.col(s)).norm() == 0.0);

    SequenceBatch past = x;
    past.values.col(t - 4).array() += 4.2;  // before t - l
    const Eigen::MatrixXd psh = fpca_attention(embed(past, p), p, FpcaMask::banded(3, n), 1);
    CHECK((psh.col(t) - base.col(t)).norm() == 0.0);
}

TEST_CASE("modified fpca: reduces to fpca when reference equals original") {
    ModelConfig cfg = small_config();
    cfg.memory = 2;
    const int n = 8;
    ModelParams p = ModelParams::init(cfg, 37);
    SequenceBatch x = random_batch(cfg, 2, n, 41);
    const Eigen::MatrixXd xpe = embed(x, p);
    const Eigen::MatrixXd a = fpca_attention(xpe, p, FpcaMask::banded(2, n), 2);
    const Eigen::MatrixXd b = modified_fpca_attention(xpe, xpe, p, FpcaMask::banded(2, n), 2);
    CHECK((a - b).norm() < 1e-12);
}

TEST_CASE("modified fpca: window zero sees only the reference") {
    ModelConfig cfg = small_config();
    cfg.memory = 0;
    const int n = 5;
    ModelParams p = ModelParams::init(cfg, 43);
    SequenceBatch x = random_batch(cfg, 1, n, 47);
    SequenceBatch xr = random_batch(cfg, 1, n, 53);
    const Eigen::MatrixXd out =
        modified_fpca_attention(embed(x, p), embed(xr, p), p, FpcaMask::banded(0, n), 1);
    SequenceBatch x2 = random_batch(cfg, 1, n, 59);  // different originals
    const Eigen::MatrixXd out2 =
        modified_fpca_attention(embed(x2, p), embed(xr, p), p, FpcaMask::banded(0, n), 1);
    CHECK((out - out2).norm() == 0.0);
}

TEST_CASE("modified fpca: past contributions shared, present term differs") {
    ModelConfig cfg = small_config();
    cfg.memory = 3;
    cfg.head_count = 1;
    const int n = 8, batch = 2;
    ModelParams p = ModelParams::init(cfg, 61);
    // Two identical sequences with different references.
    SequenceBatch one = random_batch(cfg, 1, n, 67);
    SequenceBatch x;
    x.batch = batch;
    x.length = n;
    x.values.resize(cfg.input_dim, batch * n);
    x.values.leftCols(n) = one.values;
    x.values.rightCols(n) = one.values;

    const int nvalid = n - cfg.memory;
    Eigen::MatrixXd refs(cfg.input_dim, batch * nvalid);
    Rng rng(71);
    for (Eigen::Index c = 0; c < refs.cols(); ++c)
        for (Eigen::Index r = 0; r < refs.rows(); ++r) refs(r, c) = rng.normal();

    ForwardCache cache;
    forward(x, p, &refs, cache);
    // Past keys/values come from the shared original sequence, so they are
    // identical across the two batch items.
    CHECK((cache.k.leftCols(n) - cache.k.rightCols(n)).norm() == 0.0);
    CHECK((cache.v.leftCols(n) - cache.v.rightCols(n)).norm() == 0.0);
    // The present-slot keys/values come from the references and differ.
    CHECK((cache.v_r.leftCols(nvalid) - cache.v_r.rightCols(nvalid)).norm() > 1e-12);
    // Numeric decomposition: each head output is the weighted sum of shared
    // past values plus the item's own present term.
    const int band = cfg.memory + 1;
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < nvalid; ++i) {
            const int t = cfg.memory + i;
            const Eigen::Index cv = b * nvalid + i;
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(cfg.head_dim);
            for (int j = 0; j < cfg.memory; ++j)
                acc += cache.attw_r(j, cv) * cache.v.col(b * n + t - cfg.memory + j);
            acc += cache.attw_r(band - 1, cv) * cache.v_r.col(cv);
            CHECK((acc - cache.headout_r.col(cv)).norm() < 1e-12);
        }
    }
}

TEST_CASE("forward: zero weights with dense bias give constant outputs") {
    for (Combine comb : {Combine::ConcatNorm, Combine::Residual}) {
        ModelConfig cfg = small_config(comb);
        ModelParams p = ModelParams::zeros(cfg);
        p.b_head(0, 0) = 1.75;
        SequenceBatch x = random_batch(cfg, 3, 7, 73);
        ForwardCache cache;
        forward(x, p, nullptr, cache);
        CHECK(cache.out.rows() == 1);
        CHECK(cache.out.cols() == 3 * (7 - cfg.memory));
        CHECK((cache.out.array() - 1.75).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("forward: reference equal to the present reproduces joint outputs") {
    for (Combine comb : {Combine::ConcatNorm, Combine::Residual}) {
        ModelConfig cfg = small_config(comb);
        ModelParams p = ModelParams::init(cfg, 79);
        const int batch = 2, n = 7, nvalid = n - cfg.memory;
        SequenceBatch x = random_batch(cfg, batch, n, 83);
        Eigen::MatrixXd refs(cfg.input_dim, batch * nvalid);
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < nvalid; ++i)
                refs.col(b * nvalid + i) = x.values.col(b * n + cfg.memory + i);
        ForwardCache cache;
        forward(x, p, &refs, cache);
        CHECK((cache.out - cache.out_r).norm() < 1e-10);
    }
}

TEST_CASE("forward: softmax rows sum to one over active entries") {
    ModelConfig cfg = small_config();
    cfg.memory = 4;
    ModelParams p = ModelParams::init(cfg, 89);
    SequenceBatch x = random_batch(cfg, 2, 11, 97);
    const int nvalid = 11 - cfg.memory;
    Eigen::MatrixXd refs = Eigen::MatrixXd::Ones(cfg.input_dim, 2 * nvalid);
    ForwardCache cache;
    forward(x, p, &refs, cache);
    const int band = cfg.memory + 1;
    for (Eigen::Index c = 0; c < cache.attw.cols(); ++c)
        for (int h = 0; h < cfg.head_count; ++h) {
            CHECK(std::abs(cache.attw.col(c).segment(h * band, band).sum() - 1.0) < 1e-10);
            CHECK(std::abs(cache.attw_r.col(c).segment(h * band, band).sum() - 1.0) < 1e-10);
        }
}

TEST_CASE("gradients match central finite differences") {
    SUBCASE("concat-norm, sinusoidal, joint only") {
        gradient_check(small_config(Combine::ConcatNorm, PosEncoding::Sinusoidal), false);
    }
    SUBCASE("concat-norm, learned positions, with reference branch") {
        gradient_check(small_config(Combine::ConcatNorm, PosEncoding::Learned), true);
    }
    SUBCASE("plain residual, with reference branch") {
        gradient_check(small_config(Combine::Residual, PosEncoding::Sinusoidal), true);
    }
    SUBCASE("relu and tanh activations") {
        ModelConfig cfg = small_config();
        cfg.activation = Activation::Tanh;
        gradient_check(cfg, true);
    }
}

TEST_CASE("grad helper: constant and linear objectives") {
    ModelConfig cfg = small_config();
    ModelParams p = ModelParams::zeros(cfg);
    SequenceBatch x = random_batch(cfg, 2, 6, 101);

    // Constant objective: zero gradient everywhere.
    ModelParams g0 = grad(x, p, [](const Eigen::MatrixXd&, Eigen::MatrixXd&) { return 5.0; });
    g0.for_each_block([](const std::string&, const Eigen::MatrixXd& m) {
        CHECK(m.norm() == 0.0);
    });

    // Objective 3 * mean(out) with all-zero weights: out = w_head z + b_head
    // is linear in the head blocks, so each gradient equals its coefficient
    // (3 for the bias, 3 * mean of z for the weights) and nothing propagates
    // past the zero head weights.
    ForwardCache cache;
    forward(x, p, nullptr, cache);
    const Eigen::MatrixXd z_coeff = 3.0 * cache.z.rowwise().mean();
    ModelParams g1 = grad(x, p, [](const Eigen::MatrixXd& out, Eigen::MatrixXd& d) {
        d.setConstant(3.0 / out.cols());
        return 3.0 * out.mean();
    });
    g1.for_each_block([&z_coeff](const std::string& name, const Eigen::MatrixXd& m) {
        if (name == "b_head")
            CHECK(std::abs(m(0, 0) - 3.0) < 1e-12);
        else if (name == "w_head")
            CHECK((m - z_coeff.transpose()).norm() < 1e-12);
        else
            CHECK(m.norm() < 1e-12);
    });
}

TEST_CASE("attention work scales linearly in the window") {
    const int n = 64, batch = 2;
    std::uint64_t prev = 0;
    for (int l : {4, 8, 16}) {
        ModelConfig cfg = small_config();
        cfg.memory = l;
        ModelParams p = ModelParams::init(cfg, 107);
        SequenceBatch x = random_batch(cfg, batch, n, 109);
        ForwardCache cache;
        forward(x, p, nullptr, cache);
        // Exactly B * h * (N - l) * (l + 1) key visits: linear in l.
        const std::uint64_t expected = static_cast<std::uint64_t>(batch) * cfg.head_count *
                                       (n - l) * (l + 1);
        CHECK(cache.key_visits == expected);
        if (prev > 0) CHECK(cache.key_visits < 3 * prev);
        prev = cache.key_visits;
    }
}

TEST_CASE("numeric failures carry a position index") {
    ModelConfig cfg = small_config();
    ModelParams p = ModelParams::init(cfg, 113);
    SequenceBatch x = random_batch(cfg, 1, 6, 127);
    x.values(0, 3) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(embed(x, p), std::invalid_argument);

    // Huge weights overflow the feed-forward into non-finite outputs.
    ModelParams big = ModelParams::init(cfg, 131);
    big.w_head.setConstant(1e308);
    big.w_ff2.setConstant(1e308);
    SequenceBatch ok = random_batch(cfg, 1, 6, 137);
    ForwardCache cache;
    CHECK_THROWS_WITH_AS(forward(ok, big, nullptr, cache),
                         doctest::Contains("position"), std::runtime_error);
}

TEST_CASE("checkpoint round-trip preserves every block") {
    ModelConfig cfg = small_config(Combine::ConcatNorm, PosEncoding::Learned);
    ModelParams p = ModelParams::init(cfg, 139);
    const auto path = std::filesystem::temp_directory_path() / "treet_ckpt_test.json";
    save_checkpoint(path, p, 42);
    std::uint64_t seed = 0;
    ModelParams q = load_checkpoint(path, &seed);
    CHECK(seed == 42);
    std::vector<const Eigen::MatrixXd*> pb, qb;
    p.for_each_block([&pb](const std::string&, const Eigen::MatrixXd& m) { pb.push_back(&m); });
    q.for_each_block([&qb](const std::string&, const Eigen::MatrixXd& m) { qb.push_back(&m); });
    REQUIRE(pb.size() == qb.size());
    for (std::size_t i = 0; i < pb.size(); ++i) CHECK((*pb[i] - *qb[i]).norm() == 0.0);
    std::filesystem::remove(path);
}

TEST_CASE("adam ascends a simple quadratic objective") {
    ModelConfig cfg = small_config();
    ModelParams p = ModelParams::zeros(cfg);
    Adam opt(cfg, AdamConfig{0.05});
    SequenceBatch x = random_batch(cfg, 2, 6, 149);
    // Maximize -(mean(out) - 2)^2: optimum has mean output 2 (= b_head).
    double value = 0.0;
    for (int it = 0; it < 400; ++it) {
        ModelParams g = grad(x, p, [&](const Eigen::MatrixXd& out, Eigen::MatrixXd& d) {
            const double m = out.mean();
            d.setConstant(-2.0 * (m - 2.0) / out.cols());
            value = -(m - 2.0) * (m - 2.0);
            return value;
        });
        opt.step(p, g);
    }
    CHECK(value > -1e-4);
}
