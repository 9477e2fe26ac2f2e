#include "treet/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace treet {

void zscore_rows(Eigen::MatrixXd& values) {
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        const double mean = values.row(r).mean();
        const double sd =
            std::sqrt((values.row(r).array() - mean).square().sum() /
                      std::max<Eigen::Index>(1, values.cols() - 1));
        if (sd <= 0.0) throw std::invalid_argument("cannot z-score a constant column");
        values.row(r) = (values.row(r).array() - mean) / sd;
    }
}

namespace {

// Asymmetric-history windows: length max(k,l)+1 with one output at the last
// position. Y rows are zeroed at lags beyond k, X rows at lags beyond l.
WindowBatch make_masked_windows(const TimeSeriesPair& data, int count, int k, int l,
                                bool include_x, const ReferenceSpec& ref, Rng& rng) {
    const int w = include_x ? std::max(k, l) : k;
    const int length = w + 1;
    const Eigen::Index n = data.length();
    if (n < length) throw std::invalid_argument("stream shorter than one window");
    const Eigen::Index dy = data.y.rows();
    const Eigen::Index dx = include_x ? data.x.rows() : 0;

    WindowBatch wb;
    wb.seq.batch = count;
    wb.seq.length = length;
    wb.seq.values.setZero(dy + dx, static_cast<Eigen::Index>(count) * length);
    for (int b = 0; b < count; ++b) {
        const Eigen::Index start =
            static_cast<Eigen::Index>(rng.integer(static_cast<std::uint64_t>(n - length + 1)));
        auto cols = wb.seq.values.middleCols(static_cast<Eigen::Index>(b) * length, length);
        for (int j = 0; j < length; ++j) {
            const int lag = w - j;
            if (lag <= k) cols.col(j).head(dy) = data.y.col(start + j);
            if (dx > 0 && lag <= l) cols.col(j).tail(dx) = data.x.col(start + j);
        }
    }
    const Eigen::MatrixXd refs = sample_reference(data.y, ref, count, rng);
    wb.ref_inputs.resize(dy + dx, count);
    for (int b = 0; b < count; ++b) {
        wb.ref_inputs.col(b).head(dy) = refs.col(b);
        if (dx > 0)
            wb.ref_inputs.col(b).tail(dx) =
                wb.seq.values.col(static_cast<Eigen::Index>(b) * length + w).tail(dx);
    }
    return wb;
}

}  // namespace

double analyze_te_single(const TimeSeriesPair& data, int k, int l, const TrainConfig& cfg_in) {
    if (k < 1 || l < 0) throw std::invalid_argument("analyze needs k >= 1 and l >= 0");
    const int w = std::max(k, l);
    TrainConfig cfg = cfg_in;
    cfg.memory = w;
    cfg.window = w + 1;
    if (cfg.batches_per_epoch == 0) {
        cfg.batches_per_epoch = static_cast<int>(std::max<Eigen::Index>(
            1, data.length() / std::max(1, cfg.batch_size)));
    }
    cfg.validate();

    const ReferenceSpec ref = ReferenceSpec::bounding_box();
    PotentialTrainSpec spec;
    spec.arch_y = cfg.arch;
    spec.arch_y.input_dim = static_cast<int>(data.y.rows());
    spec.arch_y.output_dim = 1;
    spec.arch_y.memory = k;  // the Y-only network needs exactly k history
    if (spec.arch_y.max_len < k + 1) spec.arch_y.max_len = k + 1;
    spec.arch_xy = cfg.arch;
    spec.arch_xy.input_dim = static_cast<int>(data.y.rows() + data.x.rows());
    spec.arch_xy.output_dim = 1;
    spec.arch_xy.memory = w;
    if (spec.arch_xy.max_len < w + 1) spec.arch_xy.max_len = w + 1;
    spec.arch_y.validate();
    spec.arch_xy.validate();

    spec.build_y = [k, l, ref](const TimeSeriesPair& d, int count, Rng& rng) {
        return make_masked_windows(d, count, k, l, false, ref, rng);
    };
    spec.build_xy = [k, l, ref](const TimeSeriesPair& d, int count, Rng& rng) {
        return make_masked_windows(d, count, k, l, true, ref, rng);
    };

    const FixedSource source(data);
    const TrainResult tr = train_potentials(source, cfg, spec);
    if (tr.diverged) throw std::runtime_error("analyze training diverged: " + tr.message);
    const long n_eval = cfg.eval_samples > 0 ? cfg.eval_samples : cfg.samples_per_epoch;
    const TreetEstimate est = evaluate_potentials(
        tr.params_y, tr.params_xy, source, std::min<long>(n_eval, data.length() * 4L),
        substream(cfg.seed, 99), cfg, spec, 1);
    return est.te_value;
}

std::vector<AnalyzeRow> analyze_te(const TimeSeriesPair& data, const AnalyzeConfig& cfg) {
    TimeSeriesPair z = data;
    zscore_rows(z.x);
    zscore_rows(z.y);
    TimeSeriesPair swapped;
    swapped.x = z.y;
    swapped.y = z.x;
    swapped.seed = z.seed;

    std::vector<AnalyzeRow> rows;
    for (int k : cfg.k_list) {
        AnalyzeRow row;
        row.k = k;
        row.te_xy = analyze_te_single(z, k, cfg.l, cfg.train);
        row.te_yx = cfg.both_directions
                        ? analyze_te_single(swapped, k, cfg.l, cfg.train)
                        : std::numeric_limits<double>::quiet_NaN();
        rows.push_back(row);
    }
    return rows;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("spearman needs two equal-length series");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&v](std::size_t i, std::size_t j) {
            return v[i] < v[j];
        });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (i + j) + 1.0;
            for (std::size_t m = i; m <= j; ++m) r[idx[m]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return num / std::sqrt(va * vb);
}

}  // namespace treet
