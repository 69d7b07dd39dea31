#pragma once
//
// Volume similarity metrics on [0, 1]-normalized data: MAE, MSE, PSNR (peak 1)
// and a fully 3D SSIM over uniform sliding windows.
//

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "axon/voxcore.hpp"

namespace axon {

/// Pairwise (cascade) summation; reduction tree depends only on the length.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

namespace detail {

inline void check_metric_pair(const Volume& a, const Volume& b) {
    if (a.dims() != b.dims()) throw ShapeError("metric inputs must have equal dims");
    if (a.domain() != Domain::Normalized01 || b.domain() != Domain::Normalized01)
        throw DomainError("metrics require ZERO_ONE-normalized volumes");
}

} // namespace detail

inline double mae(const Volume& a, const Volume& b) {
    detail::check_metric_pair(a, b);
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(a[i] - b[i]);
    return pairwise_sum(d) / double(d.size());
}

inline double mse(const Volume& a, const Volume& b) {
    detail::check_metric_pair(a, b);
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (a[i] - b[i]) * (a[i] - b[i]);
    return pairwise_sum(d) / double(d.size());
}

/// PSNR for peak value 1. Returns +inf when the inputs are identical.
inline double psnr_from_mse(double m) {
    if (m <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

inline double psnr(const Volume& a, const Volume& b) { return psnr_from_mse(mse(a, b)); }

struct SsimParams {
    std::size_t window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
    double L = 1.0;
};

namespace detail {

// Sliding-window sums of size w along one axis (valid region only).
inline std::vector<double> box_axis(const std::vector<double>& in, std::array<std::size_t, 3> n,
                                    int axis, std::size_t w) {
    std::array<std::size_t, 3> out_n = n;
    out_n[std::size_t(axis)] = n[std::size_t(axis)] - w + 1;
    std::vector<double> out(out_n[0] * out_n[1] * out_n[2]);
    const std::size_t stride_in[3] = {1, n[0], n[0] * n[1]};
    const std::size_t stride_out[3] = {1, out_n[0], out_n[0] * out_n[1]};
    const auto a = std::size_t(axis);
    for (std::size_t z = 0; z < out_n[2]; ++z)
        for (std::size_t y = 0; y < out_n[1]; ++y)
            for (std::size_t x = 0; x < out_n[0]; ++x) {
                const std::size_t base = x * stride_in[0] + y * stride_in[1] + z * stride_in[2];
                double s = 0.0;
                for (std::size_t k = 0; k < w; ++k) s += in[base + k * stride_in[a]];
                out[x * stride_out[0] + y * stride_out[1] + z * stride_out[2]] = s;
            }
    return out;
}

inline std::vector<double> box3(std::vector<double> v, std::array<std::size_t, 3> n, std::size_t w) {
    for (int axis = 0; axis < 3; ++axis) {
        v = box_axis(v, n, axis, w);
        n[std::size_t(axis)] -= w - 1;
    }
    return v;
}

} // namespace detail

/// Mean SSIM over every valid w^3 window (stride 1, uniform weights,
/// population statistics inside each window).
inline double ssim3d(const Volume& a, const Volume& b, const SsimParams& p = {}) {
    detail::check_metric_pair(a, b);
    const auto& d = a.dims();
    if (p.window == 0 || d.x < p.window || d.y < p.window || d.z < p.window)
        throw ShapeError("volume smaller than the SSIM window");
    const std::array<std::size_t, 3> n{d.x, d.y, d.z};
    std::vector<double> va(a.data().begin(), a.data().end()), vb(b.data().begin(), b.data().end());
    std::vector<double> aa(va.size()), bb(va.size()), ab(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) {
        aa[i] = va[i] * va[i];
        bb[i] = vb[i] * vb[i];
        ab[i] = va[i] * vb[i];
    }
    const auto sa = detail::box3(va, n, p.window), sb = detail::box3(vb, n, p.window);
    const auto saa = detail::box3(aa, n, p.window), sbb = detail::box3(bb, n, p.window);
    const auto sab = detail::box3(ab, n, p.window);
    const double inv = 1.0 / double(p.window * p.window * p.window);
    const double c1 = (p.k1 * p.L) * (p.k1 * p.L), c2 = (p.k2 * p.L) * (p.k2 * p.L);
    std::vector<double> s(sa.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double ma = sa[i] * inv, mb = sb[i] * inv;
        const double var_a = std::max(0.0, saa[i] * inv - ma * ma);
        const double var_b = std::max(0.0, sbb[i] * inv - mb * mb);
        const double cov = sab[i] * inv - ma * mb;
        s[i] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    return pairwise_sum(s) / double(s.size());
}

struct SampleMetrics {
    std::string id;
    double mae = 0, mse = 0, psnr = 0, ssim = 0;
};

struct MetricSummary {
    double mean = 0, std = 0;
};

struct MetricReport {
    std::vector<SampleMetrics> per_sample;
    MetricSummary mae, mse, psnr, ssim;
};

struct EvalPair {
    std::string id;
    const Volume* prediction = nullptr;
    const Volume* target = nullptr;
};

/// Mean and population standard deviation.
inline MetricSummary summarize(std::span<const double> v) {
    MetricSummary s;
    if (v.empty()) return s;
    s.mean = pairwise_sum(v) / double(v.size());
    if (!std::isfinite(s.mean)) {
        s.std = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - s.mean) * (v[i] - s.mean);
    s.std = std::sqrt(pairwise_sum(sq) / double(v.size()));
    return s;
}

inline MetricReport summarize_report(std::vector<SampleMetrics> samples) {
    MetricReport r;
    r.per_sample = std::move(samples);
    std::vector<double> m1, m2, m3, m4;
    for (const auto& s : r.per_sample) {
        m1.push_back(s.mae);
        m2.push_back(s.mse);
        m3.push_back(s.psnr);
        m4.push_back(s.ssim);
    }
    r.mae = summarize(m1);
    r.mse = summarize(m2);
    r.psnr = summarize(m3);
    r.ssim = summarize(m4);
    return r;
}

inline MetricReport evaluate_batch(const std::vector<EvalPair>& pairs, const SsimParams& p = {}) {
    if (pairs.empty()) throw DomainError("evaluate_batch needs at least one pair");
    std::vector<SampleMetrics> out;
    out.reserve(pairs.size());
    for (const auto& pr : pairs) {
        SampleMetrics s{pr.id};
        s.mae = mae(*pr.prediction, *pr.target);
        s.mse = mse(*pr.prediction, *pr.target);
        s.psnr = psnr_from_mse(s.mse);
        s.ssim = ssim3d(*pr.prediction, *pr.target, p);
        out.push_back(std::move(s));
    }
    return summarize_report(std::move(out));
}

// JSON-lines: one object per sample, then a summary object.
// Infinite PSNR is written as the string "inf".

namespace detail {

inline nlohmann::json metric_value(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    return v;
}

inline double metric_value(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j.get<double>();
}

} // namespace detail

inline std::string report_to_jsonl(const MetricReport& r) {
    std::ostringstream os;
    for (const auto& s : r.per_sample) {
        nlohmann::json j;
        j["id"] = s.id;
        j["mae"] = detail::metric_value(s.mae);
        j["mse"] = detail::metric_value(s.mse);
        j["psnr"] = detail::metric_value(s.psnr);
        j["ssim"] = detail::metric_value(s.ssim);
        os << j.dump() << '\n';
    }
    nlohmann::json sum;
    sum["summary"] = true;
    sum["n"] = r.per_sample.size();
    auto put = [&](const char* name, const MetricSummary& m) {
        sum[std::string(name) + "_mean"] = detail::metric_value(m.mean);
        sum[std::string(name) + "_std"] = detail::metric_value(m.std);
    };
    put("mae", r.mae);
    put("mse", r.mse);
    put("psnr", r.psnr);
    put("ssim", r.ssim);
    os << sum.dump() << '\n';
    return os.str();
}

inline MetricReport report_from_jsonl(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::vector<SampleMetrics> samples;
    bool have_summary = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(IoErrorKind::Format, std::string("bad report line: ") + e.what());
        }
        if (j.contains("summary")) {
            have_summary = true;
            continue;
        }
        samples.push_back({j.at("id").get<std::string>(), detail::metric_value(j.at("mae")),
                           detail::metric_value(j.at("mse")), detail::metric_value(j.at("psnr")),
                           detail::metric_value(j.at("ssim"))});
    }
    if (!have_summary) throw IoError(IoErrorKind::Truncated, "report has no summary line");
    return summarize_report(std::move(samples));
}

/// Maps a [-1, 1] volume to [0, 1] via (v + 1) / 2, clamped; the fixed metric-domain convention.
inline Volume to_unit_range(const Volume& v) {
    Volume out = v;
    for (auto& x : out.data()) x = std::clamp((x + 1.0) * 0.5, 0.0, 1.0);
    out.set_domain(Domain::Normalized01);
    return out;
}

} // namespace axon
