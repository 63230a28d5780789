#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rgbt/common.hpp"
#include "rgbt/image.hpp"
#include "rgbt/rng.hpp"

namespace rgbt {

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const Image& a, const Image& b, double max_val) {
    if (a.c != b.c || a.h != b.h || a.w != b.w) {
        throw ShapeError("psnr: image shapes differ: " + std::to_string(a.c) + "x" +
                         std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                         std::to_string(b.c) + "x" + std::to_string(b.h) + "x" +
                         std::to_string(b.w));
    }
    if (!(max_val > 0)) throw ConfigError("psnr: max_val must be positive");
    double mse = 0;
    for (i64 i = 0; i < a.numel(); ++i) {
        const double d = double(a.v[i]) - double(b.v[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse < 1e-12) return kPsnrCap;
    return 10.0 * std::log10(max_val * max_val / mse);
}

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window (sigma 1.5), valid positions only,
// multi-channel inputs averaged per channel.
// ---------------------------------------------------------------------------

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double L = 1.0;  // dynamic range of the inputs
};

namespace detail {

inline std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(n);
    const double c = (n - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        w[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

// separable weighted local filter, valid region, double precision
inline std::vector<double> window_filter(const std::vector<double>& img, int h, int w,
                                         const std::vector<double>& win) {
    const int n = static_cast<int>(win.size());
    const int oh = h - n + 1, ow = w - n + 1;
    std::vector<double> tmp(i64(h) * ow, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int k = 0; k < n; ++k) acc += win[k] * img[i64(y) * w + x + k];
            tmp[i64(y) * ow + x] = acc;
        }
    std::vector<double> out(i64(oh) * ow, 0.0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int k = 0; k < n; ++k) acc += win[k] * tmp[i64(y + k) * ow + x];
            out[i64(y) * ow + x] = acc;
        }
    return out;
}

}  // namespace detail

inline double ssim(const Image& a_in, const Image& b_in, const SsimParams& p = {}) {
    // mathematically symmetric; canonical argument order keeps the float
    // result bit-identical both ways under FMA contraction
    const bool swap_args = std::lexicographical_compare(b_in.v.begin(), b_in.v.end(),
                                                        a_in.v.begin(), a_in.v.end());
    const Image& a = swap_args ? b_in : a_in;
    const Image& b = swap_args ? a_in : b_in;
    if (a.c != b.c || a.h != b.h || a.w != b.w) {
        throw ShapeError("ssim: image shapes differ");
    }
    if (a.h < p.window || a.w < p.window) {
        throw ShapeError("ssim: image " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                         " smaller than the " + std::to_string(p.window) + "-pixel window");
    }
    const double c1 = (p.k1 * p.L) * (p.k1 * p.L);
    const double c2 = (p.k2 * p.L) * (p.k2 * p.L);
    const auto win = detail::gaussian_window(p.window, p.sigma);
    const i64 plane = i64(a.h) * a.w;

    double total = 0;
    for (int ch = 0; ch < a.c; ++ch) {
        std::vector<double> xa(plane), xb(plane), xaa(plane), xbb(plane), xab(plane);
        for (i64 i = 0; i < plane; ++i) {
            const double va = a.v[ch * plane + i];
            const double vb = b.v[ch * plane + i];
            xa[i] = va;
            xb[i] = vb;
            xaa[i] = va * va;
            xbb[i] = vb * vb;
            xab[i] = va * vb;
        }
        auto mu_a = detail::window_filter(xa, a.h, a.w, win);
        auto mu_b = detail::window_filter(xb, a.h, a.w, win);
        auto raa = detail::window_filter(xaa, a.h, a.w, win);
        auto rbb = detail::window_filter(xbb, a.h, a.w, win);
        auto rab = detail::window_filter(xab, a.h, a.w, win);
        double acc = 0;
        for (size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = raa[i] - ma * ma;
            const double vb = rbb[i] - mb * mb;
            const double cov = rab[i] - ma * mb;
            acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / double(mu_a.size());
    }
    return total / a.c;
}

// ---------------------------------------------------------------------------
// Feature statistics and the Frechet distance
// ---------------------------------------------------------------------------

using FeatureExtractor = std::function<std::vector<double>(const Image&)>;

struct FeatureStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd cov;
    i64 n = 0;
};

inline FeatureStats feature_stats(const std::vector<Image>& images,
                                  const FeatureExtractor& extractor) {
    if (images.size() < 2) {
        throw DataError("feature_stats needs at least 2 images, got " +
                        std::to_string(images.size()));
    }
    std::vector<Eigen::VectorXd> feats;
    feats.reserve(images.size());
    for (const auto& img : images) {
        auto f = extractor(img);
        feats.emplace_back(Eigen::Map<Eigen::VectorXd>(f.data(), f.size()));
        if (feats.back().size() != feats.front().size()) {
            throw DataError("extractor returned inconsistent feature dims");
        }
    }
    const i64 n = static_cast<i64>(feats.size());
    const i64 d = feats.front().size();
    FeatureStats s;
    s.n = n;
    s.mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : feats) s.mu += f;
    s.mu /= double(n);
    s.cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : feats) {
        Eigen::VectorXd c = f - s.mu;
        s.cov += c * c.transpose();
    }
    s.cov /= double(n - 1);  // unbiased
    return s;
}

// ||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}), matrix root by
// eigendecomposition of the symmetrized product.
inline double frechet_distance(const FeatureStats& s1, const FeatureStats& s2) {
    if (s1.mu.size() != s2.mu.size()) {
        throw ShapeError("frechet_distance: dims differ: " + std::to_string(s1.mu.size()) +
                         " vs " + std::to_string(s2.mu.size()));
    }
    auto check_psd = [](const Eigen::MatrixXd& c, const char* which) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (c + c.transpose()));
        const double floor = -1e-6 * std::max(1.0, std::abs(es.eigenvalues().maxCoeff()));
        if (es.eigenvalues().minCoeff() < floor) {
            throw NumericError(std::string("frechet_distance: covariance ") + which +
                               " is not PSD (min eigenvalue " +
                               std::to_string(es.eigenvalues().minCoeff()) + ")");
        }
    };
    check_psd(s1.cov, "1");
    check_psd(s2.cov, "2");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(0.5 * (s1.cov + s1.cov.transpose()));
    Eigen::VectorXd lam = es1.eigenvalues().cwiseMax(0.0);
    Eigen::MatrixXd sqrt1 =
        es1.eigenvectors() * lam.cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();

    Eigen::MatrixXd prod = sqrt1 * s2.cov * sqrt1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esp(0.5 * (prod + prod.transpose()));
    const double pmax = std::abs(esp.eigenvalues().maxCoeff());
    double tr_root = 0;
    for (i64 i = 0; i < esp.eigenvalues().size(); ++i) {
        const double ev = esp.eigenvalues()[i];
        if (ev < -1e-6 * std::max(1.0, pmax)) {
            throw NumericError("frechet_distance: product eigenvalue " + std::to_string(ev) +
                               " below tolerance");
        }
        tr_root += std::sqrt(std::max(0.0, ev));
    }
    const double mean_term = (s1.mu - s2.mu).squaredNorm();
    double d2 = mean_term + s1.cov.trace() + s2.cov.trace() - 2.0 * tr_root;
    if (d2 < 0) {
        if (d2 < -1e-6) {
            throw NumericError("frechet_distance: negative result " + std::to_string(d2));
        }
        d2 = 0;
    }
    return d2;
}

// Deterministic training-free feature extractor: fixed random projection of
// the pixels followed by tanh. Distances are only comparable within one
// extractor seed/dim.
class RandomProjectionExtractor {
  public:
    explicit RandomProjectionExtractor(std::uint64_t seed, int dim = 48)
        : seed_(seed), dim_(dim) {}

    std::vector<double> operator()(const Image& img) const {
        const i64 p = img.numel();
        if (weights_.empty() || input_dim_ != p) build(p);
        std::vector<double> out(dim_);
        const double scale = 1.0 / std::sqrt(double(p));
        for (int d = 0; d < dim_; ++d) {
            double acc = bias_[d];
            const double* w = weights_.data() + i64(d) * p;
            for (i64 i = 0; i < p; ++i) acc += w[i] * img.v[i];
            out[d] = std::tanh(acc * scale);
        }
        return out;
    }

    std::string describe() const {
        return "random_projection(seed=" + std::to_string(seed_) +
               ", dim=" + std::to_string(dim_) + ")";
    }

  private:
    void build(i64 input_dim) const {
        Rng rng = Rng(seed_).fork(0x46494458);
        weights_.resize(i64(dim_) * input_dim);
        bias_.resize(dim_);
        for (auto& w : weights_) w = rng.normal();
        for (auto& b : bias_) b = rng.normal() * 0.1;
        input_dim_ = input_dim;
    }

    std::uint64_t seed_;
    int dim_;
    mutable std::vector<double> weights_;
    mutable std::vector<double> bias_;
    mutable i64 input_dim_ = -1;
};

// Per-image features stored as JSON ({"features": [[...], ...]}), for
// plugging an externally computed embedding into the Frechet metric.
inline std::vector<std::vector<double>> load_feature_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open feature file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad feature file " + path + ": " + e.what());
    }
    std::vector<std::vector<double>> out;
    for (const auto& row : j.at("features")) out.push_back(row.get<std::vector<double>>());
    return out;
}

inline FeatureStats feature_stats_from_vectors(const std::vector<std::vector<double>>& feats) {
    if (feats.size() < 2) throw DataError("feature_stats needs at least 2 feature vectors");
    std::vector<Image> dummy;
    // reuse the image-based path by wrapping each vector
    FeatureStats s;
    const i64 n = static_cast<i64>(feats.size());
    const i64 d = static_cast<i64>(feats.front().size());
    s.n = n;
    s.mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : feats) {
        if (static_cast<i64>(f.size()) != d) throw DataError("ragged feature vectors");
        s.mu += Eigen::Map<const Eigen::VectorXd>(f.data(), d);
    }
    s.mu /= double(n);
    s.cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : feats) {
        Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(f.data(), d) - s.mu;
        s.cov += c * c.transpose();
    }
    s.cov /= double(n - 1);
    return s;
}

// ---------------------------------------------------------------------------
// Intensity spread (pooled pixel statistics of a set)
// ---------------------------------------------------------------------------

struct SpreadStats {
    double std_dev = 0;
    double iqr = 0;
    std::vector<i64> histogram;  // 256 bins over [-1, 1]

    nlohmann::json to_json() const {
        return {{"std_dev", std_dev}, {"iqr", iqr}, {"histogram", histogram}};
    }
};

inline SpreadStats intensity_spread(const std::vector<Image>& images) {
    if (images.empty()) throw DataError("intensity_spread of an empty set");
    SpreadStats s;
    s.histogram.assign(256, 0);
    std::vector<float> pooled;
    i64 total = 0;
    for (const auto& img : images) total += img.numel();
    pooled.reserve(total);
    double s1 = 0, s2 = 0;
    for (const auto& img : images) {
        for (float v : img.v) {
            pooled.push_back(v);
            s1 += v;
            s2 += double(v) * v;
            int bin = static_cast<int>((double(v) + 1.0) / 2.0 * 256.0);
            bin = std::min(255, std::max(0, bin));
            ++s.histogram[bin];
        }
    }
    const double mean = s1 / total;
    s.std_dev = std::sqrt(std::max(0.0, s2 / total - mean * mean));
    auto quantile = [&](double q) {
        const i64 k = std::min<i64>(total - 1, static_cast<i64>(q * total));
        std::nth_element(pooled.begin(), pooled.begin() + k, pooled.end());
        return double(pooled[k]);
    };
    const double q75 = quantile(0.75);
    const double q25 = quantile(0.25);
    s.iqr = q75 - q25;
    return s;
}

// ---------------------------------------------------------------------------
// Aggregated evaluation report
// ---------------------------------------------------------------------------

struct PerImageRecord {
    std::string id;
    double psnr = 0, ssim = 0;
};

struct MetricsReport {
    double psnr_mean = 0, ssim_mean = 0, fid = 0;
    SpreadStats gen_spread, ref_spread;
    std::vector<PerImageRecord> per_image;
    std::string fid_extractor;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["psnr_mean"] = psnr_mean;
        j["ssim_mean"] = ssim_mean;
        j["fid"] = fid;
        j["fid_extractor"] = fid_extractor;
        j["fid_note"] =
            "Frechet distances are comparable only across runs using the same extractor.";
        j["generated_spread"] = gen_spread.to_json();
        j["reference_spread"] = ref_spread.to_json();
        auto& arr = j["per_image"] = nlohmann::json::array();
        for (const auto& r : per_image) {
            arr.push_back({{"id", r.id}, {"psnr", r.psnr}, {"ssim", r.ssim}});
        }
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(4);
        os << "PSNR " << psnr_mean << " dB | SSIM " << ssim_mean << " | FID " << fid << "\n";
        os << "FID extractor: " << fid_extractor
           << " (distances comparable only within this extractor)\n";
        os << "intensity spread (generated): std " << gen_spread.std_dev << ", iqr "
           << gen_spread.iqr << "\n";
        os << "intensity spread (reference): std " << ref_spread.std_dev << ", iqr "
           << ref_spread.iqr << "\n";
        return os.str();
    }
};

}  // namespace rgbt
