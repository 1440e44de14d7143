#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dzsi/datasets.hpp"
#include "dzsi/parallel.hpp"
#include "dzsi/tensor.hpp"

namespace dzsi {

// Uniform-bin histogram over [0, 1]; bin index floor(B * p) clamped to B-1.
struct AttributeHistogram {
    int bins = 20;
    std::vector<int64_t> counts;
    int64_t total = 0;

    explicit AttributeHistogram(int B = 20) : bins(B), counts(static_cast<size_t>(B), 0) {
        require(B >= 1, "histogram needs at least one bin");
    }

    void add(double p) {
        int b = static_cast<int>(std::floor(p * bins));
        b = std::clamp(b, 0, bins - 1);
        counts[static_cast<size_t>(b)] += 1;
        total += 1;
    }

    double mass(int b) const {
        return total == 0 ? 0.0 : static_cast<double>(counts[static_cast<size_t>(b)]) / total;
    }
};

inline AttributeHistogram attribute_histogram(const std::vector<double>& probs, int bins = 20) {
    require(!probs.empty(), "attribute histogram over an empty sample set");
    AttributeHistogram h(bins);
    for (double p : probs) h.add(p);
    return h;
}

// MSE = sum_b (p_b - 1/B)^2
inline double mse_to_uniform(const AttributeHistogram& h) {
    require(h.total > 0, "metrics need a non-empty histogram");
    const double u = 1.0 / h.bins;
    double acc = 0.0;
    for (int b = 0; b < h.bins; ++b) {
        const double d = h.mass(b) - u;
        acc += d * d;
    }
    return acc;
}

// Forward KLD to uniform, natural log: sum_{p_b > 0} p_b ln(p_b B).
inline double kld_to_uniform(const AttributeHistogram& h) {
    require(h.total > 0, "metrics need a non-empty histogram");
    double acc = 0.0;
    for (int b = 0; b < h.bins; ++b) {
        const double p = h.mass(b);
        if (p > 0.0) acc += p * std::log(p * h.bins);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Circle localization: threshold + 4-connected components. Equivalent to
// edge-based detection for binary synthetic disks, and dependency-free.
// ---------------------------------------------------------------------------

struct Component {
    double cx = 0.0, cy = 0.0;  // pixel centroid (col, row)
    int area = 0;
};

struct DetectionResult {
    int width = 0, height = 0;
    std::vector<Component> components;

    // centroid in [0,1]^2 image coordinates
    std::pair<double, double> normalized(size_t i) const {
        const auto& c = components[i];
        return {c.cx / (width - 1), c.cy / (height - 1)};
    }
};

inline DetectionResult detect_circles(const Tensor<float>& img, float threshold = 0.0f,
                                      int min_area = 3) {
    require(img.shape.size() == 3 && img.shape[2] == 1, "detector expects a grayscale image");
    const int H = img.shape[0], W = img.shape[1];
    DetectionResult out;
    out.width = W;
    out.height = H;
    std::vector<int> label(static_cast<size_t>(H) * W, -1);
    std::vector<int> stack;
    for (int start = 0; start < H * W; ++start) {
        if (label[static_cast<size_t>(start)] != -1 || img[start] <= threshold) continue;
        const int id = static_cast<int>(out.components.size());
        Component comp;
        double sx = 0.0, sy = 0.0;
        stack.push_back(start);
        label[static_cast<size_t>(start)] = id;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int y = p / W, x = p % W;
            comp.area += 1;
            sx += x;
            sy += y;
            const int ns[4] = {p - W, p + W, p - 1, p + 1};
            const bool ok[4] = {y > 0, y < H - 1, x > 0, x < W - 1};
            for (int k = 0; k < 4; ++k) {
                if (!ok[k]) continue;
                const int q = ns[k];
                if (label[static_cast<size_t>(q)] == -1 && img[q] > threshold) {
                    label[static_cast<size_t>(q)] = id;
                    stack.push_back(q);
                }
            }
        }
        if (comp.area >= min_area) {
            comp.cx = sx / comp.area;
            comp.cy = sy / comp.area;
            out.components.push_back(comp);
        }
    }
    return out;
}

// Fraction of images with exactly one detected component whose latent
// x-coordinate falls in the mid region, plus the fraction with a component
// count other than one. Centroids are mapped back to latent coordinates
// through the generator's margin convention.
struct InterpolationAccuracy {
    double accuracy = 0.0;
    double anomalous_fraction = 0.0;
    int64_t n = 0;
};

inline InterpolationAccuracy interpolation_accuracy(const std::vector<Tensor<float>>& samples,
                                                    double mid_lo = 0.2, double mid_hi = 0.8,
                                                    double margin = 2.0, float threshold = 0.0f) {
    InterpolationAccuracy out;
    out.n = static_cast<int64_t>(samples.size());
    if (samples.empty()) return out;
    int64_t hits = 0, anomalies = 0;
    for (const auto& img : samples) {
        auto det = detect_circles(img, threshold);
        if (det.components.size() != 1) {
            anomalies += 1;
            continue;
        }
        const double z = z_from_center(det.components[0].cx, det.width, margin);
        if (z >= mid_lo && z <= mid_hi) hits += 1;
    }
    out.accuracy = static_cast<double>(hits) / static_cast<double>(out.n);
    out.anomalous_fraction = static_cast<double>(anomalies) / static_cast<double>(out.n);
    return out;
}

// ---------------------------------------------------------------------------
// Classifier heatmap over circle positions and its mid-region smoothness.
// ---------------------------------------------------------------------------

// heat[row][col] = p(category | circle at latent (z_x = col/(G-1), z_y)).
template <typename ProbFn>
inline std::vector<std::vector<double>> classifier_heatmap(ProbFn&& prob_of_image, int grid,
                                                           int size = 32, double radius = 2.0) {
    require(grid >= 2, "heatmap needs at least a 2x2 grid");
    std::vector<std::vector<double>> heat(static_cast<size_t>(grid),
                                          std::vector<double>(static_cast<size_t>(grid), 0.0));
    parallel_for(grid, [&](int64_t lo, int64_t hi) {
        for (int64_t gy = lo; gy < hi; ++gy) {
            for (int gx = 0; gx < grid; ++gx) {
                const double zx = static_cast<double>(gx) / (grid - 1);
                const double zy = static_cast<double>(gy) / (grid - 1);
                auto img = gen_circle_image(center_from_z(zx, size, radius),
                                            center_from_z(zy, size, radius), radius, size);
                heat[static_cast<size_t>(gy)][static_cast<size_t>(gx)] = prob_of_image(img);
            }
        }
    });
    return heat;
}

// Mean |delta p| between horizontally adjacent cells whose latent
// x-coordinates both lie in the mid region.
inline double heatmap_mid_smoothness(const std::vector<std::vector<double>>& heat,
                                     double mid_lo = 0.2, double mid_hi = 0.8) {
    const int G = static_cast<int>(heat.size());
    require(G >= 2, "heatmap too small");
    double acc = 0.0;
    int64_t n = 0;
    for (int y = 0; y < G; ++y) {
        for (int x = 0; x + 1 < G; ++x) {
            const double za = static_cast<double>(x) / (G - 1);
            const double zb = static_cast<double>(x + 1) / (G - 1);
            if (za < mid_lo || zb > mid_hi) continue;
            acc += std::abs(heat[static_cast<size_t>(y)][static_cast<size_t>(x + 1)] -
                            heat[static_cast<size_t>(y)][static_cast<size_t>(x)]);
            n += 1;
        }
    }
    require(n > 0, "mid region contains no adjacent cell pairs");
    return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Two-attribute histogram and the pixel-space memorization check.
// ---------------------------------------------------------------------------

struct Histogram2d {
    int bins = 20;
    std::vector<int64_t> counts;  // row-major bins x bins
    int64_t total = 0;

    explicit Histogram2d(int B = 20) : bins(B), counts(static_cast<size_t>(B) * B, 0) {}

    int64_t& at(int by, int bx) { return counts[static_cast<size_t>(by) * bins + bx]; }
    int64_t at(int by, int bx) const { return counts[static_cast<size_t>(by) * bins + bx]; }
};

inline Histogram2d histogram_2d(const std::vector<double>& p1, const std::vector<double>& p2,
                                int bins = 20) {
    require(p1.size() == p2.size() && !p1.empty(), "paired probability lists required");
    Histogram2d h(bins);
    for (size_t i = 0; i < p1.size(); ++i) {
        int bx = std::clamp(static_cast<int>(std::floor(p1[i] * bins)), 0, bins - 1);
        int by = std::clamp(static_cast<int>(std::floor(p2[i] * bins)), 0, bins - 1);
        h.at(by, bx) += 1;
        h.total += 1;
    }
    return h;
}

struct NeighborMatch {
    size_t train_index = 0;
    double distance = 0.0;  // pixel L2
};

// Per generated sample, the top_k training samples minimizing pixel L2.
inline std::vector<std::vector<NeighborMatch>> nearest_neighbor_check(
    const std::vector<Tensor<float>>& generated, const LabeledSet& train, int top_k = 1) {
    require(!generated.empty() && train.size() > 0, "need generated and training samples");
    require(top_k >= 1, "top_k must be positive");
    std::vector<std::vector<NeighborMatch>> out(generated.size());
    parallel_for(static_cast<int64_t>(generated.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t g = lo; g < hi; ++g) {
            std::vector<NeighborMatch> all(train.size());
            for (size_t i = 0; i < train.size(); ++i) {
                double d2 = 0.0;
                const auto& a = generated[static_cast<size_t>(g)];
                const auto& b = train.x[i];
                require(a.same_shape(b), "nearest neighbor shape mismatch");
                for (int64_t j = 0; j < a.size(); ++j) {
                    const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
                    d2 += d * d;
                }
                all[i] = {i, std::sqrt(d2)};
            }
            const size_t k = std::min(static_cast<size_t>(top_k), all.size());
            std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                              [](const NeighborMatch& x, const NeighborMatch& y) {
                                  return x.distance < y.distance ||
                                         (x.distance == y.distance && x.train_index < y.train_index);
                              });
            all.resize(k);
            out[static_cast<size_t>(g)] = std::move(all);
        }
    });
    return out;
}

}  // namespace dzsi
