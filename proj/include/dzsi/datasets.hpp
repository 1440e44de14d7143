#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dzsi/models.hpp"
#include "dzsi/rng.hpp"
#include "dzsi/tensor.hpp"

namespace dzsi {

// Latent-factor geometry: per-factor training regions, the extreme margin
// delta, and the semi-order precision epsilon.
struct LatentSpec {
    int factors = 1;
    std::vector<std::array<double, 2>> regions = {{0.0, 0.2}, {0.8, 1.0}};
    double delta = 0.2;
    double epsilon = 0.1;

    void validate() const {
        require_config(factors >= 1, "need at least one latent factor");
        require_config(delta > 0.0 && delta < 0.5, "delta must be in (0, 0.5)");
        require_config(epsilon > 0.0 && epsilon < 0.5, "epsilon must be in (0, 0.5)");
        require_config(!regions.empty(), "training regions required");
        for (const auto& r : regions) {
            require_config(r[0] >= 0.0 && r[1] <= 1.0 && r[0] < r[1],
                           "training regions must be sub-intervals of [0, 1]");
            // mild region [0.5 - delta, 0.5 + delta] must be disjoint
            require_config(r[1] < 0.5 - delta || r[0] > 0.5 + delta,
                           "training regions must not touch the mild region");
        }
    }

    double draw(Rng& rng) const {
        double total = 0.0;
        for (const auto& r : regions) total += r[1] - r[0];
        double u = rng.uniform() * total;
        for (const auto& r : regions) {
            double len = r[1] - r[0];
            if (u < len) return r[0] + u;
            u -= len;
        }
        return regions.back()[1];
    }
};

enum class OrderResult { Precedes, Succeeds, Incomparable };

// Semi-order comparison on one latent factor: ordered only when the gap
// exceeds the precision epsilon.
inline OrderResult semi_order_compare(double z0, double z1, double epsilon) {
    require(z0 >= 0.0 && z0 <= 1.0 && z1 >= 0.0 && z1 <= 1.0, "latents must lie in [0, 1]");
    if (z0 < z1 && std::abs(z0 - z1) > epsilon) return OrderResult::Precedes;
    if (z1 < z0 && std::abs(z0 - z1) > epsilon) return OrderResult::Succeeds;
    return OrderResult::Incomparable;
}

inline void check_delta(double z, double delta) {
    require(z >= 0.0 && z <= 1.0, "latent must lie in [0, 1]");
    require_config(delta > 0.0 && delta < 0.25, "delta must be in (0, 0.25)");
}

inline bool is_extreme(double z, double delta) {
    check_delta(z, delta);
    return z <= delta || z >= 1.0 - delta;
}

inline bool is_mild(double z, double delta) {
    check_delta(z, delta);
    return z >= 0.5 - delta && z <= 0.5 + delta;
}

// Samples plus continuous latents z in [0,1]^L and the binarized labels
// z_tilde(l) = 1{z(l) > 0.5}. label() packs the bits (corner code for L = 2).
struct LabeledSet {
    Modality modality = Modality::Image;
    std::vector<int> shape;  // {H, W, C} or {D}
    std::vector<Tensor<float>> x;
    std::vector<std::vector<float>> z;
    std::string generator;
    uint64_t seed = 0;

    size_t size() const { return x.size(); }
    int factors() const { return z.empty() ? 0 : static_cast<int>(z[0].size()); }

    static int binary_label(float zv) { return zv > 0.5f ? 1 : 0; }

    int label(size_t i) const {
        int code = 0;
        for (float zv : z[i]) code = 2 * code + binary_label(zv);
        return code;
    }

    int label_count() const { return 1 << factors(); }

    void validate() const {
        require(x.size() == z.size(), "sample/latent count mismatch");
        for (const auto& t : x) require(t.shape == shape, "inconsistent sample shape");
    }

    // No-leakage audit: true when no sample is mild in any factor.
    bool leakage_free(double delta) const {
        for (const auto& zi : z)
            for (float zv : zi)
                if (is_mild(zv, delta)) return false;
        return true;
    }

    LabeledSet subset(const std::vector<size_t>& idx) const {
        LabeledSet out;
        out.modality = modality;
        out.shape = shape;
        out.generator = generator + "/subset";
        out.seed = seed;
        out.x.reserve(idx.size());
        out.z.reserve(idx.size());
        for (size_t i : idx) {
            out.x.push_back(x[i]);
            out.z.push_back(z[i]);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

// Black background (-1), white disk (+1), hard-thresholded rasterization:
// pixel (row i, col j) is white iff (i - cy)^2 + (j - cx)^2 <= r^2.
inline Tensor<float> gen_circle_image(double cx, double cy, double r, int size) {
    require(size >= 16, "image side must be at least 16");
    require(r >= 1.0, "radius must be at least 1 pixel");
    require(cx >= r && cx <= size - 1 - r && cy >= r && cy <= size - 1 - r,
            "disk must fit inside the frame");
    Tensor<float> img({size, size, 1});
    img.fill(-1.0f);
    const double r2 = r * r;
    const int ilo = static_cast<int>(std::floor(cy - r)), ihi = static_cast<int>(std::ceil(cy + r));
    const int jlo = static_cast<int>(std::floor(cx - r)), jhi = static_cast<int>(std::ceil(cx + r));
    for (int i = std::max(ilo, 0); i <= std::min(ihi, size - 1); ++i)
        for (int j = std::max(jlo, 0); j <= std::min(jhi, size - 1); ++j) {
            const double dy = i - cy, dx = j - cx;
            if (dy * dy + dx * dx <= r2) img[(static_cast<int64_t>(i) * size + j)] = 1.0f;
        }
    return img;
}

// Mapping between the latent coordinate z in [0, 1] and the pixel center so
// the full disk always fits: c = margin + z * (size - 1 - 2 * margin).
inline double center_from_z(double z, int size, double margin) {
    return margin + z * (size - 1 - 2.0 * margin);
}

inline double z_from_center(double c, int size, double margin) {
    return std::clamp((c - margin) / (size - 1 - 2.0 * margin), 0.0, 1.0);
}

struct CircleDatasetConfig {
    int size = 32;
    double radius = 2.0;
};

// Circle images whose normalized x-coordinate is the latent factor, drawn
// uniformly from the training regions; the y-coordinate is uniform over the
// valid range. Labels are z_tilde = 1{z > 0.5}.
inline LabeledSet sample_circle_set(int n, const LatentSpec& spec, const CircleDatasetConfig& cfg,
                                    uint64_t seed) {
    require(n >= 1, "need at least one sample");
    spec.validate();
    LabeledSet out;
    out.modality = Modality::Image;
    out.shape = {cfg.size, cfg.size, 1};
    out.generator = "circle-1d";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Rng r = rng.fork(static_cast<uint64_t>(i));
        double z = spec.draw(r);
        double cx = center_from_z(z, cfg.size, cfg.radius);
        double cy = center_from_z(r.uniform(), cfg.size, cfg.radius);
        out.x.push_back(gen_circle_image(cx, cy, cfg.radius, cfg.size));
        out.z.push_back({static_cast<float>(z)});
    }
    require(out.leakage_free(spec.delta), "generated training set leaks mild samples");
    return out;
}

// Contaminated variant for filter experiments: latents drawn uniformly over
// [0, 1], so mild samples are present by construction. Never used to train
// the diffusion model directly.
inline LabeledSet sample_circle_set_uniform(int n, const CircleDatasetConfig& cfg, uint64_t seed) {
    require(n >= 1, "need at least one sample");
    LabeledSet out;
    out.modality = Modality::Image;
    out.shape = {cfg.size, cfg.size, 1};
    out.generator = "circle-1d-uniform";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Rng r = rng.fork(static_cast<uint64_t>(i));
        double z = r.uniform();
        double cx = center_from_z(z, cfg.size, cfg.radius);
        double cy = center_from_z(r.uniform(), cfg.size, cfg.radius);
        out.x.push_back(gen_circle_image(cx, cy, cfg.radius, cfg.size));
        out.z.push_back({static_cast<float>(z)});
    }
    return out;
}

// Two latent factors: both center coordinates drawn from the extreme
// regions. label() yields the 4-way corner code 2*z1_tilde + z2_tilde.
inline LabeledSet sample_corner_set(int n, const LatentSpec& spec, const CircleDatasetConfig& cfg,
                                    uint64_t seed) {
    require(n >= 1, "need at least one sample");
    spec.validate();
    LabeledSet out;
    out.modality = Modality::Image;
    out.shape = {cfg.size, cfg.size, 1};
    out.generator = "corner-2d";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Rng r = rng.fork(static_cast<uint64_t>(i));
        double zx = spec.draw(r);
        double zy = spec.draw(r);
        double cx = center_from_z(zx, cfg.size, cfg.radius);
        double cy = center_from_z(zy, cfg.size, cfg.radius);
        out.x.push_back(gen_circle_image(cx, cy, cfg.radius, cfg.size));
        out.z.push_back({static_cast<float>(zx), static_cast<float>(zy)});
    }
    require(out.leakage_free(spec.delta), "generated training set leaks mild samples");
    return out;
}

struct SizeDatasetConfig {
    int size = 32;
    double r_min = 2.0;
    double r_max = 10.0;
};

// Object radius as the latent: r(z) linear over [r_min, r_max], extreme
// z from the training regions. The continuous z is the regression target.
inline LabeledSet sample_size_set(int n, const LatentSpec& spec, const SizeDatasetConfig& cfg,
                                  uint64_t seed) {
    require(n >= 1, "need at least one sample");
    spec.validate();
    require_config(cfg.r_max >= cfg.r_min && cfg.r_max <= (cfg.size - 1) / 2.0,
                   "r_max must fit in the frame");
    LabeledSet out;
    out.modality = Modality::Image;
    out.shape = {cfg.size, cfg.size, 1};
    out.generator = "size";
    out.seed = seed;
    Rng rng(seed);
    const double c = (cfg.size - 1) / 2.0;
    for (int i = 0; i < n; ++i) {
        Rng r = rng.fork(static_cast<uint64_t>(i));
        double z = spec.draw(r);
        double radius = cfg.r_min + z * (cfg.r_max - cfg.r_min);
        out.x.push_back(gen_circle_image(c, c, radius, cfg.size));
        out.z.push_back({static_cast<float>(z)});
    }
    require(out.leakage_free(spec.delta), "generated training set leaks mild samples");
    return out;
}

// Low-dimensional continuous stand-in: x = affine image of z plus small
// isotropic noise. Keeps the latent structure, runs in microseconds.
inline LabeledSet sample_interval_mixture(int n, const LatentSpec& spec, int dim, uint64_t seed,
                                          double noise_sd = 0.02) {
    require(n >= 1 && dim >= 1, "need samples and a positive dimension");
    spec.validate();
    LabeledSet out;
    out.modality = Modality::Vector;
    out.shape = {dim};
    out.generator = "interval-mixture";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Rng r = rng.fork(static_cast<uint64_t>(i));
        double z = spec.draw(r);
        Tensor<float> v({dim});
        for (int d = 0; d < dim; ++d)
            v[d] = static_cast<float>(2.0 * z - 1.0 + noise_sd * r.normal());
        out.x.push_back(std::move(v));
        out.z.push_back({static_cast<float>(z)});
    }
    require(out.leakage_free(spec.delta), "generated training set leaks mild samples");
    return out;
}

// ---------------------------------------------------------------------------
// On-disk formats. PGM directory + JSON sidecar, and a packed single file.
// Pixel mapping is the linear [-1, 1] <-> [0, 255] convention; generated
// pixels are exactly +/-1, so both formats round-trip bit-exactly.
// ---------------------------------------------------------------------------

inline uint8_t pixel_to_u8(float v) {
    double q = std::clamp((static_cast<double>(v) + 1.0) / 2.0, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(q * 255.0));
}

inline float u8_to_pixel(uint8_t b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

inline void save_pgm(const Tensor<float>& img, const std::string& path) {
    require(img.shape.size() == 3 && img.shape[2] == 1, "pgm expects a single-channel image");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot write " + path);
    f << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
    for (int64_t i = 0; i < img.size(); ++i) {
        uint8_t b = pixel_to_u8(img[i]);
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
}

inline Tensor<float> load_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    if (magic != "P5" || maxv != 255 || w <= 0 || h <= 0)
        throw artifact_error("unsupported pgm header in " + path);
    f.get();  // single whitespace after header
    Tensor<float> img({h, w, 1});
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw artifact_error("truncated pgm " + path);
    for (size_t i = 0; i < buf.size(); ++i) img[static_cast<int64_t>(i)] = u8_to_pixel(buf[i]);
    return img;
}

inline void save_labeled_set_pgm(const LabeledSet& set, const std::string& dir) {
    namespace fs = std::filesystem;
    require(set.modality == Modality::Image, "pgm directory format needs images");
    set.validate();
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["generator"] = set.generator;
    meta["seed"] = set.seed;
    meta["shape"] = set.shape;
    meta["count"] = set.size();
    nlohmann::json rows = nlohmann::json::array();
    for (size_t i = 0; i < set.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%06zu.pgm", i);
        save_pgm(set.x[i], (fs::path(dir) / name).string());
        nlohmann::json row;
        row["file"] = name;
        row["z"] = set.z[i];
        nlohmann::json zt = nlohmann::json::array();
        for (float zv : set.z[i]) zt.push_back(LabeledSet::binary_label(zv));
        row["z_tilde"] = zt;
        rows.push_back(row);
    }
    meta["samples"] = rows;
    std::ofstream f(fs::path(dir) / "meta.json");
    f << meta.dump(2) << "\n";
}

inline LabeledSet load_labeled_set_pgm(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "meta.json");
    if (!f) throw artifact_error("missing dataset sidecar in " + dir);
    nlohmann::json meta = nlohmann::json::parse(f);
    LabeledSet set;
    set.modality = Modality::Image;
    set.shape = meta.at("shape").get<std::vector<int>>();
    set.generator = meta.at("generator").get<std::string>();
    set.seed = meta.at("seed").get<uint64_t>();
    for (const auto& row : meta.at("samples")) {
        set.x.push_back(load_pgm((fs::path(dir) / row.at("file").get<std::string>()).string()));
        set.z.push_back(row.at("z").get<std::vector<float>>());
        // binary labels are a pure function of z; re-derive and cross-check
        auto zt = row.at("z_tilde").get<std::vector<int>>();
        for (size_t l = 0; l < zt.size(); ++l)
            require(zt[l] == LabeledSet::binary_label(set.z.back()[l]),
                    "sidecar z_tilde inconsistent with z");
    }
    set.validate();
    return set;
}

// Packed single-file format: magic, JSON header, u8 pixel block (images) or
// f32 sample block (vectors), then the f32 latent block. Little-endian.
inline void save_labeled_set_packed(const LabeledSet& set, const std::string& path) {
    set.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot write " + path);
    nlohmann::json head;
    head["generator"] = set.generator;
    head["seed"] = set.seed;
    head["shape"] = set.shape;
    head["count"] = set.size();
    head["factors"] = set.factors();
    head["modality"] = set.modality == Modality::Image ? "image" : "vector";
    const std::string hs = head.dump();
    const char magic[4] = {'D', 'Z', 'D', 'S'};
    f.write(magic, 4);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& img : set.x) {
        if (set.modality == Modality::Image) {
            for (int64_t i = 0; i < img.size(); ++i) {
                uint8_t b = pixel_to_u8(img[i]);
                f.write(reinterpret_cast<const char*>(&b), 1);
            }
        } else {
            f.write(reinterpret_cast<const char*>(img.data()),
                    static_cast<std::streamsize>(img.size() * sizeof(float)));
        }
    }
    for (const auto& zi : set.z)
        f.write(reinterpret_cast<const char*>(zi.data()),
                static_cast<std::streamsize>(zi.size() * sizeof(float)));
}

inline LabeledSet load_labeled_set_packed(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot read " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DZDS", 4) != 0)
        throw artifact_error("bad dataset magic in " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json head = nlohmann::json::parse(hs);
    LabeledSet set;
    set.modality = head.at("modality") == "image" ? Modality::Image : Modality::Vector;
    set.shape = head.at("shape").get<std::vector<int>>();
    set.generator = head.at("generator").get<std::string>();
    set.seed = head.at("seed").get<uint64_t>();
    const auto count = head.at("count").get<size_t>();
    const auto factors = head.at("factors").get<int>();
    const int64_t per = Tensor<float>::count(set.shape);
    for (size_t i = 0; i < count; ++i) {
        Tensor<float> t(set.shape);
        if (set.modality == Modality::Image) {
            std::vector<uint8_t> buf(static_cast<size_t>(per));
            f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            for (size_t j = 0; j < buf.size(); ++j) t[static_cast<int64_t>(j)] = u8_to_pixel(buf[j]);
        } else {
            f.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(per * sizeof(float)));
        }
        set.x.push_back(std::move(t));
    }
    for (size_t i = 0; i < count; ++i) {
        std::vector<float> z(static_cast<size_t>(factors));
        f.read(reinterpret_cast<char*>(z.data()),
               static_cast<std::streamsize>(z.size() * sizeof(float)));
        set.z.push_back(std::move(z));
    }
    if (!f) throw artifact_error("truncated dataset file " + path);
    set.validate();
    return set;
}

}  // namespace dzsi
