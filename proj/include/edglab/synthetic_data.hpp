#pragma once

// Evolving-domain datasets: EvolCircle, RPlate, RotatedCloud and rotated MNIST.
// Every generator is a pure function of its EnvironmentSpec. The last domain of
// a generated sequence is the held-out target.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "edglab/error.hpp"
#include "edglab/rng.hpp"

namespace edglab::data {

struct Sample {
    std::vector<double> x;
    std::size_t y = 0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct DomainData {
    std::size_t index = 0;
    std::vector<Sample> samples;
    std::size_t num_classes = 0;

    std::size_t feature_dim() const { return samples.empty() ? 0 : samples.front().x.size(); }

    /// Sample positions grouped by label.
    std::vector<std::vector<std::size_t>> class_indices() const {
        std::vector<std::vector<std::size_t>> out(num_classes);
        for (std::size_t i = 0; i < samples.size(); ++i) out.at(samples[i].y).push_back(i);
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(num_classes, 0);
        for (const auto& s : samples) ++c.at(s.y);
        return c;
    }

    friend bool operator==(const DomainData&, const DomainData&) = default;
};

/// Throws ConfigError if the DomainData invariants do not hold.
inline void validate(const DomainData& d) {
    const std::string where = "domain " + std::to_string(d.index);
    if (d.samples.empty()) throw ConfigError(where + ": no samples");
    if (d.num_classes == 0) throw ConfigError(where + ": zero classes");
    const auto dim = d.feature_dim();
    std::vector<bool> seen(d.num_classes, false);
    for (const auto& s : d.samples) {
        if (s.x.size() != dim) throw ConfigError(where + ": mixed feature dimensions");
        if (s.y >= d.num_classes) throw ConfigError(where + ": label out of range");
        for (double v : s.x)
            if (!std::isfinite(v)) throw ConfigError(where + ": non-finite feature");
        seen[s.y] = true;
    }
    for (std::size_t k = 0; k < d.num_classes; ++k)
        if (!seen[k]) throw ConfigError(where + ": class " + std::to_string(k) + " missing");
}

enum class EnvKind { EvolCircle, RPlate, RotatedCloud, RotatedMNIST };

inline std::string_view to_string(EnvKind k) {
    switch (k) {
        case EnvKind::EvolCircle: return "evolcircle";
        case EnvKind::RPlate: return "rplate";
        case EnvKind::RotatedCloud: return "rotated-cloud";
        case EnvKind::RotatedMNIST: return "rmnist";
    }
    return "?";
}

inline EnvKind parse_env_kind(std::string_view s) {
    if (s == "evolcircle") return EnvKind::EvolCircle;
    if (s == "rplate") return EnvKind::RPlate;
    if (s == "rotated-cloud" || s == "rotatedcloud") return EnvKind::RotatedCloud;
    if (s == "rmnist" || s == "rotated-mnist") return EnvKind::RotatedMNIST;
    throw ConfigError("unknown dataset '" + std::string(s) + "'");
}

/// Kind-specific knobs. Only the fields of the selected kind are read.
struct EnvExtra {
    // EvolCircle: class centres at radius (radius -/+ class_offset) along angle pi*i/(m-1).
    double radius = 2.0;
    double class_offset = 0.5;
    double sigma = 0.35;
    // RPlate: boundary angle of domain i is i * boundary_step_deg.
    double boundary_step_deg = 12.0;
    // RotatedCloud: two blobs, rotated about the origin.
    std::array<double, 2> cloud_center0{1.0, 1.0};
    std::array<double, 2> cloud_center1{1.0, -1.0};
    double cloud_sigma = 0.5;
    // RotatedMNIST
    std::string mnist_dir;
    std::string mnist_images = "train-images-idx3-ubyte";
    std::string mnist_labels = "train-labels-idx1-ubyte";

    friend bool operator==(const EnvExtra&, const EnvExtra&) = default;
};

struct EnvironmentSpec {
    EnvKind kind = EnvKind::EvolCircle;
    std::size_t num_domains = 30;
    std::size_t samples_per_domain = 220;
    double domain_distance = 10.0;  // degrees; RotatedCloud / RotatedMNIST
    std::uint64_t seed = 0;
    EnvExtra extra;

    friend bool operator==(const EnvironmentSpec&, const EnvironmentSpec&) = default;

    static EnvironmentSpec defaults(EnvKind kind) {
        EnvironmentSpec s;
        s.kind = kind;
        switch (kind) {
            case EnvKind::EvolCircle:
            case EnvKind::RPlate:
                s.num_domains = 30;
                s.samples_per_domain = 220;
                break;
            case EnvKind::RotatedCloud:
                s.num_domains = 12;
                s.samples_per_domain = 200;
                s.domain_distance = 10.0;
                break;
            case EnvKind::RotatedMNIST:
                s.num_domains = 12;
                s.samples_per_domain = 200;
                s.domain_distance = 10.0;
                break;
        }
        return s;
    }
};

inline std::size_t num_classes_of(EnvKind k) { return k == EnvKind::RotatedMNIST ? 10 : 2; }

/// Smallest per-class count a domain must be able to hold.
inline constexpr std::size_t kMinSupport = 2;

inline void validate(const EnvironmentSpec& s) {
    if (s.num_domains < 3) throw ConfigError("num_domains must be >= 3 (got " + std::to_string(s.num_domains) + ")");
    const auto need = num_classes_of(s.kind) * kMinSupport;
    if (s.samples_per_domain < need)
        throw ConfigError("samples_per_domain must be >= " + std::to_string(need));
    if (!std::isfinite(s.domain_distance)) throw ConfigError("domain_distance must be finite");
    if (s.kind == EnvKind::EvolCircle && !(s.extra.sigma >= 0.0)) throw ConfigError("evolcircle sigma must be >= 0");
    if (s.kind == EnvKind::RotatedCloud && !(s.extra.cloud_sigma >= 0.0))
        throw ConfigError("rotated-cloud sigma must be >= 0");
}

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

inline std::array<double, 2> rotate2d(std::array<double, 2> p, double radians) {
    const double c = std::cos(radians);
    const double s = std::sin(radians);
    return {c * p[0] - s * p[1], s * p[0] + c * p[1]};
}

// ---------------------------------------------------------------- EvolCircle

inline double evolcircle_angle(std::size_t i, std::size_t num_domains) {
    return std::numbers::pi * static_cast<double>(i) / static_cast<double>(num_domains - 1);
}

/// Centre of class k in domain i: class 0 on the inner ring, class 1 on the outer ring.
inline std::array<double, 2> evolcircle_center(const EnvironmentSpec& s, std::size_t i, std::size_t k) {
    const double theta = evolcircle_angle(i, s.num_domains);
    const double r = s.extra.radius + (k == 0 ? -s.extra.class_offset : s.extra.class_offset);
    return {r * std::cos(theta), r * std::sin(theta)};
}

inline std::vector<DomainData> gen_evolcircle(const EnvironmentSpec& s) {
    if (s.kind != EnvKind::EvolCircle) throw ConfigError("gen_evolcircle: spec kind is " + std::string(to_string(s.kind)));
    validate(s);
    Rng rng(derive_seed({s.seed, 0xC1C1E}));
    std::vector<DomainData> out;
    for (std::size_t i = 0; i < s.num_domains; ++i) {
        DomainData d{i, {}, 2};
        for (std::size_t j = 0; j < s.samples_per_domain; ++j) {
            const std::size_t y = j % 2;
            const auto c = evolcircle_center(s, i, y);
            const double x0 = c[0] + s.extra.sigma * rng.normal();
            const double x1 = c[1] + s.extra.sigma * rng.normal();
            d.samples.push_back({{x0, x1}, y});
        }
        out.push_back(std::move(d));
    }
    return out;
}

// -------------------------------------------------------------------- RPlate

inline double rplate_boundary_deg(const EnvironmentSpec& s, std::size_t i) {
    return static_cast<double>(i) * s.extra.boundary_step_deg;
}

/// 1 iff w(alpha) . x >= 0 with w(alpha) = (cos alpha, sin alpha).
inline std::size_t rplate_label(std::span<const double> x, double boundary_deg) {
    const double a = deg2rad(boundary_deg);
    return std::cos(a) * x[0] + std::sin(a) * x[1] >= 0.0 ? 1 : 0;
}

inline std::vector<DomainData> gen_rplate(const EnvironmentSpec& s) {
    if (s.kind != EnvKind::RPlate) throw ConfigError("gen_rplate: spec kind is " + std::string(to_string(s.kind)));
    validate(s);
    Rng rng(derive_seed({s.seed, 0x9147E}));
    std::vector<DomainData> out;
    for (std::size_t i = 0; i < s.num_domains; ++i) {
        const double alpha = rplate_boundary_deg(s, i);
        DomainData d{i, {}, 2};
        // Redraw until both classes can be split; only matters for tiny domains.
        for (;;) {
            d.samples.clear();
            for (std::size_t j = 0; j < s.samples_per_domain; ++j) {
                std::vector<double> x{rng.normal(), rng.normal()};
                const auto y = rplate_label(x, alpha);
                d.samples.push_back({std::move(x), y});
            }
            const auto counts = d.class_counts();
            if (counts[0] >= kMinSupport && counts[1] >= kMinSupport) break;
        }
        out.push_back(std::move(d));
    }
    return out;
}

// -------------------------------------------------------------- RotatedCloud

/// The unrotated labelled cloud shared by every domain.
inline DomainData rotated_cloud_base(const EnvironmentSpec& s) {
    Rng rng(derive_seed({s.seed, 0xC10D}));
    DomainData base{0, {}, 2};
    for (std::size_t j = 0; j < s.samples_per_domain; ++j) {
        const std::size_t y = j % 2;
        const auto& c = y == 0 ? s.extra.cloud_center0 : s.extra.cloud_center1;
        base.samples.push_back({{c[0] + s.extra.cloud_sigma * rng.normal(), c[1] + s.extra.cloud_sigma * rng.normal()}, y});
    }
    return base;
}

inline std::vector<DomainData> gen_rotated_cloud(const EnvironmentSpec& s) {
    if (s.kind != EnvKind::RotatedCloud)
        throw ConfigError("gen_rotated_cloud: spec kind is " + std::string(to_string(s.kind)));
    validate(s);
    const DomainData base = rotated_cloud_base(s);
    std::vector<DomainData> out;
    for (std::size_t i = 0; i < s.num_domains; ++i) {
        const double a = deg2rad(static_cast<double>(i) * s.domain_distance);
        DomainData d{i, {}, 2};
        for (const auto& smp : base.samples) {
            const auto p = rotate2d({smp.x[0], smp.x[1]}, a);
            d.samples.push_back({{p[0], p[1]}, smp.y});
        }
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------- IDX / MNIST

struct IdxArray {
    std::uint8_t type_code = 0;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> bytes;
};

/// Reads an unsigned-byte IDX file and checks its magic against `expected_magic`.
inline IdxArray read_idx(const std::string& path, std::uint32_t expected_magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError(path, 0, "cannot open file");
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string raw = ss.str();

    auto be32 = [&](std::size_t off) -> std::uint32_t {
        if (off + 4 > raw.size()) throw IngestionError(path, off, "truncated header");
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v = (v << 8) | static_cast<unsigned char>(raw[off + b]);
        return v;
    };
    const std::uint32_t magic = be32(0);
    if (magic != expected_magic) {
        std::ostringstream msg;
        msg << "bad magic 0x" << std::hex << magic << " (expected 0x" << expected_magic << ")";
        throw IngestionError(path, 0, msg.str());
    }
    IdxArray arr;
    arr.type_code = static_cast<std::uint8_t>((magic >> 8) & 0xFF);
    const std::size_t ndim = magic & 0xFF;
    std::size_t total = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        arr.dims.push_back(be32(4 + 4 * d));
        total *= arr.dims.back();
    }
    const std::size_t data_off = 4 + 4 * ndim;
    if (raw.size() < data_off + total)
        throw IngestionError(path, raw.size(), "truncated payload: need " + std::to_string(total) + " bytes after header");
    arr.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(data_off),
                     raw.begin() + static_cast<std::ptrdiff_t>(data_off + total));
    return arr;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Rotates a row-major h x w image by `degrees` counter-clockwise about its centre.
/// Bilinear interpolation; samples falling outside the image read as 0.
inline std::vector<double> rotate_image(std::span<const double> img, std::size_t h, std::size_t w, double degrees) {
    if (img.size() != h * w) throw ShapeError("rotate_image: size mismatch");
    if (degrees == 0.0) return {img.begin(), img.end()};
    const double a = deg2rad(degrees);
    const double c = std::cos(a);
    const double s = std::sin(a);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    auto at = [&](long r, long col) -> double {
        if (r < 0 || col < 0 || r >= static_cast<long>(h) || col >= static_cast<long>(w)) return 0.0;
        return img[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(col)];
    };
    std::vector<double> out(h * w, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t col = 0; col < w; ++col) {
            // inverse map: output pixel -> source location
            const double dx = static_cast<double>(col) - cx;
            const double dy = static_cast<double>(r) - cy;
            const double sx = c * dx + s * dy + cx;
            const double sy = -s * dx + c * dy + cy;
            const double fx = std::floor(sx);
            const double fy = std::floor(sy);
            const double tx = sx - fx;
            const double ty = sy - fy;
            const long x0 = static_cast<long>(fx);
            const long y0 = static_cast<long>(fy);
            out[r * w + col] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                               ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    }
    return out;
}

inline std::vector<DomainData> load_rmnist(const std::string& image_path, const std::string& label_path,
                                           const EnvironmentSpec& s) {
    validate(s);
    const IdxArray images = read_idx(image_path, kIdxImagesMagic);
    const IdxArray labels = read_idx(label_path, kIdxLabelsMagic);
    if (images.dims.size() != 3) throw IngestionError(image_path, 0, "expected a 3-d image array");
    if (labels.dims.size() != 1) throw IngestionError(label_path, 0, "expected a 1-d label array");
    if (images.dims[0] != labels.dims[0])
        throw IngestionError(label_path, 4,
                             "label count " + std::to_string(labels.dims[0]) + " != image count " +
                                 std::to_string(images.dims[0]) + " in " + image_path);
    const std::size_t n = images.dims[0];
    const std::size_t h = images.dims[1];
    const std::size_t w = images.dims[2];
    const std::size_t total = s.num_domains * s.samples_per_domain;
    if (total > n) throw ConfigError("rmnist: requested " + std::to_string(total) + " images, file has " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i)
        if (labels.bytes[i] > 9) throw IngestionError(label_path, 8 + i, "label outside 0..9");

    Rng rng(derive_seed({s.seed, 0x3A157}));
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    const auto chosen = rng.sample_without_replacement(std::move(all), total);

    std::vector<DomainData> out;
    for (std::size_t d = 0; d < s.num_domains; ++d) {
        DomainData dom{d, {}, 10};
        const double deg = static_cast<double>(d) * s.domain_distance;
        for (std::size_t j = 0; j < s.samples_per_domain; ++j) {
            const std::size_t idx = chosen[d * s.samples_per_domain + j];
            std::vector<double> px(h * w);
            for (std::size_t p = 0; p < h * w; ++p) px[p] = images.bytes[idx * h * w + p] / 255.0;
            dom.samples.push_back({rotate_image(px, h, w, deg), labels.bytes[idx]});
        }
        out.push_back(std::move(dom));
    }
    return out;
}

/// Dispatches on spec.kind. RotatedMNIST reads from spec.extra.mnist_dir.
inline std::vector<DomainData> generate(const EnvironmentSpec& s) {
    switch (s.kind) {
        case EnvKind::EvolCircle: return gen_evolcircle(s);
        case EnvKind::RPlate: return gen_rplate(s);
        case EnvKind::RotatedCloud: return gen_rotated_cloud(s);
        case EnvKind::RotatedMNIST: {
            if (s.extra.mnist_dir.empty()) throw ConfigError("rmnist: mnist_dir not set");
            const std::filesystem::path dir(s.extra.mnist_dir);
            return load_rmnist((dir / s.extra.mnist_images).string(), (dir / s.extra.mnist_labels).string(), s);
        }
    }
    throw ConfigError("unknown environment kind");
}

// ------------------------------------------------------------------ splitting

/// Stratified split: each class contributes round(ratio * n_k) samples to the first
/// half, clamped so that both halves keep at least one sample of every class.
inline std::pair<DomainData, DomainData> split_train_val(const DomainData& d, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw SplitError("split ratio must lie in (0, 1)");
    Rng rng(derive_seed({seed, d.index, 0x5B117}));
    std::vector<bool> to_first(d.samples.size(), false);
    const auto groups = d.class_indices();
    for (std::size_t k = 0; k < groups.size(); ++k) {
        const auto& g = groups[k];
        if (g.size() < 2)
            throw SplitError("domain " + std::to_string(d.index) + ": class " + std::to_string(k) + " has " +
                             std::to_string(g.size()) + " sample(s), need 2");
        auto n_first = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(g.size())));
        n_first = std::clamp<std::size_t>(n_first, 1, g.size() - 1);
        for (auto i : rng.sample_without_replacement(g, n_first)) to_first[i] = true;
    }
    DomainData a{d.index, {}, d.num_classes};
    DomainData b{d.index, {}, d.num_classes};
    for (std::size_t i = 0; i < d.samples.size(); ++i) (to_first[i] ? a : b).samples.push_back(d.samples[i]);
    return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------- JSON I/O

inline nlohmann::json to_json(const EnvironmentSpec& s) {
    nlohmann::json j;
    j["kind"] = std::string(to_string(s.kind));
    j["num_domains"] = s.num_domains;
    j["samples_per_domain"] = s.samples_per_domain;
    j["domain_distance"] = s.domain_distance;
    j["seed"] = s.seed;
    j["radius"] = s.extra.radius;
    j["class_offset"] = s.extra.class_offset;
    j["sigma"] = s.extra.sigma;
    j["boundary_step_deg"] = s.extra.boundary_step_deg;
    j["cloud_center0"] = s.extra.cloud_center0;
    j["cloud_center1"] = s.extra.cloud_center1;
    j["cloud_sigma"] = s.extra.cloud_sigma;
    j["mnist_dir"] = s.extra.mnist_dir;
    return j;
}

/// Missing keys fall back to the kind's defaults.
inline EnvironmentSpec spec_from_json(const nlohmann::json& j) {
    EnvironmentSpec s = EnvironmentSpec::defaults(parse_env_kind(j.at("kind").get<std::string>()));
    try {
        s.num_domains = j.value("num_domains", s.num_domains);
        s.samples_per_domain = j.value("samples_per_domain", s.samples_per_domain);
        s.domain_distance = j.value("domain_distance", s.domain_distance);
        s.seed = j.value("seed", s.seed);
        s.extra.radius = j.value("radius", s.extra.radius);
        s.extra.class_offset = j.value("class_offset", s.extra.class_offset);
        s.extra.sigma = j.value("sigma", s.extra.sigma);
        s.extra.boundary_step_deg = j.value("boundary_step_deg", s.extra.boundary_step_deg);
        s.extra.cloud_center0 = j.value("cloud_center0", s.extra.cloud_center0);
        s.extra.cloud_center1 = j.value("cloud_center1", s.extra.cloud_center1);
        s.extra.cloud_sigma = j.value("cloud_sigma", s.extra.cloud_sigma);
        s.extra.mnist_dir = j.value("mnist_dir", s.extra.mnist_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("environment spec: ") + e.what());
    }
    return s;
}

/// JSON-lines cache: a header line holding the spec, then one line per sample
/// as {"d": domain, "y": label, "x": [...]}. Doubles round-trip exactly.
inline void save_domains_jsonl(const std::string& path, const EnvironmentSpec& spec,
                               const std::vector<DomainData>& domains) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    nlohmann::json header{{"spec", to_json(spec)},
                          {"num_domains", domains.size()},
                          {"num_classes", domains.empty() ? 0 : domains.front().num_classes}};
    f << header.dump() << '\n';
    for (const auto& d : domains)
        for (const auto& s : d.samples) f << nlohmann::json{{"d", d.index}, {"y", s.y}, {"x", s.x}}.dump() << '\n';
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::pair<EnvironmentSpec, std::vector<DomainData>> load_domains_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IngestionError(path, 0, "cannot open cache file");
    std::string line;
    std::size_t offset = 0;
    if (!std::getline(f, line)) throw IngestionError(path, 0, "empty cache file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError(path, 0, e.what());
    }
    const auto spec = spec_from_json(header.at("spec"));
    const std::size_t nd = header.at("num_domains").get<std::size_t>();
    const std::size_t nc = header.at("num_classes").get<std::size_t>();
    std::vector<DomainData> domains(nd);
    for (std::size_t i = 0; i < nd; ++i) domains[i] = DomainData{i, {}, nc};
    offset += line.size() + 1;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            domains.at(j.at("d").get<std::size_t>()).samples.push_back(
                {j.at("x").get<std::vector<double>>(), j.at("y").get<std::size_t>()});
        } catch (const std::exception& e) {
            throw IngestionError(path, offset, e.what());
        }
        offset += line.size() + 1;
    }
    for (const auto& d : domains) validate(d);
    return {spec, std::move(domains)};
}

/// Stable file name for a spec inside a cache directory.
inline std::string cache_file_name(const EnvironmentSpec& s) {
    const auto key = to_json(s).dump();
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    std::ostringstream name;
    name << to_string(s.kind) << '-' << std::hex << h << ".jsonl";
    return name.str();
}

/// generate() with an optional on-disk cache keyed by the full spec.
inline std::vector<DomainData> generate_cached(const EnvironmentSpec& s, const std::string& cache_dir) {
    if (cache_dir.empty()) return generate(s);
    const auto path = std::filesystem::path(cache_dir) / cache_file_name(s);
    if (std::filesystem::exists(path)) {
        auto [cached_spec, domains] = load_domains_jsonl(path.string());
        if (cached_spec == s) return std::move(domains);
    }
    auto domains = generate(s);
    std::filesystem::create_directories(cache_dir);
    save_domains_jsonl(path.string(), s, domains);
    return domains;
}

}  // namespace edglab::data
