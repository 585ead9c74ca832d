#include "cryoar/planarmap.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include "cryoar/random.hpp"

namespace cryoar {

static_assert(std::endian::native == std::endian::little, "planar map I/O assumes a little-endian host");

void PlanarMap::validate() const {
    if (height < 2 || width < 2) throw std::invalid_argument("planar map must be at least 2x2");
    const Eigen::Index n = static_cast<Eigen::Index>(height) * width;
    if (points.rows() != n || confidence.size() != n)
        throw std::invalid_argument("planar map arrays do not match " + std::to_string(height) + "x" +
                                    std::to_string(width));
    if (!points.allFinite()) throw std::invalid_argument("planar map points must be finite");
    if (!(confidence.array() > 1.0).all()) throw std::invalid_argument("planar map confidence must exceed 1");
}

void RegressionConfig::validate() const {
    if (!(ransac_threshold > 0.0)) throw std::invalid_argument("ransac_threshold must be positive");
    if (ransac_iters < 1) throw std::invalid_argument("ransac_iters must be >= 1");
    if (!(min_inlier_fraction >= 0.0 && min_inlier_fraction <= 1.0))
        throw std::invalid_argument("min_inlier_fraction must lie in [0, 1]");
}

Points canonical_grid(int height, int width) {
    if (height < 2 || width < 2)
        throw std::invalid_argument("canonical_grid: H and W must be >= 2, got " + std::to_string(height) + "x" +
                                    std::to_string(width));
    Points grid(static_cast<Eigen::Index>(height) * width, 3);
    for (int h = 0; h < height; ++h)
        for (int w = 0; w < width; ++w) {
            const Eigen::Index k = static_cast<Eigen::Index>(h) * width + w;
            // 2w/(W-1) - 1 written so that mirrored pixels are exact negatives
            grid(k, 0) = static_cast<double>(2 * w - (width - 1)) / (width - 1);
            grid(k, 1) = static_cast<double>(2 * h - (height - 1)) / (height - 1);
            grid(k, 2) = 0.0;
        }
    return grid;
}

PlanarMap gt_relative_map(const Pose& pose_i, const Pose& pose_ref, int height, int width, int image_size) {
    if (image_size < 2) throw std::invalid_argument("gt_relative_map: image_size must be >= 2");
    PlanarMap map(height, width);
    const Mat3 rel = pose_i.rot.matrix() == pose_ref.rot.matrix()
                         ? Mat3::Identity()
                         : relative_rotation(pose_i.rot, pose_ref.rot).matrix();
    const Vec3 t = homogeneous_embed<double>(2.0 * pose_i.shift / image_size);
    map.points = (canonical_grid(height, width) * rel.transpose()).rowwise() + t.transpose();
    return map;
}

TranslationEstimate regress_translation(const PlanarMap& map, const RegressionConfig& cfg) {
    map.validate();
    const Eigen::RowVector3d weighted = map.confidence.transpose() * map.points;
    const double denom = cfg.translation_mode == TranslationMode::Normalized
                             ? map.confidence.sum()
                             : static_cast<double>(map.pixel_count());
    const Eigen::RowVector3d mean = weighted / denom;
    return {Vec2(mean.x(), mean.y()), mean.z()};
}

Rotation regress_rotation_kabsch(const PlanarMap& map, const PlanarMap& ref_map, const Vec2& t_norm,
                                 const RegressionConfig&) {
    map.validate();
    ref_map.validate();
    if (map.height != ref_map.height || map.width != ref_map.width)
        throw std::invalid_argument("regress_rotation_kabsch: map and reference map differ in size");
    const Points target = map.points.rowwise() - homogeneous_embed(t_norm).transpose();
    const Eigen::VectorXd w = map.confidence.cwiseProduct(ref_map.confidence);
    return weighted_kabsch(canonical_grid(map.height, map.width), target, w);
}

namespace {

struct RigidFit {
    Mat3 rot;
    Vec3 trans;
};

// Weighted rigid fit target ~ R source + t with free 3D translation.
RigidFit centered_kabsch(const Points& source, const Points& target, const Eigen::VectorXd& w) {
    const double total = w.sum();
    if (!(total > 0.0)) throw DegenerateGeometryError("rigid fit: weights sum to zero");
    const Eigen::RowVector3d cs = w.transpose() * source / total;
    const Eigen::RowVector3d ct = w.transpose() * target / total;
    const Points s = source.rowwise() - cs;
    const Points t = target.rowwise() - ct;
    const Rotation r = weighted_kabsch(s, t, w);
    return {r.matrix(), ct.transpose() - r.matrix() * cs.transpose()};
}

Eigen::VectorXd residuals(const RigidFit& fit, const Points& source, const Points& target) {
    return ((source * fit.rot.transpose()).rowwise() + fit.trans.transpose() - target).rowwise().norm();
}

}  // namespace

RansacResult ransac_regress(const PlanarMap& map, const PlanarMap& ref_map, const RegressionConfig& cfg) {
    cfg.validate();
    map.validate();
    ref_map.validate();
    if (!cfg.ransac_enabled) throw std::invalid_argument("ransac_regress: RANSAC is disabled in the config");
    if (map.height != ref_map.height || map.width != ref_map.width)
        throw std::invalid_argument("ransac_regress: map and reference map differ in size");

    const Points source = canonical_grid(map.height, map.width);
    const Eigen::VectorXd w = map.confidence.cwiseProduct(ref_map.confidence);
    const Eigen::Index n = source.rows();
    Rng rng = make_stream(cfg.seed, 0);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);

    std::vector<bool> best_mask;
    std::size_t best_count = 0;
    for (int it = 0; it < cfg.ransac_iters; ++it) {
        std::array<Eigen::Index, 3> idx{};
        idx[0] = pick(rng);
        do idx[1] = pick(rng);
        while (idx[1] == idx[0]);
        do idx[2] = pick(rng);
        while (idx[2] == idx[0] || idx[2] == idx[1]);
        const Vec3 a = source.row(idx[0]), b = source.row(idx[1]), c = source.row(idx[2]);
        if ((b - a).cross(c - a).norm() < 1e-12) continue;  // collinear sample

        Points s(3, 3), t(3, 3);
        for (int k = 0; k < 3; ++k) {
            s.row(k) = source.row(idx[static_cast<std::size_t>(k)]);
            t.row(k) = map.points.row(idx[static_cast<std::size_t>(k)]);
        }
        RigidFit fit;
        try {
            fit = centered_kabsch(s, t, Eigen::Vector3d::Ones());
        } catch (const DegenerateGeometryError&) {
            continue;
        }
        const Eigen::VectorXd r = residuals(fit, source, map.points);
        std::size_t count = 0;
        std::vector<bool> mask(static_cast<std::size_t>(n));
        for (Eigen::Index k = 0; k < n; ++k) {
            mask[static_cast<std::size_t>(k)] = r[k] < cfg.ransac_threshold;
            count += mask[static_cast<std::size_t>(k)];
        }
        if (count > best_count) {
            best_count = count;
            best_mask = std::move(mask);
        }
    }

    RansacResult result;
    result.inliers.assign(static_cast<std::size_t>(n), false);
    if (best_count < 3) return result;

    Eigen::VectorXd wi = w;
    for (Eigen::Index k = 0; k < n; ++k)
        if (!best_mask[static_cast<std::size_t>(k)]) wi[k] = 0.0;
    RigidFit fit;
    try {
        fit = centered_kabsch(source, map.points, wi);
    } catch (const DegenerateGeometryError&) {
        return result;
    }
    const Eigen::VectorXd r = residuals(fit, source, map.points);
    for (Eigen::Index k = 0; k < n; ++k) {
        result.inliers[static_cast<std::size_t>(k)] = r[k] < cfg.ransac_threshold;
        result.inlier_count += result.inliers[static_cast<std::size_t>(k)];
    }
    result.pose.rot = Rotation::unchecked(fit.rot);
    result.pose.shift = fit.trans.head<2>();
    result.success = static_cast<double>(result.inlier_count) >= cfg.min_inlier_fraction * static_cast<double>(n) &&
                     result.inlier_count >= 3;
    return result;
}

std::vector<Pose> maps_to_poses(const std::vector<PlanarMap>& maps, int image_size, const RegressionConfig& cfg) {
    cfg.validate();
    if (maps.empty()) throw std::invalid_argument("maps_to_poses: no maps");
    if (image_size < 2) throw std::invalid_argument("maps_to_poses: image_size must be >= 2");
    const double to_px = image_size / 2.0;
    std::vector<Pose> poses(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) {
        try {
            if (cfg.ransac_enabled && i > 0) {
                const RansacResult r = ransac_regress(maps[i], maps[0], cfg);
                if (!r.success)
                    throw NumericalError("RANSAC found " + std::to_string(r.inlier_count) + " inliers, below the minimum",
                                         i);
                poses[i] = {r.pose.rot, r.pose.shift * to_px};
                continue;
            }
            const TranslationEstimate t = regress_translation(maps[i], cfg);
            poses[i].shift = t.shift * to_px;
            poses[i].rot = i == 0 ? Rotation::identity() : regress_rotation_kabsch(maps[i], maps[0], t.shift, cfg);
        } catch (const DegenerateGeometryError& e) {
            throw DegenerateGeometryError(e.what(), i);
        }
    }
    return poses;
}

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::ifstream& in, const std::filesystem::path& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw IoError(path.string() + ": truncated planar map header");
    return v;
}

}  // namespace

void write_planar_maps(const std::filesystem::path& path, const std::vector<PlanarMap>& maps) {
    if (maps.empty()) throw std::invalid_argument("write_planar_maps: no maps");
    const int h = maps[0].height, w = maps[0].width;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    put_u32(out, static_cast<std::uint32_t>(h));
    put_u32(out, static_cast<std::uint32_t>(w));
    put_u32(out, static_cast<std::uint32_t>(maps.size()));
    std::vector<float> buf;
    for (const auto& m : maps) {
        if (m.height != h || m.width != w) throw std::invalid_argument("write_planar_maps: maps differ in size");
        buf.clear();
        for (Eigen::Index k = 0; k < m.pixel_count(); ++k)
            for (int c = 0; c < 3; ++c) buf.push_back(static_cast<float>(m.points(k, c)));
        for (Eigen::Index k = 0; k < m.pixel_count(); ++k) buf.push_back(static_cast<float>(m.confidence[k]));
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<PlanarMap> read_planar_maps(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::uint32_t h = get_u32(in, path), w = get_u32(in, path), n = get_u32(in, path);
    if (h < 2 || w < 2 || h > 65536 || w > 65536) throw IoError(path.string() + ": bad planar map dimensions");
    std::vector<PlanarMap> maps;
    maps.reserve(n);
    const std::size_t pixels = static_cast<std::size_t>(h) * w;
    std::vector<float> buf(pixels * 4);
    for (std::uint32_t v = 0; v < n; ++v) {
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4)))
            throw IoError(path.string() + ": truncated planar map data at view " + std::to_string(v));
        PlanarMap m(static_cast<int>(h), static_cast<int>(w));
        for (std::size_t k = 0; k < pixels; ++k) {
            for (int c = 0; c < 3; ++c) m.points(static_cast<Eigen::Index>(k), c) = buf[3 * k + static_cast<std::size_t>(c)];
            m.confidence[static_cast<Eigen::Index>(k)] = buf[3 * pixels + k];
        }
        maps.push_back(std::move(m));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after planar maps");
    return maps;
}

}  // namespace cryoar
