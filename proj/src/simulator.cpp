#include "cryoar/simulator.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "cryoar/parallel.hpp"

namespace cryoar {

void PhantomSpec::validate() const {
    if (grid_size < 2 || grid_size % 2 != 0)
        throw std::invalid_argument("phantom grid_size must be even, got " + std::to_string(grid_size));
    if (n_blobs < 1) throw std::invalid_argument("phantom n_blobs must be >= 1");
    if (!(support_radius_fraction >= 0.0 && support_radius_fraction <= 0.45))
        throw std::invalid_argument("phantom support_radius_fraction must lie in [0, 0.45]");
    if (!(amp_range.min >= 0.0 && amp_range.min <= amp_range.max))
        throw std::invalid_argument("phantom amp_range must be ordered and non-negative");
    if (!(sigma_range_px.min > 0.0 && sigma_range_px.min <= sigma_range_px.max))
        throw std::invalid_argument("phantom sigma_range_px must be ordered and positive");
    if (!(voxel_size > 0.0)) throw std::invalid_argument("phantom voxel_size must be positive");
}

std::vector<Blob> sample_blobs(const PhantomSpec& spec) {
    spec.validate();
    Rng rng = make_stream(spec.seed, 0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double radius = spec.support_radius_fraction * spec.grid_size;
    std::vector<Blob> blobs;
    blobs.reserve(static_cast<std::size_t>(spec.n_blobs));
    for (int b = 0; b < spec.n_blobs; ++b) {
        Vec3 c;
        do {
            c = Vec3(unit(rng), unit(rng), unit(rng));
        } while (c.squaredNorm() > 1.0);
        Blob blob;
        blob.center = c * radius;
        blob.amplitude = std::uniform_real_distribution<double>(spec.amp_range.min, spec.amp_range.max)(rng);
        blob.sigma = std::uniform_real_distribution<double>(spec.sigma_range_px.min, spec.sigma_range_px.max)(rng);
        blobs.push_back(blob);
    }
    return blobs;
}

Volume render_blobs(const std::vector<Blob>& blobs, int grid_size, double voxel_size) {
    Volume vol(grid_size, voxel_size, 0.0);
    const double half = grid_size / 2;
    std::vector<double> ex(static_cast<std::size_t>(grid_size)), ey(ex.size()), ez(ex.size());
    for (const auto& b : blobs) {
        const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for (int i = 0; i < grid_size; ++i) {
            const double u = i - half;
            ex[static_cast<std::size_t>(i)] = std::exp(-(u - b.center.x()) * (u - b.center.x()) * inv);
            ey[static_cast<std::size_t>(i)] = std::exp(-(u - b.center.y()) * (u - b.center.y()) * inv);
            ez[static_cast<std::size_t>(i)] = std::exp(-(u - b.center.z()) * (u - b.center.z()) * inv);
        }
        for (int z = 0; z < grid_size; ++z)
            for (int y = 0; y < grid_size; ++y) {
                const double ayz = b.amplitude * ez[static_cast<std::size_t>(z)] * ey[static_cast<std::size_t>(y)];
                double* row = vol.data.data() + vol.index(z, y, 0);
                for (int x = 0; x < grid_size; ++x) row[x] += ayz * ex[static_cast<std::size_t>(x)];
            }
    }
    return vol;
}

Volume make_phantom(const PhantomSpec& spec) {
    return render_blobs(sample_blobs(spec), spec.grid_size, spec.voxel_size);
}

double blob_mass(const std::vector<Blob>& blobs) {
    double mass = 0.0;
    for (const auto& b : blobs) mass += b.amplitude * std::pow(2.0 * std::numbers::pi * b.sigma * b.sigma, 1.5);
    return mass;
}

void DatasetManifest::validate() const {
    if (n_particles < 1) throw std::invalid_argument("manifest n_particles must be >= 1");
    if (image_size < 2 || image_size % 2 != 0)
        throw std::invalid_argument("manifest image_size must be even, got " + std::to_string(image_size));
    if (!(pixel_size > 0.0)) throw std::invalid_argument("manifest pixel_size must be positive");
    if (!(snr > 0.0)) throw std::invalid_argument("manifest snr must be positive");
    if (!(shift_range_px >= 0.0) || !std::isfinite(shift_range_px))
        throw std::invalid_argument("manifest shift_range_px must be finite and >= 0");
}

nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["n_particles"] = m.n_particles;
    j["image_size"] = m.image_size;
    j["pixel_size"] = m.pixel_size;
    if (std::isinf(m.snr))
        j["snr"] = "inf";
    else
        j["snr"] = m.snr;
    j["shift_range_px"] = m.shift_range_px;
    j["ctf_enabled"] = m.ctf_enabled;
    j["seed"] = m.seed;
    return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"n_particles",    "image_size",  "pixel_size", "snr",
                                                  "shift_range_px", "ctf_enabled", "seed"};
    for (const auto& [key, _] : j.items())
        if (std::find(keys.begin(), keys.end(), key) == keys.end())
            throw std::invalid_argument("unknown manifest key '" + key + "'");
    DatasetManifest m;
    m.n_particles = j.at("n_particles").get<std::size_t>();
    m.image_size = j.at("image_size").get<int>();
    m.pixel_size = j.at("pixel_size").get<double>();
    const auto& snr = j.at("snr");
    m.snr = snr.is_string() && snr.get<std::string>() == "inf" ? kNoiseless : snr.get<double>();
    m.shift_range_px = j.at("shift_range_px").get<double>();
    m.ctf_enabled = j.at("ctf_enabled").get<bool>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.validate();
    return m;
}

double variance(const Image& img) {
    const double mean = img.data.mean();
    return (img.data - mean).square().sum() / static_cast<double>(img.data.size());
}

Image add_noise_to_snr(const Image& img, double snr, Rng& rng) {
    if (!(snr > 0.0)) throw std::invalid_argument("add_noise_to_snr: snr must be positive");
    if (std::isinf(snr)) return img;
    const double sigma = std::sqrt(variance(img) / snr);
    std::normal_distribution<double> normal(0.0, sigma);
    Image out = img;
    for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data.data()[i] += normal(rng);
    return out;
}

double measure_snr(const Image& clean, const Image& noisy) {
    if (clean.size() != noisy.size()) throw std::invalid_argument("measure_snr: size mismatch");
    const Image diff(noisy.data - clean.data, clean.pixel_size);
    const double noise = variance(diff);
    if (noise == 0.0) return kNoiseless;
    return variance(clean) / noise;
}

Particle simulate_particle(const Volume& vol, const Pose& pose, const std::optional<CtfParams>& ctf, double snr,
                           Rng& rng) {
    Pose centered = pose;
    centered.shift.setZero();
    FourierImage f = fft2_centered(real_space_project(vol, centered));
    if (ctf) f = apply_ctf(f, *ctf);
    f = apply_phase_shift(f, pose.shift, -1);
    Particle p;
    p.clean = ifft2_centered(f);
    p.image = add_noise_to_snr(p.clean, snr, rng);
    return p;
}

Dataset simulate_dataset(const Volume& vol, const DatasetManifest& manifest, const SimulationOptions& options) {
    manifest.validate();
    if (vol.n != manifest.image_size)
        throw std::invalid_argument("simulate_dataset: volume size " + std::to_string(vol.n) +
                                    " does not match image_size " + std::to_string(manifest.image_size));
    Volume scaled = vol;
    scaled.voxel_size = manifest.pixel_size;
    CtfRanges ranges = options.ctf_ranges;
    ranges.pixel_size = manifest.pixel_size;

    const std::size_t n = manifest.n_particles;
    Dataset ds;
    ds.images.resize(n);
    ds.poses.resize(n);
    if (manifest.ctf_enabled) ds.ctfs.resize(n);
    if (options.keep_clean) ds.clean.resize(n);

    parallel_blocks(n, options.threads, [&](std::size_t begin, std::size_t end, int) {
        std::uniform_real_distribution<double> shift(-manifest.shift_range_px, manifest.shift_range_px);
        for (std::size_t i = begin; i < end; ++i) {
            Rng rng = make_stream(manifest.seed, i);
            Pose pose;
            pose.rot = sample_uniform_rotation(rng);
            std::optional<CtfParams> ctf;
            if (manifest.ctf_enabled) ctf = sample_ctf_params(rng, ranges);
            if (manifest.shift_range_px > 0.0) pose.shift = Vec2(shift(rng), shift(rng));
            Particle p = simulate_particle(scaled, pose, ctf, manifest.snr, rng);
            ds.images[i] = std::move(p.image);
            ds.poses[i] = pose;
            if (ctf) ds.ctfs[i] = *ctf;
            if (options.keep_clean) ds.clean[i] = std::move(p.clean);
        }
    });
    return ds;
}

}  // namespace cryoar
