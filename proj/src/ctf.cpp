#include "cryoar/ctf.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "cryoar/csv.hpp"
#include "cryoar/error.hpp"

namespace cryoar {

namespace {

const std::vector<std::string> kCtfHeader = {"index", "defocus_A", "voltage_kv", "cs_mm",
                                             "w",     "phase_shift_rad", "pixel_size_A"};

}  // namespace

void CtfParams::validate() const {
    if (!(voltage_kv > 0.0)) throw std::invalid_argument("CTF voltage must be positive");
    if (!(pixel_size > 0.0)) throw std::invalid_argument("CTF pixel size must be positive");
    if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("CTF amplitude contrast must lie in [0, 1]");
    if (!std::isfinite(defocus) || !std::isfinite(cs) || !std::isfinite(phase_shift))
        throw std::invalid_argument("CTF parameters must be finite");
}

double electron_wavelength(double voltage_kv) {
    if (!(voltage_kv > 0.0)) throw std::invalid_argument("electron_wavelength: voltage must be positive");
    const double v = voltage_kv * 1e3;
    return 12.2639 / std::sqrt(v + 0.97845e-6 * v * v);
}

double ctf_chi(const CtfParams& p, double g) {
    const double lambda = electron_wavelength(p.voltage_kv);
    const double cs_angstrom = p.cs * 1e7;
    const double g2 = g * g;
    return std::numbers::pi * lambda * g2 * (p.defocus - 0.5 * lambda * lambda * g2 * cs_angstrom) + p.phase_shift;
}

double ctf_value(const CtfParams& p, double g) {
    const double chi = ctf_chi(p, g);
    return -std::sqrt(1.0 - p.w * p.w) * std::sin(chi) - p.w * std::cos(chi);
}

PlaneArray<double> frequency_grid(Eigen::Index n, double pixel_size) {
    PlaneArray<double> g(n, n);
    const double half = static_cast<double>(n / 2);
    const double scale = 1.0 / (static_cast<double>(n) * pixel_size);
    for (Eigen::Index y = 0; y < n; ++y)
        for (Eigen::Index x = 0; x < n; ++x) g(y, x) = std::hypot(x - half, y - half) * scale;
    return g;
}

PlaneArray<double> eval_ctf(const CtfParams& p, const PlaneArray<double>& freq_grid) {
    p.validate();
    return freq_grid.unaryExpr([&](double g) { return ctf_value(p, g); });
}

PlaneArray<double> eval_ctf(const CtfParams& p, Eigen::Index n) { return eval_ctf(p, frequency_grid(n, p.pixel_size)); }

FourierImage apply_ctf(const FourierImage& fimg, const CtfParams& p) {
    if (std::abs(fimg.pixel_size - p.pixel_size) > 1e-9 * std::max(1.0, p.pixel_size))
        throw std::invalid_argument("apply_ctf: pixel size mismatch (image " + std::to_string(fimg.pixel_size) +
                                    " A, CTF " + std::to_string(p.pixel_size) + " A)");
    FourierImage out = fimg;
    out.data *= eval_ctf(p, fimg.size()).cast<Complex>();
    return out;
}

CtfParams sample_ctf_params(Rng& rng, const CtfRanges& ranges) {
    if (!(ranges.defocus_min_um <= ranges.defocus_max_um))
        throw std::invalid_argument("sample_ctf_params: defocus range is not ordered");
    CtfParams p;
    p.voltage_kv = ranges.voltage_kv;
    p.cs = ranges.cs;
    p.w = ranges.w;
    p.phase_shift = ranges.phase_shift;
    p.pixel_size = ranges.pixel_size;
    if (ranges.defocus_min_um == ranges.defocus_max_um) {
        p.defocus = ranges.defocus_min_um * 1e4;
    } else {
        std::uniform_real_distribution<double> u(ranges.defocus_min_um, ranges.defocus_max_um);
        p.defocus = u(rng) * 1e4;
    }
    p.validate();
    return p;
}

void write_ctf_csv(const std::filesystem::path& path, const std::vector<CtfParams>& params) {
    std::vector<std::vector<double>> rows;
    rows.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        rows.push_back({static_cast<double>(i), p.defocus, p.voltage_kv, p.cs, p.w, p.phase_shift, p.pixel_size});
    }
    csv::write(path, kCtfHeader, rows);
}

std::vector<CtfParams> read_ctf_csv(const std::filesystem::path& path) {
    const auto table = csv::read(path, kCtfHeader);
    std::vector<CtfParams> out;
    out.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        if (r[0] != static_cast<double>(i))
            throw IoError(path.string() + ": CTF rows out of order at row " + std::to_string(i));
        CtfParams p{r[2], r[1], r[3], r[4], r[5], r[6]};
        try {
            p.validate();
        } catch (const std::invalid_argument& e) {
            throw IoError(path.string() + ": row " + std::to_string(i) + ": " + e.what());
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace cryoar
