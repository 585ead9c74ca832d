#include "cryoar/mrc.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "cryoar/error.hpp"

namespace cryoar::mrc {

namespace {

constexpr std::size_t kHeaderBytes = 1024;

static_assert(std::endian::native == std::endian::little, "MRC I/O assumes a little-endian host");

void put_i32(std::array<char, kHeaderBytes>& h, int word, std::int32_t v) {
    std::memcpy(h.data() + 4 * (word - 1), &v, 4);
}
void put_f32(std::array<char, kHeaderBytes>& h, int word, float v) { std::memcpy(h.data() + 4 * (word - 1), &v, 4); }
std::int32_t get_i32(const std::array<char, kHeaderBytes>& h, int word) {
    std::int32_t v;
    std::memcpy(&v, h.data() + 4 * (word - 1), 4);
    return v;
}
float get_f32(const std::array<char, kHeaderBytes>& h, int word) {
    float v;
    std::memcpy(&v, h.data() + 4 * (word - 1), 4);
    return v;
}

void fill_stats(Data& d) {
    const auto& v = d.values;
    if (v.empty()) return;
    double sum = 0.0, sq = 0.0;
    float lo = v[0], hi = v[0];
    for (float x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        sum += x;
    }
    const double mean = sum / static_cast<double>(v.size());
    for (float x : v) sq += (x - mean) * (x - mean);
    d.header.dmin = lo;
    d.header.dmax = hi;
    d.header.dmean = static_cast<float>(mean);
    d.header.rms = static_cast<float>(std::sqrt(sq / static_cast<double>(v.size())));
}

Header parse_header(const std::array<char, kHeaderBytes>& h, const std::filesystem::path& path) {
    if (std::memcmp(h.data() + 208, "MAP ", 4) != 0) throw IoError(path.string() + ": missing MAP tag");
    Header out;
    out.nx = get_i32(h, 1);
    out.ny = get_i32(h, 2);
    out.nz = get_i32(h, 3);
    out.mode = get_i32(h, 4);
    if (out.mode != 2)
        throw IoError(path.string() + ": unsupported MRC mode " + std::to_string(out.mode) + " (only mode 2)");
    if (out.nx <= 0 || out.ny <= 0 || out.nz <= 0) throw IoError(path.string() + ": bad dimensions");
    if (get_i32(h, 17) != 1 || get_i32(h, 18) != 2 || get_i32(h, 19) != 3)
        throw IoError(path.string() + ": unsupported axis order");
    out.cell_x = get_f32(h, 11);
    out.cell_y = get_f32(h, 12);
    out.cell_z = get_f32(h, 13);
    out.dmin = get_f32(h, 20);
    out.dmax = get_f32(h, 21);
    out.dmean = get_f32(h, 22);
    out.ispg = get_i32(h, 23);
    out.nsymbt = get_i32(h, 24);
    out.rms = get_f32(h, 55);
    if (out.nsymbt < 0) throw IoError(path.string() + ": bad extended header size");
    return out;
}

}  // namespace

void write(const std::filesystem::path& path, const Data& data) {
    const auto& hd = data.header;
    const std::size_t count = static_cast<std::size_t>(hd.nx) * hd.ny * hd.nz;
    if (hd.nx <= 0 || hd.ny <= 0 || hd.nz <= 0 || data.values.size() != count)
        throw std::invalid_argument("mrc::write: dimensions do not match data");
    Data d = data;
    fill_stats(d);

    std::array<char, kHeaderBytes> h{};
    put_i32(h, 1, hd.nx);
    put_i32(h, 2, hd.ny);
    put_i32(h, 3, hd.nz);
    put_i32(h, 4, 2);
    put_i32(h, 8, hd.nx);
    put_i32(h, 9, hd.ny);
    put_i32(h, 10, hd.nz);
    put_f32(h, 11, hd.cell_x);
    put_f32(h, 12, hd.cell_y);
    put_f32(h, 13, hd.cell_z);
    put_f32(h, 14, 90.0f);
    put_f32(h, 15, 90.0f);
    put_f32(h, 16, 90.0f);
    put_i32(h, 17, 1);
    put_i32(h, 18, 2);
    put_i32(h, 19, 3);
    put_f32(h, 20, d.header.dmin);
    put_f32(h, 21, d.header.dmax);
    put_f32(h, 22, d.header.dmean);
    put_i32(h, 23, hd.ispg);
    put_i32(h, 24, 0);
    put_i32(h, 28, 20140);
    std::memcpy(h.data() + 208, "MAP ", 4);
    const unsigned char stamp[4] = {0x44, 0x44, 0x00, 0x00};
    std::memcpy(h.data() + 212, stamp, 4);
    put_f32(h, 55, d.header.rms);
    put_i32(h, 56, 0);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(data.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!out) throw IoError("write failed: " + path.string());
}

Header read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::array<char, kHeaderBytes> h{};
    if (!in.read(h.data(), static_cast<std::streamsize>(h.size()))) throw IoError(path.string() + ": short header");
    return parse_header(h, path);
}

Data read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::array<char, kHeaderBytes> h{};
    if (!in.read(h.data(), static_cast<std::streamsize>(h.size()))) throw IoError(path.string() + ": short header");
    Data d;
    d.header = parse_header(h, path);
    in.seekg(static_cast<std::streamoff>(kHeaderBytes) + d.header.nsymbt);
    const std::size_t count = static_cast<std::size_t>(d.header.nx) * d.header.ny * d.header.nz;
    d.values.resize(count);
    if (!in.read(reinterpret_cast<char*>(d.values.data()), static_cast<std::streamsize>(count * sizeof(float))))
        throw IoError(path.string() + ": truncated data");
    return d;
}

void write_volume(const std::filesystem::path& path, const Volume& vol) {
    Data d;
    const int n = static_cast<int>(vol.n);
    d.header.nx = d.header.ny = d.header.nz = n;
    d.header.cell_x = d.header.cell_y = d.header.cell_z = static_cast<float>(vol.voxel_size * n);
    d.header.ispg = 1;
    d.values.resize(static_cast<std::size_t>(vol.data.size()));
    for (Eigen::Index i = 0; i < vol.data.size(); ++i) d.values[static_cast<std::size_t>(i)] = static_cast<float>(vol.data[i]);
    write(path, d);
}

Volume read_volume(const std::filesystem::path& path) {
    const Data d = read(path);
    const auto& h = d.header;
    if (h.nx != h.ny || h.nx != h.nz) throw IoError(path.string() + ": volume is not cubic");
    Volume vol(h.nx, h.pixel_size());
    for (std::size_t i = 0; i < d.values.size(); ++i) vol.data[static_cast<Eigen::Index>(i)] = d.values[i];
    return vol;
}

void write_stack(const std::filesystem::path& path, const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("mrc::write_stack: empty stack");
    const int n = static_cast<int>(images.front().size());
    Data d;
    d.header.nx = d.header.ny = n;
    d.header.nz = static_cast<int>(images.size());
    const double px = images.front().pixel_size;
    d.header.cell_x = d.header.cell_y = static_cast<float>(px * n);
    d.header.cell_z = static_cast<float>(px * d.header.nz);
    d.values.reserve(static_cast<std::size_t>(n) * n * images.size());
    for (const auto& img : images) {
        if (img.size() != n) throw std::invalid_argument("mrc::write_stack: images differ in size");
        for (Eigen::Index y = 0; y < n; ++y)
            for (Eigen::Index x = 0; x < n; ++x) d.values.push_back(static_cast<float>(img(y, x)));
    }
    write(path, d);
}

std::vector<Image> read_stack(const std::filesystem::path& path) {
    const Data d = read(path);
    const auto& h = d.header;
    if (h.nx != h.ny) throw IoError(path.string() + ": stack images are not square");
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(h.nz));
    std::size_t k = 0;
    for (int z = 0; z < h.nz; ++z) {
        Image img(h.nx, h.pixel_size());
        for (int y = 0; y < h.ny; ++y)
            for (int x = 0; x < h.nx; ++x) img(y, x) = d.values[k++];
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace cryoar::mrc
