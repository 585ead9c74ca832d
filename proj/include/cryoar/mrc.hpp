#pragma once

#include <filesystem>
#include <vector>

#include "cryoar/fourier.hpp"

// MRC2014 subset: 1024-byte little-endian header, mode 2 (float32) only,
// axis order 1,2,3, x-fastest data, "MAP " tag and 0x44 0x44 0x00 0x00 stamp.

namespace cryoar::mrc {

struct Header {
    int nx = 0, ny = 0, nz = 0;
    int mode = 2;
    float cell_x = 0, cell_y = 0, cell_z = 0;
    int ispg = 0;
    int nsymbt = 0;
    float dmin = 0, dmax = 0, dmean = 0, rms = 0;

    double pixel_size() const { return nx > 0 ? static_cast<double>(cell_x) / nx : 1.0; }
};

struct Data {
    Header header;
    std::vector<float> values;  // nx * ny * nz, x fastest
};

void write(const std::filesystem::path& path, const Data& data);
Data read(const std::filesystem::path& path);
Header read_header(const std::filesystem::path& path);

void write_volume(const std::filesystem::path& path, const Volume& vol);
Volume read_volume(const std::filesystem::path& path);

void write_stack(const std::filesystem::path& path, const std::vector<Image>& images);
std::vector<Image> read_stack(const std::filesystem::path& path);

}  // namespace cryoar::mrc
