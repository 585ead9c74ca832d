#include "cryoar/geometry.hpp"

#include <string>

#include "cryoar/csv.hpp"
#include "cryoar/error.hpp"

namespace cryoar {

namespace {

const std::vector<std::string> kPoseHeader = {"index", "r11", "r12", "r13", "r21", "r22",
                                              "r23",   "r31", "r32", "r33", "tx_px", "ty_px"};

}  // namespace

void write_pose_csv(const std::filesystem::path& path, const std::vector<Pose>& poses) {
    std::vector<std::vector<double>> rows;
    rows.reserve(poses.size());
    for (std::size_t i = 0; i < poses.size(); ++i) {
        std::vector<double> row{static_cast<double>(i)};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) row.push_back(poses[i].rot(r, c));
        row.push_back(poses[i].shift.x());
        row.push_back(poses[i].shift.y());
        rows.push_back(std::move(row));
    }
    csv::write(path, kPoseHeader, rows);
}

std::vector<Pose> read_pose_csv(const std::filesystem::path& path) {
    const auto table = csv::read(path, kPoseHeader);
    std::vector<Pose> poses;
    poses.reserve(table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        if (row[0] != static_cast<double>(i))
            throw IoError(path.string() + ": pose rows out of order at row " + std::to_string(i));
        Mat3 m;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) m(r, c) = row[1 + 3 * r + c];
        // Decimal text may lose the last ulp; accept near-rotations and re-project.
        if (!Rotation::is_rotation(m, 1e-6))
            throw IoError(path.string() + ": row " + std::to_string(i) + " is not a rotation");
        Pose p;
        p.rot = Rotation::is_rotation(m) ? Rotation(m) : Rotation::nearest(m);
        p.shift = Vec2(row[10], row[11]);
        if (!p.shift.allFinite()) throw IoError(path.string() + ": non-finite shift in row " + std::to_string(i));
        poses.push_back(p);
    }
    return poses;
}

}  // namespace cryoar
