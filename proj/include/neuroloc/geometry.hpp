#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace neuroloc {

using Matrix = Eigen::MatrixXd;
using MatrixX3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Vector = Eigen::VectorXd;

// Concentric three-shell spherical head. Shells are (brain, skull, scalp)
// from the inside out; the scalp potential of an interior dipole is the
// truncated Legendre series solution of the layered Poisson problem.
struct HeadModel {
    std::array<double, 3> shell_radii_mm{79.0, 82.0, 87.0};
    std::array<double, 3> conductivities_s_per_m{0.3, 0.006, 0.3};  // brain, skull, scalp
    int series_terms = 60;

    void validate() const;
    std::uint64_t digest() const;
};

struct SensorArray {
    MatrixX3 positions_mm;  // M x 3, all on the scalp surface
    std::vector<std::string> labels;

    int count() const { return static_cast<int>(positions_mm.rows()); }
    void validate(double scalp_radius_mm) const;
    std::uint64_t digest() const;
};

// Regular lattice of source voxels inside the innermost shell. Centers are
// exactly spacing * (grid_index + min_index), which keeps the voxel <->
// cubic-grid map exact and makes serialization lossless.
struct SourceSpace {
    MatrixX3 centers_mm;  // N x 3
    double spacing_mm = 0.0;
    double min_depth_mm = 0.0;
    std::array<int, 3> grid_dims{0, 0, 0};
    std::array<int, 3> min_index{0, 0, 0};
    std::vector<std::array<int, 3>> voxel_to_grid;  // N entries, within grid_dims

    int count() const { return static_cast<int>(centers_mm.rows()); }
    void validate() const;
    std::uint64_t digest() const;
};

struct LeadField {
    Matrix gain;  // M x 3N; column block i = the three orientation columns of voxel i
    HeadModel head;
    SensorArray sensors;
    SourceSpace space;
    std::string reference = "average";
    bool series_converged = true;
    double worst_tail_rel = 0.0;  // largest last-term relative contribution seen

    int n_sensors() const { return static_cast<int>(gain.rows()); }
    int n_sources() const { return static_cast<int>(gain.cols()) / 3; }
    std::uint64_t digest() const;
};

SourceSpace build_source_space(double inner_radius_mm, double spacing_mm, double min_depth_mm);

// Deterministic Fibonacci-lattice layout on the top spherical cap covering
// `cap_fraction` of the sphere.
SensorArray place_sensors(int m, double scalp_radius_mm, double cap_fraction);

LeadField compute_leadfield(const HeadModel& head, const SensorArray& sensors, const SourceSpace& space);

HeadModel perturb_conductivity(const HeadModel& head, const std::array<double, 3>& new_sigma);

void save_leadfield(const LeadField& lf, const std::filesystem::path& path);
LeadField load_leadfield(const std::filesystem::path& path);

}  // namespace neuroloc
