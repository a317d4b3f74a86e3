#include "neuroloc/geometry.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "neuroloc/digest.hpp"
#include "neuroloc/error.hpp"
#include "neuroloc/nlt1.hpp"

namespace neuroloc {

using nlohmann::json;

void HeadModel::validate() const {
    require(shell_radii_mm[0] > 0 && shell_radii_mm[0] < shell_radii_mm[1] &&
                shell_radii_mm[1] < shell_radii_mm[2],
            ErrorKind::data, "head shell radii must be strictly increasing and positive");
    for (double s : conductivities_s_per_m)
        require(s > 0, ErrorKind::data, "head conductivities must be positive");
    require(series_terms >= 1, ErrorKind::data, "series_terms must be >= 1");
}

std::uint64_t HeadModel::digest() const {
    Digest d;
    for (double r : shell_radii_mm) d.update_f64(r);
    for (double s : conductivities_s_per_m) d.update_f64(s);
    d.update_u64(static_cast<std::uint64_t>(series_terms));
    return d.value();
}

void SensorArray::validate(double scalp_radius_mm) const {
    require(count() >= 2, ErrorKind::data, "need at least 2 sensors");
    require(labels.size() == static_cast<std::size_t>(count()), ErrorKind::data,
            "sensor label count mismatch");
    for (int i = 0; i < count(); ++i) {
        const double r = positions_mm.row(i).norm();
        require(std::abs(r - scalp_radius_mm) <= 1e-9 * scalp_radius_mm, ErrorKind::data,
                "sensor " + labels[static_cast<std::size_t>(i)] + " is not on the scalp surface");
    }
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j)
            require(labels[i] != labels[j], ErrorKind::data, "duplicate sensor label " + labels[i]);
}

std::uint64_t SensorArray::digest() const {
    Digest d;
    d.update_span(positions_mm.data(), static_cast<std::size_t>(positions_mm.size()));
    for (const auto& l : labels) d.update_str(l);
    return d.value();
}

void SourceSpace::validate() const {
    require(count() >= 1, ErrorKind::data, "empty source space");
    require(spacing_mm > 0, ErrorKind::data, "spacing must be positive");
    require(voxel_to_grid.size() == static_cast<std::size_t>(count()), ErrorKind::data,
            "voxel_to_grid size mismatch");
    for (int i = 0; i < count(); ++i) {
        const auto& g = voxel_to_grid[static_cast<std::size_t>(i)];
        for (int a = 0; a < 3; ++a) {
            require(g[a] >= 0 && g[a] < grid_dims[a], ErrorKind::data, "grid index out of bounds");
            const double expect = spacing_mm * (g[a] + min_index[a]);
            require(centers_mm(i, a) == expect, ErrorKind::data,
                    "voxel center is not an exact lattice point");
        }
    }
}

std::uint64_t SourceSpace::digest() const {
    Digest d;
    d.update_f64(spacing_mm);
    d.update_f64(min_depth_mm);
    for (int a = 0; a < 3; ++a) d.update_u64(static_cast<std::uint64_t>(grid_dims[a]));
    for (int a = 0; a < 3; ++a) d.update_u64(static_cast<std::uint64_t>(min_index[a] + (1 << 20)));
    for (const auto& g : voxel_to_grid)
        for (int a = 0; a < 3; ++a) d.update_u64(static_cast<std::uint64_t>(g[a]));
    return d.value();
}

std::uint64_t LeadField::digest() const {
    Digest d;
    d.update_u64(head.digest());
    d.update_u64(sensors.digest());
    d.update_u64(space.digest());
    d.update_span(gain.data(), static_cast<std::size_t>(gain.size()));
    return d.value();
}

SourceSpace build_source_space(double inner_radius_mm, double spacing_mm, double min_depth_mm) {
    require(spacing_mm > 0 && spacing_mm < inner_radius_mm, ErrorKind::data,
            "require 0 < spacing < inner radius");
    require(min_depth_mm >= 0 && min_depth_mm < inner_radius_mm, ErrorKind::data,
            "require 0 <= min_depth < inner radius");
    const double limit = inner_radius_mm - min_depth_mm;
    const int kmax = static_cast<int>(std::floor(limit / spacing_mm));

    std::vector<std::array<int, 3>> kept;
    for (int i = -kmax; i <= kmax; ++i)
        for (int j = -kmax; j <= kmax; ++j)
            for (int k = -kmax; k <= kmax; ++k) {
                const double x = spacing_mm * i, y = spacing_mm * j, z = spacing_mm * k;
                if (std::sqrt(x * x + y * y + z * z) <= limit) kept.push_back({i, j, k});
            }
    require(!kept.empty(), ErrorKind::data, "empty source space: spacing too large for head");

    std::array<int, 3> lo{kept[0][0], kept[0][1], kept[0][2]};
    std::array<int, 3> hi = lo;
    for (const auto& g : kept)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], g[a]);
            hi[a] = std::max(hi[a], g[a]);
        }

    SourceSpace space;
    space.spacing_mm = spacing_mm;
    space.min_depth_mm = min_depth_mm;
    space.min_index = lo;
    for (int a = 0; a < 3; ++a) space.grid_dims[a] = hi[a] - lo[a] + 1;
    const int n = static_cast<int>(kept.size());
    space.centers_mm.resize(n, 3);
    space.voxel_to_grid.resize(kept.size());
    for (int i = 0; i < n; ++i) {
        const auto& g = kept[static_cast<std::size_t>(i)];
        for (int a = 0; a < 3; ++a) {
            space.voxel_to_grid[static_cast<std::size_t>(i)][a] = g[a] - lo[a];
            space.centers_mm(i, a) = spacing_mm * g[a];
        }
    }
    space.validate();
    return space;
}

SensorArray place_sensors(int m, double scalp_radius_mm, double cap_fraction) {
    require(m >= 2, ErrorKind::data, "need at least 2 sensors");
    require(cap_fraction > 0 && cap_fraction <= 1, ErrorKind::data, "cap_fraction in (0,1]");
    require(scalp_radius_mm > 0, ErrorKind::data, "scalp radius must be positive");

    SensorArray arr;
    arr.positions_mm.resize(m, 3);
    arr.labels.resize(static_cast<std::size_t>(m));
    const double golden_angle = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < m; ++i) {
        const double z = 1.0 - 2.0 * cap_fraction * (i + 0.5) / m;
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden_angle * i;
        arr.positions_mm(i, 0) = scalp_radius_mm * rho * std::cos(phi);
        arr.positions_mm(i, 1) = scalp_radius_mm * rho * std::sin(phi);
        arr.positions_mm(i, 2) = scalp_radius_mm * z;
        arr.labels[static_cast<std::size_t>(i)] = "E" + std::to_string(i + 1);
    }
    arr.validate(scalp_radius_mm);
    return arr;
}

namespace {

// Per-degree transfer gain G_n of the three-shell sphere: scalp potential
// coefficient produced by a unit source coefficient in the innermost region.
// For equal conductivities this reduces to the single-sphere value (2n+1)/n.
//
// Per degree we solve a 5x5 interface/boundary system. The radial basis is
// normalized per layer (outward-growing part scaled at the layer's outer
// radius, inward-decaying part at its inner radius) so every matrix entry
// stays O(n); raw tau^{+-n} powers would make the system unusable for
// n beyond ~150.
std::vector<double> shell_transfer_gains(const HeadModel& head) {
    const double R = head.shell_radii_mm[2];
    const double t1 = head.shell_radii_mm[0] / R;
    const double t2 = head.shell_radii_mm[1] / R;
    const double s1 = head.conductivities_s_per_m[0];
    const double s2 = head.conductivities_s_per_m[1];
    const double s3 = head.conductivities_s_per_m[2];

    std::vector<double> gains(static_cast<std::size_t>(head.series_terms) + 1, 0.0);
    for (int n = 1; n <= head.series_terms; ++n) {
        const double dn = n;
        const double un = std::pow(t1 / t2, dn);        // (t1/t2)^n
        const double un1 = un * (t1 / t2);              // (t1/t2)^{n+1}
        const double wn = std::pow(t2, dn);             // t2^n
        const double wn1 = wn * t2;                     // t2^{n+1}
        // Unknowns x = (a1, a2, b2, a3, b3). Layer potentials:
        //   region 1: a1 (tau/t1)^n            + primary (t1/tau)^{n+1}
        //   region 2: a2 (tau/t2)^n + b2 (t1/tau)^{n+1}
        //   region 3: a3 tau^n      + b3 (t2/tau)^{n+1}
        // The primary source coefficient is normalized to value 1 at t1;
        // the result is rescaled by t1^{-(n+1)} at the end.
        Eigen::Matrix<double, 5, 5> A = Eigen::Matrix<double, 5, 5>::Zero();
        Eigen::Matrix<double, 5, 1> rhs = Eigen::Matrix<double, 5, 1>::Zero();
        // Potential continuity at t1.
        A(0, 0) = 1.0;
        A(0, 1) = -un;
        A(0, 2) = -1.0;
        rhs(0) = -1.0;
        // Radial current continuity at t1 (both sides multiplied by tau).
        A(1, 0) = s1 * dn;
        A(1, 1) = -s2 * dn * un;
        A(1, 2) = s2 * (dn + 1);
        rhs(1) = s1 * (dn + 1);
        // Potential continuity at t2.
        A(2, 1) = 1.0;
        A(2, 2) = un1;
        A(2, 3) = -wn;
        A(2, 4) = -1.0;
        // Radial current continuity at t2.
        A(3, 1) = s2 * dn;
        A(3, 2) = -s2 * (dn + 1) * un1;
        A(3, 3) = -s3 * dn * wn;
        A(3, 4) = s3 * (dn + 1);
        // Insulating scalp surface at tau = 1.
        A(4, 3) = dn;
        A(4, 4) = -(dn + 1) * wn1;
        Eigen::Matrix<double, 5, 1> x = A.partialPivLu().solve(rhs);
        const double surface = x(3) + wn1 * x(4);
        gains[static_cast<std::size_t>(n)] = surface * std::pow(t1, -(dn + 1));
    }
    return gains;
}

}  // namespace

LeadField compute_leadfield(const HeadModel& head, const SensorArray& sensors,
                            const SourceSpace& space) {
    head.validate();
    space.validate();
    const double R = head.shell_radii_mm[2];
    sensors.validate(R);
    const double r_inner = head.shell_radii_mm[0];
    const int n_vox = space.count();
    const int m = sensors.count();
    for (int i = 0; i < n_vox; ++i)
        require(space.centers_mm.row(i).norm() < r_inner, ErrorKind::data,
                "source voxel on or outside the innermost shell");

    const std::vector<double> gains = shell_transfer_gains(head);
    const int n_terms = head.series_terms;
    const double sigma_in = head.conductivities_s_per_m[0];
    const double scale = 1.0 / (4.0 * M_PI * sigma_in * R * R);

    LeadField lf;
    lf.head = head;
    lf.sensors = sensors;
    lf.space = space;
    lf.gain.resize(m, 3 * n_vox);

    // Unit sensor directions.
    MatrixX3 sensor_dir(m, 3);
    for (int e = 0; e < m; ++e) sensor_dir.row(e) = sensors.positions_mm.row(e) / R;

    double worst_tail = 0.0;
    for (int i = 0; i < n_vox; ++i) {
        const Eigen::Vector3d c = space.centers_mm.row(i);
        const double b = c.norm();
        const double t = b / R;
        // Dipole at the exact center: any axis works, only n=1 survives.
        const Eigen::Vector3d bhat = (b > 0) ? Eigen::Vector3d(c / b) : Eigen::Vector3d(0, 0, 1);

        for (int e = 0; e < m; ++e) {
            const Eigen::Vector3d rhat = sensor_dir.row(e);
            const double cosg = std::clamp(rhat.dot(bhat), -1.0, 1.0);
            const double sing = std::sqrt(std::max(0.0, 1.0 - cosg * cosg));
            // In-plane tangential unit vector pointing from the dipole axis
            // toward the sensor. Irrelevant when sing ~ 0 (tangential series
            // vanishes there).
            Eigen::Vector3d that = Eigen::Vector3d::Zero();
            if (sing > 1e-12) that = (rhat - cosg * bhat) / sing;

            // Legendre recurrences: P_n(cos) and T_n = sin * P_n'(cos).
            double p_prev = 1.0, p_cur = cosg;        // P_0, P_1
            double t_prev = 0.0, t_cur = sing;        // T_0, T_1
            double f_rad = 0.0, f_tan = 0.0;
            double tail_rad = 0.0, tail_tan = 0.0;
            double tpow = 1.0;  // t^{n-1}
            for (int n = 1; n <= n_terms; ++n) {
                const double g = gains[static_cast<std::size_t>(n)];
                tail_rad = g * tpow * n * p_cur;
                tail_tan = g * tpow * t_cur;
                f_rad += tail_rad;
                f_tan += tail_tan;
                // Advance recurrences to degree n+1.
                const double p_next = ((2 * n + 1) * cosg * p_cur - n * p_prev) / (n + 1);
                const double t_next = ((2 * n + 1) * cosg * t_cur - (n + 1) * t_prev) / n;
                p_prev = p_cur;
                p_cur = p_next;
                t_prev = t_cur;
                t_cur = t_next;
                tpow *= t;
            }
            const double mag = std::abs(f_rad) + std::abs(f_tan);
            if (mag > 0) {
                const double tail = (std::abs(tail_rad) + std::abs(tail_tan)) / mag;
                worst_tail = std::max(worst_tail, tail);
            }
            for (int k = 0; k < 3; ++k) {
                const double q_r = bhat(k);
                const double q_t = that(k);
                lf.gain(e, 3 * i + k) = scale * (q_r * f_rad + q_t * f_tan);
            }
        }
    }

    lf.worst_tail_rel = worst_tail;
    lf.series_converged = worst_tail < 1e-8;

    // Average reference: every column zero-mean across sensors.
    for (int col = 0; col < lf.gain.cols(); ++col)
        lf.gain.col(col).array() -= lf.gain.col(col).mean();

    require(lf.gain.allFinite(), ErrorKind::numeric, "lead field contains non-finite values");
    return lf;
}

HeadModel perturb_conductivity(const HeadModel& head, const std::array<double, 3>& new_sigma) {
    for (double s : new_sigma) require(s > 0, ErrorKind::data, "conductivities must be positive");
    HeadModel out = head;
    out.conductivities_s_per_m = new_sigma;
    return out;
}

void save_leadfield(const LeadField& lf, const std::filesystem::path& path) {
    Nlt1Tensor t;
    t.dtype = Nlt1Dtype::f64;
    t.dims = {static_cast<std::uint64_t>(lf.gain.rows()), static_cast<std::uint64_t>(lf.gain.cols())};
    t.f64_data.resize(static_cast<std::size_t>(lf.gain.size()));
    for (int r = 0; r < lf.gain.rows(); ++r)
        for (int c = 0; c < lf.gain.cols(); ++c)
            t.f64_data[static_cast<std::size_t>(r) * static_cast<std::size_t>(lf.gain.cols()) +
                       static_cast<std::size_t>(c)] = lf.gain(r, c);
    nlt1_save(path, t);

    json meta;
    meta["format_version"] = 1;
    meta["head"] = {{"shell_radii_mm", lf.head.shell_radii_mm},
                    {"conductivities_s_per_m", lf.head.conductivities_s_per_m},
                    {"series_terms", lf.head.series_terms}};
    json sensors;
    sensors["labels"] = lf.sensors.labels;
    std::vector<std::array<double, 3>> pos(static_cast<std::size_t>(lf.sensors.count()));
    for (int i = 0; i < lf.sensors.count(); ++i)
        pos[static_cast<std::size_t>(i)] = {lf.sensors.positions_mm(i, 0), lf.sensors.positions_mm(i, 1),
                                            lf.sensors.positions_mm(i, 2)};
    sensors["positions_mm"] = pos;
    meta["sensors"] = sensors;
    json space;
    space["spacing_mm"] = lf.space.spacing_mm;
    space["min_depth_mm"] = lf.space.min_depth_mm;
    space["grid_dims"] = lf.space.grid_dims;
    space["min_index"] = lf.space.min_index;
    space["voxel_to_grid"] = lf.space.voxel_to_grid;
    meta["space"] = space;
    meta["reference"] = lf.reference;
    meta["series_converged"] = lf.series_converged;
    meta["worst_tail_rel"] = lf.worst_tail_rel;
    meta["digests"] = {{"head", lf.head.digest()},
                       {"sensors", lf.sensors.digest()},
                       {"space", lf.space.digest()},
                       {"leadfield", lf.digest()}};

    std::filesystem::path meta_path = path;
    meta_path.replace_extension(".meta.json");
    std::ofstream out(meta_path);
    if (!out) fail_data("cannot write " + meta_path.string());
    out << meta.dump(2) << "\n";
}

LeadField load_leadfield(const std::filesystem::path& path) {
    Nlt1Tensor t = nlt1_load(path);
    require(t.dims.size() == 2, ErrorKind::data, "lead field tensor must be 2-D");
    require(t.dtype == Nlt1Dtype::f64, ErrorKind::data, "lead field tensor must be f64");

    std::filesystem::path meta_path = path;
    meta_path.replace_extension(".meta.json");
    std::ifstream in(meta_path);
    if (!in) fail_data("missing lead field sidecar " + meta_path.string());
    json meta = json::parse(in, nullptr, false);
    if (meta.is_discarded()) fail_data("invalid JSON in " + meta_path.string());

    LeadField lf;
    const auto& h = meta.at("head");
    lf.head.shell_radii_mm = h.at("shell_radii_mm").get<std::array<double, 3>>();
    lf.head.conductivities_s_per_m = h.at("conductivities_s_per_m").get<std::array<double, 3>>();
    lf.head.series_terms = h.at("series_terms").get<int>();
    const auto& sj = meta.at("sensors");
    lf.sensors.labels = sj.at("labels").get<std::vector<std::string>>();
    auto pos = sj.at("positions_mm").get<std::vector<std::array<double, 3>>>();
    lf.sensors.positions_mm.resize(static_cast<int>(pos.size()), 3);
    for (std::size_t i = 0; i < pos.size(); ++i)
        for (int a = 0; a < 3; ++a) lf.sensors.positions_mm(static_cast<int>(i), a) = pos[i][static_cast<std::size_t>(a)];
    const auto& sp = meta.at("space");
    lf.space.spacing_mm = sp.at("spacing_mm").get<double>();
    lf.space.min_depth_mm = sp.at("min_depth_mm").get<double>();
    lf.space.grid_dims = sp.at("grid_dims").get<std::array<int, 3>>();
    lf.space.min_index = sp.at("min_index").get<std::array<int, 3>>();
    lf.space.voxel_to_grid = sp.at("voxel_to_grid").get<std::vector<std::array<int, 3>>>();
    const int n = static_cast<int>(lf.space.voxel_to_grid.size());
    lf.space.centers_mm.resize(n, 3);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a)
            lf.space.centers_mm(i, a) =
                lf.space.spacing_mm * (lf.space.voxel_to_grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] +
                                       lf.space.min_index[static_cast<std::size_t>(a)]);
    lf.reference = meta.at("reference").get<std::string>();
    lf.series_converged = meta.at("series_converged").get<bool>();
    lf.worst_tail_rel = meta.at("worst_tail_rel").get<double>();

    require(t.dims[0] == static_cast<std::uint64_t>(lf.sensors.count()), ErrorKind::data,
            "lead field row count does not match sensor array");
    require(t.dims[1] == static_cast<std::uint64_t>(3 * n), ErrorKind::data,
            "lead field column count does not match source space");
    lf.gain.resize(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
    for (int r = 0; r < lf.gain.rows(); ++r)
        for (int c = 0; c < lf.gain.cols(); ++c)
            lf.gain(r, c) = t.f64_data[static_cast<std::size_t>(r) * static_cast<std::size_t>(lf.gain.cols()) +
                                       static_cast<std::size_t>(c)];
    lf.space.validate();

    const auto& digests = meta.at("digests");
    require(digests.at("head").get<std::uint64_t>() == lf.head.digest(), ErrorKind::data,
            "head digest mismatch in sidecar");
    require(digests.at("sensors").get<std::uint64_t>() == lf.sensors.digest(), ErrorKind::data,
            "sensor digest mismatch in sidecar");
    require(digests.at("space").get<std::uint64_t>() == lf.space.digest(), ErrorKind::data,
            "space digest mismatch in sidecar");
    require(digests.at("leadfield").get<std::uint64_t>() == lf.digest(), ErrorKind::data,
            "lead field digest mismatch in sidecar");
    return lf;
}

}  // namespace neuroloc
