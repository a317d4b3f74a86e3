#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "neuroloc/geometry.hpp"
#include "neuroloc/rng.hpp"

namespace neuroloc {

// Configuration for the synthetic source/measurement generator. Amplitudes
// are standard normal; the other parameters are drawn uniformly from the
// ranges below. A point range (lo == hi) is allowed everywhere.
struct SimConfig {
    int n_activ_max = 5;                          // S ~ U{1..n_activ_max}
    std::array<double, 2> sigma_range_mm{10.0, 80.0};
    std::array<double, 2> snr_range_db{0.0, 30.0};
    std::uint64_t base_seed = 0;

    void validate() const;
    std::uint64_t digest() const;
};

// One Gaussian activation blob. Fields are kept at f32, matching the record
// format exactly, so that save/load round trips and seeded regeneration are
// bit-identical; all math upcasts to f64.
struct SourceBlob {
    std::array<float, 3> center_mm{0, 0, 0};
    float sigma_mm = 0;
    float amplitude = 0;
    std::array<float, 3> dir{0, 0, 0};
};

// One simulated instant: ground truth x (N voxels x 3 moments, voxel-major),
// noisy sensor vector y, and every generating parameter.
struct Sample {
    std::vector<SourceBlob> sources;
    float snr_db = 0;
    std::uint64_t seed = 0;         // per-sample stream seed
    std::vector<float> x;           // 3N, layout (x0,y0,z0, x1,y1,z1, ...)
    std::vector<float> y;           // M
    bool noise_degenerate = false;  // clean sensor vector was constant (not persisted)

    int s_count() const { return static_cast<int>(sources.size()); }
    void validate(int n_sources, int n_sensors, int n_activ_max) const;
};

// Evaluate the blob-sum activation field at every voxel (no cutoff radius):
//   x_i = sum_s a_s (2 pi sigma_s^2)^{-1/2} exp(-d(p_i, c_s)^2 / (2 sigma_s^2)) v_s
Matrix sample_activation(const SourceSpace& space, const std::vector<SourceBlob>& blobs);

struct NoisyResult {
    Vector y;
    double sigma_noise = 0.0;
    bool degenerate = false;  // constant input returned unchanged
};

// Add i.i.d. Gaussian sensor noise at the requested SNR, with
// sigma_noise = sigma_signal * 10^(-snr_db/20) and sigma_signal the standard
// deviation of y_clean across sensors.
NoisyResult add_noise(const Vector& y_clean, double snr_db, Rng& rng);

// Deterministic per-index generation: the sample depends only on
// (cfg, lf, index), never on generation order.
Sample generate_sample(const SimConfig& cfg, const LeadField& lf, std::uint64_t index);

std::vector<Sample> generate_dataset(const SimConfig& cfg, const LeadField& lf, int n_samples);

// Dataset directory layout: manifest.json + samples.bin (record-oriented,
// little-endian, variable-length records ordered by sample index).
void save_dataset(const std::filesystem::path& dir, const SimConfig& cfg,
                  std::uint64_t leadfield_digest, int n_sources, int n_sensors,
                  const std::vector<Sample>& samples);

struct Dataset {
    SimConfig cfg;
    std::uint64_t leadfield_digest = 0;
    int n_sources = 0;
    int n_sensors = 0;
    std::vector<Sample> samples;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Size in bytes of one serialized record with the given source count.
std::size_t sample_record_size(int s_count, int n_sources, int n_sensors);

}  // namespace neuroloc
