#include "neuroloc/simulate.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "neuroloc/digest.hpp"
#include "neuroloc/error.hpp"

namespace neuroloc {

using nlohmann::json;

void SimConfig::validate() const {
    require(n_activ_max >= 1 && n_activ_max <= 20, ErrorKind::data,
            "n_activ_max must be in [1, 20]");
    require(sigma_range_mm[0] > 0 && sigma_range_mm[0] <= sigma_range_mm[1], ErrorKind::data,
            "sigma range must be positive and ordered");
    require(std::isfinite(snr_range_db[0]) && std::isfinite(snr_range_db[1]) &&
                snr_range_db[0] <= snr_range_db[1],
            ErrorKind::data, "snr range must be finite and ordered");
}

std::uint64_t SimConfig::digest() const {
    Digest d;
    d.update_u64(static_cast<std::uint64_t>(n_activ_max));
    d.update_f64(sigma_range_mm[0]);
    d.update_f64(sigma_range_mm[1]);
    d.update_f64(snr_range_db[0]);
    d.update_f64(snr_range_db[1]);
    d.update_u64(base_seed);
    return d.value();
}

void Sample::validate(int n_sources, int n_sensors, int n_activ_max) const {
    require(s_count() >= 1, ErrorKind::data, "sample must have at least one source");
    require(s_count() <= n_activ_max, ErrorKind::data,
            "sample source count exceeds the configured maximum");
    require(x.size() == static_cast<std::size_t>(3 * n_sources), ErrorKind::data,
            "sample x length does not match the source space");
    require(y.size() == static_cast<std::size_t>(n_sensors), ErrorKind::data,
            "sample y length does not match the sensor array");
    for (const auto& b : sources) {
        require(b.sigma_mm > 0, ErrorKind::data, "source width must be positive");
        const double n2 = static_cast<double>(b.dir[0]) * b.dir[0] +
                          static_cast<double>(b.dir[1]) * b.dir[1] +
                          static_cast<double>(b.dir[2]) * b.dir[2];
        require(std::abs(n2 - 1.0) < 1e-5, ErrorKind::data, "source direction must be unit norm");
    }
    for (float v : x) require(std::isfinite(v), ErrorKind::data, "sample x must be finite");
    for (float v : y) require(std::isfinite(v), ErrorKind::data, "sample y must be finite");
}

Matrix sample_activation(const SourceSpace& space, const std::vector<SourceBlob>& blobs) {
    const int n = space.count();
    Matrix x = Matrix::Zero(n, 3);
    for (const auto& b : blobs) {
        require(b.sigma_mm > 0, ErrorKind::data, "source width must be positive");
        const double sigma = b.sigma_mm;
        const double amp = b.amplitude;
        const double norm_const = amp / std::sqrt(2.0 * M_PI * sigma * sigma);
        const double cx = b.center_mm[0], cy = b.center_mm[1], cz = b.center_mm[2];
        const double inv_two_s2 = 1.0 / (2.0 * sigma * sigma);
        for (int i = 0; i < n; ++i) {
            const double dx = space.centers_mm(i, 0) - cx;
            const double dy = space.centers_mm(i, 1) - cy;
            const double dz = space.centers_mm(i, 2) - cz;
            const double w = norm_const * std::exp(-(dx * dx + dy * dy + dz * dz) * inv_two_s2);
            x(i, 0) += w * b.dir[0];
            x(i, 1) += w * b.dir[1];
            x(i, 2) += w * b.dir[2];
        }
    }
    return x;
}

NoisyResult add_noise(const Vector& y_clean, double snr_db, Rng& rng) {
    require(y_clean.allFinite(), ErrorKind::data, "clean sensor vector must be finite");
    require(std::isfinite(snr_db), ErrorKind::data, "snr_db must be finite");
    const int m = static_cast<int>(y_clean.size());
    const double mean = y_clean.mean();
    const double sigma_signal = std::sqrt((y_clean.array() - mean).square().sum() / m);

    NoisyResult out;
    if (sigma_signal == 0.0) {
        out.y = y_clean;
        out.degenerate = true;
        return out;
    }
    out.sigma_noise = sigma_signal * std::pow(10.0, -snr_db / 20.0);
    out.y.resize(m);
    for (int j = 0; j < m; ++j) out.y(j) = y_clean(j) + out.sigma_noise * rng.gauss();
    return out;
}

Sample generate_sample(const SimConfig& cfg, const LeadField& lf, std::uint64_t index) {
    cfg.validate();
    const int n = lf.n_sources();
    require(lf.space.count() == n, ErrorKind::data, "lead field / source space mismatch");

    Sample s;
    s.seed = derive_seed(cfg.base_seed, index);
    Rng rng(s.seed);

    // Draw order is part of the format: S, then per source (center index,
    // width, amplitude, direction), then snr, then the noise vector, all from
    // one stream. Parameters are rounded to f32 immediately so the stored
    // values are the ones the math actually used.
    const int s_count = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.n_activ_max)));
    s.sources.resize(static_cast<std::size_t>(s_count));
    for (auto& b : s.sources) {
        const auto ci = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
        for (int a = 0; a < 3; ++a) b.center_mm[static_cast<std::size_t>(a)] = static_cast<float>(lf.space.centers_mm(ci, a));
        b.sigma_mm = static_cast<float>(rng.uniform(cfg.sigma_range_mm[0], cfg.sigma_range_mm[1]));
        b.amplitude = static_cast<float>(rng.gauss());
        double d3[3];
        rng.unit_vector3(d3);
        for (int a = 0; a < 3; ++a) b.dir[static_cast<std::size_t>(a)] = static_cast<float>(d3[a]);
    }
    s.snr_db = static_cast<float>(rng.uniform(cfg.snr_range_db[0], cfg.snr_range_db[1]));

    const Matrix x64 = sample_activation(lf.space, s.sources);
    s.x.resize(static_cast<std::size_t>(3 * n));
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a)
            s.x[static_cast<std::size_t>(3 * i + a)] = static_cast<float>(x64(i, a));

    // Forward model uses the f32-rounded x so that y can be regenerated
    // bit-exactly from the stored sample.
    Vector xv(3 * n);
    for (std::size_t k = 0; k < s.x.size(); ++k) xv(static_cast<int>(k)) = static_cast<double>(s.x[k]);
    const Vector y_clean = lf.gain * xv;
    NoisyResult noisy = add_noise(y_clean, static_cast<double>(s.snr_db), rng);
    s.noise_degenerate = noisy.degenerate;
    s.y.resize(static_cast<std::size_t>(noisy.y.size()));
    for (int j = 0; j < noisy.y.size(); ++j) s.y[static_cast<std::size_t>(j)] = static_cast<float>(noisy.y(j));
    return s;
}

std::vector<Sample> generate_dataset(const SimConfig& cfg, const LeadField& lf, int n_samples) {
    require(n_samples >= 0, ErrorKind::data, "n_samples must be nonnegative");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) out.push_back(generate_sample(cfg, lf, static_cast<std::uint64_t>(i)));
    return out;
}

std::size_t sample_record_size(int s_count, int n_sources, int n_sensors) {
    return 4 + static_cast<std::size_t>(s_count) * 32 + 4 + 8 +
           static_cast<std::size_t>(3 * n_sources) * 4 + static_cast<std::size_t>(n_sensors) * 4;
}

namespace {

json config_to_json(const SimConfig& cfg) {
    return json{{"n_activ_max", cfg.n_activ_max},
                {"sigma_range_mm", cfg.sigma_range_mm},
                {"snr_range_db", cfg.snr_range_db},
                {"base_seed", cfg.base_seed}};
}

SimConfig config_from_json(const json& j) {
    SimConfig cfg;
    cfg.n_activ_max = j.at("n_activ_max").get<int>();
    cfg.sigma_range_mm = j.at("sigma_range_mm").get<std::array<double, 2>>();
    cfg.snr_range_db = j.at("snr_range_db").get<std::array<double, 2>>();
    cfg.base_seed = j.at("base_seed").get<std::uint64_t>();
    return cfg;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (in.gcount() != static_cast<std::streamsize>(sizeof v))
        fail_data("corrupt dataset (truncated record): " + path.string());
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const SimConfig& cfg,
                  std::uint64_t leadfield_digest, int n_sources, int n_sensors,
                  const std::vector<Sample>& samples) {
    cfg.validate();
    std::filesystem::create_directories(dir);

    json manifest;
    manifest["format_version"] = 1;
    manifest["N"] = n_sources;
    manifest["M"] = n_sensors;
    manifest["n_samples"] = samples.size();
    manifest["cfg"] = config_to_json(cfg);
    manifest["leadfield_digest"] = leadfield_digest;
    std::ofstream mf(dir / "manifest.json");
    if (!mf) fail_data("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";

    std::ofstream bin(dir / "samples.bin", std::ios::binary | std::ios::trunc);
    if (!bin) fail_data("cannot write " + (dir / "samples.bin").string());
    for (const auto& s : samples) {
        s.validate(n_sources, n_sensors, cfg.n_activ_max);
        write_pod(bin, static_cast<std::uint32_t>(s.s_count()));
        for (const auto& b : s.sources) {
            for (float v : b.center_mm) write_pod(bin, v);
            write_pod(bin, b.sigma_mm);
            write_pod(bin, b.amplitude);
            for (float v : b.dir) write_pod(bin, v);
        }
        write_pod(bin, s.snr_db);
        write_pod(bin, s.seed);
        bin.write(reinterpret_cast<const char*>(s.x.data()),
                  static_cast<std::streamsize>(s.x.size() * 4));
        bin.write(reinterpret_cast<const char*>(s.y.data()),
                  static_cast<std::streamsize>(s.y.size() * 4));
    }
    if (!bin) fail_data("write failed: " + (dir / "samples.bin").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) fail_data("missing dataset manifest: " + (dir / "manifest.json").string());
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) fail_data("invalid JSON in dataset manifest");

    Dataset d;
    require(manifest.at("format_version").get<int>() == 1, ErrorKind::data,
            "unsupported dataset format version");
    d.n_sources = manifest.at("N").get<int>();
    d.n_sensors = manifest.at("M").get<int>();
    d.cfg = config_from_json(manifest.at("cfg"));
    d.cfg.validate();
    d.leadfield_digest = manifest.at("leadfield_digest").get<std::uint64_t>();
    const auto n_samples = manifest.at("n_samples").get<std::uint64_t>();
    require(d.n_sources >= 1 && d.n_sensors >= 1, ErrorKind::data, "bad dataset dimensions");

    const auto bin_path = dir / "samples.bin";
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) fail_data("missing dataset payload: " + bin_path.string());

    d.samples.reserve(n_samples);
    for (std::uint64_t i = 0; i < n_samples; ++i) {
        Sample s;
        std::uint32_t s_count = 0;
        read_pod(bin, s_count, bin_path);
        // A wildly implausible count means the record stream is misaligned
        // (e.g. the manifest lied about N or M).
        require(s_count >= 1 && s_count <= static_cast<std::uint32_t>(d.cfg.n_activ_max),
                ErrorKind::data, "dataset record stream is inconsistent with its manifest");
        s.sources.resize(s_count);
        for (auto& b : s.sources) {
            for (float& v : b.center_mm) read_pod(bin, v, bin_path);
            read_pod(bin, b.sigma_mm, bin_path);
            read_pod(bin, b.amplitude, bin_path);
            for (float& v : b.dir) read_pod(bin, v, bin_path);
        }
        read_pod(bin, s.snr_db, bin_path);
        read_pod(bin, s.seed, bin_path);
        s.x.resize(static_cast<std::size_t>(3 * d.n_sources));
        bin.read(reinterpret_cast<char*>(s.x.data()), static_cast<std::streamsize>(s.x.size() * 4));
        if (bin.gcount() != static_cast<std::streamsize>(s.x.size() * 4))
            fail_data("corrupt dataset (truncated record): " + bin_path.string());
        s.y.resize(static_cast<std::size_t>(d.n_sensors));
        bin.read(reinterpret_cast<char*>(s.y.data()), static_cast<std::streamsize>(s.y.size() * 4));
        if (bin.gcount() != static_cast<std::streamsize>(s.y.size() * 4))
            fail_data("corrupt dataset (truncated record): " + bin_path.string());
        s.validate(d.n_sources, d.n_sensors, d.cfg.n_activ_max);
        d.samples.push_back(std::move(s));
    }
    char probe;
    bin.read(&probe, 1);
    require(bin.eof(), ErrorKind::data,
            "dataset payload has trailing bytes beyond the manifest record count");
    return d;
}

}  // namespace neuroloc
