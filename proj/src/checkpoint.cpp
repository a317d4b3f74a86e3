#include "neuroloc/checkpoint.hpp"

#include <fstream>
#include <json.hpp>
#include <utility>
#include <vector>

#include "neuroloc/nlt1.hpp"

namespace neuroloc {

using nlohmann::json;

void TrainCheckpoint::validate() const {
    require(model_kind == "piunet" || model_kind == "fcn", ErrorKind::data,
            "unknown model kind: " + model_kind);
    require(step >= 0, ErrorKind::data, "checkpoint step must be non-negative");
    if (has_adam) require(lr > 0.0, ErrorKind::data, "optimizer state requires a positive lr");
    if (model_kind == "piunet")
        piunet.validate();
    else
        fcn.validate();
}

namespace {

template <typename S>
constexpr Nlt1Dtype dtype_of() {
    return sizeof(S) == 8 ? Nlt1Dtype::f64 : Nlt1Dtype::f32;
}

const char* dtype_name(Nlt1Dtype d) { return d == Nlt1Dtype::f64 ? "f64" : "f32"; }

template <typename S>
Nlt1Tensor to_tensor(const std::vector<S>& values, const std::vector<int>& shape) {
    Nlt1Tensor t;
    t.dtype = dtype_of<S>();
    for (int d : shape) t.dims.push_back(static_cast<std::uint64_t>(d));
    if constexpr (sizeof(S) == 8)
        t.f64_data.assign(values.begin(), values.end());
    else
        t.f32_data.assign(values.begin(), values.end());
    return t;
}

template <typename S>
void from_tensor(const Nlt1Tensor& t, std::vector<S>& out, const std::vector<int>& shape,
                 const std::string& name) {
    require(t.dtype == dtype_of<S>(), ErrorKind::data,
            "stored dtype does not match the requested precision for " + name);
    require(t.dims.size() == shape.size(), ErrorKind::data, "stored rank mismatch for " + name);
    for (std::size_t i = 0; i < shape.size(); ++i)
        require(t.dims[i] == static_cast<std::uint64_t>(shape[i]), ErrorKind::data,
                "stored shape mismatch for " + name);
    if constexpr (sizeof(S) == 8)
        out.assign(t.f64_data.begin(), t.f64_data.end());
    else
        out.assign(t.f32_data.begin(), t.f32_data.end());
}

struct ArchiveEntry {
    std::string name;
    Nlt1Tensor tensor;
};

void write_archive(const std::filesystem::path& dir, const std::string& stem,
                   const std::vector<ArchiveEntry>& entries) {
    const std::filesystem::path bin_path = dir / (stem + ".bin");
    const std::filesystem::path json_path = dir / (stem + ".json");
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) fail_data("cannot open for writing: " + bin_path.string());
    json manifest;
    manifest["format"] = "nlt1-archive";
    manifest["entries"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        nlt1_write(bin, e.tensor, bin_path.string());
        json item;
        item["name"] = e.name;
        item["offset"] = offset;
        item["bytes"] = nlt1_record_bytes(e.tensor);
        item["dtype"] = dtype_name(e.tensor.dtype);
        item["shape"] = e.tensor.dims;
        manifest["entries"].push_back(std::move(item));
        offset += nlt1_record_bytes(e.tensor);
    }
    if (!bin) fail_data("write failed: " + bin_path.string());
    bin.close();
    std::ofstream js(json_path, std::ios::trunc);
    if (!js) fail_data("cannot open for writing: " + json_path.string());
    js << manifest.dump(2) << '\n';
    if (!js) fail_data("write failed: " + json_path.string());
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail_data("missing checkpoint artifact: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail_data("corrupt JSON in " + path.string() + ": " + e.what());
    }
}

// Reads archive entries back in manifest order; `sink(name, tensor)` is
// called once per entry.
template <typename Sink>
void read_archive(const std::filesystem::path& dir, const std::string& stem, Sink&& sink) {
    const std::filesystem::path bin_path = dir / (stem + ".bin");
    const std::filesystem::path json_path = dir / (stem + ".json");
    const json manifest = read_json_file(json_path);
    try {
        require(manifest.at("format").get<std::string>() == "nlt1-archive", ErrorKind::data,
                "unknown archive format in " + json_path.string());
        std::ifstream bin(bin_path, std::ios::binary);
        if (!bin) fail_data("missing checkpoint artifact: " + bin_path.string());
        for (const auto& item : manifest.at("entries")) {
            const auto name = item.at("name").get<std::string>();
            const auto offset = item.at("offset").get<std::uint64_t>();
            bin.seekg(static_cast<std::streamoff>(offset));
            if (!bin) fail_data("corrupt archive (bad offset) in " + bin_path.string());
            Nlt1Tensor t = nlt1_read(bin, bin_path.string() + " [" + name + "]");
            sink(name, std::move(t));
        }
    } catch (const json::exception& e) {
        fail_data("corrupt manifest " + json_path.string() + ": " + e.what());
    }
}

json piunet_to_json(const PiuNetConfig& c) {
    json j;
    j["grid"] = c.grid;
    j["base_channels"] = c.base_channels;
    j["depth"] = c.depth;
    j["blocks_per_level"] = c.blocks_per_level;
    j["attn_at_bottleneck"] = c.attn_at_bottleneck;
    j["in_channels"] = c.in_channels;
    j["out_channels"] = c.out_channels;
    j["groupnorm_groups"] = c.groupnorm_groups;
    return j;
}

PiuNetConfig piunet_from_json(const json& j) {
    PiuNetConfig c;
    c.grid = j.at("grid").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.depth = j.at("depth").get<int>();
    c.blocks_per_level = j.at("blocks_per_level").get<int>();
    c.attn_at_bottleneck = j.at("attn_at_bottleneck").get<bool>();
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.groupnorm_groups = j.at("groupnorm_groups").get<int>();
    return c;
}

json fcn_to_json(const FcnConfig& c) {
    json j;
    j["n_sensors"] = c.n_sensors;
    j["n_sources"] = c.n_sources;
    j["width"] = c.width;
    j["hidden_layers"] = c.hidden_layers;
    return j;
}

FcnConfig fcn_from_json(const json& j) {
    FcnConfig c;
    c.n_sensors = j.at("n_sensors").get<int>();
    c.n_sources = j.at("n_sources").get<int>();
    c.width = j.at("width").get<int>();
    c.hidden_layers = j.at("hidden_layers").get<int>();
    return c;
}

}  // namespace

template <typename S>
void save_param_archive(const std::filesystem::path& dir, const std::string& stem,
                        const ad::ParamStore<S>& params) {
    std::vector<ArchiveEntry> entries;
    entries.reserve(params.count());
    for (const auto& name : params.names()) {
        const ad::TensorNode<S>& p = params.at(name);
        entries.push_back({name, to_tensor(p.values, p.shape)});
    }
    write_archive(dir, stem, entries);
}

template <typename S>
void load_param_archive(const std::filesystem::path& dir, const std::string& stem,
                        ad::ParamStore<S>& params) {
    std::size_t index = 0;
    read_archive(dir, stem, [&](const std::string& name, Nlt1Tensor t) {
        require(index < params.count(), ErrorKind::data,
                "archive has more tensors than the model expects");
        require(params.names()[index] == name, ErrorKind::data,
                "archive entry order mismatch: expected " + params.names()[index] + ", found " +
                    name);
        ad::TensorNode<S>& p = params.at(name);
        from_tensor(t, p.values, p.shape, name);
        ++index;
    });
    require(index == params.count(), ErrorKind::data,
            "archive is missing tensors for this model");
}

template <typename S>
void save_checkpoint(const std::filesystem::path& dir, const TrainCheckpoint& meta,
                     const ad::ParamStore<S>& params, const ad::AdamState<S>* adam) {
    TrainCheckpoint m = meta;
    m.has_adam = adam != nullptr;
    m.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail_data("cannot create checkpoint directory: " + dir.string());

    json config;
    config["model_kind"] = m.model_kind;
    config["model"] = m.model_kind == "piunet" ? piunet_to_json(m.piunet) : fcn_to_json(m.fcn);
    config["precision"] = sizeof(S) == 8 ? "f64" : "f32";
    if (m.has_op)
        config["operator"] = {{"method", method_name(m.op.method)}, {"reg", m.op.reg}};
    {
        std::ofstream out(dir / "config.json", std::ios::trunc);
        if (!out) fail_data("cannot open for writing: " + (dir / "config.json").string());
        out << config.dump(2) << '\n';
    }

    save_param_archive(dir, "params", params);

    json state;
    state["step"] = m.step;
    state["seed"] = m.seed;
    state["has_adam"] = m.has_adam;
    state["adam"] = {{"lr", m.lr},
                     {"beta1", m.beta1},
                     {"beta2", m.beta2},
                     {"eps", m.eps},
                     {"t", adam != nullptr ? adam->t : m.adam_t}};
    {
        std::ofstream out(dir / "train_state.json", std::ios::trunc);
        if (!out) fail_data("cannot open for writing: " + (dir / "train_state.json").string());
        out << state.dump(2) << '\n';
    }

    if (adam != nullptr) {
        require(adam->m.size() == params.count() && adam->v.size() == params.count(),
                ErrorKind::data, "optimizer state does not match the parameter store");
        std::vector<ArchiveEntry> entries;
        entries.reserve(2 * params.count());
        std::size_t pi = 0;
        for (const auto& name : params.names()) {
            const auto& shape = params.at(name).shape;
            entries.push_back({"m." + name, to_tensor(adam->m[pi], shape)});
            entries.push_back({"v." + name, to_tensor(adam->v[pi], shape)});
            ++pi;
        }
        write_archive(dir, "adam", entries);
    }
}

TrainCheckpoint read_checkpoint_meta(const std::filesystem::path& dir) {
    const json config = read_json_file(dir / "config.json");
    const json state = read_json_file(dir / "train_state.json");
    TrainCheckpoint meta;
    try {
        meta.model_kind = config.at("model_kind").get<std::string>();
        if (meta.model_kind == "piunet")
            meta.piunet = piunet_from_json(config.at("model"));
        else if (meta.model_kind == "fcn")
            meta.fcn = fcn_from_json(config.at("model"));
        if (config.contains("operator")) {
            const json& op = config.at("operator");
            meta.op.method = method_from_name(op.at("method").get<std::string>());
            meta.op.reg = op.at("reg").get<double>();
            meta.has_op = true;
        }
        meta.step = state.at("step").get<std::int64_t>();
        meta.seed = state.at("seed").get<std::uint64_t>();
        meta.has_adam = state.at("has_adam").get<bool>();
        const json& adam = state.at("adam");
        meta.lr = adam.at("lr").get<double>();
        meta.beta1 = adam.at("beta1").get<double>();
        meta.beta2 = adam.at("beta2").get<double>();
        meta.eps = adam.at("eps").get<double>();
        meta.adam_t = adam.at("t").get<std::int64_t>();
    } catch (const json::exception& e) {
        fail_data("corrupt checkpoint metadata in " + dir.string() + ": " + e.what());
    }
    meta.validate();
    return meta;
}

template <typename S>
void load_checkpoint_params(const std::filesystem::path& dir, ad::ParamStore<S>& params) {
    load_param_archive(dir, "params", params);
}

template <typename S>
void load_checkpoint_adam(const std::filesystem::path& dir, ad::ParamStore<S>& params,
                          ad::AdamState<S>& adam) {
    require(adam.m.size() == params.count() && adam.v.size() == params.count(), ErrorKind::data,
            "optimizer state does not match the parameter store");
    std::size_t index = 0;
    read_archive(dir, "adam", [&](const std::string& name, Nlt1Tensor t) {
        const std::size_t pi = index / 2;
        require(pi < params.count(), ErrorKind::data,
                "optimizer archive has more tensors than the model expects");
        const std::string& pname = params.names()[pi];
        const bool is_m = index % 2 == 0;
        require(name == (is_m ? "m." + pname : "v." + pname), ErrorKind::data,
                "optimizer archive entry order mismatch at " + name);
        from_tensor(t, is_m ? adam.m[pi] : adam.v[pi], params.at(pname).shape, name);
        ++index;
    });
    require(index == 2 * params.count(), ErrorKind::data,
            "optimizer archive is missing tensors for this model");
}

template <typename S>
PiuNetModel<S> load_piunet_checkpoint(const std::filesystem::path& dir) {
    const TrainCheckpoint meta = read_checkpoint_meta(dir);
    require(meta.model_kind == "piunet", ErrorKind::data,
            "checkpoint at " + dir.string() + " does not hold the volumetric model");
    PiuNetModel<S> model = build_piunet<S>(meta.piunet, meta.seed);
    load_checkpoint_params(dir, model.params);
    return model;
}

template <typename S>
FcnModel<S> load_fcn_checkpoint(const std::filesystem::path& dir) {
    const TrainCheckpoint meta = read_checkpoint_meta(dir);
    require(meta.model_kind == "fcn", ErrorKind::data,
            "checkpoint at " + dir.string() + " does not hold the fully connected model");
    FcnModel<S> model = build_fcn<S>(meta.fcn, meta.seed);
    load_checkpoint_params(dir, model.params);
    return model;
}

template void save_param_archive<double>(const std::filesystem::path&, const std::string&,
                                         const ad::ParamStore<double>&);
template void save_param_archive<float>(const std::filesystem::path&, const std::string&,
                                        const ad::ParamStore<float>&);
template void load_param_archive<double>(const std::filesystem::path&, const std::string&,
                                         ad::ParamStore<double>&);
template void load_param_archive<float>(const std::filesystem::path&, const std::string&,
                                        ad::ParamStore<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const TrainCheckpoint&,
                                      const ad::ParamStore<double>&, const ad::AdamState<double>*);
template void save_checkpoint<float>(const std::filesystem::path&, const TrainCheckpoint&,
                                     const ad::ParamStore<float>&, const ad::AdamState<float>*);
template void load_checkpoint_params<double>(const std::filesystem::path&,
                                             ad::ParamStore<double>&);
template void load_checkpoint_params<float>(const std::filesystem::path&, ad::ParamStore<float>&);
template void load_checkpoint_adam<double>(const std::filesystem::path&, ad::ParamStore<double>&,
                                           ad::AdamState<double>&);
template void load_checkpoint_adam<float>(const std::filesystem::path&, ad::ParamStore<float>&,
                                          ad::AdamState<float>&);
template PiuNetModel<double> load_piunet_checkpoint<double>(const std::filesystem::path&);
template PiuNetModel<float> load_piunet_checkpoint<float>(const std::filesystem::path&);
template FcnModel<double> load_fcn_checkpoint<double>(const std::filesystem::path&);
template FcnModel<float> load_fcn_checkpoint<float>(const std::filesystem::path&);

}  // namespace neuroloc
