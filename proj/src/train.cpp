#include "neuroloc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "neuroloc/error.hpp"
#include "neuroloc/metrics.hpp"
#include "neuroloc/rng.hpp"

namespace neuroloc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    require(steps >= 0, ErrorKind::usage, "steps must be non-negative");
    require(batch >= 1, ErrorKind::usage, "batch must be at least 1");
    require(lr > 0.0 && std::isfinite(lr), ErrorKind::usage,
            "learning rate must be positive and finite");
    require(lambda_rec >= 0.0 && std::isfinite(lambda_rec), ErrorKind::usage,
            "lambda_rec must be non-negative and finite");
    require(eval_every >= 1, ErrorKind::usage, "eval_every must be at least 1");
    require(eval_samples >= 1, ErrorKind::usage, "eval_samples must be at least 1");
    require(threads >= 1, ErrorKind::usage, "threads must be at least 1");
    sim.validate();
}

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    cfg.steps = 5000;
    cfg.batch = 8;
    cfg.lr = 1e-4;
    cfg.loss_kind = ad::LossKind::l1;
    cfg.sim.n_activ_max = 1;
    cfg.sim.snr_range_db = {20.0, 20.0};
    return cfg;
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig cfg;
    cfg.steps = 60000;
    cfg.batch = 32;
    cfg.lr = 1e-5;
    cfg.loss_kind = ad::LossKind::l1;
    return cfg;
}

// ---------------------------------------------------------------------------
// Sample streams
// ---------------------------------------------------------------------------

// Seed layout: lane 1 of the run seed feeds the per-step training streams,
// lane 2 the held-out evaluation stream, lane 3 model initialization in the
// loss ablation.  Each training step then gets its own lane so that sample
// (step, b) is a pure function of the config.
namespace {
constexpr std::uint64_t kTrainLane = 1;
constexpr std::uint64_t kEvalLane = 2;
constexpr std::uint64_t kAblationModelLane = 3;
}  // namespace

std::vector<Sample> make_eval_set(const TrainConfig& cfg, const LeadField& lf_eval) {
    SimConfig es = cfg.sim;
    es.base_seed = derive_seed(cfg.seed, kEvalLane);
    return generate_dataset(es, lf_eval, cfg.eval_samples);
}

Matrix sample_source_field(const Sample& s, int n_sources) {
    require(static_cast<int>(s.x.size()) == 3 * n_sources, ErrorKind::data,
            "sample field size does not match the source space");
    Matrix out(n_sources, 3);
    for (int i = 0; i < n_sources; ++i)
        for (int k = 0; k < 3; ++k)
            out(i, k) = static_cast<double>(s.x[static_cast<std::size_t>(3 * i + k)]);
    return out;
}

namespace {

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// One training batch with flattened tensors ready for the loss.
template <typename S>
struct BatchData {
    std::int64_t step = 0;
    std::vector<Sample> samples;
    std::vector<S> target;  // [B * 3N], voxel-major triples
    std::vector<S> y;       // [B * M]
};

template <typename S>
BatchData<S> make_batch(const TrainConfig& cfg, const LeadField& lf,
                        std::uint64_t train_root, std::int64_t step) {
    SimConfig step_sim = cfg.sim;
    step_sim.base_seed = derive_seed(train_root, static_cast<std::uint64_t>(step));

    BatchData<S> bd;
    bd.step = step;
    bd.samples.resize(static_cast<std::size_t>(cfg.batch));

    auto fill = [&](int b) {
        bd.samples[static_cast<std::size_t>(b)] =
            generate_sample(step_sim, lf, static_cast<std::uint64_t>(b));
    };
    const int workers = std::min(cfg.threads, cfg.batch);
    if (workers <= 1) {
        for (int b = 0; b < cfg.batch; ++b) fill(b);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (int b = w; b < cfg.batch; b += workers) fill(b);
            });
        for (auto& t : pool) t.join();
    }

    const std::size_t xn = bd.samples.front().x.size();
    const std::size_t yn = bd.samples.front().y.size();
    bd.target.resize(static_cast<std::size_t>(cfg.batch) * xn);
    bd.y.resize(static_cast<std::size_t>(cfg.batch) * yn);
    for (int b = 0; b < cfg.batch; ++b) {
        const Sample& s = bd.samples[static_cast<std::size_t>(b)];
        for (std::size_t i = 0; i < xn; ++i)
            bd.target[static_cast<std::size_t>(b) * xn + i] = static_cast<S>(s.x[i]);
        for (std::size_t i = 0; i < yn; ++i)
            bd.y[static_cast<std::size_t>(b) * yn + i] = static_cast<S>(s.y[i]);
    }
    return bd;
}

// Bounded queue of pre-generated batches.  A single producer walks the steps
// in order, so the consumer sees exactly the single-threaded stream; the
// per-sample workers inside make_batch write to fixed slots, so the bytes are
// identical no matter how many threads run.
template <typename S>
class BatchQueue {
  public:
    BatchQueue(const TrainConfig& cfg, const LeadField& lf, std::uint64_t train_root)
        : cfg_(cfg), lf_(lf), root_(train_root) {
        if (cfg_.threads > 1 && cfg_.steps > 0)
            producer_ = std::thread([this] { produce(); });
    }

    ~BatchQueue() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        if (producer_.joinable()) producer_.join();
    }

    BatchData<S> next(std::int64_t step) {
        if (!producer_.joinable()) return make_batch<S>(cfg_, lf_, root_, step);
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return !ready_.empty() || error_ != nullptr; });
        if (error_) std::rethrow_exception(error_);
        BatchData<S> bd = std::move(ready_.front());
        ready_.pop_front();
        lk.unlock();
        cv_.notify_all();
        require(bd.step == step, ErrorKind::data, "batch queue out of order");
        return bd;
    }

  private:
    void produce() {
        try {
            for (std::int64_t s = 1; s <= cfg_.steps; ++s) {
                BatchData<S> bd = make_batch<S>(cfg_, lf_, root_, s);
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [this] { return ready_.size() < kCapacity || stop_; });
                if (stop_) return;
                ready_.push_back(std::move(bd));
                lk.unlock();
                cv_.notify_all();
            }
        } catch (...) {
            std::lock_guard<std::mutex> lk(mu_);
            error_ = std::current_exception();
            cv_.notify_all();
        }
    }

    static constexpr std::size_t kCapacity = 4;
    const TrainConfig cfg_;
    const LeadField& lf_;
    const std::uint64_t root_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<BatchData<S>> ready_;
    std::exception_ptr error_;
    bool stop_ = false;
    std::thread producer_;
};

// ---------------------------------------------------------------------------
// Model adapters
// ---------------------------------------------------------------------------

template <typename S>
struct PiuNetAdapter {
    PiuNetModel<S>& model;
    PseudoInverseOperator op;
    const SourceSpace& space;
    GridEmbedding em;
    ad::MatX<S> gain;  // training gain for the measurement-consistency loss

    PiuNetAdapter(PiuNetModel<S>& m, const LeadField& lf_train, PseudoInverseOperator op_)
        : model(m),
          op(std::move(op_)),
          space(lf_train.space),
          em(make_grid_embedding(lf_train.space, m.config.grid)),
          gain(lf_train.gain.template cast<S>()) {}

    ad::ParamStore<S>& params() { return model.params; }

    ad::TensorNode<S>* forward_batch(ad::Graph<S>& g, const BatchData<S>& bd) {
        const int B = static_cast<int>(bd.samples.size());
        const int G = model.config.grid;
        const std::ptrdiff_t per = static_cast<std::ptrdiff_t>(3) * G * G * G;
        std::vector<S> buf(static_cast<std::size_t>(B) * static_cast<std::size_t>(per));
        Vector y(op.kernel.cols());
        for (int b = 0; b < B; ++b) {
            const Sample& s = bd.samples[static_cast<std::size_t>(b)];
            for (int j = 0; j < y.size(); ++j)
                y[j] = static_cast<double>(s.y[static_cast<std::size_t>(j)]);
            Matrix coarse = apply(op, y);
            embed_to_grid<S>(coarse, em, buf.data() + static_cast<std::ptrdiff_t>(b) * per);
        }
        auto* input = g.tensor({B, 3, G, G, G}, buf, false);
        auto* body = piunet_forward(g, model, input);
        auto* refined = ad::add(g, input, body);
        return ad::gather_sites(g, refined, em.sites);  // [B, N, 3]
    }

    Matrix predict(const Sample& s) const {
        Vector y(op.kernel.cols());
        for (int j = 0; j < y.size(); ++j)
            y[j] = static_cast<double>(s.y[static_cast<std::size_t>(j)]);
        return piunet_predict(model, op, y, space);
    }

    void fill_meta(TrainCheckpoint& meta) const {
        meta.model_kind = "piunet";
        meta.piunet = model.config;
    }
};

template <typename S>
struct FcnAdapter {
    FcnModel<S>& model;
    ad::MatX<S> gain;

    FcnAdapter(FcnModel<S>& m, const LeadField& lf_train)
        : model(m), gain(lf_train.gain.template cast<S>()) {
        require(m.config.n_sensors == lf_train.n_sensors() &&
                    m.config.n_sources == lf_train.n_sources(),
                ErrorKind::usage, "model dimensions do not match the lead field");
    }

    ad::ParamStore<S>& params() { return model.params; }

    ad::TensorNode<S>* forward_batch(ad::Graph<S>& g, const BatchData<S>& bd) {
        const int B = static_cast<int>(bd.samples.size());
        const int M = model.config.n_sensors;
        auto* input = g.tensor({B, M}, bd.y, false);
        auto* flat = fcn_forward(g, model, input);  // [B, 3N]
        return ad::reshape(g, flat, {B, model.config.n_sources, 3});
    }

    Matrix predict(const Sample& s) const {
        Vector y(model.config.n_sensors);
        for (int j = 0; j < y.size(); ++j)
            y[j] = static_cast<double>(s.y[static_cast<std::size_t>(j)]);
        return fcn_predict(model, y);
    }

    void fill_meta(TrainCheckpoint& meta) const {
        meta.model_kind = "fcn";
        meta.fcn = model.config;
    }
};

// ---------------------------------------------------------------------------
// Held-out evaluation
// ---------------------------------------------------------------------------

struct EvalSet {
    std::vector<Sample> samples;
    std::vector<Matrix> truth;
    std::vector<double> denoms;  // cached transport cost truth -> uniform
};

EvalSet build_eval_set(const TrainConfig& cfg, const LeadField& lf_eval,
                       NemdEvaluator& nemd) {
    EvalSet es;
    es.samples = make_eval_set(cfg, lf_eval);
    es.truth.reserve(es.samples.size());
    es.denoms.reserve(es.samples.size());
    for (const Sample& s : es.samples) {
        es.truth.push_back(sample_source_field(s, lf_eval.n_sources()));
        es.denoms.push_back(nemd.denominator(es.truth.back()));
    }
    return es;
}

template <typename A>
EvalMetrics run_eval(const EvalSet& es, A& adapter, NemdEvaluator& nemd) {
    EvalMetrics m;
    double sum_nmse = 0.0, sum_nemd = 0.0, sum_wcos = 0.0;
    for (std::size_t i = 0; i < es.samples.size(); ++i) {
        const Matrix xhat = adapter.predict(es.samples[i]);
        sum_nmse += nmse(es.truth[i], xhat);
        sum_wcos += weighted_cos(es.truth[i], xhat);
        sum_nemd += nemd.numerator(es.truth[i], xhat) / es.denoms[i];
    }
    const double n = static_cast<double>(es.samples.size());
    m.nmse = sum_nmse / n;
    m.nemd = sum_nemd / n;
    m.wcos = sum_wcos / n;
    return m;
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

template <typename S, typename A>
TrainResult train_impl(const TrainConfig& cfg, const LeadField& lf_train,
                       const LeadField& lf_eval, A& adapter, const fs::path& out_dir,
                       std::uint64_t op_digest) {
    cfg.validate();
    require(lf_train.n_sources() == lf_eval.n_sources() &&
                lf_train.n_sensors() == lf_eval.n_sensors(),
            ErrorKind::usage, "training and evaluation lead fields must share geometry");
    require(lf_train.digest() != lf_eval.digest(), ErrorKind::usage,
            "held-out evaluation needs a perturbed lead field distinct from the "
            "training one");
    if (op_digest != 0)
        require(op_digest == lf_train.digest(), ErrorKind::usage,
                "operator must be built from the training lead field");

    fs::create_directories(out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    };

    TrainResult res;
    res.train_digest = lf_train.digest();
    res.eval_digest = lf_eval.digest();
    res.op_digest = op_digest;
    res.last_checkpoint = out_dir / "checkpoint_last";
    res.final_checkpoint = out_dir / "checkpoint_final";
    res.log_csv = out_dir / "train_log.csv";

    NemdEvaluator nemd(lf_eval.space);
    EvalSet eval_set = build_eval_set(cfg, lf_eval, nemd);

    ad::AdamHyper<S> hyper;
    hyper.lr = static_cast<S>(cfg.lr);
    ad::AdamState<S> adam(adapter.params(), hyper);

    auto save = [&](const fs::path& dir, std::int64_t step) {
        TrainCheckpoint meta;
        adapter.fill_meta(meta);
        if (meta.model_kind == "piunet") {
            meta.op = cfg.op;
            meta.has_op = true;
        }
        meta.step = step;
        meta.seed = cfg.seed;
        meta.lr = cfg.lr;
        meta.adam_t = adam.t;
        meta.has_adam = true;
        save_checkpoint(dir, meta, adapter.params(), &adam);
    };

    // Step 0: held-out metrics and a checkpoint before any update.
    res.step0 = run_eval(eval_set, adapter, nemd);
    res.final_eval = res.step0;
    {
        TrainLogRow row;
        row.step = 0;
        row.has_eval = true;
        row.eval = res.step0;
        row.wallclock_s = elapsed();
        res.log.push_back(row);
    }
    save(res.last_checkpoint, 0);
    res.last_good_step = 0;

    const std::uint64_t train_root = derive_seed(cfg.seed, kTrainLane);
    BatchQueue<S> queue(cfg, lf_train, train_root);

    std::int64_t done = 0;
    for (std::int64_t s = 1; s <= cfg.steps; ++s) {
        BatchData<S> bd = queue.next(s);
        ad::Graph<S> g;
        auto* pred = adapter.forward_batch(g, bd);
        auto* loss = ad::make_loss(g, cfg.loss_kind, pred, bd.target, &adapter.gain,
                                   &bd.y, static_cast<S>(cfg.lambda_rec));
        const double loss_value = static_cast<double>(loss->values[0]);

        TrainLogRow row;
        row.step = s;
        row.has_loss = true;
        row.loss = loss_value;

        if (!std::isfinite(loss_value)) {
            row.wallclock_s = elapsed();
            res.log.push_back(row);
            res.aborted_nan = true;
            break;
        }

        adapter.params().zero_grad();
        g.backward(loss);
        ad::adam_step(adapter.params(), adam);
        done = s;

        if (s % cfg.eval_every == 0 || s == cfg.steps) {
            row.has_eval = true;
            row.eval = run_eval(eval_set, adapter, nemd);
            res.final_eval = row.eval;
            save(res.last_checkpoint, s);
            res.last_good_step = s;
        }
        row.wallclock_s = elapsed();
        res.log.push_back(row);
    }

    if (res.aborted_nan) {
        // The parameters in memory just produced a non-finite loss; the last
        // checkpoint written at an eval point is the surviving good state.
        res.final_checkpoint = res.last_checkpoint;
    } else {
        save(res.final_checkpoint, done);
    }
    write_train_log_csv(res.log_csv, res.log);
    return res;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

template <typename S>
TrainResult train_piunet(const TrainConfig& cfg, const LeadField& lf_train,
                         const LeadField& lf_eval, PiuNetModel<S>& model,
                         const fs::path& out_dir) {
    PiuNetAdapter<S> adapter(model, lf_train, build_operator(cfg.op, lf_train));
    return train_impl<S>(cfg, lf_train, lf_eval, adapter, out_dir,
                         adapter.op.leadfield_digest);
}

template <typename S>
TrainResult train_fcn(const TrainConfig& cfg, const LeadField& lf_train,
                      const LeadField& lf_eval, FcnModel<S>& model,
                      const fs::path& out_dir) {
    FcnAdapter<S> adapter(model, lf_train);
    return train_impl<S>(cfg, lf_train, lf_eval, adapter, out_dir, 0);
}

template TrainResult train_piunet<double>(const TrainConfig&, const LeadField&,
                                          const LeadField&, PiuNetModel<double>&,
                                          const fs::path&);
template TrainResult train_piunet<float>(const TrainConfig&, const LeadField&,
                                         const LeadField&, PiuNetModel<float>&,
                                         const fs::path&);
template TrainResult train_fcn<double>(const TrainConfig&, const LeadField&,
                                       const LeadField&, FcnModel<double>&,
                                       const fs::path&);
template TrainResult train_fcn<float>(const TrainConfig&, const LeadField&,
                                      const LeadField&, FcnModel<float>&,
                                      const fs::path&);

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

void write_train_log_csv(const fs::path& path, const std::vector<TrainLogRow>& log) {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), ErrorKind::data, "cannot open " + path.string() + " for writing");
    f << "step,loss,eval_nmse,eval_nemd,eval_wcos,wallclock_s\n";
    for (const TrainLogRow& r : log) {
        f << r.step << ',';
        if (r.has_loss) f << fmt_g17(r.loss);
        f << ',';
        if (r.has_eval)
            f << fmt_g17(r.eval.nmse) << ',' << fmt_g17(r.eval.nemd) << ','
              << fmt_g17(r.eval.wcos);
        else
            f << ",,";
        f << ',' << fmt_g17(r.wallclock_s) << '\n';
    }
    require(f.good(), ErrorKind::data, "failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Loss ablation
// ---------------------------------------------------------------------------

std::vector<LossComparisonRow> compare_losses(const TrainConfig& base,
                                              const PiuNetConfig& model_cfg,
                                              const LeadField& lf_train,
                                              const LeadField& lf_eval,
                                              const std::vector<ad::LossKind>& kinds,
                                              const fs::path& out_dir) {
    require(!kinds.empty(), ErrorKind::usage, "loss comparison needs at least one kind");
    fs::create_directories(out_dir);
    const std::uint64_t model_seed = derive_seed(base.seed, kAblationModelLane);

    std::vector<LossComparisonRow> rows;
    for (ad::LossKind kind : kinds) {
        TrainConfig cfg = base;
        cfg.loss_kind = kind;
        PiuNetModel<double> model = build_piunet<double>(model_cfg, model_seed);
        TrainResult r = train_piunet<double>(cfg, lf_train, lf_eval, model,
                                             out_dir / ("loss_" + ad::to_string(kind)));
        for (const TrainLogRow& row : r.log)
            if (row.has_eval) rows.push_back({kind, row.step, row.eval});
    }

    std::ofstream f(out_dir / "loss_report.csv", std::ios::trunc);
    require(f.good(), ErrorKind::data, "cannot open loss_report.csv for writing");
    f << "loss,step,eval_nmse,eval_nemd,eval_wcos\n";
    for (const LossComparisonRow& r : rows)
        f << ad::to_string(r.kind) << ',' << r.step << ',' << fmt_g17(r.eval.nmse) << ','
          << fmt_g17(r.eval.nemd) << ',' << fmt_g17(r.eval.wcos) << '\n';
    require(f.good(), ErrorKind::data, "failed writing loss_report.csv");
    return rows;
}

}  // namespace neuroloc
