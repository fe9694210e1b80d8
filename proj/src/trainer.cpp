#include "cubeformer/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cubeformer/numerics/ops.hpp"
#include "cubeformer/train/losses.hpp"

namespace cubeformer {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigurationError("batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigurationError("lr0 must be > 0");
    if (halve_every == 0) throw ConfigurationError("halve_every must be > 0");
    if (!(lambda >= 0.0)) throw ConfigurationError("lambda must be >= 0");
    if (patch_size < 1) throw ConfigurationError("patch_size must be >= 1");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
        throw ConfigurationError("Adam betas must lie in [0,1) and eps must be > 0");
    }
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os << "batch_size=" << batch_size << '\n'
       << "total_iters=" << total_iters << '\n'
       << "lr0=" << format_double(lr0) << '\n'
       << "halve_every=" << halve_every << '\n'
       << "lambda=" << format_double(lambda) << '\n'
       << "beta1=" << format_double(adam.beta1) << '\n'
       << "beta2=" << format_double(adam.beta2) << '\n'
       << "eps=" << format_double(adam.eps) << '\n'
       << "seed=" << seed << '\n'
       << "checkpoint_every=" << checkpoint_every << '\n'
       << "patch_size=" << patch_size << '\n'
       << "augment=" << (augment ? 1 : 0) << '\n';
    return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigurationError("train config line without '=': " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "batch_size") cfg.batch_size = std::stoull(value);
            else if (key == "total_iters") cfg.total_iters = std::stoull(value);
            else if (key == "lr0") cfg.lr0 = std::stod(value);
            else if (key == "halve_every") cfg.halve_every = std::stoull(value);
            else if (key == "lambda") cfg.lambda = std::stod(value);
            else if (key == "beta1") cfg.adam.beta1 = std::stod(value);
            else if (key == "beta2") cfg.adam.beta2 = std::stod(value);
            else if (key == "eps") cfg.adam.eps = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoull(value);
            else if (key == "patch_size") cfg.patch_size = std::stoll(value);
            else if (key == "augment") cfg.augment = std::stoi(value) != 0;
            else throw ConfigurationError("unknown train config key '" + key + "'");
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const ConfigurationError*>(&e)) throw;
            throw ConfigurationError("bad value for train config key '" + key + "': " + value);
        }
    }
    return cfg;
}

double lr_at(std::uint64_t iter, const TrainConfig& cfg) {
    const auto halvings = iter / cfg.halve_every;
    return cfg.lr0 * std::ldexp(1.0, -static_cast<int>(std::min<std::uint64_t>(halvings, 2000)));
}

std::string LogRecord::to_json() const {
    nlohmann::ordered_json j;
    j["iter"] = iter;
    j["lr"] = lr;
    j["l_sr"] = l_sr;
    j["l_fr"] = l_fr;
    j["loss"] = loss;
    j["wall_ms"] = wall_ms;
    return j.dump();
}

LogRecord LogRecord::from_json(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    LogRecord r;
    r.iter = j.at("iter").get<std::uint64_t>();
    r.lr = j.at("lr").get<double>();
    r.l_sr = j.at("l_sr").get<double>();
    r.l_fr = j.at("l_fr").get<double>();
    r.loss = j.at("loss").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
}

std::vector<LogRecord> read_log(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open loss log '" + path.string() + "'");
    std::vector<LogRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(LogRecord::from_json(line));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed record in '" + path.string() + "': " + e.what());
        }
    }
    return out;
}

std::vector<double> smooth_losses(const std::vector<LogRecord>& log, double alpha) {
    std::vector<double> out;
    out.reserve(log.size());
    double ema = 0.0;
    for (std::size_t i = 0; i < log.size(); ++i) {
        ema = i == 0 ? log[i].loss : alpha * log[i].loss + (1.0 - alpha) * ema;
        out.push_back(ema);
    }
    return out;
}

Checkpoint make_checkpoint(CubeFormer<float>& model, const OptimizerState<float>& opt, const TrainConfig& cfg,
                           std::uint64_t iteration) {
    Checkpoint c;
    c.model_config = model.config();
    c.init_seed = model.seed();
    c.train_config = cfg.to_text();
    c.iteration = iteration;
    c.rng_state = "seed_seq(seed=" + std::to_string(cfg.seed) + ",iter=" + std::to_string(iteration) + ")";
    c.params = export_parameters(model);
    c.optimizer_step = opt.step;
    if (!opt.m.empty()) {
        for (std::size_t i = 0; i < opt.m.size(); ++i) {
            c.first_moments.emplace_back(opt.m[i].data(), opt.m[i].data() + opt.m[i].size());
            c.second_moments.emplace_back(opt.v[i].data(), opt.v[i].data() + opt.v[i].size());
        }
    }
    return c;
}

OptimizerState<float> optimizer_from_checkpoint(const Checkpoint& ckpt) {
    OptimizerState<float> s;
    s.step = ckpt.optimizer_step;
    for (std::size_t i = 0; i < ckpt.first_moments.size(); ++i) {
        s.m.push_back(Eigen::Map<const VectorX<float>>(ckpt.first_moments[i].data(),
                                                       static_cast<Index>(ckpt.first_moments[i].size())));
        s.v.push_back(Eigen::Map<const VectorX<float>>(ckpt.second_moments[i].data(),
                                                       static_cast<Index>(ckpt.second_moments[i].size())));
    }
    return s;
}

std::mt19937_64 iteration_rng(std::uint64_t seed, std::uint64_t iter) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(iter >> 32)};
    return std::mt19937_64(seq);
}

std::vector<std::pair<Tensor<float>, Tensor<float>>> sample_batch(const std::vector<ImagePair>& data,
                                                                  const TrainConfig& cfg, int scale,
                                                                  std::mt19937_64& rng) {
    std::vector<std::pair<Tensor<float>, Tensor<float>>> batch;
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    while (batch.size() < cfg.batch_size) {
        const auto& pair = data[pick(rng)];
        auto patch = sample_patch(pair, cfg.patch_size, scale, rng);
        if (!patch) continue;  // callers filter undersized images up front
        if (!cfg.augment) {
            batch.emplace_back(to_tensor<float>(patch->lr), to_tensor<float>(patch->hr));
            continue;
        }
        auto [hr, lr] = augment(patch->hr, patch->lr, rng);
        batch.emplace_back(to_tensor<float>(lr), to_tensor<float>(hr));
    }
    return batch;
}

TrainResult train_loop(CubeFormer<float>& model, const std::vector<ImagePair>& data, const TrainConfig& cfg,
                       const TrainOptions& opts, const Checkpoint* resume) {
    cfg.validate();
    const int scale = static_cast<int>(model.config().scale);
    std::vector<ImagePair> usable;
    for (const auto& p : data) {
        if (p.lr.height() >= cfg.patch_size && p.lr.width() >= cfg.patch_size) {
            usable.push_back(p);
        } else if (opts.progress) {
            *opts.progress << "warning: skipping '" << p.name << "' (LR " << p.lr.height() << "x" << p.lr.width()
                           << " is smaller than the " << cfg.patch_size << " px patch)\n";
        }
    }
    if (usable.empty()) throw ConfigurationError("no training image is at least as large as the LR patch");
    const Index mh = model.config().height_multiple(), mw = model.config().width_multiple();
    if (cfg.patch_size % mh != 0 || cfg.patch_size % mw != 0 || cfg.patch_size < 15) {
        throw ConfigurationError("patch size " + std::to_string(cfg.patch_size) + " must be >= 15 and a multiple of " +
                                 std::to_string(mh) + "x" + std::to_string(mw));
    }

    auto params = model.parameters();
    model.set_requires_grad(true);
    OptimizerState<float> opt = OptimizerState<float>::zeros_like(params);
    std::uint64_t start = 0;
    if (resume) {
        if (!(resume->model_config == model.config())) throw ConfigurationError("resume checkpoint has a different model config");
        import_parameters(model, resume->params);
        opt = optimizer_from_checkpoint(*resume);
        if (opt.m.empty()) opt = OptimizerState<float>::zeros_like(params);
        start = resume->iteration;
    }

    TrainResult result;
    fs::path log_path;
    std::ofstream log;
    std::string last_ckpt = resume ? "resume point at iteration " + std::to_string(start) : "none";
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        log_path = opts.out_dir / "loss_log.jsonl";
        std::vector<std::string> kept;
        if (resume && fs::exists(log_path)) {
            for (const auto& r : read_log(log_path)) {
                if (r.iter < start) kept.push_back(r.to_json());
            }
        }
        log.open(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot open '" + log_path.string() + "' for writing");
        for (const auto& line : kept) log << line << '\n';
    }

    const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
    for (std::uint64_t it = start; it < cfg.total_iters; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        auto rng = iteration_rng(cfg.seed, it);
        const auto batch = sample_batch(usable, cfg, scale, rng);
        double l_sr = 0.0, l_fr = 0.0, l_total = 0.0;
        for (const auto& [lr, hr] : batch) {
            const Tensor<float> pred = model.forward(lr);
            const auto terms = total_loss(pred, hr, cfg.lambda);
            l_sr += terms.spatial.item();
            l_fr += terms.frequency.item();
            l_total += terms.total.item();
            backward(mul_scalar(terms.total, inv_batch));
        }
        const double n = static_cast<double>(cfg.batch_size);
        LogRecord rec{it, lr_at(it, cfg), l_sr / n, l_fr / n, l_total / n, 0.0};
        if (!std::isfinite(rec.loss)) {
            throw NumericalError("non-finite loss at iteration " + std::to_string(it) + "; last good checkpoint: " + last_ckpt);
        }
        adam_step(params, opt, rec.lr, cfg.adam);
        model.zero_grad();
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(rec);
        if (log.is_open()) {
            log << rec.to_json() << '\n';
            log.flush();
            if (!log) throw IoError("failed writing '" + log_path.string() + "' (disk full?)");
        }
        if (opts.progress && opts.progress_every > 0 && (it + 1) % opts.progress_every == 0) {
            *opts.progress << "iter " << it + 1 << "/" << cfg.total_iters << " loss " << rec.loss << " lr " << rec.lr
                           << '\n';
        }
        const std::uint64_t done = it + 1;
        if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 &&
            done != cfg.total_iters) {
            const fs::path p = opts.out_dir / ("ckpt_" + std::to_string(done));
            save_checkpoint(make_checkpoint(model, opt, cfg, done), p);
            last_ckpt = p.string();
            result.last_checkpoint_path = p;
        }
    }
    const std::uint64_t final_iter = std::max(start, cfg.total_iters);
    result.final_checkpoint = make_checkpoint(model, opt, cfg, final_iter);
    if (!opts.out_dir.empty()) {
        const fs::path p = opts.out_dir / ("ckpt_" + std::to_string(final_iter));
        save_checkpoint(result.final_checkpoint, p);
        result.last_checkpoint_path = p;
    }
    return result;
}

}  // namespace cubeformer
