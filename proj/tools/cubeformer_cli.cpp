// cubeformer: train, evaluate, run and inspect super-resolution models.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cubeformer/checkpoint.hpp"
#include "cubeformer/data/dataset.hpp"
#include "cubeformer/data/resize.hpp"
#include "cubeformer/metrics.hpp"
#include "cubeformer/model.hpp"
#include "cubeformer/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace cubeformer;

namespace {

constexpr const char* kVersion = "0.1.0";

struct ModelFlags {
    std::string variant = "full";
    int scale = 2;
    Index groups = 2;
    Index channels = 32;
    Index heads = 4;

    ModelConfig config() const {
        ModelConfig c;
        c.variant = variant_from_string(variant);
        c.scale = scale;
        c.n_groups = groups;
        c.channels = channels;
        c.block.heads = heads;
        c.validate();
        return c;
    }
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
    cmd->add_option("--variant", f.variant, "full or lite")->check(CLI::IsMember({"full", "lite"}))->capture_default_str();
    cmd->add_option("--scale", f.scale, "upscaling factor")->check(CLI::IsMember({2, 3, 4}))->capture_default_str();
    cmd->add_option("--groups", f.groups, "number of cube transformer groups")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--channels", f.channels, "feature width")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--heads", f.heads, "attention heads")->check(CLI::PositiveNumber)->capture_default_str();
}

nlohmann::ordered_json text_to_json(const std::string& text) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return j;
}

void write_manifest(const fs::path& path, const nlohmann::ordered_json& j) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw IoError("cannot write manifest '" + tmp.string() + "'");
        os << j.dump(2) << '\n';
        if (!os) throw IoError("failed writing manifest '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

std::vector<ImagePair> load_all(const DatasetIndex& index, bool cache) {
    std::vector<ImagePair> out;
    out.reserve(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) out.push_back(index.load(i, cache));
    return out;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
    ModelFlags model;
    std::uint64_t iters = 2000;
    std::uint64_t batch = 4;
    double lr = 5e-4;
    double lambda = 0.01;
    std::uint64_t seed = 0;
    std::uint64_t halve_every = 200000;
    std::uint64_t checkpoint_every = 100;
    Index patch = 64;
    std::string data;
    std::string out;
    std::string resume;
    bool no_cache = false;
    bool no_augment = false;
    bool quiet = false;
};

int cmd_train(const TrainFlags& f, const CLI::App& sub) {
    ModelConfig mcfg;
    TrainConfig tcfg;
    std::optional<Checkpoint> resume;
    fs::path out = f.out;
    if (!f.resume.empty()) {
        resume = load_checkpoint(f.resume);
        mcfg = resume->model_config;
        tcfg = TrainConfig::from_text(resume->train_config);
        if (sub.count("--iters")) tcfg.total_iters = f.iters;
        if (out.empty()) out = fs::path(f.resume).parent_path();
    } else {
        mcfg = f.model.config();
        tcfg.total_iters = f.iters;
        tcfg.batch_size = f.batch;
        tcfg.lr0 = f.lr;
        tcfg.lambda = f.lambda;
        tcfg.seed = f.seed;
        tcfg.halve_every = f.halve_every;
        tcfg.checkpoint_every = f.checkpoint_every;
        tcfg.patch_size = f.patch;
        tcfg.augment = !f.no_augment;
    }
    if (out.empty()) throw UsageError("--out is required");
    tcfg.validate();
    if (!fs::is_directory(f.data)) throw IoError("dataset directory '" + f.data + "' does not exist");
    const auto index = DatasetIndex::scan(f.data, static_cast<int>(mcfg.scale));

    fs::create_directories(out);
    nlohmann::ordered_json manifest;
    manifest["tool"] = "cubeformer";
    manifest["version"] = kVersion;
    manifest["command"] = "train";
    manifest["model"] = text_to_json(mcfg.to_text());
    manifest["train"] = text_to_json(tcfg.to_text());
    manifest["seed"] = tcfg.seed;
    manifest["data"] = {{"root", fs::absolute(f.data).string()}, {"scale", mcfg.scale}, {"images", index.size()}};
    manifest["resume"] = f.resume.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(f.resume);
    manifest["artifacts"] = {{"loss_log", (out / "loss_log.jsonl").string()},
                             {"checkpoints", (out / "ckpt_<iteration>").string()}};
    write_manifest(out / "manifest.json", manifest);

    const auto data = load_all(index, !f.no_cache);
    CubeFormer<float> model(mcfg, tcfg.seed);
    TrainOptions opts;
    opts.out_dir = out;
    opts.progress = f.quiet ? nullptr : &std::cerr;
    const auto result = train_loop(model, data, tcfg, opts, resume ? &*resume : nullptr);
    if (!result.log.empty()) {
        std::cout << "final loss " << result.log.back().loss << " at iteration " << result.log.back().iter + 1 << '\n';
    }
    std::cout << "checkpoint " << result.last_checkpoint_path.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------- eval

struct EvalFlags {
    std::string checkpoint;
    std::string baseline;
    std::string data;
    int scale = 2;
    bool json = false;
    std::string report;
};

int cmd_eval(const EvalFlags& f) {
    if (f.checkpoint.empty() == f.baseline.empty()) throw UsageError("give exactly one of --checkpoint or --baseline");
    std::optional<CubeFormer<float>> model;
    int scale = f.scale;
    EvalReport report;
    if (!f.checkpoint.empty()) {
        const auto ckpt = load_checkpoint(f.checkpoint);
        model.emplace(model_from_checkpoint<float>(ckpt));
        scale = static_cast<int>(ckpt.model_config.scale);
        report.model_id = fs::path(f.checkpoint).filename().string() + "@" + std::to_string(ckpt.iteration);
    } else {
        report.model_id = "baseline:" + f.baseline;
    }
    report.scale = scale;
    report.border = scale;
    if (!fs::is_directory(f.data)) throw IoError("dataset directory '" + f.data + "' does not exist");
    const auto index = DatasetIndex::scan(f.data, scale);
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto pair = index.load(i, false);
        ImageBuffer out;
        if (model) {
            out = from_tensor(model->upscale(to_tensor<float>(pair.lr)));
        } else if (f.baseline == "bicubic") {
            out = bicubic_resize(pair.lr, pair.hr.height(), pair.hr.width());
        } else {
            out = pair.hr;
        }
        report.add(pair.name, evaluate(out, pair.hr, scale));
    }
    const std::string text = f.json ? report.to_jsonl() : report.to_table();
    std::cout << text;
    if (!f.report.empty()) {
        std::ofstream os(f.report, std::ios::trunc);
        if (!os) throw IoError("cannot write report '" + f.report + "'");
        os << report.to_jsonl();
    }
    return 0;
}

// ---------------------------------------------------------------- infer

struct InferFlags {
    std::string checkpoint;
    std::string input;
    std::string output;
};

int cmd_infer(const InferFlags& f) {
    const auto ckpt = load_checkpoint(f.checkpoint);
    const auto model = model_from_checkpoint<float>(ckpt);
    const auto img = load_image(f.input);
    NoGradGuard no_grad;
    const auto out = from_tensor(model.upscale(to_tensor<float>(img)));
    save_image(out, f.output);
    std::cout << f.output << ": " << out.width() << "x" << out.height() << '\n';
    return 0;
}

// ---------------------------------------------------------------- inspect

struct InspectFlags {
    ModelFlags model{"full", 2, 6, 64, 4};
    std::string checkpoint;
    Index height = 64;
    Index width = 64;
    bool json = false;
};

std::string block_kind(const std::string& path) {
    const auto first = path.find('.');
    if (first == std::string::npos) return path;
    const auto second = path.find('.', first + 1);
    return second == std::string::npos ? path : path.substr(second + 1);
}

int cmd_inspect(const InspectFlags& f) {
    ModelConfig cfg;
    std::uint64_t seed = 0;
    std::optional<Checkpoint> ckpt;
    if (!f.checkpoint.empty()) {
        ckpt = load_checkpoint(f.checkpoint);
        cfg = ckpt->model_config;
        seed = ckpt->init_seed;
    } else {
        cfg = f.model.config();
    }
    CubeFormer<float> model = ckpt ? model_from_checkpoint<float>(*ckpt) : CubeFormer<float>(cfg, seed);
    const auto params = param_count(model);
    const auto reference = reference_param_count(cfg.variant, cfg.scale);
    const bool reference_applies = reference && cfg.n_groups == 6 && cfg.channels == 64;

    std::map<std::string, std::int64_t> per_kind;
    for (const auto& [path, n] : params.per_block) per_kind[block_kind(path)] += n;

    const Index ac = cfg.attention_channels() / cfg.block.heads;  // per head
    const Index mh = cfg.height_multiple(), mw = cfg.width_multiple();
    const Index ph = std::max<Index>((f.height + mh - 1) / mh * mh, 15);
    const Index pw = std::max<Index>((f.width + mw - 1) / mw * mw, 15);
    const auto flops = flops_estimate(cfg, ph, pw);
    const auto layout = [&](const CubeSpec& s) {
        const auto e = s.cube_extent(ac, ph, pw);
        return nlohmann::ordered_json{{"mode", to_string(s.mode)},
                                      {"spec", {s.h, s.w, s.c}},
                                      {"cube_extent_chw", {e[0], e[1], e[2]}},
                                      {"cubes", s.cube_count(ac, ph, pw)},
                                      {"cube_length", s.cube_length(ac, ph, pw)}};
    };

    nlohmann::ordered_json j;
    j["config"] = text_to_json(cfg.to_text());
    j["params_total"] = params.total;
    if (reference_applies) {
        j["reference_total"] = *reference;
        j["deviation"] = static_cast<double>(params.total - *reference) / static_cast<double>(*reference);
    }
    j["params_per_block"] = nlohmann::ordered_json::array();
    for (const auto& [path, n] : params.per_block) j["params_per_block"].push_back({{"block", path}, {"params", n}});
    j["params_per_kind"] = nlohmann::ordered_json::array();
    for (const auto& [kind, n] : per_kind) j["params_per_kind"].push_back({{"kind", kind}, {"params", n}});
    j["params_per_path"] = nlohmann::ordered_json::array();
    for (const auto& [path, n] : params.per_path) j["params_per_path"].push_back({{"path", path}, {"params", n}});
    j["flops"] = {{"height", ph}, {"width", pw}, {"total", flops.total}};
    j["flops_per_block"] = nlohmann::ordered_json::array();
    for (const auto& [path, n] : flops.per_block) j["flops_per_block"].push_back({{"block", path}, {"flops", n}});
    j["partition"] = {{"channels_per_head", ac},
                      {"padded_height", ph},
                      {"padded_width", pw},
                      {"intra", layout(cfg.block.intra)},
                      {"inter", layout(cfg.block.inter)}};

    if (f.json) {
        std::cout << j.dump(2) << '\n';
        return 0;
    }
    std::cout << "variant " << to_string(cfg.variant) << "  x" << cfg.scale << "  groups " << cfg.n_groups
              << "  channels " << cfg.channels << "  heads " << cfg.block.heads << '\n';
    std::cout << "\nparameters per path\n";
    for (const auto& [path, n] : params.per_path) std::printf("  %-40s %10lld\n", path.c_str(), static_cast<long long>(n));
    std::cout << "\nparameters per block\n";
    for (const auto& [path, n] : params.per_block) std::printf("  %-40s %10lld\n", path.c_str(), static_cast<long long>(n));
    std::cout << "\nparameters per block kind (summed over groups)\n";
    for (const auto& [kind, n] : per_kind) {
        std::printf("  %-24s %10lld  %5.1f%%\n", kind.c_str(), static_cast<long long>(n),
                    100.0 * static_cast<double>(n) / static_cast<double>(params.total));
    }
    std::printf("\ntotal parameters %lld (%.1fK)\n", static_cast<long long>(params.total), params.total / 1000.0);
    if (reference_applies) {
        const double dev = static_cast<double>(params.total - *reference) / static_cast<double>(*reference);
        std::printf("reference %lldK, deviation %+lld (%+.2f%%)\n", static_cast<long long>(*reference / 1000),
                    static_cast<long long>(params.total - *reference), 100.0 * dev);
    }
    std::printf("\nFLOPs at %lldx%lld LR input: %.3f G\n", static_cast<long long>(ph),
                static_cast<long long>(pw), static_cast<double>(flops.total) / 1e9);
    for (const auto& [path, n] : flops.per_block) {
        std::printf("  %-40s %12.3f M\n", path.c_str(), static_cast<double>(n) / 1e6);
    }
    std::cout << "\ncube partition per head (padded " << ph << "x" << pw << ", " << ac << " channels)\n";
    for (const char* name : {"intra", "inter"}) {
        const auto& l = j["partition"][name];
        std::cout << "  " << name << ": " << l["mode"].get<std::string>() << " " << l["spec"].dump() << " -> "
                  << l["cubes"] << " cubes of extent (c,h,w) " << l["cube_extent_chw"].dump() << ", "
                  << l["cube_length"] << " tokens each\n";
    }
    return 0;
}

void configure_threads() {
#ifdef _OPENMP
    if (const char* env = std::getenv("CUBEFORMER_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

}  // namespace

int main(int argc, char** argv) {
    configure_threads();
    CLI::App app{"CubeFormer super-resolution toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    TrainFlags tf;
    auto* train = app.add_subcommand("train", "train a model on root/HR (+ optional root/LR_x<s>)");
    add_model_flags(train, tf.model);
    train->add_option("--iters", tf.iters, "total iterations")->capture_default_str();
    train->add_option("--batch", tf.batch, "patches per iteration")->check(CLI::PositiveNumber)->capture_default_str();
    train->add_option("--lr", tf.lr, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    train->add_option("--lambda", tf.lambda, "frequency loss weight")->check(CLI::NonNegativeNumber)->capture_default_str();
    train->add_option("--seed", tf.seed, "initialization and sampling seed")->capture_default_str();
    train->add_option("--halve-every", tf.halve_every, "iterations between learning-rate halvings")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    train->add_option("--checkpoint-every", tf.checkpoint_every, "0 keeps only the final checkpoint")->capture_default_str();
    train->add_option("--patch", tf.patch, "LR patch size")->check(CLI::PositiveNumber)->capture_default_str();
    train->add_option("--data", tf.data, "dataset root")->required();
    train->add_option("--out", tf.out, "run directory");
    train->add_option("--resume", tf.resume, "checkpoint to continue from");
    train->add_flag("--no-cache", tf.no_cache, "do not write synthesized LR images");
    train->add_flag("--no-augment", tf.no_augment, "train on unaugmented patches");
    train->add_flag("--quiet", tf.quiet, "suppress progress output");

    EvalFlags ef;
    auto* eval = app.add_subcommand("eval", "PSNR/SSIM on the Y channel over a benchmark directory");
    eval->add_option("--checkpoint", ef.checkpoint, "model checkpoint");
    eval->add_option("--baseline", ef.baseline, "score a fixed upsampler instead of a model")
        ->check(CLI::IsMember({"bicubic", "identity"}));
    eval->add_option("--data", ef.data, "dataset root")->required();
    eval->add_option("--scale", ef.scale, "scale for baselines")->check(CLI::IsMember({2, 3, 4}))->capture_default_str();
    eval->add_option("--report", ef.report, "also write line records to this file");
    eval->add_flag("--json", ef.json, "print line records instead of a table");

    InferFlags inf;
    auto* infer = app.add_subcommand("infer", "upscale one PNG");
    infer->add_option("--checkpoint", inf.checkpoint, "model checkpoint")->required();
    infer->add_option("--input", inf.input, "input PNG")->required();
    infer->add_option("--output", inf.output, "output PNG")->required();

    InspectFlags isf;
    auto* inspect = app.add_subcommand("inspect", "parameter counts, FLOPs and cube layout");
    add_model_flags(inspect, isf.model);
    inspect->add_option("--checkpoint", isf.checkpoint, "read the config from a checkpoint");
    inspect->add_option("--height", isf.height, "LR height for FLOPs")->check(CLI::PositiveNumber)->capture_default_str();
    inspect->add_option("--width", isf.width, "LR width for FLOPs")->check(CLI::PositiveNumber)->capture_default_str();
    inspect->add_flag("--json", isf.json, "machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*train) return cmd_train(tf, *train);
        if (*eval) return cmd_eval(ef);
        if (*infer) return cmd_infer(inf);
        if (*inspect) return cmd_inspect(isf);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigurationError& e) {
        std::cerr << "error: invalid configuration: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
