#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cubeformer/checkpoint.hpp"
#include "cubeformer/data/dataset.hpp"
#include "cubeformer/train/optimizer.hpp"

namespace cubeformer {

struct TrainConfig {
    std::uint64_t batch_size = 32;
    std::uint64_t total_iters = 800000;
    double lr0 = 5e-4;
    std::uint64_t halve_every = 200000;
    double lambda = 0.01;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0;  // 0: only the final checkpoint
    Index patch_size = 64;               // LR patch edge
    bool augment = true;                 // flips, rotations and RGB permutation

    void validate() const;
    std::string to_text() const;
    static TrainConfig from_text(const std::string& text);
    bool operator==(const TrainConfig& o) const { return to_text() == o.to_text(); }
};

/// lr0 * 0.5^floor(iter / halve_every)
double lr_at(std::uint64_t iter, const TrainConfig& cfg);

struct LogRecord {
    std::uint64_t iter = 0;
    double lr = 0.0;
    double l_sr = 0.0;
    double l_fr = 0.0;
    double loss = 0.0;
    double wall_ms = 0.0;

    std::string to_json() const;
    static LogRecord from_json(const std::string& line);
};

std::vector<LogRecord> read_log(const std::filesystem::path& path);

/// Exponential moving average of the loss column.
std::vector<double> smooth_losses(const std::vector<LogRecord>& log, double alpha);

struct TrainOptions {
    /// Checkpoints go to out_dir/ckpt_<iters> and the log to out_dir/loss_log.jsonl.
    /// An empty path keeps everything in memory.
    std::filesystem::path out_dir;
    std::ostream* progress = nullptr;
    std::uint64_t progress_every = 100;
};

struct TrainResult {
    Checkpoint final_checkpoint;
    std::vector<LogRecord> log;  // records produced by this call
    std::filesystem::path last_checkpoint_path;
};

/// Snapshot of model + optimizer after `iteration` completed updates.
Checkpoint make_checkpoint(CubeFormer<float>& model, const OptimizerState<float>& opt, const TrainConfig& cfg,
                           std::uint64_t iteration);

/// Restores optimizer moments from a checkpoint (parameters via import_parameters).
OptimizerState<float> optimizer_from_checkpoint(const Checkpoint& ckpt);

/// The random engine used for iteration `iter`; depends only on (seed, iter) so
/// that resuming needs no stored generator state.
std::mt19937_64 iteration_rng(std::uint64_t seed, std::uint64_t iter);

/// Samples (LR, HR) patch tensors for one iteration.
std::vector<std::pair<Tensor<float>, Tensor<float>>> sample_batch(const std::vector<ImagePair>& data,
                                                                  const TrainConfig& cfg, int scale,
                                                                  std::mt19937_64& rng);

/// Runs iterations [start, total_iters) where start is resume->iteration or 0.
/// Throws NumericalError on a non-finite loss naming the last checkpoint written.
TrainResult train_loop(CubeFormer<float>& model, const std::vector<ImagePair>& data, const TrainConfig& cfg,
                       const TrainOptions& opts = {}, const Checkpoint* resume = nullptr);

}  // namespace cubeformer
