#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cubeformer/model.hpp"

namespace cubeformer {

/// Named f32 row-major array as stored on disk.
struct TensorBlob {
    std::string path;
    Shape shape;
    std::vector<float> values;

    bool operator==(const TensorBlob&) const = default;
};

/// Everything needed to resume training exactly.
///
/// File layout (all integers little-endian):
///   magic "CUBEFCKP" | u32 version
///   str model_config   (key=value text, see ModelConfig::to_text)
///   u64 init_seed
///   str train_config   (key=value text)
///   u64 iteration
///   str rng_state
///   u64 n_params, then per param: str path | u32 ndim | u64 dims... | f32 values...
///   u64 optimizer_step | u8 has_moments, then first moments and second moments
///   in parameter order (f32 values only)
/// where str is u64 byte length followed by the bytes.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    std::uint32_t format_version = kFormatVersion;
    ModelConfig model_config;
    std::uint64_t init_seed = 0;
    std::string train_config;
    std::uint64_t iteration = 0;
    std::string rng_state;
    std::vector<TensorBlob> params;
    std::uint64_t optimizer_step = 0;
    std::vector<std::vector<float>> first_moments;   // empty when no optimizer state
    std::vector<std::vector<float>> second_moments;

    bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

/// Writes atomically (temporary file + rename). Throws IoError.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<TensorBlob> export_parameters(CubeFormer<T>& model);

/// Copies blob values into the model; paths and shapes must match exactly.
template <typename T>
void import_parameters(CubeFormer<T>& model, const std::vector<TensorBlob>& blobs);

/// Rebuilds the model recorded in a checkpoint.
template <typename T>
CubeFormer<T> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cubeformer
