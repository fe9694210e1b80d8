#include "cubeformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cubeformer {

namespace {

constexpr char kMagic[8] = {'C', 'U', 'B', 'E', 'F', 'C', 'K', 'P'};

class Writer {
public:
    template <typename U>
    void integer(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) { integer(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        integer<std::uint64_t>(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    template <typename U>
    U integer() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    float f32() { return std::bit_cast<float>(integer<std::uint32_t>()); }
    std::string str() {
        const auto n = integer<std::uint64_t>();
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    void expect_magic() {
        need(sizeof kMagic);
        if (std::memcmp(bytes_.data() + pos_, kMagic, sizeof kMagic) != 0) fail("not a checkpoint (bad magic)");
        pos_ += sizeof kMagic;
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string& what) const { throw IoError(source_ + ": " + what); }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) fail("truncated checkpoint");
    }

    const std::vector<std::uint8_t>& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.integer<std::uint32_t>(ckpt.format_version);
    w.str(ckpt.model_config.to_text());
    w.integer<std::uint64_t>(ckpt.init_seed);
    w.str(ckpt.train_config);
    w.integer<std::uint64_t>(ckpt.iteration);
    w.str(ckpt.rng_state);
    w.integer<std::uint64_t>(ckpt.params.size());
    for (const auto& p : ckpt.params) {
        w.str(p.path);
        w.integer<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
        for (Index d : p.shape) w.integer<std::uint64_t>(static_cast<std::uint64_t>(d));
        for (float v : p.values) w.f32(v);
    }
    w.integer<std::uint64_t>(ckpt.optimizer_step);
    const bool moments = !ckpt.first_moments.empty();
    w.integer<std::uint8_t>(moments ? 1 : 0);
    if (moments) {
        if (ckpt.first_moments.size() != ckpt.params.size() || ckpt.second_moments.size() != ckpt.params.size()) {
            throw ShapeError("checkpoint: optimizer moments do not match parameter count");
        }
        for (const auto* set : {&ckpt.first_moments, &ckpt.second_moments}) {
            for (std::size_t i = 0; i < set->size(); ++i) {
                if ((*set)[i].size() != ckpt.params[i].values.size()) throw ShapeError("checkpoint: moment length mismatch");
                for (float v : (*set)[i]) w.f32(v);
            }
        }
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    Reader r(bytes, source);
    r.expect_magic();
    Checkpoint c;
    c.format_version = r.integer<std::uint32_t>();
    if (c.format_version != Checkpoint::kFormatVersion) {
        r.fail("unsupported checkpoint version " + std::to_string(c.format_version));
    }
    try {
        c.model_config = ModelConfig::from_text(r.str());
    } catch (const ConfigurationError& e) {
        r.fail(std::string("corrupt model config: ") + e.what());
    }
    c.init_seed = r.integer<std::uint64_t>();
    c.train_config = r.str();
    c.iteration = r.integer<std::uint64_t>();
    c.rng_state = r.str();
    const auto n = r.integer<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        TensorBlob b;
        b.path = r.str();
        const auto nd = r.integer<std::uint32_t>();
        if (nd > 8) r.fail("implausible tensor rank in '" + b.path + "'");
        std::uint64_t count = 1;
        for (std::uint32_t d = 0; d < nd; ++d) {
            const auto e = r.integer<std::uint64_t>();
            if (e == 0 || e > (1ULL << 32)) r.fail("implausible extent in '" + b.path + "'");
            b.shape.push_back(static_cast<Index>(e));
            count *= e;
        }
        if (count > bytes.size()) r.fail("tensor '" + b.path + "' larger than file");
        b.values.resize(count);
        for (auto& v : b.values) v = r.f32();
        c.params.push_back(std::move(b));
    }
    c.optimizer_step = r.integer<std::uint64_t>();
    if (r.integer<std::uint8_t>() != 0) {
        for (auto* set : {&c.first_moments, &c.second_moments}) {
            set->resize(c.params.size());
            for (std::size_t i = 0; i < c.params.size(); ++i) {
                (*set)[i].resize(c.params[i].values.size());
                for (auto& v : (*set)[i]) v = r.f32();
            }
        }
    }
    if (!r.at_end()) r.fail("trailing bytes after checkpoint payload");
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        os.flush();
        if (!os) throw IoError("failed writing checkpoint '" + tmp.string() + "' (disk full?)");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

template <typename T>
std::vector<TensorBlob> export_parameters(CubeFormer<T>& model) {
    std::vector<TensorBlob> out;
    model.visit([&](const std::string& path, Tensor<T>& t) {
        TensorBlob b{path, t.shape(), std::vector<float>(static_cast<std::size_t>(t.numel()))};
        for (Index i = 0; i < t.numel(); ++i) b.values[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
        out.push_back(std::move(b));
    });
    return out;
}

template <typename T>
void import_parameters(CubeFormer<T>& model, const std::vector<TensorBlob>& blobs) {
    std::size_t i = 0;
    model.visit([&](const std::string& path, Tensor<T>& t) {
        if (i >= blobs.size()) throw ShapeError("checkpoint is missing parameter '" + path + "'");
        const auto& b = blobs[i++];
        if (b.path != path || b.shape != t.shape()) {
            throw ShapeError("checkpoint parameter '" + b.path + "' " + shape_str(b.shape) + " does not match model '" +
                             path + "' " + shape_str(t.shape()));
        }
        auto& v = t.mutable_values();
        for (Index k = 0; k < v.size(); ++k) v[k] = static_cast<T>(b.values[static_cast<std::size_t>(k)]);
    });
    if (i != blobs.size()) throw ShapeError("checkpoint has " + std::to_string(blobs.size() - i) + " unexpected parameters");
}

template <typename T>
CubeFormer<T> model_from_checkpoint(const Checkpoint& ckpt) {
    CubeFormer<T> model(ckpt.model_config, ckpt.init_seed);
    import_parameters(model, ckpt.params);
    return model;
}

template std::vector<TensorBlob> export_parameters(CubeFormer<float>&);
template std::vector<TensorBlob> export_parameters(CubeFormer<double>&);
template void import_parameters(CubeFormer<float>&, const std::vector<TensorBlob>&);
template void import_parameters(CubeFormer<double>&, const std::vector<TensorBlob>&);
template CubeFormer<float> model_from_checkpoint(const Checkpoint&);
template CubeFormer<double> model_from_checkpoint(const Checkpoint&);

}  // namespace cubeformer
