#include "cubeformer/model.hpp"

#include <cstdio>
#include <numeric>
#include <sstream>

namespace cubeformer {

std::string to_string(Variant v) { return v == Variant::full ? "full" : "lite"; }

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "lite") return Variant::lite;
    throw ConfigurationError("unknown model variant '" + s + "' (expected full|lite)");
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string spec_text(const CubeSpec& s) {
    return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

CubeSpec parse_spec(const std::string& text, SamplingMode mode) {
    CubeSpec s;
    s.mode = mode;
    char x1 = 0, x2 = 0;
    long long h = 0, w = 0, c = 0;
    std::istringstream is(text);
    if (!(is >> h >> x1 >> w >> x2 >> c) || x1 != 'x' || x2 != 'x') {
        throw ConfigurationError("cube spec '" + text + "' is not of the form HxWxC");
    }
    s.h = h;
    s.w = w;
    s.c = c;
    return s;
}

}  // namespace

void ModelConfig::validate() const {
    if (scale < 2 || scale > 4) throw ConfigurationError("scale must be 2, 3 or 4, got " + std::to_string(scale));
    if (n_groups < 1) throw ConfigurationError("n_groups must be at least 1");
    if (channels < 1) throw ConfigurationError("channels must be positive");
    if (variant == Variant::lite && channels % 2 != 0) {
        throw ConfigurationError("lite variant needs an even channel count, got " + std::to_string(channels));
    }
    if (block.intra.mode != SamplingMode::block) throw ConfigurationError("intra cube spec must use block sampling");
    if (block.inter.mode != SamplingMode::grid) throw ConfigurationError("inter cube spec must use grid sampling");
    if (block.shuffle_groups <= 0 || channels % block.shuffle_groups != 0) {
        throw ConfigurationError("channels (" + std::to_string(channels) + ") not divisible by shuffle groups");
    }
    const Index ac = attention_channels();
    if (block.heads <= 0 || ac % block.heads != 0) {
        throw ConfigurationError("attention width " + std::to_string(ac) + " not divisible by " +
                                 std::to_string(block.heads) + " heads");
    }
    const Index head_channels = ac / block.heads;
    for (const auto* spec : {&block.intra, &block.inter}) {
        if (spec->h <= 0 || spec->w <= 0 || spec->c <= 0) throw ConfigurationError("cube spec factors must be positive");
        if (head_channels % spec->c != 0) {
            throw ConfigurationError("per-head channel count " + std::to_string(head_channels) +
                                     " not divisible by cube channel factor " + std::to_string(spec->c) + " (" +
                                     to_string(spec->mode) + " sampling)");
        }
    }
    if (block.ffn_expansion <= 0 || block.mbconv_expansion <= 0) throw ConfigurationError("expansion ratios must be positive");
    if (block.qkv_kernel <= 0 || block.qkv_kernel % 2 == 0) throw ConfigurationError("qkv kernel must be odd");
}

Index ModelConfig::height_multiple() const { return std::lcm(block.intra.h, block.inter.h); }
Index ModelConfig::width_multiple() const { return std::lcm(block.intra.w, block.inter.w); }

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "variant=" << to_string(variant) << '\n'
       << "n_groups=" << n_groups << '\n'
       << "channels=" << channels << '\n'
       << "scale=" << scale << '\n'
       << "heads=" << block.heads << '\n'
       << "intra=" << spec_text(block.intra) << '\n'
       << "inter=" << spec_text(block.inter) << '\n'
       << "affinity_order=" << (block.order == AffinityOrder::standard ? "standard" : "transposed") << '\n'
       << "qkv_kernel=" << block.qkv_kernel << '\n'
       << "ffn_expansion=" << format_double(block.ffn_expansion) << '\n'
       << "mbconv_expansion=" << format_double(block.mbconv_expansion) << '\n'
       << "se_reduction=" << block.se_reduction << '\n'
       << "shuffle_groups=" << block.shuffle_groups << '\n'
       << "ln_eps=" << format_double(block.ln_eps) << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigurationError("model config line without '=': " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "variant") cfg.variant = variant_from_string(value);
            else if (key == "n_groups") cfg.n_groups = std::stoll(value);
            else if (key == "channels") cfg.channels = std::stoll(value);
            else if (key == "scale") cfg.scale = std::stoll(value);
            else if (key == "heads") cfg.block.heads = std::stoll(value);
            else if (key == "intra") cfg.block.intra = parse_spec(value, SamplingMode::block);
            else if (key == "inter") cfg.block.inter = parse_spec(value, SamplingMode::grid);
            else if (key == "affinity_order") {
                if (value == "standard") cfg.block.order = AffinityOrder::standard;
                else if (value == "transposed") cfg.block.order = AffinityOrder::transposed;
                else throw ConfigurationError("unknown affinity order '" + value + "'");
            } else if (key == "qkv_kernel") cfg.block.qkv_kernel = std::stoll(value);
            else if (key == "ffn_expansion") cfg.block.ffn_expansion = std::stod(value);
            else if (key == "mbconv_expansion") cfg.block.mbconv_expansion = std::stod(value);
            else if (key == "se_reduction") cfg.block.se_reduction = std::stoll(value);
            else if (key == "shuffle_groups") cfg.block.shuffle_groups = std::stoll(value);
            else if (key == "ln_eps") cfg.block.ln_eps = std::stod(value);
            else throw ConfigurationError("unknown model config key '" + key + "'");
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const ConfigurationError*>(&e)) throw;
            throw ConfigurationError("bad value for model config key '" + key + "': " + value);
        }
    }
    return cfg;
}

template <typename T>
CubeFormer<T>::CubeFormer(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    ParamInit init(seed);
    shallow_ = init.conv<T>(3, config_.channels, 3);
    for (Index g = 0; g < config_.n_groups; ++g) {
        groups_.push_back(make_ctg_params<T>(init, config_.channels, config_.block, config_.variant == Variant::lite));
    }
    head_ = init.conv<T>(config_.channels, 3 * config_.scale * config_.scale, 3, kResidualOutputGain);
}

template <typename T>
Tensor<T> CubeFormer<T>::shallow_features(const Tensor<T>& lr) const {
    return shallow_(lr);
}

template <typename T>
Tensor<T> CubeFormer<T>::backbone(const Tensor<T>& features) const {
    Tensor<T> y = features;
    for (const auto& g : groups_) y = group_forward(y, g, config_.block);
    return y;
}

template <typename T>
Tensor<T> CubeFormer<T>::restore(const Tensor<T>& deep) const {
    return pixel_shuffle(head_(deep), config_.scale);
}

template <typename T>
Tensor<T> CubeFormer<T>::forward(const Tensor<T>& lr) const {
    if (lr.ndim() != 3 || lr.dim(0) != 3) throw ShapeError("forward: expected (3,H,W) image, got " + shape_str(lr.shape()));
    const Index hm = config_.height_multiple(), wm = config_.width_multiple();
    if (lr.dim(1) % hm != 0 || lr.dim(2) % wm != 0) {
        throw ConfigurationError("forward: input " + std::to_string(lr.dim(1)) + "x" + std::to_string(lr.dim(2)) +
                                 " must be a multiple of " + std::to_string(hm) + "x" + std::to_string(wm) +
                                 " (use upscale() for arbitrary sizes)");
    }
    if (lr.dim(1) < kEsaMinExtent || lr.dim(2) < kEsaMinExtent) {
        throw ConfigurationError("forward: input must be at least " + std::to_string(kEsaMinExtent) + " pixels per side");
    }
    const Tensor<T> xs = shallow_features(lr);
    return restore(backbone(xs) + xs);
}

template <typename T>
Tensor<T> CubeFormer<T>::upscale(const Tensor<T>& lr) const {
    if (lr.ndim() != 3) throw ShapeError("upscale: expected (3,H,W) image");
    auto target = [](Index n, Index m) {
        Index t = (n + m - 1) / m * m;
        while (t < kEsaMinExtent) t += m;
        return t;
    };
    const Index h = lr.dim(1), w = lr.dim(2);
    const Index th = target(h, config_.height_multiple()), tw = target(w, config_.width_multiple());
    if (th == h && tw == w) return forward(lr);
    if (th - h >= h || tw - w >= w) {
        throw ConfigurationError("upscale: image " + std::to_string(h) + "x" + std::to_string(w) +
                                 " is too small to reflect-pad to " + std::to_string(th) + "x" + std::to_string(tw));
    }
    const Tensor<T> padded = pad2d(lr, 0, th - h, 0, tw - w, PadMode::reflect);
    const Tensor<T> out = forward(padded);
    const Index s = config_.scale;
    return slice(slice(out, 1, 0, h * s), 2, 0, w * s);
}

template <typename T>
void CubeFormer<T>::visit(const ParamVisitor<T>& fn) {
    visit_params(shallow_, "shallow", fn);
    for (std::size_t g = 0; g < groups_.size(); ++g) visit_params(groups_[g], "groups." + std::to_string(g), fn);
    visit_params(head_, "head", fn);
}

template <typename T>
std::vector<NamedTensor<T>> CubeFormer<T>::named_parameters() {
    std::vector<NamedTensor<T>> out;
    visit([&](const std::string& path, Tensor<T>& t) { out.push_back({path, t}); });
    return out;
}

template <typename T>
std::vector<Tensor<T>> CubeFormer<T>::parameters() {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
}

template <typename T>
void CubeFormer<T>::set_requires_grad(bool flag) {
    visit([flag](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); });
}

template <typename T>
void CubeFormer<T>::zero_grad() {
    visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template class CubeFormer<float>;
template class CubeFormer<double>;

namespace {

std::string block_of(const std::string& path) {
    std::size_t parts = path.rfind("groups.", 0) == 0 ? 3 : 1;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < parts; ++i) {
        pos = path.find('.', pos);
        if (pos == std::string::npos) return path;
        if (i + 1 < parts) ++pos;
    }
    return path.substr(0, pos);
}

}  // namespace

template <typename T>
ParamReport param_count(CubeFormer<T>& model) {
    ParamReport report;
    model.visit([&](const std::string& path, Tensor<T>& t) {
        const auto n = static_cast<std::int64_t>(t.numel());
        report.total += n;
        report.per_path.emplace_back(path, n);
        const std::string block = block_of(path);
        if (report.per_block.empty() || report.per_block.back().first != block) report.per_block.emplace_back(block, 0);
        report.per_block.back().second += n;
    });
    return report;
}

template ParamReport param_count(CubeFormer<float>&);
template ParamReport param_count(CubeFormer<double>&);

std::optional<std::int64_t> reference_param_count(Variant variant, Index scale) {
    static const std::map<std::pair<Variant, Index>, std::int64_t> table{
        {{Variant::full, 2}, 778'000}, {{Variant::full, 3}, 787'000}, {{Variant::full, 4}, 799'000},
        {{Variant::lite, 2}, 349'000}, {{Variant::lite, 3}, 358'000}, {{Variant::lite, 4}, 370'000},
    };
    auto it = table.find({variant, scale});
    if (it == table.end()) return std::nullopt;
    return it->second;
}

std::int64_t conv_flops(Index in_channels, Index out_channels, Index kernel, Index out_h, Index out_w, bool depthwise,
                        bool bias) {
    const std::int64_t outputs = static_cast<std::int64_t>(out_channels) * out_h * out_w;
    const std::int64_t taps = static_cast<std::int64_t>(depthwise ? 1 : in_channels) * kernel * kernel;
    return 2 * taps * outputs + (bias ? outputs : 0);
}

std::int64_t attention_core_flops(Index channels, Index height, Index width, Index heads, const CubeSpec& spec) {
    const Index head_channels = channels / heads;
    const std::int64_t n = spec.cube_length(head_channels, height, width);
    const std::int64_t cubes = spec.cube_count(head_channels, height, width);
    // q k^T and A v, each n^2 multiply-accumulates.
    return heads * cubes * 2 * (2 * n * n);
}

FlopsReport flops_estimate(const ModelConfig& cfg, Index h, Index w) {
    cfg.validate();
    if (h < kEsaMinExtent || w < kEsaMinExtent) throw ConfigurationError("flops_estimate: input too small");
    const BlockConfig& b = cfg.block;
    FlopsReport r;
    auto add = [&](const std::string& name, std::int64_t f) {
        r.per_block.emplace_back(name, f);
        r.total += f;
    };
    const Index c = cfg.channels;

    auto ctb = [&](Index ch, const CubeSpec& spec) {
        std::int64_t f = 0;
        f += 3 * conv_flops(ch, ch, b.qkv_kernel, h, w);
        f += attention_core_flops(ch, h, w, b.heads, spec);
        f += conv_flops(ch, ch, 1, h, w);
        const Index hidden = b.ffn_hidden(ch);
        f += conv_flops(ch, hidden, 1, h, w) + conv_flops(hidden, hidden, 3, h, w, true) + conv_flops(hidden, ch, 1, h, w);
        return f;
    };

    add("shallow", conv_flops(3, c, 3, h, w));
    for (Index g = 0; g < cfg.n_groups; ++g) {
        const std::string p = "groups." + std::to_string(g);
        const Index hidden = b.mbconv_hidden(c), squeeze = b.se_hidden(c);
        add(p + ".mbconv", conv_flops(c, hidden, 1, h, w) + conv_flops(hidden, hidden, 3, h, w, true) +
                               conv_flops(hidden, squeeze, 1, 1, 1) + conv_flops(squeeze, hidden, 1, 1, 1) +
                               conv_flops(hidden, c, 1, h, w));
        const Index ac = cfg.attention_channels();
        add(p + ".intra", ctb(ac, b.intra));
        add(p + ".inter", ctb(ac, b.inter));
        const Index f = BlockConfig::esa_hidden(c);
        const Index dh = (h - 3) / 2 + 1, dw = (w - 3) / 2 + 1;
        const Index ph = (dh - 7) / 3 + 1, pw = (dw - 7) / 3 + 1;
        add(p + ".esa", conv_flops(c, f, 1, h, w) + conv_flops(f, f, 1, h, w) + conv_flops(f, f, 3, dh, dw) +
                            3 * conv_flops(f, f, 3, ph, pw) + conv_flops(f, c, 1, h, w));
    }
    add("head", conv_flops(c, 3 * cfg.scale * cfg.scale, 3, h, w));
    return r;
}

}  // namespace cubeformer
