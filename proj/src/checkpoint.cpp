#include "omat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "omat/error.hpp"
#include "omat/rng.hpp"

namespace omat::ckpt {

namespace {

constexpr char kMagic[4] = {'O', 'M', 'A', 'T'};

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(buf, bits);
}

struct Cursor {
    const std::string& buf;
    std::size_t pos = 0;
    std::string where;

    void need(std::size_t n) {
        if (pos + n > buf.size())
            throw ArtifactError("checkpoint: truncated file " + where);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

// Index with strict lookup for the typed loaders.
struct Loaded {
    std::map<std::string, Tensor> by_name;
    std::string path;

    const Tensor& get(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw ArtifactError("checkpoint: " + path + " is missing tensor '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return by_name.count(name) != 0; }
};

Loaded load_indexed(const std::filesystem::path& path) {
    Loaded out;
    out.path = path.string();
    for (auto& nt : read_container(path)) out.by_name.emplace(std::move(nt.name), std::move(nt.value));
    return out;
}

Tensor str_tensor(const std::string& s) {
    std::vector<double> d(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<unsigned char>(s[i]);
    return Tensor({s.size()}, std::move(d));
}

std::string tensor_str(const Tensor& t) {
    std::string s;
    s.reserve(t.size());
    for (double v : t.data) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return s;
}

Tensor vec_tensor(const std::vector<std::size_t>& v) {
    std::vector<double> d(v.begin(), v.end());
    return Tensor({v.size()}, std::move(d));
}

std::vector<std::size_t> tensor_vec(const Tensor& t) {
    std::vector<std::size_t> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<std::size_t>(t.data[i]);
    return v;
}

void pack_mlp(std::vector<NamedTensor>& items, const std::string& prefix, const Mlp& m) {
    items.push_back({prefix + ".dims", vec_tensor(m.dims)});
    items.push_back({prefix + ".act", Tensor::scalar(m.hidden_act == Act::Relu ? 0.0 : 1.0)});
    const auto names = m.param_names(prefix);
    for (std::size_t i = 0; i < m.params.size(); ++i) items.push_back({names[i], m.params[i]});
}

Mlp unpack_mlp(const Loaded& in, const std::string& prefix) {
    Mlp m;
    m.dims = tensor_vec(in.get(prefix + ".dims"));
    if (m.dims.size() < 2)
        throw ArtifactError("checkpoint: " + in.path + " has degenerate dims for '" + prefix + "'");
    m.hidden_act = in.get(prefix + ".act").item() == 0.0 ? Act::Relu : Act::Tanh;
    const auto names = m.param_names(prefix);
    m.params.reserve(names.size());
    for (const auto& n : names) m.params.push_back(in.get(n));
    for (std::size_t l = 0; l + 1 < m.dims.size(); ++l) {
        const Tensor& w = m.params[2 * l];
        if (!shapes_equal(w.shape, {m.dims[l], m.dims[l + 1]}))
            throw ArtifactError("checkpoint: " + in.path + " has mismatched shape for '" +
                                names[2 * l] + "'");
    }
    return m;
}

} // namespace

std::string digest_hex(std::uint64_t h) {
    static const char* hex = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = hex[h & 0xf];
    return s;
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("digest: cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return digest_hex(fnv1a64(ss.str()));
}

void write_container(const std::filesystem::path& path, std::span<const NamedTensor> items) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kFormatVersion);
    put_u32(buf, static_cast<std::uint32_t>(items.size()));
    for (const auto& nt : items) {
        put_u32(buf, static_cast<std::uint32_t>(nt.name.size()));
        buf += nt.name;
        put_u32(buf, static_cast<std::uint32_t>(nt.value.shape.size()));
        for (std::size_t e : nt.value.shape) put_u64(buf, e);
        for (double v : nt.value.data) put_f64(buf, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ArtifactError("checkpoint: cannot open " + path.string() + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw ArtifactError("checkpoint: short write to " + path.string());
}

std::vector<NamedTensor> read_container(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("checkpoint: cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    Cursor c{buf, 0, path.string()};
    if (c.bytes(4) != std::string(kMagic, 4))
        throw ArtifactError("checkpoint: bad magic in " + path.string());
    const std::uint32_t version = c.u32();
    if (version != kFormatVersion)
        throw ArtifactError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                            path.string());
    const std::uint32_t count = c.u32();

    std::vector<NamedTensor> items;
    items.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = c.bytes(c.u32());
        const std::uint32_t rank = c.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(c.u64());
            numel *= e;
        }
        c.need(numel * 8);
        std::vector<double> data(numel);
        for (auto& v : data) v = c.f64();
        nt.value = Tensor(std::move(shape), std::move(data));
        items.push_back(std::move(nt));
    }
    if (c.pos != buf.size())
        throw ArtifactError("checkpoint: trailing bytes in " + path.string());
    return items;
}

void save_detector(const std::filesystem::path& path, const detector::Detector& d) {
    std::vector<NamedTensor> items;
    items.push_back({"id", str_tensor(d.id)});
    items.push_back({"arch", Tensor::scalar(d.arch == detector::Arch::FrozenHead ? 0.0 : 1.0)});
    items.push_back({"pre", Tensor({3}, {static_cast<double>(d.pre.levels), d.pre.mean, d.pre.std})});
    pack_mlp(items, "backbone", d.backbone);
    pack_mlp(items, "head", d.head);
    write_container(path, items);
}

detector::Detector load_detector(const std::filesystem::path& path) {
    Loaded in = load_indexed(path);
    detector::Detector d;
    d.id = tensor_str(in.get("id"));
    d.arch = in.get("arch").item() == 0.0 ? detector::Arch::FrozenHead : detector::Arch::PlainMlp;
    const Tensor& pre = in.get("pre");
    if (pre.size() != 3) throw ArtifactError("checkpoint: bad 'pre' tensor in " + in.path);
    d.pre.levels = static_cast<int>(pre.data[0]);
    d.pre.mean = pre.data[1];
    d.pre.std = pre.data[2];
    d.backbone = unpack_mlp(in, "backbone");
    d.head = unpack_mlp(in, "head");
    if (d.head.dims.front() != d.backbone.dims.back() || d.head.dims.back() != 1)
        throw ArtifactError("checkpoint: backbone/head dims disagree in " + in.path);
    return d;
}

void save_generator(const std::filesystem::path& path, const diffusion::Generator& g) {
    using diffusion::Generator;
    std::vector<NamedTensor> items;
    items.push_back({"id", str_tensor(g.id)});
    items.push_back({"kind", Tensor::scalar(g.kind == Generator::Kind::Ddim ? 0.0 : 1.0)});
    items.push_back({"classes", Tensor::scalar(static_cast<double>(g.n_classes))});
    items.push_back({"latent_shape", vec_tensor(g.latent_shape)});
    items.push_back({"image_shape", vec_tensor(g.image_shape)});
    if (g.kind == Generator::Kind::Ddim) {
        items.push_back({"sched", Tensor({2},
                                         {g.schedule.kind == diffusion::ScheduleKind::Linear ? 0.0 : 1.0,
                                          static_cast<double>(g.schedule.T)})});
        items.push_back({"steps", Tensor::scalar(static_cast<double>(g.inference_steps))});
        items.push_back({"decoder", g.decoder});
        items.push_back({"dn.meta", Tensor({3}, {static_cast<double>(g.denoiser.latent_numel),
                                                 static_cast<double>(g.denoiser.time_dim),
                                                 static_cast<double>(g.denoiser.n_classes)})});
        pack_mlp(items, "dn", g.denoiser.net);
    } else {
        pack_mlp(items, "os", g.oneshot);
    }
    write_container(path, items);
}

diffusion::Generator load_generator(const std::filesystem::path& path) {
    using diffusion::Generator;
    Loaded in = load_indexed(path);
    Generator g;
    g.id = tensor_str(in.get("id"));
    g.kind = in.get("kind").item() == 0.0 ? Generator::Kind::Ddim : Generator::Kind::OneShot;
    g.n_classes = static_cast<std::size_t>(in.get("classes").item());
    g.latent_shape = tensor_vec(in.get("latent_shape"));
    g.image_shape = tensor_vec(in.get("image_shape"));
    if (g.kind == Generator::Kind::Ddim) {
        const Tensor& sched = in.get("sched");
        if (sched.size() != 2) throw ArtifactError("checkpoint: bad 'sched' tensor in " + in.path);
        g.schedule = diffusion::make_schedule(
            sched.data[0] == 0.0 ? diffusion::ScheduleKind::Linear : diffusion::ScheduleKind::Cosine,
            static_cast<std::size_t>(sched.data[1]));
        g.inference_steps = static_cast<std::size_t>(in.get("steps").item());
        g.decoder = in.get("decoder");
        const Tensor& dm = in.get("dn.meta");
        if (dm.size() != 3) throw ArtifactError("checkpoint: bad 'dn.meta' tensor in " + in.path);
        g.denoiser.latent_numel = static_cast<std::size_t>(dm.data[0]);
        g.denoiser.time_dim = static_cast<std::size_t>(dm.data[1]);
        g.denoiser.n_classes = static_cast<std::size_t>(dm.data[2]);
        g.denoiser.net = unpack_mlp(in, "dn");
    } else {
        g.oneshot = unpack_mlp(in, "os");
    }
    return g;
}

} // namespace omat::ckpt
