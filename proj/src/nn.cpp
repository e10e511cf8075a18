#include "mvreg/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace mvreg {

Param& ParamStore::create(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw CheckpointError("duplicate parameter: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Tensor(rows, cols);
    p->grad = Tensor(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Param& ParamStore::create_kaiming(const std::string& name, int rows, int cols, Rng& rng) {
    Param& p = create(name, rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(rows));
    for (double& x : p.value.data) x = rng.uniform(-bound, bound);
    return p;
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError("unknown parameter: " + name);
    return *params_[it->second];
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p->grad.fill(0.0);
}

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CheckpointError("checkpoint: unexpected EOF");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(os, u);
}

float read_f32(std::istream& is) {
    uint32_t u = read_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void ParamStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open for write: " + path);
    os.write("MDGD", 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<uint32_t>(params_.size()));
    for (const auto& p : params_) {
        write_u32(os, static_cast<uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_u32(os, 2);  // rank
        write_u32(os, static_cast<uint32_t>(p->value.rows));
        write_u32(os, static_cast<uint32_t>(p->value.cols));
        for (double x : p->value.data) write_f32(os, static_cast<float>(x));
    }
    if (!os) throw CheckpointError("write failed: " + path);
}

void ParamStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MDGD", 4) != 0)
        throw CheckpointError("bad magic in " + path);
    if (read_u32(is) != kCheckpointVersion) throw CheckpointError("bad version in " + path);
    const uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = read_u32(is);
        if (rank != 2) throw CheckpointError("unsupported rank in " + path);
        const int rows = static_cast<int>(read_u32(is));
        const int cols = static_cast<int>(read_u32(is));
        Param& p = has(name) ? get(name) : create(name, rows, cols);
        if (p.value.rows != rows || p.value.cols != cols)
            throw CheckpointError("shape mismatch for " + name);
        for (double& x : p.value.data) x = static_cast<double>(read_f32(is));
    }
}

Dense::Dense(ParamStore& s, const std::string& prefix, int in, int out, Rng& rng) {
    W = &s.create_kaiming(prefix + ".W", in, out, rng);
    b = &s.create(prefix + ".b", 1, out);
}

Var Dense::operator()(Tape& t, Var x) const {
    return t.add_rowvec(t.matmul(x, t.param(*W)), t.param(*b));
}

Mlp::Mlp(ParamStore& s, const std::string& prefix, int in, int hidden, int out, Rng& rng)
    : l1(s, prefix + ".l1", in, hidden, rng), l2(s, prefix + ".l2", hidden, out, rng) {}

Var Mlp::operator()(Tape& t, Var x) const { return l2(t, t.relu(l1(t, x))); }

LayerNorm::LayerNorm(ParamStore& s, const std::string& prefix, int dim) {
    gain = &s.create(prefix + ".gain", 1, dim);
    gain->value.fill(1.0);
    bias = &s.create(prefix + ".bias", 1, dim);
}

Var LayerNorm::operator()(Tape& t, Var x) const {
    return t.layernorm(x, t.param(*gain), t.param(*bias));
}

GruCell::GruCell(ParamStore& s, const std::string& prefix, int in, int dim, Rng& rng)
    : xz(s, prefix + ".xz", in, dim, rng),
      hz(s, prefix + ".hz", dim, dim, rng),
      xr(s, prefix + ".xr", in, dim, rng),
      hr(s, prefix + ".hr", dim, dim, rng),
      xh(s, prefix + ".xh", in, dim, rng),
      hh(s, prefix + ".hh", dim, dim, rng) {}

Var GruCell::operator()(Tape& t, Var h, Var x) const {
    Var z = t.sigmoid(t.add(xz(t, x), hz(t, h)));
    Var r = t.sigmoid(t.add(xr(t, x), hr(t, h)));
    Var cand = t.tanh_(t.add(xh(t, x), hh(t, t.mul(r, h))));
    Var keep = t.mul(t.sub(t.input(Tensor::full(z.rows, z.cols, 1.0)), z), h);
    return t.add(keep, t.mul(z, cand));
}

Var softmax_attention(Tape& t, Var q, Var k, Var v) {
    Var logits = t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols)));
    Var weights = t.softmax(logits);
    return t.matmul(weights, v);
}

double AdamW::current_lr() const {
    const double frac =
        std::min(1.0, static_cast<double>(step_count) / static_cast<double>(std::max<int64_t>(horizon, 1)));
    return base_lr * 0.5 * (1.0 + std::cos(frac * M_PI));
}

void AdamW::step(ParamStore& store) {
    const double lr = current_lr();
    step_count += 1;
    const double t = static_cast<double>(step_count);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (Param* p : store.all()) {
        Tensor& m = m_[p->name];
        Tensor& v = v_[p->name];
        if (m.size() != p->value.size()) m = Tensor(p->value.rows, p->value.cols);
        if (v.size() != p->value.size()) v = Tensor(p->value.rows, p->value.cols);
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad.data[i];
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p->value.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value.data[i]);
        }
    }
}

namespace {

void write_u64(std::ostream& os, uint64_t v) {
    write_u32(os, static_cast<uint32_t>(v));
    write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t read_u64(std::istream& is) {
    uint64_t lo = read_u32(is);
    uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

void write_f64(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    write_u64(os, u);
}

double read_f64(std::istream& is) {
    uint64_t u = read_u64(is);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void write_tensor64(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(t.rows));
    write_u32(os, static_cast<uint32_t>(t.cols));
    for (double x : t.data) write_f64(os, x);
}

Tensor read_tensor64(std::istream& is) {
    const int rows = static_cast<int>(read_u32(is));
    const int cols = static_cast<int>(read_u32(is));
    Tensor t(rows, cols);
    for (double& x : t.data) x = read_f64(is);
    return t;
}

}  // namespace

// Resume state keeps f64 params and moments so a resumed run replays the
// exact trajectory of an uninterrupted one.
void AdamW::save(const std::string& path, const ParamStore& store) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open for write: " + path);
    os.write("MDOS", 4);
    write_u32(os, 1);
    write_u64(os, static_cast<uint64_t>(step_count));
    auto& mut = const_cast<ParamStore&>(store);
    auto params = mut.all();
    write_u32(os, static_cast<uint32_t>(params.size()));
    for (Param* p : params) {
        write_u32(os, static_cast<uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_tensor64(os, p->value);
        auto mi = m_.find(p->name);
        auto vi = v_.find(p->name);
        write_tensor64(os, mi != m_.end() ? mi->second : Tensor(p->value.rows, p->value.cols));
        write_tensor64(os, vi != v_.end() ? vi->second : Tensor(p->value.rows, p->value.cols));
    }
}

void AdamW::load(const std::string& path, ParamStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MDOS", 4) != 0) throw CheckpointError("bad magic in " + path);
    if (read_u32(is) != 1) throw CheckpointError("bad version in " + path);
    step_count = static_cast<int64_t>(read_u64(is));
    const uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        Param& p = store.get(name);
        p.value = read_tensor64(is);
        m_[name] = read_tensor64(is);
        v_[name] = read_tensor64(is);
    }
}

}  // namespace mvreg
