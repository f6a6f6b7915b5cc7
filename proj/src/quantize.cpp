#include "resq/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "resq/errors.hpp"

namespace resq {

namespace {

constexpr char kMagic[4] = {'R', 'E', 'S', 'Q'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint16_t kQuantizedFlag = 1;

void check_bits(int bits, int lo, int hi, const char* what) {
    if (bits < lo || bits > hi) {
        throw ContractError(std::string(what) + " must be in [" + std::to_string(lo) + "," +
                            std::to_string(hi) + "], got " + std::to_string(bits));
    }
}

}  // namespace

std::size_t packed_size(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint32_t>& values, int bits) {
    check_bits(bits, 1, 32, "pack_bits width");
    std::vector<std::uint8_t> bytes(packed_size(values.size(), bits), 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (bits < 32 && values[i] >= (1u << bits)) {
            throw ContractError("pack_bits value " + std::to_string(values[i]) +
                                " does not fit in " + std::to_string(bits) + " bits");
        }
        for (int t = 0; t < bits; ++t) {
            if ((values[i] >> t) & 1u) {
                const std::size_t j = i * static_cast<std::size_t>(bits) + t;
                bytes[j >> 3] |= static_cast<std::uint8_t>(1u << (j & 7));
            }
        }
    }
    return bytes;
}

std::vector<std::uint32_t> unpack_bits(const std::vector<std::uint8_t>& bytes, int bits,
                                       std::size_t count) {
    check_bits(bits, 1, 32, "unpack_bits width");
    if (bytes.size() != packed_size(count, bits)) {
        throw FormatError("packed stream holds " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(packed_size(count, bits)));
    }
    std::vector<std::uint32_t> values(count, 0);
    for (std::size_t i = 0; i < count; ++i) {
        for (int t = 0; t < bits; ++t) {
            const std::size_t j = i * static_cast<std::size_t>(bits) + t;
            if ((bytes[j >> 3] >> (j & 7)) & 1u) values[i] |= 1u << t;
        }
    }
    return values;
}

std::size_t QuantizedLayer::count() const {
    if (shape.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

QuantizedLayer quantize_layer(const Tensor& weights, int b) {
    check_bits(b, 2, 16, "quantization bit width");
    if (weights.size() == 0) throw ContractError("quantize_layer on an empty tensor");
    const auto [lo, hi] = std::minmax_element(weights.vec().begin(), weights.vec().end());
    if (!(*hi > *lo)) {
        throw ContractError("constant tensor has no quantization scale");
    }
    const double levels = static_cast<double>((1u << b) - 1);
    QuantizedLayer ql;
    ql.shape = weights.shape();
    ql.b = b;
    ql.x_min = *lo;
    ql.s = (*hi - *lo) / levels;
    // the stored top of range is what the top code decodes to, so a file
    // round-trip regenerates the exact same field
    ql.x_max = ql.x_min + ql.s * levels;
    std::vector<std::uint32_t> codes(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double q = std::floor((weights[i] - ql.x_min) / ql.s + 0.5);
        codes[i] = static_cast<std::uint32_t>(std::clamp(q, 0.0, levels));
    }
    ql.codes = pack_bits(codes, b);
    return ql;
}

int tmr_vote(int b1, int b2, int b3) {
    for (int v : {b1, b2, b3}) {
        if (v != 0 && v != 1) throw ContractError("tmr_vote inputs must be bits");
    }
    return b1 + b2 + b3 >= 2 ? 1 : 0;
}

QuantizedLayer protect_msbs(const QuantizedLayer& ql, int n_msb) {
    if (n_msb < 0 || n_msb > ql.b) {
        throw ContractError("n_msb " + std::to_string(n_msb) + " exceeds code width " +
                            std::to_string(ql.b));
    }
    QuantizedLayer out = ql;
    out.n_msb = n_msb;
    if (n_msb == 0) {
        out.tmr = {};
        return out;
    }
    const auto codes = unpack_bits(ql.codes, ql.b, ql.count());
    std::vector<std::uint32_t> top(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) top[i] = codes[i] >> (ql.b - n_msb);
    out.tmr[0] = pack_bits(top, n_msb);
    out.tmr[1] = out.tmr[0];
    return out;
}

Tensor dequantize_layer(const QuantizedLayer& ql) {
    if (ql.is_marker()) throw ContractError("dequantize_layer on a marker entry");
    check_bits(ql.b, 2, 16, "quantization bit width");
    const std::size_t n = ql.count();
    auto codes = unpack_bits(ql.codes, ql.b, n);
    if (ql.n_msb > 0) {
        const auto t1 = unpack_bits(ql.tmr[0], ql.n_msb, n);
        const auto t2 = unpack_bits(ql.tmr[1], ql.n_msb, n);
        const int shift = ql.b - ql.n_msb;
        const std::uint32_t low_mask = shift == 0 ? 0u : (1u << shift) - 1u;
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t t0 = codes[i] >> shift;
            std::uint32_t voted = 0;
            for (int t = 0; t < ql.n_msb; ++t) {
                voted |= static_cast<std::uint32_t>(
                             tmr_vote((t0 >> t) & 1, (t1[i] >> t) & 1, (t2[i] >> t) & 1))
                         << t;
            }
            codes[i] = (voted << shift) | (codes[i] & low_mask);
        }
    }
    Tensor out(ql.shape);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = ql.s == 0.0 ? ql.x_min : static_cast<double>(codes[i]) * ql.s + ql.x_min;
    }
    return out;
}

namespace {

QuantizedLayer quantize_tensor_entry(const std::string& name, LayerKind kind, const Tensor& t,
                                     int b, int n_msb) {
    QuantizedLayer ql;
    const auto [lo, hi] = std::minmax_element(t.vec().begin(), t.vec().end());
    if (*hi > *lo) {
        ql = quantize_layer(t, b);
    } else {
        // constant tensor: decodes to x_min regardless of codes, so faults
        // landing here are inert by construction
        ql.shape = t.shape();
        ql.b = b;
        ql.s = 0.0;
        ql.x_min = *lo;
        ql.x_max = *lo;
        ql.codes.assign(packed_size(t.size(), b), 0);
    }
    ql.name = name;
    ql.kind = kind;
    return protect_msbs(ql, n_msb);
}

}  // namespace

QuantizedModel quantize_model(const Model& m, int b, int n_msb) {
    check_bits(b, 2, 16, "quantization bit width");
    QuantizedModel qm;
    qm.num_classes = m.num_classes;
    qm.input_shape = m.input_shape;
    for (const auto& l : m.layers) {
        if (!l.has_params()) {
            QuantizedLayer marker;
            marker.name = l.name;
            marker.kind = l.kind;
            qm.layers.push_back(std::move(marker));
            continue;
        }
        qm.layers.push_back(
            quantize_tensor_entry(l.name + ".weight", l.kind, l.weight.value, b, n_msb));
        qm.layers.push_back(quantize_tensor_entry(l.name + ".bias", l.kind, l.bias.value, b, n_msb));
    }
    return qm;
}

namespace {

// pairs a ".weight" entry with its ".bias" successor
bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Model dequantize_model(const QuantizedModel& qm) {
    Model m;
    m.num_classes = qm.num_classes;
    m.input_shape = qm.input_shape;
    for (std::size_t i = 0; i < qm.layers.size(); ++i) {
        const auto& e = qm.layers[i];
        if (e.is_marker()) {
            Layer l;
            l.name = e.name;
            l.kind = e.kind;
            m.layers.push_back(std::move(l));
            continue;
        }
        if (!has_suffix(e.name, ".weight") || i + 1 >= qm.layers.size()) {
            throw FormatError("parametric entry " + e.name + " is missing its bias partner");
        }
        const auto& be = qm.layers[i + 1];
        const std::string stem = e.name.substr(0, e.name.size() - 7);
        if (be.name != stem + ".bias" || be.kind != e.kind) {
            throw FormatError("entry " + be.name + " does not complete layer " + stem);
        }
        Layer l;
        l.name = stem;
        l.kind = e.kind;
        l.weight = {e.name, dequantize_layer(e), true};
        l.bias = {be.name, dequantize_layer(be), true};
        m.layers.push_back(std::move(l));
        ++i;
    }
    return m;
}

// ---------------------------------------------------------------------------
// container format

namespace {

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

void put_entry_header(std::string& out, const std::string& name, LayerKind kind,
                      const std::vector<std::size_t>& shape) {
    if (name.size() > 0xffff) throw ContractError("layer name too long for container");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(kind));
    if (shape.size() > 0xff) throw ContractError("tensor rank too large for container");
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
}

void put_stream(std::string& out, const std::vector<std::uint8_t>& bytes) {
    put_u64(out, bytes.size());
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

void write_file(const std::string& path, const std::string& payload) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("short write to " + path);
}

struct Reader {
    std::string bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (bytes.size() - pos < n) throw FormatError("truncated container");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes[pos++]);
    }
    std::uint16_t u16() {
        std::uint16_t v = u8();
        return static_cast<std::uint16_t>(v | (static_cast<std::uint16_t>(u8()) << 8));
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    std::vector<std::uint8_t> stream() {
        const std::uint64_t n = u64();
        need(n);
        std::vector<std::uint8_t> out(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return out;
    }
};

Reader open_container(const std::string& path, bool expect_quantized) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    Reader r;
    r.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (r.str(4) != std::string(kMagic, 4)) throw FormatError("bad container magic in " + path);
    const std::uint16_t version = r.u16();
    if (version != kVersion) {
        throw FormatError("unsupported container version " + std::to_string(version));
    }
    const std::uint16_t flags = r.u16();
    const bool quantized = (flags & kQuantizedFlag) != 0;
    if (quantized != expect_quantized) {
        throw FormatError(path + (quantized ? " holds a quantized payload" : " holds a float payload"));
    }
    return r;
}

LayerKind read_kind(Reader& r) {
    const std::uint8_t k = r.u8();
    if (k > static_cast<std::uint8_t>(LayerKind::flatten)) {
        throw FormatError("unknown layer kind tag " + std::to_string(k));
    }
    return static_cast<LayerKind>(k);
}

std::vector<std::size_t> read_shape(Reader& r, LayerKind kind) {
    const int rank = r.u8();
    std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) {
        d = r.u32();
        if (d == 0) throw FormatError("zero dimension in container shape");
    }
    const bool parametric = kind == LayerKind::dense || kind == LayerKind::conv;
    if (parametric == shape.empty()) {
        throw FormatError("entry rank does not match its layer kind");
    }
    return shape;
}

// The file stores tensors only, so the surrounding model facts are read off
// the architecture: class count from the last bias, input shape from the
// first parametric layer. A convolutional front end fixes the channel count
// but not the spatial size; those dims are stored as 0 and act as wildcards.
void infer_model_facts(Model& m) {
    const Layer* first = nullptr;
    const Layer* last = nullptr;
    for (const auto& l : m.layers) {
        if (!l.has_params()) continue;
        if (!first) first = &l;
        last = &l;
    }
    if (!first) throw FormatError("container holds no parametric layers");
    m.num_classes = static_cast<int>(last->bias.value.size());
    if (first->kind == LayerKind::dense) {
        m.input_shape = {first->weight.value.shape()[0]};
    } else {
        m.input_shape = {first->weight.value.shape()[1], 0, 0};
    }
}

}  // namespace

void save_container(const Model& m, const std::string& path) {
    std::string out(kMagic, 4);
    put_u16(out, kVersion);
    put_u16(out, 0);
    std::uint32_t entries = 0;
    for (const auto& l : m.layers) entries += l.has_params() ? 2 : 1;
    put_u32(out, entries);
    for (const auto& l : m.layers) {
        if (!l.has_params()) {
            put_entry_header(out, l.name, l.kind, {});
            continue;
        }
        for (const auto* p : {&l.weight, &l.bias}) {
            put_entry_header(out, p->name, l.kind, p->value.shape());
            for (double v : p->value.vec()) put_f64(out, v);
        }
    }
    write_file(path, out);
}

void save_container(const QuantizedModel& qm, const std::string& path) {
    std::string out(kMagic, 4);
    put_u16(out, kVersion);
    put_u16(out, kQuantizedFlag);
    put_u32(out, static_cast<std::uint32_t>(qm.layers.size()));
    for (const auto& e : qm.layers) {
        put_entry_header(out, e.name, e.kind, e.shape);
        if (e.is_marker()) continue;
        out.push_back(static_cast<char>(e.b));
        out.push_back(static_cast<char>(e.n_msb));
        put_f64(out, e.s);
        put_f64(out, e.x_min);
        put_stream(out, e.codes);
        put_stream(out, e.tmr[0]);
        put_stream(out, e.tmr[1]);
    }
    write_file(path, out);
}

bool container_is_quantized(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char head[8];
    if (!f.read(head, sizeof head)) throw FormatError("truncated container");
    if (std::memcmp(head, kMagic, 4) != 0) throw FormatError("bad container magic in " + path);
    return (static_cast<unsigned char>(head[6]) & kQuantizedFlag) != 0;
}

Model load_model(const std::string& path) {
    Reader r = open_container(path, false);
    const std::uint32_t entries = r.u32();
    Model m;
    for (std::uint32_t i = 0; i < entries; ++i) {
        const std::string name = r.str(r.u16());
        const LayerKind kind = read_kind(r);
        const auto shape = read_shape(r, kind);
        if (shape.empty()) {
            Layer l;
            l.name = name;
            l.kind = kind;
            m.layers.push_back(std::move(l));
            continue;
        }
        Tensor t(shape);
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = r.f64();
        if (has_suffix(name, ".weight")) {
            Layer l;
            l.name = name.substr(0, name.size() - 7);
            l.kind = kind;
            l.weight = {name, std::move(t), true};
            m.layers.push_back(std::move(l));
        } else if (has_suffix(name, ".bias")) {
            if (m.layers.empty() || m.layers.back().name != name.substr(0, name.size() - 5) ||
                !m.layers.back().weight.value.size()) {
                throw FormatError("bias entry " + name + " has no matching weight entry");
            }
            m.layers.back().bias = {name, std::move(t), true};
        } else {
            throw FormatError("parametric entry " + name + " lacks a .weight/.bias suffix");
        }
    }
    for (const auto& l : m.layers) {
        if (l.has_params() && l.bias.value.size() == 0) {
            throw FormatError("layer " + l.name + " is missing its bias entry");
        }
    }
    if (r.pos != r.bytes.size()) throw FormatError("trailing bytes in container");
    infer_model_facts(m);
    return m;
}

QuantizedModel load_quantized(const std::string& path) {
    Reader r = open_container(path, true);
    const std::uint32_t entries = r.u32();
    QuantizedModel qm;
    for (std::uint32_t i = 0; i < entries; ++i) {
        QuantizedLayer e;
        e.name = r.str(r.u16());
        e.kind = read_kind(r);
        e.shape = read_shape(r, e.kind);
        if (!e.is_marker()) {
            e.b = r.u8();
            e.n_msb = r.u8();
            if (e.b < 2 || e.b > 16 || e.n_msb > e.b) {
                throw FormatError("implausible widths in entry " + e.name);
            }
            e.s = r.f64();
            e.x_min = r.f64();
            e.x_max = e.x_min + e.s * static_cast<double>((1u << e.b) - 1);
            e.codes = r.stream();
            e.tmr[0] = r.stream();
            e.tmr[1] = r.stream();
            if (e.codes.size() != packed_size(e.count(), e.b)) {
                throw FormatError("code stream length mismatch in entry " + e.name);
            }
            const std::size_t want = e.n_msb == 0 ? 0 : packed_size(e.count(), e.n_msb);
            if (e.tmr[0].size() != want || e.tmr[1].size() != want) {
                throw FormatError("mirror stream length mismatch in entry " + e.name);
            }
        }
        qm.layers.push_back(std::move(e));
    }
    if (r.pos != r.bytes.size()) throw FormatError("trailing bytes in container");
    Model skeleton = dequantize_model(qm);
    infer_model_facts(skeleton);
    qm.num_classes = skeleton.num_classes;
    qm.input_shape = skeleton.input_shape;
    return qm;
}

std::string search_log_csv(const std::vector<SearchLogRow>& log) {
    std::string out = "b,n_msb,accuracy,reliability,decision\n";
    char buf[128];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.17g,", row.b, row.n_msb, row.accuracy);
        out += buf;
        if (row.has_reliability) {
            std::snprintf(buf, sizeof buf, "%.17g", row.reliability);
            out += buf;
        }
        out += "," + row.decision + "\n";
    }
    return out;
}

}  // namespace resq
