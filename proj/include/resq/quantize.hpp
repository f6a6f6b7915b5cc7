#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/model.hpp"

namespace resq {

// Little-endian bit packing: value i occupies stream bits [i*bits, (i+1)*bits),
// least significant bit first, and stream bit j lives in byte j/8 at position
// j%8. Any pad bits in the final byte are written as zero and ignored on read.
std::vector<std::uint8_t> pack_bits(const std::vector<std::uint32_t>& values, int bits);
std::vector<std::uint32_t> unpack_bits(const std::vector<std::uint8_t>& bytes, int bits,
                                       std::size_t count);
// bytes needed to hold `count` values of `bits` bits each
std::size_t packed_size(std::size_t count, int bits);

// One tensor under affine quantization: x ~ q*s + x_min with q an unsigned
// b-bit code, so no stored value carries a sign bit. A constant tensor cannot
// define a scale; it is kept with s == 0 and every value decodes to x_min.
// For protected layers the top n_msb bits of every code are mirrored into two
// extra streams; the primary stream is the third replica.
struct QuantizedLayer {
    std::string name;
    LayerKind kind = LayerKind::dense;
    std::vector<std::size_t> shape;  // empty for relu/pool/flatten markers
    int b = 0;
    int n_msb = 0;
    double s = 0.0;
    double x_min = 0.0;
    double x_max = 0.0;
    std::vector<std::uint8_t> codes;
    std::array<std::vector<std::uint8_t>, 2> tmr;

    bool is_marker() const { return shape.empty(); }
    std::size_t count() const;
};

struct QuantizedModel {
    std::vector<QuantizedLayer> layers;  // tensor entries and markers, model order
    int num_classes = 0;
    std::vector<std::size_t> input_shape;
};

// q = round-half-up((x - x_min)/s) with s = (x_max - x_min)/(2^b - 1).
// The stored x_max is recomputed as x_min + s*(2^b - 1) so that decoding the
// top code reproduces it exactly, which keeps a save/load cycle bit-stable.
// A constant tensor has no scale and is rejected; quantize_model turns those
// into s == 0 sentinel layers instead.
QuantizedLayer quantize_layer(const Tensor& weights, int b);

// x_hat = q*s + x_min. When n_msb > 0 the top bits of each code are first
// reconstructed by per-bit majority vote across the three replicas.
Tensor dequantize_layer(const QuantizedLayer& ql);

// majority of three bits
int tmr_vote(int b1, int b2, int b3);

// Fills the two mirror streams with the top n_msb bits of every code.
// n_msb == 0 clears the mirrors and leaves the layer otherwise untouched.
QuantizedLayer protect_msbs(const QuantizedLayer& ql, int n_msb);

// Quantizes every weight and bias tensor to b bits and protects the top
// n_msb bits. Marker layers pass through; constant tensors become sentinels.
QuantizedModel quantize_model(const Model& m, int b, int n_msb = 0);

// Decodes every entry back to floats, voting where mirrors are present.
Model dequantize_model(const QuantizedModel& qm);

// Container file format, little-endian throughout:
//   magic "RESQ", version u16, flags u16 (bit0: quantized payload), count u32,
//   then per entry: name len u16 + bytes, kind u8, rank u8, dims u32 each,
//   followed by a float64 payload (float container, parametric entries only)
//   or by b u8, n_msb u8, s f64, x_min f64 and three length-prefixed (u64)
//   bitstreams: codes, mirror 1, mirror 2 (quantized container).
void save_container(const Model& m, const std::string& path);
void save_container(const QuantizedModel& qm, const std::string& path);
bool container_is_quantized(const std::string& path);
Model load_model(const std::string& path);
QuantizedModel load_quantized(const std::string& path);

// Bit-width search over [min_bits, max_bits] with an accuracy gate and a
// reliability gate, per the staged policy described at search_bit_width.
struct QuantSearchConfig {
    int min_bits = 2;
    int max_bits = 12;
    double accuracy_threshold = 0.0;
    double reliability_threshold = 0.0;
    double eval_ber = 1e-3;  // BER at which the reliability gate is measured
    int trials = 10;         // fault draws per reliability measurement
    int n_msb = 2;           // initial protection width
    int n_msb_max = 8;       // escalation cap (clamped to the selected b)
};

struct SearchLogRow {
    int b = 0;
    int n_msb = 0;
    double accuracy = 0.0;
    double reliability = 0.0;
    bool has_reliability = false;  // accuracy probes leave the field blank
    std::string decision;
};

struct QuantSearchResult {
    QuantizedModel model;
    int bits = 0;
    int n_msb = 0;
    double accuracy = 0.0;     // fault-free accuracy at the selected width
    double reliability = 0.0;  // mean accuracy at eval_ber with final n_msb
    std::vector<SearchLogRow> log;
};

// Probes b = (lo+hi)/2 and accepts the first width whose fault-free
// quantized accuracy meets the threshold; a miss discards the lower half
// (accuracy only improves with more bits). The accepted width is then
// protected with cfg.n_msb and its reliability measured at eval_ber; while
// it falls short, n_msb is raised one step at a time up to n_msb_max.
// Exhausting either ladder raises SearchError carrying the best candidate.
QuantSearchResult search_bit_width(const Model& m, const Dataset& ds,
                                   const QuantSearchConfig& cfg, std::uint64_t seed);

// "b,n_msb,accuracy,reliability,decision" rows; blank reliability on
// accuracy-phase probes
std::string search_log_csv(const std::vector<SearchLogRow>& log);

}  // namespace resq
