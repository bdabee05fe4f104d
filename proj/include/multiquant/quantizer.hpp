#pragma once

#include <cstdint>
#include <vector>

#include "multiquant/graph.hpp"
#include "multiquant/tensor.hpp"

namespace mq {

enum class QuantRole { Weight, Activation };
enum class RoundMode { Nearest, Floor };

// Clipping interval narrower than this gets projected open around its
// midpoint before use.
inline constexpr double kMinClipGap = 1e-4;

// Trainable clipping bounds plus the fixed quantization attributes of one
// layer-wise quantizer. lower/upper are scalar tensors so the optimizer can
// drive them; everything else is immutable after construction.
struct QuantizerParams {
  Tensor lower;  // l
  Tensor upper;  // u
  int bits = 2;
  QuantRole role = QuantRole::Weight;
  RoundMode round_mode = RoundMode::Nearest;
  std::string name;
  // activations calibrate from the first observed batch
  bool initialized = true;
  int64_t gap_warnings = 0;

  int levels() const { return (1 << bits) - 1; }  // 2^b - 1
  double l() const { return lower->v[0]; }
  double u() const { return upper->v[0]; }
};

QuantizerParams make_quantizer(double l, double u, int bits, QuantRole role,
                               RoundMode round_mode = RoundMode::Nearest, std::string name = "");

// Enforces u - l >= kMinClipGap by projecting both bounds symmetrically
// around the midpoint; bumps the warning counter when it fires.
void project_clip_gap(QuantizerParams& p);

// x_n = clip((x - l)/(u - l), 0, 1)
std::vector<double> normalize(const std::vector<double>& x, QuantizerParams& p);

// q = round((2^b-1) * x_n) (nearest, half away from zero) or floor(...)
std::vector<int> quantize(const std::vector<double>& xn, const QuantizerParams& p);

// weights: 2*(q/(2^b-1) - 0.5) in [-1,1]; activations: q/(2^b-1) in [0,1]
std::vector<double> dequantize(const std::vector<int>& q, const QuantizerParams& p);

// full chain on plain values
std::vector<double> fake_quantize_values(const std::vector<double>& x, QuantizerParams& p);

// Graph node. Forward runs the exact chain; backward treats rounding as
// identity (STE) while the clip and affine maps differentiate exactly, so
// d/dx, d/dl, d/du equal the derivatives of the rounding-free surrogate.
// Clipped elements contribute zero to all three.
Tensor fake_quantize(Graph& g, const Tensor& x, QuantizerParams& p);

// weights: symmetric +-3 sigma; activations: [0, 99.9th percentile].
// Degenerate spread falls back to (-1, 1).
QuantizerParams init_clip_params(const std::vector<double>& x, QuantRole role, int bits,
                                 RoundMode round_mode = RoundMode::Nearest, std::string name = "");

// Rewrites the bounds of an existing quantizer in place (the tensors keep
// their identity so optimizer state stays attached) using the same rules as
// init_clip_params, and marks it initialized.
void calibrate_from_batch(QuantizerParams& p, const std::vector<double>& batch);

// Distance from x to the nearest clip kink or rounding-bin edge, for
// finite-difference skip rules.
double kink_distance(double x, const QuantizerParams& p);

// --- q-code serialization -------------------------------------------------
// Little-endian bitstream, b bits per value LSB-first in row-major order,
// preceded by l and u as 64-bit floats and b as one byte.

size_t packed_payload_bytes(size_t count, int bits);
inline constexpr size_t kPackedHeaderBytes = 17;

std::vector<uint8_t> pack_qcodes(const std::vector<int>& q, const QuantizerParams& p);

struct PackedTensor {
  double l = 0.0, u = 0.0;
  int bits = 0;
  std::vector<int> codes;
};
PackedTensor unpack_qcodes(const std::vector<uint8_t>& bytes, size_t count);

}  // namespace mq
