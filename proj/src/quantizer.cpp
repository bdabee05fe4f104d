#include "multiquant/quantizer.hpp"

#include "multiquant/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mq {

namespace {

double round_half_away(double x) {
  // documented tie-break: halves round away from zero
  return x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

double apply_round(double x, RoundMode mode) {
  return mode == RoundMode::Nearest ? round_half_away(x) : std::floor(x);
}

}  // namespace

QuantizerParams make_quantizer(double l, double u, int bits, QuantRole role, RoundMode round_mode,
                               std::string name) {
  if (bits < 2) throw std::invalid_argument("quantizer: bit-width must be >= 2");
  QuantizerParams p;
  p.lower = scalar_tensor(l, true, name + ".l");
  p.upper = scalar_tensor(u, true, name + ".u");
  p.bits = bits;
  p.role = role;
  p.round_mode = round_mode;
  p.name = std::move(name);
  project_clip_gap(p);
  return p;
}

void project_clip_gap(QuantizerParams& p) {
  const double l = p.l(), u = p.u();
  if (u - l >= kMinClipGap) return;
  const double mid = 0.5 * (l + u);
  p.lower->v[0] = mid - 0.5 * kMinClipGap;
  p.upper->v[0] = mid + 0.5 * kMinClipGap;
  ++p.gap_warnings;
}

std::vector<double> normalize(const std::vector<double>& x, QuantizerParams& p) {
  project_clip_gap(p);
  const double l = p.l(), inv = 1.0 / (p.u() - p.l());
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = std::clamp((x[i] - l) * inv, 0.0, 1.0);
  return out;
}

std::vector<int> quantize(const std::vector<double>& xn, const QuantizerParams& p) {
  const double levels = p.levels();
  std::vector<int> q(xn.size());
  for (size_t i = 0; i < xn.size(); ++i)
    q[i] = static_cast<int>(apply_round(levels * xn[i], p.round_mode));
  return q;
}

std::vector<double> dequantize(const std::vector<int>& q, const QuantizerParams& p) {
  const double levels = p.levels();
  std::vector<double> out(q.size());
  for (size_t i = 0; i < q.size(); ++i) {
    if (q[i] < 0 || q[i] > p.levels())
      throw std::invalid_argument("dequantize: code " + std::to_string(q[i]) +
                                  " out of range for " + std::to_string(p.bits) + " bits");
    const double frac = q[i] / levels;
    out[i] = p.role == QuantRole::Weight ? 2.0 * (frac - 0.5) : frac;
  }
  return out;
}

std::vector<double> fake_quantize_values(const std::vector<double>& x, QuantizerParams& p) {
  return dequantize(quantize(normalize(x, p), p), p);
}

Tensor fake_quantize(Graph& g, const Tensor& x, QuantizerParams& p) {
  project_clip_gap(p);
  const double l = p.l(), u = p.u();
  const double span = u - l;
  const double levels = p.levels();
  const double k = p.role == QuantRole::Weight ? 2.0 : 1.0;
  const double offset = p.role == QuantRole::Weight ? -1.0 : 0.0;
  const bool surrogate = g.surrogate_rounding;
  const RoundMode mode = p.round_mode;
  const int64_t total = x->size();

  auto out = zeros(x->shape);
  // interior mask: elements inside the open clip interval in normalized space
  auto interior = std::make_shared<std::vector<uint8_t>>(x->v.size());
  std::atomic<bool> nonfinite{false};
  parallel_for(total, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const double xv = x->v[i];
      if (!std::isfinite(xv)) {
        nonfinite.store(true, std::memory_order_relaxed);
        continue;
      }
      const double raw = (xv - l) / span;
      (*interior)[i] = raw > 0.0 && raw < 1.0;
      const double xn = std::clamp(raw, 0.0, 1.0);
      const double frac = surrogate ? xn : apply_round(levels * xn, mode) / levels;
      out->v[i] = k * frac + offset;
    }
  });
  if (nonfinite.load())
    throw std::runtime_error("fake-quantize '" + p.name + "': nonfinite input");

  Tensor lower = p.lower, upper = p.upper;
  return g.emit(OpKind::FakeQuant, "fake-quantize:" + p.name, {x, lower, upper}, out,
                [x, lower, upper, out, interior, l, u, span, k, total] {
                  const bool gx = x->requires_grad || x->node >= 0;
                  if (gx) x->ensure_grad();
                  lower->ensure_grad();
                  upper->ensure_grad();
                  const double inv = k / span;
                  const double inv2 = k / (span * span);
                  // clip-bound grads via fixed chunks: reproducible for any
                  // worker count
                  std::vector<double> gl(kReduceChunks, 0.0), gu(kReduceChunks, 0.0);
                  parallel_for(kReduceChunks, [&](int64_t cb, int64_t ce) {
                    for (int64_t chunk = cb; chunk < ce; ++chunk) {
                      const int64_t s0 = total * chunk / kReduceChunks;
                      const int64_t s1 = total * (chunk + 1) / kReduceChunks;
                      for (int64_t i = s0; i < s1; ++i) {
                        if (!(*interior)[i]) continue;  // clip subgradient: zero outside (l,u)
                        const double go = out->g[i];
                        if (gx) x->g[i] += go * inv;
                        gl[chunk] += go * inv2 * (x->v[i] - u);
                        gu[chunk] += go * inv2 * (l - x->v[i]);
                      }
                    }
                  });
                  for (int chunk = 0; chunk < kReduceChunks; ++chunk) {
                    lower->g[0] += gl[chunk];
                    upper->g[0] += gu[chunk];
                  }
                });
}

namespace {

std::pair<double, double> clip_bounds_from(const std::vector<double>& x, QuantRole role) {
  if (x.empty()) throw std::invalid_argument("init_clip_params: empty tensor");
  double l, u;
  if (role == QuantRole::Weight) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    const double sigma = std::sqrt(var);
    l = -3.0 * sigma;
    u = 3.0 * sigma;
  } else {
    std::vector<double> sorted(x);
    std::sort(sorted.begin(), sorted.end());
    const size_t rank =
        std::min(sorted.size() - 1,
                 static_cast<size_t>(std::ceil(0.999 * static_cast<double>(sorted.size()))) - 1);
    l = 0.0;
    u = sorted[rank];
  }
  if (u - l < kMinClipGap) {
    l = -1.0;
    u = 1.0;
  }
  return {l, u};
}

}  // namespace

QuantizerParams init_clip_params(const std::vector<double>& x, QuantRole role, int bits,
                                 RoundMode round_mode, std::string name) {
  const auto [l, u] = clip_bounds_from(x, role);
  return make_quantizer(l, u, bits, role, round_mode, std::move(name));
}

void calibrate_from_batch(QuantizerParams& p, const std::vector<double>& batch) {
  const auto [l, u] = clip_bounds_from(batch, p.role);
  p.lower->v[0] = l;
  p.upper->v[0] = u;
  p.initialized = true;
}

double kink_distance(double x, const QuantizerParams& p) {
  const double l = p.l(), u = p.u(), span = u - l;
  double d = std::min(std::fabs(x - l), std::fabs(x - u));
  // bin edges sit halfway between codes in normalized space
  const double xn = (x - l) / span;
  if (xn > 0.0 && xn < 1.0) {
    const double scaled = xn * p.levels();
    const double edge = std::floor(scaled) + 0.5;
    d = std::min(d, std::fabs(scaled - edge) * span / p.levels());
  }
  return d;
}

size_t packed_payload_bytes(size_t count, int bits) {
  return (count * static_cast<size_t>(bits) + 7) / 8;
}

std::vector<uint8_t> pack_qcodes(const std::vector<int>& q, const QuantizerParams& p) {
  std::vector<uint8_t> bytes(kPackedHeaderBytes + packed_payload_bytes(q.size(), p.bits), 0);
  const double l = p.l(), u = p.u();
  std::memcpy(bytes.data(), &l, 8);
  std::memcpy(bytes.data() + 8, &u, 8);
  bytes[16] = static_cast<uint8_t>(p.bits);
  size_t bitpos = 0;
  for (int code : q) {
    if (code < 0 || code > p.levels())
      throw std::invalid_argument("pack_qcodes: code out of range");
    for (int b = 0; b < p.bits; ++b, ++bitpos) {
      if (code & (1 << b)) bytes[kPackedHeaderBytes + bitpos / 8] |= 1u << (bitpos % 8);
    }
  }
  return bytes;
}

PackedTensor unpack_qcodes(const std::vector<uint8_t>& bytes, size_t count) {
  if (bytes.size() < kPackedHeaderBytes)
    throw std::invalid_argument("unpack_qcodes: truncated header");
  PackedTensor t;
  std::memcpy(&t.l, bytes.data(), 8);
  std::memcpy(&t.u, bytes.data() + 8, 8);
  t.bits = bytes[16];
  if (t.bits < 2 || t.bits > 16) throw std::invalid_argument("unpack_qcodes: bad bit-width");
  if (bytes.size() < kPackedHeaderBytes + packed_payload_bytes(count, t.bits))
    throw std::invalid_argument("unpack_qcodes: truncated payload");
  t.codes.resize(count);
  size_t bitpos = 0;
  for (size_t i = 0; i < count; ++i) {
    int code = 0;
    for (int b = 0; b < t.bits; ++b, ++bitpos) {
      if (bytes[kPackedHeaderBytes + bitpos / 8] & (1u << (bitpos % 8))) code |= 1 << b;
    }
    t.codes[i] = code;
  }
  return t;
}

}  // namespace mq
