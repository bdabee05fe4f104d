#include "multiquant/error_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "multiquant/graph.hpp"
#include "multiquant/nn_ops.hpp"
#include "multiquant/quantizer.hpp"
#include "multiquant/rng.hpp"

namespace mq {

namespace {

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
double normal_sf(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

void validate(const ErrorModelConfig& cfg) {
  if (cfg.u <= 0.0) throw std::invalid_argument("error model: u must be positive");
  if (cfg.bits < 2) throw std::invalid_argument("error model: bits must be >= 2");
  if (cfg.n_samples < 10000)
    throw std::invalid_argument("error model: n_samples must be >= 1e4");
}

// symmetric positive-definite solve via Cholesky, in place
std::vector<double> spd_solve(std::vector<double> a, std::vector<double> b, int n) {
  for (int j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (d <= 0.0) throw std::runtime_error("least squares: singular normal equations");
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
  }
  for (int i = 0; i < n; ++i) {  // L y = b
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {  // L^T x = y
    double s = b[i];
    for (int k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return b;
}

}  // namespace

MSQEReport msqe_analytic(const ErrorModelConfig& cfg) {
  validate(cfg);
  const double u = cfg.u;
  MSQEReport r;
  r.bits = cfg.bits;
  r.u = u;
  r.variant = cfg.clipping_variant;
  const double denom = cfg.bin_denominator == BinDenominator::Exact
                           ? std::pow(static_cast<double>((1 << cfg.bits) - 1), 2.0)
                           : std::pow(2.0, 2.0 * cfg.bits);
  r.quantization_noise = u * u / (3.0 * denom);
  r.clipping_noise = cfg.clipping_variant == ClippingVariant::AsWritten
                         ? 2.0 * (normal_pdf(u) - u * normal_sf(u))
                         : 2.0 * ((1.0 + u * u) * normal_sf(u) - u * normal_pdf(u));
  r.total_analytic = r.clipping_noise + r.quantization_noise;
  r.total_monte_carlo = std::nan("");
  r.relative_gap = std::nan("");
  return r;
}

double msqe_monte_carlo(const ErrorModelConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  auto p = make_quantizer(-cfg.u, cfg.u, cfg.bits, QuantRole::Weight, RoundMode::Nearest, "msqe");
  const double levels = p.levels();
  const double inv_span = 1.0 / (2.0 * cfg.u);
  double acc = 0.0;
  for (int64_t i = 0; i < cfg.n_samples; ++i) {
    const double w = rng.normal();
    const double xn = std::clamp((w + cfg.u) * inv_span, 0.0, 1.0);
    const double q = std::floor(levels * xn + 0.5);
    // rescale the [-1,1] dequantized value back to the clip range
    const double wbar = cfg.u * 2.0 * (q / levels - 0.5);
    acc += (w - wbar) * (w - wbar);
  }
  return acc / static_cast<double>(cfg.n_samples);
}

MSQEReport msqe_report(const ErrorModelConfig& cfg) {
  auto r = msqe_analytic(cfg);
  r.total_monte_carlo = msqe_monte_carlo(cfg);
  r.relative_gap = std::fabs(r.total_analytic - r.total_monte_carlo) / r.total_monte_carlo;
  return r;
}

double accumulated_msqe(const std::set<int>& bits, double u, ClippingVariant variant,
                        BinDenominator denom) {
  if (bits.empty()) throw std::invalid_argument("accumulated_msqe: empty bit set");
  double total = 0.0;
  for (int b : bits) {
    ErrorModelConfig cfg;
    cfg.u = u;
    cfg.bits = b;
    cfg.clipping_variant = variant;
    cfg.bin_denominator = denom;
    total += msqe_analytic(cfg).total_analytic;
  }
  return total;
}

TransplantResult noise_transplant_residual(const Tensor& w, const Tensor& a, int bits_a,
                                           uint64_t seed) {
  if (w->shape.size() != 4 || a->shape.size() != 4 || a->shape[0] != 1 ||
      a->shape[1] != w->shape[1])
    throw std::invalid_argument("noise_transplant_residual: need w (F,C,KH,KW), a (1,C,H,W)");

  constexpr double kSupportEps = 1e-6;
  TransplantResult res;
  int64_t on_support = 0;
  for (double v : a->v) on_support += std::fabs(v) >= kSupportEps;
  res.support_fraction = static_cast<double>(on_support) / static_cast<double>(a->size());
  if (res.support_fraction < 0.5) {
    res.conclusive = false;  // degenerate support
    return res;
  }

  auto p = init_clip_params(a->v, QuantRole::Activation, bits_a, RoundMode::Nearest, "transplant");
  (void)seed;  // the quantizer chain is deterministic; seed kept for interface stability
  auto abar_vals = fake_quantize_values(a->v, p);
  // Eq. 3 maps activations into [0,1]; rescale so abar approximates a
  for (auto& v : abar_vals) v = p.l() + (p.u() - p.l()) * v;
  auto abar = tensor(a->shape, abar_vals);

  for (size_t i = 0; i < a->v.size(); ++i) {
    if (std::fabs(a->v[i]) >= kSupportEps) {
      const double na = abar->v[i] / a->v[i] - 1.0;
      res.max_activation_noise = std::max(res.max_activation_noise, std::fabs(na));
    }
  }

  // lhs = w (x) abar
  Graph g;
  auto lhs = conv2d(g, abar, w, nullptr, 1, 0);

  // im2col system over the clean activations: rows are output positions,
  // columns the C*KH*KW taps. Solve min |A m_f - y_f| per output channel.
  const int c = a->shape[1], h = a->shape[2], iw = a->shape[3];
  const int f = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  const int oh = h - kh + 1, ow = iw - kw + 1;
  const int cols = c * kh * kw;
  const int rows = oh * ow;
  if (rows < cols)
    throw std::invalid_argument("noise_transplant_residual: underdetermined system");

  std::vector<double> amat(static_cast<int64_t>(rows) * cols);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double* row = amat.data() + static_cast<int64_t>(oy * ow + ox) * cols;
      int idx = 0;
      for (int ic = 0; ic < c; ++ic)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            row[idx++] = a->v[(static_cast<int64_t>(ic) * h + oy + ky) * iw + ox + kx];
    }

  // normal equations A^T A, shared across output channels
  std::vector<double> ata(static_cast<int64_t>(cols) * cols, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double* row = amat.data() + static_cast<int64_t>(r) * cols;
    for (int i = 0; i < cols; ++i)
      for (int j = 0; j <= i; ++j) ata[i * cols + j] += row[i] * row[j];
  }
  for (int i = 0; i < cols; ++i)
    for (int j = i + 1; j < cols; ++j) ata[i * cols + j] = ata[j * cols + i];
  // mild ridge keeps the Cholesky stable on nearly-collinear patches
  double trace = 0.0;
  for (int i = 0; i < cols; ++i) trace += ata[i * cols + i];
  const double ridge = 1e-12 * trace / cols;
  for (int i = 0; i < cols; ++i) ata[i * cols + i] += ridge;

  double num = 0.0, den = 0.0;
  for (int of = 0; of < f; ++of) {
    std::vector<double> aty(cols, 0.0);
    const double* y = lhs->v.data() + static_cast<int64_t>(of) * rows;
    for (int r = 0; r < rows; ++r) {
      const double* row = amat.data() + static_cast<int64_t>(r) * cols;
      for (int i = 0; i < cols; ++i) aty[i] += row[i] * y[r];
    }
    auto m = spd_solve(ata, aty, cols);
    for (int r = 0; r < rows; ++r) {
      const double* row = amat.data() + static_cast<int64_t>(r) * cols;
      double rhs = 0.0;
      for (int i = 0; i < cols; ++i) rhs += row[i] * m[i];
      num += (y[r] - rhs) * (y[r] - rhs);
      den += y[r] * y[r];
    }
  }
  res.residual = den > 0.0 ? std::sqrt(num / den) : 0.0;
  res.conclusive = true;
  return res;
}

std::string msqe_csv_header() { return "b,u,variant,clip,quant,analytic_total,mc_total,rel_gap"; }

std::string msqe_csv_row(const MSQEReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << r.bits << ',' << r.u << ','
     << (r.variant == ClippingVariant::AsWritten ? "as-written" : "squared") << ','
     << r.clipping_noise << ',' << r.quantization_noise << ',' << r.total_analytic << ','
     << r.total_monte_carlo << ',' << r.relative_gap;
  return os.str();
}

}  // namespace mq
