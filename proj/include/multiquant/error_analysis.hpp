#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "multiquant/tensor.hpp"

namespace mq {

enum class ClippingVariant { AsWritten, Squared };

// Denominator of the quantization-noise term: the closed form uses
// (2^b - 1)^2 bins; the approximate form replaces it with 2^(2b).
enum class BinDenominator { Exact, Approximate };

// Standard-normal weight model, symmetric clip l = -u.
struct ErrorModelConfig {
  double u = 1.0;
  int bits = 8;
  ClippingVariant clipping_variant = ClippingVariant::Squared;
  BinDenominator bin_denominator = BinDenominator::Exact;
  int64_t n_samples = 1000000;
  uint64_t seed = 1;
};

struct MSQEReport {
  int bits = 0;
  double u = 0.0;
  ClippingVariant variant = ClippingVariant::Squared;
  double clipping_noise = 0.0;
  double quantization_noise = 0.0;
  double total_analytic = 0.0;
  double total_monte_carlo = 0.0;  // NaN until an MC run fills it
  double relative_gap = 0.0;
};

// Closed-form decomposition: quantization noise u^2/(3*D) and clipping
// noise 2*int_u^inf phi(w)(w-u)^p dw evaluated with the standard-normal
// pdf/cdf (p = 1 as written, p = 2 squared).
MSQEReport msqe_analytic(const ErrorModelConfig& cfg);

// Seeded draw of n samples from N(0,1) pushed through the weight quantizer
// (nearest rounding, l = -u) and rescaled to the clip range; returns the
// mean squared error between w and the rescaled dequantized value.
double msqe_monte_carlo(const ErrorModelConfig& cfg);

// msqe_analytic with the Monte-Carlo field and relative gap filled in.
MSQEReport msqe_report(const ErrorModelConfig& cfg);

// sum of per-bit analytic totals over the candidate set
double accumulated_msqe(const std::set<int>& bits, double u,
                        ClippingVariant variant = ClippingVariant::Squared,
                        BinDenominator denom = BinDenominator::Exact);

struct TransplantResult {
  double residual = 0.0;       // |lhs - rhs| / |lhs|
  double support_fraction = 0.0;
  double max_activation_noise = 0.0;  // max |n^a| over the support
  bool conclusive = false;
};

// Quantizes the activations of one convolution at `bits_a`, then finds the
// weight perturbation w(1+n^w) whose convolution with the clean activations
// best matches w (x) a_quantized, per output channel via least squares.
// The returned residual quantifies the approximation.
// w: (F,C,KH,KW), a: (1,C,H,W).
TransplantResult noise_transplant_residual(const Tensor& w, const Tensor& a, int bits_a,
                                           uint64_t seed);

std::string msqe_csv_header();
std::string msqe_csv_row(const MSQEReport& r);

}  // namespace mq
