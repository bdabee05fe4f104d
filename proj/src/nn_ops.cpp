#include "multiquant/nn_ops.hpp"

#include <cmath>
#include <stdexcept>

#include "multiquant/blas.hpp"
#include "multiquant/parallel.hpp"

namespace mq {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

bool wants_grad(const Tensor& t) { return t->requires_grad || t->node >= 0; }

// patch matrix of one sample: rows are output positions, cols the C*KH*KW taps
void im2col_sample(const double* img, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int oh, int ow, double* cols) {
  const int row_len = c * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* row = cols + static_cast<int64_t>(oy * ow + ox) * row_len;
      int idx = 0;
      for (int ic = 0; ic < c; ++ic) {
        const double* plane = img + static_cast<int64_t>(ic) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pad;
            row[idx++] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_sample_add(const double* cols, int c, int h, int w, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* img) {
  const int row_len = c * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* row = cols + static_cast<int64_t>(oy * ow + ox) * row_len;
      int idx = 0;
      for (int ic = 0; ic < c; ++ic) {
        double* plane = img + static_cast<int64_t>(ic) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[iy * w + ix] += row[idx];
            ++idx;
          }
        }
      }
    }
  }
}

// fixed chunking of the batch for reproducible gradient reductions
int64_t chunk_begin(int64_t n, int chunk) { return n * chunk / kReduceChunks; }

}  // namespace

Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x->shape.size() == 2 || x->shape.size() == 1,
        "linear: input must be (N,F) or (F), got " + shape_str(x->shape));
  const bool batched = x->shape.size() == 2;
  const int n = batched ? x->shape[0] : 1;
  const int f = batched ? x->shape[1] : x->shape[0];
  check(w->shape.size() == 2 && w->shape[1] == f,
        "linear: weight " + shape_str(w->shape) + " incompatible with input " +
            shape_str(x->shape));
  const int o = w->shape[0];
  if (b) check(b->size() == o, "linear: bias size mismatch");

  auto out = zeros(batched ? Shape{n, o} : Shape{o});
  gemm(false, true, n, o, f, 1.0, x->v.data(), f, w->v.data(), f, 0.0, out->v.data(), o);
  if (b) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) out->v[i * o + j] += b->v[j];
  }

  return g.emit(OpKind::Linear, "linear",
                b ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w}, out,
                [x, w, b, out, n, o, f] {
                  if (wants_grad(x)) {
                    x->ensure_grad();
                    gemm(false, false, n, f, o, 1.0, out->g.data(), o, w->v.data(), f, 1.0,
                         x->g.data(), f);
                  }
                  if (wants_grad(w)) {
                    w->ensure_grad();
                    gemm(true, false, o, f, n, 1.0, out->g.data(), o, x->v.data(), f, 1.0,
                         w->g.data(), f);
                  }
                  if (b && wants_grad(b)) {
                    b->ensure_grad();
                    for (int i = 0; i < n; ++i)
                      for (int j = 0; j < o; ++j) b->g[j] += out->g[i * o + j];
                  }
                });
}

Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
              const std::string& label) {
  check(x->shape.size() == 4, "conv2d" + (label.empty() ? "" : " " + label) +
                                  ": input must be (N,C,H,W), got " + shape_str(x->shape));
  check(w->shape.size() == 4, "conv2d: kernel must be (F,C,KH,KW)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], iw = x->shape[3];
  const int f = w->shape[0], kc = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  check(kc == c, "conv2d" + (label.empty() ? "" : " " + label) + ": input channels " +
                     std::to_string(c) + " != kernel channels " + std::to_string(kc));
  check(stride >= 1, "conv2d: stride must be >= 1");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (iw + 2 * pad - kw) / stride + 1;
  check(oh > 0 && ow > 0, "conv2d: kernel larger than padded input");
  if (b) check(b->size() == f, "conv2d: bias size mismatch");

  const int row_len = c * kh * kw;        // K
  const int plane = oh * ow;              // P
  const int64_t in_plane = static_cast<int64_t>(c) * h * iw;

  auto out = zeros({n, f, oh, ow});
  // per-sample patch matrices stay cache resident; out_n(F,P) = W(F,K) x cols_n^T
  parallel_for(n, [&](int64_t begin, int64_t end) {
    std::vector<double> cols(static_cast<int64_t>(plane) * row_len);
    for (int64_t in = begin; in < end; ++in) {
      im2col_sample(x->v.data() + in * in_plane, c, h, iw, kh, kw, stride, pad, oh, ow,
                    cols.data());
      double* dst = out->v.data() + in * f * plane;
      gemm(false, true, f, plane, row_len, 1.0, w->v.data(), row_len, cols.data(), row_len, 0.0,
           dst, plane);
      if (b) {
        for (int of = 0; of < f; ++of)
          for (int p = 0; p < plane; ++p) dst[of * plane + p] += b->v[of];
      }
    }
  });

  return g.emit(
      OpKind::Conv2d, label.empty() ? "conv2d" : label,
      b ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w}, out,
      [x, w, b, out, n, c, h, iw, f, kh, kw, stride, pad, oh, ow, row_len, plane, in_plane] {
        const bool gw = wants_grad(w);
        const bool gx = wants_grad(x);
        if (gw) w->ensure_grad();
        if (gx) x->ensure_grad();
        if (b && wants_grad(b)) b->ensure_grad();
        const bool gb = b && !b->g.empty();

        // One pass over the batch in fixed chunks: per-sample im2col feeds
        // the weight-grad GEMM, the data-grad GEMM scatters back through
        // col2im. Weight/bias partials combine in chunk order, so the
        // reduction is bitwise stable for any worker count.
        std::vector<std::vector<double>> wg_chunks, bg_chunks;
        if (gw) wg_chunks.assign(kReduceChunks, std::vector<double>(w->v.size(), 0.0));
        if (gb) bg_chunks.assign(kReduceChunks, std::vector<double>(f, 0.0));

        parallel_for(kReduceChunks, [&](int64_t cb, int64_t ce) {
          std::vector<double> cols(gw ? static_cast<int64_t>(plane) * row_len : 0);
          std::vector<double> dcols(gx ? static_cast<int64_t>(plane) * row_len : 0);
          for (int64_t chunk = cb; chunk < ce; ++chunk) {
            const int64_t s0 = chunk_begin(n, chunk);
            const int64_t s1 = chunk_begin(n, chunk + 1);
            for (int64_t in = s0; in < s1; ++in) {
              const double* dout = out->g.data() + in * f * plane;
              if (gw) {
                im2col_sample(x->v.data() + in * in_plane, c, h, iw, kh, kw, stride, pad, oh, ow,
                              cols.data());
                gemm(false, false, f, row_len, plane, 1.0, dout, plane, cols.data(), row_len, 1.0,
                     wg_chunks[chunk].data(), row_len);
              }
              if (gb) {
                for (int of = 0; of < f; ++of) {
                  double acc = 0.0;
                  for (int p = 0; p < plane; ++p) acc += dout[of * plane + p];
                  bg_chunks[chunk][of] += acc;
                }
              }
              if (gx) {
                // dcols(P,K) = dout_n^T (P,F) x W (F,K)
                gemm(true, false, plane, row_len, f, 1.0, dout, plane, w->v.data(), row_len, 0.0,
                     dcols.data(), row_len);
                col2im_sample_add(dcols.data(), c, h, iw, kh, kw, stride, pad, oh, ow,
                                  x->g.data() + in * in_plane);
              }
            }
          }
        });
        if (gw)
          for (const auto& part : wg_chunks)
            for (size_t i = 0; i < w->g.size(); ++i) w->g[i] += part[i];
        if (gb)
          for (const auto& part : bg_chunks)
            for (int of = 0; of < f; ++of) b->g[of] += part[of];
      });
}

Tensor relu(Graph& g, const Tensor& x) {
  auto out = zeros(x->shape);
  const int64_t total = x->size();
  parallel_for(total, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) out->v[i] = x->v[i] > 0.0 ? x->v[i] : 0.0;
  });
  return g.emit(OpKind::Relu, "relu", {x}, out, [x, out, total] {
    if (!wants_grad(x)) return;
    x->ensure_grad();
    // subgradient at exactly 0 is 0
    parallel_for(total, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i)
        if (x->v[i] > 0.0) x->g[i] += out->g[i];
    });
  });
}

Tensor batchnorm2d(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool training) {
  check(x->shape.size() == 4, "batchnorm2d: input must be (N,C,H,W)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  check(gamma->size() == c && beta->size() == c, "batchnorm2d: parameter size mismatch");
  check(static_cast<int>(state.running_mean.size()) == c, "batchnorm2d: state size mismatch");
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t per_channel = static_cast<int64_t>(n) * plane;
  const double eps = state.eps;

  auto out = zeros(x->shape);
  auto mean = std::make_shared<std::vector<double>>(c, 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(c, 0.0);
  auto xhat = std::make_shared<std::vector<double>>();
  if (training) xhat->resize(x->v.size());

  parallel_for(c, [&](int64_t cb, int64_t ce) {
    for (int64_t ic = cb; ic < ce; ++ic) {
      double m, is;
      if (training) {
        double acc = 0.0, acc2 = 0.0;
        for (int in = 0; in < n; ++in) {
          const double* p = x->v.data() + (static_cast<int64_t>(in) * c + ic) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            acc += p[i];
            acc2 += p[i] * p[i];
          }
        }
        m = acc / static_cast<double>(per_channel);
        double var = std::max(0.0, acc2 / static_cast<double>(per_channel) - m * m);
        is = 1.0 / std::sqrt(var + eps);
        // running stats keep the unbiased variance
        const double unbiased =
            per_channel > 1 ? var * static_cast<double>(per_channel) / (per_channel - 1) : var;
        state.running_mean[ic] =
            (1.0 - state.momentum) * state.running_mean[ic] + state.momentum * m;
        state.running_var[ic] =
            (1.0 - state.momentum) * state.running_var[ic] + state.momentum * unbiased;
      } else {
        m = state.running_mean[ic];
        is = 1.0 / std::sqrt(state.running_var[ic] + eps);
      }
      (*mean)[ic] = m;
      (*inv_std)[ic] = is;
      const double ga = gamma->v[ic], be = beta->v[ic];
      for (int in = 0; in < n; ++in) {
        const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double xh = (x->v[base + i] - m) * is;
          if (training) (*xhat)[base + i] = xh;
          out->v[base + i] = ga * xh + be;
        }
      }
    }
  });

  return g.emit(OpKind::BatchNorm2d, "batchnorm2d", {x, gamma, beta}, out,
                [x, gamma, beta, out, mean, inv_std, xhat, training, n, c, plane, per_channel] {
                  const bool gx = wants_grad(x);
                  if (gx) x->ensure_grad();
                  gamma->ensure_grad();
                  beta->ensure_grad();
                  parallel_for(c, [&](int64_t cb, int64_t ce) {
                    for (int64_t ic = cb; ic < ce; ++ic) {
                      double sum_dy = 0.0, sum_dy_xh = 0.0;
                      if (training) {
                        for (int in = 0; in < n; ++in) {
                          const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
                          for (int64_t i = 0; i < plane; ++i) {
                            const double dy = out->g[base + i];
                            sum_dy += dy;
                            sum_dy_xh += dy * (*xhat)[base + i];
                          }
                        }
                        gamma->g[ic] += sum_dy_xh;
                        beta->g[ic] += sum_dy;
                        if (!gx) continue;
                        const double ga = gamma->v[ic], is = (*inv_std)[ic];
                        const double mean_dy = sum_dy / static_cast<double>(per_channel);
                        const double mean_dy_xh = sum_dy_xh / static_cast<double>(per_channel);
                        for (int in = 0; in < n; ++in) {
                          const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
                          for (int64_t i = 0; i < plane; ++i) {
                            x->g[base + i] += ga * is *
                                              (out->g[base + i] - mean_dy -
                                               (*xhat)[base + i] * mean_dy_xh);
                          }
                        }
                      } else {
                        // eval: y = gamma*(x-mu)*is + beta, fixed affine map
                        const double is = (*inv_std)[ic], mu = (*mean)[ic];
                        for (int in = 0; in < n; ++in) {
                          const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
                          for (int64_t i = 0; i < plane; ++i) {
                            const double dy = out->g[base + i];
                            sum_dy += dy;
                            sum_dy_xh += dy * (x->v[base + i] - mu) * is;
                            if (gx) x->g[base + i] += gamma->v[ic] * is * dy;
                          }
                        }
                        gamma->g[ic] += sum_dy_xh;
                        beta->g[ic] += sum_dy;
                      }
                    }
                  });
                });
}

Tensor avgpool2d(Graph& g, const Tensor& x, int kernel, int stride) {
  check(x->shape.size() == 4, "avgpool2d: input must be (N,C,H,W)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  const int oh = (h - kernel) / stride + 1;
  const int ow = (w - kernel) / stride + 1;
  check(oh > 0 && ow > 0, "avgpool2d: window larger than input");
  const double inv = 1.0 / (kernel * kernel);
  const int64_t planes = static_cast<int64_t>(n) * c;

  auto out = zeros({n, c, oh, ow});
  parallel_for(planes, [&](int64_t pb, int64_t pe) {
    for (int64_t p = pb; p < pe; ++p) {
      const double* src = x->v.data() + p * h * w;
      double* dst = out->v.data() + p * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              acc += src[(oy * stride + ky) * w + ox * stride + kx];
          dst[oy * ow + ox] = acc * inv;
        }
    }
  });

  return g.emit(OpKind::AvgPool2d, "avgpool2d", {x}, out,
                [x, out, planes, h, w, oh, ow, kernel, stride, inv] {
                  if (!wants_grad(x)) return;
                  x->ensure_grad();
                  parallel_for(planes, [&](int64_t pb, int64_t pe) {
                    for (int64_t p = pb; p < pe; ++p) {
                      double* dst = x->g.data() + p * h * w;
                      const double* src = out->g.data() + p * oh * ow;
                      for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                          const double gv = src[oy * ow + ox] * inv;
                          for (int ky = 0; ky < kernel; ++ky)
                            for (int kx = 0; kx < kernel; ++kx)
                              dst[(oy * stride + ky) * w + ox * stride + kx] += gv;
                        }
                    }
                  });
                });
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  check(a->shape == b->shape,
        "add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  auto out = zeros(a->shape);
  const int64_t total = a->size();
  parallel_for(total, [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) out->v[i] = a->v[i] + b->v[i];
  });
  return g.emit(OpKind::Add, "add", {a, b}, out, [a, b, out, total] {
    for (const auto& t : {a, b}) {
      if (!wants_grad(t)) continue;
      t->ensure_grad();
      parallel_for(total, [&](int64_t s, int64_t e) {
        for (int64_t i = s; i < e; ++i) t->g[i] += out->g[i];
      });
    }
  });
}

Tensor reduce_sum(Graph& g, const Tensor& x) {
  double acc = 0.0;
  for (double v : x->v) acc += v;
  auto out = scalar_tensor(acc);
  return g.emit(OpKind::ReduceSum, "reduce-sum", {x}, out, [x, out] {
    if (!wants_grad(x)) return;
    x->ensure_grad();
    for (auto& gv : x->g) gv += out->g[0];
  });
}

Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
  check(numel(shape) == x->size(), "reshape: element count mismatch");
  auto out = tensor(std::move(shape), x->v);
  return g.emit(OpKind::Reshape, "reshape", {x}, out, [x, out] {
    if (!wants_grad(x)) return;
    x->ensure_grad();
    for (size_t i = 0; i < x->g.size(); ++i) x->g[i] += out->g[i];
  });
}

Tensor slice_channels(Graph& g, const Tensor& x, int count) {
  check(x->shape.size() == 4, "slice-channels: input must be (N,C,H,W)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  check(count >= 1 && count <= c, "slice-channels: invalid channel count");
  const int64_t plane = static_cast<int64_t>(h) * w;
  auto out = zeros({n, count, h, w});
  parallel_for(n, [&](int64_t nb, int64_t ne) {
    for (int64_t in = nb; in < ne; ++in)
      for (int ic = 0; ic < count; ++ic)
        std::copy_n(x->v.begin() + (in * c + ic) * plane, plane,
                    out->v.begin() + (in * count + ic) * plane);
  });
  return g.emit(OpKind::SliceChannels, "slice-channels", {x}, out, [x, out, n, c, count, plane] {
    if (!wants_grad(x)) return;
    x->ensure_grad();
    parallel_for(n, [&](int64_t nb, int64_t ne) {
      for (int64_t in = nb; in < ne; ++in)
        for (int ic = 0; ic < count; ++ic)
          for (int64_t i = 0; i < plane; ++i)
            x->g[(in * c + ic) * plane + i] += out->g[(in * count + ic) * plane + i];
    });
  });
}

std::vector<double> softmax_values(const std::vector<double>& logits, int classes) {
  const size_t rows = logits.size() / classes;
  std::vector<double> probs(logits.size());
  for (size_t r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * classes;
    double* p = probs.data() + r * classes;
    double mx = z[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < classes; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (int j = 0; j < classes; ++j) p[j] /= sum;
  }
  return probs;
}

namespace {

// shared by both cross-entropy flavours: mean_r [ lse(z_r) - sum_c t_rc z_rc ]
// with gradient (softmax(z) - t)/rows; t rows must sum to 1
Tensor xent_impl(Graph& g, OpKind kind, const char* label, const Tensor& logits,
                 const std::vector<double>& targets) {
  check(logits->shape.size() == 1 || logits->shape.size() == 2,
        std::string(label) + ": logits must be (N,C) or (C)");
  const int classes = logits->shape.size() == 2 ? logits->shape[1] : logits->shape[0];
  const int rows = logits->shape.size() == 2 ? logits->shape[0] : 1;
  check(static_cast<int64_t>(targets.size()) == logits->size(),
        std::string(label) + ": target shape mismatch");

  auto probs = std::make_shared<std::vector<double>>(softmax_values(logits->v, classes));
  auto tcopy = std::make_shared<std::vector<double>>(targets);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* z = logits->v.data() + static_cast<int64_t>(r) * classes;
    double mx = z[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < classes; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    double dot = 0.0;
    for (int j = 0; j < classes; ++j) dot += (*tcopy)[r * classes + j] * z[j];
    loss += lse - dot;
  }
  loss /= rows;

  auto out = scalar_tensor(loss);
  return g.emit(kind, label, {logits}, out, [logits, out, probs, tcopy, rows, classes] {
    if (!wants_grad(logits)) return;
    logits->ensure_grad();
    const double go = out->g[0] / rows;
    for (int64_t i = 0; i < logits->size(); ++i)
      logits->g[i] += go * ((*probs)[i] - (*tcopy)[i]);
  });
}

}  // namespace

Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const Tensor& onehot) {
  check(onehot->shape == logits->shape, "softmax-cross-entropy: label shape mismatch");
  check(!onehot->requires_grad, "softmax-cross-entropy: labels must not require grad");
  return xent_impl(g, OpKind::SoftmaxXent, "softmax-cross-entropy", logits, onehot->v);
}

Tensor soft_cross_entropy(Graph& g, const Tensor& student_logits, const Tensor& teacher_logits) {
  check(teacher_logits->shape == student_logits->shape,
        "soft-cross-entropy: teacher shape mismatch");
  check(!teacher_logits->requires_grad && teacher_logits->node < 0,
        "soft-cross-entropy: teacher logits must be detached");
  const int classes = student_logits->shape.size() == 2 ? student_logits->shape[1]
                                                        : student_logits->shape[0];
  return xent_impl(g, OpKind::SoftXent, "soft-cross-entropy", student_logits,
                   softmax_values(teacher_logits->v, classes));
}

}  // namespace mq
