#include "eln/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace eln {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

detail::Node& parent(detail::Node& self, std::size_t i) { return *self.parents[i]; }

void require_rank4(const Tensor& x, const char* what) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected [B, C, H, W], got " + shape_str(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Unfolds one image [Cin, H, W] into columns [Cin*k*k, Hout*Wout].
void im2col(const float* img, std::int64_t channels, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t out_h, std::int64_t out_w, float* cols) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + ((c * k + ky) * k + kx) * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          std::int64_t iy = oy * stride - pad + ky;
          float* dst = row + oy * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, 0.0F);
            continue;
          }
          const float* src = img + (c * h + iy) * w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= w) ? 0.0F : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const float* cols, std::int64_t channels, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t out_h, std::int64_t out_w, float* img) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + ((c * k + ky) * k + kx) * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = img + (c * h + iy) * w;
          const float* src = row + oy * out_w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd) {
  auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [bwd](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bwd(p.data[i], self.data[i]);
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank4(x, "conv2d input");
  require_rank4(weight, "conv2d weight");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::int64_t out_h = (h + 2 * padding - k) / stride + 1;
  const std::int64_t out_w = (w + 2 * padding - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: input too small " + shape_str(x.shape()));

  const std::int64_t patch = cin * k * k;
  const std::int64_t npix = out_h * out_w;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  // Columns are kept for the backward pass only when needed.
  std::vector<float> cols_all;
  if (!pointwise) cols_all.resize(static_cast<std::size_t>(batch * patch * npix));

  std::vector<float> out(static_cast<std::size_t>(batch * cout * npix));
  ConstMatMap wmat(weight.data().data(), cout, patch);
  for (std::int64_t b = 0; b < batch; ++b) {
    const float* img = x.data().data() + b * cin * h * w;
    const float* cols = img;
    if (!pointwise) {
      float* c = cols_all.data() + b * patch * npix;
      im2col(img, cin, h, w, k, stride, padding, out_h, out_w, c);
      cols = c;
    }
    MatMap omat(out.data() + b * cout * npix, cout, npix);
    omat.noalias() = wmat * ConstMatMap(cols, patch, npix);
    if (bias.defined()) {
      for (std::int64_t o = 0; o < cout; ++o) omat.row(o).array() += bias.data()[static_cast<std::size_t>(o)];
    }
  }

  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::make_result(
      {batch, cout, out_h, out_w}, std::move(out), std::move(parents),
      [=, cols_all = std::move(cols_all)](detail::Node& self) {
        auto& xin = parent(self, 0);
        auto& wn = parent(self, 1);
        ConstMatMap wm(wn.data.data(), cout, patch);
        std::vector<float> dcols;
        if (xin.requires_grad && !pointwise) dcols.resize(static_cast<std::size_t>(patch * npix));
        for (std::int64_t b = 0; b < batch; ++b) {
          ConstMatMap gout(self.grad.data() + b * cout * npix, cout, npix);
          const float* cols = pointwise ? xin.data.data() + b * cin * h * w : cols_all.data() + b * patch * npix;
          if (wn.requires_grad) {
            MatMap gw(wn.ensure_grad().data(), cout, patch);
            gw.noalias() += gout * ConstMatMap(cols, patch, npix).transpose();
          }
          if (has_bias && parent(self, 2).requires_grad) {
            auto& gb = parent(self, 2).ensure_grad();
            // Plain loop: Eigen's vectorized sum peels by address, which would
            // make the result depend on heap alignment.
            for (std::int64_t o = 0; o < cout; ++o) {
              const float* row = self.grad.data() + (b * cout + o) * npix;
              double acc = 0.0;
              for (std::int64_t i = 0; i < npix; ++i) acc += row[i];
              gb[static_cast<std::size_t>(o)] += static_cast<float>(acc);
            }
          }
          if (xin.requires_grad) {
            float* gimg = xin.ensure_grad().data() + b * cin * h * w;
            if (pointwise) {
              MatMap(gimg, cin, npix).noalias() += wm.transpose() * gout;
            } else {
              MatMap(dcols.data(), patch, npix).noalias() = wm.transpose() * gout;
              col2im(dcols.data(), cin, h, w, k, stride, padding, out_h, out_w, gimg);
            }
          }
        }
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](float v) { return v > 0.0F ? v : 0.0F; }, [](float in, float) { return in > 0.0F ? 1.0F : 0.0F; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](float v) {
        if (v >= 0.0F) return 1.0F / (1.0F + std::exp(-v));
        float e = std::exp(v);
        return e / (1.0F + e);
      },
      [](float, float out) { return out * (1.0F - out); });
}

Tensor log_sigmoid(const Tensor& x) {
  // log(sigmoid(v)) = min(v, 0) - log1p(exp(-|v|)); derivative is sigmoid(-v).
  return unary(
      x, [](float v) { return std::min(v, 0.0F) - std::log1p(std::exp(-std::fabs(v))); },
      [](float in, float) {
        if (in >= 0.0F) {
          float e = std::exp(-in);
          return e / (1.0F + e);
        }
        return 1.0F / (1.0F + std::exp(in));
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](float v) { return std::exp(v); }, [](float, float out) { return out; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](float v) { return std::log(v); }, [](float in, float) { return 1.0F / in; });
}

Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank4(x, "upsample_bilinear");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h <= 0 || out_w <= 0) throw ShapeError("upsample_bilinear: invalid output size");

  struct Tap {
    std::int64_t i0, i1;
    float w0, w1;
  };
  auto taps = [](std::int64_t in, std::int64_t out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
      double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
      auto i0 = std::min(static_cast<std::int64_t>(src), in - 1);
      auto i1 = std::min(i0 + 1, in - 1);
      auto frac = static_cast<float>(src - static_cast<double>(i0));
      t[static_cast<std::size_t>(o)] = {i0, i1, 1.0F - frac, frac};
    }
    return t;
  };
  auto ty = taps(h, out_h);
  auto tx = taps(w, out_w);

  std::vector<float> out(static_cast<std::size_t>(planes * out_h * out_w));
  auto in = x.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = in.data() + p * h * w;
    float* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      const float* r0 = src + a.i0 * w;
      const float* r1 = src + a.i1 * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        dst[oy * out_w + ox] =
            a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), out_h, out_w};
  return Tensor::make_result(shape, std::move(out), {x}, [=](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      float* dst = g.data() + pl * h * w;
      const float* go = self.grad.data() + pl * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          float v = go[oy * out_w + ox];
          dst[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
          dst[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
          dst[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
          dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
        }
      }
    }
  });
}

Tensor log_softmax_channels(const Tensor& logits) {
  require_rank4(logits, "log_softmax_channels");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  auto in = logits.data();
  std::vector<float> out(in.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const float* src = in.data() + b * classes * hw;
    float* dst = out.data() + b * classes * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      float mx = src[i];
      for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, src[c * hw + i]);
      double z = 0.0;
      for (std::int64_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(src[c * hw + i] - mx));
      auto lz = static_cast<float>(std::log(z)) + mx;
      for (std::int64_t c = 0; c < classes; ++c) dst[c * hw + i] = src[c * hw + i] - lz;
    }
  }
  return Tensor::make_result(logits.shape(), std::move(out), {logits}, [=](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::int64_t b = 0; b < batch; ++b) {
      const float* go = self.grad.data() + b * classes * hw;
      const float* lp = self.data.data() + b * classes * hw;
      float* gi = g.data() + b * classes * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (std::int64_t c = 0; c < classes; ++c) s += go[c * hw + i];
        for (std::int64_t c = 0; c < classes; ++c) {
          gi[c * hw + i] += go[c * hw + i] - std::exp(lp[c * hw + i]) * static_cast<float>(s);
        }
      }
    }
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : parts) require_rank4(t, "concat_channels");
  const std::int64_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::vector<std::int64_t> offsets;
  std::int64_t total = 0;
  for (const auto& t : parts) {
    if (t.dim(0) != batch || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: spatial/batch mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(t.shape()));
    }
    offsets.push_back(total);
    total += t.dim(1);
  }
  const std::int64_t hw = h * w;
  std::vector<float> out(static_cast<std::size_t>(batch * total * hw));
  std::vector<std::int64_t> channels;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::int64_t c = parts[k].dim(1);
    channels.push_back(c);
    auto src = parts[k].data();
    for (std::int64_t b = 0; b < batch; ++b) {
      std::copy_n(src.data() + b * c * hw, c * hw, out.data() + (b * total + offsets[k]) * hw);
    }
  }
  return Tensor::make_result({batch, total, h, w}, std::move(out), {parts.begin(), parts.end()},
                             [=](detail::Node& self) {
                               for (std::size_t k = 0; k < channels.size(); ++k) {
                                 auto& p = parent(self, k);
                                 if (!p.requires_grad) continue;
                                 auto& g = p.ensure_grad();
                                 const std::int64_t c = channels[k];
                                 for (std::int64_t b = 0; b < batch; ++b) {
                                   const float* src = self.grad.data() + (b * total + offsets[k]) * hw;
                                   float* dst = g.data() + b * c * hw;
                                   for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end) {
  require_rank4(x, "slice_channels");
  const std::int64_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin < 0 || end > channels || begin >= end) throw ShapeError("slice_channels: invalid range");
  const std::int64_t c = end - begin;
  std::vector<float> out(static_cast<std::size_t>(batch * c * hw));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::copy_n(x.data().data() + (b * channels + begin) * hw, c * hw, out.data() + b * c * hw);
  }
  return Tensor::make_result({batch, c, x.dim(2), x.dim(3)}, std::move(out), {x}, [=](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::int64_t b = 0; b < batch; ++b) {
      const float* src = self.grad.data() + b * c * hw;
      float* dst = g.data() + (b * channels + begin) * hw;
      for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  return unary(
      a, [factor](float v) { return v * factor; }, [factor](float, float) { return factor; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0F); }

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return Tensor::make_result({}, {static_cast<float>(s)}, {a}, [](detail::Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0F / static_cast<float>(a.numel()));
}

Tensor add_scalars(std::span<const Tensor> terms) {
  std::vector<Tensor> defined;
  double s = 0.0;
  for (const auto& t : terms) {
    if (!t.defined()) continue;
    if (t.numel() != 1) throw ShapeError("add_scalars: non-scalar term " + shape_str(t.shape()));
    s += t.item();
    defined.push_back(t);
  }
  return Tensor::make_result({}, {static_cast<float>(s)}, defined, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->ensure_grad()[0] += self.grad[0];
    }
  });
}

}  // namespace eln
