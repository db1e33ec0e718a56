#include "palmlayout/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace palm::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXf>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXf>;

// Columns are output pixels; rows are (channel, ky, kx).
void im2col(const Tensor& x, const Conv2d& conv, int out_h, int out_w, FloatBuffer& col) {
  const int k = conv.kernel;
  const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
  col.assign(static_cast<std::size_t>(conv.in) * k * k * npix, 0.0f);
  for (int c = 0; c < conv.in; ++c) {
    const float* src = x.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* dst = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * npix;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * conv.stride - conv.pad + ky;
          if (iy < 0 || iy >= x.height) continue;
          const float* srow = src + static_cast<std::size_t>(iy) * x.width;
          float* drow = dst + static_cast<std::size_t>(oy) * out_w;
          if (conv.stride == 1) {
            const int ox0 = std::max(0, conv.pad - kx);
            const int ox1 = std::min(out_w, x.width + conv.pad - kx);
            if (ox1 > ox0)
              std::memcpy(drow + ox0, srow + ox0 - conv.pad + kx,
                          sizeof(float) * static_cast<std::size_t>(ox1 - ox0));
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * conv.stride - conv.pad + kx;
              if (ix >= 0 && ix < x.width) drow[ox] = srow[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const FloatBuffer& col, const Conv2d& conv, int out_h, int out_w, Tensor& dx) {
  const int k = conv.kernel;
  const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < conv.in; ++c) {
    float* dst = dx.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* src = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * npix;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * conv.stride - conv.pad + ky;
          if (iy < 0 || iy >= dx.height) continue;
          float* drow = dst + static_cast<std::size_t>(iy) * dx.width;
          const float* srow = src + static_cast<std::size_t>(oy) * out_w;
          if (conv.stride == 1) {
            const int ox0 = std::max(0, conv.pad - kx);
            const int ox1 = std::min(out_w, dx.width + conv.pad - kx);
            float* d = drow - conv.pad + kx;
            for (int ox = ox0; ox < ox1; ++ox) d[ox] += srow[ox];
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * conv.stride - conv.pad + kx;
              if (ix >= 0 && ix < dx.width) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

bool is_pointwise(const Conv2d& conv) {
  return conv.kernel == 1 && conv.stride == 1 && conv.pad == 0;
}

thread_local FloatBuffer t_col;
thread_local FloatBuffer t_dcol;

}  // namespace

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kStem: return "stem";
    case ParamGroup::kRes2: return "res2";
    case ParamGroup::kRes3: return "res3";
    case ParamGroup::kRes4: return "res4";
    case ParamGroup::kRes5: return "res5";
    case ParamGroup::kHeads: return "heads";
  }
  return "heads";
}

Parameter& ParameterStore::add(std::string name, std::vector<int> shape, ParamGroup group,
                               bool weight_decay) {
  if (find(name)) throw std::logic_error("duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  p->shape = std::move(shape);
  p->group = group;
  p->weight_decay = weight_decay;
  p->value.assign(n, 0.0f);
  p->grad.assign(n, 0.0f);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

Conv2d make_conv(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                 int stride, ParamGroup group, Rng& rng, double gain) {
  Conv2d conv;
  conv.in = in;
  conv.out = out;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.pad = kernel / 2;
  conv.weight = &store.add(name + ".weight", {out, in, kernel, kernel}, group, true);
  conv.bias = &store.add(name + ".bias", {out}, group, false);
  const double std = gain * std::sqrt(2.0 / (static_cast<double>(in) * kernel * kernel));
  for (auto& w : conv.weight->value) w = static_cast<float>(rng.normal() * std);
  return conv;
}

Tensor conv2d_forward(const Conv2d& conv, const Tensor& x) {
  if (x.channels != conv.in)
    throw std::invalid_argument("conv " + conv.weight->name + ": input has " +
                                std::to_string(x.channels) + " channels, expected " +
                                std::to_string(conv.in));
  const int oh = conv.out_dim(x.height);
  const int ow = conv.out_dim(x.width);
  Tensor y(conv.out, oh, ow);
  const int kk = conv.in * conv.kernel * conv.kernel;
  ConstMapMat w(conv.weight->value.data(), conv.out, kk);
  MapMat out(y.data.data(), conv.out, static_cast<Eigen::Index>(oh) * ow);
  if (is_pointwise(conv)) {
    ConstMapMat in(x.data.data(), conv.in, static_cast<Eigen::Index>(oh) * ow);
    out.noalias() = w * in;
  } else {
    im2col(x, conv, oh, ow, t_col);
    ConstMapMat col(t_col.data(), kk, static_cast<Eigen::Index>(oh) * ow);
    out.noalias() = w * col;
  }
  ConstMapVec b(conv.bias->value.data(), conv.out);
  out.colwise() += b;
  return y;
}

void conv2d_backward(const Conv2d& conv, const Tensor& x, const Tensor& dy, Tensor* dx,
                     bool param_grads) {
  const int oh = dy.height;
  const int ow = dy.width;
  const Eigen::Index npix = static_cast<Eigen::Index>(oh) * ow;
  const int kk = conv.in * conv.kernel * conv.kernel;
  ConstMapMat g(dy.data.data(), conv.out, npix);
  ConstMapMat w(conv.weight->value.data(), conv.out, kk);
  const bool pointwise = is_pointwise(conv);
  if (param_grads) {
    MapMat dw(conv.weight->grad.data(), conv.out, kk);
    if (pointwise) {
      ConstMapMat in(x.data.data(), conv.in, npix);
      dw.noalias() += g * in.transpose();
    } else {
      im2col(x, conv, oh, ow, t_col);
      ConstMapMat col(t_col.data(), kk, npix);
      dw.noalias() += g * col.transpose();
    }
    MapVec db(conv.bias->grad.data(), conv.out);
    db += g.rowwise().sum();
  }
  if (dx) {
    if (!dx->same_shape(x)) *dx = Tensor(x.channels, x.height, x.width);
    if (pointwise) {
      MapMat d(dx->data.data(), conv.in, npix);
      d.noalias() += w.transpose() * g;
    } else {
      t_dcol.resize(static_cast<std::size_t>(kk) * npix);
      MapMat dcol(t_dcol.data(), kk, npix);
      dcol.noalias() = w.transpose() * g;
      col2im(t_dcol, conv, oh, ow, *dx);
    }
  }
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data) v = v > 0.0f ? v : 0.0f;
}

void relu_backward(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (y.data[i] <= 0.0f) dy.data[i] = 0.0f;
}

Tensor maxpool3x3s2(const Tensor& x, std::vector<int>* argmax) {
  const int oh = (x.height + 2 - 3) / 2 + 1;
  const int ow = (x.width + 2 - 3) / 2 + 1;
  Tensor y(x.channels, oh, ow);
  if (argmax) argmax->assign(y.size(), -1);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.channel(c);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * 2 - 1 + ky;
          if (iy < 0 || iy >= x.height) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * 2 - 1 + kx;
            if (ix < 0 || ix >= x.width) continue;
            const int idx = iy * x.width + ix;
            if (src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = c * y.plane() + static_cast<std::size_t>(oy) * ow + ox;
        y.data[o] = best;
        if (argmax) (*argmax)[o] = best_idx;
      }
    }
  }
  return y;
}

void maxpool_backward(const Tensor& dy, const std::vector<int>& argmax, Tensor& dx) {
  for (int c = 0; c < dy.channels; ++c) {
    float* d = dx.channel(c);
    const float* g = dy.channel(c);
    const int* am = argmax.data() + c * dy.plane();
    for (std::size_t i = 0; i < dy.plane(); ++i) d[am[i]] += g[i];
  }
}

Tensor upsample2x_nearest(const Tensor& x, int h, int w) {
  Tensor y(x.channels, h, w);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.channel(c);
    float* dst = y.channel(c);
    for (int yy = 0; yy < h; ++yy) {
      const float* srow = src + static_cast<std::size_t>(std::min(yy / 2, x.height - 1)) * x.width;
      float* drow = dst + static_cast<std::size_t>(yy) * w;
      for (int xx = 0; xx < w; ++xx) drow[xx] = srow[std::min(xx / 2, x.width - 1)];
    }
  }
  return y;
}

void upsample2x_nearest_backward(const Tensor& dy, Tensor& dx) {
  for (int c = 0; c < dy.channels; ++c) {
    const float* g = dy.channel(c);
    float* d = dx.channel(c);
    for (int yy = 0; yy < dy.height; ++yy) {
      float* drow = d + static_cast<std::size_t>(std::min(yy / 2, dx.height - 1)) * dx.width;
      const float* grow = g + static_cast<std::size_t>(yy) * dy.width;
      for (int xx = 0; xx < dy.width; ++xx) drow[std::min(xx / 2, dx.width - 1)] += grow[xx];
    }
  }
}

Tensor subsample2x(const Tensor& x) {
  const int h = (x.height + 1) / 2;
  const int w = (x.width + 1) / 2;
  Tensor y(x.channels, h, w);
  for (int c = 0; c < x.channels; ++c)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) y.at(c, yy, xx) = x.at(c, 2 * yy, 2 * xx);
  return y;
}

void subsample2x_backward(const Tensor& dy, Tensor& dx) {
  for (int c = 0; c < dy.channels; ++c)
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) dx.at(c, 2 * yy, 2 * xx) += dy.at(c, yy, xx);
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

Linear make_linear(ParameterStore& store, const std::string& name, int in, int out,
                   ParamGroup group, Rng& rng, double init_std) {
  Linear fc;
  fc.in = in;
  fc.out = out;
  fc.weight = &store.add(name + ".weight", {out, in}, group, true);
  fc.bias = &store.add(name + ".bias", {out}, group, false);
  for (auto& w : fc.weight->value) w = static_cast<float>(rng.normal() * init_std);
  return fc;
}

Matrix linear_forward(const Linear& fc, const Matrix& x) {
  if (x.cols != fc.in) throw std::invalid_argument("linear " + fc.weight->name + ": width mismatch");
  Matrix y(x.rows, fc.out);
  if (x.rows == 0) return y;
  ConstMapMat in(x.data.data(), x.rows, x.cols);
  ConstMapMat w(fc.weight->value.data(), fc.out, fc.in);
  MapMat out(y.data.data(), y.rows, y.cols);
  out.noalias() = in * w.transpose();
  Eigen::Map<const Eigen::RowVectorXf> b(fc.bias->value.data(), fc.out);
  out.rowwise() += b;
  return y;
}

void linear_backward(const Linear& fc, const Matrix& x, const Matrix& dy, Matrix* dx,
                     bool param_grads) {
  if (x.rows == 0) {
    if (dx) *dx = Matrix(0, fc.in);
    return;
  }
  ConstMapMat in(x.data.data(), x.rows, x.cols);
  ConstMapMat g(dy.data.data(), dy.rows, dy.cols);
  ConstMapMat w(fc.weight->value.data(), fc.out, fc.in);
  if (param_grads) {
    MapMat dw(fc.weight->grad.data(), fc.out, fc.in);
    dw.noalias() += g.transpose() * in;
    Eigen::Map<Eigen::RowVectorXf> db(fc.bias->grad.data(), fc.out);
    db += g.colwise().sum();
  }
  if (dx) {
    *dx = Matrix(x.rows, fc.in);
    MapMat d(dx->data.data(), dx->rows, dx->cols);
    d.noalias() = g * w;
  }
}

void relu_inplace(Matrix& m) {
  for (auto& v : m.data) v = v > 0.0f ? v : 0.0f;
}

void relu_backward(const Matrix& y, Matrix& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (y.data[i] <= 0.0f) dy.data[i] = 0.0f;
}

Deconv2x2 make_deconv2x2(ParameterStore& store, const std::string& name, int in, int out,
                         ParamGroup group, Rng& rng) {
  Deconv2x2 d;
  d.in = in;
  d.out = out;
  d.weight = &store.add(name + ".weight", {out, 2, 2, in}, group, true);
  d.bias = &store.add(name + ".bias", {out}, group, false);
  // Each output pixel receives exactly one tap per input channel.
  const double std = std::sqrt(2.0 / in);
  for (auto& w : d.weight->value) w = static_cast<float>(rng.normal() * std);
  return d;
}

Tensor deconv2x2_forward(const Deconv2x2& d, const Tensor& x) {
  if (x.channels != d.in) throw std::invalid_argument("deconv " + d.weight->name + ": channel mismatch");
  const Eigen::Index npix = static_cast<Eigen::Index>(x.plane());
  ConstMapMat w(d.weight->value.data(), d.out * 4, d.in);
  ConstMapMat in(x.data.data(), d.in, npix);
  RowMat expanded = w * in;  // (out*4) x npix
  Tensor y(d.out, x.height * 2, x.width * 2);
  for (int o = 0; o < d.out; ++o) {
    const float b = d.bias->value[o];
    for (int k = 0; k < 4; ++k) {
      const int dy = k / 2;
      const int dx = k % 2;
      const float* src = expanded.data() + (static_cast<std::size_t>(o) * 4 + k) * npix;
      for (int yy = 0; yy < x.height; ++yy)
        for (int xx = 0; xx < x.width; ++xx)
          y.at(o, 2 * yy + dy, 2 * xx + dx) = src[yy * x.width + xx] + b;
    }
  }
  return y;
}

void deconv2x2_backward(const Deconv2x2& d, const Tensor& x, const Tensor& dy, Tensor* dx,
                        bool param_grads) {
  const Eigen::Index npix = static_cast<Eigen::Index>(x.plane());
  RowMat gathered(d.out * 4, npix);
  for (int o = 0; o < d.out; ++o) {
    for (int k = 0; k < 4; ++k) {
      const int oy = k / 2;
      const int ox = k % 2;
      float* dst = gathered.data() + (static_cast<std::size_t>(o) * 4 + k) * npix;
      for (int yy = 0; yy < x.height; ++yy)
        for (int xx = 0; xx < x.width; ++xx)
          dst[yy * x.width + xx] = dy.at(o, 2 * yy + oy, 2 * xx + ox);
    }
  }
  ConstMapMat w(d.weight->value.data(), d.out * 4, d.in);
  ConstMapMat in(x.data.data(), d.in, npix);
  if (param_grads) {
    MapMat dw(d.weight->grad.data(), d.out * 4, d.in);
    dw.noalias() += gathered * in.transpose();
    for (int o = 0; o < d.out; ++o) {
      double s = 0.0;
      for (int c = 0; c < dy.plane(); ++c) s += dy.channel(o)[c];
      d.bias->grad[o] += static_cast<float>(s);
    }
  }
  if (dx) {
    if (!dx->same_shape(x)) *dx = Tensor(x.channels, x.height, x.width);
    MapMat out(dx->data.data(), d.in, npix);
    out.noalias() += w.transpose() * gathered;
  }
}

}  // namespace palm::nn
