#pragma once

// Minimal CPU tensor and layer kernels with hand-written backward passes.
// Batch size is always one, so activations are CHW.

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "palmlayout/rng.hpp"

namespace palm::nn {

// Vectorised reductions peel to the first aligned element, so the summation
// order follows the buffer address. A fixed 64-byte alignment keeps results
// bit-identical from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  FloatBuffer data;

  Tensor() = default;
  Tensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  float* channel(int c) { return data.data() + c * plane(); }
  const float* channel(int c) const { return data.data() + c * plane(); }
  float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  void zero() { std::fill(data.begin(), data.end(), 0.0f); }
};

// Parameter groups follow the backbone stages so a training stage can freeze a prefix.
enum class ParamGroup { kStem, kRes2, kRes3, kRes4, kRes5, kHeads };

std::string_view to_string(ParamGroup g);

struct Parameter {
  std::string name;
  std::vector<int> shape;
  ParamGroup group = ParamGroup::kHeads;
  bool weight_decay = true;  // false for biases
  FloatBuffer value;
  FloatBuffer grad;

  std::size_t size() const { return value.size(); }
};

class ParameterStore {
 public:
  Parameter& add(std::string name, std::vector<int> shape, ParamGroup group, bool weight_decay);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct Conv2d {
  Parameter* weight = nullptr;  // [out, in, k, k]
  Parameter* bias = nullptr;    // [out]
  int in = 0;
  int out = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_dim(int d) const { return (d + 2 * pad - kernel) / stride + 1; }
};

// He-normal weights (std = gain * sqrt(2 / fan_in)), zero bias.
Conv2d make_conv(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                 int stride, ParamGroup group, Rng& rng, double gain = 1.0);

Tensor conv2d_forward(const Conv2d& conv, const Tensor& x);
// Accumulates parameter gradients when `param_grads`; writes dx when non-null.
void conv2d_backward(const Conv2d& conv, const Tensor& x, const Tensor& dy, Tensor* dx,
                     bool param_grads);

void relu_inplace(Tensor& t);
// dy *= (y > 0)
void relu_backward(const Tensor& y, Tensor& dy);

// 3x3, stride 2, pad 1 max pooling.
Tensor maxpool3x3s2(const Tensor& x, std::vector<int>* argmax);
void maxpool_backward(const Tensor& dy, const std::vector<int>& argmax, Tensor& dx);

// Nearest-neighbour upsampling to (h, w) with source index floor(i / 2).
Tensor upsample2x_nearest(const Tensor& x, int h, int w);
void upsample2x_nearest_backward(const Tensor& dy, Tensor& dx);

// Every other pixel starting at 0 (1x1 max pool, stride 2).
Tensor subsample2x(const Tensor& x);
void subsample2x_backward(const Tensor& dy, Tensor& dx);

void add_inplace(Tensor& a, const Tensor& b);

struct Linear {
  Parameter* weight = nullptr;  // [out, in]
  Parameter* bias = nullptr;    // [out]
  int in = 0;
  int out = 0;
};

Linear make_linear(ParameterStore& store, const std::string& name, int in, int out,
                   ParamGroup group, Rng& rng, double init_std);

// Row-major matrices: rows are samples.
struct Matrix {
  int rows = 0;
  int cols = 0;
  FloatBuffer data;
  Matrix() = default;
  Matrix(int r, int c, float fill = 0.0f)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}
  float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

Matrix linear_forward(const Linear& fc, const Matrix& x);
void linear_backward(const Linear& fc, const Matrix& x, const Matrix& dy, Matrix* dx,
                     bool param_grads);
void relu_inplace(Matrix& m);
void relu_backward(const Matrix& y, Matrix& dy);

// 2x2 stride-2 transposed convolution.
struct Deconv2x2 {
  Parameter* weight = nullptr;  // [out, 2, 2, in]
  Parameter* bias = nullptr;    // [out]
  int in = 0;
  int out = 0;
};

Deconv2x2 make_deconv2x2(ParameterStore& store, const std::string& name, int in, int out,
                         ParamGroup group, Rng& rng);
Tensor deconv2x2_forward(const Deconv2x2& d, const Tensor& x);
void deconv2x2_backward(const Deconv2x2& d, const Tensor& x, const Tensor& dy, Tensor* dx,
                        bool param_grads);

}  // namespace palm::nn
