#include "dgl/layers.hpp"

#include <cmath>
#include <limits>

namespace dgl {

std::string LayerSpec::name() const {
  switch (kind) {
    case LayerKind::Conv:
      return "conv" + std::to_string(kernel) + "x" + std::to_string(kernel) + "(" + std::to_string(in_channels) +
             "->" + std::to_string(out_channels) + ")";
    case LayerKind::Dense:
      return "dense(" + std::to_string(in_channels) + "->" + std::to_string(out_channels) + ")";
    case LayerKind::Relu:
      return "relu";
    case LayerKind::MaxPool:
      return "maxpool2x2";
    case LayerKind::AvgPool:
      return "avgpool_to(" + std::to_string(target) + ")";
    case LayerKind::BatchNorm:
      return "batchnorm(" + std::to_string(in_channels) + ")";
  }
  return "unknown";
}

Shape LayerSpec::output_shape(const Shape& in) const {
  auto fail = [&](const std::string& what) {
    throw ShapeError(name() + ": " + what + " (input " + in.str() + ")");
  };
  switch (kind) {
    case LayerKind::Conv:
      if (in.channels != in_channels) fail("expected " + std::to_string(in_channels) + " input channels");
      if (kernel % 2 == 0) fail("kernel must be odd for shape-preserving padding");
      return {in.batch, out_channels, in.height, in.width};
    case LayerKind::Dense:
      if (in.per_sample() != in_channels)
        fail("expected " + std::to_string(in_channels) + " features per sample, got " +
             std::to_string(in.per_sample()));
      return {in.batch, out_channels, 1, 1};
    case LayerKind::Relu:
      return in;
    case LayerKind::MaxPool:
      if (in.height < 2 || in.width < 2) fail("spatial extent below 2");
      return {in.batch, in.channels, in.height / 2, in.width / 2};
    case LayerKind::AvgPool:
      if (target == 0 || in.height % target != 0 || in.width % target != 0)
        fail("target extent " + std::to_string(target) + " does not divide spatial extent");
      return {in.batch, in.channels, target, target};
    case LayerKind::BatchNorm:
      if (in.channels != in_channels) fail("expected " + std::to_string(in_channels) + " channels");
      return in;
  }
  return in;
}

std::uint64_t LayerSpec::flops(const Shape& in) const {
  const Shape one{1, in.channels, in.height, in.width};
  switch (kind) {
    case LayerKind::Conv:
      return 2ULL * in_channels * out_channels * kernel * kernel * in.height * in.width;
    case LayerKind::Dense:
      return 2ULL * in_channels * out_channels;
    case LayerKind::AvgPool:
      return one.numel();
    default:
      return 0;
  }
}

Shape stack_output_shape(const std::vector<LayerSpec>& specs, Shape in) {
  for (const auto& s : specs) in = s.output_shape(in);
  return in;
}

std::uint64_t stack_flops(const std::vector<LayerSpec>& specs, Shape in) {
  std::uint64_t total = 0;
  in.batch = 1;
  for (const auto& s : specs) {
    total += s.flops(in);
    in = s.output_shape(in);
  }
  return total;
}

namespace {

template <typename V>
std::uint64_t hash_span(const std::vector<V>& v) {
  std::uint64_t h = v.size();
  for (const auto x : v) h = splitmix64(h ^ static_cast<std::uint64_t>(x));
  return h;
}

template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.values()) v = static_cast<T>(uniform(rng, -bound, bound));
}

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const LayerSpec& spec, Rng& rng)
      : Layer<T>(spec),
        weight_(Tensor<T>({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel})),
        bias_(Tensor<T>({1, spec.out_channels, 1, 1})) {
    kaiming_uniform(weight_.value, spec.in_channels * spec.kernel * spec.kernel, rng);
  }

  Tensor<T> forward(const Tensor<T>& in, Mode) override {
    const Shape os = this->spec_.output_shape(in.shape());
    input_ = in;
    Tensor<T> out(os);
    const std::size_t H = os.height, W = os.width, K = this->spec_.kernel;
    const long pad = static_cast<long>(K / 2);
    const std::size_t Cin = this->spec_.in_channels;
    for (std::size_t b = 0; b < os.batch; ++b) {
      for (std::size_t oc = 0; oc < os.channels; ++oc) {
        T* o = &out.at(b, oc, 0, 0);
        const T bias = bias_.value[oc];
        for (std::size_t i = 0; i < H * W; ++i) o[i] = bias;
        for (std::size_t ic = 0; ic < Cin; ++ic) {
          const T* src = &in.at(b, ic, 0, 0);
          for (std::size_t ky = 0; ky < K; ++ky) {
            const long dy = static_cast<long>(ky) - pad;
            for (std::size_t kx = 0; kx < K; ++kx) {
              const long dx = static_cast<long>(kx) - pad;
              const T w = weight_.value.at(oc, ic, ky, kx);
              const long y0 = std::max(0L, -dy), y1 = std::min<long>(H, static_cast<long>(H) - dy);
              const long x0 = std::max(0L, -dx), x1 = std::min<long>(W, static_cast<long>(W) - dx);
              for (long y = y0; y < y1; ++y) {
                T* orow = o + y * static_cast<long>(W);
                const T* irow = src + (y + dy) * static_cast<long>(W) + dx;
                for (long x = x0; x < x1; ++x) orow[x] += w * irow[x];
              }
            }
          }
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    const Shape is = input_.shape();
    Tensor<T> gin(is);
    const std::size_t H = is.height, W = is.width, K = this->spec_.kernel;
    const long pad = static_cast<long>(K / 2);
    const std::size_t Cin = this->spec_.in_channels, Cout = this->spec_.out_channels;
    for (std::size_t b = 0; b < is.batch; ++b) {
      for (std::size_t oc = 0; oc < Cout; ++oc) {
        const T* g = &gout.at(b, oc, 0, 0);
        T gb = 0;
        for (std::size_t i = 0; i < H * W; ++i) gb += g[i];
        bias_.grad[oc] += gb;
        for (std::size_t ic = 0; ic < Cin; ++ic) {
          const T* src = &input_.at(b, ic, 0, 0);
          T* dst = &gin.at(b, ic, 0, 0);
          for (std::size_t ky = 0; ky < K; ++ky) {
            const long dy = static_cast<long>(ky) - pad;
            for (std::size_t kx = 0; kx < K; ++kx) {
              const long dx = static_cast<long>(kx) - pad;
              const T w = weight_.value.at(oc, ic, ky, kx);
              T gw = 0;
              const long y0 = std::max(0L, -dy), y1 = std::min<long>(H, static_cast<long>(H) - dy);
              const long x0 = std::max(0L, -dx), x1 = std::min<long>(W, static_cast<long>(W) - dx);
              for (long y = y0; y < y1; ++y) {
                const T* grow = g + y * static_cast<long>(W);
                const long off = (y + dy) * static_cast<long>(W) + dx;
                const T* irow = src + off;
                T* drow = dst + off;
                for (long x = x0; x < x1; ++x) {
                  gw += grow[x] * irow[x];
                  drow[x] += w * grow[x];
                }
              }
              weight_.grad.at(oc, ic, ky, kx) += gw;
            }
          }
        }
      }
    }
    return gin;
  }

  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(const LayerSpec& spec, Rng& rng)
      : Layer<T>(spec),
        weight_(Tensor<T>({1, 1, spec.out_channels, spec.in_channels})),
        bias_(Tensor<T>({1, spec.out_channels, 1, 1})) {
    kaiming_uniform(weight_.value, spec.in_channels, rng);
  }

  Tensor<T> forward(const Tensor<T>& in, Mode) override {
    const Shape os = this->spec_.output_shape(in.shape());
    input_ = in;
    const std::size_t F = this->spec_.in_channels, O = this->spec_.out_channels;
    Tensor<T> out(os);
    for (std::size_t b = 0; b < os.batch; ++b) {
      const T* x = in.data() + b * F;
      for (std::size_t o = 0; o < O; ++o) {
        const T* w = weight_.value.data() + o * F;
        T acc = bias_.value[o];
        for (std::size_t f = 0; f < F; ++f) acc += w[f] * x[f];
        out[b * O + o] = acc;
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    const std::size_t F = this->spec_.in_channels, O = this->spec_.out_channels;
    const std::size_t B = input_.shape().batch;
    Tensor<T> gin(input_.shape());
    for (std::size_t b = 0; b < B; ++b) {
      const T* x = input_.data() + b * F;
      T* gx = gin.data() + b * F;
      for (std::size_t o = 0; o < O; ++o) {
        const T g = gout[b * O + o];
        bias_.grad[o] += g;
        const T* w = weight_.value.data() + o * F;
        T* gw = weight_.grad.data() + o * F;
        for (std::size_t f = 0; f < F; ++f) {
          gw[f] += g * x[f];
          gx[f] += g * w[f];
        }
      }
    }
    return gin;
  }

  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  explicit Relu(const LayerSpec& spec) : Layer<T>(spec) {}

  Tensor<T> forward(const Tensor<T>& in, Mode) override {
    Tensor<T> out(in.shape());
    mask_.assign(in.size(), 0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > T{0}) {
        out[i] = in[i];
        mask_[i] = 1;
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    Tensor<T> gin(gout.shape());
    for (std::size_t i = 0; i < gout.size(); ++i)
      if (mask_[i]) gin[i] = gout[i];
    return gin;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }
  std::uint64_t pattern() const override { return hash_span(mask_); }

 private:
  std::vector<unsigned char> mask_;
};

template <typename T>
class MaxPool2 final : public Layer<T> {
 public:
  explicit MaxPool2(const LayerSpec& spec) : Layer<T>(spec) {}

  Tensor<T> forward(const Tensor<T>& in, Mode) override {
    const Shape os = this->spec_.output_shape(in.shape());
    in_shape_ = in.shape();
    Tensor<T> out(os);
    argmax_.assign(os.numel(), 0);
    std::size_t k = 0;
    for (std::size_t b = 0; b < os.batch; ++b)
      for (std::size_t c = 0; c < os.channels; ++c)
        for (std::size_t y = 0; y < os.height; ++y)
          for (std::size_t x = 0; x < os.width; ++x, ++k) {
            std::size_t best = in.offset(b, c, 2 * y, 2 * x);
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = in.offset(b, c, 2 * y + dy, 2 * x + dx);
                if (in[idx] > in[best]) best = idx;
              }
            argmax_[k] = best;
            out[k] = in[best];
          }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    Tensor<T> gin(in_shape_);
    for (std::size_t k = 0; k < gout.size(); ++k) gin[argmax_[k]] += gout[k];
    return gin;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2>(*this); }
  std::uint64_t pattern() const override { return hash_span(argmax_); }

 private:
  Shape in_shape_{};
  std::vector<std::size_t> argmax_;
};

template <typename T>
class AvgPoolTo final : public Layer<T> {
 public:
  explicit AvgPoolTo(const LayerSpec& spec) : Layer<T>(spec) {}

  Tensor<T> forward(const Tensor<T>& in, Mode) override {
    const Shape os = this->spec_.output_shape(in.shape());
    in_shape_ = in.shape();
    const std::size_t f = in_shape_.height / os.height;
    const T scale = T{1} / static_cast<T>(f * f);
    Tensor<T> out(os);
    for (std::size_t b = 0; b < os.batch; ++b)
      for (std::size_t c = 0; c < os.channels; ++c)
        for (std::size_t y = 0; y < in_shape_.height; ++y)
          for (std::size_t x = 0; x < in_shape_.width; ++x) out.at(b, c, y / f, x / f) += in.at(b, c, y, x);
    for (auto& v : out.values()) v *= scale;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    const Shape os = gout.shape();
    const std::size_t f = in_shape_.height / os.height;
    const T scale = T{1} / static_cast<T>(f * f);
    Tensor<T> gin(in_shape_);
    for (std::size_t b = 0; b < in_shape_.batch; ++b)
      for (std::size_t c = 0; c < in_shape_.channels; ++c)
        for (std::size_t y = 0; y < in_shape_.height; ++y)
          for (std::size_t x = 0; x < in_shape_.width; ++x)
            gin.at(b, c, y, x) = gout.at(b, c, y / f, x / f) * scale;
    return gin;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<AvgPoolTo>(*this); }

 private:
  Shape in_shape_{};
};

// Per-batch statistics in training, running statistics (momentum 0.1) in evaluation.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(const LayerSpec& spec)
      : Layer<T>(spec),
        gamma_(Tensor<T>({1, spec.in_channels, 1, 1}, T{1})),
        beta_(Tensor<T>({1, spec.in_channels, 1, 1})),
        running_mean_(spec.in_channels, T{0}),
        running_var_(spec.in_channels, T{1}) {}

  Tensor<T> forward(const Tensor<T>& in, Mode mode) override {
    const Shape s = this->spec_.output_shape(in.shape());
    mode_ = mode;
    const std::size_t C = s.channels, HW = s.height * s.width, n = s.batch * HW;
    Tensor<T> out(s);
    xhat_ = Tensor<T>(s);
    inv_std_.assign(C, T{0});
    for (std::size_t c = 0; c < C; ++c) {
      T mean, var;
      if (mode == Mode::Train) {
        T sum = 0;
        for (std::size_t b = 0; b < s.batch; ++b) {
          const T* p = &in.at(b, c, 0, 0);
          for (std::size_t i = 0; i < HW; ++i) sum += p[i];
        }
        mean = sum / static_cast<T>(n);
        T sq = 0;
        for (std::size_t b = 0; b < s.batch; ++b) {
          const T* p = &in.at(b, c, 0, 0);
          for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        var = sq / static_cast<T>(n);
        const T unbiased = n > 1 ? sq / static_cast<T>(n - 1) : var;
        running_mean_[c] = (T{1} - kMomentum) * running_mean_[c] + kMomentum * mean;
        running_var_[c] = (T{1} - kMomentum) * running_var_[c] + kMomentum * unbiased;
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const T inv = T{1} / std::sqrt(var + kEps);
      inv_std_[c] = inv;
      const T g = gamma_.value[c], bt = beta_.value[c];
      for (std::size_t b = 0; b < s.batch; ++b) {
        const T* p = &in.at(b, c, 0, 0);
        T* xh = &xhat_.at(b, c, 0, 0);
        T* o = &out.at(b, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) {
          xh[i] = (p[i] - mean) * inv;
          o[i] = g * xh[i] + bt;
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& gout) override {
    const Shape s = gout.shape();
    const std::size_t C = s.channels, HW = s.height * s.width, n = s.batch * HW;
    Tensor<T> gin(s);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t b = 0; b < s.batch; ++b) {
        const T* g = &gout.at(b, c, 0, 0);
        const T* xh = &xhat_.at(b, c, 0, 0);
        for (std::size_t i = 0; i < HW; ++i) {
          sum_g += g[i];
          sum_gx += g[i] * xh[i];
        }
      }
      gamma_.grad[c] += sum_gx;
      beta_.grad[c] += sum_g;
      const T gm = gamma_.value[c];
      const T inv = inv_std_[c];
      for (std::size_t b = 0; b < s.batch; ++b) {
        const T* g = &gout.at(b, c, 0, 0);
        const T* xh = &xhat_.at(b, c, 0, 0);
        T* d = &gin.at(b, c, 0, 0);
        if (mode_ == Mode::Train) {
          const T nn = static_cast<T>(n);
          for (std::size_t i = 0; i < HW; ++i)
            d[i] = gm * inv / nn * (nn * g[i] - sum_g - xh[i] * sum_gx);
        } else {
          for (std::size_t i = 0; i < HW; ++i) d[i] = gm * inv * g[i];
        }
      }
    }
    return gin;
  }

  std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

 private:
  static constexpr T kMomentum = T(0.1);
  static constexpr T kEps = T(1e-5);
  Parameter<T> gamma_;
  Parameter<T> beta_;
  std::vector<T> running_mean_;
  std::vector<T> running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  Mode mode_ = Mode::Train;
};

}  // namespace

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case LayerKind::Conv:
      return std::make_unique<Conv2d<T>>(spec, rng);
    case LayerKind::Dense:
      return std::make_unique<Dense<T>>(spec, rng);
    case LayerKind::Relu:
      return std::make_unique<Relu<T>>(spec);
    case LayerKind::MaxPool:
      return std::make_unique<MaxPool2<T>>(spec);
    case LayerKind::AvgPool:
      return std::make_unique<AvgPoolTo<T>>(spec);
    case LayerKind::BatchNorm:
      return std::make_unique<BatchNorm<T>>(spec);
  }
  throw std::invalid_argument("make_layer: unknown layer kind");
}

template <typename T>
Tensor<T> layer_forward(const Tensor<T>& input, Layer<T>& layer, Mode mode) {
  return layer.forward(input, mode);
}

template <typename T>
Sequential<T>::Sequential(const std::vector<LayerSpec>& specs, Rng& rng) {
  for (const auto& s : specs) layers_.push_back(make_layer<T>(s, rng));
}

template <typename T>
Sequential<T>::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename T>
Sequential<T>& Sequential<T>::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential tmp(other);
    layers_ = std::move(tmp.layers_);
  }
  return *this;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& input, Mode mode) {
  Tensor<T> x = input;
  for (auto& l : layers_) x = l->forward(x, mode);
  return x;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_output) {
  Tensor<T> g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
std::vector<Parameter<T>*> Sequential<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& l : layers_)
    for (auto* p : l->parameters()) out.push_back(p);
  return out;
}

template <typename T>
void Sequential<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::uint64_t Sequential<T>::pattern() const {
  std::uint64_t h = 0;
  for (const auto& l : layers_) h = splitmix64(h ^ l->pattern());
  return h;
}

template <typename T>
std::vector<LayerSpec> Sequential<T>::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers_) out.push_back(l->spec());
  return out;
}

#define DGL_INSTANTIATE(T)                                                             \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerSpec&, Rng&);            \
  template Tensor<T> layer_forward<T>(const Tensor<T>&, Layer<T>&, Mode);              \
  template class Sequential<T>;

DGL_INSTANTIATE(float)
DGL_INSTANTIATE(double)
#undef DGL_INSTANTIATE

}  // namespace dgl
