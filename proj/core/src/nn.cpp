#include "eio/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace eio::nn {

namespace {

using arch::ActivationFn;
using arch::NodeKind;
using arch::PoolType;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

constexpr std::size_t kIm2colBudget = 1u << 22;  // elements per im2col group

std::size_t idx(int i) { return static_cast<std::size_t>(i); }

struct ConvGeom {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
  int patch() const { return ci * k * k; }
  int plane() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeom conv_geom(const arch::LayerNode& node, const Shape& in) {
  return {in[0], in[1], in[2], in[3], node.out_channels, node.kernel, node.stride, node.pad, node.out_shape[1], node.out_shape[2]};
}

// col layout: [patch, group * plane], image g occupies columns [g*plane, (g+1)*plane).
template <typename T>
void im2col(const ConvGeom& c, const T* img, T* col, int group, int g) {
  const std::size_t row_stride = static_cast<std::size_t>(group) * c.plane();
  const std::size_t off = static_cast<std::size_t>(g) * c.plane();
  for (int ch = 0; ch < c.ci; ++ch) {
    const T* src = img + static_cast<std::size_t>(ch) * c.h * c.w;
    for (int ky = 0; ky < c.k; ++ky) {
      for (int kx = 0; kx < c.k; ++kx) {
        T* dst = col + (static_cast<std::size_t>((ch * c.k + ky) * c.k + kx)) * row_stride + off;
        for (int oy = 0; oy < c.ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          T* drow = dst + static_cast<std::size_t>(oy) * c.wo;
          if (iy < 0 || iy >= c.h) {
            std::fill_n(drow, c.wo, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * c.w;
          if (c.stride == 1) {
            const int shift = kx - c.pad;
            for (int ox = 0; ox < c.wo; ++ox) {
              const int ix = ox + shift;
              drow[ox] = (ix >= 0 && ix < c.w) ? srow[ix] : T{0};
            }
          } else {
            for (int ox = 0; ox < c.wo; ++ox) {
              const int ix = ox * c.stride - c.pad + kx;
              drow[ox] = (ix >= 0 && ix < c.w) ? srow[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& c, const T* col, T* img, int group, int g) {
  const std::size_t row_stride = static_cast<std::size_t>(group) * c.plane();
  const std::size_t off = static_cast<std::size_t>(g) * c.plane();
  for (int ch = 0; ch < c.ci; ++ch) {
    T* dst = img + static_cast<std::size_t>(ch) * c.h * c.w;
    for (int ky = 0; ky < c.k; ++ky) {
      for (int kx = 0; kx < c.k; ++kx) {
        const T* src = col + (static_cast<std::size_t>((ch * c.k + ky) * c.k + kx)) * row_stride + off;
        for (int oy = 0; oy < c.ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          if (iy < 0 || iy >= c.h) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * c.w;
          const T* srow = src + static_cast<std::size_t>(oy) * c.wo;
          for (int ox = 0; ox < c.wo; ++ox) {
            const int ix = ox * c.stride - c.pad + kx;
            if (ix >= 0 && ix < c.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

int group_size(const ConvGeom& c) {
  const std::size_t per_image = static_cast<std::size_t>(c.patch()) * c.plane();
  return static_cast<int>(std::clamp<std::size_t>(kIm2colBudget / std::max<std::size_t>(per_image, 1), 1, static_cast<std::size_t>(c.n)));
}

template <typename T>
void conv_forward(const ConvGeom& c, const T* x, const LayerParams<T>& p, T* y) {
  const int group = group_size(c);
  std::vector<T> col(static_cast<std::size_t>(c.patch()) * group * c.plane());
  std::vector<T> out(static_cast<std::size_t>(c.co) * group * c.plane());
  ConstMapMat<T> w(p.weight.value.data(), c.co, c.patch());
  const std::size_t in_img = static_cast<std::size_t>(c.ci) * c.h * c.w;
  const std::size_t out_img = static_cast<std::size_t>(c.co) * c.plane();
  for (int n0 = 0; n0 < c.n; n0 += group) {
    const int gcount = std::min(group, c.n - n0);
    const int cols = gcount * c.plane();
    if (c.pointwise() && gcount == 1) {
      ConstMapMat<T> xin(x + static_cast<std::size_t>(n0) * in_img, c.ci, c.plane());
      MapMat<T> yo(y + static_cast<std::size_t>(n0) * out_img, c.co, c.plane());
      yo.noalias() = w * xin;
    } else {
      for (int g = 0; g < gcount; ++g) im2col(c, x + static_cast<std::size_t>(n0 + g) * in_img, col.data(), gcount, g);
      ConstMapMat<T> cm(col.data(), c.patch(), cols);
      MapMat<T> om(out.data(), c.co, cols);
      om.noalias() = w * cm;
      for (int g = 0; g < gcount; ++g)
        for (int o = 0; o < c.co; ++o)
          std::copy_n(out.data() + static_cast<std::size_t>(o) * cols + static_cast<std::size_t>(g) * c.plane(), c.plane(),
                      y + static_cast<std::size_t>(n0 + g) * out_img + static_cast<std::size_t>(o) * c.plane());
    }
  }
  if (p.has_bias) {
    for (int n = 0; n < c.n; ++n)
      for (int o = 0; o < c.co; ++o) {
        T* dst = y + static_cast<std::size_t>(n) * out_img + static_cast<std::size_t>(o) * c.plane();
        const T b = p.bias.value[idx(o)];
        for (int i = 0; i < c.plane(); ++i) dst[i] += b;
      }
  }
}

template <typename T>
void conv_backward(const ConvGeom& c, const T* x, const T* dy, LayerParams<T>& p, T* dx, bool param_grads) {
  const int group = group_size(c);
  const std::size_t in_img = static_cast<std::size_t>(c.ci) * c.h * c.w;
  const std::size_t out_img = static_cast<std::size_t>(c.co) * c.plane();
  std::vector<T> col(static_cast<std::size_t>(c.patch()) * group * c.plane());
  std::vector<T> dout(static_cast<std::size_t>(c.co) * group * c.plane());
  RowMat<T> dw;
  if (param_grads) dw = RowMat<T>::Zero(c.co, c.patch());
  ConstMapMat<T> w(p.weight.value.data(), c.co, c.patch());
  for (int n0 = 0; n0 < c.n; n0 += group) {
    const int gcount = std::min(group, c.n - n0);
    const int cols = gcount * c.plane();
    for (int g = 0; g < gcount; ++g)
      for (int o = 0; o < c.co; ++o)
        std::copy_n(dy + static_cast<std::size_t>(n0 + g) * out_img + static_cast<std::size_t>(o) * c.plane(), c.plane(),
                    dout.data() + static_cast<std::size_t>(o) * cols + static_cast<std::size_t>(g) * c.plane());
    ConstMapMat<T> dm(dout.data(), c.co, cols);
    if (param_grads) {
      for (int g = 0; g < gcount; ++g) im2col(c, x + static_cast<std::size_t>(n0 + g) * in_img, col.data(), gcount, g);
      ConstMapMat<T> cm(col.data(), c.patch(), cols);
      dw.noalias() += dm * cm.transpose();
    }
    if (dx) {
      MapMat<T> dcol(col.data(), c.patch(), cols);
      dcol.noalias() = w.transpose() * dm;
      for (int g = 0; g < gcount; ++g) col2im(c, col.data(), dx + static_cast<std::size_t>(n0 + g) * in_img, gcount, g);
    }
  }
  if (param_grads) {
    p.weight.accumulate(dw.data());
    if (p.has_bias) {
      std::vector<T> db(idx(c.co), T{0});
      for (int n = 0; n < c.n; ++n)
        for (int o = 0; o < c.co; ++o) {
          const T* src = dy + static_cast<std::size_t>(n) * out_img + static_cast<std::size_t>(o) * c.plane();
          T s{0};
          for (int i = 0; i < c.plane(); ++i) s += src[i];
          db[idx(o)] += s;
        }
      p.bias.accumulate(db.data());
    }
  }
}

}  // namespace

template <typename T>
template <typename U>
LayerParams<U> LayerParams<T>::cast() const {
  LayerParams<U> out;
  out.has_weight = has_weight;
  out.has_bias = has_bias;
  out.has_bn = has_bn;
  out.weight.value = weight.value.template cast<U>();
  out.bias.value = bias.value.template cast<U>();
  out.bn_weight.value = bn_weight.value.template cast<U>();
  out.bn_bias.value = bn_bias.value.template cast<U>();
  out.bn_mean = bn_mean.template cast<U>();
  out.bn_var = bn_var.template cast<U>();
  return out;
}

template <typename T>
LayerParams<T> init_layer_params(const arch::ArchGraph& g, int node, Rng& rng) {
  const auto& n = g.node(node);
  LayerParams<T> p;
  const Shape& in = g.node(g.inputs(node).at(0)).out_shape;
  auto init_bn = [&p](int channels) {
    p.has_bn = true;
    p.bn_weight.value = Tensor<T>({channels}, T{1});
    p.bn_bias.value = Tensor<T>({channels}, T{0});
    p.bn_mean = Tensor<T>({channels}, T{0});
    p.bn_var = Tensor<T>({channels}, T{1});
  };
  if (n.kind == NodeKind::conv) {
    const int fan_in = in.at(0) * n.kernel * n.kernel;
    p.has_weight = true;
    p.weight.value = Tensor<T>({n.out_channels, fan_in});
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : p.weight.value.values()) v = static_cast<T>(rng.normal() * std);
    p.has_bias = n.bias;
    if (n.bias) p.bias.value = Tensor<T>({n.out_channels}, T{0});
    if (g.fused_bn(node) >= 0) init_bn(n.out_channels);
  } else if (n.kind == NodeKind::linear) {
    const int fan_in = static_cast<int>(shape_size(in));
    p.has_weight = true;
    p.weight.value = Tensor<T>({n.out_features, fan_in});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.weight.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    p.has_bias = n.bias;
    if (n.bias) {
      p.bias.value = Tensor<T>({n.out_features});
      for (auto& v : p.bias.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  } else if (n.kind == NodeKind::batchnorm) {
    init_bn(in.at(0));
  } else {
    fail(ErrorCategory::validation, "node '" + n.id + "' has no parameters");
  }
  return p;
}

template <typename T>
Tensor<T>& Executor<T>::grad_slot(int node) {
  auto& gslot = grads_[idx(node)];
  if (gslot.shape() != acts_[idx(node)].shape()) gslot = Tensor<T>(acts_[idx(node)].shape());
  return gslot;
}

template <typename T>
void Executor<T>::forward(const Binding<T>& b, const Tensor<T>& x, Mode mode, int last) {
  const auto& g = *g_;
  require(static_cast<int>(b.size()) == g.size(), ErrorCategory::shape, "binding size does not match graph");
  Shape expect = g.input_shape();
  expect.insert(expect.begin(), x.rank() > 0 ? x.dim(0) : 0);
  require(x.shape() == expect, ErrorCategory::shape,
          "input shape " + shape_string(x.shape()) + " does not match architecture " + shape_string(expect));
  mode_ = mode;
  last_ = last < 0 ? g.size() - 1 : last;
  require(last_ < g.size(), ErrorCategory::validation, "forward: stop node out of range");
  acts_.resize(idx(g.size()));
  grads_.resize(idx(g.size()));
  bn_xhat_.resize(idx(g.size()));
  bn_invstd_.resize(idx(g.size()));
  argmax_.resize(idx(g.size()));
  acts_[idx(g.input_node())] = x;
  for (int i = 0; i <= last_; ++i)
    if (i != g.input_node()) forward_node(i, b);
}

template <typename T>
void Executor<T>::forward_node(int i, const Binding<T>& b) {
  const auto& g = *g_;
  const auto& node = g.node(i);
  const auto& ins = g.inputs(i);
  const Tensor<T>& in = acts_[idx(ins.at(0))];
  const int batch = in.dim(0);
  Shape out_shape = node.out_shape;
  out_shape.insert(out_shape.begin(), batch);
  Tensor<T>& out = acts_[idx(i)];

  switch (node.kind) {
    case NodeKind::conv: {
      const LayerParams<T>* p = b[idx(i)];
      require(p != nullptr, ErrorCategory::validation, "conv '" + node.id + "' is unbound");
      p->executions.bump();
      out = Tensor<T>(out_shape);
      conv_forward(conv_geom(node, in.shape()), in.data(), *p, out.data());
      break;
    }
    case NodeKind::batchnorm: {
      require(b[idx(i)] != nullptr && b[idx(i)]->has_bn, ErrorCategory::validation, "batchnorm '" + node.id + "' is unbound");
      LayerParams<T>& p = *b[idx(i)];
      if (g.fused_owner(i) < 0) p.executions.bump();
      const int channels = in.dim(1);
      const std::size_t plane = in.stride0() / static_cast<std::size_t>(channels);
      const std::size_t count = plane * static_cast<std::size_t>(batch);
      out = Tensor<T>(in.shape());
      auto& xhat = bn_xhat_[idx(i)];
      auto& invstd = bn_invstd_[idx(i)];
      xhat = Tensor<T>(in.shape());
      invstd.assign(idx(channels), T{0});
      for (int ch = 0; ch < channels; ++ch) {
        T mean, var;
        if (mode_ == Mode::train) {
          double s = 0, ss = 0;
          for (int n = 0; n < batch; ++n) {
            const T* src = in.data() + (static_cast<std::size_t>(n) * channels + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) s += src[k];
          }
          const double m = s / static_cast<double>(count);
          for (int n = 0; n < batch; ++n) {
            const T* src = in.data() + (static_cast<std::size_t>(n) * channels + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) ss += (src[k] - m) * (src[k] - m);
          }
          const double v = ss / static_cast<double>(count);
          mean = static_cast<T>(m);
          var = static_cast<T>(v);
          const double mom = node.bn_momentum;
          const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
          p.bn_mean[idx(ch)] = static_cast<T>((1 - mom) * p.bn_mean[idx(ch)] + mom * m);
          p.bn_var[idx(ch)] = static_cast<T>((1 - mom) * p.bn_var[idx(ch)] + mom * unbiased);
        } else {
          mean = p.bn_mean[idx(ch)];
          var = p.bn_var[idx(ch)];
        }
        const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + node.bn_eps));
        invstd[idx(ch)] = is;
        const T gamma = p.bn_weight.value[idx(ch)];
        const T beta = p.bn_bias.value[idx(ch)];
        for (int n = 0; n < batch; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * channels + ch) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            const T xh = (in[off + k] - mean) * is;
            xhat[off + k] = xh;
            out[off + k] = gamma * xh + beta;
          }
        }
      }
      break;
    }
    case NodeKind::linear: {
      const LayerParams<T>* p = b[idx(i)];
      require(p != nullptr, ErrorCategory::validation, "linear '" + node.id + "' is unbound");
      p->executions.bump();
      const int fan_in = static_cast<int>(in.stride0());
      out = Tensor<T>(out_shape);
      ConstMapMat<T> xm(in.data(), batch, fan_in);
      ConstMapMat<T> w(p->weight.value.data(), node.out_features, fan_in);
      MapMat<T> ym(out.data(), batch, node.out_features);
      ym.noalias() = xm * w.transpose();
      if (p->has_bias)
        for (int n = 0; n < batch; ++n)
          for (int o = 0; o < node.out_features; ++o) ym(n, o) += p->bias.value[idx(o)];
      break;
    }
    case NodeKind::activation: {
      out = Tensor<T>(in.shape());
      if (node.fn == ActivationFn::relu) {
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > T{0} ? in[k] : T{0};
      } else {
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = std::tanh(in[k]);
      }
      break;
    }
    case NodeKind::pool: {
      const int channels = in.dim(1), h = in.dim(2), w = in.dim(3);
      out = Tensor<T>(out_shape);
      if (node.pool == PoolType::global_avg) {
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
        for (int n = 0; n < batch; ++n)
          for (int ch = 0; ch < channels; ++ch) {
            const T* src = in.data() + (static_cast<std::size_t>(n) * channels + ch) * plane;
            T s{0};
            for (std::size_t k = 0; k < plane; ++k) s += src[k];
            out[static_cast<std::size_t>(n) * channels + ch] = s * inv;
          }
        break;
      }
      const int ho = node.out_shape[1], wo = node.out_shape[2];
      auto& am = argmax_[idx(i)];
      if (node.pool == PoolType::max) am.assign(out.size(), 0);
      const T inv = static_cast<T>(1.0 / (node.kernel * node.kernel));
      for (int n = 0; n < batch; ++n)
        for (int ch = 0; ch < channels; ++ch) {
          const std::size_t ibase = (static_cast<std::size_t>(n) * channels + ch) * h * w;
          const std::size_t obase = (static_cast<std::size_t>(n) * channels + ch) * ho * wo;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              T best = -std::numeric_limits<T>::infinity();
              std::uint32_t arg = 0;
              T sum{0};
              for (int ky = 0; ky < node.kernel; ++ky)
                for (int kx = 0; kx < node.kernel; ++kx) {
                  const std::uint32_t at = static_cast<std::uint32_t>((oy * node.stride + ky) * w + ox * node.stride + kx);
                  const T v = in[ibase + at];
                  sum += v;
                  if (v > best) {
                    best = v;
                    arg = at;
                  }
                }
              const std::size_t o = obase + static_cast<std::size_t>(oy) * wo + ox;
              if (node.pool == PoolType::max) {
                out[o] = best;
                am[o] = arg;
              } else {
                out[o] = sum * inv;
              }
            }
        }
      break;
    }
    case NodeKind::add: {
      out = in;
      for (std::size_t j = 1; j < ins.size(); ++j) {
        const Tensor<T>& other = acts_[idx(ins[j])];
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += other[k];
      }
      break;
    }
    case NodeKind::output:
      out = in;
      out.reshape(out_shape);
      break;
    case NodeKind::input:
      break;
  }
}

template <typename T>
Tensor<T> Executor<T>::backward(const Binding<T>& b, std::vector<std::pair<int, Tensor<T>>> seeds, const BackwardOptions& opt) {
  const auto& g = *g_;
  int start = -1;
  for (auto& gslot : grads_) gslot = Tensor<T>();
  for (auto& [node, grad] : seeds) {
    require(node >= 0 && node <= last_, ErrorCategory::validation, "backward seed at a node that was not computed");
    require(grad.shape() == acts_[idx(node)].shape(), ErrorCategory::shape, "backward seed shape mismatch");
    Tensor<T>& slot = grad_slot(node);
    for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += grad[k];
    start = std::max(start, node);
  }
  for (int i = start; i >= 0; --i) {
    if (i == g.input_node()) continue;
    if (grads_[idx(i)].empty()) continue;
    backward_node(i, b, opt);
    grads_[idx(i)] = Tensor<T>();
  }
  Tensor<T>& dx = grads_[idx(g.input_node())];
  if (dx.empty()) dx = Tensor<T>(acts_[idx(g.input_node())].shape());
  return std::move(dx);
}

template <typename T>
void Executor<T>::backward_node(int i, const Binding<T>& b, const BackwardOptions& opt) {
  const auto& g = *g_;
  const auto& node = g.node(i);
  const auto& ins = g.inputs(i);
  const int src = ins.at(0);
  const Tensor<T>& in = acts_[idx(src)];
  const Tensor<T>& dy = grads_[idx(i)];
  const int batch = in.dim(0);

  switch (node.kind) {
    case NodeKind::conv: {
      LayerParams<T>& p = *b[idx(i)];
      Tensor<T>& dx = grad_slot(src);
      conv_backward(conv_geom(node, in.shape()), in.data(), dy.data(), p, dx.data(), opt.param_grads);
      break;
    }
    case NodeKind::batchnorm: {
      LayerParams<T>& p = *b[idx(i)];
      const int channels = in.dim(1);
      const std::size_t plane = in.stride0() / static_cast<std::size_t>(channels);
      const double count = static_cast<double>(plane) * batch;
      const auto& xhat = bn_xhat_[idx(i)];
      const auto& invstd = bn_invstd_[idx(i)];
      Tensor<T>& dx = grad_slot(src);
      std::vector<T> dgamma(idx(channels)), dbeta(idx(channels));
      for (int ch = 0; ch < channels; ++ch) {
        double sum_dy = 0, sum_dy_xh = 0;
        for (int n = 0; n < batch; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * channels + ch) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            sum_dy += dy[off + k];
            sum_dy_xh += static_cast<double>(dy[off + k]) * xhat[off + k];
          }
        }
        dgamma[idx(ch)] = static_cast<T>(sum_dy_xh);
        dbeta[idx(ch)] = static_cast<T>(sum_dy);
        const double gamma = p.bn_weight.value[idx(ch)];
        const double is = invstd[idx(ch)];
        for (int n = 0; n < batch; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * channels + ch) * plane;
          if (mode_ == Mode::train) {
            const double mdy = sum_dy / count, mdyxh = sum_dy_xh / count;
            for (std::size_t k = 0; k < plane; ++k)
              dx[off + k] += static_cast<T>(gamma * is * (dy[off + k] - mdy - xhat[off + k] * mdyxh));
          } else {
            for (std::size_t k = 0; k < plane; ++k) dx[off + k] += static_cast<T>(gamma * is * dy[off + k]);
          }
        }
      }
      if (opt.param_grads) {
        p.bn_weight.accumulate(dgamma.data());
        p.bn_bias.accumulate(dbeta.data());
      }
      break;
    }
    case NodeKind::linear: {
      LayerParams<T>& p = *b[idx(i)];
      const int fan_in = static_cast<int>(in.stride0());
      ConstMapMat<T> dym(dy.data(), batch, node.out_features);
      ConstMapMat<T> w(p.weight.value.data(), node.out_features, fan_in);
      Tensor<T>& dx = grad_slot(src);
      MapMat<T> dxm(dx.data(), batch, fan_in);
      dxm.noalias() += dym * w;
      if (opt.param_grads) {
        ConstMapMat<T> xm(in.data(), batch, fan_in);
        RowMat<T> dw = dym.transpose() * xm;
        p.weight.accumulate(dw.data());
        if (p.has_bias) {
          std::vector<T> db(idx(node.out_features), T{0});
          for (int n = 0; n < batch; ++n)
            for (int o = 0; o < node.out_features; ++o) db[idx(o)] += dym(n, o);
          p.bias.accumulate(db.data());
        }
      }
      break;
    }
    case NodeKind::activation: {
      const Tensor<T>& out = acts_[idx(i)];
      Tensor<T>& dx = grad_slot(src);
      if (node.fn == ActivationFn::relu) {
        for (std::size_t k = 0; k < dy.size(); ++k)
          if (out[k] > T{0}) dx[k] += dy[k];
      } else {
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k] * (T{1} - out[k] * out[k]);
      }
      break;
    }
    case NodeKind::pool: {
      Tensor<T>& dx = grad_slot(src);
      const int channels = in.dim(1), h = in.dim(2), w = in.dim(3);
      if (node.pool == PoolType::global_avg) {
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
        for (int n = 0; n < batch; ++n)
          for (int ch = 0; ch < channels; ++ch) {
            T* dst = dx.data() + (static_cast<std::size_t>(n) * channels + ch) * plane;
            const T v = dy[static_cast<std::size_t>(n) * channels + ch] * inv;
            for (std::size_t k = 0; k < plane; ++k) dst[k] += v;
          }
        break;
      }
      const int ho = node.out_shape[1], wo = node.out_shape[2];
      const auto& am = argmax_[idx(i)];
      const T inv = static_cast<T>(1.0 / (node.kernel * node.kernel));
      for (int n = 0; n < batch; ++n)
        for (int ch = 0; ch < channels; ++ch) {
          const std::size_t ibase = (static_cast<std::size_t>(n) * channels + ch) * h * w;
          const std::size_t obase = (static_cast<std::size_t>(n) * channels + ch) * ho * wo;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const std::size_t o = obase + static_cast<std::size_t>(oy) * wo + ox;
              if (node.pool == PoolType::max) {
                dx[ibase + am[o]] += dy[o];
              } else {
                for (int ky = 0; ky < node.kernel; ++ky)
                  for (int kx = 0; kx < node.kernel; ++kx)
                    dx[ibase + static_cast<std::size_t>((oy * node.stride + ky) * w + ox * node.stride + kx)] += dy[o] * inv;
              }
            }
        }
      break;
    }
    case NodeKind::add: {
      const int shortcut = node.skip.empty() ? -1 : g.index_of(node.skip);
      for (int j : ins) {
        Tensor<T>& dx = grad_slot(j);
        const T scale = (shortcut >= 0 && j != shortcut) ? static_cast<T>(opt.residual_scale) : T{1};
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += scale * dy[k];
      }
      break;
    }
    case NodeKind::output: {
      Tensor<T>& dx = grad_slot(src);
      for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k];
      break;
    }
    case NodeKind::input:
      break;
  }
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const int batch = logits.dim(0);
  const std::size_t classes = logits.stride0();
  for (int n = 0; n < batch; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * classes;
    T* p = out.data() + static_cast<std::size_t>(n) * classes;
    const T m = *std::max_element(z, z + classes);
    double s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(static_cast<double>(z[c] - m));
    for (std::size_t c = 0; c < classes; ++c) p[c] = static_cast<T>(std::exp(static_cast<double>(z[c] - m)) / s);
  }
  return out;
}

template <typename T>
std::vector<double> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const int> labels) {
  const int batch = logits.dim(0);
  const std::size_t classes = logits.stride0();
  require(labels.size() == static_cast<std::size_t>(batch), ErrorCategory::shape, "label count does not match batch");
  std::vector<double> out(idx(batch));
  for (int n = 0; n < batch; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * classes;
    const double m = *std::max_element(z, z + classes);
    double s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(z[c] - m);
    out[idx(n)] = std::log(s) + m - z[labels[idx(n)]];
  }
  return out;
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* grad) {
  const int batch = logits.dim(0);
  const std::size_t classes = logits.stride0();
  require(labels.size() == static_cast<std::size_t>(batch), ErrorCategory::shape, "label count does not match batch");
  const auto per = cross_entropy_per_sample(logits, labels);
  double total = 0;
  for (double v : per) total += v;
  if (grad) {
    *grad = softmax_rows(logits);
    const T inv = static_cast<T>(1.0 / batch);
    for (int n = 0; n < batch; ++n) {
      T* gr = grad->data() + static_cast<std::size_t>(n) * classes;
      gr[labels[idx(n)]] -= T{1};
      for (std::size_t c = 0; c < classes; ++c) gr[c] *= inv;
    }
  }
  return total / batch;
}

template <typename T>
double cw_margin(const Tensor<T>& logits, std::span<const int> labels, double kappa, Tensor<T>* grad) {
  const int batch = logits.dim(0);
  const std::size_t classes = logits.stride0();
  require(classes >= 2, ErrorCategory::shape, "C&W margin needs at least two classes");
  require(labels.size() == static_cast<std::size_t>(batch), ErrorCategory::shape, "label count does not match batch");
  if (grad) *grad = Tensor<T>(logits.shape());
  double total = 0;
  for (int n = 0; n < batch; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * classes;
    const std::size_t y = static_cast<std::size_t>(labels[idx(n)]);
    std::size_t other = y == 0 ? 1 : 0;
    for (std::size_t c = 0; c < classes; ++c)
      if (c != y && z[c] > z[other]) other = c;
    const double margin = static_cast<double>(z[y]) - z[other];
    const bool active = margin > -kappa;
    total += active ? margin : -kappa;
    if (grad && active) {
      T* gr = grad->data() + static_cast<std::size_t>(n) * classes;
      gr[y] += static_cast<T>(1.0 / batch);
      gr[other] -= static_cast<T>(1.0 / batch);
    }
  }
  return total / batch;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const int batch = logits.dim(0);
  const std::size_t classes = logits.stride0();
  std::vector<int> out(idx(batch));
  for (int n = 0; n < batch; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * classes;
    out[idx(n)] = static_cast<int>(std::max_element(z, z + classes) - z);
  }
  return out;
}

#define EIO_INSTANTIATE(T)                                                                                     \
  template struct LayerParams<T>;                                                                              \
  template LayerParams<float> LayerParams<T>::cast<float>() const;                                             \
  template LayerParams<double> LayerParams<T>::cast<double>() const;                                           \
  template LayerParams<T> init_layer_params<T>(const arch::ArchGraph&, int, Rng&);                             \
  template class Executor<T>;                                                                                  \
  template double cross_entropy<T>(const Tensor<T>&, std::span<const int>, Tensor<T>*);                        \
  template std::vector<double> cross_entropy_per_sample<T>(const Tensor<T>&, std::span<const int>);            \
  template double cw_margin<T>(const Tensor<T>&, std::span<const int>, double, Tensor<T>*);                    \
  template std::vector<int> argmax_rows<T>(const Tensor<T>&);                                                  \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);

EIO_INSTANTIATE(float)
EIO_INSTANTIATE(double)

}  // namespace eio::nn
