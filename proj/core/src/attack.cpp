#include "eio/attack.hpp"

#include <cmath>
#include <sstream>

#include "eio/constraints.hpp"

namespace eio::attack {

Method parse_method(const std::string& s) {
  if (s == "pgd") return Method::pgd;
  if (s == "mdi2fgsm" || s == "mdi2" || s == "m-di2-fgsm") return Method::mdi2fgsm;
  if (s == "sgm") return Method::sgm;
  fail(ErrorCategory::config, "unknown attack method '" + s + "'");
}

Loss parse_loss(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return Loss::cross_entropy;
  if (s == "cw") return Loss::cw;
  fail(ErrorCategory::config, "unknown attack loss '" + s + "'");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::pgd: return "pgd";
    case Method::mdi2fgsm: return "mdi2fgsm";
    case Method::sgm: return "sgm";
  }
  return "?";
}

std::string loss_name(Loss l) { return l == Loss::cw ? "cw" : "ce"; }

void AttackSpec::validate() const {
  require(eps >= 0, ErrorCategory::config, "attack eps must be >= 0");
  require(steps >= 1, ErrorCategory::config, "attack steps must be >= 1");
  require(step_size >= 0, ErrorCategory::config, "attack step_size must be >= 0");
  require(random_starts >= 1, ErrorCategory::config, "attack random_starts must be >= 1");
  require(momentum >= 0, ErrorCategory::config, "attack momentum must be >= 0");
  require(transform_prob >= 0 && transform_prob <= 1, ErrorCategory::config, "transform_prob must lie in [0, 1]");
  require(resize_min > 0 && resize_min <= resize_max && resize_max <= 1, ErrorCategory::config,
          "resize range must satisfy 0 < min <= max <= 1");
  require(sgm_gamma >= 0 && sgm_gamma <= 1, ErrorCategory::config, "sgm_gamma must lie in [0, 1]");
}

std::string AttackSpec::describe() const {
  std::ostringstream os;
  os << method_name(method) << '/' << loss_name(loss) << "/eps=" << eps << "/steps=" << steps << "/step=" << step_size
     << "/starts=" << random_starts << "/mu=" << momentum;
  if (method == Method::pgd) os << "/rand_init=" << random_init;
  if (loss == Loss::cw) os << "/kappa=" << kappa;
  if (method == Method::mdi2fgsm) os << "/p=" << transform_prob << "/resize=" << resize_min << ":" << resize_max;
  if (method == Method::sgm) os << "/gamma=" << sgm_gamma;
  return os.str();
}

template <typename T>
double cw_margin_loss(const Tensor<T>& logits, std::span<const int> y, double kappa, Tensor<T>* grad) {
  return nn::cw_margin(logits, y, kappa, grad);
}

ResizePad ResizePad::sample(int h, int w, double lo, double hi, double prob, Rng& rng) {
  ResizePad t;
  t.in_h = t.size_h = h;
  t.in_w = t.size_w = w;
  // The draw pattern is fixed (3 draws) so the stream stays aligned.
  const double u = rng.uniform01();
  const int rmin = static_cast<int>(std::ceil(lo * h - 1e-9));
  const int rmax = std::max(rmin, static_cast<int>(std::floor(hi * h + 1e-9)));
  const int r = rmin + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(rmax - rmin + 1)));
  const std::uint64_t off = rng.next_u64();
  if (u >= prob) return t;
  const int rw = std::max(1, static_cast<int>(std::lround(static_cast<double>(r) * w / h)));
  t.size_h = r;
  t.size_w = std::min(rw, w);
  t.top = static_cast<int>(off % static_cast<std::uint64_t>(h - t.size_h + 1));
  t.left = static_cast<int>((off >> 32) % static_cast<std::uint64_t>(w - t.size_w + 1));
  t.identity = t.size_h == h && t.size_w == w;
  return t;
}

template <typename T>
Tensor<T> ResizePad::forward(const Tensor<T>& x) const {
  if (identity) return x;
  Tensor<T> out(x.shape());
  const int planes = static_cast<int>(x.size() / static_cast<std::size_t>(in_h * in_w));
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * in_h * in_w;
    T* dst = out.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (int i = 0; i < size_h; ++i) {
      const int si = i * in_h / size_h;
      for (int j = 0; j < size_w; ++j) dst[(top + i) * in_w + left + j] = src[si * in_w + j * in_w / size_w];
    }
  }
  return out;
}

template <typename T>
Tensor<T> ResizePad::backward(const Tensor<T>& g) const {
  if (identity) return g;
  Tensor<T> out(g.shape());
  const int planes = static_cast<int>(g.size() / static_cast<std::size_t>(in_h * in_w));
  for (int p = 0; p < planes; ++p) {
    const T* src = g.data() + static_cast<std::size_t>(p) * in_h * in_w;
    T* dst = out.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (int i = 0; i < size_h; ++i) {
      const int si = i * in_h / size_h;
      for (int j = 0; j < size_w; ++j) dst[si * in_w + j * in_w / size_w] += src[(top + i) * in_w + left + j];
    }
  }
  return out;
}

namespace {

template <typename T>
LogitGradFn<T> ascent_grad(Loss loss, std::span<const int> y, double kappa) {
  std::vector<int> labels(y.begin(), y.end());
  if (loss == Loss::cross_entropy)
    return [labels](const Tensor<T>& z) {
      Tensor<T> g;
      nn::cross_entropy(z, labels, &g);
      return g;
    };
  return [labels, kappa](const Tensor<T>& z) {
    Tensor<T> g;
    nn::cw_margin(z, labels, kappa, &g);
    for (auto& v : g.values()) v = -v;  // ascend -margin
    return g;
  };
}

template <typename T>
Tensor<T> run_start(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackSpec& spec,
                    Method method, Rng& rng) {
  const T eps = static_cast<T>(spec.eps);
  Tensor<T> z = x;
  if (spec.eps == 0) return z;
  if (method == Method::pgd && spec.random_init) {
    for (auto& v : z.values()) v += static_cast<T>(rng.uniform(-spec.eps, spec.eps));
    project_linf_box<T>(z.values(), x.values(), eps);
  }
  const LogitGradFn<T> dloss = ascent_grad<T>(spec.loss, y, spec.kappa);
  const double rscale = method == Method::sgm ? spec.sgm_gamma : 1.0;
  const std::size_t rows = static_cast<std::size_t>(x.dim(0));
  const std::size_t stride = x.stride0();
  const int h = x.rank() == 4 ? x.dim(2) : 1, w = x.rank() == 4 ? x.dim(3) : 1;
  Tensor<T> velocity(x.shape());
  const T alpha = static_cast<T>(spec.step_size);
  for (int step = 0; step < spec.steps; ++step) {
    Tensor<T> g;
    if (method == Method::mdi2fgsm && x.rank() == 4) {
      const ResizePad tr = ResizePad::sample(h, w, spec.resize_min, spec.resize_max, spec.transform_prob, rng);
      g = tr.backward(model.input_gradient(tr.forward(z), dloss, 1.0));
    } else {
      g = model.input_gradient(z, dloss, rscale);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      T* gv = g.data() + r * stride;
      T* vv = velocity.data() + r * stride;
      double l1 = 0;
      for (std::size_t k = 0; k < stride; ++k) l1 += std::abs(static_cast<double>(gv[k]));
      const T inv = l1 > 0 ? static_cast<T>(1.0 / l1) : T{0};
      for (std::size_t k = 0; k < stride; ++k) vv[k] = static_cast<T>(spec.momentum) * vv[k] + gv[k] * inv;
    }
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += alpha * sign_of(velocity[i]);
    project_linf_box<T>(z.values(), x.values(), eps);
  }
  return z;
}

}  // namespace

template <typename T>
AttackResult<T> attack(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackSpec& spec,
                       Rng& rng) {
  spec.validate();
  require(x.rank() >= 2 && static_cast<std::size_t>(x.dim(0)) == y.size(), ErrorCategory::shape,
          "attack: batch and label counts differ");
  AttackResult<T> out;
  Method method = spec.method;
  if (method == Method::sgm && !model.has_skip_connections()) {
    method = Method::pgd;
    out.fell_back = true;
  }
  for (int s = 0; s < spec.random_starts; ++s) out.starts.push_back(run_start(model, x, y, spec, method, rng));
  return out;
}

template <typename T>
Tensor<T> worst_case(const Classifier<T>& model, const AttackResult<T>& r, std::span<const int> y) {
  require(!r.starts.empty(), ErrorCategory::validation, "worst_case: no adversarial batches");
  Tensor<T> out = r.starts.back();
  const std::size_t stride = out.stride0();
  std::vector<char> chosen(y.size(), 0);
  for (const auto& cand : r.starts) {
    const std::vector<int> pred = nn::argmax_rows(model.logits(cand));
    for (std::size_t i = 0; i < y.size(); ++i)
      if (!chosen[i] && pred[i] != y[i]) {
        chosen[i] = 1;
        std::copy_n(cand.data() + i * stride, stride, out.data() + i * stride);
      }
  }
  return out;
}

#define EIO_ATTACK_INSTANTIATE(T)                                                                                      \
  template AttackResult<T> attack<T>(const Classifier<T>&, const Tensor<T>&, std::span<const int>, const AttackSpec&, \
                                     Rng&);                                                                          \
  template Tensor<T> worst_case<T>(const Classifier<T>&, const AttackResult<T>&, std::span<const int>);             \
  template double cw_margin_loss<T>(const Tensor<T>&, std::span<const int>, double, Tensor<T>*);                    \
  template Tensor<T> ResizePad::forward<T>(const Tensor<T>&) const;                                                  \
  template Tensor<T> ResizePad::backward<T>(const Tensor<T>&) const;

EIO_ATTACK_INSTANTIATE(float)
EIO_ATTACK_INSTANTIATE(double)

}  // namespace eio::attack
