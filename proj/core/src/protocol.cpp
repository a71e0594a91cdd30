#include "eio/protocol.hpp"

#include <algorithm>
#include <cstring>

namespace eio::eval {

ProtocolConfig ProtocolConfig::blackbox() { return ProtocolConfig{}; }

ProtocolConfig ProtocolConfig::whitebox() {
  ProtocolConfig c;
  c.steps = 50;
  c.pgd_starts = 5;
  c.mdi2fgsm = false;
  c.sgm = false;
  c.losses = {attack::Loss::cross_entropy};
  return c;
}

void ProtocolConfig::validate() const {
  require(steps >= 1, ErrorCategory::config, "protocol steps must be >= 1");
  require(step_divisor > 0, ErrorCategory::config, "step_divisor must be > 0");
  require(pgd_starts >= 0, ErrorCategory::config, "pgd_starts must be >= 0");
  require(!losses.empty(), ErrorCategory::config, "protocol needs at least one loss");
  require(versions_per_model() >= 1, ErrorCategory::config, "protocol has an empty attack inventory");
  require(batch_size >= 1, ErrorCategory::config, "batch_size must be >= 1");
}

std::vector<attack::AttackSpec> ProtocolConfig::specs(double eps) const {
  std::vector<attack::AttackSpec> out;
  for (attack::Loss loss : losses) {
    attack::AttackSpec s;
    s.loss = loss;
    s.eps = eps;
    s.steps = steps;
    s.step_size = eps / step_divisor;
    s.momentum = momentum;
    s.kappa = kappa;
    s.transform_prob = transform_prob;
    s.resize_min = resize_min;
    s.resize_max = resize_max;
    s.sgm_gamma = sgm_gamma;
    if (pgd_starts > 0) {
      s.method = attack::Method::pgd;
      s.random_starts = pgd_starts;
      out.push_back(s);
    }
    s.random_starts = 1;
    if (mdi2fgsm) {
      s.method = attack::Method::mdi2fgsm;
      out.push_back(s);
    }
    if (sgm) {
      s.method = attack::Method::sgm;
      out.push_back(s);
    }
  }
  return out;
}

int ProtocolConfig::versions_per_model() const {
  return (pgd_starts + (mdi2fgsm ? 1 : 0) + (sgm ? 1 : 0)) * static_cast<int>(losses.size());
}

template <typename T>
std::string AdvVersion<T>::label() const {
  return source + ":" + spec.describe() + "#" + std::to_string(start);
}

template <typename T>
std::vector<std::string> AdvSet<T>::labels() const {
  std::vector<std::string> out;
  for (const auto& v : versions) out.push_back(v.label());
  return out;
}

double all_or_nothing(const std::vector<std::vector<char>>& flags) {
  require(!flags.empty(), ErrorCategory::validation, "all_or_nothing: empty attack axis");
  const std::size_t n = flags.front().size();
  for (const auto& f : flags) require(f.size() == n, ErrorCategory::shape, "all_or_nothing: ragged flag matrix");
  if (n == 0) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool all = true;
    for (const auto& f : flags)
      if (!f[i]) {
        all = false;
        break;
      }
    ok += all;
  }
  return static_cast<double>(ok) / static_cast<double>(n);
}

std::string inventory_hash(const std::vector<std::string>& labels) {
  std::uint64_t h = hash_string("inventory");
  for (const auto& l : labels) h = mix64(h ^ hash_string(l));
  return hex64(h);
}

template <typename T>
std::vector<std::string> SurrogateSet<T>::ids() const {
  std::vector<std::string> out;
  for (const auto* m : models) out.push_back(m->id());
  return out;
}

template <typename T>
void SurrogateSet<T>::validate() const {
  require(!models.empty(), ErrorCategory::validation, "black-box protocol needs at least one surrogate");
  for (const auto* m : models) require(m != nullptr, ErrorCategory::validation, "null surrogate");
}

namespace {

std::uint64_t eps_key(double eps) {
  std::uint64_t bits;
  static_assert(sizeof bits == sizeof eps);
  std::memcpy(&bits, &eps, sizeof bits);
  return bits;
}

// Adversarial batches for every start of `spec`, generated batch by batch with
// a stream keyed by (source, spec, batch) so results do not depend on order.
template <typename T>
attack::AttackResult<T> batched_attack(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                                       const attack::AttackSpec& spec, std::uint64_t seed, int batch_size) {
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  attack::AttackResult<T> out;
  for (int s = 0; s < spec.random_starts; ++s) out.starts.emplace_back(x.shape());
  const std::size_t stride = x.stride0();
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size)) {
    const std::size_t cnt = std::min(n - b, static_cast<std::size_t>(batch_size));
    Rng rng = Rng::derive(seed ^ mix64(eps_key(spec.eps)), model.id() + "|" + spec.describe() + "|" + std::to_string(b));
    auto r = attack::attack<T>(model, slice_rows(x, b, cnt), y.subspan(b, cnt), spec, rng);
    out.fell_back = out.fell_back || r.fell_back;
    for (int s = 0; s < spec.random_starts; ++s)
      std::copy_n(r.starts[static_cast<std::size_t>(s)].data(), cnt * stride, out.starts[static_cast<std::size_t>(s)].data() + b * stride);
  }
  return out;
}

template <typename T>
std::vector<char> flags_for(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y) {
  return correct_flags(model, x, y);
}

double fraction(const std::vector<char>& f) {
  if (f.empty()) return 0.0;
  return static_cast<double>(std::count(f.begin(), f.end(), 1)) / static_cast<double>(f.size());
}

}  // namespace

template <typename T>
AdvSet<T> generate_blackbox(const SurrogateSet<T>& surrogates, double eps, const Tensor<T>& x, std::span<const int> y,
                            const ProtocolConfig& cfg) {
  surrogates.validate();
  cfg.validate();
  AdvSet<T> set;
  set.eps = eps;
  for (const auto* model : surrogates.models)
    for (const auto& spec : cfg.specs(eps)) {
      auto r = batched_attack(*model, x, y, spec, cfg.seed, cfg.batch_size);
      for (int s = 0; s < spec.random_starts; ++s)
        set.versions.push_back({model->id(), spec, s, r.fell_back, std::move(r.starts[static_cast<std::size_t>(s)])});
    }
  return set;
}

template <typename T>
EvalRow score_against(const Classifier<T>& target, const AdvSet<T>& set, const Tensor<T>& x, std::span<const int> y,
                      const std::string& protocol, std::uint64_t seed) {
  EvalRow row;
  row.model_id = target.id();
  row.protocol = protocol;
  row.eps = set.eps;
  row.n_samples = y.size();
  row.seed = seed;
  const std::vector<char> clean = flags_for(target, x, y);
  row.clean_accuracy = fraction(clean);
  std::vector<std::vector<char>> flags;
  for (const auto& v : set.versions) {
    // A sample misclassified when clean counts as wrong under every version.
    flags.push_back(flags_for(target, v.x_adv, y));
    for (std::size_t i = 0; i < clean.size(); ++i) flags.back()[i] = static_cast<char>(flags.back()[i] && clean[i]);
    row.per_attack.push_back(fraction(flags.back()));
    row.fallback = row.fallback || v.fell_back;
    if (std::find(row.sources.begin(), row.sources.end(), v.source) == row.sources.end()) row.sources.push_back(v.source);
  }
  row.versions = static_cast<int>(set.versions.size());
  row.inventory_hash = inventory_hash(set.labels());
  if (flags.empty()) {
    row.accuracy = row.clean_accuracy;
    row.min_attack_accuracy = row.clean_accuracy;
  } else {
    row.accuracy = all_or_nothing(flags);
    row.min_attack_accuracy = *std::min_element(row.per_attack.begin(), row.per_attack.end());
  }
  return row;
}

template <typename T>
EvalReport blackbox_protocol(const Classifier<T>& target, const SurrogateSet<T>& surrogates,
                             const std::vector<double>& eps_list, const Tensor<T>& x, std::span<const int> y,
                             const ProtocolConfig& cfg) {
  EvalReport rep;
  for (double eps : eps_list)
    rep.rows.push_back(score_against(target, generate_blackbox(surrogates, eps, x, y, cfg), x, y, "blackbox", cfg.seed));
  return rep;
}

template <typename T>
EvalReport whitebox_protocol(const Classifier<T>& target, const std::vector<double>& eps_list, const Tensor<T>& x,
                             std::span<const int> y, const ProtocolConfig& cfg) {
  cfg.validate();
  EvalReport rep;
  for (double eps : eps_list) {
    AdvSet<T> set;
    set.eps = eps;
    for (const auto& spec : cfg.specs(eps)) {
      auto r = batched_attack(target, x, y, spec, cfg.seed, cfg.batch_size);
      for (int s = 0; s < spec.random_starts; ++s)
        set.versions.push_back({target.id(), spec, s, r.fell_back, std::move(r.starts[static_cast<std::size_t>(s)])});
    }
    rep.rows.push_back(score_against(target, set, x, y, "whitebox", cfg.seed));
    rep.rows.back().sources.clear();
  }
  return rep;
}

double TransferMatrix::mean_off_diagonal() const {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < success.size(); ++i)
    for (std::size_t j = 0; j < success[i].size(); ++j)
      if (i != j) {
        total += success[i][j];
        ++count;
      }
  return count ? total / static_cast<double>(count) : 0.0;
}

template <typename T>
TransferMatrix transfer_matrix(const std::vector<const Classifier<T>*>& models, const attack::AttackSpec& spec,
                               const Tensor<T>& x, std::span<const int> y, std::uint64_t seed, int batch_size) {
  require(!models.empty(), ErrorCategory::validation, "transfer_matrix needs at least one model");
  spec.validate();
  TransferMatrix tm;
  tm.eps = spec.eps;
  std::vector<std::vector<char>> clean;
  for (const auto* m : models) {
    tm.ids.push_back(m->id());
    clean.push_back(correct_flags(*m, x, y));
  }
  tm.success.assign(models.size(), std::vector<double>(models.size(), 0.0));
  for (std::size_t i = 0; i < models.size(); ++i) {
    // Worst case over starts is taken per target below.
    auto r = batched_attack(*models[i], x, y, spec, seed, batch_size);
    for (std::size_t j = 0; j < models.size(); ++j) {
      std::vector<char> fooled(y.size(), 0);
      for (const auto& adv : r.starts) {
        const auto ok = correct_flags(*models[j], adv, y);
        for (std::size_t k = 0; k < y.size(); ++k) fooled[k] = static_cast<char>(fooled[k] || !ok[k]);
      }
      std::size_t base = 0, hit = 0;
      for (std::size_t k = 0; k < y.size(); ++k)
        if (clean[j][k]) {
          ++base;
          hit += fooled[k];
        }
      tm.success[i][j] = base ? static_cast<double>(hit) / static_cast<double>(base) : 0.0;
    }
  }
  return tm;
}

#define EIO_PROTOCOL_INSTANTIATE(T)                                                                                    \
  template struct AdvVersion<T>;                                                                                       \
  template struct AdvSet<T>;                                                                                           \
  template struct SurrogateSet<T>;                                                                                     \
  template AdvSet<T> generate_blackbox<T>(const SurrogateSet<T>&, double, const Tensor<T>&, std::span<const int>,     \
                                          const ProtocolConfig&);                                                      \
  template EvalRow score_against<T>(const Classifier<T>&, const AdvSet<T>&, const Tensor<T>&, std::span<const int>,    \
                                    const std::string&, std::uint64_t);                                                \
  template EvalReport blackbox_protocol<T>(const Classifier<T>&, const SurrogateSet<T>&, const std::vector<double>&,   \
                                           const Tensor<T>&, std::span<const int>, const ProtocolConfig&);             \
  template EvalReport whitebox_protocol<T>(const Classifier<T>&, const std::vector<double>&, const Tensor<T>&,         \
                                           std::span<const int>, const ProtocolConfig&);                               \
  template TransferMatrix transfer_matrix<T>(const std::vector<const Classifier<T>*>&, const attack::AttackSpec&,      \
                                             const Tensor<T>&, std::span<const int>, std::uint64_t, int);

EIO_PROTOCOL_INSTANTIATE(float)
EIO_PROTOCOL_INSTANTIATE(double)

}  // namespace eio::eval
