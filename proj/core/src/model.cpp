#include "eio/model.hpp"

#include <cmath>

namespace eio {

EnsembleRule parse_ensemble_rule(const std::string& s) {
  if (s == "mean-prob" || s == "mean_prob") return EnsembleRule::mean_prob;
  if (s == "mean-logit" || s == "mean_logit") return EnsembleRule::mean_logit;
  if (s == "majority-vote" || s == "majority_vote") return EnsembleRule::majority_vote;
  fail(ErrorCategory::config, "unknown ensemble rule '" + s + "'");
}

std::string ensemble_rule_name(EnsembleRule r) {
  switch (r) {
    case EnsembleRule::mean_prob: return "mean-prob";
    case EnsembleRule::mean_logit: return "mean-logit";
    case EnsembleRule::majority_vote: return "majority-vote";
  }
  return "mean-prob";
}

template <typename T>
Ensemble<T>::Ensemble(std::vector<const Classifier<T>*> members, EnsembleRule rule, std::string id)
    : members_(std::move(members)), rule_(rule), id_(std::move(id)) {
  require(!members_.empty(), ErrorCategory::validation, "ensemble needs at least one member");
}

template <typename T>
bool Ensemble<T>::has_skip_connections() const {
  for (auto* m : members_)
    if (!m->has_skip_connections()) return false;
  return true;
}

template <typename T>
Tensor<T> Ensemble<T>::logits(const Tensor<T>& x) const {
  const double k = static_cast<double>(members_.size());
  Tensor<T> acc;
  for (auto* m : members_) {
    Tensor<T> z = m->logits(x);
    if (rule_ == EnsembleRule::mean_prob) {
      z = nn::softmax_rows(z);
    } else if (rule_ == EnsembleRule::majority_vote) {
      auto pred = nn::argmax_rows(z);
      Tensor<T> votes(z.shape());
      for (std::size_t r = 0; r < pred.size(); ++r) votes[r * z.stride0() + static_cast<std::size_t>(pred[r])] = T{1};
      z = std::move(votes);
    }
    if (acc.empty()) acc = Tensor<T>(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) acc[i] += z[i];
  }
  for (auto& v : acc.values()) {
    v = static_cast<T>(v / k);
    if (rule_ == EnsembleRule::mean_prob) v = static_cast<T>(std::log(std::max<double>(v, 1e-30)));
  }
  return acc;
}

template <typename T>
Tensor<T> Ensemble<T>::input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale) const {
  const double k = static_cast<double>(members_.size());
  Tensor<T> total(x.shape());
  if (rule_ != EnsembleRule::mean_prob) {
    // d/dz_k of the mean is 1/K times the outer gradient.
    Tensor<T> outer = dloss(logits(x));
    if (rule_ == EnsembleRule::majority_vote) {
      Tensor<T> mean_logits;
      for (auto* m : members_) {
        Tensor<T> z = m->logits(x);
        if (mean_logits.empty()) mean_logits = Tensor<T>(z.shape());
        for (std::size_t i = 0; i < z.size(); ++i) mean_logits[i] += static_cast<T>(z[i] / k);
      }
      outer = dloss(mean_logits);
    }
    for (auto* m : members_) {
      Tensor<T> g = m->input_gradient(
          x,
          [&](const Tensor<T>&) {
            Tensor<T> s = outer;
            for (auto& v : s.values()) v = static_cast<T>(v / k);
            return s;
          },
          residual_scale);
      for (std::size_t i = 0; i < g.size(); ++i) total[i] += g[i];
    }
    return total;
  }
  std::vector<Tensor<T>> probs;
  Tensor<T> mean;
  for (auto* m : members_) {
    probs.push_back(nn::softmax_rows(m->logits(x)));
    if (mean.empty()) mean = Tensor<T>(probs.back().shape());
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += static_cast<T>(probs.back()[i] / k);
  }
  Tensor<T> log_mean = mean;
  for (auto& v : log_mean.values()) v = static_cast<T>(std::log(std::max<double>(v, 1e-30)));
  const Tensor<T> outer = dloss(log_mean);
  const std::size_t classes = mean.stride0();
  const std::size_t rows = classes ? mean.size() / classes : 0;
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const Tensor<T>& s = probs[m];
    Tensor<T> dz(s.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      std::vector<double> v(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t i = r * classes + c;
        v[c] = outer[i] / std::max<double>(mean[i], 1e-30) / k;
        dot += v[c] * s[i];
      }
      for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t i = r * classes + c;
        dz[i] = static_cast<T>(s[i] * (v[c] - dot));
      }
    }
    Tensor<T> g = members_[m]->input_gradient(x, [&](const Tensor<T>&) { return dz; }, residual_scale);
    for (std::size_t i = 0; i < g.size(); ++i) total[i] += g[i];
  }
  return total;
}

template <typename T>
std::vector<char> correct_flags(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> labels, int batch_size) {
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  require(labels.size() == n, ErrorCategory::shape, "label count does not match inputs");
  std::vector<char> flags(n, 0);
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), n - b);
    auto pred = nn::argmax_rows(model.logits(slice_rows(x, b, count)));
    for (std::size_t i = 0; i < count; ++i) flags[b + i] = pred[i] == labels[b + i];
  }
  return flags;
}

template <typename T>
double accuracy(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> labels, int batch_size) {
  auto flags = correct_flags(model, x, labels, batch_size);
  if (flags.empty()) return 0.0;
  std::size_t c = 0;
  for (char f : flags) c += f ? 1 : 0;
  return static_cast<double>(c) / static_cast<double>(flags.size());
}

template class Ensemble<float>;
template class Ensemble<double>;
template double accuracy<float>(const Classifier<float>&, const Tensor<float>&, std::span<const int>, int);
template double accuracy<double>(const Classifier<double>&, const Tensor<double>&, std::span<const int>, int);
template std::vector<char> correct_flags<float>(const Classifier<float>&, const Tensor<float>&, std::span<const int>, int);
template std::vector<char> correct_flags<double>(const Classifier<double>&, const Tensor<double>&, std::span<const int>, int);

}  // namespace eio
