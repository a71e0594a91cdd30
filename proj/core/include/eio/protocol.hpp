#pragma once

// Evaluation protocols: black-box transfer (surrogate-generated adversarial
// versions), white-box multi-start PGD, all-or-nothing accounting and
// transferability matrices.

#include <string>
#include <vector>

#include "eio/attack.hpp"

namespace eio::eval {

struct ProtocolConfig {
  int steps = 100;
  double step_divisor = 5.0;  // step size = eps / step_divisor
  int pgd_starts = 3;
  bool mdi2fgsm = true;
  bool sgm = true;
  std::vector<attack::Loss> losses{attack::Loss::cross_entropy, attack::Loss::cw};
  double momentum = 1.0;
  double kappa = 0.0;
  double transform_prob = 0.5;
  double resize_min = 0.9;
  double resize_max = 1.0;
  double sgm_gamma = 0.2;
  int batch_size = 100;
  std::uint64_t seed = 0;

  // 100 steps, eps/5, {PGD x3, M-DI2-FGSM, SGM} x {CE, C&W}.
  static ProtocolConfig blackbox();
  // 50 steps, eps/5, 5-start PGD with CE.
  static ProtocolConfig whitebox();

  // Attack specs at one eps; each PGD random start is a separate version.
  std::vector<attack::AttackSpec> specs(double eps) const;
  // Adversarial versions per sample per surrogate.
  int versions_per_model() const;
  void validate() const;
};

// One adversarial version of the evaluation set.
template <typename T>
struct AdvVersion {
  std::string source;  // generating model id
  attack::AttackSpec spec;
  int start = 0;
  bool fell_back = false;
  Tensor<T> x_adv;

  std::string label() const;
};

template <typename T>
struct AdvSet {
  double eps = 0;
  std::vector<AdvVersion<T>> versions;

  std::vector<std::string> labels() const;
};

struct EvalRow {
  std::string model_id;
  std::string protocol;  // clean | blackbox | whitebox
  double eps = 0;
  double accuracy = 0;
  double clean_accuracy = 0;
  double min_attack_accuracy = 0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  std::string inventory_hash;
  int versions = 0;
  std::vector<std::string> sources;  // surrogate ids (black-box)
  std::vector<double> per_attack;
  bool fallback = false;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  void append(const EvalReport& o) { rows.insert(rows.end(), o.rows.begin(), o.rows.end()); }
};

// Fraction of samples correct under every attack; flags[attack][sample].
double all_or_nothing(const std::vector<std::vector<char>>& flags);

std::string inventory_hash(const std::vector<std::string>& labels);

template <typename T>
struct SurrogateSet {
  std::vector<const Classifier<T>*> models;

  std::vector<std::string> ids() const;
  void validate() const;
};

// Generates every black-box version at one eps from every surrogate.
template <typename T>
AdvSet<T> generate_blackbox(const SurrogateSet<T>& surrogates, double eps, const Tensor<T>& x, std::span<const int> y,
                            const ProtocolConfig& cfg);

// Scores one target against a pre-generated set (all-or-nothing).
template <typename T>
EvalRow score_against(const Classifier<T>& target, const AdvSet<T>& set, const Tensor<T>& x, std::span<const int> y,
                      const std::string& protocol, std::uint64_t seed);

template <typename T>
EvalReport blackbox_protocol(const Classifier<T>& target, const SurrogateSet<T>& surrogates,
                             const std::vector<double>& eps_list, const Tensor<T>& x, std::span<const int> y,
                             const ProtocolConfig& cfg = ProtocolConfig::blackbox());

template <typename T>
EvalReport whitebox_protocol(const Classifier<T>& target, const std::vector<double>& eps_list, const Tensor<T>& x,
                             std::span<const int> y, const ProtocolConfig& cfg = ProtocolConfig::whitebox());

struct TransferMatrix {
  std::vector<std::string> ids;
  double eps = 0;
  std::vector<std::vector<double>> success;  // [source][target]

  double mean_off_diagonal() const;
};

// Entry (i, j): fraction of samples that model j classifies correctly when
// clean but misclassifies on examples crafted against model i (per sample the
// worst case over the spec's random starts).
template <typename T>
TransferMatrix transfer_matrix(const std::vector<const Classifier<T>*>& models, const attack::AttackSpec& spec,
                               const Tensor<T>& x, std::span<const int> y, std::uint64_t seed, int batch_size = 100);

}  // namespace eio::eval
