#pragma once

// L-inf attacks on frozen classifiers: momentum iterative PGD with random
// starts, M-DI2-FGSM (random resize-and-pad each step) and SGM (residual
// gradients scaled by gamma). Every iterate is projected onto
// B_inf(x, eps) and [0, 1].

#include <string>
#include <vector>

#include "eio/model.hpp"
#include "eio/random.hpp"

namespace eio::attack {

enum class Method { pgd, mdi2fgsm, sgm };
enum class Loss { cross_entropy, cw };

Method parse_method(const std::string& s);
Loss parse_loss(const std::string& s);
std::string method_name(Method m);
std::string loss_name(Loss l);

struct AttackSpec {
  Method method = Method::pgd;
  Loss loss = Loss::cross_entropy;
  double eps = 0.03;
  int steps = 100;
  double step_size = 0.006;
  int random_starts = 1;
  bool random_init = true;  // uniform start inside the ball (mdi2fgsm/sgm start at x)
  double momentum = 1.0;    // mu; 0 gives plain sign-gradient PGD
  double kappa = 0.0;       // C&W confidence
  double transform_prob = 0.5;
  double resize_min = 0.9;  // fraction of the input side
  double resize_max = 1.0;
  double sgm_gamma = 0.2;

  void validate() const;
  // e.g. "pgd/ce/eps=0.03/steps=100/step=0.006/starts=3/mu=1"
  std::string describe() const;
};

template <typename T>
struct AttackResult {
  std::vector<Tensor<T>> starts;  // one adversarial batch per random start
  bool fell_back = false;         // sgm requested on a model without skips
};

template <typename T>
AttackResult<T> attack(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackSpec& spec,
                       Rng& rng);

// Per sample, the first start that is misclassified (else the last start).
template <typename T>
Tensor<T> worst_case(const Classifier<T>& model, const AttackResult<T>& r, std::span<const int> y);

// Mean C&W margin max(z_y - max_{c!=y} z_c, -kappa); the attack minimizes it.
template <typename T>
double cw_margin_loss(const Tensor<T>& logits, std::span<const int> y, double kappa, Tensor<T>* grad = nullptr);

// Random resize (nearest neighbour) to an r x r square, r drawn from
// [ceil(lo*H), floor(hi*H)], then zero-padded at a random offset back to
// H x W. The backward of the same transform scatters gradients back.
struct ResizePad {
  int in_h = 0, in_w = 0, size_h = 0, size_w = 0, top = 0, left = 0;
  bool identity = true;

  static ResizePad sample(int h, int w, double lo, double hi, double prob, Rng& rng);
  template <typename T>
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename T>
  Tensor<T> backward(const Tensor<T>& g) const;
};

}  // namespace eio::attack
