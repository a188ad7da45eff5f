#pragma once

#include <span>
#include <vector>

#include "eevit/nn.hpp"

namespace eevit {

// Reduces the final-layer token map to an exit's token grid: strided
// depthwise convolution (kernel = stride, no padding), GELU, BN.
class AlignModule {
 public:
  AlignModule() = default;
  // Throws ConfigError when no integer stride maps source_tokens onto target_tokens.
  AlignModule(std::size_t dim, std::size_t source_tokens, std::size_t target_tokens);

  // f_last: [batch, source_tokens, D] -> [batch, target_tokens, D]
  Tensor forward(const Tensor& f_last, NormMode mode);
  void collect(StateCollector& c) const;

  std::size_t stride() const { return stride_; }
  // Test toggle: GELU+BN become the identity.
  void set_bypass(bool on) { bypass_ = on; }

  Tensor weight;  // [stride, stride, D], initialised to the window average
  Tensor bias;
  BatchNorm bn;

 private:
  std::size_t stride_ = 1;
  bool bypass_ = false;
};

// KL(softmax_D(teacher) || softmax_D(student)) per token, averaged over tokens
// and batch. Both maps are [batch, tokens, D].
Tensor channel_kl(const Tensor& teacher_map, const Tensor& student_map);

// Mean of channel_kl(aligned[i], students[i]) over the distilled exits.
Tensor loss_hete(std::span<const Tensor> student_maps, std::span<const Tensor> aligned_teachers);

// The deepest LPH map (detached) teaches every shallower one through MSE;
// the result is the mean over students. Fewer than two maps gives 0.
Tensor loss_homo_lph(std::span<const Tensor> lph_maps);

// Per-sample Gram matrices F^T F: [batch, D, D].
Tensor gram(const Tensor& map);

// Like loss_homo_lph but on Gram matrices of GAH maps, so differing token
// counts compare.
Tensor loss_homo_gah(std::span<const Tensor> gah_maps);

// (1 - gamma) CE(student, y) + gamma KL(softmax(teacher/T) || softmax(student/T)).
// The teacher is treated as a constant. No T^2 factor.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const int> labels, double gamma,
               double temperature);

// kd_loss of the last-LPH and last-GAH exits against the final classifier.
Tensor loss_pred(const Tensor& mid_logits, const Tensor& last_logits, const Tensor& final_logits,
                 std::span<const int> labels, double gamma, double temperature);

struct LossParts {
  Tensor hete;
  Tensor homo_lph;
  Tensor homo_gah;
  Tensor pred;
};

// alpha * hete + beta * (homo_lph + homo_gah) + pred
Tensor total_loss(const LossParts& parts, double alpha, double beta);

// Warning sink for degenerate-but-defined cases (e.g. a homogeneous loss with
// a single head). Defaults to stderr.
void set_warning_handler(void (*handler)(const char*));

}  // namespace eevit
