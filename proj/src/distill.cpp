#include "eevit/distill.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

void default_warning(const char* msg) { std::fprintf(stderr, "warning: %s\n", msg); }
void (*g_warn)(const char*) = default_warning;

Tensor homogeneous(std::span<const Tensor> maps, bool use_gram, const char* what) {
  if (maps.size() < 2) {
    // Once per process: the condition is a property of the layout, not the batch.
    static std::set<const char*> warned;
    if (warned.insert(what).second) g_warn(what);
    return Tensor::scalar(0.0);
  }
  Tensor teacher = use_gram ? gram(maps.back()).detach() : maps.back().detach();
  Tensor acc;
  for (std::size_t i = 0; i + 1 < maps.size(); ++i) {
    Tensor term = mse(use_gram ? gram(maps[i]) : maps[i], teacher);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(maps.size() - 1));
}

}  // namespace

void set_warning_handler(void (*handler)(const char*)) { g_warn = handler ? handler : default_warning; }

AlignModule::AlignModule(std::size_t dim, std::size_t source_tokens, std::size_t target_tokens) : bn(dim) {
  const std::size_t src = grid_side(source_tokens);
  const std::size_t dst = grid_side(target_tokens);
  if (dst > src || src % dst != 0) {
    throw ConfigError("no integer stride maps a " + std::to_string(src) + "x" + std::to_string(src) + " grid onto " +
                      std::to_string(dst) + "x" + std::to_string(dst));
  }
  stride_ = src / dst;
  weight = Tensor::full({stride_, stride_, dim}, 1.0 / static_cast<double>(stride_ * stride_), true);
  bias = Tensor::zeros({dim}, true);
}

Tensor AlignModule::forward(const Tensor& f_last, NormMode mode) {
  Tensor y = depthwise_conv2d(f_last, weight, bias, stride_, 0);
  if (bypass_) return y;
  return bn.forward(gelu(y), mode);
}

void AlignModule::collect(StateCollector& c) const {
  c.param("weight", weight);
  c.param("bias", bias);
  c.push("bn");
  bn.collect(c);
  c.pop();
}

Tensor channel_kl(const Tensor& teacher_map, const Tensor& student_map) {
  if (teacher_map.shape() != student_map.shape()) {
    throw ShapeError("feature maps differ: " + shape_str(teacher_map.shape()) + " vs " + shape_str(student_map.shape()));
  }
  return kl_divergence(softmax(teacher_map, -1), log_softmax(student_map, -1));
}

Tensor loss_hete(std::span<const Tensor> student_maps, std::span<const Tensor> aligned_teachers) {
  if (student_maps.empty() || student_maps.size() != aligned_teachers.size()) {
    throw std::invalid_argument("heterogeneous distillation needs one aligned teacher per distilled exit");
  }
  Tensor acc;
  for (std::size_t i = 0; i < student_maps.size(); ++i) {
    Tensor term = channel_kl(aligned_teachers[i], student_maps[i]);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(student_maps.size()));
}

Tensor loss_homo_lph(std::span<const Tensor> lph_maps) {
  return homogeneous(lph_maps, false, "LPH homogeneous distillation needs two LPH exits; using 0");
}

Tensor gram(const Tensor& map) {
  if (map.rank() != 3) throw ShapeError("gram expects [batch, tokens, D]");
  const std::size_t batch = map.dim(0), n = map.dim(1), d = map.dim(2);
  auto f = map.data();
  std::vector<double> out(batch * d * d);
  std::vector<double> terms(n);
  // Each entry sums its products in sorted order, so any reordering of the
  // token rows gives a bitwise identical matrix.
  for (std::size_t b = 0; b < batch; ++b) {
    const double* fb = f.data() + b * n * d;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i; j < d; ++j) {
        for (std::size_t t = 0; t < n; ++t) terms[t] = fb[t * d + i] * fb[t * d + j];
        std::sort(terms.begin(), terms.end());
        double s = 0;
        for (double v : terms) s += v;
        out[(b * d + i) * d + j] = s;
        out[(b * d + j) * d + i] = s;
      }
    }
  }
  auto xn = map.node();
  return make_result({batch, d, d}, std::move(out), {map},
                     [xn, batch, n, d](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t b = 0; b < batch; ++b) {
                         const double* g = self.grad.data() + b * d * d;
                         const double* fb = xn->value.data() + b * n * d;
                         double* gx = xn->grad.data() + b * n * d;
                         for (std::size_t t = 0; t < n; ++t) {
                           for (std::size_t i = 0; i < d; ++i) {
                             double acc = 0;
                             for (std::size_t j = 0; j < d; ++j) acc += fb[t * d + j] * (g[i * d + j] + g[j * d + i]);
                             gx[t * d + i] += acc;
                           }
                         }
                       }
                     },
                     "gram");
}

Tensor loss_homo_gah(std::span<const Tensor> gah_maps) {
  return homogeneous(gah_maps, true, "GAH homogeneous distillation needs two GAH exits; using 0");
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const int> labels, double gamma,
               double temperature) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValueError("gamma must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ValueError("temperature must be > 0");
  if (student_logits.shape() != teacher_logits.shape()) throw ShapeError("student and teacher logits differ in shape");
  Tensor ce, kl;
  if (gamma < 1.0) ce = cross_entropy(student_logits, labels);
  if (gamma > 0.0) {
    Tensor target = softmax(scale(teacher_logits.detach(), 1.0 / temperature), -1);
    kl = kl_divergence(target, log_softmax(scale(student_logits, 1.0 / temperature), -1));
  }
  if (!kl.defined()) return ce;
  if (!ce.defined()) return kl;
  return add(scale(ce, 1.0 - gamma), scale(kl, gamma));
}

Tensor loss_pred(const Tensor& mid_logits, const Tensor& last_logits, const Tensor& final_logits,
                 std::span<const int> labels, double gamma, double temperature) {
  return add(kd_loss(mid_logits, final_logits, labels, gamma, temperature),
             kd_loss(last_logits, final_logits, labels, gamma, temperature));
}

Tensor total_loss(const LossParts& parts, double alpha, double beta) {
  Tensor homo = add(parts.homo_lph, parts.homo_gah);
  return add(add(scale(parts.hete, alpha), scale(homo, beta)), parts.pred);
}

}  // namespace eevit
