#include "prunefuse/distill.hpp"

#include <cmath>
#include <string>

#include "prunefuse/error.hpp"
#include "prunefuse/graph.hpp"

namespace prunefuse {

void DistillConfig::validate() const {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::kConfig, "distill temperature must be > 0");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::kConfig, "distill alpha must lie in [0, 1]");
}

double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  Graph g;
  const Var kd = g.kl_divergence(g.constant(teacher_logits), g.constant(student_logits), temperature);
  g.forward();
  return g.value(kd)[0];
}

double combined_loss(double ce, double kd, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::kInvalidArgument, "combined_loss: alpha must lie in [0, 1]");
  require(std::isfinite(ce) && std::isfinite(kd), ErrorKind::kNonFinite, "combined_loss: non-finite term");
  return alpha * ce + (1.0 - alpha) * kd;
}

Var combined_loss(Graph& g, Var ce, Var kd, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::kInvalidArgument, "combined_loss: alpha must lie in [0, 1]");
  if (alpha == 1.0) return ce;
  if (alpha == 0.0) return kd;
  return g.add(g.scale(ce, alpha), g.scale(kd, 1.0 - alpha));
}

TrainResult distill_train(const Model& teacher, Model& student, std::span<const Sample> train, const DistillConfig& cfg) {
  cfg.validate();
  require(!student.live_layers().empty(), ErrorKind::kInvalidArgument, "distill_train: student has no live layer");
  const ModelConfig& tc = teacher.config();
  const ModelConfig& sc = student.config();
  require(tc.vocab_size == sc.vocab_size && tc.max_seq_len == sc.max_seq_len && tc.n_classes == sc.n_classes,
          ErrorKind::kConfig, "distill_train: teacher and student differ in vocabulary, sequence length or classes");
  return train_loop(student, train, cfg.train, [&](Graph& g, Var logits, const TokenBatch& batch) {
    Var ce{}, kd{};
    if (cfg.alpha > 0.0) {
      Tensor labels({batch.batch_size});
      for (std::size_t i = 0; i < batch.batch_size; ++i) labels[i] = batch.labels[i];
      ce = g.cross_entropy(logits, g.constant(std::move(labels)));
    }
    if (cfg.alpha < 1.0) kd = g.kl_divergence(g.constant(forward(teacher, batch).logits), logits, cfg.temperature);
    return combined_loss(g, ce, kd, cfg.alpha);
  });
}

}  // namespace prunefuse
