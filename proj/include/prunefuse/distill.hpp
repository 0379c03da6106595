#pragma once
// Knowledge distillation: the pruned student learns from the softened output
// distribution of the unpruned teacher.

#include <span>

#include "prunefuse/data.hpp"
#include "prunefuse/model.hpp"
#include "prunefuse/pruning.hpp"
#include "prunefuse/tensor.hpp"

namespace prunefuse {

struct DistillConfig {
  double temperature = 2.0;
  double alpha = 0.5;  // weight of the CE term
  // Default epochs: twice the fine-tune budget.
  TrainConfig train{.epochs = 4, .batch_size = 32, .lr = 1e-3, .seed = 0};

  void validate() const;
};

// Mean over the batch of KL(softmax(z_t / T) || softmax(z_s / T)). No T^2 factor.
double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

// alpha * ce + (1 - alpha) * kd.
double combined_loss(double ce, double kd, double alpha);

// Graph form used by training; alpha = 1 and alpha = 0 build only one term.
Var combined_loss(Graph& g, Var ce, Var kd, double alpha);

// Trains `student` in place; `teacher` is only read.
TrainResult distill_train(const Model& teacher, Model& student, std::span<const Sample> train, const DistillConfig& cfg);

}  // namespace prunefuse
