#pragma once
// BERT-shaped encoder classifier: token + position embeddings, post-layernorm
// encoder layers, tanh pooler over position 0, linear classifier. A pruned
// layer is an identity placeholder: it is skipped in forward and contributes
// no parameters.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prunefuse/data.hpp"
#include "prunefuse/graph.hpp"
#include "prunefuse/tensor.hpp"

namespace prunefuse {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = kDefaultSeqLen;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t n_layers = 12;
  std::size_t n_classes = 4;
  std::uint64_t seed = 0;
  // Segment embeddings; 0 disables them (the desk model has none).
  std::size_t type_vocab_size = 0;
  double layer_norm_eps = 1e-12;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// BERT-base dimensions with a 10-class head; only used for parameter arithmetic.
ModelConfig bert_base_reference();

struct EncoderLayer {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_gamma, ln1_beta;
  Parameter w1, b1, w2, b2;
  Parameter ln2_gamma, ln2_beta;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // Attention and feed-forward matrices only (no biases, no layernorm).
  std::vector<const Parameter*> weight_matrices() const;
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  bool is_pruned(std::size_t layer) const;
  // Throws for an out-of-range index or an already-pruned layer.
  void prune(std::size_t layer);
  // Test/ablation hook: flips the mask without the double-prune check.
  void set_pruned(std::size_t layer, bool pruned);
  const std::vector<bool>& prune_mask() const { return prune_mask_; }
  std::vector<std::size_t> live_layers() const;

  EncoderLayer& layer(std::size_t i) { return layers_.at(i); }
  const EncoderLayer& layer(std::size_t i) const { return layers_.at(i); }

  // Every parameter the forward pass touches (pruned layers excluded).
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // Every allocated parameter, pruned layers included, in declaration order.
  std::vector<Parameter*> all_parameters();
  std::vector<const Parameter*> all_parameters() const;

  // Counts the allocated tensors of live parts.
  std::size_t live_parameter_count() const;

  void zero_grad();

  Parameter token_embedding, position_embedding, type_embedding;
  Parameter embedding_ln_gamma, embedding_ln_beta;
  Parameter pooler_w, pooler_b;
  Parameter classifier_w, classifier_b;

 private:
  friend Model load_checkpoint(std::istream& in);

  ModelConfig config_;
  std::vector<EncoderLayer> layers_;
  std::vector<bool> prune_mask_;
};

struct LayerCapture {
  std::size_t layer = 0;
  // Layer output rows for unmasked tokens, batch-major: [n_valid, d_model].
  Tensor activations;
  // Softmax attention [B, H, T, T]; padded keys are exactly zero.
  Tensor attention;
};

struct LayerCaches {
  std::vector<LayerCapture> layers;  // live layers, ascending index
  // Number of unmasked tokens per sample (row-block sizes of activations).
  std::vector<std::size_t> tokens_per_sample;
  Tensor pooled;  // [B, d_model], the classifier input
};

struct ForwardResult {
  Tensor logits;  // [B, n_classes]
  std::optional<LayerCaches> caches;
};

ForwardResult forward(const Model& model, const TokenBatch& batch, bool capture = false);

// Hidden state [B*T, d_model] entering each live layer, ascending layer order.
std::vector<std::pair<std::size_t, Tensor>> layer_inputs(const Model& model, const TokenBatch& batch);
// Logits when the forward pass starts at first_layer with the given hidden
// state; layers below first_layer and the embeddings are not evaluated.
Tensor logits_from(const Model& model, const TokenBatch& batch, std::size_t first_layer, const Tensor& hidden);

struct LayerGradients {
  std::size_t layer = 0;
  std::vector<Tensor> grads;  // EncoderLayer::parameters() order
};

struct LossAndGrads {
  double loss = 0.0;
  Tensor logits;
  std::vector<LayerGradients> layers;  // live layers only
};

// Mean cross-entropy of the batch. Zeroes and then fills every live
// parameter's grad; per-layer gradient bundles are copied out.
LossAndGrads loss_and_grads(Model& model, const TokenBatch& batch);

// Appends the forward graph of `model` to g. trainable = bind parameters
// (gradients flow), otherwise parameters enter as constants.
Var build_logits(Graph& g, Model& model, const TokenBatch& batch, bool trainable);

double accuracy(const Model& model, std::span<const TokenBatch> batches);

// Closed-form trainable-parameter count; pruned layers excluded.
std::size_t param_count(const ModelConfig& config, const std::vector<bool>& prune_mask = {});
std::size_t per_layer_param_count(const ModelConfig& config);
// Size at 32-bit weights unless bytes_per_param says otherwise.
double size_gb(std::size_t param_count, double bytes_per_param = 4.0);

// Binary checkpoint: magic, config, prune mask, then every parameter in
// declaration order (name, shape, little-endian float64 data), FNV-1a trailer.
void save_checkpoint(const Model& model, std::ostream& out);
Model load_checkpoint(std::istream& in);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace prunefuse
