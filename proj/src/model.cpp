#include "prunefuse/model.hpp"

#include <cmath>
#include <random>

#include "prunefuse/error.hpp"

namespace prunefuse {

void ModelConfig::validate() const {
  require(n_heads > 0 && d_model % n_heads == 0, ErrorKind::kConfig,
          "d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  require(n_layers >= 2, ErrorKind::kConfig, "n_layers must be >= 2");
  require(vocab_size > 0 && max_seq_len > 0 && d_ff > 0, ErrorKind::kConfig, "model dimensions must be positive");
  require(n_classes >= 2, ErrorKind::kConfig, "n_classes must be >= 2");
  require(layer_norm_eps >= 0.0, ErrorKind::kConfig, "layer_norm_eps must be >= 0");
}

ModelConfig bert_base_reference() {
  ModelConfig c;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.n_layers = 12;
  c.n_classes = 10;
  c.type_vocab_size = 2;
  return c;
}

std::vector<Parameter*> EncoderLayer::parameters() {
  return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gamma, &ln1_beta, &w1, &b1, &w2, &b2, &ln2_gamma, &ln2_beta};
}

std::vector<const Parameter*> EncoderLayer::parameters() const {
  return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gamma, &ln1_beta, &w1, &b1, &w2, &b2, &ln2_gamma, &ln2_beta};
}

std::vector<const Parameter*> EncoderLayer::weight_matrices() const { return {&wq, &wk, &wv, &wo, &w1, &w2}; }

namespace {

// Truncated normal at two standard deviations.
Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data) {
    double z;
    do z = dist(rng);
    while (std::fabs(z) > 2.0);
    v = z * stddev;
  }
  return t;
}

constexpr double kInitStd = 0.02;

}  // namespace

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.d_model, f = config_.d_ff;
  auto weight = [&](std::string name, Shape s) { return Parameter(std::move(name), init_normal(std::move(s), kInitStd, rng)); };
  auto zeros = [](std::string name, Shape s) { return Parameter(std::move(name), Tensor(std::move(s), 0.0)); };
  auto ones = [](std::string name, Shape s) { return Parameter(std::move(name), Tensor(std::move(s), 1.0)); };

  token_embedding = weight("embeddings.token", {config_.vocab_size, d});
  position_embedding = weight("embeddings.position", {config_.max_seq_len, d});
  type_embedding = weight("embeddings.type", {config_.type_vocab_size, d});
  embedding_ln_gamma = ones("embeddings.ln.gamma", {d});
  embedding_ln_beta = zeros("embeddings.ln.beta", {d});
  layers_.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    EncoderLayer L;
    L.wq = weight(p + "attn.wq", {d, d});
    L.bq = zeros(p + "attn.bq", {d});
    L.wk = weight(p + "attn.wk", {d, d});
    L.bk = zeros(p + "attn.bk", {d});
    L.wv = weight(p + "attn.wv", {d, d});
    L.bv = zeros(p + "attn.bv", {d});
    L.wo = weight(p + "attn.wo", {d, d});
    L.bo = zeros(p + "attn.bo", {d});
    L.ln1_gamma = ones(p + "ln1.gamma", {d});
    L.ln1_beta = zeros(p + "ln1.beta", {d});
    L.w1 = weight(p + "ffn.w1", {d, f});
    L.b1 = zeros(p + "ffn.b1", {f});
    L.w2 = weight(p + "ffn.w2", {f, d});
    L.b2 = zeros(p + "ffn.b2", {d});
    L.ln2_gamma = ones(p + "ln2.gamma", {d});
    L.ln2_beta = zeros(p + "ln2.beta", {d});
    layers_.push_back(std::move(L));
  }
  pooler_w = weight("pooler.w", {d, d});
  pooler_b = zeros("pooler.b", {d});
  classifier_w = weight("classifier.w", {d, config_.n_classes});
  classifier_b = zeros("classifier.b", {config_.n_classes});
  prune_mask_.assign(config_.n_layers, false);
}

bool Model::is_pruned(std::size_t layer) const {
  require(layer < prune_mask_.size(), ErrorKind::kInvalidArgument,
          "layer " + std::to_string(layer) + " out of range for " + std::to_string(prune_mask_.size()) + " layers");
  return prune_mask_[layer];
}

void Model::prune(std::size_t layer) {
  require(!is_pruned(layer), ErrorKind::kInvalidArgument, "layer " + std::to_string(layer) + " is already pruned");
  prune_mask_[layer] = true;
}

void Model::set_pruned(std::size_t layer, bool pruned) {
  (void)is_pruned(layer);
  prune_mask_[layer] = pruned;
}

std::vector<std::size_t> Model::live_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < prune_mask_.size(); ++l)
    if (!prune_mask_[l]) out.push_back(l);
  return out;
}

std::vector<const Parameter*> Model::all_parameters() const {
  std::vector<const Parameter*> out = {&token_embedding, &position_embedding, &type_embedding, &embedding_ln_gamma,
                                       &embedding_ln_beta};
  for (const EncoderLayer& L : layers_)
    for (const Parameter* p : L.parameters()) out.push_back(p);
  out.insert(out.end(), {&pooler_w, &pooler_b, &classifier_w, &classifier_b});
  return out;
}

std::vector<Parameter*> Model::all_parameters() {
  std::vector<Parameter*> out;
  for (const Parameter* p : std::as_const(*this).all_parameters()) out.push_back(const_cast<Parameter*>(p));
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out = {&token_embedding, &position_embedding};
  if (config_.type_vocab_size > 0) out.push_back(&type_embedding);
  out.insert(out.end(), {&embedding_ln_gamma, &embedding_ln_beta});
  for (std::size_t l = 0; l < layers_.size(); ++l)
    if (!prune_mask_[l])
      for (const Parameter* p : layers_[l].parameters()) out.push_back(p);
  out.insert(out.end(), {&pooler_w, &pooler_b, &classifier_w, &classifier_b});
  return out;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (const Parameter* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
  return out;
}

std::size_t Model::live_parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

void Model::zero_grad() {
  for (Parameter* p : all_parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct BuiltForward {
  Var logits;
  Var pooled;
  std::vector<std::pair<std::size_t, Var>> layer_inputs;
  std::vector<std::pair<std::size_t, Var>> layer_outputs;
  std::vector<Var> attention;
};

// Resuming at `first_layer` with a given hidden state [B*T, d] skips the
// embeddings and every layer below it.
template <class ModelT>
BuiltForward build(Graph& g, ModelT& model, const TokenBatch& batch, bool trainable, std::size_t first_layer = 0,
                   const Tensor* hidden = nullptr) {
  const ModelConfig& c = model.config();
  require(batch.seq_len == c.max_seq_len, ErrorKind::kShape,
          "batch sequence length " + std::to_string(batch.seq_len) + " != model max_seq_len " + std::to_string(c.max_seq_len));
  require(batch.batch_size > 0, ErrorKind::kInvalidArgument, "empty batch");
  const std::size_t B = batch.batch_size, T = batch.seq_len, d = c.d_model, H = c.n_heads, dh = c.head_dim();
  const std::size_t N = B * T;

  auto bind = [&](auto& p) -> Var {
    if constexpr (std::is_const_v<std::remove_reference_t<decltype(p)>>) {
      return g.constant(p.value);
    } else {
      return trainable ? g.parameter(p) : g.constant(p.value);
    }
  };

  Tensor ids({N}), pos({N}), mask({B, T});
  for (std::size_t i = 0; i < N; ++i) {
    const int id = batch.ids[i];
    require(id >= 0 && static_cast<std::size_t>(id) < c.vocab_size, ErrorKind::kInvalidArgument,
            "token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(c.vocab_size));
    ids[i] = id;
    pos[i] = static_cast<double>(i % T);
    mask[i] = batch.mask[i] != 0 ? 1.0 : 0.0;
  }
  const Var ids_v = g.constant(std::move(ids));
  const Var pos_v = g.constant(std::move(pos));
  const Var mask_v = g.constant(std::move(mask));

  BuiltForward out;
  Var x;
  if (hidden) {
    require(hidden->shape == Shape{N, d}, ErrorKind::kShape,
            "resume hidden state " + to_string(hidden->shape) + " != " + to_string(Shape{N, d}));
    x = g.constant(*hidden);
  } else {
    x = g.add(g.embedding(bind(model.token_embedding), ids_v), g.embedding(bind(model.position_embedding), pos_v));
    if (c.type_vocab_size > 0) x = g.add(x, g.embedding(bind(model.type_embedding), g.constant(Tensor({N}, 0.0))));
    x = g.layernorm(x, bind(model.embedding_ln_gamma), bind(model.embedding_ln_beta), c.layer_norm_eps);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  auto heads = [&](Var v) { return g.transpose(g.reshape(v, {B, T, H, dh}), {0, 2, 1, 3}); };
  for (std::size_t l = first_layer; l < c.n_layers; ++l) {
    if (model.is_pruned(l)) continue;
    out.layer_inputs.emplace_back(l, x);
    auto& L = model.layer(l);
    const Var q = heads(g.add_bias(g.matmul(x, bind(L.wq)), bind(L.bq)));
    const Var k = heads(g.add_bias(g.matmul(x, bind(L.wk)), bind(L.bk)));
    const Var v = heads(g.add_bias(g.matmul(x, bind(L.wv)), bind(L.bv)));
    const Var attn = g.masked_softmax(g.scale(g.matmul(q, k, true), inv_sqrt_dh), mask_v);
    const Var ctx = g.reshape(g.transpose(g.matmul(attn, v), {0, 2, 1, 3}), {N, d});
    const Var attn_out = g.add_bias(g.matmul(ctx, bind(L.wo)), bind(L.bo));
    const Var x1 = g.layernorm(g.add(x, attn_out), bind(L.ln1_gamma), bind(L.ln1_beta), c.layer_norm_eps);
    const Var h = g.gelu(g.add_bias(g.matmul(x1, bind(L.w1)), bind(L.b1)));
    const Var ffn = g.add_bias(g.matmul(h, bind(L.w2)), bind(L.b2));
    x = g.layernorm(g.add(x1, ffn), bind(L.ln2_gamma), bind(L.ln2_beta), c.layer_norm_eps);
    out.layer_outputs.emplace_back(l, x);
    out.attention.push_back(attn);
  }

  std::vector<std::size_t> first_rows(B);
  for (std::size_t b = 0; b < B; ++b) first_rows[b] = b * T;
  out.pooled = g.tanh(g.add_bias(g.matmul(g.gather_rows(x, first_rows), bind(model.pooler_w)), bind(model.pooler_b)));
  out.logits = g.add_bias(g.matmul(out.pooled, bind(model.classifier_w)), bind(model.classifier_b));
  return out;
}

}  // namespace

Var build_logits(Graph& g, Model& model, const TokenBatch& batch, bool trainable) {
  return build(g, model, batch, trainable).logits;
}

ForwardResult forward(const Model& model, const TokenBatch& batch, bool capture) {
  Graph g;
  g.release_intermediates(true);
  const BuiltForward built = build(g, model, batch, false);
  g.retain(built.logits);
  if (capture) {
    g.retain(built.pooled);
    for (const auto& lo : built.layer_outputs) g.retain(lo.second);
    for (Var a : built.attention) g.retain(a);
  }
  g.forward();
  ForwardResult result;
  result.logits = g.value(built.logits);
  if (!capture) return result;

  const std::size_t B = batch.batch_size, T = batch.seq_len, d = model.config().d_model;
  LayerCaches caches;
  caches.tokens_per_sample.resize(B);
  std::size_t n_valid = 0;
  for (std::size_t b = 0; b < B; ++b) n_valid += (caches.tokens_per_sample[b] = batch.valid_tokens(b));
  for (std::size_t i = 0; i < built.layer_outputs.size(); ++i) {
    const auto& [layer, var] = built.layer_outputs[i];
    const Tensor& x = g.value(var);
    LayerCapture cap;
    cap.layer = layer;
    cap.activations = Tensor({n_valid, d});
    std::size_t row = 0;
    for (std::size_t r = 0; r < B * T; ++r) {
      if (batch.mask[r] == 0) continue;
      std::copy_n(x.data.data() + r * d, d, cap.activations.data.data() + row * d);
      ++row;
    }
    cap.attention = g.value(built.attention[i]);
    caches.layers.push_back(std::move(cap));
  }
  caches.pooled = g.value(built.pooled);
  result.caches = std::move(caches);
  return result;
}

std::vector<std::pair<std::size_t, Tensor>> layer_inputs(const Model& model, const TokenBatch& batch) {
  Graph g;
  g.release_intermediates(true);
  const BuiltForward built = build(g, model, batch, false);
  for (const auto& li : built.layer_inputs) g.retain(li.second);
  g.forward();
  std::vector<std::pair<std::size_t, Tensor>> out;
  for (const auto& [layer, var] : built.layer_inputs) out.emplace_back(layer, g.value(var));
  return out;
}

Tensor logits_from(const Model& model, const TokenBatch& batch, std::size_t first_layer, const Tensor& hidden) {
  require(first_layer <= model.config().n_layers, ErrorKind::kInvalidArgument,
          "resume layer " + std::to_string(first_layer) + " out of range");
  Graph g;
  g.release_intermediates(true);
  const BuiltForward built = build(g, model, batch, false, first_layer, &hidden);
  g.retain(built.logits);
  g.forward();
  return g.value(built.logits);
}

LossAndGrads loss_and_grads(Model& model, const TokenBatch& batch) {
  require(batch.batch_size > 0, ErrorKind::kInvalidArgument, "loss_and_grads: empty batch");
  for (int y : batch.labels)
    require(y >= 0 && static_cast<std::size_t>(y) < model.config().n_classes, ErrorKind::kInvalidArgument,
            "label " + std::to_string(y) + " out of range for " + std::to_string(model.config().n_classes) + " classes");
  Graph g;
  const Var logits = build_logits(g, model, batch, true);
  Tensor labels({batch.batch_size});
  for (std::size_t i = 0; i < batch.batch_size; ++i) labels[i] = batch.labels[i];
  const Var loss = g.cross_entropy(logits, g.constant(std::move(labels)));
  g.forward();
  model.zero_grad();
  g.backward(loss);

  LossAndGrads out;
  out.loss = g.value(loss)[0];
  out.logits = g.value(logits);
  for (std::size_t l : model.live_layers()) {
    LayerGradients lg;
    lg.layer = l;
    for (const Parameter* p : std::as_const(model).layer(l).parameters()) lg.grads.push_back(p->grad);
    out.layers.push_back(std::move(lg));
  }
  return out;
}

double accuracy(const Model& model, std::span<const TokenBatch> batches) {
  std::size_t correct = 0, total = 0;
  for (const TokenBatch& b : batches) {
    const Tensor logits = forward(model, b).logits;
    const std::size_t C = model.config().n_classes;
    for (std::size_t r = 0; r < b.batch_size; ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits[r * C + c] > logits[r * C + best]) best = c;
      correct += static_cast<int>(best) == b.labels[r];
      ++total;
    }
  }
  require(total > 0, ErrorKind::kInvalidArgument, "accuracy: empty evaluation set");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Parameter accounting

std::size_t per_layer_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norms = 2 * 2 * d;
  return attention + ffn + norms;
}

std::size_t param_count(const ModelConfig& c, const std::vector<bool>& prune_mask) {
  require(prune_mask.empty() || prune_mask.size() == c.n_layers, ErrorKind::kInvalidArgument,
          "prune mask has " + std::to_string(prune_mask.size()) + " entries for " + std::to_string(c.n_layers) + " layers");
  const std::size_t d = c.d_model;
  const std::size_t embeddings = (c.vocab_size + c.max_seq_len + c.type_vocab_size) * d + 2 * d;
  const std::size_t pooler = d * d + d;
  const std::size_t classifier = d * c.n_classes + c.n_classes;
  std::size_t live = c.n_layers;
  for (bool p : prune_mask) live -= p ? 1 : 0;
  return embeddings + live * per_layer_param_count(c) + pooler + classifier;
}

double size_gb(std::size_t param_count, double bytes_per_param) {
  return static_cast<double>(param_count) * bytes_per_param / static_cast<double>(std::size_t{1} << 30);
}

}  // namespace prunefuse
