#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "prunefuse/error.hpp"
#include "prunefuse/model.hpp"

using namespace prunefuse;

namespace {

ModelConfig small_config(std::size_t layers = 4, std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = layers;
  c.seed = seed;
  return c;
}

TokenBatch sample_batch() {
  std::vector<Sample> s = {{{1, 2, 3, 4, 5}, 0},
                           {{1, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40}, 1},
                           {{1, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 9}, 3},
                           {{1, 200, 201}, 2}};
  return tokenize_batch(s);
}

std::vector<double> logits_of(const Model& m, const TokenBatch& b) { return forward(m, b).logits.to_vector(); }

void zero_layer(EncoderLayer& L) {
  for (Parameter* p : L.parameters()) p->value.fill(0.0);
  L.ln1_gamma.value.fill(1.0);
  L.ln2_gamma.value.fill(1.0);
}

}  // namespace

TEST(Model, AllLayersPrunedEqualsClassifierOfEmbeddings) {
  Model m(small_config(3));
  for (std::size_t l = 0; l < 3; ++l) m.prune(l);
  const TokenBatch b = sample_batch();
  const auto got = logits_of(m, b);

  // Independent path: embeddings -> layernorm -> pooler on [CLS] -> classifier.
  const std::size_t d = m.config().d_model, T = b.seq_len;
  Graph g;
  Tensor ids({b.batch_size}), pos({b.batch_size}, 0.0);
  for (std::size_t i = 0; i < b.batch_size; ++i) ids[i] = b.ids[i * T];
  Var x = g.add(g.embedding(g.constant(m.token_embedding.value), g.constant(ids)),
                g.embedding(g.constant(m.position_embedding.value), g.constant(pos)));
  x = g.layernorm(x, g.constant(m.embedding_ln_gamma.value), g.constant(m.embedding_ln_beta.value), m.config().layer_norm_eps);
  const Var pooled = g.tanh(g.add_bias(g.matmul(x, g.constant(m.pooler_w.value)), g.constant(m.pooler_b.value)));
  const Var logits = g.add_bias(g.matmul(pooled, g.constant(m.classifier_w.value)), g.constant(m.classifier_b.value));
  g.forward();
  ASSERT_EQ(g.value(logits).size(), got.size());
  (void)d;
  EXPECT_EQ(g.value(logits).to_vector(), got);
}

TEST(Model, ZeroEffectLayerPrunesWithBitIdenticalLogits) {
  // eps = 0 and a +-1 hidden state make the post-layernorms exact identities,
  // so a layer with zero attention/FFN weights passes its input through.
  ModelConfig c = small_config(4);
  c.layer_norm_eps = 0.0;
  Model m(c);
  m.embedding_ln_gamma.value.fill(0.0);
  for (std::size_t i = 0; i < c.d_model; ++i) m.embedding_ln_beta.value[i] = (i % 2 == 0) ? 1.0 : -1.0;
  zero_layer(m.layer(0));
  const TokenBatch b = sample_batch();
  const auto before = logits_of(m, b);
  m.prune(0);
  EXPECT_EQ(logits_of(m, b), before);
}

TEST(Model, ZeroEffectLayerWithDefaultEpsOnlyMovesThroughLayernorm) {
  Model m(small_config(4));
  zero_layer(m.layer(2));
  const TokenBatch b = sample_batch();
  const auto before = logits_of(m, b);
  m.prune(2);
  const auto after = logits_of(m, b);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-9);
}

TEST(Model, FixedSeedGivesBitIdenticalLogits) {
  const TokenBatch b = sample_batch();
  EXPECT_EQ(logits_of(Model(small_config(4, 8)), b), logits_of(Model(small_config(4, 8)), b));
  EXPECT_NE(logits_of(Model(small_config(4, 8)), b), logits_of(Model(small_config(4, 9)), b));
}

TEST(Model, CaptureDoesNotChangeLogitsAndCachesAreConsistent) {
  Model m(small_config(4));
  m.prune(1);
  const TokenBatch b = sample_batch();
  const ForwardResult plain = forward(m, b, false);
  const ForwardResult cap = forward(m, b, true);
  EXPECT_EQ(plain.logits.to_vector(), cap.logits.to_vector());
  ASSERT_TRUE(cap.caches.has_value());
  const LayerCaches& cc = *cap.caches;
  ASSERT_EQ(cc.layers.size(), 3u);
  EXPECT_EQ(cc.layers[0].layer, 0u);
  EXPECT_EQ(cc.layers[1].layer, 2u);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < b.batch_size; ++i) {
    EXPECT_EQ(cc.tokens_per_sample[i], b.valid_tokens(i));
    valid += b.valid_tokens(i);
  }
  const std::size_t T = b.seq_len, H = m.config().n_heads;
  for (const LayerCapture& lc : cc.layers) {
    EXPECT_EQ(lc.activations.shape, (Shape{valid, m.config().d_model}));
    ASSERT_EQ(lc.attention.shape, (Shape{b.batch_size, H, T, T}));
    for (std::size_t s = 0; s < b.batch_size; ++s)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t q = 0; q < b.valid_tokens(s); ++q) {
          const double* row = lc.attention.data.data() + ((s * H + h) * T + q) * T;
          double sum = 0.0;
          for (std::size_t k = 0; k < T; ++k) {
            if (b.mask[s * T + k] == 0) EXPECT_EQ(row[k], 0.0);
            sum += row[k];
          }
          EXPECT_NEAR(sum, 1.0, 1e-9);
        }
  }
  EXPECT_EQ(cc.pooled.shape, (Shape{b.batch_size, m.config().d_model}));
}

TEST(Model, PruningKeepsOutputShapeAndRejectsBadIndices) {
  Model m(small_config(4));
  const TokenBatch b = sample_batch();
  const Shape full = forward(m, b).logits.shape;
  m.prune(3);
  EXPECT_EQ(forward(m, b).logits.shape, full);
  EXPECT_THROW(m.prune(3), Error);
  EXPECT_THROW(m.prune(4), Error);
  EXPECT_EQ(m.live_layers(), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Model, PruneThenForwardMatchesModelWithoutThatComputation) {
  // Pruning layer 1 equals resuming at layer 2 from the output of layer 0.
  Model m(small_config(4));
  const TokenBatch b = sample_batch();
  const auto inputs = layer_inputs(m, b);
  Model pruned = m;
  pruned.prune(1);
  const Tensor resumed = logits_from(m, b, 2, inputs[1].second);
  EXPECT_EQ(logits_of(pruned, b), resumed.to_vector());
}

TEST(Model, ResumeFromEachLayerInputReproducesLogits) {
  Model m(small_config(5));
  m.prune(3);
  const TokenBatch b = sample_batch();
  const auto full = logits_of(m, b);
  for (const auto& [layer, hidden] : layer_inputs(m, b)) EXPECT_EQ(logits_from(m, b, layer, hidden).to_vector(), full) << layer;
}

TEST(Model, TokenOutOfRangeIsError) {
  Model m(small_config(2));
  TokenBatch b = tokenize_batch(std::vector<Sample>{{{1, 256}, 0}});
  try {
    forward(m, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(Model, DuplicatedSampleHasSameMeanLoss) {
  Model m(small_config(3));
  const Sample s{{1, 4, 8, 15, 16, 23, 42}, 2};
  const double one = loss_and_grads(m, tokenize_batch(std::vector<Sample>{s})).loss;
  const double two = loss_and_grads(m, tokenize_batch(std::vector<Sample>{s, s})).loss;
  EXPECT_EQ(one, two);
}

TEST(Model, PrunedLayerHasNoGradientBundle) {
  Model m(small_config(4));
  m.prune(2);
  const LossAndGrads lg = loss_and_grads(m, sample_batch());
  ASSERT_EQ(lg.layers.size(), 3u);
  for (const LayerGradients& g : lg.layers) EXPECT_NE(g.layer, 2u);
  for (const Parameter* p : std::as_const(m).layer(2).parameters())
    for (double v : p->grad.data) EXPECT_EQ(v, 0.0);
}

TEST(Model, EmptyBatchIsError) {
  Model m(small_config(2));
  TokenBatch b;
  EXPECT_THROW(loss_and_grads(m, b), Error);
}

TEST(Model, LossGradientsMatchFiniteDifferences) {
  Model m(small_config(3, 21));
  const TokenBatch b = sample_batch();
  loss_and_grads(m, b);
  std::vector<Parameter*> ps = m.parameters();
  std::mt19937_64 rng(4);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    Parameter* p = ps[std::uniform_int_distribution<std::size_t>(0, ps.size() - 1)(rng)];
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p->value.size() - 1)(rng);
    const double ana = p->grad[i];
    const double x0 = p->value[i];
    p->value[i] = x0 + h;
    const double up = loss_and_grads(m, b).loss;
    p->value[i] = x0 - h;
    const double dn = loss_and_grads(m, b).loss;
    p->value[i] = x0;
    loss_and_grads(m, b);
    const double num = (up - dn) / (2 * h);
    const double scale = std::max({std::abs(num), std::abs(ana), 1e-7});
    EXPECT_LT(std::abs(num - ana) / scale, 1e-4) << p->name << "[" << i << "] " << ana << " vs " << num;
  }
}

TEST(ParamCount, BertBaseReference) {
  EXPECT_EQ(param_count(bert_base_reference()), 109489930u);
  EXPECT_EQ(per_layer_param_count(bert_base_reference()), 7087872u);
}

TEST(ParamCount, DeskConfigMatchesHandFormulaAndEnumeration) {
  ModelConfig c;  // vocab 256, d 32, heads 4, d_ff 64, 12 layers, 4 classes, seq 32
  // Per weight matrix: embeddings 256*32 + 32*32, embedding LN 2*32;
  // per layer Q,K,V,O 4*(32*32 + 32), FFN 32*64 + 64 + 64*32 + 32, two LNs 4*32;
  // pooler 32*32 + 32; classifier 32*4 + 4.
  const std::size_t emb = 256 * 32 + 32 * 32 + 2 * 32;
  const std::size_t layer = 4 * (32 * 32 + 32) + (32 * 64 + 64 + 64 * 32 + 32) + 4 * 32;
  const std::size_t head = 32 * 32 + 32 + 32 * 4 + 4;
  EXPECT_EQ(param_count(c), emb + 12 * layer + head);
  EXPECT_EQ(param_count(c), 112996u);
  Model m(c);
  EXPECT_EQ(m.live_parameter_count(), param_count(c));
  m.prune(4);
  m.prune(7);
  EXPECT_EQ(m.live_parameter_count(), param_count(c, m.prune_mask()));
}

TEST(ParamCount, EachPrunedLayerRemovesPerLayerCount) {
  for (const ModelConfig& c : {ModelConfig{}, bert_base_reference()}) {
    std::vector<bool> mask(c.n_layers, false);
    const std::size_t full = param_count(c);
    for (std::size_t k = 0; k < c.n_layers; ++k) {
      mask[(k * 5) % c.n_layers] = true;
      EXPECT_EQ(param_count(c, mask), full - (k + 1) * per_layer_param_count(c));
    }
  }
}

TEST(SizeGb, Arithmetic) {
  EXPECT_EQ(size_gb(0), 0.0);
  EXPECT_EQ(size_gb(std::size_t{1} << 30), 4.0);
  EXPECT_NEAR(size_gb(109489930), 109489930.0 * 4.0 / 1073741824.0, 1e-15);
  EXPECT_NEAR(size_gb(109489930), 0.4079, 5e-5);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  Model m(small_config(3, 17));
  m.prune(1);
  std::stringstream ss;
  save_checkpoint(m, ss);
  const Model r = load_checkpoint(ss);
  EXPECT_EQ(r.config(), m.config());
  EXPECT_EQ(r.prune_mask(), m.prune_mask());
  const auto a = m.all_parameters();
  const auto b = r.all_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value.to_vector(), b[i]->value.to_vector()) << a[i]->name;
}

TEST(Checkpoint, CorruptionIsDetected) {
  Model m(small_config(2, 17));
  std::stringstream ss;
  save_checkpoint(m, ss);
  std::string bytes = ss.str();
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x5a;
  std::stringstream bad(flipped);
  EXPECT_THROW(load_checkpoint(bad), Error);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(load_checkpoint(truncated), Error);
  std::stringstream garbage("not a checkpoint");
  EXPECT_THROW(load_checkpoint(garbage), Error);
}
