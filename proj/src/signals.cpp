#include "prunefuse/signals.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include "prunefuse/error.hpp"
#include "prunefuse/format.hpp"
#include "prunefuse/kernels.hpp"

namespace prunefuse {

const std::array<std::string_view, kNumSignals>& signal_names() {
  static constexpr std::array<std::string_view, kNumSignals> kNames = {
      "inhibition",    "intensity",      "energy",         "task_mi",          "flow_mi",
      "grad_magnitude", "grad_fisher",   "weight_norm",    "weight_sparsity",  "weight_entropy",
      "attention_weight", "attention_entropy",
  };
  return kNames;
}

std::string_view to_string(Signal s) { return signal_names()[static_cast<std::size_t>(s)]; }

std::optional<Signal> signal_from_name(std::string_view name) {
  const auto& names = signal_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Signal>(i);
  return std::nullopt;
}

std::vector<double> SignalMatrix::column(Signal s) const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const SignalVector& r : rows) out.push_back(r[s]);
  return out;
}

ActivationSignals activation_signals(std::span<const double> a) {
  require(!a.empty(), ErrorKind::kInvalidArgument, "activation_signals: empty activation matrix");
  const auto& K = kernels::active();
  require(std::isfinite(K.sum_zeroed(a.size(), a.data())), ErrorKind::kNonFinite,
          "activation_signals: non-finite activation");
  const double n = static_cast<double>(a.size());
  return {K.sum(a.size(), a.data()) / n, K.sum_abs(a.size(), a.data()) / n, K.sum_sq(a.size(), a.data()) / n};
}

std::vector<double> sample_summaries(const Tensor& a, std::span<const std::size_t> rows_per_sample) {
  require(a.rank() == 2, ErrorKind::kShape, "sample_summaries: activations must be 2-D, got " + to_string(a.shape));
  const std::size_t d = a.shape[1];
  std::size_t total = 0;
  for (std::size_t r : rows_per_sample) total += r;
  require(total == a.shape[0], ErrorKind::kShape,
          "sample_summaries: row blocks cover " + std::to_string(total) + " rows, matrix has " + std::to_string(a.shape[0]));
  const auto& K = kernels::active();
  std::vector<double> out;
  out.reserve(rows_per_sample.size());
  std::size_t row = 0;
  for (std::size_t r : rows_per_sample) {
    if (r == 0) {
      out.push_back(0.0);
      continue;
    }
    out.push_back(K.sum(r * d, a.data.data() + row * d) / static_cast<double>(r * d));
    row += r;
  }
  return out;
}

MiEstimate task_relevance_mi(std::span<const double> summaries, std::span<const int> labels, std::size_t bins) {
  const std::size_t n = summaries.size();
  require(n == labels.size(), ErrorKind::kShape,
          "task_relevance_mi: " + std::to_string(n) + " summaries but " + std::to_string(labels.size()) + " labels");
  require(n >= 16, ErrorKind::kInvalidArgument, "task_relevance_mi: needs at least 16 samples, got " + std::to_string(n));
  require(bins >= 2, ErrorKind::kInvalidArgument, "task_relevance_mi: needs at least 2 bins");
  const std::set<int> classes(labels.begin(), labels.end());
  require(classes.size() >= 2, ErrorKind::kInvalidArgument, "task_relevance_mi: needs at least 2 distinct labels");

  // Thresholds at the empirical k/bins quantiles; equal values share a bin.
  std::vector<double> sorted(summaries.begin(), summaries.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (std::size_t k = 1; k < bins; ++k) cuts.push_back(sorted[k * n / bins]);

  std::vector<std::size_t> bin_of(n);
  std::set<std::size_t> used;
  for (std::size_t i = 0; i < n; ++i) {
    bin_of[i] = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), summaries[i]) - cuts.begin());
    used.insert(bin_of[i]);
  }
  if (used.size() < 2) return {0.0, true};

  const std::vector<int> cls(classes.begin(), classes.end());
  auto class_index = [&](int y) { return static_cast<std::size_t>(std::lower_bound(cls.begin(), cls.end(), y) - cls.begin()); };
  std::vector<double> joint(bins * cls.size(), 0.0), pa(bins, 0.0), py(cls.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = class_index(labels[i]);
    joint[bin_of[i] * cls.size() + c] += 1.0;
    pa[bin_of[i]] += 1.0;
    py[c] += 1.0;
  }
  const double nn = static_cast<double>(n);
  double mi = 0.0;
  for (std::size_t a = 0; a < bins; ++a)
    for (std::size_t c = 0; c < cls.size(); ++c) {
      const double j = joint[a * cls.size() + c];
      if (j > 0.0) mi += (j / nn) * std::log(j * nn / (pa[a] * py[c]));
    }
  return {std::max(0.0, mi), false};
}

double flow_relevance_mi(std::span<const double> s, std::span<const double> s_next) {
  const std::size_t n = s.size();
  require(n == s_next.size(), ErrorKind::kShape,
          "flow_relevance_mi: sample counts differ (" + std::to_string(n) + " vs " + std::to_string(s_next.size()) + ")");
  require(n >= 3, ErrorKind::kInvalidArgument, "flow_relevance_mi: needs at least 3 samples");
  const double nn = static_cast<double>(n);
  double ms = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ms += s[i];
    mt += s_next[i];
  }
  ms /= nn;
  mt /= nn;
  double var_s = 0.0, var_t = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    var_s += (s[i] - ms) * (s[i] - ms);
    var_t += (s_next[i] - mt) * (s_next[i] - mt);
    cov += (s[i] - ms) * (s_next[i] - mt);
  }
  var_s /= nn;
  var_t /= nn;
  cov /= nn;
  if (var_s == 0.0) return 0.0;
  const double beta = var_t > 0.0 ? cov / var_t : 0.0;
  double resid = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (s[i] - ms) - beta * (s_next[i] - mt);
    resid += r * r;
  }
  resid /= nn;
  return std::max(0.0, var_s - resid);
}

GradientSignals gradient_signals(std::span<const std::vector<Tensor>> batches) {
  require(!batches.empty(), ErrorKind::kInvalidArgument, "gradient_signals: no gradient batches");
  const auto& K = kernels::active();
  double abs_total = 0.0, sq_total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    std::size_t n = 0;
    double sa = 0.0, sq = 0.0;
    for (const Tensor& g : batches[b]) {
      sa += K.sum_abs(g.size(), g.data.data());
      sq += K.sum_sq(g.size(), g.data.data());
      n += g.size();
    }
    require(n > 0, ErrorKind::kInvalidArgument, "gradient_signals: empty gradient bundle");
    require(b == 0 || n == count, ErrorKind::kShape, "gradient_signals: bundles differ in size across batches");
    count = n;
    abs_total += sa;
    sq_total += sq;
  }
  const double denom = static_cast<double>(batches.size()) * static_cast<double>(count);
  return {abs_total / denom, sq_total / denom};
}

WeightSignals weight_signals(std::span<const double> w) {
  require(!w.empty(), ErrorKind::kInvalidArgument, "weight_signals: no weights");
  const auto& K = kernels::active();
  WeightSignals out;
  out.norm = std::sqrt(K.sum_sq(w.size(), w.data()));
  std::size_t zeros = 0;
  for (double v : w) zeros += std::fabs(v) <= kSparsityTau;
  out.sparsity = static_cast<double>(zeros) / static_cast<double>(w.size());
  const double l1 = K.sum_abs(w.size(), w.data());
  if (l1 == 0.0) {
    out.degenerate = true;
    return out;
  }
  double h = 0.0;
  for (double v : w) {
    const double p = std::fabs(v) / l1;
    h -= p * std::log(p + kLogEps);
  }
  out.entropy = h;
  return out;
}

WeightSignals weight_signals(std::span<const Tensor* const> matrices) {
  std::vector<double> flat;
  for (const Tensor* t : matrices) flat.insert(flat.end(), t->data.begin(), t->data.end());
  return weight_signals(std::span<const double>(flat));
}

AttentionSignals attention_signals(const Tensor& attention, std::span<const int> key_mask) {
  require(attention.rank() == 4 && attention.shape[2] == attention.shape[3], ErrorKind::kShape,
          "attention_signals: expected [B, H, T, T], got " + to_string(attention.shape));
  const std::size_t B = attention.shape[0], H = attention.shape[1], T = attention.shape[2];
  require(key_mask.size() == B * T, ErrorKind::kShape,
          "attention_signals: mask has " + std::to_string(key_mask.size()) + " entries, expected " + std::to_string(B * T));
  double weight_sum = 0.0, entropy_sum = 0.0;
  std::size_t samples = 0;
  std::vector<std::size_t> valid;
  for (std::size_t b = 0; b < B; ++b) {
    valid.clear();
    for (std::size_t t = 0; t < T; ++t)
      if (key_mask[b * T + t] != 0) valid.push_back(t);
    if (valid.empty()) continue;
    double w = 0.0, h = 0.0;
    for (std::size_t k = 0; k < H; ++k) {
      const double* head = attention.data.data() + (b * H + k) * T * T;
      for (std::size_t i : valid) {
        double row = 0.0;
        for (std::size_t j : valid) {
          const double a = head[i * T + j];
          row += a;
          h -= a * std::log(a + kLogEps);
        }
        require(std::fabs(row - 1.0) <= 1e-6, ErrorKind::kInvalidArgument,
                "attention_signals: row " + std::to_string(i) + " of head " + std::to_string(k) + " in sample " +
                    std::to_string(b) + " sums to " + format_double(row));
        w += row;
      }
    }
    const double n = static_cast<double>(valid.size());
    weight_sum += w / (static_cast<double>(H) * n * n);
    entropy_sum += h / static_cast<double>(H);
    ++samples;
  }
  require(samples > 0, ErrorKind::kInvalidArgument, "attention_signals: every sample is padding");
  return {weight_sum / static_cast<double>(samples), entropy_sum / static_cast<double>(samples)};
}

SignalMatrix build_signal_matrix(Model& model, std::span<const TokenBatch> probes) {
  require(!probes.empty(), ErrorKind::kInvalidArgument, "build_signal_matrix: no probe batches");
  const std::vector<std::size_t> live = model.live_layers();
  SignalMatrix m;
  m.layers = live;
  m.rows.assign(live.size(), SignalVector{});

  for (const TokenBatch& batch : probes) {
    const ForwardResult fr = forward(model, batch, true);
    const LayerCaches& caches = *fr.caches;
    const LossAndGrads lg = loss_and_grads(model, batch);

    std::vector<std::vector<double>> summaries;
    for (const LayerCapture& cap : caches.layers) summaries.push_back(sample_summaries(cap.activations, caches.tokens_per_sample));
    // The classifier input stands in for the successor of the last live layer.
    const std::size_t d = model.config().d_model;
    std::vector<double> pooled_summary(batch.batch_size);
    for (std::size_t b = 0; b < batch.batch_size; ++b)
      pooled_summary[b] = kernels::active().sum(d, caches.pooled.data.data() + b * d) / static_cast<double>(d);

    for (std::size_t i = 0; i < live.size(); ++i) {
      SignalVector v;
      const ActivationSignals act = activation_signals(caches.layers[i].activations.values());
      v[Signal::kInhibition] = act.inhibition;
      v[Signal::kIntensity] = act.intensity;
      v[Signal::kEnergy] = act.energy;
      v[Signal::kTaskMi] = task_relevance_mi(summaries[i], batch.labels).value;
      v[Signal::kFlowMi] = flow_relevance_mi(summaries[i], i + 1 < live.size() ? summaries[i + 1] : pooled_summary);
      const GradientSignals gs = gradient_signals(std::span<const std::vector<Tensor>>(&lg.layers[i].grads, 1));
      v[Signal::kGradMagnitude] = gs.magnitude;
      v[Signal::kGradFisher] = gs.fisher;
      const AttentionSignals as = attention_signals(caches.layers[i].attention, batch.mask);
      v[Signal::kAttentionWeight] = as.weight;
      v[Signal::kAttentionEntropy] = as.entropy;
      for (std::size_t s = 0; s < kNumSignals; ++s) m.rows[i].values[s] += v.values[s];
    }
  }
  const double nb = static_cast<double>(probes.size());
  for (std::size_t i = 0; i < live.size(); ++i) {
    for (double& x : m.rows[i].values) x /= nb;
    std::vector<const Tensor*> mats;
    for (const Parameter* p : std::as_const(model).layer(live[i]).weight_matrices()) mats.push_back(&p->value);
    const WeightSignals ws = weight_signals(std::span<const Tensor* const>(mats));
    m.rows[i][Signal::kWeightNorm] = ws.norm;
    m.rows[i][Signal::kWeightSparsity] = ws.sparsity;
    m.rows[i][Signal::kWeightEntropy] = ws.entropy;
  }
  for (const SignalVector& r : m.rows)
    for (double x : r.values) require(std::isfinite(x), ErrorKind::kNonFinite, "build_signal_matrix: non-finite signal");
  return m;
}

void write_signal_csv(std::ostream& out, const SignalMatrix& m) {
  out << "layer";
  for (std::string_view n : signal_names()) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    out << m.layers[i];
    for (double x : m.rows[i].values) out << ',' << format_double(x);
    out << '\n';
  }
}

}  // namespace prunefuse
