#include "stimseg/checks.hpp"

#include "stimseg/losses.hpp"
#include "stimseg/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace stimseg::checks {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Dense random_dense(int rows, int cols, double scale, Rng& rng) {
  Dense d(rows, cols);
  for (auto& v : d.a) v = scale * rng.normal();
  return d;
}

Matrix to_matrix(const Dense& d) {
  Matrix m(d.rows, d.cols);
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) m(i, j) = d(i, j);
  return m;
}

Dense add(const Dense& a, const Dense& b) {
  Dense out = a;
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] += b.a[i];
  return out;
}

Dense rows_of(const Dense& a, int start, int count) {
  Dense out(count, a.cols);
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < a.cols; ++j) out(i, j) = a(start + i, j);
  return out;
}

Dense stack(const Dense& top, const Dense& bottom) {
  Dense out(top.rows + bottom.rows, top.cols);
  for (int i = 0; i < top.rows; ++i)
    for (int j = 0; j < top.cols; ++j) out(i, j) = top(i, j);
  for (int i = 0; i < bottom.rows; ++i)
    for (int j = 0; j < top.cols; ++j) out(top.rows + i, j) = bottom(i, j);
  return out;
}

Dense oracle_ffn(const Dense& x, const FeedForward& ffn) {
  return oracle_linear(oracle_gelu(oracle_linear(x, ffn.fc1)), ffn.fc2);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

CheckResult finish(CheckResult r, double tolerance, Clock::time_point t0, const std::string& unit) {
  r.seconds = elapsed(t0);
  r.passed = r.worst < tolerance;
  std::ostringstream os;
  os << "worst " << unit << " " << std::scientific << std::setprecision(3) << r.worst
     << " (tolerance " << tolerance << ")";
  r.detail = os.str();
  return r;
}

// Central difference of `f` with respect to entry `i` of `m`.
double central_difference(Matrix& m, Index i, const std::function<double()>& f) {
  constexpr double h = 1e-5;
  const double saved = m.data()[i];
  m.data()[i] = saved + h;
  const double up = f();
  m.data()[i] = saved - h;
  const double down = f();
  m.data()[i] = saved;
  return (up - down) / (2.0 * h);
}

Matrix random_binary(Index rows, Index cols, double density, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < density ? 1.0 : 0.0;
  return m;
}

Vocabulary check_vocabulary() {
  std::vector<std::string> texts;
  for (int e = 0; e < kNumEmotions; ++e) {
    texts.push_back(explanation_for(EmotionId(e), static_cast<ShapeKind>(e % 3)));
  }
  return build_vocabulary(texts, prompt_vocabulary());
}

}  // namespace

Dense to_dense(const Matrix& m) {
  Dense d(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) d(i, j) = m(i, j);
  return d;
}

double max_abs_diff(const Dense& a, const Matrix& b) {
  if (a.rows != b.rows() || a.cols != b.cols()) return INFINITY;
  double worst = 0.0;
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) worst = std::max(worst, std::abs(a(i, j) - b(i, j)));
  return worst;
}

Dense oracle_linear(const Dense& x, const Linear& layer) {
  const Dense w = to_dense(layer.weight.value());
  const Dense b = to_dense(layer.bias.value());
  Dense out(x.rows, w.cols);
  for (int i = 0; i < x.rows; ++i) {
    for (int j = 0; j < w.cols; ++j) {
      double s = b(0, j);
      for (int k = 0; k < x.cols; ++k) s += x(i, k) * w(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

Dense oracle_layer_norm(const Dense& x, const LayerNorm& norm) {
  const Dense g = to_dense(norm.gamma.value());
  const Dense b = to_dense(norm.beta.value());
  Dense out(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < x.cols; ++j) mu += x(i, j);
    mu /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= x.cols;
    for (int j = 0; j < x.cols; ++j) {
      out(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
    }
  }
  return out;
}

Dense oracle_gelu(const Dense& x) {
  Dense out = x;
  for (auto& v : out.a) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return out;
}

Dense oracle_attention(const Dense& queries, const Dense& keys_values,
                       const MultiHeadAttention& attn,
                       const std::function<bool(int, int)>& visible) {
  const Dense q = oracle_linear(queries, attn.q_proj);
  const Dense k = oracle_linear(keys_values, attn.k_proj);
  const Dense v = oracle_linear(keys_values, attn.v_proj);
  const int dim = q.cols;
  const int hd = dim / attn.heads;
  Dense merged(q.rows, dim);
  for (int h = 0; h < attn.heads; ++h) {
    for (int i = 0; i < q.rows; ++i) {
      std::vector<double> w(static_cast<std::size_t>(k.rows), 0.0);
      double mx = -INFINITY;
      for (int j = 0; j < k.rows; ++j) {
        if (visible && !visible(i, j)) {
          w[j] = -INFINITY;
          continue;
        }
        double s = 0.0;
        for (int c = 0; c < hd; ++c) s += q(i, h * hd + c) * k(j, h * hd + c);
        w[j] = s / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (auto& x : w) {
        x = std::isinf(x) ? 0.0 : std::exp(x - mx);
        z += x;
      }
      for (int c = 0; c < hd; ++c) {
        double s = 0.0;
        for (int j = 0; j < k.rows; ++j) s += w[j] / z * v(j, h * hd + c);
        merged(i, h * hd + c) = s;
      }
    }
  }
  return oracle_linear(merged, attn.out_proj);
}

std::pair<Dense, Dense> oracle_mixer_block(const Dense& queries, const Dense& vision,
                                           const MixerBlock& b) {
  const Dense h = oracle_layer_norm(queries, b.self_norm);
  Dense q = add(queries, oracle_attention(h, h, b.self_attn));
  q = add(q, oracle_attention(oracle_layer_norm(q, b.q2v_query_norm),
                              oracle_layer_norm(vision, b.q2v_vision_norm), b.q2v_attn));
  q = add(q, oracle_ffn(oracle_layer_norm(q, b.ffn_norm), b.ffn));
  const Dense v = add(vision, oracle_attention(oracle_layer_norm(vision, b.v2q_vision_norm),
                                               oracle_layer_norm(q, b.v2q_query_norm), b.v2q_attn));
  return {q, v};
}

Dense oracle_decode_train(const LanguageDecoder& decoder, const TokenEmbedding& embedding,
                          const Dense& vision, const Dense& prefix,
                          const std::vector<std::int64_t>& gold) {
  const Dense table = to_dense(embedding.table.value());
  const Dense pos = to_dense(decoder.positions.value());
  const int lf = prefix.rows;
  const int lt = static_cast<int>(gold.size());
  Dense words(lt, table.cols);
  for (int i = 0; i < lt; ++i)
    for (int j = 0; j < table.cols; ++j) words(i, j) = table(static_cast<int>(gold[i]), j);
  Dense x = add(stack(prefix, words), rows_of(pos, 0, lf + lt));
  const auto visible = [lf](int i, int j) { return j < lf || j <= i; };
  for (const auto& b : decoder.blocks) {
    const Dense h = oracle_layer_norm(x, b.self_norm);
    x = add(x, oracle_attention(h, h, b.self_attn, visible));
    x = add(x, oracle_attention(oracle_layer_norm(x, b.cross_norm),
                                oracle_layer_norm(vision, b.vision_norm), b.cross_attn));
    x = add(x, oracle_ffn(oracle_layer_norm(x, b.ffn_norm), b.ffn));
  }
  const Dense hidden = oracle_layer_norm(rows_of(x, lf, lt), decoder.final_norm);
  Dense logits(lt, table.rows);
  for (int i = 0; i < lt; ++i) {
    for (int t = 0; t < table.rows; ++t) {
      double s = 0.0;
      for (int c = 0; c < table.cols; ++c) s += hidden(i, c) * table(t, c);
      logits(i, t) = s;
    }
  }
  return logits;
}

Dense oracle_project(const EmotionProjector& projector, const TokenEmbedding& embedding,
                     const std::vector<std::int64_t>& ids) {
  const Dense table = to_dense(embedding.table.value());
  Dense rows(static_cast<int>(ids.size()), table.cols);
  for (int i = 0; i < rows.rows; ++i)
    for (int j = 0; j < table.cols; ++j) rows(i, j) = table(static_cast<int>(ids[i]), j);
  return oracle_linear(rows, projector.linear);
}

Dense oracle_adapt(const PrefixAdapter& adapter, const Dense& rows) {
  return oracle_linear(oracle_gelu(oracle_linear(rows, adapter.fc1)), adapter.fc2);
}

double oracle_dice(const Matrix& logits, const Matrix& target, double eps) {
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits.data()[i]);
    inter += p * target.data()[i];
    sp += p;
    sg += target.data()[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

double oracle_bce(const Matrix& logits, const Matrix& target) {
  double total = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits.data()[i]);
    const double g = target.data()[i];
    total += -(g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
  }
  return total / static_cast<double>(logits.size());
}

double oracle_iou(const BinaryMask& a, const BinaryMask& b) {
  long both = 0, either = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (a.at(y, x) && b.at(y, x)) ++both;
      if (a.at(y, x) || b.at(y, x)) ++either;
    }
  }
  if (either == 0) return 1.0;
  return static_cast<double>(both) / static_cast<double>(either);
}

double oracle_box_iou(const BinaryMask& a, const BinaryMask& b) {
  auto box_mask = [](const BinaryMask& m) {
    int r0 = m.height, r1 = -1, c0 = m.width, c1 = -1;
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        if (!m.at(y, x)) continue;
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x);
      }
    }
    BinaryMask out(m.height, m.width);
    for (int y = r0; y <= r1; ++y)
      for (int x = c0; x <= c1; ++x) out.at(y, x) = 1;
    return out;
  };
  return oracle_iou(box_mask(a), box_mask(b));
}

void randomize(ParameterSet& params, Rng& rng, double scale) {
  for (auto& p : params.items()) {
    Matrix& m = p.tensor.mutable_value();
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  }
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-6});
  return std::sqrt(diff) / denom;
}

CheckResult check_mixer_block(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"oracle: mixer_block", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    ParameterSet params;
    const int dim = 32;
    MixerBlock block(params, "b", dim, 4, 4, rng);
    randomize(params, rng, 0.3);
    const Dense q = random_dense(static_cast<int>(rng.uniform_int(1, 9)), dim, 1.0, rng);
    const Dense v = random_dense(static_cast<int>(rng.uniform_int(4, 64)), dim, 1.0, rng);
    const auto [oq, ov] = oracle_mixer_block(q, v, block);
    const auto [aq, av] = block.forward(Tensor(to_matrix(q)), Tensor(to_matrix(v)));
    r.worst = std::max({r.worst, max_abs_diff(oq, aq.value()), max_abs_diff(ov, av.value())});
  }
  return finish(r, 1e-5, t0, "abs diff");
}

CheckResult check_decode_train(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"oracle: decode_train", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    ParameterSet params;
    const int dim = 64;
    const int vocab = static_cast<int>(rng.uniform_int(12, 60));
    const int lf = rng.uniform() < 0.5 ? 1 : 9;
    TokenEmbedding emb(params, "emb", static_cast<std::size_t>(vocab), dim, rng);
    LanguageDecoder dec(params, "dec", dim, 4, 2, 4, lf + 25, rng);
    randomize(params, rng, 0.3);
    const int lt = static_cast<int>(rng.uniform_int(1, 16));
    std::vector<std::int64_t> gold(static_cast<std::size_t>(lt));
    for (auto& g : gold) g = rng.uniform_int(0, vocab - 1);
    const Dense prefix = random_dense(lf, dim, 1.0, rng);
    const Dense vision = random_dense(static_cast<int>(rng.uniform_int(4, 64)), dim, 1.0, rng);
    const Dense expect = oracle_decode_train(dec, emb, vision, prefix, gold);
    const Tensor got = dec.decode_train(emb, Tensor(to_matrix(vision)), Tensor(to_matrix(prefix)), gold);
    r.worst = std::max(r.worst, max_abs_diff(expect, got.value()));
  }
  return finish(r, 1e-5, t0, "abs diff");
}

CheckResult check_project(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"oracle: project", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    ParameterSet params;
    const int vocab = static_cast<int>(rng.uniform_int(20, 80));
    TokenEmbedding emb(params, "emb", static_cast<std::size_t>(vocab), 64, rng);
    EmotionProjector proj(params, "proj", 64, 32, rng);
    randomize(params, rng, 0.5);
    std::vector<std::int64_t> ids(8);
    for (auto& id : ids) id = rng.uniform_int(0, vocab - 1);
    const Dense expect = oracle_project(proj, emb, ids);
    r.worst = std::max(r.worst, max_abs_diff(expect, proj.project(emb, ids).value()));
  }
  return finish(r, 1e-5, t0, "abs diff");
}

CheckResult check_adapt(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"oracle: adapt", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    ParameterSet params;
    PrefixAdapter adapter(params, "adapter", 32, 64, rng);
    randomize(params, rng, 0.5);
    const bool single = rng.uniform() < 0.5;
    const Dense prompt = random_dense(8, 32, 1.0, rng);
    const Dense masks = random_dense(single ? 1 : 8, 32, 1.0, rng);
    const Dense expect = oracle_adapt(adapter, single ? stack(prompt, masks) : masks);
    const Tensor got =
        single ? adapter.adapt(Tensor(to_matrix(prompt)), Tensor(to_matrix(masks)))
               : adapter.adapt(std::nullopt, Tensor(to_matrix(masks)));
    r.worst = std::max(r.worst, max_abs_diff(expect, got.value()));
  }
  return finish(r, 1e-5, t0, "abs diff");
}

namespace {

// Relative error between the autodiff gradient of f at x0 and central
// differences over every entry.
double gradient_error(const Matrix& x0, const std::function<Tensor(const Tensor&)>& f) {
  Tensor x(x0, true);
  f(x).backward();
  const Matrix analytic = x.grad();
  Matrix probe = x0;
  std::vector<double> a, n;
  for (Index i = 0; i < probe.size(); ++i) {
    n.push_back(central_difference(probe, i, [&] {
      NoGradGuard ng;
      return f(Tensor(probe)).item();
    }));
    a.push_back(analytic.data()[i]);
  }
  return relative_error(a, n);
}

Matrix random_matrix(Index rows, Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

std::vector<std::int64_t> random_tokens(int length, int vocab, Rng& rng) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(length));
  for (auto& id : ids) id = rng.uniform_int(1, vocab - 1);
  return ids;
}

}  // namespace

CheckResult check_dice_gradient(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"gradient: dice", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const Matrix target = random_binary(4, 4, rng.uniform(), rng);
    const Matrix x0 = random_matrix(4, 4, 2.0, rng);
    r.worst = std::max(r.worst, gradient_error(x0, [&](const Tensor& x) {
      return dice_loss(x, target, 1.0);
    }));
  }
  return finish(r, 1e-3, t0, "relative error");
}

CheckResult check_focal_gradient(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"gradient: focal", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const Matrix target = random_binary(4, 4, rng.uniform(), rng);
    const Matrix x0 = random_matrix(4, 4, 2.0, rng);
    const FocalParams fp = FocalParams::standard(rng.uniform(0.05, 0.95), rng.uniform(0.0, 3.0));
    r.worst = std::max(r.worst, gradient_error(x0, [&](const Tensor& x) {
      return focal_loss(x, target, fp);
    }));
  }
  return finish(r, 1e-3, t0, "relative error");
}

CheckResult check_lang_gradient(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"gradient: lang", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int vocab = static_cast<int>(rng.uniform_int(5, 30));
    auto gold = random_tokens(8, vocab, rng);
    if (t % 2 == 1) gold[3] = Vocabulary::kPad;
    const Matrix x0 = random_matrix(8, vocab, 2.0, rng);
    r.worst = std::max(r.worst, gradient_error(x0, [&](const Tensor& x) {
      return lang_loss(x, gold);
    }));
  }
  return finish(r, 1e-3, t0, "relative error");
}

ModelConfig tiny_config(Paradigm paradigm) {
  ModelConfig c = ModelConfig::toy();
  c.paradigm = paradigm;
  c.image_size = 16;
  c.seg_grid = 1;
  c.lang_grid = 2;
  c.d_k = 16;
  c.d_w = 16;
  c.d_h = 16;
  c.heads = 2;
  c.seg_heads = 2;
  c.encoder_depth = 1;
  c.mixer_blocks = 1;
  c.decoder_blocks = 1;
  c.mlp_ratio = 2;
  c.max_len = 9;
  return c;
}

Sample random_sample(const ModelConfig& config, const Vocabulary& vocab, EmotionId emotion,
                     int tokens, Rng& rng) {
  Sample s;
  s.image = Image(config.image_size, config.image_size);
  for (auto& v : s.image.pixels) v = rng.uniform();
  s.mask = BinaryMask(config.image_size, config.image_size);
  const double density = rng.uniform(0.2, 0.8);
  for (auto& v : s.mask.data) v = rng.uniform() < density ? 1 : 0;
  s.emotion = emotion;
  s.tokens = random_tokens(tokens, static_cast<int>(vocab.size()), rng);
  s.tokens.front() = Vocabulary::kBos;
  s.tokens.back() = Vocabulary::kEos;
  s.image_path = "random.png";
  s.split = "train";
  return s;
}

CheckResult check_total_gradient(Paradigm paradigm, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{std::string("gradient: total (") + to_string(paradigm) + ")", false, 0.0, 1, 0.0, {}};
  Rng rng(seed);
  ModelConfig cfg = tiny_config(paradigm);
  cfg.init_seed = seed;
  StimulusModel model(cfg, check_vocabulary());
  randomize(model.params(), rng, 0.4);
  std::vector<Sample> samples;
  samples.push_back(random_sample(cfg, model.vocab(), EmotionId(2), 8, rng));
  if (paradigm == Paradigm::MultiMasks) {
    samples.push_back(random_sample(cfg, model.vocab(), EmotionId(6), 8, rng));
    samples[1].image = samples[0].image;
  }
  std::vector<const Sample*> group;
  for (const auto& s : samples) group.push_back(&s);
  auto loss = [&] {
    return paradigm == Paradigm::SingleMask ? model.single_mask_loss(samples[0])
                                            : model.multi_mask_loss(group);
  };
  model.params().zero_grad();
  loss().total_tensor.backward();
  std::string worst_name;
  for (auto& p : model.params().items()) {
    Matrix& m = p.tensor.mutable_value();
    const Matrix analytic = p.tensor.has_grad() ? p.tensor.grad() : Matrix::Zero(m.rows(), m.cols());
    std::vector<double> a, n;
    const int probes = static_cast<int>(std::min<Index>(m.size(), 4));
    for (int k = 0; k < probes; ++k) {
      const Index i = rng.uniform_int(0, m.size() - 1);
      a.push_back(analytic.data()[i]);
      n.push_back(central_difference(m, i, [&] {
        NoGradGuard ng;
        return loss().total;
      }));
    }
    const double err = relative_error(a, n);
    if (err > r.worst) {
      r.worst = err;
      worst_name = p.name;
    }
  }
  r = finish(r, 1e-3, t0, "relative error");
  r.detail += " at " + worst_name;
  return r;
}

CheckResult check_dice_identity(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"identity: dice(p = g) = 0", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const Matrix g = random_binary(8, 8, rng.uniform(), rng);
    r.worst = std::max(r.worst, std::abs(dice_from_probs(g, g, 1.0)));
    // Saturated logits reproduce g exactly in double precision.
    const Matrix logits = (g.array() * 80.0 - 40.0).matrix();
    r.worst = std::max(r.worst, std::abs(dice_loss(Tensor(logits), g, 1.0).item()));
  }
  return finish(r, 1e-12, t0, "abs value");
}

CheckResult check_focal_bce(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"identity: focal(gamma 0, alpha 1) = BCE", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  const FocalParams fp{1.0, 1.0, 0.0};
  for (int t = 0; t < trials; ++t) {
    const Matrix g = random_binary(4, 4, rng.uniform(), rng);
    const Matrix x = random_matrix(4, 4, 4.0, rng);
    r.worst = std::max(r.worst, std::abs(focal_loss(Tensor(x), g, fp).item() - oracle_bce(x, g)));
  }
  return finish(r, 1e-9, t0, "abs diff");
}

CheckResult check_uniform_lang(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"identity: uniform logits give ln|V|", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int vocab = static_cast<int>(rng.uniform_int(5, 500));
    const auto gold = random_tokens(static_cast<int>(rng.uniform_int(2, 25)), vocab, rng);
    const Matrix logits =
        Matrix::Constant(static_cast<Index>(gold.size()), vocab, rng.uniform(-5.0, 5.0));
    const double got = lang_loss(Tensor(logits), gold).item();
    r.worst = std::max(r.worst, std::abs(got - std::log(static_cast<double>(vocab))));
  }
  return finish(r, 1e-9, t0, "abs diff");
}

CheckResult check_unannotated_gradient(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"identity: unannotated emotion tokens get zero gradient", false, 0.0, 1, 0.0, {}};
  Rng rng(seed);
  ModelConfig cfg = tiny_config(Paradigm::MultiMasks);
  cfg.init_seed = seed;
  StimulusModel model(cfg, check_vocabulary());
  randomize(model.params(), rng, 0.4);
  const std::vector<int> annotated = {1, 4, 6};
  std::vector<Sample> samples;
  for (const int e : annotated) {
    samples.push_back(random_sample(cfg, model.vocab(), EmotionId(e), 8, rng));
    samples.back().image = samples.front().image;
  }
  std::vector<const Sample*> group;
  for (const auto& s : samples) group.push_back(&s);

  const Image& image = samples.front().image;
  MixerOutput mixed = model.run_mixer(model.encode_seg(image), std::nullopt);
  const Tensor tokens(mixed.mask_tokens.value(), true);
  mixed.mask_tokens = tokens;
  const LossReport rep = model.multi_mask_loss_from(mixed, model.encode_lang(image), group);
  rep.total_tensor.backward();
  const Matrix& g = tokens.grad();
  double unannotated = 0.0;
  double annotated_norm = 0.0;
  for (int e = 0; e < kNumEmotions; ++e) {
    const bool used = std::find(annotated.begin(), annotated.end(), e) != annotated.end();
    const double n = g.row(e).cwiseAbs().maxCoeff();
    if (used) {
      annotated_norm = std::max(annotated_norm, n);
    } else {
      unannotated = std::max(unannotated, n);
    }
  }
  // Same objective as the public entry point.
  const double reference = model.multi_mask_loss(group).total;
  r.worst = unannotated;
  r.seconds = elapsed(t0);
  r.passed = unannotated == 0.0 && annotated_norm > 0.0 && std::abs(reference - rep.total) < 1e-12;
  std::ostringstream os;
  os << "max |grad| on unannotated rows " << unannotated << ", on annotated rows "
     << std::scientific << std::setprecision(3) << annotated_norm << " (must be exactly 0 / > 0)";
  r.detail = os.str();
  return r;
}

CheckResult check_geometry_metrics(int trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r{"metrics: iou / bbox / P@k vs brute force", false, 0.0, trials, 0.0, {}};
  Rng rng(seed);
  std::vector<double> ious;
  int mismatches = 0;
  for (int t = 0; t < trials; ++t) {
    BinaryMask a(16, 16), b(16, 16);
    const double da = t % 10 == 0 ? 0.0 : rng.uniform(0.0, 0.6);
    const double db = t % 15 == 0 ? 0.0 : rng.uniform(0.0, 0.6);
    for (auto& v : a.data) v = rng.uniform() < da ? 1 : 0;
    for (auto& v : b.data) v = rng.uniform() < db ? 1 : 0;
    const double seg = iou(a, b);
    mismatches += seg != oracle_iou(a, b);
    mismatches += box_iou(bbox_from_mask(a), bbox_from_mask(b)) != oracle_box_iou(a, b);
    ious.push_back(seg);
  }
  for (const double k : {0.25, 0.5}) {
    int hits = 0;
    for (const double v : ious) hits += v > k ? 1 : 0;
    mismatches += p_at_k(ious, k) != 100.0 * hits / static_cast<double>(ious.size());
  }
  r.worst = mismatches;
  r.seconds = elapsed(t0);
  r.passed = mismatches == 0;
  r.detail = std::to_string(mismatches) + " mismatches (exact comparison)";
  return r;
}

CheckResult check_text_metrics() {
  const auto t0 = Clock::now();
  CheckResult r{"metrics: BLEU / ROUGE-L fixtures", false, 0.0, 4, 0.0, {}};
  auto toks = [](std::string_view s) { return tokenize(s); };
  struct Fixture {
    double got;
    double expect;
  };
  // Expected values derived by hand:
  //   clipped unigram precision 1/3, c > r so no brevity penalty
  //   LCS 3, P 3/4, R 1, F = 2.44 * 0.75 / (1 + 1.44 * 0.75)
  //   p1 = p2 = 1, c = 3 < r = 6 so BP = exp(1 - 2)
  //   p1 = 2/4, p2 = 1/3, no brevity penalty, sqrt(1/6)
  const Fixture fixtures[] = {
      {bleu_n(toks("the the the"), toks("the cat"), 1), 1.0 / 3.0},
      {rouge_l(toks("a b c d"), toks("a c d")), 1.83 / 2.08},
      {bleu_n(toks("the cat sat"), toks("the cat sat on the mat"), 2), std::exp(-1.0)},
      {bleu_n(toks("a b a b"), toks("a b c"), 2), std::sqrt(1.0 / 6.0)},
  };
  for (const auto& f : fixtures) r.worst = std::max(r.worst, std::abs(f.got - f.expect));
  return finish(r, 1e-6, t0, "abs diff");
}

std::vector<CheckResult> oracle_suite(std::uint64_t seed) {
  return {check_mixer_block(100, seed), check_decode_train(100, seed + 1),
          check_project(100, seed + 2), check_adapt(100, seed + 3)};
}

std::vector<CheckResult> gradient_suite(std::uint64_t seed) {
  return {check_dice_gradient(25, seed), check_focal_gradient(25, seed + 1),
          check_lang_gradient(25, seed + 2), check_total_gradient(Paradigm::SingleMask, seed + 3),
          check_total_gradient(Paradigm::MultiMasks, seed + 4)};
}

std::vector<CheckResult> identity_suite(std::uint64_t seed) {
  return {check_dice_identity(50, seed), check_focal_bce(50, seed + 1),
          check_uniform_lang(50, seed + 2), check_unannotated_gradient(seed + 3)};
}

std::vector<CheckResult> metric_suite(std::uint64_t seed) {
  return {check_geometry_metrics(100, seed), check_text_metrics()};
}

void print(std::ostream& os, const CheckResult& r) {
  os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << ", " << r.trials
     << " trial(s), " << std::fixed << std::setprecision(2) << r.seconds << " s\n";
}

}  // namespace stimseg::checks
