#include <doctest.h>

#include "stimseg/checks.hpp"
#include "stimseg/model.hpp"
#include "helpers.hpp"

#include <cmath>
#include <set>

using namespace stimseg;
using stimseg::testing::small_config;
using stimseg::testing::small_vocab;
using stimseg::testing::zero;

namespace {

Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

checks::Dense random_dense(int rows, int cols, Rng& rng) {
  checks::Dense d(rows, cols);
  for (auto& v : d.a) v = rng.normal();
  return d;
}

Matrix to_matrix(const checks::Dense& d) {
  Matrix m(d.rows, d.cols);
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) m(i, j) = d(i, j);
  return m;
}

}  // namespace

TEST_CASE("segmentation encoder produces one token per patch") {
  const StimulusModel model(ModelConfig::toy(), small_vocab());
  Rng rng(1);
  const Tensor v = model.encode_seg(random_image(64, rng));
  CHECK(v.rows() == 256);
  CHECK(v.cols() == 32);
  const Tensor l = model.encode_lang(random_image(64, rng));
  CHECK(l.rows() == 64);
  CHECK(l.cols() == 64);
}

TEST_CASE("paper-size segmentation encoder shape") {
  ParameterSet params;
  Rng rng(2);
  const ModelConfig p = ModelConfig::paper();
  const VisionEncoder enc(params, "seg", p.image_size, p.seg_grid, p.d_k, 0, p.seg_heads,
                          p.mlp_ratio, rng);
  const Tensor v = enc.encode(Image(1024, 1024));
  CHECK(v.rows() == 4096);
  CHECK(v.cols() == 256);
}

TEST_CASE("encoder rejects images that do not tile") {
  const StimulusModel model(ModelConfig::toy(), small_vocab());
  CHECK_THROWS_AS(model.encode_seg(Image(62, 62)), ConfigError);
  CHECK_THROWS_AS(model.encode_seg(Image(32, 32)), ConfigError);
  ParameterSet params;
  Rng rng(3);
  CHECK_THROWS_AS(VisionEncoder(params, "x", 63, 16, 32, 1, 4, 4, rng), ConfigError);
}

TEST_CASE("zero image through a zero projection yields the positional table") {
  StimulusModel model(ModelConfig::toy(), small_vocab());
  zero(model.seg_encoder.patch_proj.weight);
  zero(model.seg_encoder.patch_proj.bias);
  const Tensor e = model.seg_encoder.patch_embed(Image(64, 64));
  CHECK(e.value() == model.seg_encoder.positions.value());
}

TEST_CASE("patchify orders rows by raster and columns by (py, px, channel)") {
  ParameterSet params;
  Rng rng(4);
  const VisionEncoder enc(params, "x", 8, 2, 8, 0, 1, 4, rng);
  Image img(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = y * 100 + x * 10 + c;
  const Matrix p = enc.patchify(img);
  CHECK(p.rows() == 4);
  CHECK(p.cols() == 48);
  // patch (gy=1, gx=0), pixel (py=2, px=3), channel 1
  CHECK(p(2, (2 * 4 + 3) * 3 + 1) == doctest::Approx(6 * 100 + 3 * 10 + 1));
}

TEST_CASE("language stream depends on the image") {
  const StimulusModel model(ModelConfig::toy(), small_vocab());
  Rng rng(5);
  const Tensor a = model.encode_lang(random_image(64, rng));
  const Tensor b = model.encode_lang(random_image(64, rng));
  CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("embedding lookup equals a one-hot product") {
  const StimulusModel model(ModelConfig::toy(), small_vocab());
  const TokenIds ids{0, 5, 9, 2, 0, 1, 7, 3};
  const Tensor e = model.embed_text(ids);
  CHECK(e.rows() == 8);
  CHECK(e.cols() == 64);
  Matrix onehot = Matrix::Zero(8, model.embedding.table.rows());
  for (int i = 0; i < 8; ++i) onehot(i, ids[static_cast<std::size_t>(i)]) = 1.0;
  CHECK((onehot * model.embedding.table.value() - e.value()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(e.value().row(0) == e.value().row(4));
  CHECK_THROWS_AS(model.embed_text(TokenIds{static_cast<std::int64_t>(model.vocab().size())}),
                  std::out_of_range);
  CHECK_THROWS_AS(model.embed_text(TokenIds{-1}), std::out_of_range);
}

TEST_CASE("prompt encoding keeps the emotion word last") {
  const Vocabulary v = small_vocab();
  for (int e = 0; e < kNumEmotions; ++e) {
    const TokenIds ids = encode_prompt(EmotionId(e), v, 8);
    CHECK(ids.size() == 8);
    CHECK(ids.back() == *v.lookup(kEmotionNames[static_cast<std::size_t>(e)]));
    for (auto id : ids) CHECK(id != Vocabulary::kUnk);
  }
  CHECK(v.decode(encode_prompt(EmotionId(6), v, 8)) == "generate the mask for the emotion fear");
  CHECK(encode_prompt(EmotionId(6), v, 3).size() == 3);
}

TEST_CASE("projector shape, zero weights and matrix oracle") {
  StimulusModel model(ModelConfig::toy(), small_vocab());
  const Tensor p = model.project(EmotionId(6));
  CHECK(p.rows() == 8);
  CHECK(p.cols() == 32);
  const TokenIds ids = model.prompt_ids(EmotionId(6));
  const Matrix expected = model.embed_text(ids).value() * model.projector.linear.weight.value() +
                          model.projector.linear.bias.value().replicate(8, 1);
  CHECK((expected - p.value()).cwiseAbs().maxCoeff() < 1e-6);
  const checks::Dense oracle = checks::oracle_project(model.projector, model.embedding, ids);
  CHECK(checks::max_abs_diff(oracle, p.value()) < 1e-6);

  zero(model.projector.linear.weight);
  zero(model.projector.linear.bias);
  CHECK(model.project(EmotionId(2)).value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("paper-size projector shape") {
  ParameterSet params;
  Rng rng(6);
  const TokenEmbedding emb(params, "emb", small_vocab().size(), 768, rng);
  const EmotionProjector proj(params, "proj", 768, 256, rng);
  const Tensor p = proj.project(emb, encode_prompt(EmotionId(6), small_vocab(), 8));
  CHECK(p.rows() == 8);
  CHECK(p.cols() == 256);
}

TEST_CASE("mixer block matches the straight-line oracle on tiny dims") {
  ParameterSet params;
  Rng rng(7);
  const MixerBlock block(params, "b", 4, 1, 4, rng);
  checks::randomize(params, rng, 0.5);
  const auto q = random_dense(2, 4, rng);
  const auto v = random_dense(3, 4, rng);
  const auto [qo, vo] = block.forward(Tensor(to_matrix(q)), Tensor(to_matrix(v)));
  const auto [oq, ov] = checks::oracle_mixer_block(q, v, block);
  CHECK(checks::max_abs_diff(oq, qo.value()) < 1e-5);
  CHECK(checks::max_abs_diff(ov, vo.value()) < 1e-5);
}

TEST_CASE("mixer preserves shapes and keeps the residual path") {
  ParameterSet params;
  Rng rng(8);
  MixerBlock block(params, "b", 32, 4, 4, rng);
  const Tensor q(random_normal(10, 32, 1.0, rng));
  const Tensor v(random_normal(256, 32, 1.0, rng));
  const auto [qo, vo] = block.forward(q, v);
  CHECK(qo.rows() == 10);
  CHECK(vo.rows() == 256);
  CHECK(qo.value().allFinite());

  // With every residual branch silenced the block is the identity.
  for (auto* a : {&block.self_attn, &block.q2v_attn, &block.v2q_attn}) {
    zero(a->out_proj.weight);
    zero(a->out_proj.bias);
  }
  zero(block.ffn.fc2.weight);
  zero(block.ffn.fc2.bias);
  const auto [qi, vi] = block.forward(q, v);
  CHECK(qi.value() == q.value());
  CHECK(vi.value() == v.value());

  CHECK_THROWS_AS(block.forward(Tensor(random_normal(2, 16, 1.0, rng)), v), ConfigError);
}

TEST_CASE("two mixer blocks equal two sequential block calls") {
  StimulusModel model(ModelConfig::toy(), small_vocab());
  Rng rng(9);
  const Tensor q(random_normal(9, 32, 1.0, rng));
  const Tensor v(random_normal(256, 32, 1.0, rng));
  const auto [q2, v2] = model.mixer.forward(q, v);
  const auto [qa, va] = model.mixer.blocks[0].forward(q, v);
  const auto [qb, vb] = model.mixer.blocks[1].forward(qa, va);
  CHECK(q2.value() == qb.value());
  CHECK(v2.value() == vb.value());
}

TEST_CASE("query length depends on the paradigm") {
  Rng rng(10);
  const Image img = random_image(64, rng);
  const StimulusModel single(ModelConfig::toy(), small_vocab());
  const MixerOutput s = single.run_mixer(single.encode_seg(img), EmotionId(6));
  REQUIRE(s.prompt.has_value());
  CHECK(s.prompt->rows() + s.mask_tokens.rows() == 9);
  CHECK(s.mask_tokens.rows() == 1);

  ModelConfig mc = ModelConfig::toy();
  mc.paradigm = Paradigm::MultiMasks;
  const StimulusModel multi(mc, small_vocab());
  const MixerOutput m = multi.run_mixer(multi.encode_seg(img), std::nullopt);
  CHECK_FALSE(m.prompt.has_value());
  CHECK(m.mask_tokens.rows() == 8);

  CHECK_THROWS_AS(multi.run_mixer(multi.encode_seg(img), EmotionId(1)), std::invalid_argument);
  CHECK_THROWS_AS(single.run_mixer(single.encode_seg(img), std::nullopt), std::invalid_argument);
  CHECK_THROWS_AS(multi.mixer.run(Paradigm::MultiMasks, single.project(EmotionId(0)),
                                  multi.mask_tokens, multi.encode_seg(img)),
                  std::invalid_argument);
}

TEST_CASE("saliency resolution and mask shapes") {
  Rng rng(11);
  const Image img = random_image(64, rng);
  StimulusModel model(ModelConfig::toy(), small_vocab());
  const SegmentOutput out = model.segment(img, EmotionId(3));
  CHECK(out.saliency.rows() == 1);
  CHECK(out.saliency.cols() == 64 * 64);
  REQUIRE(out.masks.size() == 1);
  CHECK(out.masks[0].height == 64);
  CHECK(out.masks[0].width == 64);
  CHECK(model.segment(img, EmotionId(3)).saliency.value() == out.saliency.value());

  ModelConfig mc = ModelConfig::toy();
  mc.paradigm = Paradigm::MultiMasks;
  const StimulusModel multi(mc, small_vocab());
  const SegmentOutput all = multi.segment(img, std::nullopt);
  CHECK(all.masks.size() == 8);
  for (int e = 0; e < 8; ++e) CHECK(all.emotions[static_cast<std::size_t>(e)] == EmotionId(e));
}

TEST_CASE("paper-size mask head resolution") {
  ParameterSet params;
  Rng rng(12);
  const MaskHead head(params, "h", 256, 64, rng);
  CHECK(head.resolution() == 256);
  const Tensor s = head.saliency(Tensor(random_normal(1, 256, 1.0, rng)),
                                 Tensor(random_normal(64 * 64, 256, 1.0, rng)));
  CHECK(s.cols() == 256 * 256);
}

TEST_CASE("zero classifier gives an all-zero saliency and an empty mask") {
  Rng rng(13);
  StimulusModel model(ModelConfig::toy(), small_vocab());
  zero(model.mask_head.hyper3.weight);
  zero(model.mask_head.hyper3.bias);
  const SegmentOutput out = model.segment(random_image(64, rng), EmotionId(0));
  CHECK(out.saliency.value().cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.masks[0].count() == 0);
}

TEST_CASE("thresholding is strict") {
  const BinaryMask m = threshold_mask({0.0, 1e-12, -1.0, 0.5}, 2, 2, 0.0);
  CHECK(m.data == std::vector<std::uint8_t>{0, 1, 0, 1});
}

TEST_CASE("masks follow the saliency sign under classifier scaling") {
  Rng rng(14);
  StimulusModel model(ModelConfig::toy(), small_vocab());
  const Image img = random_image(64, rng);
  const SegmentOutput a = model.segment(img, EmotionId(5));
  model.mask_head.hyper3.weight.mutable_value() *= 3.0;
  model.mask_head.hyper3.bias.mutable_value() *= 3.0;
  const SegmentOutput b = model.segment(img, EmotionId(5));
  CHECK((b.saliency.value() - 3.0 * a.saliency.value()).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(a.masks[0] == b.masks[0]);
}

TEST_CASE("pixel shuffle scatters each 2x2 kernel into its output block") {
  // grid 2, channels 1: token (gy, gx) column (ky, kx) lands at (2gy+ky, 2gx+kx)
  Matrix a(4, 4);
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 4; ++k) a(t, k) = 10 * t + k;
  const Tensor out = ops::pixel_shuffle2(Tensor(a), 2, 1);
  REQUIRE(out.rows() == 16);
  for (int gy = 0; gy < 2; ++gy)
    for (int gx = 0; gx < 2; ++gx)
      for (int ky = 0; ky < 2; ++ky)
        for (int kx = 0; kx < 2; ++kx) {
          const int row = (2 * gy + ky) * 4 + (2 * gx + kx);
          CHECK(out.value()(row, 0) == 10 * (gy * 2 + gx) + ky * 2 + kx);
        }
}

TEST_CASE("prefix adapter shapes, zero weights and matrix oracle") {
  StimulusModel model(ModelConfig::toy(), small_vocab());
  Rng rng(15);
  const Tensor p(random_normal(8, 32, 1.0, rng));
  const Tensor m(random_normal(1, 32, 1.0, rng));
  const Tensor f = model.adapter.adapt(p, m);
  CHECK(f.rows() == 9);
  CHECK(f.cols() == 64);
  CHECK(model.adapter.adapt(std::nullopt, m).rows() == 1);

  Matrix rows(9, 32);
  rows << p.value(), m.value();
  const checks::Dense oracle = checks::oracle_adapt(model.adapter, checks::to_dense(rows));
  CHECK(checks::max_abs_diff(oracle, f.value()) < 1e-6);

  // position-wise: the last row equals the adapter applied to m alone
  const Tensor single = model.adapter.adapt(std::nullopt, m);
  CHECK((single.value().row(0) - f.value().row(8)).cwiseAbs().maxCoeff() < 1e-12);

  zero(model.adapter.fc2.weight);
  zero(model.adapter.fc2.bias);
  zero(model.adapter.fc1.weight);
  zero(model.adapter.fc1.bias);
  CHECK(model.adapter.adapt(p, m).value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("paper-size prefix") {
  ParameterSet params;
  Rng rng(16);
  const PrefixAdapter adapter(params, "a", 256, 768, rng);
  const Tensor f = adapter.adapt(Tensor(random_normal(8, 256, 1.0, rng)),
                                 Tensor(random_normal(1, 256, 1.0, rng)));
  CHECK(f.rows() == 9);
  CHECK(f.cols() == 768);
}

namespace {

struct DecoderFixture {
  StimulusModel model{ModelConfig::toy(), small_vocab()};
  Rng rng{17};
  Tensor vision;
  Tensor prefix;

  DecoderFixture() {
    vision = model.encode_lang(random_image(64, rng));
    prefix = Tensor(random_normal(9, 64, 1.0, rng));
  }
};

}  // namespace

TEST_CASE("teacher-forced logits cover every gold position") {
  DecoderFixture fx;
  const TokenIds gold = encode_explanation("the red square stirs anger in me", fx.model.vocab(), 25);
  const Tensor logits = fx.model.decoder.decode_train(fx.model.embedding, fx.vision, fx.prefix, gold);
  CHECK(logits.rows() == static_cast<Index>(gold.size()));
  CHECK(logits.cols() == static_cast<Index>(fx.model.vocab().size()));
}

TEST_CASE("decoder on tiny dims matches the straight-line oracle") {
  ParameterSet params;
  Rng rng(18);
  const TokenEmbedding emb(params, "emb", 10, 8, rng);
  const LanguageDecoder dec(params, "dec", 8, 1, 1, 4, 12, rng);
  checks::randomize(params, rng, 0.5);
  const auto vision = random_dense(4, 8, rng);
  const auto prefix = random_dense(1, 8, rng);
  const TokenIds gold{1, 5};
  const Tensor logits = dec.decode_train(emb, Tensor(to_matrix(vision)), Tensor(to_matrix(prefix)), gold);
  CHECK(checks::max_abs_diff(checks::oracle_decode_train(dec, emb, vision, prefix, gold),
                             logits.value()) < 1e-5);
}

TEST_CASE("later tokens do not influence earlier logits") {
  DecoderFixture fx;
  TokenIds gold = encode_explanation("the harsh red square stirs anger in me", fx.model.vocab(), 25);
  const Matrix base =
      fx.model.decoder.decode_train(fx.model.embedding, fx.vision, fx.prefix, gold).value();
  const std::size_t k = 5;
  gold[k] = fx.model.vocab().id("fear");
  const Matrix changed =
      fx.model.decoder.decode_train(fx.model.embedding, fx.vision, fx.prefix, gold).value();
  CHECK(base.topRows(k) == changed.topRows(k));
  CHECK((base.row(k) - changed.row(k)).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("causal mask exposes the prefix everywhere") {
  const Matrix m = prefix_causal_mask(2, 3);
  CHECK(m.rows() == 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const bool visible = j < 2 || (i >= 2 && j <= i);
      CHECK((m(i, j) == 0.0) == visible);
    }
}

TEST_CASE("vanishing nucleus equals greedy decoding") {
  DecoderFixture fx;
  const auto a = fx.model.decoder.generate(fx.model.embedding, fx.vision, fx.prefix, 1e-9, 1, 25);
  const auto b = fx.model.decoder.generate(fx.model.embedding, fx.vision, fx.prefix, 1e-9, 999, 25);
  CHECK(a.tokens == b.tokens);

  // Greedy by hand: extend one argmax at a time through teacher forcing.
  TokenIds seq{Vocabulary::kBos};
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    const Matrix logits =
        fx.model.decoder.decode_train(fx.model.embedding, fx.vision, fx.prefix, seq).value();
    Eigen::RowVectorXd last = logits.row(logits.rows() - 1);
    last(Vocabulary::kPad) = -1e300;
    last(Vocabulary::kBos) = -1e300;
    Index best = 0;
    last.maxCoeff(&best);
    CHECK(best == a.tokens[i]);
    seq.push_back(a.tokens[i]);
  }
}

TEST_CASE("generation is seeded and bounded") {
  DecoderFixture fx;
  const auto a = fx.model.decoder.generate(fx.model.embedding, fx.vision, fx.prefix, 0.9, 42, 25);
  const auto b = fx.model.decoder.generate(fx.model.embedding, fx.vision, fx.prefix, 0.9, 42, 25);
  CHECK(a.tokens == b.tokens);
  CHECK(a.logprobs == b.logprobs);
  CHECK(a.tokens.size() <= 25);
  CHECK(a.tokens.size() == a.logprobs.size());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = fx.model.decoder.generate(fx.model.embedding, fx.vision, fx.prefix, 1.0, seed, 25);
    CHECK(g.tokens.size() <= 25);
    for (auto t : g.tokens) {
      CHECK(t != Vocabulary::kPad);
      CHECK(t != Vocabulary::kBos);
    }
    for (double lp : g.logprobs) CHECK(lp <= 0.0);
  }
}

TEST_CASE("next-token distributions sum to one") {
  DecoderFixture fx;
  const TokenIds gold = encode_explanation("i feel awe before the towering purple circle", fx.model.vocab(), 25);
  const Tensor probs = ops::softmax_rows(
      fx.model.decoder.decode_train(fx.model.embedding, fx.vision, fx.prefix, gold));
  for (Index i = 0; i < probs.rows(); ++i) CHECK(probs.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("nucleus sampling keeps the smallest set reaching p") {
  const std::vector<double> probs{0.1, 0.5, 0.3, 0.1};
  Rng rng(19);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 200; ++i) seen.insert(sample_nucleus(probs, 0.75, rng));
  CHECK(seen == std::set<std::int64_t>{1, 2});
  for (int i = 0; i < 20; ++i) CHECK(sample_nucleus(probs, 0.5, rng) == 1);
  // equal probabilities keep the lower id
  for (int i = 0; i < 20; ++i) CHECK(sample_nucleus(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.2, rng) == 0);
}
