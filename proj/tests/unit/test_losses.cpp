#include <doctest.h>

#include "stimseg/checks.hpp"
#include "stimseg/losses.hpp"
#include "stimseg/model.hpp"
#include "helpers.hpp"

#include <cmath>
#include <numeric>

using namespace stimseg;
using stimseg::testing::small_config;
using stimseg::testing::small_vocab;

namespace {

Matrix filled(int r, int c, double v) { return Matrix::Constant(r, c, v); }

}  // namespace

TEST_CASE("dice on probabilities") {
  CHECK(dice_from_probs(filled(2, 2, 1.0), filled(2, 2, 1.0)) == doctest::Approx(0.0));
  CHECK(dice_from_probs(filled(2, 2, 0.0), filled(2, 2, 1.0)) == doctest::Approx(0.8));
  CHECK(dice_from_probs(filled(2, 2, 0.0), filled(2, 2, 0.0)) == 0.0);
}

TEST_CASE("dice through logits agrees with the probability form") {
  Rng rng(1);
  const Matrix logits = random_normal(4, 4, 2.0, rng);
  Matrix target(4, 4);
  for (Index i = 0; i < 16; ++i) target.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const Matrix probs = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
  const double d = dice_loss(Tensor(logits), target).item();
  CHECK(d == doctest::Approx(dice_from_probs(probs, target)).epsilon(1e-12));
  CHECK(d == doctest::Approx(checks::oracle_dice(logits, target, 1.0)).epsilon(1e-12));
  CHECK(d >= 0.0);
  CHECK(d <= 1.0);
}

TEST_CASE("focal loss values") {
  const FocalParams fp = FocalParams::standard(0.25, 2.0);
  Matrix logits(2, 2);
  logits << 30, -30, -30, 30;
  Matrix target(2, 2);
  target << 1, 0, 0, 1;
  CHECK(focal_loss(Tensor(logits), target, fp).item() < 1e-9);

  const double single = focal_loss(Tensor(filled(1, 1, 0.0)), filled(1, 1, 1.0), fp).item();
  CHECK(single == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(single == doctest::Approx(0.043321).epsilon(1e-5));
}

TEST_CASE("focal with gamma 0 and unit weights is binary cross-entropy") {
  Rng rng(2);
  const Matrix logits = random_normal(4, 4, 3.0, rng);
  Matrix target(4, 4);
  for (Index i = 0; i < 16; ++i) target.data()[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  const double f = focal_loss(Tensor(logits), target, FocalParams{1.0, 1.0, 0.0}).item();
  CHECK(std::abs(f - checks::oracle_bce(logits, target)) < 1e-9);
}

TEST_CASE("focal loss stays finite at extreme logits") {
  Matrix logits(1, 2);
  logits << 800, -800;
  Matrix target(1, 2);
  target << 0, 1;
  const double f = focal_loss(Tensor(logits), target, FocalParams::standard(0.25, 2.0)).item();
  CHECK(std::isfinite(f));
  CHECK(f > 0.0);
}

TEST_CASE("mask losses ignore pixel order") {
  Rng rng(3);
  const Matrix logits = random_normal(4, 4, 2.0, rng);
  Matrix target(4, 4);
  for (Index i = 0; i < 16; ++i) target.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  std::vector<Index> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  Matrix pl(4, 4), pt(4, 4);
  for (Index i = 0; i < 16; ++i) {
    pl.data()[i] = logits.data()[perm[static_cast<std::size_t>(i)]];
    pt.data()[i] = target.data()[perm[static_cast<std::size_t>(i)]];
  }
  const FocalParams fp = FocalParams::standard(0.25, 2.0);
  CHECK(dice_loss(Tensor(pl), pt).item() == doctest::Approx(dice_loss(Tensor(logits), target).item()).epsilon(1e-12));
  CHECK(focal_loss(Tensor(pl), pt, fp).item() ==
        doctest::Approx(focal_loss(Tensor(logits), target, fp).item()).epsilon(1e-12));
}

TEST_CASE("language loss values") {
  const TokenIds gold{1, 5, 7, 2};
  Matrix onehot = Matrix::Constant(4, 16, -30.0);
  for (int i = 0; i + 1 < 4; ++i) onehot(i, gold[static_cast<std::size_t>(i) + 1]) = 30.0;
  CHECK(lang_loss(Tensor(onehot), gold).item() < 1e-9);

  const double uniform = lang_loss(Tensor(Matrix::Zero(4, 16)), gold).item();
  CHECK(std::abs(uniform - std::log(16.0)) < 1e-9);
  CHECK(uniform == doctest::Approx(2.7726).epsilon(1e-4));
}

TEST_CASE("trailing padding does not change the language loss") {
  Rng rng(4);
  const TokenIds gold{1, 5, 7, 9, 2};
  TokenIds padded = gold;
  padded.insert(padded.end(), {0, 0, 0});
  const Matrix logits = random_normal(8, 16, 1.0, rng);
  const double a = lang_loss(Tensor(Matrix(logits.topRows(5))), gold).item();
  const double b = lang_loss(Tensor(logits), padded).item();
  CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("all-padding language loss is zero") {
  const TokenIds gold{0, 0, 0};
  CHECK(lang_loss(Tensor(Matrix::Zero(3, 8)), gold).item() == 0.0);
}

TEST_CASE("downsampling uses a majority-coverage threshold") {
  BinaryMask m(4, 4);
  // top-left 2x2 block fully covered, top-right half covered, bottom-left 3/4
  m.at(0, 0) = m.at(0, 1) = m.at(1, 0) = m.at(1, 1) = 1;
  m.at(0, 2) = m.at(1, 2) = 1;
  m.at(2, 0) = m.at(2, 1) = m.at(3, 0) = 1;
  const Matrix d = downsample_mask(m, 2);
  CHECK(d(0, 0) == 1.0);
  CHECK(d(0, 1) == 0.0);
  CHECK(d(1, 0) == 1.0);
  CHECK(d(1, 1) == 0.0);
  CHECK_THROWS(downsample_mask(BinaryMask(5, 5), 2));
}

namespace {

std::vector<Sample> image_samples(const ModelConfig& cfg, const Vocabulary& vocab,
                                  const std::vector<int>& emotions, Rng& rng) {
  std::vector<Sample> out;
  for (int e : emotions) out.push_back(checks::random_sample(cfg, vocab, EmotionId(e), 6, rng));
  for (auto& s : out) {
    s.image = out.front().image;
    s.image_path = "images/shared.png";
  }
  return out;
}

}  // namespace

TEST_CASE("single-mask total is the plain sum of its parts") {
  const ModelConfig cfg = small_config(Paradigm::SingleMask);
  const Vocabulary vocab = small_vocab();
  const StimulusModel model(cfg, vocab);
  Rng rng(5);
  const Sample s = checks::random_sample(cfg, vocab, EmotionId(6), 7, rng);
  const LossReport rep = model.single_mask_loss(s);
  CHECK(rep.total == rep.dice + rep.focal + rep.lang);
  CHECK(rep.dice >= 0.0);
  CHECK(rep.dice <= 1.0);
  CHECK(rep.focal >= 0.0);
  CHECK(rep.lang >= 0.0);
  CHECK(rep.per_emotion.empty());
  CHECK(std::abs(rep.total_tensor.item() - rep.total) < 1e-12);
}

TEST_CASE("multi-mask report covers only annotated emotions") {
  const ModelConfig cfg = small_config(Paradigm::MultiMasks);
  const Vocabulary vocab = small_vocab();
  const StimulusModel model(cfg, vocab);
  Rng rng(6);
  const auto samples = image_samples(cfg, vocab, {6, 1}, rng);
  std::vector<const Sample*> ptrs{&samples[0], &samples[1]};
  const LossReport rep = model.multi_mask_loss(ptrs);
  CHECK(rep.per_emotion.size() == 2);
  CHECK(rep.per_emotion.count(6) == 1);
  CHECK(rep.per_emotion.count(1) == 1);
  double sum = 0.0;
  for (const auto& [e, l] : rep.per_emotion) sum += l.mask + l.lang;
  CHECK(rep.total == doctest::Approx(sum).epsilon(1e-12));

  // the sum is independent of annotation order
  std::vector<const Sample*> swapped{&samples[1], &samples[0]};
  CHECK(model.multi_mask_loss(swapped).total == doctest::Approx(rep.total).epsilon(1e-12));

  CHECK_THROWS_AS(model.multi_mask_loss(std::span<const Sample* const>{}), std::invalid_argument);
  std::vector<const Sample*> twice{&samples[0], &samples[0]};
  CHECK_THROWS_AS(model.multi_mask_loss(twice), std::invalid_argument);
}

TEST_CASE("unannotated mask tokens receive exactly zero gradient") {
  const ModelConfig cfg = small_config(Paradigm::MultiMasks);
  const Vocabulary vocab = small_vocab();
  const StimulusModel model(cfg, vocab);
  Rng rng(7);
  const auto samples = image_samples(cfg, vocab, {6}, rng);
  std::vector<const Sample*> ptrs{&samples[0]};
  MixerOutput mixed = model.run_mixer(model.encode_seg(samples[0].image), std::nullopt);
  const Tensor leaf(mixed.mask_tokens.value(), true);
  mixed.mask_tokens = leaf;
  const LossReport rep = model.multi_mask_loss_from(mixed, model.encode_lang(samples[0].image), ptrs);
  rep.total_tensor.backward();
  REQUIRE(leaf.has_grad());
  for (Index r = 0; r < 8; ++r) {
    const double g = leaf.grad().row(r).cwiseAbs().maxCoeff();
    if (r == 6) {
      CHECK(g > 0.0);
    } else {
      CHECK(g == 0.0);
    }
  }
  const auto report = checks::check_unannotated_gradient(11);
  CHECK_MESSAGE(report.passed, report.detail);
}

TEST_CASE("single-mask loss refuses multi-mask models and vice versa") {
  const Vocabulary vocab = small_vocab();
  const StimulusModel single(small_config(Paradigm::SingleMask), vocab);
  const StimulusModel multi(small_config(Paradigm::MultiMasks), vocab);
  Rng rng(8);
  const Sample s = checks::random_sample(small_config(Paradigm::SingleMask), vocab, EmotionId(0), 5, rng);
  std::vector<const Sample*> ptrs{&s};
  CHECK_THROWS(multi.single_mask_loss(s));
  CHECK_THROWS(single.multi_mask_loss(ptrs));
}

TEST_CASE("gradient and identity suites pass") {
  for (const auto& r : checks::gradient_suite()) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
  for (const auto& r : checks::identity_suite()) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
}
