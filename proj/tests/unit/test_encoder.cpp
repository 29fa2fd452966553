#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "encoder.hpp"
#include "test_support.hpp"

using namespace memvit;
using memvit::testing::gradcheck;
using memvit::testing::random_tensor;

namespace {

ModelConfig toy_config(std::size_t depth = 2, std::size_t width = 16, std::size_t heads = 2) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 3;
  c.depth = depth;
  c.width = width;
  c.heads = heads;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

Tensor<double> random_images(const ModelConfig& c, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto t = Tensor<double>::zeros({batch, c.image_size, c.image_size, c.channels});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Gives every parameter a non-trivial value so gradients are not dominated
// by the zero biases and unit gammas of a fresh initialization.
void jitter(Model<double>& model, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& p : named_parameters(model)) {
    for (auto& v : p.tensor.data()) v += dist(rng);
  }
}

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// Straight-loop pre-norm block for one sample: y[T, D], memory[S, D].
std::vector<double> layer_oracle(const std::vector<double>& y, std::size_t t, const std::vector<double>& mem, std::size_t s,
                                 const LayerParams<double>& p, std::size_t d, std::size_t heads, const MaskMatrix& mask) {
  auto ln = [&](const double* x, const Tensor<double>& g, const Tensor<double>& b, double* out) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mu += x[c];
    mu /= double(d);
    for (std::size_t c = 0; c < d; ++c) var += (x[c] - mu) * (x[c] - mu);
    var /= double(d);
    for (std::size_t c = 0; c < d; ++c) out[c] = (x[c] - mu) / std::sqrt(var + 1e-6) * g[c] + b[c];
  };
  const std::size_t tk = t + s, dh = d / heads, hidden = p.b_mlp1.numel();
  std::vector<double> h(tk * d), q(t * d), k(tk * d), v(tk * d);
  for (std::size_t i = 0; i < tk; ++i) ln(i < t ? &y[i * d] : &mem[(i - t) * d], p.ln1_g, p.ln1_b, &h[i * d]);
  for (std::size_t i = 0; i < tk; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double aq = p.b_qkv[c], ak = p.b_qkv[d + c], av = p.b_qkv[2 * d + c];
      for (std::size_t r = 0; r < d; ++r) {
        aq += h[i * d + r] * p.w_qkv[r * 3 * d + c];
        ak += h[i * d + r] * p.w_qkv[r * 3 * d + d + c];
        av += h[i * d + r] * p.w_qkv[r * 3 * d + 2 * d + c];
      }
      if (i < t) q[i * d + c] = aq;
      k[i * d + c] = ak;
      v[i * d + c] = av;
    }
  }
  std::vector<double> attn(t * d, 0.0);
  for (std::size_t hh = 0; hh < heads; ++hh) {
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> e(tk, 0.0);
      double z = 0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mask.at(i, j)) continue;
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + hh * dh + c] * k[j * d + hh * dh + c];
        e[j] = std::exp(dot / std::sqrt(double(dh)));
        z += e[j];
      }
      for (std::size_t j = 0; j < tk; ++j) {
        for (std::size_t c = 0; c < dh; ++c) attn[i * d + hh * dh + c] += e[j] / z * v[j * d + hh * dh + c];
      }
    }
  }
  std::vector<double> out(t * d);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> u(d), h2(d), a(hidden);
    for (std::size_t c = 0; c < d; ++c) {
      double acc = p.b_out[c];
      for (std::size_t r = 0; r < d; ++r) acc += attn[i * d + r] * p.w_out[r * d + c];
      u[c] = y[i * d + c] + acc;
    }
    ln(u.data(), p.ln2_g, p.ln2_b, h2.data());
    for (std::size_t c = 0; c < hidden; ++c) {
      double acc = p.b_mlp1[c];
      for (std::size_t r = 0; r < d; ++r) acc += h2[r] * p.w_mlp1[r * hidden + c];
      a[c] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
    }
    for (std::size_t c = 0; c < d; ++c) {
      double acc = p.b_mlp2[c];
      for (std::size_t r = 0; r < hidden; ++r) acc += a[r] * p.w_mlp2[r * d + c];
      out[i * d + c] = u[c] + acc;
    }
  }
  return out;
}

}  // namespace

TEST(PatchEmbed, TokenCount) {
  ModelConfig c;  // 32x32, P=8
  auto m = init_model<double>(c, 1);
  auto z = patch_embed<double>(nullptr, Tensor<double>::zeros({2, 32, 32, 3}), c, m.backbone);
  EXPECT_EQ(z.shape(), (Shape{2, 17, c.width}));
}

TEST(PatchEmbed, ZeroImageZeroEmbedding) {
  auto c = toy_config();
  auto m = init_model<double>(c, 2);
  m.backbone.patch_w = Tensor<double>::zeros(m.backbone.patch_w.shape());
  m.backbone.pos = Tensor<double>::zeros(m.backbone.pos.shape());
  auto z = patch_embed<double>(nullptr, Tensor<double>::zeros({1, 8, 8, 3}), c, m.backbone);
  for (std::size_t j = 0; j < c.width; ++j) EXPECT_EQ(z[j], m.backbone.cls[j]);
  for (std::size_t i = c.width; i < z.numel(); ++i) EXPECT_EQ(z[i], 0.0);
}

TEST(PatchEmbed, MidGrayIsTheOrigin) {
  auto c = toy_config();
  auto m = init_model<double>(c, 2);
  m.backbone.pos = Tensor<double>::zeros(m.backbone.pos.shape());
  auto gray = Tensor<double>::zeros({1, 8, 8, 3});
  for (auto& v : gray.data()) v = 0.5;
  auto z = patch_embed<double>(nullptr, gray, c, m.backbone);
  for (std::size_t i = c.width; i < z.numel(); ++i) EXPECT_EQ(z[i], 0.0);
}

TEST(PatchEmbed, SingleWhitePixelTouchesOnePatch) {
  auto c = toy_config();
  auto m = init_model<double>(c, 3);
  auto black = Tensor<double>::zeros({1, 8, 8, 3});
  auto white = black.clone();
  // Pixel (row 5, col 2) lies in grid cell (1, 0) -> patch 2 -> token 3.
  for (std::size_t ch = 0; ch < 3; ++ch) white[(5 * 8 + 2) * 3 + ch] = 1.0;
  auto a = patch_embed<double>(nullptr, black, c, m.backbone);
  auto b = patch_embed<double>(nullptr, white, c, m.backbone);
  for (std::size_t tok = 0; tok < 5; ++tok) {
    bool differs = false;
    for (std::size_t j = 0; j < c.width; ++j) differs |= a[tok * c.width + j] != b[tok * c.width + j];
    EXPECT_EQ(differs, tok == 3) << "token " << tok;
  }
}

TEST(PatchEmbed, WrongImageShapeThrows) {
  auto c = toy_config();
  auto m = init_model<double>(c, 4);
  EXPECT_THROW(patch_embed<double>(nullptr, Tensor<double>::zeros({1, 8, 7, 3}), c, m.backbone), DimensionError);
}

TEST(EncoderLayer, NoMemoryAllAllowMatchesUnmaskedLayer) {
  auto c = toy_config();
  auto m = init_model<double>(c, 5);
  jitter(m, 6, 0.1);
  std::mt19937_64 rng(7);
  auto y = random_tensor({2, 5, 16}, rng);
  auto plain = encoder_layer<double>(nullptr, y, m.backbone.layers[0], 2, nullptr, Tensor<double>());
  MaskMatrix all(5, 5, true);
  auto masked = encoder_layer<double>(nullptr, y, m.backbone.layers[0], 2, &all, Tensor<double>());
  EXPECT_TRUE(bit_equal(plain.tokens, masked.tokens));
}

TEST(EncoderLayer, ZeroWeightsAreResidualIdentity) {
  auto c = toy_config();
  auto m = init_model<double>(c, 8);
  auto layer = m.backbone.layers[0];
  for (auto* t : {&layer.w_qkv, &layer.w_out, &layer.w_mlp1, &layer.w_mlp2}) *t = Tensor<double>::zeros(t->shape());
  std::mt19937_64 rng(9);
  auto y = random_tensor({1, 1, 16}, rng);
  auto out = encoder_layer<double>(nullptr, y, layer, 2, nullptr, Tensor<double>());
  EXPECT_TRUE(bit_equal(out.tokens, y));
}

TEST(EncoderLayer, MatchesLoopOracleWithMemory) {
  auto c = toy_config(1, 8, 1);
  auto m = init_model<double>(c, 10);
  jitter(m, 11, 0.3);
  std::mt19937_64 rng(12);
  auto y = random_tensor({1, 2, 8}, rng);
  auto mem = random_tensor({1, 8}, rng);
  MaskMatrix mask(2, 3, true);
  mask.set(0, 2, false);
  auto out = encoder_layer<double>(nullptr, y, m.backbone.layers[0], 1, &mask, mem);
  auto ref = layer_oracle(std::vector<double>(y.data().begin(), y.data().end()), 2,
                          std::vector<double>(mem.data().begin(), mem.data().end()), 1, m.backbone.layers[0], 8, 1, mask);
  ASSERT_EQ(out.tokens.shape(), (Shape{1, 2, 8}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.tokens[i], ref[i], 1e-10);
}

TEST(EncoderLayer, MultiHeadMatchesLoopOracle) {
  auto c = toy_config(1, 16, 4);
  auto m = init_model<double>(c, 13);
  jitter(m, 14, 0.2);
  std::mt19937_64 rng(15);
  auto y = random_tensor({1, 4, 16}, rng);
  auto mem = random_tensor({3, 16}, rng);
  MaskMatrix mask(4, 7, true);
  for (std::size_t j = 4; j < 7; ++j) mask.set(1, j, false);
  mask.set(3, 0, false);
  auto out = encoder_layer<double>(nullptr, y, m.backbone.layers[0], 4, &mask, mem);
  auto ref = layer_oracle(std::vector<double>(y.data().begin(), y.data().end()), 4,
                          std::vector<double>(mem.data().begin(), mem.data().end()), 3, m.backbone.layers[0], 16, 4, mask);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.tokens[i], ref[i], 1e-10);
}

TEST(EncoderLayer, MaskShapeMismatchThrows) {
  auto c = toy_config();
  auto m = init_model<double>(c, 16);
  MaskMatrix mask(3, 3, true);
  EXPECT_THROW(encoder_layer<double>(nullptr, Tensor<double>::zeros({1, 3, 16}), m.backbone.layers[0], 2, &mask,
                                     Tensor<double>::zeros({2, 16})),
               DimensionError);
}

TEST(Forward, BaseModelHasSingleHead) {
  auto c = toy_config();
  auto m = init_model<double>(c, 17);
  auto tr = forward<double>(nullptr, m, random_images(c, 3, 18));
  ASSERT_EQ(tr.logits.size(), 1u);
  EXPECT_EQ(tr.logits[0].first, "base");
  EXPECT_EQ(tr.logits[0].second.shape(), (Shape{3, 3}));
  EXPECT_THROW(tr.logits_of("nope"), NotFoundError);
  ForwardOptions opts;
  opts.only_head = "nope";
  EXPECT_THROW(forward<double>(nullptr, m, random_images(c, 1, 18), opts), NotFoundError);
}

TEST(Forward, BaselineReductionIsBitExact) {
  auto c = toy_config();
  auto m = init_model<double>(c, 19);
  jitter(m, 20, 0.05);
  add_task(m, {"t", 2, false, {0, 0}, MemoryVariant::per_layer, 21});
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto img = random_images(c, 5, 100 + s);
    EXPECT_TRUE(bit_equal(forward<double>(nullptr, m, img).logits_of("base"), reference_vit_logits(m, img)));
  }
}

TEST(Forward, PerLayerMemoryExtendsKeysOnly) {
  auto c = toy_config(3);
  auto m = init_model<double>(c, 22);
  add_task(m, {"t", 2, true, {5, 5, 5}, MemoryVariant::per_layer, 23});
  ForwardOptions opts;
  opts.keep_trace = true;
  auto tr = forward<double>(nullptr, m, random_images(c, 2, 24), opts);
  const std::size_t carried = c.num_patches() + 2;
  ASSERT_EQ(tr.attention.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(tr.attention[l].shape(), (Shape{2, 2, carried, carried + 5}));
    EXPECT_EQ(tr.layer_outputs[l].dim(1), carried);
    // Rows of allowed weights sum to one.
    const auto& w = tr.attention[l];
    for (std::size_t r = 0; r < w.numel() / w.dim(3); ++r) {
      double total = 0;
      for (std::size_t j = 0; j < w.dim(3); ++j) total += w[r * w.dim(3) + j];
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
  EXPECT_EQ(tr.layout.carried.size(), carried);
  EXPECT_EQ(tr.layout.extension[0].size(), 5u);
}

TEST(Forward, PropagatedFirstEqualsExtendedInputViT) {
  auto c = toy_config(3);
  auto m = init_model<double>(c, 25);
  jitter(m, 26, 0.05);
  add_task(m, {"p", 2, false, uniform_memory(3, 4, MemoryVariant::propagated_first), MemoryVariant::propagated_first, 27});
  auto img = random_images(c, 3, 28);
  auto got = forward<double>(nullptr, m, img).logits_of("base");

  // Oracle: plain ViT over [CLS0, INP, memory tokens] with no mask.
  auto z = patch_embed<double>(nullptr, img, c, m.backbone);
  z = ops::concat_tokens<double>(nullptr, z, ops::broadcast_batch<double>(nullptr, m.tasks[0].memory[0], 3));
  for (std::size_t l = 0; l < c.depth; ++l) {
    z = encoder_layer<double>(nullptr, z, m.backbone.layers[l], c.heads, nullptr, Tensor<double>()).tokens;
  }
  auto x = ops::layernorm<double>(nullptr, ops::select_token<double>(nullptr, z, 0), m.backbone.ln_g, m.backbone.ln_b);
  auto ref = ops::linear<double>(nullptr, x, m.backbone.head_w, m.backbone.head_b);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-10);
}

TEST(Forward, PropagatedAddedAddsBeforeEachLayer) {
  auto c = toy_config(2);
  auto m = init_model<double>(c, 29);
  add_task(m, {"p", 2, true, {3, 3}, MemoryVariant::propagated_added, 30});
  EXPECT_EQ(m.tasks[0].carried_slots(), 3u);
  EXPECT_EQ(m.tasks[0].mem_count(1), 3u);
  auto img = random_images(c, 2, 31);
  auto before = forward<double>(nullptr, m, img).logits_of("p");
  m.tasks[0].memory[1][0] += 0.5;
  auto after = forward<double>(nullptr, m, img).logits_of("p");
  EXPECT_FALSE(bit_equal(before, after));
}

TEST(InitModel, DeterministicPerSeed) {
  auto c = toy_config();
  auto a = init_model<double>(c, 33), b = init_model<double>(c, 33), other = init_model<double>(c, 34);
  auto pa = named_parameters(a), pb = named_parameters(b), po = named_parameters(other);
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(bit_equal(pa[i].tensor, pb[i].tensor)) << pa[i].name;
    any_diff |= !bit_equal(pa[i].tensor, po[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitModel, WeightStandardDeviation) {
  ModelConfig c;
  c.width = 768;
  c.heads = 12;
  c.depth = 1;
  c.mlp_ratio = 1;
  auto m = init_model<float>(c, 35);
  const auto& w = m.backbone.layers[0].w_out;  // 768 x 768
  ASSERT_EQ(w.shape(), (Shape{768, 768}));
  double mean = 0, sq = 0;
  for (float v : w.data()) mean += v;
  mean /= double(w.numel());
  for (float v : w.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / double(w.numel()));
  EXPECT_GT(sd, 0.019);
  EXPECT_LT(sd, 0.021);
}

TEST(InitModel, NoMemoryMeansNoMemoryTensors) {
  auto c = toy_config();
  auto m = init_model<double>(c, 36);
  auto& t = add_task(m, {"t", 2, true, {0, 3}, MemoryVariant::per_layer, 37});
  EXPECT_FALSE(t.memory[0].defined());
  EXPECT_TRUE(t.memory[1].defined());
  for (const auto& p : task_parameters(t, 1)) EXPECT_NE(p.name, "task/t/mem0");
}

TEST(InitModel, InvalidConfigsRejected) {
  auto c = toy_config();
  c.patch_size = 3;
  EXPECT_THROW(init_model<double>(c, 1), ConfigError);
  c = toy_config();
  c.heads = 3;
  EXPECT_THROW(init_model<double>(c, 1), ConfigError);
  c = toy_config();
  c.mem_counts = {2, 2};
  c.variant = MemoryVariant::propagated_first;
  EXPECT_THROW(c.validate(), ConfigError);
  auto m = init_model<double>(toy_config(), 1);
  add_task(m, {"a", 2, true, {}, MemoryVariant::per_layer, 1});
  EXPECT_THROW(add_task(m, {"a", 2, true, {}, MemoryVariant::per_layer, 1}), ConfigError);
  EXPECT_THROW(add_task(m, {"base", 2, true, {}, MemoryVariant::per_layer, 1}), ConfigError);
}

TEST(Forward, ComposedModelGradcheck) {
  // depth 2, D=16, m=2 per layer, 2-class task head; every parameter trainable.
  auto c = toy_config(2, 16, 2);
  auto m = init_model<double>(c, 38);
  add_task(m, {"t", 2, true, {2, 2}, MemoryVariant::per_layer, 39});
  jitter(m, 40, 0.2);
  auto img = random_images(c, 2, 41);
  const std::vector<int> labels = {0, 1};
  std::vector<Tensor<double>> params;
  for (auto& p : named_parameters(m)) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
  }
  ForwardOptions opts;
  opts.policy = MaskPolicy::masked_finetune;
  auto loss = [&](Tape<double>* tape) {
    auto tr = forward(tape, m, img, opts);
    return ops::add(tape, ops::cross_entropy_logits(tape, tr.logits_of("t"), labels),
                    ops::cross_entropy_logits(tape, tr.logits_of("base"), std::vector<int>{2, 0}));
  };
  EXPECT_LT(gradcheck(params, loss, 20), 1e-4);
}
