#include "anchoral/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <random>
#include <vector>

namespace {

using anchoral::EncoderConfig;
using anchoral::ModelParams;
using anchoral::NodeTrace;
using anchoral::PairForward;
using anchoral::Tensor;

// ---------------------------------------------------------------------------
// Straight-line reimplementation of the forward pass, structured differently
// (explicit zero padding, gather-style transposed conv) to serve as an oracle.
// ---------------------------------------------------------------------------

using Map = std::vector<std::vector<double>>;  // [channel][position]

Map oracle_conv(const Map& in, const Tensor& w, const Tensor& b, bool sig) {
    const std::size_t c_out = w.shape[0], c_in = w.shape[1], kw = w.shape[2];
    const std::size_t l_in = in[0].size();
    const std::size_t l_out = (l_in + 4 - kw) / 2 + 1;
    Map padded(c_in, std::vector<double>(l_in + 4, 0.0));
    for (std::size_t c = 0; c < c_in; ++c)
        for (std::size_t i = 0; i < l_in; ++i) padded[c][i + 2] = in[c][i];
    Map out(c_out, std::vector<double>(l_out, 0.0));
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t t = 0; t < l_out; ++t) {
            double acc = b.data[co];
            for (std::size_t ci = 0; ci < c_in; ++ci)
                for (std::size_t j = 0; j < kw; ++j) acc += w.at3(co, ci, j) * padded[ci][2 * t + j];
            out[co][t] = sig ? 1.0 / (1.0 + std::exp(-acc)) : acc;
        }
    return out;
}

Map oracle_deconv(const Map& in, const Tensor& v, const Tensor& b, std::size_t target,
                  bool sig) {
    const std::size_t c_in = v.shape[0], c_out = v.shape[1], kw = v.shape[2];
    Map out(c_out, std::vector<double>(target, 0.0));
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t u = 0; u < target; ++u) {
            double acc = b.data[co];
            for (std::size_t ci = 0; ci < c_in; ++ci)
                for (std::size_t t = 0; t < in[ci].size(); ++t) {
                    const long j = static_cast<long>(u) + 2 - 2 * static_cast<long>(t);
                    if (j < 0 || j >= static_cast<long>(kw)) continue;
                    acc += v.at3(ci, co, static_cast<std::size_t>(j)) * in[ci][t];
                }
            out[co][u] = sig ? 1.0 / (1.0 + std::exp(-acc)) : acc;
        }
    return out;
}

std::vector<double> oracle_encode(const std::vector<double>& ctx, char side,
                                  const ModelParams& p) {
    Map cur{ctx};
    for (std::size_t l = 0; l < p.cfg.conv_layers; ++l)
        cur = oracle_conv(cur, p.conv_w[l], p.conv_b[l], true);
    std::vector<double> flat;
    for (const auto& ch : cur) flat.insert(flat.end(), ch.begin(), ch.end());
    const Tensor& fw = side == 'A' ? p.fc_a_w : p.fc_b_w;
    const Tensor& fb = side == 'A' ? p.fc_a_b : p.fc_b_b;
    std::vector<double> v(p.cfg.embedding_dim);
    for (std::size_t r = 0; r < v.size(); ++r) {
        double acc = fb.data[r];
        for (std::size_t c = 0; c < flat.size(); ++c) acc += fw.at2(r, c) * flat[c];
        v[r] = acc;
    }
    return v;
}

std::vector<double> oracle_decode(const std::vector<double>& emb, char side,
                                  const ModelParams& p) {
    const std::size_t n = p.cfg.side_len(side);
    const auto lens = p.cfg.length_schedule(n);
    const auto ch = p.cfg.channels();
    const std::size_t k = p.cfg.conv_layers;
    const Tensor& dw = side == 'A' ? p.dec_fc_a_w : p.dec_fc_b_w;
    const Tensor& db = side == 'A' ? p.dec_fc_a_b : p.dec_fc_b_b;
    std::vector<double> hidden(dw.shape[0]);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        double acc = db.data[i];
        for (std::size_t j = 0; j < emb.size(); ++j) acc += dw.at2(i, j) * emb[j];
        hidden[i] = acc;
    }
    Map cur(ch[k], std::vector<double>(lens[k]));
    for (std::size_t c = 0; c < ch[k]; ++c)
        for (std::size_t t = 0; t < lens[k]; ++t) cur[c][t] = hidden[c * lens[k] + t];
    for (std::size_t j = 0; j < k; ++j)
        cur = oracle_deconv(cur, p.deconv_w[j], p.deconv_b[j], lens[k - 1 - j], j + 1 < k);
    return cur[0];
}

std::vector<double> random_ctx(std::size_t n, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.len_a = 12;
    cfg.len_b = 12;
    cfg.conv_layers = 2;
    cfg.embedding_dim = 4;
    return cfg;
}

TEST(EncoderConfig, ShapeArithmetic) {
    auto cfg = tiny_config();
    EXPECT_EQ(EncoderConfig::conv_out_len(12), 6u);
    EXPECT_EQ(EncoderConfig::conv_out_len(6), 3u);
    EXPECT_EQ(EncoderConfig::conv_out_len(1), 1u);
    EXPECT_EQ(cfg.channels(), (std::vector<std::size_t>{1, 4, 8}));
    EXPECT_EQ(cfg.length_schedule(12), (std::vector<std::size_t>{12, 6, 3}));
    EXPECT_EQ(cfg.flat_size(12), 24u);
}

TEST(Encode, ZeroWeightsPropagateConstants) {
    auto cfg = tiny_config();
    auto p = ModelParams::shaped(cfg);
    // Zero conv weights -> every feature is sigmoid(0) = 0.5; an all-ones
    // affine map then sums 24 features of 0.5 each.
    for (double& x : p.fc_a_w.data) x = 1.0;
    std::vector<double> ctx(12, 0.0);
    auto v = anchoral::encode(ctx, 'A', p);
    ASSERT_EQ(v.size(), 4u);
    for (double x : v) EXPECT_DOUBLE_EQ(x, 12.0);
}

TEST(Encode, DeterministicAndSharedAcrossSides) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 42);
    p.fc_b_w = p.fc_a_w;  // make the per-network maps identical too
    p.fc_b_b = p.fc_a_b;
    auto ctx = random_ctx(12, 1);
    auto va = anchoral::encode(ctx, 'A', p);
    auto vb = anchoral::encode(ctx, 'B', p);
    EXPECT_EQ(va, anchoral::encode(ctx, 'A', p));
    for (std::size_t i = 0; i < va.size(); ++i) EXPECT_DOUBLE_EQ(va[i], vb[i]);
}

TEST(Encode, MatchesOracle) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 7);
    auto ctx = random_ctx(12, 2);
    auto got = anchoral::encode(ctx, 'A', p);
    auto want = oracle_encode(ctx, 'A', p);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Decode, OutputLengthAndZeroCase) {
    EncoderConfig cfg;
    cfg.len_a = 17;
    cfg.len_b = 9;
    cfg.conv_layers = 2;
    cfg.embedding_dim = 4;
    auto p = ModelParams::shaped(cfg);
    std::vector<double> emb(4, 0.0);
    EXPECT_EQ(anchoral::decode(emb, 'A', p).size(), 17u);
    EXPECT_EQ(anchoral::decode(emb, 'B', p).size(), 9u);
    for (double x : anchoral::decode(emb, 'A', p)) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(Decode, MatchesOracle) {
    auto cfg = tiny_config();
    cfg.len_b = 9;  // exercise unequal network sizes
    auto p = ModelParams::init(cfg, 13);
    auto emb = random_ctx(4, 3);
    for (char side : {'A', 'B'}) {
        auto got = anchoral::decode(emb, side, p);
        auto want = oracle_decode(emb, side, p);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            ASSERT_NEAR(got[i], want[i], 1e-12) << "side " << side << " pos " << i;
    }
}

TEST(ForwardPair, UniformWithZeroHeadAndNormalized) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 5);
    p.clf_w.zero();
    p.clf_b.zero();
    auto pf = anchoral::forward_pair(random_ctx(12, 4), random_ctx(12, 5), p);
    EXPECT_DOUBLE_EQ(pf.probs[0], 0.5);
    EXPECT_DOUBLE_EQ(pf.probs[1], 0.5);

    auto p2 = ModelParams::init(cfg, 6);
    for (unsigned s = 0; s < 10; ++s) {
        auto q = anchoral::forward_pair(random_ctx(12, 10 + s), random_ctx(12, 20 + s), p2);
        EXPECT_NEAR(q.probs[0] + q.probs[1], 1.0, 1e-12);
        EXPECT_GT(q.probs[0], 0.0);
        EXPECT_LT(q.probs[0], 1.0);
    }
}

TEST(ForwardPair, MatchesOracle) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 8);
    auto ca = random_ctx(12, 6), cb = random_ctx(12, 7);
    auto pf = anchoral::forward_pair(ca, cb, p);

    auto va = oracle_encode(ca, 'A', p), vb = oracle_encode(cb, 'B', p);
    double z[2];
    for (int r = 0; r < 2; ++r) {
        z[r] = p.clf_b.data[r];
        for (std::size_t c = 0; c < 4; ++c) z[r] += p.clf_w.at2(r, c) * va[c];
        for (std::size_t c = 0; c < 4; ++c) z[r] += p.clf_w.at2(r, 4 + c) * vb[c];
    }
    const double zm = std::max(z[0], z[1]);
    const double e0 = std::exp(z[0] - zm), e1 = std::exp(z[1] - zm);
    EXPECT_NEAR(pf.probs[0], e0 / (e0 + e1), 1e-12);
    EXPECT_NEAR(pf.probs[1], e1 / (e0 + e1), 1e-12);

    auto ra = oracle_decode(va, 'A', p);
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_NEAR(pf.a->recon[i], ra[i], 1e-12);
}

// Builds a PairForward directly from raw vectors; compute_loss only reads the
// cached fields, so synthetic traces give exact hand-checkable losses.
PairForward synthetic_pair(std::vector<double> in_a, std::vector<double> rec_a,
                           std::vector<double> emb_a, std::vector<double> in_b,
                           std::vector<double> rec_b, std::vector<double> emb_b,
                           double p1, int label) {
    auto ta = std::make_shared<NodeTrace>();
    ta->side = 'A';
    ta->input = std::move(in_a);
    ta->recon = std::move(rec_a);
    ta->embedding = std::move(emb_a);
    auto tb = std::make_shared<NodeTrace>();
    tb->side = 'B';
    tb->input = std::move(in_b);
    tb->recon = std::move(rec_b);
    tb->embedding = std::move(emb_b);
    PairForward pf;
    pf.a = ta;
    pf.b = tb;
    pf.probs = {1.0 - p1, p1};
    pf.label = label;
    return pf;
}

TEST(Loss, HandComputedSinglePair) {
    auto pf = synthetic_pair({1, 0}, {0, 0}, {1, 0}, {1, 0}, {0, 0}, {1, 0}, 0.5, 1);
    anchoral::LossWeights w;
    auto l = anchoral::compute_loss({pf}, w);
    EXPECT_NEAR(l.single, 2.0, 1e-12);          // both sides reconstruct [1,0] as [0,0]
    EXPECT_NEAR(l.cross, 0.0, 1e-12);           // cosine of identical embeddings is 1
    EXPECT_NEAR(l.clf, std::log(2.0), 1e-12);   // -log 0.5
    EXPECT_NEAR(l.reg, 2.0, 1e-12);
    EXPECT_NEAR(l.total, 2.0 + 0.01 * std::log(2.0) + 1e-5 * 2.0, 1e-12);

    // Same geometry but labeled negative: aligned embeddings now cost 1.
    auto nf = synthetic_pair({1, 0}, {0, 0}, {1, 0}, {1, 0}, {0, 0}, {1, 0}, 0.5, 0);
    auto ln = anchoral::compute_loss({nf}, w);
    EXPECT_NEAR(ln.cross, 1.0, 1e-12);
}

TEST(Loss, MarginGatesNegativePairs) {
    auto nf = synthetic_pair({0}, {0}, {1, 0}, {0}, {0}, {1, 1}, 0.5, 0);
    anchoral::LossWeights w;
    w.margin = 0.9;  // cos = 1/sqrt(2) ~ 0.707 < margin -> hinge inactive
    EXPECT_NEAR(anchoral::compute_loss({nf}, w).cross, 0.0, 1e-12);
    w.margin = 0.5;
    EXPECT_NEAR(anchoral::compute_loss({nf}, w).cross, 1.0 / std::sqrt(2.0) - 0.5, 1e-12);
}

TEST(Loss, ZeroNormEmbeddingIsCountedNotPropagated) {
    auto pf = synthetic_pair({0}, {0}, {0, 0}, {0}, {0}, {1, 0}, 0.5, 1);
    anchoral::LossWeights w;
    auto l = anchoral::compute_loss({pf}, w);
    EXPECT_EQ(l.zero_norm_cosines, 1u);
    EXPECT_NEAR(l.cross, 1.0, 1e-12);  // cos treated as 0 -> positive pays 1
}

TEST(Backward, DuplicatePairsAverageOut) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 9);
    auto pf = anchoral::forward_pair(random_ctx(12, 8), random_ctx(12, 9), p);
    pf.label = 1;
    anchoral::LossWeights w;
    auto [g1, l1] = anchoral::backward({pf}, p, w);
    auto [g2, l2] = anchoral::backward({pf, pf}, p, w);  // same traces twice
    EXPECT_NEAR(l1.total, l2.total, 1e-12);
    auto t1 = g1.named_tensors();
    auto t2 = g2.named_tensors();
    for (std::size_t i = 0; i < t1.size(); ++i)
        for (std::size_t j = 0; j < t1[i].second->size(); ++j)
            ASSERT_NEAR(t1[i].second->data[j], t2[i].second->data[j], 1e-12)
                << t1[i].first;
}

TEST(Backward, RejectsUnlabeledAndEmptyBatches) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 10);
    anchoral::LossWeights w;
    EXPECT_THROW(anchoral::backward({}, p, w), std::invalid_argument);
    auto pf = anchoral::forward_pair(random_ctx(12, 1), random_ctx(12, 2), p);
    EXPECT_THROW(anchoral::backward({pf}, p, w), std::invalid_argument);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 11);
    auto snapshot = p;
    auto g = anchoral::zero_like(p);
    anchoral::AdamState st;
    anchoral::adam_step(p, g, st, 1e-3);
    auto a = p.named_tensors();
    auto b = snapshot.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(a[i].second->data, b[i].second->data) << a[i].first;
}

TEST(Adam, DeterministicAndRejectsNonFinite) {
    auto cfg = tiny_config();
    auto run = [&] {
        auto p = ModelParams::init(cfg, 12);
        anchoral::AdamState st;
        auto pf = anchoral::forward_pair(random_ctx(12, 3), random_ctx(12, 4), p);
        pf.label = 1;
        anchoral::LossWeights w;
        for (int i = 0; i < 3; ++i) {
            auto [g, l] = anchoral::backward({pf}, p, w);
            anchoral::adam_step(p, g, st, 1e-3);
        }
        return p;
    };
    auto p1 = run(), p2 = run();
    auto a = p1.named_tensors(), b = p2.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(a[i].second->data, b[i].second->data);

    auto p = ModelParams::init(cfg, 12);
    auto g = anchoral::zero_like(p);
    g.clf_b.data[0] = std::numeric_limits<double>::quiet_NaN();
    anchoral::AdamState st;
    EXPECT_THROW(anchoral::adam_step(p, g, st, 1e-3), std::runtime_error);
}

TEST(Adam, LossDecreasesOnFixedBatch) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 14);
    anchoral::AdamState st;
    anchoral::LossWeights w;
    std::vector<std::vector<double>> ctx_a, ctx_b;
    for (unsigned i = 0; i < 10; ++i) {
        ctx_a.push_back(random_ctx(12, 100 + i));
        ctx_b.push_back(random_ctx(12, 200 + i));
    }
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 50; ++step) {
        std::vector<PairForward> batch;
        for (unsigned i = 0; i < 10; ++i) {
            auto pf = anchoral::forward_pair(ctx_a[i], ctx_b[i], p);
            pf.label = (i < 5) ? 1 : 0;
            batch.push_back(std::move(pf));
        }
        auto [g, l] = anchoral::backward(batch, p, w);
        if (step == 0) first = l.total;
        last = l.total;
        anchoral::adam_step(p, g, st, 1e-2);
    }
    EXPECT_LT(last, first * 0.9) << "first=" << first << " last=" << last;
}

TEST(Checkpoint, RoundTripIsExact) {
    auto cfg = tiny_config();
    cfg.len_b = 9;
    auto p = ModelParams::init(cfg, 21);
    anchoral::AdamState st;
    auto pf = anchoral::forward_pair(random_ctx(12, 1), random_ctx(9, 2), p);
    pf.label = 0;
    anchoral::LossWeights w;
    auto [g, l] = anchoral::backward({pf}, p, w);
    anchoral::adam_step(p, g, st, 1e-3);

    const std::string path = ::testing::TempDir() + "anchoral_ckpt.bin";
    anchoral::save_checkpoint(path, p, st, "experiment=unit");
    auto ck = anchoral::load_checkpoint(path);
    EXPECT_EQ(ck.params.cfg, cfg);
    EXPECT_EQ(ck.adam.step, 1u);
    EXPECT_NE(ck.config_string.find("experiment=unit"), std::string::npos);
    auto a = p.named_tensors(), b = ck.params.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(a[i].second->data, b[i].second->data) << a[i].first;
    for (const auto& [name, t] : st.m) EXPECT_EQ(ck.adam.m.at(name).data, t.data);
    for (const auto& [name, t] : st.v) EXPECT_EQ(ck.adam.v.at(name).data, t.data);
    std::remove(path.c_str());
}

TEST(Checkpoint, DetectsCorruption) {
    auto cfg = tiny_config();
    auto p = ModelParams::init(cfg, 22);
    const std::string path = ::testing::TempDir() + "anchoral_ckpt_bad.bin";
    anchoral::save_checkpoint(path, p, anchoral::AdamState{});
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3);
        f.put('!');
    }
    EXPECT_THROW(anchoral::load_checkpoint(path), std::runtime_error);
    EXPECT_THROW(anchoral::load_checkpoint(path + ".missing"), std::runtime_error);
    std::remove(path.c_str());
}

}  // namespace
