// Central finite-difference verification of the hand-derived backward pass.
// Every parameter tensor is perturbed element by element and the analytic
// gradient must match (h = 1e-5, relative error < 1e-4).
#include "anchoral/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace {

using anchoral::EncoderConfig;
using anchoral::LossWeights;
using anchoral::ModelParams;
using anchoral::PairForward;

struct Instance {
    std::vector<std::vector<double>> ctx_a, ctx_b;
    std::vector<std::pair<std::pair<int, int>, int>> pairs;  // ((ai, bi), label)
};

// Batch with node reuse: a0 appears in two pairs, so the deduplicated
// backward path is exercised against plain per-pair finite differences.
Instance make_instance() {
    std::mt19937 rng(314);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    Instance inst;
    for (int i = 0; i < 2; ++i) {
        inst.ctx_a.emplace_back(12);
        for (double& x : inst.ctx_a.back()) x = u(rng);
    }
    for (int i = 0; i < 3; ++i) {
        inst.ctx_b.emplace_back(12);
        for (double& x : inst.ctx_b.back()) x = u(rng);
    }
    inst.pairs = {{{0, 0}, 1}, {{0, 1}, 0}, {{1, 2}, 1}};
    return inst;
}

double batch_loss(const Instance& inst, const ModelParams& p, const LossWeights& w) {
    std::vector<PairForward> batch;
    for (const auto& [idx, label] : inst.pairs) {
        auto pf = anchoral::forward_pair(inst.ctx_a[idx.first], inst.ctx_b[idx.second], p);
        pf.label = label;
        batch.push_back(std::move(pf));
    }
    return anchoral::compute_loss(batch, w).total;
}

anchoral::GradientBuffer analytic_gradient(const Instance& inst, const ModelParams& p,
                                           const LossWeights& w) {
    // Shared traces: encode/decode each distinct node once, as training does.
    std::vector<std::shared_ptr<const anchoral::NodeTrace>> ta, tb;
    for (const auto& c : inst.ctx_a)
        ta.push_back(std::make_shared<anchoral::NodeTrace>(anchoral::forward_node(c, 'A', p)));
    for (const auto& c : inst.ctx_b)
        tb.push_back(std::make_shared<anchoral::NodeTrace>(anchoral::forward_node(c, 'B', p)));
    std::vector<PairForward> batch;
    for (const auto& [idx, label] : inst.pairs) {
        PairForward pf;
        pf.a = ta[idx.first];
        pf.b = tb[idx.second];
        anchoral::apply_head(pf, p);
        pf.label = label;
        batch.push_back(std::move(pf));
    }
    return anchoral::backward(batch, p, w).first;
}

void check_all_tensors(const LossWeights& w, const char* tag) {
    EncoderConfig cfg;
    cfg.len_a = 12;
    cfg.len_b = 12;
    cfg.conv_layers = 2;
    cfg.embedding_dim = 4;
    auto inst = make_instance();
    auto p = ModelParams::init(cfg, 2718);
    auto grads = analytic_gradient(inst, p, w);

    const double h = 1e-5;
    auto ps = p.named_tensors();
    auto gs = grads.named_tensors();
    for (std::size_t t = 0; t < ps.size(); ++t) {
        anchoral::Tensor& tensor = *ps[t].second;
        const anchoral::Tensor& grad = *gs[t].second;
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double orig = tensor.data[i];
            tensor.data[i] = orig + h;
            const double lp = batch_loss(inst, p, w);
            tensor.data[i] = orig - h;
            const double lm = batch_loss(inst, p, w);
            tensor.data[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = grad.data[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            ASSERT_LT(rel, 1e-4) << tag << " " << ps[t].first << "[" << i
                                 << "] analytic=" << analytic << " numeric=" << numeric;
        }
    }
}

TEST(GradCheck, FullObjective) {
    LossWeights w;  // defaults: all four terms active
    check_all_tensors(w, "full");
}

TEST(GradCheck, RegularizerDominant) {
    LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.0;
    w.lambda3 = 0.5;
    check_all_tensors(w, "reg");
}

TEST(GradCheck, WithActiveMargin) {
    LossWeights w;
    w.margin = 0.2;  // hinge active only for negatives with cos > 0.2
    check_all_tensors(w, "margin");
}

}  // namespace
