#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "anchoral/parallel.hpp"
#include "anchoral/rng.hpp"
#include "anchoral/tensor.hpp"

namespace anchoral {

/// Architecture hyperparameters. The conv/deconv stacks are shared between
/// the two networks; only the flatten sizes (and hence the per-network affine
/// maps) depend on the side, which is why len_a and len_b both live here.
struct EncoderConfig {
    std::size_t len_a = 0;           // N_A: context length on side A
    std::size_t len_b = 0;           // N_B: context length on side B
    std::size_t conv_layers = 2;     // k
    std::size_t embedding_dim = 56;  // d

    static constexpr std::size_t kKernelWidth = 5;
    static constexpr std::size_t kStride = 2;
    static constexpr std::size_t kPadding = 2;

    void validate() const {
        if (len_a == 0 || len_b == 0)
            throw std::invalid_argument("EncoderConfig: context lengths must be >= 1");
        if (conv_layers == 0) throw std::invalid_argument("EncoderConfig: need >= 1 conv layer");
        if (embedding_dim == 0) throw std::invalid_argument("EncoderConfig: embedding_dim must be >= 1");
    }

    static std::size_t conv_out_len(std::size_t len) {
        return (len + 2 * kPadding - kKernelWidth) / kStride + 1;
    }

    // Channel schedule {1, 4, 8, 16, ...}: layer l maps channels()[l] -> channels()[l+1].
    std::vector<std::size_t> channels() const {
        std::vector<std::size_t> c{1};
        for (std::size_t l = 0; l < conv_layers; ++l) c.push_back(std::size_t{4} << l);
        return c;
    }

    // Length schedule {n, len_1, ..., len_k} for one side.
    std::vector<std::size_t> length_schedule(std::size_t n) const {
        std::vector<std::size_t> s{n};
        for (std::size_t l = 0; l < conv_layers; ++l) s.push_back(conv_out_len(s.back()));
        return s;
    }

    std::size_t flat_size(std::size_t n) const {
        return channels().back() * length_schedule(n).back();
    }

    std::size_t side_len(char side) const { return side == 'A' ? len_a : len_b; }

    bool operator==(const EncoderConfig&) const = default;
};

/// All learnable parameters. conv/deconv stacks are shared across networks;
/// fc_* / dec_fc_* are per-network; clf_* is the pair classifier head.
struct ModelParams {
    EncoderConfig cfg;
    std::vector<Tensor> conv_w, conv_b;      // conv_w[l]: {C_out, C_in, kw}
    std::vector<Tensor> deconv_w, deconv_b;  // deconv_w[j]: {C_in, C_out, kw}
    Tensor fc_a_w, fc_a_b, fc_b_w, fc_b_b;          // {d, flat}, {d}
    Tensor dec_fc_a_w, dec_fc_a_b, dec_fc_b_w, dec_fc_b_b;  // {flat, d}, {flat}
    Tensor clf_w, clf_b;                      // {2, 2d}, {2}

    static ModelParams shaped(const EncoderConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.cfg = cfg;
        const auto ch = cfg.channels();
        const std::size_t kw = EncoderConfig::kKernelWidth;
        const std::size_t k = cfg.conv_layers;
        for (std::size_t l = 0; l < k; ++l) {
            p.conv_w.push_back(Tensor::zeros({ch[l + 1], ch[l], kw}));
            p.conv_b.push_back(Tensor::zeros({ch[l + 1]}));
        }
        for (std::size_t j = 0; j < k; ++j) {
            // Decoder layer j mirrors conv layer k-1-j.
            p.deconv_w.push_back(Tensor::zeros({ch[k - j], ch[k - j - 1], kw}));
            p.deconv_b.push_back(Tensor::zeros({ch[k - j - 1]}));
        }
        const std::size_t d = cfg.embedding_dim;
        const std::size_t fa = cfg.flat_size(cfg.len_a), fb = cfg.flat_size(cfg.len_b);
        p.fc_a_w = Tensor::zeros({d, fa});
        p.fc_a_b = Tensor::zeros({d});
        p.fc_b_w = Tensor::zeros({d, fb});
        p.fc_b_b = Tensor::zeros({d});
        p.dec_fc_a_w = Tensor::zeros({fa, d});
        p.dec_fc_a_b = Tensor::zeros({fa});
        p.dec_fc_b_w = Tensor::zeros({fb, d});
        p.dec_fc_b_b = Tensor::zeros({fb});
        p.clf_w = Tensor::zeros({2, 2 * d});
        p.clf_b = Tensor::zeros({2});
        return p;
    }

    static ModelParams init(const EncoderConfig& cfg, std::uint64_t seed) {
        ModelParams p = shaped(cfg);
        auto rng = substream(seed, "init");
        auto xavier = [&rng](Tensor& t, std::size_t fan_in, std::size_t fan_out) {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (double& x : t.data) x = u(rng);
        };
        const std::size_t kw = EncoderConfig::kKernelWidth;
        for (std::size_t l = 0; l < p.conv_w.size(); ++l)
            xavier(p.conv_w[l], p.conv_w[l].shape[1] * kw, p.conv_w[l].shape[0] * kw);
        for (std::size_t j = 0; j < p.deconv_w.size(); ++j)
            xavier(p.deconv_w[j], p.deconv_w[j].shape[0] * kw, p.deconv_w[j].shape[1] * kw);
        xavier(p.fc_a_w, p.fc_a_w.shape[1], p.fc_a_w.shape[0]);
        xavier(p.fc_b_w, p.fc_b_w.shape[1], p.fc_b_w.shape[0]);
        xavier(p.dec_fc_a_w, p.dec_fc_a_w.shape[1], p.dec_fc_a_w.shape[0]);
        xavier(p.dec_fc_b_w, p.dec_fc_b_w.shape[1], p.dec_fc_b_w.shape[0]);
        xavier(p.clf_w, p.clf_w.shape[1], p.clf_w.shape[0]);
        return p;
    }

    // Stable (name, tensor) enumeration; defines checkpoint and Adam ordering.
    template <typename Self>
    static auto named_tensors_impl(Self& self) {
        using TensorPtr = decltype(&self.clf_w);
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t l = 0; l < self.conv_w.size(); ++l) {
            out.emplace_back("conv" + std::to_string(l + 1) + ".W", &self.conv_w[l]);
            out.emplace_back("conv" + std::to_string(l + 1) + ".b", &self.conv_b[l]);
        }
        for (std::size_t j = 0; j < self.deconv_w.size(); ++j) {
            out.emplace_back("deconv" + std::to_string(j + 1) + ".V", &self.deconv_w[j]);
            out.emplace_back("deconv" + std::to_string(j + 1) + ".b", &self.deconv_b[j]);
        }
        out.emplace_back("fc_a.W", &self.fc_a_w);
        out.emplace_back("fc_a.b", &self.fc_a_b);
        out.emplace_back("fc_b.W", &self.fc_b_w);
        out.emplace_back("fc_b.b", &self.fc_b_b);
        out.emplace_back("dec_fc_a.W", &self.dec_fc_a_w);
        out.emplace_back("dec_fc_a.b", &self.dec_fc_a_b);
        out.emplace_back("dec_fc_b.W", &self.dec_fc_b_w);
        out.emplace_back("dec_fc_b.b", &self.dec_fc_b_b);
        out.emplace_back("clf.W", &self.clf_w);
        out.emplace_back("clf.b", &self.clf_b);
        return out;
    }
    auto named_tensors() { return named_tensors_impl(*this); }
    auto named_tensors() const { return named_tensors_impl(*this); }

    bool all_finite() const {
        for (const auto& [name, t] : named_tensors())
            if (!t->finite()) return false;
        return true;
    }
};

using GradientBuffer = ModelParams;

inline GradientBuffer zero_like(const ModelParams& p) { return ModelParams::shaped(p.cfg); }

inline void accumulate(GradientBuffer& dst, const GradientBuffer& src) {
    auto d = dst.named_tensors();
    auto s = src.named_tensors();
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto& out = d[i].second->data;
        const auto& in = s[i].second->data;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += in[j];
    }
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// in {C_in, L_in} -> out {C_out, L_out}; W {C_out, C_in, kw}.
inline Tensor conv_forward(const Tensor& in, const Tensor& w, const Tensor& b,
                           bool apply_sigmoid) {
    const std::size_t c_out = w.shape[0], c_in = w.shape[1], kw = w.shape[2];
    const std::size_t l_in = in.shape[1];
    const std::size_t l_out = EncoderConfig::conv_out_len(l_in);
    const std::size_t s = EncoderConfig::kStride;
    const std::ptrdiff_t pad = EncoderConfig::kPadding;
    Tensor out = Tensor::zeros({c_out, l_out});
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t t = 0; t < l_out; ++t) {
            double acc = b.data[co];
            for (std::size_t ci = 0; ci < c_in; ++ci)
                for (std::size_t j = 0; j < kw; ++j) {
                    const std::ptrdiff_t x =
                        static_cast<std::ptrdiff_t>(t * s + j) - pad;
                    if (x < 0 || x >= static_cast<std::ptrdiff_t>(l_in)) continue;
                    acc += w.at3(co, ci, j) * in.at2(ci, static_cast<std::size_t>(x));
                }
            out.at2(co, t) = apply_sigmoid ? sigmoid(acc) : acc;
        }
    return out;
}

// Transposed conv: in {C_in, L_in} scattered to out {C_out, target_len};
// V {C_in, C_out, kw}; out[co][t*stride + j - pad] += V(ci,co,j) * in[ci][t].
inline Tensor deconv_forward(const Tensor& in, const Tensor& v, const Tensor& b,
                             std::size_t target_len, bool apply_sigmoid) {
    const std::size_t c_in = v.shape[0], c_out = v.shape[1], kw = v.shape[2];
    const std::size_t l_in = in.shape[1];
    const std::size_t s = EncoderConfig::kStride;
    const std::ptrdiff_t pad = EncoderConfig::kPadding;
    Tensor out = Tensor::zeros({c_out, target_len});
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t u = 0; u < target_len; ++u) out.at2(co, u) = b.data[co];
    for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t t = 0; t < l_in; ++t) {
            const double x = in.at2(ci, t);
            if (x == 0.0) continue;
            for (std::size_t co = 0; co < c_out; ++co)
                for (std::size_t j = 0; j < kw; ++j) {
                    const std::ptrdiff_t u =
                        static_cast<std::ptrdiff_t>(t * s + j) - pad;
                    if (u < 0 || u >= static_cast<std::ptrdiff_t>(target_len)) continue;
                    out.at2(co, static_cast<std::size_t>(u)) += v.at3(ci, co, j) * x;
                }
        }
    if (apply_sigmoid)
        for (double& x : out.data) x = sigmoid(x);
    return out;
}

}  // namespace detail

/// Cached activations for one node's full encode + decode pass. Everything
/// the backward pass needs; sigmoid derivatives use the stored
/// post-activation values.
struct NodeTrace {
    char side = 'A';
    int node = -1;
    std::vector<double> input;        // context row, length n
    std::vector<Tensor> conv_act;     // k maps {C_l, len_l}, post-sigmoid
    std::vector<double> embedding;    // v, length d (linear)
    std::vector<double> dec_hidden;   // dec_fc output, length flat (linear)
    std::vector<Tensor> deconv_act;   // k maps; last one {1, n} linear
    std::vector<double> recon;        // m_hat, length n
};

namespace detail {

inline void encode_into(NodeTrace& tr, const ModelParams& p) {
    const auto& cfg = p.cfg;
    Tensor x = Tensor::zeros({1, tr.input.size()});
    x.data = tr.input;
    tr.conv_act.clear();
    for (std::size_t l = 0; l < cfg.conv_layers; ++l) {
        const Tensor& src = (l == 0) ? x : tr.conv_act[l - 1];
        tr.conv_act.push_back(conv_forward(src, p.conv_w[l], p.conv_b[l], true));
    }
    const auto& flat = tr.conv_act.back().data;
    const Tensor& fw = (tr.side == 'A') ? p.fc_a_w : p.fc_b_w;
    const Tensor& fb = (tr.side == 'A') ? p.fc_a_b : p.fc_b_b;
    if (fw.shape[1] != flat.size())
        throw std::invalid_argument("encode: context length does not match model");
    const std::size_t d = cfg.embedding_dim;
    tr.embedding.assign(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        double acc = fb.data[r];
        const double* wr = fw.data.data() + r * flat.size();
        for (std::size_t c = 0; c < flat.size(); ++c) acc += wr[c] * flat[c];
        tr.embedding[r] = acc;
    }
}

inline void decode_into(NodeTrace& tr, const ModelParams& p) {
    const auto& cfg = p.cfg;
    const std::size_t n = cfg.side_len(tr.side);
    const auto lens = cfg.length_schedule(n);
    const auto ch = cfg.channels();
    const std::size_t k = cfg.conv_layers;
    const Tensor& dw = (tr.side == 'A') ? p.dec_fc_a_w : p.dec_fc_b_w;
    const Tensor& db = (tr.side == 'A') ? p.dec_fc_a_b : p.dec_fc_b_b;
    const std::size_t flat = dw.shape[0], d = dw.shape[1];
    if (tr.embedding.size() != d)
        throw std::invalid_argument("decode: embedding length does not match model");
    tr.dec_hidden.assign(flat, 0.0);
    for (std::size_t i = 0; i < flat; ++i) {
        double acc = db.data[i];
        const double* wr = dw.data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) acc += wr[j] * tr.embedding[j];
        tr.dec_hidden[i] = acc;
    }
    Tensor cur = Tensor::zeros({ch[k], lens[k]});
    cur.data = tr.dec_hidden;
    tr.deconv_act.clear();
    for (std::size_t j = 0; j < k; ++j) {
        const Tensor& src = (j == 0) ? cur : tr.deconv_act[j - 1];
        const bool sig = (j + 1 < k);  // final decoder layer is linear
        tr.deconv_act.push_back(
            detail::deconv_forward(src, p.deconv_w[j], p.deconv_b[j], lens[k - 1 - j], sig));
    }
    tr.recon = tr.deconv_act.back().data;
}

}  // namespace detail

inline NodeTrace forward_node(std::span<const double> ctx, char side,
                              const ModelParams& p, int node = -1) {
    if (side != 'A' && side != 'B') throw std::invalid_argument("side must be 'A' or 'B'");
    if (ctx.size() != p.cfg.side_len(side))
        throw std::invalid_argument("forward_node: context length mismatch");
    NodeTrace tr;
    tr.side = side;
    tr.node = node;
    tr.input.assign(ctx.begin(), ctx.end());
    detail::encode_into(tr, p);
    detail::decode_into(tr, p);
    return tr;
}

/// Encoder half only (conv stack + per-network affine); used when only the
/// embedding is needed, e.g. when scoring candidate pairs.
inline std::vector<double> encode(std::span<const double> ctx, char side,
                                  const ModelParams& p) {
    if (side != 'A' && side != 'B') throw std::invalid_argument("side must be 'A' or 'B'");
    if (ctx.size() != p.cfg.side_len(side))
        throw std::invalid_argument("encode: context length mismatch");
    NodeTrace tr;
    tr.side = side;
    tr.input.assign(ctx.begin(), ctx.end());
    detail::encode_into(tr, p);
    return tr.embedding;
}

inline std::vector<double> decode(std::span<const double> embedding, char side,
                                  const ModelParams& p) {
    NodeTrace tr;
    tr.side = side;
    tr.embedding.assign(embedding.begin(), embedding.end());
    detail::decode_into(tr, p);
    return tr.recon;
}

/// One labeled (or to-be-labeled) pair with everything cached for backprop.
/// Traces are shared_ptrs so batches can reuse a node's forward pass across
/// many pairs.
struct PairForward {
    std::shared_ptr<const NodeTrace> a, b;
    std::array<double, 2> logits{0.0, 0.0};
    std::array<double, 2> probs{0.5, 0.5};  // clamped to (0,1), sums to 1
    int label = -1;                          // 1 = anchor pair, 0 = non-anchor
};

inline void apply_head(PairForward& pf, const ModelParams& p) {
    const std::size_t d = p.cfg.embedding_dim;
    for (std::size_t r = 0; r < 2; ++r) {
        double acc = p.clf_b.data[r];
        const double* wr = p.clf_w.data.data() + r * 2 * d;
        for (std::size_t c = 0; c < d; ++c) acc += wr[c] * pf.a->embedding[c];
        for (std::size_t c = 0; c < d; ++c) acc += wr[d + c] * pf.b->embedding[c];
        pf.logits[r] = acc;
    }
    const double zm = std::max(pf.logits[0], pf.logits[1]);
    double e0 = std::exp(pf.logits[0] - zm), e1 = std::exp(pf.logits[1] - zm);
    double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
    p0 = std::min(hi, std::max(lo, p0));
    p1 = std::min(hi, std::max(lo, p1));
    const double s = p0 + p1;
    pf.probs = {p0 / s, p1 / s};
}

inline PairForward forward_pair(std::span<const double> ctx_a,
                                std::span<const double> ctx_b,
                                const ModelParams& p) {
    PairForward pf;
    pf.a = std::make_shared<NodeTrace>(forward_node(ctx_a, 'A', p));
    pf.b = std::make_shared<NodeTrace>(forward_node(ctx_b, 'B', p));
    apply_head(pf, p);
    return pf;
}

struct LossWeights {
    double lambda1 = 0.01;   // cross-network embedding loss
    double lambda2 = 0.01;   // classification loss
    double lambda3 = 1e-5;   // embedding L2 penalty
    double margin = 0.0;     // hinge margin for negative-pair cosine
};

struct LossBreakdown {
    double single = 0.0;  // reconstruction
    double cross = 0.0;   // cosine alignment
    double clf = 0.0;     // negative log-likelihood
    double reg = 0.0;     // embedding L2
    double total = 0.0;
    std::size_t zero_norm_cosines = 0;  // degenerate pairs skipped in cross term
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

struct BatchCounts {
    std::size_t n = 0, pos = 0, neg = 0;
};

inline BatchCounts count_batch(const std::vector<PairForward>& batch) {
    BatchCounts c;
    c.n = batch.size();
    for (const auto& pf : batch) {
        if (pf.label != 0 && pf.label != 1)
            throw std::invalid_argument("backward: every pair needs a 0/1 label");
        if (pf.label == 1)
            ++c.pos;
        else
            ++c.neg;
    }
    return c;
}

}  // namespace detail

/// Loss of a batch from cached forward results. The cross term skips (and
/// counts) pairs where an embedding has zero norm; empty positive or negative
/// sides contribute zero.
inline LossBreakdown compute_loss(const std::vector<PairForward>& batch,
                                  const LossWeights& w) {
    if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
    const auto counts = detail::count_batch(batch);
    LossBreakdown out;
    for (const auto& pf : batch) {
        double rec = 0.0;
        for (std::size_t i = 0; i < pf.a->input.size(); ++i) {
            const double e = pf.a->input[i] - pf.a->recon[i];
            rec += e * e;
        }
        for (std::size_t i = 0; i < pf.b->input.size(); ++i) {
            const double e = pf.b->input[i] - pf.b->recon[i];
            rec += e * e;
        }
        out.single += rec;

        const double na = detail::norm(pf.a->embedding);
        const double nb = detail::norm(pf.b->embedding);
        double cosv = 0.0;
        if (na == 0.0 || nb == 0.0)
            ++out.zero_norm_cosines;
        else
            cosv = detail::dot(pf.a->embedding, pf.b->embedding) / (na * nb);
        if (pf.label == 1)
            out.cross += (1.0 - cosv) / static_cast<double>(counts.pos);
        else if (cosv > w.margin)
            out.cross += (cosv - w.margin) / static_cast<double>(counts.neg);

        out.clf += -std::log(pf.probs[pf.label]);
        out.reg += detail::dot(pf.a->embedding, pf.a->embedding) +
                   detail::dot(pf.b->embedding, pf.b->embedding);
    }
    const double n = static_cast<double>(counts.n);
    out.single /= n;
    out.clf /= n;
    out.reg /= n;
    out.total = out.single + w.lambda1 * out.cross + w.lambda2 * out.clf + w.lambda3 * out.reg;
    return out;
}

namespace detail {

// Backward through one node's decode + encode stacks given the loss gradient
// seeds w.r.t. the node's embedding and reconstruction. Accumulates into out.
inline void node_backward(const NodeTrace& tr, const std::vector<double>& g_embed_seed,
                          const std::vector<double>& g_recon_seed,
                          const ModelParams& p, GradientBuffer& out) {
    const auto& cfg = p.cfg;
    const std::size_t k = cfg.conv_layers;
    const std::size_t n = cfg.side_len(tr.side);
    const auto lens = cfg.length_schedule(n);
    const auto ch = cfg.channels();
    const std::size_t s = EncoderConfig::kStride;
    const std::ptrdiff_t pad = EncoderConfig::kPadding;
    const std::size_t kw = EncoderConfig::kKernelWidth;

    std::vector<double> g_embed = g_embed_seed;

    // ---- decoder stack, output -> hidden ----
    Tensor g_act = Tensor::zeros({1, n});
    g_act.data = g_recon_seed;
    Tensor dec_input = Tensor::zeros({ch[k], lens[k]});
    dec_input.data = tr.dec_hidden;
    for (std::size_t j = k; j-- > 0;) {
        const Tensor& act = tr.deconv_act[j];
        Tensor g_pre = g_act;
        if (j + 1 < k)  // sigmoid on all but the final decoder layer
            for (std::size_t i = 0; i < g_pre.data.size(); ++i)
                g_pre.data[i] *= act.data[i] * (1.0 - act.data[i]);
        const Tensor& in = (j == 0) ? dec_input : tr.deconv_act[j - 1];
        const Tensor& v = p.deconv_w[j];
        Tensor& gv = out.deconv_w[j];
        Tensor& gb = out.deconv_b[j];
        const std::size_t c_in = v.shape[0], c_out = v.shape[1];
        const std::size_t l_in = in.shape[1], l_out = g_pre.shape[1];
        for (std::size_t co = 0; co < c_out; ++co)
            for (std::size_t u = 0; u < l_out; ++u) gb.data[co] += g_pre.at2(co, u);
        Tensor g_in = Tensor::zeros({c_in, l_in});
        for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t t = 0; t < l_in; ++t) {
                const double x = in.at2(ci, t);
                double acc = 0.0;
                for (std::size_t co = 0; co < c_out; ++co)
                    for (std::size_t m = 0; m < kw; ++m) {
                        const std::ptrdiff_t u =
                            static_cast<std::ptrdiff_t>(t * s + m) - pad;
                        if (u < 0 || u >= static_cast<std::ptrdiff_t>(l_out)) continue;
                        const double g = g_pre.at2(co, static_cast<std::size_t>(u));
                        gv.at3(ci, co, m) += x * g;
                        acc += v.at3(ci, co, m) * g;
                    }
                g_in.at2(ci, t) = acc;
            }
        g_act = std::move(g_in);
    }

    // ---- per-network decoder affine ----
    const bool side_a = (tr.side == 'A');
    const Tensor& dw = side_a ? p.dec_fc_a_w : p.dec_fc_b_w;
    Tensor& g_dw = side_a ? out.dec_fc_a_w : out.dec_fc_b_w;
    Tensor& g_db = side_a ? out.dec_fc_a_b : out.dec_fc_b_b;
    const std::size_t flat = dw.shape[0], d = dw.shape[1];
    const std::vector<double>& g_hidden = g_act.data;  // {C_k, len_k} flattened
    for (std::size_t i = 0; i < flat; ++i) {
        const double g = g_hidden[i];
        if (g == 0.0) continue;
        g_db.data[i] += g;
        double* gw = g_dw.data.data() + i * d;
        const double* wr = dw.data.data() + i * d;
        for (std::size_t r = 0; r < d; ++r) {
            gw[r] += g * tr.embedding[r];
            g_embed[r] += wr[r] * g;
        }
    }

    // ---- per-network encoder affine ----
    const Tensor& fw = side_a ? p.fc_a_w : p.fc_b_w;
    Tensor& g_fw = side_a ? out.fc_a_w : out.fc_b_w;
    Tensor& g_fb = side_a ? out.fc_a_b : out.fc_b_b;
    const auto& flat_act = tr.conv_act.back().data;
    std::vector<double> g_flat(flat_act.size(), 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        const double g = g_embed[r];
        g_fb.data[r] += g;
        double* gw = g_fw.data.data() + r * flat_act.size();
        const double* wr = fw.data.data() + r * flat_act.size();
        for (std::size_t c = 0; c < flat_act.size(); ++c) {
            gw[c] += g * flat_act[c];
            g_flat[c] += wr[c] * g;
        }
    }

    // ---- conv stack, deepest layer -> input ----
    Tensor g_conv = Tensor::zeros({ch[k], lens[k]});
    g_conv.data = std::move(g_flat);
    Tensor conv_input = Tensor::zeros({1, n});
    conv_input.data = tr.input;
    for (std::size_t l = k; l-- > 0;) {
        const Tensor& act = tr.conv_act[l];
        Tensor g_pre = g_conv;
        for (std::size_t i = 0; i < g_pre.data.size(); ++i)
            g_pre.data[i] *= act.data[i] * (1.0 - act.data[i]);
        const Tensor& in = (l == 0) ? conv_input : tr.conv_act[l - 1];
        const Tensor& w = p.conv_w[l];
        Tensor& gw = out.conv_w[l];
        Tensor& gb = out.conv_b[l];
        const std::size_t c_out = w.shape[0], c_in = w.shape[1];
        const std::size_t l_in = in.shape[1], l_out = g_pre.shape[1];
        Tensor g_in = Tensor::zeros({c_in, l_in});
        for (std::size_t co = 0; co < c_out; ++co)
            for (std::size_t t = 0; t < l_out; ++t) {
                const double g = g_pre.at2(co, t);
                if (g == 0.0) continue;
                gb.data[co] += g;
                for (std::size_t ci = 0; ci < c_in; ++ci)
                    for (std::size_t j = 0; j < kw; ++j) {
                        const std::ptrdiff_t x =
                            static_cast<std::ptrdiff_t>(t * s + j) - pad;
                        if (x < 0 || x >= static_cast<std::ptrdiff_t>(l_in)) continue;
                        gw.at3(co, ci, j) += in.at2(ci, static_cast<std::size_t>(x)) * g;
                        g_in.at2(ci, static_cast<std::size_t>(x)) += w.at3(co, ci, j) * g;
                    }
            }
        g_conv = std::move(g_in);
        if (l == 0) break;  // gradient w.r.t. the raw context is not needed
    }
}

}  // namespace detail

/// Full-batch backward pass. Nodes shared between pairs (via shared_ptr) are
/// back-propagated once with their summed seeds; reconstruction seeds still
/// accumulate per pair occurrence, so duplicated pairs double their
/// contribution as plain averaging requires.
inline std::pair<GradientBuffer, LossBreakdown> backward(
    const std::vector<PairForward>& batch, const ModelParams& p, const LossWeights& w) {
    if (batch.empty()) throw std::invalid_argument("backward: empty batch");
    const auto counts = detail::count_batch(batch);
    const double inv_n = 1.0 / static_cast<double>(counts.n);
    const std::size_t d = p.cfg.embedding_dim;

    GradientBuffer grads = zero_like(p);
    LossBreakdown loss = compute_loss(batch, w);
    if (!std::isfinite(loss.total))
        throw std::runtime_error("backward: non-finite loss (training diverged)");

    struct Seed {
        std::vector<double> g_embed, g_recon;
    };
    std::vector<const NodeTrace*> order;
    std::vector<Seed> seeds;
    std::unordered_map<const NodeTrace*, std::size_t> index;
    auto index_of = [&](const NodeTrace* tr) {
        auto [it, inserted] = index.emplace(tr, order.size());
        if (inserted) {
            order.push_back(tr);
            seeds.push_back(Seed{std::vector<double>(d, 0.0),
                                 std::vector<double>(tr->input.size(), 0.0)});
        }
        return it->second;
    };

    for (const auto& pf : batch) {
        // Resolve both indices before taking references; index_of may grow
        // the seed vector.
        const std::size_t ia = index_of(pf.a.get());
        const std::size_t ib = index_of(pf.b.get());
        Seed& sa = seeds[ia];
        Seed& sb = seeds[ib];

        // reconstruction: d/d m_hat of (1/n) * ||m - m_hat||^2
        for (std::size_t i = 0; i < pf.a->input.size(); ++i)
            sa.g_recon[i] += 2.0 * inv_n * (pf.a->recon[i] - pf.a->input[i]);
        for (std::size_t i = 0; i < pf.b->input.size(); ++i)
            sb.g_recon[i] += 2.0 * inv_n * (pf.b->recon[i] - pf.b->input[i]);

        // cosine alignment
        const auto& va = pf.a->embedding;
        const auto& vb = pf.b->embedding;
        const double na = detail::norm(va), nb = detail::norm(vb);
        if (na > 0.0 && nb > 0.0) {
            const double cosv = detail::dot(va, vb) / (na * nb);
            double coef = 0.0;
            if (pf.label == 1)
                coef = -w.lambda1 / static_cast<double>(counts.pos);
            else if (cosv > w.margin)
                coef = w.lambda1 / static_cast<double>(counts.neg);
            if (coef != 0.0)
                for (std::size_t i = 0; i < d; ++i) {
                    sa.g_embed[i] += coef * (vb[i] / (na * nb) - cosv * va[i] / (na * na));
                    sb.g_embed[i] += coef * (va[i] / (na * nb) - cosv * vb[i] / (nb * nb));
                }
        }

        // classifier head: softmax + NLL shortcut, scaled by lambda2 / n
        std::array<double, 2> gz{pf.probs[0], pf.probs[1]};
        gz[pf.label] -= 1.0;
        for (auto& g : gz) g *= w.lambda2 * inv_n;
        for (std::size_t r = 0; r < 2; ++r) {
            grads.clf_b.data[r] += gz[r];
            double* gw = grads.clf_w.data.data() + r * 2 * d;
            const double* wr = p.clf_w.data.data() + r * 2 * d;
            for (std::size_t c = 0; c < d; ++c) {
                gw[c] += gz[r] * va[c];
                gw[d + c] += gz[r] * vb[c];
                sa.g_embed[c] += wr[c] * gz[r];
                sb.g_embed[c] += wr[d + c] * gz[r];
            }
        }

        // embedding L2 penalty
        for (std::size_t i = 0; i < d; ++i) {
            sa.g_embed[i] += 2.0 * w.lambda3 * inv_n * va[i];
            sb.g_embed[i] += 2.0 * w.lambda3 * inv_n * vb[i];
        }
    }

    // Back-propagate each distinct node once. Chunk count is fixed so the
    // merge order (and therefore the floating-point result) does not depend
    // on how many workers happen to run.
    constexpr std::size_t kChunks = 8;
    std::vector<GradientBuffer> partial;
    partial.reserve(kChunks);
    for (std::size_t i = 0; i < kChunks; ++i) partial.push_back(zero_like(p));
    parallel_chunks(order.size(), kChunks, [&](std::size_t chunk, std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            detail::node_backward(*order[i], seeds[i].g_embed, seeds[i].g_recon, p,
                                  partial[chunk]);
    });
    for (const auto& buf : partial) accumulate(grads, buf);
    return {std::move(grads), loss};
}

/// Adam optimizer state; moment tensors are keyed by parameter name.
struct AdamState {
    std::size_t step = 0;
    std::map<std::string, Tensor> m, v;
};

inline void adam_step(ModelParams& params, const GradientBuffer& grads, AdamState& st,
                      double lr) {
    for (const auto& [name, g] : grads.named_tensors())
        if (!g->finite())
            throw std::runtime_error("adam_step: non-finite gradient in " + name);
    ++st.step;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    auto ps = params.named_tensors();
    auto gs = grads.named_tensors();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& name = ps[i].first;
        Tensor& t = *ps[i].second;
        const Tensor& g = *gs[i].second;
        if (!t.same_shape(g)) throw std::invalid_argument("adam_step: shape mismatch in " + name);
        Tensor& m = st.m.try_emplace(name, Tensor::zeros(t.shape)).first->second;
        Tensor& v = st.v.try_emplace(name, Tensor::zeros(t.shape)).first->second;
        for (std::size_t j = 0; j < t.data.size(); ++j) {
            m.data[j] = b1 * m.data[j] + (1.0 - b1) * g.data[j];
            v.data[j] = b2 * v.data[j] + (1.0 - b2) * g.data[j] * g.data[j];
            const double mh = m.data[j] / c1;
            const double vh = v.data[j] / c2;
            t.data[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: versioned, self-describing, 64-bit little-endian.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'N', 'C', 'C', 'K', 'P', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return v;
}

inline void write_string(std::ofstream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in, const std::string& path) {
    const std::uint64_t len = read_u64(in, path);
    if (len > (1u << 20)) throw std::runtime_error("corrupt checkpoint string in " + path);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return s;
}

inline void write_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
    write_string(out, name);
    write_u64(out, t.shape.size());
    for (std::size_t dim : t.shape) write_u64(out, dim);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

inline std::pair<std::string, Tensor> read_tensor(std::ifstream& in, const std::string& path) {
    std::string name = read_string(in, path);
    const std::uint64_t ndim = read_u64(in, path);
    if (ndim > 8) throw std::runtime_error("corrupt tensor header in " + path);
    std::vector<std::size_t> shape;
    for (std::uint64_t i = 0; i < ndim; ++i)
        shape.push_back(static_cast<std::size_t>(read_u64(in, path)));
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return {std::move(name), std::move(t)};
}

}  // namespace detail

inline std::string canonical_config_string(const EncoderConfig& cfg) {
    return "len_a=" + std::to_string(cfg.len_a) + ";len_b=" + std::to_string(cfg.len_b) +
           ";conv_layers=" + std::to_string(cfg.conv_layers) +
           ";embedding_dim=" + std::to_string(cfg.embedding_dim);
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const AdamState& adam, const std::string& extra_config = "") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    const std::uint32_t version = detail::kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    detail::write_u64(out, params.cfg.len_a);
    detail::write_u64(out, params.cfg.len_b);
    detail::write_u64(out, params.cfg.conv_layers);
    detail::write_u64(out, params.cfg.embedding_dim);
    std::string config = canonical_config_string(params.cfg);
    if (!extra_config.empty()) config += ";" + extra_config;
    detail::write_string(out, config);
    detail::write_u64(out, fnv1a64(config));
    detail::write_u64(out, adam.step);
    const auto named = params.named_tensors();
    detail::write_u64(out, named.size() + adam.m.size() + adam.v.size());
    for (const auto& [name, t] : named) detail::write_tensor(out, name, *t);
    for (const auto& [name, t] : adam.m) detail::write_tensor(out, "adam_m." + name, t);
    for (const auto& [name, t] : adam.v) detail::write_tensor(out, "adam_v." + name, t);
    if (!out) throw std::runtime_error("write failed: " + path);
}

struct Checkpoint {
    ModelParams params;
    AdamState adam;
    std::string config_string;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != detail::kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version in " + path);
    EncoderConfig cfg;
    cfg.len_a = static_cast<std::size_t>(detail::read_u64(in, path));
    cfg.len_b = static_cast<std::size_t>(detail::read_u64(in, path));
    cfg.conv_layers = static_cast<std::size_t>(detail::read_u64(in, path));
    cfg.embedding_dim = static_cast<std::size_t>(detail::read_u64(in, path));

    Checkpoint ck;
    ck.config_string = detail::read_string(in, path);
    const std::uint64_t stored_hash = detail::read_u64(in, path);
    if (stored_hash != fnv1a64(ck.config_string))
        throw std::runtime_error("checkpoint config hash mismatch (corrupt?): " + path);
    ck.adam.step = static_cast<std::size_t>(detail::read_u64(in, path));
    ck.params = ModelParams::shaped(cfg);

    const std::uint64_t count = detail::read_u64(in, path);
    auto named = ck.params.named_tensors();
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : named) by_name[name] = t;
    std::size_t filled = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::read_tensor(in, path);
        if (name.rfind("adam_m.", 0) == 0)
            ck.adam.m.emplace(name.substr(7), std::move(t));
        else if (name.rfind("adam_v.", 0) == 0)
            ck.adam.v.emplace(name.substr(7), std::move(t));
        else {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw std::runtime_error("unknown tensor '" + name + "' in " + path);
            if (!it->second->same_shape(t))
                throw std::runtime_error("shape mismatch for '" + name + "' in " + path);
            *it->second = std::move(t);
            ++filled;
        }
    }
    if (filled != named.size())
        throw std::runtime_error("checkpoint is missing parameter tensors: " + path);
    return ck;
}

}  // namespace anchoral
