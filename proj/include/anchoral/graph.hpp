#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "anchoral/rng.hpp"

namespace anchoral {

/// Undirected graph over dense node indices 0..node_count-1. Edges are stored
/// as canonical (min,max) pairs, deduplicated; adjacency lists are sorted and
/// symmetric. Immutable after construction.
struct SocialGraph {
    std::size_t node_count = 0;
    std::vector<std::pair<int, int>> edges;
    std::vector<std::vector<int>> adjacency;

    static SocialGraph from_edges(std::size_t node_count,
                                  std::vector<std::pair<int, int>> raw) {
        SocialGraph g;
        g.node_count = node_count;
        for (auto& e : raw) {
            if (e.first > e.second) std::swap(e.first, e.second);
            if (e.first < 0 || static_cast<std::size_t>(e.second) >= node_count)
                throw std::invalid_argument("edge endpoint out of range: (" +
                                            std::to_string(e.first) + ", " +
                                            std::to_string(e.second) + ")");
        }
        std::sort(raw.begin(), raw.end());
        raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
        g.edges = std::move(raw);
        g.adjacency.assign(node_count, {});
        for (const auto& [u, v] : g.edges) {
            g.adjacency[u].push_back(v);
            if (u != v) g.adjacency[v].push_back(u);
        }
        for (auto& nbrs : g.adjacency) std::sort(nbrs.begin(), nbrs.end());
        return g;
    }

    std::size_t degree(int u) const { return adjacency[u].size(); }

    bool has_edge(int u, int v) const {
        const auto& nbrs = adjacency[u];
        return std::binary_search(nbrs.begin(), nbrs.end(), v);
    }
};

/// Row-stochastic transition matrix: row i is the uniform distribution over
/// adj(i), or the point mass on i when i has no neighbors.
struct TransitionMatrix {
    std::vector<std::vector<std::pair<int, double>>> rows;

    std::size_t node_count() const { return rows.size(); }
};

inline TransitionMatrix build_transition(const SocialGraph& g) {
    TransitionMatrix d;
    d.rows.resize(g.node_count);
    for (std::size_t i = 0; i < g.node_count; ++i) {
        const auto& nbrs = g.adjacency[i];
        auto& row = d.rows[i];
        if (nbrs.empty()) {
            row.emplace_back(static_cast<int>(i), 1.0);
            continue;
        }
        const double w = 1.0 / static_cast<double>(nbrs.size());
        row.reserve(nbrs.size());
        for (int v : nbrs) row.emplace_back(v, w);
    }
    return d;
}

namespace detail {

inline bool is_comment_or_blank(const std::string& line) {
    for (char ch : line) {
        if (ch == ' ' || ch == '\t' || ch == '\r') continue;
        return ch == '#';
    }
    return true;
}

inline int parse_node_index(const std::string& tok, const std::string& path,
                            std::size_t line_no) {
    if (tok.empty()) throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                              ": malformed line (empty token)");
    for (char ch : tok)
        if (ch < '0' || ch > '9')
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed line (expected non-negative integer, got '" +
                                     tok + "')");
    long long v = 0;
    for (char ch : tok) {
        v = v * 10 + (ch - '0');
        if (v > (1LL << 31) - 1)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": node index too large: " + tok);
    }
    return static_cast<int>(v);
}

}  // namespace detail

/// Loads an edge list: one edge per line, two whitespace-separated
/// non-negative integers; '#' comment lines and blank lines are ignored.
/// node_count is max index + 1, or the hint when that is larger.
inline SocialGraph load_edge_list(const std::string& path,
                                  std::optional<std::size_t> node_count_hint = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open edge list: " + path);

    std::vector<std::pair<int, int>> raw;
    long long max_idx = -1;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::is_comment_or_blank(line)) continue;
        std::istringstream ls(line);
        std::string ta, tb, extra;
        ls >> ta >> tb;
        if (tb.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed line (need two node indices)");
        if (ls >> extra)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed line (trailing token '" + extra + "')");
        const int u = detail::parse_node_index(ta, path, line_no);
        const int v = detail::parse_node_index(tb, path, line_no);
        if (node_count_hint &&
            (static_cast<std::size_t>(u) >= *node_count_hint ||
             static_cast<std::size_t>(v) >= *node_count_hint))
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": node index exceeds declared node count " +
                                     std::to_string(*node_count_hint));
        max_idx = std::max<long long>(max_idx, std::max(u, v));
        raw.emplace_back(u, v);
    }
    std::size_t n = static_cast<std::size_t>(max_idx + 1);
    if (node_count_hint) n = std::max(n, *node_count_hint);
    return SocialGraph::from_edges(n, std::move(raw));
}

inline void save_edge_list(const std::string& path, const SocialGraph& g) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write edge list: " + path);
    for (const auto& [u, v] : g.edges) out << u << ' ' << v << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

/// Anchor map file: one "a_index<TAB>b_index" pair per line, '#' comments
/// allowed. The map must be injective in both directions.
inline std::vector<std::pair<int, int>> load_anchor_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open anchor map: " + path);
    std::vector<std::pair<int, int>> anchors;
    std::unordered_set<int> seen_a, seen_b;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::is_comment_or_blank(line)) continue;
        std::istringstream ls(line);
        std::string ta, tb, extra;
        ls >> ta >> tb;
        if (tb.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed line (need two node indices)");
        if (ls >> extra)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed line (trailing token '" + extra + "')");
        const int a = detail::parse_node_index(ta, path, line_no);
        const int b = detail::parse_node_index(tb, path, line_no);
        if (!seen_a.insert(a).second || !seen_b.insert(b).second)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": anchor map is not injective");
        anchors.emplace_back(a, b);
    }
    return anchors;
}

inline void save_anchor_map(const std::string& path,
                            const std::vector<std::pair<int, int>>& anchors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write anchor map: " + path);
    for (const auto& [a, b] : anchors) out << a << '\t' << b << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

/// Two perturbed copies of one base graph with a known partial anchor map.
struct TwinNetworkDataset {
    SocialGraph graph_a;
    SocialGraph graph_b;
    std::vector<std::pair<int, int>> anchors;  // (a_idx, b_idx), injective
    std::uint64_t seed = 0;
    double perturb_prob = 0.0;
};

namespace detail {

inline std::uint64_t edge_key(int u, int v) {
    if (u > v) std::swap(u, v);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(u)) << 32) |
           static_cast<std::uint32_t>(v);
}

// Deletes each edge independently with prob p, then adds the same number of
// uniformly random previously-absent edges, keeping the edge count fixed.
inline std::vector<std::pair<int, int>> perturb_edges(
    const std::vector<std::pair<int, int>>& base, int n, double p,
    std::mt19937_64& rng) {
    std::bernoulli_distribution del(p);
    std::vector<std::pair<int, int>> kept;
    kept.reserve(base.size());
    std::size_t deleted = 0;
    std::unordered_set<std::uint64_t> present;
    present.reserve(base.size() * 2);
    for (const auto& [u, v] : base) present.insert(edge_key(u, v));
    for (const auto& e : base) {
        if (p > 0.0 && del(rng))
            ++deleted;
        else
            kept.push_back(e);
    }
    std::uniform_int_distribution<int> node(0, n - 1);
    std::size_t added = 0;
    const std::size_t max_edges = static_cast<std::size_t>(n) * (n - 1) / 2;
    while (added < deleted && present.size() < max_edges) {
        const int u = node(rng);
        const int v = node(rng);
        if (u == v) continue;
        const std::uint64_t k = edge_key(u, v);
        if (!present.insert(k).second) continue;
        kept.emplace_back(std::min(u, v), std::max(u, v));
        ++added;
    }
    return kept;
}

template <typename Rng>
inline void fisher_yates(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> d(0, i - 1);
        std::swap(v[i - 1], v[d(rng)]);
    }
}

}  // namespace detail

/// Synthesizes twin networks: one Erdős–Rényi base graph, two independently
/// perturbed copies (B under a random node relabeling), and an anchor map
/// covering floor(n * anchor_fraction) nodes. Deterministic given the seed.
inline TwinNetworkDataset generate_twin_networks(int n, double base_edge_prob,
                                                 double anchor_fraction,
                                                 double perturb_prob,
                                                 std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("generate_twin_networks: n must be >= 2");
    auto check_prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument(std::string("generate_twin_networks: ") + name +
                                        " must be in [0,1]");
    };
    check_prob(base_edge_prob, "base_edge_prob");
    check_prob(anchor_fraction, "anchor_fraction");
    check_prob(perturb_prob, "perturb_prob");
    const int anchor_count = static_cast<int>(n * anchor_fraction);
    if (anchor_count < 1)
        throw std::invalid_argument(
            "generate_twin_networks: n too small to realize anchor_fraction");

    auto base_rng = substream(seed, "twin.base");
    std::bernoulli_distribution coin(base_edge_prob);
    std::vector<std::pair<int, int>> base;
    for (int u = 0; u < n; ++u)
        for (int v = u + 1; v < n; ++v)
            if (base_edge_prob > 0.0 && coin(base_rng)) base.emplace_back(u, v);

    auto rng_a = substream(seed, "twin.perturb", 0);
    auto rng_b = substream(seed, "twin.perturb", 1);
    auto edges_a = detail::perturb_edges(base, n, perturb_prob, rng_a);
    auto edges_b0 = detail::perturb_edges(base, n, perturb_prob, rng_b);

    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    auto relabel_rng = substream(seed, "twin.relabel");
    detail::fisher_yates(perm, relabel_rng);

    std::vector<std::pair<int, int>> edges_b;
    edges_b.reserve(edges_b0.size());
    for (const auto& [u, v] : edges_b0) edges_b.emplace_back(perm[u], perm[v]);

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    auto anchor_rng = substream(seed, "twin.anchors");
    detail::fisher_yates(order, anchor_rng);
    std::vector<std::pair<int, int>> anchors;
    anchors.reserve(anchor_count);
    for (int i = 0; i < anchor_count; ++i) anchors.emplace_back(order[i], perm[order[i]]);
    std::sort(anchors.begin(), anchors.end());

    TwinNetworkDataset ds;
    ds.graph_a = SocialGraph::from_edges(n, std::move(edges_a));
    ds.graph_b = SocialGraph::from_edges(n, std::move(edges_b));
    ds.anchors = std::move(anchors);
    ds.seed = seed;
    ds.perturb_prob = perturb_prob;
    return ds;
}

}  // namespace anchoral
