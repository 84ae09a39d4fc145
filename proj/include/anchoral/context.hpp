#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchoral/graph.hpp"
#include "anchoral/parallel.hpp"

namespace anchoral {

/// Dense N x N matrix of structural context vectors, one row per node.
struct ContextMatrix {
    std::size_t node_count = 0;
    std::vector<double> data;  // row-major, node_count * node_count

    const double* row(std::size_t i) const { return data.data() + i * node_count; }
    double* row(std::size_t i) { return data.data() + i * node_count; }
    double at(std::size_t i, std::size_t j) const { return data[i * node_count + j]; }
};

/// Random walk with restart from every node. The walk distribution updates as
///   p_s = (1 - c) * p_{s-1} * D + c * e_i,   p_0 = e_i,
/// and the context vector for node i is the sum of p_1 .. p_S. Each p_s is a
/// probability distribution, so row i of the result sums to S.
inline ContextMatrix compute_contexts(const SocialGraph& g, double restart_prob,
                                      std::size_t steps) {
    if (!(restart_prob >= 0.0 && restart_prob <= 1.0))
        throw std::invalid_argument("compute_contexts: restart_prob must be in [0,1]");
    if (steps == 0) throw std::invalid_argument("compute_contexts: steps must be >= 1");

    const std::size_t n = g.node_count;
    const auto d = build_transition(g);
    ContextMatrix m;
    m.node_count = n;
    m.data.assign(n * n, 0.0);

    const double c = restart_prob;
    parallel_for(n, [&](std::size_t i) {
        std::vector<double> p(n, 0.0), next(n, 0.0);
        p[i] = 1.0;
        double* out = m.row(i);
        for (std::size_t s = 0; s < steps; ++s) {
            std::fill(next.begin(), next.end(), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                const double pj = p[j];
                if (pj == 0.0) continue;
                const double scaled = (1.0 - c) * pj;
                for (const auto& [k, w] : d.rows[j]) next[k] += scaled * w;
            }
            next[i] += c;
            p.swap(next);
            for (std::size_t j = 0; j < n; ++j) out[j] += p[j];
        }
    });
    return m;
}

namespace detail {

constexpr char kContextMagic[8] = {'A', 'N', 'C', 'C', 'T', 'X', '0', '1'};
constexpr std::uint32_t kContextVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("truncated or unreadable file: " + path);
}

}  // namespace detail

/// Binary cache of a context matrix together with the parameters that
/// produced it, so stale caches can be detected by the caller.
struct ContextCache {
    ContextMatrix matrix;
    double restart_prob = 0.0;
    std::size_t steps = 0;
};

inline void save_context_cache(const std::string& path, const ContextMatrix& m,
                               double restart_prob, std::size_t steps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write context cache: " + path);
    out.write(detail::kContextMagic, sizeof(detail::kContextMagic));
    detail::write_pod(out, detail::kContextVersion);
    detail::write_pod(out, static_cast<std::uint64_t>(m.node_count));
    detail::write_pod(out, static_cast<std::uint64_t>(steps));
    detail::write_pod(out, restart_prob);
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline ContextCache load_context_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open context cache: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kContextMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a context cache file: " + path);
    std::uint32_t version = 0;
    detail::read_pod(in, version, path);
    if (version != detail::kContextVersion)
        throw std::runtime_error("unsupported context cache version in " + path);
    std::uint64_t n = 0, steps = 0;
    detail::read_pod(in, n, path);
    detail::read_pod(in, steps, path);
    ContextCache cache;
    detail::read_pod(in, cache.restart_prob, path);
    cache.steps = static_cast<std::size_t>(steps);
    cache.matrix.node_count = static_cast<std::size_t>(n);
    cache.matrix.data.resize(cache.matrix.node_count * cache.matrix.node_count);
    in.read(reinterpret_cast<char*>(cache.matrix.data.data()),
            static_cast<std::streamsize>(cache.matrix.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated context cache: " + path);
    return cache;
}

}  // namespace anchoral
