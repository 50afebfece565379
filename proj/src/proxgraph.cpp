#include "mipsroute/proxgraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace mipsroute {

namespace {

constexpr char kGraphMagic[8] = {'M', 'I', 'P', 'S', 'G', 'R', 'F', '1'};

double l2_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

struct ScoredNode {
    double score;
    NodeId id;
    // Descending score, smaller id on ties.
    bool operator<(const ScoredNode& o) const {
        if (score != o.score) return score > o.score;
        return id < o.id;
    }
    bool operator==(const ScoredNode& o) const {
        return score == o.score && id == o.id;
    }
};

std::uint64_t fnv1a_init() { return 14695981039346656037ull; }

void fnv1a_mix(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
    }
}

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error(std::string("truncated file reading ") + what);
    return value;
}

}  // namespace

const char* similarity_name(SimilarityKind kind) {
    switch (kind) {
        case SimilarityKind::inner_product: return "ip";
        case SimilarityKind::negative_l2: return "l2";
        case SimilarityKind::cosine: return "cos";
    }
    return "?";
}

SimilarityKind similarity_from_name(const std::string& name) {
    if (name == "ip") return SimilarityKind::inner_product;
    if (name == "l2") return SimilarityKind::negative_l2;
    if (name == "cos") return SimilarityKind::cosine;
    throw std::invalid_argument("unknown similarity: " + name);
}

double similarity(SimilarityKind kind, std::span<const double> a,
                  std::span<const double> b) {
    switch (kind) {
        case SimilarityKind::inner_product:
            return inner_product(a, b);
        case SimilarityKind::negative_l2:
            return -l2_distance(a, b);
        case SimilarityKind::cosine: {
            double na = l2_norm(a), nb = l2_norm(b);
            if (na == 0.0 || nb == 0.0)
                throw std::domain_error("cosine similarity undefined for zero vector");
            return inner_product(a, b) / (na * nb);
        }
    }
    throw std::logic_error("unreachable");
}

std::size_t ProximityGraph::max_out_degree() const {
    std::size_t best = 0;
    for (const auto& e : out_edges) best = std::max(best, e.size());
    return best;
}

std::uint64_t ProximityGraph::checksum() const {
    std::uint64_t h = fnv1a_init();
    fnv1a_mix(h, n);
    fnv1a_mix(h, directed ? 1 : 0);
    fnv1a_mix(h, entry_vertex);
    for (const auto& edges : out_edges) {
        fnv1a_mix(h, edges.size());
        for (NodeId v : edges) fnv1a_mix(h, v);
    }
    return h;
}

void ProximityGraph::rebuild_routing_view() {
    if (directed) {
        routing_view = out_edges;
        return;
    }
    routing_view.assign(n, {});
    for (std::size_t u = 0; u < n; ++u)
        routing_view[u] = out_edges[u];
    for (std::size_t u = 0; u < n; ++u)
        for (NodeId v : out_edges[u]) {
            auto& back = routing_view[v];
            if (std::find(back.begin(), back.end(), static_cast<NodeId>(u)) ==
                back.end())
                back.push_back(static_cast<NodeId>(u));
        }
}

std::vector<NodeId> greedy_search_adj(
    const std::vector<std::vector<NodeId>>& adjacency, const VectorSet& points,
    std::span<const double> q, NodeId v0, std::size_t candidate_size,
    std::size_t k, SimilarityKind kind) {
    if (v0 >= adjacency.size())
        throw std::invalid_argument("greedy_search: invalid start vertex");
    std::vector<char> checked(adjacency.size(), 0);
    checked[v0] = 1;

    std::vector<ScoredNode> frontier{{similarity(kind, q, points.row(v0)), v0}};
    std::vector<ScoredNode> additions;
    while (true) {
        additions.clear();
        for (const auto& c : frontier) {
            for (NodeId v : adjacency[c.id]) {
                if (checked[v]) continue;
                checked[v] = 1;
                additions.push_back({similarity(kind, q, points.row(v)), v});
            }
        }
        if (additions.empty()) break;
        std::vector<ScoredNode> merged;
        merged.reserve(frontier.size() + additions.size());
        merged.insert(merged.end(), frontier.begin(), frontier.end());
        merged.insert(merged.end(), additions.begin(), additions.end());
        std::sort(merged.begin(), merged.end());
        if (merged.size() > candidate_size) merged.resize(candidate_size);
        if (merged == frontier) break;
        frontier = std::move(merged);
    }

    std::vector<NodeId> out;
    out.reserve(std::min(k, frontier.size()));
    for (std::size_t i = 0; i < frontier.size() && i < k; ++i)
        out.push_back(frontier[i].id);
    return out;
}

std::vector<NodeId> greedy_search(const ProximityGraph& graph,
                                  const VectorSet& points,
                                  std::span<const double> q, NodeId v0,
                                  std::size_t candidate_size, std::size_t k,
                                  SimilarityKind kind) {
    const auto& adjacency = graph.routing_view.size() == graph.n
                                ? graph.routing_view
                                : graph.out_edges;
    return greedy_search_adj(adjacency, points, q, v0, candidate_size, k, kind);
}

namespace {

void validate_config(const GraphConfig& config) {
    if (config.max_degree < 1)
        throw std::invalid_argument("GraphConfig: max_degree must be >= 1");
    if (config.candidate_size < config.max_degree)
        throw std::invalid_argument("GraphConfig: candidate_size must be >= max_degree");
}

// Keep the top-M neighbors of `node` by build similarity.
void prune_to_top_m(std::vector<NodeId>& edges, const VectorSet& points,
                    NodeId node, std::uint32_t max_degree,
                    SimilarityKind kind) {
    if (edges.size() <= max_degree) return;
    std::vector<ScoredNode> scored;
    scored.reserve(edges.size());
    for (NodeId v : edges)
        scored.push_back({similarity(kind, points.row(node), points.row(v)), v});
    std::sort(scored.begin(), scored.end());
    edges.clear();
    for (std::uint32_t i = 0; i < max_degree; ++i) edges.push_back(scored[i].id);
}

}  // namespace

ProximityGraph build_ipnsw(const Dataset& dataset, const GraphConfig& config) {
    validate_config(config);
    const std::size_t n = dataset.size();
    if (n == 0) throw std::invalid_argument("build_ipnsw: empty dataset");
    const auto& points = dataset.items;

    std::vector<std::vector<NodeId>> adj;
    adj.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (i == 0) {
            adj.emplace_back();
            continue;
        }
        const std::size_t want = std::min<std::size_t>(config.max_degree, i);
        auto best = greedy_search_adj(adj, points, points.row(i), 0,
                                      config.candidate_size, want,
                                      config.similarity);
        adj.push_back(best);
        for (NodeId y : best) {
            adj[y].push_back(static_cast<NodeId>(i));
            prune_to_top_m(adj[y], points, y, config.max_degree,
                           config.similarity);
        }
    }

    ProximityGraph g;
    g.n = n;
    g.out_edges = std::move(adj);
    g.directed = false;
    g.config = config;
    g.entry_vertex = 0;
    g.rebuild_routing_view();
    return g;
}

std::vector<NodeId> ipdg_select(const VectorSet& points,
                                std::span<const NodeId> candidates,
                                std::uint32_t max_degree) {
    std::vector<NodeId> selected;
    for (NodeId y : candidates) {
        if (selected.size() >= max_degree) break;
        const double self = inner_product(points.row(y), points.row(y));
        bool keep = true;
        for (NodeId z : selected) {
            if (self < inner_product(points.row(y), points.row(z))) {
                keep = false;
                break;
            }
        }
        if (keep) selected.push_back(y);
    }
    return selected;
}

namespace {

NodeId max_norm_node(const VectorSet& points) {
    NodeId best = 0;
    double best_norm = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        double norm = l2_norm(points.row(i));
        if (norm > best_norm) {
            best_norm = norm;
            best = static_cast<NodeId>(i);
        }
    }
    return best;
}

// Candidates for a node's edge rebuild, ordered by descending inner product
// with the node (smaller id on ties).
std::vector<NodeId> ordered_rebuild_candidates(const VectorSet& points,
                                               NodeId node,
                                               const std::vector<NodeId>& edges,
                                               NodeId extra) {
    std::vector<ScoredNode> scored;
    scored.reserve(edges.size() + 1);
    for (NodeId z : edges)
        if (z != extra)
            scored.push_back({inner_product(points.row(node), points.row(z)), z});
    scored.push_back({inner_product(points.row(node), points.row(extra)), extra});
    std::sort(scored.begin(), scored.end());
    std::vector<NodeId> out(scored.size());
    for (std::size_t i = 0; i < scored.size(); ++i) out[i] = scored[i].id;
    return out;
}

}  // namespace

ProximityGraph build_ipdg(const Dataset& dataset, const GraphConfig& config,
                          int rounds) {
    validate_config(config);
    const std::size_t n = dataset.size();
    if (n == 0) throw std::invalid_argument("build_ipdg: empty dataset");
    const auto& points = dataset.items;

    std::vector<std::vector<NodeId>> adj(n);
    std::mt19937_64 rng(config.seed);
    std::size_t inserted = 0;

    for (int round = 0; round < rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            if (inserted == 0) {
                inserted = 1;
                continue;
            }
            std::uniform_int_distribution<std::size_t> pick(0, inserted - 1);
            const NodeId v0 = static_cast<NodeId>(pick(rng));
            auto cand = greedy_search_adj(adj, points, points.row(i), v0,
                                          config.candidate_size,
                                          config.candidate_size,
                                          SimilarityKind::inner_product);
            std::erase(cand, static_cast<NodeId>(i));
            adj[i] = ipdg_select(points, cand, config.max_degree);
            for (NodeId y : adj[i]) {
                auto rebuild = ordered_rebuild_candidates(
                    points, y, adj[y], static_cast<NodeId>(i));
                adj[y] = ipdg_select(points, rebuild, config.max_degree);
            }
            inserted = std::max(inserted, i + 1);
        }
    }

    ProximityGraph g;
    g.n = n;
    g.out_edges = std::move(adj);
    g.directed = true;
    g.config = config;
    g.entry_vertex = max_norm_node(points);
    g.rebuild_routing_view();
    return g;
}

std::vector<double> mobius_transform(std::span<const double> x) {
    double norm_sq = 0.0;
    for (double v : x) norm_sq += v * v;
    if (norm_sq == 0.0)
        throw std::domain_error("mobius_transform: zero vector");
    std::vector<double> out(x.begin(), x.end());
    for (double& v : out) v /= norm_sq;
    return out;
}

namespace {

// Distance-based selection: scan ascending by distance to x, keep y while
// |B| < M if ||x - y|| <= min_{z in B} ||z - y||.
std::vector<NodeId> mobius_select(const VectorSet& points, NodeId x,
                                  std::span<const NodeId> candidates,
                                  std::uint32_t max_degree) {
    std::vector<std::pair<double, NodeId>> ordered;
    ordered.reserve(candidates.size());
    for (NodeId y : candidates)
        ordered.emplace_back(l2_distance(points.row(x), points.row(y)), y);
    std::sort(ordered.begin(), ordered.end(),
              [](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first < b.first;
                  return a.second < b.second;
              });
    std::vector<NodeId> selected;
    for (const auto& [dist_xy, y] : ordered) {
        if (selected.size() >= max_degree) break;
        bool keep = true;
        for (NodeId z : selected) {
            if (dist_xy > l2_distance(points.row(z), points.row(y))) {
                keep = false;
                break;
            }
        }
        if (keep) selected.push_back(y);
    }
    return selected;
}

}  // namespace

ProximityGraph build_mobius(const Dataset& dataset, const GraphConfig& config) {
    validate_config(config);
    const std::size_t n = dataset.size();
    if (n <= config.max_degree)
        throw std::invalid_argument("build_mobius: requires n > max_degree");
    const std::size_t d = dataset.dim();

    // Transformed points; build-node 0 is the auxiliary zero vector and
    // build-node i+1 corresponds to item i.
    VectorSet points(d, n + 1);
    for (std::size_t i = 0; i < n; ++i) {
        auto y = mobius_transform(dataset.row(i));
        std::copy(y.begin(), y.end(), points.row(i + 1).begin());
    }

    const std::size_t total = n + 1;
    std::vector<std::vector<NodeId>> adj(total);
    const std::size_t seed_count = config.max_degree;  // {y_0 .. y_{M-1}}
    for (std::size_t u = 0; u < seed_count; ++u)
        for (std::size_t v = 0; v < seed_count; ++v)
            if (u != v) adj[u].push_back(static_cast<NodeId>(v));

    for (std::size_t i = seed_count; i < total; ++i) {
        auto cand = greedy_search_adj(adj, points, points.row(i), 0,
                                      config.candidate_size,
                                      config.candidate_size,
                                      SimilarityKind::negative_l2);
        std::erase(cand, static_cast<NodeId>(i));
        adj[i] = mobius_select(points, static_cast<NodeId>(i), cand,
                               config.max_degree);
        for (NodeId z : adj[i]) {
            std::vector<NodeId> rebuild = adj[z];
            if (std::find(rebuild.begin(), rebuild.end(),
                          static_cast<NodeId>(i)) == rebuild.end())
                rebuild.push_back(static_cast<NodeId>(i));
            adj[z] = mobius_select(points, z, rebuild, config.max_degree);
        }
    }

    // Drop the auxiliary vertex and relabel back to item ids.
    std::vector<std::vector<NodeId>> final_adj(n);
    for (std::size_t i = 1; i < total; ++i) {
        for (NodeId v : adj[i])
            if (v != 0) final_adj[i - 1].push_back(v - 1);
    }

    ProximityGraph g;
    g.n = n;
    g.out_edges = std::move(final_adj);
    g.directed = true;
    g.config = config;
    g.entry_vertex = max_norm_node(dataset.items);
    g.rebuild_routing_view();
    return g;
}

void save_graph(const ProximityGraph& graph, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kGraphMagic, 8);
    write_pod<std::uint64_t>(out, graph.n);
    write_pod<std::uint64_t>(out, graph.directed ? 1 : 0);
    write_pod<std::uint64_t>(out, graph.config.max_degree);
    write_pod<std::uint64_t>(out, graph.config.candidate_size);
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(graph.config.similarity));
    write_pod<std::uint64_t>(out, graph.config.seed);
    write_pod<std::uint64_t>(out, graph.entry_vertex);
    write_pod<std::uint64_t>(out, graph.checksum());
    std::uint64_t offset = 0;
    write_pod<std::uint64_t>(out, offset);
    for (const auto& edges : graph.out_edges) {
        offset += edges.size();
        write_pod<std::uint64_t>(out, offset);
    }
    for (const auto& edges : graph.out_edges)
        for (NodeId v : edges) write_pod<std::uint64_t>(out, v);
    if (!out) throw std::runtime_error("write failed: " + path);
}

ProximityGraph load_graph(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kGraphMagic, 8) != 0)
        throw std::runtime_error("bad magic in " + path);

    ProximityGraph g;
    g.n = read_pod<std::uint64_t>(in, "node count");
    g.directed = read_pod<std::uint64_t>(in, "directed flag") != 0;
    g.config.max_degree =
        static_cast<std::uint32_t>(read_pod<std::uint64_t>(in, "max degree"));
    g.config.candidate_size =
        static_cast<std::uint32_t>(read_pod<std::uint64_t>(in, "candidate size"));
    auto sim = read_pod<std::uint64_t>(in, "similarity tag");
    if (sim > 2) throw std::runtime_error("bad similarity tag in " + path);
    g.config.similarity = static_cast<SimilarityKind>(sim);
    g.config.seed = read_pod<std::uint64_t>(in, "seed");
    g.entry_vertex = static_cast<NodeId>(read_pod<std::uint64_t>(in, "entry vertex"));
    auto stored_checksum = read_pod<std::uint64_t>(in, "checksum");

    std::vector<std::uint64_t> offsets(g.n + 1);
    for (auto& o : offsets) o = read_pod<std::uint64_t>(in, "offset");
    if (offsets.front() != 0)
        throw std::runtime_error("corrupt offsets in " + path);
    g.out_edges.resize(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        if (offsets[i + 1] < offsets[i])
            throw std::runtime_error("corrupt offsets in " + path);
        const std::size_t degree = offsets[i + 1] - offsets[i];
        g.out_edges[i].resize(degree);
        for (std::size_t j = 0; j < degree; ++j) {
            auto v = read_pod<std::uint64_t>(in, "neighbor id");
            if (v >= g.n) throw std::runtime_error("neighbor id out of range in " + path);
            g.out_edges[i][j] = static_cast<NodeId>(v);
        }
    }
    if (g.entry_vertex >= g.n)
        throw std::runtime_error("entry vertex out of range in " + path);
    if (g.checksum() != stored_checksum)
        throw std::runtime_error("checksum mismatch in " + path);
    g.rebuild_routing_view();
    return g;
}

}  // namespace mipsroute
