#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mipsroute/vecstore.hpp"

namespace mipsroute {

enum class SimilarityKind { inner_product, negative_l2, cosine };

const char* similarity_name(SimilarityKind kind);
SimilarityKind similarity_from_name(const std::string& name);

/// Build-time similarity score. Cosine throws on a zero vector.
double similarity(SimilarityKind kind, std::span<const double> a,
                  std::span<const double> b);

struct GraphConfig {
    std::uint32_t max_degree = 16;      // M
    std::uint32_t candidate_size = 32;  // N, search width during construction
    SimilarityKind similarity = SimilarityKind::inner_product;
    std::uint64_t seed = 0;
};

/// Capped-degree adjacency structure over the items of a Dataset. Vectors are
/// not stored here; node i always refers to dataset item i.
///
/// out_edges is the stored, per-direction-capped structure. For undirected
/// graphs an edge {u,v} exists when either list names the other endpoint, so
/// routing uses the symmetric closure (up to 2M neighbors per node); directed
/// graphs route on out_edges as stored.
struct ProximityGraph {
    std::size_t n = 0;
    std::vector<std::vector<NodeId>> out_edges;
    bool directed = false;
    GraphConfig config;
    NodeId entry_vertex = 0;

    std::span<const NodeId> neighbors(NodeId v) const {
        return routing_view.size() == n ? std::span<const NodeId>(routing_view[v])
                                        : std::span<const NodeId>(out_edges[v]);
    }
    std::size_t max_out_degree() const;
    std::uint64_t checksum() const;

    /// Materialize the symmetric closure for undirected graphs. Builders and
    /// the loader call this; hand-assembled symmetric graphs don't need it.
    void rebuild_routing_view();

    std::vector<std::vector<NodeId>> routing_view;  // derived, not serialized
};

/// NSW-style insertion graph: nodes added in dataset order, linked both ways
/// to the best existing nodes, over-full nodes keep their top-M neighbors.
ProximityGraph build_ipnsw(const Dataset& dataset, const GraphConfig& config);

/// Two-round directed graph with the self-inner-product selection rule.
/// `rounds` exists for inspecting the round-1 graph; the standard build is 2.
ProximityGraph build_ipdg(const Dataset& dataset, const GraphConfig& config,
                          int rounds = 2);

/// Scan candidates in the given order; keep y while |B| < M if
/// <y,y> >= max_{z in B} <y,z>.
std::vector<NodeId> ipdg_select(const VectorSet& points,
                                std::span<const NodeId> candidates,
                                std::uint32_t max_degree);

/// x / ||x||^2. Throws on zero vector.
std::vector<double> mobius_transform(std::span<const double> x);

/// Graph built on mobius-transformed points with an auxiliary zero vertex
/// that is removed at the end; final node ids match the original dataset.
ProximityGraph build_mobius(const Dataset& dataset, const GraphConfig& config);

/// Frontier expansion keeping the best N candidates under `kind`; stops when
/// the candidate set no longer changes. Returns up to k nodes, best first.
std::vector<NodeId> greedy_search(const ProximityGraph& graph,
                                  const VectorSet& points,
                                  std::span<const double> q, NodeId v0,
                                  std::size_t candidate_size, std::size_t k,
                                  SimilarityKind kind);

/// Variant over a raw adjacency list, for use while a graph is under
/// construction.
std::vector<NodeId> greedy_search_adj(
    const std::vector<std::vector<NodeId>>& adjacency, const VectorSet& points,
    std::span<const double> q, NodeId v0, std::size_t candidate_size,
    std::size_t k, SimilarityKind kind);

void save_graph(const ProximityGraph& graph, const std::string& path);
ProximityGraph load_graph(const std::string& path);

}  // namespace mipsroute
