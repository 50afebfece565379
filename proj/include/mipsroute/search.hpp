#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "mipsroute/agent.hpp"
#include "mipsroute/proxgraph.hpp"
#include "mipsroute/vecstore.hpp"

namespace mipsroute {

/// Runtime budget counted purely in inner-product computations.
class IpcBudget {
public:
    static constexpr std::uint64_t kUnlimited =
        std::numeric_limits<std::uint64_t>::max();

    explicit IpcBudget(std::uint64_t limit = kUnlimited) : limit_(limit) {}

    std::uint64_t limit() const { return limit_; }
    std::uint64_t used() const { return used_; }
    std::uint64_t remaining() const {
        return limit_ == kUnlimited ? kUnlimited : limit_ - used_;
    }

    /// Charge `cost` units if they fit; returns false (and charges nothing)
    /// otherwise.
    bool try_charge(std::uint64_t cost = 1) {
        if (limit_ != kUnlimited && used_ + cost > limit_) return false;
        used_ += cost;
        return true;
    }

private:
    std::uint64_t limit_;
    std::uint64_t used_ = 0;
};

enum class ScorerKind { raw, agent };

/// score(v) = <query_repr, vertex_repr(v)>; vertex rows come either from the
/// dataset (raw) or a precomputed embedding table (agent).
struct Scorer {
    ScorerKind kind = ScorerKind::raw;
    const double* vertex_base = nullptr;
    std::size_t vertex_dim = 0;
    std::size_t vertex_count = 0;
    std::vector<double> query_repr;

    double score(NodeId v) const {
        std::span<const double> row{vertex_base + v * vertex_dim, vertex_dim};
        return inner_product(row, query_repr);
    }
};

Scorer make_raw_scorer(const Dataset& dataset, std::span<const double> q);

/// Validates the table against the graph it claims to embed.
Scorer make_agent_scorer(const EmbeddingTable& table,
                         const ProximityGraph& graph,
                         const AgentParams& params, std::span<const double> q);

struct RoutingStep {
    NodeId state;                    // vertex the step was taken from
    std::vector<NodeId> candidates;  // unvisited neighbors at that moment
    std::vector<double> probs;       // policy over candidates
    std::uint32_t chosen;            // index into candidates
    double chosen_prob;
};

struct RoutingPath {
    std::vector<RoutingStep> steps;
    NodeId start = 0;
    std::uint32_t query_index = 0;
    std::uint64_t ipc_used = 0;

    NodeId terminal() const {
        return steps.empty() ? start
                             : steps.back().candidates[steps.back().chosen];
    }
};

/// Sampled rollout for training: at each step the whole candidate set is
/// marked visited and one candidate is drawn from the softmax policy. Stops
/// on an empty candidate set or when the budget cannot cover a full step.
RoutingPath collect_path(const EmbeddingTable& table,
                         std::span<const double> embedded_query, double tau,
                         const ProximityGraph& graph, NodeId v0,
                         IpcBudget& budget, std::mt19937_64& rng);

struct SearchResult {
    std::vector<NodeId> topk;
    std::vector<double> topk_scores;
    std::uint64_t ipc_used = 0;
    std::vector<NodeId> visited;  // insertion order, starts with v0

    std::size_t visited_count() const { return visited.size(); }
};

/// Frontier search: repeatedly expand the best-scoring candidate, score every
/// unvisited neighbor (one budget unit each), return the top-k of all visited
/// vertices by final score. Ties break toward the smaller node id.
SearchResult beam_search(const Scorer& scorer, const ProximityGraph& graph,
                         NodeId v0, std::size_t k, IpcBudget& budget);

/// Budget left for routing when each query is first embedded by a linear
/// d->d' transform: floor((base*d - d'*d) / d'). Identity transforms keep the
/// base budget. Throws if embedding alone would exhaust it.
std::uint64_t adjusted_budget(std::uint64_t base_ipc, std::size_t d,
                              std::size_t d_prime, QueryTransformKind kind);

}  // namespace mipsroute
