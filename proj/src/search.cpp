#include "mipsroute/search.hpp"

#include <algorithm>
#include <queue>
#include <stdexcept>

namespace mipsroute {

Scorer make_raw_scorer(const Dataset& dataset, std::span<const double> q) {
    if (q.size() != dataset.dim())
        throw std::invalid_argument("make_raw_scorer: query dim mismatch");
    Scorer s;
    s.kind = ScorerKind::raw;
    s.vertex_base = dataset.items.values().data();
    s.vertex_dim = dataset.dim();
    s.vertex_count = dataset.size();
    s.query_repr.assign(q.begin(), q.end());
    return s;
}

Scorer make_agent_scorer(const EmbeddingTable& table,
                         const ProximityGraph& graph,
                         const AgentParams& params, std::span<const double> q) {
    if (table.graph_checksum != graph.checksum())
        throw std::runtime_error(
            "make_agent_scorer: embedding table is stale for this graph");
    if (table.size() != graph.n)
        throw std::invalid_argument("make_agent_scorer: table size mismatch");
    Scorer s;
    s.kind = ScorerKind::agent;
    s.vertex_base = table.values.data();
    s.vertex_dim = table.dim;
    s.vertex_count = table.size();
    s.query_repr = embed_query(q, params.query);
    if (s.query_repr.size() != table.dim)
        throw std::invalid_argument("make_agent_scorer: embedded query dim mismatch");
    return s;
}

RoutingPath collect_path(const EmbeddingTable& table,
                         std::span<const double> embedded_query, double tau,
                         const ProximityGraph& graph, NodeId v0,
                         IpcBudget& budget, std::mt19937_64& rng) {
    if (v0 >= graph.n)
        throw std::invalid_argument("collect_path: invalid start vertex");
    RoutingPath path;
    path.start = v0;
    const std::uint64_t used_before = budget.used();
    std::vector<char> visited(graph.n, 0);
    visited[v0] = 1;

    NodeId v = v0;
    while (true) {
        std::vector<NodeId> candidates;
        for (NodeId u : graph.neighbors(v))
            if (!visited[u]) candidates.push_back(u);
        if (candidates.empty()) break;
        // A step scores every candidate once; stop if that cannot be paid.
        if (!budget.try_charge(candidates.size())) break;

        auto probs = policy_probs(candidates, embedded_query, table, tau);
        const std::size_t pick = sample_action(probs, rng);

        for (NodeId u : candidates) visited[u] = 1;

        RoutingStep step;
        step.state = v;
        step.chosen = static_cast<std::uint32_t>(pick);
        step.chosen_prob = probs[pick];
        step.candidates = std::move(candidates);
        step.probs = std::move(probs);
        v = step.candidates[pick];
        path.steps.push_back(std::move(step));
    }
    path.ipc_used = budget.used() - used_before;
    return path;
}

namespace {

struct QueueEntry {
    double score;
    NodeId id;
    bool operator<(const QueueEntry& o) const {
        // priority_queue keeps the max on top; prefer higher score, then
        // smaller id.
        if (score != o.score) return score < o.score;
        return id > o.id;
    }
};

}  // namespace

SearchResult beam_search(const Scorer& scorer, const ProximityGraph& graph,
                         NodeId v0, std::size_t k, IpcBudget& budget) {
    if (k < 1) throw std::invalid_argument("beam_search: k must be >= 1");
    if (v0 >= graph.n)
        throw std::invalid_argument("beam_search: invalid start vertex");

    SearchResult result;
    const std::uint64_t used_before = budget.used();
    std::vector<char> visited(graph.n, 0);
    std::vector<std::pair<NodeId, double>> scored;  // all of V with scores
    std::priority_queue<QueueEntry> candidates;

    visited[v0] = 1;
    result.visited.push_back(v0);
    bool exhausted = false;
    if (budget.try_charge(1)) {
        const double s = scorer.score(v0);
        scored.emplace_back(v0, s);
        candidates.push({s, v0});
    } else {
        exhausted = true;
    }

    while (!exhausted && !candidates.empty()) {
        const NodeId c = candidates.top().id;
        candidates.pop();
        for (NodeId u : graph.neighbors(c)) {
            if (visited[u]) continue;
            if (!budget.try_charge(1)) {
                exhausted = true;
                break;  // unscored neighbors are dropped
            }
            visited[u] = 1;
            result.visited.push_back(u);
            const double s = scorer.score(u);
            scored.emplace_back(u, s);
            candidates.push({s, u});
        }
    }

    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const std::size_t take = std::min(k, scored.size());
    for (std::size_t i = 0; i < take; ++i) {
        result.topk.push_back(scored[i].first);
        result.topk_scores.push_back(scored[i].second);
    }
    if (scored.empty()) {
        // Zero budget: nothing was scored, the start vertex is all we have.
        result.topk.push_back(v0);
        result.topk_scores.push_back(-std::numeric_limits<double>::infinity());
    }
    result.ipc_used = budget.used() - used_before;
    return result;
}

std::uint64_t adjusted_budget(std::uint64_t base_ipc, std::size_t d,
                              std::size_t d_prime, QueryTransformKind kind) {
    if (d_prime < 1)
        throw std::invalid_argument("adjusted_budget: d' must be >= 1");
    if (kind == QueryTransformKind::identity) return base_ipc;
    const std::uint64_t total = base_ipc * d;
    const std::uint64_t embed_cost = d_prime * d;
    if (embed_cost >= total)
        throw std::invalid_argument("adjusted_budget: budget consumed by embedding");
    return (total - embed_cost) / d_prime;
}

}  // namespace mipsroute
