#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mipsroute/training.hpp"

using namespace mipsroute;

namespace {

Dataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Dataset ds;
    std::vector<double> values(n * d);
    for (double& v : values) v = dist(rng);
    ds.items = VectorSet(d, std::move(values));
    return ds;
}

std::vector<double> random_vector(std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(d);
    for (double& x : v) x = dist(rng);
    return v;
}

ProximityGraph chain_graph() {
    ProximityGraph g;
    g.n = 3;
    g.out_edges = {{1}, {0, 2}, {1}};
    g.directed = false;
    g.config.max_degree = 2;
    g.config.candidate_size = 4;
    return g;
}

ProximityGraph random_graph(std::size_t n, std::size_t edges_per_node,
                            std::uint64_t seed, bool directed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    ProximityGraph g;
    g.n = n;
    g.directed = directed;
    g.out_edges.resize(n);
    for (std::size_t u = 0; u < n; ++u) {
        while (g.out_edges[u].size() < edges_per_node) {
            NodeId v = static_cast<NodeId>(pick(rng));
            if (v == u) continue;
            if (std::find(g.out_edges[u].begin(), g.out_edges[u].end(), v) !=
                g.out_edges[u].end())
                continue;
            g.out_edges[u].push_back(v);
        }
    }
    g.config.max_degree = static_cast<std::uint32_t>(edges_per_node);
    g.config.candidate_size = static_cast<std::uint32_t>(2 * edges_per_node);
    return g;
}

// All-pairs hop counts by Floyd-Warshall over the same edge conventions as
// bfs_distances (directed edges as stored; undirected graphs symmetrized).
std::vector<std::vector<std::uint32_t>> floyd_warshall(
    const ProximityGraph& g) {
    const std::uint32_t inf = ShortestPathTable::kUnreachable;
    std::vector<std::vector<std::uint32_t>> dist(
        g.n, std::vector<std::uint32_t>(g.n, inf));
    for (std::size_t i = 0; i < g.n; ++i) dist[i][i] = 0;
    for (std::size_t u = 0; u < g.n; ++u)
        for (NodeId v : g.out_edges[u]) {
            dist[u][v] = 1;
            if (!g.directed) dist[v][u] = 1;
        }
    for (std::size_t k = 0; k < g.n; ++k)
        for (std::size_t i = 0; i < g.n; ++i) {
            if (dist[i][k] == inf) continue;
            for (std::size_t j = 0; j < g.n; ++j) {
                if (dist[k][j] == inf) continue;
                dist[i][j] = std::min(dist[i][j], dist[i][k] + dist[k][j]);
            }
        }
    return dist;
}

// Objective whose gradient reinforce implements: J = sum_t G_t log pi_t,
// recomputed from scratch at the given parameters.
double pathwise_objective(const AgentParams& params, const Dataset& ds,
                          const ProximityGraph& g, const RoutingPath& path,
                          std::span<const double> returns,
                          std::span<const double> q) {
    auto table = precompute_embeddings(ds, g, params);
    auto e_q = embed_query(q, params.query);
    double j = 0.0;
    for (std::size_t t = 0; t < path.steps.size(); ++t) {
        auto probs = policy_probs(path.steps[t].candidates, e_q, table,
                                  params.temperature);
        j += returns[t] * std::log(probs[path.steps[t].chosen]);
    }
    return j;
}

AgentGrads analytic_gradient(const AgentParams& params, const Dataset& ds,
                             const ProximityGraph& g, const RoutingPath& path,
                             std::span<const double> returns,
                             std::span<const double> q) {
    Eigen::MatrixXd x(ds.size(), ds.dim());
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.dim(); ++j) x(i, j) = ds.row(i)[j];
    auto adj = NormAdjacency::from_graph(g);
    GcnForwardCache cache;
    Eigen::MatrixXd out = gcn_forward_cached(x, adj, params.gcn, &cache);
    EmbeddingTable table;
    table.dim = out.cols();
    table.values.resize(out.size());
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j)
            table.values[i * out.cols() + j] = out(i, j);
    table.graph_checksum = g.checksum();

    auto e_q = embed_query(q, params.query);
    Eigen::MatrixXd d_emb = Eigen::MatrixXd::Zero(out.rows(), out.cols());
    Eigen::MatrixXd d_wq;
    if (params.query.kind == QueryTransformKind::linear)
        d_wq = Eigen::MatrixXd::Zero(params.query.weight.rows(),
                                     params.query.weight.cols());
    accumulate_policy_gradient(path, returns, table, e_q, q,
                               params.temperature, params.query.kind, d_emb,
                               &d_wq);
    AgentGrads grads = gcn_backward(params.gcn, adj, cache, d_emb);
    if (params.query.kind == QueryTransformKind::linear)
        grads.query_weight = d_wq;
    return grads;
}

struct TensorView {
    double* data;
    std::size_t count;
    const char* name;
};

std::vector<TensorView> param_tensors(AgentParams& p) {
    std::vector<TensorView> v;
    for (std::size_t b = 0; b < 3; ++b) {
        auto& blk = p.gcn.blocks[b];
        v.push_back({blk.conv_weight.data(),
                     static_cast<std::size_t>(blk.conv_weight.size()),
                     "conv_weight"});
        v.push_back({blk.fc_weight.data(),
                     static_cast<std::size_t>(blk.fc_weight.size()),
                     "fc_weight"});
        v.push_back({blk.fc_bias.data(),
                     static_cast<std::size_t>(blk.fc_bias.size()), "fc_bias"});
        v.push_back({blk.ln_gain.data(),
                     static_cast<std::size_t>(blk.ln_gain.size()), "ln_gain"});
        v.push_back({blk.ln_bias.data(),
                     static_cast<std::size_t>(blk.ln_bias.size()), "ln_bias"});
    }
    v.push_back({p.gcn.ffn1_weight.data(),
                 static_cast<std::size_t>(p.gcn.ffn1_weight.size()),
                 "ffn1_weight"});
    v.push_back({p.gcn.ffn1_bias.data(),
                 static_cast<std::size_t>(p.gcn.ffn1_bias.size()),
                 "ffn1_bias"});
    v.push_back({p.gcn.ffn2_weight.data(),
                 static_cast<std::size_t>(p.gcn.ffn2_weight.size()),
                 "ffn2_weight"});
    v.push_back({p.gcn.ffn2_bias.data(),
                 static_cast<std::size_t>(p.gcn.ffn2_bias.size()),
                 "ffn2_bias"});
    if (p.query.kind == QueryTransformKind::linear)
        v.push_back({p.query.weight.data(),
                     static_cast<std::size_t>(p.query.weight.size()),
                     "query_weight"});
    return v;
}

std::vector<TensorView> grad_tensors(AgentGrads& g, bool linear) {
    std::vector<TensorView> v;
    for (std::size_t b = 0; b < 3; ++b) {
        auto& blk = g.blocks[b];
        v.push_back({blk.conv_weight.data(),
                     static_cast<std::size_t>(blk.conv_weight.size()),
                     "conv_weight"});
        v.push_back({blk.fc_weight.data(),
                     static_cast<std::size_t>(blk.fc_weight.size()),
                     "fc_weight"});
        v.push_back({blk.fc_bias.data(),
                     static_cast<std::size_t>(blk.fc_bias.size()), "fc_bias"});
        v.push_back({blk.ln_gain.data(),
                     static_cast<std::size_t>(blk.ln_gain.size()), "ln_gain"});
        v.push_back({blk.ln_bias.data(),
                     static_cast<std::size_t>(blk.ln_bias.size()), "ln_bias"});
    }
    v.push_back({g.ffn1_weight.data(),
                 static_cast<std::size_t>(g.ffn1_weight.size()), "ffn1_weight"});
    v.push_back({g.ffn1_bias.data(),
                 static_cast<std::size_t>(g.ffn1_bias.size()), "ffn1_bias"});
    v.push_back({g.ffn2_weight.data(),
                 static_cast<std::size_t>(g.ffn2_weight.size()), "ffn2_weight"});
    v.push_back({g.ffn2_bias.data(),
                 static_cast<std::size_t>(g.ffn2_bias.size()), "ffn2_bias"});
    if (linear)
        v.push_back({g.query_weight.data(),
                     static_cast<std::size_t>(g.query_weight.size()),
                     "query_weight"});
    return v;
}

// Max relative finite-difference error across every parameter tensor.
double max_fd_error(AgentParams params, const Dataset& ds,
                    const ProximityGraph& g, const RoutingPath& path,
                    std::span<const double> returns, std::span<const double> q) {
    auto grads = analytic_gradient(params, ds, g, path, returns, q);
    auto p_view = param_tensors(params);
    auto g_view =
        grad_tensors(grads, params.query.kind == QueryTransformKind::linear);
    REQUIRE(p_view.size() == g_view.size());

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t k = 0; k < p_view.size(); ++k) {
        REQUIRE(p_view[k].count == g_view[k].count);
        for (std::size_t i = 0; i < p_view[k].count; ++i) {
            const double saved = p_view[k].data[i];
            p_view[k].data[i] = saved + h;
            const double plus = pathwise_objective(params, ds, g, path, returns, q);
            p_view[k].data[i] = saved - h;
            const double minus = pathwise_objective(params, ds, g, path, returns, q);
            p_view[k].data[i] = saved;
            const double fd = (plus - minus) / (2.0 * h);
            const double bp = g_view[k].data[i];
            const double rel =
                std::abs(fd - bp) / std::max({std::abs(fd), std::abs(bp), 1e-5});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

RoutingPath collect_test_path(const Dataset& ds, const ProximityGraph& g,
                              const AgentParams& params, std::span<const double> q,
                              std::uint64_t budget, std::uint64_t seed) {
    auto table = precompute_embeddings(ds, g, params);
    auto e_q = embed_query(q, params.query);
    std::mt19937_64 rng(seed);
    IpcBudget ipc(budget);
    return collect_path(table, e_q, params.temperature, g, g.entry_vertex, ipc,
                        rng);
}

}  // namespace

TEST_CASE("bfs_distances on a chain") {
    auto g = chain_graph();
    auto table = bfs_distances(g, 2);
    CHECK(table.dist == std::vector<std::uint32_t>{2, 1, 0});
    auto self = bfs_distances(g, 0);
    CHECK(self.dist[0] == 0);
}

TEST_CASE("bfs_distances matches Floyd-Warshall columns") {
    for (bool directed : {false, true}) {
        auto g = random_graph(100, 3, directed ? 5 : 6, directed);
        auto all = floyd_warshall(g);
        for (NodeId target : {NodeId{0}, NodeId{17}, NodeId{63}, NodeId{99}}) {
            auto table = bfs_distances(g, target);
            for (std::size_t u = 0; u < g.n; ++u)
                CHECK(table.dist[u] == all[u][target]);
        }
    }
}

TEST_CASE("bfs tables honor the edge relaxation invariant") {
    auto g = random_graph(60, 4, 7, true);
    auto table = bfs_distances(g, 11);
    CHECK(table.dist[11] == 0);
    for (std::size_t u = 0; u < g.n; ++u)
        for (NodeId w : g.out_edges[u])
            if (table.reachable(w))
                CHECK(table.dist[u] <= table.dist[w] + 1);
}

TEST_CASE("step_reward realizes the three cases") {
    Dataset ds;
    ds.items = VectorSet(2, {0, 1, 2, 0, 1, 0, 1, 0});  // nodes 0..3
    std::vector<double> q{1, 0};
    RewardConfig cfg;
    cfg.alpha = 1.0;
    cfg.gamma = 0.9;

    // (a) no ground truth: plain inner-product increment.
    CHECK(step_reward(ds, q, 0, 1, nullptr, false, cfg) == doctest::Approx(2.0));

    // Nodes 2 and 3 share a vector, so the increment vanishes.
    ShortestPathTable table;
    table.target = 0;
    table.dist = {0, 3, 2, 1};  // L(s)=2, L(s')=1
    // (c) nonterminal: -(gamma*L(s') - L(s)) = -(0.9 - 2) = 1.1
    CHECK(step_reward(ds, q, 2, 3, &table, false, cfg) == doctest::Approx(1.1));
    // (b) terminal with L(s)=1 wants delta + alpha*L(s).
    CHECK(step_reward(ds, q, 3, 2, &table, true, cfg) == doctest::Approx(1.0));
}

TEST_CASE("step_reward falls back when the target is unreachable") {
    Dataset ds;
    ds.items = VectorSet(2, {0, 1, 2, 0});
    std::vector<double> q{1, 0};
    RewardConfig cfg;
    cfg.alpha = 5.0;
    ShortestPathTable table;
    table.target = 0;
    table.dist = {0, ShortestPathTable::kUnreachable};
    CHECK(step_reward(ds, q, 1, 0, &table, false, cfg) ==
          doctest::Approx(-2.0));  // pure increment, no shaping
}

TEST_CASE("shaping sum telescopes to alpha * L(s_0)") {
    auto g = chain_graph();
    auto table = bfs_distances(g, 2);
    RewardConfig cfg;
    cfg.alpha = 1.0;
    cfg.gamma = 0.9;
    std::vector<NodeId> path{0, 1, 2};
    CHECK(shaping_telescope_check(path, table, cfg) ==
          doctest::Approx(1.0 * table.dist[0]).epsilon(1e-12));

    std::vector<NodeId> wander{1, 0, 1, 2};
    CHECK(shaping_telescope_check(wander, table, cfg) ==
          doctest::Approx(1.0 * table.dist[1]).epsilon(1e-12));

    cfg.alpha = 0.0;
    CHECK(shaping_telescope_check(path, table, cfg) == 0.0);
}

TEST_CASE("shaping identity holds over random walks on random graphs") {
    std::mt19937_64 rng(13);
    RewardConfig cfg;
    cfg.alpha = 0.7;
    cfg.gamma = 0.9;
    int checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto g = random_graph(40, 3, 100 + trial, false);
        std::uniform_int_distribution<std::size_t> pick_node(0, g.n - 1);
        auto target = static_cast<NodeId>(pick_node(rng));
        auto table = bfs_distances(g, target);
        for (int walk = 0; walk < 50; ++walk) {
            std::vector<NodeId> path{static_cast<NodeId>(pick_node(rng))};
            for (int len = 0; len < 12; ++len) {
                auto nbrs = g.neighbors(path.back());
                if (nbrs.empty()) break;
                std::uniform_int_distribution<std::size_t> pick(0, nbrs.size() - 1);
                path.push_back(nbrs[pick(rng)]);
            }
            bool all_reachable = true;
            for (NodeId v : path) all_reachable &= table.reachable(v);
            if (!all_reachable || path.size() < 2) continue;
            ++checked;
            const double sum = shaping_telescope_check(path, table, cfg);
            CHECK(std::abs(sum - cfg.alpha * table.dist[path.front()]) < 1e-9);
        }
    }
    CHECK(checked > 500);
}

TEST_CASE("returns_with_baseline matches direct summation") {
    RewardConfig cfg;
    cfg.gamma = 0.9;

    Trajectory single;
    single.steps.push_back({0, 1, 1.0, 0.25, 0.0});
    auto g1 = returns_with_baseline(single, cfg);
    CHECK(g1.size() == 1);
    CHECK(g1[0] == doctest::Approx(0.75));

    // gamma = 0 collapses to per-step advantages.
    RewardConfig flat;
    flat.gamma = 0.0;
    Trajectory traj;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int t = 0; t < 5; ++t)
        traj.steps.push_back({0, 0, dist(rng), dist(rng), 0.0});
    auto g0 = returns_with_baseline(traj, flat);
    for (int t = 0; t < 5; ++t)
        CHECK(g0[t] == doctest::Approx(traj.steps[t].reward -
                                       traj.steps[t].baseline));

    // Naive double loop oracle.
    auto got = returns_with_baseline(traj, cfg);
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
        double want = 0.0;
        for (std::size_t i = t; i < traj.steps.size(); ++i)
            want += std::pow(cfg.gamma, static_cast<double>(i - t)) *
                    (traj.steps[i].reward - traj.steps[i].baseline);
        CHECK(got[t] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("trajectory baselines are the exact mean of b replayed samples") {
    Dataset ds = random_dataset(60, 6, 31);
    GraphConfig config;
    config.max_degree = 5;
    config.candidate_size = 10;
    auto g = build_ipnsw(ds, config);
    auto params =
        AgentParams::random_init(6, 6, 0.5, QueryTransformKind::identity, 32);
    std::mt19937_64 rng(33);
    auto q = random_vector(6, rng);
    auto path = collect_test_path(ds, g, params, q, 40, 34);
    REQUIRE(!path.steps.empty());

    RewardConfig cfg;
    cfg.alpha = 0.0;
    cfg.gamma = 0.9;
    cfg.baseline_samples = 4;

    std::mt19937_64 used(35), replay(35);
    auto traj = build_trajectory(path, ds, q, nullptr, cfg, used);
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
        const auto& step = path.steps[t];
        double sum = 0.0;
        for (std::uint32_t j = 0; j < cfg.baseline_samples; ++j) {
            auto pick = sample_action(step.probs, replay);
            sum += step_reward(ds, q, step.state, step.candidates[pick],
                               nullptr, false, cfg);
        }
        CHECK(traj.steps[t].baseline ==
              doctest::Approx(sum / cfg.baseline_samples).epsilon(1e-15));
    }
}

TEST_CASE("alpha=0 makes shaped and unshaped rewards identical") {
    Dataset ds = random_dataset(60, 6, 41);
    GraphConfig config;
    config.max_degree = 5;
    config.candidate_size = 10;
    auto g = build_ipnsw(ds, config);
    auto params =
        AgentParams::random_init(6, 6, 0.5, QueryTransformKind::identity, 42);
    std::mt19937_64 rng(43);
    auto q = random_vector(6, rng);
    auto path = collect_test_path(ds, g, params, q, 40, 44);
    REQUIRE(!path.steps.empty());

    RewardConfig cfg;
    cfg.alpha = 0.0;
    cfg.gamma = 0.9;
    cfg.baseline_samples = 2;
    auto table = bfs_distances(g, 0);

    std::mt19937_64 r1(7), r2(7);
    auto with_gt = build_trajectory(path, ds, q, &table, cfg, r1);
    auto without = build_trajectory(path, ds, q, nullptr, cfg, r2);
    REQUIRE(with_gt.steps.size() == without.steps.size());
    for (std::size_t t = 0; t < with_gt.steps.size(); ++t) {
        CHECK(with_gt.steps[t].reward == without.steps[t].reward);
        CHECK(with_gt.steps[t].baseline == without.steps[t].baseline);
    }
}

TEST_CASE("L changes by at most one hop per undirected edge") {
    Dataset ds = random_dataset(150, 8, 51);
    GraphConfig config;
    config.max_degree = 6;
    config.candidate_size = 12;
    auto g = build_ipnsw(ds, config);
    auto table = bfs_distances(g, 3);
    for (std::size_t u = 0; u < g.n; ++u) {
        if (!table.reachable(u)) continue;
        for (NodeId w : g.out_edges[u]) {
            if (!table.reachable(w)) continue;
            const auto diff = static_cast<std::int64_t>(table.dist[w]) -
                              static_cast<std::int64_t>(table.dist[u]);
            CHECK(diff >= -1);
            CHECK(diff <= 1);
        }
    }
}

TEST_CASE("L can improve by at most one hop per directed edge") {
    auto g = random_graph(80, 4, 53, true);
    auto table = bfs_distances(g, 9);
    for (std::size_t u = 0; u < g.n; ++u) {
        if (!table.reachable(u)) continue;
        for (NodeId w : g.out_edges[u]) {
            if (!table.reachable(w)) continue;
            const auto diff = static_cast<std::int64_t>(table.dist[w]) -
                              static_cast<std::int64_t>(table.dist[u]);
            CHECK(diff >= -1);  // directed graphs give no upper bound
        }
    }
}

TEST_CASE("backprop gradient matches central finite differences") {
    Dataset ds = random_dataset(10, 4, 61);
    auto g = random_graph(10, 3, 62, true);
    RewardConfig cfg;
    cfg.gamma = 0.9;

    SUBCASE("identity query transform") {
        auto params = AgentParams::random_init(4, 4, 0.25,
                                               QueryTransformKind::identity, 63);
        std::mt19937_64 rng(64);
        auto q = random_vector(4, rng);
        auto path = collect_test_path(ds, g, params, q, 30, 65);
        REQUIRE(path.steps.size() >= 2);
        std::vector<double> returns(path.steps.size());
        for (std::size_t t = 0; t < returns.size(); ++t)
            returns[t] = (t % 2 == 0 ? 1.0 : -0.6) + 0.1 * static_cast<double>(t);
        CHECK(max_fd_error(params, ds, g, path, returns, q) < 1e-4);
    }

    SUBCASE("linear query transform") {
        auto params = AgentParams::random_init(4, 3, 0.25,
                                               QueryTransformKind::linear, 66);
        std::mt19937_64 rng(67);
        auto q = random_vector(4, rng);
        auto path = collect_test_path(ds, g, params, q, 30, 68);
        REQUIRE(!path.steps.empty());
        std::vector<double> returns(path.steps.size(), 0.8);
        CHECK(max_fd_error(params, ds, g, path, returns, q) < 1e-4);
    }
}

TEST_CASE("reinforce_update leaves parameters unchanged on zero returns") {
    Dataset ds = random_dataset(30, 4, 71);
    GraphConfig config;
    config.max_degree = 4;
    config.candidate_size = 8;
    auto g = build_ipnsw(ds, config);
    auto params =
        AgentParams::random_init(4, 4, 0.5, QueryTransformKind::identity, 72);
    auto before = params;
    QuerySet qs;
    std::mt19937_64 rng(73);
    qs.queries.push_row(random_vector(4, rng));

    auto path = collect_test_path(ds, g, params, qs.row(0), 24, 74);
    path.query_index = 0;
    REQUIRE(!path.steps.empty());
    std::vector<std::vector<double>> zero_returns{
        std::vector<double>(path.steps.size(), 0.0)};

    AdamState adam;
    CHECK(reinforce_update(params, adam, ds, g, qs, {path}, zero_returns, 0.1));
    for (int b = 0; b < 3; ++b)
        CHECK(params.gcn.blocks[b].conv_weight ==
              before.gcn.blocks[b].conv_weight);
    CHECK(params.gcn.ffn2_bias == before.gcn.ffn2_bias);
}

TEST_CASE("single-candidate steps carry no gradient") {
    // On a chain every candidate set is a singleton, so log pi == 0.
    auto g = chain_graph();
    Dataset ds;
    ds.items = VectorSet(2, {0, 1, 1, 0, 2, 0});
    auto params =
        AgentParams::random_init(2, 2, 0.5, QueryTransformKind::identity, 81);
    auto before = params;
    QuerySet qs;
    qs.queries.push_row(std::vector<double>{1.0, 0.0});

    auto path = collect_test_path(ds, g, params, qs.row(0), 100, 82);
    REQUIRE(path.steps.size() == 2);
    for (const auto& step : path.steps) CHECK(step.candidates.size() == 1);
    std::vector<std::vector<double>> returns{
        std::vector<double>(path.steps.size(), 2.5)};

    AdamState adam;
    CHECK(reinforce_update(params, adam, ds, g, qs, {path}, returns, 0.1));
    for (int b = 0; b < 3; ++b)
        CHECK(params.gcn.blocks[b].fc_weight == before.gcn.blocks[b].fc_weight);
}

TEST_CASE("reinforce_update refuses a non-finite gradient") {
    Dataset ds = random_dataset(30, 4, 75);
    GraphConfig config;
    config.max_degree = 4;
    config.candidate_size = 8;
    auto g = build_ipnsw(ds, config);
    auto params =
        AgentParams::random_init(4, 4, 0.5, QueryTransformKind::identity, 76);
    auto before = params;
    QuerySet qs;
    std::mt19937_64 rng(77);
    qs.queries.push_row(random_vector(4, rng));

    auto path = collect_test_path(ds, g, params, qs.row(0), 24, 78);
    path.query_index = 0;
    REQUIRE(!path.steps.empty());
    std::vector<std::vector<double>> bad_returns{std::vector<double>(
        path.steps.size(), std::numeric_limits<double>::infinity())};

    AdamState adam;
    CHECK_FALSE(
        reinforce_update(params, adam, ds, g, qs, {path}, bad_returns, 0.1));
    for (int b = 0; b < 3; ++b)
        CHECK(params.gcn.blocks[b].conv_weight ==
              before.gcn.blocks[b].conv_weight);
}

TEST_CASE("train with zero batches returns the untouched initial agent") {
    Dataset ds = random_dataset(50, 6, 91);
    GraphConfig config;
    config.max_degree = 4;
    config.candidate_size = 8;
    auto g = build_ipnsw(ds, config);
    std::mt19937_64 rng(92);
    QuerySet train_q, val_q;
    for (int i = 0; i < 10; ++i) train_q.queries.push_row(random_vector(6, rng));
    for (int i = 0; i < 3; ++i) val_q.queries.push_row(random_vector(6, rng));

    TrainConfig cfg;
    cfg.total_batches = 0;
    cfg.seed = 5;
    GroundTruthTable gt;
    RewardConfig rc;
    auto r1 = train(ds, g, train_q, val_q, gt, cfg, rc);
    auto r2 = train(ds, g, train_q, val_q, gt, cfg, rc);
    CHECK(r1.log_lines.empty());
    for (int b = 0; b < 3; ++b)
        CHECK(r1.params.gcn.blocks[b].conv_weight ==
              r2.params.gcn.blocks[b].conv_weight);
}

TEST_CASE("train rejects an empty training set") {
    Dataset ds = random_dataset(20, 4, 95);
    GraphConfig config;
    config.max_degree = 4;
    config.candidate_size = 8;
    auto g = build_ipnsw(ds, config);
    QuerySet empty, val;
    TrainConfig cfg;
    RewardConfig rc;
    CHECK_THROWS_WITH_AS(train(ds, g, empty, val, GroundTruthTable{}, cfg, rc),
                         doctest::Contains("empty training set"),
                         std::invalid_argument);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    Dataset ds = random_dataset(80, 6, 93);
    GraphConfig config;
    config.max_degree = 5;
    config.candidate_size = 10;
    auto g = build_ipnsw(ds, config);
    std::mt19937_64 rng(94);
    QuerySet train_q, val_q;
    for (int i = 0; i < 20; ++i) train_q.queries.push_row(random_vector(6, rng));
    for (int i = 0; i < 5; ++i) val_q.queries.push_row(random_vector(6, rng));
    auto gt = GroundTruthTable{};
    for (std::size_t i = 0; i < train_q.size(); ++i)
        gt.entries[static_cast<NodeId>(i)] =
            brute_force_topk(ds, train_q.row(i), 1);
    gt.coverage = 1.0;

    TrainConfig cfg;
    cfg.total_batches = 8;
    cfg.batch_size = 5;
    cfg.collection_ipc = 24;
    cfg.eval_interval = 4;
    cfg.seed = 17;
    RewardConfig rc;
    rc.alpha = 0.7;
    rc.gamma = 0.9;
    rc.baseline_samples = 2;

    auto r1 = train(ds, g, train_q, val_q, gt, cfg, rc);
    auto r2 = train(ds, g, train_q, val_q, gt, cfg, rc);
    CHECK(r1.log_lines == r2.log_lines);
    for (int b = 0; b < 3; ++b) {
        CHECK(r1.params.gcn.blocks[b].conv_weight ==
              r2.params.gcn.blocks[b].conv_weight);
        CHECK(r1.params.gcn.blocks[b].fc_weight ==
              r2.params.gcn.blocks[b].fc_weight);
    }
    CHECK(r1.params.gcn.ffn1_weight == r2.params.gcn.ffn1_weight);
    CHECK(r1.best_validation_recall == r2.best_validation_recall);
}
