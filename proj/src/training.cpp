#include "mipsroute/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <stdexcept>

namespace mipsroute {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

ShortestPathTable bfs_distances(const ProximityGraph& graph, NodeId target) {
    if (target >= graph.n)
        throw std::invalid_argument("bfs_distances: invalid target");
    // Predecessor lists: u appears in pred[x] when the edge u->x exists.
    std::vector<std::vector<NodeId>> pred(graph.n);
    for (std::size_t u = 0; u < graph.n; ++u)
        for (NodeId v : graph.out_edges[u])
            pred[v].push_back(static_cast<NodeId>(u));

    ShortestPathTable table;
    table.target = target;
    table.dist.assign(graph.n, ShortestPathTable::kUnreachable);
    table.dist[target] = 0;
    std::deque<NodeId> queue{target};
    while (!queue.empty()) {
        const NodeId x = queue.front();
        queue.pop_front();
        const std::uint32_t next = table.dist[x] + 1;
        auto relax = [&](NodeId u) {
            if (table.dist[u] == ShortestPathTable::kUnreachable) {
                table.dist[u] = next;
                queue.push_back(u);
            }
        };
        for (NodeId u : pred[x]) relax(u);
        if (!graph.directed)
            for (NodeId u : graph.out_edges[x]) relax(u);
    }
    return table;
}

double step_reward(const Dataset& dataset, std::span<const double> q, NodeId s,
                   NodeId s_next, const ShortestPathTable* gt_table,
                   bool terminal, const RewardConfig& cfg) {
    const double delta = cfg.shaping_only
                             ? 0.0
                             : inner_product(dataset.row(s_next), q) -
                                   inner_product(dataset.row(s), q);
    if (gt_table == nullptr) return delta;
    if (!gt_table->reachable(s)) return delta;
    const double l_s = static_cast<double>(gt_table->dist[s]);
    if (terminal) return delta + cfg.alpha * l_s;
    if (!gt_table->reachable(s_next)) return delta;
    const double l_next = static_cast<double>(gt_table->dist[s_next]);
    return delta - cfg.alpha * (cfg.gamma * l_next - l_s);
}

double shaping_telescope_check(std::span<const NodeId> path_nodes,
                               const ShortestPathTable& table,
                               const RewardConfig& cfg) {
    if (path_nodes.size() < 2) return 0.0;
    const std::size_t transitions = path_nodes.size() - 1;
    auto phi = [&](std::size_t idx) {
        if (idx == transitions) return 0.0;  // terminal potential
        const NodeId v = path_nodes[idx];
        if (!table.reachable(v))
            throw std::invalid_argument(
                "shaping_telescope_check: unreachable node on path");
        return -cfg.alpha * static_cast<double>(table.dist[v]);
    };
    double sum = 0.0;
    double discount = 1.0;
    for (std::size_t t = 0; t < transitions; ++t) {
        sum += discount * (cfg.gamma * phi(t + 1) - phi(t));
        discount *= cfg.gamma;
    }
    return sum;
}

Trajectory build_trajectory(const RoutingPath& path, const Dataset& dataset,
                            std::span<const double> q,
                            const ShortestPathTable* gt_table,
                            const RewardConfig& cfg, std::mt19937_64& rng) {
    Trajectory traj;
    traj.query_index = path.query_index;
    traj.steps.reserve(path.steps.size());
    for (std::size_t t = 0; t < path.steps.size(); ++t) {
        const auto& step = path.steps[t];
        const bool terminal = t + 1 == path.steps.size();
        TrajectoryStep out;
        out.from = step.state;
        out.to = step.candidates[step.chosen];
        out.reward =
            step_reward(dataset, q, out.from, out.to, gt_table, terminal, cfg);
        if (cfg.baseline_samples > 0) {
            double sum = 0.0;
            for (std::uint32_t j = 0; j < cfg.baseline_samples; ++j) {
                const std::size_t pick = sample_action(step.probs, rng);
                sum += step_reward(dataset, q, out.from, step.candidates[pick],
                                   gt_table, false, cfg);
            }
            out.baseline = sum / cfg.baseline_samples;
        }
        out.log_prob = std::log(step.chosen_prob);
        traj.steps.push_back(out);
    }
    return traj;
}

std::vector<double> returns_with_baseline(const Trajectory& trajectory,
                                          const RewardConfig& cfg) {
    std::vector<double> returns(trajectory.steps.size(), 0.0);
    double acc = 0.0;
    for (std::size_t i = trajectory.steps.size(); i-- > 0;) {
        const auto& step = trajectory.steps[i];
        acc = (step.reward - step.baseline) + cfg.gamma * acc;
        returns[i] = acc;
    }
    return returns;
}

AgentGrads AgentGrads::zeros_like(const AgentParams& params) {
    AgentGrads g;
    for (std::size_t b = 0; b < 3; ++b) {
        const auto& src = params.gcn.blocks[b];
        g.blocks[b].conv_weight =
            Eigen::MatrixXd::Zero(src.conv_weight.rows(), src.conv_weight.cols());
        g.blocks[b].fc_weight =
            Eigen::MatrixXd::Zero(src.fc_weight.rows(), src.fc_weight.cols());
        g.blocks[b].fc_bias = Eigen::VectorXd::Zero(src.fc_bias.size());
        g.blocks[b].ln_gain = Eigen::VectorXd::Zero(src.ln_gain.size());
        g.blocks[b].ln_bias = Eigen::VectorXd::Zero(src.ln_bias.size());
    }
    g.ffn1_weight = Eigen::MatrixXd::Zero(params.gcn.ffn1_weight.rows(),
                                          params.gcn.ffn1_weight.cols());
    g.ffn1_bias = Eigen::VectorXd::Zero(params.gcn.ffn1_bias.size());
    g.ffn2_weight = Eigen::MatrixXd::Zero(params.gcn.ffn2_weight.rows(),
                                          params.gcn.ffn2_weight.cols());
    g.ffn2_bias = Eigen::VectorXd::Zero(params.gcn.ffn2_bias.size());
    if (params.query.kind == QueryTransformKind::linear)
        g.query_weight = Eigen::MatrixXd::Zero(params.query.weight.rows(),
                                               params.query.weight.cols());
    return g;
}

void AgentGrads::scale(double factor) {
    for (auto& b : blocks) {
        b.conv_weight *= factor;
        b.fc_weight *= factor;
        b.fc_bias *= factor;
        b.ln_gain *= factor;
        b.ln_bias *= factor;
    }
    ffn1_weight *= factor;
    ffn1_bias *= factor;
    ffn2_weight *= factor;
    ffn2_bias *= factor;
    if (query_weight.size() > 0) query_weight *= factor;
}

bool AgentGrads::all_finite() const {
    for (const auto& b : blocks) {
        if (!b.conv_weight.allFinite() || !b.fc_weight.allFinite() ||
            !b.fc_bias.allFinite() || !b.ln_gain.allFinite() ||
            !b.ln_bias.allFinite())
            return false;
    }
    return ffn1_weight.allFinite() && ffn1_bias.allFinite() &&
           ffn2_weight.allFinite() && ffn2_bias.allFinite() &&
           (query_weight.size() == 0 || query_weight.allFinite());
}

AgentGrads gcn_backward(const GcnParams& params, const NormAdjacency& adj,
                        const GcnForwardCache& cache,
                        const Eigen::MatrixXd& d_output) {
    AgentParams shape;
    shape.gcn = params;
    AgentGrads grads = AgentGrads::zeros_like(shape);

    // Feed-forward head.
    grads.ffn2_weight = cache.ffn_mid.transpose() * d_output;
    grads.ffn2_bias = d_output.colwise().sum().transpose();
    Eigen::MatrixXd d_mid = d_output * params.ffn2_weight.transpose();
    Eigen::MatrixXd d_pre(d_mid.rows(), d_mid.cols());
    for (Eigen::Index i = 0; i < d_mid.size(); ++i)
        d_pre.data()[i] =
            d_mid.data()[i] * elu_grad_from_pre(cache.ffn_pre.data()[i]);
    grads.ffn1_weight = cache.ffn_in.transpose() * d_pre;
    grads.ffn1_bias = d_pre.colwise().sum().transpose();
    Eigen::MatrixXd d_h = d_pre * params.ffn1_weight.transpose();

    for (std::size_t b = 3; b-- > 0;) {
        const auto& block = params.blocks[b];
        const auto& c = cache.blocks[b];
        auto& g = grads.blocks[b];

        // Layer norm with gain/bias.
        g.ln_gain = (d_h.array() * c.xhat.array()).colwise().sum().transpose();
        g.ln_bias = d_h.colwise().sum().transpose();
        Eigen::MatrixXd d_xhat =
            (d_h.array().rowwise() * block.ln_gain.transpose().array()).matrix();
        Eigen::MatrixXd d_res(d_xhat.rows(), d_xhat.cols());
        const double dcols = static_cast<double>(d_xhat.cols());
        for (Eigen::Index i = 0; i < d_xhat.rows(); ++i) {
            const double c1 = d_xhat.row(i).mean();
            const double c2 =
                (d_xhat.row(i).array() * c.xhat.row(i).array()).sum() / dcols;
            d_res.row(i) =
                c.inv_std(i) *
                (d_xhat.row(i).array() - c1 - c.xhat.row(i).array() * c2)
                    .matrix();
        }

        // Fully-connected path plus residual.
        g.fc_weight = c.conv_out.transpose() * d_res;
        g.fc_bias = d_res.colwise().sum().transpose();
        Eigen::MatrixXd d_conv_out = d_res * block.fc_weight.transpose();
        Eigen::MatrixXd d_conv_pre(d_conv_out.rows(), d_conv_out.cols());
        for (Eigen::Index i = 0; i < d_conv_out.size(); ++i)
            d_conv_pre.data()[i] =
                d_conv_out.data()[i] *
                elu_grad_from_pre(c.conv_pre.data()[i]);
        g.conv_weight = c.agg.transpose() * d_conv_pre;
        Eigen::MatrixXd d_agg = d_conv_pre * block.conv_weight.transpose();
        d_h = adj.multiply(d_agg) + d_res;  // adjacency is symmetric
    }
    return grads;
}

void accumulate_policy_gradient(const RoutingPath& path,
                                std::span<const double> returns,
                                const EmbeddingTable& table,
                                std::span<const double> embedded_query,
                                std::span<const double> raw_query, double tau,
                                QueryTransformKind query_kind,
                                Eigen::MatrixXd& d_embeddings,
                                Eigen::MatrixXd* d_query_weight) {
    if (returns.size() != path.steps.size())
        throw std::invalid_argument(
            "accumulate_policy_gradient: returns/steps mismatch");
    const std::size_t dim = table.dim;
    for (std::size_t t = 0; t < path.steps.size(); ++t) {
        const auto& step = path.steps[t];
        const double g = returns[t];
        if (g == 0.0) continue;
        Eigen::VectorXd d_query = Eigen::VectorXd::Zero(dim);
        for (std::size_t i = 0; i < step.candidates.size(); ++i) {
            const double indicator = i == step.chosen ? 1.0 : 0.0;
            const double coeff = g * (indicator - step.probs[i]) / tau;
            if (coeff == 0.0) continue;
            const NodeId c = step.candidates[i];
            for (std::size_t j = 0; j < dim; ++j)
                d_embeddings(c, j) += coeff * embedded_query[j];
            if (query_kind == QueryTransformKind::linear) {
                auto row = table.row(c);
                for (std::size_t j = 0; j < dim; ++j)
                    d_query(j) += coeff * row[j];
            }
        }
        if (query_kind == QueryTransformKind::linear && d_query_weight) {
            for (Eigen::Index r = 0; r < d_query_weight->rows(); ++r)
                for (Eigen::Index cidx = 0; cidx < d_query_weight->cols(); ++cidx)
                    (*d_query_weight)(r, cidx) += d_query(r) * raw_query[cidx];
        }
    }
}

namespace {

struct TensorRef {
    double* param;
    const double* grad;
    std::size_t count;
};

std::vector<TensorRef> collect_tensors(AgentParams& params,
                                       const AgentGrads& grads) {
    std::vector<TensorRef> refs;
    auto add = [&refs](auto& p, const auto& g) {
        if (static_cast<std::size_t>(p.size()) != static_cast<std::size_t>(g.size()))
            throw std::invalid_argument("adam: tensor shape mismatch");
        refs.push_back({p.data(), g.data(), static_cast<std::size_t>(p.size())});
    };
    for (std::size_t b = 0; b < 3; ++b) {
        add(params.gcn.blocks[b].conv_weight, grads.blocks[b].conv_weight);
        add(params.gcn.blocks[b].fc_weight, grads.blocks[b].fc_weight);
        add(params.gcn.blocks[b].fc_bias, grads.blocks[b].fc_bias);
        add(params.gcn.blocks[b].ln_gain, grads.blocks[b].ln_gain);
        add(params.gcn.blocks[b].ln_bias, grads.blocks[b].ln_bias);
    }
    add(params.gcn.ffn1_weight, grads.ffn1_weight);
    add(params.gcn.ffn1_bias, grads.ffn1_bias);
    add(params.gcn.ffn2_weight, grads.ffn2_weight);
    add(params.gcn.ffn2_bias, grads.ffn2_bias);
    if (params.query.kind == QueryTransformKind::linear)
        add(params.query.weight, grads.query_weight);
    return refs;
}

}  // namespace

void AdamState::ascend(AgentParams& params, const AgentGrads& grads,
                       double learning_rate) {
    auto refs = collect_tensors(params, grads);
    if (m_.empty()) {
        m_.resize(refs.size());
        v_.resize(refs.size());
        for (std::size_t k = 0; k < refs.size(); ++k) {
            m_[k] = Eigen::MatrixXd::Zero(refs[k].count, 1);
            v_[k] = Eigen::MatrixXd::Zero(refs[k].count, 1);
        }
    }
    if (m_.size() != refs.size())
        throw std::invalid_argument("adam: state/tensor count mismatch");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < refs.size(); ++k) {
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < refs[k].count; ++i) {
            const double g = refs[k].grad[i];
            m(i, 0) = beta1 * m(i, 0) + (1.0 - beta1) * g;
            v(i, 0) = beta2 * v(i, 0) + (1.0 - beta2) * g * g;
            const double mhat = m(i, 0) / bc1;
            const double vhat = v(i, 0) / bc2;
            refs[k].param[i] += learning_rate * mhat / (std::sqrt(vhat) + epsilon);
        }
    }
}

namespace {

Eigen::MatrixXd dataset_matrix(const Dataset& dataset) {
    Eigen::MatrixXd x(dataset.size(), dataset.dim());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto row = dataset.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) x(i, j) = row[j];
    }
    return x;
}

EmbeddingTable table_from_matrix(const Eigen::MatrixXd& e,
                                 std::uint64_t checksum) {
    EmbeddingTable table;
    table.dim = e.cols();
    table.values.resize(e.rows() * e.cols());
    for (Eigen::Index i = 0; i < e.rows(); ++i)
        for (Eigen::Index j = 0; j < e.cols(); ++j)
            table.values[i * e.cols() + j] = e(i, j);
    table.graph_checksum = checksum;
    return table;
}

}  // namespace

bool reinforce_update(AgentParams& params, AdamState& adam,
                      const Dataset& dataset, const ProximityGraph& graph,
                      const QuerySet& queries,
                      const std::vector<RoutingPath>& paths,
                      const std::vector<std::vector<double>>& step_returns,
                      double learning_rate) {
    if (paths.size() != step_returns.size())
        throw std::invalid_argument("reinforce_update: paths/returns mismatch");
    if (paths.empty()) return true;

    const Eigen::MatrixXd x = dataset_matrix(dataset);
    const NormAdjacency adj = NormAdjacency::from_graph(graph);
    GcnForwardCache cache;
    Eigen::MatrixXd out = gcn_forward_cached(x, adj, params.gcn, &cache);
    EmbeddingTable table = table_from_matrix(out, graph.checksum());

    Eigen::MatrixXd d_embeddings =
        Eigen::MatrixXd::Zero(out.rows(), out.cols());
    Eigen::MatrixXd d_query_weight;
    if (params.query.kind == QueryTransformKind::linear)
        d_query_weight = Eigen::MatrixXd::Zero(params.query.weight.rows(),
                                               params.query.weight.cols());

    for (std::size_t p = 0; p < paths.size(); ++p) {
        const auto q = queries.row(paths[p].query_index);
        const auto e_q = embed_query(q, params.query);
        accumulate_policy_gradient(paths[p], step_returns[p], table, e_q, q,
                                   params.temperature, params.query.kind,
                                   d_embeddings, &d_query_weight);
    }
    const double inv_batch = 1.0 / static_cast<double>(paths.size());
    d_embeddings *= inv_batch;

    AgentGrads grads = gcn_backward(params.gcn, adj, cache, d_embeddings);
    if (params.query.kind == QueryTransformKind::linear)
        grads.query_weight = d_query_weight * inv_batch;
    if (!grads.all_finite()) return false;
    adam.ascend(params, grads, learning_rate);
    return true;
}

namespace {

// Top-1 targets for the covered fraction of training queries.
std::map<NodeId, NodeId> pick_targets(const GroundTruthTable& gt,
                                      std::size_t train_count, double fraction,
                                      std::uint64_t seed) {
    std::vector<NodeId> keys;
    for (const auto& [q, ids] : gt.entries)
        if (q < train_count && !ids.empty()) keys.push_back(q);
    const auto want = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(train_count)));
    if (keys.size() > want) {
        std::mt19937_64 rng(mix_seed(seed, 17));
        std::shuffle(keys.begin(), keys.end(), rng);
        keys.resize(want);
    }
    std::map<NodeId, NodeId> targets;
    for (NodeId q : keys) targets[q] = gt.entries.at(q).front();
    return targets;
}

double validation_recall(const Dataset& dataset, const ProximityGraph& graph,
                         const AgentParams& params, const QuerySet& val,
                         const std::vector<NodeId>& oracle_top1,
                         std::uint64_t ipc) {
    if (oracle_top1.empty()) return 0.0;
    EmbeddingTable table = precompute_embeddings(dataset, graph, params);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < oracle_top1.size(); ++i) {
        Scorer scorer = make_agent_scorer(table, graph, params, val.row(i));
        IpcBudget budget(ipc);
        auto result = beam_search(scorer, graph, graph.entry_vertex, 1, budget);
        if (!result.topk.empty() && result.topk[0] == oracle_top1[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(oracle_top1.size());
}

std::string format_log_line(std::uint32_t batch, double lr, double recall) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "batch=%u lr=%.17g val_recall=%.17g", batch,
                  lr, recall);
    return buf;
}

}  // namespace

TrainResult train(const Dataset& dataset, const ProximityGraph& graph,
                  const QuerySet& train_queries, const QuerySet& val_queries,
                  const GroundTruthTable& gt, const TrainConfig& cfg,
                  const RewardConfig& reward_cfg) {
    if (train_queries.size() == 0)
        throw std::invalid_argument("train: empty training set");
    if (cfg.learning_rate <= 0.0)
        throw std::invalid_argument("train: learning rate must be > 0");

    const std::size_t d = dataset.dim();
    const std::size_t d_prime = cfg.embed_dim == 0 ? d : cfg.embed_dim;
    AgentParams params = AgentParams::random_init(
        d, d_prime, cfg.temperature, cfg.query_kind, mix_seed(cfg.seed, 1));

    TrainResult result;
    if (cfg.total_batches == 0) {
        result.params = params;
        return result;
    }

    const auto targets =
        pick_targets(gt, train_queries.size(), cfg.gt_fraction, cfg.seed);
    std::map<NodeId, ShortestPathTable> bfs_cache;
    auto table_for = [&](NodeId target) -> const ShortestPathTable* {
        auto it = bfs_cache.find(target);
        if (it == bfs_cache.end())
            it = bfs_cache.emplace(target, bfs_distances(graph, target)).first;
        return &it->second;
    };

    // Exact top-1 oracle for the validation slice.
    const std::size_t val_count =
        std::min<std::size_t>(val_queries.size(), cfg.max_val_queries);
    std::vector<NodeId> val_oracle(val_count);
    for (std::size_t i = 0; i < val_count; ++i)
        val_oracle[i] = brute_force_topk(dataset, val_queries.row(i), 1)[0];
    QuerySet val_slice;
    val_slice.split = QuerySplit::validation;
    for (std::size_t i = 0; i < val_count; ++i)
        val_slice.queries.push_row(val_queries.row(i));

    std::mt19937_64 batch_rng(mix_seed(cfg.seed, 2));
    std::mt19937_64 rollout_rng(mix_seed(cfg.seed, 3));
    std::uniform_int_distribution<std::size_t> pick_query(
        0, train_queries.size() - 1);

    AdamState adam;
    AgentParams best_params = params;
    double best_recall = -1.0;
    std::uint32_t best_batch = 0;

    for (std::uint32_t k = 0; k < cfg.total_batches; ++k) {
        const double lr =
            cfg.learning_rate *
            std::pow(cfg.decay_base, static_cast<double>(k) / cfg.decay_interval);

        EmbeddingTable table = precompute_embeddings(dataset, graph, params);
        std::vector<RoutingPath> paths;
        std::vector<std::vector<double>> returns;
        paths.reserve(cfg.batch_size);
        returns.reserve(cfg.batch_size);
        for (std::uint32_t j = 0; j < cfg.batch_size; ++j) {
            const auto qi = static_cast<std::uint32_t>(pick_query(batch_rng));
            const auto q = train_queries.row(qi);
            const auto e_q = embed_query(q, params.query);
            IpcBudget budget(cfg.collection_ipc);
            RoutingPath path =
                collect_path(table, e_q, params.temperature, graph,
                             graph.entry_vertex, budget, rollout_rng);
            path.query_index = qi;
            const ShortestPathTable* gt_table = nullptr;
            if (auto it = targets.find(qi); it != targets.end())
                gt_table = table_for(it->second);
            Trajectory traj = build_trajectory(path, dataset, q, gt_table,
                                               reward_cfg, rollout_rng);
            returns.push_back(returns_with_baseline(traj, reward_cfg));
            paths.push_back(std::move(path));
        }
        const bool applied = reinforce_update(params, adam, dataset, graph,
                                              train_queries, paths, returns, lr);
        if (!applied)
            result.log_lines.push_back("batch=" + std::to_string(k + 1) +
                                       " skipped=non_finite_gradient");

        const bool last = k + 1 == cfg.total_batches;
        if ((k + 1) % cfg.eval_interval == 0 || last) {
            const double recall =
                validation_recall(dataset, graph, params, val_slice, val_oracle,
                                  cfg.collection_ipc);
            result.log_lines.push_back(format_log_line(k + 1, lr, recall));
            if (recall > best_recall) {
                best_recall = recall;
                best_params = params;
                best_batch = k + 1;
            }
        }
    }

    result.params = best_recall >= 0.0 ? best_params : params;
    result.best_validation_recall = std::max(best_recall, 0.0);
    result.best_batch = best_batch;
    return result;
}

}  // namespace mipsroute
