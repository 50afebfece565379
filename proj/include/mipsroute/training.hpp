#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mipsroute/agent.hpp"
#include "mipsroute/proxgraph.hpp"
#include "mipsroute/search.hpp"
#include "mipsroute/vecstore.hpp"

namespace mipsroute {

struct RewardConfig {
    double alpha = 0.0;           // shaping weight
    double gamma = 0.9;           // discount
    std::uint32_t baseline_samples = 0;  // b; 0 disables the baseline
    bool shaping_only = false;    // ablation: drop the inner-product term
};

/// Hop counts toward one target vertex. Directed graphs are traversed over
/// reversed edges so dist[v] is the length of a path v -> target.
struct ShortestPathTable {
    static constexpr std::uint32_t kUnreachable =
        std::numeric_limits<std::uint32_t>::max();

    std::vector<std::uint32_t> dist;
    NodeId target = 0;

    bool reachable(NodeId v) const { return dist[v] != kUnreachable; }
};

ShortestPathTable bfs_distances(const ProximityGraph& graph, NodeId target);

/// One transition's reward: the inner-product increment, plus the shaping
/// term when a ground-truth table is supplied and both endpoints can reach
/// the target.
double step_reward(const Dataset& dataset, std::span<const double> q, NodeId s,
                   NodeId s_next, const ShortestPathTable* gt_table,
                   bool terminal, const RewardConfig& cfg);

/// Discounted sum of the shaping terms F_t = gamma*Phi(s_{t+1}) - Phi(s_t)
/// along a path, with Phi(s) = -alpha*L(s, target) and Phi forced to zero at
/// the path's terminal node. Telescopes to alpha*L(s_0, target).
double shaping_telescope_check(std::span<const NodeId> path_nodes,
                               const ShortestPathTable& table,
                               const RewardConfig& cfg);

struct TrajectoryStep {
    NodeId from = 0;
    NodeId to = 0;
    double reward = 0.0;
    double baseline = 0.0;
    double log_prob = 0.0;
};

struct Trajectory {
    std::vector<TrajectoryStep> steps;
    std::uint32_t query_index = 0;
};

/// Attach rewards and self-critic baselines to a collected path. The baseline
/// at each step is the mean reward of `b` extra candidates drawn with
/// replacement from the recorded policy distribution (nonterminal reward
/// form).
Trajectory build_trajectory(const RoutingPath& path, const Dataset& dataset,
                            std::span<const double> q,
                            const ShortestPathTable* gt_table,
                            const RewardConfig& cfg, std::mt19937_64& rng);

/// G_t = sum_{i>=t} gamma^{i-t} (r_i - b_i), by reverse accumulation.
std::vector<double> returns_with_baseline(const Trajectory& trajectory,
                                          const RewardConfig& cfg);

/// Gradients for every trainable tensor of an agent.
struct AgentGrads {
    struct Block {
        Eigen::MatrixXd conv_weight;
        Eigen::MatrixXd fc_weight;
        Eigen::VectorXd fc_bias;
        Eigen::VectorXd ln_gain;
        Eigen::VectorXd ln_bias;
    };
    std::array<Block, 3> blocks;
    Eigen::MatrixXd ffn1_weight;
    Eigen::VectorXd ffn1_bias;
    Eigen::MatrixXd ffn2_weight;
    Eigen::VectorXd ffn2_bias;
    Eigen::MatrixXd query_weight;  // 0x0 when the transform is identity

    static AgentGrads zeros_like(const AgentParams& params);
    void scale(double factor);
    bool all_finite() const;
};

/// Push d(objective)/d(embeddings) back through the network.
AgentGrads gcn_backward(const GcnParams& params, const NormAdjacency& adj,
                        const GcnForwardCache& cache,
                        const Eigen::MatrixXd& d_output);

/// Score-function gradient of sum_t G_t log pi(a_t|s_t) with respect to the
/// embedding rows the policy touched (and the query weight when linear).
void accumulate_policy_gradient(const RoutingPath& path,
                                std::span<const double> returns,
                                const EmbeddingTable& table,
                                std::span<const double> embedded_query,
                                std::span<const double> raw_query, double tau,
                                QueryTransformKind query_kind,
                                Eigen::MatrixXd& d_embeddings,
                                Eigen::MatrixXd* d_query_weight);

/// Adam moments for gradient-ascent steps over all agent tensors.
class AdamState {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    /// params += adaptive step toward +grads.
    void ascend(AgentParams& params, const AgentGrads& grads,
                double learning_rate);

private:
    std::vector<Eigen::MatrixXd> m_, v_;
    std::uint64_t step_ = 0;
};

/// One policy update from a batch of on-policy paths with per-step returns.
/// Recomputes the forward pass at the current parameters, so the paths must
/// have been collected with embeddings from these same parameters. Returns
/// false (and applies nothing) on a non-finite gradient.
bool reinforce_update(AgentParams& params, AdamState& adam,
                      const Dataset& dataset, const ProximityGraph& graph,
                      const QuerySet& queries,
                      const std::vector<RoutingPath>& paths,
                      const std::vector<std::vector<double>>& step_returns,
                      double learning_rate);

struct TrainConfig {
    double learning_rate = 1e-3;
    double decay_base = 0.98;       // per decay_interval batches
    double decay_interval = 1000.0;
    std::uint32_t batch_size = 30;
    std::uint32_t total_batches = 60000;
    double gt_fraction = 1.0;  // fraction of training queries given a target
    std::uint64_t collection_ipc = 256;
    std::uint64_t seed = 0;
    std::uint32_t eval_interval = 200;
    std::uint32_t max_val_queries = 200;
    // Initial agent shape.
    double temperature = 0.15;
    std::size_t embed_dim = 0;  // 0 means d' = d
    QueryTransformKind query_kind = QueryTransformKind::identity;
};

struct TrainResult {
    AgentParams params;
    std::vector<std::string> log_lines;  // one record per validation interval
    double best_validation_recall = 0.0;
    std::uint32_t best_batch = 0;
};

/// Full REINFORCE loop: per batch, refresh vertex embeddings, roll out the
/// policy on sampled training queries under the collection budget, shape
/// rewards with whatever ground truth covers the query, and take one Adam
/// step. Checkpoints the best validation recall.
TrainResult train(const Dataset& dataset, const ProximityGraph& graph,
                  const QuerySet& train_queries, const QuerySet& val_queries,
                  const GroundTruthTable& gt, const TrainConfig& cfg,
                  const RewardConfig& reward_cfg);

}  // namespace mipsroute
