#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mipsroute/proxgraph.hpp"
#include "mipsroute/vecstore.hpp"

namespace mipsroute {

inline constexpr double kLayerNormEps = 1e-12;

double elu(double x);
double elu_grad_from_pre(double pre);

/// One graph-convolution block: conv weight, fully-connected weight+bias,
/// layer-norm gain+bias. Width stays at the input dimension so the residual
/// connection composes.
struct GcnBlockParams {
    Eigen::MatrixXd conv_weight;  // d x d
    Eigen::MatrixXd fc_weight;    // d x d
    Eigen::VectorXd fc_bias;      // d
    Eigen::VectorXd ln_gain;      // d
    Eigen::VectorXd ln_bias;      // d
};

/// Three blocks followed by a feed-forward head mapping d -> d'.
struct GcnParams {
    std::array<GcnBlockParams, 3> blocks;
    Eigen::MatrixXd ffn1_weight;  // d x d'
    Eigen::VectorXd ffn1_bias;    // d'
    Eigen::MatrixXd ffn2_weight;  // d' x d'
    Eigen::VectorXd ffn2_bias;    // d'

    std::size_t input_dim() const { return blocks[0].conv_weight.rows(); }
    std::size_t output_dim() const { return ffn2_weight.cols(); }
};

enum class QueryTransformKind { identity, linear };

struct QueryTransform {
    QueryTransformKind kind = QueryTransformKind::identity;
    Eigen::MatrixXd weight;  // d' x d, linear only
};

struct AgentParams {
    GcnParams gcn;
    QueryTransform query;
    double temperature = 1.0;

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    /// layer-norm gain 1 / bias 0.
    static AgentParams random_init(std::size_t d, std::size_t d_prime,
                                   double temperature, QueryTransformKind kind,
                                   std::uint64_t seed);

    /// Parameters under which the network reproduces its input exactly for
    /// row-standardized data: zeroed block FC paths and a shifted-identity
    /// head (ELU(x + shift) - shift = x whenever x >= -shift).
    static AgentParams passthrough(std::size_t d, double temperature,
                                   double shift = 16.0);
};

/// Precomputed vertex embeddings, keyed to the graph they came from.
struct EmbeddingTable {
    std::size_t dim = 0;
    std::vector<double> values;  // n x dim, row-major
    std::uint64_t graph_checksum = 0;

    std::size_t size() const { return dim == 0 ? 0 : values.size() / dim; }
    std::span<const double> row(std::size_t i) const {
        return {values.data() + i * dim, dim};
    }
};

/// D^{-1/2} (A v A^T + I) D^{-1/2} in CSR form. Directed graphs are
/// symmetrized before normalization.
struct NormAdjacency {
    std::size_t n = 0;
    std::vector<std::uint64_t> offsets;
    std::vector<NodeId> cols;
    std::vector<double> vals;

    static NormAdjacency from_graph(const ProximityGraph& graph);
    Eigen::MatrixXd multiply(const Eigen::MatrixXd& h) const;
};

/// ELU(D^{-1/2} (A+I) D^{-1/2} H W).
Eigen::MatrixXd graph_conv_layer(const Eigen::MatrixXd& h,
                                 const ProximityGraph& graph,
                                 const Eigen::MatrixXd& weight);

/// Intermediates kept by the forward pass so the policy gradient can be
/// pushed back through the network.
struct GcnForwardCache {
    Eigen::MatrixXd input;
    struct Block {
        Eigen::MatrixXd h_in;
        Eigen::MatrixXd agg;       // adjacency-normalized h_in
        Eigen::MatrixXd conv_pre;  // agg * conv_weight
        Eigen::MatrixXd conv_out;  // ELU of conv_pre
        Eigen::MatrixXd xhat;      // layer-norm rows before gain/bias
        Eigen::VectorXd inv_std;
    };
    std::array<Block, 3> blocks;
    Eigen::MatrixXd ffn_in;
    Eigen::MatrixXd ffn_pre;
    Eigen::MatrixXd ffn_mid;
    Eigen::MatrixXd output;
};

Eigen::MatrixXd gcn_forward_cached(const Eigen::MatrixXd& x,
                                   const NormAdjacency& adj,
                                   const GcnParams& params,
                                   GcnForwardCache* cache);

/// Full vertex re-embedding: H0 = item matrix, three blocks, feed-forward
/// head. The result carries the graph checksum it was computed against.
EmbeddingTable gcn_forward(const Dataset& dataset, const ProximityGraph& graph,
                           const GcnParams& params);

EmbeddingTable precompute_embeddings(const Dataset& dataset,
                                     const ProximityGraph& graph,
                                     const AgentParams& params);

/// Identity keeps q; linear maps through the d'xd weight.
std::vector<double> embed_query(std::span<const double> q,
                                const QueryTransform& transform);

/// Softmax with max-subtraction over scores/temperature.
std::vector<double> softmax_probs(std::span<const double> scores, double tau);

/// Expansion policy over a candidate set: softmax of embedded inner products.
std::vector<double> policy_probs(std::span<const NodeId> candidates,
                                 std::span<const double> embedded_query,
                                 const EmbeddingTable& table, double tau);

/// Categorical draw. Throws if probs do not sum to 1 within 1e-6.
std::size_t sample_action(std::span<const double> probs, std::mt19937_64& rng);

void save_agent(const AgentParams& params, const std::string& path);
AgentParams load_agent(const std::string& path);

void save_embedding_table(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embedding_table(const std::string& path);

}  // namespace mipsroute
