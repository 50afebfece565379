#include "mipsroute/agent.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mipsroute {

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

double elu_grad_from_pre(double pre) { return pre > 0.0 ? 1.0 : std::exp(pre); }

namespace {

constexpr char kAgentMagic[8] = {'M', 'I', 'P', 'S', 'A', 'G', 'T', '1'};
constexpr char kTableMagic[8] = {'M', 'I', 'P', 'S', 'E', 'M', 'B', '1'};

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

Eigen::MatrixXd uniform_matrix(std::size_t rows, std::size_t cols,
                               std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

void elu_inplace(Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = elu(m.data()[i]);
}

}  // namespace

AgentParams AgentParams::random_init(std::size_t d, std::size_t d_prime,
                                     double temperature,
                                     QueryTransformKind kind,
                                     std::uint64_t seed) {
    if (temperature <= 0.0)
        throw std::invalid_argument("AgentParams: temperature must be > 0");
    if (kind == QueryTransformKind::identity && d_prime != d)
        throw std::invalid_argument(
            "AgentParams: identity query transform requires d' == d");
    std::mt19937_64 rng(seed);
    AgentParams p;
    for (auto& block : p.gcn.blocks) {
        block.conv_weight = uniform_matrix(d, d, d, rng);
        block.fc_weight = uniform_matrix(d, d, d, rng);
        block.fc_bias = Eigen::VectorXd::Zero(d);
        block.ln_gain = Eigen::VectorXd::Ones(d);
        block.ln_bias = Eigen::VectorXd::Zero(d);
    }
    p.gcn.ffn1_weight = uniform_matrix(d, d_prime, d, rng);
    p.gcn.ffn1_bias = Eigen::VectorXd::Zero(d_prime);
    p.gcn.ffn2_weight = uniform_matrix(d_prime, d_prime, d_prime, rng);
    p.gcn.ffn2_bias = Eigen::VectorXd::Zero(d_prime);
    p.query.kind = kind;
    if (kind == QueryTransformKind::linear)
        p.query.weight = uniform_matrix(d_prime, d, d, rng);
    p.temperature = temperature;
    return p;
}

AgentParams AgentParams::passthrough(std::size_t d, double temperature,
                                     double shift) {
    AgentParams p;
    for (auto& block : p.gcn.blocks) {
        block.conv_weight = Eigen::MatrixXd::Identity(d, d);
        block.fc_weight = Eigen::MatrixXd::Zero(d, d);
        block.fc_bias = Eigen::VectorXd::Zero(d);
        block.ln_gain = Eigen::VectorXd::Ones(d);
        block.ln_bias = Eigen::VectorXd::Zero(d);
    }
    p.gcn.ffn1_weight = Eigen::MatrixXd::Identity(d, d);
    p.gcn.ffn1_bias = Eigen::VectorXd::Constant(d, shift);
    p.gcn.ffn2_weight = Eigen::MatrixXd::Identity(d, d);
    p.gcn.ffn2_bias = Eigen::VectorXd::Constant(d, -shift);
    p.query.kind = QueryTransformKind::identity;
    p.temperature = temperature;
    return p;
}

NormAdjacency NormAdjacency::from_graph(const ProximityGraph& graph) {
    const std::size_t n = graph.n;
    // Symmetrize and add self-loops.
    std::vector<std::vector<NodeId>> sym(n);
    for (std::size_t u = 0; u < n; ++u) {
        sym[u].push_back(static_cast<NodeId>(u));
        for (NodeId v : graph.out_edges[u]) {
            sym[u].push_back(v);
            sym[v].push_back(static_cast<NodeId>(u));
        }
    }
    for (auto& row : sym) {
        std::sort(row.begin(), row.end());
        row.erase(std::unique(row.begin(), row.end()), row.end());
    }

    NormAdjacency adj;
    adj.n = n;
    adj.offsets.resize(n + 1, 0);
    for (std::size_t u = 0; u < n; ++u)
        adj.offsets[u + 1] = adj.offsets[u] + sym[u].size();
    adj.cols.reserve(adj.offsets[n]);
    adj.vals.reserve(adj.offsets[n]);
    for (std::size_t u = 0; u < n; ++u) {
        const double du = static_cast<double>(sym[u].size());
        for (NodeId v : sym[u]) {
            const double dv = static_cast<double>(sym[v].size());
            adj.cols.push_back(v);
            adj.vals.push_back(1.0 / std::sqrt(du * dv));
        }
    }
    return adj;
}

Eigen::MatrixXd NormAdjacency::multiply(const Eigen::MatrixXd& h) const {
    if (static_cast<std::size_t>(h.rows()) != n)
        throw std::invalid_argument("NormAdjacency: row count mismatch");
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h.rows(), h.cols());
    for (std::size_t u = 0; u < n; ++u)
        for (std::uint64_t e = offsets[u]; e < offsets[u + 1]; ++e)
            out.row(u) += vals[e] * h.row(cols[e]);
    return out;
}

Eigen::MatrixXd graph_conv_layer(const Eigen::MatrixXd& h,
                                 const ProximityGraph& graph,
                                 const Eigen::MatrixXd& weight) {
    if (static_cast<std::size_t>(h.rows()) != graph.n)
        throw std::invalid_argument("graph_conv_layer: H row count != n");
    if (h.cols() != weight.rows())
        throw std::invalid_argument("graph_conv_layer: shape mismatch");
    auto adj = NormAdjacency::from_graph(graph);
    Eigen::MatrixXd out = adj.multiply(h) * weight;
    elu_inplace(out);
    return out;
}

Eigen::MatrixXd gcn_forward_cached(const Eigen::MatrixXd& x,
                                   const NormAdjacency& adj,
                                   const GcnParams& params,
                                   GcnForwardCache* cache) {
    if (static_cast<std::size_t>(x.cols()) != params.input_dim())
        throw std::invalid_argument("gcn_forward: input dim mismatch");
    if (cache) cache->input = x;

    Eigen::MatrixXd h = x;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        const auto& block = params.blocks[b];
        Eigen::MatrixXd agg = adj.multiply(h);
        Eigen::MatrixXd conv_pre = agg * block.conv_weight;
        Eigen::MatrixXd conv_out = conv_pre;
        elu_inplace(conv_out);
        Eigen::MatrixXd res = conv_out * block.fc_weight;
        res.rowwise() += block.fc_bias.transpose();
        res += h;  // residual add of the block input

        // Per-row layer norm, then gain/bias.
        Eigen::MatrixXd xhat(res.rows(), res.cols());
        Eigen::VectorXd inv_std(res.rows());
        const double dcols = static_cast<double>(res.cols());
        for (Eigen::Index i = 0; i < res.rows(); ++i) {
            const double mean = res.row(i).mean();
            const double var =
                (res.row(i).array() - mean).square().sum() / dcols;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            inv_std(i) = inv;
            xhat.row(i) = (res.row(i).array() - mean) * inv;
        }
        Eigen::MatrixXd out =
            (xhat.array().rowwise() * block.ln_gain.transpose().array())
                .matrix();
        out.rowwise() += block.ln_bias.transpose();

        if (cache) {
            auto& c = cache->blocks[b];
            c.h_in = std::move(h);
            c.agg = std::move(agg);
            c.conv_pre = std::move(conv_pre);
            c.conv_out = std::move(conv_out);
            c.xhat = std::move(xhat);
            c.inv_std = std::move(inv_std);
        }
        h = std::move(out);
    }

    Eigen::MatrixXd ffn_pre = h * params.ffn1_weight;
    ffn_pre.rowwise() += params.ffn1_bias.transpose();
    Eigen::MatrixXd ffn_mid = ffn_pre;
    elu_inplace(ffn_mid);
    Eigen::MatrixXd out = ffn_mid * params.ffn2_weight;
    out.rowwise() += params.ffn2_bias.transpose();

    if (cache) {
        cache->ffn_in = std::move(h);
        cache->ffn_pre = std::move(ffn_pre);
        cache->ffn_mid = std::move(ffn_mid);
        cache->output = out;
    }
    return out;
}

EmbeddingTable gcn_forward(const Dataset& dataset, const ProximityGraph& graph,
                           const GcnParams& params) {
    if (dataset.size() != graph.n)
        throw std::invalid_argument("gcn_forward: dataset/graph size mismatch");
    Eigen::MatrixXd x(dataset.size(), dataset.dim());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        auto row = dataset.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) x(i, j) = row[j];
    }
    auto adj = NormAdjacency::from_graph(graph);
    Eigen::MatrixXd e = gcn_forward_cached(x, adj, params, nullptr);

    EmbeddingTable table;
    table.dim = e.cols();
    table.values.resize(e.rows() * e.cols());
    for (Eigen::Index i = 0; i < e.rows(); ++i)
        for (Eigen::Index j = 0; j < e.cols(); ++j)
            table.values[i * e.cols() + j] = e(i, j);
    table.graph_checksum = graph.checksum();
    return table;
}

EmbeddingTable precompute_embeddings(const Dataset& dataset,
                                     const ProximityGraph& graph,
                                     const AgentParams& params) {
    return gcn_forward(dataset, graph, params.gcn);
}

std::vector<double> embed_query(std::span<const double> q,
                                const QueryTransform& transform) {
    if (transform.kind == QueryTransformKind::identity)
        return {q.begin(), q.end()};
    if (static_cast<std::size_t>(transform.weight.cols()) != q.size())
        throw std::invalid_argument("embed_query: dimension mismatch");
    std::vector<double> out(transform.weight.rows(), 0.0);
    for (Eigen::Index i = 0; i < transform.weight.rows(); ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < transform.weight.cols(); ++j)
            acc += transform.weight(i, j) * q[j];
        out[i] = acc;
    }
    return out;
}

std::vector<double> softmax_probs(std::span<const double> scores, double tau) {
    if (scores.empty())
        throw std::invalid_argument("softmax_probs: empty score set");
    if (tau <= 0.0) throw std::invalid_argument("softmax_probs: tau must be > 0");
    const double top = *std::max_element(scores.begin(), scores.end());
    std::vector<double> probs(scores.size());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        probs[i] = std::exp((scores[i] - top) / tau);
        total += probs[i];
    }
    for (double& p : probs) p /= total;
    return probs;
}

std::vector<double> policy_probs(std::span<const NodeId> candidates,
                                 std::span<const double> embedded_query,
                                 const EmbeddingTable& table, double tau) {
    if (candidates.empty())
        throw std::invalid_argument("policy_probs: empty candidate set");
    std::vector<double> scores(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        scores[i] = inner_product(table.row(candidates[i]), embedded_query);
    return softmax_probs(scores, tau);
}

std::size_t sample_action(std::span<const double> probs, std::mt19937_64& rng) {
    if (probs.empty()) throw std::invalid_argument("sample_action: empty probs");
    double total = 0.0;
    for (double p : probs) total += p;
    if (std::abs(total - 1.0) > 1e-6)
        throw std::invalid_argument("sample_action: probs do not sum to 1");
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    const double u = dist(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

namespace {

void write_tensor(std::ostream& out, const Eigen::MatrixXd& m) {
    write_pod<std::uint64_t>(out, m.rows());
    write_pod<std::uint64_t>(out, m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            write_pod<float>(out, static_cast<float>(m(i, j)));
}

void write_tensor(std::ostream& out, const Eigen::VectorXd& v) {
    write_pod<std::uint64_t>(out, 1);
    write_pod<std::uint64_t>(out, v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i)
        write_pod<float>(out, static_cast<float>(v(i)));
}

Eigen::MatrixXd read_matrix(std::istream& in, std::size_t rows,
                            std::size_t cols) {
    auto r = read_pod<std::uint64_t>(in, "tensor rows");
    auto c = read_pod<std::uint64_t>(in, "tensor cols");
    if (r != rows || c != cols)
        throw std::runtime_error("agent checkpoint: unexpected tensor shape");
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(i, j) = read_pod<float>(in, "tensor value");
    return m;
}

Eigen::VectorXd read_vector(std::istream& in, std::size_t len) {
    Eigen::MatrixXd m = read_matrix(in, 1, len);
    return m.row(0).transpose();
}

}  // namespace

void save_agent(const AgentParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const std::uint32_t d = static_cast<std::uint32_t>(params.gcn.input_dim());
    const std::uint32_t dp = static_cast<std::uint32_t>(params.gcn.output_dim());
    out.write(kAgentMagic, 8);
    write_pod<std::uint32_t>(out, d);
    write_pod<std::uint32_t>(out, dp);
    write_pod<double>(out, params.temperature);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.gcn.blocks.size()));
    write_pod<std::uint32_t>(out,
                             params.query.kind == QueryTransformKind::linear ? 1 : 0);
    for (const auto& block : params.gcn.blocks) {
        write_tensor(out, block.conv_weight);
        write_tensor(out, block.fc_weight);
        write_tensor(out, block.fc_bias);
        write_tensor(out, block.ln_gain);
        write_tensor(out, block.ln_bias);
    }
    write_tensor(out, params.gcn.ffn1_weight);
    write_tensor(out, params.gcn.ffn1_bias);
    write_tensor(out, params.gcn.ffn2_weight);
    write_tensor(out, params.gcn.ffn2_bias);
    if (params.query.kind == QueryTransformKind::linear)
        write_tensor(out, params.query.weight);
    if (!out) throw std::runtime_error("write failed: " + path);
}

AgentParams load_agent(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kAgentMagic, 8) != 0)
        throw std::runtime_error("bad magic in " + path);
    auto d = read_pod<std::uint32_t>(in, "d");
    auto dp = read_pod<std::uint32_t>(in, "d'");
    auto tau = read_pod<double>(in, "temperature");
    auto block_count = read_pod<std::uint32_t>(in, "block count");
    auto query_kind = read_pod<std::uint32_t>(in, "query kind");
    if (block_count != 3)
        throw std::runtime_error("agent checkpoint: expected 3 blocks");

    AgentParams p;
    p.temperature = tau;
    for (auto& block : p.gcn.blocks) {
        block.conv_weight = read_matrix(in, d, d);
        block.fc_weight = read_matrix(in, d, d);
        block.fc_bias = read_vector(in, d);
        block.ln_gain = read_vector(in, d);
        block.ln_bias = read_vector(in, d);
    }
    p.gcn.ffn1_weight = read_matrix(in, d, dp);
    p.gcn.ffn1_bias = read_vector(in, dp);
    p.gcn.ffn2_weight = read_matrix(in, dp, dp);
    p.gcn.ffn2_bias = read_vector(in, dp);
    p.query.kind = query_kind == 1 ? QueryTransformKind::linear
                                   : QueryTransformKind::identity;
    if (p.query.kind == QueryTransformKind::linear)
        p.query.weight = read_matrix(in, dp, d);
    return p;
}

void save_embedding_table(const EmbeddingTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kTableMagic, 8);
    write_pod<std::uint64_t>(out, table.size());
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim));
    write_pod<std::uint64_t>(out, table.graph_checksum);
    out.write(reinterpret_cast<const char*>(table.values.data()),
              static_cast<std::streamsize>(table.values.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

EmbeddingTable load_embedding_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kTableMagic, 8) != 0)
        throw std::runtime_error("bad magic in " + path);
    auto n = read_pod<std::uint64_t>(in, "table rows");
    auto dim = read_pod<std::uint32_t>(in, "table dim");
    EmbeddingTable table;
    table.dim = dim;
    table.graph_checksum = read_pod<std::uint64_t>(in, "graph checksum");
    table.values.resize(static_cast<std::size_t>(n) * dim);
    in.read(reinterpret_cast<char*>(table.values.data()),
            static_cast<std::streamsize>(table.values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated table data in " + path);
    return table;
}

}  // namespace mipsroute
