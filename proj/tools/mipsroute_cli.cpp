// Command-line front end: ingest vectors, build proximity graphs, generate
// ground truths, train the routing agent, search, and run experiment sweeps.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "mipsroute/agent.hpp"
#include "mipsroute/eval.hpp"
#include "mipsroute/proxgraph.hpp"
#include "mipsroute/search.hpp"
#include "mipsroute/training.hpp"
#include "mipsroute/vecstore.hpp"

namespace {

using namespace mipsroute;

VectorFileFormat parse_format(const std::string& name) {
    if (name == "raw") return VectorFileFormat::raw_f32;
    if (name == "text") return VectorFileFormat::text;
    throw CLI::ValidationError("format must be raw or text");
}

QuerySet select_split(const QuerySet& all, const std::string& split,
                      std::uint64_t split_seed) {
    if (split == "all") return all;
    auto parts = split_queries(all, {0.8, 0.1, 0.1}, split_seed);
    if (split == "train") return std::move(parts[0]);
    if (split == "val") return std::move(parts[1]);
    if (split == "test") return std::move(parts[2]);
    throw CLI::ValidationError("split must be all, train, val or test");
}

struct CommonDataArgs {
    std::string data;
    std::string data_format = "raw";
    std::string queries;
    std::string queries_format = "raw";
    bool normalize = false;
    std::string split = "all";
    std::uint64_t split_seed = 0;
};

void add_data_options(CLI::App* cmd, CommonDataArgs& args, bool with_queries) {
    cmd->add_option("--data", args.data, "item vector file")->required();
    cmd->add_option("--data-format", args.data_format, "raw|text");
    if (with_queries) {
        cmd->add_option("--queries", args.queries, "query vector file")
            ->required();
        cmd->add_option("--queries-format", args.queries_format, "raw|text");
        cmd->add_option("--split", args.split,
                        "query subset: all|train|val|test");
        cmd->add_option("--split-seed", args.split_seed,
                        "seed for the 0.8/0.1/0.1 partition");
    }
    cmd->add_flag("--normalize", args.normalize,
                  "divide items by their mean L2 norm, queries to unit norm");
}

Dataset load_data(const CommonDataArgs& args) {
    return load_dataset(args.data, parse_format(args.data_format));
}

QuerySet load_query_split(const CommonDataArgs& args) {
    QuerySet all = load_queries(args.queries, parse_format(args.queries_format));
    return select_split(all, args.split, args.split_seed);
}

int cmd_ingest(const std::string& in, const std::string& format,
               const std::string& out, bool do_normalize) {
    Dataset ds = load_dataset(in, parse_format(format));
    if (do_normalize) normalize_items(ds);
    save_dataset(ds, out);
    std::cout << "wrote " << out << " n=" << ds.size() << " d=" << ds.dim()
              << "\n";
    return 0;
}

int cmd_build(const CommonDataArgs& data_args, const std::string& algo,
              const std::string& sim, std::uint32_t m, std::uint32_t n,
              std::uint64_t seed, const std::string& out) {
    Dataset ds = load_data(data_args);
    if (data_args.normalize) normalize_items(ds);
    GraphConfig config;
    config.max_degree = m;
    config.candidate_size = n == 0 ? 2 * m : n;
    config.similarity = similarity_from_name(sim);
    config.seed = seed;

    ProximityGraph graph;
    if (algo == "ipnsw")
        graph = build_ipnsw(ds, config);
    else if (algo == "ipdg")
        graph = build_ipdg(ds, config);
    else if (algo == "mobius")
        graph = build_mobius(ds, config);
    else
        throw CLI::ValidationError("algo must be ipnsw, ipdg or mobius");
    save_graph(graph, out);
    std::cout << "wrote " << out << " nodes=" << graph.n
              << " max_out_degree=" << graph.max_out_degree()
              << " entry=" << graph.entry_vertex << "\n";
    return 0;
}

int cmd_gt(const CommonDataArgs& data_args, std::size_t k,
           const std::string& mode, const std::string& graph_path,
           std::uint64_t ipc, double fraction, std::uint64_t seed,
           const std::string& out) {
    Dataset ds = load_data(data_args);
    QuerySet qs = load_query_split(data_args);
    if (data_args.normalize) normalize(ds, qs);

    GroundTruthTable table;
    if (mode == "exact") {
        table = make_ground_truth(ds, qs, k, GroundTruthMode::exact, nullptr, 0,
                                  fraction, seed);
    } else if (mode == "approx") {
        if (graph_path.empty())
            throw CLI::ValidationError("--mode approx requires --graph");
        ProximityGraph graph = load_graph(graph_path);
        table = make_ground_truth(ds, qs, k, GroundTruthMode::approximate,
                                  &graph, ipc, fraction, seed);
    } else {
        throw CLI::ValidationError("mode must be exact or approx");
    }
    save_ground_truth(table, out);
    std::cout << "wrote " << out << " entries=" << table.entries.size()
              << " coverage=" << format_double(table.coverage) << "\n";
    return 0;
}

int cmd_train(const CommonDataArgs& data_args, const std::string& graph_path,
              const std::string& gt_path, const TrainConfig& cfg_in,
              const RewardConfig& reward_cfg, const std::string& out,
              std::string log_path) {
    Dataset ds = load_data(data_args);
    QuerySet all = load_queries(data_args.queries,
                                parse_format(data_args.queries_format));
    if (data_args.normalize) normalize(ds, all);
    auto parts = split_queries(all, {0.8, 0.1, 0.1}, data_args.split_seed);

    ProximityGraph graph = load_graph(graph_path);
    GroundTruthTable gt;
    if (!gt_path.empty()) gt = load_ground_truth(gt_path, parts[0].size());

    TrainConfig cfg = cfg_in;
    if (cfg.embed_dim != 0 && cfg.embed_dim != ds.dim())
        cfg.query_kind = QueryTransformKind::linear;  // identity needs d' == d
    TrainResult result = train(ds, graph, parts[0], parts[1], gt, cfg,
                               reward_cfg);
    save_agent(result.params, out);
    if (log_path.empty()) log_path = out + ".log";
    std::ofstream log(log_path, std::ios::binary);
    for (const auto& line : result.log_lines) log << line << '\n';
    std::cout << "wrote " << out
              << " best_val_recall=" << format_double(result.best_validation_recall)
              << " best_batch=" << result.best_batch << "\n";
    return 0;
}

int cmd_search(const CommonDataArgs& data_args, const std::string& graph_path,
               std::size_t k, std::uint64_t ipc, const std::string& scorer_kind,
               const std::string& agent_path, const std::string& table_cache,
               bool rerank_raw, const std::string& gt_path,
               const std::string& out) {
    Dataset ds = load_data(data_args);
    QuerySet qs = load_query_split(data_args);
    if (data_args.normalize) normalize(ds, qs);
    ProximityGraph graph = load_graph(graph_path);

    AgentParams agent;
    EmbeddingTable table;
    std::uint64_t effective_ipc = ipc;
    if (scorer_kind == "agent") {
        if (agent_path.empty())
            throw CLI::ValidationError("--scorer agent requires --agent");
        agent = load_agent(agent_path);
        if (!table_cache.empty() && std::filesystem::exists(table_cache)) {
            table = load_embedding_table(table_cache);
            if (table.graph_checksum != graph.checksum())
                throw std::runtime_error(
                    "embedding table cache is stale for this graph");
        } else {
            table = precompute_embeddings(ds, graph, agent);
            if (!table_cache.empty()) save_embedding_table(table, table_cache);
        }
        effective_ipc =
            adjusted_budget(ipc, ds.dim(), table.dim, agent.query.kind);
    } else if (scorer_kind != "raw") {
        throw CLI::ValidationError("scorer must be raw or agent");
    }

    std::ofstream results(out, std::ios::binary);
    if (!results) throw std::runtime_error("cannot write " + out);
    std::map<NodeId, std::vector<NodeId>> returned;
    for (std::size_t i = 0; i < qs.size(); ++i) {
        const auto q = qs.row(i);
        Scorer scorer = scorer_kind == "agent"
                            ? make_agent_scorer(table, graph, agent, q)
                            : make_raw_scorer(ds, q);
        IpcBudget budget(effective_ipc);
        auto r = beam_search(scorer, graph, graph.entry_vertex, k, budget);
        if (rerank_raw) {
            // Order the visited set by raw inner product instead of the
            // search score; this is a post-processing convenience and is not
            // charged to the budget.
            std::vector<std::pair<double, NodeId>> rescored;
            rescored.reserve(r.visited.size());
            for (NodeId v : r.visited)
                rescored.emplace_back(inner_product(q, ds.row(v)), v);
            std::sort(rescored.begin(), rescored.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
            r.topk.clear();
            for (std::size_t j = 0; j < rescored.size() && j < k; ++j)
                r.topk.push_back(rescored[j].second);
        }
        results << 'q' << i;
        for (NodeId id : r.topk) results << ' ' << id;
        results << '\n';
        returned[static_cast<NodeId>(i)] = r.topk;
    }

    if (!gt_path.empty()) {
        GroundTruthTable truth = load_ground_truth(gt_path, qs.size());
        std::size_t m = truth.entries.empty() ? k
                                              : truth.entries.begin()->second.size();
        auto rep = recall(returned, truth, m, k);
        results << "recall " << format_double(rep.value) << '\n';
        std::cout << "recall=" << format_double(rep.value)
                  << " queries=" << rep.num_queries << "\n";
    }
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& out_dir,
             const std::string& seed_override) {
    auto config = load_experiment_config(config_path);
    if (!seed_override.empty()) config["seed"] = seed_override;
    std::filesystem::create_directories(out_dir);
    auto result = run_experiment(config, out_dir);
    for (const auto& f : result.files) std::cout << "wrote " << f << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              const std::string& seed_override) {
    auto config = load_experiment_config(config_path);
    if (!seed_override.empty()) config["seeds"] = seed_override;
    std::filesystem::create_directories(out_dir);
    auto result = run_sweep(config, out_dir);
    for (const auto& f : result.files) std::cout << "wrote " << f << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Proximity-graph maximum inner product search with a "
                 "learnable routing agent"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "convert vectors to the binary format");
    std::string ingest_in, ingest_format = "text", ingest_out;
    bool ingest_normalize = false;
    ingest->add_option("--in", ingest_in)->required();
    ingest->add_option("--format", ingest_format, "raw|text");
    ingest->add_option("--out", ingest_out)->required();
    ingest->add_flag("--normalize", ingest_normalize);

    // build
    auto* build = app.add_subcommand("build", "construct a proximity graph");
    CommonDataArgs build_data;
    add_data_options(build, build_data, false);
    std::string build_algo = "ipnsw", build_sim = "ip", build_out;
    std::uint32_t build_m = 16, build_n = 0;
    std::uint64_t build_seed = 0;
    build->add_option("--algo", build_algo, "ipnsw|ipdg|mobius");
    build->add_option("--sim", build_sim, "ip|l2|cos");
    build->add_option("--M", build_m, "maximum out degree");
    build->add_option("--N", build_n, "construction candidate size (default 2M)");
    build->add_option("--seed", build_seed);
    build->add_option("--out", build_out)->required();

    // gt
    auto* gt = app.add_subcommand("gt", "generate ground truths");
    CommonDataArgs gt_data;
    add_data_options(gt, gt_data, true);
    std::size_t gt_k = 1;
    std::string gt_mode = "exact", gt_graph, gt_out;
    std::uint64_t gt_ipc = 256, gt_seed = 0;
    double gt_fraction = 1.0;
    gt->add_option("--k", gt_k);
    gt->add_option("--mode", gt_mode, "exact|approx");
    gt->add_option("--graph", gt_graph, "graph for approx mode");
    gt->add_option("--ipc", gt_ipc, "budget for approx mode");
    gt->add_option("--fraction", gt_fraction, "fraction of queries to cover");
    gt->add_option("--seed", gt_seed);
    gt->add_option("--out", gt_out)->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train the routing agent");
    CommonDataArgs train_data;
    add_data_options(train_cmd, train_data, true);
    std::string train_graph, train_gt, train_out, train_log;
    TrainConfig tc;
    RewardConfig rc;
    rc.alpha = 0.7;
    rc.baseline_samples = 4;
    train_cmd->add_option("--graph", train_graph)->required();
    train_cmd->add_option("--gt", train_gt, "ground-truth file (optional)");
    train_cmd->add_option("--gt-fraction", tc.gt_fraction);
    train_cmd->add_option("--alpha", rc.alpha);
    train_cmd->add_option("--gamma", rc.gamma);
    train_cmd->add_option("--tau", tc.temperature);
    train_cmd->add_option("--b", rc.baseline_samples, "baseline sample count");
    train_cmd->add_flag("--shaping-only", rc.shaping_only);
    train_cmd->add_option("--ipc", tc.collection_ipc, "collection budget");
    train_cmd->add_option("--batches", tc.total_batches);
    train_cmd->add_option("--batch-size", tc.batch_size);
    train_cmd->add_option("--lr", tc.learning_rate);
    train_cmd->add_option("--eval-interval", tc.eval_interval);
    train_cmd->add_option("--embed-dim", tc.embed_dim, "d' (0 keeps d)");
    train_cmd->add_option("--seed", tc.seed);
    train_cmd->add_option("--out", train_out)->required();
    train_cmd->add_option("--log", train_log, "training log (default <out>.log)");

    // search
    auto* search_cmd = app.add_subcommand("search", "budgeted top-k search");
    CommonDataArgs search_data;
    add_data_options(search_cmd, search_data, true);
    std::string search_graph, search_scorer = "raw", search_agent,
                search_table, search_gt, search_out;
    std::size_t search_k = 10;
    std::uint64_t search_ipc = 256;
    bool search_rerank = false;
    search_cmd->add_option("--graph", search_graph)->required();
    search_cmd->add_option("--k", search_k);
    search_cmd->add_option("--ipc", search_ipc);
    search_cmd->add_option("--scorer", search_scorer, "raw|agent");
    search_cmd->add_option("--agent", search_agent, "agent checkpoint");
    search_cmd->add_option("--table-cache", search_table,
                           "embedding table cache file");
    search_cmd->add_flag("--rerank-raw", search_rerank,
                         "rank visited vertices by raw inner product");
    search_cmd->add_option("--gt", search_gt, "report recall against this table");
    search_cmd->add_option("--out", search_out)->required();

    // eval / sweep
    auto* eval_cmd = app.add_subcommand("eval", "run one experiment config");
    std::string eval_config, eval_out = ".", eval_seed;
    eval_cmd->add_option("--config", eval_config)->required();
    eval_cmd->add_option("--out", eval_out, "output directory");
    eval_cmd->add_option("--seed", eval_seed, "override the config's seed");

    auto* sweep_cmd = app.add_subcommand("sweep", "run a seed/value sweep");
    std::string sweep_config, sweep_out = ".", sweep_seeds;
    sweep_cmd->add_option("--config", sweep_config)->required();
    sweep_cmd->add_option("--out", sweep_out, "output directory");
    sweep_cmd->add_option("--seed", sweep_seeds,
                          "override the config's seed list");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest)
            return cmd_ingest(ingest_in, ingest_format, ingest_out,
                              ingest_normalize);
        if (*build)
            return cmd_build(build_data, build_algo, build_sim, build_m,
                             build_n, build_seed, build_out);
        if (*gt)
            return cmd_gt(gt_data, gt_k, gt_mode, gt_graph, gt_ipc, gt_fraction,
                          gt_seed, gt_out);
        if (*train_cmd)
            return cmd_train(train_data, train_graph, train_gt, tc, rc,
                             train_out, train_log);
        if (*search_cmd)
            return cmd_search(search_data, search_graph, search_k, search_ipc,
                              search_scorer, search_agent, search_table,
                              search_rerank, search_gt, search_out);
        if (*eval_cmd) return cmd_eval(eval_config, eval_out, eval_seed);
        if (*sweep_cmd) return cmd_sweep(sweep_config, sweep_out, sweep_seeds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
