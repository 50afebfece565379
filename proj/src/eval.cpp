#include "mipsroute/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace mipsroute {

RecallReport recall(const std::map<NodeId, std::vector<NodeId>>& returned,
                    const GroundTruthTable& truth, std::size_t m,
                    std::size_t n) {
    RecallReport report;
    report.m = m;
    report.n = n;
    std::size_t hits = 0;
    std::size_t total = 0;
    for (const auto& [q, r_list] : returned) {
        const auto* t_list = truth.find(q);
        if (t_list == nullptr) {
            ++report.skipped;
            continue;
        }
        if (r_list.size() > n)
            throw std::invalid_argument("recall: |R(q)| exceeds N");
        std::set<NodeId> t_set(t_list->begin(), t_list->end());
        for (NodeId id : r_list) hits += t_set.count(id);
        total += t_set.size();
        ++report.num_queries;
    }
    report.value = total == 0 ? 0.0
                              : static_cast<double>(hits) /
                                    static_cast<double>(total);
    return report;
}

GroundTruthTable make_ground_truth(const Dataset& dataset,
                                   const QuerySet& queries, std::size_t k,
                                   GroundTruthMode mode,
                                   const ProximityGraph* graph,
                                   std::uint64_t budget, double fraction,
                                   std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw std::invalid_argument("make_ground_truth: fraction must be in (0,1]");
    if (mode == GroundTruthMode::approximate && graph == nullptr)
        throw std::invalid_argument("make_ground_truth: approximate mode needs a graph");

    const std::size_t q_count = queries.size();
    std::vector<NodeId> order(q_count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t covered = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(fraction * static_cast<double>(q_count))));
    covered = std::min(covered, q_count);
    order.resize(covered);
    std::sort(order.begin(), order.end());

    GroundTruthTable table;
    table.kind = mode == GroundTruthMode::exact ? GroundTruthKind::exact
                                                : GroundTruthKind::approximate;
    for (NodeId qi : order) {
        const auto q = queries.row(qi);
        if (mode == GroundTruthMode::exact) {
            table.entries[qi] = brute_force_topk(dataset, q, k);
        } else {
            Scorer scorer = make_raw_scorer(dataset, q);
            IpcBudget ipc(budget);
            auto result = beam_search(scorer, *graph, graph->entry_vertex, k, ipc);
            table.entries[qi] = result.topk;
        }
    }
    table.coverage = static_cast<double>(covered) / static_cast<double>(q_count);
    return table;
}

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

double parse_double(const std::string& text) {
    std::size_t pos = 0;
    double value = std::stod(text, &pos);
    if (pos != text.size())
        throw std::invalid_argument("parse_double: trailing characters in '" +
                                    text + "'");
    return value;
}

void write_report(const Report& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& [key, value] : report) out << key << '=' << value << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

Report parse_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Report report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("malformed report line: " + line);
        report.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return report;
}

std::size_t eval_thread_count() {
    const char* env = std::getenv("MIPSROUTE_THREADS");
    if (env == nullptr) return 1;
    const long v = std::strtol(env, nullptr, 10);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
}

namespace {

// Static chunking over [0, count); results must be written to per-index
// slots so the outcome does not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
    if (workers <= 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    workers = std::min(workers, count);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < count; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::string get(const std::map<std::string, std::string>& config,
                const std::string& key, const std::string& fallback) {
    auto it = config.find(key);
    return it == config.end() ? fallback : it->second;
}

std::string require(const std::map<std::string, std::string>& config,
                    const std::string& key) {
    auto it = config.find(key);
    if (it == config.end())
        throw std::invalid_argument("experiment config missing key: " + key);
    return it->second;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(text);
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

VectorFileFormat format_from_name(const std::string& name) {
    if (name == "raw") return VectorFileFormat::raw_f32;
    if (name == "text") return VectorFileFormat::text;
    throw std::invalid_argument("unknown vector format: " + name);
}

struct Pipeline {
    Dataset dataset;
    QuerySet train_q, val_q, test_q;
    ProximityGraph graph;
};

Pipeline build_pipeline(const std::map<std::string, std::string>& config,
                        std::uint64_t seed) {
    Pipeline p;
    p.dataset = load_dataset(require(config, "data"),
                             format_from_name(get(config, "data_format", "raw")));
    QuerySet all = load_queries(
        require(config, "queries"),
        format_from_name(get(config, "queries_format", "raw")));
    if (get(config, "normalize", "1") == "1") normalize(p.dataset, all);

    auto splits = split_queries(all, {0.8, 0.1, 0.1}, mix_seed(seed, 101));
    p.train_q = std::move(splits[0]);
    p.val_q = std::move(splits[1]);
    p.test_q = std::move(splits[2]);

    GraphConfig gc;
    gc.max_degree = static_cast<std::uint32_t>(std::stoul(get(config, "M", "16")));
    gc.candidate_size = static_cast<std::uint32_t>(
        std::stoul(get(config, "N", std::to_string(2 * gc.max_degree))));
    gc.similarity = similarity_from_name(get(config, "sim", "ip"));
    gc.seed = mix_seed(seed, 102);
    const std::string algo = get(config, "algo", "ipnsw");
    if (algo == "ipnsw")
        p.graph = build_ipnsw(p.dataset, gc);
    else if (algo == "ipdg")
        p.graph = build_ipdg(p.dataset, gc);
    else if (algo == "mobius")
        p.graph = build_mobius(p.dataset, gc);
    else
        throw std::invalid_argument("unknown graph algo: " + algo);
    return p;
}

struct EvalOutcome {
    std::vector<double> recalls;     // one per budget
    std::vector<double> mean_ipc;    // one per budget
    std::vector<double> qps;         // filled only in throughput mode
};

EvalOutcome evaluate_budgets(const Pipeline& p, const AgentParams* agent,
                             const EmbeddingTable* table,
                             const std::vector<std::uint64_t>& budgets,
                             std::size_t recall_m, std::size_t recall_n,
                             bool measure_throughput) {
    const QuerySet& queries = p.test_q;
    const std::size_t q_count = queries.size();
    const std::size_t workers = eval_thread_count();

    // Exact truth for the test split.
    GroundTruthTable truth;
    truth.kind = GroundTruthKind::exact;
    {
        std::vector<std::vector<NodeId>> rows(q_count);
        parallel_for(q_count, workers, [&](std::size_t i) {
            rows[i] = brute_force_topk(p.dataset, queries.row(i), recall_m);
        });
        for (std::size_t i = 0; i < q_count; ++i)
            truth.entries[static_cast<NodeId>(i)] = std::move(rows[i]);
        truth.coverage = 1.0;
    }

    const std::size_t d = p.dataset.dim();
    EvalOutcome outcome;
    for (std::uint64_t base_budget : budgets) {
        std::uint64_t effective = base_budget;
        if (agent != nullptr)
            effective = adjusted_budget(base_budget, d, table->dim,
                                        agent->query.kind);
        std::vector<std::vector<NodeId>> results(q_count);
        std::vector<std::uint64_t> used(q_count, 0);
        auto run_one = [&](std::size_t i) {
            Scorer scorer =
                agent != nullptr
                    ? make_agent_scorer(*table, p.graph, *agent, queries.row(i))
                    : make_raw_scorer(p.dataset, queries.row(i));
            IpcBudget budget(effective);
            auto r = beam_search(scorer, p.graph, p.graph.entry_vertex,
                                 recall_n, budget);
            results[i] = std::move(r.topk);
            used[i] = r.ipc_used;
        };
        parallel_for(q_count, workers, run_one);

        std::map<NodeId, std::vector<NodeId>> returned;
        for (std::size_t i = 0; i < q_count; ++i)
            returned[static_cast<NodeId>(i)] = results[i];
        auto rep = recall(returned, truth, recall_m, recall_n);
        outcome.recalls.push_back(rep.value);
        const double mean_ipc =
            q_count == 0 ? 0.0
                         : static_cast<double>(std::accumulate(
                               used.begin(), used.end(), std::uint64_t{0})) /
                               static_cast<double>(q_count);
        outcome.mean_ipc.push_back(mean_ipc);

        if (measure_throughput && q_count > 0) {
            const std::size_t warm = std::min<std::size_t>(q_count, 32);
            for (std::size_t i = 0; i < warm; ++i) run_one(i);
            const auto start = std::chrono::steady_clock::now();
            parallel_for(q_count, workers, run_one);
            const auto stop = std::chrono::steady_clock::now();
            const double secs =
                std::chrono::duration<double>(stop - start).count();
            outcome.qps.push_back(secs > 0.0 ? static_cast<double>(q_count) / secs
                                             : 0.0);
        }
    }
    return outcome;
}

// Keys echoed into reports; paths are omitted so identical pipelines in
// different directories produce identical bytes.
const char* const kEchoKeys[] = {
    "name",       "algo",         "sim",          "M",
    "N",          "normalize",    "scorer",       "seed",
    "budgets",    "recall_m",     "recall_n",     "batches",
    "batch_size", "collect_ipc",  "alpha",        "gamma",
    "tau",        "baseline_samples", "lr",       "gt_mode",
    "gt_k",       "gt_fraction",  "gt_ipc",       "shaping_only",
    "eval_interval"};

}  // namespace

namespace {

// Runs one pipeline stage, prefixing any failure with the stage name.
template <typename Fn>
auto stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(name) + ": " + e.what());
    }
}

}  // namespace

std::map<std::string, std::string> load_experiment_config(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::map<std::string, std::string> config;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("malformed config line: " + line);
        config[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return config;
}

ExperimentResult run_experiment(std::map<std::string, std::string> config,
                                const std::string& out_dir) {
    const std::string name = get(config, "name", "experiment");
    const std::uint64_t seed = std::stoull(get(config, "seed", "0"));
    const std::string scorer_kind = get(config, "scorer", "raw");
    const std::size_t recall_m = std::stoul(get(config, "recall_m", "10"));
    const std::size_t recall_n = std::stoul(get(config, "recall_n", "10"));
    const bool throughput = get(config, "throughput", "0") == "1";

    std::vector<std::uint64_t> budgets;
    for (const auto& b : split_list(get(config, "budgets", "128,256,512")))
        budgets.push_back(std::stoull(b));

    Pipeline p = stage("setup", [&] { return build_pipeline(config, seed); });

    AgentParams agent;
    EmbeddingTable table;
    std::vector<std::string> train_log;
    bool trained = false;
    if (scorer_kind == "agent") {
        const std::string gt_mode = get(config, "gt_mode", "exact");
        GroundTruthTable gt;
        if (gt_mode != "none") {
            const auto gt_k = std::stoul(get(config, "gt_k", "1"));
            const double gt_fraction =
                parse_double(get(config, "gt_fraction", "0.3"));
            const auto gt_ipc = std::stoull(get(config, "gt_ipc", "256"));
            gt = stage("ground-truth", [&] {
                return make_ground_truth(
                    p.dataset, p.train_q, gt_k,
                    gt_mode == "approx" ? GroundTruthMode::approximate
                                        : GroundTruthMode::exact,
                    &p.graph, gt_ipc, gt_fraction, mix_seed(seed, 103));
            });
        }
        TrainConfig tc;
        tc.learning_rate = parse_double(get(config, "lr", "0.001"));
        tc.batch_size = std::stoul(get(config, "batch_size", "30"));
        tc.total_batches = std::stoul(get(config, "batches", "2000"));
        tc.collection_ipc = std::stoull(get(config, "collect_ipc", "256"));
        tc.seed = mix_seed(seed, 104);
        tc.temperature = parse_double(get(config, "tau", "0.15"));
        tc.eval_interval = std::stoul(get(config, "eval_interval", "200"));
        RewardConfig rc;
        rc.alpha = parse_double(get(config, "alpha", "0.7"));
        rc.gamma = parse_double(get(config, "gamma", "0.9"));
        rc.baseline_samples = std::stoul(get(config, "baseline_samples", "4"));
        rc.shaping_only = get(config, "shaping_only", "0") == "1";
        auto trained_result = stage("train", [&] {
            return train(p.dataset, p.graph, p.train_q, p.val_q, gt, tc, rc);
        });
        agent = std::move(trained_result.params);
        train_log = std::move(trained_result.log_lines);
        table = precompute_embeddings(p.dataset, p.graph, agent);
        trained = true;
    } else if (scorer_kind != "raw") {
        throw std::invalid_argument("unknown scorer: " + scorer_kind);
    }

    auto outcome = stage("evaluate", [&] {
        return evaluate_budgets(p, trained ? &agent : nullptr,
                                trained ? &table : nullptr, budgets, recall_m,
                                recall_n, throughput);
    });

    Report report;
    for (const char* key : kEchoKeys)
        if (auto it = config.find(key); it != config.end())
            report.emplace_back(key, it->second);
    report.emplace_back("num_test_queries", std::to_string(p.test_q.size()));
    report.emplace_back("graph_nodes", std::to_string(p.graph.n));
    report.emplace_back("graph_max_out_degree",
                        std::to_string(p.graph.max_out_degree()));
    for (std::size_t i = 0; i < budgets.size(); ++i) {
        const std::string b = std::to_string(budgets[i]);
        report.emplace_back("recall@" + b, format_double(outcome.recalls[i]));
        report.emplace_back("ipc_mean@" + b,
                            format_double(outcome.mean_ipc[i]));
    }

    ExperimentResult result;
    result.report = report;
    const std::string report_path = out_dir + "/" + name + ".report";
    write_report(report, report_path);
    result.files.push_back(report_path);

    {
        const std::string summary_path = out_dir + "/" + name + ".summary";
        std::ofstream summary(summary_path, std::ios::binary);
        summary << name << ": " << get(config, "algo", "ipnsw") << " graph, "
                << scorer_kind << " scorer, " << p.test_q.size()
                << " test queries, Recall " << recall_m << "@" << recall_n
                << "\n";
        for (std::size_t i = 0; i < budgets.size(); ++i)
            summary << "  ipc " << budgets[i] << ": recall "
                    << format_double(outcome.recalls[i]) << " (mean ipc used "
                    << format_double(outcome.mean_ipc[i]) << ")\n";
        result.files.push_back(summary_path);
    }

    if (trained && !train_log.empty()) {
        const std::string log_path = out_dir + "/" + name + ".trainlog";
        std::ofstream log(log_path, std::ios::binary);
        for (const auto& line : train_log) log << line << '\n';
        result.files.push_back(log_path);
    }

    if (throughput) {
        Report tp;
        tp.emplace_back("workers", std::to_string(eval_thread_count()));
        for (std::size_t i = 0; i < budgets.size(); ++i)
            tp.emplace_back("qps@" + std::to_string(budgets[i]),
                            format_double(outcome.qps[i]));
        const std::string tp_path = out_dir + "/" + name + ".throughput";
        write_report(tp, tp_path);
        result.files.push_back(tp_path);
    }
    return result;
}

ExperimentResult run_sweep(const std::map<std::string, std::string>& config,
                           const std::string& out_dir) {
    const std::string name = get(config, "name", "experiment");
    const std::string sweep_key = get(config, "sweep_key", "");
    std::vector<std::string> sweep_values = split_list(get(config, "sweep_values", ""));
    if (sweep_key.empty()) sweep_values = {""};
    std::vector<std::string> seeds = split_list(get(config, "seeds", "0"));
    std::vector<std::string> budget_names =
        split_list(get(config, "budgets", "128,256,512"));

    ExperimentResult summary;
    Report& report = summary.report;
    report.emplace_back("name", name);
    if (!sweep_key.empty()) report.emplace_back("sweep_key", sweep_key);
    report.emplace_back("seeds", get(config, "seeds", "0"));

    for (const auto& value : sweep_values) {
        std::vector<double> sums(budget_names.size(), 0.0);
        for (const auto& seed : seeds) {
            auto sub = config;
            sub.erase("sweep_key");
            sub.erase("sweep_values");
            sub.erase("seeds");
            sub["seed"] = seed;
            std::string sub_name = name;
            if (!sweep_key.empty()) {
                sub[sweep_key] = value;
                sub_name += "_" + sweep_key + value;
            }
            sub_name += "_seed" + seed;
            sub["name"] = sub_name;
            auto res = run_experiment(sub, out_dir);
            summary.files.insert(summary.files.end(), res.files.begin(),
                                 res.files.end());
            for (std::size_t b = 0; b < budget_names.size(); ++b) {
                for (const auto& [key, val] : res.report)
                    if (key == "recall@" + budget_names[b])
                        sums[b] += parse_double(val);
            }
        }
        for (std::size_t b = 0; b < budget_names.size(); ++b) {
            std::string key = "mean_recall@" + budget_names[b];
            if (!sweep_key.empty())
                key += "[" + sweep_key + "=" + value + "]";
            report.emplace_back(
                key, format_double(sums[b] / static_cast<double>(seeds.size())));
        }
    }

    const std::string path = out_dir + "/" + name + ".sweep";
    write_report(report, path);
    summary.files.insert(summary.files.begin(), path);
    return summary;
}

}  // namespace mipsroute
