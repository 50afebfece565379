#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mipsroute/proxgraph.hpp"
#include "mipsroute/search.hpp"
#include "mipsroute/training.hpp"
#include "mipsroute/vecstore.hpp"

namespace mipsroute {

struct RecallReport {
    std::size_t m = 0;
    std::size_t n = 0;
    double value = 0.0;
    std::uint64_t ipc = 0;
    std::size_t num_queries = 0;
    std::size_t skipped = 0;  // returned queries with no truth entry
};

/// Micro-averaged Recall M@N: sum_q |R(q) n T(q)| / sum_q |T(q)| over the
/// queries present in both tables.
RecallReport recall(const std::map<NodeId, std::vector<NodeId>>& returned,
                    const GroundTruthTable& truth, std::size_t m,
                    std::size_t n);

enum class GroundTruthMode { exact, approximate };

/// Exact mode scans the whole dataset; approximate mode runs a raw-scorer
/// beam search on the supplied graph under the given budget. Covered queries
/// are a seeded sample of round(fraction * |queries|).
GroundTruthTable make_ground_truth(const Dataset& dataset,
                                   const QuerySet& queries, std::size_t k,
                                   GroundTruthMode mode,
                                   const ProximityGraph* graph,
                                   std::uint64_t budget, double fraction,
                                   std::uint64_t seed);

// Line-oriented key=value report files. Doubles are printed with enough
// digits to round-trip exactly.
using Report = std::vector<std::pair<std::string, std::string>>;

std::string format_double(double value);
double parse_double(const std::string& text);
void write_report(const Report& report, const std::string& path);
Report parse_report(const std::string& path);

/// Worker count for query-parallel evaluation; reads MIPSROUTE_THREADS,
/// defaults to 1. Results are slot-ordered, so they do not depend on it.
std::size_t eval_thread_count();

std::map<std::string, std::string> load_experiment_config(
    const std::string& path);

struct ExperimentResult {
    Report report;
    std::vector<std::string> files;  // everything written, report first
};

/// One full pipeline: load, normalize, split, build graph, optionally train,
/// then evaluate recall on the test split at every budget. Deterministic
/// given the config; timing, when requested, goes to a separate file.
ExperimentResult run_experiment(std::map<std::string, std::string> config,
                                const std::string& out_dir);

/// Repeat run_experiment over seeds (and optionally over values of one swept
/// key), then write a summary of seed-averaged recalls.
ExperimentResult run_sweep(const std::map<std::string, std::string>& config,
                           const std::string& out_dir);

}  // namespace mipsroute
