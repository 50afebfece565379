#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mipsroute {

using NodeId = std::uint32_t;

/// Dense row-major matrix of double-precision vectors, all of one dimension.
class VectorSet {
public:
    VectorSet() = default;
    VectorSet(std::size_t dim, std::size_t count)
        : dim_(dim), values_(dim * count, 0.0) {}
    VectorSet(std::size_t dim, std::vector<double> values);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return dim_ == 0 ? 0 : values_.size() / dim_; }
    bool empty() const { return values_.empty(); }

    std::span<const double> row(std::size_t i) const {
        return {values_.data() + i * dim_, dim_};
    }
    std::span<double> row(std::size_t i) {
        return {values_.data() + i * dim_, dim_};
    }

    void push_row(std::span<const double> v);

    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

private:
    std::size_t dim_ = 0;
    std::vector<double> values_;
};

/// Item database. norm_scale records the divisor applied by normalize_items
/// (1.0 when the data is untouched).
struct Dataset {
    VectorSet items;
    double norm_scale = 1.0;

    std::size_t size() const { return items.size(); }
    std::size_t dim() const { return items.dim(); }
    std::span<const double> row(std::size_t i) const { return items.row(i); }
};

enum class QuerySplit { all, train, validation, test };

struct QuerySet {
    VectorSet queries;
    QuerySplit split = QuerySplit::all;

    std::size_t size() const { return queries.size(); }
    std::size_t dim() const { return queries.dim(); }
    std::span<const double> row(std::size_t i) const { return queries.row(i); }
};

enum class GroundTruthKind { exact, approximate };

/// Per-query target item ids. May cover only a fraction of the query set.
struct GroundTruthTable {
    std::map<NodeId, std::vector<NodeId>> entries;  // query index -> top-k item ids
    GroundTruthKind kind = GroundTruthKind::exact;
    double coverage = 0.0;

    const std::vector<NodeId>* find(NodeId query_index) const {
        auto it = entries.find(query_index);
        return it == entries.end() ? nullptr : &it->second;
    }
};

/// Exact dot product. Throws on length mismatch.
double inner_product(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> v);

/// Indices of the k items with the largest inner product with q, descending.
/// Equal scores break toward the smaller index. Throws if k > n.
std::vector<NodeId> brute_force_topk(const Dataset& dataset,
                                     std::span<const double> q, std::size_t k);

enum class VectorFileFormat { raw_f32, text };

Dataset load_dataset(const std::string& path, VectorFileFormat format);
void save_dataset(const Dataset& dataset, const std::string& path);

QuerySet load_queries(const std::string& path, VectorFileFormat format);

struct NormalizeStats {
    double mean_norm = 1.0;
    std::size_t zero_norm_items = 0;
};

/// Divide every item by the mean L2 norm of all items; record it in
/// norm_scale. Zero-norm items are kept and counted.
NormalizeStats normalize_items(Dataset& dataset);

/// Scale each query to unit L2 norm. Throws on a zero-norm query.
void normalize_queries(QuerySet& queries);

/// Item mean-norm scaling plus per-query unit scaling. Leaves the argmax item
/// of every query unchanged.
NormalizeStats normalize(Dataset& dataset, QuerySet& queries);

/// Deterministic partition of a query set. Ratios must sum to 1 within 1e-9.
std::array<QuerySet, 3> split_queries(const QuerySet& all,
                                      std::array<double, 3> ratios,
                                      std::uint64_t seed);

void save_ground_truth(const GroundTruthTable& table, const std::string& path);
GroundTruthTable load_ground_truth(const std::string& path,
                                   std::size_t num_queries);

}  // namespace mipsroute
