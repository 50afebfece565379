#include "mipsroute/vecstore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mipsroute {

namespace {

constexpr char kVectorMagic[8] = {'M', 'I', 'P', 'S', 'V', 'E', 'C', '1'};
constexpr char kGroundTruthMagic[8] = {'M', 'I', 'P', 'S', 'G', 'T', '0', '1'};

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

}  // namespace

VectorSet::VectorSet(std::size_t dim, std::vector<double> values)
    : dim_(dim), values_(std::move(values)) {
    if (dim_ == 0 || values_.size() % dim_ != 0)
        throw std::invalid_argument("VectorSet: values not a multiple of dim");
}

void VectorSet::push_row(std::span<const double> v) {
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_)
        throw std::invalid_argument("VectorSet: inconsistent dimension");
    values_.insert(values_.end(), v.begin(), v.end());
}

double inner_product(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("inner_product: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double l2_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

std::vector<NodeId> brute_force_topk(const Dataset& dataset,
                                     std::span<const double> q, std::size_t k) {
    const std::size_t n = dataset.size();
    if (k > n) throw std::invalid_argument("brute_force_topk: k > n");
    std::vector<std::pair<double, NodeId>> scored(n);
    for (std::size_t i = 0; i < n; ++i)
        scored[i] = {inner_product(q, dataset.row(i)), static_cast<NodeId>(i)};
    // Descending score, smaller index on ties.
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
    std::vector<NodeId> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = scored[i].second;
    return out;
}

namespace {

VectorSet load_vectors_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    VectorSet set;
    std::string line;
    std::vector<double> row;
    while (std::getline(in, line)) {
        row.clear();
        std::istringstream ls(line);
        double x;
        while (ls >> x) row.push_back(x);
        if (!ls.eof()) throw std::runtime_error("malformed value in " + path);
        if (row.empty()) continue;  // blank line
        if (!set.empty() && row.size() != set.dim())
            throw std::runtime_error("inconsistent dimension in " + path);
        for (double v : row)
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite value in " + path);
        set.push_row(row);
    }
    if (set.empty()) throw std::runtime_error("empty dataset: " + path);
    return set;
}

VectorSet load_vectors_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kVectorMagic, 8) != 0)
        throw std::runtime_error("bad magic in " + path);
    auto n = read_pod<std::uint64_t>(in, "vector count");
    auto d = read_pod<std::uint32_t>(in, "vector dim");
    if (n == 0) throw std::runtime_error("empty dataset: " + path);
    if (d == 0) throw std::runtime_error("zero dimension in " + path);
    std::vector<float> raw(static_cast<std::size_t>(n) * d);
    in.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated vector data in " + path);
    std::vector<double> values(raw.begin(), raw.end());
    for (double v : values)
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite value in " + path);
    return VectorSet(d, std::move(values));
}

}  // namespace

Dataset load_dataset(const std::string& path, VectorFileFormat format) {
    Dataset ds;
    ds.items = format == VectorFileFormat::text ? load_vectors_text(path)
                                                : load_vectors_raw(path);
    ds.norm_scale = 1.0;
    return ds;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kVectorMagic, 8);
    write_pod<std::uint64_t>(out, dataset.size());
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.dim()));
    std::vector<float> raw(dataset.items.values().begin(),
                           dataset.items.values().end());
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

QuerySet load_queries(const std::string& path, VectorFileFormat format) {
    QuerySet qs;
    qs.queries = format == VectorFileFormat::text ? load_vectors_text(path)
                                                  : load_vectors_raw(path);
    return qs;
}

NormalizeStats normalize_items(Dataset& dataset) {
    const std::size_t n = dataset.size();
    if (n == 0) throw std::invalid_argument("normalize_items: empty dataset");
    NormalizeStats stats;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double norm = l2_norm(dataset.row(i));
        if (norm == 0.0) ++stats.zero_norm_items;
        sum += norm;
    }
    const double mean = sum / static_cast<double>(n);
    if (mean <= 0.0)
        throw std::runtime_error("normalize_items: all items have zero norm");
    for (double& v : dataset.items.values()) v /= mean;
    dataset.norm_scale = mean;
    stats.mean_norm = mean;
    return stats;
}

void normalize_queries(QuerySet& queries) {
    for (std::size_t i = 0; i < queries.size(); ++i) {
        auto q = queries.queries.row(i);
        double norm = l2_norm(q);
        if (norm == 0.0)
            throw std::runtime_error("normalize_queries: zero-norm query");
        for (double& v : q) v /= norm;
    }
}

NormalizeStats normalize(Dataset& dataset, QuerySet& queries) {
    auto stats = normalize_items(dataset);
    normalize_queries(queries);
    return stats;
}

std::array<QuerySet, 3> split_queries(const QuerySet& all,
                                      std::array<double, 3> ratios,
                                      std::uint64_t seed) {
    double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("split_queries: ratios must sum to 1");
    const std::size_t n = all.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_train = static_cast<std::size_t>(ratios[0] * n);
    const std::size_t n_val = static_cast<std::size_t>(ratios[1] * n);

    std::array<QuerySet, 3> out;
    out[0].split = QuerySplit::train;
    out[1].split = QuerySplit::validation;
    out[2].split = QuerySplit::test;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t part = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
        out[part].queries.push_row(all.row(order[i]));
    }
    return out;
}

void save_ground_truth(const GroundTruthTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    std::uint32_t k = 0;
    for (const auto& [q, ids] : table.entries) {
        if (k == 0) k = static_cast<std::uint32_t>(ids.size());
        if (ids.size() != k)
            throw std::runtime_error("save_ground_truth: ragged entry lists");
    }
    out.write(kGroundTruthMagic, 8);
    write_pod<std::uint64_t>(out, table.entries.size());
    write_pod<std::uint32_t>(out, k);
    for (const auto& [q, ids] : table.entries) {
        write_pod<std::uint64_t>(out, q);
        for (NodeId id : ids) write_pod<std::uint64_t>(out, id);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

GroundTruthTable load_ground_truth(const std::string& path,
                                   std::size_t num_queries) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kGroundTruthMagic, 8) != 0)
        throw std::runtime_error("bad magic in " + path);
    auto count = read_pod<std::uint64_t>(in, "entry count");
    auto k = read_pod<std::uint32_t>(in, "entry width");
    GroundTruthTable table;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto q = read_pod<std::uint64_t>(in, "query index");
        std::vector<NodeId> ids(k);
        for (std::uint32_t j = 0; j < k; ++j)
            ids[j] = static_cast<NodeId>(read_pod<std::uint64_t>(in, "item index"));
        table.entries.emplace(static_cast<NodeId>(q), std::move(ids));
    }
    table.coverage = num_queries == 0
                         ? 0.0
                         : static_cast<double>(table.entries.size()) /
                               static_cast<double>(num_queries);
    return table;
}

}  // namespace mipsroute
