#include "tabgrade/fd.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <map>
#include <set>
#include <unordered_map>

#include "tabgrade/io.hpp"
#include "tabgrade/random.hpp"

namespace tabgrade {

using AttrSet = std::uint64_t;

namespace {

constexpr std::size_t kMaxColumns = 64;
constexpr std::size_t kBruteForceMaxColumns = 8;

AttrSet bit(std::size_t i) { return AttrSet{1} << i; }

std::string cell_key(const Cell& c) {
    if (is_missing(c)) {
        return std::string(1, '\0');
    }
    if (const auto* i = std::get_if<std::int64_t>(&c)) {
        return "i" + std::to_string(*i);
    }
    if (const auto* d = std::get_if<double>(&c)) {
        double v = *d == 0.0 ? 0.0 : *d;
        char buf[1 + sizeof(double)];
        buf[0] = 'd';
        std::memcpy(buf + 1, &v, sizeof(double));
        return std::string(buf, sizeof(buf));
    }
    return "s" + std::get<std::string>(c);
}

std::vector<std::size_t> resolve_columns(const Schema& schema, const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    out.reserve(names.size());
    for (const auto& n : names) {
        out.push_back(schema.index_of(n));
    }
    return out;
}

void canonicalize(StrippedPartition& p) {
    std::sort(p.classes.begin(), p.classes.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
}

std::vector<std::size_t> members(AttrSet s) {
    std::vector<std::size_t> out;
    while (s) {
        out.push_back(static_cast<std::size_t>(std::countr_zero(s)));
        s &= s - 1;
    }
    return out;
}

std::size_t popcount(AttrSet s) { return static_cast<std::size_t>(std::popcount(s)); }

FunctionalDependency to_fd(const Schema& schema, AttrSet lhs, std::size_t rhs) {
    std::vector<std::string> names;
    for (auto c : members(lhs)) {
        names.push_back(schema[c].name);
    }
    return FunctionalDependency(std::move(names), schema[rhs].name);
}

FdSet make_set(const Schema& schema, const std::vector<std::pair<AttrSet, std::size_t>>& found, FdAlgorithm algo,
               std::size_t max_lhs, std::uint64_t seed) {
    FdSet set;
    set.algorithm = algo;
    set.max_lhs_size = max_lhs;
    set.seed = seed;
    set.minimal = true;
    for (const auto& [lhs, rhs] : found) {
        set.fds.push_back(to_fd(schema, lhs, rhs));
    }
    std::sort(set.fds.begin(), set.fds.end());
    set.fds.erase(std::unique(set.fds.begin(), set.fds.end()), set.fds.end());
    return set;
}

void validate_discovery_input(const Table& table, std::size_t max_lhs_size) {
    if (table.empty()) {
        throw DataError("FD discovery needs a non-empty table");
    }
    if (max_lhs_size < 1) {
        throw DataError("max_lhs_size must be at least 1");
    }
    if (table.num_columns() > kMaxColumns) {
        throw DataError("FD discovery supports at most 64 columns");
    }
}

StrippedPartition all_rows_partition(std::size_t n) {
    StrippedPartition p;
    p.row_count = n;
    if (n >= 2) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        p.classes.push_back(std::move(all));
    }
    return p;
}

StrippedPartition single_column_partition(const EncodedTable& enc, std::size_t col) {
    std::unordered_map<std::uint32_t, std::vector<std::size_t>> groups;
    const auto& codes = enc.column(col);
    for (std::size_t r = 0; r < enc.num_rows(); ++r) {
        groups[codes[r]].push_back(r);
    }
    StrippedPartition p;
    p.row_count = enc.num_rows();
    for (auto& [code, rows] : groups) {
        if (rows.size() >= 2) {
            p.classes.push_back(std::move(rows));
        }
    }
    canonicalize(p);
    return p;
}

// Whether every class of the lhs partition is constant on rhs. When not,
// reports one violating row pair.
bool classes_constant(const StrippedPartition& lhs, const EncodedTable& enc, std::size_t rhs,
                      std::pair<std::size_t, std::size_t>* violation = nullptr) {
    const auto& codes = enc.column(rhs);
    for (const auto& cls : lhs.classes) {
        const auto first = codes[cls.front()];
        for (std::size_t k = 1; k < cls.size(); ++k) {
            if (codes[cls[k]] != first) {
                if (violation) {
                    *violation = {cls.front(), cls[k]};
                }
                return false;
            }
        }
    }
    return true;
}

AttrSet agree_set(const EncodedTable& enc, std::size_t a, std::size_t b) {
    AttrSet s = 0;
    for (std::size_t c = 0; c < enc.num_columns(); ++c) {
        if (enc.code(a, c) == enc.code(b, c)) {
            s |= bit(c);
        }
    }
    return s;
}

// Partitions of attribute sets, built by refining cached prefixes.
class PartitionCache {
public:
    explicit PartitionCache(const EncodedTable& enc) : enc_(enc) {
        cache_.emplace(0, all_rows_partition(enc.num_rows()));
        for (std::size_t c = 0; c < enc.num_columns(); ++c) {
            cache_.emplace(bit(c), single_column_partition(enc, c));
        }
    }

    const StrippedPartition& get(AttrSet s) {
        if (auto it = cache_.find(s); it != cache_.end()) {
            return it->second;
        }
        const AttrSet top = AttrSet{1} << (63 - std::countl_zero(s));
        StrippedPartition p = refine(get(s & ~top), get(top));
        return cache_.emplace(s, std::move(p)).first->second;
    }

private:
    const EncodedTable& enc_;
    std::unordered_map<AttrSet, StrippedPartition> cache_;
};

}  // namespace

// ---------------------------------------------------------------------------
// FunctionalDependency / FdSet

FunctionalDependency::FunctionalDependency(std::vector<std::string> l, std::string r)
    : lhs(std::move(l)), rhs(std::move(r)) {
    std::sort(lhs.begin(), lhs.end());
    if (std::adjacent_find(lhs.begin(), lhs.end()) != lhs.end()) {
        throw DataError("duplicate column in FD lhs");
    }
    if (std::find(lhs.begin(), lhs.end(), rhs) != lhs.end()) {
        throw DataError("FD rhs '" + rhs + "' appears in its lhs");
    }
}

bool FunctionalDependency::operator<(const FunctionalDependency& other) const {
    if (lhs.size() != other.lhs.size()) {
        return lhs.size() < other.lhs.size();
    }
    if (lhs != other.lhs) {
        return lhs < other.lhs;
    }
    return rhs < other.rhs;
}

std::string FunctionalDependency::to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < lhs.size(); ++i) {
        if (i) s += ", ";
        s += lhs[i];
    }
    return s + "] -> " + rhs;
}

const char* to_string(FdAlgorithm algo) {
    switch (algo) {
        case FdAlgorithm::Tane: return "tane";
        case FdAlgorithm::HyFd: return "hyfd";
        case FdAlgorithm::BruteForce: return "bruteforce";
    }
    return "tane";
}

FdSet FdSet::without_empty_lhs() const {
    FdSet out = *this;
    std::erase_if(out.fds, [](const FunctionalDependency& fd) { return fd.lhs.empty(); });
    return out;
}

nlohmann::json fdset_to_json(const FdSet& set) {
    nlohmann::json fds = nlohmann::json::array();
    for (const auto& fd : set.fds) {
        fds.push_back({{"lhs", fd.lhs}, {"rhs", fd.rhs}});
    }
    return {{"fds", fds},
            {"algorithm", to_string(set.algorithm)},
            {"max_lhs_size", set.max_lhs_size},
            {"seed", set.seed}};
}

FdSet fdset_from_json(const nlohmann::json& doc) {
    try {
        FdSet set;
        for (const auto& f : doc.at("fds")) {
            set.fds.emplace_back(f.at("lhs").get<std::vector<std::string>>(), f.at("rhs").get<std::string>());
        }
        std::sort(set.fds.begin(), set.fds.end());
        if (doc.contains("algorithm")) {
            const auto a = doc["algorithm"].get<std::string>();
            set.algorithm = a == "hyfd" ? FdAlgorithm::HyFd
                            : a == "bruteforce" ? FdAlgorithm::BruteForce
                                                : FdAlgorithm::Tane;
        }
        if (doc.contains("max_lhs_size")) set.max_lhs_size = doc["max_lhs_size"].get<std::size_t>();
        if (doc.contains("seed")) set.seed = doc["seed"].get<std::uint64_t>();
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid FD document: ") + e.what());
    }
}

FdSet load_fdset(const std::filesystem::path& path) {
    try {
        return fdset_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("invalid FD JSON in " + path.string() + ": " + e.what());
    }
}

void save_fdset(const FdSet& set, const std::filesystem::path& path) {
    write_file_atomic(path, fdset_to_json(set).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Partitions

std::size_t StrippedPartition::error() const {
    std::size_t e = 0;
    for (const auto& c : classes) {
        e += c.size() - 1;
    }
    return e;
}

EncodedTable::EncodedTable(const Table& table) : num_rows_(table.num_rows()) {
    codes_.resize(table.num_columns());
    for (std::size_t c = 0; c < table.num_columns(); ++c) {
        std::unordered_map<std::string, std::uint32_t> dict;
        auto& col = codes_[c];
        col.reserve(num_rows_);
        for (std::size_t r = 0; r < num_rows_; ++r) {
            auto [it, inserted] = dict.emplace(cell_key(table.at(r, c)), static_cast<std::uint32_t>(dict.size()));
            col.push_back(it->second);
        }
    }
}

StrippedPartition compute_partition(const Table& table, const std::vector<std::string>& columns) {
    return compute_partition(EncodedTable(table), resolve_columns(table.schema(), columns));
}

StrippedPartition compute_partition(const EncodedTable& enc, const std::vector<std::size_t>& columns) {
    for (auto c : columns) {
        if (c >= enc.num_columns()) {
            throw DataError("column index out of range");
        }
    }
    if (columns.empty()) {
        return all_rows_partition(enc.num_rows());
    }
    std::map<std::vector<std::uint32_t>, std::vector<std::size_t>> groups;
    std::vector<std::uint32_t> key(columns.size());
    for (std::size_t r = 0; r < enc.num_rows(); ++r) {
        for (std::size_t k = 0; k < columns.size(); ++k) {
            key[k] = enc.code(r, columns[k]);
        }
        groups[key].push_back(r);
    }
    StrippedPartition p;
    p.row_count = enc.num_rows();
    for (auto& [k, rows] : groups) {
        if (rows.size() >= 2) {
            p.classes.push_back(std::move(rows));
        }
    }
    canonicalize(p);
    return p;
}

StrippedPartition refine(const StrippedPartition& p, const StrippedPartition& q) {
    if (p.row_count != q.row_count) {
        throw DataError("cannot refine partitions over different row counts");
    }
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    std::vector<std::size_t> probe(p.row_count, kNone);
    for (std::size_t k = 0; k < p.classes.size(); ++k) {
        for (auto t : p.classes[k]) {
            probe[t] = k;
        }
    }
    StrippedPartition out;
    out.row_count = p.row_count;
    std::vector<std::vector<std::size_t>> buckets(p.classes.size());
    std::vector<std::size_t> touched;
    for (const auto& cls : q.classes) {
        for (auto t : cls) {
            const auto k = probe[t];
            if (k == kNone) {
                continue;
            }
            if (buckets[k].empty()) {
                touched.push_back(k);
            }
            buckets[k].push_back(t);
        }
        for (auto k : touched) {
            if (buckets[k].size() >= 2) {
                out.classes.push_back(std::move(buckets[k]));
            }
            buckets[k].clear();
        }
        touched.clear();
    }
    for (auto& cls : out.classes) {
        std::sort(cls.begin(), cls.end());
    }
    canonicalize(out);
    return out;
}

bool fd_holds(const Table& table, const std::vector<std::string>& lhs, const std::string& rhs,
              double error_threshold) {
    const auto lhs_idx = resolve_columns(table.schema(), lhs);
    const auto rhs_idx = table.schema().index_of(rhs);
    if (std::find(lhs_idx.begin(), lhs_idx.end(), rhs_idx) != lhs_idx.end()) {
        throw DataError("FD rhs '" + rhs + "' appears in its lhs");
    }
    const EncodedTable enc(table);
    const auto pi_lhs = compute_partition(enc, lhs_idx);
    if (error_threshold <= 0.0) {
        auto both = lhs_idx;
        both.push_back(rhs_idx);
        return pi_lhs.error() == compute_partition(enc, both).error();
    }
    // g3: rows to drop so every lhs class becomes constant on rhs.
    std::size_t removed = 0;
    for (const auto& cls : pi_lhs.classes) {
        std::unordered_map<std::uint32_t, std::size_t> freq;
        std::size_t best = 0;
        for (auto t : cls) {
            best = std::max(best, ++freq[enc.code(t, rhs_idx)]);
        }
        removed += cls.size() - best;
    }
    return static_cast<double>(removed) <= error_threshold * static_cast<double>(table.num_rows());
}

// ---------------------------------------------------------------------------
// TANE: level-wise lattice traversal over stripped partitions with rhs
// candidate sets and key pruning.

FdSet tane_discover(const Table& table, std::size_t max_lhs_size) {
    validate_discovery_input(table, max_lhs_size);
    const EncodedTable enc(table);
    const std::size_t m = enc.num_columns();
    const AttrSet all = m == 64 ? ~AttrSet{0} : bit(m) - 1;

    struct Node {
        StrippedPartition pi;
        AttrSet cplus = 0;
    };
    using Level = std::map<AttrSet, Node>;

    std::vector<std::pair<AttrSet, std::size_t>> found;

    Level prev;
    prev.emplace(0, Node{all_rows_partition(enc.num_rows()), all});
    Level cur;
    for (std::size_t c = 0; c < m; ++c) {
        cur.emplace(bit(c), Node{single_column_partition(enc, c), 0});
    }

    for (std::size_t level = 1; !cur.empty() && level <= max_lhs_size + 1; ++level) {
        // Dependencies X \ {A} -> A.
        for (auto& [x, node] : cur) {
            AttrSet cplus = all;
            for (auto a : members(x)) {
                auto it = prev.find(x & ~bit(a));
                cplus &= it == prev.end() ? 0 : it->second.cplus;
            }
            node.cplus = cplus;
            for (auto a : members(x & cplus)) {
                const auto& sub = prev.at(x & ~bit(a));
                if (sub.pi.error() == node.pi.error()) {
                    found.emplace_back(x & ~bit(a), a);
                    node.cplus &= ~bit(a);
                    node.cplus &= x;
                }
            }
        }

        // Prune empty candidate sets and keys.
        for (auto it = cur.begin(); it != cur.end();) {
            auto& [x, node] = *it;
            if (node.cplus == 0) {
                it = cur.erase(it);
                continue;
            }
            if (node.pi.error() == 0) {
                if (level <= max_lhs_size) {
                    for (auto a : members(node.cplus & ~x)) {
                        bool minimal = true;
                        for (auto b : members(x)) {
                            const auto& sub = prev.at(x & ~bit(b));
                            const auto with_a = refine(sub.pi, single_column_partition(enc, a));
                            if (sub.pi.error() == with_a.error()) {
                                minimal = false;
                                break;
                            }
                        }
                        if (minimal) {
                            found.emplace_back(x, a);
                        }
                    }
                }
                it = cur.erase(it);
                continue;
            }
            ++it;
        }

        if (level == max_lhs_size + 1) {
            break;
        }

        // Next level from pairs sharing all but their highest attribute.
        Level next;
        std::map<AttrSet, std::vector<AttrSet>> blocks;
        for (const auto& [x, node] : cur) {
            const AttrSet top = AttrSet{1} << (63 - std::countl_zero(x));
            blocks[x & ~top].push_back(x);
        }
        for (const auto& [prefix, sets] : blocks) {
            for (std::size_t i = 0; i < sets.size(); ++i) {
                for (std::size_t j = i + 1; j < sets.size(); ++j) {
                    const AttrSet z = sets[i] | sets[j];
                    bool all_present = true;
                    for (auto a : members(z)) {
                        if (!cur.contains(z & ~bit(a))) {
                            all_present = false;
                            break;
                        }
                    }
                    if (all_present) {
                        next.emplace(z, Node{refine(cur.at(sets[i]).pi, cur.at(sets[j]).pi), 0});
                    }
                }
            }
        }
        prev = std::move(cur);
        cur = std::move(next);
    }
    return make_set(table.schema(), found, FdAlgorithm::Tane, max_lhs_size, 0);
}

// ---------------------------------------------------------------------------
// HyFD-style hybrid discovery: sampled difference sets induce candidates,
// full-table partitions validate them level by level.

FdSet hyfd_discover(const Table& table, std::size_t max_lhs_size, std::size_t sample_pairs, std::uint64_t seed) {
    validate_discovery_input(table, max_lhs_size);
    if (sample_pairs < 1) {
        throw DataError("sample_pairs must be at least 1");
    }
    const EncodedTable enc(table);
    const std::size_t m = enc.num_columns();
    const std::size_t n = enc.num_rows();
    const AttrSet all = m == 64 ? ~AttrSet{0} : bit(m) - 1;

    // Phase 1: difference sets from sampled pairs. Each is stored as the
    // agree set of the pair; identical rows carry no information.
    std::set<AttrSet> agree_sets;
    auto record = [&](std::size_t a, std::size_t b) {
        const AttrSet s = agree_set(enc, a, b);
        if (s != all) {
            agree_sets.insert(s);
        }
    };
    if (n >= 2) {
        Rng rng(seed);
        for (std::size_t s = 0; s < sample_pairs; ++s) {
            const std::size_t a = rng.uniform_index(n);
            std::size_t b = rng.uniform_index(n - 1);
            if (b >= a) ++b;
            record(a, b);
        }
        // Focused pass: neighbours inside each single-column class.
        for (std::size_t c = 0; c < m; ++c) {
            for (const auto& cls : single_column_partition(enc, c).classes) {
                for (std::size_t k = 0; k + 1 < cls.size(); ++k) {
                    record(cls[k], cls[k + 1]);
                }
            }
        }
    }

    // Candidate induction per rhs: minimal lhs sets not contained in any
    // agree set that misses the rhs.
    auto refuted_by_samples = [&](AttrSet x, std::size_t a) {
        for (auto s : agree_sets) {
            if (!(s & bit(a)) && (x & ~s) == 0) {
                return true;
            }
        }
        return false;
    };

    std::vector<std::vector<std::set<AttrSet>>> levels(m, std::vector<std::set<AttrSet>>(max_lhs_size + 1));
    for (std::size_t a = 0; a < m; ++a) {
        std::vector<AttrSet> cands{0};
        std::vector<AttrSet> negatives;
        for (auto s : agree_sets) {
            if (!(s & bit(a))) negatives.push_back(s);
        }
        std::stable_sort(negatives.begin(), negatives.end(),
                         [](AttrSet x, AttrSet y) { return popcount(x) > popcount(y); });
        for (auto s : negatives) {
            std::vector<AttrSet> kept;
            std::vector<AttrSet> refuted;
            for (auto x : cands) {
                ((x & ~s) == 0 ? refuted : kept).push_back(x);
            }
            if (refuted.empty()) {
                continue;
            }
            std::vector<AttrSet> added;
            for (auto x : refuted) {
                for (std::size_t b = 0; b < m; ++b) {
                    if (b == a || (s & bit(b))) continue;
                    const AttrSet y = x | bit(b);
                    if (popcount(y) > max_lhs_size) continue;
                    bool covered = false;
                    for (auto w : kept) {
                        if ((w & ~y) == 0) {
                            covered = true;
                            break;
                        }
                    }
                    if (!covered && std::find(added.begin(), added.end(), y) == added.end()) {
                        added.push_back(y);
                    }
                }
            }
            kept.insert(kept.end(), added.begin(), added.end());
            cands = std::move(kept);
        }
        for (auto x : cands) {
            levels[a][popcount(x)].insert(x);
        }
    }

    // Phase 2: validation against full partitions, specializing refuted
    // candidates by one attribute.
    PartitionCache cache(enc);
    std::vector<std::pair<AttrSet, std::size_t>> found;
    std::vector<std::vector<AttrSet>> valid(m);
    for (std::size_t k = 0; k <= max_lhs_size; ++k) {
        for (std::size_t a = 0; a < m; ++a) {
            for (auto x : levels[a][k]) {
                bool non_minimal = false;
                for (auto v : valid[a]) {
                    if ((v & ~x) == 0) {
                        non_minimal = true;
                        break;
                    }
                }
                if (non_minimal) continue;

                bool holds = false;
                if (!refuted_by_samples(x, a)) {
                    std::pair<std::size_t, std::size_t> violation;
                    holds = classes_constant(cache.get(x), enc, a, &violation);
                    if (!holds) {
                        record(violation.first, violation.second);
                    }
                }
                if (holds) {
                    valid[a].push_back(x);
                    found.emplace_back(x, a);
                } else if (k + 1 <= max_lhs_size) {
                    for (std::size_t b = 0; b < m; ++b) {
                        if (b == a || (x & bit(b))) continue;
                        levels[a][k + 1].insert(x | bit(b));
                    }
                }
            }
        }
    }
    return make_set(table.schema(), found, FdAlgorithm::HyFd, max_lhs_size, seed);
}

// ---------------------------------------------------------------------------
// Exhaustive oracle: direct grouping, no partitions.

FdSet bruteforce_discover(const Table& table, std::size_t max_lhs_size) {
    validate_discovery_input(table, max_lhs_size);
    if (table.num_columns() > kBruteForceMaxColumns) {
        throw DataError("bruteforce_discover supports at most 8 columns");
    }
    const EncodedTable enc(table);
    const std::size_t m = enc.num_columns();

    auto holds = [&](AttrSet lhs, std::size_t rhs) {
        std::map<std::vector<std::uint32_t>, std::uint32_t> seen;
        const auto cols = members(lhs);
        std::vector<std::uint32_t> key(cols.size());
        for (std::size_t r = 0; r < enc.num_rows(); ++r) {
            for (std::size_t k = 0; k < cols.size(); ++k) key[k] = enc.code(r, cols[k]);
            auto [it, inserted] = seen.emplace(key, enc.code(r, rhs));
            if (!inserted && it->second != enc.code(r, rhs)) {
                return false;
            }
        }
        return true;
    };

    std::vector<std::pair<AttrSet, std::size_t>> found;
    for (std::size_t a = 0; a < m; ++a) {
        for (AttrSet x = 0; x < bit(m); ++x) {
            if ((x & bit(a)) || popcount(x) > max_lhs_size) continue;
            if (!holds(x, a)) continue;
            bool minimal = true;
            for (auto b : members(x)) {
                if (holds(x & ~bit(b), a)) {
                    minimal = false;
                    break;
                }
            }
            if (minimal) found.emplace_back(x, a);
        }
    }
    return make_set(table.schema(), found, FdAlgorithm::BruteForce, max_lhs_size, 0);
}

}  // namespace tabgrade
