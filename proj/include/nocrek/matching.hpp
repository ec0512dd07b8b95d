#pragma once
// Target expansion and optimal bipartite assignment between the expanded
// target set and the retrieved vocabulary.
//
// The assignment cost of a permutation is a sum of doubles, and the
// lexicographic tie-break contract ("among equal-cost optima, return the
// lexicographically smallest permutation") needs cost comparisons that do
// not depend on summation rounding. Totals are therefore compared as exact
// Shewchuk expansions: a sum of doubles represented without error as a short
// list of non-overlapping doubles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/linalg.hpp"
#include "nocrek/retrieval.hpp"
#include "nocrek/rng.hpp"

namespace nocrek {

enum class TargetKind { GroundTruth, NoObject, InjectedNovel };

struct TargetLabel {
    TargetKind kind = TargetKind::NoObject;
    std::string term;  // empty for NoObject
};

struct TargetSet {
    std::vector<TargetLabel> targets;  // size K
    std::size_t n_gt = 0;
    std::size_t n_null = 0;
    std::size_t n_injected = 0;
};

struct Assignment {
    std::vector<std::size_t> permutation;  // target index -> retrieved index
    double total_cost = 0.0;
};

inline std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5));
}

// Expand N ground-truth tags to a size-K target set: gt tags first in input
// order, then round(0.15 * (K - N)) injected terms drawn uniformly without
// replacement from store terms outside the tags, then no-object padding.
inline TargetSet expand_targets(const std::vector<std::string>& gt_tags, std::size_t K,
                                const KnowledgeStore& store, Rng& rng) {
    if (gt_tags.size() > K)
        throw TooManyTagsError("expand_targets: more tags than target slots");
    TargetSet out;
    out.targets.reserve(K);
    for (const auto& raw : gt_tags) {
        const std::string term = normalize_term(raw);
        if (!store.contains(term))
            throw UnknownTermError("expand_targets: tag not in store: " + term);
        out.targets.push_back({TargetKind::GroundTruth, term});
    }
    out.n_gt = gt_tags.size();

    const std::size_t padding = K - out.n_gt;
    std::size_t quota = round_half_up(0.15 * static_cast<double>(padding));

    std::vector<std::string> pool;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& term = store.entry(i).term;
        if (term == kNoObjectTerm) continue;
        bool in_tags = false;
        for (const auto& t : out.targets)
            if (t.kind == TargetKind::GroundTruth && t.term == term) { in_tags = true; break; }
        if (!in_tags) pool.push_back(term);
    }
    quota = std::min(quota, pool.size());

    for (std::size_t idx : rng.sample_without_replacement(pool.size(), quota))
        out.targets.push_back({TargetKind::InjectedNovel, pool[idx]});
    out.n_injected = quota;

    out.n_null = padding - quota;
    for (std::size_t i = 0; i < out.n_null; ++i)
        out.targets.push_back({TargetKind::NoObject, {}});
    return out;
}

// Pairwise matching cost: zero row for no-object targets, otherwise the
// negated cosine between the target term's embedding and the term retrieved
// for region j. Both embeddings come from the frozen store.
inline Mat matching_cost_matrix(const TargetSet& targets, const RetrievalResult& retrieved,
                                const KnowledgeStore& store) {
    const std::size_t K = targets.targets.size();
    if (retrieved.per_region.size() != K)
        throw ShapeMismatchError("matching_cost_matrix: size mismatch");
    Mat cost(K, K);
    for (std::size_t i = 0; i < K; ++i) {
        const TargetLabel& t = targets.targets[i];
        if (t.kind == TargetKind::NoObject) continue;
        const Vec& ti = store.embedding_of(t.term);
        for (std::size_t j = 0; j < K; ++j) {
            const Vec& vj = store.embedding_of(retrieved.per_region[j].term);
            cost(i, j) = -cosine_sim(ti, vj);
        }
    }
    return cost;
}

namespace detail {

// Shewchuk expansion arithmetic: exact sums of doubles.
struct Expansion {
    std::vector<double> c;  // non-overlapping, increasing magnitude

    void add(double b) {
        std::size_t out = 0;
        double q = b;
        for (double comp : c) {
            const double sum = q + comp;
            const double bv = sum - q;
            const double err = (q - (sum - bv)) + (comp - bv);
            if (err != 0.0) c[out++] = err;
            q = sum;
        }
        c.resize(out);
        if (q != 0.0) c.push_back(q);
    }

    // Sign of (this - other), computed exactly.
    int compare(const Expansion& other) const {
        Expansion diff = *this;
        for (double comp : other.c) diff.add(-comp);
        if (diff.c.empty()) return 0;
        const double lead = diff.c.back();  // dominant component
        return lead > 0.0 ? 1 : -1;
    }
};

// Classic O(n^3) Kuhn-Munkres on a dense square cost view. `rows` and
// `cols` select a square submatrix; returns for each selected row the
// selected-column position it is matched to.
inline std::vector<std::size_t> km_solve(const Mat& cost, const std::vector<std::size_t>& rows,
                                         const std::vector<std::size_t>& cols) {
    const std::size_t n = rows.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) { minv[j] = cur; way[j] = j0; }
                if (minv[j] < delta) { delta = minv[j]; j1 = j; }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) { u[p[j]] += delta; v[j] -= delta; }
                else { minv[j] -= delta; }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> match(n, 0);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j] != 0) match[p[j] - 1] = j - 1;
    return match;
}

// Exact total of the optimal assignment on the given submatrix.
inline Expansion km_optimal_total(const Mat& cost, const std::vector<std::size_t>& rows,
                                  const std::vector<std::size_t>& cols) {
    Expansion total;
    if (rows.empty()) return total;
    const auto match = km_solve(cost, rows, cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        total.add(cost(rows[i], cols[match[i]]));
    return total;
}

} // namespace detail

// Minimum-cost perfect matching with a deterministic tie-break: among
// equal-cost optima, the lexicographically smallest permutation. Rows are
// fixed in order; for each row the smallest column whose optimal completion
// matches the best achievable total is taken, with totals compared exactly.
inline Assignment hungarian(const Mat& cost) {
    if (cost.rows != cost.cols)
        throw ShapeMismatchError("hungarian: matrix not square");
    if (!all_finite(cost))
        throw NonFiniteError("hungarian: non-finite cost entry");
    const std::size_t K = cost.rows;
    Assignment out;
    out.permutation.resize(K);
    if (K == 0) return out;

    std::vector<std::size_t> free_cols(K);
    std::iota(free_cols.begin(), free_cols.end(), 0);

    for (std::size_t i = 0; i < K; ++i) {
        std::vector<std::size_t> rest_rows(K - i - 1);
        std::iota(rest_rows.begin(), rest_rows.end(), i + 1);

        std::size_t best_pos = 0;
        detail::Expansion best_total;
        bool have_best = false;
        for (std::size_t pos = 0; pos < free_cols.size(); ++pos) {
            std::vector<std::size_t> rest_cols;
            rest_cols.reserve(free_cols.size() - 1);
            for (std::size_t q = 0; q < free_cols.size(); ++q)
                if (q != pos) rest_cols.push_back(free_cols[q]);
            detail::Expansion total = detail::km_optimal_total(cost, rest_rows, rest_cols);
            total.add(cost(i, free_cols[pos]));
            if (!have_best || total.compare(best_total) < 0) {
                best_total = total;
                best_pos = pos;
                have_best = true;
            }
        }
        out.permutation[i] = free_cols[best_pos];
        free_cols.erase(free_cols.begin() + static_cast<std::ptrdiff_t>(best_pos));
    }

    double total = 0.0;
    for (std::size_t i = 0; i < K; ++i) total += cost(i, out.permutation[i]);
    out.total_cost = total;
    return out;
}

// Exhaustive oracle: scans all K! permutations in lexicographic order and
// keeps the first strictly best one, so the tie-break matches hungarian.
inline Assignment brute_force_assignment(const Mat& cost) {
    if (cost.rows != cost.cols)
        throw ShapeMismatchError("brute_force_assignment: matrix not square");
    if (cost.rows > 9)
        throw TooLargeError("brute_force_assignment: K > 9");
    if (!all_finite(cost))
        throw NonFiniteError("brute_force_assignment: non-finite cost entry");
    const std::size_t K = cost.rows;
    std::vector<std::size_t> perm(K);
    std::iota(perm.begin(), perm.end(), 0);

    Assignment best;
    detail::Expansion best_total;
    bool have_best = false;
    do {
        detail::Expansion total;
        for (std::size_t i = 0; i < K; ++i) total.add(cost(i, perm[i]));
        if (!have_best || total.compare(best_total) < 0) {
            best_total = total;
            best.permutation = perm;
            have_best = true;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    double total = 0.0;
    for (std::size_t i = 0; i < K; ++i) total += cost(i, best.permutation[i]);
    best.total_cost = total;
    return best;
}

} // namespace nocrek
