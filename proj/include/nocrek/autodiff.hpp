#pragma once
// Minimal reverse-mode automatic differentiation over dense matrices. A Tape
// records one forward pass as a sequence of nodes (creation order is already
// a topological order); backward() sweeps the nodes in reverse, accumulating
// adjoints with hand-derived per-op rules. Leaves may register an external
// gradient sink so parameter gradients land directly in the caller's
// accumulator. Everything is single-threaded and runs in fixed order, which
// keeps gradients bit-reproducible.

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "nocrek/errors.hpp"
#include "nocrek/linalg.hpp"

namespace nocrek::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t idx = 0;
};

class Tape {
public:
    Var leaf(Mat value, Mat* grad_sink = nullptr) {
        nodes_.push_back({std::move(value), {}, {}, nullptr});
        if (grad_sink) sinks_.push_back({nodes_.size() - 1, grad_sink});
        return {this, nodes_.size() - 1};
    }

    Var constant(Mat value) { return leaf(std::move(value), nullptr); }

    const Mat& val(Var v) const { return nodes_[v.idx].val; }
    Mat& grad(Var v) { return nodes_[v.idx].grad; }

    // ---- operations ----

    Var matmul(Var a, Var b) {
        check_cols_rows(a, b);
        Mat out;
        nocrek::matmul(val(a), val(b), out);
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            Mat tmp;
            matmul_nt(g, val(b), tmp);
            add_inplace(grad(a), tmp);
            matmul_tn(val(a), g, tmp);
            add_inplace(grad(b), tmp);
        });
    }

    // A * B^T
    Var matmul_transposed(Var a, Var b) {
        Mat out;
        nocrek::matmul_nt(val(a), val(b), out);
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            Mat tmp;
            nocrek::matmul(g, val(b), tmp);
            add_inplace(grad(a), tmp);
            matmul_tn(g, val(a), tmp);
            add_inplace(grad(b), tmp);
        });
    }

    Var add(Var a, Var b) {
        if (!val(a).same_shape(val(b)))
            throw ShapeMismatchError("ad::add: shape mismatch");
        Mat out = val(a);
        add_inplace(out, val(b));
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            add_inplace(grad(a), g);
            add_inplace(grad(b), g);
        });
    }

    // Broadcast a 1 x C row vector across all rows of A.
    Var add_rowvec(Var a, Var b) {
        if (val(b).rows != 1 || val(b).cols != val(a).cols)
            throw ShapeMismatchError("ad::add_rowvec: bias must be 1 x cols");
        Mat out = val(a);
        for (std::size_t r = 0; r < out.rows; ++r)
            for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += val(b)(0, c);
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            add_inplace(grad(a), g);
            Mat& gb = grad(b);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) gb(0, c) += g(r, c);
        });
    }

    // Broadcast-add a 1 x 1 scalar node to every entry.
    Var add_scalar(Var a, Var s) {
        if (val(s).rows != 1 || val(s).cols != 1)
            throw ShapeMismatchError("ad::add_scalar: scalar must be 1 x 1");
        Mat out = val(a);
        const double sv = val(s)(0, 0);
        for (double& v : out.a) v += sv;
        return record(std::move(out), {a, s}, [this, a, s](const Mat& g) {
            add_inplace(grad(a), g);
            double total = 0.0;
            for (double v : g.a) total += v;
            grad(s)(0, 0) += total;
        });
    }

    Var scale(Var a, double c) {
        Mat out = val(a);
        for (double& v : out.a) v *= c;
        return record(std::move(out), {a}, [this, a, c](const Mat& g) {
            Mat& ga = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += c * g.a[i];
        });
    }

    Var tanh_act(Var a) {
        Mat out = val(a);
        for (double& v : out.a) v = std::tanh(v);
        const std::size_t self = nodes_.size();
        return record(std::move(out), {a}, [this, a, self](const Mat& g) {
            const Mat& y = nodes_[self].val;
            Mat& ga = grad(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga.a[i] += g.a[i] * (1.0 - y.a[i] * y.a[i]);
        });
    }

    Var softmax_rows(Var a) {
        Mat out = val(a);
        for (std::size_t r = 0; r < out.rows; ++r) {
            double* row = out.row(r);
            double mx = row[0];
            for (std::size_t c = 1; c < out.cols; ++c) mx = std::max(mx, row[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < out.cols; ++c) {
                row[c] = std::exp(row[c] - mx);
                sum += row[c];
            }
            for (std::size_t c = 0; c < out.cols; ++c) row[c] /= sum;
        }
        const std::size_t self = nodes_.size();
        return record(std::move(out), {a}, [this, a, self](const Mat& g) {
            const Mat& y = nodes_[self].val;
            Mat& ga = grad(a);
            for (std::size_t r = 0; r < g.rows; ++r) {
                double dot_gy = 0.0;
                for (std::size_t c = 0; c < g.cols; ++c) dot_gy += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < g.cols; ++c)
                    ga(r, c) += y(r, c) * (g(r, c) - dot_gy);
            }
        });
    }

    // Per-row layer normalization with learnable gain/bias (1 x C each).
    Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Mat& xv = val(x);
        if (val(gamma).cols != xv.cols || val(beta).cols != xv.cols)
            throw ShapeMismatchError("ad::layernorm_rows: gain/bias width mismatch");
        Mat xhat(xv.rows, xv.cols);
        std::vector<double> inv_std(xv.rows);
        for (std::size_t r = 0; r < xv.rows; ++r) {
            double mean = 0.0;
            for (std::size_t c = 0; c < xv.cols; ++c) mean += xv(r, c);
            mean /= static_cast<double>(xv.cols);
            double var = 0.0;
            for (std::size_t c = 0; c < xv.cols; ++c) {
                const double d = xv(r, c) - mean;
                var += d * d;
            }
            var /= static_cast<double>(xv.cols);
            inv_std[r] = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < xv.cols; ++c)
                xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
        }
        Mat out(xv.rows, xv.cols);
        for (std::size_t r = 0; r < xv.rows; ++r)
            for (std::size_t c = 0; c < xv.cols; ++c)
                out(r, c) = val(gamma)(0, c) * xhat(r, c) + val(beta)(0, c);
        return record(std::move(out), {x, gamma, beta},
                      [this, x, gamma, beta, xhat, inv_std](const Mat& g) {
            const std::size_t n = xhat.cols;
            Mat& gx = grad(x);
            Mat& gg = grad(gamma);
            Mat& gb = grad(beta);
            for (std::size_t r = 0; r < g.rows; ++r) {
                double sum_gxhat = 0.0, dot_xhat = 0.0;
                std::vector<double> gxhat(n);
                for (std::size_t c = 0; c < n; ++c) {
                    gxhat[c] = g(r, c) * val(gamma)(0, c);
                    sum_gxhat += gxhat[c];
                    dot_xhat += gxhat[c] * xhat(r, c);
                    gg(0, c) += g(r, c) * xhat(r, c);
                    gb(0, c) += g(r, c);
                }
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t c = 0; c < n; ++c)
                    gx(r, c) += inv_std[r] *
                                (gxhat[c] - inv_n * sum_gxhat - inv_n * xhat(r, c) * dot_xhat);
            }
        });
    }

    // Output row i = src row indices[i]; indices may repeat.
    Var gather_rows(Var src, std::vector<std::size_t> indices) {
        const Mat& s = val(src);
        Mat out(indices.size(), s.cols);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= s.rows)
                throw ShapeMismatchError("ad::gather_rows: index out of range");
            for (std::size_t c = 0; c < s.cols; ++c) out(i, c) = s(indices[i], c);
        }
        return record(std::move(out), {src},
                      [this, src, indices = std::move(indices)](const Mat& g) {
            Mat& gs = grad(src);
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t c = 0; c < g.cols; ++c) gs(indices[i], c) += g(i, c);
        });
    }

    // Stack one row from each (source, row) pair; sources may differ per row
    // as long as widths agree. This is how token/tag/roi embeddings from
    // different tables are assembled into one input sequence.
    Var assemble_rows(std::vector<std::pair<Var, std::size_t>> picks) {
        if (picks.empty())
            throw ShapeMismatchError("ad::assemble_rows: empty");
        const std::size_t cols = val(picks[0].first).cols;
        Mat out(picks.size(), cols);
        std::vector<Var> parents;
        for (std::size_t i = 0; i < picks.size(); ++i) {
            const Mat& s = val(picks[i].first);
            if (s.cols != cols || picks[i].second >= s.rows)
                throw ShapeMismatchError("ad::assemble_rows: bad pick");
            for (std::size_t c = 0; c < cols; ++c) out(i, c) = s(picks[i].second, c);
            parents.push_back(picks[i].first);
        }
        return record(std::move(out), parents,
                      [this, picks = std::move(picks)](const Mat& g) {
            for (std::size_t i = 0; i < picks.size(); ++i) {
                Mat& gs = grad(picks[i].first);
                for (std::size_t c = 0; c < g.cols; ++c)
                    gs(picks[i].second, c) += g(i, c);
            }
        });
    }

    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Mat& s = val(a);
        if (c1 > s.cols || c0 >= c1)
            throw ShapeMismatchError("ad::slice_cols: bad range");
        Mat out(s.rows, c1 - c0);
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = s(r, c);
        return record(std::move(out), {a}, [this, a, c0](const Mat& g) {
            Mat& ga = grad(a);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) ga(r, c0 + c) += g(r, c);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty())
            throw ShapeMismatchError("ad::concat_cols: empty");
        const std::size_t rows = val(parts[0]).rows;
        std::size_t cols = 0;
        for (Var p : parts) {
            if (val(p).rows != rows)
                throw ShapeMismatchError("ad::concat_cols: row mismatch");
            cols += val(p).cols;
        }
        Mat out(rows, cols);
        std::size_t off = 0;
        for (Var p : parts) {
            const Mat& s = val(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < s.cols; ++c) out(r, off + c) = s(r, c);
            off += s.cols;
        }
        std::vector<std::size_t> offsets;
        off = 0;
        for (Var p : parts) {
            offsets.push_back(off);
            off += val(p).cols;
        }
        return record(std::move(out), parts, [this, parts, offsets](const Mat& g) {
            for (std::size_t k = 0; k < parts.size(); ++k) {
                Mat& gp = grad(parts[k]);
                for (std::size_t r = 0; r < g.rows; ++r)
                    for (std::size_t c = 0; c < gp.cols; ++c)
                        gp(r, c) += g(r, offsets[k] + c);
            }
        });
    }

    // Copy of A with the listed columns replaced by B's columns (in order).
    Var replace_cols(Var a, Var b, std::vector<std::size_t> cols) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        if (bv.rows != av.rows || bv.cols != cols.size())
            throw ShapeMismatchError("ad::replace_cols: shape mismatch");
        Mat out = av;
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (cols[j] >= av.cols)
                throw ShapeMismatchError("ad::replace_cols: column out of range");
            for (std::size_t r = 0; r < av.rows; ++r) out(r, cols[j]) = bv(r, j);
        }
        return record(std::move(out), {a, b},
                      [this, a, b, cols = std::move(cols)](const Mat& g) {
            Mat masked = g;
            Mat& gb = grad(b);
            for (std::size_t j = 0; j < cols.size(); ++j) {
                for (std::size_t r = 0; r < g.rows; ++r) {
                    gb(r, j) += g(r, cols[j]);
                    masked(r, cols[j]) = 0.0;
                }
            }
            add_inplace(grad(a), masked);
        });
    }

    // ---- reverse sweep ----

    // Seeds must already be written into grad(var) for the outputs of
    // interest; every other adjoint starts at zero.
    void backward() {
        for (auto& n : nodes_)
            if (n.grad.size() == 0) n.grad = Mat(n.val.rows, n.val.cols);
        for (std::size_t i = nodes_.size(); i > 0; --i) {
            const Node& n = nodes_[i - 1];
            if (n.back) n.back(n.grad);
        }
        for (const auto& [idx, sink] : sinks_) {
            if (sink->size() == 0) *sink = Mat(nodes_[idx].val.rows, nodes_[idx].val.cols);
            add_inplace(*sink, nodes_[idx].grad);
        }
    }

    void seed(Var v, const Mat& g) {
        if (!g.same_shape(val(v)))
            throw ShapeMismatchError("ad::seed: shape mismatch");
        Mat& gv = grad(v);
        if (gv.size() == 0) gv = Mat(g.rows, g.cols);
        add_inplace(gv, g);
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Mat val;
        Mat grad;
        std::vector<Var> parents;
        std::function<void(const Mat&)> back;
    };

    Var record(Mat value, std::vector<Var> parents, std::function<void(const Mat&)> back) {
        nodes_.push_back({std::move(value), {}, std::move(parents), std::move(back)});
        return {this, nodes_.size() - 1};
    }

    void check_cols_rows(Var a, Var b) const {
        if (val(a).cols != val(b).rows)
            throw ShapeMismatchError("ad::matmul: inner dimension mismatch");
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<std::size_t, Mat*>> sinks_;
};

} // namespace nocrek::ad
