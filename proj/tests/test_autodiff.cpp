#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "nocrek/autodiff.hpp"
#include "nocrek/rng.hpp"

using namespace nocrek;

namespace {

Mat random_mat(Rng& rng, std::size_t r, std::size_t c) {
    Mat m(r, c);
    for (auto& v : m.a) v = rng.gaussian();
    return m;
}

double weighted_sum(const Mat& x, const Mat& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.a[i] * w.a[i];
    return s;
}

// Gradient-checks a graph builder f(tape, inputs...) -> output against
// central finite differences of the scalar objective <output, W>.
void grad_check(std::vector<Mat> inputs,
                const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& build,
                Rng& rng, double tol = 1e-7) {
    std::vector<Mat> grads(inputs.size());
    Mat weights;
    {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            vars.push_back(tape.leaf(inputs[i], &grads[i]));
        ad::Var out = build(tape, vars);
        weights = random_mat(rng, tape.val(out).rows, tape.val(out).cols);
        tape.seed(out, weights);
        tape.backward();
    }
    const double h = 1e-6;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            auto eval = [&](double delta) {
                std::vector<Mat> shifted = inputs;
                shifted[i].a[k] += delta;
                ad::Tape tape;
                std::vector<ad::Var> vars;
                for (const auto& m : shifted) vars.push_back(tape.constant(m));
                return weighted_sum(tape.val(build(tape, vars)), weights);
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double an = grads[i].a[k];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            REQUIRE(std::abs(fd - an) / denom < tol * 1e3);
        }
    }
}

} // namespace

TEST_CASE("matmul gradients") {
    Rng rng(1);
    grad_check({random_mat(rng, 3, 4), random_mat(rng, 4, 2)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.matmul(v[0], v[1]); },
               rng);
}

TEST_CASE("matmul_transposed gradients") {
    Rng rng(2);
    grad_check({random_mat(rng, 3, 4), random_mat(rng, 5, 4)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.matmul_transposed(v[0], v[1]);
               },
               rng);
}

TEST_CASE("add, add_rowvec, add_scalar, scale gradients") {
    Rng rng(3);
    grad_check({random_mat(rng, 3, 3), random_mat(rng, 3, 3), random_mat(rng, 1, 3),
                random_mat(rng, 1, 1)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.add_scalar(t.add_rowvec(t.scale(t.add(v[0], v[1]), 0.7), v[2]), v[3]);
               },
               rng);
}

TEST_CASE("tanh gradients") {
    Rng rng(4);
    grad_check({random_mat(rng, 4, 5)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.tanh_act(v[0]); },
               rng);
}

TEST_CASE("softmax_rows gradients and row normalization") {
    Rng rng(5);
    {
        ad::Tape tape;
        ad::Var x = tape.constant(random_mat(rng, 6, 7));
        const Mat& y = tape.val(tape.softmax_rows(x));
        for (std::size_t r = 0; r < y.rows; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < y.cols; ++c) sum += y(r, c);
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
        }
    }
    grad_check({random_mat(rng, 4, 6)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.softmax_rows(v[0]); },
               rng);
}

TEST_CASE("layernorm gradients") {
    Rng rng(6);
    Mat gamma = random_mat(rng, 1, 5);
    for (auto& v : gamma.a) v = 0.5 + std::abs(v);
    grad_check({random_mat(rng, 3, 5), gamma, random_mat(rng, 1, 5)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.layernorm_rows(v[0], v[1], v[2]);
               },
               rng);
}

TEST_CASE("gather/assemble/slice/concat/replace gradients") {
    Rng rng(7);
    grad_check({random_mat(rng, 5, 4)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.gather_rows(v[0], {0, 2, 2, 4});
               },
               rng);
    grad_check({random_mat(rng, 3, 4), random_mat(rng, 2, 4)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.assemble_rows({{v[0], 1}, {v[1], 0}, {v[0], 1}, {v[1], 1}});
               },
               rng);
    grad_check({random_mat(rng, 3, 6)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.concat_cols({t.slice_cols(v[0], 0, 3), t.slice_cols(v[0], 3, 6)});
               },
               rng);
    grad_check({random_mat(rng, 3, 5), random_mat(rng, 3, 2)},
               [](ad::Tape& t, const std::vector<ad::Var>& v) {
                   return t.replace_cols(v[0], v[1], {1, 4});
               },
               rng);
}

TEST_CASE("a small attention block gradient-checks end to end") {
    Rng rng(8);
    const std::size_t S = 4, d = 6;
    grad_check({random_mat(rng, S, d), random_mat(rng, d, d), random_mat(rng, d, d),
                random_mat(rng, d, d)},
               [d](ad::Tape& t, const std::vector<ad::Var>& v) {
                   ad::Var q = t.matmul(v[0], v[1]);
                   ad::Var k = t.matmul(v[0], v[2]);
                   ad::Var val = t.matmul(v[0], v[3]);
                   ad::Var scores = t.scale(t.matmul_transposed(q, k),
                                            1.0 / std::sqrt(static_cast<double>(d)));
                   return t.matmul(t.softmax_rows(scores), val);
               },
               rng);
}

TEST_CASE("leaf sinks accumulate across backward calls from separate tapes") {
    Rng rng(9);
    Mat x = random_mat(rng, 2, 2);
    Mat sink;
    for (int pass = 0; pass < 2; ++pass) {
        ad::Tape tape;
        ad::Var v = tape.leaf(x, &sink);
        ad::Var y = tape.scale(v, 3.0);
        Mat seed(2, 2, 1.0);
        tape.seed(y, seed);
        tape.backward();
    }
    for (double g : sink.a) REQUIRE(g == Catch::Approx(6.0));  // 3 + 3
}
