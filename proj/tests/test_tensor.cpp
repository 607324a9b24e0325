#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "grad_suite.hpp"
#include "milab/tensor.hpp"

using namespace milab;
using milab_tests::random_tensor;

TEST_CASE("softmax of equal logits is uniform") {
    Graph g;
    NodeId x = g.input({1, 2});
    g.bind(x, Tensor({1, 2}, {0.0, 0.0}));
    const Tensor& y = g.forward(g.softmax(x));
    CHECK(y.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    Graph g;
    NodeId x = g.input({4, 9});
    g.bind(x, random_tensor(rng, {4, 9}, 3.0));
    const Tensor& y = g.forward(g.softmax(x));
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y.at(r, j);
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("layer norm of a constant vector is zero before scale/shift") {
    Graph g;
    NodeId x = g.input({1, 5});
    NodeId gamma = g.input({5});
    NodeId beta = g.input({5});
    g.bind(x, Tensor::full({1, 5}, 3.25));
    g.bind(gamma, Tensor::full({5}, 1.0));
    g.bind(beta, Tensor::zeros({5}));
    const Tensor& y = g.forward(g.layer_norm(x, gamma, beta));
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("layer norm output is mean-centered") {
    Rng rng(11);
    Graph g;
    NodeId x = g.input({6, 8});
    NodeId gamma = g.input({8});
    NodeId beta = g.input({8});
    g.bind(x, random_tensor(rng, {6, 8}, 2.0));
    g.bind(gamma, Tensor::full({8}, 1.0));
    g.bind(beta, Tensor::zeros({8}));
    const Tensor& y = g.forward(g.layer_norm(x, gamma, beta));
    for (int r = 0; r < 6; ++r) {
        double mu = 0.0;
        for (int j = 0; j < 8; ++j) mu += y.at(r, j);
        mu /= 8.0;
        CHECK(std::abs(mu) < 1e-10);
    }
}

TEST_CASE("matmul by identity is identity") {
    Rng rng(3);
    Graph g;
    NodeId eye = g.input({3, 3});
    NodeId a = g.input({3, 3});
    Tensor id3 = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) id3.at(i, i) = 1.0;
    Tensor av = random_tensor(rng, {3, 3});
    g.bind(eye, id3);
    g.bind(a, av);
    const Tensor& y = g.forward(g.matmul(eye, a));
    for (size_t i = 0; i < av.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(av.data[i]));
}

TEST_CASE("forward is pure: repeated evaluation is bit-identical") {
    Rng rng(5);
    Graph g;
    NodeId x = g.param(random_tensor(rng, {4, 6}));
    NodeId gamma = g.param(Tensor::full({6}, 1.0));
    NodeId beta = g.param(Tensor::zeros({6}));
    NodeId out = g.softmax(g.gelu(g.layer_norm(x, gamma, beta)));
    Tensor first = g.forward(out);
    Tensor second = g.forward(out);
    CHECK(first.data == second.data);
}

TEST_CASE("gradient of sum is all ones") {
    Rng rng(9);
    Graph g;
    NodeId x = g.param(random_tensor(rng, {3, 4}));
    NodeId s = g.sum(x);
    g.forward(s);
    GradMap gm = g.backward(s, Tensor::scalar(1.0));
    for (double v : gm.at(x).data) CHECK(v == 1.0);
}

TEST_CASE("gradient of dot product is the other vector") {
    Rng rng(13);
    Graph g;
    Tensor xv = random_tensor(rng, {6});
    Tensor yv = random_tensor(rng, {6});
    NodeId x = g.param(xv);
    NodeId y = g.param(yv);
    NodeId s = g.sum(g.mul(x, y));
    g.forward(s);
    GradMap gm = g.backward(s, Tensor::scalar(1.0));
    for (int i = 0; i < 6; ++i) {
        CHECK(gm.at(x).at(i) == doctest::Approx(yv.at(i)).epsilon(1e-14));
        CHECK(gm.at(y).at(i) == doctest::Approx(xv.at(i)).epsilon(1e-14));
    }
}

TEST_CASE("two-layer MLP gradients match central differences") {
    Rng rng(21);
    Graph g;
    NodeId x = g.input({1, 5});
    g.bind(x, random_tensor(rng, {1, 5}));
    NodeId w1 = g.param(random_tensor(rng, {5, 7}, 0.5));
    NodeId b1 = g.param(random_tensor(rng, {7}, 0.1));
    NodeId w2 = g.param(random_tensor(rng, {7, 3}, 0.5));
    NodeId b2 = g.param(random_tensor(rng, {3}, 0.1));
    NodeId h = g.gelu(g.add(g.matmul(x, w1), b1));
    NodeId y = g.add(g.matmul(h, w2), b2);
    NodeId loss = g.sum(g.mul(y, y));
    for (NodeId leaf : {w1, b1, w2, b2}) {
        CHECK(grad_check(g, loss, leaf, 1e-4) < 1e-3);
    }
}

TEST_CASE("grad_check on a linear map is essentially exact") {
    Rng rng(33);
    Graph g;
    NodeId w = g.param(random_tensor(rng, {1, 8}));
    NodeId x = g.input({8, 1});
    g.bind(x, random_tensor(rng, {8, 1}));
    NodeId y = g.matmul(w, x);
    CHECK(grad_check(g, y, w, 1e-4) < 1e-9);
}

TEST_CASE("grad_check on softmax cross-entropy head") {
    Rng rng(35);
    Graph g;
    NodeId logits = g.param(random_tensor(rng, {3, 6}, 2.0));
    NodeId labels = g.index_input({3});
    g.bind_indices(labels, {4, 0, 2});
    NodeId loss = g.cross_entropy(logits, labels);
    CHECK(grad_check(g, loss, logits, 1e-4) < 1e-4);
}

TEST_CASE("grad_check of a constant graph is zero") {
    Rng rng(37);
    Graph g;
    NodeId unused = g.param(random_tensor(rng, {4}));
    NodeId x = g.param(random_tensor(rng, {4}));
    NodeId loss = g.sum(x);
    CHECK(grad_check(g, loss, unused, 1e-4) == 0.0);
}

TEST_CASE("grad_check rejects non-scalar outputs") {
    Graph g;
    NodeId x = g.param(Tensor::full({3}, 1.0));
    NodeId y = g.scale(x, 2.0);
    g.forward(y);
    CHECK_THROWS_AS(grad_check(g, y, x, 1e-4), validation_error);
}

TEST_CASE("shape mismatches are rejected at build time") {
    Graph g;
    NodeId a = g.input({2, 3});
    NodeId b = g.input({3, 3});
    CHECK_THROWS_AS(g.add(a, b), validation_error);
    CHECK_THROWS_AS(g.mul(a, b), validation_error);
    NodeId c = g.input({4, 5});
    CHECK_THROWS_AS(g.matmul(a, c), validation_error);
}

TEST_CASE("non-finite intermediates raise numeric_error") {
    Graph g;
    NodeId x = g.input({1, 2});
    g.bind(x, Tensor({1, 2}, {1.0, std::numeric_limits<double>::infinity()}));
    NodeId y = g.gelu(x);
    CHECK_THROWS_AS(g.forward(y), numeric_error);
}

TEST_CASE("backward before forward is an error") {
    Graph g;
    NodeId x = g.param(Tensor::full({2}, 1.0));
    NodeId s = g.sum(x);
    CHECK_THROWS_AS(g.backward(s, Tensor::scalar(1.0)), validation_error);
    g.forward(s);
    CHECK_THROWS_AS(g.backward(s, Tensor::full({2}, 1.0)), validation_error);  // bad seed shape
}

TEST_CASE("slice and concat round-trip") {
    Rng rng(41);
    Graph g;
    Tensor av = random_tensor(rng, {3, 6});
    NodeId a = g.input({3, 6});
    g.bind(a, av);
    NodeId left = g.slice(a, 1, 0, 2);
    NodeId right = g.slice(a, 1, 2, 6);
    NodeId back = g.concat(left, right, 1);
    const Tensor& y = g.forward(back);
    CHECK(y.data == av.data);
}

TEST_CASE("every primitive passes finite-difference checks") {
    auto results = milab_tests::run_primitive_grad_suite(20);
    CHECK(results.size() >= 14);
    for (const auto& r : results) {
        INFO("primitive: " << r.name << " max rel err " << r.max_err);
        CHECK(r.max_err < 1e-3);
    }
}
