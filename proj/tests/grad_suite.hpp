#pragma once

// Finite-difference checks for every Graph primitive, shared by the tensor
// unit tests and the acceptance suite (criterion: rel. error < 1e-3 over 20
// random instances per primitive).

#include <string>
#include <vector>

#include "milab/common.hpp"
#include "milab/tensor.hpp"

namespace milab_tests {

struct PrimitiveCheck {
    std::string name;
    double max_err = 0.0;
};

inline milab::Tensor random_tensor(milab::Rng& rng, std::vector<int> shape, double s = 1.0) {
    milab::Tensor t = milab::Tensor::zeros(shape);
    for (auto& v : t.data) v = rng.normal(0.0, s);
    return t;
}

// Reduce `id` to a scalar through a random fixed linear functional so the
// gradient of the primitive itself is exercised.
inline milab::NodeId scalarize(milab::Graph& g, milab::NodeId id, milab::Rng& rng) {
    milab::NodeId w = g.input(g.node_shape(id));
    g.bind(w, random_tensor(rng, g.node_shape(id)));
    return g.sum(g.mul(id, w));
}

inline double check_leaves(milab::Graph& g, milab::NodeId out,
                           const std::vector<milab::NodeId>& leaves, double eps = 1e-5) {
    double worst = 0.0;
    for (auto leaf : leaves) {
        double e = milab::grad_check(g, out, leaf, eps);
        if (e > worst) worst = e;
    }
    return worst;
}

// One random instance per primitive; returns worst relative error seen.
inline std::vector<PrimitiveCheck> run_primitive_grad_suite(int instances = 20,
                                                            uint64_t seed = 1234) {
    using namespace milab;
    std::vector<PrimitiveCheck> results;
    auto record = [&](const std::string& name, double err) {
        for (auto& r : results) {
            if (r.name == name) {
                r.max_err = std::max(r.max_err, err);
                return;
            }
        }
        results.push_back({name, err});
    };

    for (int it = 0; it < instances; ++it) {
        Rng rng(seed + static_cast<uint64_t>(it));
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            NodeId b = g.param(random_tensor(rng, {3, 4}));
            record("add", check_leaves(g, scalarize(g, g.add(a, b), rng), {a, b}));
        }
        {
            Graph g;  // broadcast form
            NodeId a = g.param(random_tensor(rng, {2, 3, 4}));
            NodeId b = g.param(random_tensor(rng, {4}));
            record("add_broadcast", check_leaves(g, scalarize(g, g.add(a, b), rng), {a, b}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            NodeId b = g.param(random_tensor(rng, {3, 4}));
            record("mul", check_leaves(g, scalarize(g, g.mul(a, b), rng), {a, b}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            NodeId b = g.param(random_tensor(rng, {4, 2}));
            record("matmul", check_leaves(g, scalarize(g, g.matmul(a, b), rng), {a, b}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {2, 3, 4}));
            NodeId b = g.param(random_tensor(rng, {2, 4, 2}));
            record("matmul_batched", check_leaves(g, scalarize(g, g.matmul(a, b), rng), {a, b}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {2, 3, 4}));
            NodeId b = g.param(random_tensor(rng, {4, 2}));
            record("matmul_3x2", check_leaves(g, scalarize(g, g.matmul(a, b), rng), {a, b}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            record("transpose", check_leaves(g, scalarize(g, g.transpose(a), rng), {a}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            record("scale", check_leaves(g, scalarize(g, g.scale(a, -1.7), rng), {a}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 5}));
            record("softmax", check_leaves(g, scalarize(g, g.softmax(a), rng), {a}));
        }
        {
            Graph g;
            NodeId x = g.param(random_tensor(rng, {3, 6}));
            NodeId gamma = g.param(random_tensor(rng, {6}));
            NodeId beta = g.param(random_tensor(rng, {6}));
            record("layer_norm",
                   check_leaves(g, scalarize(g, g.layer_norm(x, gamma, beta), rng),
                                {x, gamma, beta}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            record("gelu", check_leaves(g, scalarize(g, g.gelu(a), rng), {a}));
        }
        {
            Graph g;
            NodeId table = g.param(random_tensor(rng, {6, 4}));
            NodeId ids = g.index_input({5});
            std::vector<int> iv;
            for (int i = 0; i < 5; ++i) iv.push_back(static_cast<int>(rng.uniform(6)));
            g.bind_indices(ids, iv);
            record("embed_lookup",
                   check_leaves(g, scalarize(g, g.embed_lookup(table, ids), rng), {table}));
        }
        {
            Graph g;
            NodeId logits = g.param(random_tensor(rng, {4, 7}));
            NodeId labels = g.index_input({4});
            std::vector<int> lv;
            for (int i = 0; i < 4; ++i) lv.push_back(static_cast<int>(rng.uniform(7)));
            g.bind_indices(labels, lv);
            record("cross_entropy",
                   check_leaves(g, g.cross_entropy(logits, labels), {logits}, 1e-4));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 6}));
            record("slice", check_leaves(g, scalarize(g, g.slice(a, 1, 2, 5), rng), {a}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 2}));
            NodeId b = g.param(random_tensor(rng, {3, 4}));
            record("concat", check_leaves(g, scalarize(g, g.concat(a, b, 1), rng), {a, b}));
        }
        {
            Graph g;
            NodeId x = g.param(random_tensor(rng, {2, 5, 3}));
            NodeId pos = g.index_input({2});
            g.bind_indices(pos, {static_cast<int>(rng.uniform(5)),
                                 static_cast<int>(rng.uniform(5))});
            record("take_positions",
                   check_leaves(g, scalarize(g, g.take_positions(x, pos), rng), {x}));
        }
        {
            Graph g;
            NodeId a = g.param(random_tensor(rng, {3, 4}));
            record("sum", check_leaves(g, g.sum(a), {a}));
        }
    }
    return results;
}

}  // namespace milab_tests
