#pragma once

#include <map>
#include <string>
#include <vector>

#include "milab/common.hpp"

namespace milab {

// Dense row-major array of 64-bit floats. Values are immutable once placed in
// a Graph node; Tensor itself is a plain value type.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
    double& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool all_finite() const;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

enum class OpKind {
    leaf_param,
    leaf_input,
    leaf_index,
    add,
    mul,
    matmul,
    transpose,
    scale,
    softmax,
    layer_norm,
    gelu,
    embed_lookup,
    cross_entropy,
    slice,
    concat,
    take_positions,
    sum,
};

const char* op_name(OpKind k);

using NodeId = int;
using GradMap = std::map<NodeId, Tensor>;

// Expression DAG of primitive ops. Nodes are appended in topological order by
// construction; evaluation is single-threaded and bit-deterministic for fixed
// bindings. Leaves are bound before forward(); a leaf_index node carries
// integer ids (token ids, positions, labels).
class Graph {
public:
    NodeId param(Tensor init);
    NodeId input(std::vector<int> shape);
    NodeId index_input(std::vector<int> shape);

    void bind(NodeId leaf, Tensor v);
    void bind_indices(NodeId leaf, std::vector<int> idx);

    NodeId add(NodeId a, NodeId b);           // same shape, or b a trailing-suffix broadcast
    NodeId mul(NodeId a, NodeId b);           // elementwise, same shape
    NodeId matmul(NodeId a, NodeId b);        // 2Dx2D, 3Dx3D (batched), 3Dx2D
    NodeId transpose(NodeId a);               // swap last two axes
    NodeId scale(NodeId a, double c);
    NodeId softmax(NodeId a);                 // over last axis
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta);  // over last axis, eps 1e-5
    NodeId gelu(NodeId a);                    // exact erf form
    NodeId embed_lookup(NodeId table, NodeId ids);  // out shape = ids shape + {D}
    // Weighted mean over rows of (logsumexp(row) - row[label]); logits rank 2
    // or 3 (leading dims flattened into rows); optional per-row weights.
    NodeId cross_entropy(NodeId logits, NodeId labels, NodeId weights = -1);
    NodeId slice(NodeId a, int axis, int begin, int end);
    NodeId concat(NodeId a, NodeId b, int axis);
    // x: (B, S, ...), pos: index leaf of length B -> (B, ...), row pos[b] of sample b.
    NodeId take_positions(NodeId x, NodeId pos);
    NodeId sum(NodeId a);                     // full reduction to scalar

    // Evaluates the subgraph feeding `out`; repeated calls with identical
    // bindings are bit-identical. Throws numeric_error on non-finite values.
    const Tensor& forward(NodeId out);

    // d(seed . out)/d(leaf) for every trainable leaf in the evaluated subgraph.
    // Requires a forward() of `out` on the current bindings.
    GradMap backward(NodeId out, const Tensor& seed);

    // Overwrite a node's value right after it is computed, before any
    // downstream node reads it. positions empty = whole value; otherwise the
    // listed axis-1 rows are copied from `v` (which has the node's shape).
    void set_override(NodeId node, std::vector<int> positions, Tensor v);
    void clear_overrides();
    bool has_overrides() const { return !overrides_.empty(); }

    const Tensor& value(NodeId id) const;
    const std::vector<int>& node_shape(NodeId id) const;
    int node_count() const { return static_cast<int>(nodes_.size()); }
    bool is_trainable(NodeId id) const;

private:
    struct Node {
        OpKind op;
        std::vector<NodeId> inputs;
        std::vector<int> shape;
        Tensor value;
        std::vector<int> index_data;  // leaf_index payload
        double scalar = 0.0;          // scale factor
        int axis = 0;                 // slice/concat
        int begin = 0, end = 0;       // slice
        bool evaluated = false;
        // scratch kept between forward/backward (softmax caches its output in
        // value; cross_entropy caches row log-probs here)
        Tensor scratch;
    };

    struct Override {
        std::vector<int> positions;
        Tensor value;
    };

    NodeId push(Node n);
    void eval_node(NodeId id);
    void apply_override(NodeId id);
    void check_finite(NodeId id) const;
    void mark_needed(NodeId out, std::vector<char>& needed) const;

    std::vector<Node> nodes_;
    std::map<NodeId, Override> overrides_;
    std::vector<char> last_needed_;
    NodeId last_out_ = -1;
};

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-12). `out` must be scalar-valued.
double grad_check(Graph& g, NodeId out, NodeId leaf, double eps);

}  // namespace milab
