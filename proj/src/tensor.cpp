#include "milab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace milab {

namespace {

using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMajorMat>;
using MapConstMat = Eigen::Map<const RowMajorMat>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t;
    t.data.assign(static_cast<size_t>(shape_numel(shape)), v);
    t.shape = std::move(shape);
    return t;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf_param: return "leaf_param";
        case OpKind::leaf_input: return "leaf_input";
        case OpKind::leaf_index: return "leaf_index";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::scale: return "scale";
        case OpKind::softmax: return "softmax";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::gelu: return "gelu";
        case OpKind::embed_lookup: return "embed_lookup";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::slice: return "slice";
        case OpKind::concat: return "concat";
        case OpKind::take_positions: return "take_positions";
        case OpKind::sum: return "sum";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

static void require(bool cond, const std::string& msg) {
    if (!cond) throw validation_error(msg);
}

NodeId Graph::param(Tensor init) {
    require(init.numel() == shape_numel(init.shape), "param: shape/data mismatch");
    Node n;
    n.op = OpKind::leaf_param;
    n.shape = init.shape;
    n.value = std::move(init);
    n.evaluated = true;
    return push(std::move(n));
}

NodeId Graph::input(std::vector<int> shape) {
    Node n;
    n.op = OpKind::leaf_input;
    n.shape = std::move(shape);
    return push(std::move(n));
}

NodeId Graph::index_input(std::vector<int> shape) {
    Node n;
    n.op = OpKind::leaf_index;
    n.shape = std::move(shape);
    return push(std::move(n));
}

void Graph::bind(NodeId leaf, Tensor v) {
    Node& n = nodes_.at(static_cast<size_t>(leaf));
    require(n.op == OpKind::leaf_param || n.op == OpKind::leaf_input,
            "bind: node is not a float leaf");
    require(v.shape == n.shape, "bind: shape mismatch, expected " + shape_str(n.shape) +
                                    " got " + shape_str(v.shape));
    n.value = std::move(v);
    n.evaluated = true;
    last_out_ = -1;
}

void Graph::bind_indices(NodeId leaf, std::vector<int> idx) {
    Node& n = nodes_.at(static_cast<size_t>(leaf));
    require(n.op == OpKind::leaf_index, "bind_indices: node is not an index leaf");
    require(static_cast<int64_t>(idx.size()) == shape_numel(n.shape),
            "bind_indices: length mismatch");
    n.index_data = std::move(idx);
    n.evaluated = true;
    last_out_ = -1;
}

NodeId Graph::add(NodeId a, NodeId b) {
    const auto& sa = node_shape(a);
    const auto& sb = node_shape(b);
    bool same = sa == sb;
    bool suffix = sb.size() < sa.size() &&
                  std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
    require(same || suffix, "add: incompatible shapes " + shape_str(sa) + " + " + shape_str(sb));
    Node n;
    n.op = OpKind::add;
    n.inputs = {a, b};
    n.shape = sa;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    require(node_shape(a) == node_shape(b), "mul: shape mismatch");
    Node n;
    n.op = OpKind::mul;
    n.inputs = {a, b};
    n.shape = node_shape(a);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const auto& sa = node_shape(a);
    const auto& sb = node_shape(b);
    std::vector<int> out;
    if (sa.size() == 2 && sb.size() == 2) {
        require(sa[1] == sb[0], "matmul: inner dims differ");
        out = {sa[0], sb[1]};
    } else if (sa.size() == 3 && sb.size() == 3) {
        require(sa[0] == sb[0] && sa[2] == sb[1], "matmul: batched dims differ");
        out = {sa[0], sa[1], sb[2]};
    } else if (sa.size() == 3 && sb.size() == 2) {
        require(sa[2] == sb[0], "matmul: inner dims differ");
        out = {sa[0], sa[1], sb[1]};
    } else {
        throw validation_error("matmul: unsupported ranks " + shape_str(sa) + " x " +
                               shape_str(sb));
    }
    Node n;
    n.op = OpKind::matmul;
    n.inputs = {a, b};
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    auto s = node_shape(a);
    require(s.size() >= 2, "transpose: rank < 2");
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    Node n;
    n.op = OpKind::transpose;
    n.inputs = {a};
    n.shape = std::move(s);
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    Node n;
    n.op = OpKind::scale;
    n.inputs = {a};
    n.shape = node_shape(a);
    n.scalar = c;
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
    require(!node_shape(a).empty(), "softmax: rank 0");
    Node n;
    n.op = OpKind::softmax;
    n.inputs = {a};
    n.shape = node_shape(a);
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta) {
    const auto& sx = node_shape(x);
    require(!sx.empty(), "layer_norm: rank 0");
    int d = sx.back();
    require(node_shape(gamma) == std::vector<int>{d}, "layer_norm: gamma shape");
    require(node_shape(beta) == std::vector<int>{d}, "layer_norm: beta shape");
    Node n;
    n.op = OpKind::layer_norm;
    n.inputs = {x, gamma, beta};
    n.shape = sx;
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    Node n;
    n.op = OpKind::gelu;
    n.inputs = {a};
    n.shape = node_shape(a);
    return push(std::move(n));
}

NodeId Graph::embed_lookup(NodeId table, NodeId ids) {
    const auto& st = node_shape(table);
    require(st.size() == 2, "embed_lookup: table must be 2-D");
    require(nodes_[static_cast<size_t>(ids)].op == OpKind::leaf_index,
            "embed_lookup: ids must be an index leaf");
    std::vector<int> out = node_shape(ids);
    out.push_back(st[1]);
    Node n;
    n.op = OpKind::embed_lookup;
    n.inputs = {table, ids};
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, NodeId labels, NodeId weights) {
    const auto& sl = node_shape(logits);
    require(sl.size() == 2 || sl.size() == 3, "cross_entropy: logits must be 2-D or 3-D");
    require(nodes_[static_cast<size_t>(labels)].op == OpKind::leaf_index,
            "cross_entropy: labels must be an index leaf");
    int64_t rows = shape_numel(sl) / sl.back();
    require(shape_numel(node_shape(labels)) == rows, "cross_entropy: label count mismatch");
    Node n;
    n.op = OpKind::cross_entropy;
    n.inputs = {logits, labels};
    if (weights >= 0) {
        require(shape_numel(node_shape(weights)) == rows, "cross_entropy: weights shape");
        n.inputs.push_back(weights);
    }
    n.shape = {1};
    return push(std::move(n));
}

NodeId Graph::slice(NodeId a, int axis, int begin, int end) {
    auto s = node_shape(a);
    require(axis >= 0 && axis < static_cast<int>(s.size()), "slice: bad axis");
    require(begin >= 0 && begin < end && end <= s[static_cast<size_t>(axis)],
            "slice: bad range");
    s[static_cast<size_t>(axis)] = end - begin;
    Node n;
    n.op = OpKind::slice;
    n.inputs = {a};
    n.shape = std::move(s);
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
}

NodeId Graph::concat(NodeId a, NodeId b, int axis) {
    auto sa = node_shape(a);
    const auto& sb = node_shape(b);
    require(sa.size() == sb.size(), "concat: rank mismatch");
    require(axis >= 0 && axis < static_cast<int>(sa.size()), "concat: bad axis");
    for (size_t i = 0; i < sa.size(); ++i) {
        if (static_cast<int>(i) != axis) require(sa[i] == sb[i], "concat: shape mismatch");
    }
    sa[static_cast<size_t>(axis)] += sb[static_cast<size_t>(axis)];
    Node n;
    n.op = OpKind::concat;
    n.inputs = {a, b};
    n.shape = std::move(sa);
    n.axis = axis;
    return push(std::move(n));
}

NodeId Graph::take_positions(NodeId x, NodeId pos) {
    const auto& sx = node_shape(x);
    require(sx.size() >= 2, "take_positions: rank < 2");
    require(nodes_[static_cast<size_t>(pos)].op == OpKind::leaf_index,
            "take_positions: pos must be an index leaf");
    require(node_shape(pos)[0] == sx[0], "take_positions: batch mismatch");
    std::vector<int> out;
    out.push_back(sx[0]);
    for (size_t i = 2; i < sx.size(); ++i) out.push_back(sx[i]);
    Node n;
    n.op = OpKind::take_positions;
    n.inputs = {x, pos};
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    Node n;
    n.op = OpKind::sum;
    n.inputs = {a};
    n.shape = {1};
    return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const {
    const Node& n = nodes_.at(static_cast<size_t>(id));
    require(n.evaluated, "value: node not evaluated");
    return n.value;
}

const std::vector<int>& Graph::node_shape(NodeId id) const {
    return nodes_.at(static_cast<size_t>(id)).shape;
}

bool Graph::is_trainable(NodeId id) const {
    return nodes_.at(static_cast<size_t>(id)).op == OpKind::leaf_param;
}

void Graph::set_override(NodeId node, std::vector<int> positions, Tensor v) {
    const Node& n = nodes_.at(static_cast<size_t>(node));
    require(v.shape == n.shape, "set_override: shape mismatch at " + std::string(op_name(n.op)) +
                                    ", expected " + shape_str(n.shape));
    if (!positions.empty()) {
        require(n.shape.size() >= 2, "set_override: positioned override needs rank >= 2");
        for (int p : positions) {
            require(p >= 0 && p < n.shape[1], "set_override: position out of range");
        }
    }
    overrides_[node] = Override{std::move(positions), std::move(v)};
    last_out_ = -1;
}

void Graph::clear_overrides() {
    overrides_.clear();
    last_out_ = -1;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

void Graph::mark_needed(NodeId out, std::vector<char>& needed) const {
    std::vector<NodeId> stack{out};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        if (needed[static_cast<size_t>(id)]) continue;
        needed[static_cast<size_t>(id)] = 1;
        for (NodeId in : nodes_[static_cast<size_t>(id)].inputs) stack.push_back(in);
    }
}

void Graph::apply_override(NodeId id) {
    auto it = overrides_.find(id);
    if (it == overrides_.end()) return;
    Node& n = nodes_[static_cast<size_t>(id)];
    const Override& ov = it->second;
    if (ov.positions.empty()) {
        n.value.data = ov.value.data;
        return;
    }
    // copy whole axis-1 rows: value laid out as (d0, d1, rest...)
    int d0 = n.shape[0];
    int d1 = n.shape[1];
    int64_t row = shape_numel(n.shape) / (static_cast<int64_t>(d0) * d1);
    for (int b = 0; b < d0; ++b) {
        for (int p : ov.positions) {
            int64_t off = (static_cast<int64_t>(b) * d1 + p) * row;
            std::memcpy(n.value.data.data() + off, ov.value.data.data() + off,
                        static_cast<size_t>(row) * sizeof(double));
        }
    }
}

void Graph::check_finite(NodeId id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op == OpKind::leaf_index) return;
    if (!n.value.all_finite()) {
        throw numeric_error(std::string("non-finite value in ") + op_name(n.op) + " node " +
                            std::to_string(id));
    }
}

const Tensor& Graph::forward(NodeId out) {
    require(out >= 0 && out < node_count(), "forward: bad node id");
    last_needed_.assign(nodes_.size(), 0);
    mark_needed(out, last_needed_);
    for (NodeId id = 0; id <= out; ++id) {
        if (!last_needed_[static_cast<size_t>(id)]) continue;
        Node& n = nodes_[static_cast<size_t>(id)];
        switch (n.op) {
            case OpKind::leaf_param:
            case OpKind::leaf_input:
                require(n.evaluated, "forward: unbound input leaf " + std::to_string(id));
                break;
            case OpKind::leaf_index:
                require(n.evaluated, "forward: unbound index leaf " + std::to_string(id));
                break;
            default:
                eval_node(id);
        }
        apply_override(id);
        check_finite(id);
    }
    last_out_ = out;
    return nodes_[static_cast<size_t>(out)].value;
}

void Graph::eval_node(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.value.shape != n.shape) {
        n.value = Tensor::zeros(n.shape);
    }
    auto& out = n.value.data;
    switch (n.op) {
        case OpKind::add: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
            if (a.shape == b.shape) {
                for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] + b.data[i];
            } else {
                size_t bn = b.data.size();
                for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] + b.data[i % bn];
            }
            break;
        }
        case OpKind::mul: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
            for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * b.data[i];
            break;
        }
        case OpKind::matmul: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
            if (a.rank() == 2 && b.rank() == 2) {
                MapConstMat ma(a.data.data(), a.dim(0), a.dim(1));
                MapConstMat mb(b.data.data(), b.dim(0), b.dim(1));
                MapMat mc(out.data(), a.dim(0), b.dim(1));
                mc.noalias() = ma * mb;
            } else if (a.rank() == 3 && b.rank() == 3) {
                int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
                for (int i = 0; i < B; ++i) {
                    MapConstMat ma(a.data.data() + static_cast<size_t>(i) * M * K, M, K);
                    MapConstMat mb(b.data.data() + static_cast<size_t>(i) * K * N, K, N);
                    MapMat mc(out.data() + static_cast<size_t>(i) * M * N, M, N);
                    mc.noalias() = ma * mb;
                }
            } else {  // 3D x 2D
                int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
                MapConstMat ma(a.data.data(), static_cast<Eigen::Index>(B) * M, K);
                MapConstMat mb(b.data.data(), K, N);
                MapMat mc(out.data(), static_cast<Eigen::Index>(B) * M, N);
                mc.noalias() = ma * mb;
            }
            break;
        }
        case OpKind::transpose: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            int r = a.rank();
            int M = a.dim(r - 2), N = a.dim(r - 1);
            int64_t batches = a.numel() / (static_cast<int64_t>(M) * N);
            for (int64_t bi = 0; bi < batches; ++bi) {
                const double* src = a.data.data() + bi * M * N;
                double* dst = out.data() + bi * M * N;
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j)
                        dst[static_cast<size_t>(j) * M + i] = src[static_cast<size_t>(i) * N + j];
            }
            break;
        }
        case OpKind::scale: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * n.scalar;
            break;
        }
        case OpKind::softmax: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            int d = n.shape.back();
            int64_t rows = a.numel() / d;
            for (int64_t r = 0; r < rows; ++r) {
                const double* x = a.data.data() + r * d;
                double* y = out.data() + r * d;
                double m = x[0];
                for (int j = 1; j < d; ++j) m = std::max(m, x[j]);
                double s = 0.0;
                for (int j = 0; j < d; ++j) {
                    y[j] = std::exp(x[j] - m);
                    s += y[j];
                }
                for (int j = 0; j < d; ++j) y[j] /= s;
            }
            break;
        }
        case OpKind::layer_norm: {
            const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const Tensor& g = nodes_[static_cast<size_t>(n.inputs[1])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.inputs[2])].value;
            int d = n.shape.back();
            int64_t rows = x.numel() / d;
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = x.data.data() + r * d;
                double* y = out.data() + r * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) mu += xr[j];
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= d;
                double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                for (int j = 0; j < d; ++j) y[j] = (xr[j] - mu) * inv * g.data[j] + b.data[j];
            }
            break;
        }
        case OpKind::gelu: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            for (size_t i = 0; i < out.size(); ++i) {
                double x = a.data[i];
                out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
            }
            break;
        }
        case OpKind::embed_lookup: {
            const Tensor& t = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const auto& ids = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
            int V = t.dim(0), D = t.dim(1);
            for (size_t i = 0; i < ids.size(); ++i) {
                int tok = ids[i];
                require(tok >= 0 && tok < V, "embed_lookup: id out of range");
                std::memcpy(out.data() + i * static_cast<size_t>(D),
                            t.data.data() + static_cast<size_t>(tok) * D,
                            static_cast<size_t>(D) * sizeof(double));
            }
            break;
        }
        case OpKind::cross_entropy: {
            const Tensor& logits = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const auto& labels = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
            const double* w = nullptr;
            if (n.inputs.size() > 2) w = nodes_[static_cast<size_t>(n.inputs[2])].value.data.data();
            int V = logits.shape.back();
            int N = static_cast<int>(logits.numel() / V);
            double total = 0.0, wsum = 0.0;
            for (int i = 0; i < N; ++i) {
                int lab = labels[static_cast<size_t>(i)];
                require(lab >= 0 && lab < V, "cross_entropy: label out of range");
                const double* row = logits.data.data() + static_cast<size_t>(i) * V;
                double m = row[0];
                for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
                double s = 0.0;
                for (int j = 0; j < V; ++j) s += std::exp(row[j] - m);
                double lse = m + std::log(s);
                double wi = w ? w[i] : 1.0;
                total += wi * (lse - row[lab]);
                wsum += wi;
            }
            require(wsum > 0.0, "cross_entropy: zero total weight");
            out[0] = total / wsum;
            break;
        }
        case OpKind::slice: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const auto& sa = a.shape;
            int axis = n.axis;
            int64_t outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= sa[static_cast<size_t>(i)];
            for (size_t i = static_cast<size_t>(axis) + 1; i < sa.size(); ++i) inner *= sa[i];
            int len = n.end - n.begin;
            for (int64_t o = 0; o < outer; ++o) {
                const double* src =
                    a.data.data() + (o * sa[static_cast<size_t>(axis)] + n.begin) * inner;
                double* dst = out.data() + o * len * inner;
                std::memcpy(dst, src, static_cast<size_t>(len * inner) * sizeof(double));
            }
            break;
        }
        case OpKind::concat: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
            int axis = n.axis;
            int64_t outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= n.shape[static_cast<size_t>(i)];
            for (size_t i = static_cast<size_t>(axis) + 1; i < n.shape.size(); ++i)
                inner *= n.shape[i];
            int la = a.shape[static_cast<size_t>(axis)];
            int lb = b.shape[static_cast<size_t>(axis)];
            for (int64_t o = 0; o < outer; ++o) {
                std::memcpy(out.data() + o * (la + lb) * inner, a.data.data() + o * la * inner,
                            static_cast<size_t>(la * inner) * sizeof(double));
                std::memcpy(out.data() + (o * (la + lb) + la) * inner,
                            b.data.data() + o * lb * inner,
                            static_cast<size_t>(lb * inner) * sizeof(double));
            }
            break;
        }
        case OpKind::take_positions: {
            const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
            const auto& pos = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
            int B = x.dim(0), S = x.dim(1);
            int64_t row = x.numel() / (static_cast<int64_t>(B) * S);
            for (int b = 0; b < B; ++b) {
                int p = pos[static_cast<size_t>(b)];
                require(p >= 0 && p < S, "take_positions: position out of range");
                std::memcpy(out.data() + b * row,
                            x.data.data() + (static_cast<int64_t>(b) * S + p) * row,
                            static_cast<size_t>(row) * sizeof(double));
            }
            break;
        }
        case OpKind::sum: {
            const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
            double s = 0.0;
            for (double v : a.data) s += v;
            out[0] = s;
            break;
        }
        default:
            throw validation_error("eval of leaf node");
    }
    n.evaluated = true;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradMap Graph::backward(NodeId out, const Tensor& seed) {
    require(last_out_ == out, "backward: forward not evaluated for this output");
    require(seed.shape == node_shape(out), "backward: seed shape mismatch");
    require(overrides_.empty(), "backward: not supported with overrides active");

    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> has_grad(nodes_.size(), 0);
    auto grad_of = [&](NodeId id) -> Tensor& {
        if (!has_grad[static_cast<size_t>(id)]) {
            grads[static_cast<size_t>(id)] = Tensor::zeros(nodes_[static_cast<size_t>(id)].shape);
            has_grad[static_cast<size_t>(id)] = 1;
        }
        return grads[static_cast<size_t>(id)];
    };
    grad_of(out).data = seed.data;

    for (NodeId id = out; id >= 0; --id) {
        if (!last_needed_[static_cast<size_t>(id)] || !has_grad[static_cast<size_t>(id)]) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Tensor& g = grads[static_cast<size_t>(id)];
        switch (n.op) {
            case OpKind::leaf_param:
            case OpKind::leaf_input:
            case OpKind::leaf_index:
                break;
            case OpKind::add: {
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor& ga = grad_of(n.inputs[0]);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
                Tensor& gb = grad_of(n.inputs[1]);
                if (b.shape == n.shape) {
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
                } else {
                    size_t bn = gb.data.size();
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i % bn] += g.data[i];
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += g.data[i] * b.data[i];
                    gb.data[i] += g.data[i] * a.data[i];
                }
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                if (a.rank() == 2 && b.rank() == 2) {
                    MapConstMat ma(a.data.data(), a.dim(0), a.dim(1));
                    MapConstMat mb(b.data.data(), b.dim(0), b.dim(1));
                    MapConstMat mg(g.data.data(), a.dim(0), b.dim(1));
                    MapMat mga(ga.data.data(), a.dim(0), a.dim(1));
                    MapMat mgb(gb.data.data(), b.dim(0), b.dim(1));
                    mga.noalias() += mg * mb.transpose();
                    mgb.noalias() += ma.transpose() * mg;
                } else if (a.rank() == 3 && b.rank() == 3) {
                    int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
                    for (int i = 0; i < B; ++i) {
                        MapConstMat ma(a.data.data() + static_cast<size_t>(i) * M * K, M, K);
                        MapConstMat mb(b.data.data() + static_cast<size_t>(i) * K * N, K, N);
                        MapConstMat mg(g.data.data() + static_cast<size_t>(i) * M * N, M, N);
                        MapMat mga(ga.data.data() + static_cast<size_t>(i) * M * K, M, K);
                        MapMat mgb(gb.data.data() + static_cast<size_t>(i) * K * N, K, N);
                        mga.noalias() += mg * mb.transpose();
                        mgb.noalias() += ma.transpose() * mg;
                    }
                } else {
                    int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
                    MapConstMat ma(a.data.data(), static_cast<Eigen::Index>(B) * M, K);
                    MapConstMat mb(b.data.data(), K, N);
                    MapConstMat mg(g.data.data(), static_cast<Eigen::Index>(B) * M, N);
                    MapMat mga(ga.data.data(), static_cast<Eigen::Index>(B) * M, K);
                    MapMat mgb(gb.data.data(), K, N);
                    mga.noalias() += mg * mb.transpose();
                    mgb.noalias() += ma.transpose() * mg;
                }
                break;
            }
            case OpKind::transpose: {
                Tensor& ga = grad_of(n.inputs[0]);
                int r = n.value.rank();
                int M = n.shape[static_cast<size_t>(r - 2)], N = n.shape[static_cast<size_t>(r - 1)];
                int64_t batches = n.value.numel() / (static_cast<int64_t>(M) * N);
                for (int64_t bi = 0; bi < batches; ++bi) {
                    const double* src = g.data.data() + bi * M * N;  // M x N = out shape
                    double* dst = ga.data.data() + bi * M * N;       // N x M = input shape
                    for (int i = 0; i < M; ++i)
                        for (int j = 0; j < N; ++j)
                            dst[static_cast<size_t>(j) * M + i] +=
                                src[static_cast<size_t>(i) * N + j];
                }
                break;
            }
            case OpKind::scale: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.scalar;
                break;
            }
            case OpKind::softmax: {
                const Tensor& y = n.value;
                Tensor& ga = grad_of(n.inputs[0]);
                int d = n.shape.back();
                int64_t rows = y.numel() / d;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data.data() + r * d;
                    const double* gr = g.data.data() + r * d;
                    double* gx = ga.data.data() + r * d;
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
                    for (int j = 0; j < d; ++j) gx[j] += yr[j] * (gr[j] - dot);
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& gam = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor& gx = grad_of(n.inputs[0]);
                Tensor& gg = grad_of(n.inputs[1]);
                Tensor& gb = grad_of(n.inputs[2]);
                int d = n.shape.back();
                int64_t rows = x.numel() / d;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.data.data() + r * d;
                    const double* gr = g.data.data() + r * d;
                    double mu = 0.0;
                    for (int j = 0; j < d; ++j) mu += xr[j];
                    mu /= d;
                    double var = 0.0;
                    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= d;
                    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int j = 0; j < d; ++j) {
                        double xhat = (xr[j] - mu) * inv;
                        double dxhat = gr[j] * gam.data[static_cast<size_t>(j)];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        gg.data[static_cast<size_t>(j)] += gr[j] * xhat;
                        gb.data[static_cast<size_t>(j)] += gr[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    double* gxr = gx.data.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        double xhat = (xr[j] - mu) * inv;
                        double dxhat = gr[j] * gam.data[static_cast<size_t>(j)];
                        gxr[j] += inv * (dxhat - m1 - xhat * m2);
                    }
                }
                break;
            }
            case OpKind::gelu: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor& ga = grad_of(n.inputs[0]);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    double xi = x.data[i];
                    double d = 0.5 * (1.0 + std::erf(xi * kInvSqrt2)) +
                               xi * kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
                    ga.data[i] += g.data[i] * d;
                }
                break;
            }
            case OpKind::embed_lookup: {
                const auto& ids = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
                Tensor& gt = grad_of(n.inputs[0]);
                int D = gt.dim(1);
                for (size_t i = 0; i < ids.size(); ++i) {
                    double* dst = gt.data.data() + static_cast<size_t>(ids[i]) * D;
                    const double* src = g.data.data() + i * static_cast<size_t>(D);
                    for (int j = 0; j < D; ++j) dst[j] += src[j];
                }
                break;
            }
            case OpKind::cross_entropy: {
                const Tensor& logits = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const auto& labels = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
                const double* w = nullptr;
                if (n.inputs.size() > 2)
                    w = nodes_[static_cast<size_t>(n.inputs[2])].value.data.data();
                Tensor& gl = grad_of(n.inputs[0]);
                int V = logits.shape.back();
                int N = static_cast<int>(logits.numel() / V);
                double wsum = 0.0;
                for (int i = 0; i < N; ++i) wsum += w ? w[i] : 1.0;
                double go = g.data[0] / wsum;
                for (int i = 0; i < N; ++i) {
                    double wi = w ? w[i] : 1.0;
                    if (wi == 0.0) continue;
                    const double* row = logits.data.data() + static_cast<size_t>(i) * V;
                    double* grow = gl.data.data() + static_cast<size_t>(i) * V;
                    double m = row[0];
                    for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
                    double s = 0.0;
                    for (int j = 0; j < V; ++j) s += std::exp(row[j] - m);
                    for (int j = 0; j < V; ++j) {
                        double p = std::exp(row[j] - m) / s;
                        grow[j] += go * wi * p;
                    }
                    grow[labels[static_cast<size_t>(i)]] -= go * wi;
                }
                break;
            }
            case OpKind::slice: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor& ga = grad_of(n.inputs[0]);
                const auto& sa = a.shape;
                int axis = n.axis;
                int64_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= sa[static_cast<size_t>(i)];
                for (size_t i = static_cast<size_t>(axis) + 1; i < sa.size(); ++i) inner *= sa[i];
                int len = n.end - n.begin;
                for (int64_t o = 0; o < outer; ++o) {
                    double* dst =
                        ga.data.data() + (o * sa[static_cast<size_t>(axis)] + n.begin) * inner;
                    const double* src = g.data.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
                break;
            }
            case OpKind::concat: {
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                int axis = n.axis;
                int64_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= n.shape[static_cast<size_t>(i)];
                for (size_t i = static_cast<size_t>(axis) + 1; i < n.shape.size(); ++i)
                    inner *= n.shape[i];
                int la = ga.shape[static_cast<size_t>(axis)];
                int lb = gb.shape[static_cast<size_t>(axis)];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = g.data.data() + o * (la + lb) * inner;
                    double* da = ga.data.data() + o * la * inner;
                    double* db = gb.data.data() + o * lb * inner;
                    for (int64_t i = 0; i < la * inner; ++i) da[i] += src[i];
                    for (int64_t i = 0; i < lb * inner; ++i) db[i] += src[la * inner + i];
                }
                break;
            }
            case OpKind::take_positions: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const auto& pos = nodes_[static_cast<size_t>(n.inputs[1])].index_data;
                Tensor& gx = grad_of(n.inputs[0]);
                int B = x.dim(0), S = x.dim(1);
                int64_t row = x.numel() / (static_cast<int64_t>(B) * S);
                for (int b = 0; b < B; ++b) {
                    double* dst =
                        gx.data.data() +
                        (static_cast<int64_t>(b) * S + pos[static_cast<size_t>(b)]) * row;
                    const double* src = g.data.data() + b * row;
                    for (int64_t i = 0; i < row; ++i) dst[i] += src[i];
                }
                break;
            }
            case OpKind::sum: {
                Tensor& ga = grad_of(n.inputs[0]);
                double s = g.data[0];
                for (double& v : ga.data) v += s;
                break;
            }
        }
    }

    GradMap gm;
    for (NodeId id = 0; id <= out; ++id) {
        if (!last_needed_[static_cast<size_t>(id)]) continue;
        if (nodes_[static_cast<size_t>(id)].op != OpKind::leaf_param) continue;
        if (has_grad[static_cast<size_t>(id)]) {
            gm.emplace(id, std::move(grads[static_cast<size_t>(id)]));
        } else {
            gm.emplace(id, Tensor::zeros(nodes_[static_cast<size_t>(id)].shape));
        }
    }
    return gm;
}

double grad_check(Graph& g, NodeId out, NodeId leaf, double eps) {
    const Tensor& o = g.forward(out);
    if (o.numel() != 1) throw validation_error("grad_check: output must be scalar");
    GradMap gm = g.backward(out, Tensor::full(o.shape, 1.0));
    auto it = gm.find(leaf);
    Tensor analytic;
    if (it == gm.end()) {
        // constant graph w.r.t. this leaf
        analytic = Tensor::zeros(g.node_shape(leaf));
    } else {
        analytic = it->second;
    }
    Tensor base = g.value(leaf);
    double max_err = 0.0;
    for (size_t i = 0; i < base.data.size(); ++i) {
        Tensor t = base;
        t.data[i] = base.data[i] + eps;
        g.bind(leaf, t);
        double fp = g.forward(out).at(0);
        t.data[i] = base.data[i] - eps;
        g.bind(leaf, t);
        double fm = g.forward(out).at(0);
        double num = (fp - fm) / (2.0 * eps);
        double a = analytic.data[i];
        double err = std::abs(a - num) / (std::abs(a) + std::abs(num) + 1e-12);
        max_err = std::max(max_err, err);
    }
    g.bind(leaf, base);
    g.forward(out);
    return max_err;
}

}  // namespace milab
