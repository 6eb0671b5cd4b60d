#pragma once
#include <vector>

#include "icsteer/matrix.hpp"

namespace icsteer {

using NodeId = int;

// Reverse-mode tape over dense matrix ops.
//
// Values are computed eagerly as ops are recorded; backward() replays the
// records in exact reverse order, accumulating gradients additively. A node
// carries a gradient buffer only if it requires grad, which propagates from
// leaf() nodes; constant() nodes (for example frozen backbone weights) never
// receive gradient storage. backward() may be called more than once on the
// same tape (on different scalar nodes); gradients keep accumulating.
//
// Lifetime: constant() and leaf() reference external matrices by pointer; the
// caller keeps them alive and unchanged until the tape is dropped.
class Tape {
  public:
    // ---- inputs ----
    NodeId constant(const Matrix& m);
    NodeId leaf(const Matrix& m);

    // ---- ops ----
    // Rows of `table` gathered by id: out[t,:] = table[ids[t],:].
    NodeId embed(NodeId table, std::vector<int> ids);
    NodeId add(NodeId a, NodeId b);         // same shape
    NodeId scale(NodeId a, double s);
    NodeId add_rowvec(NodeId a, NodeId v);  // v is 1 x cols, broadcast over rows
    NodeId matmul(NodeId a, NodeId b);      // a (m x k) * b (k x n)
    NodeId matmul_bt(NodeId a, NodeId b);   // a (m x k) * b(n x k)^T
    NodeId slice_cols(NodeId a, int c0, int c1);
    NodeId slice_rows(NodeId a, int r0, int r1);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps);
    NodeId gelu(NodeId x);
    // In-place causal softmax semantics over a T x T score matrix.
    NodeId causal_softmax(NodeId scores);
    NodeId broadcast_row(NodeId v, int n_rows); // v is 1 x d -> n_rows x d

    // Norm-clipped residual injection, row-wise:
    //   u = h + scale[t] * delta;  out = u * min(1, rho*||h|| / ||u||).
    // The clip guarantees ||out|| <= rho*||h||. Degenerate row h = 0 with
    // delta != 0 clips to zero output (and contributes zero gradient).
    NodeId inject_clip(NodeId h, NodeId delta, double rho, std::vector<double> scales);

    // Weighted token cross-entropy at temperature 1 over logit rows:
    //   sum_t w[t] * (logsumexp(z_t) - z_t[y_t]) / sum_t w[t]   (scalar).
    // Rejects sum(w) == 0 with NumericError.
    NodeId ce_loss(NodeId logits, std::vector<int> targets, std::vector<double> weights);

    // Mean over rows of KL(teacher || student) restricted to the teacher's
    // top-K support, both sides at temperature tau, floored at 1e-12 and
    // renormalized. ids is T x K (row-major), teacher_p the matching
    // already-tempered teacher probabilities.
    NodeId topk_kl(NodeId logits, std::vector<int> ids, const Matrix& teacher_p, double tau);

    // a*x + b*y for two scalar (1x1) nodes.
    NodeId axpby(NodeId x, NodeId y, double a, double b);

    // ---- execution ----
    void backward(NodeId loss, double seed = 1.0);

    const Matrix& value(NodeId id) const;
    // Gradient of a node, or nullptr if never touched.
    const Matrix* grad(NodeId id) const;
    bool grad_allocated(NodeId id) const { return grad(id) != nullptr; }
    bool requires_grad(NodeId id) const;
    int size() const { return int(nodes_.size()); }

  private:
    enum class Op {
        Constant, Leaf, Embed, Add, Scale, AddRowVec, MatMul, MatMulBT,
        SliceCols, SliceRows, ConcatCols, LayerNorm, Gelu, CausalSoftmax,
        BroadcastRow, InjectClip, CeLoss, TopKKl, Axpby,
    };
    struct Node {
        Op op;
        std::vector<NodeId> in;
        Matrix val;                 // owned value (unused when ext set)
        const Matrix* ext = nullptr;
        bool rg = false;
        std::vector<int> ivec;      // ids / targets / slice bounds
        std::vector<double> dvec;   // weights / saved row stats
        double c0 = 0.0, c1 = 0.0;  // scalar op parameters
        Matrix aux;                 // saved probabilities etc.
        Matrix aux2;
    };

    const Matrix& v(NodeId id) const {
        const Node& n = nodes_[size_t(id)];
        return n.ext ? *n.ext : n.val;
    }
    Matrix& ensure_grad(NodeId id);
    NodeId push(Node n);
    void backward_node(NodeId id);

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_; // parallel to nodes_; empty = unallocated
};

} // namespace icsteer
