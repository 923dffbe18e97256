#pragma once

// Reverse-mode autodiff over Tensor values.
//
// A Tape owns Nodes in creation order, which is already a valid topological
// order, so backward() is a single reverse sweep. Ops cache whatever their
// backward pass needs inside the closure. Frozen inputs (requires_grad ==
// false) receive no gradient work, which is how the fixed decoder stays
// untouched while gradients flow into the prefix that conditions it.

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mcg/tensor.hpp"

namespace mcg::nn {

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool touched = false;  // received some upstream gradient
    std::function<void(Node&)> back;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    // --- leaves -------------------------------------------------------------
    Node* leaf(Tensor value, bool requires_grad);
    // Leaf backed by a Param: value copied in, gradient harvested back into
    // param.grad by harvest(). The same Param may be bound once per tape.
    Node* param(Param& p);
    Node* frozen(const Param& p);
    Node* constant(Tensor value) { return leaf(std::move(value), false); }

    // --- elementwise / linear ------------------------------------------------
    Node* add(Node* a, Node* b);                 // same shape
    Node* sub(Node* a, Node* b);                 // same shape
    Node* scale(Node* a, double c);
    Node* add_bias(Node* a, Node* b);            // a[m,n] + b[1,n] broadcast over rows
    Node* matmul(Node* a, Node* b);              // [m,k] x [k,n]
    Node* matmul_nt(Node* a, Node* b);           // [m,k] x [n,k]^T -> [m,n]
    Node* tanh_(Node* a);
    Node* gelu(Node* a);                         // tanh approximation
    Node* layer_norm(Node* a, Node* gain, Node* bias, double eps = 1e-5);

    // --- structural ----------------------------------------------------------
    Node* embed(Node* table, const std::vector<int>& ids);       // gather rows
    Node* slice_rows(Node* a, int first, int count);
    Node* slice_cols(Node* a, int first, int count);
    Node* concat_rows(Node* a, Node* b);
    Node* concat_cols(const std::vector<Node*>& parts);
    Node* mean_rows(Node* a);                                    // [m,n] -> [1,n]
    Node* mean_of(const std::vector<Node*>& rows);               // n x [1,d] -> [1,d]
    // Gather arbitrary flat elements into a new shape (backward scatter-adds).
    Node* gather(Node* a, std::vector<std::size_t> idx, std::vector<int> out_shape);

    // --- attention helper ----------------------------------------------------
    // Row-wise softmax where row i sees only the first valid[i] columns;
    // masked columns get probability zero.
    Node* masked_softmax_rows(Node* scores, std::vector<int> valid);

    // --- reductions / losses --------------------------------------------------
    Node* sum_all(Node* a);                                       // -> [1]
    Node* add_scalars(const std::vector<Node*>& xs);              // sum of [1] nodes
    Node* sum_sq_diff(Node* a, Node* b);                          // ||a-b||^2 -> [1]
    // max(||a-b|| - margin, 0). Gradient is zero on the flat side and
    // well-defined at a == b (the hinge is inactive there for margin > 0).
    Node* euclidean_hinge(Node* a, Node* b, double margin);
    // Sum over rows of -log softmax(logits_row)[target_row].
    Node* cross_entropy_rows(Node* logits, std::vector<int> targets);

    // --- execution ------------------------------------------------------------
    void backward(Node* root);
    // Add each param-bound leaf's gradient into its Param::grad.
    void harvest();

private:
    Node* alloc(std::vector<int> shape, bool requires_grad);

    std::deque<Node> nodes_;
    std::vector<std::pair<Param*, Node*>> bound_;
};

// Numerically stable softmax into out[0..n), returns log(sum exp) offset term.
void softmax_row(const double* logits, double* out, int n);

}  // namespace mcg::nn
