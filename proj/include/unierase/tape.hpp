#pragma once

// Reverse-mode differentiation over matrix-granular ops — the smallest
// surface that covers token training, v* optimization, and the fine-tuning
// losses. Ops are recorded eagerly (values computed at call time); grad()
// replays the record backward once, accumulating adjoints only for nodes on a
// path to a watched parameter. Unwatched leaves never get an adjoint.
//
// Fused ops (layernorm, causal_attention, cross_entropy_sum, kl_to_ref_rows)
// are analytic compositions of the primitive set (matmul/add/elementwise/
// softmax/log/gather) kept as single nodes for speed and numerical stability.
//
// One tape per thread; Vars are only valid on the tape that made them.

#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unierase/numerics.hpp"

namespace unierase {

using ParamId = int;

struct Var {
    int node = -1;
    uint32_t tape = 0;
    bool valid() const { return node >= 0; }
};

// (begin,len) row ranges marking separate sequences inside stacked inputs.
using RowSpans = std::vector<std::pair<int, int>>;

class GradTape {
public:
    GradTape();

    // Leaves.
    Var constant(Matrix m);
    Var param(const Matrix& m, ParamId pid);  // watched

    // Linear algebra.
    Var matmul(Var a, Var b);     // A·B
    Var matmul_nt(Var a, Var b);  // A·Bᵀ
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, double c);  // elementwise + c
    Var hadamard(Var a, Var b);
    Var sum_of(const std::vector<Var>& vs);  // elementwise sum, same shapes

    // Elementwise nonlinearities.
    Var gelu(Var a);
    Var log(Var a);
    Var logsigmoid(Var a);

    // Row-structured ops.
    Var softmax_rows(Var z);
    Var layernorm(Var x, Var gain);  // rowwise, eps 1e-5; gain is 1×cols
    Var gather_rows(Var table, std::vector<int> ids);
    Var add_to_row(Var base, int row, Var vec);  // base with row += vec (1×cols)
    Var sum_all(Var a);   // 1×1
    Var mean_all(Var a);  // 1×1

    // Multi-head causal self-attention over stacked sequences. q,k,v are R×d;
    // spans partition the R rows into sequences; masking is per span.
    Var causal_attention(Var q, Var k, Var v, int heads, RowSpans spans);

    // Σ_i −log softmax(logits[row positions[i]])[targets[i]]  → 1×1.
    Var cross_entropy_sum(Var logits, std::vector<int> positions,
                          std::vector<int> targets);

    // Σ_i KL( softmax(logits[positions[i]]) ‖ exp(ref_logprob row i) ) → 1×1.
    // ref_logprob is a constant (#positions × vocab) of log-probabilities.
    Var kl_to_ref_rows(Var logits, std::vector<int> positions,
                       Matrix ref_logprob);

    const Matrix& value(Var v) const;
    double scalar_value(Var v) const;  // value of a 1×1 var

    // Adjoints of `loss` (1×1) for every watched parameter that influences it.
    // Parameters recorded but not on a path to the loss map to zero matrices.
    std::unordered_map<ParamId, Matrix> grad(Var loss);

    void clear();  // drop all nodes; previously issued Vars become invalid
    size_t node_count() const;

    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

private:
    struct Node;
    struct Store;  // holds the node vector (Node is private to tape.cpp)
    int push(Node n);
    const Node& at(Var v) const;
    void check_own(Var v, const char* op) const;

    std::unique_ptr<Store> store_;
    uint32_t tape_id_;
};

}  // namespace unierase
