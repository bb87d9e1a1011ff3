#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ads/tensor.hpp"

namespace ads {

// A sequence span inside a packed batch: rows [offset, offset+len) of the
// packed activation matrix belong to one sequence.
struct SeqSpan {
  int64_t offset = 0;
  int64_t len = 0;
};

// Minimal reverse-mode tape over Tensor-granularity primitives. Each op
// records a closure that scatters the output cotangent into its parents.
// Coarse ops (matmul, attention, layernorm) keep the node count small, so
// the tape overhead is negligible next to the GEMMs.
//
// Usage: build the graph, call backward(root), read grad(id). A Tape is
// single-threaded; concurrent workers each own one.
class Tape {
 public:
  using Id = int32_t;

  Id leaf(Tensor value, const char* op = "leaf");

  const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad(Id id) const { return grads_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  // --- primitives -----------------------------------------------------
  Id matmul(Id a, Id b);     // [m,k] x [k,n]
  Id matmul_nt(Id a, Id b);  // [m,k] x [n,k]^T -> [m,n]
  Id add(Id a, Id b);        // same shape
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);  // elementwise
  Id scale(Id a, double s);
  Id add_row_broadcast(Id a, Id row);  // [n,d] + [d]
  Id sum(Id a);                        // -> scalar
  Id gelu(Id a);
  Id layer_norm(Id x, Id gain, Id bias);  // row-wise over [n,d]
  Id embedding(Id table, std::vector<int> ids);
  Id causal_attention(Id q, Id k, Id v, std::vector<SeqSpan> spans, int n_heads);
  Id log_softmax_rows(Id a);
  Id pick(Id a, int64_t row, int64_t col);  // -> scalar
  // loss = sum_t weights[t] * (logsumexp(logits[t]) - logits[t][targets[t]])
  Id weighted_cross_entropy(Id logits, std::vector<int> targets, std::vector<double> weights);

  // Seeds d(root)/d(root) = 1 (root must be scalar) and walks the tape.
  void backward(Id root);
  // Seeds an arbitrary cotangent on root instead.
  void backward(Id root, const Tensor& seed);

  // Scans node values for the first non-finite entry and throws NumericError
  // naming the op; no-op when everything is finite.
  void throw_if_nonfinite() const;

 private:
  struct Node {
    Tensor value;
    const char* op;
    std::function<void(Tape&)> backprop;  // null for leaves
  };

  Id push(Tensor value, const char* op, std::function<void(Tape&)> backprop);
  Tensor& grad_buf(Id id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace ads
