#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "less/mat.hpp"
#include "less/rng.hpp"

namespace less::ad {

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

// Matrix-granular reverse-mode tape. Leaves are either constants (never receive
// a gradient) or parameters. Each op records its output value and a closure
// that pushes the output gradient into its inputs.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Mat value);
  Var parameter(Mat value);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of the last backward() root w.r.t. v. Empty Mat for untracked
  // nodes or nodes the root does not depend on.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  std::size_t size() const { return nodes_.size(); }

  // Runs the reverse sweep from a 1x1 root. Returns the number of ops whose
  // backward closure was invoked.
  std::size_t backward(Var root);

  // Used by op implementations.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn);
  Mat& grad_acc(std::size_t id);
  bool tracks(std::size_t id) const { return nodes_[id].requires_grad; }
  const Mat& value_at(std::size_t id) const { return nodes_[id].value; }
  const Mat& grad_at(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

Var matmul(Tape& t, Var a, Var b);
Var matmul_nt(Tape& t, Var a, Var b);  // a·bᵀ
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise
Var scale(Tape& t, Var a, double s);
Var scale_by(Tape& t, Var a, Var s);  // s is a 1x1 node
Var scale_rows(Tape& t, Var a, std::vector<double> factors);
Var gelu(Tape& t, Var a);
Var abs(Tape& t, Var a);
Var row_softmax(Tape& t, Var a);
Var row_normalize(Tape& t, Var a);  // each row divided by its sum
Var dropout(Tape& t, Var a, double rate, Rng& rng);
Var sum(Tape& t, Var a);
Var mean_square(Tape& t, Var a);

// Gathers rows of `table` (e.g. token embeddings).
Var gather_rows(Tape& t, Var table, std::vector<std::size_t> indices);

// Layer norm over each row (no bias), multiplied by a 1xC gain.
Var layer_norm(Tape& t, Var x, Var gain, double eps = 1e-5);

// Multi-head causal softmax attention over `n_seq` stacked sequences of length
// `seq_len`. Q, K, V are (n_seq·seq_len)×(n_heads·head_dim).
Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len);

// Mean token cross-entropy of row-wise logits against integer targets.
Var cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets);

}  // namespace less::ad
