#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "decisive/tensor.hpp"

namespace decisive {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  bool valid() const { return graph != nullptr && id >= 0; }
};

/// Tape of recorded operations. Node ids are assigned in creation order, which
/// is also a topological order, so backward is a single reverse sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(int id) const { return nodes_.at(id).value; }
  /// Gradient after backward(); zero-filled for nodes the root does not reach.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }

  /// Reverse sweep from a scalar root. Throws InputError if root is not scalar.
  void backward(Var root);

  // --- op implementation interface ---
  Var record(const char* op, Tensor value, std::initializer_list<Var> parents,
             BackwardFn fn);
  /// Gradient accumulator for node `id`, allocated on first use.
  Tensor& grad_buffer(int id);

  // Kink bookkeeping for piecewise-linear ops, consumed by grad_check.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  void note_kinks(std::span<const double> inputs);
  const std::vector<std::uint8_t>& kink_pattern() const { return kinks_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::string op;
  };

  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  std::vector<std::uint8_t> kinks_;
};

namespace ops {

enum class Padding { kSame, kValid };

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var square(Var a);
Var relu(Var a);
/// [x]_+ on a loss margin; identical to relu but named for traces.
Var hinge(Var a);

/// Rank-2 matrix product.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
/// Adds vector v (length = last extent of a) to every row of a.
Var add_row(Var a, Var v);
/// Selects rows of a (row view) by index.
Var gather_rows(Var a, std::vector<std::size_t> indices);

/// 3x3 stride-1 convolution. x: [B,H,W,Cin], kernel: [3,3,Cin,Cout].
Var conv2d(Var x, Var kernel, Padding padding = Padding::kSame);
/// Per-channel 3x3 mean over in-bounds neighbours. x: [H,W,C].
Var box_filter3(Var x);

/// Norms below this floor are clamped to it, so zero rows map to zero.
inline constexpr double kNormFloor = 1e-12;
/// Each row divided by max(its L2 norm, kNormFloor).
Var l2_normalize(Var a);
/// Row-wise cosine similarity of equally shaped operands; shape [rows].
Var cosine_sim(Var a, Var b);
/// Cosine similarity of every row of a with every row of b; [rows_a, rows_b].
Var cosine_sim_matrix(Var a, Var b);

/// Softmax along the last axis of a / temperature. `mask` (optional, 0/1) is
/// either a's shape or a single row that applies to all rows; masked entries
/// get probability exactly 0. A fully masked row throws NumericError.
Var softmax(Var a, double temperature = 1.0, const Tensor* mask = nullptr);

Var sum(Var a);
Var mean(Var a);
/// Sum of entries where mask != 0. Throws InputError on an empty mask.
Var masked_sum(Var a, const Tensor& mask);
Var masked_mean(Var a, const Tensor& mask);
/// Sum along the last axis; shape [rows].
Var sum_last(Var a);
/// Column sums of a rank-2 tensor; shape [cols].
Var sum_first(Var a);

}  // namespace ops

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// A piecewise-linear kink lies within the stencil around x for some
  /// coordinate; those coordinates are left out of max_rel_error.
  bool non_smooth = false;
  std::size_t worst_index = 0;
};

using ScalarFn = std::function<Var(Graph&, Var)>;

enum class Stencil { kThreePoint, kFivePoint };

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
/// numeric from a central difference with step eps. The five-point stencil
/// tolerates a larger step, which keeps roundoff off tiny gradient entries.
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-3,
                           Stencil stencil = Stencil::kFivePoint);

}  // namespace decisive
