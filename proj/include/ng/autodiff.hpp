#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ng/tensor.hpp"

namespace ng {

// Reverse-mode automatic differentiation on an eager tape.
//
// Every operation appends a node holding its output value plus whatever the
// backward rule needs; backward() then returns the adjoint of a scalar
// output with respect to EVERY node, interior activations included. That
// per-node visibility is the whole point: neuron attribution reads
// gradients at hidden MLP activations, not just at leaf inputs.

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,          // elementwise
  kMatmul,       // [m,k]x[k,n]
  kMatmulBt,     // A * B^T, A:[m,k] B:[n,k]
  kAddRowvec,    // [m,n] + [n] broadcast over rows
  kScale,        // x * c
  kAddConst,     // x + c
  kGelu,
  kTanh,
  kSigmoid,
  kAbs,
  kRowTopK,  // keep the k largest entries per row, zero the rest
  kRowSoftmax,     // softmax per row, fused log-sum-exp form
  kRowLogSoftmax,  // log softmax per row
  kLayerNorm,      // (x, gain, bias), eps in aux
  kEmbed,          // (table), row ids in aux_ints
  kSelectRow,      // row r of a matrix -> vector
  kGather,         // elements of a vector by index list
  kPick,           // one element per row: out[i] = x[i, ids[i]]
  kLogSumExp,      // vector -> scalar
  kSum,            // all elements -> scalar
  kMean,           // all elements -> scalar
  kDot,            // vector . vector -> scalar
  kSliceCols,      // columns [c0, c1) of a matrix
  kConcatCols,     // concat matrices with equal row counts along columns
};

const char* op_name(OpKind k);

struct TapeNode {
  OpKind op = OpKind::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  double c0 = 0.0;               // op constant (scale factor, eps, ...)
  std::vector<int64_t> aux_ints; // token ids, gather indices, column bounds
  std::string name;              // optional; leaves and named outputs
};

class Tape {
public:
  // --- graph construction -------------------------------------------------
  int leaf(Tensor v, std::string name = "");
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int matmul(int a, int b);
  int matmul_bt(int a, int b);
  int add_rowvec(int a, int v);
  int scale(int a, double c);
  int add_const(int a, double c);
  int gelu(int a);
  int tanh_(int a);
  int sigmoid(int a);
  int abs_(int a);  // subgradient 0 at the kink
  int row_topk(int a, int64_t k);  // per-row top-k sparsification
  int row_softmax(int a);
  int row_log_softmax(int a);
  int layer_norm(int x, int gain, int bias, double eps = 1e-5);
  int embed(int table, const std::vector<int64_t>& ids);
  int select_row(int a, int64_t r);
  int gather(int a, const std::vector<int64_t>& ids);
  int pick(int a, const std::vector<int64_t>& row_ids);
  int logsumexp(int a);
  int sum(int a);
  int mean(int a);
  int dot(int a, int b);
  int slice_cols(int a, int64_t c0, int64_t c1);
  int concat_cols(const std::vector<int>& parts);

  // --- access --------------------------------------------------------------
  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  bool empty() const { return nodes_.empty(); }

  // Adjoint of a scalar output node w.r.t. every node on the tape, indexed
  // by node id. Nodes the output does not depend on get zero tensors.
  // Rejects non-scalar outputs.
  std::vector<Tensor> backward(int output) const;

private:
  int push(TapeNode n);
  const Tensor& in(const TapeNode& n, size_t i) const { return nodes_[static_cast<size_t>(n.inputs[i])].value; }
  std::vector<TapeNode> nodes_;
};

// --- straight-line graph programs -----------------------------------------
// Declarative op list used by the random-graph test corpus and the CLI-free
// evaluation entry point. Supported ops: add sub mul matmul gelu tanh
// sigmoid scale add_const sum mean dot row_softmax row_log_softmax
// logsumexp.
struct GraphProgram {
  struct Instr {
    std::string out;
    std::string op;
    std::vector<std::string> args;
    double c = 0.0;  // for scale / add_const
  };
  std::vector<Instr> instrs;
  std::vector<std::string> outputs;
};

struct EvalResult {
  std::map<std::string, Tensor> outputs;
  std::map<std::string, int> node_of;  // every named value -> tape node
  Tape tape;
};

// Executes the program on a fresh tape. Shape mismatches and unknown names
// are rejected with the offending instruction named.
EvalResult forward_eval(const GraphProgram& program, const std::map<std::string, Tensor>& inputs);

// --- finite-difference oracle ----------------------------------------------
// A differentiable scalar function: given a tape and the input leaf id,
// build the graph and return the scalar output node.
using ScalarFn = std::function<int(Tape&, int)>;

struct FdReport {
  double max_rel_err = 0.0;
  int64_t worst_coord = -1;
  bool nonfinite = false;      // f hit a non-finite value at a perturbed point
  int64_t nonfinite_coord = -1;
};

// Central-difference check of backward() at `point`. Relative error per
// coordinate is |analytic - central| / max(|analytic|, 1e-8).
FdReport finite_difference_check(const ScalarFn& f, const Tensor& point, double epsilon);

// --- shared forward math ---------------------------------------------------
// Raw-buffer primitives used by both the tape ops above and the hook-capable
// inference path, so the two forwards agree bit-for-bit.
namespace fwd {
void gelu(const double* x, double* y, size_t n);
void gelu_grad(const double* x, const double* dy, double* dx_accum, size_t n);
void row_log_softmax(const double* x, double* y, int64_t rows, int64_t cols);
void row_softmax(const double* x, double* y, int64_t rows, int64_t cols);
void layer_norm(const double* x, const double* gain, const double* bias, double* y, int64_t rows,
                int64_t cols, double eps);
// Keeps the k largest entries per row (ties to the lower index), zeroes the
// rest. In-place capable (x == y allowed).
void row_topk(const double* x, double* y, int64_t rows, int64_t cols, int64_t k);
}  // namespace fwd

}  // namespace ng
