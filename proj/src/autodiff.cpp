#include "ng/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ng/kernels.hpp"

namespace ng {

namespace {

constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string("op '") + op + "': " + detail);
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) shape_error(op, "expected rank-2 tensor, got " + t.shape_str());
}

void require_rank1(const char* op, const Tensor& t) {
  if (t.rank() != 1) shape_error(op, "expected rank-1 tensor, got " + t.shape_str());
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulBt: return "matmul_bt";
    case OpKind::kAddRowvec: return "add_rowvec";
    case OpKind::kScale: return "scale";
    case OpKind::kAddConst: return "add_const";
    case OpKind::kGelu: return "gelu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kAbs: return "abs";
    case OpKind::kRowTopK: return "row_topk";
    case OpKind::kRowSoftmax: return "row_softmax";
    case OpKind::kRowLogSoftmax: return "row_log_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kEmbed: return "embed";
    case OpKind::kSelectRow: return "select_row";
    case OpKind::kGather: return "gather";
    case OpKind::kPick: return "pick";
    case OpKind::kLogSumExp: return "logsumexp";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kDot: return "dot";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
  }
  return "?";
}

// --- shared forward math -----------------------------------------------------

namespace fwd {

void gelu(const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    double v = x[i];
    double u = kGeluC * (v + kGeluA * v * v * v);
    y[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
}

void gelu_grad(const double* x, const double* dy, double* dx_accum, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    double v = x[i];
    double u = kGeluC * (v + kGeluA * v * v * v);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    double g = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    dx_accum[i] += g * dy[i];
  }
}

void row_log_softmax(const double* x, double* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    double lse = mx + std::log(sum);
    for (int64_t j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
}

void row_softmax(const double* x, double* y, int64_t rows, int64_t cols) {
  // exp of the fused log-sum-exp form; stable at any logit scale
  row_log_softmax(x, y, rows, cols);
  for (int64_t i = 0; i < rows * cols; ++i) y[i] = std::exp(y[i]);
}

void row_topk(const double* x, double* y, int64_t rows, int64_t cols, int64_t k) {
  if (k >= cols) {
    if (y != x) std::copy_n(x, rows * cols, y);
    return;
  }
  std::vector<int64_t> order(static_cast<size_t>(cols));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    for (int64_t j = 0; j < cols; ++j) order[static_cast<size_t>(j)] = j;
    std::nth_element(order.begin(), order.begin() + k, order.end(), [&](int64_t a, int64_t b) {
      if (xr[a] != xr[b]) return xr[a] > xr[b];
      return a < b;  // deterministic tie-break
    });
    // membership of the kept set is what matters, not its internal order
    std::vector<char> keep(static_cast<size_t>(cols), 0);
    for (int64_t j = 0; j < k; ++j) keep[static_cast<size_t>(order[static_cast<size_t>(j)])] = 1;
    for (int64_t j = 0; j < cols; ++j) yr[j] = keep[static_cast<size_t>(j)] ? xr[j] : 0.0;
  }
}

void layer_norm(const double* x, const double* gain, const double* bias, double* y, int64_t rows,
                int64_t cols, double eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double rstd = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
  }
}

}  // namespace fwd

// --- tape construction -------------------------------------------------------

int Tape::push(TapeNode n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor v, std::string name) {
  TapeNode n;
  n.op = OpKind::kLeaf;
  n.value = std::move(v);
  n.name = std::move(name);
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) shape_error("add", ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = Tensor(ta.shape);
  kernels::active().add(ta.data.data(), tb.data.data(), n.value.data.data(), ta.data.size());
  return push(std::move(n));
}

int Tape::sub(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) shape_error("sub", ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = OpKind::kSub;
  n.inputs = {a, b};
  n.value = Tensor(ta.shape);
  kernels::active().sub(ta.data.data(), tb.data.data(), n.value.data.data(), ta.data.size());
  return push(std::move(n));
}

int Tape::mul(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) shape_error("mul", ta.shape_str() + " vs " + tb.shape_str());
  TapeNode n;
  n.op = OpKind::kMul;
  n.inputs = {a, b};
  n.value = Tensor(ta.shape);
  kernels::active().mul(ta.data.data(), tb.data.data(), n.value.data.data(), ta.data.size());
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2("matmul", ta);
  require_rank2("matmul", tb);
  if (ta.cols() != tb.rows())
    shape_error("matmul", "inner dims differ: " + ta.shape_str() + " x " + tb.shape_str());
  TapeNode n;
  n.op = OpKind::kMatmul;
  n.inputs = {a, b};
  n.value = Tensor({ta.rows(), tb.cols()});
  kernels::active().matmul(ta.data.data(), tb.data.data(), n.value.data.data(), static_cast<int>(ta.rows()),
                           static_cast<int>(ta.cols()), static_cast<int>(tb.cols()), false);
  return push(std::move(n));
}

int Tape::matmul_bt(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2("matmul_bt", ta);
  require_rank2("matmul_bt", tb);
  if (ta.cols() != tb.cols())
    shape_error("matmul_bt", "inner dims differ: " + ta.shape_str() + " x " + tb.shape_str() + "^T");
  TapeNode n;
  n.op = OpKind::kMatmulBt;
  n.inputs = {a, b};
  n.value = Tensor({ta.rows(), tb.rows()});
  kernels::matmul_a_bt(ta.data.data(), tb.data.data(), n.value.data.data(), static_cast<int>(ta.rows()),
                       static_cast<int>(ta.cols()), static_cast<int>(tb.rows()), false);
  return push(std::move(n));
}

int Tape::add_rowvec(int a, int v) {
  const Tensor& ta = value(a);
  const Tensor& tv = value(v);
  require_rank2("add_rowvec", ta);
  require_rank1("add_rowvec", tv);
  if (ta.cols() != tv.numel())
    shape_error("add_rowvec", ta.shape_str() + " + " + tv.shape_str());
  TapeNode n;
  n.op = OpKind::kAddRowvec;
  n.inputs = {a, v};
  n.value = Tensor(ta.shape);
  for (int64_t r = 0; r < ta.rows(); ++r)
    kernels::active().add(ta.data.data() + r * ta.cols(), tv.data.data(),
                          n.value.data.data() + r * ta.cols(), static_cast<size_t>(ta.cols()));
  return push(std::move(n));
}

int Tape::scale(int a, double c) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kScale;
  n.inputs = {a};
  n.c0 = c;
  n.value = Tensor(ta.shape);
  kernels::active().scale(ta.data.data(), c, n.value.data.data(), ta.data.size());
  return push(std::move(n));
}

int Tape::add_const(int a, double c) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kAddConst;
  n.inputs = {a};
  n.c0 = c;
  n.value = ta;
  for (auto& x : n.value.data) x += c;
  return push(std::move(n));
}

int Tape::gelu(int a) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kGelu;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  fwd::gelu(ta.data.data(), n.value.data.data(), ta.data.size());
  return push(std::move(n));
}

int Tape::tanh_(int a) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kTanh;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.value.data[i] = std::tanh(ta.data[i]);
  return push(std::move(n));
}

int Tape::sigmoid(int a) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kSigmoid;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.value.data[i] = 1.0 / (1.0 + std::exp(-ta.data[i]));
  return push(std::move(n));
}

int Tape::abs_(int a) {
  const Tensor& ta = value(a);
  TapeNode n;
  n.op = OpKind::kAbs;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.value.data[i] = std::abs(ta.data[i]);
  return push(std::move(n));
}

int Tape::row_topk(int a, int64_t k) {
  const Tensor& ta = value(a);
  require_rank2("row_topk", ta);
  if (k < 1) shape_error("row_topk", "k must be >= 1");
  TapeNode n;
  n.op = OpKind::kRowTopK;
  n.inputs = {a};
  n.aux_ints = {k};
  n.value = Tensor(ta.shape);
  fwd::row_topk(ta.data.data(), n.value.data.data(), ta.rows(), ta.cols(), k);
  return push(std::move(n));
}

int Tape::row_softmax(int a) {
  const Tensor& ta = value(a);
  require_rank2("row_softmax", ta);
  TapeNode n;
  n.op = OpKind::kRowSoftmax;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  fwd::row_softmax(ta.data.data(), n.value.data.data(), ta.rows(), ta.cols());
  return push(std::move(n));
}

int Tape::row_log_softmax(int a) {
  const Tensor& ta = value(a);
  require_rank2("row_log_softmax", ta);
  TapeNode n;
  n.op = OpKind::kRowLogSoftmax;
  n.inputs = {a};
  n.value = Tensor(ta.shape);
  fwd::row_log_softmax(ta.data.data(), n.value.data.data(), ta.rows(), ta.cols());
  return push(std::move(n));
}

int Tape::layer_norm(int x, int gain, int bias, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  require_rank2("layer_norm", tx);
  require_rank1("layer_norm", tg);
  require_rank1("layer_norm", tb);
  if (tg.numel() != tx.cols() || tb.numel() != tx.cols())
    shape_error("layer_norm", "params " + tg.shape_str() + "/" + tb.shape_str() + " vs x " + tx.shape_str());
  TapeNode n;
  n.op = OpKind::kLayerNorm;
  n.inputs = {x, gain, bias};
  n.c0 = eps;
  n.value = Tensor(tx.shape);
  fwd::layer_norm(tx.data.data(), tg.data.data(), tb.data.data(), n.value.data.data(), tx.rows(), tx.cols(),
                  eps);
  return push(std::move(n));
}

int Tape::embed(int table, const std::vector<int64_t>& ids) {
  const Tensor& tt = value(table);
  require_rank2("embed", tt);
  for (int64_t id : ids)
    if (id < 0 || id >= tt.rows()) shape_error("embed", "row id " + std::to_string(id) + " out of range");
  TapeNode n;
  n.op = OpKind::kEmbed;
  n.inputs = {table};
  n.aux_ints = ids;
  n.value = Tensor({static_cast<int64_t>(ids.size()), tt.cols()});
  for (size_t t = 0; t < ids.size(); ++t)
    std::copy_n(tt.data.data() + ids[t] * tt.cols(), tt.cols(), n.value.data.data() + static_cast<int64_t>(t) * tt.cols());
  return push(std::move(n));
}

int Tape::select_row(int a, int64_t r) {
  const Tensor& ta = value(a);
  require_rank2("select_row", ta);
  if (r < 0 || r >= ta.rows()) shape_error("select_row", "row " + std::to_string(r) + " out of range");
  TapeNode n;
  n.op = OpKind::kSelectRow;
  n.inputs = {a};
  n.aux_ints = {r};
  n.value = Tensor({ta.cols()});
  std::copy_n(ta.data.data() + r * ta.cols(), ta.cols(), n.value.data.data());
  return push(std::move(n));
}

int Tape::gather(int a, const std::vector<int64_t>& ids) {
  const Tensor& ta = value(a);
  require_rank1("gather", ta);
  for (int64_t id : ids)
    if (id < 0 || id >= ta.numel()) shape_error("gather", "index " + std::to_string(id) + " out of range");
  TapeNode n;
  n.op = OpKind::kGather;
  n.inputs = {a};
  n.aux_ints = ids;
  n.value = Tensor({static_cast<int64_t>(ids.size())});
  for (size_t i = 0; i < ids.size(); ++i) n.value.data[i] = ta.data[static_cast<size_t>(ids[i])];
  return push(std::move(n));
}

int Tape::pick(int a, const std::vector<int64_t>& row_ids) {
  const Tensor& ta = value(a);
  require_rank2("pick", ta);
  if (static_cast<int64_t>(row_ids.size()) != ta.rows())
    shape_error("pick", "need one index per row");
  for (int64_t id : row_ids)
    if (id < 0 || id >= ta.cols()) shape_error("pick", "column " + std::to_string(id) + " out of range");
  TapeNode n;
  n.op = OpKind::kPick;
  n.inputs = {a};
  n.aux_ints = row_ids;
  n.value = Tensor({ta.rows()});
  for (int64_t r = 0; r < ta.rows(); ++r) n.value.data[static_cast<size_t>(r)] = ta.at(r, row_ids[static_cast<size_t>(r)]);
  return push(std::move(n));
}

int Tape::logsumexp(int a) {
  const Tensor& ta = value(a);
  require_rank1("logsumexp", ta);
  if (ta.numel() == 0) shape_error("logsumexp", "empty input");
  double mx = ta.data[0];
  for (double v : ta.data) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : ta.data) s += std::exp(v - mx);
  TapeNode n;
  n.op = OpKind::kLogSumExp;
  n.inputs = {a};
  n.value = Tensor::scalar(mx + std::log(s));
  return push(std::move(n));
}

int Tape::sum(int a) {
  const Tensor& ta = value(a);
  double s = 0.0;
  for (double v : ta.data) s += v;
  TapeNode n;
  n.op = OpKind::kSum;
  n.inputs = {a};
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

int Tape::mean(int a) {
  const Tensor& ta = value(a);
  if (ta.numel() == 0) shape_error("mean", "empty input");
  double s = 0.0;
  for (double v : ta.data) s += v;
  TapeNode n;
  n.op = OpKind::kMean;
  n.inputs = {a};
  n.value = Tensor::scalar(s / static_cast<double>(ta.numel()));
  return push(std::move(n));
}

int Tape::dot(int a, int b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank1("dot", ta);
  require_rank1("dot", tb);
  if (ta.numel() != tb.numel()) shape_error("dot", ta.shape_str() + " . " + tb.shape_str());
  double s = 0.0;
  for (int64_t i = 0; i < ta.numel(); ++i) s += ta.at(i) * tb.at(i);
  TapeNode n;
  n.op = OpKind::kDot;
  n.inputs = {a, b};
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

int Tape::slice_cols(int a, int64_t c0, int64_t c1) {
  const Tensor& ta = value(a);
  require_rank2("slice_cols", ta);
  if (c0 < 0 || c1 > ta.cols() || c0 >= c1)
    shape_error("slice_cols", "bad column range [" + std::to_string(c0) + "," + std::to_string(c1) + ")");
  TapeNode n;
  n.op = OpKind::kSliceCols;
  n.inputs = {a};
  n.aux_ints = {c0, c1};
  n.value = Tensor({ta.rows(), c1 - c0});
  for (int64_t r = 0; r < ta.rows(); ++r)
    std::copy_n(ta.data.data() + r * ta.cols() + c0, c1 - c0, n.value.data.data() + r * (c1 - c0));
  return push(std::move(n));
}

int Tape::concat_cols(const std::vector<int>& parts) {
  if (parts.empty()) shape_error("concat_cols", "no inputs");
  int64_t rows = value(parts[0]).rows();
  int64_t cols = 0;
  for (int p : parts) {
    require_rank2("concat_cols", value(p));
    if (value(p).rows() != rows) shape_error("concat_cols", "row counts differ");
    cols += value(p).cols();
  }
  TapeNode n;
  n.op = OpKind::kConcatCols;
  n.inputs = parts;
  n.value = Tensor({rows, cols});
  int64_t off = 0;
  for (int p : parts) {
    const Tensor& tp = value(p);
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(tp.data.data() + r * tp.cols(), tp.cols(), n.value.data.data() + r * cols + off);
    off += tp.cols();
  }
  return push(std::move(n));
}

// --- backward ----------------------------------------------------------------

std::vector<Tensor> Tape::backward(int output) const {
  if (output < 0 || output >= size()) throw std::invalid_argument("backward: output node out of range");
  if (value(output).numel() != 1 || !value(output).is_scalar())
    throw std::invalid_argument("backward: output must be a scalar node, got shape " +
                                value(output).shape_str());

  std::vector<Tensor> adj(nodes_.size());
  auto grad_of = [&](int id) -> Tensor& {
    Tensor& g = adj[static_cast<size_t>(id)];
    if (g.data.empty() && value(id).numel() > 0) g = Tensor::zeros(value(id).shape);
    return g;
  };
  grad_of(output).data[0] = 1.0;

  const auto& K = kernels::active();
  for (int id = output; id >= 0; --id) {
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    const Tensor& dy = adj[static_cast<size_t>(id)];
    if (dy.data.empty()) continue;  // output does not depend on this node
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        K.axpy(1.0, dy.data.data(), grad_of(n.inputs[0]).data.data(), dy.data.size());
        K.axpy(1.0, dy.data.data(), grad_of(n.inputs[1]).data.data(), dy.data.size());
        break;
      }
      case OpKind::kSub: {
        K.axpy(1.0, dy.data.data(), grad_of(n.inputs[0]).data.data(), dy.data.size());
        K.axpy(-1.0, dy.data.data(), grad_of(n.inputs[1]).data.data(), dy.data.size());
        break;
      }
      case OpKind::kMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        Tensor& da = grad_of(n.inputs[0]);
        Tensor& db = grad_of(n.inputs[1]);
        for (size_t i = 0; i < dy.data.size(); ++i) {
          da.data[i] += dy.data[i] * b.data[i];
          db.data[i] += dy.data[i] * a.data[i];
        }
        break;
      }
      case OpKind::kMatmul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        int m = static_cast<int>(a.rows()), k = static_cast<int>(a.cols()), nn = static_cast<int>(b.cols());
        // dA += dC * B^T ; dB += A^T * dC
        kernels::matmul_a_bt(dy.data.data(), b.data.data(), grad_of(n.inputs[0]).data.data(), m, nn, k, true);
        K.matmul_at_b(a.data.data(), dy.data.data(), grad_of(n.inputs[1]).data.data(), m, k, nn, true);
        break;
      }
      case OpKind::kMatmulBt: {
        // C = A * B^T, A:[m,k], B:[n,k], C:[m,n]
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        int m = static_cast<int>(a.rows()), k = static_cast<int>(a.cols()), nn = static_cast<int>(b.rows());
        // dA += dC * B ; dB += dC^T * A
        K.matmul(dy.data.data(), b.data.data(), grad_of(n.inputs[0]).data.data(), m, nn, k, true);
        K.matmul_at_b(dy.data.data(), a.data.data(), grad_of(n.inputs[1]).data.data(), m, nn, k, true);
        break;
      }
      case OpKind::kAddRowvec: {
        const Tensor& a = in(n, 0);
        Tensor& da = grad_of(n.inputs[0]);
        Tensor& dv = grad_of(n.inputs[1]);
        K.axpy(1.0, dy.data.data(), da.data.data(), dy.data.size());
        for (int64_t r = 0; r < a.rows(); ++r)
          K.axpy(1.0, dy.data.data() + r * a.cols(), dv.data.data(), static_cast<size_t>(a.cols()));
        break;
      }
      case OpKind::kScale: {
        K.axpy(n.c0, dy.data.data(), grad_of(n.inputs[0]).data.data(), dy.data.size());
        break;
      }
      case OpKind::kAddConst: {
        K.axpy(1.0, dy.data.data(), grad_of(n.inputs[0]).data.data(), dy.data.size());
        break;
      }
      case OpKind::kGelu: {
        fwd::gelu_grad(in(n, 0).data.data(), dy.data.data(), grad_of(n.inputs[0]).data.data(),
                       dy.data.size());
        break;
      }
      case OpKind::kTanh: {
        Tensor& da = grad_of(n.inputs[0]);
        for (size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * (1.0 - n.value.data[i] * n.value.data[i]);
        break;
      }
      case OpKind::kSigmoid: {
        Tensor& da = grad_of(n.inputs[0]);
        for (size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * n.value.data[i] * (1.0 - n.value.data[i]);
        break;
      }
      case OpKind::kRowTopK: {
        Tensor& da = grad_of(n.inputs[0]);
        for (size_t i = 0; i < dy.data.size(); ++i)
          if (n.value.data[i] != 0.0) da.data[i] += dy.data[i];
        break;
      }
      case OpKind::kAbs: {
        const Tensor& a = in(n, 0);
        Tensor& da = grad_of(n.inputs[0]);
        for (size_t i = 0; i < dy.data.size(); ++i) {
          double s = a.data[i] > 0.0 ? 1.0 : (a.data[i] < 0.0 ? -1.0 : 0.0);
          da.data[i] += dy.data[i] * s;
        }
        break;
      }
      case OpKind::kRowSoftmax: {
        const Tensor& p = n.value;
        Tensor& da = grad_of(n.inputs[0]);
        for (int64_t r = 0; r < p.rows(); ++r) {
          const double* pr = p.data.data() + r * p.cols();
          const double* dr = dy.data.data() + r * p.cols();
          double s = 0.0;
          for (int64_t j = 0; j < p.cols(); ++j) s += dr[j] * pr[j];
          double* dar = da.data.data() + r * p.cols();
          for (int64_t j = 0; j < p.cols(); ++j) dar[j] += pr[j] * (dr[j] - s);
        }
        break;
      }
      case OpKind::kRowLogSoftmax: {
        const Tensor& y = n.value;
        Tensor& da = grad_of(n.inputs[0]);
        for (int64_t r = 0; r < y.rows(); ++r) {
          const double* yr = y.data.data() + r * y.cols();
          const double* dr = dy.data.data() + r * y.cols();
          double s = 0.0;
          for (int64_t j = 0; j < y.cols(); ++j) s += dr[j];
          double* dar = da.data.data() + r * y.cols();
          for (int64_t j = 0; j < y.cols(); ++j) dar[j] += dr[j] - std::exp(yr[j]) * s;
        }
        break;
      }
      case OpKind::kLayerNorm: {
        const Tensor& x = in(n, 0);
        const Tensor& g = in(n, 1);
        Tensor& dx = grad_of(n.inputs[0]);
        Tensor& dg = grad_of(n.inputs[1]);
        Tensor& db = grad_of(n.inputs[2]);
        int64_t cols = x.cols();
        double inv_n = 1.0 / static_cast<double>(cols);
        for (int64_t r = 0; r < x.rows(); ++r) {
          const double* xr = x.data.data() + r * cols;
          const double* dr = dy.data.data() + r * cols;
          double mean = 0.0;
          for (int64_t j = 0; j < cols; ++j) mean += xr[j];
          mean *= inv_n;
          double var = 0.0;
          for (int64_t j = 0; j < cols; ++j) {
            double d = xr[j] - mean;
            var += d * d;
          }
          var *= inv_n;
          double rstd = 1.0 / std::sqrt(var + n.c0);
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int64_t j = 0; j < cols; ++j) {
            double xh = (xr[j] - mean) * rstd;
            double dxh = dr[j] * g.data[static_cast<size_t>(j)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dg.data[static_cast<size_t>(j)] += dr[j] * xh;
            db.data[static_cast<size_t>(j)] += dr[j];
          }
          double* dxr = dx.data.data() + r * cols;
          for (int64_t j = 0; j < cols; ++j) {
            double xh = (xr[j] - mean) * rstd;
            double dxh = dr[j] * g.data[static_cast<size_t>(j)];
            dxr[j] += rstd * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
          }
        }
        break;
      }
      case OpKind::kEmbed: {
        const Tensor& table = in(n, 0);
        Tensor& dt = grad_of(n.inputs[0]);
        int64_t cols = table.cols();
        for (size_t t = 0; t < n.aux_ints.size(); ++t)
          K.axpy(1.0, dy.data.data() + static_cast<int64_t>(t) * cols,
                 dt.data.data() + n.aux_ints[t] * cols, static_cast<size_t>(cols));
        break;
      }
      case OpKind::kSelectRow: {
        const Tensor& a = in(n, 0);
        K.axpy(1.0, dy.data.data(), grad_of(n.inputs[0]).data.data() + n.aux_ints[0] * a.cols(),
               static_cast<size_t>(a.cols()));
        break;
      }
      case OpKind::kGather: {
        Tensor& da = grad_of(n.inputs[0]);
        for (size_t i = 0; i < n.aux_ints.size(); ++i)
          da.data[static_cast<size_t>(n.aux_ints[i])] += dy.data[i];
        break;
      }
      case OpKind::kPick: {
        const Tensor& a = in(n, 0);
        Tensor& da = grad_of(n.inputs[0]);
        for (int64_t r = 0; r < a.rows(); ++r)
          da.at(r, n.aux_ints[static_cast<size_t>(r)]) += dy.data[static_cast<size_t>(r)];
        break;
      }
      case OpKind::kLogSumExp: {
        const Tensor& a = in(n, 0);
        Tensor& da = grad_of(n.inputs[0]);
        double lse = n.value.data[0];
        for (int64_t i = 0; i < a.numel(); ++i)
          da.data[static_cast<size_t>(i)] += dy.data[0] * std::exp(a.data[static_cast<size_t>(i)] - lse);
        break;
      }
      case OpKind::kSum: {
        Tensor& da = grad_of(n.inputs[0]);
        for (auto& v : da.data) v += dy.data[0];
        break;
      }
      case OpKind::kMean: {
        Tensor& da = grad_of(n.inputs[0]);
        double s = dy.data[0] / static_cast<double>(da.data.size());
        for (auto& v : da.data) v += s;
        break;
      }
      case OpKind::kDot: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        K.axpy(dy.data[0], b.data.data(), grad_of(n.inputs[0]).data.data(), a.data.size());
        K.axpy(dy.data[0], a.data.data(), grad_of(n.inputs[1]).data.data(), a.data.size());
        break;
      }
      case OpKind::kSliceCols: {
        const Tensor& a = in(n, 0);
        Tensor& da = grad_of(n.inputs[0]);
        int64_t c0 = n.aux_ints[0], c1 = n.aux_ints[1];
        for (int64_t r = 0; r < a.rows(); ++r)
          K.axpy(1.0, dy.data.data() + r * (c1 - c0), da.data.data() + r * a.cols() + c0,
                 static_cast<size_t>(c1 - c0));
        break;
      }
      case OpKind::kConcatCols: {
        int64_t off = 0;
        int64_t cols = n.value.cols();
        for (int p : n.inputs) {
          const Tensor& tp = value(p);
          Tensor& dp = grad_of(p);
          for (int64_t r = 0; r < tp.rows(); ++r)
            K.axpy(1.0, dy.data.data() + r * cols + off, dp.data.data() + r * tp.cols(),
                   static_cast<size_t>(tp.cols()));
          off += tp.cols();
        }
        break;
      }
    }
  }

  // densify untouched adjoints so callers can index any node
  for (size_t i = 0; i < adj.size(); ++i)
    if (adj[i].data.empty() && nodes_[i].value.numel() > 0) adj[i] = Tensor::zeros(nodes_[i].value.shape);
  return adj;
}

// --- graph programs ------------------------------------------------------------

EvalResult forward_eval(const GraphProgram& program, const std::map<std::string, Tensor>& inputs) {
  EvalResult res;
  for (const auto& [name, t] : inputs) {
    if (res.node_of.count(name)) throw std::invalid_argument("forward_eval: duplicate input '" + name + "'");
    res.node_of[name] = res.tape.leaf(t, name);
  }
  auto lookup = [&](const GraphProgram::Instr& ins, const std::string& arg) {
    auto it = res.node_of.find(arg);
    if (it == res.node_of.end())
      throw std::invalid_argument("forward_eval: op '" + ins.op + "' references unbound value '" + arg + "'");
    return it->second;
  };
  auto arity = [&](const GraphProgram::Instr& ins, size_t n) {
    if (ins.args.size() != n)
      throw std::invalid_argument("forward_eval: op '" + ins.op + "' expects " + std::to_string(n) +
                                  " args, got " + std::to_string(ins.args.size()));
  };
  for (const auto& ins : program.instrs) {
    if (res.node_of.count(ins.out))
      throw std::invalid_argument("forward_eval: value '" + ins.out + "' defined twice");
    int id = -1;
    Tape& tp = res.tape;
    if (ins.op == "add") { arity(ins, 2); id = tp.add(lookup(ins, ins.args[0]), lookup(ins, ins.args[1])); }
    else if (ins.op == "sub") { arity(ins, 2); id = tp.sub(lookup(ins, ins.args[0]), lookup(ins, ins.args[1])); }
    else if (ins.op == "mul") { arity(ins, 2); id = tp.mul(lookup(ins, ins.args[0]), lookup(ins, ins.args[1])); }
    else if (ins.op == "matmul") { arity(ins, 2); id = tp.matmul(lookup(ins, ins.args[0]), lookup(ins, ins.args[1])); }
    else if (ins.op == "dot") { arity(ins, 2); id = tp.dot(lookup(ins, ins.args[0]), lookup(ins, ins.args[1])); }
    else if (ins.op == "gelu") { arity(ins, 1); id = tp.gelu(lookup(ins, ins.args[0])); }
    else if (ins.op == "tanh") { arity(ins, 1); id = tp.tanh_(lookup(ins, ins.args[0])); }
    else if (ins.op == "sigmoid") { arity(ins, 1); id = tp.sigmoid(lookup(ins, ins.args[0])); }
    else if (ins.op == "scale") { arity(ins, 1); id = tp.scale(lookup(ins, ins.args[0]), ins.c); }
    else if (ins.op == "add_const") { arity(ins, 1); id = tp.add_const(lookup(ins, ins.args[0]), ins.c); }
    else if (ins.op == "sum") { arity(ins, 1); id = tp.sum(lookup(ins, ins.args[0])); }
    else if (ins.op == "mean") { arity(ins, 1); id = tp.mean(lookup(ins, ins.args[0])); }
    else if (ins.op == "row_softmax") { arity(ins, 1); id = tp.row_softmax(lookup(ins, ins.args[0])); }
    else if (ins.op == "row_log_softmax") { arity(ins, 1); id = tp.row_log_softmax(lookup(ins, ins.args[0])); }
    else if (ins.op == "logsumexp") { arity(ins, 1); id = tp.logsumexp(lookup(ins, ins.args[0])); }
    else throw std::invalid_argument("forward_eval: unknown op '" + ins.op + "'");
    res.node_of[ins.out] = id;
  }
  for (const auto& out : program.outputs) {
    auto it = res.node_of.find(out);
    if (it == res.node_of.end())
      throw std::invalid_argument("forward_eval: declared output '" + out + "' was never defined");
    res.outputs[out] = res.tape.value(it->second);
  }
  return res;
}

// --- finite differences ---------------------------------------------------------

FdReport finite_difference_check(const ScalarFn& f, const Tensor& point, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be > 0");

  Tape tape;
  int x = tape.leaf(point, "x");
  int out = f(tape, x);
  if (tape.value(out).numel() != 1 || !tape.value(out).is_scalar())
    throw std::invalid_argument("finite_difference_check: function output is not scalar");
  std::vector<Tensor> grads = tape.backward(out);
  const Tensor& analytic = grads[static_cast<size_t>(x)];

  auto eval_at = [&](const Tensor& p) {
    Tape t;
    int xi = t.leaf(p, "x");
    return t.value(f(t, xi)).item();
  };

  FdReport rep;
  Tensor pt = point;
  for (int64_t i = 0; i < point.numel(); ++i) {
    double orig = pt.at(i);
    pt.at(i) = orig + epsilon;
    double fp = eval_at(pt);
    pt.at(i) = orig - epsilon;
    double fm = eval_at(pt);
    pt.at(i) = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.nonfinite = true;
      if (rep.nonfinite_coord < 0) rep.nonfinite_coord = i;
      continue;
    }
    double fd = (fp - fm) / (2.0 * epsilon);
    double a = analytic.at(i);
    double rel = std::abs(a - fd) / std::max(std::abs(a), 1e-8);
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = i;
    }
  }
  return rep;
}

}  // namespace ng
