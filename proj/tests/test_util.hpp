#pragma once

// Shared test helpers: random graph programs, an independent straight-line
// interpreter (the oracle for forward_eval), and small numeric utilities.
// Everything here is deliberately written with plain loops, no kernels, no
// Tape, so it cannot share a bug with the implementation under test.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ng/autodiff.hpp"
#include "ng/rng.hpp"
#include "ng/tensor.hpp"

namespace ngtest {

inline ng::Tensor random_tensor(std::vector<int64_t> shape, ng::Rng& rng, double scale = 1.0) {
  ng::Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// --- independent straight-line interpreter ------------------------------------

inline ng::Tensor oracle_eval_op(const std::string& op, const std::vector<ng::Tensor>& args, double c) {
  using ng::Tensor;
  auto& a = args[0];
  if (op == "add" || op == "sub" || op == "mul") {
    Tensor out(a.shape);
    const Tensor& b = args[1];
    for (size_t i = 0; i < a.data.size(); ++i) {
      if (op == "add") out.data[i] = a.data[i] + b.data[i];
      if (op == "sub") out.data[i] = a.data[i] - b.data[i];
      if (op == "mul") out.data[i] = a.data[i] * b.data[i];
    }
    return out;
  }
  if (op == "matmul") {
    const Tensor& b = args[1];
    Tensor out({a.shape[0], b.shape[1]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
      for (int64_t j = 0; j < b.shape[1]; ++j) {
        double s = 0.0;
        for (int64_t k = 0; k < a.shape[1]; ++k) s += a.at(i, k) * b.at(k, j);
        out.at(i, j) = s;
      }
    return out;
  }
  if (op == "dot") {
    const Tensor& b = args[1];
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
    return Tensor::scalar(s);
  }
  if (op == "gelu") {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) {
      double x = a.data[i];
      out.data[i] = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    }
    return out;
  }
  if (op == "tanh") {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::tanh(a.data[i]);
    return out;
  }
  if (op == "sigmoid") {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-a.data[i]));
    return out;
  }
  if (op == "scale") {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * c;
    return out;
  }
  if (op == "add_const") {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + c;
    return out;
  }
  if (op == "sum" || op == "mean") {
    double s = 0.0;
    for (double v : a.data) s += v;
    if (op == "mean") s /= static_cast<double>(a.numel());
    return Tensor::scalar(s);
  }
  if (op == "row_softmax" || op == "row_log_softmax") {
    Tensor out(a.shape);
    for (int64_t r = 0; r < a.shape[0]; ++r) {
      double mx = a.at(r, 0);
      for (int64_t j = 1; j < a.shape[1]; ++j) mx = std::max(mx, a.at(r, j));
      double sum = 0.0;
      for (int64_t j = 0; j < a.shape[1]; ++j) sum += std::exp(a.at(r, j) - mx);
      for (int64_t j = 0; j < a.shape[1]; ++j) {
        double ls = a.at(r, j) - mx - std::log(sum);
        out.at(r, j) = (op == "row_softmax") ? std::exp(ls) : ls;
      }
    }
    return out;
  }
  if (op == "logsumexp") {
    double mx = a.data[0];
    for (double v : a.data) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : a.data) s += std::exp(v - mx);
    return Tensor::scalar(mx + std::log(s));
  }
  throw std::runtime_error("oracle: unknown op " + op);
}

inline std::map<std::string, ng::Tensor> oracle_run(const ng::GraphProgram& p,
                                                    const std::map<std::string, ng::Tensor>& inputs) {
  std::map<std::string, ng::Tensor> env = inputs;
  for (const auto& ins : p.instrs) {
    std::vector<ng::Tensor> args;
    for (const auto& a : ins.args) args.push_back(env.at(a));
    env[ins.out] = oracle_eval_op(ins.op, args, ins.c);
  }
  std::map<std::string, ng::Tensor> out;
  for (const auto& o : p.outputs) out[o] = env.at(o);
  return out;
}

// --- random graph programs ------------------------------------------------------

struct RandomGraph {
  ng::GraphProgram program;
  std::map<std::string, ng::Tensor> inputs;
  std::string scalar_output;  // the final reduce-to-scalar value
};

// A straight-line program of `num_ops` well-shaped ops over a couple of
// inputs, always terminated by a reduction to a scalar.
inline RandomGraph random_graph(ng::Rng& rng, int num_ops) {
  RandomGraph g;
  int64_t m = 2 + static_cast<int64_t>(rng.below(3));  // 2..4
  int64_t n = 2 + static_cast<int64_t>(rng.below(3));
  g.inputs["x"] = random_tensor({m, n}, rng, 0.8);
  g.inputs["w"] = random_tensor({n, m}, rng, 0.8);

  struct Val {
    std::string name;
    std::vector<int64_t> shape;
  };
  std::vector<Val> vals = {{"x", {m, n}}, {"w", {n, m}}};
  int counter = 0;
  auto fresh = [&]() { return "v" + std::to_string(counter++); };

  for (int i = 0; i < num_ops; ++i) {
    const Val& a = vals[rng.below(vals.size())];
    double pickop = rng.uniform();
    ng::GraphProgram::Instr ins;
    ins.out = fresh();
    if (pickop < 0.18) {
      // binary elementwise with a same-shaped partner, if one exists
      std::vector<const Val*> same;
      for (const auto& v : vals)
        if (v.shape == a.shape) same.push_back(&v);
      ins.op = "mul";
      ins.args = {a.name, same[rng.below(same.size())]->name};
      vals.push_back({ins.out, a.shape});
    } else if (pickop < 0.36) {
      std::vector<const Val*> same;
      for (const auto& v : vals)
        if (v.shape == a.shape) same.push_back(&v);
      ins.op = "add";
      ins.args = {a.name, same[rng.below(same.size())]->name};
      vals.push_back({ins.out, a.shape});
    } else if (pickop < 0.52 && a.shape.size() == 2) {
      // matmul with any compatible partner, bounded by a following tanh so
      // finite differences stay well conditioned
      std::vector<const Val*> ok;
      for (const auto& v : vals)
        if (v.shape.size() == 2 && v.shape[0] == a.shape[1]) ok.push_back(&v);
      if (ok.empty()) {
        ins.op = "tanh";
        ins.args = {a.name};
        vals.push_back({ins.out, a.shape});
      } else {
        const Val* b = ok[rng.below(ok.size())];
        ins.op = "matmul";
        ins.args = {a.name, b->name};
        vals.push_back({ins.out, {a.shape[0], b->shape[1]}});
        g.program.instrs.push_back(ins);
        ng::GraphProgram::Instr sq;
        sq.op = "tanh";
        sq.args = {ins.out};
        sq.out = fresh();
        vals.push_back({sq.out, vals.back().shape});
        g.program.instrs.push_back(sq);
        continue;
      }
    } else if (pickop < 0.64) {
      ins.op = "gelu";
      ins.args = {a.name};
      vals.push_back({ins.out, a.shape});
    } else if (pickop < 0.76) {
      ins.op = "tanh";
      ins.args = {a.name};
      vals.push_back({ins.out, a.shape});
    } else if (pickop < 0.88) {
      // keep the factor away from zero: a ~0 multiplier kills the gradient
      // and the relative-error denominator with it
      ins.op = "scale";
      ins.args = {a.name};
      ins.c = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
      vals.push_back({ins.out, a.shape});
    } else if (a.shape.size() == 2) {
      // softmax output feeds a gelu: reducing a softmax directly would be
      // a constant (simplex) with an exactly-zero gradient
      ins.op = "row_softmax";
      ins.args = {a.name};
      vals.push_back({ins.out, a.shape});
      g.program.instrs.push_back(ins);
      ng::GraphProgram::Instr gl;
      gl.op = "gelu";
      gl.args = {ins.out};
      gl.out = fresh();
      vals.push_back({gl.out, vals.back().shape});
      g.program.instrs.push_back(gl);
      continue;
    } else {
      ins.op = "sigmoid";
      ins.args = {a.name};
      vals.push_back({ins.out, a.shape});
    }
    g.program.instrs.push_back(ins);
  }
  // reduce the last value to a scalar
  ng::GraphProgram::Instr red;
  red.op = rng.bernoulli(0.5) ? "sum" : "mean";
  red.args = {vals.back().name};
  red.out = fresh();
  g.program.instrs.push_back(red);

  // anchor with a small linear term in x so no input coordinate ends up
  // with a vanishing gradient (relative-error checks against central
  // differences are roundoff-dominated below ~1e-8)
  ng::GraphProgram::Instr ax{fresh(), "mean", {"x"}, 0.0};
  g.program.instrs.push_back(ax);
  ng::GraphProgram::Instr axs{fresh(), "scale", {ax.out}, 0.1};
  g.program.instrs.push_back(axs);
  ng::GraphProgram::Instr fin{fresh(), "add", {red.out, axs.out}, 0.0};
  g.program.instrs.push_back(fin);
  g.scalar_output = fin.out;
  g.program.outputs = {fin.out};
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

}  // namespace ngtest
