#include "abc/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace abc {

namespace {

// c[m×n] += opA(a)·opB(b). Flags transpose the *stored* operand: ta reads a as
// [k×m], tb reads b as [n×k]. Double transpose is never needed and rejected.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool ta, bool tb) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      const double* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    throw std::logic_error("gemm: simultaneous transpose of both operands is unsupported");
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

// Rank-1 tensors act as a single row in matmul and concat.
std::size_t row_count(const Tensor& t) { return t.rank() == 1 ? 1 : t.shape[0]; }
std::size_t col_count(const Tensor& t) { return t.rank() == 1 ? t.shape[0] : t.shape[1]; }

}  // namespace

const Graph::Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw std::logic_error("Graph: node id out of range");
  return nodes_[id];
}

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }

NodeId Graph::leaf(const Tensor& value, const std::string& name, bool trainable) {
  if (name.empty()) throw std::invalid_argument("leaf: name must be non-empty");
  if (leaf_names_.count(name))
    throw std::invalid_argument("leaf: duplicate leaf name '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.value = value;
  n.name = name;
  n.trainable = trainable;
  NodeId id = push(std::move(n));
  leaf_names_[name] = id;
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_same_shape("add", va, vb);
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = va;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += vb.data[i];
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_same_shape("sub", va, vb);
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.value = va;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] -= vb.data[i];
  return push(std::move(n));
}

NodeId Graph::scalar_mul(NodeId a, double c) {
  Node n;
  n.op = Op::kScalarMul;
  n.a = a;
  n.scalar = c;
  n.value = value(a);
  for (double& v : n.value.data) v *= c;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  Node n;
  n.op = Op::kMul;
  n.a = a;
  n.b = b;
  if (va.same_shape(vb)) {
    n.value = va;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= vb.data[i];
  } else if (va.is_scalar()) {
    n.value = vb;
    for (double& v : n.value.data) v *= va.data[0];
  } else if (vb.is_scalar()) {
    n.value = va;
    for (double& v : n.value.data) v *= vb.data[0];
  } else {
    throw std::invalid_argument("mul: shapes " + shape_str(va.shape) + " vs " +
                                shape_str(vb.shape) +
                                " (equal shapes or one shape-{1} scalar operand)");
  }
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (trans_a && trans_b)
    throw std::invalid_argument("matmul: simultaneous transpose of both operands is unsupported");
  if (vb.rank() != 2)
    throw std::invalid_argument("matmul: rhs must be rank 2, got " + shape_str(vb.shape));
  if (va.rank() != 1 && va.rank() != 2)
    throw std::invalid_argument("matmul: lhs must be rank 1 or 2, got " + shape_str(va.shape));
  if (trans_a && va.rank() != 2)
    throw std::invalid_argument("matmul: transposed lhs must be rank 2");

  const std::size_t m = trans_a ? va.shape[1] : row_count(va);
  const std::size_t k = trans_a ? va.shape[0] : col_count(va);
  const std::size_t kb = trans_b ? vb.shape[1] : vb.shape[0];
  const std::size_t nOut = trans_b ? vb.shape[0] : vb.shape[1];
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(va.shape) +
                                (trans_a ? "^T" : "") + " vs " + shape_str(vb.shape) +
                                (trans_b ? "^T" : ""));

  Node n;
  n.op = Op::kMatMul;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.value = (va.rank() == 1) ? Tensor::zeros({nOut}) : Tensor::zeros({m, nOut});
  gemm_acc(va.data.data(), vb.data.data(), n.value.data.data(), m, k, nOut, trans_a, trans_b);
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  Node n;
  n.op = Op::kExp;
  n.a = a;
  n.value = value(a);
  for (double& v : n.value.data) v = std::exp(v);
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  Node n;
  n.op = Op::kLog;
  n.a = a;
  n.value = value(a);
  for (double& v : n.value.data) {
    if (v <= 0.0)
      throw std::domain_error("log: input " + std::to_string(v) + " outside (0, inf)");
    v = std::log(v);
  }
  return push(std::move(n));
}

NodeId Graph::selu(NodeId a) {
  Node n;
  n.op = Op::kSelu;
  n.a = a;
  n.value = value(a);
  for (double& v : n.value.data)
    v = v > 0.0 ? kSeluLambda * v : kSeluLambda * kSeluAlpha * (std::exp(v) - 1.0);
  return push(std::move(n));
}

NodeId Graph::mean_axis(NodeId a, int axis) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::kMeanAxis;
  n.a = a;
  n.axis = axis;
  if (va.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("mean_axis: rank-1 tensor has only axis 0");
    double s = 0.0;
    for (double v : va.data) s += v;
    n.value = Tensor::scalar(s / static_cast<double>(va.shape[0]));
  } else if (va.rank() == 2) {
    const std::size_t r = va.shape[0], c = va.shape[1];
    if (axis == 0) {
      n.value = Tensor::zeros({c});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.value.data[j] += va.data[i * c + j];
      for (double& v : n.value.data) v /= static_cast<double>(r);
    } else if (axis == 1) {
      n.value = Tensor::zeros({r});
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += va.data[i * c + j];
        n.value.data[i] = s / static_cast<double>(c);
      }
    } else {
      throw std::invalid_argument("mean_axis: axis " + std::to_string(axis) +
                                  " invalid for shape " + shape_str(va.shape));
    }
  } else {
    throw std::invalid_argument("mean_axis: unsupported rank " + std::to_string(va.rank()));
  }
  return push(std::move(n));
}

NodeId Graph::l2_normalize(NodeId a) {
  const Tensor& va = value(a);
  if (va.rank() != 1 && va.rank() != 2)
    throw std::invalid_argument("l2_normalize: unsupported rank " + std::to_string(va.rank()));
  Node n;
  n.op = Op::kL2Normalize;
  n.a = a;
  n.value = va;
  const std::size_t c = col_count(va);
  for (std::size_t i = 0; i < row_count(va); ++i) {
    double* row = n.value.data.data() + i * c;
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += row[j] * row[j];
    // Guarded denominator: exact unit norm for any nonzero row, finite output
    // for the zero row.
    double denom = std::max(std::sqrt(sq), 1e-30);
    for (std::size_t j = 0; j < c; ++j) row[j] /= denom;
  }
  return push(std::move(n));
}

NodeId Graph::dot(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 1 || vb.rank() != 1 || va.shape[0] != vb.shape[0])
    throw std::invalid_argument("dot: wants equal-length vectors, got " + shape_str(va.shape) +
                                " vs " + shape_str(vb.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < va.shape[0]; ++i) s += va.data[i] * vb.data[i];
  Node n;
  n.op = Op::kDot;
  n.a = a;
  n.b = b;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Graph::masked_softmax(NodeId a, std::vector<uint8_t> mask) {
  const Tensor& va = value(a);
  if (va.rank() != 2)
    throw std::invalid_argument("masked_softmax: wants rank 2, got " + shape_str(va.shape));
  if (mask.size() != va.numel())
    throw std::invalid_argument("masked_softmax: mask size " + std::to_string(mask.size()) +
                                " does not cover " + shape_str(va.shape));
  const std::size_t r = va.shape[0], c = va.shape[1];
  Node n;
  n.op = Op::kMaskedSoftmax;
  n.a = a;
  n.value = va;
  for (std::size_t i = 0; i < r; ++i) {
    const double* in = va.data.data() + i * c;
    const uint8_t* mrow = mask.data() + i * c;
    double* out = n.value.data.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mrow[j] && in[j] > mx) mx = in[j];
    if (mx == -std::numeric_limits<double>::infinity())
      throw std::invalid_argument("masked_softmax: row " + std::to_string(i) +
                                  " has no unmasked position");
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = mrow[j] ? std::exp(in[j] - mx) : 0.0;
      sum += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }
  n.mask = std::move(mask);
  return push(std::move(n));
}

NodeId Graph::embedding(NodeId table, std::vector<int32_t> ids) {
  const Tensor& vt = value(table);
  if (vt.rank() != 2)
    throw std::invalid_argument("embedding: table must be rank 2, got " + shape_str(vt.shape));
  if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
  const std::size_t v = vt.shape[0], d = vt.shape[1];
  Node n;
  n.op = Op::kEmbedding;
  n.a = table;
  n.value = Tensor::zeros({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    int32_t id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table " +
                              shape_str(vt.shape));
    const double* src = vt.data.data() + static_cast<std::size_t>(id) * d;
    std::copy(src, src + d, n.value.data.data() + r * d);
  }
  n.ids = std::move(ids);
  return push(std::move(n));
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = col_count(value(parts[0]));
  std::size_t total = 0;
  for (NodeId p : parts) {
    const Tensor& vp = value(p);
    if (vp.rank() != 1 && vp.rank() != 2)
      throw std::invalid_argument("concat_rows: unsupported rank " + std::to_string(vp.rank()));
    if (col_count(vp) != c)
      throw std::invalid_argument("concat_rows: column mismatch, " + shape_str(vp.shape) +
                                  " vs width " + std::to_string(c));
    total += row_count(vp);
  }
  Node n;
  n.op = Op::kConcatRows;
  n.inputs = parts;
  n.value = Tensor::zeros({total, c});
  std::size_t r = 0;
  for (NodeId p : parts) {
    const Tensor& vp = value(p);
    std::copy(vp.data.begin(), vp.data.end(), n.value.data.begin() + r * c);
    r += row_count(vp);
  }
  return push(std::move(n));
}

GradMap Graph::backward(NodeId loss) const {
  const Tensor& lv = value(loss);
  if (lv.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(lv.shape));

  std::vector<Tensor> grads(nodes_.size());
  auto buf = [&](NodeId id) -> Tensor& {
    Tensor& g = grads[id];
    if (g.shape.empty() && !nodes_[id].value.shape.empty()) g = Tensor::zeros(nodes_[id].value.shape);
    return g;
  };
  buf(loss).data[0] = 1.0;

  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    if (g.shape.empty()) continue;  // not on any path to the loss

    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd: {
        Tensor& ga = buf(n.a);
        Tensor& gb = buf(n.b);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] += g.data[i];
        }
        break;
      }
      case Op::kSub: {
        Tensor& ga = buf(n.a);
        Tensor& gb = buf(n.b);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] -= g.data[i];
        }
        break;
      }
      case Op::kScalarMul: {
        Tensor& ga = buf(n.a);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += n.scalar * g.data[i];
        break;
      }
      case Op::kMul: {
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        Tensor& ga = buf(n.a);
        Tensor& gb = buf(n.b);
        if (va.same_shape(vb)) {
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i] * vb.data[i];
            gb.data[i] += g.data[i] * va.data[i];
          }
        } else if (va.is_scalar()) {
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[0] += g.data[i] * vb.data[i];
            gb.data[i] += g.data[i] * va.data[0];
          }
        } else {
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            gb.data[0] += g.data[i] * va.data[i];
            ga.data[i] += g.data[i] * vb.data[0];
          }
        }
        break;
      }
      case Op::kMatMul: {
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        Tensor& ga = buf(n.a);
        Tensor& gb = buf(n.b);
        const std::size_t m = n.trans_a ? va.shape[1] : row_count(va);
        const std::size_t k = n.trans_a ? va.shape[0] : col_count(va);
        const std::size_t nn = n.trans_b ? vb.shape[0] : vb.shape[1];
        const double* gp = g.data.data();
        if (!n.trans_a && !n.trans_b) {
          // dA += G·Bᵀ, dB += Aᵀ·G
          gemm_acc(gp, vb.data.data(), ga.data.data(), m, nn, k, false, true);
          gemm_acc(va.data.data(), gp, gb.data.data(), k, m, nn, true, false);
        } else if (!n.trans_a && n.trans_b) {
          // C = A·Bᵀ with B stored [n×k]: dA += G·B, dB += Gᵀ·A
          gemm_acc(gp, vb.data.data(), ga.data.data(), m, nn, k, false, false);
          gemm_acc(gp, va.data.data(), gb.data.data(), nn, m, k, true, false);
        } else {
          // C = Aᵀ·B with A stored [k×m]: dA += B·Gᵀ, dB += A·G
          gemm_acc(vb.data.data(), gp, ga.data.data(), k, nn, m, false, true);
          gemm_acc(va.data.data(), gp, gb.data.data(), k, m, nn, false, false);
        }
        break;
      }
      case Op::kExp: {
        Tensor& ga = buf(n.a);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.value.data[i];
        break;
      }
      case Op::kLog: {
        const Tensor& va = nodes_[n.a].value;
        Tensor& ga = buf(n.a);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / va.data[i];
        break;
      }
      case Op::kSelu: {
        const Tensor& va = nodes_[n.a].value;
        Tensor& ga = buf(n.a);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          double d = va.data[i] > 0.0 ? kSeluLambda : n.value.data[i] + kSeluLambda * kSeluAlpha;
          ga.data[i] += g.data[i] * d;
        }
        break;
      }
      case Op::kMeanAxis: {
        const Tensor& va = nodes_[n.a].value;
        Tensor& ga = buf(n.a);
        if (va.rank() == 1) {
          const double s = g.data[0] / static_cast<double>(va.shape[0]);
          for (double& v : ga.data) v += s;
        } else {
          const std::size_t r = va.shape[0], c = va.shape[1];
          if (n.axis == 0) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j)
                ga.data[i * c + j] += g.data[j] / static_cast<double>(r);
          } else {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j)
                ga.data[i * c + j] += g.data[i] / static_cast<double>(c);
          }
        }
        break;
      }
      case Op::kL2Normalize: {
        const Tensor& va = nodes_[n.a].value;
        Tensor& ga = buf(n.a);
        const std::size_t c = col_count(va);
        for (std::size_t i = 0; i < row_count(va); ++i) {
          const double* x = va.data.data() + i * c;
          const double* y = n.value.data.data() + i * c;
          const double* gr = g.data.data() + i * c;
          double* gx = ga.data.data() + i * c;
          double sq = 0.0;
          for (std::size_t j = 0; j < c; ++j) sq += x[j] * x[j];
          double denom = std::max(std::sqrt(sq), 1e-30);
          double gy = 0.0;
          for (std::size_t j = 0; j < c; ++j) gy += gr[j] * y[j];
          for (std::size_t j = 0; j < c; ++j) gx[j] += (gr[j] - y[j] * gy) / denom;
        }
        break;
      }
      case Op::kDot: {
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        Tensor& ga = buf(n.a);
        Tensor& gb = buf(n.b);
        const double g0 = g.data[0];
        for (std::size_t i = 0; i < va.shape[0]; ++i) {
          ga.data[i] += g0 * vb.data[i];
          gb.data[i] += g0 * va.data[i];
        }
        break;
      }
      case Op::kMaskedSoftmax: {
        Tensor& ga = buf(n.a);
        const std::size_t r = n.value.shape[0], c = n.value.shape[1];
        for (std::size_t i = 0; i < r; ++i) {
          const double* y = n.value.data.data() + i * c;
          const double* gr = g.data.data() + i * c;
          const uint8_t* mrow = n.mask.data() + i * c;
          double* gx = ga.data.data() + i * c;
          double gy = 0.0;
          for (std::size_t j = 0; j < c; ++j) gy += gr[j] * y[j];
          for (std::size_t j = 0; j < c; ++j)
            if (mrow[j]) gx[j] += y[j] * (gr[j] - gy);
        }
        break;
      }
      case Op::kEmbedding: {
        Tensor& ga = buf(n.a);
        const std::size_t d = n.value.shape[1];
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          double* dst = ga.data.data() + static_cast<std::size_t>(n.ids[r]) * d;
          const double* src = g.data.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kConcatRows: {
        const std::size_t c = n.value.shape[1];
        std::size_t r = 0;
        for (NodeId p : n.inputs) {
          Tensor& gp = buf(p);
          const std::size_t pr = row_count(nodes_[p].value);
          const double* src = g.data.data() + r * c;
          for (std::size_t i = 0; i < pr * c; ++i) gp.data[i] += src[i];
          r += pr;
        }
        break;
      }
    }
  }

  GradMap out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf && n.trainable && !grads[id].shape.empty())
      out[n.name] = std::move(grads[id]);
  }
  return out;
}

}  // namespace abc
