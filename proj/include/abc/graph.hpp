#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "abc/tensor.hpp"

namespace abc {

// SELU constants (canonical self-normalizing values, frozen by unit test).
inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

using NodeId = uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

// Gradients keyed by trainable-leaf name.
using GradMap = std::map<std::string, Tensor>;

// Eagerly evaluated computation tape with reverse-mode differentiation.
//
// Values are computed when an op node is pushed, so node order is already a
// topological order and backward() is a single reverse sweep. Leaves carry a
// unique name and a trainable flag; backward() returns gradients for exactly
// the trainable leaves that are reachable from the loss. Frozen leaves and
// constants never appear in the result.
//
// Primitive set: add, sub, scalar-mul, elementwise-mul (with scalar
// broadcast), matmul (with transpose flags), exp, log, selu, mean over an
// axis, L2-normalize over the last axis, dot, masked softmax over the last
// axis, embedding lookup, concatenate along the sequence (row) axis.
class Graph {
 public:
  NodeId leaf(const Tensor& value, const std::string& name, bool trainable);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scalar_mul(NodeId a, double c);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId selu(NodeId a);
  NodeId mean_axis(NodeId a, int axis);
  NodeId l2_normalize(NodeId a);
  NodeId dot(NodeId a, NodeId b);
  // mask is row-major over a's shape; nonzero = position participates. Every
  // row needs at least one live position.
  NodeId masked_softmax(NodeId a, std::vector<uint8_t> mask);
  NodeId embedding(NodeId table, std::vector<int32_t> ids);
  NodeId concat_rows(const std::vector<NodeId>& parts);

  const Tensor& value(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // loss must be scalar. Gradients accumulate over every path; leaves that the
  // loss cannot reach are absent from the map.
  GradMap backward(NodeId loss) const;

 private:
  enum class Op : uint8_t {
    kLeaf,
    kConstant,
    kAdd,
    kSub,
    kScalarMul,
    kMul,
    kMatMul,
    kExp,
    kLog,
    kSelu,
    kMeanAxis,
    kL2Normalize,
    kDot,
    kMaskedSoftmax,
    kEmbedding,
    kConcatRows,
  };

  struct Node {
    Op op;
    Tensor value;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    std::vector<NodeId> inputs;  // concat only
    double scalar = 0.0;
    int axis = -1;
    bool trans_a = false;
    bool trans_b = false;
    std::vector<int32_t> ids;    // embedding only
    std::vector<uint8_t> mask;   // masked softmax only
    std::string name;            // leaf only
    bool trainable = false;
  };

  const Node& node(NodeId id) const;
  NodeId push(Node n);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaf_names_;
};

}  // namespace abc
