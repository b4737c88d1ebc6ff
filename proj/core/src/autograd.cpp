#include "fedcrfd/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "fedcrfd/errors.hpp"

namespace fedcrfd {

struct Graph::Node {
  std::string_view op;
  std::vector<std::size_t> parents;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  Parameter* param = nullptr;
  BackwardFn backward;
  std::vector<std::unique_ptr<Tensor>> saved;
};

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Graph& graph_of(std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) continue;
    if (g == nullptr) g = v.graph();
    if (v.graph() != g) throw ShapeError("operands belong to different graphs");
  }
  if (g == nullptr) throw ShapeError("operation on empty variables");
  return *g;
}

}  // namespace

// ---- Var / Graph -------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(*this); }
const Tensor& Var::grad() const { return graph_->grad(*this); }

Graph::Graph() = default;
Graph::~Graph() = default;

std::size_t Graph::size() const noexcept { return nodes_.size(); }

Graph::Node& Graph::node(std::size_t id) { return *nodes_.at(id); }
const Graph::Node& Graph::node(std::size_t id) const { return *nodes_.at(id); }

const Tensor& Graph::value(Var v) const { return node(v.id()).value; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v.id());
  if (!n.has_grad) {
    static thread_local Tensor empty;
    empty = Tensor::zeros_like(n.value);
    return empty;
  }
  return n.grad;
}

bool Graph::requires_grad(Var v) const { return v.valid() && node(v.id()).requires_grad; }

Tensor& Graph::grad_buffer(Var v) {
  Node& n = node(v.id());
  if (!n.has_grad) {
    n.grad = Tensor::zeros_like(n.value);
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Graph::keep(Var v, Tensor t) {
  Node& n = node(v.id());
  n.saved.push_back(std::make_unique<Tensor>(std::move(t)));
  return n.saved.back().get();
}

Var Graph::make_node(std::string_view op, std::vector<Var> parents, Tensor value, BackwardFn backward) {
  auto n = std::make_unique<Node>();
  n->op = op;
  for (const Var& p : parents) {
    if (!p.valid()) continue;
    if (p.graph() != this) throw ShapeError(std::string(op) + ": operand from another graph");
    n->parents.push_back(p.id());
    n->requires_grad = n->requires_grad || node(p.id()).requires_grad;
  }
  n->value = std::move(value);
  if (n->requires_grad) n->backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  auto n = std::make_unique<Node>();
  n->op = "constant";
  n->value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(Tensor value) {
  Var v = constant(std::move(value));
  nodes_.back()->op = "input";
  nodes_.back()->requires_grad = true;
  return v;
}

Var Graph::param(Parameter& p) {
  Var v = constant(p.value);
  nodes_.back()->op = "param";
  nodes_.back()->requires_grad = true;
  nodes_.back()->param = &p;
  return v;
}

void Graph::add_kink_site(Var, const Tensor* signed_distance) { kinks_.push_back({signed_distance}); }

std::size_t Graph::kink_site_count() const { return kinks_.size(); }

std::uint64_t Graph::kink_signature() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::uint64_t word = 0;
  unsigned bits = 0;
  auto flush = [&] {
    h ^= word;
    h *= 0x100000001b3ULL;
    h ^= h >> 29;
    word = 0;
    bits = 0;
  };
  for (const KinkSite& k : kinks_) {
    for (double v : k.values->data()) {
      const std::uint64_t s = v > 0.0 ? 1u : (v < 0.0 ? 2u : 3u);
      word |= s << bits;
      bits += 2;
      if (bits == 64) flush();
    }
  }
  flush();
  return h;
}

double Graph::min_kink_margin() const {
  double m = std::numeric_limits<double>::infinity();
  for (const KinkSite& k : kinks_) {
    for (double v : k.values->data()) m = std::min(m, std::abs(v));
  }
  return m;
}

void Graph::backward(Var root) {
  if (!root.valid() || root.graph() != this) throw ShapeError("backward: root does not belong to this graph");
  const Node& r = node(root.id());
  if (r.value.size() != 1) throw ShapeError("backward: root must be scalar, got shape " + shape_str(r.value.shape()));
  for (auto& n : nodes_) {
    n->has_grad = false;
    n->grad = Tensor();
  }
  if (!r.requires_grad) return;
  grad_buffer(root).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

// ---- primitive registry ------------------------------------------------------

Primitive parse_primitive(std::string_view name) {
  if (name == "conv2d") return Primitive::kConv2d;
  if (name == "relu") return Primitive::kRelu;
  if (name == "linear") return Primitive::kLinear;
  if (name == "add") return Primitive::kAdd;
  if (name == "avg_pool_2x") return Primitive::kAvgPool2x;
  if (name == "upsample_2x") return Primitive::kUpsample2x;
  if (name == "global_avg_pool_flatten") return Primitive::kGlobalAvgPoolFlatten;
  throw ConfigError("unknown primitive id '" + std::string(name) + "'");
}

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kRelu: return "relu";
    case Primitive::kLinear: return "linear";
    case Primitive::kAdd: return "add";
    case Primitive::kAvgPool2x: return "avg_pool_2x";
    case Primitive::kUpsample2x: return "upsample_2x";
    case Primitive::kGlobalAvgPoolFlatten: return "global_avg_pool_flatten";
  }
  throw ConfigError("unknown primitive id");
}

Distance parse_distance(std::string_view name) {
  if (name == "l1") return Distance::kL1;
  if (name == "l2") return Distance::kL2;
  if (name == "cosine") return Distance::kCosine;
  throw ConfigError("unknown distance measure '" + std::string(name) + "'");
}

std::string_view distance_name(Distance d) {
  switch (d) {
    case Distance::kL1: return "l1";
    case Distance::kL2: return "l2";
    case Distance::kCosine: return "cosine";
  }
  return "l1";
}

Var apply_primitive(Primitive kind, std::span<const Var> in, const PrimitiveAttrs& attrs) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      shape_fail(primitive_name(kind), "expected " + std::to_string(lo) + ".." + std::to_string(hi) + " inputs, got " +
                                           std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::kConv2d:
      need(2, 3);
      return conv2d(in[0], in[1], in.size() == 3 ? in[2] : Var(), attrs);
    case Primitive::kRelu:
      need(1, 1);
      return relu(in[0]);
    case Primitive::kLinear:
      need(3, 3);
      return linear(in[0], in[1], in[2]);
    case Primitive::kAdd:
      need(2, 2);
      return add(in[0], in[1]);
    case Primitive::kAvgPool2x:
      need(1, 1);
      return avg_pool_2x(in[0]);
    case Primitive::kUpsample2x:
      need(1, 1);
      return upsample_2x(in[0]);
    case Primitive::kGlobalAvgPoolFlatten:
      need(1, 1);
      return global_avg_pool_flatten(in[0]);
  }
  throw ConfigError("unknown primitive id");
}

// ---- conv2d ------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// col is (C*k*k) x (Ho*Wo), row-major.
void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(g.h), W = static_cast<std::ptrdiff_t>(g.w);
  const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(g.pad), S = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t Ho = static_cast<std::ptrdiff_t>(g.ho), Wo = static_cast<std::ptrdiff_t>(g.wo);
  const std::ptrdiff_t K = static_cast<std::ptrdiff_t>(g.k);
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(g.c); ++c) {
    const double* xc = x + c * H * W;
    for (std::ptrdiff_t ki = 0; ki < K; ++ki) {
      for (std::ptrdiff_t kj = 0; kj < K; ++kj) {
        double* row = col + ((c * K + ki) * K + kj) * Ho * Wo;
        for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
          double* dst = row + oh * Wo;
          const std::ptrdiff_t ih = oh * S + ki - P;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, sizeof(double) * static_cast<std::size_t>(Wo));
            continue;
          }
          const double* src = xc + ih * W;
          if (S == 1) {
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, P - kj);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Wo, W + P - kj);
            for (std::ptrdiff_t ow = 0; ow < lo; ++ow) dst[ow] = 0.0;
            if (hi > lo) std::memcpy(dst + lo, src + lo + kj - P, sizeof(double) * static_cast<std::size_t>(hi - lo));
            for (std::ptrdiff_t ow = std::max(hi, lo); ow < Wo; ++ow) dst[ow] = 0.0;
          } else {
            for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw = ow * S + kj - P;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* dx) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(g.h), W = static_cast<std::ptrdiff_t>(g.w);
  const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(g.pad), S = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t Ho = static_cast<std::ptrdiff_t>(g.ho), Wo = static_cast<std::ptrdiff_t>(g.wo);
  const std::ptrdiff_t K = static_cast<std::ptrdiff_t>(g.k);
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(g.c); ++c) {
    double* xc = dx + c * H * W;
    for (std::ptrdiff_t ki = 0; ki < K; ++ki) {
      for (std::ptrdiff_t kj = 0; kj < K; ++kj) {
        const double* row = col + ((c * K + ki) * K + kj) * Ho * Wo;
        for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t ih = oh * S + ki - P;
          if (ih < 0 || ih >= H) continue;
          const double* src = row + oh * Wo;
          double* dst = xc + ih * W;
          if (S == 1) {
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, P - kj);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Wo, W + P - kj);
            double* d = dst + kj - P;
            for (std::ptrdiff_t ow = lo; ow < hi; ++ow) d[ow] += src[ow];
          } else {
            for (std::ptrdiff_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw = ow * S + kj - P;
              if (iw >= 0 && iw < W) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, const PrimitiveAttrs& attrs) {
  Graph& graph = graph_of({x, weight, bias});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 4) shape_fail("conv2d", "input must be N x C x H x W, got " + shape_str(xv.shape()));
  if (wv.rank() != 4 || wv.dim(2) != wv.dim(3)) {
    shape_fail("conv2d", "kernel must be O x C x k x k, got " + shape_str(wv.shape()));
  }
  if (wv.dim(1) != xv.dim(1)) {
    shape_fail("conv2d", "kernel channels " + std::to_string(wv.dim(1)) + " do not match input channels " +
                             std::to_string(xv.dim(1)));
  }
  if (bias.valid() && (bias.value().rank() != 1 || bias.value().dim(0) != wv.dim(0))) {
    shape_fail("conv2d", "bias shape " + shape_str(bias.value().shape()) + " does not match " +
                             std::to_string(wv.dim(0)) + " output channels");
  }
  if (attrs.stride == 0) shape_fail("conv2d", "stride must be positive");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), attrs.stride, attrs.padding, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    shape_fail("conv2d", "kernel " + std::to_string(g.k) + " larger than padded input " + shape_str(xv.shape()));
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  Tensor out({g.n, g.o, g.ho, g.wo});
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.o * g.cols();
  CMapRow wmat(wv.ptr(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.rows()));
  AlignedBuffer col(g.pointwise() ? 0 : g.rows() * g.cols());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* src = xv.ptr() + n * in_stride;
    if (!g.pointwise()) {
      im2col(src, g, col.data());
      src = col.data();
    }
    CMapRow cmat(src, static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    MapRow omat(out.ptr() + n * out_stride, static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.cols()));
    omat.noalias() = wmat * cmat;
    if (bias.valid()) {
      const double* b = bias.value().ptr();
      for (std::size_t o = 0; o < g.o; ++o) omat.row(static_cast<Eigen::Index>(o)).array() += b[o];
    }
  }

  return graph.make_node("conv2d", {x, weight, bias}, std::move(out), [x, weight, bias, g](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    const bool need_dx = gr.requires_grad(x);
    const bool need_dw = gr.requires_grad(weight);
    const bool need_db = bias.valid() && gr.requires_grad(bias);
    const std::size_t in_stride = g.c * g.h * g.w;
    const std::size_t out_stride = g.o * g.cols();
    const auto R = static_cast<Eigen::Index>(g.rows());
    const auto C = static_cast<Eigen::Index>(g.cols());
    const auto O = static_cast<Eigen::Index>(g.o);
    CMapRow wmat(wv.ptr(), O, R);
    AlignedBuffer col(g.pointwise() ? 0 : g.rows() * g.cols());
    AlignedBuffer dcol(need_dx && !g.pointwise() ? g.rows() * g.cols() : 0);
    Tensor* dw = need_dw ? &gr.grad_buffer(weight) : nullptr;
    Tensor* db = need_db ? &gr.grad_buffer(bias) : nullptr;
    Tensor* dx = need_dx ? &gr.grad_buffer(x) : nullptr;
    for (std::size_t n = 0; n < g.n; ++n) {
      CMapRow dymat(dy.ptr() + n * out_stride, O, C);
      if (need_dw) {
        const double* src = xv.ptr() + n * in_stride;
        if (!g.pointwise()) {
          im2col(src, g, col.data());
          src = col.data();
        }
        CMapRow cmat(src, R, C);
        MapRow dwmat(dw->ptr(), O, R);
        dwmat.noalias() += dymat * cmat.transpose();
      }
      if (need_db) {
        double* b = db->ptr();
        for (Eigen::Index o = 0; o < O; ++o) b[o] += dymat.row(o).sum();
      }
      if (need_dx) {
        if (g.pointwise()) {
          MapRow dxmat(dx->ptr() + n * in_stride, R, C);
          dxmat.noalias() += wmat.transpose() * dymat;
        } else {
          MapRow dcmat(dcol.data(), R, C);
          dcmat.noalias() = wmat.transpose() * dymat;
          col2im_add(dcol.data(), g, dx->ptr() + n * in_stride);
        }
      }
    }
  });
}

// ---- simple primitives ------------------------------------------------------------

Var relu(Var x) {
  Graph& graph = graph_of({x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Var y = graph.make_node("relu", {x}, std::move(out), [x](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    const Tensor& xv = x.value();
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += dy[i];
    }
  });
  graph.add_kink_site(y, &x.value());
  return y;
}

Var linear(Var x, Var weight, Var bias) {
  Graph& graph = graph_of({x, weight, bias});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2) shape_fail("linear", "input must be N x in, got " + shape_str(xv.shape()));
  if (wv.rank() != 2 || wv.dim(1) != xv.dim(1)) {
    shape_fail("linear", "weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
  }
  if (!bias.valid() || bias.value().rank() != 1 || bias.value().dim(0) != wv.dim(0)) {
    shape_fail("linear", "bias must have length " + std::to_string(wv.dim(0)));
  }
  const auto N = static_cast<Eigen::Index>(xv.dim(0));
  const auto I = static_cast<Eigen::Index>(xv.dim(1));
  const auto O = static_cast<Eigen::Index>(wv.dim(0));
  Tensor out({xv.dim(0), wv.dim(0)});
  MapRow omat(out.ptr(), N, O);
  omat.noalias() = CMapRow(xv.ptr(), N, I) * CMapRow(wv.ptr(), O, I).transpose();
  const double* b = bias.value().ptr();
  for (Eigen::Index n = 0; n < N; ++n) {
    for (Eigen::Index o = 0; o < O; ++o) omat(n, o) += b[o];
  }
  return graph.make_node("linear", {x, weight, bias}, std::move(out), [x, weight, bias, N, I, O](Graph& gr, std::size_t self) {
    CMapRow dy(gr.node(self).grad.ptr(), N, O);
    if (gr.requires_grad(weight)) {
      MapRow dw(gr.grad_buffer(weight).ptr(), O, I);
      dw.noalias() += dy.transpose() * CMapRow(x.value().ptr(), N, I);
    }
    if (gr.requires_grad(bias)) {
      double* db = gr.grad_buffer(bias).ptr();
      for (Eigen::Index o = 0; o < O; ++o) db[o] += dy.col(o).sum();
    }
    if (gr.requires_grad(x)) {
      MapRow dx(gr.grad_buffer(x).ptr(), N, I);
      dx.noalias() += dy * CMapRow(weight.value().ptr(), O, I);
    }
  });
}

Var add(Var a, Var b) {
  Graph& graph = graph_of({a, b});
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out += b.value();
  return graph.make_node("add", {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    if (gr.requires_grad(a)) gr.grad_buffer(a) += dy;
    if (gr.requires_grad(b)) gr.grad_buffer(b) += dy;
  });
}

Var sub(Var a, Var b) {
  Graph& graph = graph_of({a, b});
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return graph.make_node("sub", {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    if (gr.requires_grad(a)) gr.grad_buffer(a) += dy;
    if (gr.requires_grad(b)) {
      Tensor& db = gr.grad_buffer(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
}

Var scale(Var a, double s) {
  Graph& graph = graph_of({a});
  Tensor out = a.value();
  out *= s;
  return graph.make_node("scale", {a}, std::move(out), [a, s](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    Tensor& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += s * dy[i];
  });
}

Var sum(Var a) {
  Graph& graph = graph_of({a});
  return graph.make_node("sum", {a}, Tensor({1}, a.value().sum()), [a](Graph& gr, std::size_t self) {
    const double g = gr.node(self).grad[0];
    Tensor& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
  });
}

Var mean(Var a) {
  Graph& graph = graph_of({a});
  const double n = static_cast<double>(a.value().size());
  return graph.make_node("mean", {a}, Tensor({1}, a.value().mean()), [a, n](Graph& gr, std::size_t self) {
    const double g = gr.node(self).grad[0] / n;
    Tensor& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
  });
}

Var clamp_max(Var x, double cap) {
  Graph& graph = graph_of({x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  Tensor margin(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = std::min(xv[i], cap);
    margin[i] = cap - xv[i];
  }
  Var y = graph.make_node("clamp_max", {x}, std::move(out), [x, cap](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    const Tensor& xv = x.value();
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] < cap) dx[i] += dy[i];
    }
  });
  graph.add_kink_site(y, graph.keep(y, std::move(margin)));
  return y;
}

Var dot_const(Var x, const Tensor& g) {
  Graph& graph = graph_of({x});
  require_same_shape("dot_const", x.value(), g);
  double acc = 0.0;
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * g[i];
  return graph.make_node("dot_const", {x}, Tensor({1}, acc), [x, g](Graph& gr, std::size_t self) {
    const double s = gr.node(self).grad[0];
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * g[i];
  });
}

Var avg_pool_2x(Var x) {
  Graph& graph = graph_of({x});
  const Tensor& xv = x.value();
  if (xv.rank() != 4) shape_fail("avg_pool_2x", "input must be N x C x H x W, got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 != 0 || W % 2 != 0) shape_fail("avg_pool_2x", "spatial dims must be even, got " + shape_str(xv.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  for (std::size_t p = 0; p < N * C; ++p) {
    const double* src = xv.ptr() + p * H * W;
    double* dst = out.ptr() + p * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i) {
      const double* r0 = src + 2 * i * W;
      const double* r1 = r0 + W;
      for (std::size_t j = 0; j < Wo; ++j) {
        dst[i * Wo + j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
      }
    }
  }
  return graph.make_node("avg_pool_2x", {x}, std::move(out), [x, N, C, H, W](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    Tensor& dx = gr.grad_buffer(x);
    const std::size_t Ho = H / 2, Wo = W / 2;
    for (std::size_t p = 0; p < N * C; ++p) {
      const double* src = dy.ptr() + p * Ho * Wo;
      double* dst = dx.ptr() + p * H * W;
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) dst[i * W + j] += 0.25 * src[(i / 2) * Wo + j / 2];
      }
    }
  });
}

Var upsample_2x(Var x) {
  Graph& graph = graph_of({x});
  const Tensor& xv = x.value();
  if (xv.rank() != 4) shape_fail("upsample_2x", "input must be N x C x H x W, got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  Tensor out({N, C, Ho, Wo});
  for (std::size_t p = 0; p < N * C; ++p) {
    const double* src = xv.ptr() + p * H * W;
    double* dst = out.ptr() + p * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) dst[i * Wo + j] = src[(i / 2) * W + j / 2];
    }
  }
  return graph.make_node("upsample_2x", {x}, std::move(out), [x, N, C, H, W](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    Tensor& dx = gr.grad_buffer(x);
    const std::size_t Wo = 2 * W;
    for (std::size_t p = 0; p < N * C; ++p) {
      const double* src = dy.ptr() + p * 4 * H * W;
      double* dst = dx.ptr() + p * H * W;
      for (std::size_t i = 0; i < H; ++i) {
        const double* r0 = src + 2 * i * Wo;
        const double* r1 = r0 + Wo;
        for (std::size_t j = 0; j < W; ++j) {
          dst[i * W + j] += r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
        }
      }
    }
  });
}

Var global_avg_pool_flatten(Var x) {
  Graph& graph = graph_of({x});
  const Tensor& xv = x.value();
  if (xv.rank() != 4) {
    shape_fail("global_avg_pool_flatten", "input must be N x C x H x W, got " + shape_str(xv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({N, C});
  for (std::size_t p = 0; p < N * C; ++p) {
    const double* src = xv.ptr() + p * HW;
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += src[i];
    out[p] = acc / static_cast<double>(HW);
  }
  return graph.make_node("global_avg_pool_flatten", {x}, std::move(out), [x, N, C, HW](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t p = 0; p < N * C; ++p) {
      const double g = dy[p] / static_cast<double>(HW);
      double* dst = dx.ptr() + p * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] += g;
    }
  });
}

// ---- distances and losses ----------------------------------------------------------

Var row_distance(Var a, Var b, Distance measure) {
  Graph& graph = graph_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("row_distance", av, bv);
  if (av.rank() != 2) shape_fail("row_distance", "expected N x d latents, got " + shape_str(av.shape()));
  const std::size_t N = av.dim(0), D = av.dim(1);
  const double inv_d = 1.0 / static_cast<double>(D);
  Tensor out({N});
  Tensor diff(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) diff[i] = av[i] - bv[i];
  for (std::size_t n = 0; n < N; ++n) {
    const double* dr = diff.ptr() + n * D;
    const double* ar = av.ptr() + n * D;
    const double* br = bv.ptr() + n * D;
    double acc = 0.0;
    switch (measure) {
      case Distance::kL1:
        for (std::size_t j = 0; j < D; ++j) acc += std::abs(dr[j]);
        out[n] = acc * inv_d;
        break;
      case Distance::kL2:
        for (std::size_t j = 0; j < D; ++j) acc += dr[j] * dr[j];
        out[n] = std::sqrt(acc * inv_d);
        break;
      case Distance::kCosine: {
        double na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
          acc += ar[j] * br[j];
          na += ar[j] * ar[j];
          nb += br[j] * br[j];
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        out[n] = denom > 0.0 ? 1.0 - acc / denom : 1.0;
        break;
      }
    }
  }
  Tensor dist_copy = out;
  Var y = graph.make_node("row_distance", {a, b}, std::move(out), [a, b, measure, N, D](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.node(self).grad;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Tensor& dist = gr.node(self).value;
    const double inv_d = 1.0 / static_cast<double>(D);
    Tensor ga(av.shape());
    for (std::size_t n = 0; n < N; ++n) {
      const double* ar = av.ptr() + n * D;
      const double* br = bv.ptr() + n * D;
      double* g = ga.ptr() + n * D;
      switch (measure) {
        case Distance::kL1:
          for (std::size_t j = 0; j < D; ++j) {
            const double d = ar[j] - br[j];
            g[j] = d > 0.0 ? inv_d : (d < 0.0 ? -inv_d : 0.0);
          }
          break;
        case Distance::kL2:
          if (dist[n] > 0.0) {
            for (std::size_t j = 0; j < D; ++j) g[j] = (ar[j] - br[j]) * inv_d / dist[n];
          }
          break;
        case Distance::kCosine: {
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            dot += ar[j] * br[j];
            na += ar[j] * ar[j];
            nb += br[j] * br[j];
          }
          if (na > 0.0 && nb > 0.0) {
            const double denom = std::sqrt(na) * std::sqrt(nb);
            // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
            const double c = dot / denom;
            for (std::size_t j = 0; j < D; ++j) g[j] = -(br[j] / denom - c * ar[j] / na);
          }
          break;
        }
      }
      for (std::size_t j = 0; j < D; ++j) g[j] *= dy[n];
    }
    if (gr.requires_grad(a)) gr.grad_buffer(a) += ga;
    if (gr.requires_grad(b)) {
      if (measure == Distance::kCosine) {
        // Cosine is symmetric but its partials are not negatives of each other.
        Tensor gb(bv.shape());
        for (std::size_t n = 0; n < N; ++n) {
          const double* ar = av.ptr() + n * D;
          const double* br = bv.ptr() + n * D;
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            dot += ar[j] * br[j];
            na += ar[j] * ar[j];
            nb += br[j] * br[j];
          }
          if (na > 0.0 && nb > 0.0) {
            const double denom = std::sqrt(na) * std::sqrt(nb);
            const double c = dot / denom;
            for (std::size_t j = 0; j < D; ++j) gb.ptr()[n * D + j] = -(ar[j] / denom - c * br[j] / nb) * dy[n];
          }
        }
        gr.grad_buffer(b) += gb;
      } else {
        Tensor& db = gr.grad_buffer(b);
        for (std::size_t i = 0; i < ga.size(); ++i) db[i] -= ga[i];
      }
    }
  });
  if (measure == Distance::kL1) graph.add_kink_site(y, graph.keep(y, std::move(diff)));
  if (measure == Distance::kL2) graph.add_kink_site(y, graph.keep(y, std::move(dist_copy)));
  return y;
}

Var l1_loss(Var a, Var b) {
  Graph& graph = graph_of({a, b});
  require_same_shape("l1_loss", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor diff(av.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    diff[i] = av[i] - bv[i];
    acc += std::abs(diff[i]);
  }
  const double n = static_cast<double>(av.size());
  Var y = graph.make_node("l1_loss", {a, b}, Tensor({1}, acc / n), [a, b, n](Graph& gr, std::size_t self) {
    const double g = gr.node(self).grad[0] / n;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool da_on = gr.requires_grad(a), db_on = gr.requires_grad(b);
    Tensor* da = da_on ? &gr.grad_buffer(a) : nullptr;
    Tensor* db = db_on ? &gr.grad_buffer(b) : nullptr;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      const double s = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
      if (da) (*da)[i] += s;
      if (db) (*db)[i] -= s;
    }
  });
  graph.add_kink_site(y, graph.keep(y, std::move(diff)));
  return y;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows: expected N x J, got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), J = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const double* r = logits.ptr() + n * J;
    double* o = out.ptr() + n * J;
    const double mx = *std::max_element(r, r + J);
    double z = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      o[j] = std::exp(r[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < J; ++j) o[j] /= z;
  }
  return out;
}

Var softmax_cross_entropy(Var logits, const Tensor& one_hot) {
  Graph& graph = graph_of({logits});
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) shape_fail("softmax_cross_entropy", "logits must be N x J, got " + shape_str(lv.shape()));
  if (one_hot.rank() != 2 || one_hot.dim(0) != lv.dim(0) || one_hot.dim(1) != lv.dim(1)) {
    shape_fail("softmax_cross_entropy", "label shape " + shape_str(one_hot.shape()) + " does not match logits " +
                                            shape_str(lv.shape()) + " (J mismatch)");
  }
  const std::size_t N = lv.dim(0), J = lv.dim(1);
  std::vector<std::size_t> label(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < J; ++j) {
      const double v = one_hot[n * J + j];
      if (v == 1.0) {
        ++ones;
        label[n] = j;
      } else if (v != 0.0) {
        ones = 2;
      }
    }
    if (ones != 1) shape_fail("softmax_cross_entropy", "label row " + std::to_string(n) + " is not one-hot");
  }
  double acc = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* r = lv.ptr() + n * J;
    const double mx = *std::max_element(r, r + J);
    double z = 0.0;
    for (std::size_t j = 0; j < J; ++j) z += std::exp(r[j] - mx);
    acc += (std::log(z) + mx) - r[label[n]];
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  return graph.make_node("softmax_cross_entropy", {logits}, Tensor({1}, acc * inv_n),
                         [logits, one_hot, inv_n](Graph& gr, std::size_t self) {
                           const double g = gr.node(self).grad[0] * inv_n;
                           Tensor p = softmax_rows(logits.value());
                           Tensor& dl = gr.grad_buffer(logits);
                           for (std::size_t i = 0; i < p.size(); ++i) dl[i] += g * (p[i] - one_hot[i]);
                         });
}

}  // namespace fedcrfd
