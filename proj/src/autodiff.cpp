#include "bbal/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "bbal/error.hpp"

namespace bbal {

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw Error(ErrorCode::invalid_input, "duplicate parameter '" + name + "'");
  Tensor grad(value.shape());
  entries_.push_back(Entry{std::move(name), std::move(value), std::move(grad), trainable});
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw Error(ErrorCode::index, "no parameter named '" + std::string(name) + "'");
}

void ParamSet::set_trainable(std::string_view name, bool trainable) {
  Entry& e = entries_.at(index_of(name));
  e.trainable = trainable;
  if (!trainable) e.grad.fill(0.0);
}

void ParamSet::zero_grad() {
  for (Entry& e : entries_) e.grad.fill(0.0);
}

void ParamSet::assign(std::string_view name, Tensor value) {
  Entry& e = entries_.at(index_of(name));
  if (value.shape() != e.value.shape()) {
    throw Error(ErrorCode::invalid_input, "parameter '" + e.name + "' expects shape " + shape_string(e.value.shape()) +
                                              ", got " + shape_string(value.shape()));
  }
  e.value = std::move(value);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.value.size();
  return n;
}

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const Entry& e : entries_) h = bbal::checksum(e.value.values(), h);
  return h;
}

// ---------------------------------------------------------------------------
// Graph

namespace {

constexpr double kProbFloor = 1e-12;

void softmax_row(std::span<const double> z, std::span<double> p) {
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    p[j] = std::exp(z[j] - mx);
    total += p[j];
  }
  for (double& v : p) v /= total;
}

double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  return mx + std::log(total);
}

// Pulls a gradient w.r.t. probabilities back through softmax: p * (g - <p, g>).
void softmax_backward(std::span<const double> p, std::span<const double> g, std::span<double> dz) {
  double dot = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) dot += p[j] * g[j];
  for (std::size_t j = 0; j < p.size(); ++j) dz[j] = p[j] * (g[j] - dot);
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw Error(ErrorCode::invalid_input, std::string(op) + " expects a [batch x classes] tensor, got " + shape_string(t.shape()));
  }
}

void require_labels(const Tensor& logits, std::span<const std::size_t> labels, const char* op) {
  require_rank2(logits, op);
  if (labels.size() != logits.dim(0)) throw Error(ErrorCode::invalid_input, std::string(op) + ": label count mismatch");
  for (std::size_t y : labels) {
    if (y >= logits.dim(1)) throw Error(ErrorCode::index, std::string(op) + ": label out of range");
  }
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t b = 0; b < logits.dim(0); ++b) softmax_row(logits.row(b), p.row(b));
  return p;
}

}  // namespace

NodeId Graph::push(Tensor value, bool requires_grad, Backward backward) {
  if (backward_done_) throw Error(ErrorCode::state, "graph already consumed by backward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Tensor& Graph::grad_slot(NodeId id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (!backward_done_ || n.grad.empty()) throw Error(ErrorCode::state, "no gradient recorded for node");
  return n.grad;
}

NodeId Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

NodeId Graph::parameter(ParamSet& params, std::string_view name) {
  const std::size_t idx = params.index_of(name);
  const bool trainable = params.trainable(idx);
  NodeId id = push(params.value(idx), trainable, nullptr);
  nodes_[id].params = &params;
  nodes_[id].param_index = idx;
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  Tensor out = bbal::matmul(value(a), value(b));
  return push(std::move(out), needs(a) || needs(b), [a, b](Graph& g, NodeId self) {
    const Tensor& dout = g.nodes_[self].grad;
    if (g.needs(a)) {
      Tensor da = matmul_transpose_b(dout, g.value(b));
      Tensor& slot = g.grad_slot(a);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += da[i];
    }
    if (g.needs(b)) {
      Tensor db = matmul_transpose_a(g.value(a), dout);
      Tensor& slot = g.grad_slot(b);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += db[i];
    }
  });
}

NodeId Graph::add_bias(NodeId x, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require_rank2(xv, "add_bias");
  if (bv.size() != xv.dim(1)) throw Error(ErrorCode::invalid_input, "add_bias width mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.dim(0); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bv[j];
  }
  return push(std::move(out), needs(x) || needs(bias), [x, bias](Graph& g, NodeId self) {
    const Tensor& dout = g.nodes_[self].grad;
    if (g.needs(x)) {
      Tensor& slot = g.grad_slot(x);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += dout[i];
    }
    if (g.needs(bias)) {
      Tensor& slot = g.grad_slot(bias);
      for (std::size_t r = 0; r < dout.dim(0); ++r) {
        auto row = dout.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) slot[j] += row[j];
      }
    }
  });
}

NodeId Graph::tanh(NodeId x) {
  Tensor out = value(x);
  for (double& v : out.values()) v = std::tanh(v);
  return push(std::move(out), needs(x), [x](Graph& g, NodeId self) {
    const Tensor& y = g.nodes_[self].value;
    const Tensor& dout = g.nodes_[self].grad;
    Tensor& slot = g.grad_slot(x);
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += dout[i] * (1.0 - y[i] * y[i]);
  });
}

NodeId Graph::relu(NodeId x) {
  Tensor out = value(x);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), needs(x), [x](Graph& g, NodeId self) {
    const Tensor& in = g.value(x);
    const Tensor& dout = g.nodes_[self].grad;
    Tensor& slot = g.grad_slot(x);
    for (std::size_t i = 0; i < slot.size(); ++i) {
      if (in[i] > 0.0) slot[i] += dout[i];
    }
  });
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  return push(std::move(out), needs(x), [x](Graph& g, NodeId self) {
    const Tensor& dout = g.nodes_[self].grad;
    Tensor& slot = g.grad_slot(x);
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += dout[i];
  });
}

NodeId Graph::sum(NodeId x) {
  double total = 0.0;
  for (double v : value(x).values()) total += v;
  return push(Tensor({1}, {total}), needs(x), [x](Graph& g, NodeId self) {
    const double d = g.nodes_[self].grad[0];
    Tensor& slot = g.grad_slot(x);
    for (double& v : slot.values()) v += d;
  });
}

NodeId Graph::mul_constant(NodeId x, Tensor factor) {
  const Tensor& xv = value(x);
  if (factor.shape() != xv.shape()) throw Error(ErrorCode::invalid_input, "mul_constant shape mismatch");
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor[i];
  return push(std::move(out), needs(x), [x, factor = std::move(factor)](Graph& g, NodeId self) {
    const Tensor& dout = g.nodes_[self].grad;
    Tensor& slot = g.grad_slot(x);
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += dout[i] * factor[i];
  });
}

NodeId Graph::clamp(NodeId x, double lo, double hi) {
  Tensor out = value(x);
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  return push(std::move(out), needs(x), [x, lo, hi](Graph& g, NodeId self) {
    const Tensor& in = g.value(x);
    const Tensor& dout = g.nodes_[self].grad;
    Tensor& slot = g.grad_slot(x);
    for (std::size_t i = 0; i < slot.size(); ++i) {
      if (in[i] > lo && in[i] < hi) slot[i] += dout[i];
    }
  });
}

NodeId Graph::embed(NodeId images, NodeId border, EmbedIndex index, std::size_t out_columns) {
  const Tensor& img = value(images);
  require_rank2(img, "embed");
  if (!index || index->size() != out_columns) throw Error(ErrorCode::invalid_input, "embed index size mismatch");
  const Tensor* bv = border == no_node ? nullptr : &value(border);
  const std::size_t batch = img.dim(0);
  const std::size_t in_cols = img.dim(1);
  for (std::int64_t src : *index) {
    if (src >= 0 && static_cast<std::size_t>(src) >= in_cols) throw Error(ErrorCode::index, "embed image index out of range");
    if (src < 0 && (!bv || static_cast<std::size_t>(-src - 1) >= bv->size())) {
      throw Error(ErrorCode::index, "embed border index out of range");
    }
  }
  Tensor out({batch, out_columns});
  for (std::size_t b = 0; b < batch; ++b) {
    auto src_row = img.row(b);
    auto dst = out.row(b);
    for (std::size_t j = 0; j < out_columns; ++j) {
      const std::int64_t s = (*index)[j];
      dst[j] = s >= 0 ? src_row[static_cast<std::size_t>(s)] : (*bv)[static_cast<std::size_t>(-s - 1)];
    }
  }
  const bool req = needs(images) || (border != no_node && needs(border));
  return push(std::move(out), req, [images, border, index](Graph& g, NodeId self) {
    const Tensor& dout = g.nodes_[self].grad;
    const std::size_t batch = dout.dim(0);
    const bool want_img = g.needs(images);
    const bool want_border = border != no_node && g.needs(border);
    Tensor* di = want_img ? &g.grad_slot(images) : nullptr;
    Tensor* db = want_border ? &g.grad_slot(border) : nullptr;
    for (std::size_t b = 0; b < batch; ++b) {
      auto row = dout.row(b);
      for (std::size_t j = 0; j < row.size(); ++j) {
        const std::int64_t s = (*index)[j];
        if (s >= 0) {
          if (di) di->row(b)[static_cast<std::size_t>(s)] += row[j];
        } else if (db) {
          (*db)[static_cast<std::size_t>(-s - 1)] += row[j];
        }
      }
    }
  });
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const std::size_t> labels) {
  const Tensor& z = value(logits);
  require_labels(z, labels, "softmax_cross_entropy");
  const std::size_t batch = z.dim(0);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = z.row(b);
    total += log_sum_exp(row) - row[labels[b]];
  }
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return push(Tensor({1}, {total / static_cast<double>(batch)}), needs(logits),
              [logits, ys = std::move(ys)](Graph& g, NodeId self) {
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(ys.size());
                const Tensor p = softmax_rows(g.value(logits));
                Tensor& slot = g.grad_slot(logits);
                for (std::size_t b = 0; b < ys.size(); ++b) {
                  auto pr = p.row(b);
                  auto dr = slot.row(b);
                  for (std::size_t j = 0; j < pr.size(); ++j) {
                    dr[j] += scale * (pr[j] - (j == ys[b] ? 1.0 : 0.0));
                  }
                }
              });
}

NodeId Graph::mapped_nll(NodeId logits, std::span<const std::size_t> labels, const Tensor& map) {
  const Tensor& z = value(logits);
  require_rank2(z, "mapped_nll");
  require_rank2(map, "mapped_nll map");
  if (map.dim(1) != z.dim(1)) throw Error(ErrorCode::invalid_input, "mapped_nll: map width does not match logits");
  if (labels.size() != z.dim(0)) throw Error(ErrorCode::invalid_input, "mapped_nll: label count mismatch");
  for (std::size_t y : labels) {
    if (y >= map.dim(0)) throw Error(ErrorCode::index, "mapped_nll: label out of range");
  }
  const std::size_t batch = z.dim(0);
  const std::size_t ks = z.dim(1);
  const std::size_t kt = map.dim(0);
  const Tensor p = softmax_rows(z);
  double total = 0.0;
  std::vector<char> floored(batch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto pr = p.row(b);
    double sy = 0.0, stotal = 0.0;
    for (std::size_t t = 0; t < kt; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < ks; ++k) s += map.at(t, k) * pr[k];
      stotal += s;
      if (t == labels[b]) sy = s;
    }
    const double q = stotal > 0.0 ? sy / stotal : 0.0;
    if (q < kProbFloor) {
      floored[b] = 1;
      total += -std::log(kProbFloor);
    } else {
      total += -std::log(q);
    }
  }
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return push(Tensor({1}, {total / static_cast<double>(batch)}), needs(logits),
              [logits, ys = std::move(ys), map, p, floored = std::move(floored)](Graph& g, NodeId self) {
                const std::size_t batch = ys.size();
                const std::size_t ks = map.dim(1);
                const std::size_t kt = map.dim(0);
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(batch);
                std::vector<double> colsum(ks, 0.0);
                for (std::size_t t = 0; t < kt; ++t) {
                  for (std::size_t k = 0; k < ks; ++k) colsum[k] += map.at(t, k);
                }
                Tensor& slot = g.grad_slot(logits);
                std::vector<double> gp(ks), dz(ks);
                for (std::size_t b = 0; b < batch; ++b) {
                  if (floored[b]) continue;
                  auto pr = p.row(b);
                  double sy = 0.0, stotal = 0.0;
                  for (std::size_t k = 0; k < ks; ++k) {
                    sy += map.at(ys[b], k) * pr[k];
                    stotal += colsum[k] * pr[k];
                  }
                  for (std::size_t k = 0; k < ks; ++k) gp[k] = -map.at(ys[b], k) / sy + colsum[k] / stotal;
                  softmax_backward(pr, gp, dz);
                  auto dr = slot.row(b);
                  for (std::size_t k = 0; k < ks; ++k) dr[k] += scale * dz[k];
                }
              });
}

NodeId Graph::soft_cross_entropy(NodeId logits, const Tensor& targets) {
  const Tensor& z = value(logits);
  require_rank2(z, "soft_cross_entropy");
  if (targets.shape() != z.shape()) throw Error(ErrorCode::invalid_input, "soft_cross_entropy: target shape mismatch");
  const std::size_t batch = z.dim(0);
  const double log_floor = std::log(kProbFloor);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    auto zr = z.row(b);
    auto tr = targets.row(b);
    const double lse = log_sum_exp(zr);
    for (std::size_t j = 0; j < zr.size(); ++j) total -= tr[j] * std::max(zr[j] - lse, log_floor);
  }
  return push(Tensor({1}, {total / static_cast<double>(batch)}), needs(logits),
              [logits, targets, log_floor](Graph& g, NodeId self) {
                const Tensor& z = g.value(logits);
                const std::size_t batch = z.dim(0);
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(batch);
                Tensor& slot = g.grad_slot(logits);
                std::vector<double> p(z.dim(1));
                for (std::size_t b = 0; b < batch; ++b) {
                  auto zr = z.row(b);
                  auto tr = targets.row(b);
                  const double lse = log_sum_exp(zr);
                  softmax_row(zr, p);
                  double active_mass = 0.0;
                  for (std::size_t j = 0; j < zr.size(); ++j) {
                    if (zr[j] - lse > log_floor) active_mass += tr[j];
                  }
                  auto dr = slot.row(b);
                  for (std::size_t j = 0; j < zr.size(); ++j) {
                    const double own = zr[j] - lse > log_floor ? tr[j] : 0.0;
                    dr[j] += scale * (p[j] * active_mass - own);
                  }
                }
              });
}

NodeId Graph::probability_distance(NodeId logits, const Tensor& targets, int order) {
  const Tensor& z = value(logits);
  require_rank2(z, "probability_distance");
  if (targets.shape() != z.shape()) throw Error(ErrorCode::invalid_input, "probability_distance: target shape mismatch");
  if (order != 1 && order != 2) throw Error(ErrorCode::invalid_input, "probability_distance: order must be 1 or 2");
  const Tensor p = softmax_rows(z);
  const std::size_t batch = z.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - targets[i];
    total += order == 1 ? std::abs(d) : d * d;
  }
  return push(Tensor({1}, {total / static_cast<double>(batch)}), needs(logits),
              [logits, targets, order, p](Graph& g, NodeId self) {
                const std::size_t batch = p.dim(0);
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(batch);
                Tensor& slot = g.grad_slot(logits);
                std::vector<double> gp(p.dim(1)), dz(p.dim(1));
                for (std::size_t b = 0; b < batch; ++b) {
                  auto pr = p.row(b);
                  auto tr = targets.row(b);
                  for (std::size_t j = 0; j < pr.size(); ++j) {
                    const double d = pr[j] - tr[j];
                    gp[j] = order == 1 ? (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) : 2.0 * d;
                  }
                  softmax_backward(pr, gp, dz);
                  auto dr = slot.row(b);
                  for (std::size_t j = 0; j < pr.size(); ++j) dr[j] += scale * dz[j];
                }
              });
}

NodeId Graph::logit_distance(NodeId logits, const Tensor& targets, int order) {
  const Tensor& z = value(logits);
  require_rank2(z, "logit_distance");
  if (targets.shape() != z.shape()) throw Error(ErrorCode::invalid_input, "logit_distance: target shape mismatch");
  if (order != 1 && order != 2) throw Error(ErrorCode::invalid_input, "logit_distance: order must be 1 or 2");
  const std::size_t batch = z.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - targets[i];
    total += order == 1 ? std::abs(d) : d * d;
  }
  return push(Tensor({1}, {total / static_cast<double>(batch)}), needs(logits),
              [logits, targets, order](Graph& g, NodeId self) {
                const Tensor& z = g.value(logits);
                const double scale = g.nodes_[self].grad[0] / static_cast<double>(z.dim(0));
                Tensor& slot = g.grad_slot(logits);
                for (std::size_t i = 0; i < z.size(); ++i) {
                  const double d = z[i] - targets[i];
                  slot[i] += scale * (order == 1 ? (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) : 2.0 * d);
                }
              });
}

void Graph::backward(NodeId loss) {
  if (nodes_.empty()) throw Error(ErrorCode::state, "backward called before any forward pass");
  if (backward_done_) throw Error(ErrorCode::state, "backward already ran on this graph");
  if (loss >= nodes_.size()) throw Error(ErrorCode::state, "backward from a node that was never recorded");
  if (nodes_[loss].value.size() != 1) throw Error(ErrorCode::state, "backward requires a scalar loss");
  backward_done_ = true;
  grad_slot(loss)[0] = 1.0;
  for (NodeId id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, id);
    } else if (n.params != nullptr) {
      Tensor& target = n.params->grad(n.param_index);
      for (std::size_t i = 0; i < target.size(); ++i) target[i] += n.grad[i];
    }
  }
}

}  // namespace bbal
