#include "ads/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "ads/errors.hpp"

namespace ads {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

CMatMap as_mat(const Tensor& t) { return CMatMap(t.data.data(), t.rows(), t.cols()); }
MatMap as_mat(Tensor& t) { return MatMap(t.data.data(), t.rows(), t.cols()); }

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

constexpr double kLnEps = 1e-5;  // layernorm variance epsilon

}  // namespace

Tape::Id Tape::push(Tensor value, const char* op, std::function<void(Tape&)> backprop) {
  nodes_.push_back(Node{std::move(value), op, std::move(backprop)});
  return static_cast<Id>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(Id id) {
  auto idx = static_cast<size_t>(id);
  if (grads_[idx].shape.empty() && !nodes_[idx].value.shape.empty()) {
    grads_[idx] = Tensor(nodes_[idx].value.shape);
  }
  return grads_[idx];
}

Tape::Id Tape::leaf(Tensor value, const char* op) { return push(std::move(value), op, nullptr); }

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  require(A.cols() == B.rows(), "matmul: inner dimensions differ");
  Tensor out({A.rows(), B.cols()});
  as_mat(out).noalias() = as_mat(A) * as_mat(B);
  return push(std::move(out), "matmul", [a, b, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    t.grad_buf(a);
    t.grad_buf(b);
    as_mat(t.grads_[a]).noalias() += as_mat(g) * as_mat(t.val(b)).transpose();
    as_mat(t.grads_[b]).noalias() += as_mat(t.val(a)).transpose() * as_mat(g);
  });
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  require(A.cols() == B.cols(), "matmul_nt: inner dimensions differ");
  Tensor out({A.rows(), B.rows()});
  as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
  return push(std::move(out), "matmul_nt", [a, b, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    t.grad_buf(a);
    t.grad_buf(b);
    as_mat(t.grads_[a]).noalias() += as_mat(g) * as_mat(t.val(b));
    as_mat(t.grads_[b]).noalias() += as_mat(g).transpose() * as_mat(t.val(a));
  });
}

Tape::Id Tape::add(Id a, Id b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  require(A.same_shape(B), "add: shape mismatch");
  Tensor out = A;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
  return push(std::move(out), "add", [a, b, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] += g.data[i];
    }
  });
}

Tape::Id Tape::sub(Id a, Id b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  require(A.same_shape(B), "sub: shape mismatch");
  Tensor out = A;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
  return push(std::move(out), "sub", [a, b, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] -= g.data[i];
    }
  });
}

Tape::Id Tape::mul(Id a, Id b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  require(A.same_shape(B), "mul: shape mismatch");
  Tensor out = A;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
  return push(std::move(out), "mul", [a, b, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    const Tensor& A2 = t.val(a);
    const Tensor& B2 = t.val(b);
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] += g.data[i] * B2.data[i];
      gb.data[i] += g.data[i] * A2.data[i];
    }
  });
}

Tape::Id Tape::scale(Id a, double s) {
  Tensor out = val(a);
  for (double& v : out.data) v *= s;
  return push(std::move(out), "scale", [a, s, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    Tensor& ga = t.grad_buf(a);
    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
  });
}

Tape::Id Tape::add_row_broadcast(Id a, Id row) {
  const Tensor& A = val(a);
  const Tensor& R = val(row);
  require(A.cols() == static_cast<int64_t>(R.numel()), "add_row_broadcast: width mismatch");
  Tensor out = A;
  const int64_t n = A.rows(), d = A.cols();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) += R.data[static_cast<size_t>(j)];
  return push(std::move(out), "add_row_broadcast",
              [a, row, id = static_cast<Id>(nodes_.size())](Tape& t) {
                const Tensor& g = t.grad(id);
                Tensor& ga = t.grad_buf(a);
                Tensor& gr = t.grad_buf(row);
                const int64_t n = g.rows(), d = g.cols();
                for (int64_t i = 0; i < n; ++i)
                  for (int64_t j = 0; j < d; ++j) {
                    ga.at(i, j) += g.at(i, j);
                    gr.data[static_cast<size_t>(j)] += g.at(i, j);
                  }
              });
}

Tape::Id Tape::sum(Id a) {
  double s = 0.0;
  for (double v : val(a).data) s += v;
  return push(Tensor::scalar(s), "sum", [a, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const double g = t.grad(id).data[0];
    Tensor& ga = t.grad_buf(a);
    for (double& v : ga.data) v += g;
  });
}

namespace {
inline double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }
inline double gelu_bwd(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
}  // namespace

Tape::Id Tape::gelu(Id a) {
  Tensor out = val(a);
  for (double& v : out.data) v = gelu_fwd(v);
  return push(std::move(out), "gelu", [a, id = static_cast<Id>(nodes_.size())](Tape& t) {
    const Tensor& g = t.grad(id);
    const Tensor& x = t.val(a);
    Tensor& ga = t.grad_buf(a);
    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * gelu_bwd(x.data[i]);
  });
}

Tape::Id Tape::layer_norm(Id x, Id gain, Id bias) {
  const Tensor& X = val(x);
  const Tensor& G = val(gain);
  const Tensor& B = val(bias);
  const int64_t n = X.rows(), d = X.cols();
  require(static_cast<int64_t>(G.numel()) == d && static_cast<int64_t>(B.numel()) == d,
          "layer_norm: gain/bias width mismatch");
  Tensor out({n, d});
  auto xhat = std::make_shared<Tensor>(Tensor({n, d}));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += X.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = X.at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    (*rstd)[static_cast<size_t>(i)] = r;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (X.at(i, j) - mean) * r;
      xhat->at(i, j) = xh;
      out.at(i, j) = G.data[static_cast<size_t>(j)] * xh + B.data[static_cast<size_t>(j)];
    }
  }
  return push(std::move(out), "layer_norm",
              [x, gain, bias, xhat, rstd, id = static_cast<Id>(nodes_.size())](Tape& t) {
                const Tensor& g = t.grad(id);
                const Tensor& G = t.val(gain);
                Tensor& gx = t.grad_buf(x);
                Tensor& gg = t.grad_buf(gain);
                Tensor& gb = t.grad_buf(bias);
                const int64_t n = g.rows(), d = g.cols();
                for (int64_t i = 0; i < n; ++i) {
                  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                  for (int64_t j = 0; j < d; ++j) {
                    const double dy = g.at(i, j);
                    const double xh = xhat->at(i, j);
                    gg.data[static_cast<size_t>(j)] += dy * xh;
                    gb.data[static_cast<size_t>(j)] += dy;
                    const double dxh = dy * G.data[static_cast<size_t>(j)];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh;
                  }
                  mean_dxhat /= static_cast<double>(d);
                  mean_dxhat_xhat /= static_cast<double>(d);
                  const double r = (*rstd)[static_cast<size_t>(i)];
                  for (int64_t j = 0; j < d; ++j) {
                    const double dxh = g.at(i, j) * G.data[static_cast<size_t>(j)];
                    const double xh = xhat->at(i, j);
                    gx.at(i, j) += r * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                  }
                }
              });
}

Tape::Id Tape::embedding(Id table, std::vector<int> ids) {
  const Tensor& T = val(table);
  const int64_t d = T.cols();
  Tensor out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < T.rows(), "embedding: id out of range");
    std::copy_n(T.data.data() + static_cast<size_t>(ids[i]) * d, d,
                out.data.data() + i * static_cast<size_t>(d));
  }
  return push(std::move(out), "embedding",
              [table, ids = std::move(ids), id = static_cast<Id>(nodes_.size())](Tape& t) {
                const Tensor& g = t.grad(id);
                Tensor& gt = t.grad_buf(table);
                const int64_t d = g.cols();
                for (size_t i = 0; i < ids.size(); ++i) {
                  double* dst = gt.data.data() + static_cast<size_t>(ids[i]) * d;
                  const double* src = g.data.data() + i * static_cast<size_t>(d);
                  for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
              });
}

Tape::Id Tape::causal_attention(Id q, Id k, Id v, std::vector<SeqSpan> spans, int n_heads) {
  const Tensor& Q = val(q);
  const Tensor& K = val(k);
  const Tensor& V = val(v);
  const int64_t n = Q.rows(), d = Q.cols();
  require(K.rows() == n && V.rows() == n && K.cols() == d && V.cols() == d,
          "causal_attention: q/k/v shape mismatch");
  require(n_heads > 0 && d % n_heads == 0, "causal_attention: heads must divide width");
  const int64_t hd = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor out({n, d});
  // softmax probabilities per (span, head), kept for the backward pass
  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(spans.size() * static_cast<size_t>(n_heads));
  for (const auto& s : spans) {
    for (int h = 0; h < n_heads; ++h) {
      auto Qh = as_mat(Q).block(s.offset, h * hd, s.len, hd);
      auto Kh = as_mat(K).block(s.offset, h * hd, s.len, hd);
      auto Vh = as_mat(V).block(s.offset, h * hd, s.len, hd);
      Mat scores = Qh * Kh.transpose() * inv_scale;
      for (int64_t i = 0; i < s.len; ++i) {
        double mx = scores(i, 0);
        for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          sum += scores(i, j);
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j <= i; ++j) scores(i, j) *= inv;
        for (int64_t j = i + 1; j < s.len; ++j) scores(i, j) = 0.0;  // causal mask
      }
      as_mat(out).block(s.offset, h * hd, s.len, hd).noalias() = scores * Vh;
      probs->push_back(std::move(scores));
    }
  }
  return push(std::move(out), "causal_attention",
              [q, k, v, spans = std::move(spans), n_heads, probs, inv_scale, hd,
               id = static_cast<Id>(nodes_.size())](Tape& t) {
                const Tensor& g = t.grad(id);
                Tensor& gq = t.grad_buf(q);
                Tensor& gk = t.grad_buf(k);
                Tensor& gv = t.grad_buf(v);
                size_t pi = 0;
                for (const auto& s : spans) {
                  for (int h = 0; h < n_heads; ++h, ++pi) {
                    const Mat& P = (*probs)[pi];
                    auto Qh = as_mat(t.val(q)).block(s.offset, h * hd, s.len, hd);
                    auto Kh = as_mat(t.val(k)).block(s.offset, h * hd, s.len, hd);
                    auto Vh = as_mat(t.val(v)).block(s.offset, h * hd, s.len, hd);
                    auto dC = as_mat(g).block(s.offset, h * hd, s.len, hd);
                    Mat dP = dC * Vh.transpose();
                    // softmax rows: dS = P .* (dP - rowsum(dP .* P))
                    Mat dS = P;
                    for (int64_t i = 0; i < s.len; ++i) {
                      double dot = 0.0;
                      for (int64_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
                      for (int64_t j = 0; j < s.len; ++j)
                        dS(i, j) = P(i, j) * (dP(i, j) - dot);
                    }
                    as_mat(gq).block(s.offset, h * hd, s.len, hd).noalias() +=
                        dS * Kh * inv_scale;
                    as_mat(gk).block(s.offset, h * hd, s.len, hd).noalias() +=
                        dS.transpose() * Qh * inv_scale;
                    as_mat(gv).block(s.offset, h * hd, s.len, hd).noalias() +=
                        P.transpose() * dC;
                  }
                }
              });
}

Tape::Id Tape::log_softmax_rows(Id a) {
  Tensor out = val(a);
  const int64_t n = out.rows(), d = out.cols();
  for (int64_t i = 0; i < n; ++i)
    log_softmax_inplace(out.data.data() + static_cast<size_t>(i * d), static_cast<size_t>(d));
  return push(std::move(out), "log_softmax_rows",
              [a, id = static_cast<Id>(nodes_.size())](Tape& t) {
                const Tensor& g = t.grad(id);
                const Tensor& y = t.val(id);  // log-probs
                Tensor& ga = t.grad_buf(a);
                const int64_t n = g.rows(), d = g.cols();
                for (int64_t i = 0; i < n; ++i) {
                  double gsum = 0.0;
                  for (int64_t j = 0; j < d; ++j) gsum += g.at(i, j);
                  for (int64_t j = 0; j < d; ++j)
                    ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gsum;
                }
              });
}

Tape::Id Tape::pick(Id a, int64_t row, int64_t col) {
  const Tensor& A = val(a);
  require(row >= 0 && row < A.rows() && col >= 0 && col < A.cols(), "pick: index out of range");
  return push(Tensor::scalar(A.at(row, col)), "pick",
              [a, row, col, id = static_cast<Id>(nodes_.size())](Tape& t) {
                t.grad_buf(a).at(row, col) += t.grad(id).data[0];
              });
}

Tape::Id Tape::weighted_cross_entropy(Id logits, std::vector<int> targets,
                                      std::vector<double> weights) {
  const Tensor& L = val(logits);
  const int64_t n = L.rows(), d = L.cols();
  require(static_cast<int64_t>(targets.size()) == n && targets.size() == weights.size(),
          "weighted_cross_entropy: targets/weights length mismatch");
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (weights[static_cast<size_t>(i)] == 0.0) continue;
    const int tgt = targets[static_cast<size_t>(i)];
    require(tgt >= 0 && tgt < d, "weighted_cross_entropy: target out of range");
    const double* row = L.data.data() + static_cast<size_t>(i * d);
    double mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) sum += std::exp(row[j] - mx);
    loss += weights[static_cast<size_t>(i)] * (mx + std::log(sum) - row[tgt]);
  }
  return push(Tensor::scalar(loss), "weighted_cross_entropy",
              [logits, targets = std::move(targets), weights = std::move(weights),
               id = static_cast<Id>(nodes_.size())](Tape& t) {
                const double g = t.grad(id).data[0];
                const Tensor& L = t.val(logits);
                Tensor& gl = t.grad_buf(logits);
                const int64_t n = L.rows(), d = L.cols();
                for (int64_t i = 0; i < n; ++i) {
                  const double w = weights[static_cast<size_t>(i)];
                  if (w == 0.0) continue;
                  const double* row = L.data.data() + static_cast<size_t>(i * d);
                  double* grow = gl.data.data() + static_cast<size_t>(i * d);
                  double mx = row[0];
                  for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
                  double sum = 0.0;
                  for (int64_t j = 0; j < d; ++j) sum += std::exp(row[j] - mx);
                  const double inv = 1.0 / sum;
                  for (int64_t j = 0; j < d; ++j)
                    grow[j] += g * w * std::exp(row[j] - mx) * inv;
                  grow[targets[static_cast<size_t>(i)]] -= g * w;
                }
              });
}

void Tape::backward(Id root) { backward(root, Tensor::scalar(1.0)); }

void Tape::backward(Id root, const Tensor& seed) {
  if (!val(root).same_shape(seed)) throw std::invalid_argument("backward: seed shape mismatch");
  grads_.assign(nodes_.size(), Tensor{});
  grads_[static_cast<size_t>(root)] = seed;
  for (Id id = root; id >= 0; --id) {
    auto idx = static_cast<size_t>(id);
    if (grads_[idx].shape.empty()) continue;  // not reached from root
    if (nodes_[idx].backprop) nodes_[idx].backprop(*this);
  }
  // leaves that were never touched still deserve zero-filled grads
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (grads_[i].shape.empty()) grads_[i] = Tensor(nodes_[i].value.shape);
}

void Tape::throw_if_nonfinite() const {
  for (const auto& node : nodes_)
    if (!node.value.all_finite())
      throw NumericError(node.op, "non-finite value of shape " + node.value.shape_str());
}

}  // namespace ads
