#include "advcube/graph.hpp"
#include "advcube/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace advcube {
namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline void mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v;
  h *= kFnvPrime;
}

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct Trace {
  std::vector<const Tensor<S>*> value;
  std::vector<Tensor<S>> owned;
  std::vector<std::vector<int>> argidx;  // maxpool argmax / nearest column
  std::vector<RowMatrix<S>> cols;        // conv im2col buffers
  std::uint64_t signature = kFnvOffset;
  bool want_signature = false;
};

template <typename S>
const Tensor<S>& in(const Trace<S>& t, const Node<S>& n, int k) {
  return *t.value[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])];
}

template <typename S>
RowMatrix<S> im2col(const Tensor<S>& x, int k, int stride, int pad, int ho, int wo) {
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int kkc = k * k * c;
  RowMatrix<S> cols = RowMatrix<S>::Zero(static_cast<Eigen::Index>(ho) * wo, kkc);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      S* row = cols.data() + (static_cast<Eigen::Index>(oy) * wo + ox) * kkc;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const S* src = x.raw() + (static_cast<Eigen::Index>(iy) * w + ix) * c;
          std::copy(src, src + c, row + (ky * k + kx) * c);
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im_add(const RowMatrix<S>& dcols, Tensor<S>& dx, int k, int stride, int pad, int ho, int wo) {
  const int h = dx.dim(0), w = dx.dim(1), c = dx.dim(2);
  const int kkc = k * k * c;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const S* row = dcols.data() + (static_cast<Eigen::Index>(oy) * wo + ox) * kkc;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          S* dst = dx.raw() + (static_cast<Eigen::Index>(iy) * w + ix) * c;
          const S* src = row + (ky * k + kx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
Trace<S> run_forward(const Graph<S>& graph, const Bindings<S>& bindings, bool want_signature) {
  const auto& nodes = graph.nodes();
  Trace<S> t;
  t.want_signature = want_signature;
  t.value.resize(nodes.size(), nullptr);
  t.owned.resize(nodes.size());
  t.argidx.resize(nodes.size());
  t.cols.resize(nodes.size());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    auto& out = t.owned[i];
    switch (n.op) {
      case Op::Input: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw std::invalid_argument("unbound graph input '" + n.name + "'");
        if (it->second.shape() != n.shape) {
          throw std::invalid_argument("shape mismatch at " + graph.describe(static_cast<int>(i)) + ": bound " +
                                      shape_string(it->second.shape()) + ", declared " + shape_string(n.shape));
        }
        t.value[i] = &it->second;
        continue;
      }
      case Op::Constant:
        t.value[i] = n.constant.get();
        continue;
      case Op::Conv2d: {
        const auto& x = in(t, n, 0);
        const auto& w = in(t, n, 1);
        const auto& b = in(t, n, 2);
        const int k = w.dim(0), cout = w.dim(3);
        const int ho = n.shape[0], wo = n.shape[1];
        t.cols[i] = im2col(x, k, n.stride, n.pad, ho, wo);
        out = Tensor<S>(n.shape);
        auto om = out.matrix(static_cast<Eigen::Index>(ho) * wo, cout);
        om.noalias() = t.cols[i] * w.matrix(t.cols[i].cols(), cout);
        om.rowwise() += b.data().transpose();
        break;
      }
      case Op::Dense: {
        const auto& x = in(t, n, 0);
        const auto& w = in(t, n, 1);
        const auto& b = in(t, n, 2);
        out = Tensor<S>(n.shape);
        out.data().noalias() = w.matrix(w.dim(0), w.dim(1)).transpose() * x.data();
        out.data() += b.data();
        break;
      }
      case Op::MaxPool2: {
        const auto& x = in(t, n, 0);
        const int w = x.dim(1), c = x.dim(2);
        const int ho = n.shape[0], wo = n.shape[1];
        out = Tensor<S>(n.shape);
        auto& arg = t.argidx[i];
        arg.resize(out.size());
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            for (int ch = 0; ch < c; ++ch) {
              int best = ((2 * oy) * w + 2 * ox) * c + ch;
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const int idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                  if (x[static_cast<std::size_t>(idx)] > x[static_cast<std::size_t>(best)]) best = idx;
                }
              }
              const std::size_t o = (static_cast<std::size_t>(oy) * wo + ox) * c + ch;
              arg[o] = best;
              out[o] = x[static_cast<std::size_t>(best)];
              if (want_signature) mix(t.signature, static_cast<std::uint64_t>(best));
            }
          }
        }
        break;
      }
      case Op::Relu: {
        const auto& x = in(t, n, 0);
        out = Tensor<S>(n.shape, x.data().cwiseMax(S(0)));
        if (want_signature) {
          for (std::size_t j = 0; j < x.size(); ++j) mix(t.signature, x[j] > S(0) ? 1 : 2);
        }
        break;
      }
      case Op::Sigmoid: {
        const auto& x = in(t, n, 0);
        out = Tensor<S>(n.shape);
        for (std::size_t j = 0; j < x.size(); ++j) out[j] = stable_sigmoid(x[j]);
        break;
      }
      case Op::LogSigmoid: {
        const auto& x = in(t, n, 0);
        out = Tensor<S>(n.shape);
        for (std::size_t j = 0; j < x.size(); ++j) {
          out[j] = std::min(x[j], S(0)) - std::log1p(std::exp(-std::abs(x[j])));
        }
        break;
      }
      case Op::Softmax: {
        const auto& x = in(t, n, 0);
        const Eigen::Index last = n.shape.back();
        const Eigen::Index rows = static_cast<Eigen::Index>(x.size()) / last;
        out = Tensor<S>(n.shape);
        auto xm = x.matrix(rows, last);
        auto om = out.matrix(rows, last);
        for (Eigen::Index r = 0; r < rows; ++r) {
          const S mx = xm.row(r).maxCoeff();
          om.row(r) = (xm.row(r).array() - mx).exp();
          om.row(r) /= om.row(r).sum();
        }
        break;
      }
      case Op::Add:
        out = Tensor<S>(n.shape, in(t, n, 0).data() + in(t, n, 1).data());
        break;
      case Op::Mul:
        out = Tensor<S>(n.shape, in(t, n, 0).data().cwiseProduct(in(t, n, 1).data()));
        break;
      case Op::Affine:
        out = Tensor<S>(n.shape, (in(t, n, 0).data().array() * S(n.a) + S(n.b)).matrix());
        break;
      case Op::Log:
        out = Tensor<S>(n.shape, in(t, n, 0).data().array().log().matrix());
        break;
      case Op::SumSquares:
        out = Tensor<S>::scalar(static_cast<S>(in(t, n, 0).data().template cast<double>().squaredNorm()));
        break;
      case Op::Norm2:
        out = Tensor<S>::scalar(static_cast<S>(in(t, n, 0).data().template cast<double>().norm()));
        break;
      case Op::Sum:
        out = Tensor<S>::scalar(static_cast<S>(in(t, n, 0).data().template cast<double>().sum()));
        break;
      case Op::Mean:
        out = Tensor<S>::scalar(static_cast<S>(in(t, n, 0).data().template cast<double>().mean()));
        break;
      case Op::MinDistance: {
        const auto& p = in(t, n, 0);
        const auto& c = in(t, n, 1);
        const int rows = p.dim(0), d = p.dim(1), q = c.dim(1);
        auto pm = p.matrix(rows, d);
        auto cm = c.matrix(d, q);
        out = Tensor<S>(n.shape);
        auto& arg = t.argidx[i];
        arg.assign(static_cast<std::size_t>(rows), 0);
        for (int r = 0; r < rows; ++r) {
          double best = 0.0;
          int best_j = 0;
          for (int j = 0; j < q; ++j) {
            const double dist = (pm.row(r).transpose() - cm.col(j)).template cast<double>().squaredNorm();
            if (j == 0 || dist < best) {
              best = dist;
              best_j = j;
            }
          }
          arg[static_cast<std::size_t>(r)] = best_j;
          out[static_cast<std::size_t>(r)] = static_cast<S>(std::sqrt(best));
          if (want_signature) mix(t.signature, static_cast<std::uint64_t>(best_j));
        }
        break;
      }
      case Op::MatMul: {
        const auto& a = in(t, n, 0);
        const auto& b = in(t, n, 1);
        out = Tensor<S>(n.shape);
        out.matrix(n.shape[0], n.shape[1]).noalias() =
            a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
        break;
      }
      case Op::Gather: {
        const auto& x = in(t, n, 0);
        const auto& idx = *n.indices;
        out = Tensor<S>(n.shape);
        for (std::size_t j = 0; j < idx.size(); ++j) out[j] = x[static_cast<std::size_t>(idx[j])];
        break;
      }
      case Op::Scatter: {
        const auto& v = in(t, n, 1);
        const auto& idx = *n.indices;
        out = in(t, n, 0);
        for (std::size_t j = 0; j < idx.size(); ++j) out[static_cast<std::size_t>(idx[j])] = v[j];
        break;
      }
      case Op::Clamp:
      case Op::ClampSte: {
        const auto& x = in(t, n, 0);
        out = Tensor<S>(n.shape, x.data().cwiseMax(S(n.a)).cwiseMin(S(n.b)));
        if (want_signature) {
          for (std::size_t j = 0; j < x.size(); ++j) {
            mix(t.signature, x[j] < S(n.a) ? 1 : (x[j] > S(n.b) ? 3 : 2));
          }
        }
        break;
      }
      case Op::Reshape:
        out = in(t, n, 0).reshaped(n.shape);
        break;
    }
    t.value[i] = &t.owned[i];
  }
  return t;
}

template <typename S>
void accumulate(Tensor<S>& adj, const Shape& shape) {
  if (adj.empty()) adj = Tensor<S>(shape);
}

}  // namespace

template <typename S>
NamedTensors<S> evaluate(const Graph<S>& graph, const Bindings<S>& bindings) {
  auto t = run_forward(graph, bindings, false);
  NamedTensors<S> result;
  for (const auto& [name, idx] : graph.outputs()) result[name] = *t.value[static_cast<std::size_t>(idx)];
  return result;
}

template <typename S>
std::uint64_t activation_signature(const Graph<S>& graph, const Bindings<S>& bindings) {
  return run_forward(graph, bindings, true).signature;
}

template <typename S>
ValueAndGradient<S> value_and_gradient(const Graph<S>& graph, const Bindings<S>& bindings,
                                       const std::vector<std::string>& wrt, const std::string& seed_output) {
  const auto& nodes = graph.nodes();
  auto seed_it = graph.outputs().find(seed_output);
  if (seed_it == graph.outputs().end()) throw std::invalid_argument("no graph output named '" + seed_output + "'");
  const auto seed = static_cast<std::size_t>(seed_it->second);
  if (shape_size(nodes[seed].shape) != 1) {
    throw std::invalid_argument("seed output '" + seed_output + "' is not scalar: " +
                                shape_string(nodes[seed].shape));
  }
  std::vector<char> needs(nodes.size(), 0);
  for (const auto& name : wrt) {
    auto it = graph.leaves().find(name);
    if (it == graph.leaves().end()) throw std::invalid_argument("gradient requested for unknown input '" + name + "'");
    needs[static_cast<std::size_t>(it->second)] = 1;
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (int j : nodes[i].inputs) needs[i] |= needs[static_cast<std::size_t>(j)];
  }

  auto t = run_forward(graph, bindings, false);
  ValueAndGradient<S> result;
  for (const auto& [name, idx] : graph.outputs()) result.outputs[name] = *t.value[static_cast<std::size_t>(idx)];

  std::vector<Tensor<S>> adj(nodes.size());
  if (needs[seed]) adj[seed] = Tensor<S>::constant(nodes[seed].shape, S(1));

  for (std::size_t ii = seed + 1; ii-- > 0;) {
    const auto& n = nodes[ii];
    if (adj[ii].empty() || n.op == Op::Input || n.op == Op::Constant) continue;
    const auto& dy = adj[ii];
    auto want = [&](int k) { return needs[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])] != 0; };
    auto grad_of = [&](int k) -> Tensor<S>& {
      const auto j = static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)]);
      accumulate(adj[j], nodes[j].shape);
      return adj[j];
    };
    const Tensor<S>& y = *t.value[ii];

    switch (n.op) {
      case Op::Input:
      case Op::Constant:
        break;
      case Op::Conv2d: {
        const auto& w = in(t, n, 1);
        const int k = w.dim(0), cout = w.dim(3);
        const int ho = n.shape[0], wo = n.shape[1];
        auto dym = dy.matrix(static_cast<Eigen::Index>(ho) * wo, cout);
        const auto& cols = t.cols[ii];
        if (want(1)) grad_of(1).matrix(cols.cols(), cout).noalias() += cols.transpose() * dym;
        if (want(2)) grad_of(2).data() += dym.colwise().sum().transpose();
        if (want(0)) {
          RowMatrix<S> dcols = dym * w.matrix(cols.cols(), cout).transpose();
          col2im_add(dcols, grad_of(0), k, n.stride, n.pad, ho, wo);
        }
        break;
      }
      case Op::Dense: {
        const auto& x = in(t, n, 0);
        const auto& w = in(t, n, 1);
        if (want(1)) grad_of(1).matrix(w.dim(0), w.dim(1)).noalias() += x.data() * dy.data().transpose();
        if (want(2)) grad_of(2).data() += dy.data();
        if (want(0)) grad_of(0).data().noalias() += w.matrix(w.dim(0), w.dim(1)) * dy.data();
        break;
      }
      case Op::MaxPool2: {
        if (!want(0)) break;
        auto& dx = grad_of(0);
        const auto& arg = t.argidx[ii];
        for (std::size_t o = 0; o < arg.size(); ++o) dx[static_cast<std::size_t>(arg[o])] += dy[o];
        break;
      }
      case Op::Relu: {
        if (!want(0)) break;
        const auto& x = in(t, n, 0);
        grad_of(0).data().array() += (x.data().array() > S(0)).select(dy.data().array(), S(0));
        break;
      }
      case Op::LogSigmoid:
        if (want(0)) {
          const auto& x = in(t, n, 0);
          for (std::size_t j = 0; j < x.size(); ++j) grad_of(0)[j] += dy[j] * stable_sigmoid(-x[j]);
        }
        break;
      case Op::Sigmoid:
        if (want(0)) grad_of(0).data().array() += dy.data().array() * y.data().array() * (S(1) - y.data().array());
        break;
      case Op::Softmax: {
        if (!want(0)) break;
        const Eigen::Index last = n.shape.back();
        const Eigen::Index rows = static_cast<Eigen::Index>(y.size()) / last;
        auto ym = y.matrix(rows, last);
        auto dym = dy.matrix(rows, last);
        auto dxm = grad_of(0).matrix(rows, last);
        for (Eigen::Index r = 0; r < rows; ++r) {
          const S dot = ym.row(r).dot(dym.row(r));
          dxm.row(r).array() += ym.row(r).array() * (dym.row(r).array() - dot);
        }
        break;
      }
      case Op::Add:
        if (want(0)) grad_of(0).data() += dy.data();
        if (want(1)) grad_of(1).data() += dy.data();
        break;
      case Op::Mul:
        if (want(0)) grad_of(0).data() += dy.data().cwiseProduct(in(t, n, 1).data());
        if (want(1)) grad_of(1).data() += dy.data().cwiseProduct(in(t, n, 0).data());
        break;
      case Op::Affine:
        if (want(0)) grad_of(0).data() += dy.data() * S(n.a);
        break;
      case Op::Log:
        if (want(0)) grad_of(0).data().array() += dy.data().array() / in(t, n, 0).data().array();
        break;
      case Op::SumSquares:
        if (want(0)) grad_of(0).data() += in(t, n, 0).data() * (S(2) * dy[0]);
        break;
      case Op::Norm2: {
        if (!want(0)) break;
        const S norm = y[0];
        if (norm > S(0)) grad_of(0).data() += in(t, n, 0).data() * (dy[0] / norm);
        else grad_of(0);
        break;
      }
      case Op::Sum:
        if (want(0)) grad_of(0).data().array() += dy[0];
        break;
      case Op::Mean:
        if (want(0)) grad_of(0).data().array() += dy[0] / static_cast<S>(in(t, n, 0).size());
        break;
      case Op::MinDistance: {
        const auto& p = in(t, n, 0);
        const auto& c = in(t, n, 1);
        const int rows = p.dim(0), d = p.dim(1), q = c.dim(1);
        auto pm = p.matrix(rows, d);
        auto cm = c.matrix(d, q);
        const auto& arg = t.argidx[ii];
        Tensor<S>* dp = want(0) ? &grad_of(0) : nullptr;
        Tensor<S>* dc = want(1) ? &grad_of(1) : nullptr;
        for (int r = 0; r < rows; ++r) {
          const S dist = y[static_cast<std::size_t>(r)];
          if (!(dist > S(0))) continue;
          const int j = arg[static_cast<std::size_t>(r)];
          const Vec<S> g = (pm.row(r).transpose() - cm.col(j)) * (dy[static_cast<std::size_t>(r)] / dist);
          if (dp) dp->matrix(rows, d).row(r) += g.transpose();
          if (dc) dc->matrix(d, q).col(j) -= g;
        }
        break;
      }
      case Op::MatMul: {
        const auto& a = in(t, n, 0);
        const auto& b = in(t, n, 1);
        auto dym = dy.matrix(n.shape[0], n.shape[1]);
        if (want(0)) {
          grad_of(0).matrix(a.dim(0), a.dim(1)).noalias() += dym * b.matrix(b.dim(0), b.dim(1)).transpose();
        }
        if (want(1)) {
          grad_of(1).matrix(b.dim(0), b.dim(1)).noalias() += a.matrix(a.dim(0), a.dim(1)).transpose() * dym;
        }
        break;
      }
      case Op::Gather: {
        if (!want(0)) break;
        auto& dx = grad_of(0);
        const auto& idx = *n.indices;
        for (std::size_t j = 0; j < idx.size(); ++j) dx[static_cast<std::size_t>(idx[j])] += dy[j];
        break;
      }
      case Op::Scatter: {
        const auto& idx = *n.indices;
        if (want(0)) {
          auto& db = grad_of(0);
          Tensor<S> masked = dy;
          for (int j : idx) masked[static_cast<std::size_t>(j)] = S(0);
          db.data() += masked.data();
        }
        if (want(1)) {
          auto& dv = grad_of(1);
          for (std::size_t j = 0; j < idx.size(); ++j) dv[j] += dy[static_cast<std::size_t>(idx[j])];
        }
        break;
      }
      case Op::Clamp: {
        if (!want(0)) break;
        const auto& x = in(t, n, 0);
        grad_of(0).data().array() +=
            (x.data().array() >= S(n.a) && x.data().array() <= S(n.b)).select(dy.data().array(), S(0));
        break;
      }
      case Op::ClampSte:
      case Op::Reshape:
        if (want(0)) grad_of(0).data() += dy.data();
        break;
    }
  }

  for (const auto& name : wrt) {
    const auto idx = static_cast<std::size_t>(graph.leaves().at(name));
    result.gradients[name] = adj[idx].empty() ? Tensor<S>(nodes[idx].shape) : std::move(adj[idx]);
  }
  return result;
}

template <typename S>
FdReport finite_difference_check(const Graph<S>& graph, const Bindings<S>& bindings,
                                 const std::vector<std::string>& wrt, const std::string& seed_output,
                                 const FdOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  const auto analytic = gradient(graph, bindings, wrt, seed_output);
  auto probe = bindings;
  const auto base_signature = activation_signature(graph, probe);
  auto value_at = [&]() { return static_cast<double>(evaluate(graph, probe).at(seed_output)[0]); };

  FdReport report;
  Rng rng(options.seed);
  for (const auto& name : wrt) {
    auto it = probe.find(name);
    if (it == probe.end()) throw std::invalid_argument("unbound graph input '" + name + "'");
    auto& leaf = it->second;
    std::vector<std::size_t> coords(leaf.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.samples_per_leaf > 0 && options.samples_per_leaf < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(options.samples_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    for (auto c : coords) {
      const S original = leaf[c];
      FdEntry e;
      e.leaf = name;
      e.index = c;
      e.analytic = static_cast<double>(analytic.at(name)[c]);

      leaf[c] = static_cast<S>(original + 10.0 * options.step);
      const bool kink_hi = activation_signature(graph, probe) != base_signature;
      leaf[c] = static_cast<S>(original - 10.0 * options.step);
      const bool kink_lo = activation_signature(graph, probe) != base_signature;
      if (kink_hi || kink_lo) {
        e.skipped = true;
        leaf[c] = original;
        ++report.skipped;
        report.entries.push_back(e);
        continue;
      }
      leaf[c] = static_cast<S>(original + options.step);
      const double f_plus = value_at();
      leaf[c] = static_cast<S>(original - options.step);
      const double f_minus = value_at();
      leaf[c] = original;
      e.numeric = (f_plus - f_minus) / (2.0 * options.step);
      e.rel_error = relative_error(e.analytic, e.numeric, options.abs_floor);
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      ++report.checked;
      report.entries.push_back(e);
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

#define ADVCUBE_INSTANTIATE(S)                                                                                   \
  template NamedTensors<S> evaluate(const Graph<S>&, const Bindings<S>&);                                       \
  template std::uint64_t activation_signature(const Graph<S>&, const Bindings<S>&);                             \
  template ValueAndGradient<S> value_and_gradient(const Graph<S>&, const Bindings<S>&,                          \
                                                  const std::vector<std::string>&, const std::string&);         \
  template FdReport finite_difference_check(const Graph<S>&, const Bindings<S>&, const std::vector<std::string>&, \
                                            const std::string&, const FdOptions&);

ADVCUBE_INSTANTIATE(float)
ADVCUBE_INSTANTIATE(double)
#undef ADVCUBE_INSTANTIATE

}  // namespace advcube
