#include "compkg/eei_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <omp.h>

namespace compkg::eei {

void Hyperparams::validate() const {
  if (dim == 0) throw UsageError("embedding dimension must be positive");
  if (!(tau > 0.0)) throw UsageError("temperature must be positive");
  if (lambda_cl < 0.0 || lambda_l2 < 0.0) throw UsageError("loss weights must be non-negative");
  if (learning_rate < 0.0) throw UsageError("learning rate must be non-negative");
  if (epochs < 0) throw UsageError("epochs must be non-negative");
}

ParamLayout ParamLayout::make(std::size_t nodes, std::size_t d, std::size_t f) {
  ParamLayout l;
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    Block b{off, n};
    off += n;
    return b;
  };
  l.embeddings = take(nodes * d);
  l.view1_w1 = take(d * d);
  l.view1_w2 = take(2 * d);
  l.view2_w1 = take(d * d);
  l.view2_w2 = take(2 * d);
  l.fuse_first = take(d);
  l.fuse_second = take(d);
  l.mix = take(2);
  l.tower_in_w = take(d * f);
  l.tower_in_b = take(d);
  l.tower_out_w = take(d * d);
  l.tower_out_b = take(d);
  l.total = off;
  return l;
}

std::vector<std::pair<std::string, Block>> ParamLayout::named_blocks() const {
  return {{"embeddings", embeddings}, {"view1_w1", view1_w1},       {"view1_w2", view1_w2},
          {"view2_w1", view2_w1},     {"view2_w2", view2_w2},       {"fuse_first", fuse_first},
          {"fuse_second", fuse_second}, {"mix", mix},               {"tower_in_w", tower_in_w},
          {"tower_in_b", tower_in_b}, {"tower_out_w", tower_out_w}, {"tower_out_b", tower_out_b}};
}

EeiModel::EeiModel(Hyperparams hp, std::size_t nodes, std::size_t feature_dim)
    : hp_(hp),
      nodes_(nodes),
      feature_dim_(feature_dim),
      layout_(ParamLayout::make(nodes, hp.dim, feature_dim)),
      params_(layout_.total, 0.0) {
  hp_.validate();
}

EeiModel EeiModel::initialize(const TriGraph& graph, const Hyperparams& hp) {
  EeiModel m(hp, graph.num_nodes(), graph.feature_dim());
  std::mt19937_64 rng(sub_seed(hp.seed, "eei-init"));
  auto fill = [&](const Block& b, double bound) {
    for (auto& v : m.block(b)) v = (2.0 * uniform01(rng) - 1.0) * bound;
  };
  const double d = double(hp.dim);
  const double f = double(std::max<std::size_t>(1, graph.feature_dim()));
  fill(m.layout_.embeddings, 1.0 / std::sqrt(d));
  fill(m.layout_.view1_w1, std::sqrt(3.0 / d));
  fill(m.layout_.view1_w2, 1.0 / std::sqrt(2.0 * d));
  fill(m.layout_.view2_w1, std::sqrt(3.0 / d));
  fill(m.layout_.view2_w2, 1.0 / std::sqrt(2.0 * d));
  fill(m.layout_.tower_in_w, std::sqrt(3.0 / f));
  fill(m.layout_.tower_out_w, std::sqrt(3.0 / d));
  return m;
}

// ---------------------------------------------------------------------------
// Scalar helpers

namespace {

inline double act(double x, Activation a) {
  return a == Activation::Elu ? (x > 0.0 ? x : std::expm1(x)) : x;
}
inline double dact(double x, Activation a) {
  return a == Activation::Elu ? (x > 0.0 ? 1.0 : std::exp(x)) : 1.0;
}
inline double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double dleaky(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

inline double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

/// G[n] = W1 h[n] for every row.
std::vector<double> project(std::span<const double> h, std::size_t rows, std::size_t d,
                            std::span<const double> w1, bool parallel) {
  std::vector<double> g(rows * d, 0.0);
  const auto n = std::ptrdiff_t(rows);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* hi = h.data() + std::size_t(i) * d;
    double* gi = g.data() + std::size_t(i) * d;
    for (std::size_t r = 0; r < d; ++r) gi[r] = dot(w1.data() + r * d, hi, d);
  }
  return g;
}

struct AggTape {
  std::vector<double> logit;  // pre-LeakyReLU attention scores
  std::vector<double> alpha;
  std::vector<double> pre;    // per-neighbour α W1 h_j, or the weighted sum
  std::vector<double> out;
  bool empty = true;
};

void agg_forward(const double* G, std::size_t d, std::size_t center,
                 std::span<const std::size_t> nbrs, std::span<const double> w2,
                 const Hyperparams& hp, AggTape& t) {
  t.out.assign(d, 0.0);
  t.empty = nbrs.empty();
  if (t.empty) return;
  const std::size_t n = nbrs.size();
  const double base = dot(w2.data(), G + center * d, d);
  t.logit.resize(n);
  t.alpha.resize(n);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    t.logit[j] = base + dot(w2.data() + d, G + nbrs[j] * d, d);
    mx = std::max(mx, leaky(t.logit[j], hp.leaky_slope));
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    t.alpha[j] = std::exp(leaky(t.logit[j], hp.leaky_slope) - mx);
    z += t.alpha[j];
  }
  for (auto& a : t.alpha) a /= z;
  if (hp.sigma_inside) {
    t.pre.resize(n * d);
    for (std::size_t j = 0; j < n; ++j) {
      const double* gj = G + nbrs[j] * d;
      for (std::size_t r = 0; r < d; ++r) {
        const double u = t.alpha[j] * gj[r];
        t.pre[j * d + r] = u;
        t.out[r] += act(u, hp.activation);
      }
    }
  } else {
    t.pre.assign(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* gj = G + nbrs[j] * d;
      for (std::size_t r = 0; r < d; ++r) t.pre[r] += t.alpha[j] * gj[r];
    }
    for (std::size_t r = 0; r < d; ++r) t.out[r] = act(t.pre[r], hp.activation);
  }
}

void agg_backward(const double* G, double* dG, std::size_t d, std::size_t center,
                  std::span<const std::size_t> nbrs, std::span<const double> w2, double* dw2,
                  const Hyperparams& hp, const AggTape& t, const double* dout,
                  GradientMutation mutation) {
  if (t.empty) return;
  const std::size_t n = nbrs.size();
  std::vector<double> dalpha(n, 0.0);
  if (hp.sigma_inside) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* gj = G + nbrs[j] * d;
      double* dgj = dG + nbrs[j] * d;
      for (std::size_t r = 0; r < d; ++r) {
        const double du = dout[r] * dact(t.pre[j * d + r], hp.activation);
        dalpha[j] += du * gj[r];
        dgj[r] += t.alpha[j] * du;
      }
    }
  } else {
    std::vector<double> ds(d);
    for (std::size_t r = 0; r < d; ++r) ds[r] = dout[r] * dact(t.pre[r], hp.activation);
    for (std::size_t j = 0; j < n; ++j) {
      const double* gj = G + nbrs[j] * d;
      double* dgj = dG + nbrs[j] * d;
      dalpha[j] = dot(ds.data(), gj, d);
      for (std::size_t r = 0; r < d; ++r) dgj[r] += t.alpha[j] * ds[r];
    }
  }
  double centered = 0.0;
  if (mutation != GradientMutation::DropAttentionCentering)
    for (std::size_t j = 0; j < n; ++j) centered += t.alpha[j] * dalpha[j];
  const double* gc = G + center * d;
  double* dgc = dG + center * d;
  for (std::size_t j = 0; j < n; ++j) {
    const double de = t.alpha[j] * (dalpha[j] - centered) * dleaky(t.logit[j], hp.leaky_slope);
    const double* gj = G + nbrs[j] * d;
    double* dgj = dG + nbrs[j] * d;
    for (std::size_t r = 0; r < d; ++r) {
      dw2[r] += de * gc[r];
      dw2[d + r] += de * gj[r];
      dgc[r] += de * w2[r];
      dgj[r] += de * w2[d + r];
    }
  }
}

struct FuseTape {
  bool a = false, b = false;
  double beta = 0.5;
};

void fuse_forward(const std::vector<double>& va, const std::vector<double>& vb,
                  std::span<const double> q, bool a, bool b, std::vector<double>& out,
                  FuseTape& t) {
  const std::size_t d = va.size();
  t.a = a;
  t.b = b;
  out.assign(d, 0.0);
  if (a && b) {
    const double diff = dot(q.data(), va.data(), d) - dot(q.data(), vb.data(), d);
    t.beta = sigmoid(diff);
    for (std::size_t r = 0; r < d; ++r) out[r] = t.beta * va[r] + (1.0 - t.beta) * vb[r];
  } else if (a) {
    t.beta = 1.0;
    out = va;
  } else if (b) {
    t.beta = 0.0;
    out = vb;
  }
}

void fuse_backward(const std::vector<double>& va, const std::vector<double>& vb,
                   std::span<const double> q, const FuseTape& t, const double* dout, double* dva,
                   double* dvb, double* dq) {
  const std::size_t d = va.size();
  if (t.a && t.b) {
    double dbeta = 0.0;
    for (std::size_t r = 0; r < d; ++r) dbeta += dout[r] * (va[r] - vb[r]);
    const double ds = dbeta * t.beta * (1.0 - t.beta);
    for (std::size_t r = 0; r < d; ++r) {
      dq[r] += ds * (va[r] - vb[r]);
      dva[r] += t.beta * dout[r] + ds * q[r];
      dvb[r] += (1.0 - t.beta) * dout[r] - ds * q[r];
    }
  } else if (t.a) {
    for (std::size_t r = 0; r < d; ++r) dva[r] += dout[r];
  } else if (t.b) {
    for (std::size_t r = 0; r < d; ++r) dvb[r] += dout[r];
  }
}

struct EntityTape {
  AggTape item, user, mp1, mp2;
  FuseTape fuse_f, fuse_s;
  std::vector<double> zf, zs, repr;
  double wf = 0.5, ws = 0.5;
};

void forward_entity(const EeiModel& m, const TriGraph& g, const double* G1, const double* G2,
                    std::size_t k, EntityTape& t) {
  const auto& L = m.layout();
  const auto& hp = m.hyper();
  const std::size_t d = m.dim();
  const std::size_t c = g.entity_node(k);
  agg_forward(G1, d, c, g.item_side(k), m.block(L.view1_w2), hp, t.item);
  agg_forward(G1, d, c, g.user_side(k), m.block(L.view1_w2), hp, t.user);
  fuse_forward(t.item.out, t.user.out, m.block(L.fuse_first), !t.item.empty, !t.user.empty, t.zf,
               t.fuse_f);
  agg_forward(G2, d, c, g.mp1(k), m.block(L.view2_w2), hp, t.mp1);
  agg_forward(G2, d, c, g.mp2(k), m.block(L.view2_w2), hp, t.mp2);
  fuse_forward(t.mp1.out, t.mp2.out, m.block(L.fuse_second), !t.mp1.empty, !t.mp2.empty, t.zs,
               t.fuse_s);
  std::tie(t.wf, t.ws) = mix_weights(m.block(L.mix));
  t.repr.resize(d);
  for (std::size_t r = 0; r < d; ++r) t.repr[r] = t.wf * t.zf[r] + t.ws * t.zs[r];
}

struct Grads {
  std::vector<double>& g;
  const ParamLayout& L;
  double* at(const Block& b) { return g.data() + b.offset; }
};

void backward_entity(const EeiModel& m, const TriGraph& g, const double* G1, const double* G2,
                     double* dG1, double* dG2, std::size_t k, const EntityTape& t,
                     const double* drepr, const double* dzf_extra, const double* dzs_extra,
                     Grads& gr, GradientMutation mutation) {
  const auto& L = m.layout();
  const auto& hp = m.hyper();
  const std::size_t d = m.dim();
  const std::size_t c = g.entity_node(k);
  std::vector<double> dzf(d, 0.0), dzs(d, 0.0);
  double dwf = 0.0, dws = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    if (drepr) {
      dzf[r] += t.wf * drepr[r];
      dzs[r] += t.ws * drepr[r];
      dwf += drepr[r] * t.zf[r];
      dws += drepr[r] * t.zs[r];
    }
    if (dzf_extra) dzf[r] += dzf_extra[r];
    if (dzs_extra) dzs[r] += dzs_extra[r];
  }
  double* dmix = gr.at(L.mix);
  const double mean = t.wf * dwf + t.ws * dws;
  dmix[0] += t.wf * (dwf - mean);
  dmix[1] += t.ws * (dws - mean);

  std::vector<double> d_item(d, 0.0), d_user(d, 0.0), d_mp1(d, 0.0), d_mp2(d, 0.0);
  fuse_backward(t.item.out, t.user.out, m.block(L.fuse_first), t.fuse_f, dzf.data(), d_item.data(),
                d_user.data(), gr.at(L.fuse_first));
  fuse_backward(t.mp1.out, t.mp2.out, m.block(L.fuse_second), t.fuse_s, dzs.data(), d_mp1.data(),
                d_mp2.data(), gr.at(L.fuse_second));
  agg_backward(G1, dG1, d, c, g.item_side(k), m.block(L.view1_w2), gr.at(L.view1_w2), hp, t.item,
               d_item.data(), mutation);
  agg_backward(G1, dG1, d, c, g.user_side(k), m.block(L.view1_w2), gr.at(L.view1_w2), hp, t.user,
               d_user.data(), mutation);
  agg_backward(G2, dG2, d, c, g.mp1(k), m.block(L.view2_w2), gr.at(L.view2_w2), hp, t.mp1,
               d_mp1.data(), mutation);
  agg_backward(G2, dG2, d, c, g.mp2(k), m.block(L.view2_w2), gr.at(L.view2_w2), hp, t.mp2,
               d_mp2.data(), mutation);
}

/// Pulls dG = d(W1 h) back into W1 and the embeddings.
void project_backward(std::span<const double> h, std::size_t rows, std::size_t d,
                      std::span<const double> w1, const std::vector<double>& dG, double* dw1,
                      double* dh) {
  for (std::size_t n = 0; n < rows; ++n) {
    const double* dg = dG.data() + n * d;
    const double* hn = h.data() + n * d;
    bool any = false;
    for (std::size_t r = 0; r < d; ++r) any |= dg[r] != 0.0;
    if (!any) continue;
    for (std::size_t r = 0; r < d; ++r) {
      if (dg[r] == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        dw1[r * d + c] += dg[r] * hn[c];
        dh[n * d + c] += w1[r * d + c] * dg[r];
      }
    }
  }
}

struct TowerTape {
  std::vector<double> pre, hidden, out;
};

void tower_forward(const EeiModel& m, std::span<const double> x, TowerTape& t) {
  const auto& L = m.layout();
  const std::size_t d = m.dim(), f = m.feature_dim();
  if (x.size() != f) throw DataError("item feature length does not match the model");
  auto wi = m.block(L.tower_in_w);
  auto bi = m.block(L.tower_in_b);
  auto wo = m.block(L.tower_out_w);
  auto bo = m.block(L.tower_out_b);
  t.pre.resize(d);
  t.hidden.resize(d);
  t.out.resize(d);
  for (std::size_t r = 0; r < d; ++r) {
    t.pre[r] = bi[r] + dot(wi.data() + r * f, x.data(), f);
    t.hidden[r] = act(t.pre[r], m.hyper().activation);
  }
  for (std::size_t r = 0; r < d; ++r) t.out[r] = bo[r] + dot(wo.data() + r * d, t.hidden.data(), d);
}

void tower_backward(const EeiModel& m, std::span<const double> x, const TowerTape& t,
                    const double* dy, Grads& gr) {
  const auto& L = m.layout();
  const std::size_t d = m.dim(), f = m.feature_dim();
  auto wo = m.block(L.tower_out_w);
  double* dwo = gr.at(L.tower_out_w);
  double* dbo = gr.at(L.tower_out_b);
  double* dwi = gr.at(L.tower_in_w);
  double* dbi = gr.at(L.tower_in_b);
  std::vector<double> dh(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    dbo[r] += dy[r];
    for (std::size_t c = 0; c < d; ++c) {
      dwo[r * d + c] += dy[r] * t.hidden[c];
      dh[c] += wo[r * d + c] * dy[r];
    }
  }
  for (std::size_t r = 0; r < d; ++r) {
    const double da = dh[r] * dact(t.pre[r], m.hyper().activation);
    dbi[r] += da;
    for (std::size_t c = 0; c < f; ++c) dwi[r * f + c] += da * x[c];
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public building blocks

AggregateResult gat_aggregate(std::span<const double> h, std::size_t dim, std::size_t center,
                              std::span<const std::size_t> neighbors, GatParams params,
                              const Hyperparams& hp) {
  if (params.w1.size() != dim * dim || params.w2.size() != 2 * dim)
    throw UsageError("gat_aggregate: parameter shapes do not match dimension");
  const std::size_t rows = h.size() / dim;
  const auto G = project(h, rows, dim, params.w1, false);
  AggTape t;
  agg_forward(G.data(), dim, center, neighbors, params.w2, hp, t);
  return AggregateResult{t.out, t.alpha, t.empty};
}

FuseResult fuse_views(std::span<const double> v_a, std::span<const double> v_b,
                      std::span<const double> query, bool a_present, bool b_present) {
  std::vector<double> a(v_a.begin(), v_a.end()), b(v_b.begin(), v_b.end());
  FuseResult r;
  FuseTape t;
  fuse_forward(a, b, query, a_present, b_present, r.out, t);
  r.beta = t.beta;
  return r;
}

std::pair<double, double> mix_weights(std::span<const double> logits) {
  const double m = std::max(logits[0], logits[1]);
  const double a = std::exp(logits[0] - m), b = std::exp(logits[1] - m);
  return {a / (a + b), b / (a + b)};
}

std::vector<double> entity_representation(std::span<const double> z_first,
                                          std::span<const double> z_second,
                                          std::pair<double, double> w) {
  if (std::abs(w.first + w.second - 1.0) > 1e-12 || w.first < 0.0 || w.second < 0.0)
    throw UsageError("view mix weights must be non-negative and sum to 1");
  std::vector<double> out(z_first.size());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = w.first * z_first[r] + w.second * z_second[r];
  return out;
}

double infonce_loss(std::span<const double> zf, std::span<const double> zs, std::size_t rows,
                    std::size_t d, double tau, std::vector<double>* grad_f,
                    std::vector<double>* grad_s) {
  if (rows == 0) throw UsageError("infonce_loss: no rows");
  if (!(tau > 0.0)) throw UsageError("infonce_loss: temperature must be positive");
  std::vector<double> fn(rows * d), sn(rows * d), nf(rows), ns(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    nf[i] = std::sqrt(dot(zf.data() + i * d, zf.data() + i * d, d));
    ns[i] = std::sqrt(dot(zs.data() + i * d, zs.data() + i * d, d));
    if (nf[i] == 0.0 || ns[i] == 0.0)
      throw DataError("infonce_loss: zero-norm embedding at row " + std::to_string(i));
    for (std::size_t r = 0; r < d; ++r) {
      fn[i * d + r] = zf[i * d + r] / nf[i];
      sn[i * d + r] = zs[i * d + r] / ns[i];
    }
  }
  std::vector<double> P(rows * rows);
  double loss = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < rows; ++j) {
      P[i * rows + j] = dot(fn.data() + i * d, sn.data() + j * d, d) / tau;
      mx = std::max(mx, P[i * rows + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < rows; ++j) z += std::exp(P[i * rows + j] - mx);
    loss += mx + std::log(z) - P[i * rows + i];
    for (std::size_t j = 0; j < rows; ++j) P[i * rows + j] = std::exp(P[i * rows + j] - mx) / z;
  }
  if (grad_f || grad_s) {
    std::vector<double> dfn(rows * d, 0.0), dsn(rows * d, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < rows; ++j) {
        const double dS = (P[i * rows + j] - (i == j ? 1.0 : 0.0)) / tau;
        for (std::size_t r = 0; r < d; ++r) {
          dfn[i * d + r] += dS * sn[j * d + r];
          dsn[j * d + r] += dS * fn[i * d + r];
        }
      }
    auto unnormalize = [&](const std::vector<double>& dn, const std::vector<double>& unit,
                           const std::vector<double>& norm, std::vector<double>* out) {
      if (!out) return;
      out->assign(rows * d, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double proj = dot(dn.data() + i * d, unit.data() + i * d, d);
        for (std::size_t r = 0; r < d; ++r)
          (*out)[i * d + r] = (dn[i * d + r] - unit[i * d + r] * proj) / norm[i];
      }
    };
    unnormalize(dfn, fn, nf, grad_f);
    unnormalize(dsn, sn, ns, grad_s);
  }
  return loss;
}

const std::vector<std::size_t>& expand_metapath(const TriGraph& graph, std::size_t entity,
                                                MetaPath which) {
  return which == MetaPath::MP1 ? graph.mp1(entity) : graph.mp2(entity);
}

namespace {

EntityTape single_entity(const EeiModel& m, const TriGraph& g, std::size_t k) {
  const auto& L = m.layout();
  auto h = m.block(L.embeddings);
  const auto G1 = project(h, g.num_nodes(), m.dim(), m.block(L.view1_w1), false);
  const auto G2 = project(h, g.num_nodes(), m.dim(), m.block(L.view2_w1), false);
  EntityTape t;
  forward_entity(m, g, G1.data(), G2.data(), k, t);
  return t;
}

void check_graph(const EeiModel& m, const TriGraph& g) {
  if (m.nodes() != g.num_nodes() || m.feature_dim() != g.feature_dim())
    throw DataError("model shape does not match the graph");
}

}  // namespace

ViewResult substitutable_view(const EeiModel& model, const TriGraph& graph, std::size_t entity) {
  check_graph(model, graph);
  auto t = single_entity(model, graph, entity);
  return {t.zf, t.item.empty && t.user.empty};
}

ViewResult complementary_view(const EeiModel& model, const TriGraph& graph, std::size_t entity) {
  check_graph(model, graph);
  auto t = single_entity(model, graph, entity);
  return {t.zs, t.mp1.empty && t.mp2.empty};
}

std::vector<double> item_tower(const EeiModel& model, std::span<const double> features) {
  TowerTape t;
  tower_forward(model, features, t);
  return t.out;
}

namespace {

EntityTable entity_table_impl(const EeiModel& m, const TriGraph& g, bool parallel) {
  check_graph(m, g);
  const auto& L = m.layout();
  const std::size_t d = m.dim(), E = g.num_entities();
  auto h = m.block(L.embeddings);
  const auto G1 = project(h, g.num_nodes(), d, m.block(L.view1_w1), parallel);
  const auto G2 = project(h, g.num_nodes(), d, m.block(L.view2_w1), parallel);
  EntityTable tab;
  tab.dim = d;
  tab.entities = E;
  tab.z_first.assign(E * d, 0.0);
  tab.z_second.assign(E * d, 0.0);
  tab.repr.assign(E * d, 0.0);
  tab.first_empty.assign(E, 0);
  tab.second_empty.assign(E, 0);
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (std::ptrdiff_t kk = 0; kk < std::ptrdiff_t(E); ++kk) {
    const auto k = std::size_t(kk);
    EntityTape t;
    forward_entity(m, g, G1.data(), G2.data(), k, t);
    std::copy(t.zf.begin(), t.zf.end(), tab.z_first.begin() + std::ptrdiff_t(k * d));
    std::copy(t.zs.begin(), t.zs.end(), tab.z_second.begin() + std::ptrdiff_t(k * d));
    std::copy(t.repr.begin(), t.repr.end(), tab.repr.begin() + std::ptrdiff_t(k * d));
    tab.first_empty[k] = t.item.empty && t.user.empty;
    tab.second_empty[k] = t.mp1.empty && t.mp2.empty;
  }
  return tab;
}

}  // namespace

EntityTable compute_entity_table(const EeiModel& model, const TriGraph& graph) {
  return entity_table_impl(model, graph, true);
}

EntityTable compute_entity_table_serial(const EeiModel& model, const TriGraph& graph) {
  return entity_table_impl(model, graph, false);
}

double score(const EeiModel& model, const TriGraph& graph, std::size_t entity, std::size_t item) {
  if (entity >= graph.num_entities()) throw DataError("score: unknown entity index");
  if (item >= graph.num_items()) throw DataError("score: unknown item index");
  check_graph(model, graph);
  const auto t = single_entity(model, graph, entity);
  const auto y = item_tower(model, graph.item_features(item));
  return dot(t.repr.data(), y.data(), model.dim());
}

// ---------------------------------------------------------------------------
// Samples

std::vector<EeiSample> build_samples(const TriGraph& graph, const ingest::InteractionLog& log,
                                     const ingest::BillHistory& bills, int window_days,
                                     std::uint64_t seed, double negative_ratio,
                                     std::int64_t until) {
  std::vector<EeiSample> out;
  std::set<std::pair<std::size_t, std::size_t>> edges(graph.complementary_edges().begin(),
                                                      graph.complementary_edges().end());
  std::size_t positives = 0, negatives = 0;
  for (const auto& r : log.rows) {
    if (r.timestamp > until) continue;
    auto item = graph.find_item(r.item);
    if (!item) continue;
    const std::size_t e2 = graph.entity_of_item(*item);
    std::set<std::size_t> sources;
    for (const auto& e : bills.sequence(r.user, window_days, r.timestamp))
      if (auto k = graph.find_entity(e); k && edges.count({*k, e2})) sources.insert(*k);
    for (auto e1 : sources) {
      out.push_back({e1, *item, r.clicked ? 1.0 : 0.0});
      (r.clicked ? positives : negatives)++;
    }
  }
  const auto wanted = std::size_t(std::ceil(negative_ratio * double(positives)));
  if (negatives < wanted && graph.num_items() > 0 && graph.num_entities() > 1) {
    std::mt19937_64 rng(sub_seed(seed, "eei-negatives"));
    const std::size_t need = wanted - negatives;
    std::size_t attempts = 0, added = 0;
    while (added < need && attempts < 50 * need + 100) {
      ++attempts;
      const std::size_t e1 = uniform_below(rng, graph.num_entities());
      const std::size_t item = uniform_below(rng, graph.num_items());
      const std::size_t e2 = graph.entity_of_item(item);
      if (e1 == e2 || edges.count({e1, e2})) continue;
      out.push_back({e1, item, 0.0});
      ++added;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

LossBreakdown total_loss(const EeiModel& m, const TriGraph& g, std::span<const EeiSample> batch,
                         std::vector<double>* grad, GradientMutation mutation) {
  if (batch.empty()) throw DataError("total_loss: empty batch");
  check_graph(m, g);
  const auto& L = m.layout();
  const auto& hp = m.hyper();
  const std::size_t d = m.dim(), E = g.num_entities(), N = g.num_nodes();
  auto h = m.block(L.embeddings);
  const auto G1 = project(h, N, d, m.block(L.view1_w1), false);
  const auto G2 = project(h, N, d, m.block(L.view2_w1), false);

  std::vector<EntityTape> tapes(E);
  for (std::size_t k = 0; k < E; ++k) forward_entity(m, g, G1.data(), G2.data(), k, tapes[k]);

  LossBreakdown out;
  std::map<std::size_t, TowerTape> towers;
  for (const auto& s : batch) {
    if (s.bill_entity >= E || s.item >= g.num_items()) throw DataError("sample index out of range");
    auto [it, fresh] = towers.try_emplace(s.item);
    if (fresh) tower_forward(m, g.item_features(s.item), it->second);
  }

  std::vector<double> drepr, dy_all, dzf, dzs;
  if (grad) {
    drepr.assign(E * d, 0.0);
    dzf.assign(E * d, 0.0);
    dzs.assign(E * d, 0.0);
  }
  std::map<std::size_t, std::vector<double>> dy;
  const double inv_b = 1.0 / double(batch.size());
  for (const auto& s : batch) {
    const auto& y = towers.at(s.item).out;
    const auto& r = tapes[s.bill_entity].repr;
    const double sc = dot(r.data(), y.data(), d);
    out.main += (softplus(sc) - s.label * sc) * inv_b;
    if (grad) {
      const double ds = (sigmoid(sc) - s.label) * inv_b;
      auto& dyi = dy.try_emplace(s.item, std::vector<double>(d, 0.0)).first->second;
      for (std::size_t c = 0; c < d; ++c) {
        drepr[s.bill_entity * d + c] += ds * y[c];
        dyi[c] += ds * r[c];
      }
    }
  }

  if (hp.lambda_cl > 0.0) {
    std::vector<std::size_t> members;
    for (std::size_t k = 0; k < E; ++k) {
      const auto& t = tapes[k];
      if (!(t.item.empty && t.user.empty) && !(t.mp1.empty && t.mp2.empty)) members.push_back(k);
    }
    if (!members.empty()) {
      std::vector<double> zf(members.size() * d), zs(members.size() * d);
      for (std::size_t i = 0; i < members.size(); ++i) {
        std::copy_n(tapes[members[i]].zf.begin(), d, zf.begin() + std::ptrdiff_t(i * d));
        std::copy_n(tapes[members[i]].zs.begin(), d, zs.begin() + std::ptrdiff_t(i * d));
      }
      std::vector<double> gf, gs;
      out.contrastive = infonce_loss(zf, zs, members.size(), d, hp.tau, grad ? &gf : nullptr,
                                     grad ? &gs : nullptr);
      out.contrastive_entities = members.size();
      if (grad)
        for (std::size_t i = 0; i < members.size(); ++i)
          for (std::size_t c = 0; c < d; ++c) {
            dzf[members[i] * d + c] += hp.lambda_cl * gf[i * d + c];
            dzs[members[i] * d + c] += hp.lambda_cl * gs[i * d + c];
          }
    }
  }

  for (double p : m.params()) out.l2 += p * p;
  out.total = out.main + hp.lambda_cl * out.contrastive + hp.lambda_l2 * out.l2;

  if (grad) {
    grad->assign(L.total, 0.0);
    Grads gr{*grad, L};
    std::vector<double> dG1(N * d, 0.0), dG2(N * d, 0.0);
    for (std::size_t k = 0; k < E; ++k)
      backward_entity(m, g, G1.data(), G2.data(), dG1.data(), dG2.data(), k, tapes[k],
                      drepr.data() + k * d, dzf.data() + k * d, dzs.data() + k * d, gr, mutation);
    project_backward(h, N, d, m.block(L.view1_w1), dG1, gr.at(L.view1_w1), gr.at(L.embeddings));
    project_backward(h, N, d, m.block(L.view2_w1), dG2, gr.at(L.view2_w1), gr.at(L.embeddings));
    for (const auto& [item, dyi] : dy)
      tower_backward(m, g.item_features(item), towers.at(item), dyi.data(), gr);
    auto p = m.params();
    for (std::size_t i = 0; i < L.total; ++i) (*grad)[i] += 2.0 * hp.lambda_l2 * p[i];
    if (mutation == GradientMutation::ScaleByOnePointOne)
      for (auto& v : *grad) v *= 1.1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(EeiModel& model, const TriGraph& graph, std::span<const EeiSample> samples) {
  const auto& hp = model.hyper();
  hp.validate();
  if (samples.empty()) throw DataError("train: no samples");
  TrainResult res;
  res.loss_trace.push_back(total_loss(model, graph, samples).total);
  if (!std::isfinite(res.loss_trace.back()))
    throw TrainingDiverged("initial loss is not finite", res.loss_trace);

  std::mt19937_64 rng(sub_seed(hp.seed, "eei-train-order"));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = hp.batch_size == 0 ? samples.size() : std::min(hp.batch_size, samples.size());
  std::vector<EeiSample> batch;
  std::vector<double> grad;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[uniform_below(rng, i)]);
    for (std::size_t s = 0; s < order.size(); s += bs) {
      batch.clear();
      for (std::size_t k = s; k < std::min(order.size(), s + bs); ++k) batch.push_back(samples[order[k]]);
      const auto loss = total_loss(model, graph, batch, &grad);
      if (!std::isfinite(loss.total)) {
        res.loss_trace.push_back(loss.total);
        throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch), res.loss_trace);
      }
      if (hp.learning_rate == 0.0) continue;
      auto p = model.params();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= hp.learning_rate * grad[i];
    }
    res.loss_trace.push_back(total_loss(model, graph, samples).total);
    if (!std::isfinite(res.loss_trace.back()))
      throw TrainingDiverged("non-finite loss after epoch " + std::to_string(epoch), res.loss_trace);
  }
  return res;
}

GradientCheckReport gradient_check(const EeiModel& model, const TriGraph& graph,
                                   std::span<const EeiSample> batch, double epsilon,
                                   std::size_t samples, std::uint64_t seed,
                                   GradientMutation mutation) {
  std::vector<double> analytic;
  total_loss(model, graph, batch, &analytic, mutation);
  const auto& L = model.layout();

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picks;
  for (const auto& [name, b] : L.named_blocks())
    if (b.size > 0) picks.push_back(b.offset + uniform_below(rng, b.size));
  while (picks.size() < std::min(samples, L.total)) {
    const auto idx = uniform_below(rng, L.total);
    if (std::find(picks.begin(), picks.end(), idx) == picks.end()) picks.push_back(idx);
  }

  EeiModel probe = model;
  GradientCheckReport rep;
  for (auto idx : picks) {
    const double orig = probe.params()[idx];
    probe.params()[idx] = orig + epsilon;
    const double up = total_loss(probe, graph, batch).total;
    probe.params()[idx] = orig - epsilon;
    const double down = total_loss(probe, graph, batch).total;
    probe.params()[idx] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[idx];
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (rel > rep.max_relative_error) {
      rep.max_relative_error = rel;
      rep.worst_index = idx;
    }
    ++rep.checked;
  }
  return rep;
}

std::string format_loss_trace(const std::vector<double>& trace) {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) os << i << ',' << format_double(trace[i]) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Scorer and artifact

Scorer::Scorer(EeiModel model, EntityTable table, std::vector<EntityId> entities)
    : model_(std::move(model)), table_(std::move(table)), entities_(std::move(entities)) {
  if (table_.entities != entities_.size() || table_.dim != model_.dim())
    throw DataError("entity table does not match the model");
  for (std::size_t i = 0; i < entities_.size(); ++i) index_.emplace(entities_[i], i);
}

std::optional<std::size_t> Scorer::find_entity(const EntityId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

double Scorer::score(const EntityId& entity, std::span<const double> features) const {
  auto k = find_entity(entity);
  if (!k) throw DataError("score: unknown entity '" + entity + "'");
  const auto y = item_embedding(features);
  return score(*k, y);
}

double Scorer::score(std::size_t entity, std::span<const double> item_emb) const {
  return dot(table_.representation(entity).data(), item_emb.data(), table_.dim);
}

std::vector<double> Scorer::item_embedding(std::span<const double> features) const {
  return item_tower(model_, features);
}

std::span<const double> Scorer::entity_embedding(const EntityId& entity) const {
  auto k = find_entity(entity);
  if (!k) throw DataError("unknown entity '" + entity + "'");
  return table_.representation(*k);
}

namespace {

void write_values(std::ostringstream& os, std::span<const double> v, std::size_t width) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << format_double(v[i]);
    os << ((i + 1) % width == 0 || i + 1 == v.size() ? '\n' : ' ');
  }
}

}  // namespace

std::string serialize_model(const EeiModel& model, const EntityTable& table,
                            const std::vector<EntityId>& entities) {
  const auto& hp = model.hyper();
  std::ostringstream os;
  os << "compkg-model " << kModelFormatVersion << '\n'
     << "dim " << hp.dim << '\n'
     << "feature_dim " << model.feature_dim() << '\n'
     << "nodes " << model.nodes() << '\n'
     << "tau " << format_double(hp.tau) << '\n'
     << "lambda_cl " << format_double(hp.lambda_cl) << '\n'
     << "lambda_l2 " << format_double(hp.lambda_l2) << '\n'
     << "learning_rate " << format_double(hp.learning_rate) << '\n'
     << "epochs " << hp.epochs << '\n'
     << "batch_size " << hp.batch_size << '\n'
     << "seed " << hp.seed << '\n'
     << "activation " << (hp.activation == Activation::Elu ? "elu" : "identity") << '\n'
     << "sigma_inside " << int(hp.sigma_inside) << '\n'
     << "leaky_slope " << format_double(hp.leaky_slope) << '\n'
     << "entities " << entities.size() << '\n';
  for (const auto& e : entities) os << e << '\n';
  for (const auto& [name, b] : model.layout().named_blocks()) {
    os << "block " << name << ' ' << b.size << '\n';
    write_values(os, model.block(b), hp.dim);
  }
  auto table_block = [&](const char* name, const std::vector<double>& v) {
    os << "block " << name << ' ' << v.size() << '\n';
    write_values(os, v, hp.dim);
  };
  table_block("entity_z_first", table.z_first);
  table_block("entity_z_second", table.z_second);
  table_block("entity_repr", table.repr);
  auto flags = [&](const char* name, const std::vector<char>& v) {
    os << "flags " << name << ' ';
    for (char c : v) os << (c ? '1' : '0');
    os << '\n';
  };
  flags("first_empty", table.first_empty);
  flags("second_empty", table.second_empty);
  os << "end\n";
  return os.str();
}

Scorer deserialize_model(const std::string& content) {
  std::istringstream in(content);
  std::string word;
  auto expect = [&](const char* key) {
    if (!(in >> word) || word != key)
      throw DataError(std::string("model artifact: expected '") + key + "'");
  };
  auto read_str = [&](const char* key) {
    expect(key);
    std::string v;
    if (!(in >> v)) throw DataError(std::string("model artifact: missing value for ") + key);
    return v;
  };
  expect("compkg-model");
  int version = 0;
  in >> version;
  if (version != kModelFormatVersion)
    throw DataError("model artifact version " + std::to_string(version) + " not supported");
  Hyperparams hp;
  hp.dim = std::size_t(parse_int(read_str("dim"), "dim"));
  const auto feature_dim = std::size_t(parse_int(read_str("feature_dim"), "feature_dim"));
  const auto nodes = std::size_t(parse_int(read_str("nodes"), "nodes"));
  hp.tau = parse_double(read_str("tau"), "tau");
  hp.lambda_cl = parse_double(read_str("lambda_cl"), "lambda_cl");
  hp.lambda_l2 = parse_double(read_str("lambda_l2"), "lambda_l2");
  hp.learning_rate = parse_double(read_str("learning_rate"), "learning_rate");
  hp.epochs = int(parse_int(read_str("epochs"), "epochs"));
  hp.batch_size = std::size_t(parse_int(read_str("batch_size"), "batch_size"));
  hp.seed = std::stoull(read_str("seed"));
  hp.activation = read_str("activation") == "elu" ? Activation::Elu : Activation::Identity;
  hp.sigma_inside = read_str("sigma_inside") == "1";
  hp.leaky_slope = parse_double(read_str("leaky_slope"), "leaky_slope");
  const auto n_ent = std::size_t(parse_int(read_str("entities"), "entities"));
  std::vector<EntityId> entities(n_ent);
  for (auto& e : entities)
    if (!(in >> e)) throw DataError("model artifact: truncated entity list");

  EeiModel model(hp, nodes, feature_dim);
  auto read_block = [&](const std::string& name, std::span<double> dst) {
    expect("block");
    std::string got;
    std::size_t size = 0;
    in >> got >> size;
    if (got != name || size != dst.size())
      throw DataError("model artifact: block '" + got + "' does not match expected '" + name + "'");
    for (auto& v : dst) {
      std::string tok;
      if (!(in >> tok)) throw DataError("model artifact: truncated block " + name);
      v = parse_double(tok, name);
    }
  };
  for (const auto& [name, b] : model.layout().named_blocks()) read_block(name, model.block(b));
  EntityTable table;
  table.dim = hp.dim;
  table.entities = n_ent;
  table.z_first.resize(n_ent * hp.dim);
  table.z_second.resize(n_ent * hp.dim);
  table.repr.resize(n_ent * hp.dim);
  read_block("entity_z_first", table.z_first);
  read_block("entity_z_second", table.z_second);
  read_block("entity_repr", table.repr);
  auto read_flags = [&](const char* name, std::vector<char>& dst) {
    expect("flags");
    std::string got, bits;
    in >> got;
    if (got != name) throw DataError(std::string("model artifact: expected flags ") + name);
    if (n_ent > 0) in >> bits;
    if (bits.size() != n_ent) throw DataError("model artifact: flag length mismatch");
    dst.resize(n_ent);
    for (std::size_t i = 0; i < n_ent; ++i) dst[i] = bits[i] == '1';
  };
  read_flags("first_empty", table.first_empty);
  read_flags("second_empty", table.second_empty);
  expect("end");
  return Scorer(std::move(model), std::move(table), std::move(entities));
}

}  // namespace compkg::eei
