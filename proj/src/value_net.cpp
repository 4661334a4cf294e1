#include "utiltune/value_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "utiltune/errors.hpp"

namespace utiltune {
namespace {

using Vec = std::vector<double>;

constexpr std::size_t kGradChunk = 16;

// y = W x + b, W row-major (rows x cols).
void affine(const double* w, const double* b, const double* x, std::size_t rows, std::size_t cols,
            double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w + r * cols;
    double acc = b != nullptr ? b[r] : 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

// dW += dy x^T, db += dy, dx += W^T dy (each optional).
void affine_backward(const double* w, const double* x, const double* dy, std::size_t rows,
                     std::size_t cols, double* dw, double* db, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    if (db != nullptr) db[r] += g;
    if (dw != nullptr) {
      double* dwr = dw + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dwr[c] += g * x[c];
    }
    if (dx != nullptr) {
      const double* wr = w + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += g * wr[c];
    }
  }
}

double bounded_sigmoid(double z) {
  static const double kHi = std::nextafter(1.0, 0.0);
  return std::clamp(1.0 / (1.0 + std::exp(-z)), std::numeric_limits<double>::min(), kHi);
}

class LayoutBuilder {
 public:
  TensorRef add(std::size_t rows, std::size_t cols = 1) {
    TensorRef t{next_, rows, cols};
    next_ += rows * cols;
    return t;
  }
  std::size_t total() const { return next_; }

 private:
  std::size_t next_ = 0;
};

struct BlockCache {
  Vec q, k, v, p, c;
};

struct StateCache {
  std::size_t length = 0;
  Vec x;                        // length x token_in
  std::vector<Vec> tokens;      // attention_blocks + 1 entries of length x d_model
  std::vector<BlockCache> blocks;
  Vec z;
  Vec s_pre;
  Vec s;
};

struct ActionCache {
  double n[2] = {0.0, 0.0};
  Vec a_pre;
  Vec a;
};

/// Read-only view of a network's parameters that carries out the per-example
/// passes. Gradient buffers are written at the same offsets as the parameters.
class NetMath {
 public:
  NetMath(const NetConfig& cfg, const ParamLayout& layout, std::span<const double> params,
          const ActionGrid& grid)
      : cfg_(cfg), l_(layout), p_(params.data()), grid_(grid) {}

  std::size_t d_model() const { return static_cast<std::size_t>(cfg_.d_model); }
  std::size_t token_in() const { return static_cast<std::size_t>(cfg_.item_dim + 2 * cfg_.d_cat); }
  std::size_t z_dim() const {
    return static_cast<std::size_t>(cfg_.d_model + cfg_.user_dim + 3 * cfg_.d_cat);
  }

  const double* at(const TensorRef& t) const { return p_ + t.offset; }

  void validate(const RequestContext& ctx) const {
    if (static_cast<std::size_t>(ctx.device) >= kNumDevices) {
      throw std::invalid_argument("unknown device_type value");
    }
    if (static_cast<std::size_t>(ctx.surface) >= kNumSurfaces) {
      throw std::invalid_argument("unknown surface value");
    }
    if (ctx.hour_of_day < 0 || ctx.hour_of_day > 23) throw std::invalid_argument("hour_of_day out of range");
    if (ctx.user_embedding.size() != static_cast<std::size_t>(cfg_.user_dim)) {
      throw std::invalid_argument("user_embedding dimension mismatch");
    }
    const std::size_t n = ctx.history_size();
    if (n > static_cast<std::size_t>(cfg_.max_history)) {
      throw std::invalid_argument("history longer than max_history");
    }
    if (n > 0 && ctx.item_dim != cfg_.item_dim) throw std::invalid_argument("item_dim mismatch");
    if (ctx.history_items.size() != n * static_cast<std::size_t>(cfg_.item_dim) ||
        ctx.history_age.size() != n) {
      throw std::invalid_argument("history arrays differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<std::size_t>(ctx.history_actions[i]) >= kNumHistoryActions) {
        throw std::invalid_argument("unknown history action value");
      }
      if (ctx.history_age[i] >= kNumAgeBuckets) throw std::invalid_argument("age bucket out of range");
    }
  }

  void encode_state(const RequestContext& ctx, StateCache& c) const {
    validate(ctx);
    const std::size_t d = d_model();
    const std::size_t tin = token_in();
    const auto d_cat = static_cast<std::size_t>(cfg_.d_cat);
    const auto item_dim = static_cast<std::size_t>(cfg_.item_dim);
    const std::size_t length = cfg_.groups.history ? ctx.history_size() : 0;
    c.length = length;

    c.z.assign(z_dim(), 0.0);
    double* pool = c.z.data();
    if (cfg_.groups.history && length == 0) {
      std::copy_n(at(l_.null_history), d, pool);
    } else if (length > 0) {
      c.x.resize(length * tin);
      for (std::size_t i = 0; i < length; ++i) {
        double* xi = &c.x[i * tin];
        const auto item = ctx.history_item(i);
        std::copy(item.begin(), item.end(), xi);
        std::copy_n(at(l_.emb_history_action) + static_cast<std::size_t>(ctx.history_actions[i]) * d_cat,
                    d_cat, xi + item_dim);
        std::copy_n(at(l_.emb_age) + static_cast<std::size_t>(ctx.history_age[i]) * d_cat, d_cat,
                    xi + item_dim + d_cat);
      }
      const std::size_t blocks = l_.attention.size();
      c.tokens.resize(blocks + 1);
      c.blocks.resize(blocks);
      c.tokens[0].resize(length * d);
      for (std::size_t i = 0; i < length; ++i) {
        double* ti = &c.tokens[0][i * d];
        affine(at(l_.tok_w), at(l_.tok_b), &c.x[i * tin], d, tin, ti);
        const double* pos = at(l_.position) + i * d;
        for (std::size_t j = 0; j < d; ++j) ti[j] += pos[j];
      }
      for (std::size_t b = 0; b < blocks; ++b) {
        attention_forward(l_.attention[b], length, c.tokens[b], c.blocks[b], c.tokens[b + 1]);
      }
      const Vec& last = c.tokens[blocks];
      const double inv = 1.0 / static_cast<double>(length);
      for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = 0; j < d; ++j) pool[j] += last[i * d + j];
      }
      for (std::size_t j = 0; j < d; ++j) pool[j] *= inv;
    }

    double* rest = pool + d;
    if (cfg_.groups.user) std::copy(ctx.user_embedding.begin(), ctx.user_embedding.end(), rest);
    rest += cfg_.user_dim;
    if (cfg_.groups.context) {
      std::copy_n(at(l_.emb_device) + static_cast<std::size_t>(ctx.device) * d_cat, d_cat, rest);
      std::copy_n(at(l_.emb_surface) + static_cast<std::size_t>(ctx.surface) * d_cat, d_cat,
                  rest + d_cat);
      std::copy_n(at(l_.emb_hour) + static_cast<std::size_t>(ctx.hour_of_day / 4) * d_cat, d_cat,
                  rest + 2 * d_cat);
    }

    const auto ds = static_cast<std::size_t>(cfg_.d_state);
    c.s_pre.resize(ds);
    c.s.resize(ds);
    affine(at(l_.state_w), at(l_.state_b), c.z.data(), ds, z_dim(), c.s_pre.data());
    for (std::size_t j = 0; j < ds; ++j) c.s[j] = std::max(0.0, c.s_pre[j]);
  }

  void attention_forward(const AttentionRefs& a, std::size_t length, const Vec& in, BlockCache& bc,
                         Vec& out) const {
    const std::size_t d = d_model();
    bc.q.resize(length * d);
    bc.k.resize(length * d);
    bc.v.resize(length * d);
    bc.p.resize(length * length);
    bc.c.assign(length * d, 0.0);
    out.resize(length * d);
    for (std::size_t i = 0; i < length; ++i) {
      affine(at(a.wq), at(a.bq), &in[i * d], d, d, &bc.q[i * d]);
      affine(at(a.wk), at(a.bk), &in[i * d], d, d, &bc.k[i * d]);
      affine(at(a.wv), at(a.bv), &in[i * d], d, d, &bc.v[i * d]);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < length; ++i) {
      double* pi = &bc.p[i * length];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < length; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += bc.q[i * d + t] * bc.k[j * d + t];
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < length; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        total += pi[j];
      }
      for (std::size_t j = 0; j < length; ++j) pi[j] /= total;
      double* ci = &bc.c[i * d];
      for (std::size_t j = 0; j < length; ++j) {
        for (std::size_t t = 0; t < d; ++t) ci[t] += pi[j] * bc.v[j * d + t];
      }
      affine(at(a.wo), at(a.bo), ci, d, d, &out[i * d]);
      for (std::size_t t = 0; t < d; ++t) out[i * d + t] += in[i * d + t];
    }
  }

  // d_out (length x d) -> gradient into g, returns d_in.
  Vec attention_backward(const AttentionRefs& a, std::size_t length, const Vec& in,
                         const BlockCache& bc, const Vec& d_out, double* g) const {
    const std::size_t d = d_model();
    Vec d_in = d_out;  // residual path
    Vec dc(length * d, 0.0), dq(length * d, 0.0), dk(length * d, 0.0), dv(length * d, 0.0);
    for (std::size_t i = 0; i < length; ++i) {
      affine_backward(at(a.wo), &bc.c[i * d], &d_out[i * d], d, d, g + a.wo.offset, g + a.bo.offset,
                      &dc[i * d]);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vec dp(length);
    for (std::size_t i = 0; i < length; ++i) {
      const double* pi = &bc.p[i * length];
      const double* dci = &dc[i * d];
      double weighted = 0.0;
      for (std::size_t j = 0; j < length; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += dci[t] * bc.v[j * d + t];
        dp[j] = s;
        weighted += pi[j] * s;
        for (std::size_t t = 0; t < d; ++t) dv[j * d + t] += pi[j] * dci[t];
      }
      for (std::size_t j = 0; j < length; ++j) {
        const double ds = pi[j] * (dp[j] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t t = 0; t < d; ++t) {
          dq[i * d + t] += ds * bc.k[j * d + t];
          dk[j * d + t] += ds * bc.q[i * d + t];
        }
      }
    }
    for (std::size_t i = 0; i < length; ++i) {
      const double* xi = &in[i * d];
      double* dxi = &d_in[i * d];
      affine_backward(at(a.wq), xi, &dq[i * d], d, d, g + a.wq.offset, g + a.bq.offset, dxi);
      affine_backward(at(a.wk), xi, &dk[i * d], d, d, g + a.wk.offset, g + a.bk.offset, dxi);
      affine_backward(at(a.wv), xi, &dv[i * d], d, d, g + a.wv.offset, g + a.bv.offset, dxi);
    }
    return d_in;
  }

  void state_backward(const RequestContext& ctx, const StateCache& c, const double* d_s,
                      double* g) const {
    const std::size_t d = d_model();
    const auto ds = static_cast<std::size_t>(cfg_.d_state);
    const auto d_cat = static_cast<std::size_t>(cfg_.d_cat);
    Vec d_pre(ds);
    for (std::size_t j = 0; j < ds; ++j) d_pre[j] = c.s_pre[j] > 0.0 ? d_s[j] : 0.0;
    Vec dz(z_dim(), 0.0);
    affine_backward(at(l_.state_w), c.z.data(), d_pre.data(), ds, z_dim(), g + l_.state_w.offset,
                    g + l_.state_b.offset, dz.data());

    if (cfg_.groups.context) {
      const double* dctx = dz.data() + d + static_cast<std::size_t>(cfg_.user_dim);
      double* gd = g + l_.emb_device.offset + static_cast<std::size_t>(ctx.device) * d_cat;
      double* gs = g + l_.emb_surface.offset + static_cast<std::size_t>(ctx.surface) * d_cat;
      double* gh = g + l_.emb_hour.offset + static_cast<std::size_t>(ctx.hour_of_day / 4) * d_cat;
      for (std::size_t t = 0; t < d_cat; ++t) {
        gd[t] += dctx[t];
        gs[t] += dctx[d_cat + t];
        gh[t] += dctx[2 * d_cat + t];
      }
    }

    if (!cfg_.groups.history) return;
    const std::size_t length = c.length;
    if (length == 0) {
      double* gn = g + l_.null_history.offset;
      for (std::size_t t = 0; t < d; ++t) gn[t] += dz[t];
      return;
    }
    const std::size_t blocks = l_.attention.size();
    Vec d_tokens(length * d);
    const double inv = 1.0 / static_cast<double>(length);
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t t = 0; t < d; ++t) d_tokens[i * d + t] = dz[t] * inv;
    }
    for (std::size_t b = blocks; b-- > 0;) {
      d_tokens = attention_backward(l_.attention[b], length, c.tokens[b], c.blocks[b], d_tokens, g);
    }
    const std::size_t tin = token_in();
    const auto item_dim = static_cast<std::size_t>(cfg_.item_dim);
    Vec dx(tin);
    for (std::size_t i = 0; i < length; ++i) {
      const double* dti = &d_tokens[i * d];
      std::fill(dx.begin(), dx.end(), 0.0);
      affine_backward(at(l_.tok_w), &c.x[i * tin], dti, d, tin, g + l_.tok_w.offset,
                      g + l_.tok_b.offset, dx.data());
      double* gp = g + l_.position.offset + i * d;
      for (std::size_t t = 0; t < d; ++t) gp[t] += dti[t];
      double* ga = g + l_.emb_history_action.offset +
                   static_cast<std::size_t>(ctx.history_actions[i]) * d_cat;
      double* gage = g + l_.emb_age.offset + static_cast<std::size_t>(ctx.history_age[i]) * d_cat;
      for (std::size_t t = 0; t < d_cat; ++t) {
        ga[t] += dx[item_dim + t];
        gage[t] += dx[item_dim + d_cat + t];
      }
    }
  }

  void encode_action(const WeightAction& action, ActionCache& c) const {
    const auto n = normalize_action(grid_, action);
    c.n[0] = n.repin;
    c.n[1] = n.p2p;
    const auto da = static_cast<std::size_t>(cfg_.d_action);
    c.a_pre.resize(da);
    c.a.resize(da);
    affine(at(l_.action_w), at(l_.action_b), c.n, da, 2, c.a_pre.data());
    for (std::size_t j = 0; j < da; ++j) c.a[j] = std::max(0.0, c.a_pre[j]);
  }

  void action_backward(const ActionCache& c, const double* d_a, double* g) const {
    const auto da = static_cast<std::size_t>(cfg_.d_action);
    Vec d_pre(da);
    for (std::size_t j = 0; j < da; ++j) d_pre[j] = c.a_pre[j] > 0.0 ? d_a[j] : 0.0;
    affine_backward(at(l_.action_w), c.n, d_pre.data(), da, 2, g + l_.action_w.offset,
                    g + l_.action_b.offset, nullptr);
  }

  // --- Inference backbone -------------------------------------------------

  // Layer-0 pre-activation split into a state part and an action part so the
  // state half is computed once per context.
  Vec layer0_state_part(const Vec& s, std::span<const double> mean, std::span<const double> var) const {
    const auto& bb = l_.backbone[0];
    const std::size_t ds = s.size();
    const std::size_t din = bb.w.cols;
    const std::size_t dh = bb.w.rows;
    Vec y(ds);
    for (std::size_t k = 0; k < ds; ++k) {
      y[k] = at(bb.gamma)[k] * (s[k] - mean[k]) / std::sqrt(var[k] + kBatchNormEps) + at(bb.beta)[k];
    }
    Vec out(dh, 0.0);
    for (std::size_t j = 0; j < dh; ++j) {
      const double* wj = at(bb.w) + j * din;
      double acc = 0.0;
      for (std::size_t k = 0; k < ds; ++k) acc += wj[k] * y[k];
      out[j] = acc;
    }
    return out;
  }

  Vec layer0_action_part(const Vec& a, std::span<const double> mean, std::span<const double> var) const {
    const auto& bb = l_.backbone[0];
    const auto ds = static_cast<std::size_t>(cfg_.d_state);
    const std::size_t din = bb.w.cols;
    const std::size_t dh = bb.w.rows;
    Vec y(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      const std::size_t f = ds + k;
      y[k] = at(bb.gamma)[f] * (a[k] - mean[f]) / std::sqrt(var[f] + kBatchNormEps) + at(bb.beta)[f];
    }
    Vec out(dh);
    for (std::size_t j = 0; j < dh; ++j) {
      const double* wj = at(bb.w) + j * din + ds;
      double acc = at(bb.b)[j];
      for (std::size_t k = 0; k < a.size(); ++k) acc += wj[k] * y[k];
      out[j] = acc;
    }
    return out;
  }

  ValuePair backbone_infer(const Vec& state_part, const Vec& action_part,
                           std::span<const double> rmean, std::span<const double> rvar) const {
    const std::size_t dh = state_part.size();
    Vec x(dh), y(dh), pre(dh);
    for (std::size_t j = 0; j < dh; ++j) x[j] = std::max(0.0, state_part[j] + action_part[j]);
    for (std::size_t layer = 1; layer < l_.backbone.size(); ++layer) {
      const auto& bb = l_.backbone[layer];
      const auto mean = rmean.subspan(l_.bn_offset[layer], l_.bn_width[layer]);
      const auto var = rvar.subspan(l_.bn_offset[layer], l_.bn_width[layer]);
      for (std::size_t k = 0; k < dh; ++k) {
        y[k] = at(bb.gamma)[k] * (x[k] - mean[k]) / std::sqrt(var[k] + kBatchNormEps) + at(bb.beta)[k];
      }
      affine(at(bb.w), at(bb.b), y.data(), bb.w.rows, bb.w.cols, pre.data());
      for (std::size_t j = 0; j < dh; ++j) x[j] = std::max(0.0, pre[j]);
    }
    double zr = *at(l_.head_repin_b);
    double zp = *at(l_.head_p2p_b);
    for (std::size_t j = 0; j < dh; ++j) {
      zr += at(l_.head_repin_w)[j] * x[j];
      zp += at(l_.head_p2p_w)[j] * x[j];
    }
    ValuePair out{bounded_sigmoid(zr), bounded_sigmoid(zp)};
    if (!std::isfinite(out.q_repin) || !std::isfinite(out.q_p2p)) {
      throw std::runtime_error("value net produced a non-finite output");
    }
    return out;
  }

 private:
  const NetConfig& cfg_;
  const ParamLayout& l_;
  const double* p_;
  const ActionGrid& grid_;
};

// Training-mode batch pass. Fills `grad` if non-null; returns batch
// statistics per backbone layer for the running-average update.
struct BatchStats {
  std::vector<Vec> mean;
  std::vector<Vec> var;
};

double train_pass(const NetConfig& cfg, const ParamLayout& l, std::span<const double> params,
                  std::span<const double> rmean, std::span<const double> rvar, const ActionGrid& grid,
                  std::span<const TrainingExample> batch, std::vector<double>* grad, Exec exec,
                  BatchStats* stats) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  const NetMath m(cfg, l, params, grid);
  const std::size_t n = batch.size();
  const auto ds = static_cast<std::size_t>(cfg.d_state);
  const auto da = static_cast<std::size_t>(cfg.d_action);
  const std::size_t d0 = ds + da;

  std::vector<StateCache> sc(n);
  std::vector<ActionCache> ac(n);
  const std::size_t chunks = (n + kGradChunk - 1) / kGradChunk;
  parallel_for(chunks, exec, [&](std::size_t chunk) {
    const std::size_t end = std::min(n, (chunk + 1) * kGradChunk);
    for (std::size_t i = chunk * kGradChunk; i < end; ++i) {
      if (batch[i].context == nullptr) throw std::invalid_argument("training example without context");
      m.encode_state(*batch[i].context, sc[i]);
      m.encode_action(grid.action(batch[i].action_index), ac[i]);
    }
  });

  // Backbone over the whole batch.
  const std::size_t layers = l.backbone.size();
  std::vector<Vec> x(layers + 1), xhat(layers), pre(layers);
  std::vector<Vec> mu(layers), sigma(layers);  // per-feature mean and sqrt(var + eps)
  x[0].resize(n * d0);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(sc[i].s.begin(), sc[i].s.end(), &x[0][i * d0]);
    std::copy(ac[i].a.begin(), ac[i].a.end(), &x[0][i * d0 + ds]);
  }
  if (stats != nullptr) {
    stats->mean.assign(layers, {});
    stats->var.assign(layers, {});
  }
  for (std::size_t layer = 0; layer < layers; ++layer) {
    const auto& bb = l.backbone[layer];
    const std::size_t din = bb.w.cols;
    const std::size_t dout = bb.w.rows;
    const Vec& in = x[layer];
    Vec mean(din, 0.0), var(din, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < din; ++f) mean[f] += in[i * din + f];
    }
    for (double& v : mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < din; ++f) {
        const double dlt = in[i * din + f] - mean[f];
        var[f] += dlt * dlt;
      }
    }
    for (double& v : var) v /= static_cast<double>(n);
    if (stats != nullptr) {
      stats->mean[layer] = mean;
      stats->var[layer] = var;
    }
    mu[layer].resize(din);
    sigma[layer].resize(din);
    for (std::size_t f = 0; f < din; ++f) {
      if (cfg.norm == NormMode::kBatch) {
        mu[layer][f] = mean[f];
        sigma[layer][f] = std::sqrt(var[f] + kBatchNormEps);
      } else {
        mu[layer][f] = rmean[l.bn_offset[layer] + f];
        sigma[layer][f] = std::sqrt(rvar[l.bn_offset[layer] + f] + kBatchNormEps);
      }
    }
    xhat[layer].resize(n * din);
    pre[layer].resize(n * dout);
    x[layer + 1].resize(n * dout);
    Vec y(din);
    const double* gamma = params.data() + bb.gamma.offset;
    const double* beta = params.data() + bb.beta.offset;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < din; ++f) {
        const double h = (in[i * din + f] - mu[layer][f]) / sigma[layer][f];
        xhat[layer][i * din + f] = h;
        y[f] = gamma[f] * h + beta[f];
      }
      affine(params.data() + bb.w.offset, params.data() + bb.b.offset, y.data(), dout, din,
             &pre[layer][i * dout]);
      for (std::size_t j = 0; j < dout; ++j) {
        x[layer + 1][i * dout + j] = std::max(0.0, pre[layer][i * dout + j]);
      }
    }
  }

  const std::size_t dh = static_cast<std::size_t>(cfg.d_hidden);
  const Vec& top = x[layers];
  Vec dz_r(n), dz_p(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = params[l.head_repin_b.offset];
    double zp = params[l.head_p2p_b.offset];
    for (std::size_t j = 0; j < dh; ++j) {
      zr += params[l.head_repin_w.offset + j] * top[i * dh + j];
      zp += params[l.head_p2p_w.offset + j] * top[i * dh + j];
    }
    const double qr = bounded_sigmoid(zr);
    const double qp = bounded_sigmoid(zp);
    const double er = qr - batch[i].r_repin;
    const double ep = qp - batch[i].r_p2p;
    loss += er * er + ep * ep;
    dz_r[i] = 2.0 * er / static_cast<double>(n) * qr * (1.0 - qr);
    dz_p[i] = 2.0 * ep / static_cast<double>(n) * qp * (1.0 - qp);
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss)) throw DivergenceError("training loss is not finite");
  if (grad == nullptr) return loss;

  std::vector<double>& g = *grad;
  g.assign(params.size(), 0.0);

  Vec dx(n * dh, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    g[l.head_repin_b.offset] += dz_r[i];
    g[l.head_p2p_b.offset] += dz_p[i];
    for (std::size_t j = 0; j < dh; ++j) {
      g[l.head_repin_w.offset + j] += dz_r[i] * top[i * dh + j];
      g[l.head_p2p_w.offset + j] += dz_p[i] * top[i * dh + j];
      dx[i * dh + j] = dz_r[i] * params[l.head_repin_w.offset + j] +
                       dz_p[i] * params[l.head_p2p_w.offset + j];
    }
  }

  for (std::size_t layer = layers; layer-- > 0;) {
    const auto& bb = l.backbone[layer];
    const std::size_t din = bb.w.cols;
    const std::size_t dout = bb.w.rows;
    const double* gamma = params.data() + bb.gamma.offset;
    Vec dxhat(n * din, 0.0);
    Vec dy(din);
    Vec y(din);
    Vec dpre(dout);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dout; ++j) {
        dpre[j] = pre[layer][i * dout + j] > 0.0 ? dx[i * dout + j] : 0.0;
      }
      for (std::size_t f = 0; f < din; ++f) {
        y[f] = gamma[f] * xhat[layer][i * din + f] + params[bb.beta.offset + f];
      }
      std::fill(dy.begin(), dy.end(), 0.0);
      affine_backward(params.data() + bb.w.offset, y.data(), dpre.data(), dout, din,
                      g.data() + bb.w.offset, g.data() + bb.b.offset, dy.data());
      for (std::size_t f = 0; f < din; ++f) {
        g[bb.gamma.offset + f] += dy[f] * xhat[layer][i * din + f];
        g[bb.beta.offset + f] += dy[f];
        dxhat[i * din + f] = dy[f] * gamma[f];
      }
    }
    Vec din_grad(n * din);
    if (cfg.norm == NormMode::kBatch) {
      const double nd = static_cast<double>(n);
      for (std::size_t f = 0; f < din; ++f) {
        double sum = 0.0, sum_h = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sum += dxhat[i * din + f];
          sum_h += dxhat[i * din + f] * xhat[layer][i * din + f];
        }
        for (std::size_t i = 0; i < n; ++i) {
          din_grad[i * din + f] = (nd * dxhat[i * din + f] - sum - xhat[layer][i * din + f] * sum_h) /
                                  (nd * sigma[layer][f]);
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < din; ++f) {
          din_grad[i * din + f] = dxhat[i * din + f] / sigma[layer][f];
        }
      }
    }
    dx = std::move(din_grad);
  }

  // Per-example encoder gradients, reduced in fixed chunk order.
  std::vector<Vec> partial(chunks);
  parallel_for(chunks, exec, [&](std::size_t chunk) {
    Vec& gc = partial[chunk];
    gc.assign(params.size(), 0.0);
    const std::size_t end = std::min(n, (chunk + 1) * kGradChunk);
    for (std::size_t i = chunk * kGradChunk; i < end; ++i) {
      m.state_backward(*batch[i].context, sc[i], &dx[i * d0], gc.data());
      m.action_backward(ac[i], &dx[i * d0 + ds], gc.data());
    }
  });
  for (const Vec& gc : partial) {
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += gc[k];
  }
  for (double v : g) {
    if (!std::isfinite(v)) throw DivergenceError("gradient is not finite");
  }
  return loss;
}

}  // namespace

// --- Config ----------------------------------------------------------------

std::string_view norm_mode_name(NormMode m) {
  return m == NormMode::kBatch ? "batch" : "standardize";
}

NormMode norm_mode_from_name(std::string_view name) {
  if (name == "batch") return NormMode::kBatch;
  if (name == "standardize") return NormMode::kStandardize;
  throw ConfigError("unknown normalization mode: " + std::string(name));
}

FeatureGroups FeatureGroups::only(std::span<const std::string> names) {
  if (names.empty()) throw ConfigError("feature group list is empty");
  FeatureGroups g{false, false, false};
  for (const auto& n : names) {
    if (n == "user") {
      g.user = true;
    } else if (n == "history") {
      g.history = true;
    } else if (n == "context") {
      g.context = true;
    } else {
      throw ConfigError("unknown feature group: " + n);
    }
  }
  return g;
}

std::string FeatureGroups::label() const {
  std::string out;
  const auto add = [&out](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(user, "user");
  add(history, "history");
  add(context, "context");
  return out.empty() ? "none" : out;
}

void NetConfig::validate() const {
  for (int v : {item_dim, user_dim, d_cat, d_model, d_state, d_action, d_hidden, backbone_layers}) {
    if (v < 1) throw ConfigError("net: dimensions must be >= 1");
  }
  if (max_history < 0) throw ConfigError("net: max_history must be >= 0");
  if (attention_blocks < 0) throw ConfigError("net: attention_blocks must be >= 0");
}

nlohmann::json NetConfig::to_json() const {
  std::vector<std::string> g;
  if (groups.user) g.emplace_back("user");
  if (groups.history) g.emplace_back("history");
  if (groups.context) g.emplace_back("context");
  return {{"item_dim", item_dim},       {"user_dim", user_dim},
          {"max_history", max_history}, {"d_cat", d_cat},
          {"d_model", d_model},         {"attention_blocks", attention_blocks},
          {"d_state", d_state},         {"d_action", d_action},
          {"d_hidden", d_hidden},       {"backbone_layers", backbone_layers},
          {"groups", g},                {"norm", norm_mode_name(norm)}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  try {
    const auto read = [&j](const char* key, int& field) {
      if (j.contains(key)) field = j.at(key).get<int>();
    };
    read("item_dim", c.item_dim);
    read("user_dim", c.user_dim);
    read("max_history", c.max_history);
    read("d_cat", c.d_cat);
    read("d_model", c.d_model);
    read("attention_blocks", c.attention_blocks);
    read("d_state", c.d_state);
    read("d_action", c.d_action);
    read("d_hidden", c.d_hidden);
    read("backbone_layers", c.backbone_layers);
    if (j.contains("groups")) {
      const auto names = j.at("groups").get<std::vector<std::string>>();
      c.groups = FeatureGroups::only(names);
    }
    if (j.contains("norm")) c.norm = norm_mode_from_name(j.at("norm").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("net config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamLayout ParamLayout::build(const NetConfig& c) {
  c.validate();
  const auto u = [](int v) { return static_cast<std::size_t>(v); };
  ParamLayout l;
  LayoutBuilder b;
  l.emb_device = b.add(kNumDevices, u(c.d_cat));
  l.emb_surface = b.add(kNumSurfaces, u(c.d_cat));
  l.emb_hour = b.add(kNumHourBuckets, u(c.d_cat));
  l.emb_history_action = b.add(kNumHistoryActions, u(c.d_cat));
  l.emb_age = b.add(u(kNumAgeBuckets), u(c.d_cat));
  const std::size_t token_in = u(c.item_dim + 2 * c.d_cat);
  l.tok_w = b.add(u(c.d_model), token_in);
  l.tok_b = b.add(u(c.d_model));
  l.position = b.add(std::max<std::size_t>(1, u(c.max_history)), u(c.d_model));
  l.null_history = b.add(u(c.d_model));
  for (int i = 0; i < c.attention_blocks; ++i) {
    AttentionRefs a;
    a.wq = b.add(u(c.d_model), u(c.d_model));
    a.bq = b.add(u(c.d_model));
    a.wk = b.add(u(c.d_model), u(c.d_model));
    a.bk = b.add(u(c.d_model));
    a.wv = b.add(u(c.d_model), u(c.d_model));
    a.bv = b.add(u(c.d_model));
    a.wo = b.add(u(c.d_model), u(c.d_model));
    a.bo = b.add(u(c.d_model));
    l.attention.push_back(a);
  }
  const std::size_t z_dim = u(c.d_model + c.user_dim + 3 * c.d_cat);
  l.state_w = b.add(u(c.d_state), z_dim);
  l.state_b = b.add(u(c.d_state));
  l.action_w = b.add(u(c.d_action), 2);
  l.action_b = b.add(u(c.d_action));
  std::size_t din = u(c.d_state + c.d_action);
  for (int i = 0; i < c.backbone_layers; ++i) {
    BackboneRefs r;
    r.gamma = b.add(din);
    r.beta = b.add(din);
    r.w = b.add(u(c.d_hidden), din);
    r.b = b.add(u(c.d_hidden));
    l.backbone.push_back(r);
    l.bn_offset.push_back(l.bn_total);
    l.bn_width.push_back(din);
    l.bn_total += din;
    din = u(c.d_hidden);
  }
  l.head_repin_w = b.add(1, u(c.d_hidden));
  l.head_repin_b = b.add(1);
  l.head_p2p_w = b.add(1, u(c.d_hidden));
  l.head_p2p_b = b.add(1);
  l.total = b.total();
  return l;
}

// --- ValueNet ----------------------------------------------------------------

ValueNet::ValueNet(NetConfig config, ActionGrid grid)
    : config_(std::move(config)), grid_(std::move(grid)), layout_(ParamLayout::build(config_)) {
  params_.assign(layout_.total, 0.0);
  running_mean_.assign(layout_.bn_total, 0.0);
  running_var_.assign(layout_.bn_total, 1.0);
}

void ValueNet::set_state(std::vector<double> params, std::vector<double> running_mean,
                         std::vector<double> running_var) {
  if (params.size() != layout_.total || running_mean.size() != layout_.bn_total ||
      running_var.size() != layout_.bn_total) {
    throw std::invalid_argument("parameter vector does not match the network layout");
  }
  params_ = std::move(params);
  running_mean_ = std::move(running_mean);
  running_var_ = std::move(running_var);
}

void ValueNet::initialize(std::uint64_t seed) {
  auto rng = make_stream(seed, StreamTag::kModelInit);
  std::normal_distribution<double> embed(0.0, 0.1);
  const auto gaussian = [&](const TensorRef& t) {
    for (std::size_t i = 0; i < t.size(); ++i) params_[t.offset + i] = embed(rng);
  };
  const auto uniform = [&](const TensorRef& t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) {
      params_[t.offset + i] = bound * (2.0 * rng.uniform() - 1.0);
    }
  };
  const auto linear = [&](const TensorRef& w, const TensorRef& b) {
    uniform(w, w.cols);
    uniform(b, w.cols);
  };
  gaussian(layout_.emb_device);
  gaussian(layout_.emb_surface);
  gaussian(layout_.emb_hour);
  gaussian(layout_.emb_history_action);
  gaussian(layout_.emb_age);
  linear(layout_.tok_w, layout_.tok_b);
  gaussian(layout_.position);
  gaussian(layout_.null_history);
  for (const auto& a : layout_.attention) {
    linear(a.wq, a.bq);
    linear(a.wk, a.bk);
    linear(a.wv, a.bv);
    linear(a.wo, a.bo);
  }
  linear(layout_.state_w, layout_.state_b);
  linear(layout_.action_w, layout_.action_b);
  for (const auto& bb : layout_.backbone) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(bb.gamma.offset), bb.gamma.size(), 1.0);
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(bb.beta.offset), bb.beta.size(), 0.0);
    linear(bb.w, bb.b);
  }
  linear(layout_.head_repin_w, layout_.head_repin_b);
  linear(layout_.head_p2p_w, layout_.head_p2p_b);
  std::fill(running_mean_.begin(), running_mean_.end(), 0.0);
  std::fill(running_var_.begin(), running_var_.end(), 1.0);
}

std::vector<double> ValueNet::encode_state(const RequestContext& context) const {
  StateCache c;
  NetMath(config_, layout_, params_, grid_).encode_state(context, c);
  return c.s;
}

std::vector<double> ValueNet::encode_action(const WeightAction& action) const {
  ActionCache c;
  NetMath(config_, layout_, params_, grid_).encode_action(action, c);
  return c.a;
}

ValuePair ValueNet::forward(const RequestContext& context, std::size_t action_index) const {
  const NetMath m(config_, layout_, params_, grid_);
  StateCache sc;
  m.encode_state(context, sc);
  ActionCache ac;
  m.encode_action(grid_.action(action_index), ac);
  const auto mean0 = std::span<const double>(running_mean_).subspan(0, layout_.bn_width[0]);
  const auto var0 = std::span<const double>(running_var_).subspan(0, layout_.bn_width[0]);
  return m.backbone_infer(m.layer0_state_part(sc.s, mean0, var0),
                          m.layer0_action_part(ac.a, mean0, var0), running_mean_, running_var_);
}

std::vector<ValuePair> ValueNet::predict_all_actions(const RequestContext& context) const {
  const NetMath m(config_, layout_, params_, grid_);
  StateCache sc;
  m.encode_state(context, sc);
  const auto mean0 = std::span<const double>(running_mean_).subspan(0, layout_.bn_width[0]);
  const auto var0 = std::span<const double>(running_var_).subspan(0, layout_.bn_width[0]);
  const Vec state_part = m.layer0_state_part(sc.s, mean0, var0);
  std::vector<ValuePair> out;
  out.reserve(grid_.size());
  ActionCache ac;
  for (std::size_t a = 0; a < grid_.size(); ++a) {
    m.encode_action(grid_.action(a), ac);
    out.push_back(m.backbone_infer(state_part, m.layer0_action_part(ac.a, mean0, var0),
                                   running_mean_, running_var_));
  }
  return out;
}

double ValueNet::loss_and_gradient(std::span<const TrainingExample> batch, std::vector<double>* grad,
                                   Exec exec, bool update_running_stats) {
  BatchStats stats;
  const double loss = train_pass(config_, layout_, params_, running_mean_, running_var_, grid_, batch,
                                 grad, exec, update_running_stats ? &stats : nullptr);
  if (update_running_stats && batch.size() > 1) {
    const double n = static_cast<double>(batch.size());
    for (std::size_t layer = 0; layer < layout_.backbone.size(); ++layer) {
      for (std::size_t f = 0; f < layout_.bn_width[layer]; ++f) {
        const std::size_t k = layout_.bn_offset[layer] + f;
        running_mean_[k] =
            (1.0 - kBatchNormMomentum) * running_mean_[k] + kBatchNormMomentum * stats.mean[layer][f];
        running_var_[k] = (1.0 - kBatchNormMomentum) * running_var_[k] +
                          kBatchNormMomentum * stats.var[layer][f] * n / (n - 1.0);
      }
    }
  }
  return loss;
}

double ValueNet::batch_loss(std::span<const TrainingExample> batch) const {
  return train_pass(config_, layout_, params_, running_mean_, running_var_, grid_, batch, nullptr,
                    Exec::kSerial, nullptr);
}

GradCheckResult finite_difference_check(ValueNet& net, std::span<const TrainingExample> batch,
                                        std::size_t coordinates, std::uint64_t seed, double h) {
  std::vector<double> grad;
  net.loss_and_gradient(batch, &grad, Exec::kSerial, false);
  auto params = net.mutable_params();
  auto rng = make_stream(seed, StreamTag::kShuffle, 0xfd);
  GradCheckResult out;
  out.coordinates = coordinates;
  for (std::size_t t = 0; t < coordinates; ++t) {
    const std::size_t k = static_cast<std::size_t>(rng.uniform() * static_cast<double>(params.size()));
    const double original = params[k];
    const auto loss_at = [&](double delta) {
      params[k] = original + delta;
      const double v = net.batch_loss(batch);
      params[k] = original;
      return v;
    };
    const double numeric =
        (8.0 * (loss_at(h) - loss_at(-h)) - (loss_at(2.0 * h) - loss_at(-2.0 * h))) / (12.0 * h);
    const double scale = std::max({std::abs(numeric), std::abs(grad[k]), 1e-6});
    const double rel = std::abs(numeric - grad[k]) / scale;
    if (rel > out.max_relative_error) {
      out.max_relative_error = rel;
      out.worst_index = k;
    }
  }
  return out;
}

double mse_loss(std::span<const ValuePair> predictions, std::span<const TrainingExample> batch) {
  if (batch.empty() || predictions.size() != batch.size()) {
    throw std::invalid_argument("mse_loss: empty batch or size mismatch");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double er = predictions[i].q_repin - batch[i].r_repin;
    const double ep = predictions[i].q_p2p - batch[i].r_p2p;
    loss += er * er + ep * ep;
  }
  return loss / static_cast<double>(batch.size());
}

}  // namespace utiltune
