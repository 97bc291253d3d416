#include "fflab/trainer.hpp"

#include "fflab/attribution.hpp"
#include "fflab/errors.hpp"
#include "fflab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

namespace fflab {

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw InputError(std::string("invalid train config: ") + what);
  };
  require(steps >= 0, "steps must be non-negative");
  require(batch_size > 0, "batch_size must be positive");
  require(learning_rate > 0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(warmup_steps >= 0, "warmup_steps must be non-negative");
  require(weight_decay >= 0, "weight_decay must be non-negative");
  require(competing_fraction >= 0 && competing_fraction <= 1, "competing_fraction must be in [0, 1]");
  require(window_fraction >= 0 && window_fraction <= 1, "window_fraction must be in [0, 1]");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam betas must be in [0, 1)");
  require(adam_eps > 0, "adam_eps must be positive");
  require(shard_size > 0, "shard_size must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"warmup_steps", c.warmup_steps},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"competing_fraction", c.competing_fraction},
       {"window_fraction", c.window_fraction},
       {"fresh_forbidden", c.fresh_forbidden},
       {"grad_clip", c.grad_clip},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"shard_size", c.shard_size}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.competing_fraction = j.value("competing_fraction", d.competing_fraction);
  c.window_fraction = j.value("window_fraction", d.window_fraction);
  c.fresh_forbidden = j.value("fresh_forbidden", d.fresh_forbidden);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.shard_size = j.value("shard_size", d.shard_size);
}

// ---- corpus ----

CorpusSampler::CorpusSampler(const FactWorld& world, const TrainConfig& config)
    : world_(&world), config_(config), rng_(config.seed) {
  config.validate();
  for (const auto& f : world.facts) {
    all_.push_back(f.id);
    if (!f.held_out) seen_.push_back(f.id);
  }
  if (all_.empty()) throw InputError("corpus: world has no facts");
}

TrainTarget CorpusSampler::next() {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool competing = unit(rng_) < config_.competing_fraction && !seen_.empty();
  const auto& pool = competing ? seen_ : all_;
  const int fact_id = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng_)];
  const PromptTriple t = make_triple(*world_, fact_id);
  auto pick = [&](const std::vector<int>& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng_)]; };
  int forbidden = t.competing_forbidden;
  if (competing) {
    if (config_.fresh_forbidden) forbidden = pick(t.answer_class);
  } else if (unit(rng_) < 0.5) {
    forbidden = t.relevant_forbidden;
    if (config_.fresh_forbidden) {
      const Fact& f = world_->fact(fact_id);
      std::vector<int> pool;
      for (const auto& cls : world_->classes)
        if (cls.category == f.category && cls.id != f.ranked_classes.front())
          for (int tok : cls.tokens()) pool.push_back(tok);
      if (!pool.empty()) forbidden = pick(pool);
    }
  } else {
    forbidden = t.irrelevant_forbidden;
    if (config_.fresh_forbidden && !world_->fillers.empty()) forbidden = pick(world_->fillers);
  }
  std::vector<int> window;
  if (unit(rng_) < config_.window_fraction && !world_->fillers.empty()) {
    const int filler = world_->fillers[std::uniform_int_distribution<std::size_t>(0, world_->fillers.size() - 1)(rng_)];
    window = {tok::FROM, filler};
  }
  TrainTarget out;
  out.tokens = render_tokens(t.prefix_tokens, forbidden, window);
  out.fact_id = fact_id;
  out.competing = competing;
  const int banned = world_->class_of(forbidden);
  const Fact& f = world_->fact(fact_id);
  out.target = -1;
  for (int cls : f.ranked_classes)
    if (cls != banned) {
      out.target = world_->classes[static_cast<size_t>(cls)].primary;
      break;
    }
  if (out.target < 0) throw ConstructionError("fact " + std::to_string(fact_id) + " has no answer outside the forbidden class");
  return out;
}

std::vector<TrainTarget> build_corpus(const FactWorld& world, const TrainConfig& config, int n) {
  CorpusSampler s(world, config);
  std::vector<TrainTarget> out;
  out.reserve(static_cast<size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out.push_back(s.next());
  return out;
}

// ---- tensors ----

std::vector<TensorView> tensor_views(Weights& w) {
  std::vector<TensorView> v;
  auto add = [&](const std::string& name, auto& m, bool matrix) {
    v.push_back({name, m.data(), static_cast<std::size_t>(m.size()), matrix});
  };
  add("embedding", w.embedding, true);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_gain", L.attn_gain, false);
    add(p + "wq", L.wq, true);
    add(p + "wk", L.wk, true);
    add(p + "wv", L.wv, true);
    add(p + "wo", L.wo, true);
    add(p + "mlp_gain", L.mlp_gain, false);
    add(p + "w_gate", L.w_gate, true);
    add(p + "w_up", L.w_up, true);
    add(p + "w_down", L.w_down, true);
  }
  add("final_gain", w.final_gain, false);
  add("unembedding", w.unembedding, true);
  return v;
}

namespace {

Weights zero_grad(const ModelConfig& c) {
  Weights g = zero_weights(c);
  for (auto& t : tensor_views(g)) std::fill(t.data, t.data + t.size, 0.0);
  return g;
}

void add_into(Weights& acc, Weights& g) {
  auto a = tensor_views(acc);
  auto b = tensor_views(g);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size; ++k) a[i].data[k] += b[i].data[k];
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// Row-wise RMS norm; inv receives 1/rms per row.
Matrix rms_forward(const Matrix& x, const Vector& gain, Vector& inv) {
  const Eigen::Index d = x.cols();
  inv.resize(x.rows());
  Matrix y(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double ss = x.row(r).squaredNorm();
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    y.row(r) = (x.row(r) * inv[r]).cwiseProduct(gain.transpose());
  }
  return y;
}

// Accumulates the gain gradient and returns dx.
Matrix rms_backward(const Matrix& dy, const Matrix& x, const Vector& inv, const Vector& gain, Vector& dgain) {
  const Eigen::Index d = x.cols();
  Matrix dx(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    dgain += (dy.row(r).cwiseProduct(x.row(r)) * inv[r]).transpose();
    const Eigen::RowVectorXd dxh = dy.row(r).cwiseProduct(gain.transpose());
    const double dot = dxh.dot(x.row(r));
    dx.row(r) = inv[r] * dxh - (inv[r] * inv[r] * inv[r] * dot / static_cast<double>(d)) * x.row(r);
  }
  return dx;
}

struct LayerCache {
  Matrix x_in, xn, q, k, v, z, x_mid, xm, gt, u, hid;
  Vector inv_a, inv_m;
  std::vector<Matrix> pattern;  // [b * n_heads + h]
};

// Loss summed (not averaged) over the shard; gradients scaled by 1/total.
double shard_loss_grad(const Weights& w, const std::vector<TrainTarget>& batch, std::size_t begin, std::size_t end,
                       double total, Weights& g) {
  const ModelConfig& c = w.config;
  const int B = static_cast<int>(end - begin);
  const int n = static_cast<int>(batch[begin].tokens.size());
  const int R = B * n;
  const int H = c.n_heads, dh = c.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<int> pos(static_cast<size_t>(R)), neg(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    pos[static_cast<size_t>(r)] = r % n;
    neg[static_cast<size_t>(r)] = -(r % n);
  }

  Matrix x(R, c.d_model);
  for (int b = 0; b < B; ++b) {
    const auto& ex = batch[begin + static_cast<size_t>(b)];
    if (static_cast<int>(ex.tokens.size()) != n) throw InputError("training batch mixes prompt lengths");
    if (n > c.max_seq) throw InputError("training prompt exceeds max_seq");
    for (int i = 0; i < n; ++i) {
      const int t = ex.tokens[static_cast<size_t>(i)];
      if (t < 0 || t >= c.vocab_size) throw InputError("training token out of range");
      x.row(b * n + i) = w.embedding.row(t);
    }
    if (ex.target < 0 || ex.target >= c.vocab_size) throw InputError("training target out of range");
  }

  std::vector<LayerCache> cache(static_cast<size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& L = w.layers[static_cast<size_t>(l)];
    LayerCache& K = cache[static_cast<size_t>(l)];
    K.x_in = x;
    K.xn = rms_forward(x, L.attn_gain, K.inv_a);
    K.q = K.xn * L.wq;
    K.k = K.xn * L.wk;
    K.v = K.xn * L.wv;
    rope_rows(K.q, H, dh, pos);
    rope_rows(K.k, H, dh, pos);
    K.z = Matrix::Zero(R, c.qkv_width());
    K.pattern.resize(static_cast<size_t>(B * H));
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const Matrix qh = K.q.block(b * n, h * dh, n, dh);
        const Matrix kh = K.k.block(b * n, h * dh, n, dh);
        Matrix s = qh * kh.transpose() * scale;
        Matrix a = Matrix::Zero(n, n);
        for (int i = 0; i < n; ++i) {
          const double m = s.row(i).head(i + 1).maxCoeff();
          double sum = 0;
          for (int j = 0; j <= i; ++j) sum += (a(i, j) = std::exp(s(i, j) - m));
          a.row(i).head(i + 1) /= sum;
        }
        K.z.block(b * n, h * dh, n, dh) = a * K.v.block(b * n, h * dh, n, dh);
        K.pattern[static_cast<size_t>(b * H + h)] = std::move(a);
      }
    x += K.z * L.wo;
    K.x_mid = x;
    K.xm = rms_forward(x, L.mlp_gain, K.inv_m);
    K.gt = K.xm * L.w_gate;
    K.u = K.xm * L.w_up;
    K.hid.resize(R, c.d_mlp);
    for (Eigen::Index i = 0; i < K.hid.size(); ++i) K.hid.data()[i] = silu(K.gt.data()[i]) * K.u.data()[i];
    x += K.hid * L.w_down;
  }

  Matrix last(B, c.d_model);
  for (int b = 0; b < B; ++b) last.row(b) = x.row(b * n + n - 1);
  Vector inv_f;
  const Matrix xf = rms_forward(last, w.final_gain, inv_f);
  Matrix logits = xf * w.unembedding;
  double loss = 0;
  Matrix dlogits(B, c.vocab_size);
  for (int b = 0; b < B; ++b) {
    const double m = logits.row(b).maxCoeff();
    double sum = 0;
    for (int j = 0; j < c.vocab_size; ++j) sum += std::exp(logits(b, j) - m);
    const double lse = m + std::log(sum);
    const int target = batch[begin + static_cast<size_t>(b)].target;
    loss += lse - logits(b, target);
    for (int j = 0; j < c.vocab_size; ++j) dlogits(b, j) = std::exp(logits(b, j) - lse) / total;
    dlogits(b, target) -= 1.0 / total;
  }

  g.unembedding += xf.transpose() * dlogits;
  const Matrix dxf = dlogits * w.unembedding.transpose();
  const Matrix dlast = rms_backward(dxf, last, inv_f, w.final_gain, g.final_gain);
  Matrix dx = Matrix::Zero(R, c.d_model);
  for (int b = 0; b < B; ++b) dx.row(b * n + n - 1) = dlast.row(b);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerWeights& L = w.layers[static_cast<size_t>(l)];
    LayerWeights& G = g.layers[static_cast<size_t>(l)];
    const LayerCache& K = cache[static_cast<size_t>(l)];
    // MLP
    G.w_down += K.hid.transpose() * dx;
    const Matrix dhid = dx * L.w_down.transpose();
    Matrix dgt(R, c.d_mlp), du(R, c.d_mlp);
    for (Eigen::Index i = 0; i < dhid.size(); ++i) {
      const double gv = K.gt.data()[i];
      dgt.data()[i] = dhid.data()[i] * K.u.data()[i] * silu_grad(gv);
      du.data()[i] = dhid.data()[i] * silu(gv);
    }
    G.w_gate += K.xm.transpose() * dgt;
    G.w_up += K.xm.transpose() * du;
    const Matrix dxm = dgt * L.w_gate.transpose() + du * L.w_up.transpose();
    dx += rms_backward(dxm, K.x_mid, K.inv_m, L.mlp_gain, G.mlp_gain);
    // attention
    G.wo += K.z.transpose() * dx;
    const Matrix dz = dx * L.wo.transpose();
    Matrix dq = Matrix::Zero(R, c.qkv_width()), dk = Matrix::Zero(R, c.qkv_width()), dv = Matrix::Zero(R, c.qkv_width());
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const Matrix& a = K.pattern[static_cast<size_t>(b * H + h)];
        const Matrix dzh = dz.block(b * n, h * dh, n, dh);
        const Matrix vh = K.v.block(b * n, h * dh, n, dh);
        const Matrix da = dzh * vh.transpose();
        dv.block(b * n, h * dh, n, dh) = a.transpose() * dzh;
        Matrix ds = Matrix::Zero(n, n);
        for (int i = 0; i < n; ++i) {
          double dot = 0;
          for (int j = 0; j <= i; ++j) dot += a(i, j) * da(i, j);
          for (int j = 0; j <= i; ++j) ds(i, j) = a(i, j) * (da(i, j) - dot) * scale;
        }
        dq.block(b * n, h * dh, n, dh) = ds * K.k.block(b * n, h * dh, n, dh);
        dk.block(b * n, h * dh, n, dh) = ds.transpose() * K.q.block(b * n, h * dh, n, dh);
      }
    rope_rows(dq, H, dh, neg);
    rope_rows(dk, H, dh, neg);
    G.wq += K.xn.transpose() * dq;
    G.wk += K.xn.transpose() * dk;
    G.wv += K.xn.transpose() * dv;
    const Matrix dxn = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
    dx += rms_backward(dxn, K.x_in, K.inv_a, L.attn_gain, G.attn_gain);
  }
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      g.embedding.row(batch[begin + static_cast<size_t>(b)].tokens[static_cast<size_t>(i)]) += dx.row(b * n + i);
  return loss;
}

}  // namespace

namespace {

void zero_fill(Weights& g) {
  for (auto& t : tensor_views(g)) std::fill(t.data, t.data + t.size, 0.0);
}

// Shard gradients land in `shards` (reused across calls) and are summed into
// `out` in shard order, so the result does not depend on the thread count.
double accumulate_grad(const Weights& w, const std::vector<TrainTarget>& batch, int shard_size, int threads,
                       std::vector<Weights>& shards, Weights& out) {
  if (batch.empty()) throw InputError("loss_and_grad: empty batch");
  if (shard_size <= 0) throw InputError("loss_and_grad: shard_size must be positive");
  const std::size_t n_shards = (batch.size() + static_cast<size_t>(shard_size) - 1) / static_cast<size_t>(shard_size);
  while (shards.size() < n_shards) shards.push_back(zero_grad(w.config));
  std::vector<double> losses(n_shards, 0.0);
  const double total = static_cast<double>(batch.size());
  parallel_for(
      n_shards,
      [&](std::size_t s) {
        zero_fill(shards[s]);
        const std::size_t begin = s * static_cast<size_t>(shard_size);
        const std::size_t end = std::min(batch.size(), begin + static_cast<size_t>(shard_size));
        losses[s] = shard_loss_grad(w, batch, begin, end, total, shards[s]);
      },
      threads);
  zero_fill(out);
  double loss = 0;
  for (std::size_t s = 0; s < n_shards; ++s) {
    add_into(out, shards[s]);
    loss += losses[s];
  }
  return loss / total;
}

}  // namespace

LossGrad loss_and_grad(const Weights& w, const std::vector<TrainTarget>& batch, int shard_size, int threads) {
  std::vector<Weights> shards;
  LossGrad out;
  out.grad = zero_grad(w.config);
  out.loss = accumulate_grad(w, batch, shard_size, threads, shards, out.grad);
  return out;
}

double reference_loss(const Weights& w, const std::vector<TrainTarget>& batch) {
  if (batch.empty()) throw InputError("reference_loss: empty batch");
  double loss = 0;
  for (const auto& ex : batch) {
    const Vector logits = forward(w, ex.tokens).final_logits;
    loss += log_sum_exp(std::span<const double>(logits.data(), static_cast<size_t>(logits.size()))) - logits[ex.target];
  }
  return loss / static_cast<double>(batch.size());
}

double learning_rate_at(const TrainConfig& c, int step) {
  if (c.warmup_steps > 0 && step < c.warmup_steps)
    return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const int span = std::max(1, c.steps - c.warmup_steps);
  const double progress = std::clamp(static_cast<double>(step - c.warmup_steps) / span, 0.0, 1.0);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainResult train(const ModelBundle& init, const FactWorld& world, const TrainConfig& config, int threads) {
  config.validate();
  const ModelConfig& mc = init.config();
  if (world.vocab_size > mc.vocab_size) throw InputError("world vocabulary exceeds model vocabulary");
  Weights w = init.weights();
  Weights m1 = zero_grad(mc), m2 = zero_grad(mc);
  CorpusSampler sampler(world, config);
  std::vector<LossPoint> curve;
  auto params = tensor_views(w);
  auto mom1 = tensor_views(m1);
  auto mom2 = tensor_views(m2);
  std::vector<Weights> shards;
  Weights grad = zero_grad(mc);
  const auto grads = tensor_views(grad);
  for (int step = 0; step < config.steps; ++step) {
    std::vector<TrainTarget> batch;
    batch.reserve(static_cast<size_t>(config.batch_size));
    for (int i = 0; i < config.batch_size; ++i) batch.push_back(sampler.next());
    const double loss = accumulate_grad(w, batch, config.shard_size, threads, shards, grad);
    double norm2 = 0;
    for (const auto& t : grads)
      for (std::size_t k = 0; k < t.size; ++k) norm2 += t.data[k] * t.data[k];
    const double lr = learning_rate_at(config, step);
    if (!std::isfinite(loss) || !std::isfinite(norm2))
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(loss) +
                            ", gradient norm^2 " + std::to_string(norm2) + ", lr " + std::to_string(lr));
    const double norm = std::sqrt(norm2);
    const double clip = (config.grad_clip > 0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;
    const double t = step + 1;
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double decay = params[i].matrix ? config.weight_decay : 0.0;
      for (std::size_t k = 0; k < params[i].size; ++k) {
        const double gk = grads[i].data[k] * clip;
        double& a = mom1[i].data[k];
        double& b = mom2[i].data[k];
        a = config.beta1 * a + (1.0 - config.beta1) * gk;
        b = config.beta2 * b + (1.0 - config.beta2) * gk * gk;
        double& p = params[i].data[k];
        p -= lr * ((a / c1) / (std::sqrt(b / c2) + config.adam_eps) + decay * p);
      }
    }
    curve.push_back({step, loss, lr});
  }
  nlohmann::json meta = {{"kind", "trained"}, {"train", config}, {"world_seed", world.seed}, {"init", init.metadata()}};
  return {ModelBundle(std::move(w), std::move(meta)), std::move(curve)};
}

void write_loss_csv(std::ostream& os, const std::vector<LossPoint>& curve) {
  os << "step,loss,lr\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", p.step, p.loss, p.lr);
    os << buf;
  }
}

// ---- gradient check ----

namespace {

std::string family_of(const std::string& name) {
  if (name == "embedding") return "embedding";
  if (name == "unembedding") return "unembedding";
  if (name.find("gain") != std::string::npos) return "gains";
  if (name.find(".w_") != std::string::npos) return "mlp";
  return "attention";
}

}  // namespace

std::vector<GradCheckFamily> gradient_check(const Weights& w, const std::vector<TrainTarget>& batch, int per_tensor,
                                            std::uint64_t seed, double h) {
  const LossGrad lg = loss_and_grad(w, batch, 3, 1);
  Weights probe = w;
  Weights analytic = lg.grad;
  auto pv = tensor_views(probe);
  auto av = tensor_views(analytic);
  std::mt19937_64 rng(seed);
  std::vector<GradCheckFamily> fams;
  auto fam = [&](const std::string& f) -> GradCheckFamily& {
    for (auto& x : fams)
      if (x.family == f) return x;
    fams.push_back({f, 0.0, 0});
    return fams.back();
  };
  for (std::size_t i = 0; i < pv.size(); ++i) {
    GradCheckFamily& F = fam(family_of(pv[i].name));
    std::vector<std::size_t> idx;
    if (static_cast<int>(pv[i].size) <= per_tensor) {
      for (std::size_t k = 0; k < pv[i].size; ++k) idx.push_back(k);
    } else {
      // bias the sample towards entries with non-negligible gradient
      std::vector<std::size_t> order(pv[i].size);
      for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t k : order) {
        if (static_cast<int>(idx.size()) >= per_tensor) break;
        if (std::abs(av[i].data[k]) > 1e-7) idx.push_back(k);
      }
    }
    for (std::size_t k : idx) {
      const double orig = pv[i].data[k];
      pv[i].data[k] = orig + h;
      const double up = reference_loss(probe, batch);
      pv[i].data[k] = orig - h;
      const double down = reference_loss(probe, batch);
      pv[i].data[k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = av[i].data[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      F.max_rel_error = std::max(F.max_rel_error, std::abs(a - numeric) / denom);
      ++F.checked;
    }
  }
  return fams;
}

// ---- behaviour ----

namespace {

bool top_in(const Vector& logits, const std::vector<int>& cls) {
  Eigen::Index i = 0;
  logits.maxCoeff(&i);
  return std::find(cls.begin(), cls.end(), static_cast<int>(i)) != cls.end();
}

BehaviorSplit summarize(const std::vector<const TripleBehavior*>& rows) {
  BehaviorSplit s;
  s.n = static_cast<int>(rows.size());
  if (rows.empty()) return s;
  double acc = 0, comp = 0, lbf = 0;
  for (const auto* r : rows) {
    acc += 0.5 * (static_cast<double>(r->relevant_correct) + static_cast<double>(r->irrelevant_correct));
    comp += r->compliant ? 1.0 : 0.0;
    lbf += r->log_bayes_factor;
  }
  s.noncompeting_accuracy = acc / s.n;
  s.compliance = comp / s.n;
  s.mean_log_bayes_factor = lbf / s.n;
  return s;
}

}  // namespace

BehaviorReport evaluate(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads) {
  BehaviorReport rep;
  rep.rows = parallel_map<TripleBehavior>(
      triples.size(),
      [&](std::size_t i) {
        const PromptTriple& t = triples[i];
        const Vector lc = forward(model, t.render(PromptTriple::Kind::Competing)).final_logits;
        const Vector lr = forward(model, t.render(PromptTriple::Kind::Relevant)).final_logits;
        const Vector li = forward(model, t.render(PromptTriple::Kind::Irrelevant)).final_logits;
        TripleBehavior b;
        b.fact_id = t.fact_id;
        b.held_out = t.held_out;
        b.p_competing = class_probability(lc, t.answer_class);
        b.p_relevant = class_probability(lr, t.answer_class);
        b.p_irrelevant = class_probability(li, t.answer_class);
        b.log_bayes_factor = clamped_log_odds(lc, t.answer_class).nats -
                             0.5 * (clamped_log_odds(lr, t.answer_class).nats + clamped_log_odds(li, t.answer_class).nats);
        b.relevant_correct = top_in(lr, t.answer_class);
        b.irrelevant_correct = top_in(li, t.answer_class);
        b.compliant = !top_in(lc, t.answer_class);
        return b;
      },
      threads);
  std::vector<const TripleBehavior*> all, seen, held;
  for (const auto& r : rep.rows) {
    all.push_back(&r);
    (r.held_out ? held : seen).push_back(&r);
  }
  rep.all = summarize(all);
  rep.seen = summarize(seen);
  rep.held_out = summarize(held);
  return rep;
}

}  // namespace fflab
