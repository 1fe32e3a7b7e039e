#pragma once

// Central finite-difference gradient checks for every differentiable op and
// for the composed stage-2 objective.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "adept/contrastive.hpp"
#include "adept/optim.hpp"
#include "adept/pipeline.hpp"
#include "adept/tensor.hpp"

namespace adept::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;

/// ||a - n|| / max(||a|| + ||n||, 1e-6).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-6);
}

using ScalarFn = std::function<Tensor()>;

/// Worst per-tensor relative error between backward() and central differences
/// of f with respect to each of `inputs`. With max_coords > 0 only that many
/// coordinates per tensor (chosen by rng) are probed.
inline double check_function(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = kStep,
                             std::size_t max_coords = 0, Rng* rng = nullptr) {
  for (auto t : inputs) t.zero_grad();
  backward(f());
  double worst = 0.0;
  for (auto t : inputs) {
    std::vector<std::size_t> coords;
    if (max_coords == 0 || max_coords >= t.numel() || !rng) {
      for (std::size_t i = 0; i < t.numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng->uniform_int(t.numel()));
    }
    std::vector<double> analytic, numeric;
    for (std::size_t i : coords) {
      analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
      double& x = t.data()[i];
      const double orig = x;
      double fp, fm;
      {
        NoGradGuard ng;
        x = orig + h;
        fp = f().item();
        x = orig - h;
        fm = f().item();
      }
      x = orig;
      numeric.push_back((fp - fm) / (2.0 * h));
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  for (auto t : inputs) t.zero_grad();
  return worst;
}

struct SuiteResult {
  std::string op;
  std::size_t instances = 0;
  double worst = 0.0;
  bool passed() const { return instances > 0 && worst < kTolerance; }
};

/// One suite: builds and checks a fresh random instance per call.
struct Suite {
  std::string op;
  std::function<double(Rng&)> instance;
};

namespace detail {

inline Tensor rand_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::from(std::move(s), std::move(v), true);
}

inline std::size_t rand_dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.uniform_int(hi - lo + 1));
}

/// Scalar probe of a non-scalar output: sum(out * r) with fixed random r.
inline Tensor contract(const Tensor& out, const std::vector<double>& r) { return weighted_sum(out, r); }

inline std::vector<double> rand_weights(std::size_t n, Rng& rng) {
  std::vector<double> r(n);
  for (auto& x : r) x = rng.normal();
  return r;
}

/// Checks f(inputs) contracted against a random weight vector sized on first use.
inline double check_contracted(const std::function<Tensor()>& op, const std::vector<Tensor>& inputs, Rng& rng) {
  Tensor probe;
  {
    NoGradGuard ng;
    probe = op();
  }
  const auto r = rand_weights(probe.numel(), rng);
  return check_function([&] { return contract(op(), r); }, inputs);
}

}  // namespace detail

/// Square op whose backward rule is scaled wrong by 10%; used as a negative control.
inline Tensor corrupted_square(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return adept::detail::make_result(x.shape(), std::move(out), "corrupted_square", {x}, [](Node& self) {
    if (double* g = adept::detail::grad_of(*self.parents[0])) {
      const auto& xv = self.parents[0]->data;
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[i] * 2.2 * xv[i];
    }
  });
}

inline std::vector<Suite> op_suites() {
  using detail::check_contracted;
  using detail::rand_dim;
  using detail::rand_tensor;
  std::vector<Suite> s;
  auto two = [](Rng& rng) { return Shape{rand_dim(rng, 1, 4), rand_dim(rng, 1, 5)}; };

  s.push_back({"add", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto a = rand_tensor(sh, rng), b = rand_tensor(sh, rng);
                 return check_contracted([&] { return add(a, b); }, {a, b}, rng);
               }});
  s.push_back({"sub", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto a = rand_tensor(sh, rng), b = rand_tensor(sh, rng);
                 return check_contracted([&] { return sub(a, b); }, {a, b}, rng);
               }});
  s.push_back({"mul", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto a = rand_tensor(sh, rng), b = rand_tensor(sh, rng);
                 return check_contracted([&] { return mul(a, b); }, {a, b}, rng);
               }});
  s.push_back({"scale", [two](Rng& rng) {
                 auto a = rand_tensor(two(rng), rng);
                 const double c = rng.normal(0.0, 2.0);
                 return check_contracted([&] { return scale(a, c); }, {a}, rng);
               }});
  s.push_back({"add_bias", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto x = rand_tensor(sh, rng), b = rand_tensor({sh[1]}, rng);
                 return check_contracted([&] { return add_bias(x, b); }, {x, b}, rng);
               }});
  s.push_back({"relu", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 // keep inputs away from the kink so the difference quotient is exact
                 for (auto& v : x.data()) v = (v < 0 ? -1.0 : 1.0) * (0.05 + std::abs(v));
                 return check_contracted([&] { return relu(x); }, {x}, rng);
               }});
  s.push_back({"gelu", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng, 2.0);
                 return check_contracted([&] { return gelu(x); }, {x}, rng);
               }});
  s.push_back({"matmul", [](Rng& rng) {
                 const std::size_t m = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 5), n = rand_dim(rng, 1, 4);
                 auto a = rand_tensor({m, k}, rng), b = rand_tensor({k, n}, rng);
                 return check_contracted([&] { return matmul(a, b); }, {a, b}, rng);
               }});
  s.push_back({"transpose", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 return check_contracted([&] { return transpose(x); }, {x}, rng);
               }});
  s.push_back({"reshape", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto x = rand_tensor(sh, rng);
                 return check_contracted([&] { return reshape(x, {sh[0] * sh[1], 1}); }, {x}, rng);
               }});
  s.push_back({"concat", [](Rng& rng) {
                 const std::size_t axis = rng.uniform_int(2);
                 const std::size_t m = rand_dim(rng, 1, 3), n = rand_dim(rng, 1, 3), e = rand_dim(rng, 1, 3);
                 auto a = rand_tensor({m, n}, rng);
                 auto b = rand_tensor(axis == 0 ? Shape{e, n} : Shape{m, e}, rng);
                 return check_contracted([&] { return concat({a, b}, axis); }, {a, b}, rng);
               }});
  s.push_back({"embedding", [](Rng& rng) {
                 const std::size_t v = rand_dim(rng, 2, 6), d = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 6);
                 auto table = rand_tensor({v, d}, rng);
                 std::vector<int> idx(n);
                 for (auto& i : idx) i = static_cast<int>(rng.uniform_int(v));
                 return check_contracted([&] { return embedding(table, idx); }, {table}, rng);
               }});
  s.push_back({"sum", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 return check_function([&] { return sum(x); }, {x});
               }});
  s.push_back({"mean", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 return check_function([&] { return mean(x); }, {x});
               }});
  s.push_back({"mean_rows", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 return check_contracted([&] { return mean_rows(x); }, {x}, rng);
               }});
  s.push_back({"logsumexp", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng, 3.0);
                 return check_function([&] { return logsumexp(x); }, {x});
               }});
  s.push_back({"softmax", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng, 2.0);
                 const std::size_t axis = rng.uniform_int(2);
                 return check_contracted([&] { return softmax(x, axis); }, {x}, rng);
               }});
  s.push_back({"layer_norm", [](Rng& rng) {
                 const std::size_t m = rand_dim(rng, 1, 4), n = rand_dim(rng, 2, 6);
                 auto x = rand_tensor({m, n}, rng, 2.0), g = rand_tensor({n}, rng), b = rand_tensor({n}, rng);
                 return check_contracted([&] { return layer_norm(x, g, b); }, {x, g, b}, rng);
               }});
  s.push_back({"l2_normalize", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 return check_contracted([&] { return l2_normalize(x); }, {x}, rng);
               }});
  s.push_back({"attention", [](Rng& rng) {
                 const std::size_t heads = rand_dim(rng, 1, 2), dh = rand_dim(rng, 1, 3);
                 const std::size_t nq = rand_dim(rng, 1, 4), nk = rand_dim(rng, 1, 4), d = heads * dh;
                 auto q = rand_tensor({nq, d}, rng), k = rand_tensor({nk, d}, rng), v = rand_tensor({nk, d}, rng);
                 return check_contracted([&] { return attention(q, k, v, heads); }, {q, k, v}, rng);
               }});
  s.push_back({"l1_loss", [two](Rng& rng) {
                 const Shape sh = two(rng);
                 auto p = rand_tensor(sh, rng), t = rand_tensor(sh, rng);
                 // separate the pair so no element sits within h of a tie
                 for (std::size_t i = 0; i < p.numel(); ++i) {
                   if (std::abs(p.data()[i] - t.data()[i]) < 1e-2) p.data()[i] += 0.1;
                 }
                 return check_function([&] { return l1_loss(p, t); }, {p, t});
               }});
  s.push_back({"kl_div_onehot", [](Rng& rng) {
                 const std::size_t m = rand_dim(rng, 1, 3), n = rand_dim(rng, 2, 7);
                 auto z = rand_tensor({m, n}, rng, 2.0);
                 std::vector<int> tgt(m);
                 for (auto& t : tgt) t = static_cast<int>(rng.uniform_int(n));
                 return check_contracted([&] { return kl_div_onehot_rows(z, tgt); }, {z}, rng);
               }});
  s.push_back({"weighted_sum", [two](Rng& rng) {
                 auto x = rand_tensor(two(rng), rng);
                 const auto w = detail::rand_weights(x.numel(), rng);
                 return check_function([&] { return weighted_sum(x, w); }, {x});
               }});
  s.push_back({"info_nce", [](Rng& rng) {
                 const std::size_t d = rand_dim(rng, 2, 6), sz = rand_dim(rng, 1, 5);
                 auto raw = rand_tensor({1, d}, rng);
                 Tensor kpos, negs;
                 {
                   NoGradGuard ng;
                   kpos = l2_normalize(rand_tensor({1, d}, rng)).detach();
                   negs = l2_normalize(rand_tensor({sz, d}, rng)).detach();
                 }
                 const double tau = rng.uniform(0.1, 1.0);
                 const bool with_pos = rng.bernoulli(0.5);
                 return check_function([&] { return info_nce(l2_normalize(raw), kpos, negs, tau, with_pos); }, {raw});
               }});
  s.push_back({"sgd_step", [two](Rng& rng) {
                 // One momentum-free step on sum(w*x^2)/2 must move x by exactly lr * (finite-difference gradient).
                 auto x = rand_tensor(two(rng), rng);
                 const auto w = detail::rand_weights(x.numel(), rng);
                 auto loss = [&] { return scale(weighted_sum(mul(x, x), w), 0.5); };
                 std::vector<double> numeric(x.numel());
                 for (std::size_t i = 0; i < x.numel(); ++i) {
                   NoGradGuard ng;
                   double& v = x.data()[i];
                   const double o = v;
                   v = o + kStep;
                   const double fp = loss().item();
                   v = o - kStep;
                   const double fm = loss().item();
                   v = o;
                   numeric[i] = (fp - fm) / (2 * kStep);
                 }
                 const std::vector<double> before(x.data().begin(), x.data().end());
                 SgdMomentum opt({{"x", x}}, 0.0);
                 backward(loss());
                 const double lr = 0.1;
                 opt.step(lr);
                 std::vector<double> moved(x.numel());
                 for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = (before[i] - x.data()[i]) / lr;
                 return relative_error(moved, numeric);
               }});
  return s;
}

/// Tiny model configuration used for the composed objective check.
inline TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.encoder.embed_dim = 8;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.grid_h = c.encoder.grid_w = 2;
  c.encoder.patch = 4;
  c.encoder.proj_dim = 4;
  c.encoder.keypoint_bin_px = 4;
  c.batch_size = 2;
  c.queue_capacity = 4;
  c.seed = seed;
  return c;
}

/// Stage-2 total loss (contrastive + both denoising terms) of a tiny model;
/// every trainable parameter tensor is probed at `coords` sampled positions.
/// The noise draws are recorded once and replayed for every evaluation.
inline double check_composed(std::uint64_t seed, std::size_t coords = 2) {
  const TrainConfig cfg = tiny_config(seed);
  SyntheticDatasetConfig dc;
  dc.num_samples = 4;
  dc.scene = {cfg.encoder.view_w(), cfg.encoder.patch};
  dc.seed = derive_seed(seed, 77);
  SyntheticDataset data(dc);
  AdeptModel model(cfg.encoder, cfg.simcc_k, cfg.momentum, seed);
  Trainer trainer(model, data, cfg);
  const std::vector<std::size_t> batch = {0, 1};
  NoiseTape tape;
  {
    NoGradGuard ng;
    trainer.compute_losses(batch, 2, 1);  // fills the queue
    tape.record();
    trainer.compute_losses(batch, 2, 1, &tape);
  }
  auto f = [&] {
    tape.replay();
    return trainer.compute_losses(batch, 2, 1, &tape).total;
  };
  std::vector<Tensor> params;
  for (const auto& p : model.trainable()) params.push_back(p.tensor);
  Rng rng(derive_seed(seed, 0xc0));
  return check_function(f, params, kStep, coords, &rng);
}

/// FNV-1a, so suite streams do not depend on the standard library's hash.
inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Runs every suite (`filter` is a substring match on the op name; empty = all).
inline std::vector<SuiteResult> run_all(std::uint64_t seed, const std::string& filter = "",
                                        std::size_t instances = 20, bool include_fault = false) {
  std::vector<Suite> suites = op_suites();
  suites.push_back({"stage2_objective", [](Rng& rng) { return check_composed(rng.next_u64()); }});
  if (include_fault) {
    suites.push_back({"corrupted_square", [](Rng& rng) {
                        auto x = detail::rand_tensor({3}, rng);
                        return check_function([&] { return sum(corrupted_square(x)); }, {x});
                      }});
  }
  std::vector<SuiteResult> out;
  for (const auto& s : suites) {
    if (!filter.empty() && s.op.find(filter) == std::string::npos) continue;
    Rng rng(derive_seed(seed, name_hash(s.op)));
    SuiteResult r{s.op, 0, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
      r.worst = std::max(r.worst, s.instance(rng));
      ++r.instances;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace adept::gradcheck
