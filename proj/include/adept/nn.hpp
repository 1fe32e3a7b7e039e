#pragma once

// Parameterized building blocks shared by the encoders and decoders.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "adept/rng.hpp"
#include "adept/tensor.hpp"

namespace adept::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// Copies values (not handles) from src into dst; names and shapes must match.
inline void copy_values(const ParamList& src, ParamList& dst) {
  if (src.size() != dst.size()) throw ContractError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ContractError("copy_values: shape mismatch for " + src[i].name + ": " +
                          shape_str(src[i].tensor.shape()) + " vs " +
                          shape_str(dst[i].tensor.shape()));
    }
    auto s = src[i].tensor.data();
    auto d = dst[i].tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

inline void append(ParamList& out, const std::string& prefix, const ParamList& inner) {
  for (const auto& p : inner) out.push_back({prefix + "." + p.name, p.tensor});
}

/// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));  // Glorot
    weight = init_uniform({in, out}, bound, rng);
    bias = Tensor::zeros({out}, true);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  ParamList parameters() const { return {{"weight", weight}, {"bias", bias}}; }

  void zero_() {
    for (auto& v : weight.data()) v = 0.0;
    for (auto& v : bias.data()) v = 0.0;
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gamma(Tensor::full({d}, 1.0, true)), beta(Tensor::zeros({d}, true)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  ParamList parameters() const { return {{"gamma", gamma}, {"beta", beta}}; }
};

/// Multi-head attention with separate query and key/value sources.
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t n_heads, Rng& rng)
      : q_proj(d, d, rng), k_proj(d, d, rng), v_proj(d, d, rng), out_proj(d, d, rng),
        heads(n_heads) {
    if (n_heads == 0 || d % n_heads != 0) {
      throw ContractError("MultiHeadAttention: width " + std::to_string(d) +
                          " not divisible by " + std::to_string(n_heads) + " heads");
    }
  }

  Tensor operator()(const Tensor& query, const Tensor& memory) const {
    return out_proj(attention(q_proj(query), k_proj(memory), v_proj(memory), heads));
  }

  ParamList parameters() const {
    ParamList p;
    append(p, "q", q_proj.parameters());
    append(p, "k", k_proj.parameters());
    append(p, "v", v_proj.parameters());
    append(p, "out", out_proj.parameters());
    return p;
  }
};

/// d -> hidden -> d with GELU.
struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  ParamList parameters() const {
    ParamList p;
    append(p, "fc1", fc1.parameters());
    append(p, "fc2", fc2.parameters());
    return p;
  }
};

/// Pre-norm transformer encoder block.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ff;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, Rng& rng)
      : ln1(d), ln2(d), attn(d, heads, rng), ff(d, 4 * d, rng) {}

  Tensor operator()(const Tensor& x) const {
    const Tensor h = ln1(x);
    const Tensor y = add(x, attn(h, h));
    return add(y, ff(ln2(y)));
  }

  /// Zeroes both residual branches so the block becomes the identity.
  void zero_residual_() {
    attn.out_proj.zero_();
    ff.fc2.zero_();
  }

  ParamList parameters() const {
    ParamList p;
    append(p, "ln1", ln1.parameters());
    append(p, "attn", attn.parameters());
    append(p, "ln2", ln2.parameters());
    append(p, "ff", ff.parameters());
    return p;
  }
};

}  // namespace adept::nn
