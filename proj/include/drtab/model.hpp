// Copyright 2026 The drtab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Encoder-decoder for masked feature reconstruction.
//
// Each feature becomes a d-dimensional token: categorical features look up
// an embedding row (vocabulary rows, then UNK, then MASK); continuous
// features use value * scale + shift (+ mask vector when masked). The
// encoder optionally mixes tokens with one single-head self-attention block
// ("attn-lite"), mean-pools them, and applies two residual GELU dense
// layers. The pooled output is the latent z. Every feature has its own
// linear decoder head on z: logits for categorical features, one scalar
// for continuous ones.
//
// Reconstruction loss per row is the sum over all features of the
// cross-entropy (categorical) or squared error (continuous) against the
// uncorrupted values, averaged over rows. Rows whose target category is UNK
// contribute no term for that feature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "drtab/data.hpp"
#include "drtab/error.hpp"
#include "drtab/ndcore.hpp"
#include "drtab/rng.hpp"

namespace drtab {

enum class EncoderVariant { kMlp, kAttnLite };

inline std::string to_string(EncoderVariant v) {
  return v == EncoderVariant::kMlp ? "mlp" : "attn-lite";
}

inline EncoderVariant parse_encoder_variant(const std::string& s) {
  if (s == "mlp") return EncoderVariant::kMlp;
  if (s == "attn-lite") return EncoderVariant::kAttnLite;
  throw ConfigError("unknown encoder variant '" + s + "' (expected mlp or attn-lite)");
}

inline constexpr std::size_t kNoTensor = static_cast<std::size_t>(-1);

// Positions of each role inside ModelParams::tensors. Encoder tensors come
// first, then one (weight, bias) pair per decoder head in model feature order.
struct ModelLayout {
  std::vector<std::size_t> cat_embed;
  std::vector<std::size_t> cont_scale, cont_shift, cont_mask;
  std::size_t attn_q = kNoTensor, attn_k = kNoTensor, attn_v = kNoTensor, attn_o = kNoTensor;
  std::size_t dense1_w = kNoTensor, dense1_b = kNoTensor;
  std::size_t dense2_w = kNoTensor, dense2_b = kNoTensor;
  std::vector<std::size_t> head_w, head_b;
  std::size_t num_encoder_tensors = 0;
};

struct ModelParams {
  std::shared_ptr<const Schema> schema;
  std::size_t d = 0;
  EncoderVariant variant = EncoderVariant::kMlp;
  ParamSet tensors;
  ModelLayout layout;
  // Provenance, persisted with checkpoints.
  double mask_rate = 0.15;
  std::uint64_t seed = 0;

  std::size_t k() const { return schema->k(); }
  std::size_t c() const { return schema->c(); }
  std::size_t num_features() const { return k() + c(); }

  // Output arity of head f.
  std::size_t head_arity(std::size_t f) const {
    return f < k() ? static_cast<std::size_t>(schema->categorical(f).cardinality()) : 1;
  }

  bool is_encoder_tensor(std::size_t t) const { return t < layout.num_encoder_tensors; }

  void set_all_trainable(bool on) {
    for (auto& p : tensors) p.trainable = on;
  }
  void set_encoder_trainable(bool on) {
    for (std::size_t t = 0; t < layout.num_encoder_tensors; ++t) tensors[t].trainable = on;
  }
  void set_head_trainable(std::size_t f, bool on) {
    tensors.at(layout.head_w.at(f)).trainable = on;
    tensors.at(layout.head_b.at(f)).trainable = on;
  }
  bool any_encoder_trainable() const {
    for (std::size_t t = 0; t < layout.num_encoder_tensors; ++t) {
      if (tensors[t].trainable) return true;
    }
    return false;
  }
};

// Builds the tensor list (zero-filled) and layout for a schema.
inline ModelParams build_model_skeleton(std::shared_ptr<const Schema> schema, std::size_t d,
                                        EncoderVariant variant) {
  if (d < 2) throw ConfigError("model dimension d must be >= 2, got " + std::to_string(d));
  ModelParams m;
  m.schema = std::move(schema);
  m.d = d;
  m.variant = variant;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    m.tensors.push_back(ParamTensor::zeros(std::move(name), std::move(shape)));
    return m.tensors.size() - 1;
  };
  const Schema& s = *m.schema;
  for (std::size_t j = 0; j < s.k(); ++j) {
    const auto rows = static_cast<std::size_t>(s.categorical(j).cardinality()) + 2;
    m.layout.cat_embed.push_back(add("embed." + s.categorical(j).name, {rows, d}));
  }
  for (std::size_t l = 0; l < s.c(); ++l) {
    const auto& name = s.continuous(l).name;
    m.layout.cont_scale.push_back(add("embed." + name + ".scale", {d}));
    m.layout.cont_shift.push_back(add("embed." + name + ".shift", {d}));
    m.layout.cont_mask.push_back(add("embed." + name + ".mask", {d}));
  }
  if (variant == EncoderVariant::kAttnLite) {
    m.layout.attn_q = add("encoder.attn.q", {d, d});
    m.layout.attn_k = add("encoder.attn.k", {d, d});
    m.layout.attn_v = add("encoder.attn.v", {d, d});
    m.layout.attn_o = add("encoder.attn.o", {d, d});
  }
  m.layout.dense1_w = add("encoder.dense1.w", {d, d});
  m.layout.dense1_b = add("encoder.dense1.b", {d});
  m.layout.dense2_w = add("encoder.dense2.w", {d, d});
  m.layout.dense2_b = add("encoder.dense2.b", {d});
  m.layout.num_encoder_tensors = m.tensors.size();
  for (std::size_t f = 0; f < s.k() + s.c(); ++f) {
    const auto& name = s.model_feature(f).name;
    const std::size_t arity = f < s.k() ? static_cast<std::size_t>(s.categorical(f).cardinality()) : 1;
    m.layout.head_w.push_back(add("head." + name + ".w", {arity, d}));
    m.layout.head_b.push_back(add("head." + name + ".b", {arity}));
  }
  return m;
}

// Weights ~ U(-1/sqrt(d), 1/sqrt(d)); biases zero. Everything trainable.
inline ModelParams init_model(std::shared_ptr<const Schema> schema, std::size_t d,
                              EncoderVariant variant, std::uint64_t seed) {
  ModelParams m = build_model_skeleton(std::move(schema), d, variant);
  m.seed = seed;
  Rng rng(derive_seed(seed, {0x1417u}));
  const double a = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& p : m.tensors) {
    const bool is_bias = p.shape.size() == 1 && p.name.size() >= 2 &&
                         p.name.compare(p.name.size() - 2, 2, ".b") == 0;
    if (is_bias) continue;
    for (auto& v : p.values) v = rng.uniform(-a, a);
  }
  return m;
}

inline ModelParams init_model(const Schema& schema, std::size_t d, EncoderVariant variant,
                              std::uint64_t seed) {
  return init_model(std::make_shared<const Schema>(schema), d, variant, seed);
}

// ---------------------------------------------------------------------------
// Model inputs and masking

// Encoded rows as the encoder sees them. Categorical entries may hold the
// UNK or MASK index; masked continuous cells carry value 0 and a flag.
struct ModelInput {
  std::size_t n = 0, k = 0, c = 0;
  std::vector<std::int32_t> cat;
  std::vector<double> cont;
  std::vector<std::uint8_t> cont_masked;
  std::vector<std::int64_t> row_ids;
};

inline ModelInput clean_input(const EncodedDataset& ds) {
  return {ds.n, ds.k(), ds.c(), ds.cat, ds.cont, std::vector<std::uint8_t>(ds.n * ds.c(), 0),
          ds.row_ids};
}

struct MaskedBatch {
  ModelInput input;
  std::vector<std::uint8_t> mask;  // n x (k + c), model feature order
  EncodedDataset original;         // reconstruction targets

  std::size_t num_features() const { return input.k + input.c; }
  bool masked(std::size_t i, std::size_t f) const { return mask[i * num_features() + f] != 0; }
};

// Masks each (row, feature) cell independently with probability `rate`.
// A row drawn fully masked is redrawn from the same stream until at least
// one feature is visible.
inline MaskedBatch apply_mask(const EncodedDataset& batch, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("mask rate must be in [0, 1)");
  MaskedBatch mb;
  mb.original = batch;
  mb.input = clean_input(batch);
  const std::size_t k = batch.k(), c = batch.c(), nf = k + c;
  mb.mask.assign(batch.n * nf, 0);
  if (rate == 0.0) return mb;
  Rng rng(derive_seed(seed, {0x3a5cu}));
  const Schema& s = *batch.schema;
  for (std::size_t i = 0; i < batch.n; ++i) {
    std::uint8_t* row = mb.mask.data() + i * nf;
    bool any_visible = false;
    while (!any_visible) {
      for (std::size_t f = 0; f < nf; ++f) {
        row[f] = rng.bernoulli(rate) ? 1 : 0;
        if (!row[f]) any_visible = true;
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (row[j]) mb.input.cat[i * k + j] = s.categorical(j).mask_index();
    }
    for (std::size_t l = 0; l < c; ++l) {
      if (row[k + l]) {
        mb.input.cont[i * c + l] = 0.0;
        mb.input.cont_masked[i * c + l] = 1;
      }
    }
  }
  return mb;
}

// ---------------------------------------------------------------------------
// Forward / backward for one row

namespace detail {

struct RowTrace {
  std::size_t nf = 0, d = 0;
  std::vector<double> tokens;  // nf x d
  std::vector<double> q, kk, v, attn, mixed, tokens2;
  std::vector<double> pooled, pre1, u1, pre2, z;
  // backward scratch
  std::vector<double> dz, du1, dpre, dpooled, dtok2, dtok, dmixed, dattn, dq, dk, dv;

  void resize(std::size_t features, std::size_t dim, bool attn_on) {
    nf = features;
    d = dim;
    tokens.assign(nf * d, 0.0);
    pooled.assign(d, 0.0);
    pre1.assign(d, 0.0);
    u1.assign(d, 0.0);
    pre2.assign(d, 0.0);
    z.assign(d, 0.0);
    dz.assign(d, 0.0);
    du1.assign(d, 0.0);
    dpre.assign(d, 0.0);
    dpooled.assign(d, 0.0);
    dtok2.assign(nf * d, 0.0);
    dtok.assign(nf * d, 0.0);
    if (attn_on) {
      for (auto* buf : {&q, &kk, &v, &mixed, &tokens2, &dmixed, &dq, &dk, &dv}) buf->assign(nf * d, 0.0);
      attn.assign(nf * nf, 0.0);
      dattn.assign(nf * nf, 0.0);
    }
  }
};

inline std::span<const double> tensor(const ModelParams& m, std::size_t t) {
  return m.tensors[t].values;
}

inline void check_input(const ModelParams& m, const ModelInput& in) {
  if (in.k != m.k() || in.c != m.c()) {
    throw DataError("input has " + std::to_string(in.k) + "+" + std::to_string(in.c) +
                    " features, model expects " + std::to_string(m.k()) + "+" +
                    std::to_string(m.c()));
  }
  if (in.cat.size() != in.n * in.k || in.cont.size() != in.n * in.c ||
      in.cont_masked.size() != in.n * in.c) {
    throw DataError("model input blocks disagree on row count");
  }
}

inline void forward_row(const ModelParams& m, const ModelInput& in, std::size_t i, RowTrace& tr) {
  const std::size_t d = m.d, k = m.k(), c = m.c(), nf = k + c;
  const auto& L = m.layout;
  for (std::size_t j = 0; j < k; ++j) {
    const auto idx = in.cat[i * k + j];
    const auto rows = static_cast<std::int32_t>(m.tensors[L.cat_embed[j]].shape[0]);
    if (idx < 0 || idx >= rows) {
      throw DataError("category index " + std::to_string(idx) + " out of range for feature '" +
                      m.schema->categorical(j).name + "'");
    }
    const double* e = m.tensors[L.cat_embed[j]].values.data() + static_cast<std::size_t>(idx) * d;
    std::copy(e, e + d, tr.tokens.begin() + static_cast<std::ptrdiff_t>(j * d));
  }
  for (std::size_t l = 0; l < c; ++l) {
    const double x = in.cont[i * c + l];
    const bool masked = in.cont_masked[i * c + l] != 0;
    auto sc = tensor(m, L.cont_scale[l]);
    auto sh = tensor(m, L.cont_shift[l]);
    auto mk = tensor(m, L.cont_mask[l]);
    double* tok = tr.tokens.data() + (k + l) * d;
    for (std::size_t e = 0; e < d; ++e) tok[e] = x * sc[e] + sh[e] + (masked ? mk[e] : 0.0);
  }

  const double* mixed_tokens = tr.tokens.data();
  if (m.variant == EncoderVariant::kAttnLite) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t f = 0; f < nf; ++f) {
      std::span<const double> t(tr.tokens.data() + f * d, d);
      la::affine(tensor(m, L.attn_q), {}, t, {tr.q.data() + f * d, d});
      la::affine(tensor(m, L.attn_k), {}, t, {tr.kk.data() + f * d, d});
      la::affine(tensor(m, L.attn_v), {}, t, {tr.v.data() + f * d, d});
    }
    for (std::size_t f = 0; f < nf; ++f) {
      double* a = tr.attn.data() + f * nf;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < nf; ++g) {
        a[g] = la::dot({tr.q.data() + f * d, d}, {tr.kk.data() + g * d, d}) * inv_sqrt_d;
        mx = std::max(mx, a[g]);
      }
      double zsum = 0.0;
      for (std::size_t g = 0; g < nf; ++g) {
        a[g] = std::exp(a[g] - mx);
        zsum += a[g];
      }
      for (std::size_t g = 0; g < nf; ++g) a[g] /= zsum;
      double* o = tr.mixed.data() + f * d;
      std::fill(o, o + d, 0.0);
      for (std::size_t g = 0; g < nf; ++g) {
        const double* vg = tr.v.data() + g * d;
        for (std::size_t e = 0; e < d; ++e) o[e] += a[g] * vg[e];
      }
      double* t2 = tr.tokens2.data() + f * d;
      la::affine(tensor(m, L.attn_o), {}, {o, d}, {t2, d});
      for (std::size_t e = 0; e < d; ++e) t2[e] += tr.tokens[f * d + e];
    }
    mixed_tokens = tr.tokens2.data();
  }

  std::fill(tr.pooled.begin(), tr.pooled.end(), 0.0);
  for (std::size_t f = 0; f < nf; ++f) {
    for (std::size_t e = 0; e < d; ++e) tr.pooled[e] += mixed_tokens[f * d + e];
  }
  const double inv_nf = 1.0 / static_cast<double>(nf);
  for (auto& v : tr.pooled) v *= inv_nf;

  la::affine(tensor(m, L.dense1_w), tensor(m, L.dense1_b), tr.pooled, tr.pre1);
  for (std::size_t e = 0; e < d; ++e) tr.u1[e] = tr.pooled[e] + gelu(tr.pre1[e]);
  la::affine(tensor(m, L.dense2_w), tensor(m, L.dense2_b), tr.u1, tr.pre2);
  for (std::size_t e = 0; e < d; ++e) tr.z[e] = tr.u1[e] + gelu(tr.pre2[e]);
}

// Accumulates encoder gradients given tr.dz. Frozen tensors are skipped.
inline void backward_row(const ModelParams& m, const ModelInput& in, std::size_t i, RowTrace& tr,
                         GradSet& g) {
  const std::size_t d = m.d, k = m.k(), c = m.c(), nf = k + c;
  const auto& L = m.layout;
  auto trainable = [&](std::size_t t) { return m.tensors[t].trainable; };

  // z = u1 + gelu(W2 u1 + b2)
  for (std::size_t e = 0; e < d; ++e) tr.dpre[e] = tr.dz[e] * gelu_grad(tr.pre2[e]);
  if (trainable(L.dense2_w)) la::affine_backward_params(tr.dpre, tr.u1, g[L.dense2_w], {});
  if (trainable(L.dense2_b)) {
    for (std::size_t e = 0; e < d; ++e) g[L.dense2_b][e] += tr.dpre[e];
  }
  std::copy(tr.dz.begin(), tr.dz.end(), tr.du1.begin());
  la::affine_backward_input(tensor(m, L.dense2_w), tr.dpre, tr.du1);

  // u1 = pooled + gelu(W1 pooled + b1)
  for (std::size_t e = 0; e < d; ++e) tr.dpre[e] = tr.du1[e] * gelu_grad(tr.pre1[e]);
  if (trainable(L.dense1_w)) la::affine_backward_params(tr.dpre, tr.pooled, g[L.dense1_w], {});
  if (trainable(L.dense1_b)) {
    for (std::size_t e = 0; e < d; ++e) g[L.dense1_b][e] += tr.dpre[e];
  }
  std::copy(tr.du1.begin(), tr.du1.end(), tr.dpooled.begin());
  la::affine_backward_input(tensor(m, L.dense1_w), tr.dpre, tr.dpooled);

  const double inv_nf = 1.0 / static_cast<double>(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    for (std::size_t e = 0; e < d; ++e) tr.dtok2[f * d + e] = tr.dpooled[e] * inv_nf;
  }

  if (m.variant == EncoderVariant::kAttnLite) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    // tokens2 = tokens + Wo * mixed
    std::copy(tr.dtok2.begin(), tr.dtok2.end(), tr.dtok.begin());
    std::fill(tr.dmixed.begin(), tr.dmixed.end(), 0.0);
    for (std::size_t f = 0; f < nf; ++f) {
      std::span<const double> dy(tr.dtok2.data() + f * d, d);
      if (trainable(L.attn_o)) {
        la::affine_backward_params(dy, {tr.mixed.data() + f * d, d}, g[L.attn_o], {});
      }
      la::affine_backward_input(tensor(m, L.attn_o), dy, {tr.dmixed.data() + f * d, d});
    }
    // mixed_f = sum_g attn_fg v_g
    std::fill(tr.dv.begin(), tr.dv.end(), 0.0);
    for (std::size_t f = 0; f < nf; ++f) {
      const double* dm = tr.dmixed.data() + f * d;
      for (std::size_t gi = 0; gi < nf; ++gi) {
        tr.dattn[f * nf + gi] = la::dot({dm, d}, {tr.v.data() + gi * d, d});
        const double a = tr.attn[f * nf + gi];
        double* dvg = tr.dv.data() + gi * d;
        for (std::size_t e = 0; e < d; ++e) dvg[e] += a * dm[e];
      }
    }
    // softmax rows -> scores; scores_fg = q_f . k_g / sqrt(d)
    std::fill(tr.dq.begin(), tr.dq.end(), 0.0);
    std::fill(tr.dk.begin(), tr.dk.end(), 0.0);
    for (std::size_t f = 0; f < nf; ++f) {
      const double* a = tr.attn.data() + f * nf;
      const double* da = tr.dattn.data() + f * nf;
      double inner = 0.0;
      for (std::size_t gi = 0; gi < nf; ++gi) inner += a[gi] * da[gi];
      for (std::size_t gi = 0; gi < nf; ++gi) {
        const double ds = a[gi] * (da[gi] - inner) * inv_sqrt_d;
        if (ds == 0.0) continue;
        const double* qf = tr.q.data() + f * d;
        const double* kg = tr.kk.data() + gi * d;
        double* dqf = tr.dq.data() + f * d;
        double* dkg = tr.dk.data() + gi * d;
        for (std::size_t e = 0; e < d; ++e) {
          dqf[e] += ds * kg[e];
          dkg[e] += ds * qf[e];
        }
      }
    }
    for (std::size_t f = 0; f < nf; ++f) {
      std::span<const double> t(tr.tokens.data() + f * d, d);
      std::span<double> dt(tr.dtok.data() + f * d, d);
      const std::size_t ids[3] = {L.attn_q, L.attn_k, L.attn_v};
      const std::vector<double>* grads[3] = {&tr.dq, &tr.dk, &tr.dv};
      for (int w = 0; w < 3; ++w) {
        std::span<const double> dy(grads[w]->data() + f * d, d);
        if (trainable(ids[w])) la::affine_backward_params(dy, t, g[ids[w]], {});
        la::affine_backward_input(tensor(m, ids[w]), dy, dt);
      }
    }
  } else {
    std::copy(tr.dtok2.begin(), tr.dtok2.end(), tr.dtok.begin());
  }

  for (std::size_t j = 0; j < k; ++j) {
    const auto t = L.cat_embed[j];
    if (!trainable(t)) continue;
    const auto idx = static_cast<std::size_t>(in.cat[i * k + j]);
    double* ge = g[t].data() + idx * d;
    for (std::size_t e = 0; e < d; ++e) ge[e] += tr.dtok[j * d + e];
  }
  for (std::size_t l = 0; l < c; ++l) {
    const double x = in.cont[i * c + l];
    const bool masked = in.cont_masked[i * c + l] != 0;
    const double* dt = tr.dtok.data() + (k + l) * d;
    if (trainable(L.cont_scale[l])) {
      for (std::size_t e = 0; e < d; ++e) g[L.cont_scale[l]][e] += x * dt[e];
    }
    if (trainable(L.cont_shift[l])) {
      for (std::size_t e = 0; e < d; ++e) g[L.cont_shift[l]][e] += dt[e];
    }
    if (masked && trainable(L.cont_mask[l])) {
      for (std::size_t e = 0; e < d; ++e) g[L.cont_mask[l]][e] += dt[e];
    }
  }
}

inline void head_forward(const ModelParams& m, std::size_t f, std::span<const double> z,
                         std::span<double> out) {
  la::affine(tensor(m, m.layout.head_w[f]), tensor(m, m.layout.head_b[f]), z, out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Latents, reconstruction, and the reconstruction loss

struct LatentBatch {
  std::size_t n = 0, d = 0;
  std::vector<double> z;  // n x d
  std::vector<std::int64_t> row_ids;

  std::span<const double> row(std::size_t i) const { return {z.data() + i * d, d}; }
};

inline LatentBatch forward_latent(const ModelParams& m, const ModelInput& in) {
  detail::check_input(m, in);
  LatentBatch out;
  out.n = in.n;
  out.d = m.d;
  out.z.resize(in.n * m.d);
  out.row_ids = in.row_ids;
  detail::RowTrace tr;
  tr.resize(m.num_features(), m.d, m.variant == EncoderVariant::kAttnLite);
  for (std::size_t i = 0; i < in.n; ++i) {
    detail::forward_row(m, in, i, tr);
    std::copy(tr.z.begin(), tr.z.end(), out.z.begin() + static_cast<std::ptrdiff_t>(i * m.d));
  }
  return out;
}

inline LatentBatch forward_latent(const ModelParams& m, const MaskedBatch& b) {
  return forward_latent(m, b.input);
}

inline LatentBatch forward_latent(const ModelParams& m, const EncodedDataset& ds) {
  return forward_latent(m, clean_input(ds));
}

// Head outputs for every row; blocks[f] is n x arity(f).
struct Reconstruction {
  std::size_t n = 0;
  std::vector<std::size_t> arity;
  std::vector<std::vector<double>> blocks;

  std::span<const double> output(std::size_t i, std::size_t f) const {
    return {blocks[f].data() + i * arity[f], arity[f]};
  }
};

inline Reconstruction reconstruct(const ModelParams& m, const LatentBatch& lat) {
  if (lat.d != m.d) {
    throw ConfigError("latent dimension " + std::to_string(lat.d) + " does not match model d=" +
                      std::to_string(m.d));
  }
  Reconstruction r;
  r.n = lat.n;
  for (std::size_t f = 0; f < m.num_features(); ++f) {
    r.arity.push_back(m.head_arity(f));
    r.blocks.emplace_back(lat.n * r.arity.back(), 0.0);
    for (std::size_t i = 0; i < lat.n; ++i) {
      detail::head_forward(m, f, lat.row(i), {r.blocks[f].data() + i * r.arity[f], r.arity[f]});
    }
  }
  return r;
}

struct MlmLoss {
  double total = 0.0;
  std::vector<double> per_feature;             // k + c, sums to total
  std::vector<double> per_sample_per_feature;  // n x (k + c), unweighted, not divided by n
};

// Per-row feature weights for the upweighted objective: every term of
// `feature` in row i is multiplied by row_weight[i]; other terms weigh 1.
struct FeatureRowWeights {
  std::size_t feature = 0;
  std::vector<double> row_weight;
};

namespace detail {

inline void check_alignment(const Reconstruction& out, const EncodedDataset& targets) {
  const std::size_t nf = targets.k() + targets.c();
  if (out.n != targets.n || out.arity.size() != nf) {
    throw DataError("reconstruction outputs and targets are not aligned");
  }
  for (std::size_t j = 0; j < targets.k(); ++j) {
    if (out.arity[j] != static_cast<std::size_t>(targets.schema->categorical(j).cardinality())) {
      throw DataError("head arity does not match cardinality of '" +
                      targets.schema->categorical(j).name + "'");
    }
  }
  for (std::size_t l = 0; l < targets.c(); ++l) {
    if (out.arity[targets.k() + l] != 1) throw DataError("continuous head arity must be 1");
  }
}

}  // namespace detail

// total = (1/N) sum_i w-weighted sum over every feature of CE / squared error.
inline MlmLoss weighted_mlm_loss(const Reconstruction& out, const EncodedDataset& targets,
                                 const FeatureRowWeights* weights) {
  detail::check_alignment(out, targets);
  const std::size_t k = targets.k(), c = targets.c(), nf = k + c, n = targets.n;
  if (weights && (weights->row_weight.size() != n || weights->feature >= nf)) {
    throw DataError("row weights are not aligned with targets");
  }
  MlmLoss r;
  r.per_feature.assign(nf, 0.0);
  r.per_sample_per_feature.assign(n * nf, 0.0);
  std::vector<double> scratch;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < nf; ++f) {
      double term = 0.0;
      if (f < k) {
        const auto target = targets.cat_at(i, f);
        if (target >= static_cast<std::int32_t>(out.arity[f])) continue;  // UNK
        scratch.resize(out.arity[f]);
        term = softmax_cross_entropy_into(out.output(i, f), target, scratch);
      } else {
        const double dlt = out.output(i, f)[0] - targets.cont_at(i, f - k);
        term = dlt * dlt;
      }
      r.per_sample_per_feature[i * nf + f] = term;
      const double w = (weights && weights->feature == f) ? weights->row_weight[i] : 1.0;
      r.per_feature[f] += w * term;
    }
  }
  const double inv_n = n ? 1.0 / static_cast<double>(n) : 0.0;
  for (auto& v : r.per_feature) {
    v *= inv_n;
    r.total += v;
  }
  return r;
}

inline MlmLoss mlm_loss(const Reconstruction& out, const EncodedDataset& targets) {
  return weighted_mlm_loss(out, targets, nullptr);
}

// Fused forward + backward over a batch. Returns the (weighted) loss and,
// when `grads` is non-null, accumulates d(loss)/d(params) into it for
// trainable tensors only.
inline MlmLoss mlm_loss_and_grad(const ModelParams& m, const ModelInput& in,
                                 const EncodedDataset& targets, const FeatureRowWeights* weights,
                                 GradSet* grads) {
  detail::check_input(m, in);
  const std::size_t k = m.k(), c = m.c(), nf = k + c, n = in.n, d = m.d;
  if (targets.n != n || targets.k() != k || targets.c() != c) {
    throw DataError("targets are not aligned with model inputs");
  }
  if (weights && (weights->row_weight.size() != n || weights->feature >= nf)) {
    throw DataError("row weights are not aligned with the batch");
  }
  if (grads && grads->size() != m.tensors.size()) throw ConfigError("gradient set mismatch");
  const bool encoder_grad = grads && m.any_encoder_trainable();
  const double inv_n = n ? 1.0 / static_cast<double>(n) : 0.0;

  MlmLoss r;
  r.per_feature.assign(nf, 0.0);
  r.per_sample_per_feature.assign(n * nf, 0.0);
  detail::RowTrace tr;
  tr.resize(nf, d, m.variant == EncoderVariant::kAttnLite);
  std::vector<double> logits, dlogits;
  for (std::size_t i = 0; i < n; ++i) {
    detail::forward_row(m, in, i, tr);
    std::fill(tr.dz.begin(), tr.dz.end(), 0.0);
    for (std::size_t f = 0; f < nf; ++f) {
      const std::size_t arity = m.head_arity(f);
      logits.resize(arity);
      dlogits.resize(arity);
      detail::head_forward(m, f, tr.z, logits);
      double term = 0.0;
      if (f < k) {
        const auto target = targets.cat_at(i, f);
        if (target >= static_cast<std::int32_t>(arity)) continue;  // UNK
        term = softmax_cross_entropy_into(logits, target, dlogits);
      } else {
        const double dlt = logits[0] - targets.cont_at(i, f - k);
        term = dlt * dlt;
        dlogits[0] = 2.0 * dlt;
      }
      const double w = (weights && weights->feature == f) ? weights->row_weight[i] : 1.0;
      r.per_sample_per_feature[i * nf + f] = term;
      r.per_feature[f] += w * term;
      if (!grads) continue;
      for (auto& gv : dlogits) gv *= w * inv_n;
      const auto hw = m.layout.head_w[f], hb = m.layout.head_b[f];
      if (m.tensors[hw].trainable) la::affine_backward_params(dlogits, tr.z, (*grads)[hw], {});
      if (m.tensors[hb].trainable) {
        for (std::size_t a = 0; a < arity; ++a) (*grads)[hb][a] += dlogits[a];
      }
      if (encoder_grad) la::affine_backward_input(detail::tensor(m, hw), dlogits, tr.dz);
    }
    if (encoder_grad) detail::backward_row(m, in, i, tr, *grads);
  }
  for (auto& v : r.per_feature) {
    v *= inv_n;
    r.total += v;
  }
  return r;
}

// Argmax of head j on clean inputs; ties go to the lowest category.
inline std::vector<std::int32_t> predict_category(const ModelParams& m, const EncodedDataset& ds,
                                                  std::size_t j) {
  if (j >= m.k()) throw ConfigError("feature index " + std::to_string(j) + " is not categorical");
  const auto lat = forward_latent(m, ds);
  const std::size_t arity = m.head_arity(j);
  std::vector<double> logits(arity);
  std::vector<std::int32_t> out(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) {
    detail::head_forward(m, j, lat.row(i), logits);
    std::size_t best = 0;
    for (std::size_t a = 1; a < arity; ++a) {
      if (logits[a] > logits[best]) best = a;
    }
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct FitConfig {
  std::size_t epochs = 35;
  double lr = 0.01;
  std::size_t batch_size = 1024;
  double mask_rate = 0.15;
};

inline void validate(const FitConfig& cfg, const std::string& what) {
  if (cfg.epochs < 1) throw ConfigError(what + ".epochs must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError(what + ".lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError(what + ".batch must be >= 1");
  if (!(cfg.mask_rate >= 0.0 && cfg.mask_rate < 1.0)) {
    throw ConfigError(what + ".mask_rate must be in [0, 1)");
  }
}

// Mini-batch Adam on the masked reconstruction objective. Only trainable
// tensors move. Returns the mean per-row loss of each epoch. Optimizer
// state starts fresh on every call.
inline std::vector<double> fit_reconstruction(ModelParams& m, const EncodedDataset& data,
                                              const FitConfig& cfg, std::uint64_t seed,
                                              const FeatureRowWeights* weights = nullptr) {
  validate(cfg, "fit");
  if (data.n == 0) throw DataError("cannot train on an empty dataset");
  if (data.schema->hash() != m.schema->hash()) {
    throw DataError("dataset schema does not match the model schema");
  }
  if (weights && weights->row_weight.size() != data.n) {
    throw DataError("row weights are not aligned with the training data");
  }
  AdamState opt(AdamConfig{cfg.lr});
  GradSet grads = zero_grads(m.tensors);
  std::vector<double> history;
  std::vector<std::size_t> order(data.n);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < data.n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, {0xe90cu, e}));
    rng.shuffle(std::span(order));
    double epoch_sum = 0.0;
    for (std::size_t start = 0, b = 0; start < data.n; start += cfg.batch_size, ++b) {
      const std::size_t end = std::min(data.n, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto batch = data.subset(idx);
      const auto masked = apply_mask(batch, cfg.mask_rate, derive_seed(seed, {0x3a5cu, e, b}));
      FeatureRowWeights bw;
      if (weights) {
        bw.feature = weights->feature;
        for (auto i : idx) bw.row_weight.push_back(weights->row_weight[i]);
      }
      fill_zero(grads);
      const auto loss = mlm_loss_and_grad(m, masked.input, masked.original,
                                          weights ? &bw : nullptr, &grads);
      if (!std::isfinite(loss.total)) {
        throw NumericError("non-finite reconstruction loss at epoch " + std::to_string(e) +
                           ", batch " + std::to_string(b));
      }
      adam_step(m.tensors, grads, opt);
      epoch_sum += loss.total * static_cast<double>(idx.size());
    }
    history.push_back(epoch_sum / static_cast<double>(data.n));
  }
  return history;
}

struct ModelConfig {
  std::size_t d = 192;
  EncoderVariant variant = EncoderVariant::kMlp;
};

struct PretrainResult {
  ModelParams params;
  std::vector<double> loss_history;
};

// Stage-1 ERM pre-training of every parameter against the reconstruction loss.
inline PretrainResult pretrain_erm(const EncodedDataset& train, const ModelConfig& model,
                                   const FitConfig& fit, std::uint64_t seed) {
  validate(fit, "stage1");
  if (train.n == 0) throw DataError("training split is empty");
  PretrainResult r{init_model(train.schema, model.d, model.variant, seed), {}};
  r.params.mask_rate = fit.mask_rate;
  r.loss_history = fit_reconstruction(r.params, train, fit, derive_seed(seed, {0x57a6e1u}));
  r.params.set_all_trainable(true);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::string checkpoint_hash(const ModelParams& m) {
  return hex64(fnv1a(params_blob(m.tensors)));
}

inline nlohmann::json model_metadata(const ModelParams& m) {
  return {{"kind", "drtab-model"},
          {"schema", m.schema->to_json()},
          {"schema_hash", m.schema->hash()},
          {"encoder_variant", to_string(m.variant)},
          {"d", m.d},
          {"mask_rate", m.mask_rate},
          {"seed", m.seed}};
}

inline void save_model(const std::filesystem::path& stem, const ModelParams& m) {
  save_params(stem, m.tensors, model_metadata(m));
}

inline ModelParams load_model(const std::filesystem::path& stem) {
  auto loaded = load_params(stem);
  const auto& mf = loaded.manifest;
  try {
    if (mf.at("kind") != "drtab-model") throw DataError("'" + stem.string() + "' is not a model");
    auto schema = std::make_shared<const Schema>(Schema::from_json(mf.at("schema")));
    if (schema->hash() != mf.at("schema_hash").get<std::string>()) {
      throw DataError("checkpoint schema hash mismatch");
    }
    ModelParams m = build_model_skeleton(schema, mf.at("d").get<std::size_t>(),
                                         parse_encoder_variant(mf.at("encoder_variant")));
    if (loaded.params.size() != m.tensors.size()) {
      throw DataError("checkpoint tensor count does not match its schema");
    }
    for (std::size_t t = 0; t < m.tensors.size(); ++t) {
      if (loaded.params[t].name != m.tensors[t].name ||
          loaded.params[t].shape != m.tensors[t].shape) {
        throw DataError("checkpoint tensor '" + loaded.params[t].name +
                        "' does not match expected '" + m.tensors[t].name + "'");
      }
    }
    m.tensors = std::move(loaded.params);
    m.mask_rate = mf.at("mask_rate").get<double>();
    m.seed = mf.at("seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model manifest: " + std::string(e.what()));
  }
}

}  // namespace drtab
