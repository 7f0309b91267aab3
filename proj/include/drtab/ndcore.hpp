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

// Small deterministic numerical core: named parameter tensors, dense
// kernels, losses with analytic gradients, Adam, a finite-difference
// gradient checker, and flat binary checkpoints.
//
// All reductions run sequentially over flat arrays so that results are
// bit-reproducible for identical inputs.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "drtab/error.hpp"
#include "drtab/hash.hpp"
#include "drtab/rng.hpp"

namespace drtab {

struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool trainable = true;

  std::size_t size() const { return values.size(); }

  static ParamTensor zeros(std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return {std::move(name), std::move(shape), std::vector<double>(n, 0.0), true};
  }
};

using ParamSet = std::vector<ParamTensor>;
using GradSet = std::vector<std::vector<double>>;

inline GradSet zero_grads(const ParamSet& params) {
  GradSet g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.size(), 0.0);
  return g;
}

inline void fill_zero(GradSet& g) {
  for (auto& v : g) std::fill(v.begin(), v.end(), 0.0);
}

inline std::size_t num_values(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

// ---------------------------------------------------------------------------
// Dense kernels. Matrices are row-major (rows x cols).

namespace la {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// y = W x + b  (W: rows x cols)
inline void affine(std::span<const double> w, std::span<const double> b,
                   std::span<const double> x, std::span<double> y) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < y.size(); ++r) {
    double s = b.empty() ? 0.0 : b[r];
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

// dx += W^T dy
inline void affine_backward_input(std::span<const double> w, std::span<const double> dy,
                                  std::span<double> dx) {
  const std::size_t cols = dx.size();
  for (std::size_t r = 0; r < dy.size(); ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dx[c] += row[c] * g;
  }
}

// dW += dy x^T, db += dy
inline void affine_backward_params(std::span<const double> dy, std::span<const double> x,
                                   std::span<double> dw, std::span<double> db) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < dy.size(); ++r) {
    const double g = dy[r];
    if (!db.empty()) db[r] += g;
    if (g == 0.0) continue;
    double* row = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += g * x[c];
  }
}

}  // namespace la

// tanh-approximated GELU and its derivative.
inline double gelu(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  const double u = kC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  constexpr double kC = 0.7978845608028654;
  const double u = kC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Losses

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Writes d(loss)/d(logits) into `grad` and returns the loss.
inline double softmax_cross_entropy_into(std::span<const double> logits, std::int32_t target,
                                         std::span<double> grad) {
  const auto n = logits.size();
  if (n < 2) throw ConfigError("cross-entropy needs at least 2 classes");
  if (target < 0 || static_cast<std::size_t>(target) >= n) {
    throw ConfigError("cross-entropy target " + std::to_string(target) +
                      " out of range [0, " + std::to_string(n) + ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    grad[i] = std::exp(logits[i] - mx);
    z += grad[i];
  }
  for (std::size_t i = 0; i < n; ++i) grad[i] /= z;
  grad[static_cast<std::size_t>(target)] -= 1.0;
  return std::log(z) - (logits[static_cast<std::size_t>(target)] - mx);
}

inline LossAndGrad softmax_cross_entropy(std::span<const double> logits, std::int32_t target) {
  LossAndGrad out;
  out.grad.assign(logits.size(), 0.0);
  out.loss = softmax_cross_entropy_into(logits, target, out.grad);
  return out;
}

inline LossAndGrad mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ConfigError("mse length mismatch: " + std::to_string(pred.size()) + " vs " +
                      std::to_string(target.size()));
  }
  if (pred.empty()) throw ConfigError("mse on empty vectors");
  LossAndGrad out;
  out.grad.resize(pred.size());
  const double n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    out.loss += d * d;
    out.grad[i] = 2.0 * d / n;
  }
  out.loss /= n;
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  GradSet m;
  GradSet v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

// One bias-corrected Adam update. Non-trainable tensors are never written.
inline void adam_step(ParamSet& params, const GradSet& grads, AdamState& state) {
  if (grads.size() != params.size()) {
    throw ConfigError("adam: " + std::to_string(grads.size()) + " gradients for " +
                      std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size()) {
      throw ConfigError("adam: gradient shape mismatch for '" + params[i].name + "'");
    }
    if (!params[i].trainable) continue;
    for (double g : grads[i]) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient for parameter '" + params[i].name + "'");
      }
    }
  }
  if (state.m.empty()) {
    state.m = zero_grads(params);
    state.v = zero_grads(params);
  } else if (state.m.size() != params.size()) {
    throw ConfigError("adam: optimizer state does not match parameter set");
  }
  state.t += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * g[e];
      v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * g[e] * g[e];
      const double mhat = m[e] / bc1;
      const double vhat = v[e] / bc2;
      p.values[e] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coords = 500;  // subsample above this many coordinates
  std::uint64_t seed = 43;
};

// Max over checked coordinates of |analytic - numeric| / max(1, |numeric|),
// numeric = central difference. Only trainable tensors are checked.
inline double grad_check(const std::function<double(const ParamSet&)>& loss_fn,
                         const ParamSet& params, const GradSet& analytic,
                         const GradCheckOptions& opt = {}) {
  if (!(opt.eps >= 1e-6 && opt.eps <= 1e-2)) {
    throw ConfigError("grad_check eps must be in [1e-6, 1e-2]");
  }
  if (analytic.size() != params.size()) throw ConfigError("grad_check: gradient set mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (analytic[t].size() != params[t].size()) {
      throw ConfigError("grad_check: gradient shape mismatch for '" + params[t].name + "'");
    }
    if (!params[t].trainable) continue;
    for (std::size_t e = 0; e < params[t].size(); ++e) coords.emplace_back(t, e);
  }
  if (coords.size() > opt.max_coords) {
    Rng rng(derive_seed(opt.seed, {0x6c4u}));
    rng.shuffle(std::span(coords));
    coords.resize(opt.max_coords);
  }
  ParamSet work = params;
  double worst = 0.0;
  for (auto [t, e] : coords) {
    const double orig = work[t].values[e];
    work[t].values[e] = orig + opt.eps;
    const double fp = loss_fn(work);
    work[t].values[e] = orig - opt.eps;
    const double fm = loss_fn(work);
    work[t].values[e] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite loss at '" + params[t].name + "'");
    }
    const double numeric = (fp - fm) / (2.0 * opt.eps);
    const double err = std::abs(analytic[t][e] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.bin holds every tensor's values as little-endian
// IEEE-754 doubles, concatenated in tensor order; <stem>.json is the
// manifest of names, shapes, offsets, and trainability.

namespace detail {

inline void put_le64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline double get_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string params_blob(const ParamSet& params) {
  std::string blob;
  blob.reserve(num_values(params) * 8);
  for (const auto& p : params) {
    for (double v : p.values) detail::put_le64(blob, v);
  }
  return blob;
}

inline nlohmann::json params_manifest(const ParamSet& params) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.shape},
                       {"trainable", p.trainable},
                       {"offset", offset},
                       {"count", p.size()}});
    offset += p.size();
  }
  return {{"format", "drtab-params"}, {"version", 1}, {"total", offset}, {"tensors", tensors}};
}

// Writes <stem>.bin and <stem>.json. `extra` is merged into the manifest.
inline void save_params(const std::filesystem::path& stem, const ParamSet& params,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string blob = params_blob(params);
  auto manifest = params_manifest(params);
  manifest["blob_hash"] = hex64(fnv1a(blob));
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();

  auto bin = stem;
  bin += ".bin";
  auto js = stem;
  js += ".json";
  {
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw DataError("cannot write '" + bin.string() + "'");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw DataError("write failed for '" + bin.string() + "'");
  }
  std::ofstream out(js);
  if (!out) throw DataError("cannot write '" + js.string() + "'");
  out << manifest.dump(2) << '\n';
}

struct LoadedParams {
  ParamSet params;
  nlohmann::json manifest;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

inline LoadedParams load_params(const std::filesystem::path& stem) {
  auto bin = stem;
  bin += ".bin";
  auto js = stem;
  js += ".json";
  LoadedParams out;
  out.manifest = read_json_file(js);
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw DataError("cannot open '" + bin.string() + "'");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    if (out.manifest.at("format") != "drtab-params") throw DataError("not a drtab checkpoint");
    const std::size_t total = out.manifest.at("total").get<std::size_t>();
    if (blob.size() != total * 8) {
      throw DataError("checkpoint blob has " + std::to_string(blob.size()) +
                      " bytes, manifest expects " + std::to_string(total * 8));
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    std::size_t expect_offset = 0;
    for (const auto& jt : out.manifest.at("tensors")) {
      ParamTensor p;
      p.name = jt.at("name").get<std::string>();
      p.shape = jt.at("shape").get<std::vector<std::size_t>>();
      p.trainable = jt.at("trainable").get<bool>();
      const auto offset = jt.at("offset").get<std::size_t>();
      const auto count = jt.at("count").get<std::size_t>();
      std::size_t prod = 1;
      for (auto s : p.shape) prod *= s;
      if (prod != count || offset != expect_offset || offset + count > total) {
        throw DataError("checkpoint tensor '" + p.name + "' shape/offset mismatch");
      }
      p.values.resize(count);
      for (std::size_t e = 0; e < count; ++e) {
        p.values[e] = detail::get_le64(bytes + 8 * (offset + e));
      }
      expect_offset += count;
      out.params.push_back(std::move(p));
    }
    if (expect_offset != total) throw DataError("checkpoint manifest does not cover blob");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest '" + js.string() + "': " + e.what());
  }
  return out;
}

}  // namespace drtab
