// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/rng.hpp"
#include "brt/tensor.hpp"

namespace brt {

// ---------------------------------------------------------------------------
// Parameter initialisation
// ---------------------------------------------------------------------------

struct InitSpec {
  enum class Kind { kZeros, kUniform, kNormal };
  Kind kind = Kind::kZeros;
  double a = 0.0;  // uniform lo / normal mean
  double b = 0.0;  // uniform hi / normal std

  static InitSpec zeros() { return {}; }
  static InitSpec uniform(double lo, double hi) { return {Kind::kUniform, lo, hi}; }
  static InitSpec normal(double mean, double std) { return {Kind::kNormal, mean, std}; }

  std::string str() const {
    char buf[64];
    switch (kind) {
      case Kind::kZeros:
        return "zeros";
      case Kind::kUniform:
        std::snprintf(buf, sizeof(buf), "uniform(%.17g,%.17g)", a, b);
        return buf;
      case Kind::kNormal:
        std::snprintf(buf, sizeof(buf), "normal(%.17g,%.17g)", a, b);
        return buf;
    }
    return "zeros";
  }

  static InitSpec parse(const std::string& s) {
    if (s == "zeros") return zeros();
    double x = 0, y = 0;
    if (std::sscanf(s.c_str(), "uniform(%lg,%lg)", &x, &y) == 2) return uniform(x, y);
    if (std::sscanf(s.c_str(), "normal(%lg,%lg)", &x, &y) == 2) return normal(x, y);
    throw ParseError("init_spec: cannot parse '" + s + "'");
  }
};

struct Parameter {
  std::string name;
  Tensor tensor;
  InitSpec init;
  bool weight_decay = true;  // optimizer applies decoupled decay only when set
};

/// Named parameter store. Values are a pure function of (init_spec, name,
/// seed): the per-parameter stream is derived from the name, so construction
/// order never matters and two registries with equal seeds are bit-identical.
class ParameterRegistry {
 public:
  explicit ParameterRegistry(uint64_t seed) : seed_(seed) {}

  Tensor create(const std::string& name, Shape shape, InitSpec init, bool weight_decay = true) {
    if (params_.count(name)) throw ConfigError("parameter '" + name + "' already registered");
    Tensor t = Tensor::from_data(shape, init_values(init, name, shape_numel(shape)));
    t.set_requires_grad(true);
    params_.emplace(name, Parameter{name, t, init, weight_decay});
    return t;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Parameter& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("parameter '" + name + "' not registered");
    return it->second;
  }

  const std::map<std::string, Parameter>& all() const { return params_; }
  std::map<std::string, Parameter>& all() { return params_; }
  uint64_t seed() const { return seed_; }
  size_t size() const { return params_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [k, p] : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [k, p] : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<double> init_values(InitSpec init, const std::string& name, int64_t n) const {
    std::vector<double> v(static_cast<size_t>(n), 0.0);
    if (init.kind == InitSpec::Kind::kZeros) return v;
    Rng rng(mix_seed(seed_, fnv1a64(name)));
    for (double& x : v)
      x = init.kind == InitSpec::Kind::kUniform ? rng.uniform(init.a, init.b)
                                                : rng.normal(init.a, init.b);
    return v;
  }

  uint64_t seed_;
  std::map<std::string, Parameter> params_;
};

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

enum class Activation { kNone, kRelu, kGelu };

inline Activation activation_from_str(const std::string& s) {
  if (s == "none") return Activation::kNone;
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw ParseError("activation: unknown '" + s + "'");
}

struct MlpLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  Activation act = Activation::kNone;
};

inline Tensor apply_activation(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kNone:
      return x;
    case Activation::kRelu:
      return relu(x);
    case Activation::kGelu:
      return gelu(x);
  }
  return x;
}

/// Sequential affine+activation chain; x is [N, in].
inline Tensor mlp_forward(const Tensor& x, const std::vector<MlpLayer>& layers) {
  Tensor h = x;
  for (const MlpLayer& l : layers)
    h = apply_activation(add_rowvec(matmul(h, l.weight), l.bias), l.act);
  return h;
}

/// Convenience wrapper registering its parameters as "<prefix>.<i>.{w,b}".
class Mlp {
 public:
  Mlp() = default;

  /// Sentinel for init_std: scale each layer as 1/sqrt(fan_in).
  static constexpr double kFanInStd = -1.0;

  /// dims = {in, h1, ..., out}. Hidden layers use `act`; the final layer uses
  /// kNone. final_zero zero-initialises the last layer so the whole MLP is
  /// exactly the zero map at initialisation.
  static Mlp create(ParameterRegistry& reg, const std::string& prefix,
                    const std::vector<int64_t>& dims, Activation act, bool final_zero = false,
                    double init_std = 0.02) {
    Mlp m;
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = i + 2 == dims.size();
      const double std =
          init_std == kFanInStd ? 1.0 / std::sqrt(static_cast<double>(dims[i])) : init_std;
      InitSpec winit = (last && final_zero) ? InitSpec::zeros() : InitSpec::normal(0.0, std);
      MlpLayer layer;
      layer.weight = reg.create(prefix + "." + std::to_string(i) + ".w", {dims[i], dims[i + 1]},
                                winit, /*weight_decay=*/true);
      layer.bias = reg.create(prefix + "." + std::to_string(i) + ".b", {dims[i + 1]},
                              InitSpec::zeros(), /*weight_decay=*/false);
      layer.act = last ? Activation::kNone : act;
      m.layers_.push_back(layer);
    }
    return m;
  }

  Tensor forward(const Tensor& x) const { return mlp_forward(x, layers_); }
  const std::vector<MlpLayer>& layers() const { return layers_; }

 private:
  std::vector<MlpLayer> layers_;
};

/// Layer normalisation with registered gain/bias.
class LayerNorm {
 public:
  LayerNorm() = default;
  static LayerNorm create(ParameterRegistry& reg, const std::string& prefix, int64_t dim) {
    LayerNorm ln;
    ln.gamma_ = reg.create(prefix + ".gamma", {dim}, InitSpec::uniform(1.0, 1.0),
                           /*weight_decay=*/false);
    ln.beta_ = reg.create(prefix + ".beta", {dim}, InitSpec::zeros(), /*weight_decay=*/false);
    return ln;
  }
  Tensor forward(const Tensor& x) const { return layernorm(x, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
};

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
};

/// Central-difference check of a scalar objective against the analytic
/// gradients produced by backward(). The relative error denominator is
/// max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  std::vector<Parameter*> params, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("grad_check: h must lie in [1e-7, 1e-3]");
  for (Parameter* p : params) p->tensor.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite objective");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->tensor.grad());

  const auto eval = [&f]() {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective");
    return v;
  };

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi]->tensor.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = eval();
      values[i] = orig - h;
      const double fm = eval();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[pi]->name;
        report.worst_index = static_cast<int64_t>(i);
      }
    }
  }
  return report;
}

inline std::vector<Parameter*> all_parameters(ParameterRegistry& reg) {
  std::vector<Parameter*> out;
  for (auto& [k, p] : reg.all()) out.push_back(&p);
  return out;
}

/// Overwrites every parameter with fan-in-scaled noise (gains keep mean 1).
/// Puts the model at a generic point where all computation paths carry
/// signal, which is what gradient stress-tests want; zero-initialised layers
/// stay zero only at the default init, not here.
inline void randomize_parameters(ParameterRegistry& reg, uint64_t seed) {
  for (auto& [name, p] : reg.all()) {
    Rng rng(mix_seed(seed, fnv1a64(name)));
    auto& values = p.tensor.mutable_data();
    const auto& shape = p.tensor.shape();
    const double std = shape.size() == 2 ? 1.0 / std::sqrt(static_cast<double>(shape[0])) : 0.1;
    const bool is_gain = name.size() >= 5 && name.rfind(".gamma") == name.size() - 6;
    for (double& x : values) x = is_gain ? rng.normal(1.0, 0.2) : rng.normal(0.0, std);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
//
// <prefix>.bin holds the concatenated little-endian f64 arrays in sorted
// parameter-name order; <prefix>.json maps each name to (offset, shape,
// init_spec, seed) plus whatever extra metadata the caller attaches.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f64_le(std::ostream& os, double x) {
  uint64_t bits;
  std::memcpy(&bits, &x, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint: unexpected end of data file");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

}  // namespace detail

inline void save_checkpoint(const ParameterRegistry& reg, const std::string& prefix,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string bin_path = prefix + ".bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open '" + bin_path + "' for writing");
  nlohmann::json manifest = extra;
  manifest["format_version"] = 1;
  manifest["data_file"] = std::filesystem::path(bin_path).filename().string();
  nlohmann::json params = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, p] : reg.all()) {
    for (double x : p.tensor.data()) detail::write_f64_le(bin, x);
    params[name] = {{"offset", offset},
                    {"shape", p.tensor.shape()},
                    {"init_spec", p.init.str()},
                    {"seed", reg.seed()}};
    offset += static_cast<uint64_t>(p.tensor.numel()) * 8;
  }
  bin.close();
  if (!bin) throw IoError("failed writing '" + bin_path + "'");
  manifest["params"] = std::move(params);
  std::ofstream js(prefix + ".json");
  if (!js) throw IoError("cannot open '" + prefix + ".json' for writing");
  js << manifest.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_manifest(const std::string& prefix) {
  std::ifstream js(prefix + ".json");
  if (!js) throw IoError("cannot open '" + prefix + ".json'");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  return manifest;
}

/// Loads values into an already-built registry; every parameter must match
/// the manifest entry shape exactly.
inline void load_checkpoint(ParameterRegistry& reg, const std::string& prefix) {
  const nlohmann::json manifest = read_checkpoint_manifest(prefix);
  if (!manifest.contains("params")) throw ParseError("checkpoint manifest: missing 'params'");
  const auto& params = manifest["params"];
  const std::string bin_path =
      (std::filesystem::path(prefix).parent_path() / manifest.value("data_file", "")).string();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open '" + bin_path + "'");
  for (auto& [name, p] : reg.all()) {
    if (!params.contains(name))
      throw LoadError("checkpoint: parameter '" + name + "' missing from manifest");
    const auto& entry = params.at(name);
    const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    if (shape != p.tensor.shape())
      throw LoadError("checkpoint: parameter '" + name + "' shape " +
                      shape_str(shape) + " does not match registry shape " +
                      shape_str(p.tensor.shape()));
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    for (double& x : p.tensor.mutable_data()) x = detail::read_f64_le(bin);
  }
  for (auto it = params.begin(); it != params.end(); ++it)
    if (!reg.contains(it.key()))
      throw LoadError("checkpoint: parameter '" + it.key() + "' not present in model");
}

}  // namespace brt
