#include "ebmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ebmlab/error.hpp"
#include "ebmlab/io.hpp"
#include "ebmlab/rng.hpp"

namespace ebmlab::models {

using ad::Var;
using nlohmann::json;

namespace {

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Var activate(const ModelSpec& spec, Var x) {
  switch (spec.activation) {
    case Activation::kRelu:
      return ad::relu(x);
    case Activation::kLeakyRelu:
      return ad::leaky_relu(x, spec.leaky_slope);
    case Activation::kSoftplus:
      return ad::softplus(x);
    case Activation::kTanh:
      return ad::tanh(x);
    case Activation::kSwish:
      return ad::mul(x, ad::sigmoid(x));
  }
  throw ContractError("unknown activation");
}

void check_input(const ModelSpec& spec, Var x) {
  if (x.shape().size() != 2 || x.shape()[1] != spec.input_dim) {
    throw ContractError("input of shape " + shape_string(x.shape()) + " does not match input_dim " +
                        std::to_string(spec.input_dim));
  }
}

void check_params(const ModelSpec& spec, std::span<const Var> params) {
  const std::size_t expected = spec.head == HeadKind::kFlow
                                   ? 3 * spec.flow_layers
                                   : spec.hidden.size() * (spec.has_bottleneck() ? 6 : 2) + 2;
  if (params.size() != expected) {
    throw ContractError("parameter block count does not match the model spec");
  }
}

// Runs the hidden stack; returns the penultimate activations and the index of
// the next unused parameter block.
std::pair<Var, std::size_t> hidden_stack(const ModelSpec& spec, std::span<const Var> p, Var x) {
  std::size_t k = 0;
  Var h = x;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    h = activate(spec, ad::add(ad::matmul(h, p[k]), p[k + 1]));
    k += 2;
    if (spec.has_bottleneck()) {
      h = activate(spec, ad::add(ad::matmul(h, p[k]), p[k + 1]));
      h = ad::add(ad::matmul(h, p[k + 2]), p[k + 3]);
      k += 4;
    }
  }
  return {h, k};
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kTanh: return "tanh";
    case Activation::kSwish: return "swish";
  }
  return "?";
}

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::kEnergy: return "energy";
    case HeadKind::kLogits: return "logits";
    case HeadKind::kFlow: return "flow";
    case HeadKind::kOutput: return "output";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  for (auto a : {Activation::kRelu, Activation::kLeakyRelu, Activation::kSoftplus,
                 Activation::kTanh, Activation::kSwish}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown activation '" + s + "'");
}

HeadKind head_from_string(const std::string& s) {
  for (auto h : {HeadKind::kEnergy, HeadKind::kLogits, HeadKind::kFlow, HeadKind::kOutput}) {
    if (to_string(h) == s) return h;
  }
  throw ConfigError("unknown head '" + s + "'");
}

void ModelSpec::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  for (auto w : hidden) {
    if (w < 1) throw ConfigError("hidden widths must be >= 1");
  }
  if (bottleneck_factor) {
    const double f = *bottleneck_factor;
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("bottleneck_factor must lie in (0, 1]");
  }
  switch (head) {
    case HeadKind::kLogits:
      if (classes < 2) throw ConfigError("logits head requires at least 2 classes");
      break;
    case HeadKind::kFlow:
      if (flow_layers < 1) throw ConfigError("flow head requires at least one radial layer");
      break;
    case HeadKind::kOutput:
      if (output_dim < 1) throw ConfigError("output head requires output_dim >= 1");
      break;
    case HeadKind::kEnergy:
      break;
  }
}

std::size_t ModelSpec::bottleneck_width(std::size_t width) const {
  const double f = bottleneck_factor.value_or(1.0);
  // Guard against 0.2 * 100 = 20.000000000000004 rounding up to 21.
  const double scaled = f * static_cast<double>(width);
  const auto w = static_cast<std::size_t>(std::ceil(scaled - 1e-9));
  return std::max<std::size_t>(w, 1);
}

std::size_t ModelSpec::output_width() const {
  switch (head) {
    case HeadKind::kEnergy: return 1;
    case HeadKind::kLogits: return classes;
    case HeadKind::kOutput: return output_dim;
    case HeadKind::kFlow: return input_dim;
  }
  return 0;
}

ModelSpec default_tabular_spec(std::size_t input_dim, HeadKind head, std::size_t classes) {
  ModelSpec s;
  s.input_dim = input_dim;
  s.hidden = {100, 100, 100, 100, 100};
  s.head = head;
  s.classes = classes;
  return s;
}

Tensor ParameterSet::block(std::size_t i) const {
  const auto& b = blocks.at(i);
  return Tensor({b.rows, b.cols},
                std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(b.offset),
                                    values.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size())));
}

std::vector<ParamBlock> parameter_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<ParamBlock> blocks;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t r, std::size_t c) {
    blocks.push_back(ParamBlock{std::move(name), r, c, offset});
    offset += r * c;
  };
  if (spec.head == HeadKind::kFlow) {
    for (std::size_t k = 0; k < spec.flow_layers; ++k) {
      const auto p = "radial" + std::to_string(k);
      add(p + ".center", 1, spec.input_dim);
      add(p + ".alpha", 1, 1);
      add(p + ".beta", 1, 1);
    }
    return blocks;
  }
  std::size_t prev = spec.input_dim;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    const auto p = "layer" + std::to_string(i);
    const auto w = spec.hidden[i];
    add(p + ".weight", prev, w);
    add(p + ".bias", 1, w);
    if (spec.has_bottleneck()) {
      const auto b = spec.bottleneck_width(w);
      add(p + ".down.weight", w, b);
      add(p + ".down.bias", 1, b);
      add(p + ".up.weight", b, w);
      add(p + ".up.bias", 1, w);
    }
    prev = w;
  }
  add("head.weight", prev, spec.output_width());
  add("head.bias", 1, spec.output_width());
  return blocks;
}

ParameterSet zero_parameters(const ModelSpec& spec) {
  ParameterSet p;
  p.blocks = parameter_layout(spec);
  std::size_t n = 0;
  for (const auto& b : p.blocks) n += b.size();
  p.values.assign(n, 0.0);
  return p;
}

ParameterSet initialize(const ModelSpec& spec, std::uint64_t seed) {
  ParameterSet p = zero_parameters(spec);
  p.seed = seed;
  Rng rng = make_stream(seed, Stream::kInit);
  const double radial_bound = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
  for (const auto& b : p.blocks) {
    auto* dst = p.values.data() + b.offset;
    if (b.name.ends_with(".weight")) {
      const double bound = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
      for (std::size_t i = 0; i < b.size(); ++i) dst[i] = uniform(rng, -bound, bound);
    } else if (b.name.ends_with(".center")) {
      for (std::size_t i = 0; i < b.size(); ++i) dst[i] = normal(rng);
    } else if (b.name.ends_with(".alpha") || b.name.ends_with(".beta")) {
      dst[0] = uniform(rng, -radial_bound, radial_bound);
    }
  }
  return p;
}

std::vector<Var> bind(ad::Trace& trace, const ParameterSet& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.blocks.size());
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    vars.push_back(trainable ? trace.leaf(params.block(i)) : trace.constant(params.block(i)));
  }
  return vars;
}

std::vector<double> flatten(std::span<const Tensor> grads) {
  std::vector<double> out;
  for (const auto& g : grads) out.insert(out.end(), g.values().begin(), g.values().end());
  return out;
}

Var forward(ad::Trace& trace, const ModelSpec& spec, std::span<const Var> params, Var x) {
  (void)trace;
  if (spec.head == HeadKind::kFlow) throw ContractError("forward() is not defined for flow heads");
  check_input(spec, x);
  check_params(spec, params);
  auto [h, k] = hidden_stack(spec, params, x);
  return ad::add(ad::matmul(h, params[k]), params[k + 1]);
}

Var features(ad::Trace& trace, const ModelSpec& spec, std::span<const Var> params, Var x) {
  (void)trace;
  if (spec.head == HeadKind::kFlow) throw ContractError("features() is not defined for flow heads");
  check_input(spec, x);
  check_params(spec, params);
  return hidden_stack(spec, params, x).first;
}

Var flow_logdensity(ad::Trace& trace, const ModelSpec& spec, std::span<const Var> params, Var x) {
  if (spec.head != HeadKind::kFlow) throw ContractError("flow_logdensity needs a flow head");
  check_input(spec, x);
  check_params(spec, params);
  const auto d = static_cast<double>(spec.input_dim);
  const auto n = x.shape()[0];
  Var z = x;
  Var total_logdet = trace.constant(Tensor({n, 1}));
  for (std::size_t k = 0; k < spec.flow_layers; ++k) {
    const Var center = params[3 * k];
    const Var alpha = ad::softplus(params[3 * k + 1]);
    const Var beta = ad::sub(ad::softplus(params[3 * k + 2]), alpha);
    const Var diff = ad::sub(z, center);
    const Var r = ad::sqrt(ad::sum_rows(ad::square(diff)));
    const Var h = ad::recip(ad::add(alpha, r));
    const Var bh = ad::mul(beta, h);
    z = ad::add(z, ad::mul(bh, diff));
    // 1 + beta h + beta h' r with h' = -h^2
    const Var radial_term = ad::sub(ad::add_scalar(bh, 1.0), ad::mul(ad::mul(bh, h), r));
    Var logdet = ad::log(radial_term);
    if (spec.input_dim > 1) logdet = ad::add(logdet, ad::scale(ad::log(ad::add_scalar(bh, 1.0)), d - 1.0));
    total_logdet = ad::add(total_logdet, logdet);
  }
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi);
  const Var base = ad::add_scalar(ad::scale(ad::sum_rows(ad::square(z)), -0.5), log_norm);
  return ad::add(base, total_logdet);
}

Var energy(ad::Trace& trace, const ModelSpec& spec, std::span<const Var> params, Var x) {
  switch (spec.head) {
    case HeadKind::kEnergy:
      return forward(trace, spec, params, x);
    case HeadKind::kLogits:
      return ad::neg(ad::logsumexp_rows(forward(trace, spec, params, x)));
    case HeadKind::kFlow:
      return ad::neg(flow_logdensity(trace, spec, params, x));
    case HeadKind::kOutput:
      break;
  }
  throw ContractError("output heads do not define an energy");
}

ad::EnergyFn Model::energy_fn() const {
  return [spec = spec, params = params](ad::Trace& t, Var x) {
    auto p = bind(t, params, false);
    return energy(t, spec, p, x);
  };
}

Tensor mlp_energy(const ModelSpec& spec, const ParameterSet& params, const Tensor& x) {
  if (spec.head != HeadKind::kEnergy) throw ContractError("mlp_energy needs a scalar-energy head");
  ad::Trace t(1);
  auto p = bind(t, params, false);
  return forward(t, spec, p, t.constant(x)).value();
}

Tensor logits(const ModelSpec& spec, const ParameterSet& params, const Tensor& x) {
  if (spec.head != HeadKind::kLogits && spec.head != HeadKind::kOutput) {
    throw ContractError("logits needs a logits or output head");
  }
  ad::Trace t(1);
  auto p = bind(t, params, false);
  return forward(t, spec, p, t.constant(x)).value();
}

Tensor model_energy(const Model& model, const Tensor& x) {
  ad::Trace t(1);
  auto p = bind(t, model.params, false);
  return energy(t, model.spec, p, t.constant(x)).value();
}

Tensor classifier_embed(const ModelSpec& spec, const ParameterSet& params, const Tensor& x) {
  if (spec.head != HeadKind::kLogits) {
    throw ContractError("classifier_embed is only supported for logits heads, got " +
                        to_string(spec.head));
  }
  if (spec.hidden.empty()) throw ContractError("classifier_embed needs at least one hidden layer");
  ad::Trace t(1);
  auto p = bind(t, params, false);
  return features(t, spec, p, t.constant(x)).value();
}

double jem_logdensity(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("jem_logdensity of an empty logit vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - m);
  return m + std::log(s);
}

std::vector<double> jem_class_probs(std::span<const double> logits) {
  const double lse = jem_logdensity(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

double RadialLayer::alpha() const { return softplus_value(alpha_raw); }
double RadialLayer::beta() const { return -alpha() + softplus_value(beta_raw); }

RadialOutput radial_forward(const RadialLayer& layer, std::span<const double> x) {
  if (x.size() != layer.center.size()) throw ContractError("radial_forward: dimension mismatch");
  const double a = layer.alpha(), b = layer.beta();
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) r2 += (x[i] - layer.center[i]) * (x[i] - layer.center[i]);
  const double r = std::sqrt(r2);
  const double h = 1.0 / (a + r);
  const double dh = -1.0 / ((a + r) * (a + r));
  RadialOutput out;
  out.y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.y[i] = x[i] + b * h * (x[i] - layer.center[i]);
  const auto d = static_cast<double>(x.size());
  out.logdet = (d - 1.0) * std::log1p(b * h) + std::log1p(b * h + b * dh * r);
  return out;
}

std::vector<RadialLayer> radial_layers(const ModelSpec& spec, const ParameterSet& params) {
  if (spec.head != HeadKind::kFlow) throw ContractError("radial_layers needs a flow head");
  std::vector<RadialLayer> layers(spec.flow_layers);
  for (std::size_t k = 0; k < spec.flow_layers; ++k) {
    layers[k].center = params.block(3 * k).values();
    layers[k].alpha_raw = params.block(3 * k + 1).item();
    layers[k].beta_raw = params.block(3 * k + 2).item();
  }
  return layers;
}

double flow_logdensity(std::span<const RadialLayer> layers, std::span<const double> x) {
  std::vector<double> z(x.begin(), x.end());
  double logdet = 0.0;
  for (const auto& l : layers) {
    auto out = radial_forward(l, z);
    z = std::move(out.y);
    logdet += out.logdet;
  }
  double sq = 0.0;
  for (double v : z) sq += v * v;
  const auto d = static_cast<double>(z.size());
  return -0.5 * sq - 0.5 * d * std::log(2.0 * std::numbers::pi) + logdet;
}

Tensor flow_logdensity(const ModelSpec& spec, const ParameterSet& params, const Tensor& x) {
  ad::Trace t(1);
  auto p = bind(t, params, false);
  return flow_logdensity(t, spec, p, t.constant(x)).value();
}

// ---- serialization ------------------------------------------------------------

json to_json(const ModelSpec& spec) {
  json j;
  j["input_dim"] = spec.input_dim;
  j["hidden"] = spec.hidden;
  j["activation"] = to_string(spec.activation);
  j["leaky_slope"] = spec.leaky_slope;
  j["head"] = to_string(spec.head);
  j["classes"] = spec.classes;
  j["flow_layers"] = spec.flow_layers;
  j["output_dim"] = spec.output_dim;
  j["bottleneck_factor"] = spec.bottleneck_factor ? json(*spec.bottleneck_factor) : json(nullptr);
  return j;
}

ModelSpec spec_from_json(const json& j) {
  static const char* kKeys[] = {"input_dim", "hidden",      "activation", "leaky_slope",
                                "head",      "classes",     "flow_layers", "output_dim",
                                "bottleneck_factor"};
  if (!j.is_object()) throw ConfigError("model spec must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) { return key == k; }) ==
        std::end(kKeys)) {
      throw ConfigError("unknown model spec key '" + key + "'");
    }
  }
  ModelSpec s;
  try {
    s.input_dim = j.at("input_dim").get<std::size_t>();
    if (j.contains("hidden")) s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    if (j.contains("activation")) s.activation = activation_from_string(j.at("activation"));
    if (j.contains("leaky_slope")) s.leaky_slope = j.at("leaky_slope").get<double>();
    if (j.contains("head")) s.head = head_from_string(j.at("head"));
    if (j.contains("classes")) s.classes = j.at("classes").get<std::size_t>();
    if (j.contains("flow_layers")) s.flow_layers = j.at("flow_layers").get<std::size_t>();
    if (j.contains("output_dim")) s.output_dim = j.at("output_dim").get<std::size_t>();
    if (j.contains("bottleneck_factor") && !j.at("bottleneck_factor").is_null()) {
      s.bottleneck_factor = j.at("bottleneck_factor").get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model spec: ") + e.what());
  }
  s.validate();
  return s;
}

json to_json(const Checkpoint& ckpt) {
  json j;
  j["format"] = "ebmlab-checkpoint";
  j["version"] = Checkpoint::kVersion;
  j["spec"] = to_json(ckpt.spec);
  j["seed"] = ckpt.params.seed;
  j["parameters"] = ckpt.params.values;
  j["metadata"] = ckpt.metadata;
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != "ebmlab-checkpoint") {
    throw DataError("not an ebmlab checkpoint");
  }
  if (j.value("version", -1) != Checkpoint::kVersion) {
    throw DataError("checkpoint version " + j.value("version", json(nullptr)).dump() +
                    " is not supported (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint c;
  c.spec = spec_from_json(j.at("spec"));
  c.params = zero_parameters(c.spec);
  c.params.seed = j.at("seed").get<std::uint64_t>();
  auto values = j.at("parameters").get<std::vector<double>>();
  if (values.size() != c.params.values.size()) {
    throw DataError("checkpoint holds " + std::to_string(values.size()) + " parameters, spec needs " +
                    std::to_string(c.params.values.size()));
  }
  c.params.values = std::move(values);
  if (j.contains("metadata")) c.metadata = j.at("metadata");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  io::write_text_atomic(path, to_json(ckpt).dump(1) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw DataError("cannot parse checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ebmlab::models
