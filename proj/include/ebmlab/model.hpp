#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmlab/autodiff.hpp"
#include "ebmlab/tensor.hpp"
#include "json.hpp"

namespace ebmlab::models {

enum class Activation { kRelu, kLeakyRelu, kSoftplus, kTanh, kSwish };
enum class HeadKind {
  kEnergy,  // scalar energy E(x)
  kLogits,  // C logits, energy -logsumexp (JEM / classifier)
  kFlow,    // stack of radial transforms, data -> base
  kOutput,  // plain vector output (generators)
};

std::string to_string(Activation a);
std::string to_string(HeadKind h);
Activation activation_from_string(const std::string& s);
HeadKind head_from_string(const std::string& s);

struct ModelSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  Activation activation = Activation::kRelu;
  double leaky_slope = 0.2;
  HeadKind head = HeadKind::kEnergy;
  std::size_t classes = 0;      // kLogits
  std::size_t flow_layers = 0;  // kFlow
  std::size_t output_dim = 0;   // kOutput
  // In (0, 1]. A factor of exactly 1 means no bottleneck layers at all.
  std::optional<double> bottleneck_factor;

  void validate() const;
  bool has_bottleneck() const { return bottleneck_factor && *bottleneck_factor < 1.0; }
  std::size_t bottleneck_width(std::size_t width) const;
  std::size_t output_width() const;

  bool operator==(const ModelSpec&) const = default;
};

// Five hidden layers of width 100 with ReLU, the default tabular network.
ModelSpec default_tabular_spec(std::size_t input_dim, HeadKind head = HeadKind::kEnergy,
                               std::size_t classes = 0);

struct ParamBlock {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
  bool operator==(const ParamBlock&) const = default;
};

struct ParameterSet {
  std::vector<double> values;
  std::vector<ParamBlock> blocks;
  std::uint64_t seed = 0;

  Tensor block(std::size_t i) const;
  std::size_t size() const { return values.size(); }
  bool operator==(const ParameterSet&) const = default;
};

std::vector<ParamBlock> parameter_layout(const ModelSpec& spec);
// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero; radial
// centers standard normal, radial scalars uniform in +-1/sqrt(D).
ParameterSet initialize(const ModelSpec& spec, std::uint64_t seed);
ParameterSet zero_parameters(const ModelSpec& spec);

// Parameters as trace nodes: leaves when trainable, constants otherwise.
std::vector<ad::Var> bind(ad::Trace& trace, const ParameterSet& params, bool trainable);
// Concatenate per-block gradients back into the flat layout.
std::vector<double> flatten(std::span<const Tensor> grads);

// ---- graph-level forward passes ---------------------------------------------

// Head output: Nx1 energy, NxC logits, NxK generator output. Not for flows.
ad::Var forward(ad::Trace& trace, const ModelSpec& spec, std::span<const ad::Var> params,
                ad::Var x);
// Penultimate activations (width of the last hidden layer).
ad::Var features(ad::Trace& trace, const ModelSpec& spec, std::span<const ad::Var> params,
                 ad::Var x);
// Nx1 log N(f(x); 0, I) + sum of log-determinants.
ad::Var flow_logdensity(ad::Trace& trace, const ModelSpec& spec, std::span<const ad::Var> params,
                        ad::Var x);
// Nx1 energies for energy, logits (-logsumexp) and flow (-log density) heads.
ad::Var energy(ad::Trace& trace, const ModelSpec& spec, std::span<const ad::Var> params,
               ad::Var x);

struct Model {
  ModelSpec spec;
  ParameterSet params;

  // Energy with the parameters bound as constants.
  ad::EnergyFn energy_fn() const;
};

// ---- value-level operations -------------------------------------------------

Tensor mlp_energy(const ModelSpec& spec, const ParameterSet& params, const Tensor& x);
Tensor logits(const ModelSpec& spec, const ParameterSet& params, const Tensor& x);
Tensor model_energy(const Model& model, const Tensor& x);
Tensor classifier_embed(const ModelSpec& spec, const ParameterSet& params, const Tensor& x);

double jem_logdensity(std::span<const double> logits);
std::vector<double> jem_class_probs(std::span<const double> logits);

struct RadialLayer {
  std::vector<double> center;
  double alpha_raw = 0.0;
  double beta_raw = 0.0;

  double alpha() const;  // softplus(alpha_raw) > 0
  double beta() const;   // -alpha + softplus(beta_raw) > -alpha
};

struct RadialOutput {
  std::vector<double> y;
  double logdet = 0.0;
};

RadialOutput radial_forward(const RadialLayer& layer, std::span<const double> x);
std::vector<RadialLayer> radial_layers(const ModelSpec& spec, const ParameterSet& params);
// Straight-line evaluation through the stack, data -> base.
double flow_logdensity(std::span<const RadialLayer> layers, std::span<const double> x);
Tensor flow_logdensity(const ModelSpec& spec, const ParameterSet& params, const Tensor& x);

// ---- serialization ------------------------------------------------------------

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

struct Checkpoint {
  static constexpr int kVersion = 1;
  ModelSpec spec;
  ParameterSet params;
  nlohmann::json metadata = nlohmann::json::object();

  Model model() const { return Model{spec, params}; }
};

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ebmlab::models
