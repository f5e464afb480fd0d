#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "concept_lattice/tensor.hpp"

namespace concept_lattice {

/// `custom` lifts the profile size constraints (used for tiny test networks).
enum class Profile { paper, desk, custom };

Profile parse_profile(const std::string& name);
std::string to_string(Profile profile);

struct GeneratorConfig {
  std::size_t input_size = 16;
  std::size_t channels = 1;
  std::size_t base_filters = 8;
  std::size_t n_residual_blocks = 2;
  Profile profile = Profile::desk;

  static GeneratorConfig paper();
  static GeneratorConfig desk();

  /// Throws std::invalid_argument when the profile's constraints are broken.
  void validate() const;
};

struct DiscriminatorConfig {
  std::size_t input_size = 16;
  std::size_t channels = 1;
  std::size_t base_filters = 8;
  Profile profile = Profile::desk;

  static DiscriminatorConfig paper();
  static DiscriminatorConfig desk();

  void validate() const;

  /// Stride-2 4x4 convolutions down to a 4x4 map, then one 4x4 valid
  /// convolution: 5 layers at 64x64, 3 at 16x16.
  std::size_t n_layers() const;
};

struct NamedParameter {
  std::string path;
  Tensor value;
};

using ParameterList = std::vector<NamedParameter>;

/// Encoder / residual / decoder image-to-image mapping:
/// conv s2, conv s2, N x residual block, fracconv s1/2, fracconv s1/2 -> tanh.
/// Hidden layers use instance norm and ReLU.
class Generator {
public:
  Generator(GeneratorConfig cfg, std::string name, std::uint64_t seed);

  Tensor operator()(const Tensor& images) const;

  const GeneratorConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  /// Human-readable layer order, e.g. {"conv s2", ..., "fracconv s1/2"}.
  std::vector<std::string> layer_sequence() const;

private:
  const Tensor& param(std::size_t i) const { return params_[i].value; }

  GeneratorConfig cfg_;
  std::string name_;
  ParameterList params_;
};

/// Image -> one probability in (0,1) per image ([batch]).
class Discriminator {
public:
  Discriminator(DiscriminatorConfig cfg, std::string name, std::uint64_t seed);

  /// With `track_params == false` the parameters enter the graph as
  /// constants, so no gradient reaches them.
  Tensor operator()(const Tensor& images, bool track_params = true) const;
  /// Pre-sigmoid scores.
  Tensor logits(const Tensor& images, bool track_params = true) const;

  const DiscriminatorConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

private:
  DiscriminatorConfig cfg_;
  std::string name_;
  ParameterList params_;
};

Generator build_generator(const GeneratorConfig& cfg, std::uint64_t seed, const std::string& name = "G");
Discriminator build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed,
                                  const std::string& name = "D");

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 2e-4;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// One bias-corrected Adam update over `params`, then clears their grads.
/// Every parameter must carry a gradient; otherwise nothing is modified and
/// std::invalid_argument names the first offender.
void adam_step(AdamState& state, ParameterList& params, double lr);

struct LrSchedule {
  double base_lr = 2e-4;
  std::size_t constant_epochs = 150;
  std::size_t decay_epochs = 150;
};

/// Constant for the first `constant_epochs`, then linear decay reaching 0
/// at constant_epochs + decay_epochs.
double lr_at(const LrSchedule& schedule, std::size_t epoch);

}  // namespace concept_lattice
