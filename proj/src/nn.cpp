#include "concept_lattice/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>

namespace concept_lattice {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLeakySlope = 0.2;
constexpr std::size_t kDownKernel = 4;
constexpr std::size_t kResKernel = 3;
constexpr std::size_t kUpKernel = 4;
constexpr std::size_t kUpPadding = 2;

class ParamFactory {
public:
  ParamFactory(std::string prefix, std::uint64_t seed, ParameterList& out)
      : prefix_(std::move(prefix)), rng_(seed), out_(out) {}

  void conv(const std::string& layer, std::size_t out_ch, std::size_t in_ch, std::size_t k) {
    std::normal_distribution<double> dist(0.0, kInitStd);
    std::vector<double> w(out_ch * in_ch * k * k);
    for (double& v : w) v = dist(rng_);
    out_.push_back({prefix_ + "/" + layer + "/weight", Tensor({out_ch, in_ch, k, k}, std::move(w), true)});
    out_.push_back({prefix_ + "/" + layer + "/bias", Tensor::zeros({out_ch}, true)});
  }

private:
  std::string prefix_;
  std::mt19937_64 rng_;
  ParameterList& out_;
};

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

void require_image(const char* who, const Tensor& x, std::size_t channels, std::size_t size) {
  if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != size || x.dim(3) != size) {
    throw ShapeError(std::string(who) + ": expected [batch, " + std::to_string(channels) + ", " +
                     std::to_string(size) + ", " + std::to_string(size) + "], got " +
                     shape_string(x.shape()));
  }
}

}  // namespace

Profile parse_profile(const std::string& name) {
  if (name == "paper") return Profile::paper;
  if (name == "desk") return Profile::desk;
  if (name == "custom") return Profile::custom;
  throw std::invalid_argument("unknown profile '" + name + "' (expected desk, paper or custom)");
}

std::string to_string(Profile profile) {
  switch (profile) {
    case Profile::paper: return "paper";
    case Profile::desk: return "desk";
    case Profile::custom: break;
  }
  return "custom";
}

GeneratorConfig GeneratorConfig::paper() { return {64, 3, 64, 6, Profile::paper}; }
GeneratorConfig GeneratorConfig::desk() { return {16, 1, 8, 2, Profile::desk}; }

void GeneratorConfig::validate() const {
  if (input_size == 0 || input_size % 4 != 0) {
    throw std::invalid_argument("generator: input_size " + std::to_string(input_size) +
                                " is not divisible by 4");
  }
  if (channels == 0 || base_filters == 0) throw std::invalid_argument("generator: zero channels or filters");
  if (profile == Profile::paper) {
    if (input_size != 64 || n_residual_blocks != 6) {
      throw std::invalid_argument("generator: paper profile requires input_size 64 and 6 residual blocks");
    }
  } else if (profile == Profile::desk) {
    if ((input_size != 16 && input_size != 32) || n_residual_blocks < 2 || n_residual_blocks > 6) {
      throw std::invalid_argument("generator: desk profile requires input_size in {16, 32} and 2..6 residual blocks");
    }
  }
}

DiscriminatorConfig DiscriminatorConfig::paper() { return {64, 3, 64, Profile::paper}; }
DiscriminatorConfig DiscriminatorConfig::desk() { return {16, 1, 8, Profile::desk}; }

void DiscriminatorConfig::validate() const {
  if (input_size < 4 || !is_power_of_two(input_size)) {
    throw std::invalid_argument("discriminator: input_size must be a power of two >= 4");
  }
  if (channels == 0 || base_filters == 0) throw std::invalid_argument("discriminator: zero channels or filters");
  if (profile == Profile::paper && input_size != 64) {
    throw std::invalid_argument("discriminator: paper profile takes 64x64 input");
  }
  if (profile == Profile::desk && input_size != 16 && input_size != 32) {
    throw std::invalid_argument("discriminator: desk profile takes 16x16 or 32x32 input");
  }
}

std::size_t DiscriminatorConfig::n_layers() const {
  std::size_t layers = 1;
  for (std::size_t s = input_size; s > 4; s /= 2) ++layers;
  return layers;
}

Generator::Generator(GeneratorConfig cfg, std::string name, std::uint64_t seed)
    : cfg_(cfg), name_(std::move(name)) {
  cfg_.validate();
  const std::size_t f = cfg_.base_filters;
  ParamFactory make(name_, seed, params_);
  make.conv("down0", f, cfg_.channels, kDownKernel);
  make.conv("down1", 2 * f, f, kDownKernel);
  for (std::size_t r = 0; r < cfg_.n_residual_blocks; ++r) {
    make.conv("res" + std::to_string(r) + "a", 2 * f, 2 * f, kResKernel);
    make.conv("res" + std::to_string(r) + "b", 2 * f, 2 * f, kResKernel);
  }
  make.conv("up0", f, 2 * f, kUpKernel);
  make.conv("up1", cfg_.channels, f, kUpKernel);
}

Tensor Generator::operator()(const Tensor& images) const {
  require_image("generator", images, cfg_.channels, cfg_.input_size);
  std::size_t i = 0;
  auto next_conv = [&](const Tensor& x, std::size_t stride, std::size_t pad) {
    Tensor y = conv2d(x, param(i), param(i + 1), stride, pad);
    i += 2;
    return y;
  };
  Tensor h = relu(instance_norm(next_conv(images, 2, 1)));
  h = relu(instance_norm(next_conv(h, 2, 1)));
  for (std::size_t r = 0; r < cfg_.n_residual_blocks; ++r) {
    Tensor t = relu(instance_norm(next_conv(h, 1, 1)));
    t = instance_norm(next_conv(t, 1, 1));
    h = h + t;
  }
  h = relu(instance_norm(fractional_conv2d(h, param(i), param(i + 1), 2, kUpPadding)));
  i += 2;
  return tanh(fractional_conv2d(h, param(i), param(i + 1), 2, kUpPadding));
}

std::vector<std::string> Generator::layer_sequence() const {
  std::vector<std::string> seq{"conv s2", "conv s2"};
  for (std::size_t r = 0; r < cfg_.n_residual_blocks; ++r) seq.emplace_back("resblock");
  seq.emplace_back("fracconv s1/2");
  seq.emplace_back("fracconv s1/2");
  return seq;
}

Discriminator::Discriminator(DiscriminatorConfig cfg, std::string name, std::uint64_t seed)
    : cfg_(cfg), name_(std::move(name)) {
  cfg_.validate();
  ParamFactory make(name_, seed, params_);
  std::size_t in_ch = cfg_.channels;
  std::size_t out_ch = cfg_.base_filters;
  const std::size_t strided = cfg_.n_layers() - 1;
  for (std::size_t l = 0; l < strided; ++l) {
    make.conv("conv" + std::to_string(l), out_ch, in_ch, 4);
    in_ch = out_ch;
    out_ch *= 2;
  }
  make.conv("conv" + std::to_string(strided), 1, in_ch, 4);
}

Tensor Discriminator::operator()(const Tensor& images, bool track_params) const {
  return sigmoid(logits(images, track_params));
}

Tensor Discriminator::logits(const Tensor& images, bool track_params) const {
  require_image("discriminator", images, cfg_.channels, cfg_.input_size);
  auto p = [&](std::size_t i) { return track_params ? params_[i].value : params_[i].value.detach(); };
  const std::size_t strided = cfg_.n_layers() - 1;
  Tensor h = images;
  for (std::size_t l = 0; l < strided; ++l) {
    h = leaky_relu(conv2d(h, p(2 * l), p(2 * l + 1), 2, 1), kLeakySlope);
  }
  h = conv2d(h, p(2 * strided), p(2 * strided + 1), 1, 0);
  return reshape(h, {images.dim(0)});
}

Generator build_generator(const GeneratorConfig& cfg, std::uint64_t seed, const std::string& name) {
  return Generator(cfg, name, seed);
}

Discriminator build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed,
                                  const std::string& name) {
  return Discriminator(cfg, name, seed);
}

void adam_step(AdamState& state, ParameterList& params, double lr) {
  for (const auto& p : params) {
    if (!p.value.has_grad()) throw std::invalid_argument("adam_step: missing gradient for parameter " + p.path);
    if (p.value.grad().size() != p.value.size()) {
      throw ShapeError("adam_step: gradient shape mismatch for parameter " + p.path);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(state.beta1, t);
  const double correct2 = 1.0 - std::pow(state.beta2, t);
  for (auto& p : params) {
    auto& m = state.first_moment[p.path];
    auto& v = state.second_moment[p.path];
    if (m.empty()) {
      m.assign(p.value.size(), 0.0);
      v.assign(p.value.size(), 0.0);
    }
    auto data = p.value.mutable_data();
    auto grad = p.value.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / correct1;
      const double v_hat = v[i] / correct2;
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
    p.value.zero_grad();
  }
}

double lr_at(const LrSchedule& schedule, std::size_t epoch) {
  if (epoch < schedule.constant_epochs) return schedule.base_lr;
  if (schedule.decay_epochs == 0) return 0.0;
  const double progress =
      static_cast<double>(epoch - schedule.constant_epochs) / static_cast<double>(schedule.decay_epochs);
  return schedule.base_lr * std::max(0.0, 1.0 - progress);
}

}  // namespace concept_lattice
