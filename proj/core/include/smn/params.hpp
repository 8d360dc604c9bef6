#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "smn/autodiff.hpp"
#include "smn/rng.hpp"

namespace smn {

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor momentum;
};

/// Named trainable tensors, iterated in name order so every reduction over the
/// store is deterministic.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  // Fan-in scaled Gaussian: std = multiplier * sqrt(2 / fan_in).
  Parameter& add_gaussian(const std::string& name, Shape shape, int fan_in, double multiplier,
                          Rng& rng);
  Parameter& add_zeros(const std::string& name, Shape shape);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  std::vector<std::string> names(const std::string& prefix = "") const;
  std::size_t size() const { return params_.size(); }
  std::size_t count_scalars(const std::string& prefix = "") const;

  void zero_grad();
  // Scales every gradient under prefix (e.g. 1/batch).
  void scale_grad(double s, const std::string& prefix = "");
  // Momentum SGD on parameters under prefix: m = mu*m + g; w -= lr*m.
  void sgd_step(double lr, double momentum, const std::string& prefix = "");
  bool grads_finite() const;

  // Digest over names and values under prefix.
  std::uint64_t checksum(const std::string& prefix = "") const;

  // Copies values (and momentum) from other for every name present in both;
  // throws ShapeError on an extent mismatch.
  void load_from(const ParamStore& other, const std::string& prefix = "");

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

/// Binds store parameters to a tape on first use. Trainable bindings route
/// their gradient into the parameter's grad; frozen ones are constants.
class Bindings {
 public:
  Bindings(Tape& tape, ParamStore& store) : tape_(tape), store_(&store), view_(&store) {}
  // Read-only bindings; requesting a trainable parameter throws.
  Bindings(Tape& tape, const ParamStore& store) : tape_(tape), view_(&store) {}

  Var operator()(const std::string& name, bool trainable);
  // Serves `v` for every later request of `name` (gradient checks bind leaves this way).
  void bind(const std::string& name, const Var& v) { bound_[name] = v; }
  Tape& tape() { return tape_; }
  const ParamStore& store() const { return *view_; }

 private:
  Tape& tape_;
  ParamStore* store_ = nullptr;
  const ParamStore* view_ = nullptr;
  std::map<std::string, Var> bound_;
};

// Checkpoint archive: "SMNC", u32 version, u64 config digest, u64 step,
// u32 entry count, then per entry a length-prefixed name and a tensor record.
// Momentum buffers are stored under "momentum:" + name.
struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::uint64_t step = 0;
  ParamStore params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws MissingArtifact if absent, FormatError if corrupt, ConfigError when
/// the stored digest differs from expected_digest.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest);
/// Reads without a digest check.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace smn
