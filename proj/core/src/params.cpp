#include "smn/params.hpp"

#include <cmath>
#include <fstream>

#include "smn/error.hpp"

namespace smn {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;
const std::string kMomentumPrefix = "momentum:";

bool has_prefix(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

Parameter& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  Parameter p;
  p.grad = Tensor(init.shape(), 0.0);
  p.momentum = Tensor(init.shape(), 0.0);
  p.value = std::move(init);
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::add_gaussian(const std::string& name, Shape shape, int fan_in,
                                    double multiplier, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = multiplier * std::sqrt(2.0 / std::max(1, fan_in));
  for (double& v : t.values()) v = sd * rng.normal();
  return add(name, std::move(t));
}

Parameter& ParamStore::add_zeros(const std::string& name, Shape shape) {
  return add(name, Tensor(std::move(shape), 0.0));
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw MissingArtifact("parameter '" + name + "' not found");
  return it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw MissingArtifact("parameter '" + name + "' not found");
  return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_)
    if (has_prefix(name, prefix)) out.push_back(name);
  return out;
}

std::size_t ParamStore::count_scalars(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_)
    if (has_prefix(name, prefix)) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.grad.fill(0.0);
}

void ParamStore::scale_grad(double s, const std::string& prefix) {
  for (auto& [name, p] : params_)
    if (has_prefix(name, prefix))
      for (double& g : p.grad.values()) g *= s;
}

void ParamStore::sgd_step(double lr, double momentum, const std::string& prefix) {
  for (auto& [name, p] : params_) {
    if (!has_prefix(name, prefix)) continue;
    auto w = p.value.values();
    auto m = p.momentum.values();
    auto g = p.grad.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = momentum * m[i] + g[i];
      w[i] -= lr * m[i];
    }
  }
}

bool ParamStore::grads_finite() const {
  for (const auto& [name, p] : params_)
    if (!p.grad.all_finite()) return false;
  return true;
}

std::uint64_t ParamStore::checksum(const std::string& prefix) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : params_) {
    if (!has_prefix(name, prefix)) continue;
    h = fnv1a(name.data(), name.size(), h);
    const std::uint64_t d = digest(p.value);
    h = fnv1a(&d, sizeof d, h);
  }
  return h;
}

void ParamStore::load_from(const ParamStore& other, const std::string& prefix) {
  for (auto& [name, p] : params_) {
    if (!has_prefix(name, prefix) || !other.contains(name)) continue;
    const Parameter& src = other.get(name);
    if (src.value.shape() != p.value.shape())
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(src.value.shape()) + ", model expects " +
                       shape_str(p.value.shape()));
    p.value = src.value;
    p.momentum = src.momentum.shape() == p.value.shape() ? src.momentum
                                                         : Tensor(p.value.shape(), 0.0);
  }
}

Var Bindings::operator()(const std::string& name, bool trainable) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  if (trainable && store_ == nullptr)
    throw Error("parameter '" + name + "' requested as trainable on a read-only store");
  Var v = trainable ? tape_.parameter(store_->get(name).value, &store_->get(name).grad)
                    : tape_.parameter(view_->get(name).value, nullptr);
  bound_.emplace(name, v);
  return v;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  io::put_u32(out, kVersion);
  io::put_u64(out, ckpt.config_digest);
  io::put_u64(out, ckpt.step);
  io::put_u32(out, static_cast<std::uint32_t>(2 * ckpt.params.size()));
  for (const auto& [name, p] : ckpt.params) {
    io::put_str(out, name);
    write_tensor(out, p.value);
    io::put_str(out, kMomentumPrefix + name);
    write_tensor(out, p.momentum);
  }
  if (!out) throw Error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kMagic, 4))
    throw FormatError(path.string() + ": not a checkpoint");
  Checkpoint ckpt;
  const std::uint32_t version = io::get_u32(in);
  if (version != kVersion) throw FormatError(path.string() + ": unsupported checkpoint version");
  ckpt.config_digest = io::get_u64(in);
  ckpt.step = io::get_u64(in);
  const std::uint32_t n = io::get_u32(in);
  std::map<std::string, Tensor> momenta;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = io::get_str(in);
    Tensor t = read_tensor(in);
    if (has_prefix(name, kMomentumPrefix))
      momenta.emplace(name.substr(kMomentumPrefix.size()), std::move(t));
    else
      ckpt.params.add(name, std::move(t));
  }
  for (auto& [name, m] : momenta)
    if (ckpt.params.contains(name) && m.shape() == ckpt.params.get(name).value.shape())
      ckpt.params.get(name).momentum = std::move(m);
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest) {
  Checkpoint ckpt = read_checkpoint(path);
  if (ckpt.config_digest != expected_digest)
    throw ConfigError(path.string() + ": checkpoint config digest " + hex64(ckpt.config_digest) +
                      " does not match the current configuration (" + hex64(expected_digest) +
                      ")");
  return ckpt;
}

}  // namespace smn
