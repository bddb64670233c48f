#pragma once

// Named parameter registry. Every trainable tensor and every persistent
// buffer (running batch-norm statistics) lives here under a unique name with
// a group tag, so the trainer can freeze whole groups per phase and the
// checkpoint writer can serialize everything in a stable order.
//
// Initialization is a pure function of (store seed, parameter name): kernels
// draw uniform from [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases and embedding
// tables start at zero, normalization gains at one.

#include <map>
#include <string>
#include <vector>

#include "resvox/common.hpp"
#include "resvox/tensor.hpp"

namespace resvox {

enum class Init { fan_in_uniform, zeros, ones };

class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  Tensor add(const std::string& name, Shape shape, const std::string& group,
             Init init, long fan_in = 0) {
    require(!params_.count(name) && !buffers_.count(name),
            "parameter store: duplicate name ", name);
    Tensor t(shape);
    if (init == Init::fan_in_uniform) {
      require(fan_in >= 1, "parameter store: ", name,
              " needs an explicit positive fan_in");
      double bound = 1.0 / std::sqrt(double(fan_in));
      Rng rng = seeded_stream(seed_, "init-" + name);
      for (double& v : t.vec()) v = rng.uniform(-bound, bound);
    } else if (init == Init::ones) {
      for (double& v : t.vec()) v = 1.0;
    }
    t.set_requires_grad(true);
    params_[name] = Entry{t, group, false};
    return t;
  }

  // Buffers persist in checkpoints but take no gradients and no updates.
  Tensor buffer(const std::string& name, Shape shape, double fill) {
    require(!params_.count(name) && !buffers_.count(name),
            "parameter store: duplicate name ", name);
    Tensor t(shape);
    for (double& v : t.vec()) v = fill;
    buffers_[name] = t;
    return t;
  }

  bool has(const std::string& name) const {
    return params_.count(name) || buffers_.count(name);
  }

  Tensor get(const std::string& name) const {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second.tensor;
    auto bit = buffers_.find(name);
    if (bit != buffers_.end()) return bit->second;
    fail("parameter store: no parameter named ", name);
  }

  bool has_parameter(const std::string& name) const {
    return params_.count(name) != 0;
  }

  const std::string& group_of(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail("parameter store: no parameter ", name);
    return it->second.group;
  }

  bool frozen(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail("parameter store: no parameter ", name);
    return it->second.frozen;
  }

  void set_frozen(const std::string& name, bool frozen) {
    auto it = params_.find(name);
    if (it == params_.end()) fail("parameter store: no parameter ", name);
    it->second.frozen = frozen;
  }

  void freeze_group(const std::string& group) {
    bool found = false;
    for (auto& [name, entry] : params_)
      if (entry.group == group) {
        entry.frozen = true;
        found = true;
      }
    require(found, "parameter store: freeze of unknown group ", group);
  }

  void unfreeze_all() {
    for (auto& [name, entry] : params_) entry.frozen = false;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : params_) out.push_back(name);
    return out;
  }

  std::vector<std::string> buffer_names() const {
    std::vector<std::string> out;
    for (const auto& [name, tensor] : buffers_) out.push_back(name);
    return out;
  }

  // Trainable parameters in name order, frozen ones skipped.
  template <class F>
  void for_each_trainable(F&& f) {
    for (auto& [name, entry] : params_)
      if (!entry.frozen) f(name, entry.tensor);
  }

  void zero_grads() {
    for (auto& [name, entry] : params_) entry.tensor.zero_grad();
  }

  long total_parameters() const {
    long n = 0;
    for (const auto& [name, entry] : params_)
      n += long(entry.tensor.size());
    return n;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  struct Entry {
    Tensor tensor;
    std::string group;
    bool frozen = false;
  };

  std::uint64_t seed_ = 0;
  std::map<std::string, Entry> params_;
  std::map<std::string, Tensor> buffers_;
};

}  // namespace resvox
