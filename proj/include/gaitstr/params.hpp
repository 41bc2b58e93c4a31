#pragma once

#include "gaitstr/autograd.hpp"
#include "gaitstr/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace gaitstr {

// Named trainable tensors in registration order. Modules keep the returned
// Var handles, so a parameter used twice in a forward pass accumulates its
// gradient in one place.
class ParameterStore {
 public:
  ad::Var add(const std::string& name, Tensor init);
  // He-uniform init with bound sqrt(6 / fan_in).
  ad::Var add_he(const std::string& name, Shape shape, int fan_in, Rng& rng);
  ad::Var add_zeros(const std::string& name, Shape shape);

  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<ad::Var>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }
  std::size_t num_scalars() const;

  void zero_grad();
  // Copies values from `other`; names and shapes must match exactly.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<ad::Var> vars_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace gaitstr
