#include "gaitstr/params.hpp"

#include "gaitstr/errors.hpp"

#include <cmath>

namespace gaitstr {

ad::Var ParameterStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw InvalidInput("duplicate parameter name '" + name + "'");
  auto v = ad::leaf(std::move(init), true);
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.push_back(v);
  return v;
}

ad::Var ParameterStore::add_he(const std::string& name, Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return add(name, std::move(t));
}

ad::Var ParameterStore::add_zeros(const std::string& name, Shape shape) { return add(name, Tensor(std::move(shape))); }

const ad::Var& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter '" + name + "'");
  return vars_[it->second];
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += v->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& v : vars_)
    if (!v->grad.empty()) v->grad.set_zero();
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  if (other.names_ != names_) throw InvalidInput("parameter stores have different layouts");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i]->value.same_shape(other.vars_[i]->value))
      throw InvalidInput("parameter '" + names_[i] + "' shape mismatch");
    vars_[i]->value = other.vars_[i]->value;
  }
}

}  // namespace gaitstr
