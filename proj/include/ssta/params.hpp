#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssta/autodiff.hpp"
#include "ssta/serialize.hpp"

namespace ssta {

/**
 * Named slices holding every trainable weight of one node.
 *
 * Slice order is insertion order and is part of the checkpoint layout.
 */
template <Real T>
class ParameterSet {
 public:
  using Slices = std::vector<NamedTensor<T>>;

  void add(const std::string& name, Tensor<T> t) {
    if (find(name)) throw std::invalid_argument("duplicate parameter slice '" + name + "'");
    slices_.push_back({name, std::move(t)});
  }

  Tensor<T>& operator[](const std::string& name) {
    if (auto* t = find(name)) return *t;
    throw std::out_of_range("no parameter slice '" + name + "'");
  }
  const Tensor<T>& operator[](const std::string& name) const {
    return const_cast<ParameterSet&>(*this)[name];
  }

  const Slices& slices() const noexcept { return slices_; }
  Slices& slices() noexcept { return slices_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& s : slices_) n += s.tensor.size();
    return n;
  }

  std::uint64_t version() const noexcept { return version_; }
  void set_version(std::uint64_t v) noexcept { version_ = v; }
  void bump_version() noexcept { ++version_; }

  /// Registers every slice as a named input on the tape.
  std::map<std::string, ad::Var<T>> bind(ad::Tape<T>& tape) const {
    std::map<std::string, ad::Var<T>> out;
    for (const auto& s : slices_) out.emplace(s.name, tape.input(s.name, s.tensor));
    return out;
  }

  /// Copies slices whose names and shapes match `other`; returns how many were copied.
  std::size_t assign_matching(const ParameterSet& other) {
    std::size_t n = 0;
    for (auto& s : slices_)
      for (const auto& o : other.slices_)
        if (o.name == s.name && o.tensor.shape() == s.tensor.shape()) {
          s.tensor = o.tensor;
          ++n;
        }
    return n;
  }

  template <Real U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& s : slices_) out.add(s.name, s.tensor.template cast<U>());
    out.set_version(version_);
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.slices_.size() != b.slices_.size()) return false;
    for (std::size_t i = 0; i < a.slices_.size(); ++i)
      if (a.slices_[i].name != b.slices_[i].name || !(a.slices_[i].tensor == b.slices_[i].tensor)) return false;
    return true;
  }

 private:
  Tensor<T>* find(const std::string& name) {
    for (auto& s : slices_)
      if (s.name == name) return &s.tensor;
    return nullptr;
  }

  Slices slices_;
  std::uint64_t version_ = 0;
};

/// Sum of squares over all slices of a gradient map, square-rooted.
template <Real T>
T gradient_norm(const std::map<std::string, Tensor<T>>& grads) {
  T s{0};
  for (const auto& [name, g] : grads)
    for (T v : g.data()) s += v * v;
  return std::sqrt(s);
}

template <Real T>
void accumulate(std::map<std::string, Tensor<T>>& into, const std::map<std::string, Tensor<T>>& add) {
  for (const auto& [name, g] : add) {
    auto it = into.find(name);
    if (it == into.end())
      into.emplace(name, g);
    else
      it->second += g;
  }
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment gradient descent with bias-corrected moments.
template <Real T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return t_; }

  /// Applies one update. Slices absent from `grads` (e.g. frozen ones) are left untouched.
  void step(ParameterSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
            const std::vector<std::string>& frozen = {}) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.slices()) {
      if (std::find(frozen.begin(), frozen.end(), name) != frozen.end()) continue;
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor<T>& g = git->second;
      p.require_same_shape(g, "adam step");
      auto [mit, inserted] = m_.try_emplace(name, Tensor<T>(p.shape()));
      Tensor<T>& m = mit->second;
      Tensor<T>& v = v_.try_emplace(name, Tensor<T>(p.shape())).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1, vhat = vi / bc2;
        p[i] = static_cast<T>(p[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    params.bump_version();
  }

  /// Moment tensors as named slices, for checkpoints.
  std::vector<NamedTensor<T>> state() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& [name, m] : m_) out.push_back({"adam.m." + name, m});
    for (const auto& [name, v] : v_) out.push_back({"adam.v." + name, v});
    out.push_back({"adam.t", Tensor<T>::scalar(static_cast<T>(t_))});
    return out;
  }

  void load_state(const std::vector<NamedTensor<T>>& slices) {
    for (const auto& s : slices) {
      if (s.name == "adam.t")
        t_ = static_cast<std::uint64_t>(std::llround(s.tensor.item()));
      else if (s.name.rfind("adam.m.", 0) == 0)
        m_[s.name.substr(7)] = s.tensor;
      else if (s.name.rfind("adam.v.", 0) == 0)
        v_[s.name.substr(7)] = s.tensor;
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_;
  std::map<std::string, Tensor<T>> v_;
};

}  // namespace ssta
