#pragma once

#include "test_util.hpp"

namespace ssta::test {

/// One autodiff primitive under a finite-difference check: inputs drawn from a seed.
struct FdCase {
  std::string name;
  std::function<std::map<std::string, Tensor<double>>(std::mt19937_64&)> inputs;
  GraphFn fn;
};

inline std::vector<FdCase> primitive_cases() {
  using V = std::map<std::string, ad::Var<double>>;
  using In = std::map<std::string, Tensor<double>>;
  auto one = [](Shape s) {
    return [s](std::mt19937_64& r) { return In{{"a", random_tensor(s, r)}}; };
  };
  auto two = [](Shape s, Shape t) {
    return [s, t](std::mt19937_64& r) { return In{{"a", random_tensor(s, r)}, {"b", random_tensor(t, r)}}; };
  };
  return {
      {"conv2d",
       [](std::mt19937_64& r) {
         return In{{"x", random_tensor({2, 5, 6}, r)}, {"k", random_tensor({3, 2, 3, 3}, r)}, {"b", random_tensor({3}, r)}};
       },
       [](ad::Tape<double>&, V& v) { return ad::conv2d(v.at("x"), v.at("k"), v.at("b")); }},
      {"tanh", one({3, 4}), [](ad::Tape<double>&, V& v) { return ad::tanh(v.at("a")); }},
      {"sigmoid", one({3, 4}), [](ad::Tape<double>&, V& v) { return ad::sigmoid(v.at("a")); }},
      {"add", two({2, 3}, {2, 3}), [](ad::Tape<double>&, V& v) { return ad::add(v.at("a"), v.at("b")); }},
      {"scale", one({5}), [](ad::Tape<double>&, V& v) { return ad::scale(v.at("a"), -1.7); }},
      {"concat_channels", two({2, 3, 3}, {1, 3, 3}),
       [](ad::Tape<double>&, V& v) { return ad::concat_channels(v.at("a"), v.at("b")); }},
      {"global_avg_pool", one({3, 4, 5}), [](ad::Tape<double>&, V& v) { return ad::global_avg_pool(v.at("a")); }},
      {"broadcast_spatial", one({3}), [](ad::Tape<double>&, V& v) { return ad::broadcast_spatial(v.at("a"), 2, 3); }},
      {"dense",
       [](std::mt19937_64& r) {
         return In{{"x", random_tensor({4}, r)}, {"w", random_tensor({3, 4}, r)}, {"b", random_tensor({3}, r)}};
       },
       [](ad::Tape<double>&, V& v) { return ad::dense(v.at("x"), v.at("w"), v.at("b")); }},
      {"reshape", one({2, 6}), [](ad::Tape<double>&, V& v) { return ad::reshape(v.at("a"), {3, 4}); }},
      {"sum", one({2, 3, 2}), [](ad::Tape<double>&, V& v) { return ad::sum(v.at("a")); }},
      {"mse_loss", two({1, 3, 3}, {1, 3, 3}), [](ad::Tape<double>&, V& v) { return ad::mse_loss(v.at("a"), v.at("b")); }},
      {"sse_loss", two({1, 3, 3}, {1, 3, 3}), [](ad::Tape<double>&, V& v) { return ad::sse_loss(v.at("a"), v.at("b")); }},
  };
}

/// Largest relative FD error of one primitive on one seeded instance, with a random cotangent.
inline double fd_case_error(const FdCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7919 + std::hash<std::string>{}(c.name));
  const auto in = c.inputs(rng);
  ad::Tape<double> tape;
  std::map<std::string, ad::Var<double>> vars;
  for (const auto& [name, t] : in) vars.emplace(name, tape.input(name, t));
  const Shape out = c.fn(tape, vars).shape();
  return max_fd_error(c.fn, in, random_tensor(out, rng));
}

}  // namespace ssta::test
