#pragma once

// Attack hyperparameters and their flat JSON form.

#include <cmath>
#include <cstdint>
#include <set>
#include <string>

#include "json.hpp"
#include "vlpa/error.hpp"

namespace vlpa {

struct AttackConfig {
  // objective weights
  double a = 8.0, b = 1.0, c = 1.0, d = 1.0, g = 1.0;
  // outer iterations, transform draws per iteration, transform probability
  std::size_t H = 10, M = 5;
  double p = 0.6;
  // image step
  double eps = 16.0 / 255.0;
  double alpha_img = 1.6 / 255.0;
  double mu = 1.0;
  // text step
  double alpha_theta = 0.3, gamma = 0.6, rho = 0.99, delta = 1e-8;
  double t = 1.0;
  double eta = 13.0;
  // contrastive terms
  double tau = 0.1;
  std::size_t image_view_count = 7, text_view_count = 7, sampled_positive_count = 3;
  // report-only lower bound on semantic similarity
  double beta = 0.8;
  std::uint64_t seed = 0;
  bool attack_text = true;
  bool attack_image = true;

  // Weights for the visual-entailment task (not exercised by the harness).
  static AttackConfig visual_entailment() {
    AttackConfig c;
    c.a = 10.0;
    return c;
  }

  void validate() const {
    for (double w : {a, b, c, d, g})
      if (!std::isfinite(w)) throw ConfigError("attack: loss weights must be finite");
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("attack: p must lie in [0,1]");
    if (!(eps > 0.0 && eps < 1.0)) throw ConfigError("attack: eps must lie in (0,1)");
    if (!(alpha_img >= 0.0)) throw ConfigError("attack: alpha_img must be >= 0");
    if (!(mu >= 0.0)) throw ConfigError("attack: mu must be >= 0");
    if (M == 0) throw ConfigError("attack: M must be >= 1");
    if (!(t > 0.0)) throw ConfigError("attack: t must be positive");
    if (!(tau > 0.0)) throw ConfigError("attack: tau must be positive");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("attack: rho must lie in [0,1)");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("attack: gamma must lie in [0,1)");
    if (!(delta > 0.0)) throw ConfigError("attack: delta must be positive");
    if (sampled_positive_count == 0) throw ConfigError("attack: sampled_positive_count must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"a", c.a},
       {"b", c.b},
       {"c", c.c},
       {"d", c.d},
       {"g", c.g},
       {"H", c.H},
       {"M", c.M},
       {"p", c.p},
       {"eps", c.eps},
       {"alpha_img", c.alpha_img},
       {"mu", c.mu},
       {"alpha_theta", c.alpha_theta},
       {"gamma", c.gamma},
       {"rho", c.rho},
       {"delta", c.delta},
       {"t", c.t},
       {"eta", c.eta},
       {"tau", c.tau},
       {"image_view_count", c.image_view_count},
       {"text_view_count", c.text_view_count},
       {"sampled_positive_count", c.sampled_positive_count},
       {"beta", c.beta},
       {"seed", c.seed},
       {"attack_text", c.attack_text},
       {"attack_image", c.attack_image}};
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline void read_count(const nlohmann::json& j, const char* key, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
  out = v.get<std::size_t>();
}

}  // namespace detail

inline const std::set<std::string>& attack_config_keys() {
  static const std::set<std::string> keys = {
      "a",     "b",     "c",   "d",          "g",           "H",           "M",                "p",
      "eps",   "alpha_img", "mu", "alpha_theta", "gamma",   "rho",         "delta",            "t",
      "eta",   "tau",   "image_view_count", "text_view_count", "sampled_positive_count", "beta", "seed",
      "attack_text", "attack_image"};
  return keys;
}

// Reads the attack keys present in `j`; absent keys keep their defaults and
// alpha_img defaults to eps/10.
inline AttackConfig attack_config_from_json(const nlohmann::json& j, bool reject_unknown = true) {
  if (!j.is_object()) throw ConfigError("attack config must be a JSON object");
  if (reject_unknown)
    for (const auto& [k, v] : j.items())
      if (!attack_config_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
  AttackConfig c;
  detail::read_key(j, "a", c.a);
  detail::read_key(j, "b", c.b);
  detail::read_key(j, "c", c.c);
  detail::read_key(j, "d", c.d);
  detail::read_key(j, "g", c.g);
  detail::read_count(j, "H", c.H);
  detail::read_count(j, "M", c.M);
  detail::read_key(j, "p", c.p);
  detail::read_key(j, "eps", c.eps);
  c.alpha_img = c.eps / 10.0;
  detail::read_key(j, "alpha_img", c.alpha_img);
  detail::read_key(j, "mu", c.mu);
  detail::read_key(j, "alpha_theta", c.alpha_theta);
  detail::read_key(j, "gamma", c.gamma);
  detail::read_key(j, "rho", c.rho);
  detail::read_key(j, "delta", c.delta);
  detail::read_key(j, "t", c.t);
  detail::read_key(j, "eta", c.eta);
  detail::read_key(j, "tau", c.tau);
  detail::read_count(j, "image_view_count", c.image_view_count);
  detail::read_count(j, "text_view_count", c.text_view_count);
  detail::read_count(j, "sampled_positive_count", c.sampled_positive_count);
  detail::read_key(j, "beta", c.beta);
  detail::read_key(j, "seed", c.seed);
  detail::read_key(j, "attack_text", c.attack_text);
  detail::read_key(j, "attack_image", c.attack_image);
  c.validate();
  return c;
}

// Weight override for a named variant.
inline AttackConfig apply_variant(AttackConfig c, const std::string& variant) {
  if (variant == "full") return c;
  if (variant == "@i2i") c.g = 0.0;
  else if (variant == "@itm") c.d = 0.0;
  else if (variant == "@i2i+itm") c.d = c.g = 0.0;
  else if (variant == "@sim") c.c = 0.0;
  else if (variant == "@perp") c.b = 0.0;
  else throw ConfigError("unknown variant '" + variant + "'");
  return c;
}

}  // namespace vlpa
