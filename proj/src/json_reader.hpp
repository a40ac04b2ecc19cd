// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "htcl/error.hpp"

namespace htcl::detail {

/// Strict view of a JSON object: every key must be consumed before finish(),
/// and errors name the full field path.
class JsonObject {
 public:
  JsonObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename V>
  V get(const std::string& key, V fallback) {
    if (!has(key)) return fallback;
    return convert<V>(key);
  }

  template <typename V>
  V require(const std::string& key) {
    if (!has(key)) throw ConfigError(path_of(key) + ": missing required field");
    return convert<V>(key);
  }

  /// Nested object; an absent key yields an empty object.
  JsonObject object(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return JsonObject(has(key) ? j_.at(key) : empty, path_of(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  Eigen::Vector3d vec3(const std::string& key, const Eigen::Vector3d& fallback) {
    if (!has(key)) return fallback;
    const auto v = convert<std::vector<double>>(key);
    if (v.size() != 3) throw ConfigError(path_of(key) + ": expected 3 numbers");
    return {v[0], v[1], v[2]};
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(path_of(it.key()) + ": unknown field");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  template <typename V>
  V convert(const std::string& key) {
    used_.insert(key);
    const auto& node = j_.at(key);
    if constexpr (std::is_same_v<V, bool>) {
      if (!node.is_boolean()) throw ConfigError(path_of(key) + ": expected a boolean");
    } else if constexpr (std::is_arithmetic_v<V>) {
      if (!node.is_number()) throw ConfigError(path_of(key) + ": expected a number");
      if constexpr (std::is_unsigned_v<V>) {
        if (!node.is_number_unsigned()) throw ConfigError(path_of(key) + ": expected a non-negative integer");
      } else if constexpr (std::is_integral_v<V>) {
        if (!node.is_number_integer()) throw ConfigError(path_of(key) + ": expected an integer");
      }
    }
    try {
      return node.get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_of(key) + ": " + e.what());
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline nlohmann::json parse_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("<root>: invalid JSON: ") + e.what());
  }
}

}  // namespace htcl::detail
