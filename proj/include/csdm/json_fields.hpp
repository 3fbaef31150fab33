#pragma once

#include <set>
#include <string>

#include "csdm/error.hpp"
#include "csdm/vendor_json.hpp"

namespace csdm {

// Strict reader for one JSON object: typed lookups report the dotted path of
// the offending field, and finish() rejects keys nobody asked for.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string path_of(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(path_of(key), "missing required field");
    return convert<T>(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(key);
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(path_of(key), "unknown field");
  }

 private:
  template <class T>
  T convert(const std::string& key) const {
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path_of(key), "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path_of(key), "expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
          v.get<long long>() < 0)
        throw ConfigError(path_of(key), "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path_of(key), "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path_of(key), "expected a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_of(key), e.what());
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace csdm
