#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace fedmap {

/// Schema violation in a JSON document, located by a JSON pointer.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string pointer, const std::string& what)
      : std::invalid_argument((pointer.empty() ? std::string("/") : pointer) + ": " + what),
        pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

/// Reads the members of one JSON object and rejects any key never asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
    if (!j_.is_object()) throw ConfigError(pointer_, "expected an object");
  }

  std::string path(const std::string& key) const { return pointer_ + "/" + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  /// Leaves `out` untouched when the key is absent.
  template <typename T>
  bool get(const std::string& key, T& out) {
    if (!has(key)) return false;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path(key), std::string("wrong type (") + e.what() + ")");
    }
    return true;
  }

  template <typename T>
  void require(const std::string& key, T& out) {
    if (!get(key, out)) throw ConfigError(path(key), "required field missing");
  }

  const nlohmann::json* child(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()), "unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string pointer_;
  std::set<std::string> seen_;
};

}  // namespace fedmap
