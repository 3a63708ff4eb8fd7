#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace frm {

// Flat key=value document. Blank lines and lines starting with '#' are
// ignored; keys are kept sorted so the written form is canonical.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& source);
  static KeyValueConfig load(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  std::string str() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::uint64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set_sizes(const std::string& key, const std::vector<std::size_t>& values);

  // Later values win.
  void merge(const KeyValueConfig& overrides);

  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// "HxW" -> {H, W}
std::pair<std::size_t, std::size_t> parse_size(const std::string& text);

}  // namespace frm
