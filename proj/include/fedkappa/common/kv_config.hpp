#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fedkappa {

/// Flat `key = value` configuration.
///
/// Grammar, one entry per line:
///   line    := ws (comment | entry)? ws
///   comment := '#' any*
///   entry   := key ws '=' ws value
///   key     := [A-Za-z0-9_.-]+
/// Values are taken verbatim after trimming. Repeated keys are an error.
class KvConfig {
 public:
  static KvConfig parse(std::string_view text);
  static KvConfig load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

  /// Keys sorted, one `key = value` per line.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> entries_;
};

std::vector<std::string> split_list(std::string_view text, char sep = ',');
std::string trim(std::string_view text);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace fedkappa
