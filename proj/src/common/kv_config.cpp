#include "fedkappa/common/kv_config.hpp"

#include <charconv>
#include <sstream>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"

namespace fedkappa {

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(sep, start);
    if (end == std::string_view::npos) end = text.size();
    auto item = trim(text.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  (void)ec;
  return std::string(buf, ptr);
}

KvConfig KvConfig::parse(std::string_view text) {
  KvConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) {
      throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": empty key");
    }
    for (char c : key) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                      c == '_' || c == '.' || c == '-';
      if (!ok) {
        throw Error(ErrorCode::InvalidConfig,
                    "line " + std::to_string(line_no) + ": bad character in key '" + key + "'");
      }
    }
    if (!cfg.entries_.emplace(key, value).second) {
      throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  return cfg;
}

KvConfig KvConfig::load(const std::filesystem::path& path) { return parse(read_text_file(path)); }

std::optional<std::string> KvConfig::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

namespace {
template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* first = value.data();
  const auto* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) {
    throw Error(ErrorCode::InvalidConfig, "key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}
}  // namespace

double KvConfig::get_double(const std::string& key, double fallback) const {
  auto v = get(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

std::int64_t KvConfig::get_int(const std::string& key, std::int64_t fallback) const {
  auto v = get(key);
  return v ? parse_number<std::int64_t>(key, *v) : fallback;
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto v = get(key);
  return v ? parse_number<std::uint64_t>(key, *v) : fallback;
}

std::vector<std::string> KvConfig::get_list(const std::string& key) const {
  auto v = get(key);
  return v ? split_list(*v) : std::vector<std::string>{};
}

std::string KvConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << '\n';
  return os.str();
}

}  // namespace fedkappa
