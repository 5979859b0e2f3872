#include "thgen/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace thgen::config {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValues parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " has no '=': " + stripped);
    const std::string key = trim(stripped.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has empty key");
    kv[key] = trim(stripped.substr(eq + 1));
  }
  return kv;
}

KeyValues load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string canonical_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [key, value] : kv) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  }
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string config_hash(const KeyValues& kv) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a(canonical_text(kv));
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string get(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  const auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

double get_double(const KeyValues& kv, const std::string& key, double fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (end == it->second.c_str() || *end != '\0')
    throw std::invalid_argument("config: " + key + " is not a number: " + it->second);
  return v;
}

std::size_t get_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(kv, key, fallback));
}

std::uint64_t get_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
  if (end == it->second.c_str() || *end != '\0')
    throw std::invalid_argument("config: " + key + " is not an integer: " + it->second);
  return v;
}

bool get_bool(const KeyValues& kv, const std::string& key, bool fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::invalid_argument("config: " + key + " is not a boolean: " + it->second);
}

}  // namespace thgen::config
