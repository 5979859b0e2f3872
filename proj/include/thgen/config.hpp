#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace thgen::config {

// Flat, ordered key-value store backing config files, checkpoints, and
// report tags. std::map keeps the canonical serialization sorted.
using KeyValues = std::map<std::string, std::string>;

// "key = value" per line; '#' starts a comment; blank lines skipped.
// A non-comment line without '=' is a contract error (with line number).
KeyValues parse(const std::string& text);
KeyValues load_file(const std::string& path);

// Sorted "key=value\n" lines; the form that gets hashed and embedded.
std::string canonical_text(const KeyValues& kv);

// FNV-1a, 64-bit.
std::uint64_t fnv1a(const std::string& text);

// 16 lowercase hex digits of fnv1a(canonical_text(kv)).
std::string config_hash(const KeyValues& kv);

// Typed getters. Missing key returns the default; malformed value throws.
std::string get(const KeyValues& kv, const std::string& key, const std::string& fallback);
double get_double(const KeyValues& kv, const std::string& key, double fallback);
std::size_t get_size(const KeyValues& kv, const std::string& key, std::size_t fallback);
std::uint64_t get_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback);
bool get_bool(const KeyValues& kv, const std::string& key, bool fallback);

}  // namespace thgen::config
