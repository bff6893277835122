#include "gals/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gals/errors.hpp"

namespace gals {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_text(const std::string& text,
                                          const std::set<std::string>& allowed_keys) {
    KeyValueConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (!allowed_keys.count(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        if (cfg.values_.count(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                              key + "'");
        cfg.set(key, value);
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path,
                                          const std::set<std::string>& allowed_keys) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str(), allowed_keys);
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) > 0; }

void KeyValueConfig::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) entries_.emplace_back(key, value);
    values_[key] = value;
    for (auto& kv : entries_)
        if (kv.first == key) kv.second = value;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string KeyValueConfig::require_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    const long long v = std::strtoll(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0')
        throw ConfigError("config: key '" + key + "' is not an integer: '" + it->second + "'");
    return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0')
        throw ConfigError("config: key '" + key + "' is not a number: '" + it->second + "'");
    return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

}  // namespace gals
