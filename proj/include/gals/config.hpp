#pragma once
// key=value config files. Unknown keys are hard errors so a typo'd option
// can never silently fall back to its default.

#include <map>
#include <set>
#include <string>
#include <vector>

namespace gals {

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    // '#' starts a comment; blank lines ignored; each other line is key=value
    static KeyValueConfig parse_text(const std::string& text,
                                     const std::set<std::string>& allowed_keys);
    static KeyValueConfig parse_file(const std::string& path,
                                     const std::set<std::string>& allowed_keys);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::string require_string(const std::string& key) const;
    long long get_int(const std::string& key, long long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    void set(const std::string& key, const std::string& value);

    // insertion-ordered echo for run manifests
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::string> values_;
};

}  // namespace gals
