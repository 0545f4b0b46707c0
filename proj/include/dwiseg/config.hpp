#pragma once

#include <map>
#include <string>
#include <vector>

namespace dwiseg {

// Plain-text "key = value" configuration; '#' starts a comment. Values keep
// their raw text and are parsed on access.
class KeyValueConfig {
public:
    static KeyValueConfig parse_text(const std::string& text);
    static KeyValueConfig parse_file(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;
    std::vector<double> get_doubles(const std::string& key,
                                    const std::vector<double>& fallback) const;
    std::vector<std::string> get_strings(const std::string& key,
                                         const std::vector<std::string>& fallback) const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dwiseg
