#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>

namespace ulr {

/// Allowed key of a command with its default ("" when it has none).
struct ConfigKey {
    std::string_view name;
    std::string_view default_value;
    std::string_view help;
};

/// Flat `key = value` settings for one command. Later sources override earlier ones:
/// defaults, then the config file, then flags.
class RunConfig {
public:
    RunConfig(std::string command, std::span<const ConfigKey> keys);

    const std::string& command() const noexcept { return command_; }

    /// Lines of `key = value`; '#' starts a comment. Throws on malformed lines and unknown keys.
    void merge_file(const std::filesystem::path& path);
    void merge_text(std::istream& in, std::string_view origin);
    /// Throws on unknown keys.
    void set(std::string_view key, std::string value);

    bool has(std::string_view key) const;
    const std::string& get(std::string_view key) const;
    /// Throws naming the key when the value is missing or malformed.
    const std::string& require(std::string_view key) const;
    std::int64_t get_int(std::string_view key) const;
    std::uint64_t get_uint(std::string_view key) const;
    double get_double(std::string_view key) const;
    bool get_bool(std::string_view key) const;

    /// Resolved settings, one `key = value` line each, in key order.
    std::string echo() const;

private:
    std::string command_;
    std::map<std::string, std::string, std::less<>> values_;
};

}  // namespace ulr
