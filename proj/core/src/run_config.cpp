#include "ulr/run_config.hpp"

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>

#include <fmt/format.h>

#include "ulr/error.hpp"

namespace ulr {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

RunConfig::RunConfig(std::string command, std::span<const ConfigKey> keys) : command_(std::move(command)) {
    for (const auto& k : keys) {
        values_.emplace(std::string(k.name), std::string(k.default_value));
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open config '{}'", path.string()));
    }
    merge_text(in, path.string());
}

void RunConfig::merge_text(std::istream& in, std::string_view origin) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view body = line;
        if (const auto hash = body.find('#'); hash != std::string_view::npos) {
            body = body.substr(0, hash);
        }
        body = trim(body);
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw Error(fmt::format("{}:{}: expected 'key = value'", origin, line_no));
        }
        const auto key = trim(body.substr(0, eq));
        if (key.empty()) {
            throw Error(fmt::format("{}:{}: empty key", origin, line_no));
        }
        try {
            set(key, std::string(trim(body.substr(eq + 1))));
        } catch (const Error& e) {
            throw Error(fmt::format("{}:{}: {}", origin, line_no, e.what()));
        }
    }
}

void RunConfig::set(std::string_view key, std::string value) {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw Error(fmt::format("unknown key '{}' for command '{}'", key, command_));
    }
    it->second = std::move(value);
}

bool RunConfig::has(std::string_view key) const {
    const auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
}

const std::string& RunConfig::get(std::string_view key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw Error(fmt::format("unknown key '{}' for command '{}'", key, command_));
    }
    return it->second;
}

const std::string& RunConfig::require(std::string_view key) const {
    const auto& v = get(key);
    if (v.empty()) {
        throw Error(fmt::format("missing required setting '{}'", key));
    }
    return v;
}

std::int64_t RunConfig::get_int(std::string_view key) const {
    const auto& v = require(key);
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw Error(fmt::format("setting '{}' must be an integer, got '{}'", key, v));
    }
    return out;
}

std::uint64_t RunConfig::get_uint(std::string_view key) const {
    const auto& v = require(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw Error(fmt::format("setting '{}' must be a non-negative integer, got '{}'", key, v));
    }
    return out;
}

double RunConfig::get_double(std::string_view key) const {
    const auto& v = require(key);
    // strtod accepts "inf", which thresholds need.
    char* end = nullptr;
    errno = 0;
    const double out = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size() || errno == ERANGE) {
        throw Error(fmt::format("setting '{}' must be a number, got '{}'", key, v));
    }
    return out;
}

bool RunConfig::get_bool(std::string_view key) const {
    const auto& v = require(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    throw Error(fmt::format("setting '{}' must be a boolean, got '{}'", key, v));
}

std::string RunConfig::echo() const {
    std::string out;
    for (const auto& [k, v] : values_) {
        out += fmt::format("{} = {}\n", k, v);
    }
    return out;
}

}  // namespace ulr
