#ifndef GEOBEAM_TOOLS_FLAT_CONFIG_HPP
#define GEOBEAM_TOOLS_FLAT_CONFIG_HPP

// Flat key = value files with dotted section prefixes. '#' starts a comment.
// Every key must be consumed by the subcommand; leftovers are errors.

#include "geobeam/common.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <set>

namespace geobeam::cli {

// Bad configuration; the CLI maps it to exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

class FlatConfig {
public:
    static FlatConfig load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ConfigError("config: cannot open '" + path + "'");
        std::string text((std::istreambuf_iterator<char>(f)), {});
        return parse(text, path);
    }

    static FlatConfig parse(const std::string& text, const std::string& source = "<config>") {
        FlatConfig c;
        c.source_ = source;
        c.text_ = text;
        std::istringstream is(text);
        std::string line;
        int no = 0;
        while (std::getline(is, line)) {
            ++no;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(c.where(no) + ": expected 'key = value', got '" + line + "'");
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(c.where(no) + ": empty key");
            for (char ch : key)
                if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_'))
                    throw ConfigError(c.where(no) + ": bad key '" + key + "'");
            if (c.entries_.count(key))
                throw ConfigError(c.where(no) + ": duplicate key '" + key + "' (first set on line " +
                                  std::to_string(c.entries_[key].line) + ")");
            c.entries_[key] = {value, no};
        }
        return c;
    }

    const std::string& source() const { return source_; }
    const std::string& text() const { return text_; }
    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    // Raw value; marks the key as consumed.
    std::optional<std::string> raw(const std::string& key) {
        asked_.insert(key);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        used_.insert(key);
        return it->second.value;
    }

    std::string require(const std::string& key) {
        auto v = raw(key);
        if (!v || v->empty()) throw ConfigError(source_ + ": missing required field '" + key + "'");
        return *v;
    }

    std::string str(const std::string& key, const std::string& def) { return raw(key).value_or(def); }

    double num(const std::string& key, double def) {
        auto v = raw(key);
        return v ? to_double(key, *v) : def;
    }

    int integer(const std::string& key, int def) {
        auto v = raw(key);
        if (!v) return def;
        try {
            size_t used = 0;
            const int r = std::stoi(*v, &used);
            if (used == v->size()) return r;
        } catch (const std::exception&) {
        }
        throw ConfigError(at(key) + ": field '" + key + "': expected an integer, got '" + *v + "'");
    }

    bool flag(const std::string& key, bool def) {
        auto v = raw(key);
        if (!v) return def;
        if (*v == "true" || *v == "1" || *v == "yes") return true;
        if (*v == "false" || *v == "0" || *v == "no") return false;
        throw ConfigError(at(key) + ": field '" + key + "': expected true or false, got '" + *v + "'");
    }

    std::vector<double> list(const std::string& key, std::vector<double> def) {
        auto v = raw(key);
        if (!v) return def;
        std::vector<double> out;
        std::stringstream ss(*v);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
        if (out.empty()) throw ConfigError(at(key) + ": field '" + key + "': empty list");
        return out;
    }

    Vec2 vec2(const std::string& key, Vec2 def) {
        asked_.insert(key);
        if (!has(key)) return def;
        const auto v = list(key, {});
        if (v.size() != 2) throw ConfigError(at(key) + ": field '" + key + "': expected two numbers 'x, y'");
        return {v[0], v[1]};
    }

    // "file:line" of a key, or the file when the key is absent.
    std::string at(const std::string& key) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? source_ : where(it->second.line);
    }

    // Throws on the first key nobody asked for.
    void reject_unknown() const {
        std::vector<std::pair<int, std::string>> left;
        for (const auto& [k, e] : entries_)
            if (!used_.count(k)) left.emplace_back(e.line, k);
        if (left.empty()) return;
        std::sort(left.begin(), left.end());
        std::string known;
        for (const auto& k : asked_) known += (known.empty() ? "" : ", ") + k;
        throw ConfigError(where(left.front().first) + ": unknown key '" + left.front().second + "'" +
                          (known.empty() ? "" : " (known keys: " + known + ")"));
    }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
    }

    std::string where(int line) const { return source_ + ":" + std::to_string(line); }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            size_t used = 0;
            const double r = std::stod(v, &used);
            if (used == v.size()) return r;
        } catch (const std::exception&) {
        }
        throw ConfigError(at(key) + ": field '" + key + "': expected a number, got '" + v + "'");
    }

    std::string source_, text_;
    std::map<std::string, Entry> entries_;
    std::set<std::string> used_, asked_;
};

} // namespace geobeam::cli

#endif // GEOBEAM_TOOLS_FLAT_CONFIG_HPP
