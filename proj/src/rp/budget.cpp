#include <algorithm>
#include <charconv>
#include <fstream>
#include <thread>

#include "gauntlet/rp.hpp"

namespace gauntlet {
namespace {

bool is_off(std::string_view v) { return v == "off" || v == "none" || v == "unlimited" || v == "disabled"; }

template <class T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw std::invalid_argument("invalid value for " + std::string(key) + ": " + std::string(v));
    return out;
}

// Accepts K/M/G/KiB/MiB/GiB suffixes for byte quantities.
std::uint64_t parse_bytes(std::string_view key, std::string_view v) {
    std::uint64_t mult = 1;
    auto strip = [&](std::string_view suffix, std::uint64_t m) {
        if (v.size() > suffix.size() && v.substr(v.size() - suffix.size()) == suffix) {
            v.remove_suffix(suffix.size());
            mult = m;
            return true;
        }
        return false;
    };
    strip("KiB", 1ull << 10) || strip("MiB", 1ull << 20) || strip("GiB", 1ull << 30) || strip("K", 1ull << 10) ||
        strip("M", 1ull << 20) || strip("G", 1ull << 30);
    return parse_number<std::uint64_t>(key, v) * mult;
}

bool parse_flag(std::string_view key, std::string_view v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw std::invalid_argument("invalid flag for " + std::string(key) + ": " + std::string(v));
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

template <class T>
nlohmann::json opt(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

ResourceBudget ResourceBudget::unlimited() {
    ResourceBudget b;
    b.max_depth.reset();
    b.max_repos.reset();
    b.max_total_bytes.reset();
    b.max_object_bytes.reset();
    b.max_wall_time.reset();
    b.min_transfer_rate.reset();
    b.max_redirects.reset();
    b.max_retry_after.reset();
    b.max_decompress_ratio.reset();
    b.max_vrps.reset();
    b.max_path_len.reset();
    b.check_paths = false;
    return b;
}

void ResourceBudget::set(std::string_view key, std::string_view value) {
    key = trim(key);
    value = trim(value);
    const bool off = is_off(value);
    if (key == "max_depth") max_depth = off ? std::nullopt : std::optional(parse_number<unsigned>(key, value));
    else if (key == "max_repos") max_repos = off ? std::nullopt : std::optional(parse_number<std::uint64_t>(key, value));
    else if (key == "max_total_bytes") max_total_bytes = off ? std::nullopt : std::optional(parse_bytes(key, value));
    else if (key == "max_object_bytes") max_object_bytes = off ? std::nullopt : std::optional(parse_bytes(key, value));
    else if (key == "max_wall_time") max_wall_time = off ? std::nullopt : std::optional(parse_number<double>(key, value));
    else if (key == "min_transfer_rate") min_transfer_rate = off ? std::nullopt : std::optional(parse_number<double>(key, value));
    else if (key == "max_redirects") max_redirects = off ? std::nullopt : std::optional(parse_number<unsigned>(key, value));
    else if (key == "max_retry_after") max_retry_after = off ? std::nullopt : std::optional(parse_number<std::uint64_t>(key, value));
    else if (key == "max_decompress_ratio") max_decompress_ratio = off ? std::nullopt : std::optional(parse_number<double>(key, value));
    else if (key == "max_vrps") max_vrps = off ? std::nullopt : std::optional(parse_number<std::uint64_t>(key, value));
    else if (key == "max_path_len") max_path_len = off ? std::nullopt : std::optional(parse_bytes(key, value));
    else if (key == "hints_enabled") hints_enabled = parse_flag(key, value);
    else if (key == "check_paths") check_paths = parse_flag(key, value);
    else if (key == "accept_fast_keys") accept_fast_keys = parse_flag(key, value);
    else if (key == "stall_window") stall_window = parse_number<double>(key, value);
    else throw std::invalid_argument("unknown budget key: " + std::string(key));
}

void ResourceBudget::load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::invalid_argument("cannot read budget config " + file.string());
    std::string line;
    unsigned lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view l = line;
        if (auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
        l = trim(l);
        if (l.empty()) continue;
        auto eq = l.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument(file.string() + ":" + std::to_string(lineno) + ": expected key=value");
        set(l.substr(0, eq), l.substr(eq + 1));
    }
    validate();
}

void ResourceBudget::validate() const {
    auto positive = [](const char* name, auto v) {
        if (v && !(*v > 0)) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive("max_depth", max_depth);
    positive("max_repos", max_repos);
    positive("max_total_bytes", max_total_bytes);
    positive("max_object_bytes", max_object_bytes);
    positive("max_wall_time", max_wall_time);
    positive("min_transfer_rate", min_transfer_rate);
    positive("max_redirects", max_redirects);
    positive("max_retry_after", max_retry_after);
    positive("max_decompress_ratio", max_decompress_ratio);
    positive("max_vrps", max_vrps);
    positive("max_path_len", max_path_len);
    if (!(stall_window > 0)) throw std::invalid_argument("stall_window must be positive");
}

nlohmann::json ResourceBudget::to_json() const {
    return {
        {"max_depth", opt(max_depth)},
        {"max_repos", opt(max_repos)},
        {"max_total_bytes", opt(max_total_bytes)},
        {"max_object_bytes", opt(max_object_bytes)},
        {"max_wall_time", opt(max_wall_time)},
        {"min_transfer_rate", opt(min_transfer_rate)},
        {"max_redirects", opt(max_redirects)},
        {"max_retry_after", opt(max_retry_after)},
        {"max_decompress_ratio", opt(max_decompress_ratio)},
        {"max_vrps", opt(max_vrps)},
        {"max_path_len", opt(max_path_len)},
        {"hints_enabled", hints_enabled},
        {"check_paths", check_paths},
        {"accept_fast_keys", accept_fast_keys},
        {"stall_window", stall_window},
    };
}

std::string to_string(const Vrp& v) {
    return v.prefix.to_string() + "-" + std::to_string(v.max_length) + " AS" + std::to_string(v.asn);
}

std::optional<std::uint64_t> effective_limit(const std::vector<TreeHint>& hints, const NodeAddress& node) {
    std::optional<std::uint64_t> out;
    for (const auto& h : hints)
        if (h.node == node || h.node.is_ancestor_of(node)) out = out ? std::min(*out, h.max_descendants) : h.max_descendants;
    return out;
}

std::string_view to_string(Violation v) {
    switch (v) {
        case Violation::DepthLimit: return "DepthLimit";
        case Violation::RepoLimit: return "RepoLimit";
        case Violation::ByteBudgetExceeded: return "ByteBudgetExceeded";
        case Violation::ObjectTooLarge: return "ObjectTooLarge";
        case Violation::WallTimeExceeded: return "WallTimeExceeded";
        case Violation::StallDetected: return "StallDetected";
        case Violation::RedirectLimit: return "RedirectLimit";
        case Violation::RateLimitExcessive: return "RateLimitExcessive";
        case Violation::BombDetected: return "BombDetected";
        case Violation::VrpBudgetExceeded: return "VrpBudgetExceeded";
        case Violation::PathTooLong: return "PathTooLong";
        case Violation::PathTraversal: return "PathTraversal";
        case Violation::XmlRejected: return "XmlRejected";
        case Violation::HintLimit: return "HintLimit";
    }
    return "?";
}

std::string_view limit_name(Violation v) {
    switch (v) {
        case Violation::DepthLimit: return "max_depth";
        case Violation::RepoLimit: return "max_repos";
        case Violation::ByteBudgetExceeded: return "max_total_bytes";
        case Violation::ObjectTooLarge: return "max_object_bytes";
        case Violation::WallTimeExceeded: return "max_wall_time";
        case Violation::StallDetected: return "min_transfer_rate";
        case Violation::RedirectLimit: return "max_redirects";
        case Violation::RateLimitExcessive: return "max_retry_after";
        case Violation::BombDetected: return "max_decompress_ratio";
        case Violation::VrpBudgetExceeded: return "max_vrps";
        case Violation::PathTooLong: return "max_path_len";
        case Violation::PathTraversal: return "check_paths";
        case Violation::XmlRejected: return "xml";
        case Violation::HintLimit: return "hints";
    }
    return "?";
}

void CancelToken::cancel() {
    std::vector<std::function<void()>> fns;
    {
        std::lock_guard lock(mu_);
        if (cancelled_.exchange(true)) return;
        for (auto& [_, fn] : callbacks_) fns.push_back(fn);
    }
    cv_.notify_all();
    for (auto& fn : fns) fn();
}

bool CancelToken::sleep_for(std::chrono::duration<double> d) {
    std::unique_lock lock(mu_);
    return !cv_.wait_for(lock, d, [this] { return cancelled_.load(); });
}

std::size_t CancelToken::on_cancel(std::function<void()> fn) {
    std::unique_lock lock(mu_);
    std::size_t h = next_++;
    if (cancelled_.load()) {
        lock.unlock();
        fn();
        return h;
    }
    callbacks_.emplace(h, std::move(fn));
    return h;
}

void CancelToken::unregister(std::size_t handle) {
    std::lock_guard lock(mu_);
    callbacks_.erase(handle);
}

bool ValidationOutcome::has(Violation v) const { return find(v) != nullptr; }

const ViolationRecord* ValidationOutcome::find(Violation v) const {
    for (const auto& r : violations)
        if (r.kind == v) return &r;
    return nullptr;
}

nlohmann::json ValidationOutcome::to_json() const {
    nlohmann::json j;
    j["vrp_count"] = vrps.size();
    j["warnings"] = warnings;
    nlohmann::json vs = nlohmann::json::array();
    for (const auto& v : violations)
        vs.push_back({{"kind", to_string(v.kind)},
                      {"limit", limit_name(v.kind)},
                      {"measured", v.measured},
                      {"uri", v.uri},
                      {"detail", v.detail}});
    j["violations"] = vs;
    j["repos_visited"] = repos_visited;
    j["bytes_fetched"] = bytes_fetched;
    j["bytes_decompressed"] = bytes_decompressed;
    j["elapsed"] = elapsed;
    j["partial"] = partial;
    j["cancelled"] = cancelled;
    j["max_depth_reached"] = max_depth_reached;
    j["redirects_followed"] = redirects_followed;
    j["longest_wait"] = longest_wait;
    j["longest_transfer"] = longest_transfer;
    j["largest_uri"] = largest_uri;
    j["files_written"] = files_written.size();
    return j;
}

std::string_view to_string(RouteValidity v) {
    switch (v) {
        case RouteValidity::Valid: return "VALID";
        case RouteValidity::Invalid: return "INVALID";
        case RouteValidity::Unknown: return "UNKNOWN";
    }
    return "?";
}

RouteValidity classify(const IpPrefix& announced, std::uint32_t origin_asn, const std::vector<Vrp>& vrps) {
    bool covered = false;
    for (const auto& v : vrps) {
        if (v.prefix.family != announced.family || !v.prefix.contains(announced)) continue;
        covered = true;
        if (v.asn != 0 && v.asn == origin_asn && announced.length <= v.max_length) return RouteValidity::Valid;
    }
    return covered ? RouteValidity::Invalid : RouteValidity::Unknown;
}

std::string vrps_csv(const std::vector<Vrp>& vrps) {
    std::string out = "prefix,max_length,asn\n";
    for (const auto& v : vrps)
        out += v.prefix.to_string() + "," + std::to_string(v.max_length) + ",AS" + std::to_string(v.asn) + "\n";
    return out;
}

int exit_code(const ValidationOutcome& o) { return o.violations.empty() ? 0 : 2; }

}  // namespace gauntlet
