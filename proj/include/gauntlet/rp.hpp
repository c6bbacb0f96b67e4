// Budget-enforcing relying party.
//
// Traverses a trust tree breadth first from a TAL, fetching each CA's
// repository over RRDP (or from a local rsync mirror), validates manifests,
// CRLs, certificates and ROAs, and emits VRPs. Every resource limit a
// hostile repository can probe is enforced here and can be disabled
// individually to model an unguarded implementation.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gauntlet/objects.hpp"
#include "gauntlet/scenario.hpp"

namespace gauntlet {

struct ResourceBudget {
    std::optional<unsigned> max_depth = 12;
    std::optional<std::uint64_t> max_repos = 5000;
    std::optional<std::uint64_t> max_total_bytes = 2ull << 30;
    std::optional<std::uint64_t> max_object_bytes = 20ull << 20;
    std::optional<double> max_wall_time = 1800;   // seconds
    std::optional<double> min_transfer_rate = 1024;  // bytes/second over stall_window
    std::optional<unsigned> max_redirects = 5;
    std::optional<std::uint64_t> max_retry_after = 600;  // seconds
    std::optional<double> max_decompress_ratio = 10;
    std::optional<std::uint64_t> max_vrps = 2000000;
    std::optional<std::uint64_t> max_path_len = 64u << 10;
    bool hints_enabled = false;
    // Publish URIs are normalized and confined to their repository root.
    bool check_paths = true;
    // Certificates with moduli below 2048 bits are accepted.
    bool accept_fast_keys = false;
    double stall_window = 10;

    static ResourceBudget defaults() { return {}; }
    // Every limit disabled and path checks off.
    static ResourceBudget unlimited();

    // key=value with "off" disabling a limit.
    void set(std::string_view key, std::string_view value);
    // One key=value per line; '#' comments.
    void load_config(const std::filesystem::path& file);
    void validate() const;
    nlohmann::json to_json() const;
};

struct Vrp {
    IpPrefix prefix;
    unsigned max_length = 0;
    std::uint32_t asn = 0;
    auto operator<=>(const Vrp&) const = default;
};

std::string to_string(const Vrp& v);

struct TreeHint {
    NodeAddress node;
    std::uint64_t max_descendants = 0;
};

// Minimum over hints placed on `node` or any of its ancestors.
std::optional<std::uint64_t> effective_limit(const std::vector<TreeHint>& hints, const NodeAddress& node);

enum class Violation {
    DepthLimit,
    RepoLimit,
    ByteBudgetExceeded,
    ObjectTooLarge,
    WallTimeExceeded,
    StallDetected,
    RedirectLimit,
    RateLimitExcessive,
    BombDetected,
    VrpBudgetExceeded,
    PathTooLong,
    PathTraversal,
    XmlRejected,
    HintLimit,
};

std::string_view to_string(Violation v);
// Budget field the violation belongs to ("max_depth", ...).
std::string_view limit_name(Violation v);

struct ViolationRecord {
    Violation kind = Violation::DepthLimit;
    double measured = 0;
    std::string uri;
    std::string detail;
};

// Raised inside a fetch or parse for conditions that skip one repository.
class RepositoryViolation : public std::runtime_error {
public:
    RepositoryViolation(Violation kind, double measured, const std::string& detail)
        : std::runtime_error(detail), kind(kind), measured(measured) {}
    Violation kind;
    double measured;
};

// Raised for conditions that halt the whole run.
class BudgetHalt : public std::runtime_error {
public:
    BudgetHalt(Violation kind, double measured, const std::string& detail)
        : std::runtime_error(detail), kind(kind), measured(measured) {}
    Violation kind;
    double measured;
};

class TalUnreachable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operational failure of one fetch (connection refused, 404, ...).
class FetchFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Cooperative cancellation with interruptible sleeps.
class CancelToken {
public:
    void cancel();
    bool cancelled() const { return cancelled_.load(); }
    // Returns false when cancelled before the duration elapsed.
    bool sleep_for(std::chrono::duration<double> d);
    // Called on cancel(); returns a handle for unregister.
    std::size_t on_cancel(std::function<void()> fn);
    void unregister(std::size_t handle);

private:
    std::atomic<bool> cancelled_{false};
    std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::size_t, std::function<void()>> callbacks_;
    std::size_t next_ = 0;
};

class Cancelled : public std::runtime_error {
public:
    Cancelled() : std::runtime_error("cancelled") {}
};

struct FetchEvent {
    std::string uri;
    std::size_t depth = 0;
    std::string node;
};

struct ValidationOutcome {
    std::vector<Vrp> vrps;
    std::vector<std::string> warnings;
    std::vector<ViolationRecord> violations;
    std::uint64_t repos_visited = 0;
    std::uint64_t bytes_fetched = 0;       // bytes received on the wire
    std::uint64_t bytes_decompressed = 0;  // bytes after content decoding
    double elapsed = 0;
    bool partial = false;
    bool cancelled = false;
    unsigned max_depth_reached = 0;
    std::uint64_t redirects_followed = 0;
    double longest_wait = 0;         // seconds spent honouring Retry-After
    double longest_transfer = 0;     // seconds of the slowest single transfer
    std::uint64_t largest_uri = 0;   // longest publish URI accepted
    std::vector<std::string> files_written;  // cache paths, when caching
    std::vector<FetchEvent> fetches;  // repositories in retrieval order

    bool has(Violation v) const;
    const ViolationRecord* find(Violation v) const;
    nlohmann::json to_json() const;
};

struct RpOptions {
    // Connect to this address for every hostname (testbed DNS override).
    std::optional<std::string> connect_address;
    // Port used when a URI names none.
    std::uint16_t default_https_port = 443;
    // Local rsync mirror: module name -> directory. When set, repositories
    // are read from disk instead of RRDP.
    std::map<std::string, std::filesystem::path> rsync_mirror;
    // When set, published files are written below cache_dir. Nothing is
    // ever written outside cache_jail (defaults to cache_dir).
    std::filesystem::path cache_dir;
    std::filesystem::path cache_jail;
    std::vector<TreeHint> hints;
    CancelToken* cancel = nullptr;
    TimePoint now{};  // validation time; zero means the wall clock
    double connect_timeout = 5;
};

struct Publish {
    std::string uri;
    Bytes body;
};

struct Notification {
    std::string session_id;
    std::uint64_t serial = 0;
    std::string snapshot_uri;
    std::string snapshot_hash;
};

// Streaming XML parsing of RRDP documents. DTDs and entity declarations are
// rejected outright; only the predefined and numeric character references
// are understood. External references are never dereferenced.
Notification parse_notification(ByteView xml, const ResourceBudget& budget);
std::vector<Publish> parse_snapshot(ByteView xml, const ResourceBudget& budget);

// Resolves "." and ".." in the path of an rsync URI. Returns nullopt when
// the path would climb above the module root ("rsync://host/module/").
std::optional<std::string> normalize_rsync_uri(std::string_view uri);

// Shared accounting for one validation run.
struct Accounting {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::uint64_t bytes_fetched = 0;
    std::uint64_t bytes_decompressed = 0;
    std::uint64_t redirects_followed = 0;
    double longest_wait = 0;
    double longest_transfer = 0;
    CancelToken* cancel = nullptr;

    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

// HTTPS GET with every per-fetch defense applied.
Bytes fetch_one(const std::string& uri, const ResourceBudget& budget, Accounting& accounting,
                const RpOptions& options);

ValidationOutcome validate(const Tal& tal, const ResourceBudget& budget, const RpOptions& options = {});

enum class RouteValidity { Valid, Invalid, Unknown };
std::string_view to_string(RouteValidity v);

RouteValidity classify(const IpPrefix& announced, std::uint32_t origin_asn, const std::vector<Vrp>& vrps);

// "prefix,max_length,asn" with a header line.
std::string vrps_csv(const std::vector<Vrp>& vrps);

// 0 clean, 2 budget violation.
int exit_code(const ValidationOutcome& o);

}  // namespace gauntlet
