// Deterministic generation of the fifteen adversarial repository scenarios.
//
// Every resource is a pure function of (TestInstance, request path). Nothing
// per node is stored; publication points are regenerated on demand and kept
// in a bounded cache.

#pragma once

#include <array>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gauntlet/objects.hpp"

namespace gauntlet {

enum class TestId : char {
    A = 'A', B = 'B', C = 'C', D = 'D', E = 'E', F = 'F', G = 'G', H = 'H',
    I = 'I', J = 'J', K = 'K', L = 'L', M = 'M', N = 'N', O = 'O',
};

const std::array<TestId, 15>& all_tests();
char letter(TestId t);
// Accepts "A".."O" in either case; throws std::invalid_argument otherwise.
TestId parse_test_id(std::string_view s);
std::string_view describe(TestId t);

struct TestParams {
    unsigned width = 1;
    std::optional<unsigned> depth;  // nullopt: unbounded
    std::uint64_t roa_count = 1;
    std::uint64_t page_size = 1000;
    std::uint64_t payload_size = 0;
    double trickle_rate = 3.0;
    std::uint64_t retry_after = 86400;
    std::optional<std::uint64_t> redirect_hops;  // nullopt: unbounded
    unsigned entity_levels = 9;
    std::uint64_t path_len = 4u << 20;
    // Benign tree for the letter: RFC-conformant, validates without warnings.
    bool control = false;
    bool fast_keys = false;

    static TestParams defaults(TestId t);
    // Small benign configuration of the same shape.
    static TestParams control_profile(TestId t);

    // key=value; "unbounded" is accepted for depth and redirect_hops.
    void set(std::string_view key, std::string_view value);
    // Throws std::invalid_argument when a present field is not positive.
    void validate() const;
    KeyStrength key_strength() const { return fast_keys ? KeyStrength::Fast : KeyStrength::Rsa2048; }

    nlohmann::json to_json() const;
    static TestParams from_json(const nlohmann::json& j);
};

struct TestInstance {
    TestId test = TestId::A;
    std::string uuid;
    std::string hostname;
    std::string base_domain;
    std::uint16_t port = 443;
    TimePoint created_at;
    TestParams params;

    // "https://<hostname>[:port]"
    std::string https_origin() const;
    // "rsync://<hostname>/<hostname>/"
    std::string rsync_module() const;
    std::string tal_text() const;

    nlohmann::json to_json() const;
    static TestInstance from_json(const nlohmann::json& j);
};

std::string make_hostname(TestId t, std::string_view uuid, std::string_view base_domain);
std::string random_uuid();

struct NodeAddress {
    std::vector<std::uint32_t> child_indices;

    std::size_t depth() const { return child_indices.size(); }
    bool is_root() const { return child_indices.empty(); }
    NodeAddress child(std::uint32_t i) const;
    NodeAddress parent() const;
    // "0.3.1"; the root is "".
    std::string to_path() const;
    static std::optional<NodeAddress> parse(std::string_view path);
    bool is_ancestor_of(const NodeAddress& other) const;  // strict
    auto operator<=>(const NodeAddress&) const = default;
};

struct HttpBehavior {
    enum class Kind { Normal, RateLimit, RedirectChain, GzipBomb, Trickle, Huge };
    Kind kind = Kind::Normal;
    std::uint64_t retry_after = 0;       // RateLimit
    std::uint64_t hop = 0;               // RedirectChain: hop being served
    std::uint64_t compressed_len = 0;    // GzipBomb
    std::uint64_t decompressed_len = 0;  // GzipBomb
    double rate = 0;                     // Trickle, bytes per second
    std::uint64_t total_len = 0;         // Huge

    static HttpBehavior normal() { return {}; }
};

std::string_view to_string(HttpBehavior::Kind k);

struct GeneratedResource {
    int status = 200;
    std::string media_type = "application/octet-stream";
    Bytes body;  // empty for Huge, which is streamed from stream_seed
    HttpBehavior behavior;
    std::string location;  // absolute URI for redirects
    Seed stream_seed{};
    bool callback = false;  // request hit the XXE callback endpoint

    static GeneratedResource not_found();
};

// Deterministic pseudorandom stream for Huge bodies.
class PayloadStream {
public:
    explicit PayloadStream(const Seed& seed);
    void fill(std::uint8_t* out, std::size_t n);

private:
    std::mt19937_64 rng_;
    std::uint64_t buffer_ = 0;
    unsigned available_ = 0;
};

struct RepoFile {
    std::string name;
    std::string uri;
    Bytes body;
};

struct PublicationPoint {
    NodeAddress node;
    std::string repo_uri;
    std::string notification_uri;
    std::string snapshot_uri;
    std::string cert_uri;   // where this CA's own certificate is published
    Bytes cert;
    std::vector<RepoFile> files;  // publish order; manifest last
    std::vector<std::uint32_t> children;
    Bytes snapshot;
    Bytes notification;
};

// Gzip stream of `decompressed_len` zero bytes at maximum compression.
// Cached per size.
std::shared_ptr<const Bytes> gzip_zero_bomb(std::uint64_t decompressed_len);

class InstanceRegistry {
public:
    // Records are persisted under state_dir/instances when set, and loaded
    // lazily on lookup misses so separate processes share instances.
    explicit InstanceRegistry(std::filesystem::path state_dir = {});

    void add(const TestInstance& inst);
    // Case-insensitive hostname lookup.
    std::optional<TestInstance> by_hostname(std::string_view host) const;
    std::optional<TestInstance> by_uuid(std::string_view uuid) const;
    std::vector<TestInstance> list() const;
    const std::filesystem::path& state_dir() const { return state_dir_; }

private:
    std::optional<TestInstance> load(std::string_view uuid) const;
    std::filesystem::path state_dir_;
    mutable std::shared_mutex mu_;
    mutable std::map<std::string, TestInstance> by_host_;
    mutable std::map<std::string, std::string> host_of_uuid_;
};

TestInstance new_instance(InstanceRegistry& registry, TestId test, TestParams params,
                          std::string base_domain = "example.org", std::uint16_t port = 443,
                          std::optional<TimePoint> created_at = std::nullopt);

class NotFound : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Stateless generator front end with a bounded publication point cache.
class ScenarioEngine {
public:
    explicit ScenarioEngine(std::size_t cache_capacity = 256);

    GeneratedResource resolve(const TestInstance& inst, std::string_view request_path);

    // Publication point of `node`, or NotFound if the node is not part of
    // the instance's tree.
    std::shared_ptr<const PublicationPoint> publication_point(const TestInstance& inst, const NodeAddress& node);

    // Tests A and H: the publication point content of a chain/tree node.
    std::shared_ptr<const PublicationPoint> gen_chain(const TestInstance& inst, const NodeAddress& node);
    // Tests F, I, J, K: the attack signed objects. J/K return every ROA of
    // the instance; use roa_page for large counts.
    std::vector<SignedObjectBundle> gen_roa_attack(const TestInstance& inst, TestId kind);
    std::vector<SignedObjectBundle> roa_page(const TestInstance& inst, std::uint64_t page);
    // Tests G and M.
    GeneratedResource gen_xml_attack(const TestInstance& inst, TestId kind);
    // Tests N and O.
    GeneratedResource gen_path_attack(const TestInstance& inst, TestId kind);
    // Tests B, C, D, E, L; Normal otherwise.
    HttpBehavior http_behavior_for(const TestInstance& inst) const;

    Bytes root_certificate(const TestInstance& inst);

    // Number of children of `node` and whether it exists at all.
    std::optional<std::vector<std::uint32_t>> children_of(const TestInstance& inst, const NodeAddress& node) const;

private:
    std::shared_ptr<const PublicationPoint> build(const TestInstance& inst, const NodeAddress& node);

    std::size_t capacity_;
    std::mutex mu_;
    std::list<std::pair<std::string, std::shared_ptr<const PublicationPoint>>> lru_;
    std::map<std::string, decltype(lru_)::iterator> index_;
};

// The node attacked by the letter (the attacker-operated CA below the root).
NodeAddress attack_node();

// RRDP helpers shared with the mini relying party and tests.
namespace rrdp {
inline constexpr std::string_view kNamespace = "http://www.ripe.net/rpki/rrdp";
std::string session_id_for(std::string_view uuid, const NodeAddress& node);
std::string xml_escape(std::string_view s);
Bytes notification_xml(std::string_view session_id, std::uint64_t serial, std::string_view snapshot_uri,
                       const Sha256Digest& snapshot_hash);
Bytes snapshot_xml(std::string_view session_id, std::uint64_t serial, const std::vector<RepoFile>& files);
}  // namespace rrdp

// Deterministic enumeration of the /48 subprefixes used by test K:
// index 0 is the /48 itself, then both /49s, then the four /50s, ...
IpPrefix k_prefix(std::uint64_t index);

}  // namespace gauntlet
