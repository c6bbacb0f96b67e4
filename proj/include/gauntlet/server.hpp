// HTTPS front end of the testbed.
//
// Terminates TLS, routes each connection to a test instance by SNI, serves
// the scenario engine's resources while applying their HttpBehavior, and
// keeps an append-only observation log per instance.

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gauntlet/scenario.hpp"

namespace gauntlet {

struct Observation {
    enum class Kind { Fetch, CallbackHit, BytesServed, ConnectionHeld };
    std::string instance_uuid;
    double timestamp = 0;  // Unix seconds
    Kind kind = Kind::Fetch;
    std::string path;      // Fetch, BytesServed, ConnectionHeld
    int depth = -1;        // Fetch: node depth, -1 outside the tree
    std::string source;    // CallbackHit: peer address
    std::uint64_t bytes = 0;
    double duration = 0;   // ConnectionHeld, seconds

    nlohmann::json to_json() const;
    static Observation from_json(const nlohmann::json& j);
};

std::string_view to_string(Observation::Kind k);

class UnknownInstance : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PortInUse : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thread-safe append-only log. With a directory set, every record is also
// appended to <dir>/<uuid>.jsonl.
class ObservationLog {
public:
    explicit ObservationLog(std::filesystem::path dir = {});

    void append(Observation o);
    std::vector<Observation> snapshot(const std::string& uuid) const;
    std::size_t count(const std::string& uuid, Observation::Kind kind) const;
    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    mutable std::mutex mu_;
    std::map<std::string, std::vector<Observation>> records_;
    std::map<std::string, std::ofstream> files_;
};

// Reads a persisted log; an absent file is an empty log.
std::vector<Observation> read_observations(const std::filesystem::path& dir, const std::string& uuid);

// PEM encoded certificate and private key.
struct TlsIdentity {
    std::string cert_pem;
    std::string key_pem;
};

// Self-signed ECDSA P-256 certificate for "*.<domain>" and "<domain>".
TlsIdentity make_self_signed(const std::string& base_domain);

struct ServerConfig {
    std::string listen_host = "127.0.0.1";
    std::uint16_t port = 0;  // 0 picks a free port
    std::string base_domain = "example.org";
    std::filesystem::path tls_cert;  // empty: generate a self-signed identity
    std::filesystem::path tls_key;
    std::filesystem::path obs_dir;
    unsigned trickle_cap = 256;
    unsigned extra_threads = 32;
};

class AttackServer {
public:
    AttackServer(ServerConfig config, InstanceRegistry& registry, ScenarioEngine& engine);
    ~AttackServer();
    AttackServer(const AttackServer&) = delete;
    AttackServer& operator=(const AttackServer&) = delete;

    // Binds and serves on a background thread. Throws PortInUse.
    void start();
    void stop();
    // Blocks until stop() is called from elsewhere.
    void wait();
    std::uint16_t port() const { return port_; }
    bool running() const;

    // Instance routed for an SNI name; UnknownInstance when not registered.
    TestInstance route(std::string_view sni_hostname) const;

    ObservationLog& log() { return log_; }
    // Throws UnknownInstance.
    std::vector<Observation> observations(const std::string& uuid) const;
    unsigned active_trickles() const { return trickles_.load(); }

private:
    struct Impl;
    ServerConfig config_;
    InstanceRegistry& registry_;
    ScenarioEngine& engine_;
    ObservationLog log_;
    std::unique_ptr<Impl> impl_;
    std::thread thread_;
    std::uint16_t port_ = 0;
    std::atomic<unsigned> trickles_{0};
    std::shared_ptr<std::atomic<bool>> stopping_;
};

}  // namespace gauntlet
