#include "gauntlet/server.hpp"

#include <algorithm>
#include <chrono>

#include <httplib.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>

namespace gauntlet {
namespace {

double unix_now() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

int path_depth(std::string_view path) {
    if (path == "/notification.xml" || path == "/snapshot.xml" || path.rfind("/ta/", 0) == 0) return 0;
    if (path.rfind("/node/", 0) != 0) return -1;
    std::string_view rest = path.substr(6);
    auto node = NodeAddress::parse(rest.substr(0, rest.find('/')));
    return node ? static_cast<int>(node->depth()) : -1;
}

Observation event(const std::string& uuid, Observation::Kind kind, const std::string& path) {
    Observation o;
    o.instance_uuid = uuid;
    o.kind = kind;
    o.path = path;
    return o;
}

[[noreturn]] void ssl_fail(const char* what) { throw std::runtime_error(std::string("TLS setup failed: ") + what); }

template <class T, void (*Free)(T*)>
using Owned = std::unique_ptr<T, decltype([](T* p) { Free(p); })>;

std::string bio_string(BIO* bio) {
    char* data = nullptr;
    long n = BIO_get_mem_data(bio, &data);
    return std::string(data, static_cast<std::size_t>(n));
}

// Sleeps in short slices so server shutdown is not held up.
bool nap(double seconds, const std::atomic<bool>& stopping) {
    auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
    while (std::chrono::steady_clock::now() < until) {
        if (stopping.load()) return false;
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
        std::this_thread::sleep_for(std::min(left + std::chrono::milliseconds(1), std::chrono::milliseconds(50)));
    }
    return !stopping.load();
}

}  // namespace

std::string_view to_string(Observation::Kind k) {
    switch (k) {
        case Observation::Kind::Fetch: return "FETCH";
        case Observation::Kind::CallbackHit: return "CALLBACK_HIT";
        case Observation::Kind::BytesServed: return "BYTES_SERVED";
        case Observation::Kind::ConnectionHeld: return "CONNECTION_HELD";
    }
    return "?";
}

nlohmann::json Observation::to_json() const {
    nlohmann::json j = {{"instance", instance_uuid}, {"ts", timestamp}, {"event", to_string(kind)}};
    switch (kind) {
        case Kind::Fetch:
            j["path"] = path;
            j["depth"] = depth;
            break;
        case Kind::CallbackHit:
            j["path"] = path;
            j["source"] = source;
            break;
        case Kind::BytesServed:
            j["path"] = path;
            j["bytes"] = bytes;
            break;
        case Kind::ConnectionHeld:
            j["path"] = path;
            j["bytes"] = bytes;
            j["duration"] = duration;
            break;
    }
    return j;
}

Observation Observation::from_json(const nlohmann::json& j) {
    Observation o;
    o.instance_uuid = j.at("instance").get<std::string>();
    o.timestamp = j.at("ts").get<double>();
    std::string ev = j.at("event").get<std::string>();
    if (ev == "FETCH") o.kind = Kind::Fetch;
    else if (ev == "CALLBACK_HIT") o.kind = Kind::CallbackHit;
    else if (ev == "BYTES_SERVED") o.kind = Kind::BytesServed;
    else if (ev == "CONNECTION_HELD") o.kind = Kind::ConnectionHeld;
    else throw std::invalid_argument("unknown observation event " + ev);
    o.path = j.value("path", "");
    o.depth = j.value("depth", -1);
    o.source = j.value("source", "");
    o.bytes = j.value("bytes", std::uint64_t{0});
    o.duration = j.value("duration", 0.0);
    return o;
}

ObservationLog::ObservationLog(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
}

void ObservationLog::append(Observation o) {
    if (o.timestamp == 0) o.timestamp = unix_now();
    std::lock_guard lock(mu_);
    if (!dir_.empty()) {
        auto it = files_.find(o.instance_uuid);
        if (it == files_.end())
            it = files_.emplace(o.instance_uuid, std::ofstream(dir_ / (o.instance_uuid + ".jsonl"), std::ios::app)).first;
        it->second << o.to_json().dump() << '\n';
        it->second.flush();
    }
    records_[o.instance_uuid].push_back(std::move(o));
}

std::vector<Observation> ObservationLog::snapshot(const std::string& uuid) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(uuid);
    return it == records_.end() ? std::vector<Observation>{} : it->second;
}

std::size_t ObservationLog::count(const std::string& uuid, Observation::Kind kind) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(uuid);
    if (it == records_.end()) return 0;
    return static_cast<std::size_t>(
        std::count_if(it->second.begin(), it->second.end(), [&](const Observation& o) { return o.kind == kind; }));
}

std::vector<Observation> read_observations(const std::filesystem::path& dir, const std::string& uuid) {
    std::vector<Observation> out;
    std::ifstream in(dir / (uuid + ".jsonl"));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(Observation::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception&) {
            // A torn final line from a crashed writer.
        }
    }
    return out;
}

TlsIdentity make_self_signed(const std::string& base_domain) {
    Owned<EVP_PKEY, EVP_PKEY_free> key(EVP_PKEY_Q_keygen(nullptr, nullptr, "EC", "P-256"));
    if (!key) ssl_fail("key generation");
    Owned<X509, X509_free> cert(X509_new());
    X509_set_version(cert.get(), 2);
    std::uint8_t serial[16];
    Seed s = seed_for(base_domain, "tls");
    std::copy_n(s.begin(), sizeof serial, serial);
    serial[0] &= 0x7f;
    Owned<BIGNUM, BN_free> bn(BN_bin2bn(serial, sizeof serial, nullptr));
    BN_to_ASN1_INTEGER(bn.get(), X509_get_serialNumber(cert.get()));
    X509_gmtime_adj(X509_getm_notBefore(cert.get()), -3600);
    X509_gmtime_adj(X509_getm_notAfter(cert.get()), 365L * 86400);
    X509_set_pubkey(cert.get(), key.get());
    X509_NAME* name = X509_get_subject_name(cert.get());
    X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>(base_domain.c_str()),
                               -1, -1, 0);
    X509_set_issuer_name(cert.get(), name);
    X509V3_CTX ctx;
    X509V3_set_ctx_nodb(&ctx);
    X509V3_set_ctx(&ctx, cert.get(), cert.get(), nullptr, nullptr, 0);
    std::string san = "DNS:*." + base_domain + ",DNS:" + base_domain;
    X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, NID_subject_alt_name, san.c_str());
    if (!ext) ssl_fail("subjectAltName");
    X509_add_ext(cert.get(), ext, -1);
    X509_EXTENSION_free(ext);
    if (!X509_sign(cert.get(), key.get(), EVP_sha256())) ssl_fail("signing");

    TlsIdentity id;
    Owned<BIO, BIO_free_all> cbio(BIO_new(BIO_s_mem()));
    PEM_write_bio_X509(cbio.get(), cert.get());
    id.cert_pem = bio_string(cbio.get());
    Owned<BIO, BIO_free_all> kbio(BIO_new(BIO_s_mem()));
    PEM_write_bio_PrivateKey(kbio.get(), key.get(), nullptr, nullptr, 0, nullptr, nullptr);
    id.key_pem = bio_string(kbio.get());
    return id;
}

struct AttackServer::Impl {
    std::unique_ptr<httplib::SSLServer> http;
};

namespace {

int servername_cb(SSL* ssl, int* alert, void* arg) {
    auto* server = static_cast<AttackServer*>(arg);
    const char* name = SSL_get_servername(ssl, TLSEXT_NAMETYPE_host_name);
    if (!name) {
        *alert = SSL_AD_UNRECOGNIZED_NAME;
        return SSL_TLSEXT_ERR_ALERT_FATAL;
    }
    try {
        server->route(name);
        return SSL_TLSEXT_ERR_OK;
    } catch (const UnknownInstance&) {
        *alert = SSL_AD_UNRECOGNIZED_NAME;
        return SSL_TLSEXT_ERR_ALERT_FATAL;
    }
}

}  // namespace

AttackServer::AttackServer(ServerConfig config, InstanceRegistry& registry, ScenarioEngine& engine)
    : config_(std::move(config)),
      registry_(registry),
      engine_(engine),
      log_(config_.obs_dir),
      impl_(std::make_unique<Impl>()),
      stopping_(std::make_shared<std::atomic<bool>>(false)) {}

AttackServer::~AttackServer() { stop(); }

TestInstance AttackServer::route(std::string_view sni_hostname) const {
    auto inst = registry_.by_hostname(lower(sni_hostname));
    if (!inst) throw UnknownInstance("no test instance for " + std::string(sni_hostname));
    return *inst;
}

std::vector<Observation> AttackServer::observations(const std::string& uuid) const {
    if (!registry_.by_uuid(uuid)) throw UnknownInstance("unknown instance " + uuid);
    return log_.snapshot(uuid);
}

bool AttackServer::running() const { return impl_->http && impl_->http->is_running(); }

void AttackServer::start() {
    TlsIdentity identity;
    if (config_.tls_cert.empty()) identity = make_self_signed(config_.base_domain);

    auto setup = [this, identity](SSL_CTX& ctx) {
        SSL_CTX_set_options(&ctx, SSL_OP_NO_COMPRESSION | SSL_OP_NO_SESSION_RESUMPTION_ON_RENEGOTIATION);
        SSL_CTX_set_min_proto_version(&ctx, TLS1_2_VERSION);
        if (!config_.tls_cert.empty()) {
            if (SSL_CTX_use_certificate_chain_file(&ctx, config_.tls_cert.c_str()) != 1 ||
                SSL_CTX_use_PrivateKey_file(&ctx, config_.tls_key.c_str(), SSL_FILETYPE_PEM) != 1)
                return false;
        } else {
            Owned<BIO, BIO_free_all> cbio(BIO_new_mem_buf(identity.cert_pem.data(), static_cast<int>(identity.cert_pem.size())));
            Owned<BIO, BIO_free_all> kbio(BIO_new_mem_buf(identity.key_pem.data(), static_cast<int>(identity.key_pem.size())));
            Owned<X509, X509_free> cert(PEM_read_bio_X509(cbio.get(), nullptr, nullptr, nullptr));
            Owned<EVP_PKEY, EVP_PKEY_free> key(PEM_read_bio_PrivateKey(kbio.get(), nullptr, nullptr, nullptr));
            if (!cert || !key || SSL_CTX_use_certificate(&ctx, cert.get()) != 1 ||
                SSL_CTX_use_PrivateKey(&ctx, key.get()) != 1)
                return false;
        }
        SSL_CTX_set_tlsext_servername_callback(&ctx, servername_cb);
        SSL_CTX_set_tlsext_servername_arg(&ctx, this);
        return true;
    };
    impl_->http = std::make_unique<httplib::SSLServer>(setup);
    auto& http = *impl_->http;
    if (!http.is_valid()) throw std::runtime_error("TLS identity could not be loaded");

    const unsigned threads = config_.trickle_cap + config_.extra_threads;
    http.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    http.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
    });
    http.set_keep_alive_max_count(100);
    http.set_read_timeout(30);
    http.set_write_timeout(30);
    http.set_payload_max_length(1 << 20);

    http.Get(".*", [this](const httplib::Request& req, httplib::Response& res) {
        const char* sni = req.ssl ? SSL_get_servername(req.ssl, TLSEXT_NAMETYPE_host_name) : nullptr;
        std::optional<TestInstance> inst;
        if (sni) inst = registry_.by_hostname(lower(sni));
        if (!inst) {
            res.status = 421;
            res.set_content("unknown instance\n", "text/plain");
            return;
        }
        const std::string uuid = inst->uuid;
        Observation fetch = event(uuid, Observation::Kind::Fetch, req.path);
        fetch.depth = path_depth(req.path);
        log_.append(fetch);
        GeneratedResource r = engine_.resolve(*inst, req.path);
        if (r.callback) {
            Observation o = event(uuid, Observation::Kind::CallbackHit, req.path);
            o.source = req.remote_addr;
            log_.append(o);
        }
        res.status = r.status;
        using K = HttpBehavior::Kind;
        switch (r.behavior.kind) {
            case K::RateLimit:
                res.set_header("Retry-After", std::to_string(r.behavior.retry_after));
                break;
            case K::RedirectChain:
                if (!r.location.empty()) res.set_header("Location", r.location);
                break;
            case K::GzipBomb:
                res.set_header("Content-Encoding", "gzip");
                break;
            default:
                break;
        }
        if (r.status == 302 && !r.location.empty()) res.set_header("Location", r.location);

        auto stopping = stopping_;
        const std::string path = req.path;
        if (r.behavior.kind == K::Trickle && r.status == 200) {
            if (trickles_.load() >= config_.trickle_cap) {
                res.status = 503;
                res.set_header("Retry-After", "60");
                res.set_content("trickle capacity exhausted\n", "text/plain");
                return;
            }
            ++trickles_;
            auto body = std::make_shared<Bytes>(std::move(r.body));
            const double rate = r.behavior.rate > 0 ? r.behavior.rate : 1.0;
            const double tick = std::max(1.0 / rate, 0.05);
            auto sent = std::make_shared<std::uint64_t>(0);
            auto credit = std::make_shared<double>(0);
            auto started = std::chrono::steady_clock::now();
            res.set_chunked_content_provider(
                r.media_type,
                [body, rate, tick, sent, credit, stopping](std::size_t offset, httplib::DataSink& sink) {
                    if (offset >= body->size()) {
                        sink.done();
                        return true;
                    }
                    if (!nap(tick, *stopping)) return false;
                    *credit += rate * tick;
                    auto n = std::min<std::size_t>(static_cast<std::size_t>(*credit), body->size() - offset);
                    if (n == 0) return true;
                    *credit -= static_cast<double>(n);
                    if (!sink.write(reinterpret_cast<const char*>(body->data() + offset), n)) return false;
                    *sent += n;
                    return true;
                },
                [this, uuid, path, sent, started](bool) {
                    double held = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
                    Observation o = event(uuid, Observation::Kind::ConnectionHeld, path);
                    o.bytes = *sent;
                    o.duration = held;
                    log_.append(o);
                    Observation b = event(uuid, Observation::Kind::BytesServed, path);
                    b.bytes = *sent;
                    log_.append(b);
                    --trickles_;
                });
            return;
        }
        if (r.behavior.kind == K::Huge && r.status == 200) {
            auto stream = std::make_shared<PayloadStream>(r.stream_seed);
            auto sent = std::make_shared<std::uint64_t>(0);
            auto started = std::chrono::steady_clock::now();
            res.set_content_provider(
                static_cast<std::size_t>(r.behavior.total_len), r.media_type,
                [stream, sent, stopping](std::size_t, std::size_t length, httplib::DataSink& sink) {
                    if (stopping->load()) return false;
                    std::uint8_t buf[65536];
                    std::size_t n = std::min(length, sizeof buf);
                    stream->fill(buf, n);
                    if (!sink.write(reinterpret_cast<const char*>(buf), n)) return false;
                    *sent += n;
                    return true;
                },
                [this, uuid, path, sent, started](bool) {
                    Observation o = event(uuid, Observation::Kind::ConnectionHeld, path);
                    o.bytes = *sent;
                    o.duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
                    log_.append(o);
                    Observation b = event(uuid, Observation::Kind::BytesServed, path);
                    b.bytes = *sent;
                    log_.append(b);
                });
            return;
        }
        Observation b = event(uuid, Observation::Kind::BytesServed, path);
        b.bytes = r.body.size();
        res.set_content(reinterpret_cast<const char*>(r.body.data()), r.body.size(), r.media_type);
        log_.append(b);
    });

    if (config_.port == 0) {
        int p = http.bind_to_any_port(config_.listen_host);
        if (p <= 0) throw PortInUse("cannot bind " + config_.listen_host);
        port_ = static_cast<std::uint16_t>(p);
    } else {
        if (!http.bind_to_port(config_.listen_host, config_.port))
            throw PortInUse("port " + std::to_string(config_.port) + " on " + config_.listen_host + " is in use");
        port_ = config_.port;
    }
    stopping_->store(false);
    thread_ = std::thread([&http] { http.listen_after_bind(); });
    http.wait_until_ready();
}

void AttackServer::stop() {
    stopping_->store(true);
    if (impl_->http) impl_->http->stop();
    if (thread_.joinable()) thread_.join();
}

void AttackServer::wait() {
    if (thread_.joinable()) thread_.join();
}

}  // namespace gauntlet
