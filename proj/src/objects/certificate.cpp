#include <algorithm>

#include "gauntlet/objects.hpp"
#include "x509_common.hpp"

namespace gauntlet {
namespace {

constexpr std::string_view kBasicConstraints = "2.5.29.19";
constexpr std::string_view kSubjectKeyId = "2.5.29.14";
constexpr std::string_view kAuthorityKeyId = "2.5.29.35";
constexpr std::string_view kKeyUsage = "2.5.29.15";
constexpr std::string_view kCrlDistributionPoints = "2.5.29.31";
constexpr std::string_view kCertificatePolicies = "2.5.29.32";
constexpr std::string_view kAuthorityInfoAccess = "1.3.6.1.5.5.7.1.1";
constexpr std::string_view kSubjectInfoAccess = "1.3.6.1.5.5.7.1.11";
constexpr std::string_view kIpAddrBlocks = "1.3.6.1.5.5.7.1.7";
constexpr std::string_view kAsIdentifiers = "1.3.6.1.5.5.7.1.8";
constexpr std::string_view kRpkiPolicy = "1.3.6.1.5.5.7.14.2";
constexpr std::string_view kAdCaIssuers = "1.3.6.1.5.5.7.48.2";
constexpr std::string_view kAdCaRepository = "1.3.6.1.5.5.7.48.5";
constexpr std::string_view kAdRpkiManifest = "1.3.6.1.5.5.7.48.10";
constexpr std::string_view kAdSignedObject = "1.3.6.1.5.5.7.48.11";
constexpr std::string_view kAdRpkiNotify = "1.3.6.1.5.5.7.48.13";

constexpr std::uint8_t kUriTag = der::tag::context(6, false);

Bytes extension(std::string_view id, bool critical, const Bytes& value) {
    if (critical) return der::sequence({der::oid(id), der::boolean(true), der::octet_string(value)});
    return der::sequence({der::oid(id), der::octet_string(value)});
}

Bytes access_description(std::string_view method, std::string_view uri) {
    return der::sequence({der::oid(method), der::tlv(kUriTag, as_bytes(uri))});
}

// GeneralNames with a single URI; returns the URI or empty.
std::string read_first_uri(der::Reader& names) {
    std::string found;
    while (!names.at_end()) {
        auto t = names.next();
        if (t.tag == kUriTag && found.empty()) found = to_string(t.content);
    }
    return found;
}

void parse_info_access(ByteView value, DecodeMode mode, CertUris& uris, bool subject) {
    der::Reader top(value, mode);
    der::Reader list = top.enter(der::tag::kSequence);
    top.expect_end();
    while (!list.at_end()) {
        der::Reader ad = list.enter(der::tag::kSequence);
        std::string method = ad.read_oid();
        auto loc = ad.next();
        ad.expect_end();
        if (loc.tag != kUriTag) continue;
        std::string uri = to_string(loc.content);
        if (subject) {
            if (method == kAdCaRepository && uris.ca_repository.empty()) uris.ca_repository = uri;
            else if (method == kAdRpkiManifest && uris.manifest.empty()) uris.manifest = uri;
            else if (method == kAdRpkiNotify && uris.rrdp_notify.empty()) uris.rrdp_notify = uri;
            else if (method == kAdSignedObject && uris.signed_object.empty()) uris.signed_object = uri;
        } else if (method == kAdCaIssuers && uris.issuer_cert.empty()) {
            uris.issuer_cert = uri;
        }
    }
}

std::string parse_crldp(ByteView value, DecodeMode mode) {
    der::Reader top(value, mode);
    der::Reader points = top.enter(der::tag::kSequence);
    while (!points.at_end()) {
        der::Reader dp = points.enter(der::tag::kSequence);
        if (auto name = dp.optional(der::tag::context(0, true))) {
            der::Reader dpn(name->content, mode, dp.depth() + 1);
            if (auto full = dpn.optional(der::tag::context(0, true))) {
                der::Reader names(full->content, mode, dpn.depth() + 1);
                return read_first_uri(names);
            }
        }
    }
    return {};
}

}  // namespace

namespace x509 {

Bytes name(std::string_view cn) {
    Bytes atv = der::sequence({der::oid("2.5.4.3"), der::printable_string(cn)});
    return der::sequence({der::set_of({atv})});
}

std::string read_name(der::Reader& r) {
    auto name = r.expect(der::tag::kSequence);
    // A canonical rendering: the raw DER in hex. Equality comparisons are
    // what the validator needs.
    std::string cn;
    der::Reader rdns(name.content, r.mode(), r.depth() + 1);
    while (!rdns.at_end()) {
        der::Reader set = rdns.enter(der::tag::kSet);
        while (!set.at_end()) {
            der::Reader atv = set.enter(der::tag::kSequence);
            std::string type = atv.read_oid();
            auto value = atv.next();
            if (type == "2.5.4.3" && cn.empty()) cn = to_string(value.content);
        }
    }
    return cn.empty() ? hex(name.encoded) : cn;
}

Bytes signature_algorithm() {
    return der::sequence({der::oid(oid::kSha256WithRsa), der::null()});
}

void read_signature_algorithm(der::Reader& r) {
    der::Reader alg = r.enter(der::tag::kSequence);
    std::string id = alg.read_oid();
    if (id != oid::kSha256WithRsa && id != oid::kRsaEncryption)
        throw DecodeError(DecodeErrorKind::BoundsViolation, "unsupported signature algorithm " + id);
    if (!alg.at_end()) alg.expect(der::tag::kNull);
    alg.expect_end();
}

Bytes signed_envelope(const Bytes& tbs, const KeyPair& key) {
    Bytes sig = key.sign(tbs);
    return der::sequence({tbs, signature_algorithm(), der::bit_string(sig)});
}

}  // namespace x509

TimePoint now_seconds() {
    return std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now());
}

Validity default_validity(TimePoint created) {
    return {created - std::chrono::hours(1), created + std::chrono::hours(24)};
}

Bytes serial_from(std::uint64_t v) {
    Bytes out;
    do {
        out.insert(out.begin(), static_cast<std::uint8_t>(v & 0xff));
        v >>= 8;
    } while (v);
    return out;
}

Bytes serial_for(ByteView material) {
    auto d = sha256(material);
    Bytes out(d.begin(), d.begin() + 8);
    out[0] &= 0x7f;
    if (out[0] == 0) out[0] = 0x01;
    return out;
}

ResourceCertificate issue_certificate(const CertificateRequest& req) {
    if (!req.issuer || !req.subject) throw ObjectError(ObjectError::Code::InvalidArgument, "missing key");
    if (req.validity.not_after <= req.validity.not_before)
        throw ObjectError(ObjectError::Code::InvalidArgument, "empty validity interval");
    if (req.resources.empty()) throw ObjectError(ObjectError::Code::EmptyResources, "certificate has no resources");

    const bool self_signed = req.issuer->public_key() == req.subject->public_key();
    const Bytes serial = req.serial.empty() ? serial_for(req.subject->key_id()) : req.serial;
    const std::string subject_cn = hex(req.subject->key_id());
    const std::string issuer_cn = hex(req.issuer->key_id());

    std::vector<Bytes> exts;
    if (req.is_ca) exts.push_back(extension(kBasicConstraints, true, der::sequence({der::boolean(true)})));
    exts.push_back(extension(kSubjectKeyId, false, der::octet_string(req.subject->key_id())));
    if (!self_signed) {
        exts.push_back(extension(kAuthorityKeyId, false,
                                 der::sequence({der::tlv(der::tag::context(0, false), req.issuer->key_id())})));
    }
    {
        const std::uint8_t ca_usage = 0x06;   // keyCertSign | cRLSign
        const std::uint8_t ee_usage = 0x80;   // digitalSignature
        Bytes ku = req.is_ca ? der::bit_string(ByteView(&ca_usage, 1), 1)
                             : der::bit_string(ByteView(&ee_usage, 1), 7);
        exts.push_back(extension(kKeyUsage, true, ku));
    }
    if (!self_signed && !req.uris.crl.empty()) {
        Bytes gn = der::tlv(kUriTag, as_bytes(req.uris.crl));
        Bytes dpn = der::tlv(der::tag::context(0, true), der::tlv(der::tag::context(0, true), gn));
        exts.push_back(extension(kCrlDistributionPoints, false, der::sequence({der::sequence({dpn})})));
    }
    if (!self_signed && !req.uris.issuer_cert.empty()) {
        exts.push_back(extension(kAuthorityInfoAccess, false,
                                 der::sequence({access_description(kAdCaIssuers, req.uris.issuer_cert)})));
    }
    {
        std::vector<Bytes> sia;
        if (req.is_ca) {
            if (!req.uris.ca_repository.empty()) sia.push_back(access_description(kAdCaRepository, req.uris.ca_repository));
            if (!req.uris.manifest.empty()) sia.push_back(access_description(kAdRpkiManifest, req.uris.manifest));
            if (!req.uris.rrdp_notify.empty()) sia.push_back(access_description(kAdRpkiNotify, req.uris.rrdp_notify));
        } else if (!req.uris.signed_object.empty()) {
            sia.push_back(access_description(kAdSignedObject, req.uris.signed_object));
        }
        if (!sia.empty()) exts.push_back(extension(kSubjectInfoAccess, false, der::sequence(sia)));
    }
    exts.push_back(extension(kCertificatePolicies, true,
                             der::sequence({der::sequence({der::oid(kRpkiPolicy)})})));
    if (req.resources.inherit_ip || !req.resources.v4.empty() || !req.resources.v6.empty())
        exts.push_back(extension(kIpAddrBlocks, true, encode_ip_addr_blocks(req.resources)));
    if (req.resources.inherit_as || !req.resources.asns.empty())
        exts.push_back(extension(kAsIdentifiers, true, encode_as_identifiers(req.resources)));

    Bytes tbs = der::sequence({
        der::explicit_tag(0, der::integer(2)),
        der::integer_unsigned(serial),
        x509::signature_algorithm(),
        x509::name(issuer_cn),
        der::sequence({der::x509_time(req.validity.not_before), der::x509_time(req.validity.not_after)}),
        x509::name(subject_cn),
        req.subject->public_key(),
        der::explicit_tag(3, der::sequence(exts)),
    });
    return decode_cert(x509::signed_envelope(tbs, *req.issuer), DecodeMode::Strict);
}

CaCertificate build_ca_cert(const KeyPair& issuer, const KeyPair& subject,
                            const ResourceSet& resources, const CertUris& uris,
                            const Validity& validity, Bytes serial) {
    CertificateRequest req;
    req.issuer = &issuer;
    req.subject = &subject;
    req.serial = std::move(serial);
    req.validity = validity;
    req.resources = resources;
    req.resources.normalize();
    req.uris = uris;
    req.is_ca = true;
    return issue_certificate(req);
}

ResourceCertificate decode_cert(ByteView bytes, DecodeMode mode) {
    ResourceCertificate c;
    der::Reader top(bytes, mode);
    auto outer_tlv = top.expect(der::tag::kSequence);
    top.expect_end();
    c.der.assign(outer_tlv.encoded.begin(), outer_tlv.encoded.end());
    der::Reader outer(outer_tlv.content, mode, 1);
    auto tbs_tlv = outer.expect(der::tag::kSequence);
    c.tbs.assign(tbs_tlv.encoded.begin(), tbs_tlv.encoded.end());
    x509::read_signature_algorithm(outer);
    auto [sig, unused] = outer.read_bit_string();
    if (unused != 0) malformed("signature has unused bits");
    c.signature = std::move(sig);
    outer.expect_end();

    der::Reader tbs(tbs_tlv.content, mode, 2);
    auto ver = tbs.optional(der::tag::context(0, true));
    if (!ver) malformed("certificate must be v3");
    {
        der::Reader v(ver->content, mode, 3);
        if (v.read_small_integer() != 2) malformed("certificate must be v3");
        v.expect_end();
    }
    c.serial = tbs.read_unsigned_integer(20);
    x509::read_signature_algorithm(tbs);
    c.issuer_name = x509::read_name(tbs);
    {
        der::Reader val = tbs.enter(der::tag::kSequence);
        c.validity.not_before = val.read_time();
        c.validity.not_after = val.read_time();
        val.expect_end();
    }
    c.subject_name = x509::read_name(tbs);
    auto spki = tbs.expect(der::tag::kSequence);
    c.spki.assign(spki.encoded.begin(), spki.encoded.end());
    // Skip optional issuerUniqueID [1] / subjectUniqueID [2].
    tbs.optional(der::tag::context(1, false));
    tbs.optional(der::tag::context(2, false));
    bool saw_ip = false, saw_as = false;
    if (auto ext_wrap = tbs.optional(der::tag::context(3, true))) {
        der::Reader wrap(ext_wrap->content, mode, 3);
        der::Reader exts = wrap.enter(der::tag::kSequence);
        wrap.expect_end();
        std::set<std::string> seen;
        while (!exts.at_end()) {
            der::Reader ext = exts.enter(der::tag::kSequence);
            std::string id = ext.read_oid();
            bool critical = false;
            if (ext.next_is(der::tag::kBoolean)) critical = ext.read_boolean();
            Bytes value = ext.read_octet_string();
            ext.expect_end();
            if (!seen.insert(id).second) malformed("duplicate extension " + id);
            if (id == kBasicConstraints) {
                der::Reader v(value, mode, 5);
                der::Reader bc = v.enter(der::tag::kSequence);
                if (bc.next_is(der::tag::kBoolean)) c.is_ca = bc.read_boolean();
            } else if (id == kSubjectKeyId) {
                der::Reader v(value, mode, 5);
                c.ski = v.read_octet_string();
            } else if (id == kAuthorityKeyId) {
                der::Reader v(value, mode, 5);
                der::Reader aki = v.enter(der::tag::kSequence);
                if (auto k = aki.optional(der::tag::context(0, false))) c.aki.assign(k->content.begin(), k->content.end());
            } else if (id == kSubjectInfoAccess) {
                parse_info_access(value, mode, c.uris, true);
            } else if (id == kAuthorityInfoAccess) {
                parse_info_access(value, mode, c.uris, false);
            } else if (id == kCrlDistributionPoints) {
                c.uris.crl = parse_crldp(value, mode);
            } else if (id == kIpAddrBlocks) {
                decode_ip_addr_blocks(value, c.resources, mode);
                saw_ip = true;
            } else if (id == kAsIdentifiers) {
                decode_as_identifiers(value, c.resources, mode);
                saw_as = true;
            } else if (id == kKeyUsage || id == kCertificatePolicies) {
                // Present for profile conformance; contents not needed here.
            } else if (critical) {
                malformed("unsupported critical extension " + id);
            }
        }
    }
    tbs.expect_end();
    if (mode == DecodeMode::Strict) {
        if (c.ski.empty()) malformed("missing subject key identifier");
        if (!saw_ip && !saw_as) throw DecodeError(DecodeErrorKind::BoundsViolation, "certificate carries no resources");
        if (c.validity.not_after < c.validity.not_before)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "validity interval inverted");
    }
    return c;
}

bool verify_cert_signature(const ResourceCertificate& cert, ByteView issuer_spki) {
    return verify_signature(issuer_spki, cert.tbs, cert.signature);
}

}  // namespace gauntlet
