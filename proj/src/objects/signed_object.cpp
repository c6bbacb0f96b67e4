#include <algorithm>
#include <cctype>
#include <set>

#include "gauntlet/objects.hpp"

namespace gauntlet {
namespace {

constexpr std::string_view kAttrContentType = "1.2.840.113549.1.9.3";
constexpr std::string_view kAttrMessageDigest = "1.2.840.113549.1.9.4";
constexpr std::string_view kAttrSigningTime = "1.2.840.113549.1.9.5";

Bytes digest_algorithm() { return der::sequence({der::oid(oid::kSha256)}); }

void read_digest_algorithm(der::Reader& r) {
    der::Reader alg = r.enter(der::tag::kSequence);
    std::string id = alg.read_oid();
    if (id != oid::kSha256) throw DecodeError(DecodeErrorKind::BoundsViolation, "digest algorithm " + id);
    if (!alg.at_end()) alg.expect(der::tag::kNull);
    alg.expect_end();
}

Seed ee_seed(const KeyPair& ca_key, std::string_view file_uri) {
    Bytes material(ca_key.seed().begin(), ca_key.seed().end());
    material.insert(material.end(), file_uri.begin(), file_uri.end());
    return sha256(material);
}

void check_file_name(std::string_view name, DecodeMode mode) {
    if (name.empty()) throw DecodeError(DecodeErrorKind::BoundsViolation, "empty manifest file name");
    if (mode == DecodeMode::Lax) return;
    for (char c : name) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
            throw DecodeError(DecodeErrorKind::BoundsViolation, "bad manifest file name");
    }
}

}  // namespace

SignedObjectBundle sign_object(std::string_view content_type, ByteView econtent,
                               const SignerContext& signer, std::string_view file_uri,
                               const SignOptions& opts) {
    if (econtent.empty() && !opts.attack_mode)
        throw ObjectError(ObjectError::Code::InvalidArgument, "empty eContent");

    KeyPair ee_key = opts.ee_key ? *opts.ee_key
                                 : KeyCache::global().get(ee_seed(signer.ca_key, file_uri), signer.ca_key.strength());
    ResourceSet ee_res;
    if (opts.ee_resources) {
        ee_res = *opts.ee_resources;
    } else {
        ee_res.inherit_ip = true;
        ee_res.inherit_as = true;
    }
    Validity validity = opts.validity.value_or(signer.ca_cert.validity);

    CertificateRequest req;
    req.issuer = &signer.ca_key;
    req.subject = &ee_key;
    req.validity = validity;
    req.resources = ee_res;
    req.is_ca = false;
    req.uris.signed_object = std::string(file_uri);
    req.uris.issuer_cert = signer.ca_cert_uri;
    req.uris.crl = signer.crl_uri;
    if (opts.serial.empty()) {
        Bytes material(ee_key.key_id());
        material.insert(material.end(), file_uri.begin(), file_uri.end());
        req.serial = serial_for(material);
    } else {
        req.serial = opts.serial;
    }
    ResourceCertificate ee = issue_certificate(req);

    auto digest = sha256(econtent);
    Bytes attrs = der::set_of({
        der::sequence({der::oid(kAttrContentType), der::set_of({der::oid(content_type)})}),
        der::sequence({der::oid(kAttrMessageDigest), der::set_of({der::octet_string(digest)})}),
        der::sequence({der::oid(kAttrSigningTime), der::set_of({der::utc_time(validity.not_before)})}),
    });
    Bytes signature = ee_key.sign(attrs);
    Bytes signed_attrs = attrs;
    signed_attrs[0] = der::tag::context(0, true);

    Bytes signer_info = der::sequence({
        der::integer(3),
        der::tlv(der::tag::context(0, false), ee_key.key_id()),
        digest_algorithm(),
        signed_attrs,
        der::sequence({der::oid(oid::kRsaEncryption), der::null()}),
        der::octet_string(signature),
    });
    Bytes signed_data = der::sequence({
        der::integer(3),
        der::set_of({digest_algorithm()}),
        der::sequence({der::oid(content_type), der::explicit_tag(0, der::octet_string(econtent))}),
        der::tlv(der::tag::context(0, true), ee.der),
        der::set_of({signer_info}),
    });

    SignedObjectBundle out;
    out.content_type = std::string(content_type);
    out.econtent.assign(econtent.begin(), econtent.end());
    out.ee_cert = ee.der;
    out.der = der::sequence({der::oid(oid::kSignedData), der::explicit_tag(0, signed_data)});
    return out;
}

SignedObject decode_signed_object(ByteView bytes, DecodeMode mode) {
    der::Reader top(bytes, mode);
    der::Reader ci = top.enter(der::tag::kSequence);
    top.expect_end();
    if (ci.read_oid() != oid::kSignedData) malformed("not a SignedData content");
    der::Reader wrap = ci.enter(der::tag::context(0, true));
    ci.expect_end();
    der::Reader sd = wrap.enter(der::tag::kSequence);
    wrap.expect_end();

    if (sd.read_small_integer() != 3) malformed("SignedData version must be 3");
    {
        der::Reader algs = sd.enter(der::tag::kSet);
        if (algs.at_end()) malformed("no digest algorithms");
        read_digest_algorithm(algs);
        algs.expect_end();
    }
    SignedObject out;
    {
        der::Reader eci = sd.enter(der::tag::kSequence);
        out.content_type = eci.read_oid();
        auto ec = eci.optional(der::tag::context(0, true));
        if (!ec) malformed("missing eContent");
        der::Reader ecr(ec->content, mode, eci.depth() + 1);
        out.econtent = ecr.read_octet_string();
        ecr.expect_end();
        eci.expect_end();
    }
    auto certs = sd.optional(der::tag::context(0, true));
    if (!certs) malformed("missing EE certificate");
    {
        der::Reader cr(certs->content, mode, sd.depth() + 1);
        auto cert = cr.expect(der::tag::kSequence);
        if (!cr.at_end()) malformed("more than one certificate");
        out.ee = decode_cert(cert.encoded, mode);
    }
    if (sd.next_is(der::tag::context(1, true))) malformed("CRLs not allowed in signed objects");

    der::Reader infos = sd.enter(der::tag::kSet);
    sd.expect_end();
    der::Reader si = infos.enter(der::tag::kSequence);
    if (!infos.at_end()) malformed("more than one SignerInfo");
    if (si.read_small_integer() != 3) malformed("SignerInfo version must be 3");
    auto sid = si.expect(der::tag::context(0, false));
    if (!std::equal(sid.content.begin(), sid.content.end(), out.ee.ski.begin(), out.ee.ski.end()))
        throw DecodeError(DecodeErrorKind::SignatureInvalid, "signer identifier does not match EE certificate");
    read_digest_algorithm(si);
    auto attrs = si.expect(der::tag::context(0, true));
    {
        der::Reader sig_alg = si.enter(der::tag::kSequence);
        std::string alg = sig_alg.read_oid();
        if (alg != oid::kRsaEncryption && alg != oid::kSha256WithRsa)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "signature algorithm " + alg);
    }
    Bytes signature = si.read_octet_string();
    si.expect_end();

    bool saw_type = false, saw_digest = false;
    der::Reader ar(attrs.content, mode, si.depth() + 1);
    std::set<std::string> seen;
    while (!ar.at_end()) {
        der::Reader attr = ar.enter(der::tag::kSequence);
        std::string type = attr.read_oid();
        if (!seen.insert(type).second) malformed("duplicate signed attribute");
        der::Reader values = attr.enter(der::tag::kSet);
        attr.expect_end();
        if (type == kAttrContentType) {
            if (values.read_oid() != out.content_type) malformed("content-type attribute mismatch");
            saw_type = true;
        } else if (type == kAttrMessageDigest) {
            Bytes d = values.read_octet_string();
            auto expect = sha256(out.econtent);
            if (!std::equal(d.begin(), d.end(), expect.begin(), expect.end()))
                throw DecodeError(DecodeErrorKind::SignatureInvalid, "message digest mismatch");
            saw_digest = true;
        } else {
            while (!values.at_end()) values.next();
        }
    }
    if (!saw_type || !saw_digest) malformed("missing mandatory signed attributes");

    Bytes signed_bytes(attrs.encoded.begin(), attrs.encoded.end());
    signed_bytes[0] = der::tag::kSet;
    if (!verify_signature(out.ee.spki, signed_bytes, signature))
        throw DecodeError(DecodeErrorKind::SignatureInvalid, "CMS signature does not verify");
    return out;
}

// ---- manifest ----------------------------------------------------------------

Bytes encode_manifest(const ManifestContent& m) {
    std::vector<Bytes> files;
    files.reserve(m.entries.size());
    for (const auto& e : m.entries)
        files.push_back(der::sequence({der::ia5_string(e.file_name), der::bit_string(e.hash)}));
    return der::sequence({
        der::integer_unsigned(m.manifest_number),
        der::generalized_time(m.this_update),
        der::generalized_time(m.next_update),
        der::oid(oid::kSha256),
        der::sequence(files),
    });
}

ManifestContent decode_manifest_content(ByteView econtent, DecodeMode mode) {
    der::Reader top(econtent, mode);
    der::Reader m = top.enter(der::tag::kSequence);
    top.expect_end();
    if (auto ver = m.optional(der::tag::context(0, true))) {
        der::Reader v(ver->content, mode, m.depth() + 1);
        if (v.read_small_integer() != 0 || mode == DecodeMode::Strict)
            malformed("manifest version must be the default");
    }
    ManifestContent out;
    out.manifest_number = m.read_unsigned_integer(20);
    out.this_update = m.read_time();
    out.next_update = m.read_time();
    if (m.read_oid() != oid::kSha256) throw DecodeError(DecodeErrorKind::BoundsViolation, "manifest hash algorithm");
    der::Reader list = m.enter(der::tag::kSequence);
    m.expect_end();
    std::set<std::string> names;
    while (!list.at_end()) {
        der::Reader fh = list.enter(der::tag::kSequence);
        ManifestEntry e;
        e.file_name = fh.read_string(der::tag::kIa5String);
        auto [hash, unused] = fh.read_bit_string();
        fh.expect_end();
        check_file_name(e.file_name, mode);
        if (hash.size() != 32 || unused != 0)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "manifest hash is not SHA-256 sized");
        std::copy(hash.begin(), hash.end(), e.hash.begin());
        if (!names.insert(e.file_name).second && mode == DecodeMode::Strict)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "duplicate manifest entry " + e.file_name);
        out.entries.push_back(std::move(e));
    }
    if (mode == DecodeMode::Strict && out.next_update <= out.this_update)
        throw DecodeError(DecodeErrorKind::BoundsViolation, "manifest nextUpdate not after thisUpdate");
    return out;
}

SignedObjectBundle build_manifest(const std::vector<ManifestEntry>& entries,
                                  const Validity& validity, const SignerContext& signer,
                                  std::string_view file_uri, Bytes manifest_number) {
    std::set<std::string> names;
    for (const auto& e : entries) {
        if (!names.insert(e.file_name).second)
            throw ObjectError(ObjectError::Code::DuplicateEntry, "duplicate manifest entry " + e.file_name);
    }
    if (validity.not_after <= validity.not_before)
        throw ObjectError(ObjectError::Code::InvalidArgument, "manifest validity");
    ManifestContent m{std::move(manifest_number), validity.not_before, validity.not_after, entries};
    SignOptions opts;
    opts.validity = validity;
    return sign_object(oid::kManifest, encode_manifest(m), signer, file_uri, opts);
}

// ---- ROA ---------------------------------------------------------------------

RoaBlock RoaBlock::of(const IpPrefix& p, std::optional<unsigned> max_length) {
    RoaBlock b;
    b.family = p.family;
    b.address_bits = p.packed_bits();
    b.prefix_length = p.length;
    if (max_length) b.max_length = *max_length;
    return b;
}

IpPrefix RoaBlock::prefix() const {
    return IpPrefix::from_bits(family, address_bits, prefix_length);
}

RoaContent build_roa(std::uint32_t as_id, std::vector<RoaBlock> blocks, bool attack_mode) {
    if (blocks.empty()) throw ObjectError(ObjectError::Code::EmptyResources, "ROA without prefixes");
    if (!attack_mode) {
        for (const auto& b : blocks) {
            const unsigned width = family_bits(b.family);
            if (b.prefix_length > width)
                throw ObjectError(ObjectError::Code::PrefixOutOfRange,
                                  "prefix length " + std::to_string(b.prefix_length) + " exceeds " + std::to_string(width));
            if (b.address_bits.size() != (b.prefix_length + 7) / 8)
                throw ObjectError(ObjectError::Code::PrefixOutOfRange, "address bits do not match prefix length");
            if (b.max_length && (*b.max_length < b.prefix_length || *b.max_length > width))
                throw ObjectError(ObjectError::Code::PrefixOutOfRange, "maxLength out of range");
        }
    }
    return RoaContent{as_id, std::move(blocks)};
}

Bytes encode_roa(const RoaContent& roa) {
    // Group by family, IPv4 first, preserving input order within a family.
    std::vector<Bytes> families;
    for (AddressFamily f : {AddressFamily::Ipv4, AddressFamily::Ipv6}) {
        std::vector<Bytes> addrs;
        for (const auto& b : roa.blocks) {
            if (b.family != f) continue;
            unsigned bytes = static_cast<unsigned>(b.address_bits.size());
            unsigned unused = bytes * 8 >= b.prefix_length ? bytes * 8 - b.prefix_length : 0;
            if (unused > 7) unused = 0;  // attack encodings may carry mismatched lengths
            Bytes addr = der::bit_string(b.address_bits, unused);
            if (b.max_length) addrs.push_back(der::sequence({addr, der::integer(*b.max_length)}));
            else addrs.push_back(der::sequence({addr}));
        }
        if (addrs.empty()) continue;
        const std::uint8_t afi[2] = {0, static_cast<std::uint8_t>(f)};
        families.push_back(der::sequence({der::octet_string(ByteView(afi, 2)), der::sequence(addrs)}));
    }
    return der::sequence({der::integer(roa.as_id), der::sequence(families)});
}

RoaContent decode_roa_content(ByteView econtent, DecodeMode mode) {
    der::Reader top(econtent, mode);
    der::Reader r = top.enter(der::tag::kSequence);
    top.expect_end();
    if (auto ver = r.optional(der::tag::context(0, true))) {
        der::Reader v(ver->content, mode, r.depth() + 1);
        if (v.read_small_integer() != 0 || mode == DecodeMode::Strict) malformed("ROA version must be the default");
    }
    RoaContent out;
    std::int64_t asid = r.read_small_integer();
    if (asid < 0 || asid > 0xffffffffLL) throw DecodeError(DecodeErrorKind::BoundsViolation, "asID out of range");
    out.as_id = static_cast<std::uint32_t>(asid);
    der::Reader fams = r.enter(der::tag::kSequence);
    r.expect_end();
    while (!fams.at_end()) {
        der::Reader fam = fams.enter(der::tag::kSequence);
        Bytes afi = fam.read_octet_string();
        if (afi.size() != 2 || afi[0] != 0 || (afi[1] != 1 && afi[1] != 2))
            throw DecodeError(DecodeErrorKind::BoundsViolation, "unsupported address family");
        const auto family = static_cast<AddressFamily>(afi[1]);
        const unsigned width = family_bits(family);
        der::Reader addrs = fam.enter(der::tag::kSequence);
        fam.expect_end();
        if (addrs.at_end() && mode == DecodeMode::Strict)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "empty address list");
        while (!addrs.at_end()) {
            der::Reader a = addrs.enter(der::tag::kSequence);
            auto [bits, unused] = a.read_bit_string();
            RoaBlock b;
            b.family = family;
            b.prefix_length = static_cast<std::uint32_t>(bits.size() * 8 - unused);
            b.address_bits = std::move(bits);
            if (!a.at_end()) b.max_length = a.read_small_integer();
            a.expect_end();
            if (mode == DecodeMode::Strict) {
                if (b.prefix_length > width)
                    throw DecodeError(DecodeErrorKind::BoundsViolation,
                                      "prefix length " + std::to_string(b.prefix_length) + " exceeds " + std::to_string(width));
                if (b.max_length && (*b.max_length < b.prefix_length || *b.max_length > width))
                    throw DecodeError(DecodeErrorKind::BoundsViolation, "maxLength out of range");
            }
            out.blocks.push_back(std::move(b));
        }
    }
    if (out.blocks.empty()) throw DecodeError(DecodeErrorKind::BoundsViolation, "ROA without prefixes");
    return out;
}

// ---- Ghostbusters ------------------------------------------------------------

GhostbustersText decode_ghostbusters_content(ByteView econtent, DecodeMode mode) {
    GhostbustersText g{to_string(econtent)};
    if (mode == DecodeMode::Strict) {
        for (unsigned char c : g.vcard) {
            if (c >= 0x80 || (c < 0x20 && c != '\r' && c != '\n' && c != '\t'))
                malformed("vCard is not printable text");
        }
        if (g.vcard.rfind("BEGIN:VCARD", 0) != 0 || g.vcard.find("END:VCARD") == std::string::npos)
            malformed("not a vCard");
    }
    return g;
}

// ---- generic -----------------------------------------------------------------

DecodedObject decode_object(ByteView bytes, DecodeMode mode) {
    SignedObject cms = decode_signed_object(bytes, mode);
    if (cms.ee.is_ca) throw DecodeError(DecodeErrorKind::BoundsViolation, "signed object carries a CA certificate");
    if (cms.content_type == oid::kRoa) {
        auto c = decode_roa_content(cms.econtent, mode);
        return {std::move(cms), std::move(c)};
    }
    if (cms.content_type == oid::kManifest) {
        auto c = decode_manifest_content(cms.econtent, mode);
        return {std::move(cms), std::move(c)};
    }
    if (cms.content_type == oid::kGhostbusters) {
        auto c = decode_ghostbusters_content(cms.econtent, mode);
        return {std::move(cms), std::move(c)};
    }
    throw DecodeError(DecodeErrorKind::BoundsViolation, "unknown content type " + cms.content_type);
}

}  // namespace gauntlet
