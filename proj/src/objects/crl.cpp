#include <algorithm>
#include <set>

#include "gauntlet/objects.hpp"
#include "x509_common.hpp"

namespace gauntlet {
namespace {

constexpr std::string_view kAuthorityKeyId = "2.5.29.35";
constexpr std::string_view kCrlNumber = "2.5.29.20";

Bytes strip_leading_zeros(ByteView v) {
    std::size_t i = 0;
    while (i + 1 < v.size() && v[i] == 0) ++i;
    return Bytes(v.begin() + i, v.end());
}

}  // namespace

bool CrlContent::is_revoked(ByteView serial) const {
    Bytes s = strip_leading_zeros(serial);
    return std::any_of(revoked.begin(), revoked.end(), [&](const Bytes& r) { return r == s; });
}

Bytes build_crl(const KeyPair& ca_key, const CaCertificate& ca_cert,
                const std::vector<Bytes>& revoked_serials, const Validity& validity,
                Bytes crl_number) {
    if (validity.not_after <= validity.not_before)
        throw ObjectError(ObjectError::Code::InvalidArgument, "CRL nextUpdate not after thisUpdate");
    std::set<Bytes> unique;
    for (const auto& s : revoked_serials) unique.insert(strip_leading_zeros(s));

    std::vector<Bytes> fields = {
        der::integer(1),
        x509::signature_algorithm(),
        x509::name(hex(ca_key.key_id())),
        der::x509_time(validity.not_before),
        der::x509_time(validity.not_after),
    };
    if (!unique.empty()) {
        std::vector<Bytes> entries;
        for (const auto& s : unique)
            entries.push_back(der::sequence({der::integer_unsigned(s), der::x509_time(validity.not_before)}));
        fields.push_back(der::sequence(entries));
    }
    fields.push_back(der::explicit_tag(0, der::sequence({
        der::sequence({der::oid(kAuthorityKeyId),
                       der::octet_string(der::sequence({der::tlv(der::tag::context(0, false), ca_key.key_id())}))}),
        der::sequence({der::oid(kCrlNumber), der::octet_string(der::integer_unsigned(crl_number))}),
    })));
    (void)ca_cert;
    return x509::signed_envelope(der::sequence(fields), ca_key);
}

CrlContent decode_crl(ByteView bytes, DecodeMode mode) {
    CrlContent c;
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
    if (tbs.read_small_integer() != 1) malformed("CRL must be v2");
    x509::read_signature_algorithm(tbs);
    c.issuer_name = x509::read_name(tbs);
    c.this_update = tbs.read_time();
    c.next_update = tbs.read_time();
    if (tbs.next_is(der::tag::kSequence)) {
        der::Reader list = tbs.enter(der::tag::kSequence);
        while (!list.at_end()) {
            der::Reader entry = list.enter(der::tag::kSequence);
            c.revoked.push_back(entry.read_unsigned_integer(20));
            entry.read_time();
            if (!entry.at_end()) entry.expect(der::tag::kSequence);
            entry.expect_end();
        }
    }
    if (auto ext_wrap = tbs.optional(der::tag::context(0, true))) {
        der::Reader wrap(ext_wrap->content, mode, 3);
        der::Reader exts = wrap.enter(der::tag::kSequence);
        while (!exts.at_end()) {
            der::Reader ext = exts.enter(der::tag::kSequence);
            std::string id = ext.read_oid();
            bool critical = false;
            if (ext.next_is(der::tag::kBoolean)) critical = ext.read_boolean();
            Bytes value = ext.read_octet_string();
            if (id == kAuthorityKeyId) {
                der::Reader v(value, mode, 5);
                der::Reader aki = v.enter(der::tag::kSequence);
                if (auto k = aki.optional(der::tag::context(0, false))) c.aki.assign(k->content.begin(), k->content.end());
            } else if (id == kCrlNumber) {
                der::Reader v(value, mode, 5);
                c.crl_number = v.read_unsigned_integer(20);
            } else if (critical) {
                malformed("unsupported critical CRL extension " + id);
            }
        }
    }
    tbs.expect_end();
    if (mode == DecodeMode::Strict) {
        if (c.crl_number.empty()) malformed("CRL number missing");
        if (c.next_update <= c.this_update)
            throw DecodeError(DecodeErrorKind::BoundsViolation, "CRL nextUpdate not after thisUpdate");
    }
    return c;
}

bool verify_crl(const CrlContent& crl, ByteView issuer_spki) {
    return verify_signature(issuer_spki, crl.tbs, crl.signature);
}

// ---- TAL -----------------------------------------------------------------------

std::string build_tal(const std::vector<std::string>& uris, ByteView public_key) {
    if (uris.empty()) throw ObjectError(ObjectError::Code::InvalidArgument, "TAL needs at least one URI");
    std::string out;
    for (const auto& u : uris) out += u + "\n";
    out += "\n";
    std::string b64 = base64_encode(public_key);
    for (std::size_t i = 0; i < b64.size(); i += 64) out += b64.substr(i, 64) + "\n";
    return out;
}

Tal parse_tal(std::string_view text) {
    Tal tal;
    std::size_t pos = 0;
    auto next_line = [&](std::string_view& line) {
        if (pos >= text.size()) return false;
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        line = text.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = nl + 1;
        return true;
    };
    std::string_view line;
    bool in_comments = true;
    while (next_line(line)) {
        if (in_comments && !line.empty() && line[0] == '#') continue;
        in_comments = false;
        if (line.empty()) break;
        if (line.rfind("rsync://", 0) != 0 && line.rfind("https://", 0) != 0)
            throw std::invalid_argument("TAL URI must be rsync:// or https://");
        tal.uris.emplace_back(line);
    }
    if (tal.uris.empty()) throw std::invalid_argument("TAL has no URIs");
    tal.public_key = base64_decode(text.substr(std::min(pos, text.size())));
    if (tal.public_key.empty()) throw std::invalid_argument("TAL has no public key");
    return tal;
}

}  // namespace gauntlet
