// RPKI objects: resource certificates, CMS signed objects (manifest, ROA,
// Ghostbusters), CRLs and TALs.
//
// Encoders always produce DER. Decoders are total: any input either decodes
// or raises DecodeError. STRICT mode enforces the RPKI profile bounds;
// ATTACK-mode encoders may deliberately violate them.

#pragma once

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gauntlet/crypto.hpp"
#include "gauntlet/der.hpp"
#include "gauntlet/resources.hpp"

namespace gauntlet {

namespace oid {
inline constexpr std::string_view kSignedData = "1.2.840.113549.1.7.2";
inline constexpr std::string_view kRoa = "1.2.840.113549.1.9.16.1.24";
inline constexpr std::string_view kManifest = "1.2.840.113549.1.9.16.1.26";
inline constexpr std::string_view kGhostbusters = "1.2.840.113549.1.9.16.1.35";
inline constexpr std::string_view kSha256 = "2.16.840.1.101.3.4.2.1";
inline constexpr std::string_view kRsaEncryption = "1.2.840.113549.1.1.1";
inline constexpr std::string_view kSha256WithRsa = "1.2.840.113549.1.1.11";
}  // namespace oid

class ObjectError : public std::invalid_argument {
public:
    enum class Code { EmptyResources, DuplicateEntry, PrefixOutOfRange, InvalidArgument };
    ObjectError(Code code, const std::string& what) : std::invalid_argument(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

struct Validity {
    TimePoint not_before;
    TimePoint not_after;
    bool contains(TimePoint t) const { return not_before <= t && t <= not_after; }
    bool contains(const Validity& inner) const {
        return not_before <= inner.not_before && inner.not_after <= not_after;
    }
};

TimePoint now_seconds();
// not_before = created - 1 h, not_after = created + 24 h.
Validity default_validity(TimePoint created);

// Serial numbers are unsigned big-endian magnitudes.
Bytes serial_from(std::uint64_t v);
// Deterministic positive serial derived from arbitrary material.
Bytes serial_for(ByteView material);

struct CertUris {
    std::string ca_repository;  // SIA id-ad-caRepository (CA)
    std::string manifest;       // SIA id-ad-rpkiManifest (CA)
    std::string rrdp_notify;    // SIA id-ad-rpkiNotify (CA)
    std::string signed_object;  // SIA id-ad-signedObject (EE)
    std::string issuer_cert;    // AIA id-ad-caIssuers
    std::string crl;            // CRL distribution point
    bool operator==(const CertUris&) const = default;
};

struct ResourceCertificate {
    Bytes der;
    Bytes tbs;
    Bytes signature;
    Bytes serial;
    std::string issuer_name;
    std::string subject_name;
    Validity validity;
    Bytes spki;
    Bytes ski;
    Bytes aki;
    bool is_ca = false;
    ResourceSet resources;
    CertUris uris;

    bool self_signed() const { return issuer_name == subject_name && (aki.empty() || aki == ski); }
};

using CaCertificate = ResourceCertificate;

struct CertificateRequest {
    const KeyPair* issuer = nullptr;
    const KeyPair* subject = nullptr;
    Bytes serial;  // empty: derived from the subject key
    Validity validity;
    ResourceSet resources;
    CertUris uris;
    bool is_ca = true;
};

ResourceCertificate issue_certificate(const CertificateRequest& req);

// Self-signed when `issuer` and `subject` are the same key.
// Throws ObjectError{EmptyResources} when resources are empty and do not
// inherit.
CaCertificate build_ca_cert(const KeyPair& issuer, const KeyPair& subject,
                            const ResourceSet& resources, const CertUris& uris,
                            const Validity& validity, Bytes serial = {});

ResourceCertificate decode_cert(ByteView der, DecodeMode mode = DecodeMode::Strict);
bool verify_cert_signature(const ResourceCertificate& cert, ByteView issuer_spki);

// ---- CMS signed objects ---------------------------------------------------

struct SignerContext {
    const KeyPair& ca_key;
    const CaCertificate& ca_cert;
    std::string ca_cert_uri;
    std::string crl_uri;
};

struct SignOptions {
    // Defaults: key derived from the CA seed and the file URI; resources
    // inherited; validity equal to the CA's.
    std::optional<KeyPair> ee_key;
    std::optional<ResourceSet> ee_resources;
    std::optional<Validity> validity;
    Bytes serial;
    bool attack_mode = false;
};

struct SignedObjectBundle {
    std::string content_type;
    Bytes econtent;
    Bytes ee_cert;
    Bytes der;
};

SignedObjectBundle sign_object(std::string_view content_type, ByteView econtent,
                               const SignerContext& signer, std::string_view file_uri,
                               const SignOptions& opts = {});

struct SignedObject {
    std::string content_type;
    Bytes econtent;
    ResourceCertificate ee;
};

// Parses the CMS structure and checks the signature with the embedded EE
// certificate's key. Does not check the EE certificate against its issuer.
SignedObject decode_signed_object(ByteView der, DecodeMode mode = DecodeMode::Strict);

// ---- manifest --------------------------------------------------------------

struct ManifestEntry {
    std::string file_name;
    Sha256Digest hash{};
    bool operator==(const ManifestEntry&) const = default;
};

struct ManifestContent {
    Bytes manifest_number;
    TimePoint this_update;
    TimePoint next_update;
    std::vector<ManifestEntry> entries;
    bool operator==(const ManifestContent&) const = default;
};

Bytes encode_manifest(const ManifestContent& m);
ManifestContent decode_manifest_content(ByteView econtent, DecodeMode mode);

// Throws ObjectError{DuplicateEntry} on repeated file names.
SignedObjectBundle build_manifest(const std::vector<ManifestEntry>& entries,
                                  const Validity& validity, const SignerContext& signer,
                                  std::string_view file_uri, Bytes manifest_number = serial_from(1));

// ---- ROA ---------------------------------------------------------------------

struct RoaBlock {
    AddressFamily family = AddressFamily::Ipv4;
    Bytes address_bits;  // ceil(prefix_length / 8) bytes
    std::uint32_t prefix_length = 0;
    std::optional<std::int64_t> max_length;

    static RoaBlock of(const IpPrefix& p, std::optional<unsigned> max_length = std::nullopt);
    IpPrefix prefix() const;  // throws DecodeError{BoundsViolation} when out of range
    bool operator==(const RoaBlock&) const = default;
};

struct RoaContent {
    std::uint32_t as_id = 0;
    std::vector<RoaBlock> blocks;
    bool operator==(const RoaContent&) const = default;
};

// STRICT mode (attack_mode = false) enforces prefix and maxLength bounds and
// throws ObjectError{PrefixOutOfRange}; an empty block list is rejected in
// both modes.
RoaContent build_roa(std::uint32_t as_id, std::vector<RoaBlock> blocks, bool attack_mode = false);
Bytes encode_roa(const RoaContent& roa);
RoaContent decode_roa_content(ByteView econtent, DecodeMode mode);

// ---- Ghostbusters --------------------------------------------------------------

struct GhostbustersText {
    std::string vcard;
    bool operator==(const GhostbustersText&) const = default;
};

GhostbustersText decode_ghostbusters_content(ByteView econtent, DecodeMode mode);

// ---- generic decode ------------------------------------------------------------

using ObjectContent = std::variant<ManifestContent, RoaContent, GhostbustersText>;

struct DecodedObject {
    SignedObject cms;
    ObjectContent content;
};

DecodedObject decode_object(ByteView bytes, DecodeMode mode = DecodeMode::Strict);

// ---- CRL ----------------------------------------------------------------------

struct CrlContent {
    Bytes der;
    Bytes tbs;
    Bytes signature;
    std::string issuer_name;
    TimePoint this_update;
    TimePoint next_update;
    std::vector<Bytes> revoked;
    Bytes crl_number;
    Bytes aki;

    bool is_revoked(ByteView serial) const;
};

Bytes build_crl(const KeyPair& ca_key, const CaCertificate& ca_cert,
                const std::vector<Bytes>& revoked_serials, const Validity& validity,
                Bytes crl_number = serial_from(1));
CrlContent decode_crl(ByteView der, DecodeMode mode = DecodeMode::Strict);
bool verify_crl(const CrlContent& crl, ByteView issuer_spki);

// ---- TAL -----------------------------------------------------------------------

struct Tal {
    std::vector<std::string> uris;
    Bytes public_key;
    bool operator==(const Tal&) const = default;
};

// One URI per line, a blank line, then the base64 SPKI wrapped at 64 columns.
std::string build_tal(const std::vector<std::string>& uris, ByteView public_key);
Tal parse_tal(std::string_view text);

}  // namespace gauntlet
