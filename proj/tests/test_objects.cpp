#include <doctest.h>

#include <openssl/cms.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>

#include <chrono>
#include <random>
#include <set>

#include "gauntlet/objects.hpp"
#include "oracle/sha256_ref.hpp"

using namespace gauntlet;

namespace {

TimePoint fixed_time() { return TimePoint(std::chrono::seconds(1700000000)); }

KeyPair key(std::string_view path, KeyStrength s = KeyStrength::Fast) {
    return KeyCache::global().get(seed_for("11111111-2222-4333-8444-555555555555", path), s);
}

struct Ca {
    KeyPair key;
    CaCertificate cert;
};

Ca make_root() {
    KeyPair k = key("root");
    CertUris uris{"rsync://example.org/repo/", "rsync://example.org/repo/manifest.mft",
                  "https://example.org/notification.xml", "", "", ""};
    return {k, build_ca_cert(k, k, ResourceSet::all(), uris, default_validity(fixed_time()))};
}

SignerContext signer(const Ca& ca) {
    return {ca.key, ca.cert, "rsync://example.org/ta/root.cer", "rsync://example.org/repo/revoked.crl"};
}

X509* parse_x509(const Bytes& der) {
    const unsigned char* p = der.data();
    return d2i_X509(nullptr, &p, static_cast<long>(der.size()));
}

}  // namespace

TEST_CASE("key derivation is deterministic and seed sensitive") {
    Seed zero{};
    KeyPair a = derive_keypair(zero, KeyStrength::Fast);
    KeyPair b = derive_keypair(zero, KeyStrength::Fast);
    CHECK(a.public_key() == b.public_key());

    std::mt19937_64 rng(7);
    std::set<Bytes> keys;
    for (int i = 0; i < 1000; ++i) {
        Seed s;
        for (auto& x : s) x = static_cast<std::uint8_t>(rng());
        keys.insert(derive_keypair(s, KeyStrength::Fast).public_key());
    }
    CHECK(keys.size() == 1000);

    KeyPair k = derive_keypair(seed_for("instance-uuid", "node-path"), KeyStrength::Rsa2048);
    CHECK(public_key_bits(k.public_key()) == 2048);
    Bytes msg = {'h', 'i'};
    Bytes sig = k.sign(msg);
    CHECK(verify_signature(k.public_key(), msg, sig));
    sig[3] ^= 1;
    CHECK_FALSE(verify_signature(k.public_key(), msg, sig));
}

TEST_CASE("root certificate round trips and is accepted by OpenSSL") {
    Ca root = make_root();
    CHECK(root.cert.is_ca);
    CHECK(root.cert.self_signed());
    CHECK(root.cert.resources == ResourceSet::all());
    CHECK(root.cert.uris.manifest == "rsync://example.org/repo/manifest.mft");
    CHECK(verify_cert_signature(root.cert, root.key.public_key()));

    X509* x = parse_x509(root.cert.der);
    REQUIRE(x != nullptr);
    EVP_PKEY* pk = X509_get0_pubkey(x);
    CHECK(X509_verify(x, pk) == 1);
    CHECK(X509_get_ext_by_NID(x, NID_sbgp_ipAddrBlock, -1) >= 0);
    int idx = X509_get_ext_by_NID(x, NID_sbgp_ipAddrBlock, -1);
    CHECK(X509_EXTENSION_get_critical(X509_get_ext(x, idx)) == 1);
    X509_free(x);
}

TEST_CASE("child certificate containment") {
    Ca root = make_root();
    KeyPair child = key("child");
    auto parent_res = ResourceSet::of({"1.0.0.0/8"});
    auto inner = ResourceSet::of({"1.2.0.0/16"});
    auto outside = ResourceSet::of({"2.0.0.0/8"});
    CaCertificate c = build_ca_cert(root.key, child, inner, {}, default_validity(fixed_time()));
    CHECK(parent_res.contains(c.resources));
    CHECK_FALSE(parent_res.contains(outside));
    CHECK(c.aki == root.key.key_id());
    CHECK_THROWS_AS(build_ca_cert(root.key, child, ResourceSet{}, {}, default_validity(fixed_time())), ObjectError);
}

TEST_CASE("ROA signed object round trip and CMS interop") {
    Ca root = make_root();
    RoaContent roa = build_roa(65001, {RoaBlock::of(IpPrefix::parse("10.0.0.0/8"), 24)});
    auto bundle = sign_object(oid::kRoa, encode_roa(roa), signer(root), "rsync://example.org/repo/roa-0.roa");
    DecodedObject d = decode_object(bundle.der);
    REQUIRE(std::holds_alternative<RoaContent>(d.content));
    CHECK(std::get<RoaContent>(d.content) == roa);
    CHECK(root.cert.validity.contains(d.cms.ee.validity));
    CHECK(verify_cert_signature(d.cms.ee, root.key.public_key()));
    CHECK(d.cms.ee.uris.signed_object == "rsync://example.org/repo/roa-0.roa");

    // Independent check through OpenSSL's CMS implementation.
    const unsigned char* p = bundle.der.data();
    CMS_ContentInfo* cms = d2i_CMS_ContentInfo(nullptr, &p, static_cast<long>(bundle.der.size()));
    REQUIRE(cms != nullptr);
    BIO* out = BIO_new(BIO_s_mem());
    CHECK(CMS_verify(cms, nullptr, nullptr, nullptr, out, CMS_NO_SIGNER_CERT_VERIFY) == 1);
    BIO_free(out);
    CMS_ContentInfo_free(cms);

    SUBCASE("deterministic") {
        auto again = sign_object(oid::kRoa, encode_roa(roa), signer(root), "rsync://example.org/repo/roa-0.roa");
        CHECK(again.der == bundle.der);
    }
    SUBCASE("tampered content fails") {
        Bytes der = bundle.der;
        auto pos = std::search(der.begin(), der.end(), bundle.econtent.begin(), bundle.econtent.end());
        REQUIRE(pos != der.end());
        pos[bundle.econtent.size() - 1] ^= 0x01;
        try {
            decode_object(der);
            FAIL("tampered object decoded");
        } catch (const DecodeError& e) {
            CHECK(e.kind() == DecodeErrorKind::SignatureInvalid);
        }
    }
}

TEST_CASE("NUL content ROA encodes in attack mode and is rejected on decode") {
    Ca root = make_root();
    const std::uint8_t nul = 0;
    SignOptions opts;
    opts.attack_mode = true;
    auto bundle = sign_object(oid::kRoa, ByteView(&nul, 1), signer(root), "rsync://example.org/repo/f.roa", opts);
    CHECK(bundle.econtent.size() == 1);
    CHECK_THROWS_AS(decode_object(bundle.der), DecodeError);
    CHECK_THROWS_AS(decode_object(bundle.der, DecodeMode::Lax), DecodeError);
    CHECK_THROWS_AS(sign_object(oid::kRoa, ByteView(), signer(root), "rsync://example.org/repo/g.roa"), ObjectError);
}

TEST_CASE("out of range ROA prefixes") {
    RoaBlock wide;
    wide.family = AddressFamily::Ipv4;
    wide.prefix_length = 129;
    wide.address_bits.assign(17, 0x0a);
    wide.address_bits.back() = 0x80;
    CHECK_THROWS_AS(build_roa(65001, {wide}), ObjectError);
    RoaContent attack = build_roa(65001, {wide}, true);
    Bytes enc = encode_roa(attack);
    try {
        decode_roa_content(enc, DecodeMode::Strict);
        FAIL("strict decode accepted a 129-bit v4 prefix");
    } catch (const DecodeError& e) {
        CHECK(e.kind() == DecodeErrorKind::BoundsViolation);
    }
    RoaContent lax = decode_roa_content(enc, DecodeMode::Lax);
    CHECK(lax.blocks.at(0).prefix_length == 129);
    CHECK_THROWS_AS(lax.blocks.at(0).prefix(), DecodeError);

    RoaBlock maxlen = RoaBlock::of(IpPrefix::parse("10.0.0.0/8"));
    maxlen.max_length = 200;
    CHECK_THROWS_AS(build_roa(1, {maxlen}), ObjectError);
    CHECK_THROWS_AS(decode_roa_content(encode_roa(build_roa(1, {maxlen}, true)), DecodeMode::Strict), DecodeError);

    CHECK_THROWS_AS(build_roa(0, {}), ObjectError);
    CHECK_THROWS_AS(build_roa(0, {}, true), ObjectError);
}

TEST_CASE("manifest hashes agree with an independent SHA-256") {
    Ca root = make_root();
    std::vector<std::string> files = {"", "abc", std::string(1000, 'x')};
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < files.size(); ++i)
        entries.push_back({"f" + std::to_string(i) + ".roa", sha256(as_bytes(files[i]))});
    Validity v = default_validity(fixed_time());
    auto mft = build_manifest(entries, v, signer(root), "rsync://example.org/repo/manifest.mft");
    DecodedObject d = decode_object(mft.der);
    auto& m = std::get<ManifestContent>(d.content);
    REQUIRE(m.entries.size() == 3);
    for (std::size_t i = 0; i < files.size(); ++i) {
        auto ref = oracle::sha256(files[i]);
        CHECK(std::equal(ref.begin(), ref.end(), m.entries[i].hash.begin()));
    }
    CHECK(m.this_update < m.next_update);

    auto empty = build_manifest({}, v, signer(root), "rsync://example.org/repo/manifest.mft");
    CHECK(std::get<ManifestContent>(decode_object(empty.der).content).entries.empty());

    entries.push_back(entries.front());
    try {
        build_manifest(entries, v, signer(root), "rsync://example.org/repo/manifest.mft");
        FAIL("duplicate accepted");
    } catch (const ObjectError& e) {
        CHECK(e.code() == ObjectError::Code::DuplicateEntry);
    }
}

TEST_CASE("ghostbusters record") {
    Ca root = make_root();
    std::string vcard = "BEGIN:VCARD\r\nVERSION:4.0\r\nFN:Operator\r\nEND:VCARD\r\n";
    auto gbr = sign_object(oid::kGhostbusters, as_bytes(vcard), signer(root), "rsync://example.org/repo/contact.gbr");
    auto d = decode_object(gbr.der);
    CHECK(std::get<GhostbustersText>(d.content).vcard == vcard);
}

TEST_CASE("CRL round trip with set semantics") {
    Ca root = make_root();
    Validity v = default_validity(fixed_time());
    CrlContent empty = decode_crl(build_crl(root.key, root.cert, {}, v));
    CHECK(empty.revoked.empty());
    CHECK(verify_crl(empty, root.key.public_key()));
    CHECK(empty.aki == root.key.key_id());

    Bytes s1 = serial_from(42);
    CrlContent one = decode_crl(build_crl(root.key, root.cert, {s1, s1, Bytes{0, 42}}, v));
    CHECK(one.revoked.size() == 1);
    CHECK(one.is_revoked(s1));
    CHECK_FALSE(one.is_revoked(serial_from(43)));

    Bytes der = build_crl(root.key, root.cert, {s1}, v);
    const unsigned char* p = der.data();
    X509_CRL* crl = d2i_X509_CRL(nullptr, &p, static_cast<long>(der.size()));
    REQUIRE(crl != nullptr);
    X509* x = parse_x509(root.cert.der);
    CHECK(X509_CRL_verify(crl, X509_get0_pubkey(x)) == 1);
    X509_free(x);
    X509_CRL_free(crl);
}

TEST_CASE("TAL layout") {
    Ca root = make_root();
    std::string one = build_tal({"https://example.org/ta/root.cer"}, root.key.public_key());
    Tal t = parse_tal(one);
    CHECK(t.uris == std::vector<std::string>{"https://example.org/ta/root.cer"});
    CHECK(t.public_key == root.key.public_key());
    CHECK(one.find("\n\n") != std::string::npos);

    std::vector<std::string> two = {"https://example.org/ta/root.cer", "rsync://example.org/ta/root.cer"};
    Tal t2 = parse_tal(build_tal(two, root.key.public_key()));
    CHECK(t2.uris == two);
    CHECK_THROWS(build_tal({}, root.key.public_key()));
}

TEST_CASE("BER length forms are flagged in strict mode") {
    // OCTET STRING "ab" with a non-minimal long-form length.
    Bytes ber = {0x04, 0x81, 0x02, 'a', 'b'};
    der::Reader lax(ber, DecodeMode::Lax);
    CHECK(lax.read_octet_string() == Bytes{'a', 'b'});
    der::Reader strict(ber, DecodeMode::Strict);
    CHECK_THROWS_AS(strict.read_octet_string(), DecodeError);
}

TEST_CASE("decode_object is total on random and mutated input") {
    Ca root = make_root();
    RoaContent roa = build_roa(65001, {RoaBlock::of(IpPrefix::parse("10.0.0.0/8"), 24)});
    Bytes valid = sign_object(oid::kRoa, encode_roa(roa), signer(root), "rsync://example.org/repo/roa-0.roa").der;

    std::mt19937_64 rng(1234);
    int errors = 0;
    for (int i = 0; i < 2000; ++i) {
        Bytes input;
        if (i % 2 == 0) {
            input.resize(rng() % 512);
            for (auto& b : input) b = static_cast<std::uint8_t>(rng());
        } else {
            input = valid;
            int flips = 1 + static_cast<int>(rng() % 8);
            for (int f = 0; f < flips; ++f) input[rng() % input.size()] = static_cast<std::uint8_t>(rng());
            if (rng() % 4 == 0) input.resize(rng() % input.size());
        }
        for (auto mode : {DecodeMode::Strict, DecodeMode::Lax}) {
            try {
                decode_object(input, mode);
            } catch (const DecodeError&) {
                ++errors;
            }
        }
    }
    CHECK(errors > 0);

    Bytes big(10u << 20);
    for (auto& b : big) b = static_cast<std::uint8_t>(rng());
    auto start = std::chrono::steady_clock::now();
    CHECK_THROWS_AS(decode_object(big), DecodeError);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(1));
}
