#include "gauntlet/crypto.hpp"

#include <openssl/bn.h>
#include <openssl/core_names.h>
#include <openssl/evp.h>
#include <openssl/param_build.h>
#include <openssl/sha.h>
#include <openssl/x509.h>

#include <cctype>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace gauntlet {
namespace {

struct BnFree {
    void operator()(BIGNUM* b) const { BN_free(b); }
};
struct BnCtxFree {
    void operator()(BN_CTX* c) const { BN_CTX_free(c); }
};
using BnPtr = std::unique_ptr<BIGNUM, BnFree>;

BnPtr bn() { return BnPtr(BN_new()); }

// SHA-256 in counter mode over the seed.
class SeedStream {
public:
    explicit SeedStream(const Seed& seed) : seed_(seed) {}
    void fill(std::uint8_t* out, std::size_t n) {
        while (n > 0) {
            std::uint8_t block[32 + 16 + 8];
            std::memcpy(block, seed_.data(), 32);
            std::memcpy(block + 32, "gauntlet/rsa-kdf", 16);
            for (int i = 0; i < 8; ++i) block[48 + i] = static_cast<std::uint8_t>(counter_ >> (56 - 8 * i));
            ++counter_;
            std::uint8_t h[32];
            SHA256(block, sizeof block, h);
            std::size_t k = n < 32 ? n : 32;
            std::memcpy(out, h, k);
            out += k;
            n -= k;
        }
    }

private:
    Seed seed_;
    std::uint64_t counter_ = 0;
};

const std::vector<unsigned>& small_primes() {
    static const std::vector<unsigned> primes = [] {
        std::vector<unsigned> v;
        for (unsigned i = 3; i < 8000; i += 2) {
            bool prime = true;
            for (unsigned j = 3; j * j <= i; j += 2)
                if (i % j == 0) {
                    prime = false;
                    break;
                }
            if (prime) v.push_back(i);
        }
        return v;
    }();
    return primes;
}

// Deterministic prime search: random start from the seed stream, then a
// sieved upward scan. Candidates with p = 1 mod 65537 are skipped so that
// gcd(p - 1, e) = 1.
BnPtr next_prime(SeedStream& rng, unsigned bits, BN_CTX* ctx) {
    std::vector<std::uint8_t> buf(bits / 8);
    rng.fill(buf.data(), buf.size());
    buf[0] |= 0xc0;
    buf.back() |= 0x01;
    BnPtr base(BN_bin2bn(buf.data(), static_cast<int>(buf.size()), nullptr));
    constexpr unsigned kWindow = 8192;
    std::vector<char> composite(kWindow);
    BnPtr cand = bn();
    for (;;) {
        std::fill(composite.begin(), composite.end(), 0);
        for (unsigned q : small_primes()) {
            BN_ULONG r = BN_mod_word(base.get(), q);
            unsigned long off = (q - r) % q;
            if (off % 2) off += q;
            for (unsigned long k = off / 2; k < kWindow; k += q) composite[k] = 1;
        }
        for (unsigned k = 0; k < kWindow; ++k) {
            if (composite[k]) continue;
            BN_copy(cand.get(), base.get());
            BN_add_word(cand.get(), 2 * k);
            if (BN_mod_word(cand.get(), 65537) == 1) continue;
            if (BN_check_prime(cand.get(), ctx, nullptr) == 1) return std::move(cand);
        }
        BN_add_word(base.get(), 2 * kWindow);
    }
}

void check(int ok, const char* what) {
    if (ok <= 0) throw std::runtime_error(std::string("openssl: ") + what);
}

}  // namespace

Sha256Digest sha256(ByteView data) {
    Sha256Digest d;
    SHA256(data.data(), data.size(), d.data());
    return d;
}

std::string hex(ByteView data) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(data.size() * 2);
    for (auto b : data) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xf]);
    }
    return out;
}

Bytes from_hex(std::string_view s) {
    if (s.size() % 2) throw std::invalid_argument("odd hex length");
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw std::invalid_argument("bad hex digit");
    };
    Bytes out(s.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(nib(s[2 * i]) << 4 | nib(s[2 * i + 1]));
    return out;
}

std::string base64_encode(ByteView data) {
    std::string out(4 * ((data.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(),
                            static_cast<int>(data.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

Bytes base64_decode(std::string_view text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text)
        if (c != ' ' && c != '\n' && c != '\r' && c != '\t') clean.push_back(c);
    if (clean.size() % 4) throw std::invalid_argument("base64 length not a multiple of 4");
    for (char c : clean)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/' || c == '='))
            throw std::invalid_argument("invalid base64 character");
    Bytes out(clean.size() / 4 * 3);
    int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                            static_cast<int>(clean.size()));
    if (n < 0) throw std::invalid_argument("invalid base64");
    std::size_t pad = 0;
    if (!clean.empty() && clean.back() == '=') ++pad;
    if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

Seed seed_for(std::string_view instance_uuid, std::string_view node_path) {
    std::string material(instance_uuid);
    material += node_path;
    return sha256(as_bytes(material));
}

unsigned modulus_bits(KeyStrength s) { return s == KeyStrength::Rsa2048 ? 2048 : 1024; }

KeyPair derive_keypair(const Seed& seed, KeyStrength strength) {
    const unsigned bits = modulus_bits(strength);
    std::unique_ptr<BN_CTX, BnCtxFree> ctx(BN_CTX_new());
    SeedStream rng(seed);
    BnPtr p = next_prime(rng, bits / 2, ctx.get());
    BnPtr q = next_prime(rng, bits / 2, ctx.get());
    while (BN_cmp(p.get(), q.get()) == 0) q = next_prime(rng, bits / 2, ctx.get());
    if (BN_cmp(p.get(), q.get()) < 0) std::swap(p, q);

    BnPtr n = bn(), e = bn(), d = bn(), p1 = bn(), q1 = bn(), phi = bn();
    BnPtr dp = bn(), dq = bn(), qinv = bn();
    BN_set_word(e.get(), 65537);
    check(BN_mul(n.get(), p.get(), q.get(), ctx.get()), "BN_mul");
    BN_sub(p1.get(), p.get(), BN_value_one());
    BN_sub(q1.get(), q.get(), BN_value_one());
    check(BN_mul(phi.get(), p1.get(), q1.get(), ctx.get()), "BN_mul");
    if (!BN_mod_inverse(d.get(), e.get(), phi.get(), ctx.get())) throw std::runtime_error("no inverse");
    check(BN_mod(dp.get(), d.get(), p1.get(), ctx.get()), "BN_mod");
    check(BN_mod(dq.get(), d.get(), q1.get(), ctx.get()), "BN_mod");
    if (!BN_mod_inverse(qinv.get(), q.get(), p.get(), ctx.get())) throw std::runtime_error("no inverse");

    OSSL_PARAM_BLD* bld = OSSL_PARAM_BLD_new();
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_N, n.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_E, e.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_D, d.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_FACTOR1, p.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_FACTOR2, q.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_EXPONENT1, dp.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_EXPONENT2, dq.get());
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_COEFFICIENT1, qinv.get());
    OSSL_PARAM* params = OSSL_PARAM_BLD_to_param(bld);
    OSSL_PARAM_BLD_free(bld);

    EVP_PKEY_CTX* pctx = EVP_PKEY_CTX_new_from_name(nullptr, "RSA", nullptr);
    EVP_PKEY* raw = nullptr;
    int ok = EVP_PKEY_fromdata_init(pctx) > 0 &&
             EVP_PKEY_fromdata(pctx, &raw, EVP_PKEY_KEYPAIR, params) > 0;
    EVP_PKEY_CTX_free(pctx);
    OSSL_PARAM_free(params);
    if (!ok) throw std::runtime_error("openssl: EVP_PKEY_fromdata failed");

    KeyPair kp;
    kp.seed_ = seed;
    kp.strength_ = strength;
    kp.pkey_.reset(raw, EVP_PKEY_free);
    unsigned char* der = nullptr;
    int len = i2d_PUBKEY(raw, &der);
    check(len, "i2d_PUBKEY");
    kp.spki_.assign(der, der + len);
    OPENSSL_free(der);
    kp.key_id_ = key_id_of(kp.spki_);
    return kp;
}

Bytes KeyPair::sign(ByteView message) const {
    if (!pkey_) throw std::logic_error("sign with empty key");
    EVP_MD_CTX* md = EVP_MD_CTX_new();
    std::size_t siglen = 0;
    Bytes sig;
    bool ok = EVP_DigestSignInit(md, nullptr, EVP_sha256(), nullptr, pkey_.get()) > 0 &&
              EVP_DigestSign(md, nullptr, &siglen, message.data(), message.size()) > 0;
    if (ok) {
        sig.resize(siglen);
        ok = EVP_DigestSign(md, sig.data(), &siglen, message.data(), message.size()) > 0;
        sig.resize(siglen);
    }
    EVP_MD_CTX_free(md);
    if (!ok) throw std::runtime_error("openssl: signing failed");
    return sig;
}

bool verify_signature(ByteView spki, ByteView message, ByteView signature) {
    const unsigned char* p = spki.data();
    EVP_PKEY* key = d2i_PUBKEY(nullptr, &p, static_cast<long>(spki.size()));
    if (!key) return false;
    EVP_MD_CTX* md = EVP_MD_CTX_new();
    bool ok = EVP_DigestVerifyInit(md, nullptr, EVP_sha256(), nullptr, key) > 0 &&
              EVP_DigestVerify(md, signature.data(), signature.size(), message.data(),
                               message.size()) == 1;
    EVP_MD_CTX_free(md);
    EVP_PKEY_free(key);
    return ok;
}

unsigned public_key_bits(ByteView spki) {
    const unsigned char* p = spki.data();
    EVP_PKEY* key = d2i_PUBKEY(nullptr, &p, static_cast<long>(spki.size()));
    if (!key) return 0;
    int bits = EVP_PKEY_get_bits(key);
    EVP_PKEY_free(key);
    return bits > 0 ? static_cast<unsigned>(bits) : 0;
}

Bytes key_id_of(ByteView spki) {
    der::Reader outer(spki, DecodeMode::Lax);
    der::Reader seq = outer.enter(der::tag::kSequence);
    seq.expect(der::tag::kSequence);
    auto [bits, unused] = seq.read_bit_string();
    Bytes out(SHA_DIGEST_LENGTH);
    SHA1(bits.data(), bits.size(), out.data());
    return out;
}

KeyPair KeyCache::get(const Seed& seed, KeyStrength strength) {
    std::string key(reinterpret_cast<const char*>(seed.data()), seed.size());
    key.push_back(strength == KeyStrength::Rsa2048 ? 'R' : 'F');
    {
        std::lock_guard lock(mu_);
        auto it = index_.find(key);
        if (it != index_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second);
            return it->second->pair;
        }
        ++misses_;
    }
    // Derivation runs unlocked; a concurrent duplicate computes the same key.
    KeyPair pair = derive_keypair(seed, strength);
    std::lock_guard lock(mu_);
    auto it = index_.find(key);
    if (it != index_.end()) return it->second->pair;
    lru_.push_front(Entry{key, pair});
    index_[key] = lru_.begin();
    while (lru_.size() > capacity_) {
        index_.erase(lru_.back().key);
        lru_.pop_back();
    }
    return pair;
}

std::size_t KeyCache::size() const {
    std::lock_guard lock(mu_);
    return lru_.size();
}

std::size_t KeyCache::misses() const {
    std::lock_guard lock(mu_);
    return misses_;
}

KeyCache& KeyCache::global() {
    static KeyCache cache;
    return cache;
}

}  // namespace gauntlet
