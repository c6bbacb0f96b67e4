// Hashing, deterministic RSA key derivation and signatures.

#pragma once

#include <array>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>

#include "gauntlet/der.hpp"

typedef struct evp_pkey_st EVP_PKEY;

namespace gauntlet {

using Sha256Digest = std::array<std::uint8_t, 32>;
using Seed = std::array<std::uint8_t, 32>;

Sha256Digest sha256(ByteView data);
std::string hex(ByteView data);
inline std::string hex(const Sha256Digest& d) { return hex(ByteView(d)); }
Bytes from_hex(std::string_view s);

std::string base64_encode(ByteView data);
// Ignores ASCII whitespace. Throws std::invalid_argument on bad input.
Bytes base64_decode(std::string_view text);

// seed = SHA-256(instance_uuid || node_path)
Seed seed_for(std::string_view instance_uuid, std::string_view node_path);

// RSA-2048 follows the RPKI algorithm profile. Fast uses 1024-bit moduli so
// desk-scale trees with thousands of nodes can be generated in seconds; a
// relying party only accepts those when configured to.
enum class KeyStrength { Rsa2048, Fast };

unsigned modulus_bits(KeyStrength s);

class KeyPair {
public:
    KeyPair() = default;

    const Seed& seed() const noexcept { return seed_; }
    // DER SubjectPublicKeyInfo.
    const Bytes& public_key() const noexcept { return spki_; }
    // SHA-1 over the subjectPublicKey BIT STRING contents (RFC 5280 method 1).
    const Bytes& key_id() const noexcept { return key_id_; }
    KeyStrength strength() const noexcept { return strength_; }

    // RSASSA-PKCS1-v1_5 with SHA-256.
    Bytes sign(ByteView message) const;

    explicit operator bool() const noexcept { return static_cast<bool>(pkey_); }

private:
    friend KeyPair derive_keypair(const Seed&, KeyStrength);
    Seed seed_{};
    Bytes spki_;
    Bytes key_id_;
    KeyStrength strength_ = KeyStrength::Rsa2048;
    std::shared_ptr<EVP_PKEY> pkey_;
};

// Deterministic: the same seed and strength always yield the same key.
KeyPair derive_keypair(const Seed& seed, KeyStrength strength = KeyStrength::Rsa2048);

// Verifies an RSASSA-PKCS1-v1_5/SHA-256 signature against a DER SPKI.
bool verify_signature(ByteView spki, ByteView message, ByteView signature);

// Modulus size of an RSA SPKI, or 0 when it cannot be parsed.
unsigned public_key_bits(ByteView spki);

Bytes key_id_of(ByteView spki);

// Thread-safe LRU cache in front of derive_keypair.
class KeyCache {
public:
    explicit KeyCache(std::size_t capacity = 10000) : capacity_(capacity) {}

    KeyPair get(const Seed& seed, KeyStrength strength);
    std::size_t size() const;
    std::size_t misses() const;

    static KeyCache& global();

private:
    struct Entry {
        std::string key;
        KeyPair pair;
    };
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::list<Entry> lru_;
    std::unordered_map<std::string, std::list<Entry>::iterator> index_;
    std::size_t misses_ = 0;
};

}  // namespace gauntlet
