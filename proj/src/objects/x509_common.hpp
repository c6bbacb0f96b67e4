#pragma once

#include <string>
#include <string_view>

#include "gauntlet/crypto.hpp"
#include "gauntlet/der.hpp"

namespace gauntlet::x509 {

// Name with a single CN attribute.
Bytes name(std::string_view cn);
// Returns the CN when present, otherwise the hex of the Name encoding.
std::string read_name(der::Reader& r);

Bytes signature_algorithm();
void read_signature_algorithm(der::Reader& r);

// SEQUENCE { tbs, sha256WithRSAEncryption, BIT STRING signature }
Bytes signed_envelope(const Bytes& tbs, const KeyPair& key);

}  // namespace gauntlet::x509
