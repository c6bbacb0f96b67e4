// Internet number resources: IP prefixes, AS ranges, and the RFC 3779
// certificate extensions that carry them.

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gauntlet/der.hpp"

namespace gauntlet {

enum class AddressFamily : std::uint8_t { Ipv4 = 1, Ipv6 = 2 };

constexpr unsigned family_bits(AddressFamily f) { return f == AddressFamily::Ipv4 ? 32 : 128; }

struct IpPrefix {
    AddressFamily family = AddressFamily::Ipv4;
    // Network-order address, left aligned; IPv4 uses the first four bytes.
    std::array<std::uint8_t, 16> addr{};
    std::uint8_t length = 0;

    // "10.0.0.0/8", "2001:db8::/32". Host bits must be zero.
    static IpPrefix parse(std::string_view text);
    static IpPrefix from_bits(AddressFamily family, ByteView bits, unsigned length);

    std::string to_string() const;
    bool contains(const IpPrefix& other) const;
    // First `length` bits packed into ceil(length / 8) bytes.
    Bytes packed_bits() const;

    auto operator<=>(const IpPrefix&) const = default;
};

struct AsRange {
    std::uint32_t low = 0;
    std::uint32_t high = 0;
    auto operator<=>(const AsRange&) const = default;
};

class ResourceSet {
public:
    std::vector<IpPrefix> v4;
    std::vector<IpPrefix> v6;
    std::vector<AsRange> asns;
    bool inherit_ip = false;
    bool inherit_as = false;

    static ResourceSet all();
    static ResourceSet of(std::initializer_list<std::string_view> prefixes,
                          std::initializer_list<AsRange> asns = {});

    void add(const IpPrefix& p);
    void add(AsRange r);
    // Sorts each list and drops entries covered by another entry.
    void normalize();

    bool empty() const { return v4.empty() && v6.empty() && asns.empty() && !inherit_ip && !inherit_as; }
    bool covers(const IpPrefix& p) const;
    bool covers_asn(std::uint32_t asn) const;
    // True iff every resource of `child` is held here. Inherited parts of the
    // child are considered covered.
    bool contains(const ResourceSet& child) const;
    // Child with inherit flags replaced by the parent's concrete resources.
    ResourceSet resolved_against(const ResourceSet& parent) const;

    std::string to_string() const;

    bool operator==(const ResourceSet&) const = default;
};

// extnValue contents for id-pe-ipAddrBlocks / id-pe-autonomousSysIds.
Bytes encode_ip_addr_blocks(const ResourceSet& r);
Bytes encode_as_identifiers(const ResourceSet& r);
void decode_ip_addr_blocks(ByteView der, ResourceSet& out, DecodeMode mode);
void decode_as_identifiers(ByteView der, ResourceSet& out, DecodeMode mode);

}  // namespace gauntlet
