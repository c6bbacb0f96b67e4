#include "gauntlet/resources.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace gauntlet {
namespace {

using u128 = unsigned __int128;

u128 to_int(const IpPrefix& p) {
    u128 v = 0;
    for (int i = 0; i < 16; ++i) v = (v << 8) | p.addr[i];
    return v;
}

IpPrefix from_int(AddressFamily f, u128 v, unsigned len) {
    IpPrefix p;
    p.family = f;
    p.length = static_cast<std::uint8_t>(len);
    for (int i = 15; i >= 0; --i) {
        p.addr[i] = static_cast<std::uint8_t>(v & 0xff);
        v >>= 8;
    }
    return p;
}

// Bits are left aligned in a 128-bit word regardless of family.
u128 mask_for(unsigned len) { return len == 0 ? 0 : ~u128(0) << (128 - len); }

void normalize_list(std::vector<IpPrefix>& v) {
    std::sort(v.begin(), v.end(), [](const IpPrefix& a, const IpPrefix& b) {
        u128 x = to_int(a), y = to_int(b);
        return x != y ? x < y : a.length < b.length;
    });
    std::vector<IpPrefix> out;
    for (const auto& p : v)
        if (out.empty() || !out.back().contains(p)) out.push_back(p);
    v = std::move(out);
}

// Splits the inclusive range [lo, hi] (left aligned) into prefixes.
void range_to_prefixes(AddressFamily f, u128 lo, u128 hi, std::vector<IpPrefix>& out) {
    const unsigned bits = family_bits(f);
    while (true) {
        unsigned len = bits;
        while (len > 0) {
            u128 m = mask_for(len - 1);
            u128 span_end = lo | ~m;
            if (bits < 128) span_end &= mask_for(bits);
            if ((lo & m) != lo || span_end > hi) break;
            --len;
        }
        out.push_back(from_int(f, lo, len));
        u128 last = lo | ~mask_for(len);
        if (bits < 128) last &= mask_for(bits);
        if (last >= hi) break;
        u128 step = bits < 128 ? (u128(1) << (128 - bits)) : 1;
        lo = last + step;
    }
}

AddressFamily family_from_afi(ByteView afi) {
    if (afi.size() < 2 || afi.size() > 3) malformed("addressFamily must be 2 or 3 bytes");
    if (afi[0] == 0 && afi[1] == 1) return AddressFamily::Ipv4;
    if (afi[0] == 0 && afi[1] == 2) return AddressFamily::Ipv6;
    throw DecodeError(DecodeErrorKind::BoundsViolation, "unknown address family");
}

}  // namespace

IpPrefix IpPrefix::parse(std::string_view text) {
    auto slash = text.find('/');
    if (slash == std::string_view::npos) throw std::invalid_argument("prefix needs /len: " + std::string(text));
    std::string host(text.substr(0, slash));
    unsigned len = 0;
    auto lenpart = text.substr(slash + 1);
    auto [ptr, ec] = std::from_chars(lenpart.data(), lenpart.data() + lenpart.size(), len);
    if (ec != std::errc() || ptr != lenpart.data() + lenpart.size())
        throw std::invalid_argument("bad prefix length: " + std::string(text));
    IpPrefix p;
    if (host.find(':') != std::string::npos) {
        p.family = AddressFamily::Ipv6;
        if (inet_pton(AF_INET6, host.c_str(), p.addr.data()) != 1)
            throw std::invalid_argument("bad IPv6 address: " + host);
    } else {
        p.family = AddressFamily::Ipv4;
        if (inet_pton(AF_INET, host.c_str(), p.addr.data()) != 1)
            throw std::invalid_argument("bad IPv4 address: " + host);
    }
    if (len > family_bits(p.family)) throw std::invalid_argument("prefix length out of range");
    p.length = static_cast<std::uint8_t>(len);
    if ((to_int(p) & ~mask_for(len)) != 0) throw std::invalid_argument("host bits set: " + std::string(text));
    return p;
}

IpPrefix IpPrefix::from_bits(AddressFamily family, ByteView bits, unsigned length) {
    if (length > family_bits(family))
        throw DecodeError(DecodeErrorKind::BoundsViolation,
                          "prefix length " + std::to_string(length) + " exceeds family width");
    if (bits.size() != (length + 7) / 8) malformed("prefix bit string size mismatch");
    IpPrefix p;
    p.family = family;
    p.length = static_cast<std::uint8_t>(length);
    std::copy(bits.begin(), bits.end(), p.addr.begin());
    u128 v = to_int(p) & mask_for(length);
    return from_int(family, v, length);
}

std::string IpPrefix::to_string() const {
    char buf[INET6_ADDRSTRLEN];
    inet_ntop(family == AddressFamily::Ipv4 ? AF_INET : AF_INET6, addr.data(), buf, sizeof buf);
    return std::string(buf) + "/" + std::to_string(length);
}

bool IpPrefix::contains(const IpPrefix& other) const {
    if (family != other.family || length > other.length) return false;
    u128 m = mask_for(length);
    return (to_int(*this) & m) == (to_int(other) & m);
}

Bytes IpPrefix::packed_bits() const {
    return Bytes(addr.begin(), addr.begin() + (length + 7) / 8);
}

ResourceSet ResourceSet::all() {
    ResourceSet r;
    r.add(IpPrefix::parse("0.0.0.0/0"));
    r.add(IpPrefix::parse("::/0"));
    r.add(AsRange{0, 0xffffffffu});
    return r;
}

ResourceSet ResourceSet::of(std::initializer_list<std::string_view> prefixes,
                            std::initializer_list<AsRange> asns) {
    ResourceSet r;
    for (auto p : prefixes) r.add(IpPrefix::parse(p));
    for (auto a : asns) r.add(a);
    r.normalize();
    return r;
}

void ResourceSet::add(const IpPrefix& p) {
    (p.family == AddressFamily::Ipv4 ? v4 : v6).push_back(p);
}

void ResourceSet::add(AsRange r) {
    if (r.low > r.high) throw std::invalid_argument("AS range low > high");
    asns.push_back(r);
}

void ResourceSet::normalize() {
    normalize_list(v4);
    normalize_list(v6);
    std::sort(asns.begin(), asns.end());
    std::vector<AsRange> merged;
    for (auto r : asns) {
        if (!merged.empty() && static_cast<std::uint64_t>(merged.back().high) + 1 >= r.low) {
            merged.back().high = std::max(merged.back().high, r.high);
        } else {
            merged.push_back(r);
        }
    }
    asns = std::move(merged);
}

bool ResourceSet::covers(const IpPrefix& p) const {
    const auto& list = p.family == AddressFamily::Ipv4 ? v4 : v6;
    return std::any_of(list.begin(), list.end(), [&](const IpPrefix& q) { return q.contains(p); });
}

bool ResourceSet::covers_asn(std::uint32_t asn) const {
    return std::any_of(asns.begin(), asns.end(),
                       [&](AsRange r) { return r.low <= asn && asn <= r.high; });
}

bool ResourceSet::contains(const ResourceSet& child) const {
    if (!child.inherit_ip) {
        for (const auto& p : child.v4)
            if (!covers(p)) return false;
        for (const auto& p : child.v6)
            if (!covers(p)) return false;
    }
    if (!child.inherit_as) {
        ResourceSet mine = *this;
        mine.normalize();
        for (auto r : child.asns) {
            bool ok = std::any_of(mine.asns.begin(), mine.asns.end(),
                                  [&](AsRange m) { return m.low <= r.low && r.high <= m.high; });
            if (!ok) return false;
        }
    }
    return true;
}

ResourceSet ResourceSet::resolved_against(const ResourceSet& parent) const {
    ResourceSet r = *this;
    if (inherit_ip) {
        r.v4 = parent.v4;
        r.v6 = parent.v6;
        r.inherit_ip = false;
    }
    if (inherit_as) {
        r.asns = parent.asns;
        r.inherit_as = false;
    }
    return r;
}

std::string ResourceSet::to_string() const {
    std::string out;
    auto sep = [&] {
        if (!out.empty()) out += ", ";
    };
    if (inherit_ip) {
        sep();
        out += "ip:inherit";
    }
    for (const auto& p : v4) sep(), out += p.to_string();
    for (const auto& p : v6) sep(), out += p.to_string();
    if (inherit_as) {
        sep();
        out += "as:inherit";
    }
    for (auto r : asns) {
        sep();
        out += r.low == r.high ? "AS" + std::to_string(r.low)
                               : "AS" + std::to_string(r.low) + "-AS" + std::to_string(r.high);
    }
    return out;
}

Bytes encode_ip_addr_blocks(const ResourceSet& r) {
    std::vector<Bytes> families;
    auto family = [&](AddressFamily f, const std::vector<IpPrefix>& list) {
        const std::uint8_t afi[2] = {0, static_cast<std::uint8_t>(f)};
        Bytes choice;
        if (r.inherit_ip) {
            choice = der::null();
        } else {
            if (list.empty()) return;
            std::vector<Bytes> items;
            for (const auto& p : list) {
                unsigned nbytes = (p.length + 7u) / 8u;
                items.push_back(der::bit_string(p.packed_bits(), nbytes * 8 - p.length));
            }
            choice = der::sequence(items);
        }
        families.push_back(der::sequence({der::octet_string(afi), choice}));
    };
    family(AddressFamily::Ipv4, r.v4);
    family(AddressFamily::Ipv6, r.v6);
    return der::sequence(families);
}

Bytes encode_as_identifiers(const ResourceSet& r) {
    Bytes choice;
    if (r.inherit_as) {
        choice = der::null();
    } else {
        std::vector<Bytes> items;
        for (auto a : r.asns) {
            if (a.low == a.high)
                items.push_back(der::integer(a.low));
            else
                items.push_back(der::sequence({der::integer(a.low), der::integer(a.high)}));
        }
        choice = der::sequence(items);
    }
    return der::sequence({der::explicit_tag(0, choice)});
}

void decode_ip_addr_blocks(ByteView bytes, ResourceSet& out, DecodeMode mode) {
    der::Reader top(bytes, mode);
    der::Reader blocks = top.enter(der::tag::kSequence);
    top.expect_end();
    while (!blocks.at_end()) {
        der::Reader fam = blocks.enter(der::tag::kSequence);
        Bytes afi = fam.read_octet_string();
        AddressFamily f = family_from_afi(afi);
        if (fam.next_is(der::tag::kNull)) {
            fam.next();
            out.inherit_ip = true;
        } else {
            der::Reader items = fam.enter(der::tag::kSequence);
            while (!items.at_end()) {
                if (items.next_is(der::tag::kBitString)) {
                    auto [bits, unused] = items.read_bit_string();
                    unsigned len = static_cast<unsigned>(bits.size() * 8 - unused);
                    out.add(IpPrefix::from_bits(f, bits, len));
                } else {
                    der::Reader range = items.enter(der::tag::kSequence);
                    auto [lo_bits, lo_unused] = range.read_bit_string();
                    auto [hi_bits, hi_unused] = range.read_bit_string();
                    range.expect_end();
                    const unsigned width = family_bits(f);
                    if (lo_bits.size() * 8 > width || hi_bits.size() * 8 > width)
                        throw DecodeError(DecodeErrorKind::BoundsViolation, "range bound too long");
                    u128 lo = 0, hi = 0;
                    for (std::size_t i = 0; i < 16; ++i) {
                        lo = (lo << 8) | (i < lo_bits.size() ? lo_bits[i] : 0);
                        std::uint8_t hb = i < hi_bits.size() ? hi_bits[i] : 0xff;
                        if (i + 1 == hi_bits.size()) hb |= static_cast<std::uint8_t>((1u << hi_unused) - 1);
                        hi = (hi << 8) | hb;
                    }
                    if (width < 128) hi &= mask_for(width);
                    if (lo > hi) throw DecodeError(DecodeErrorKind::BoundsViolation, "range min > max");
                    std::vector<IpPrefix> parts;
                    range_to_prefixes(f, lo, hi, parts);
                    for (const auto& p : parts) out.add(p);
                }
            }
        }
        fam.expect_end();
    }
    out.normalize();
}

void decode_as_identifiers(ByteView bytes, ResourceSet& out, DecodeMode mode) {
    der::Reader top(bytes, mode);
    der::Reader ids = top.enter(der::tag::kSequence);
    top.expect_end();
    if (auto asnum = ids.optional(der::tag::context(0, true))) {
        der::Reader choice(asnum->content, mode, ids.depth() + 1);
        if (choice.next_is(der::tag::kNull)) {
            choice.next();
            out.inherit_as = true;
        } else {
            der::Reader items = choice.enter(der::tag::kSequence);
            auto read_asn = [](der::Reader& r) {
                std::int64_t v = r.read_small_integer();
                if (v < 0 || v > 0xffffffffLL)
                    throw DecodeError(DecodeErrorKind::BoundsViolation, "ASN out of range");
                return static_cast<std::uint32_t>(v);
            };
            while (!items.at_end()) {
                if (items.next_is(der::tag::kInteger)) {
                    auto v = read_asn(items);
                    out.add(AsRange{v, v});
                } else {
                    der::Reader range = items.enter(der::tag::kSequence);
                    auto lo = read_asn(range);
                    auto hi = read_asn(range);
                    range.expect_end();
                    if (lo > hi) throw DecodeError(DecodeErrorKind::BoundsViolation, "AS range min > max");
                    out.add(AsRange{lo, hi});
                }
            }
        }
        choice.expect_end();
    }
    // rdi [1] is ignored.
    out.normalize();
}

}  // namespace gauntlet
