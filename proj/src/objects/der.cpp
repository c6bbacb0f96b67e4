#include "gauntlet/der.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

namespace gauntlet {

std::string_view to_string(DecodeErrorKind kind) {
    switch (kind) {
        case DecodeErrorKind::MalformedDer: return "MalformedDer";
        case DecodeErrorKind::SignatureInvalid: return "SignatureInvalid";
        case DecodeErrorKind::BoundsViolation: return "BoundsViolation";
    }
    return "DecodeError";
}

namespace der {
namespace {

constexpr unsigned kMaxNesting = 48;

void append_length(Bytes& out, std::size_t len) {
    if (len < 0x80) {
        out.push_back(static_cast<std::uint8_t>(len));
        return;
    }
    std::uint8_t buf[sizeof(std::size_t)];
    int n = 0;
    while (len > 0) {
        buf[n++] = static_cast<std::uint8_t>(len & 0xff);
        len >>= 8;
    }
    out.push_back(static_cast<std::uint8_t>(0x80 | n));
    while (n > 0) out.push_back(buf[--n]);
}

// Howard Hinnant's civil calendar conversions.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct Civil {
    std::int64_t year;
    unsigned month, day, hour, minute, second;
};

Civil civil_from_time(TimePoint t) {
    std::int64_t secs = t.time_since_epoch().count();
    std::int64_t z = secs >= 0 ? secs / 86400 : (secs - 86399) / 86400;
    std::int64_t rem = secs - z * 86400;
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return {y + (m <= 2), m, d, static_cast<unsigned>(rem / 3600),
            static_cast<unsigned>((rem / 60) % 60), static_cast<unsigned>(rem % 60)};
}

unsigned parse_digits(ByteView s, std::size_t off, std::size_t n) {
    unsigned v = 0;
    for (std::size_t i = off; i < off + n; ++i) {
        if (s[i] < '0' || s[i] > '9') malformed("non-digit in time value");
        v = v * 10 + (s[i] - '0');
    }
    return v;
}

// Returns the end offset (exclusive, past the EOC) of an indefinite-length
// element whose content starts at `pos`.
std::size_t scan_indefinite(ByteView data, std::size_t pos, unsigned depth);

// Parses one header at `pos`. Sets content bounds; returns end offset.
std::size_t parse_header(ByteView data, std::size_t pos, DecodeMode mode, unsigned depth,
                         std::uint8_t& tag, std::size_t& content_begin,
                         std::size_t& content_len) {
    if (pos >= data.size()) malformed("unexpected end of input");
    tag = data[pos++];
    if ((tag & 0x1f) == 0x1f) malformed("high tag numbers are not supported");
    if (pos >= data.size()) malformed("missing length");
    std::uint8_t first = data[pos++];
    if (first < 0x80) {
        content_begin = pos;
        content_len = first;
    } else if (first == 0x80) {
        if (mode == DecodeMode::Strict) malformed("indefinite length is not DER");
        if ((tag & 0x20) == 0) malformed("indefinite length on primitive element");
        if (depth >= kMaxNesting) malformed("nesting too deep");
        content_begin = pos;
        std::size_t end = scan_indefinite(data, pos, depth + 1);
        content_len = end - 2 - pos;
        return end;
    } else {
        unsigned n = first & 0x7f;
        if (n > sizeof(std::size_t) || n == 0x7f) malformed("length field too large");
        if (data.size() - pos < n) malformed("truncated length");
        std::size_t len = 0;
        for (unsigned i = 0; i < n; ++i) len = (len << 8) | data[pos++];
        if (mode == DecodeMode::Strict) {
            if (len < 0x80 || data[pos - n] == 0) malformed("non-minimal length encoding");
        }
        content_begin = pos;
        content_len = len;
    }
    if (content_len > data.size() - content_begin) malformed("length exceeds input");
    return content_begin + content_len;
}

std::size_t scan_indefinite(ByteView data, std::size_t pos, unsigned depth) {
    while (true) {
        if (data.size() - pos < 2) malformed("unterminated indefinite length");
        if (data[pos] == 0 && data[pos + 1] == 0) return pos + 2;
        std::uint8_t tag;
        std::size_t b, l;
        pos = parse_header(data, pos, DecodeMode::Lax, depth, tag, b, l);
    }
}

}  // namespace

Bytes tlv(std::uint8_t tag, ByteView content) {
    Bytes out;
    out.reserve(content.size() + 6);
    out.push_back(tag);
    append_length(out, content.size());
    out.insert(out.end(), content.begin(), content.end());
    return out;
}

Bytes sequence(const std::vector<Bytes>& parts) {
    Bytes content;
    std::size_t total = 0;
    for (const auto& p : parts) total += p.size();
    content.reserve(total);
    for (const auto& p : parts) content.insert(content.end(), p.begin(), p.end());
    return tlv(tag::kSequence, content);
}

Bytes sequence(std::initializer_list<Bytes> parts) {
    return sequence(std::vector<Bytes>(parts));
}

Bytes set_of(std::vector<Bytes> parts) {
    std::sort(parts.begin(), parts.end());
    Bytes content;
    for (const auto& p : parts) content.insert(content.end(), p.begin(), p.end());
    return tlv(tag::kSet, content);
}

Bytes explicit_tag(unsigned n, const Bytes& inner) {
    return tlv(tag::context(n, true), inner);
}

Bytes integer(std::int64_t value) {
    Bytes out;
    bool more = true;
    while (more) {
        std::uint8_t byte = static_cast<std::uint8_t>(value & 0xff);
        value >>= 8;
        out.insert(out.begin(), byte);
        more = !((value == 0 && (byte & 0x80) == 0) || (value == -1 && (byte & 0x80) != 0));
    }
    return tlv(tag::kInteger, out);
}

Bytes integer_unsigned(ByteView magnitude) {
    std::size_t i = 0;
    while (i + 1 < magnitude.size() && magnitude[i] == 0) ++i;
    Bytes content;
    if (magnitude.empty()) {
        content.push_back(0);
    } else {
        if (magnitude[i] & 0x80) content.push_back(0);
        content.insert(content.end(), magnitude.begin() + i, magnitude.end());
    }
    return tlv(tag::kInteger, content);
}

Bytes boolean(bool value) {
    const std::uint8_t v = value ? 0xff : 0x00;
    return tlv(tag::kBoolean, ByteView(&v, 1));
}

Bytes null() { return {tag::kNull, 0x00}; }

Bytes oid(std::string_view dotted) {
    std::vector<std::uint64_t> arcs;
    std::size_t start = 0;
    while (start <= dotted.size()) {
        std::size_t dot = dotted.find('.', start);
        if (dot == std::string_view::npos) dot = dotted.size();
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(dotted.data() + start, dotted.data() + dot, v);
        if (ec != std::errc() || p != dotted.data() + dot)
            throw std::invalid_argument("bad OID: " + std::string(dotted));
        arcs.push_back(v);
        start = dot + 1;
    }
    if (arcs.size() < 2) throw std::invalid_argument("OID needs two arcs");
    Bytes content;
    auto put = [&](std::uint64_t v) {
        std::uint8_t tmp[10];
        int n = 0;
        do {
            tmp[n++] = static_cast<std::uint8_t>(v & 0x7f);
            v >>= 7;
        } while (v);
        while (n > 1) content.push_back(tmp[--n] | 0x80);
        content.push_back(tmp[0]);
    };
    put(arcs[0] * 40 + arcs[1]);
    for (std::size_t i = 2; i < arcs.size(); ++i) put(arcs[i]);
    return tlv(tag::kOid, content);
}

Bytes octet_string(ByteView content) { return tlv(tag::kOctetString, content); }

Bytes bit_string(ByteView content, unsigned unused_bits) {
    Bytes c;
    c.reserve(content.size() + 1);
    c.push_back(static_cast<std::uint8_t>(unused_bits));
    c.insert(c.end(), content.begin(), content.end());
    return tlv(tag::kBitString, c);
}

Bytes ia5_string(std::string_view s) { return tlv(tag::kIa5String, as_bytes(s)); }
Bytes printable_string(std::string_view s) { return tlv(tag::kPrintableString, as_bytes(s)); }

Bytes utc_time(TimePoint t) {
    Civil c = civil_from_time(t);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02u%02u%02u%02u%02u%02uZ",
                  static_cast<unsigned>(c.year % 100), c.month, c.day, c.hour, c.minute, c.second);
    return tlv(tag::kUtcTime, as_bytes(buf));
}

Bytes generalized_time(TimePoint t) {
    Civil c = civil_from_time(t);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04u%02u%02u%02u%02u%02uZ", static_cast<unsigned>(c.year),
                  c.month, c.day, c.hour, c.minute, c.second);
    return tlv(tag::kGeneralizedTime, as_bytes(buf));
}

Bytes x509_time(TimePoint t) {
    return civil_from_time(t).year < 2050 ? utc_time(t) : generalized_time(t);
}

Bytes concat(std::initializer_list<ByteView> parts) {
    Bytes out;
    for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

std::int64_t decode_small_integer(ByteView c) {
    if (c.empty()) malformed("empty INTEGER");
    if (c.size() > 8) throw DecodeError(DecodeErrorKind::BoundsViolation, "INTEGER too large");
    if (c.size() > 1 && ((c[0] == 0 && !(c[1] & 0x80)) || (c[0] == 0xff && (c[1] & 0x80))))
        malformed("non-minimal INTEGER");
    std::int64_t v = (c[0] & 0x80) ? -1 : 0;
    for (auto b : c) v = static_cast<std::int64_t>((static_cast<std::uint64_t>(v) << 8) | b);
    return v;
}

std::string decode_oid(ByteView c) {
    if (c.empty()) malformed("empty OID");
    if (c.size() > 128) malformed("OID too long");
    std::string out;
    std::uint64_t v = 0;
    bool first = true;
    unsigned bytes_in_arc = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (bytes_in_arc == 0 && c[i] == 0x80) malformed("non-minimal OID arc");
        if (++bytes_in_arc > 9) malformed("OID arc too large");
        v = (v << 7) | (c[i] & 0x7f);
        if (c[i] & 0x80) continue;
        if (first) {
            unsigned a = v < 40 ? 0 : v < 80 ? 1 : 2;
            out = std::to_string(a) + "." + std::to_string(v - a * 40);
            first = false;
        } else {
            out += "." + std::to_string(v);
        }
        v = 0;
        bytes_in_arc = 0;
    }
    if (bytes_in_arc != 0) malformed("truncated OID");
    return out;
}

TimePoint decode_time(std::uint8_t t, ByteView c) {
    std::int64_t year;
    std::size_t off;
    if (t == tag::kUtcTime) {
        if (c.size() != 13 || c[12] != 'Z') malformed("UTCTime must be YYMMDDHHMMSSZ");
        unsigned yy = parse_digits(c, 0, 2);
        year = yy < 50 ? 2000 + yy : 1900 + yy;
        off = 2;
    } else if (t == tag::kGeneralizedTime) {
        if (c.size() != 15 || c[14] != 'Z') malformed("GeneralizedTime must be YYYYMMDDHHMMSSZ");
        year = parse_digits(c, 0, 4);
        off = 4;
    } else {
        malformed("expected a time value");
    }
    unsigned mo = parse_digits(c, off, 2), d = parse_digits(c, off + 2, 2);
    unsigned h = parse_digits(c, off + 4, 2), mi = parse_digits(c, off + 6, 2);
    unsigned s = parse_digits(c, off + 8, 2);
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || s > 59)
        malformed("time field out of range");
    std::int64_t days = days_from_civil(year, mo, d);
    return TimePoint(std::chrono::seconds(days * 86400 + h * 3600 + mi * 60 + s));
}

Reader::Reader(ByteView data, DecodeMode mode, unsigned depth)
    : data_(data), mode_(mode), depth_(depth) {
    if (depth > kMaxNesting) malformed("nesting too deep");
}

std::uint8_t Reader::peek_tag() const {
    if (at_end()) malformed("unexpected end of input");
    return data_[pos_];
}

Tlv Reader::next() {
    std::uint8_t t;
    std::size_t b, l;
    std::size_t start = pos_;
    std::size_t end = parse_header(data_, pos_, mode_, depth_, t, b, l);
    pos_ = end;
    return Tlv{t, data_.subspan(b, l), data_.subspan(start, end - start)};
}

Tlv Reader::expect(std::uint8_t t) {
    if (at_end()) malformed("unexpected end of input");
    if (data_[pos_] != t) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "expected tag 0x%02x, found 0x%02x", t, data_[pos_]);
        malformed(buf);
    }
    return next();
}

std::optional<Tlv> Reader::optional(std::uint8_t t) {
    if (!next_is(t)) return std::nullopt;
    return next();
}

Reader Reader::enter(std::uint8_t t) {
    if ((t & 0x20) == 0) throw std::logic_error("enter() on primitive tag");
    return Reader(expect(t).content, mode_, depth_ + 1);
}

void Reader::expect_end() const {
    if (!at_end()) malformed("trailing data");
}

std::int64_t Reader::read_small_integer() {
    return decode_small_integer(expect(tag::kInteger).content);
}

Bytes Reader::read_unsigned_integer(std::size_t max_bytes) {
    auto c = expect(tag::kInteger).content;
    if (c.empty()) malformed("empty INTEGER");
    if (c[0] & 0x80) throw DecodeError(DecodeErrorKind::BoundsViolation, "negative INTEGER");
    if (c.size() > 1 && c[0] == 0 && !(c[1] & 0x80)) malformed("non-minimal INTEGER");
    std::size_t i = (c.size() > 1 && c[0] == 0) ? 1 : 0;
    if (c.size() - i > max_bytes) throw DecodeError(DecodeErrorKind::BoundsViolation, "INTEGER too large");
    return Bytes(c.begin() + i, c.end());
}

std::string Reader::read_oid() { return decode_oid(expect(tag::kOid).content); }

bool Reader::read_boolean() {
    auto c = expect(tag::kBoolean).content;
    if (c.size() != 1) malformed("BOOLEAN must be one byte");
    if (mode_ == DecodeMode::Strict && c[0] != 0 && c[0] != 0xff) malformed("non-DER BOOLEAN");
    return c[0] != 0;
}

Bytes Reader::read_octet_string() {
    auto c = expect(tag::kOctetString).content;
    return Bytes(c.begin(), c.end());
}

std::pair<Bytes, unsigned> Reader::read_bit_string() {
    auto c = expect(tag::kBitString).content;
    if (c.empty()) malformed("empty BIT STRING");
    unsigned unused = c[0];
    if (unused > 7) malformed("BIT STRING unused bits > 7");
    if (c.size() == 1 && unused != 0) malformed("BIT STRING with no content bits");
    if (mode_ == DecodeMode::Strict && unused && (c.back() & ((1u << unused) - 1)))
        malformed("BIT STRING padding bits not zero");
    return {Bytes(c.begin() + 1, c.end()), unused};
}

std::string Reader::read_string(std::uint8_t t) {
    auto c = expect(t).content;
    for (auto ch : c)
        if (ch == 0 || ch > 0x7e) {
            if (t == tag::kIa5String || t == tag::kPrintableString) malformed("invalid character in string");
        }
    return to_string(c);
}

TimePoint Reader::read_time() {
    if (at_end()) malformed("unexpected end of input");
    std::uint8_t t = data_[pos_];
    auto tl = next();
    return decode_time(t, tl.content);
}

}  // namespace der
}  // namespace gauntlet
