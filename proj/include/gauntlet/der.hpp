// Minimal DER encoder and a bounds-checked BER/DER reader.
//
// The writer only ever emits DER. The reader accepts the BER length forms
// (non-minimal long form, indefinite length) in LAX mode and rejects them in
// STRICT mode. Every read is bounds checked; malformed input raises
// DecodeError and never touches memory outside the input span.

#pragma once

#include <chrono>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gauntlet {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;
using TimePoint = std::chrono::sys_seconds;

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}
inline std::string to_string(ByteView b) { return {b.begin(), b.end()}; }

enum class DecodeMode { Strict, Lax };

enum class DecodeErrorKind { MalformedDer, SignatureInvalid, BoundsViolation };

std::string_view to_string(DecodeErrorKind kind);

class DecodeError : public std::runtime_error {
public:
    DecodeError(DecodeErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
    DecodeErrorKind kind() const noexcept { return kind_; }

private:
    DecodeErrorKind kind_;
};

[[noreturn]] inline void malformed(const std::string& detail) {
    throw DecodeError(DecodeErrorKind::MalformedDer, detail);
}

namespace der {

namespace tag {
inline constexpr std::uint8_t kBoolean = 0x01;
inline constexpr std::uint8_t kInteger = 0x02;
inline constexpr std::uint8_t kBitString = 0x03;
inline constexpr std::uint8_t kOctetString = 0x04;
inline constexpr std::uint8_t kNull = 0x05;
inline constexpr std::uint8_t kOid = 0x06;
inline constexpr std::uint8_t kUtf8String = 0x0c;
inline constexpr std::uint8_t kPrintableString = 0x13;
inline constexpr std::uint8_t kIa5String = 0x16;
inline constexpr std::uint8_t kUtcTime = 0x17;
inline constexpr std::uint8_t kGeneralizedTime = 0x18;
inline constexpr std::uint8_t kSequence = 0x30;
inline constexpr std::uint8_t kSet = 0x31;

constexpr std::uint8_t context(unsigned n, bool constructed) {
    return static_cast<std::uint8_t>(0x80 | (constructed ? 0x20 : 0x00) | (n & 0x1f));
}
}  // namespace tag

// ---- encoding -------------------------------------------------------------

Bytes tlv(std::uint8_t tag, ByteView content);
Bytes sequence(std::initializer_list<Bytes> parts);
Bytes sequence(const std::vector<Bytes>& parts);
// SET OF: element encodings sorted as DER requires.
Bytes set_of(std::vector<Bytes> parts);
Bytes explicit_tag(unsigned n, const Bytes& inner);
Bytes integer(std::int64_t value);
// Unsigned big-endian magnitude; a leading zero is added when needed.
Bytes integer_unsigned(ByteView magnitude);
Bytes boolean(bool value);
Bytes null();
Bytes oid(std::string_view dotted);
Bytes octet_string(ByteView content);
Bytes bit_string(ByteView content, unsigned unused_bits = 0);
Bytes ia5_string(std::string_view s);
Bytes printable_string(std::string_view s);
Bytes utc_time(TimePoint t);
Bytes generalized_time(TimePoint t);
// UTCTime before 2050, GeneralizedTime afterwards (RFC 5280 rule).
Bytes x509_time(TimePoint t);

Bytes concat(std::initializer_list<ByteView> parts);

// ---- decoding -------------------------------------------------------------

struct Tlv {
    std::uint8_t tag = 0;
    ByteView content;
    ByteView encoded;  // tag + length + content
};

class Reader {
public:
    explicit Reader(ByteView data, DecodeMode mode = DecodeMode::Strict, unsigned depth = 0);

    bool at_end() const noexcept { return pos_ >= data_.size(); }
    std::uint8_t peek_tag() const;
    bool next_is(std::uint8_t tag) const { return !at_end() && data_[pos_] == tag; }

    Tlv next();
    Tlv expect(std::uint8_t tag);
    std::optional<Tlv> optional(std::uint8_t tag);
    // Opens a constructed element and returns a reader over its content.
    Reader enter(std::uint8_t tag);
    void expect_end() const;

    std::int64_t read_small_integer();
    // Non-negative INTEGER of arbitrary size; returns the minimal magnitude.
    Bytes read_unsigned_integer(std::size_t max_bytes = 64);
    std::string read_oid();
    bool read_boolean();
    Bytes read_octet_string();
    // Returns (content bytes, unused bit count).
    std::pair<Bytes, unsigned> read_bit_string();
    std::string read_string(std::uint8_t tag);
    TimePoint read_time();  // UTCTime or GeneralizedTime

    DecodeMode mode() const noexcept { return mode_; }
    unsigned depth() const noexcept { return depth_; }

private:
    ByteView data_;
    std::size_t pos_ = 0;
    DecodeMode mode_;
    unsigned depth_;
};

// Helpers used by several decoders.
std::int64_t decode_small_integer(ByteView content);
std::string decode_oid(ByteView content);
TimePoint decode_time(std::uint8_t tag, ByteView content);

}  // namespace der
}  // namespace gauntlet
