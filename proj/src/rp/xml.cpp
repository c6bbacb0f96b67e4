#include <algorithm>
#include <cstring>

#include "gauntlet/rp.hpp"

namespace gauntlet {
namespace {

constexpr unsigned kMaxElementDepth = 16;

[[noreturn]] void reject(const std::string& why) {
    throw RepositoryViolation(Violation::XmlRejected, 0, "XML rejected: " + why);
}

struct Attribute {
    std::string name;
    std::string value;
};

struct Event {
    enum Kind { Start, End, Text, Eof } kind = Eof;
    std::string name;
    std::vector<Attribute> attrs;
    std::string text;
    bool self_closing = false;

    const std::string* attr(std::string_view n) const {
        for (const auto& a : attrs)
            if (a.name == n) return &a.value;
        return nullptr;
    }
};

void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xc0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3f));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xe0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        out += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
        out += static_cast<char>(0xf0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        out += static_cast<char>(0x80 | (cp & 0x3f));
    }
}

bool name_start(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == ':';
}
bool name_char(char c) { return name_start(c) || (c >= '0' && c <= '9') || c == '-' || c == '.'; }
bool space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

// Single pass pull parser. Nothing is ever expanded beyond the five
// predefined entities and numeric character references.
class XmlReader {
public:
    XmlReader(ByteView doc, const ResourceBudget& budget)
        : p_(reinterpret_cast<const char*>(doc.data())), end_(p_ + doc.size()), budget_(budget) {
        if (end_ - p_ >= 3 && std::memcmp(p_, "\xEF\xBB\xBF", 3) == 0) p_ += 3;
    }

    Event next() {
        for (;;) {
            if (p_ >= end_) {
                if (!stack_.empty()) reject("unexpected end of document inside <" + stack_.back() + ">");
                if (!seen_root_) reject("no root element");
                return {};
            }
            if (*p_ != '<') {
                Event e;
                e.kind = Event::Text;
                e.text = read_text();
                if (stack_.empty()) {
                    for (char c : e.text)
                        if (!space(c)) reject("text outside the root element");
                    continue;
                }
                return e;
            }
            if (starts("<?")) {
                skip_past("?>", "processing instruction");
                continue;
            }
            if (starts("<!--")) {
                skip_past("-->", "comment");
                continue;
            }
            if (starts("<![CDATA[")) {
                if (stack_.empty()) reject("CDATA outside the root element");
                p_ += 9;
                const char* close = find("]]>");
                if (!close) reject("unterminated CDATA section");
                Event e;
                e.kind = Event::Text;
                e.text.assign(p_, close);
                p_ = close + 3;
                return e;
            }
            if (starts("<!")) reject("document type declarations and entity definitions are not accepted");
            if (starts("</")) return read_end();
            return read_start();
        }
    }

private:
    bool starts(const char* s) const {
        std::size_t n = std::strlen(s);
        return static_cast<std::size_t>(end_ - p_) >= n && std::memcmp(p_, s, n) == 0;
    }

    const char* find(const char* s) const {
        std::size_t n = std::strlen(s);
        for (const char* q = p_; q + n <= end_; ++q) {
            q = static_cast<const char*>(std::memchr(q, s[0], static_cast<std::size_t>(end_ - q)));
            if (!q || q + n > end_) return nullptr;
            if (std::memcmp(q, s, n) == 0) return q;
        }
        return nullptr;
    }

    void skip_past(const char* terminator, const char* what) {
        const char* q = find(terminator);
        if (!q) reject(std::string("unterminated ") + what);
        p_ = q + std::strlen(terminator);
    }

    std::string read_name() {
        if (p_ >= end_ || !name_start(*p_)) reject("invalid name");
        const char* s = p_;
        while (p_ < end_ && name_char(*p_)) ++p_;
        if (p_ - s > 256) reject("name too long");
        return std::string(s, p_);
    }

    void skip_space() {
        while (p_ < end_ && space(*p_)) ++p_;
    }

    void decode_reference(std::string& out) {
        // p_ at '&'
        const char* semi = p_ + 1;
        while (semi < end_ && semi - p_ < 16 && *semi != ';') ++semi;
        if (semi >= end_ || *semi != ';') reject("malformed reference");
        std::string_view ref(p_ + 1, static_cast<std::size_t>(semi - p_ - 1));
        p_ = semi + 1;
        if (ref == "lt") out += '<';
        else if (ref == "gt") out += '>';
        else if (ref == "amp") out += '&';
        else if (ref == "quot") out += '"';
        else if (ref == "apos") out += '\'';
        else if (ref.size() > 1 && ref[0] == '#') {
            std::uint32_t cp = 0;
            bool hexa = ref[1] == 'x';
            std::string_view digits = ref.substr(hexa ? 2 : 1);
            if (digits.empty() || digits.size() > 8) reject("malformed character reference");
            for (char c : digits) {
                unsigned d;
                if (c >= '0' && c <= '9') d = static_cast<unsigned>(c - '0');
                else if (hexa && c >= 'a' && c <= 'f') d = static_cast<unsigned>(c - 'a' + 10);
                else if (hexa && c >= 'A' && c <= 'F') d = static_cast<unsigned>(c - 'A' + 10);
                else reject("malformed character reference");
                cp = cp * (hexa ? 16 : 10) + d;
            }
            if (cp == 0 || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) reject("invalid character reference");
            append_utf8(out, cp);
        } else {
            reject("reference to undeclared entity '&" + std::string(ref) + ";'");
        }
    }

    std::string read_text() {
        std::string out;
        const char* run = p_;
        while (p_ < end_ && *p_ != '<') {
            if (*p_ == '&') {
                out.append(run, p_);
                decode_reference(out);
                run = p_;
            } else {
                ++p_;
            }
        }
        out.append(run, p_);
        return out;
    }

    std::string read_attr_value(const std::string& name) {
        if (p_ >= end_ || (*p_ != '"' && *p_ != '\'')) reject("attribute value must be quoted");
        const char quote = *p_++;
        const char* close = static_cast<const char*>(std::memchr(p_, quote, static_cast<std::size_t>(end_ - p_)));
        if (!close) reject("unterminated attribute value");
        // URIs are bounded before anything is copied.
        if (name == "uri" && budget_.max_path_len && static_cast<std::uint64_t>(close - p_) > *budget_.max_path_len)
            throw RepositoryViolation(Violation::PathTooLong, static_cast<double>(close - p_),
                                      "uri of " + std::to_string(close - p_) + " bytes exceeds max_path_len");
        std::string out;
        out.reserve(static_cast<std::size_t>(close - p_));
        const char* run = p_;
        while (p_ < close) {
            if (*p_ == '<') reject("'<' in attribute value");
            if (*p_ == '&') {
                out.append(run, p_);
                decode_reference(out);
                run = p_;
                if (p_ > close) reject("reference crosses attribute boundary");
            } else {
                ++p_;
            }
        }
        out.append(run, close);
        p_ = close + 1;
        return out;
    }

    Event read_start() {
        ++p_;
        Event e;
        e.kind = Event::Start;
        e.name = read_name();
        if (stack_.empty() && seen_root_) reject("more than one root element");
        for (;;) {
            bool had_space = p_ < end_ && space(*p_);
            skip_space();
            if (p_ >= end_) reject("unterminated start tag");
            if (*p_ == '>') {
                ++p_;
                break;
            }
            if (starts("/>")) {
                p_ += 2;
                e.self_closing = true;
                break;
            }
            if (!had_space) reject("attributes must be separated by whitespace");
            std::string name = read_name();
            skip_space();
            if (p_ >= end_ || *p_ != '=') reject("attribute without value");
            ++p_;
            skip_space();
            std::string value = read_attr_value(name);
            for (const auto& a : e.attrs)
                if (a.name == name) reject("duplicate attribute " + name);
            e.attrs.push_back({std::move(name), std::move(value)});
        }
        seen_root_ = true;
        if (!e.self_closing) {
            if (stack_.size() >= kMaxElementDepth) reject("element nesting too deep");
            stack_.push_back(e.name);
        }
        return e;
    }

    Event read_end() {
        p_ += 2;
        Event e;
        e.kind = Event::End;
        e.name = read_name();
        skip_space();
        if (p_ >= end_ || *p_ != '>') reject("malformed end tag");
        ++p_;
        if (stack_.empty() || stack_.back() != e.name) reject("mismatched end tag </" + e.name + ">");
        stack_.pop_back();
        return e;
    }

    const char* p_;
    const char* end_;
    const ResourceBudget& budget_;
    std::vector<std::string> stack_;
    bool seen_root_ = false;
};

void check_root(const Event& e, std::string_view expected) {
    if (e.kind != Event::Start || e.name != expected) reject("root element must be <" + std::string(expected) + ">");
    const std::string* ns = e.attr("xmlns");
    if (!ns || *ns != rrdp::kNamespace) reject("wrong or missing RRDP namespace");
    const std::string* version = e.attr("version");
    if (!version || *version != "1") reject("unsupported RRDP version");
}

std::uint64_t parse_serial(const std::string* s) {
    if (!s || s->empty() || s->size() > 20) reject("missing or invalid serial");
    std::uint64_t v = 0;
    for (char c : *s) {
        if (c < '0' || c > '9') reject("invalid serial");
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
}

// Skips the rest of an element whose start tag was just read.
void skip_element(XmlReader& r, const Event& start) {
    if (start.self_closing) return;
    unsigned depth = 1;
    while (depth) {
        Event e = r.next();
        if (e.kind == Event::Start && !e.self_closing) ++depth;
        else if (e.kind == Event::End) --depth;
        else if (e.kind == Event::Eof) reject("unexpected end of document");
    }
}

}  // namespace

std::optional<std::string> normalize_rsync_uri(std::string_view uri) {
    constexpr std::string_view scheme = "rsync://";
    if (uri.substr(0, scheme.size()) != scheme) return std::nullopt;
    std::string_view rest = uri.substr(scheme.size());
    auto host_end = rest.find('/');
    if (host_end == std::string_view::npos || host_end == 0) return std::nullopt;
    std::string_view host = rest.substr(0, host_end);
    rest = rest.substr(host_end + 1);
    auto module_end = static_cast<std::size_t>(std::find(rest.begin(), rest.end(), '/') - rest.begin());
    if (module_end == rest.size()) module_end = std::string_view::npos;
    std::string_view module = rest.substr(0, module_end);
    if (module.empty() || module == "." || module == "..") return std::nullopt;
    std::string_view path = module_end == std::string_view::npos ? std::string_view() : rest.substr(module_end + 1);

    std::vector<std::string_view> parts;
    bool trailing_slash = !path.empty() && path.back() == '/';
    std::size_t pos = 0;
    while (pos <= path.size()) {
        auto slash = path.find('/', pos);
        if (slash == std::string_view::npos) slash = path.size();
        std::string_view seg = path.substr(pos, slash - pos);
        if (seg == "..") {
            if (parts.empty()) return std::nullopt;
            parts.pop_back();
        } else if (!seg.empty() && seg != ".") {
            parts.push_back(seg);
        }
        pos = slash + 1;
    }
    std::string out = std::string(scheme) + std::string(host) + "/" + std::string(module) + "/";
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += '/';
        out += parts[i];
    }
    if (trailing_slash && !parts.empty()) out += '/';
    return out;
}

Notification parse_notification(ByteView xml, const ResourceBudget& budget) {
    XmlReader r(xml, budget);
    Event root = r.next();
    check_root(root, "notification");
    Notification n;
    const std::string* session = root.attr("session_id");
    if (!session || session->empty()) reject("missing session_id");
    n.session_id = *session;
    n.serial = parse_serial(root.attr("serial"));
    bool have_snapshot = false;
    if (!root.self_closing) {
        for (;;) {
            Event e = r.next();
            if (e.kind == Event::End) break;
            if (e.kind == Event::Text) continue;
            if (e.kind == Event::Start && e.name == "snapshot") {
                if (have_snapshot) reject("more than one snapshot element");
                const std::string* uri = e.attr("uri");
                const std::string* hash = e.attr("hash");
                if (!uri || !hash || hash->size() != 64) reject("snapshot element needs uri and a SHA-256 hash");
                n.snapshot_uri = *uri;
                n.snapshot_hash = *hash;
                for (auto& c : n.snapshot_hash) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
                have_snapshot = true;
            }
            skip_element(r, e);
        }
    }
    if (r.next().kind != Event::Eof) reject("content after the root element");
    if (!have_snapshot) reject("notification lists no snapshot");
    return n;
}

std::vector<Publish> parse_snapshot(ByteView xml, const ResourceBudget& budget) {
    XmlReader r(xml, budget);
    Event root = r.next();
    check_root(root, "snapshot");
    if (!root.attr("session_id")) reject("missing session_id");
    parse_serial(root.attr("serial"));
    std::vector<Publish> out;
    if (!root.self_closing) {
        for (;;) {
            Event e = r.next();
            if (e.kind == Event::End) break;
            if (e.kind == Event::Text) continue;
            if (e.name != "publish") reject("unexpected element <" + e.name + "> in snapshot");
            const std::string* uri = e.attr("uri");
            if (!uri) reject("publish without uri");
            Publish p;
            p.uri = *uri;
            if (budget.check_paths) {
                auto norm = normalize_rsync_uri(p.uri);
                if (!norm) {
                    bool rsync = p.uri.rfind("rsync://", 0) == 0;
                    if (!rsync) reject("publish uri is not an rsync URI");
                    throw RepositoryViolation(Violation::PathTraversal, static_cast<double>(p.uri.size()),
                                              "publish uri escapes its repository root: " + p.uri.substr(0, 200));
                }
                p.uri = *norm;
            }
            std::string text;
            if (!e.self_closing) {
                for (;;) {
                    Event c = r.next();
                    if (c.kind == Event::End) break;
                    if (c.kind != Event::Text) reject("publish must contain only base64 text");
                    text += c.text;
                }
            }
            try {
                p.body = base64_decode(text);
            } catch (const std::exception&) {
                reject("publish body is not valid base64");
            }
            out.push_back(std::move(p));
        }
    }
    if (r.next().kind != Event::Eof) reject("content after the root element");
    return out;
}

}  // namespace gauntlet
