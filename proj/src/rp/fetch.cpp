#include <algorithm>
#include <charconv>
#include <deque>
#include <thread>

#include <httplib.h>
#include <zlib.h>

#include "gauntlet/rp.hpp"

namespace gauntlet {
namespace {

// Stored bodies are capped here even when max_object_bytes is off; the
// transfer itself keeps going so an unguarded client still pays for it.
constexpr std::uint64_t kDiscardCeiling = 64ull << 20;
constexpr unsigned kMaxRateLimitRetries = 3;

struct Url {
    std::string host;
    int port = 443;
    std::string path;
};

Url parse_https(const std::string& uri, std::uint16_t default_port) {
    constexpr std::string_view scheme = "https://";
    if (uri.rfind(scheme, 0) != 0) throw FetchFailed("not an https URI: " + uri.substr(0, 200));
    std::string_view rest = std::string_view(uri).substr(scheme.size());
    auto slash = rest.find('/');
    std::string_view authority = rest.substr(0, slash);
    Url u;
    u.path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
    u.port = default_port;
    if (auto colon = authority.rfind(':'); colon != std::string_view::npos) {
        std::string_view port = authority.substr(colon + 1);
        auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), u.port);
        if (ec != std::errc() || p != port.data() + port.size() || u.port <= 0 || u.port > 65535)
            throw FetchFailed("bad port in " + uri.substr(0, 200));
        authority = authority.substr(0, colon);
    }
    if (authority.empty()) throw FetchFailed("no host in " + uri.substr(0, 200));
    u.host.assign(authority);
    std::transform(u.host.begin(), u.host.end(), u.host.begin(), [](unsigned char c) { return std::tolower(c); });
    return u;
}

std::string resolve_location(const Url& base, const std::string& location) {
    if (location.rfind("https://", 0) == 0 || location.rfind("http://", 0) == 0) return location;
    std::string origin = "https://" + base.host + ":" + std::to_string(base.port);
    if (!location.empty() && location[0] == '/') return origin + location;
    auto dir = base.path.rfind('/');
    return origin + base.path.substr(0, dir + 1) + location;
}

struct Inflater {
    z_stream zs{};
    bool ready = false;
    Inflater() {
        if (inflateInit2(&zs, 15 + 32) != Z_OK) throw std::runtime_error("inflateInit2 failed");
        ready = true;
    }
    ~Inflater() {
        if (ready) inflateEnd(&zs);
    }
    Inflater(const Inflater&) = delete;
    Inflater& operator=(const Inflater&) = delete;
};

// Outcome of a single HTTP exchange.
struct Exchange {
    int status = 0;
    std::string location;
    std::string retry_after;
    Bytes body;
    bool truncated = false;
    std::optional<BudgetHalt> halt;
    std::optional<RepositoryViolation> violation;
    bool cancelled = false;
};

class Receiver {
public:
    Receiver(const ResourceBudget& budget, Accounting& acct, Exchange& ex)
        : budget_(budget), acct_(acct), ex_(ex), start_(std::chrono::steady_clock::now()) {
        samples_.push_back({start_, 0});
    }

    bool headers(const httplib::Response& res) {
        ex_.status = res.status;
        ex_.location = res.get_header_value("Location");
        ex_.retry_after = res.get_header_value("Retry-After");
        std::string enc = res.get_header_value("Content-Encoding");
        if (enc == "gzip" || enc == "x-gzip" || enc == "deflate") inflater_.emplace();
        else if (!enc.empty() && enc != "identity") {
            ex_.violation.emplace(Violation::XmlRejected, 0, "unsupported content encoding " + enc);
            return false;
        }
        if (res.status != 200) return false;
        if (res.has_header("Content-Length") && budget_.max_object_bytes && !inflater_) {
            auto len = res.get_header_value_u64("Content-Length");
            if (len > *budget_.max_object_bytes) {
                ex_.violation.emplace(Violation::ObjectTooLarge, static_cast<double>(len),
                                      "declared length " + std::to_string(len) + " exceeds max_object_bytes");
                return false;
            }
        }
        return true;
    }

    bool data(const char* p, std::size_t n) {
        if (acct_.cancel && acct_.cancel->cancelled()) {
            ex_.cancelled = true;
            return false;
        }
        wire_ += n;
        acct_.bytes_fetched += n;
        if (budget_.max_total_bytes && acct_.bytes_fetched > *budget_.max_total_bytes) {
            ex_.halt.emplace(Violation::ByteBudgetExceeded, static_cast<double>(acct_.bytes_fetched),
                             "run fetched more than max_total_bytes");
            return false;
        }
        if (!check_clock()) return false;
        if (inflater_) return inflate(p, n);
        return store(reinterpret_cast<const std::uint8_t*>(p), n);
    }

    // Also called after the transfer to catch the final window.
    bool check_clock() {
        auto now = std::chrono::steady_clock::now();
        if (budget_.max_wall_time && acct_.elapsed() > *budget_.max_wall_time) {
            ex_.halt.emplace(Violation::WallTimeExceeded, acct_.elapsed(), "run exceeded max_wall_time");
            return false;
        }
        if (budget_.min_transfer_rate) {
            const auto window = std::chrono::duration<double>(budget_.stall_window);
            samples_.push_back({now, wire_});
            while (samples_.size() > 2 && now - samples_[1].first >= window) samples_.pop_front();
            if (now - start_ >= window) {
                const auto& [t0, b0] = samples_.front();
                double span = std::chrono::duration<double>(now - t0).count();
                double rate = static_cast<double>(wire_ - b0) / std::max(span, budget_.stall_window);
                if (rate < *budget_.min_transfer_rate) {
                    ex_.violation.emplace(Violation::StallDetected, rate,
                                          "transfer rate " + std::to_string(rate) + " B/s below min_transfer_rate");
                    return false;
                }
            }
        }
        return true;
    }

    std::uint64_t wire() const { return wire_; }
    std::chrono::steady_clock::time_point start() const { return start_; }

private:
    bool store(const std::uint8_t* p, std::size_t n) {
        decoded_ += n;
        acct_.bytes_decompressed += n;
        if (budget_.max_object_bytes && decoded_ > *budget_.max_object_bytes) {
            ex_.violation.emplace(Violation::ObjectTooLarge, static_cast<double>(decoded_),
                                  "object exceeds max_object_bytes after " + std::to_string(decoded_) + " bytes");
            return false;
        }
        std::size_t room = ex_.body.size() < kDiscardCeiling ? static_cast<std::size_t>(kDiscardCeiling - ex_.body.size()) : 0;
        if (n > room) ex_.truncated = true;
        ex_.body.insert(ex_.body.end(), p, p + std::min(n, room));
        return true;
    }

    bool inflate(const char* p, std::size_t n) {
        auto& zs = inflater_->zs;
        zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(p));
        zs.avail_in = static_cast<uInt>(n);
        std::uint8_t out[16384];
        while (zs.avail_in > 0 && !stream_end_) {
            std::size_t cap = sizeof out;
            if (budget_.max_decompress_ratio) {
                double allowed = *budget_.max_decompress_ratio * static_cast<double>(wire_);
                // One byte of headroom lets the overrun be observed.
                double left = allowed - static_cast<double>(decoded_) + 1;
                cap = static_cast<std::size_t>(std::clamp(left, 1.0, static_cast<double>(sizeof out)));
            }
            zs.next_out = out;
            zs.avail_out = static_cast<uInt>(cap);
            int rc = ::inflate(&zs, Z_NO_FLUSH);
            if (rc != Z_OK && rc != Z_STREAM_END && rc != Z_BUF_ERROR) {
                ex_.violation.emplace(Violation::XmlRejected, 0, "corrupt compressed body");
                return false;
            }
            if (rc == Z_STREAM_END) stream_end_ = true;
            std::size_t produced = cap - zs.avail_out;
            if (!store(out, produced)) return false;
            if (budget_.max_decompress_ratio &&
                static_cast<double>(decoded_) > *budget_.max_decompress_ratio * static_cast<double>(wire_)) {
                double ratio = static_cast<double>(decoded_) / static_cast<double>(wire_);
                ex_.violation.emplace(Violation::BombDetected, ratio,
                                      "decompression ratio " + std::to_string(ratio) + " after " +
                                          std::to_string(decoded_) + " bytes");
                return false;
            }
            if (produced == 0 && rc == Z_BUF_ERROR) break;
        }
        return true;
    }

    const ResourceBudget& budget_;
    Accounting& acct_;
    Exchange& ex_;
    std::chrono::steady_clock::time_point start_;
    std::deque<std::pair<std::chrono::steady_clock::time_point, std::uint64_t>> samples_;
    std::uint64_t wire_ = 0;
    std::uint64_t decoded_ = 0;
    std::optional<Inflater> inflater_;
    bool stream_end_ = false;
};

void sleep_cancellable(Accounting& acct, double seconds) {
    if (acct.cancel) {
        if (!acct.cancel->sleep_for(std::chrono::duration<double>(seconds))) throw Cancelled();
    } else {
        std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
    }
}

Exchange exchange(const Url& url, const ResourceBudget& budget, Accounting& acct, const RpOptions& options) {
    httplib::SSLClient cli(url.host, url.port);
    if (options.connect_address) cli.set_hostname_addr_map({{url.host, *options.connect_address}});
    cli.enable_server_certificate_verification(false);
    cli.set_follow_location(false);
    cli.set_decompress(false);
    cli.set_keep_alive(false);
    auto connect = std::chrono::duration<double>(options.connect_timeout);
    cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(connect));
    // With a rate floor a silent peer is a stall once a full window passes.
    double read_timeout = budget.min_transfer_rate ? budget.stall_window : 3600.0;
    cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(read_timeout)));
    cli.set_write_timeout(std::chrono::seconds(30));

    Exchange ex;
    Receiver rx(budget, acct, ex);
    std::size_t handle = 0;
    if (acct.cancel) handle = acct.cancel->on_cancel([&cli] { cli.stop(); });
    httplib::Headers headers = {{"Accept-Encoding", "gzip"}, {"User-Agent", "gauntlet-rp/1"}};
    auto result = cli.Get(
        url.path, headers, [&](const httplib::Response& r) { return rx.headers(r); },
        [&](const char* p, std::size_t n) { return rx.data(p, n); });
    if (acct.cancel) acct.cancel->unregister(handle);

    double transfer = std::chrono::duration<double>(std::chrono::steady_clock::now() - rx.start()).count();
    acct.longest_transfer = std::max(acct.longest_transfer, transfer);

    if (ex.halt || ex.violation) return ex;
    if (acct.cancel && acct.cancel->cancelled()) ex.cancelled = true;
    if (ex.cancelled) return ex;
    if (!result) {
        auto err = result.error();
        if (err == httplib::Error::Canceled && ex.status != 0 && ex.status != 200) return ex;
        if (err == httplib::Error::Read && budget.min_transfer_rate && ex.status == 200 &&
            transfer + 0.5 >= budget.stall_window) {
            double rate = static_cast<double>(rx.wire()) / std::max(transfer, 1e-3);
            ex.violation.emplace(Violation::StallDetected, rate, "no data for a full stall window");
            return ex;
        }
        if (err == httplib::Error::Read && budget.min_transfer_rate && ex.status == 0 &&
            transfer + 0.5 >= budget.stall_window) {
            ex.violation.emplace(Violation::StallDetected, 0, "no response headers within the stall window");
            return ex;
        }
        throw FetchFailed("GET https://" + url.host + url.path.substr(0, 200) + ": " + httplib::to_string(err));
    }
    ex.status = result->status;
    rx.check_clock();
    return ex;
}

}  // namespace

Bytes fetch_one(const std::string& uri, const ResourceBudget& budget, Accounting& accounting,
                const RpOptions& options) {
    std::string current = uri;
    unsigned hops = 0;
    unsigned rate_limited = 0;
    for (;;) {
        if (accounting.cancel && accounting.cancel->cancelled()) throw Cancelled();
        Url url = parse_https(current, options.default_https_port);
        Exchange ex = exchange(url, budget, accounting, options);
        if (ex.cancelled) throw Cancelled();
        if (ex.halt) throw *ex.halt;
        if (ex.violation) throw *ex.violation;

        if (ex.status == 200) {
            if (ex.truncated) throw FetchFailed("response exceeded the discard ceiling: " + current.substr(0, 200));
            return std::move(ex.body);
        }
        if (ex.status == 429 || ex.status == 503) {
            std::uint64_t wait = 0;
            const std::string& ra = ex.retry_after;
            auto [p, ec] = std::from_chars(ra.data(), ra.data() + ra.size(), wait);
            if (ra.empty() || ec != std::errc() || p != ra.data() + ra.size())
                throw FetchFailed("HTTP " + std::to_string(ex.status) + " without usable Retry-After");
            if (budget.max_retry_after && wait > *budget.max_retry_after)
                throw RepositoryViolation(Violation::RateLimitExcessive, static_cast<double>(wait),
                                          "Retry-After " + std::to_string(wait) + " s exceeds max_retry_after");
            if (++rate_limited > kMaxRateLimitRetries) throw FetchFailed("still rate limited after retries");
            double sleep = static_cast<double>(wait);
            if (budget.max_wall_time) {
                double left = *budget.max_wall_time - accounting.elapsed();
                if (left < sleep) {
                    sleep_cancellable(accounting, std::max(left, 0.0));
                    accounting.longest_wait = std::max(accounting.longest_wait, std::max(left, 0.0));
                    throw BudgetHalt(Violation::WallTimeExceeded, accounting.elapsed(),
                                     "run exceeded max_wall_time while honouring Retry-After");
                }
            }
            auto t0 = std::chrono::steady_clock::now();
            try {
                sleep_cancellable(accounting, sleep);
            } catch (const Cancelled&) {
                accounting.longest_wait = std::max(
                    accounting.longest_wait,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
                throw;
            }
            accounting.longest_wait = std::max(accounting.longest_wait, sleep);
            continue;
        }
        if (ex.status == 301 || ex.status == 302 || ex.status == 303 || ex.status == 307 || ex.status == 308) {
            if (ex.location.empty()) throw FetchFailed("redirect without Location");
            ++hops;
            if (budget.max_redirects && hops > *budget.max_redirects)
                throw RepositoryViolation(Violation::RedirectLimit, hops,
                                          "more than " + std::to_string(*budget.max_redirects) + " redirects");
            ++accounting.redirects_followed;
            current = resolve_location(url, ex.location);
            continue;
        }
        throw FetchFailed("HTTP " + std::to_string(ex.status) + " for " + current.substr(0, 200));
    }
}

}  // namespace gauntlet
