// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned here.
// Usage: acceptance [criterion numbers...]; no arguments runs all eleven.

#include <sys/wait.h>
#include <unistd.h>
#include <zlib.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <functional>
#include <iostream>
#include <new>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "gauntlet/harness.hpp"
#include "gauntlet/rsync.hpp"
#include "oracle/brute_force.hpp"
#include "oracle/entity_count.hpp"
#include "testbed.hpp"

// ---- live heap accounting ----------------------------------------------------

namespace heap {
std::atomic<std::int64_t> live{0};
std::atomic<std::int64_t> peak{0};

void reset_peak() { peak = live.load(); }
}  // namespace heap

namespace {
constexpr std::size_t kHeader = 16;

void* counted_alloc(std::size_t n) {
    auto* base = static_cast<unsigned char*>(std::malloc(n + kHeader));
    if (!base) throw std::bad_alloc();
    *reinterpret_cast<std::size_t*>(base) = n;
    auto now = heap::live.fetch_add(static_cast<std::int64_t>(n)) + static_cast<std::int64_t>(n);
    auto p = heap::peak.load();
    while (now > p && !heap::peak.compare_exchange_weak(p, now)) {
    }
    return base + kHeader;
}

void counted_free(void* p) noexcept {
    if (!p) return;
    auto* base = static_cast<unsigned char*>(p) - kHeader;
    heap::live -= static_cast<std::int64_t>(*reinterpret_cast<std::size_t*>(base));
    std::free(base);
}
}  // namespace

void* operator new(std::size_t n) { return counted_alloc(n); }
void* operator new[](std::size_t n) { return counted_alloc(n); }
void operator delete(void* p) noexcept { counted_free(p); }
void operator delete[](void* p) noexcept { counted_free(p); }
void operator delete(void* p, std::size_t) noexcept { counted_free(p); }
void operator delete[](void* p, std::size_t) noexcept { counted_free(p); }

using namespace gauntlet;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
    bool unattainable = false;  // reported, excluded from the exit status
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v, int digits = 2) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

std::set<oracle::OVrp> as_oracle(const std::vector<Vrp>& v) {
    std::set<oracle::OVrp> out;
    for (const auto& x : v) {
        oracle::OVrp o;
        o.afi = x.prefix.family == AddressFamily::Ipv4 ? 1 : 2;
        std::copy(x.prefix.addr.begin(), x.prefix.addr.end(), o.addr.begin());
        o.length = x.prefix.length;
        o.max_length = x.max_length;
        o.asn = x.asn;
        out.insert(o);
    }
    return out;
}

// Certificates plus published files over the whole tree.
std::size_t object_count(ScenarioEngine& engine, const TestInstance& inst) {
    std::size_t n = 1;
    std::deque<NodeAddress> queue{NodeAddress{}};
    while (!queue.empty()) {
        NodeAddress node = queue.front();
        queue.pop_front();
        auto children = engine.children_of(inst, node);
        if (!children) continue;
        n += engine.publication_point(inst, node)->files.size();
        for (auto c : *children) queue.push_back(node.child(c));
    }
    return n;
}

const ResourceBudget kDefended = [] {
    ResourceBudget b = ResourceBudget::defaults();
    b.accept_fast_keys = true;
    return b;
}();

// ---- criteria ---------------------------------------------------------------------

Outcome benign_control() {
    testbed::Testbed bed;
    std::ostringstream bad;
    double slowest = 0;
    std::size_t largest = 0;
    for (TestId t : all_tests()) {
        auto inst = bed.mint(t, TestParams::control_profile(t));
        auto start = Clock::now();
        auto out = bed.run(inst, kDefended);
        double took = since(start);
        slowest = std::max(slowest, took);
        auto expected = oracle::brute_force(bed.engine, inst);
        std::size_t objects = object_count(bed.engine, inst);
        largest = std::max(largest, objects);
        bool ok = as_oracle(out.vrps) == expected.vrps && !expected.vrps.empty() && out.violations.empty() &&
                  objects <= 100 && took < 30;
        if (!ok)
            bad << " " << letter(t) << "(" << out.vrps.size() << " vs " << expected.vrps.size() << " VRPs, "
                << out.violations.size() << " violations, " << objects << " objects, " << num(took) << " s)";
    }
    if (!bad.str().empty()) return {false, "mismatch:" + bad.str()};
    return {true, "15 control trees equal the oracle, 0 violations, <= " + std::to_string(largest) +
                      " objects, slowest " + num(slowest) + " s"};
}

Outcome count_law() {
    testbed::Testbed bed;
    std::ostringstream os;
    bool ok = true;
    for (auto [w, d, expect] : {std::tuple{2u, 3u, 15u}, std::tuple{3u, 4u, 121u}}) {
        TestParams p = TestParams::defaults(TestId::H);
        p.width = w;
        p.depth = d;
        auto inst = bed.mint(TestId::H, p);
        auto start = Clock::now();
        ResourceBudget b = ResourceBudget::unlimited();
        auto out = bed.run(inst, b);
        double took = since(start);
        ok = ok && out.repos_visited == expect && took < 60;
        os << "H(" << w << "," << d << ") " << out.repos_visited << "/" << expect << " in " << num(took) << " s; ";
    }
    return {ok, os.str()};
}

Report suite(Profile profile, double& took) {
    testbed::Testbed bed;
    HarnessConfig cfg;
    cfg.port = bed.server.port();
    cfg.work_dir = bed.dir / "work";
    Harness h(bed.registry, cfg, [&](const std::string& u) { return bed.server.observations(u); });
    auto start = Clock::now();
    Report r = h.run_suite(Subject::mini_rp(profile));
    took = since(start);
    return r;
}

Outcome defended_suite() {
    double took = 0;
    Report r = suite(Profile::Defended, took);
    std::string odd;
    for (const auto& v : r.verdicts)
        if (v.status != VerdictStatus::Resistant) odd += letter(v.test);
    std::size_t resistant = 15 - odd.size();
    return {odd.empty() && r.verdicts.size() == 15 && took < 15 * 60,
            std::to_string(resistant) + "/15 RESISTANT in " + num(took, 0) + " s" + (odd.empty() ? "" : "; not: " + odd)};
}

Outcome undefended_suite() {
    double took = 0;
    Report r = suite(Profile::Undefended, took);
    const std::string required = "ABDEHJKLNO";
    std::string vulnerable, missing;
    bool evidence = true;
    for (const auto& v : r.verdicts) {
        if (v.status == VerdictStatus::Vulnerable) vulnerable += letter(v.test);
        evidence = evidence && !v.evidence.empty();
    }
    for (char c : required)
        if (vulnerable.find(c) == std::string::npos) missing += c;
    return {missing.empty() && evidence,
            "VULNERABLE " + vulnerable + " in " + num(took, 0) + " s" + (missing.empty() ? "" : "; missing " + missing)};
}

std::uint64_t inflate_count(const Bytes& gz) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) return 0;
    Bytes out(1 << 20);
    std::uint64_t total = 0;
    zs.next_in = const_cast<Bytef*>(gz.data());
    zs.avail_in = static_cast<uInt>(gz.size());
    int rc = Z_OK;
    while (rc == Z_OK) {
        zs.next_out = out.data();
        zs.avail_out = static_cast<uInt>(out.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        total += out.size() - zs.avail_out;
    }
    inflateEnd(&zs);
    return rc == Z_STREAM_END ? total : 0;
}

Outcome bomb_containment() {
    testbed::Testbed bed;
    auto inst = bed.mint(TestId::D, TestParams::defaults(TestId::D));
    auto bomb = gzip_zero_bomb(inst.params.payload_size);
    const std::uint64_t inflated = inflate_count(*bomb);
    const bool size_ok = bomb->size() <= (64u << 10);
    const bool ratio_ok = inflated >= (256ull << 20);
    auto out = bed.run(inst, kDefended);
    const bool detected = out.has(Violation::BombDetected);
    const bool bounded = out.bytes_decompressed <= (640u << 10);
    std::string detail = "stream " + std::to_string(bomb->size() >> 10) + " KiB inflates to " +
                         std::to_string(inflated >> 20) + " MiB; BombDetected " + (detected ? "yes" : "no") + ", " +
                         std::to_string(out.bytes_decompressed >> 10) + " KiB decompressed from " +
                         std::to_string(out.bytes_fetched >> 10) + " KiB";
    if (size_ok && ratio_ok && detected && bounded) return {true, detail};
    Outcome o{false, detail};
    // DEFLATE emits at most 258 bytes per ~2 bits of a repeated match, about
    // 1032:1, so 256 MiB needs at least ~254 KiB of stream.
    if (!size_ok && ratio_ok && detected && bounded) {
        o.unattainable = true;
        o.detail += "; a 64 KiB gzip cannot reach 256 MiB (DEFLATE ratio ceiling ~1032:1)";
    }
    return o;
}

Outcome trickle_detection() {
    testbed::Testbed bed;
    auto inst = bed.mint(TestId::E, TestParams::defaults(TestId::E));
    auto start = Clock::now();
    auto out = bed.run(inst, kDefended);
    double took = since(start);
    const bool stalled = out.has(Violation::StallDetected);
    std::optional<Observation> held;
    auto until = Clock::now() + std::chrono::seconds(10);
    while (!held && Clock::now() < until) {
        for (const auto& o : bed.server.observations(inst.uuid))
            if (o.kind == Observation::Kind::ConnectionHeld) held = o;
        if (!held) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    if (!held) return {false, "no CONNECTION_HELD observation; StallDetected " + std::string(stalled ? "yes" : "no")};
    const double rate = held->duration > 0 ? static_cast<double>(held->bytes) / held->duration : 0;
    const bool rate_ok = rate >= 3.0 * 0.5 && rate <= 3.0 * 1.5;
    return {stalled && took <= 15 && rate_ok, "StallDetected after " + num(took) + " s; served " +
                                                  std::to_string(held->bytes) + " B over " + num(held->duration) +
                                                  " s = " + num(rate) + " B/s"};
}

Outcome billion_laughs() {
    ScenarioEngine engine;
    InstanceRegistry registry;
    auto doc_for = [&](unsigned levels) {
        TestParams p = TestParams::defaults(TestId::G);
        p.entity_levels = levels;
        p.fast_keys = true;
        auto inst = new_instance(registry, TestId::G, p);
        return engine.gen_xml_attack(inst, TestId::G).body;
    };
    const ResourceBudget budget = ResourceBudget::defaults();
    auto rejects = [&](const Bytes& doc) {
        try {
            parse_snapshot(doc, budget);
        } catch (const RepositoryViolation& v) {
            return v.kind == Violation::XmlRejected;
        } catch (...) {
        }
        return false;
    };

    Bytes six = doc_for(6);
    oracle::EntityCounter counter(std::string(six.begin(), six.end()));
    const auto expansions = counter.leaves("lol6");

    heap::reset_peak();
    const auto base = heap::live.load();
    const bool rejected = rejects(six);
    const double growth = static_cast<double>(heap::peak.load() - base);

    // Time per input byte across document sizes; super-linear parsing would
    // show up as a rising per-byte cost.
    double lo = 1e9, hi = 0, worst = 0;
    for (unsigned levels = 3; levels <= 10; ++levels) {
        Bytes doc = doc_for(levels);
        const int reps = 400;
        auto start = Clock::now();
        for (int k = 0; k < reps; ++k) rejects(doc);
        double each = since(start) / reps;
        worst = std::max(worst, each);
        double per_byte = each / static_cast<double>(doc.size());
        lo = std::min(lo, per_byte);
        hi = std::max(hi, per_byte);
    }
    Bytes ten = doc_for(10);
    const bool linear = hi <= 3 * lo || worst < 1e-4;
    const bool ok = rejected && expansions == 1000000 && six.size() <= 10240 && ten.size() <= 10240 &&
                    growth < 10.0 * (1 << 20) && linear;
    return {ok, "levels 6: " + std::to_string(six.size()) + " B, " + std::to_string(expansions) +
                    " expansions, rejected " + (rejected ? "yes" : "no") + ", peak growth " + num(growth / 1024, 1) +
                    " KiB; per-byte time spread " + num(hi / lo) + "x, slowest parse " + num(worst * 1e6, 1) + " us"};
}

Outcome path_sandbox() {
    auto outer = testbed::temp_dir("accept-sandbox");
    auto root = outer / "root";
    SandboxWriter writer(root, "mod", 1ull << 30);
    std::filesystem::create_directory_symlink(outer, root / "up");
    const std::vector<std::string> parts{"..", ".", "...", "a", "b", "up", "%2e%2e", "..%2f", "", "x.roa", "mft.mft"};
    std::mt19937 rng(2024);
    const std::string open =
        "<snapshot xmlns=\"http://www.ripe.net/rpki/rrdp\" version=\"1\" "
        "session_id=\"9df4b597-af9e-4dca-bdda-719cce2c4e28\" serial=\"1\">";
    std::uint64_t written = 0, skipped = 0, parse_errors = 0;
    for (int s = 0; s < 10000; ++s) {
        std::string xml = open;
        for (unsigned n = 1 + rng() % 4; n > 0; --n) {
            std::string uri = rng() % 8 ? "rsync://h/mod" : "rsync://h/other";
            for (unsigned k = 1 + rng() % 6; k > 0; --k) uri += "/" + parts[rng() % parts.size()];
            xml += "<publish uri=\"" + uri + "\">eA==</publish>";
        }
        xml += "</snapshot>";
        std::vector<Publish> pubs;
        try {
            pubs = parse_snapshot(Bytes(xml.begin(), xml.end()), ResourceBudget::unlimited());
        } catch (const std::exception&) {
            ++parse_errors;
            continue;
        }
        std::string why;
        for (const auto& p : pubs) (writer.write(p.uri, p.body, why) ? written : skipped)++;
    }
    const auto canon_root = std::filesystem::canonical(root).string() + "/";
    std::uint64_t escaped = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(outer)) {
        if (e.is_symlink() || e.is_directory()) continue;
        if (std::filesystem::canonical(e.path()).string().rfind(canon_root, 0) != 0) ++escaped;
    }
    std::filesystem::remove_all(outer);
    return {escaped == 0 && written > 0 && skipped > 0,
            "10000 snapshots: " + std::to_string(written) + " writes, " + std::to_string(skipped) + " refused, " +
                std::to_string(parse_errors) + " unparsable, " + std::to_string(escaped) + " escaped"};
}

Outcome hints() {
    testbed::Testbed bed;
    TestParams p = TestParams::defaults(TestId::H);
    p.width = 5;
    p.depth = 2;
    auto inst = bed.mint(TestId::H, p);
    ResourceBudget b = kDefended;
    b.hints_enabled = true;
    RpOptions o = bed.options();
    const NodeAddress hinted = *NodeAddress::parse("0");
    o.hints = {{hinted, 4}};
    auto out = validate(bed.tal_of(inst), b, o);
    std::size_t below = 0;
    for (const auto& f : out.fetches) {
        auto a = NodeAddress::parse(f.node);
        if (a && hinted.is_ancestor_of(*a)) ++below;
    }
    return {below == 4, std::to_string(below) + " of 5 descendants retrieved under a hint of 4"};
}

Outcome classification() {
    auto vrp = [](const char* prefix, unsigned max_len, std::uint32_t asn) {
        return Vrp{IpPrefix::parse(prefix), max_len, asn};
    };
    std::vector<Vrp> one{vrp("1.0.0.0/8", 8, 1)};
    std::vector<Vrp> two{vrp("1.0.0.0/8", 8, 1), vrp("1.2.0.0/16", 16, 2)};
    auto a = classify(IpPrefix::parse("1.2.0.0/16"), 2, one);
    auto b = classify(IpPrefix::parse("1.2.0.0/16"), 2, two);
    auto c = classify(IpPrefix::parse("9.9.9.0/24"), 42, {});
    bool ok = a == RouteValidity::Invalid && b == RouteValidity::Valid && c == RouteValidity::Unknown;
    return {ok, std::string(to_string(a)) + " / " + std::string(to_string(b)) + " / " + std::string(to_string(c))};
}

Outcome codec_fuzz() {
    // Seeds: real objects and a real snapshot from a small tree.
    ScenarioEngine engine;
    InstanceRegistry registry;
    TestParams p = TestParams::defaults(TestId::H);
    p.width = 2;
    p.depth = 1;
    p.fast_keys = true;
    auto inst = new_instance(registry, TestId::H, p);
    auto pp = engine.publication_point(inst, NodeAddress{});
    std::vector<Bytes> objects;
    for (const auto& f : pp->files) objects.push_back(f.body);
    const Bytes snapshot = pp->snapshot;

    int fds[2];
    if (::pipe(fds) != 0) return {false, "pipe failed"};
    pid_t pid = ::fork();
    if (pid == 0) {
        ::close(fds[0]);
        std::mt19937_64 rng(99);
        double slowest = 0;
        const ResourceBudget budget = ResourceBudget::defaults();
        auto mutate = [&](Bytes in) {
            if (in.empty()) return in;
            for (unsigned f = 1 + rng() % 8; f > 0; --f) in[rng() % in.size()] = static_cast<std::uint8_t>(rng());
            if (rng() % 4 == 0) in.resize(rng() % in.size());
            return in;
        };
        for (int i = 0; i < 10000; ++i) {
            Bytes input;
            if (i % 3 == 0) {
                input.resize(rng() % 2048);
                for (auto& b : input) b = static_cast<std::uint8_t>(rng());
            } else {
                input = mutate(i % 3 == 1 ? objects[rng() % objects.size()] : snapshot);
            }
            auto start = Clock::now();
            try {
                decode_object(input);
            } catch (const std::exception&) {
            }
            slowest = std::max(slowest, since(start));
            start = Clock::now();
            try {
                parse_snapshot(input, budget);
            } catch (const std::exception&) {
            }
            slowest = std::max(slowest, since(start));
        }
        ssize_t w = ::write(fds[1], &slowest, sizeof slowest);
        ::_exit(w == sizeof slowest ? 0 : 3);
    }
    ::close(fds[1]);
    double slowest = -1;
    ssize_t got = ::read(fds[0], &slowest, sizeof slowest);
    ::close(fds[0]);
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (WIFSIGNALED(status)) return {false, "fuzz process died with signal " + std::to_string(WTERMSIG(status))};
    bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && got == sizeof slowest && slowest <= 1.0;
    return {ok, "20000 decodes, 0 aborts, slowest input " + num(slowest * 1e3, 1) + " ms"};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "benign control", benign_control},
        {2, "count law", count_law},
        {3, "defended suite", defended_suite},
        {4, "undefended suite", undefended_suite},
        {5, "bomb containment", bomb_containment},
        {6, "trickle detection", trickle_detection},
        {7, "billion laughs", billion_laughs},
        {8, "path sandbox", path_sandbox},
        {9, "hints", hints},
        {10, "classification", classification},
        {11, "codec fuzz", codec_fuzz},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        Outcome o;
        auto start = Clock::now();
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::string verdict = o.pass ? "PASS" : o.unattainable ? "FAIL (known unattainable)" : "FAIL";
        std::cout << "[" << verdict << "] " << c.id << ". " << c.name << " (" << num(since(start), 1) << " s): "
                  << o.detail << std::endl;
        if (!o.pass && !o.unattainable) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
