#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "oracle/brute_force.hpp"
#include "testbed.hpp"

using namespace gauntlet;

namespace {

Vrp vrp(const char* prefix, unsigned max_len, std::uint32_t asn) { return {IpPrefix::parse(prefix), max_len, asn}; }

Bytes bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

Violation xml_kind(std::string_view doc, ResourceBudget b = ResourceBudget::defaults()) {
    try {
        parse_snapshot(bytes(doc), b);
    } catch (const RepositoryViolation& v) {
        return v.kind;
    }
    FAIL("document was accepted");
    return Violation::XmlRejected;
}

const std::string kSnapOpen =
    "<snapshot xmlns=\"http://www.ripe.net/rpki/rrdp\" version=\"1\" session_id=\"9df4b597-af9e-4dca-bdda-719cce2c4e28\" "
    "serial=\"1\">";

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

std::size_t descendants_fetched(const ValidationOutcome& o, const NodeAddress& under) {
    std::size_t n = 0;
    for (const auto& f : o.fetches) {
        auto a = NodeAddress::parse(f.node);
        if (a && under.is_ancestor_of(*a)) ++n;
    }
    return n;
}

}  // namespace

TEST_CASE("classify: the worked example") {
    std::vector<Vrp> vrps{vrp("1.0.0.0/8", 8, 1)};
    CHECK(classify(IpPrefix::parse("1.2.0.0/16"), 2, vrps) == RouteValidity::Invalid);
    vrps.push_back(vrp("1.2.0.0/16", 16, 2));
    CHECK(classify(IpPrefix::parse("1.2.0.0/16"), 2, vrps) == RouteValidity::Valid);
    CHECK(classify(IpPrefix::parse("9.9.9.0/24"), 42, {}) == RouteValidity::Unknown);
}

TEST_CASE("classify: length and AS0") {
    std::vector<Vrp> vrps{vrp("10.0.0.0/8", 16, 64496), vrp("192.0.2.0/24", 24, 0)};
    CHECK(classify(IpPrefix::parse("10.1.0.0/16"), 64496, vrps) == RouteValidity::Valid);
    CHECK(classify(IpPrefix::parse("10.1.1.0/24"), 64496, vrps) == RouteValidity::Invalid);
    CHECK(classify(IpPrefix::parse("192.0.2.0/24"), 0, vrps) == RouteValidity::Invalid);
    CHECK(classify(IpPrefix::parse("2001:db8::/32"), 64496, vrps) == RouteValidity::Unknown);
}

TEST_CASE("property: classify is order independent") {
    std::mt19937 rng(7);
    const char* pool[] = {"10.0.0.0/8", "10.1.0.0/16", "10.1.2.0/24", "192.0.2.0/24", "0.0.0.0/0", "2001:db8::/32"};
    for (int round = 0; round < 300; ++round) {
        std::vector<Vrp> vrps;
        int n = static_cast<int>(rng() % 6);
        for (int k = 0; k < n; ++k) {
            IpPrefix p = IpPrefix::parse(pool[rng() % 6]);
            unsigned bits = p.family == AddressFamily::Ipv4 ? 32 : 128;
            vrps.push_back({p, p.length + static_cast<unsigned>(rng() % (bits - p.length + 1)), static_cast<std::uint32_t>(64496 + rng() % 3)});
        }
        IpPrefix ann = IpPrefix::parse(pool[rng() % 6]);
        auto asn = static_cast<std::uint32_t>(64496 + rng() % 3);
        auto first = classify(ann, asn, vrps);
        for (int s = 0; s < 5; ++s) {
            std::shuffle(vrps.begin(), vrps.end(), rng);
            CHECK(classify(ann, asn, vrps) == first);
        }
    }
}

TEST_CASE("effective limit is the strictest hint on the path") {
    std::vector<TreeHint> hints{{*NodeAddress::parse(""), 100}, {*NodeAddress::parse("0"), 4}, {*NodeAddress::parse("0.1"), 9}};
    CHECK(effective_limit(hints, *NodeAddress::parse("")) == 100u);
    CHECK(effective_limit(hints, *NodeAddress::parse("0")) == 4u);
    CHECK(effective_limit(hints, *NodeAddress::parse("0.1.2")) == 4u);
    CHECK(effective_limit(hints, *NodeAddress::parse("1.1")) == 100u);
    CHECK(!effective_limit({}, *NodeAddress::parse("1")));
}

TEST_CASE("budget: parsing, config files, validation") {
    ResourceBudget b;
    CHECK(b.max_depth == 12u);
    CHECK(b.max_repos == 5000u);
    CHECK(b.max_total_bytes == 2ull << 30);
    CHECK(b.max_object_bytes == 20ull << 20);
    CHECK(b.max_wall_time == 1800.0);
    CHECK(b.min_transfer_rate == 1024.0);
    CHECK(b.max_redirects == 5u);
    CHECK(b.max_retry_after == 600u);
    CHECK(b.max_decompress_ratio == 10.0);
    CHECK(b.max_vrps == 2000000u);
    CHECK(b.max_path_len == 64u << 10);

    b.set("max_depth", "off");
    b.set("max_object_bytes", "5MiB");
    b.set("max_total_bytes", "1G");
    b.set("hints_enabled", "true");
    CHECK(!b.max_depth);
    CHECK(b.max_object_bytes == 5u << 20);
    CHECK(b.max_total_bytes == 1ull << 30);
    CHECK(b.hints_enabled);
    CHECK(b.to_json()["max_depth"].is_null());
    CHECK_THROWS(b.set("max_redirects", "many"));
    CHECK_THROWS(b.set("no_such_limit", "1"));
    b.set("max_repos", "0");
    CHECK_THROWS(b.validate());

    auto file = testbed::temp_dir("cfg") / "budget.conf";
    std::ofstream(file) << "# desk\nmax_vrps = 500\n\nmax_redirects=off\n";
    ResourceBudget c;
    c.load_config(file);
    CHECK(c.max_vrps == 500u);
    CHECK(!c.max_redirects);
    std::filesystem::remove_all(file.parent_path());

    auto u = ResourceBudget::unlimited();
    CHECK(!u.max_depth);
    CHECK(!u.max_vrps);
    CHECK(!u.check_paths);
}

TEST_CASE("VRP CSV and exit codes") {
    ValidationOutcome o;
    o.vrps = {vrp("10.0.0.0/8", 24, 64496)};
    CHECK(vrps_csv(o.vrps) == "prefix,max_length,asn\n10.0.0.0/8,24,AS64496\n");
    CHECK(exit_code(o) == 0);
    o.violations.push_back({Violation::DepthLimit, 13, "", ""});
    CHECK(exit_code(o) == 2);
}

TEST_CASE("XML: entities and DTDs are refused") {
    CHECK(xml_kind("<?xml version=\"1.0\"?><!DOCTYPE x [<!ENTITY a \"b\">]>" + kSnapOpen + "</snapshot>") ==
          Violation::XmlRejected);
    CHECK(xml_kind(kSnapOpen + "<publish uri=\"rsync://h/m/a.roa\">&a;</publish></snapshot>") == Violation::XmlRejected);
    std::string deep = kSnapOpen;
    for (int k = 0; k < 20; ++k) deep += "<x>";
    CHECK(xml_kind(deep) == Violation::XmlRejected);
    CHECK(xml_kind(kSnapOpen + "<publish uri=\"a\" uri=\"b\"></publish></snapshot>") == Violation::XmlRejected);
    CHECK(xml_kind(kSnapOpen + "<publish uri=\"rsync://h/m/a.roa\">!!!</publish></snapshot>") == Violation::XmlRejected);
    CHECK(xml_kind("<snapshot xmlns=\"urn:other\" version=\"1\" session_id=\"s\" serial=\"1\"></snapshot>") ==
          Violation::XmlRejected);
}

TEST_CASE("XML: predefined and numeric references are fine") {
    auto out = parse_snapshot(bytes("<?xml version=\"1.0\"?>\n<!-- c -->" + kSnapOpen +
                                    "<publish uri=\"rsync://h/m/a&amp;b&#46;roa\">AAEC</publish></snapshot>"),
                              ResourceBudget::defaults());
    REQUIRE(out.size() == 1);
    CHECK(out[0].uri == "rsync://h/m/a&b.roa");
    CHECK(out[0].body == Bytes{0, 1, 2});
}

TEST_CASE("XML: long and escaping URIs") {
    ResourceBudget b;
    b.max_path_len = 1000;
    std::string longuri = "rsync://h/m/" + std::string(2000, 'a');
    CHECK(xml_kind(kSnapOpen + "<publish uri=\"" + longuri + "\">AA==</publish></snapshot>", b) == Violation::PathTooLong);
    CHECK(xml_kind(kSnapOpen + "<publish uri=\"rsync://h/m/r/../../etc/x.roa\">AA==</publish></snapshot>") ==
          Violation::PathTraversal);
    auto ok = parse_snapshot(bytes(kSnapOpen + "<publish uri=\"rsync://h/m/a/./b.roa\">AA==</publish></snapshot>"),
                             ResourceBudget::defaults());
    CHECK(ok.at(0).uri == "rsync://h/m/a/b.roa");
    auto raw = parse_snapshot(bytes(kSnapOpen + "<publish uri=\"rsync://h/m/r/../../etc/x.roa\">AA==</publish></snapshot>"),
                              ResourceBudget::unlimited());
    CHECK(raw.at(0).uri == "rsync://h/m/r/../../etc/x.roa");
}

TEST_CASE("normalize_rsync_uri") {
    CHECK(normalize_rsync_uri("rsync://h/m/a/./b") == "rsync://h/m/a/b");
    CHECK(normalize_rsync_uri("rsync://h/m/a/../b") == "rsync://h/m/b");
    CHECK(!normalize_rsync_uri("rsync://h/m/a/../../b"));
    CHECK(!normalize_rsync_uri("rsync://h/m/../etc/passwd"));
    CHECK(!normalize_rsync_uri("https://h/m/a"));
}

TEST_CASE("smoke: crawl H(2,3) with unlimited budget") {
    testbed::Testbed bed;
    TestParams p = TestParams::defaults(TestId::H);
    p.width = 2;
    p.depth = 3;
    auto inst = bed.mint(TestId::H, p);
    auto out = bed.run(inst, ResourceBudget::unlimited());
    CHECK(out.repos_visited == 15);
    CHECK(out.warnings.empty());
}

TEST_CASE("control trees match the brute-force oracle") {
    testbed::Testbed bed;
    for (TestId t : all_tests()) {
        auto inst = bed.mint(t, TestParams::control_profile(t));
        ResourceBudget b;
        auto out = bed.run(inst, b);
        auto expected = oracle::brute_force(bed.engine, inst);
        INFO("test ", std::string(1, letter(t)), ": rp ", out.vrps.size(), " VRPs / ", out.repos_visited, " points, oracle ",
             expected.vrps.size(), " / ", expected.publication_points);
        for (const auto& n : expected.notes) MESSAGE(n);
        CHECK(out.violations.empty());
        CHECK(out.warnings.empty());
        CHECK(expected.notes.empty());
        CHECK(!expected.vrps.empty());
        CHECK(as_oracle(out.vrps) == expected.vrps);
        CHECK(out.repos_visited == expected.publication_points);
    }
}

TEST_CASE("property: relaxing one limit never removes a VRP") {
    testbed::Testbed bed;
    std::mt19937 rng(11);
    TestParams hp = TestParams::defaults(TestId::H);
    hp.width = 2;
    hp.depth = 3;
    TestParams jp = TestParams::defaults(TestId::J);
    jp.roa_count = 40;
    jp.page_size = 10;
    std::vector<TestInstance> trees{bed.mint(TestId::H, hp), bed.mint(TestId::J, jp),
                                    bed.mint(TestId::A, TestParams::control_profile(TestId::A))};
    for (int round = 0; round < 12; ++round) {
        const auto& inst = trees[static_cast<std::size_t>(round) % trees.size()];
        ResourceBudget tight = ResourceBudget::defaults();
        tight.max_depth = static_cast<unsigned>(1 + rng() % 3);
        tight.max_repos = 1 + rng() % 12;
        tight.max_vrps = 1 + rng() % 30;
        ResourceBudget loose = tight;
        switch (rng() % 3) {
            case 0: loose.max_depth = *tight.max_depth + 1 + rng() % 3; break;
            case 1: loose.max_repos = *tight.max_repos + 1 + rng() % 10; break;
            default: loose.max_vrps = *tight.max_vrps + 1 + rng() % 30; break;
        }
        auto a = bed.run(inst, tight);
        auto b = bed.run(inst, loose);
        CHECK(std::includes(b.vrps.begin(), b.vrps.end(), a.vrps.begin(), a.vrps.end()));
    }
}

TEST_CASE("hints: five children, a limit of four") {
    testbed::Testbed bed;
    TestParams p = TestParams::defaults(TestId::H);
    p.width = 5;
    p.depth = 2;
    auto inst = bed.mint(TestId::H, p);
    ResourceBudget b = ResourceBudget::defaults();
    b.hints_enabled = true;
    b.accept_fast_keys = true;
    RpOptions o = bed.options();
    o.hints = {{*NodeAddress::parse("0"), 4}};
    auto out = validate(bed.tal_of(inst), b, o);
    CHECK(descendants_fetched(out, *NodeAddress::parse("0")) == 4);
    CHECK(descendants_fetched(out, *NodeAddress::parse("1")) == 5);
    CHECK(out.has(Violation::HintLimit));
}

TEST_CASE("property: hinted subtrees stay within their effective limit") {
    testbed::Testbed bed;
    TestParams p = TestParams::defaults(TestId::H);
    p.width = 3;
    p.depth = 3;
    auto inst = bed.mint(TestId::H, p);
    std::mt19937 rng(5);
    for (int round = 0; round < 6; ++round) {
        std::vector<TreeHint> hints;
        for (int k = 0; k < 3; ++k) {
            NodeAddress a;
            for (unsigned d = rng() % 3; d > 0; --d) a = a.child(rng() % 3);
            hints.push_back({a, rng() % 14});
        }
        ResourceBudget b;
        b.hints_enabled = true;
        b.accept_fast_keys = true;
        RpOptions o = bed.options();
        o.hints = hints;
        auto out = validate(bed.tal_of(inst), b, o);
        for (const auto& h : hints)
            CHECK(descendants_fetched(out, h.node) <= *effective_limit(hints, h.node));
    }
}

TEST_CASE("closed loop: per-test defenses") {
    testbed::Testbed bed;
    ResourceBudget d = ResourceBudget::defaults();

    SUBCASE("A stops at max_depth") {
        auto out = bed.run(bed.mint(TestId::A, TestParams::defaults(TestId::A)), d);
        CHECK(out.has(Violation::DepthLimit));
        CHECK(out.repos_visited == 13);
        CHECK(out.partial);
    }
    SUBCASE("B with a year of Retry-After") {
        TestParams p = TestParams::defaults(TestId::B);
        p.retry_after = 31536000;
        auto out = bed.run(bed.mint(TestId::B, p), d);
        CHECK(out.find(Violation::RateLimitExcessive)->measured == 31536000.0);
        CHECK(out.longest_wait < 1);
    }
    SUBCASE("C stops after max_redirects") {
        auto out = bed.run(bed.mint(TestId::C, TestParams::defaults(TestId::C)), d);
        CHECK(out.find(Violation::RedirectLimit)->measured == 6.0);
        CHECK(out.redirects_followed == 5);
    }
    SUBCASE("D is cut at the ratio") {
        auto out = bed.run(bed.mint(TestId::D, TestParams::defaults(TestId::D)), d);
        CHECK(out.has(Violation::BombDetected));
        CHECK(out.bytes_decompressed <= 10 * out.bytes_fetched + 1);
    }
    SUBCASE("J with roa_count 1000 and max_vrps 500") {
        TestParams p = TestParams::defaults(TestId::J);
        p.roa_count = 1000;
        ResourceBudget b = d;
        b.max_vrps = 500;
        auto out = bed.run(bed.mint(TestId::J, p), b);
        CHECK(out.has(Violation::VrpBudgetExceeded));
        CHECK(out.vrps.size() <= 500);
    }
    SUBCASE("L refuses the payload") {
        auto out = bed.run(bed.mint(TestId::L, TestParams::defaults(TestId::L)), d);
        CHECK(out.has(Violation::ObjectTooLarge));
        CHECK(out.bytes_fetched < (1u << 20));
    }
    SUBCASE("M makes no callback") {
        auto inst = bed.mint(TestId::M, TestParams::defaults(TestId::M));
        auto out = bed.run(inst, d);
        CHECK(out.has(Violation::XmlRejected));
        CHECK(bed.count(inst, Observation::Kind::CallbackHit) == 0);
    }
    SUBCASE("N is rejected by length") {
        auto out = bed.run(bed.mint(TestId::N, TestParams::defaults(TestId::N)), d);
        CHECK(out.has(Violation::PathTooLong));
    }
    SUBCASE("O is rejected and nothing escapes the cache") {
        auto jail = testbed::temp_dir("jail");
        RpOptions o = bed.options();
        o.cache_dir = jail / "cache";
        o.cache_jail = jail;
        ResourceBudget b = d;
        b.accept_fast_keys = true;
        auto out = validate(bed.tal_of(bed.mint(TestId::O, TestParams::defaults(TestId::O))), b, o);
        CHECK(out.has(Violation::PathTraversal));
        CHECK(!std::filesystem::exists(jail / "etc"));
        CHECK(!out.files_written.empty());
        std::filesystem::remove_all(jail);
    }
    SUBCASE("F and I warn and move on") {
        for (TestId t : {TestId::F, TestId::I}) {
            auto out = bed.run(bed.mint(t, TestParams::defaults(t)), d);
            CHECK(out.violations.empty());
            CHECK(!out.warnings.empty());
            CHECK(std::binary_search(out.vrps.begin(), out.vrps.end(), vrp("192.0.2.0/24", 24, 64500)));
            CHECK(std::binary_search(out.vrps.begin(), out.vrps.end(), vrp("10.0.0.0/8", 24, 64496)));
        }
    }
}

TEST_CASE("termination: a wall-time limit ends an endless chain") {
    testbed::Testbed bed;
    ResourceBudget b = ResourceBudget::unlimited();
    b.max_wall_time = 3;
    auto start = std::chrono::steady_clock::now();
    auto out = bed.run(bed.mint(TestId::A, TestParams::defaults(TestId::A)), b);
    double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(out.has(Violation::WallTimeExceeded));
    CHECK(took < 3 + 10);
}

TEST_CASE("cancellation aborts an in-flight trickle within two seconds") {
    testbed::Testbed bed;
    auto inst = bed.mint(TestId::E, TestParams::defaults(TestId::E));
    CancelToken token;
    RpOptions o = bed.options();
    o.cancel = &token;
    ResourceBudget b = ResourceBudget::unlimited();
    b.accept_fast_keys = true;
    std::chrono::steady_clock::time_point returned;
    std::thread worker([&] {
        auto out = validate(bed.tal_of(inst), b, o);
        returned = std::chrono::steady_clock::now();
        CHECK(out.cancelled);
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(1500));
    auto cancelled_at = std::chrono::steady_clock::now();
    token.cancel();
    worker.join();
    CHECK(std::chrono::duration<double>(returned - cancelled_at).count() < 2);
}

TEST_CASE("keys below 2048 bits need accept_fast_keys") {
    testbed::Testbed bed;
    auto inst = bed.mint(TestId::F, TestParams::control_profile(TestId::F));
    CHECK_THROWS_AS(validate(bed.tal_of(inst), ResourceBudget::defaults(), bed.options()), TalUnreachable);
}
