#include <doctest.h>

#include <regex>
#include <set>

#include "gauntlet/rp.hpp"
#include "gauntlet/scenario.hpp"
#include "oracle/entity_count.hpp"

using namespace gauntlet;

namespace {

TestInstance make(TestId t, TestParams p) {
    p.fast_keys = true;
    TestInstance inst;
    inst.test = t;
    inst.uuid = random_uuid();
    inst.base_domain = "example.org";
    inst.hostname = make_hostname(t, inst.uuid, inst.base_domain);
    inst.port = 8443;
    inst.created_at = now_seconds();
    inst.params = p;
    return inst;
}

std::string text(const Bytes& b) { return {b.begin(), b.end()}; }

std::uint64_t crawl_count(ScenarioEngine& engine, const TestInstance& inst) {
    std::uint64_t n = 0;
    std::vector<NodeAddress> stack{NodeAddress{}};
    while (!stack.empty()) {
        NodeAddress a = stack.back();
        stack.pop_back();
        ++n;
        const auto kids = engine.children_of(inst, a).value();
        for (auto c : kids) stack.push_back(a.child(c));
    }
    return n;
}

std::uint64_t geometric(std::uint64_t w, unsigned d) {
    std::uint64_t sum = 0, term = 1;
    for (unsigned i = 0; i <= d; ++i, term *= w) sum += term;
    return sum;
}

}  // namespace

TEST_CASE("hostnames follow <letter>-<uuid>.<domain> and never repeat") {
    InstanceRegistry registry;
    auto a = new_instance(registry, TestId::H, TestParams::defaults(TestId::H));
    auto b = new_instance(registry, TestId::H, TestParams::defaults(TestId::H));
    static const std::regex shape(R"(^h-[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}\.example\.org$)");
    CHECK(std::regex_match(a.hostname, shape));
    CHECK(a.uuid != b.uuid);
    CHECK(registry.by_hostname(a.hostname)->uuid == a.uuid);
    CHECK(registry.by_hostname("H" + a.hostname.substr(1))->uuid == a.uuid);
}

TEST_CASE("registry records are shared through the state directory") {
    auto dir = std::filesystem::temp_directory_path() / ("gauntlet-reg-" + random_uuid());
    TestInstance minted;
    {
        InstanceRegistry writer(dir);
        minted = new_instance(writer, TestId::C, TestParams::defaults(TestId::C));
    }
    InstanceRegistry reader(dir);
    auto found = reader.by_hostname(minted.hostname);
    REQUIRE(found);
    CHECK(found->to_json() == minted.to_json());
    std::filesystem::remove_all(dir);
}

TEST_CASE("parameters: set, validate, json") {
    TestParams p = TestParams::defaults(TestId::H);
    CHECK(p.width == 10);
    CHECK(p.depth == 8u);
    p.set("width", "3");
    p.set("depth", "unbounded");
    CHECK(p.width == 3);
    CHECK(!p.depth);
    CHECK(TestParams::from_json(p.to_json()).to_json() == p.to_json());
    p.set("width", "0");
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    CHECK_THROWS_AS(p.set("bogus", "1"), std::invalid_argument);
    CHECK(TestParams::defaults(TestId::E).trickle_rate == 3.0);
    CHECK(TestParams::defaults(TestId::B).retry_after == 86400);
}

TEST_CASE("resolve is deterministic and confined to the instance") {
    ScenarioEngine engine;
    auto inst = make(TestId::H, TestParams::control_profile(TestId::H));
    auto n1 = engine.resolve(inst, "/notification.xml");
    ScenarioEngine other;
    auto n2 = other.resolve(inst, "/notification.xml");
    REQUIRE(n1.status == 200);
    CHECK(n1.body == n2.body);
    auto note = parse_notification(n1.body, ResourceBudget::defaults());
    CHECK(note.snapshot_uri == inst.https_origin() + "/snapshot.xml");
    auto snap = engine.resolve(inst, "/snapshot.xml");
    CHECK(hex(sha256(snap.body)) == note.snapshot_hash);

    CHECK(engine.resolve(inst, "/../etc/passwd").status == 404);
    CHECK(engine.resolve(inst, "/node/0/../notification.xml").status == 404);
    CHECK(engine.resolve(inst, "/node/9/notification.xml").status == 404);
    CHECK(engine.resolve(inst, "/nothing-here").status == 404);
}

TEST_CASE("instances never reference each other's hostnames") {
    ScenarioEngine engine;
    auto x = make(TestId::H, TestParams::control_profile(TestId::H));
    auto y = make(TestId::H, TestParams::control_profile(TestId::H));
    std::vector<NodeAddress> stack{NodeAddress{}};
    while (!stack.empty()) {
        auto a = stack.back();
        stack.pop_back();
        auto pp = engine.publication_point(x, a);
        for (const Bytes* b : {&pp->snapshot, &pp->notification, &pp->cert}) {
            CHECK(text(*b).find(y.uuid) == std::string::npos);
            CHECK(text(*b).find(x.hostname) != std::string::npos);
        }
        for (auto c : pp->children) stack.push_back(a.child(c));
    }
}

TEST_CASE("A: the chain never ends") {
    ScenarioEngine engine;
    auto inst = make(TestId::A, TestParams::defaults(TestId::A));
    NodeAddress deep;
    for (int i = 0; i < 500; ++i) deep = deep.child(0);
    auto kids = engine.children_of(inst, deep);
    REQUIRE(kids);
    CHECK(kids->size() == 1);
    auto pp = engine.gen_chain(inst, deep);
    bool has_cert = std::any_of(pp->files.begin(), pp->files.end(),
                                [](const RepoFile& f) { return f.name.size() > 4 && f.name.substr(f.name.size() - 4) == ".cer"; });
    CHECK(has_cert);
    CHECK(deep.depth() == 500);
    CHECK(NodeAddress::parse(deep.to_path())->depth() == 500);
}

TEST_CASE("H: publication points follow the geometric sum") {
    ScenarioEngine engine;
    for (auto [w, d] : std::vector<std::pair<unsigned, unsigned>>{{2, 3}, {3, 4}, {10, 2}}) {
        TestParams p = TestParams::defaults(TestId::H);
        p.width = w;
        p.depth = d;
        auto inst = make(TestId::H, p);
        CHECK(crawl_count(engine, inst) == geometric(w, d));
    }
    CHECK(geometric(3, 4) == 121);
    // The "11,111,111 repositories" of a width-10 tree is the depth-7 sum.
    CHECK(geometric(10, 7) == 11111111);
    CHECK(geometric(10, 8) == 111111111);
}

TEST_CASE("F and I attack objects") {
    ScenarioEngine engine;
    auto f = make(TestId::F, TestParams::defaults(TestId::F));
    auto fo = engine.gen_roa_attack(f, TestId::F);
    REQUIRE(fo.size() == 1);
    CHECK(fo[0].econtent.size() == 1);
    CHECK_THROWS(decode_object(fo[0].der));

    auto i = make(TestId::I, TestParams::defaults(TestId::I));
    auto io = engine.gen_roa_attack(i, TestId::I);
    REQUIRE(!io.empty());
    for (const auto& b : io) {
        auto roa = decode_roa_content(b.econtent, DecodeMode::Lax);
        bool broken = false;
        for (const auto& blk : roa.blocks)
            broken |= blk.prefix_length > family_bits(blk.family) ||
                      (blk.max_length && *blk.max_length > static_cast<std::int64_t>(family_bits(blk.family)));
        CHECK(broken);
        CHECK_THROWS(decode_roa_content(b.econtent, DecodeMode::Strict));
    }
    CHECK_THROWS_AS(engine.gen_roa_attack(f, TestId::I), std::invalid_argument);
}

TEST_CASE("J: one prefix, consecutive ASNs") {
    ScenarioEngine engine;
    TestParams p = TestParams::defaults(TestId::J);
    p.roa_count = 25;
    p.page_size = 10;
    auto inst = make(TestId::J, p);
    auto all = engine.gen_roa_attack(inst, TestId::J);
    REQUIRE(all.size() == 25);
    std::set<IpPrefix> prefixes;
    std::vector<std::uint32_t> asns;
    for (const auto& b : all) {
        auto roa = decode_roa_content(b.econtent, DecodeMode::Strict);
        for (const auto& blk : roa.blocks) prefixes.insert(blk.prefix());
        asns.push_back(roa.as_id);
    }
    CHECK(prefixes.size() == 1);
    for (std::size_t k = 1; k < asns.size(); ++k) CHECK(asns[k] == asns[k - 1] + 1);
    // 2^32 VRPs of roughly 20 bytes each.
    double gb = 4294967296.0 * 20 / 1e9;
    CHECK(gb == doctest::Approx(85.9).epsilon(0.01));
}

TEST_CASE("K: subprefixes of a /48 in breadth-first order") {
    IpPrefix root = k_prefix(0);
    CHECK(root.length == 48);
    CHECK(k_prefix(1).length == 49);
    CHECK(k_prefix(2).length == 49);
    CHECK(k_prefix(3).length == 50);
    CHECK(k_prefix(6).length == 50);
    CHECK(k_prefix(7).length == 51);
    std::set<IpPrefix> seen;
    for (std::uint64_t i = 0; i < 5000; ++i) {
        IpPrefix p = k_prefix(i);
        CHECK(root.contains(p));
        seen.insert(p);
    }
    CHECK(seen.size() == 5000);
    // /48 down to /128: 81 levels, 2^81 - 1 prefixes.
    long double total = 0;
    for (int i = 0; i <= 80; ++i) total += std::pow(2.0L, i);
    CHECK(total == doctest::Approx(std::pow(2.0L, 81)).epsilon(1e-12));
}

TEST_CASE("G: nested entities, counted independently") {
    ScenarioEngine engine;
    for (unsigned levels : {6u, 9u, 10u}) {
        TestParams p = TestParams::defaults(TestId::G);
        p.entity_levels = levels;
        auto inst = make(TestId::G, p);
        std::string doc = text(engine.gen_xml_attack(inst, TestId::G).body);
        CHECK(doc.size() <= 10 * 1024);
        oracle::EntityCounter counter(doc);
        unsigned long long expected = 1;
        for (unsigned k = 0; k < levels; ++k) expected *= 10;
        CHECK(counter.leaves("lol" + std::to_string(levels)) == expected);
        CHECK(doc.find("&lol" + std::to_string(levels) + ";") != std::string::npos);
    }
}

TEST_CASE("M: external entities inside the uri attribute") {
    ScenarioEngine engine;
    auto inst = make(TestId::M, TestParams::defaults(TestId::M));
    std::string doc = text(engine.gen_xml_attack(inst, TestId::M).body);
    CHECK(doc.find("SYSTEM \"" + inst.https_origin() + "/callback/") != std::string::npos);
    CHECK(doc.find("file:///") != std::string::npos);
    CHECK(std::regex_search(doc, std::regex(R"re(uri="[^"]*&\w+;)re")));
    auto pp = engine.publication_point(inst, attack_node());
    CHECK(text(pp->notification) == doc);
}

TEST_CASE("N and O path attacks") {
    ScenarioEngine engine;
    TestParams np = TestParams::defaults(TestId::N);
    auto n = make(TestId::N, np);
    std::string doc = text(engine.gen_path_attack(n, TestId::N).body);
    std::size_t longest = 0;
    // std::regex recurses per character; a 4 MiB attribute needs a plain scan.
    for (auto pos = doc.find("uri=\""); pos != std::string::npos; pos = doc.find("uri=\"", pos + 1)) {
        auto end = doc.find('"', pos + 5);
        std::string uri = doc.substr(pos + 5, end - pos - 5);
        std::size_t start = 0;
        for (std::size_t k = 0; k <= uri.size(); ++k)
            if (k == uri.size() || uri[k] == '/') {
                longest = std::max(longest, k - start);
                start = k + 1;
            }
    }
    CHECK(longest == np.path_len + 4);  // plus ".roa"

    auto o = make(TestId::O, TestParams::defaults(TestId::O));
    std::string odoc = text(engine.gen_path_attack(o, TestId::O).body);
    CHECK(odoc.find("/../") != std::string::npos);
    CHECK(odoc.find("etc/cron.daily/evil.roa") != std::string::npos);
    CHECK(std::regex_search(odoc, std::regex(R"re(uri="rsync://[^"]*/\.\./\.\./)re")));
}

TEST_CASE("HTTP behaviours per letter") {
    ScenarioEngine engine;
    auto b = engine.http_behavior_for(make(TestId::B, TestParams::defaults(TestId::B)));
    CHECK(b.kind == HttpBehavior::Kind::RateLimit);
    CHECK(b.retry_after == 86400);
    TestParams year = TestParams::defaults(TestId::B);
    year.set("retry_after", "31536000");
    CHECK(engine.http_behavior_for(make(TestId::B, year)).retry_after == 31536000);

    CHECK(engine.http_behavior_for(make(TestId::C, TestParams::defaults(TestId::C))).kind ==
          HttpBehavior::Kind::RedirectChain);
    auto d = engine.http_behavior_for(make(TestId::D, TestParams::defaults(TestId::D)));
    CHECK(d.kind == HttpBehavior::Kind::GzipBomb);
    CHECK(d.decompressed_len >= 1000 * d.compressed_len);
    auto e = engine.http_behavior_for(make(TestId::E, TestParams::defaults(TestId::E)));
    CHECK(e.kind == HttpBehavior::Kind::Trickle);
    CHECK(e.rate == 3.0);
    auto l = engine.http_behavior_for(make(TestId::L, TestParams::defaults(TestId::L)));
    CHECK(l.kind == HttpBehavior::Kind::Huge);
    CHECK(l.total_len == 8ull << 30);
    for (TestId t : {TestId::A, TestId::F, TestId::G, TestId::H, TestId::O})
        CHECK(engine.http_behavior_for(make(t, TestParams::defaults(t))).kind == HttpBehavior::Kind::Normal);
    for (TestId t : all_tests())
        CHECK(engine.http_behavior_for(make(t, TestParams::control_profile(t))).kind == HttpBehavior::Kind::Normal);
}

TEST_CASE("C: every hop is a fresh URI") {
    ScenarioEngine engine;
    auto inst = make(TestId::C, TestParams::defaults(TestId::C));
    std::set<std::string> seen;
    std::string path = "/redirect/1";
    for (int k = 0; k < 50; ++k) {
        auto r = engine.resolve(inst, path);
        REQUIRE(r.status == 302);
        CHECK(seen.insert(r.location).second);
        path = r.location.substr(inst.https_origin().size());
    }
}
