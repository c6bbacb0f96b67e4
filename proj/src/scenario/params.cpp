#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <random>

#include "gauntlet/scenario.hpp"

namespace gauntlet {
namespace {

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw std::invalid_argument("parameter " + std::string(key) + " expects an integer, got '" + std::string(v) + "'");
    return out;
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

const std::array<TestId, 15>& all_tests() {
    static const std::array<TestId, 15> tests = {
        TestId::A, TestId::B, TestId::C, TestId::D, TestId::E, TestId::F, TestId::G, TestId::H,
        TestId::I, TestId::J, TestId::K, TestId::L, TestId::M, TestId::N, TestId::O};
    return tests;
}

char letter(TestId t) { return static_cast<char>(t); }

TestId parse_test_id(std::string_view s) {
    if (s.size() == 1) {
        char c = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
        if (c >= 'A' && c <= 'O') return static_cast<TestId>(c);
    }
    throw std::invalid_argument("unknown test '" + std::string(s) + "', expected A..O");
}

std::string_view describe(TestId t) {
    switch (t) {
        case TestId::A: return "endless repository chain";
        case TestId::B: return "Retry-After of a day";
        case TestId::C: return "endless HTTP redirects";
        case TestId::D: return "gzip decompression bomb";
        case TestId::E: return "trickling TCP stream";
        case TestId::F: return "ROA with NUL content";
        case TestId::G: return "XML entity expansion";
        case TestId::H: return "wide and deep CA tree";
        case TestId::I: return "semantically broken ROA";
        case TestId::J: return "one prefix for many ASNs";
        case TestId::K: return "many prefixes for one ASN";
        case TestId::L: return "gigabyte snapshot";
        case TestId::M: return "XML external entity";
        case TestId::N: return "megabyte path name";
        case TestId::O: return "path traversal";
    }
    return "";
}

TestParams TestParams::defaults(TestId t) {
    TestParams p;
    switch (t) {
        case TestId::A: p.width = 1; p.depth.reset(); break;
        case TestId::H: p.width = 10; p.depth = 8; break;
        case TestId::J: p.roa_count = 10000; break;
        case TestId::K: p.roa_count = 100000; break;
        case TestId::D: p.payload_size = 256ull << 20; break;
        case TestId::L: p.payload_size = 8ull << 30; break;
        default: break;
    }
    return p;
}

TestParams TestParams::control_profile(TestId t) {
    TestParams p = defaults(t);
    p.control = true;
    switch (t) {
        case TestId::A: p.depth = 3; break;
        case TestId::H: p.width = 2; p.depth = 2; break;
        case TestId::J:
        case TestId::K: p.roa_count = 20; break;
        default: break;
    }
    return p;
}

void TestParams::set(std::string_view key, std::string_view value) {
    const std::string v = lower(value);
    auto flag = [&](std::string_view k) {
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no") return false;
        throw std::invalid_argument("parameter " + std::string(k) + " expects a boolean");
    };
    if (key == "width" || key == "w") {
        width = static_cast<unsigned>(parse_u64(key, v));
    } else if (key == "depth" || key == "d") {
        if (v == "unbounded") depth.reset();
        else depth = static_cast<unsigned>(parse_u64(key, v));
    } else if (key == "roa_count") {
        roa_count = parse_u64(key, v);
    } else if (key == "page_size") {
        page_size = parse_u64(key, v);
    } else if (key == "payload_size") {
        payload_size = parse_u64(key, v);
    } else if (key == "trickle_rate") {
        try {
            trickle_rate = std::stod(v);
        } catch (const std::exception&) {
            throw std::invalid_argument("parameter trickle_rate expects a number");
        }
    } else if (key == "retry_after") {
        retry_after = parse_u64(key, v);
    } else if (key == "redirect_hops") {
        if (v == "unbounded") redirect_hops.reset();
        else redirect_hops = parse_u64(key, v);
    } else if (key == "entity_levels") {
        entity_levels = static_cast<unsigned>(parse_u64(key, v));
    } else if (key == "path_len") {
        path_len = parse_u64(key, v);
    } else if (key == "control") {
        control = flag(key);
    } else if (key == "fast_keys") {
        fast_keys = flag(key);
    } else {
        throw std::invalid_argument("unknown parameter '" + std::string(key) + "'");
    }
}

void TestParams::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("parameter must be positive: ") + what);
    };
    need(width >= 1, "width");
    need(roa_count >= 1, "roa_count");
    need(page_size >= 1, "page_size");
    need(trickle_rate > 0, "trickle_rate");
    need(retry_after >= 1, "retry_after");
    need(!redirect_hops || *redirect_hops >= 1, "redirect_hops");
    need(entity_levels >= 1, "entity_levels");
    need(path_len >= 1, "path_len");
    if (entity_levels > 18) throw std::invalid_argument("entity_levels above 18 overflows the expansion count");
}

nlohmann::json TestParams::to_json() const {
    nlohmann::json j;
    j["width"] = width;
    j["depth"] = depth ? nlohmann::json(*depth) : nlohmann::json("unbounded");
    j["roa_count"] = roa_count;
    j["page_size"] = page_size;
    j["payload_size"] = payload_size;
    j["trickle_rate"] = trickle_rate;
    j["retry_after"] = retry_after;
    j["redirect_hops"] = redirect_hops ? nlohmann::json(*redirect_hops) : nlohmann::json("unbounded");
    j["entity_levels"] = entity_levels;
    j["path_len"] = path_len;
    j["control"] = control;
    j["fast_keys"] = fast_keys;
    return j;
}

TestParams TestParams::from_json(const nlohmann::json& j) {
    TestParams p;
    p.width = j.at("width").get<unsigned>();
    if (j.at("depth").is_string()) p.depth.reset();
    else p.depth = j.at("depth").get<unsigned>();
    p.roa_count = j.at("roa_count").get<std::uint64_t>();
    p.page_size = j.value("page_size", std::uint64_t{1000});
    p.payload_size = j.at("payload_size").get<std::uint64_t>();
    p.trickle_rate = j.at("trickle_rate").get<double>();
    p.retry_after = j.at("retry_after").get<std::uint64_t>();
    if (j.at("redirect_hops").is_string()) p.redirect_hops.reset();
    else p.redirect_hops = j.at("redirect_hops").get<std::uint64_t>();
    p.entity_levels = j.at("entity_levels").get<unsigned>();
    p.path_len = j.at("path_len").get<std::uint64_t>();
    p.control = j.value("control", false);
    p.fast_keys = j.value("fast_keys", false);
    return p;
}

// ---- instances ---------------------------------------------------------------

std::string TestInstance::https_origin() const {
    std::string o = "https://" + hostname;
    if (port != 443) o += ":" + std::to_string(port);
    return o;
}

std::string TestInstance::rsync_module() const { return "rsync://" + hostname + "/" + hostname + "/"; }

nlohmann::json TestInstance::to_json() const {
    return {
        {"test", std::string(1, letter(test))},
        {"uuid", uuid},
        {"hostname", hostname},
        {"base_domain", base_domain},
        {"port", port},
        {"created_at", created_at.time_since_epoch().count()},
        {"params", params.to_json()},
    };
}

TestInstance TestInstance::from_json(const nlohmann::json& j) {
    TestInstance i;
    i.test = parse_test_id(j.at("test").get<std::string>());
    i.uuid = j.at("uuid").get<std::string>();
    i.hostname = j.at("hostname").get<std::string>();
    i.base_domain = j.at("base_domain").get<std::string>();
    i.port = j.at("port").get<std::uint16_t>();
    i.created_at = TimePoint(std::chrono::seconds(j.at("created_at").get<std::int64_t>()));
    i.params = TestParams::from_json(j.at("params"));
    return i;
}

std::string make_hostname(TestId t, std::string_view uuid, std::string_view base_domain) {
    return lower(std::string(1, letter(t)) + "-" + std::string(uuid) + "." + std::string(base_domain));
}

std::string random_uuid() {
    static std::mutex mu;
    static std::mt19937_64 rng{std::random_device{}()};
    std::array<std::uint8_t, 16> b{};
    {
        std::lock_guard lock(mu);
        for (std::size_t i = 0; i < 16; i += 8) {
            std::uint64_t v = rng();
            for (int k = 0; k < 8; ++k) b[i + k] = static_cast<std::uint8_t>(v >> (8 * k));
        }
    }
    b[6] = static_cast<std::uint8_t>((b[6] & 0x0f) | 0x40);
    b[8] = static_cast<std::uint8_t>((b[8] & 0x3f) | 0x80);
    std::string h = hex(ByteView(b.data(), b.size()));
    return h.substr(0, 8) + "-" + h.substr(8, 4) + "-" + h.substr(12, 4) + "-" + h.substr(16, 4) + "-" + h.substr(20);
}

InstanceRegistry::InstanceRegistry(std::filesystem::path state_dir) : state_dir_(std::move(state_dir)) {
    if (!state_dir_.empty()) std::filesystem::create_directories(state_dir_ / "instances");
}

void InstanceRegistry::add(const TestInstance& inst) {
    {
        std::unique_lock lock(mu_);
        by_host_[lower(inst.hostname)] = inst;
        host_of_uuid_[inst.uuid] = lower(inst.hostname);
    }
    if (!state_dir_.empty()) {
        auto path = state_dir_ / "instances" / (inst.uuid + ".json");
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp);
            out << inst.to_json().dump(2) << "\n";
        }
        std::filesystem::rename(tmp, path);
    }
}

std::optional<TestInstance> InstanceRegistry::load(std::string_view uuid) const {
    if (state_dir_.empty()) return std::nullopt;
    // UUIDs only: no path separators can reach the filesystem.
    if (uuid.size() != 36 || uuid.find_first_not_of("0123456789abcdef-") != std::string_view::npos) return std::nullopt;
    auto path = state_dir_ / "instances" / (std::string(uuid) + ".json");
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
        TestInstance inst = TestInstance::from_json(nlohmann::json::parse(in));
        std::unique_lock lock(mu_);
        by_host_[lower(inst.hostname)] = inst;
        host_of_uuid_[inst.uuid] = lower(inst.hostname);
        return inst;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::optional<TestInstance> InstanceRegistry::by_hostname(std::string_view host) const {
    const std::string h = lower(host);
    {
        std::shared_lock lock(mu_);
        if (auto it = by_host_.find(h); it != by_host_.end()) return it->second;
    }
    // "<letter>-<uuid>.<domain>"
    if (h.size() < 2 + 36 || h[1] != '-') return std::nullopt;
    auto inst = load(std::string_view(h).substr(2, 36));
    if (inst && lower(inst->hostname) == h) return inst;
    return std::nullopt;
}

std::optional<TestInstance> InstanceRegistry::by_uuid(std::string_view uuid) const {
    {
        std::shared_lock lock(mu_);
        if (auto it = host_of_uuid_.find(std::string(uuid)); it != host_of_uuid_.end())
            return by_host_.at(it->second);
    }
    return load(uuid);
}

std::vector<TestInstance> InstanceRegistry::list() const {
    if (!state_dir_.empty()) {
        std::error_code ec;
        for (const auto& e : std::filesystem::directory_iterator(state_dir_ / "instances", ec)) {
            if (e.path().extension() == ".json") by_uuid(e.path().stem().string());
        }
    }
    std::shared_lock lock(mu_);
    std::vector<TestInstance> out;
    for (const auto& [h, inst] : by_host_) out.push_back(inst);
    return out;
}

TestInstance new_instance(InstanceRegistry& registry, TestId test, TestParams params,
                          std::string base_domain, std::uint16_t port, std::optional<TimePoint> created_at) {
    params.validate();
    TestInstance inst;
    inst.test = test;
    inst.uuid = random_uuid();
    inst.base_domain = lower(base_domain);
    inst.hostname = make_hostname(test, inst.uuid, inst.base_domain);
    inst.port = port;
    inst.created_at = created_at.value_or(now_seconds());
    inst.params = params;
    registry.add(inst);
    return inst;
}

}  // namespace gauntlet
