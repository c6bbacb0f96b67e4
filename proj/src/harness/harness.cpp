#include "gauntlet/harness.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <condition_variable>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace gauntlet {
namespace {

constexpr std::size_t kKeptWarnings = 20;
const Vrp kBaselineVrp{IpPrefix::parse("192.0.2.0/24"), 24, 64500};
const Vrp kAttackVrp{IpPrefix::parse("10.0.0.0/8"), 24, 64496};

double unix_now() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string iso_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

std::string fmt(double v, int precision = 1) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string bytes_text(double b) {
    const char* units[] = {"B", "KiB", "MiB", "GiB", "TiB"};
    int u = 0;
    while (b >= 1024 && u < 4) {
        b /= 1024;
        ++u;
    }
    return fmt(b, u ? 1 : 0) + " " + units[u];
}

Violation parse_violation(std::string_view s) {
    for (int i = 0; i <= static_cast<int>(Violation::HintLimit); ++i)
        if (to_string(static_cast<Violation>(i)) == s) return static_cast<Violation>(i);
    throw std::invalid_argument("unknown violation " + std::string(s));
}

std::optional<double> budget_value(const nlohmann::json& budget, const char* key) {
    if (!budget.is_object() || !budget.contains(key) || budget[key].is_null()) return std::nullopt;
    return budget[key].get<double>();
}

struct ObsSummary {
    std::size_t fetches = 0;
    int max_depth = -1;
    int max_depth_early = -1;  // before the final third of the run
    std::size_t fetches_late = 0;
    std::size_t callbacks = 0;
    std::size_t redirect_fetches = 0;
    std::uint64_t payload_bytes = 0;
    double longest_held = 0;
    std::uint64_t held_bytes = 0;
};

ObsSummary summarize(const RunRecord& run, const std::vector<Observation>& obs) {
    ObsSummary s;
    const double late = run.started + (run.finished - run.started) * 2.0 / 3.0;
    for (const auto& o : obs) {
        switch (o.kind) {
            case Observation::Kind::Fetch:
                ++s.fetches;
                s.max_depth = std::max(s.max_depth, o.depth);
                if (o.timestamp < late) s.max_depth_early = std::max(s.max_depth_early, o.depth);
                else ++s.fetches_late;
                if (o.path.rfind("/redirect/", 0) == 0) ++s.redirect_fetches;
                break;
            case Observation::Kind::CallbackHit:
                ++s.callbacks;
                break;
            case Observation::Kind::BytesServed:
                if (o.path.find("payload.bin") != std::string::npos) s.payload_bytes += o.bytes;
                break;
            case Observation::Kind::ConnectionHeld:
                if (o.duration > s.longest_held) {
                    s.longest_held = o.duration;
                    s.held_bytes = o.bytes;
                }
                break;
        }
    }
    return s;
}

const ViolationRecord* find(const RunRecord& r, Violation v) {
    for (const auto& x : r.violations)
        if (x.kind == v) return &x;
    return nullptr;
}

std::string violation_text(const ViolationRecord& v) {
    return std::string(to_string(v.kind)) + " (" + std::string(limit_name(v.kind)) + ", measured " +
           fmt(v.measured, v.measured == static_cast<double>(static_cast<long long>(v.measured)) ? 0 : 2) + ")";
}

Verdict decide_mini(const RunRecord& r, const ObsSummary& s) {
    Verdict v;
    v.test = r.test;
    v.subject = r.subject;
    v.instance_uuid = r.instance_uuid;
    v.elapsed = r.finished - r.started;
    auto resistant = [&](std::string e) {
        v.status = VerdictStatus::Resistant;
        v.evidence.push_back(std::move(e));
        return v;
    };
    auto vulnerable = [&](std::string e) {
        v.status = VerdictStatus::Vulnerable;
        v.evidence.push_back(std::move(e));
        return v;
    };
    if (r.error) throw std::invalid_argument("a failed mini relying party run has no verdict: " + *r.error);
    const std::string at_cap = r.hit_cap ? " (stopped by the " + fmt(r.cap, 0) + " s cap)" : "";
    switch (r.test) {
        case TestId::A:
        case TestId::H: {
            const ViolationRecord* lim = find(r, Violation::DepthLimit);
            if (!lim) lim = find(r, Violation::RepoLimit);
            if (lim && !r.hit_cap)
                return resistant("traversal halted by " + violation_text(*lim) + " after " +
                                 std::to_string(r.repos_visited) + " repositories in " + fmt(v.elapsed) + " s");
            if (r.hit_cap && r.test == TestId::A && s.max_depth >= 20 && s.max_depth > s.max_depth_early)
                return vulnerable("FETCH depth >= 20 and increasing: " + std::to_string(s.max_depth_early) + " at 2/3 of the cap, " +
                                  std::to_string(s.max_depth) + " at the cap");
            if (r.hit_cap && s.fetches_late > 0)
                return vulnerable("FETCH count still rising at the cap: " + std::to_string(s.fetches) + " fetches, " +
                                  std::to_string(s.fetches_late) + " in the final third, " +
                                  std::to_string(r.repos_visited) + " repositories");
            return vulnerable("no depth or repository limit engaged; " + std::to_string(r.repos_visited) +
                              " repositories visited" + at_cap);
        }
        case TestId::B: {
            if (auto x = find(r, Violation::RateLimitExcessive); x && !r.hit_cap)
                return resistant("repository skipped: Retry-After " + fmt(x->measured, 0) + " s exceeds max_retry_after; waited " +
                                 fmt(r.longest_wait) + " s");
            return vulnerable("honoured Retry-After " + std::to_string(r.params.retry_after) + " s: waited " +
                              fmt(r.longest_wait) + " s" + at_cap);
        }
        case TestId::C: {
            if (auto x = find(r, Violation::RedirectLimit); x && !r.hit_cap)
                return resistant("RedirectLimit after " + fmt(x->measured, 0) + " hops");
            return vulnerable("followed " + std::to_string(r.redirects_followed) + " redirects without limit" + at_cap);
        }
        case TestId::D: {
            auto x = find(r, Violation::BombDetected);
            auto ratio = budget_value(r.budget, "max_decompress_ratio");
            bool bounded = ratio && static_cast<double>(r.bytes_decompressed) <=
                                        *ratio * static_cast<double>(std::max<std::uint64_t>(r.bytes_fetched, 1)) + 1;
            if (x && bounded && !r.hit_cap)
                return resistant("BombDetected at ratio " + fmt(x->measured) + "; " + bytes_text(r.bytes_decompressed) +
                                 " decompressed from " + bytes_text(r.bytes_fetched));
            return vulnerable("inflated " + bytes_text(r.bytes_decompressed) + " from " + bytes_text(r.bytes_fetched) +
                              " on the wire" + at_cap);
        }
        case TestId::L: {
            auto x = find(r, Violation::ObjectTooLarge);
            auto limit = budget_value(r.budget, "max_object_bytes");
            bool bounded = limit && static_cast<double>(r.bytes_fetched) <= 2 * *limit + (1 << 20);
            if (x && bounded && !r.hit_cap)
                return resistant("ObjectTooLarge: declared or received " + bytes_text(x->measured) + "; " +
                                 bytes_text(r.bytes_fetched) + " fetched in total");
            return vulnerable("accepted " + bytes_text(static_cast<double>(std::max(r.bytes_fetched, s.payload_bytes))) +
                              " of an unbounded payload" + at_cap);
        }
        case TestId::E: {
            auto x = find(r, Violation::StallDetected);
            double window = budget_value(r.budget, "stall_window").value_or(10);
            // The server may log the closed connection after the relying party returns.
            const double held = s.longest_held > 0 ? s.longest_held : v.elapsed;
            if (x && !r.hit_cap && held <= 2 * window + 1)
                return resistant("StallDetected at " + fmt(x->measured, 2) + " B/s; connection dropped after " +
                                 fmt(held) + " s");
            if (s.longest_held > 0) {
                double rate = static_cast<double>(s.held_bytes) / s.longest_held;
                return vulnerable("connection held " + fmt(s.longest_held) + " s at " + fmt(rate, 2) + " B/s" + at_cap);
            }
            return vulnerable("transfer still open after " + fmt(v.elapsed) + " s" + at_cap);
        }
        case TestId::F:
        case TestId::I: {
            if (!r.hit_cap && r.warning_count > 0 && r.baseline_vrp && r.attack_vrp) {
                std::string first;
                for (const auto& w : r.warnings)
                    if (w.find("roa-1") != std::string::npos || w.find("roa-2") != std::string::npos) {
                        first = w;
                        break;
                    }
                return resistant("warning and move on: " + (first.empty() ? r.warnings.front() : first) + "; " +
                                 std::to_string(r.vrp_count) + " VRPs still validated");
            }
            return vulnerable("malformed object disrupted validation: " + std::to_string(r.vrp_count) +
                              " VRPs, baseline " + (r.baseline_vrp ? "present" : "missing") + at_cap);
        }
        case TestId::G:
        case TestId::M: {
            auto x = find(r, Violation::XmlRejected);
            if (x && (r.test == TestId::G || s.callbacks == 0) && !r.hit_cap)
                return resistant(x->detail + (r.test == TestId::M ? "; 0 CALLBACK_HIT observations" : ""));
            if (r.test == TestId::M && s.callbacks > 0)
                return vulnerable(std::to_string(s.callbacks) + " CALLBACK_HIT observations");
            return vulnerable("entity document was not rejected" + at_cap);
        }
        case TestId::J:
        case TestId::K: {
            if (auto x = find(r, Violation::VrpBudgetExceeded); x && !r.hit_cap)
                return resistant("VRP cap tripped at " + fmt(x->measured, 0) + " VRPs");
            return vulnerable("accepted " + std::to_string(r.vrp_count) + " VRPs from one CA without a cap" + at_cap);
        }
        case TestId::N: {
            if (auto x = find(r, Violation::PathTooLong); x && !r.hit_cap)
                return resistant("PathTooLong: publish URI of " + bytes_text(x->measured) + " rejected");
            return vulnerable("accepted a publish URI of " + bytes_text(static_cast<double>(r.largest_uri)) + at_cap);
        }
        case TestId::O: {
            auto x = find(r, Violation::PathTraversal);
            if (x && r.escaped_files.empty() && !r.hit_cap)
                return resistant("PathTraversal: " + x->detail.substr(0, 160) + "; no file written outside the cache");
            if (!r.escaped_files.empty()) return vulnerable("wrote outside the cache: " + r.escaped_files.front());
            return vulnerable("traversal URI accepted" + at_cap);
        }
    }
    return v;
}

Verdict decide_external(const RunRecord& r, const ObsSummary& s) {
    Verdict v;
    v.test = r.test;
    v.subject = r.subject;
    v.instance_uuid = r.instance_uuid;
    v.elapsed = r.finished - r.started;
    auto set = [&](VerdictStatus st, std::string e) {
        v.status = st;
        v.evidence.push_back(std::move(e));
        return v;
    };
    const bool exited = !r.hit_cap;
    if (r.exit_signal && *r.exit_signal != SIGKILL)
        return set(VerdictStatus::Vulnerable, "process died with signal " + std::to_string(*r.exit_signal));
    switch (r.test) {
        case TestId::A:
            if (s.max_depth >= 20 && s.max_depth > s.max_depth_early)
                return set(VerdictStatus::Vulnerable, "FETCH depth >= 20 and increasing (" + std::to_string(s.max_depth) + ")");
            if (exited) return set(VerdictStatus::Resistant, "stopped at FETCH depth " + std::to_string(s.max_depth));
            break;
        case TestId::H:
            if (r.hit_cap && s.fetches_late > 0)
                return set(VerdictStatus::Vulnerable, "FETCH count still rising at the cap (" + std::to_string(s.fetches) + ")");
            if (exited) return set(VerdictStatus::Resistant, "stopped after " + std::to_string(s.fetches) + " fetches");
            break;
        case TestId::C:
            if (s.redirect_fetches > 10)
                return set(VerdictStatus::Vulnerable, "followed " + std::to_string(s.redirect_fetches) + " redirects");
            if (exited) return set(VerdictStatus::Resistant, "followed " + std::to_string(s.redirect_fetches) + " redirects");
            break;
        case TestId::E:
            if (s.longest_held > 20) return set(VerdictStatus::Vulnerable, "connection held " + fmt(s.longest_held) + " s");
            if (s.longest_held > 0) return set(VerdictStatus::Resistant, "connection dropped after " + fmt(s.longest_held) + " s");
            break;
        case TestId::L:
            if (s.payload_bytes > (1ull << 30))
                return set(VerdictStatus::Vulnerable, "downloaded " + bytes_text(static_cast<double>(s.payload_bytes)));
            if (exited && s.payload_bytes < (64ull << 20))
                return set(VerdictStatus::Resistant, "downloaded " + bytes_text(static_cast<double>(s.payload_bytes)));
            break;
        case TestId::M:
            if (s.callbacks > 0)
                return set(VerdictStatus::Vulnerable, std::to_string(s.callbacks) + " CALLBACK_HIT observations");
            break;
        case TestId::B:
            if (exited) return set(VerdictStatus::Resistant, "exited after " + fmt(v.elapsed) + " s without waiting out Retry-After");
            break;
        default:
            break;
    }
    return set(VerdictStatus::Inconclusive, "no server-side signal decides this test (" + std::to_string(s.fetches) +
                                                " fetches" + (r.hit_cap ? ", stopped at the cap)" : ")"));
}

bool server_reachable(const std::string& address, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return false;
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    bool ok = ::inet_pton(AF_INET, address.c_str(), &sa.sin_addr) == 1 &&
              ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0;
    ::close(fd);
    return ok;
}

void replace_all(std::string& s, std::string_view from, const std::string& to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
}

}  // namespace

std::string_view to_string(Profile p) { return p == Profile::Defended ? "defended" : "undefended"; }

Profile parse_profile(std::string_view s) {
    if (s == "defended") return Profile::Defended;
    if (s == "undefended") return Profile::Undefended;
    throw std::invalid_argument("profile must be defended or undefended");
}

ResourceBudget budget_for(Profile p) {
    ResourceBudget b = p == Profile::Defended ? ResourceBudget::defaults() : ResourceBudget::unlimited();
    if (p == Profile::Defended) {
        b.max_repos = 200;
        b.max_vrps = 5000;
    }
    b.accept_fast_keys = true;
    return b;
}

TestParams suite_params(TestId t) { return TestParams::defaults(t); }

double default_cap_for(TestId t) {
    switch (t) {
        case TestId::A:
        case TestId::B:
        case TestId::C: return 10;
        case TestId::E: return 25;
        case TestId::H:
        case TestId::J:
        case TestId::K: return 60;
        default: return 30;
    }
}

std::string Subject::name() const {
    if (kind == Kind::MiniRp) return "mini-rp(" + std::string(to_string(profile)) + ")";
    return "external(" + label + ")";
}

nlohmann::json Subject::to_json() const {
    return {{"kind", kind == Kind::MiniRp ? "mini-rp" : "external"},
            {"profile", to_string(profile)},
            {"label", label},
            {"command", command}};
}

Subject Subject::from_json(const nlohmann::json& j) {
    Subject s;
    s.kind = j.at("kind") == "mini-rp" ? Kind::MiniRp : Kind::External;
    s.profile = parse_profile(j.at("profile").get<std::string>());
    s.label = j.value("label", "");
    s.command = j.value("command", "");
    return s;
}

std::string_view to_string(VerdictStatus s) {
    switch (s) {
        case VerdictStatus::Vulnerable: return "VULNERABLE";
        case VerdictStatus::Resistant: return "RESISTANT";
        case VerdictStatus::Inconclusive: return "INCONCLUSIVE";
    }
    return "?";
}

nlohmann::json Verdict::to_json() const {
    return {{"test", std::string(1, letter(test))},
            {"subject", subject.to_json()},
            {"status", to_string(status)},
            {"evidence", evidence},
            {"instance", instance_uuid},
            {"elapsed", elapsed}};
}

Verdict Verdict::from_json(const nlohmann::json& j) {
    Verdict v;
    v.test = parse_test_id(j.at("test").get<std::string>());
    v.subject = Subject::from_json(j.at("subject"));
    std::string st = j.at("status").get<std::string>();
    v.status = st == "VULNERABLE" ? VerdictStatus::Vulnerable
               : st == "RESISTANT" ? VerdictStatus::Resistant
                                   : VerdictStatus::Inconclusive;
    v.evidence = j.at("evidence").get<std::vector<std::string>>();
    v.instance_uuid = j.value("instance", "");
    v.elapsed = j.value("elapsed", 0.0);
    return v;
}

nlohmann::json RunRecord::to_json() const {
    nlohmann::json vs = nlohmann::json::array();
    for (const auto& v : violations)
        vs.push_back({{"kind", to_string(v.kind)}, {"measured", v.measured}, {"uri", v.uri}, {"detail", v.detail}});
    nlohmann::json j = {
        {"test", std::string(1, letter(test))},
        {"subject", subject.to_json()},
        {"instance", instance_uuid},
        {"hostname", hostname},
        {"params", params.to_json()},
        {"budget", budget},
        {"cap", cap},
        {"started", started},
        {"finished", finished},
        {"hit_cap", hit_cap},
        {"violations", vs},
        {"warnings", warnings},
        {"warning_count", warning_count},
        {"vrp_count", vrp_count},
        {"repos_visited", repos_visited},
        {"max_depth_reached", max_depth_reached},
        {"bytes_fetched", bytes_fetched},
        {"bytes_decompressed", bytes_decompressed},
        {"redirects_followed", redirects_followed},
        {"longest_wait", longest_wait},
        {"largest_uri", largest_uri},
        {"baseline_vrp", baseline_vrp},
        {"attack_vrp", attack_vrp},
        {"escaped_files", escaped_files},
    };
    j["error"] = error ? nlohmann::json(*error) : nlohmann::json(nullptr);
    j["exit_status"] = exit_status ? nlohmann::json(*exit_status) : nlohmann::json(nullptr);
    j["exit_signal"] = exit_signal ? nlohmann::json(*exit_signal) : nlohmann::json(nullptr);
    return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    r.test = parse_test_id(j.at("test").get<std::string>());
    r.subject = Subject::from_json(j.at("subject"));
    r.instance_uuid = j.at("instance").get<std::string>();
    r.hostname = j.value("hostname", "");
    r.params = TestParams::from_json(j.at("params"));
    r.budget = j.value("budget", nlohmann::json());
    r.cap = j.at("cap").get<double>();
    r.started = j.at("started").get<double>();
    r.finished = j.at("finished").get<double>();
    r.hit_cap = j.at("hit_cap").get<bool>();
    for (const auto& v : j.at("violations"))
        r.violations.push_back({parse_violation(v.at("kind").get<std::string>()), v.at("measured").get<double>(),
                                v.value("uri", ""), v.value("detail", "")});
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.warning_count = j.at("warning_count").get<std::size_t>();
    r.vrp_count = j.at("vrp_count").get<std::uint64_t>();
    r.repos_visited = j.at("repos_visited").get<std::uint64_t>();
    r.max_depth_reached = j.at("max_depth_reached").get<unsigned>();
    r.bytes_fetched = j.at("bytes_fetched").get<std::uint64_t>();
    r.bytes_decompressed = j.at("bytes_decompressed").get<std::uint64_t>();
    r.redirects_followed = j.at("redirects_followed").get<std::uint64_t>();
    r.longest_wait = j.at("longest_wait").get<double>();
    r.largest_uri = j.at("largest_uri").get<std::uint64_t>();
    r.baseline_vrp = j.at("baseline_vrp").get<bool>();
    r.attack_vrp = j.at("attack_vrp").get<bool>();
    r.escaped_files = j.at("escaped_files").get<std::vector<std::string>>();
    if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
    if (!j.at("exit_status").is_null()) r.exit_status = j.at("exit_status").get<int>();
    if (!j.at("exit_signal").is_null()) r.exit_signal = j.at("exit_signal").get<int>();
    return r;
}

Verdict decide(const RunRecord& run, const std::vector<Observation>& observations) {
    ObsSummary s = summarize(run, observations);
    return run.subject.kind == Subject::Kind::MiniRp ? decide_mini(run, s) : decide_external(run, s);
}

nlohmann::json Report::to_json() const {
    nlohmann::json vs = nlohmann::json::array(), rs = nlohmann::json::array();
    for (const auto& v : verdicts) vs.push_back(v.to_json());
    for (const auto& r : runs) rs.push_back(r.to_json());
    return {{"version", version}, {"started", started}, {"finished", finished},
            {"parameters", parameters}, {"verdicts", vs}, {"runs", rs}};
}

Report Report::from_json(const nlohmann::json& j) {
    Report r;
    r.version = j.at("version").get<std::string>();
    r.started = j.value("started", "");
    r.finished = j.value("finished", "");
    r.parameters = j.value("parameters", nlohmann::json::object());
    for (const auto& v : j.at("verdicts")) r.verdicts.push_back(Verdict::from_json(v));
    for (const auto& x : j.value("runs", nlohmann::json::array())) r.runs.push_back(RunRecord::from_json(x));
    return r;
}

void Report::check_complete() const {
    std::vector<std::string> subjects;
    for (const auto& v : verdicts)
        if (std::find(subjects.begin(), subjects.end(), v.subject.name()) == subjects.end())
            subjects.push_back(v.subject.name());
    for (const auto& s : subjects)
        for (TestId t : all_tests()) {
            bool found = std::any_of(verdicts.begin(), verdicts.end(),
                                     [&](const Verdict& v) { return v.test == t && v.subject.name() == s; });
            if (!found) throw std::logic_error("report has no verdict for test " + std::string(1, letter(t)) + " / " + s);
        }
}

std::string Report::text() const {
    std::vector<std::string> subjects;
    for (const auto& v : verdicts)
        if (std::find(subjects.begin(), subjects.end(), v.subject.name()) == subjects.end())
            subjects.push_back(v.subject.name());
    std::size_t width = 8;
    for (const auto& s : subjects) width = std::max(width, s.size());
    std::ostringstream os;
    os << version << "  " << started << " .. " << finished << "\n\n";
    os << std::left << std::setw(static_cast<int>(width)) << "Test";
    for (TestId t : all_tests()) os << "  " << letter(t);
    os << "\n";
    for (const auto& s : subjects) {
        os << std::left << std::setw(static_cast<int>(width)) << s;
        for (TestId t : all_tests()) {
            std::string mark = " ";
            for (const auto& v : verdicts)
                if (v.test == t && v.subject.name() == s)
                    mark = v.status == VerdictStatus::Vulnerable ? "x" : v.status == VerdictStatus::Resistant ? "." : "?";
            os << "  " << mark;
        }
        os << "\n";
    }
    os << "\nx vulnerable   . resistant   ? inconclusive\n\n";
    for (const auto& v : verdicts) {
        os << "[" << letter(v.test) << "] " << v.subject.name() << " " << to_string(v.status) << " (" << fmt(v.elapsed)
           << " s)";
        for (const auto& e : v.evidence) os << "\n      " << e;
        os << "\n";
    }
    return os.str();
}

Report recompute(const Report& report,
                 const std::function<std::vector<Observation>(const std::string&)>& observations) {
    Report out = report;
    out.verdicts.clear();
    for (const auto& r : report.runs) out.verdicts.push_back(decide(r, observations(r.instance_uuid)));
    return out;
}

Harness::Harness(InstanceRegistry& registry, HarnessConfig config, ObservationSource observations)
    : registry_(registry), config_(std::move(config)), observations_(std::move(observations)) {
    if (config_.work_dir.empty()) config_.work_dir = std::filesystem::temp_directory_path() / "gauntlet-work";
    std::filesystem::create_directories(config_.work_dir);
}

void Harness::check_server() const {
    if (!server_reachable(config_.connect_address, config_.port))
        throw ServerUnavailable("no testbed server at " + config_.connect_address + ":" + std::to_string(config_.port));
}

Verdict Harness::run_test(TestId test, const Subject& subject, std::optional<TestParams> params,
                          std::optional<ResourceBudget> budget) {
    if (subject.kind == Subject::Kind::External && (subject.label.empty() || subject.command.empty()))
        throw std::invalid_argument("an external subject needs a label and a command");
    check_server();
    TestParams p = params.value_or(suite_params(test));
    p.fast_keys = p.fast_keys || config_.fast_keys;
    TestInstance inst = new_instance(registry_, test, p, config_.base_domain, config_.port);
    double cap = config_.caps.count(test) ? config_.caps.at(test) : default_cap_for(test);
    RunRecord record = subject.kind == Subject::Kind::MiniRp
                           ? run_mini_rp(inst, subject, budget.value_or(budget_for(subject.profile)), cap)
                           : run_external(inst, subject, cap);
    if (record.error) {
        std::string why = "test " + std::string(1, letter(test)) + " did not run: " + *record.error;
        runs_.push_back(std::move(record));
        throw RunFailed(why);
    }
    Verdict v = decide(record, observations_(inst.uuid));
    runs_.push_back(std::move(record));
    if (config_.on_verdict) config_.on_verdict(v);
    return v;
}

RunRecord Harness::run_mini_rp(const TestInstance& inst, const Subject& subject, const ResourceBudget& budget,
                               double cap) {
    RunRecord r;
    r.test = inst.test;
    r.subject = subject;
    r.instance_uuid = inst.uuid;
    r.hostname = inst.hostname;
    r.params = inst.params;
    r.budget = budget.to_json();
    r.cap = cap;

    const auto jail = config_.work_dir / inst.uuid / "jail";
    const auto cache = jail / "cache";
    std::filesystem::create_directories(cache);

    CancelToken token;
    RpOptions options;
    options.connect_address = config_.connect_address;
    options.default_https_port = config_.port;
    options.cache_dir = cache;
    options.cache_jail = jail;
    options.cancel = &token;

    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    std::optional<ValidationOutcome> outcome;
    std::optional<std::string> error;
    const Tal tal = parse_tal(inst.tal_text());

    r.started = unix_now();
    std::thread worker([&] {
        try {
            outcome = validate(tal, budget, options);
        } catch (const std::exception& e) {
            error = e.what();
        }
        std::lock_guard lock(mu);
        done = true;
        cv.notify_all();
    });
    {
        std::unique_lock lock(mu);
        if (!cv.wait_for(lock, std::chrono::duration<double>(cap), [&] { return done; })) {
            r.hit_cap = true;
            lock.unlock();
            token.cancel();
        }
    }
    worker.join();
    r.finished = unix_now();

    if (error) {
        r.error = error;
        return r;
    }
    const ValidationOutcome& o = *outcome;
    r.violations = o.violations;
    r.warning_count = o.warnings.size();
    for (std::size_t i = 0; i < o.warnings.size() && i < kKeptWarnings; ++i) r.warnings.push_back(o.warnings[i]);
    r.vrp_count = o.vrps.size();
    r.repos_visited = o.repos_visited;
    r.max_depth_reached = o.max_depth_reached;
    r.bytes_fetched = o.bytes_fetched;
    r.bytes_decompressed = o.bytes_decompressed;
    r.redirects_followed = o.redirects_followed;
    r.longest_wait = o.longest_wait;
    r.largest_uri = o.largest_uri;
    r.baseline_vrp = std::binary_search(o.vrps.begin(), o.vrps.end(), kBaselineVrp);
    r.attack_vrp = std::binary_search(o.vrps.begin(), o.vrps.end(), kAttackVrp);
    const auto cache_root = std::filesystem::weakly_canonical(cache).string() + "/";
    for (const auto& f : o.files_written)
        if (f.rfind(cache_root, 0) != 0) r.escaped_files.push_back(f);
    // Whatever landed inside the jail but outside the cache also counts.
    std::error_code ec;
    for (auto it = std::filesystem::recursive_directory_iterator(jail, ec);
         !ec && it != std::filesystem::recursive_directory_iterator(); it.increment(ec)) {
        if (!it->is_regular_file()) continue;
        auto p = std::filesystem::weakly_canonical(it->path()).string();
        if (p.rfind(cache_root, 0) != 0 &&
            std::find(r.escaped_files.begin(), r.escaped_files.end(), p) == r.escaped_files.end())
            r.escaped_files.push_back(p);
    }
    return r;
}

RunRecord Harness::run_external(const TestInstance& inst, const Subject& subject, double cap) {
    RunRecord r;
    r.test = inst.test;
    r.subject = subject;
    r.instance_uuid = inst.uuid;
    r.hostname = inst.hostname;
    r.params = inst.params;
    r.cap = cap;

    const auto dir = config_.work_dir / inst.uuid;
    std::filesystem::create_directories(dir);
    const auto tal_path = dir / "root.tal";
    std::ofstream(tal_path) << inst.tal_text();
    std::string cmd = subject.command;
    replace_all(cmd, "{tal}", tal_path.string());
    replace_all(cmd, "{host}", inst.hostname);
    replace_all(cmd, "{port}", std::to_string(config_.port));

    r.started = unix_now();
    pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        ::setpgid(0, 0);
        ::execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    int status = 0;
    auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(cap);
    for (;;) {
        pid_t w = ::waitpid(pid, &status, WNOHANG);
        if (w == pid) break;
        if (std::chrono::steady_clock::now() >= deadline) {
            r.hit_cap = true;
            ::kill(-pid, SIGKILL);
            ::waitpid(pid, &status, 0);
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    r.finished = unix_now();
    if (WIFEXITED(status)) r.exit_status = WEXITSTATUS(status);
    if (WIFSIGNALED(status)) r.exit_signal = WTERMSIG(status);
    return r;
}

Report Harness::run_suite(const Subject& subject) {
    if (subject.kind == Subject::Kind::External && (subject.label.empty() || subject.command.empty()))
        throw std::invalid_argument("an external subject needs a label and a command");
    Report report;
    report.started = iso_now();
    std::size_t first = runs_.size();
    nlohmann::json params = nlohmann::json::object();
    for (TestId t : all_tests()) {
        report.verdicts.push_back(run_test(t, subject));
        params[std::string(1, letter(t))] = runs_.back().params.to_json();
    }
    report.runs.assign(runs_.begin() + static_cast<std::ptrdiff_t>(first), runs_.end());
    report.parameters = {{"tests", params},
                         {"subject", subject.to_json()},
                         {"budget", subject.kind == Subject::Kind::MiniRp ? budget_for(subject.profile).to_json()
                                                                          : nlohmann::json(nullptr)}};
    report.finished = iso_now();
    return report;
}

}  // namespace gauntlet
