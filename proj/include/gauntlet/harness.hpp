// Test orchestration: mints fresh instances, runs a subject against them,
// turns outcomes and server observations into verdicts, and assembles the
// suite report.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gauntlet/rp.hpp"
#include "gauntlet/scenario.hpp"
#include "gauntlet/server.hpp"

namespace gauntlet {

inline constexpr std::string_view kTestbedVersion = "gauntlet 1.0.0";

enum class Profile { Defended, Undefended };
std::string_view to_string(Profile p);
Profile parse_profile(std::string_view s);

// Budget the mini relying party runs with under each profile.
ResourceBudget budget_for(Profile p);

// Desk-scale parameters used by the suite.
TestParams suite_params(TestId t);

struct Subject {
    enum class Kind { MiniRp, External };
    Kind kind = Kind::MiniRp;
    Profile profile = Profile::Defended;
    std::string label;    // External: display name
    std::string command;  // External: shell command, "{tal}" replaced by the TAL path

    static Subject mini_rp(Profile p) { return {Kind::MiniRp, p, {}, {}}; }
    static Subject external(std::string label, std::string command) {
        return {Kind::External, Profile::Defended, std::move(label), std::move(command)};
    }
    std::string name() const;
    nlohmann::json to_json() const;
    static Subject from_json(const nlohmann::json& j);
};

enum class VerdictStatus { Vulnerable, Resistant, Inconclusive };
std::string_view to_string(VerdictStatus s);

struct Verdict {
    TestId test = TestId::A;
    Subject subject;
    VerdictStatus status = VerdictStatus::Inconclusive;
    std::vector<std::string> evidence;
    std::string instance_uuid;
    double elapsed = 0;

    nlohmann::json to_json() const;
    static Verdict from_json(const nlohmann::json& j);
};

// Everything a verdict is derived from, apart from the observation log.
struct RunRecord {
    TestId test = TestId::A;
    Subject subject;
    std::string instance_uuid;
    std::string hostname;
    TestParams params;
    nlohmann::json budget;
    double cap = 0;          // wall-clock cap, seconds
    double started = 0;      // Unix seconds
    double finished = 0;
    bool hit_cap = false;    // the subject was stopped by the cap

    // Mini relying party.
    std::optional<std::string> error;  // operational failure (TAL unreachable, ...)
    std::vector<ViolationRecord> violations;
    std::vector<std::string> warnings;  // first few only
    std::size_t warning_count = 0;
    std::uint64_t vrp_count = 0;
    std::uint64_t repos_visited = 0;
    unsigned max_depth_reached = 0;
    std::uint64_t bytes_fetched = 0;
    std::uint64_t bytes_decompressed = 0;
    std::uint64_t redirects_followed = 0;
    double longest_wait = 0;
    std::uint64_t largest_uri = 0;
    bool baseline_vrp = false;  // the benign sibling ROA survived
    bool attack_vrp = false;    // the attacked CA's own well-formed ROA survived
    std::vector<std::string> escaped_files;  // written outside the cache directory

    // External subject.
    std::optional<int> exit_status;
    std::optional<int> exit_signal;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

// Pure decision rules per test letter. Throws std::invalid_argument for a
// mini relying party run that ended in an operational error.
Verdict decide(const RunRecord& run, const std::vector<Observation>& observations);

struct Report {
    std::string version = std::string(kTestbedVersion);
    std::string started;   // ISO 8601 UTC
    std::string finished;
    std::vector<Verdict> verdicts;
    std::vector<RunRecord> runs;
    nlohmann::json parameters;

    nlohmann::json to_json() const;
    static Report from_json(const nlohmann::json& j);
    // One row per subject, one column per test, then the evidence.
    std::string text() const;
    // Throws std::logic_error when a (test, subject) cell is missing.
    void check_complete() const;
};

// Rebuilds every verdict from the persisted run records and observations.
Report recompute(const Report& report, const std::function<std::vector<Observation>(const std::string&)>& observations);

class ServerUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The mini relying party could not run at all (TAL unreachable, ...).
class RunFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct HarnessConfig {
    std::string connect_address = "127.0.0.1";
    std::uint16_t port = 0;
    std::string base_domain = "example.org";
    std::filesystem::path work_dir;
    std::map<TestId, double> caps;  // overrides of default_cap
    double default_cap = 20;
    bool fast_keys = true;
    std::function<void(const Verdict&)> on_verdict;
};

double default_cap_for(TestId t);

class Harness {
public:
    using ObservationSource = std::function<std::vector<Observation>(const std::string& uuid)>;

    Harness(InstanceRegistry& registry, HarnessConfig config, ObservationSource observations);

    // Mints a fresh instance and runs the subject against it.
    Verdict run_test(TestId test, const Subject& subject, std::optional<TestParams> params = std::nullopt,
                     std::optional<ResourceBudget> budget = std::nullopt);
    // All fifteen tests with fresh instances.
    Report run_suite(const Subject& subject);

    const std::vector<RunRecord>& runs() const { return runs_; }

private:
    RunRecord run_mini_rp(const TestInstance& inst, const Subject& subject, const ResourceBudget& budget, double cap);
    RunRecord run_external(const TestInstance& inst, const Subject& subject, double cap);
    void check_server() const;

    InstanceRegistry& registry_;
    HarnessConfig config_;
    ObservationSource observations_;
    std::vector<RunRecord> runs_;
};

}  // namespace gauntlet
