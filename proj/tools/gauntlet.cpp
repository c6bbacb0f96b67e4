// gauntlet: operator CLI for the RPKI relying-party testbed.

#include <csignal>
#include <ctime>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "gauntlet/harness.hpp"
#include "gauntlet/rsync.hpp"

namespace fs = std::filesystem;
using namespace gauntlet;

namespace {

std::atomic<bool> interrupted{false};

void on_signal(int) { interrupted = true; }

std::pair<std::string, std::uint16_t> split_listen(const std::string& s) {
    auto colon = s.rfind(':');
    if (colon == std::string::npos) return {s, 0};
    return {s.substr(0, colon), static_cast<std::uint16_t>(std::stoul(s.substr(colon + 1)))};
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Common {
    std::string state_dir = "gauntlet-state";
    std::string domain = "example.org";
    fs::path obs_dir() const { return fs::path(state_dir) / "obs"; }
};

// Either an in-process attack server or a reference to one started by
// `gauntlet serve`.
struct Bed {
    InstanceRegistry registry;
    ScenarioEngine engine{512};
    std::unique_ptr<AttackServer> server;
    std::string address = "127.0.0.1";
    std::uint16_t port = 0;
    fs::path obs_dir;

    Bed(const Common& c, const std::string& remote) : registry(fs::path(c.state_dir) / "state"), obs_dir(c.obs_dir()) {
        if (!remote.empty()) {
            std::tie(address, port) = split_listen(remote);
            if (!port) throw std::invalid_argument("--server needs host:port");
            return;
        }
        ServerConfig sc;
        sc.base_domain = c.domain;
        sc.obs_dir = obs_dir;
        server = std::make_unique<AttackServer>(sc, registry, engine);
        server->start();
        port = server->port();
    }
    ~Bed() {
        if (server) server->stop();
    }

    std::vector<Observation> observations(const std::string& uuid) const {
        return server ? server->log().snapshot(uuid) : read_observations(obs_dir, uuid);
    }
};

HarnessConfig harness_config(const Common& c, const Bed& bed, double cap, bool quiet) {
    HarnessConfig hc;
    hc.connect_address = bed.address;
    hc.port = bed.port;
    hc.base_domain = c.domain;
    hc.work_dir = fs::path(c.state_dir) / "work";
    if (cap > 0)
        for (TestId t : all_tests()) hc.caps[t] = cap;
    if (!quiet)
        hc.on_verdict = [](const Verdict& v) {
            std::cerr << "[" << letter(v.test) << "] " << to_string(v.status) << "  "
                      << (v.evidence.empty() ? "" : v.evidence.front()) << "\n";
        };
    return hc;
}

Subject make_subject(const std::string& profile, const std::string& label, const std::string& command) {
    if (!label.empty() || !command.empty()) return Subject::external(label, command);
    return Subject::mini_rp(parse_profile(profile));
}

void save_report(const Report& r, const fs::path& out) {
    write_file(out, r.to_json().dump(2) + "\n");
    fs::path txt = out;
    txt.replace_extension(".txt");
    write_file(txt, r.text());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RPKI relying-party resource-exhaustion testbed"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--state-dir", common.state_dir, "Directory for instances, observations and reports");
    app.add_option("--domain", common.domain, "Base domain of test hostnames");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the attack server");
    std::string listen = "127.0.0.1:8443";
    std::string tls_cert, tls_key, serve_obs;
    serve->add_option("--listen", listen, "host:port");
    serve->add_option("--tls-cert", tls_cert, "PEM certificate (default: self-signed)");
    serve->add_option("--tls-key", tls_key, "PEM private key");
    serve->add_option("--obs-dir", serve_obs, "Observation log directory");

    // new-instance
    auto* mint = app.add_subcommand("new-instance", "Mint a test instance for an external relying party");
    std::string mint_test;
    std::vector<std::string> mint_params;
    std::uint16_t mint_port = 8443;
    bool mint_control = false;
    mint->add_option("test", mint_test, "Test letter A..O")->required();
    mint->add_option("--param", mint_params, "key=value parameter override");
    mint->add_option("--port", mint_port, "HTTPS port the server listens on");
    mint->add_flag("--control", mint_control, "Benign tree of the same shape");

    // run / suite
    std::string profile = "defended", ext_label, ext_command, remote, out_path;
    double cap = 0;
    auto add_subject = [&](CLI::App* sub) {
        sub->add_option("--profile", profile, "defended|undefended")->check(CLI::IsMember({"defended", "undefended"}));
        sub->add_option("--external", ext_label, "Label of an external relying party");
        sub->add_option("--command", ext_command, "External command; {tal} is replaced by the TAL path");
        sub->add_option("--server", remote, "host:port of a running `gauntlet serve` (default: in-process)");
        sub->add_option("--cap", cap, "Wall-clock cap per test in seconds");
        sub->add_option("--out", out_path, "Report file (JSON; a .txt matrix is written alongside)");
    };
    auto* run = app.add_subcommand("run", "Run one test");
    std::string run_test;
    run->add_option("--test", run_test, "Test letter A..O")->required();
    add_subject(run);
    auto* suite = app.add_subcommand("suite", "Run all fifteen tests");
    add_subject(suite);

    // report
    auto* report = app.add_subcommand("report", "Print a saved report");
    std::string report_in, format = "text";
    bool recompute_flag = false;
    report->add_option("--in", report_in, "Report JSON (default: <state-dir>/report.json)");
    report->add_option("--format", format)->check(CLI::IsMember({"text", "json"}));
    report->add_flag("--recompute", recompute_flag, "Rebuild verdicts from persisted observations");

    // observe
    auto* observe = app.add_subcommand("observe", "Print or follow an instance's observation log");
    std::string observe_uuid;
    bool follow = false;
    observe->add_option("uuid", observe_uuid, "Instance UUID")->required();
    observe->add_flag("-f,--follow", follow, "Keep printing new records");

    // rp
    auto* rp = app.add_subcommand("rp", "Run the mini relying party against a TAL");
    std::string rp_tal, rp_config, rp_csv, rp_outcome, rp_connect, rp_cache;
    std::vector<std::string> rp_set;
    std::uint16_t rp_port = 443;
    bool rp_unlimited = false;
    rp->add_option("tal", rp_tal, "TAL file")->required()->check(CLI::ExistingFile);
    rp->add_option("--config", rp_config, "Budget file of key=value lines")->check(CLI::ExistingFile);
    rp->add_option("--set", rp_set, "Budget override key=value");
    rp->add_flag("--unlimited", rp_unlimited, "Start from a budget with every limit disabled");
    rp->add_option("--csv", rp_csv, "Write VRPs as CSV here (default: stdout)");
    rp->add_option("--outcome", rp_outcome, "Write the outcome record as JSON here");
    rp->add_option("--connect", rp_connect, "Connect to this address for every hostname");
    rp->add_option("--port", rp_port, "HTTPS port for URIs without one");
    rp->add_option("--cache", rp_cache, "Write retrieved objects below this directory");

    // materialize
    auto* mat = app.add_subcommand("materialize", "Write instances as rsync module trees");
    std::vector<std::string> mat_uuids;
    std::string mat_root = "rsync-root";
    unsigned mat_depth = 8;
    mat->add_option("uuid", mat_uuids, "Instance UUIDs")->required();
    mat->add_option("--root", mat_root, "Output directory");
    mat->add_option("--depth-cap", mat_depth, "Deepest node written");

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path state = fs::path(common.state_dir) / "state";

        if (*serve) {
            InstanceRegistry registry(state);
            ScenarioEngine engine(512);
            ServerConfig sc;
            std::tie(sc.listen_host, sc.port) = split_listen(listen);
            sc.base_domain = common.domain;
            sc.tls_cert = tls_cert;
            sc.tls_key = tls_key;
            sc.obs_dir = serve_obs.empty() ? common.obs_dir() : fs::path(serve_obs);
            AttackServer server(sc, registry, engine);
            server.start();
            std::cerr << "listening on " << sc.listen_host << ":" << server.port() << " for *." << common.domain << "\n";
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            while (!interrupted && server.running()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
            server.stop();
            return 0;
        }

        if (*mint) {
            InstanceRegistry registry(state);
            TestId t = parse_test_id(mint_test);
            TestParams p = mint_control ? TestParams::control_profile(t) : TestParams::defaults(t);
            for (const auto& kv : mint_params) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("--param expects key=value");
                p.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            p.validate();
            TestInstance inst = new_instance(registry, t, p, common.domain, mint_port);
            fs::path tal = fs::path(common.state_dir) / "tals" / (inst.uuid + ".tal");
            write_file(tal, inst.tal_text());
            std::cout << inst.hostname << "\n" << fs::absolute(tal).string() << "\n";
            return 0;
        }

        if (*run || *suite) {
            Subject subject = make_subject(profile, ext_label, ext_command);
            Bed bed(common, remote);
            Harness harness(bed.registry, harness_config(common, bed, cap, false),
                            [&](const std::string& uuid) { return bed.observations(uuid); });
            Report r;
            if (*run) {
                r.started = utc_now();
                r.verdicts.push_back(harness.run_test(parse_test_id(run_test), subject));
                r.runs = harness.runs();
                r.finished = utc_now();
            } else {
                r = harness.run_suite(subject);
            }
            fs::path out = out_path.empty() ? fs::path(common.state_dir) / (*run ? "run.json" : "report.json")
                                             : fs::path(out_path);
            save_report(r, out);
            std::cout << r.text();
            return 0;
        }

        if (*report) {
            fs::path in = report_in.empty() ? fs::path(common.state_dir) / "report.json" : fs::path(report_in);
            Report r = Report::from_json(nlohmann::json::parse(read_file(in)));
            if (recompute_flag) {
                fs::path obs = common.obs_dir();
                r = recompute(r, [&](const std::string& uuid) { return read_observations(obs, uuid); });
            }
            std::cout << (format == "json" ? r.to_json().dump(2) + "\n" : r.text());
            return 0;
        }

        if (*observe) {
            InstanceRegistry registry(state);
            if (!registry.by_uuid(observe_uuid)) throw UnknownInstance("unknown instance " + observe_uuid);
            std::size_t shown = 0;
            std::signal(SIGINT, on_signal);
            do {
                auto records = read_observations(common.obs_dir(), observe_uuid);
                for (; shown < records.size(); ++shown) std::cout << records[shown].to_json().dump() << "\n";
                std::cout.flush();
                if (follow) std::this_thread::sleep_for(std::chrono::milliseconds(500));
            } while (follow && !interrupted);
            return 0;
        }

        if (*rp) {
            ResourceBudget budget = rp_unlimited ? ResourceBudget::unlimited() : ResourceBudget::defaults();
            if (!rp_config.empty()) budget.load_config(rp_config);
            for (const auto& kv : rp_set) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value");
                budget.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            RpOptions options;
            if (!rp_connect.empty()) options.connect_address = rp_connect;
            options.default_https_port = rp_port;
            options.cache_dir = rp_cache;
            CancelToken token;
            options.cancel = &token;
            ValidationOutcome o = validate(parse_tal(read_file(rp_tal)), budget, options);
            if (rp_csv.empty()) std::cout << vrps_csv(o.vrps);
            else write_file(rp_csv, vrps_csv(o.vrps));
            if (!rp_outcome.empty()) write_file(rp_outcome, o.to_json().dump(2) + "\n");
            for (const auto& v : o.violations)
                std::cerr << "violation: " << to_string(v.kind) << " measured " << v.measured << " " << v.uri << "\n";
            std::cerr << o.vrps.size() << " VRPs, " << o.repos_visited << " repositories, " << o.warnings.size()
                      << " warnings\n";
            return exit_code(o);
        }

        if (*mat) {
            InstanceRegistry registry(state);
            ScenarioEngine engine(512);
            MaterializeOptions mo;
            mo.root_dir = mat_root;
            mo.depth_cap = mat_depth;
            std::vector<MaterializedRepo> repos;
            for (const auto& uuid : mat_uuids) {
                auto inst = registry.by_uuid(uuid);
                if (!inst) throw UnknownInstance("unknown instance " + uuid);
                repos.push_back(materialize(engine, *inst, mo));
                std::cerr << repos.back().module << ": " << repos.back().file_count << " files, "
                          << repos.back().skipped.size() << " skipped\n";
            }
            std::cout << emit_rsyncd_config(repos);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "gauntlet: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
