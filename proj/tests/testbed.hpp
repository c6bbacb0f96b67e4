// In-process testbed: registry, scenario engine and attack server on an
// ephemeral loopback port.

#pragma once

#include <filesystem>
#include <random>

#include "gauntlet/rp.hpp"
#include "gauntlet/server.hpp"

namespace testbed {

inline std::filesystem::path temp_dir(const std::string& tag) {
    std::random_device rd;
    auto dir = std::filesystem::temp_directory_path() / ("gauntlet-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(dir);
    return dir;
}

struct Testbed {
    std::filesystem::path dir = temp_dir("bed");
    gauntlet::InstanceRegistry registry{dir / "state"};
    gauntlet::ScenarioEngine engine{512};
    gauntlet::AttackServer server;

    explicit Testbed(unsigned trickle_cap = 16)
        : server(config(dir, trickle_cap), registry, engine) {
        server.start();
    }
    ~Testbed() {
        server.stop();
        std::error_code ec;
        std::filesystem::remove_all(dir, ec);
    }

    static gauntlet::ServerConfig config(const std::filesystem::path& dir, unsigned trickle_cap) {
        gauntlet::ServerConfig c;
        c.obs_dir = dir / "obs";
        c.trickle_cap = trickle_cap;
        c.extra_threads = 8;
        return c;
    }

    gauntlet::TestInstance mint(gauntlet::TestId t, gauntlet::TestParams p) {
        p.fast_keys = true;
        return gauntlet::new_instance(registry, t, p, "example.org", server.port());
    }

    gauntlet::RpOptions options() const {
        gauntlet::RpOptions o;
        o.connect_address = "127.0.0.1";
        o.default_https_port = server.port();
        return o;
    }

    static gauntlet::Tal tal_of(const gauntlet::TestInstance& inst) { return gauntlet::parse_tal(inst.tal_text()); }

    gauntlet::ValidationOutcome run(const gauntlet::TestInstance& inst, gauntlet::ResourceBudget b) {
        b.accept_fast_keys = true;
        return gauntlet::validate(tal_of(inst), b, options());
    }

    std::size_t count(const gauntlet::TestInstance& inst, gauntlet::Observation::Kind k) {
        return server.log().count(inst.uuid, k);
    }
};

}  // namespace testbed
