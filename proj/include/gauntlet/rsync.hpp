// Materializes an instance's repositories as a directory tree an rsync
// daemon can serve, and writes the matching rsyncd configuration.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gauntlet/rp.hpp"
#include "gauntlet/scenario.hpp"

namespace gauntlet {

class DiskBudgetExceeded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct MaterializeOptions {
    std::filesystem::path root_dir;
    std::uint64_t disk_budget = 1ull << 30;
    // Deepest node written; bounds unbounded chains.
    unsigned depth_cap = 8;
};

struct MaterializedRepo {
    std::filesystem::path root_dir;
    std::string instance_uuid;
    std::string module;  // the instance hostname
    std::uint64_t file_count = 0;
    std::uint64_t byte_count = 0;
    std::uint64_t publication_points = 0;
    std::vector<std::string> skipped;  // "<uri>: <reason>"
};

// Writes files below a root directory and refuses anything that would land
// elsewhere, through dot segments or symlinks alike.
class SandboxWriter {
public:
    SandboxWriter(std::filesystem::path root, std::string module, std::uint64_t disk_budget);

    // Writes the file named by an rsync URI inside the module. Returns false
    // and sets `why` when the URI is skipped. Throws DiskBudgetExceeded.
    bool write(std::string_view uri, ByteView body, std::string& why);

    const std::filesystem::path& root() const { return root_; }
    std::uint64_t file_count() const { return files_; }
    std::uint64_t byte_count() const { return bytes_; }

private:
    std::filesystem::path root_;
    std::string module_;
    std::uint64_t budget_;
    std::uint64_t files_ = 0;
    std::uint64_t bytes_ = 0;
};

MaterializedRepo materialize(ScenarioEngine& engine, const TestInstance& inst, const MaterializeOptions& options);

// One read-only module per repository, named after the instance hostname.
std::string emit_rsyncd_config(const std::vector<MaterializedRepo>& repos);

}  // namespace gauntlet
