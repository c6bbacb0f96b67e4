#include "gauntlet/rsync.hpp"

#include <algorithm>
#include <deque>
#include <fstream>

namespace gauntlet {
namespace {

bool within(const std::filesystem::path& root, const std::filesystem::path& p) {
    auto r = root.begin(), c = p.begin();
    for (; r != root.end(); ++r, ++c) {
        if (r->empty()) continue;
        if (c == p.end() || *r != *c) return false;
    }
    return c != p.end();
}

}  // namespace

SandboxWriter::SandboxWriter(std::filesystem::path root, std::string module, std::uint64_t disk_budget)
    : module_(std::move(module)), budget_(disk_budget) {
    std::filesystem::create_directories(root);
    root_ = std::filesystem::canonical(root);
}

bool SandboxWriter::write(std::string_view uri, ByteView body, std::string& why) {
    constexpr std::string_view scheme = "rsync://";
    if (uri.substr(0, scheme.size()) != scheme) {
        why = "not an rsync URI";
        return false;
    }
    std::string_view rest = uri.substr(scheme.size());
    auto host_end = rest.find('/');
    if (host_end == std::string_view::npos) {
        why = "no module";
        return false;
    }
    rest.remove_prefix(host_end + 1);
    if (rest.substr(0, module_.size()) != module_ || rest.size() <= module_.size() || rest[module_.size()] != '/') {
        why = "outside module " + module_;
        return false;
    }
    std::string_view rel = rest.substr(module_.size() + 1);
    if (rel.empty() || rel.back() == '/' || rel.find('\0') != std::string_view::npos || rel.front() == '/') {
        why = "not a file path";
        return false;
    }
    // Lexical containment first, then the real location of the parent.
    std::filesystem::path target = (root_ / std::filesystem::path(std::string(rel))).lexically_normal();
    if (!within(root_, target)) {
        why = "path escapes the repository root";
        return false;
    }
    for (const auto& part : target.lexically_relative(root_))
        if (part.native().size() > 255) {
            why = "path component longer than 255 bytes";
            return false;
        }
    if (bytes_ + body.size() > budget_)
        throw DiskBudgetExceeded("disk budget of " + std::to_string(budget_) + " bytes exceeded");
    std::error_code ec;
    std::filesystem::create_directories(target.parent_path(), ec);
    if (ec) {
        why = "cannot create directory: " + ec.message();
        return false;
    }
    auto parent = std::filesystem::canonical(target.parent_path(), ec);
    if (ec || !(parent == root_ || within(root_, parent))) {
        why = "parent directory resolves outside the repository root";
        return false;
    }
    auto final_path = parent / target.filename();
    if (std::filesystem::is_symlink(final_path)) {
        why = "refusing to write through a symlink";
        return false;
    }
    std::ofstream out(final_path, std::ios::binary | std::ios::trunc);
    if (!out) {
        why = "cannot open file";
        return false;
    }
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    if (!out) {
        why = "write failed";
        return false;
    }
    ++files_;
    bytes_ += body.size();
    return true;
}

MaterializedRepo materialize(ScenarioEngine& engine, const TestInstance& inst, const MaterializeOptions& options) {
    if (options.root_dir.empty()) throw std::invalid_argument("materialize needs a root directory");
    SandboxWriter writer(options.root_dir, inst.hostname, options.disk_budget);
    MaterializedRepo repo;
    repo.root_dir = writer.root();
    repo.instance_uuid = inst.uuid;
    repo.module = inst.hostname;

    auto skip = [&](std::string_view uri, const std::string& why) {
        repo.skipped.push_back(std::string(uri.substr(0, 200)) + ": " + why);
    };

    std::string why;
    const std::string ta_uri = inst.rsync_module() + "ta/root.cer";
    Bytes ta = engine.root_certificate(inst);
    if (!writer.write(ta_uri, ta, why)) skip(ta_uri, why);

    // Snapshots are parsed as an unguarded client would; the writer is the
    // only line of defense here.
    ResourceBudget lenient = ResourceBudget::unlimited();
    std::deque<NodeAddress> queue{NodeAddress{}};
    while (!queue.empty()) {
        NodeAddress node = queue.front();
        queue.pop_front();
        auto children = engine.children_of(inst, node);
        if (!children) continue;
        ++repo.publication_points;
        const std::string path = node.is_root() ? "/snapshot.xml" : "/node/" + node.to_path() + "/snapshot.xml";
        GeneratedResource res = engine.resolve(inst, path);
        std::vector<Publish> publishes;
        try {
            if (res.status != 200) throw std::runtime_error("HTTP " + std::to_string(res.status));
            publishes = parse_snapshot(res.body, lenient);
        } catch (const std::exception& e) {
            skip(inst.https_origin() + path, std::string("snapshot not convertible: ") + e.what());
            publishes.clear();
        }
        for (const auto& p : publishes)
            if (!writer.write(p.uri, p.body, why)) skip(p.uri, why);
        if (node.depth() < options.depth_cap)
            for (auto i : *children) queue.push_back(node.child(i));
    }
    repo.file_count = writer.file_count();
    repo.byte_count = writer.byte_count();
    return repo;
}

std::string emit_rsyncd_config(const std::vector<MaterializedRepo>& repos) {
    std::vector<const MaterializedRepo*> sorted;
    for (const auto& r : repos) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->module < b->module; });
    std::string out = "use chroot = yes\nmax connections = 256\ntimeout = 300\n";
    for (const auto* r : sorted) {
        out += "\n[" + r->module + "]\n";
        out += "    path = " + r->root_dir.string() + "\n";
        out += "    comment = test instance " + r->instance_uuid + "\n";
        out += "    read only = yes\n";
        out += "    list = yes\n";
    }
    return out;
}

}  // namespace gauntlet
