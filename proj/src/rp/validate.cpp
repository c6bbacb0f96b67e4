#include <algorithm>
#include <deque>
#include <fstream>
#include <set>

#include "gauntlet/rp.hpp"

namespace gauntlet {
namespace {

constexpr std::size_t kMaxWarnings = 1000;
constexpr std::size_t kMaxViolations = 100;

struct Work {
    NodeAddress node;
    ResourceCertificate cert;
    ResourceSet resources;  // inherit flags resolved
    std::string cert_uri;
};

std::string ends(std::string_view s, std::size_t n = 200) { return std::string(s.substr(0, n)); }

bool has_suffix(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

Bytes read_file(const std::filesystem::path& p, std::optional<std::uint64_t> limit) {
    std::error_code ec;
    auto size = std::filesystem::file_size(p, ec);
    if (ec) throw FetchFailed("cannot stat " + p.string());
    if (limit && size > *limit)
        throw RepositoryViolation(Violation::ObjectTooLarge, static_cast<double>(size), p.string() + " too large");
    std::ifstream in(p, std::ios::binary);
    Bytes out(size);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
    if (!in) throw FetchFailed("cannot read " + p.string());
    return out;
}

// "rsync://host/module/a/b" -> {"module", "a/b"}
std::optional<std::pair<std::string, std::string>> split_rsync(std::string_view uri) {
    constexpr std::string_view scheme = "rsync://";
    if (uri.substr(0, scheme.size()) != scheme) return std::nullopt;
    uri.remove_prefix(scheme.size());
    auto host_end = uri.find('/');
    if (host_end == std::string_view::npos) return std::nullopt;
    uri.remove_prefix(host_end + 1);
    auto mod_end = uri.find('/');
    std::string module(uri.substr(0, mod_end));
    std::string rest = mod_end == std::string_view::npos ? "" : std::string(uri.substr(mod_end + 1));
    if (module.empty()) return std::nullopt;
    return std::pair{module, rest};
}

bool inside(const std::filesystem::path& root, const std::filesystem::path& p) {
    auto r = std::filesystem::weakly_canonical(root);
    auto c = std::filesystem::weakly_canonical(p);
    auto ri = r.begin(), ci = c.begin();
    for (; ri != r.end(); ++ri, ++ci) {
        if (ri->empty()) continue;  // trailing separator
        if (ci == c.end() || *ri != *ci) return false;
    }
    return true;
}

class Validator {
public:
    Validator(const ResourceBudget& budget, const RpOptions& options)
        : budget_(budget), options_(options), now_(options.now == TimePoint{} ? now_seconds() : options.now) {
        acct_.cancel = options.cancel;
    }

    ValidationOutcome run(const Tal& tal) {
        auto root = load_root(tal);
        std::deque<Work> queue;
        queue.push_back(std::move(root));
        seen_ski_.insert(queue.front().cert.ski);
        try {
            while (!queue.empty()) {
                if (options_.cancel && options_.cancel->cancelled()) throw Cancelled();
                if (budget_.max_wall_time && acct_.elapsed() > *budget_.max_wall_time)
                    throw BudgetHalt(Violation::WallTimeExceeded, acct_.elapsed(), "run exceeded max_wall_time");
                Work w = std::move(queue.front());
                queue.pop_front();
                if (!admit(w)) continue;
                for (auto& child : visit(w)) queue.push_back(std::move(child));
            }
        } catch (const BudgetHalt& h) {
            record(h.kind, h.measured, "", h.what());
        } catch (const Cancelled&) {
            out_.cancelled = true;
            out_.partial = true;
        }
        out_.vrps.assign(vrps_.begin(), vrps_.end());
        out_.bytes_fetched = acct_.bytes_fetched;
        out_.bytes_decompressed = acct_.bytes_decompressed;
        out_.redirects_followed = acct_.redirects_followed;
        out_.longest_wait = acct_.longest_wait;
        out_.longest_transfer = acct_.longest_transfer;
        out_.elapsed = acct_.elapsed();
        return std::move(out_);
    }

private:
    void warn(std::string msg) {
        if (out_.warnings.size() < kMaxWarnings) out_.warnings.push_back(std::move(msg));
        else if (out_.warnings.size() == kMaxWarnings) out_.warnings.push_back("further warnings suppressed");
    }

    void record(Violation kind, double measured, std::string uri, std::string detail) {
        out_.partial = true;
        if (out_.violations.size() >= kMaxViolations) return;
        out_.violations.push_back({kind, measured, std::move(uri), std::move(detail)});
    }

    Work load_root(const Tal& tal) {
        std::string errors;
        for (const auto& uri : tal.uris) {
            try {
                Bytes der;
                if (uri.rfind("https://", 0) == 0) der = fetch_one(uri, budget_, acct_, options_);
                else der = read_mirror(uri);
                auto cert = decode_cert(der);
                if (cert.spki != tal.public_key) throw std::runtime_error("key does not match the TAL");
                if (!cert.is_ca || !cert.self_signed()) throw std::runtime_error("not a self-signed CA certificate");
                if (!verify_cert_signature(cert, cert.spki)) throw std::runtime_error("bad self signature");
                if (!cert.validity.contains(now_)) throw std::runtime_error("outside its validity period");
                if (cert.resources.inherit_ip || cert.resources.inherit_as)
                    throw std::runtime_error("trust anchor inherits resources");
                check_key(cert.spki);
                return Work{NodeAddress{}, cert, cert.resources, uri};
            } catch (const Cancelled&) {
                throw TalUnreachable("cancelled");
            } catch (const std::exception& e) {
                errors += (errors.empty() ? "" : "; ") + ends(uri) + ": " + e.what();
            }
        }
        throw TalUnreachable("no trust anchor certificate could be retrieved: " + errors);
    }

    void check_key(ByteView spki) const {
        unsigned bits = public_key_bits(spki);
        if (bits == 0) throw std::runtime_error("unsupported public key");
        if (bits < 2048 && !budget_.accept_fast_keys)
            throw std::runtime_error(std::to_string(bits) + "-bit key below 2048 bits");
    }

    Bytes read_mirror(const std::string& uri) {
        auto parts = split_rsync(uri);
        if (!parts) throw FetchFailed("not an rsync URI: " + ends(uri));
        auto it = options_.rsync_mirror.find(parts->first);
        if (it == options_.rsync_mirror.end()) throw FetchFailed("no local mirror for module " + parts->first);
        auto p = it->second / parts->second;
        if (!inside(it->second, p)) throw RepositoryViolation(Violation::PathTraversal, 0, "mirror path escapes");
        return read_file(p, budget_.max_object_bytes);
    }

    // Depth, repository and hint limits checked before a retrieval.
    bool admit(const Work& w) {
        const std::string where = w.cert.uris.rrdp_notify.empty() ? w.cert.uris.ca_repository : w.cert.uris.rrdp_notify;
        if (budget_.max_depth && w.node.depth() > *budget_.max_depth) {
            record(Violation::DepthLimit, out_.max_depth_reached, where,
                   "node " + w.node.to_path() + " is deeper than max_depth " + std::to_string(*budget_.max_depth));
            return false;
        }
        if (budget_.max_repos && out_.repos_visited >= *budget_.max_repos)
            throw BudgetHalt(Violation::RepoLimit, static_cast<double>(out_.repos_visited + 1),
                             "more than max_repos repositories");
        if (budget_.hints_enabled && !options_.hints.empty()) {
            std::vector<const TreeHint*> scopes;
            for (const auto& h : options_.hints) {
                if (!h.node.is_ancestor_of(w.node)) continue;
                if (hint_count_[h.node] >= h.max_descendants) {
                    record(Violation::HintLimit, static_cast<double>(hint_count_[h.node]), where,
                           "hint at node '" + h.node.to_path() + "' allows " + std::to_string(h.max_descendants) +
                               " descendants; skipped " + w.node.to_path());
                    return false;
                }
                scopes.push_back(&h);
            }
            for (const auto* h : scopes) ++hint_count_[h->node];
        }
        ++out_.repos_visited;
        out_.max_depth_reached = std::max<unsigned>(out_.max_depth_reached, static_cast<unsigned>(w.node.depth()));
        out_.fetches.push_back({where, w.node.depth(), w.node.to_path()});
        return true;
    }

    // Repository contents keyed by file URI.
    std::map<std::string, Bytes> retrieve(const Work& w) {
        const auto& repo = w.cert.uris.ca_repository;
        std::map<std::string, Bytes> files;
        if (!w.cert.uris.rrdp_notify.empty() && w.cert.uris.rrdp_notify.rfind("https://", 0) == 0 &&
            options_.rsync_mirror.empty()) {
            Bytes notification_bytes = fetch_one(w.cert.uris.rrdp_notify, budget_, acct_, options_);
            Notification n = parse_notification(notification_bytes, budget_);
            Bytes snapshot_bytes = fetch_one(n.snapshot_uri, budget_, acct_, options_);
            if (hex(sha256(snapshot_bytes)) != n.snapshot_hash) throw FetchFailed("snapshot hash mismatch");
            for (auto& p : parse_snapshot(snapshot_bytes, budget_)) {
                if (budget_.check_paths && p.uri.rfind(repo, 0) != 0) {
                    warn("publish outside the repository ignored: " + ends(p.uri));
                    continue;
                }
                if (budget_.max_object_bytes && p.body.size() > *budget_.max_object_bytes)
                    throw RepositoryViolation(Violation::ObjectTooLarge, static_cast<double>(p.body.size()),
                                              "published object exceeds max_object_bytes");
                out_.largest_uri = std::max<std::uint64_t>(out_.largest_uri, p.uri.size());
                files[p.uri] = std::move(p.body);
            }
        } else {
            auto parts = split_rsync(repo);
            if (!parts) throw FetchFailed("no usable repository URI");
            auto it = options_.rsync_mirror.find(parts->first);
            if (it == options_.rsync_mirror.end()) throw FetchFailed("repository has no RRDP URI and no mirror");
            auto dir = it->second / parts->second;
            if (!inside(it->second, dir)) throw RepositoryViolation(Violation::PathTraversal, 0, "mirror path escapes");
            std::error_code ec;
            for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
                if (!entry.is_regular_file()) continue;
                std::string name = entry.path().filename().string();
                if (budget_.max_path_len && repo.size() + name.size() > *budget_.max_path_len)
                    throw RepositoryViolation(Violation::PathTooLong, static_cast<double>(repo.size() + name.size()),
                                              "file name exceeds max_path_len");
                files[repo + name] = read_file(entry.path(), budget_.max_object_bytes);
            }
            if (ec) throw FetchFailed("cannot list " + dir.string());
        }
        if (!options_.cache_dir.empty()) for (const auto& [uri, body] : files) cache(uri, body);
        return files;
    }

    void cache(const std::string& uri, const Bytes& body) {
        try {
            store(uri, body);
        } catch (const std::filesystem::filesystem_error& e) {
            warn("cannot cache " + ends(uri) + ": " + e.code().message());
        }
    }

    void store(const std::string& uri, const Bytes& body) {
        auto parts = split_rsync(uri);
        if (!parts) return;
        // Deliberately not normalized: with path checks off, dot segments
        // reach the filesystem as published.
        auto target = options_.cache_dir / parts->first;
        target += "/" + parts->second;
        const auto& jail = options_.cache_jail.empty() ? options_.cache_dir : options_.cache_jail;
        if (!inside(jail, target)) {
            warn("refusing to write outside the cache: " + ends(uri));
            return;
        }
        std::error_code ec;
        std::filesystem::create_directories(target.parent_path(), ec);
        std::ofstream f(target, std::ios::binary | std::ios::trunc);
        if (!f) {
            warn("cannot write cache file for " + ends(uri));
            return;
        }
        f.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
        out_.files_written.push_back(std::filesystem::weakly_canonical(target).string());
    }

    // Null when the EE certificate is acceptable.
    std::optional<std::string> check_ee(const ResourceCertificate& ee, const Work& w, const CrlContent* crl) const {
        if (ee.is_ca) return "EE certificate is a CA";
        if (ee.aki != w.cert.ski) return "EE certificate not issued by this CA";
        if (!verify_cert_signature(ee, w.cert.spki)) return "EE certificate signature invalid";
        if (!ee.validity.contains(now_)) return "EE certificate outside its validity period";
        if (crl && crl->is_revoked(ee.serial)) return "EE certificate revoked";
        if (!w.resources.contains(ee.resources)) return "EE certificate resources exceed the issuer's";
        try {
            check_key(ee.spki);
        } catch (const std::exception& e) {
            return std::string(e.what());
        }
        return std::nullopt;
    }

    std::vector<Work> visit(const Work& w) {
        std::map<std::string, Bytes> files;
        const auto& repo = w.cert.uris.ca_repository;
        try {
            files = retrieve(w);
        } catch (const RepositoryViolation& v) {
            record(v.kind, v.measured, w.cert.uris.rrdp_notify.empty() ? repo : w.cert.uris.rrdp_notify, v.what());
            return {};
        } catch (const FetchFailed& e) {
            warn("repository " + ends(repo) + ": " + e.what());
            return {};
        } catch (const BudgetHalt&) {
            throw;
        } catch (const Cancelled&) {
            throw;
        } catch (const std::exception& e) {
            warn("repository " + ends(repo) + ": " + e.what());
            return {};
        }
        return validate_point(w, files);
    }

    std::vector<Work> validate_point(const Work& w, std::map<std::string, Bytes>& files) {
        const auto& repo = w.cert.uris.ca_repository;
        const std::string& mft_uri = w.cert.uris.manifest;
        auto mft_it = files.find(mft_uri);
        if (mft_it == files.end()) {
            warn("manifest missing at " + ends(mft_uri));
            return {};
        }
        ManifestContent mft;
        ResourceCertificate mft_ee;
        try {
            auto obj = decode_object(mft_it->second);
            auto* content = std::get_if<ManifestContent>(&obj.content);
            if (!content) throw std::runtime_error("not a manifest");
            mft = std::move(*content);
            mft_ee = std::move(obj.cms.ee);
        } catch (const std::exception& e) {
            warn("manifest " + ends(mft_uri) + " rejected: " + e.what());
            return {};
        }
        if (now_ < mft.this_update || mft.next_update < now_) {
            warn("manifest " + ends(mft_uri) + " is not current");
            return {};
        }

        auto listed = [&](const std::string& name) -> const ManifestEntry* {
            for (const auto& e : mft.entries)
                if (e.file_name == name) return &e;
            return nullptr;
        };

        // CRL named by the manifest's EE certificate.
        const std::string& crl_uri = mft_ee.uris.crl;
        if (crl_uri.rfind(repo, 0) != 0) {
            warn("manifest EE certificate names a CRL outside the repository");
            return {};
        }
        std::string crl_name = crl_uri.substr(repo.size());
        auto crl_it = files.find(crl_uri);
        const ManifestEntry* crl_entry = listed(crl_name);
        if (crl_it == files.end() || !crl_entry || sha256(crl_it->second) != crl_entry->hash) {
            warn("CRL " + ends(crl_uri) + " missing or not matching the manifest");
            return {};
        }
        CrlContent crl;
        try {
            crl = decode_crl(crl_it->second);
            if (crl.aki != w.cert.ski || !verify_crl(crl, w.cert.spki)) throw std::runtime_error("not signed by this CA");
            if (crl.next_update < now_) throw std::runtime_error("stale");
        } catch (const std::exception& e) {
            warn("CRL " + ends(crl_uri) + " rejected: " + e.what());
            return {};
        }
        if (auto why = check_ee(mft_ee, w, &crl)) {
            warn("manifest " + ends(mft_uri) + ": " + *why);
            return {};
        }

        for (const auto& [uri, _] : files) {
            if (uri == mft_uri) continue;
            std::string name = uri.substr(std::min(repo.size(), uri.size()));
            if (uri.rfind(repo, 0) != 0 || !listed(name)) warn("file not on manifest ignored: " + ends(uri));
        }

        std::vector<Work> children;
        std::uint32_t ordinal = 0;
        for (const auto& entry : mft.entries) {
            const std::string uri = repo + entry.file_name;
            const bool is_cert = has_suffix(entry.file_name, ".cer");
            const std::uint32_t child_ordinal = is_cert ? ordinal++ : 0;
            if (entry.file_name == crl_name) continue;
            auto it = files.find(uri);
            if (it == files.end()) {
                warn("file on manifest missing: " + ends(uri));
                continue;
            }
            if (sha256(it->second) != entry.hash) {
                warn("hash mismatch for " + ends(uri));
                continue;
            }
            try {
                if (is_cert) {
                    if (auto child = child_ca(w, crl, it->second, uri, child_ordinal)) children.push_back(std::move(*child));
                } else if (has_suffix(entry.file_name, ".roa")) {
                    roa(w, crl, it->second, uri);
                } else if (has_suffix(entry.file_name, ".gbr")) {
                    auto obj = decode_object(it->second);
                    if (!std::holds_alternative<GhostbustersText>(obj.content)) throw std::runtime_error("not a Ghostbusters record");
                    if (auto why = check_ee(obj.cms.ee, w, &crl)) throw std::runtime_error(*why);
                } else {
                    warn("unsupported file type ignored: " + ends(uri));
                }
            } catch (const BudgetHalt&) {
                throw;
            } catch (const std::exception& e) {
                warn(ends(uri) + " rejected: " + e.what());
            }
        }
        return children;
    }

    std::optional<Work> child_ca(const Work& w, const CrlContent& crl, const Bytes& der, const std::string& uri,
                                 std::uint32_t ordinal) {
        auto cert = decode_cert(der);
        if (!cert.is_ca) throw std::runtime_error("not a CA certificate");
        if (cert.aki != w.cert.ski) throw std::runtime_error("not issued by this CA");
        if (!verify_cert_signature(cert, w.cert.spki)) throw std::runtime_error("signature invalid");
        if (!cert.validity.contains(now_)) throw std::runtime_error("outside its validity period");
        if (crl.is_revoked(cert.serial)) throw std::runtime_error("revoked");
        if (!w.resources.contains(cert.resources)) throw std::runtime_error("resources exceed the issuer's (overclaim)");
        check_key(cert.spki);
        if (cert.uris.manifest.empty() || cert.uris.ca_repository.empty())
            throw std::runtime_error("missing repository or manifest URI");
        if (!seen_ski_.insert(cert.ski).second) throw std::runtime_error("certificate key already visited");
        ResourceSet resolved = cert.resources.resolved_against(w.resources);
        return Work{w.node.child(ordinal), std::move(cert), std::move(resolved), uri};
    }

    void roa(const Work& w, const CrlContent& crl, const Bytes& der, const std::string&) {
        auto obj = decode_object(der);
        auto* content = std::get_if<RoaContent>(&obj.content);
        if (!content) throw std::runtime_error("not a ROA");
        if (auto why = check_ee(obj.cms.ee, w, &crl)) throw std::runtime_error(*why);
        ResourceSet ee = obj.cms.ee.resources.resolved_against(w.resources);
        std::vector<Vrp> found;
        for (const auto& block : content->blocks) {
            IpPrefix p = block.prefix();
            std::int64_t max_len = block.max_length.value_or(p.length);
            if (max_len < p.length || max_len > static_cast<std::int64_t>(family_bits(p.family)))
                throw std::runtime_error("maxLength out of range");
            if (!ee.covers(p)) throw std::runtime_error("prefix " + p.to_string() + " not covered by the EE certificate");
            found.push_back({p, static_cast<unsigned>(max_len), content->as_id});
        }
        for (const auto& v : found) {
            if (vrps_.count(v)) continue;
            if (budget_.max_vrps && vrps_.size() >= *budget_.max_vrps)
                throw BudgetHalt(Violation::VrpBudgetExceeded, static_cast<double>(vrps_.size() + 1),
                                 "more than max_vrps VRPs");
            vrps_.insert(v);
        }
    }

    const ResourceBudget& budget_;
    const RpOptions& options_;
    TimePoint now_;
    Accounting acct_;
    ValidationOutcome out_;
    std::set<Vrp> vrps_;
    std::set<Bytes> seen_ski_;
    std::map<NodeAddress, std::uint64_t> hint_count_;
};

}  // namespace

ValidationOutcome validate(const Tal& tal, const ResourceBudget& budget, const RpOptions& options) {
    budget.validate();
    return Validator(budget, options).run(tal);
}

}  // namespace gauntlet
