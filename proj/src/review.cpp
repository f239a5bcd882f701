#include "mst/review.hpp"

#include "httplib.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <sstream>

namespace mst {

using nlohmann::json;

std::string to_string(Rating r) {
    switch (r) {
        case Rating::good: return "good";
        case Rating::moderate: return "moderate";
        case Rating::bad: return "bad";
    }
    return "good";
}

Rating parse_rating(std::string_view s) {
    if (s == "good") return Rating::good;
    if (s == "moderate") return Rating::moderate;
    if (s == "bad") return Rating::bad;
    throw Error("validation", "rating must be one of good, moderate, bad (got '" + std::string(s) + "')");
}

json to_json(const RatingRecord& r) {
    return json{{"exam_id", r.exam_id},
                {"rater_id", r.rater_id},
                {"area_rating", to_string(r.area_rating)},
                {"slice_rating", to_string(r.slice_rating)},
                {"timestamp", r.timestamp}};
}

RatingRecord rating_from_json(const json& j) {
    if (!j.is_object()) throw Error("validation", "rating must be a JSON object");
    auto text = [&](const char* key) {
        if (!j.contains(key) || !j.at(key).is_string()) {
            throw Error("validation", std::string("field '") + key + "' must be a string");
        }
        return j.at(key).get<std::string>();
    };
    RatingRecord r;
    r.exam_id = text("exam_id");
    r.rater_id = j.contains("rater_id") ? text("rater_id") : "anonymous";
    r.area_rating = parse_rating(text("area_rating"));
    r.slice_rating = parse_rating(text("slice_rating"));
    r.timestamp = j.contains("timestamp") ? text("timestamp") : std::string();
    return r;
}

std::string utc_timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// ---- summary ----------------------------------------------------------------------

RatingSummary summarize_ratings(const std::vector<RatingRecord>& ratings, long total_cases) {
    std::map<RatingStore::Key, RatingRecord> latest;
    for (const auto& r : ratings) latest[{r.exam_id, r.rater_id}] = r;

    RatingSummary s;
    s.total_cases = total_cases;
    s.total_rated = static_cast<long>(latest.size());
    for (const auto& [key, r] : latest) {
        s.area.counts[static_cast<std::size_t>(r.area_rating)] += 1;
        s.slice.counts[static_cast<std::size_t>(r.slice_rating)] += 1;
    }
    if (s.total_rated > 0) {
        for (auto* level : {&s.area, &s.slice}) {
            for (std::size_t k = 0; k < 3; ++k) {
                level->percent[k] = std::lround(100.0 * static_cast<double>(level->counts[k]) /
                                                static_cast<double>(s.total_rated));
            }
        }
    }
    return s;
}

json to_json(const RatingSummary& s) {
    auto level = [](const LevelSummary& l) {
        json out = json::object();
        for (std::size_t k = 0; k < 3; ++k) {
            out[to_string(static_cast<Rating>(k))] = {
                {"count", l.counts[k]}, {"percent", l.percent[k] ? json(*l.percent[k]) : json(nullptr)}};
        }
        return out;
    };
    return json{{"area", level(s.area)},
                {"slice", level(s.slice)},
                {"total_rated", s.total_rated},
                {"total_cases", s.total_cases}};
}

std::string render_table4_text(const RatingSummary& s) {
    auto cell = [](const LevelSummary& l, std::size_t k) {
        if (!l.percent[k]) return std::string("-");
        return std::to_string(l.counts[k]) + " (" + std::to_string(*l.percent[k]) + ")";
    };
    std::string out = "Rating\tArea attention (n, %)\tSlice attention (n, %)\n";
    for (std::size_t k = 0; k < 3; ++k) {
        out += to_string(static_cast<Rating>(k)) + "\t" + cell(s.area, k) + "\t" + cell(s.slice, k) + "\n";
    }
    return out;
}

// ---- store ------------------------------------------------------------------------

RatingStore::RatingStore(std::filesystem::path log_path) : path_(std::move(log_path)) {
    auto snap = std::make_shared<Snapshot>();
    if (std::filesystem::exists(path_)) {
        std::istringstream in(read_text_file(path_));
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (trim(line).empty()) continue;
            try {
                auto r = rating_from_json(json::parse(line));
                (*snap)[{r.exam_id, r.rater_id}] = r;
            } catch (const std::exception& e) {
                warnings_.push_back(path_.string() + " line " + std::to_string(n) + " skipped: " + e.what());
            }
        }
    } else if (path_.has_parent_path()) {
        std::filesystem::create_directories(path_.parent_path());
    }
    snapshot_ = std::move(snap);
}

RatingRecord RatingStore::append(RatingRecord record) {
    if (record.exam_id.empty()) throw Error("validation", "rating needs an exam id");
    if (record.rater_id.empty()) record.rater_id = "anonymous";
    if (record.timestamp.empty()) record.timestamp = utc_timestamp_now();
    const std::string line = to_json(record).dump() + "\n";

    std::lock_guard<std::mutex> lock(write_mutex_);
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("io", "cannot open " + path_.string() + ": " + std::strerror(errno));
    std::size_t written = 0;
    while (written < line.size()) {
        const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string err = std::strerror(errno);
            ::close(fd);
            throw Error("io", "cannot append to " + path_.string() + ": " + err);
        }
        written += static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        throw Error("io", "cannot sync " + path_.string() + ": " + err);
    }
    ::close(fd);

    auto next = std::make_shared<Snapshot>(*std::atomic_load(&snapshot_));
    (*next)[{record.exam_id, record.rater_id}] = record;
    std::atomic_store(&snapshot_, std::shared_ptr<const Snapshot>(std::move(next)));
    return record;
}

std::shared_ptr<const RatingStore::Snapshot> RatingStore::snapshot() const { return std::atomic_load(&snapshot_); }

std::vector<RatingRecord> RatingStore::live() const {
    auto snap = snapshot();
    std::vector<RatingRecord> out;
    out.reserve(snap->size());
    for (const auto& [key, r] : *snap) out.push_back(r);
    return out;
}

// ---- server -----------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
    send_json(res, status, json{{"error", kind}, {"message", message}});
}

std::string rater_of(const httplib::Request& req) {
    auto id = req.get_header_value("X-Rater-Id");
    return id.empty() ? "anonymous" : id;
}

}  // namespace

ReviewServer::ReviewServer(ReviewOptions options)
    : options_(std::move(options)), store_(options_.ratings_path), server_(std::make_unique<httplib::Server>()) {
    if (!std::filesystem::is_directory(options_.bundle_root)) {
        throw Error("io", "bundle root " + options_.bundle_root.string() + " is not a directory");
    }
    std::vector<std::filesystem::path> dirs;
    for (const auto& entry : std::filesystem::directory_iterator(options_.bundle_root)) {
        if (entry.is_directory()) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        try {
            auto b = load_case_bundle(dir);
            if (cases_.count(b.exam_id)) throw Error("format", "duplicate exam id " + b.exam_id);
            if (b.exam_id != dir.filename().string()) throw Error("format", "directory name differs from exam id");
            order_.push_back(b.exam_id);
            cases_.emplace(b.exam_id, std::move(b));
        } catch (const Error& e) {
            warnings_.push_back("skipped bundle " + dir.string() + ": " + e.what());
        }
    }
    for (const auto& w : store_.warnings()) warnings_.push_back(w);
    routes();
}

ReviewServer::~ReviewServer() { stop(); }

void ReviewServer::routes() {
    auto& srv = *server_;

    srv.Get("/api/cases", [this](const httplib::Request& req, httplib::Response& res) {
        const auto snap = store_.snapshot();
        const auto rater = rater_of(req);
        json out = json::array();
        for (const auto& id : order_) {
            const auto& b = cases_.at(id);
            out.push_back({{"exam_id", id}, {"score", b.score}, {"rated", snap->count({id, rater}) > 0}});
        }
        send_json(res, 200, out);
    });

    srv.Get(R"(/api/cases/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        auto it = cases_.find(id);
        if (it == cases_.end()) return send_error(res, 404, "not_found", "unknown case '" + id + "'");
        json meta = to_json(it->second);
        const std::string prefix = "/api/cases/" + id + "/image/";
        json base = json::array(), overlay = json::array();
        for (int z = 0; z < kSlices; ++z) {
            base.push_back(prefix + "base/" + std::to_string(z));
            overlay.push_back(prefix + "overlay/" + std::to_string(z));
        }
        meta["images"] = {{"base", base}, {"overlay", overlay}, {"slicebar", prefix + "slicebar/0"}};
        const auto snap = store_.snapshot();
        auto r = snap->find({id, rater_of(req)});
        meta["rating"] = r == snap->end() ? json(nullptr) : to_json(r->second);
        send_json(res, 200, meta);
    });

    srv.Get(R"(/api/cases/([^/]+)/image/([a-z]+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const std::string kind = req.matches[2];
        auto it = cases_.find(id);
        if (it == cases_.end()) return send_error(res, 404, "not_found", "unknown case '" + id + "'");
        int slice = -1;
        try {
            slice = std::stoi(std::string(req.matches[3]));
        } catch (const std::exception&) {
        }
        if (slice < 0 || slice >= kSlices) return send_error(res, 404, "not_found", "slice out of range");
        std::string file;
        if (kind == "base") file = it->second.base_files[static_cast<std::size_t>(slice)];
        else if (kind == "overlay") file = it->second.overlay_files[static_cast<std::size_t>(slice)];
        else if (kind == "slicebar") file = it->second.slicebar_file;
        else return send_error(res, 404, "not_found", "image kind must be base, overlay or slicebar");
        try {
            res.set_content(read_text_file(options_.bundle_root / id / file), "image/png");
        } catch (const Error& e) {
            send_error(res, 500, "io", e.what());
        }
    });

    srv.Post(R"(/api/cases/([^/]+)/rating)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        if (!cases_.count(id)) return send_error(res, 404, "not_found", "unknown case '" + id + "'");
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception& e) {
            return send_error(res, 400, "malformed_json", e.what());
        }
        RatingRecord r;
        try {
            if (!body.is_object()) throw Error("validation", "rating must be a JSON object");
            body["exam_id"] = id;
            body["rater_id"] = rater_of(req);
            body.erase("timestamp");
            r = rating_from_json(body);
        } catch (const Error& e) {
            return send_error(res, 422, "validation", e.what());
        }
        try {
            send_json(res, 200, to_json(store_.append(r)));
        } catch (const Error& e) {
            send_error(res, 500, e.kind(), e.what());
        }
    });

    srv.Get("/api/summary", [this](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, to_json(summarize_ratings(store_.live(), static_cast<long>(cases_.size()))));
    });

    if (!options_.static_dir.empty()) {
        if (!srv.set_mount_point("/", options_.static_dir.string())) {
            warnings_.push_back("static directory " + options_.static_dir.string() + " not found; UI not served");
        }
    }
}

bool ReviewServer::listen(const std::string& host, int port) { return server_->listen(host, port); }

int ReviewServer::bind_any(const std::string& host) { return server_->bind_to_any_port(host); }

bool ReviewServer::listen_after_bind() { return server_->listen_after_bind(); }

void ReviewServer::stop() {
    if (server_) server_->stop();
}

bool ReviewServer::is_running() const { return server_ && server_->is_running(); }

}  // namespace mst
