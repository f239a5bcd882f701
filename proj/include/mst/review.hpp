#pragma once

#include "mst/explain.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace mst {

enum class Rating { good, moderate, bad };
std::string to_string(Rating r);
// Throws Error("validation") for anything outside the three-point scale.
Rating parse_rating(std::string_view s);

struct RatingRecord {
    std::string exam_id;
    std::string rater_id = "anonymous";
    Rating area_rating = Rating::good;
    Rating slice_rating = Rating::good;
    std::string timestamp;  // UTC ISO-8601

    bool operator==(const RatingRecord&) const = default;
};

nlohmann::json to_json(const RatingRecord& r);
RatingRecord rating_from_json(const nlohmann::json& j);

std::string utc_timestamp_now();

struct LevelSummary {
    std::array<long, 3> counts{};                  // good, moderate, bad
    std::array<std::optional<long>, 3> percent{};  // integer-rounded; empty when nothing is rated
};

struct RatingSummary {
    LevelSummary area;
    LevelSummary slice;
    long total_rated = 0;
    long total_cases = 0;
};

// Counts the latest record per (exam, rater).
RatingSummary summarize_ratings(const std::vector<RatingRecord>& ratings, long total_cases = 0);
nlohmann::json to_json(const RatingSummary& s);
// "good\t119 (53)\t..." rows under a header, dashes when nothing is rated.
std::string render_table4_text(const RatingSummary& s);

/// Append-only JSONL rating log. Every append is flushed and fsync'ed before
/// it returns; readers see an immutable snapshot replaced on each write.
class RatingStore {
public:
    using Key = std::pair<std::string, std::string>;  // exam, rater
    using Snapshot = std::map<Key, RatingRecord>;

    explicit RatingStore(std::filesystem::path log_path);

    RatingRecord append(RatingRecord record);
    std::shared_ptr<const Snapshot> snapshot() const;
    std::vector<RatingRecord> live() const;
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    std::filesystem::path path_;
    std::mutex write_mutex_;
    std::shared_ptr<const Snapshot> snapshot_;
    std::vector<std::string> warnings_;
};

struct ReviewOptions {
    std::filesystem::path bundle_root;
    std::filesystem::path ratings_path;
    std::filesystem::path static_dir;  // optional UI assets served at /
};

/// HTTP API over a directory of case bundles.
class ReviewServer {
public:
    explicit ReviewServer(ReviewOptions options);
    ~ReviewServer();

    // Binds and serves until stop(); returns false when the port is unavailable.
    bool listen(const std::string& host, int port);
    // Binds to a free port and returns it; serve with listen_after_bind().
    int bind_any(const std::string& host);
    bool listen_after_bind();
    void stop();
    bool is_running() const;

    std::size_t case_count() const { return cases_.size(); }
    const std::vector<std::string>& warnings() const { return warnings_; }
    RatingStore& store() { return store_; }

private:
    void routes();

    ReviewOptions options_;
    std::map<std::string, CaseBundle> cases_;
    std::vector<std::string> order_;
    std::vector<std::string> warnings_;
    RatingStore store_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace mst
