#include "mst/predictions.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

namespace mst {

std::vector<const PredictionRow*> PredictionSet::with_role(SplitRole role) const {
    std::vector<const PredictionRow*> out;
    for (const auto& r : rows) {
        if (r.split_role == role) out.push_back(&r);
    }
    return out;
}

std::vector<std::string> PredictionSet::folds() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (std::find(out.begin(), out.end(), r.fold) == out.end()) out.push_back(r.fold);
    }
    return out;
}

void validate_predictions(const PredictionSet& set) {
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : set.rows) {
        if (!(r.score >= 0.0 && r.score <= 1.0)) {
            throw Error("validation", "score of exam '" + r.exam_id + "' outside [0, 1]");
        }
        if (r.label != 0 && r.label != 1) {
            throw Error("validation", "label of exam '" + r.exam_id + "' must be 0 or 1");
        }
        if (!seen.emplace(r.exam_id, r.fold).second) {
            throw Error("validation", "duplicate prediction for exam '" + r.exam_id + "' in fold " + r.fold);
        }
    }
}

void save_predictions(const PredictionSet& set, const std::filesystem::path& path) {
    validate_predictions(set);
    std::ostringstream out;
    out << "# config_hash=" << set.config_hash << " seed=" << set.seed << " sequences=" << set.sequences << '\n';
    out << "exam_id,fold,split_role,label,score\n";
    for (const auto& r : set.rows) {
        out << csv_escape(r.exam_id) << ',' << csv_escape(r.fold) << ',' << to_string(r.split_role) << ','
            << r.label << ',' << format_exact(r.score) << '\n';
    }
    write_text_file(path, out.str());
}

PredictionSet load_predictions(const std::filesystem::path& path) {
    PredictionSet set;
    // Provenance comment.
    {
        std::istringstream in(read_text_file(path));
        std::string first;
        std::getline(in, first);
        if (first.rfind("#", 0) == 0) {
            std::istringstream words(first.substr(1));
            std::string w;
            while (words >> w) {
                auto eq = w.find('=');
                if (eq == std::string::npos) continue;
                auto key = w.substr(0, eq);
                auto value = w.substr(eq + 1);
                if (key == "config_hash") set.config_hash = value;
                else if (key == "seed") set.seed = std::stoull(value);
                else if (key == "sequences") set.sequences = value;
            }
        }
    }

    auto table = read_csv(path);
    const char* required[] = {"exam_id", "fold", "split_role", "label", "score"};
    int idx[5];
    for (int k = 0; k < 5; ++k) {
        idx[k] = table.column(required[k]);
        if (idx[k] < 0) throw Error("format", path.string() + ": missing column '" + required[k] + "'");
    }
    for (const auto& row : table.rows) {
        auto where = path.string() + " line " + std::to_string(row.line);
        if (row.cells.size() != table.header.size()) throw Error("format", where + ": wrong number of cells");
        PredictionRow r;
        r.exam_id = row.cells[idx[0]];
        r.fold = row.cells[idx[1]];
        r.split_role = parse_split_role(row.cells[idx[2]]);
        const auto& label = row.cells[idx[3]];
        if (label != "0" && label != "1") throw Error("format", where + ": label must be 0 or 1");
        r.label = label == "1" ? 1 : 0;
        const auto& score = row.cells[idx[4]];
        auto [ptr, ec] = std::from_chars(score.data(), score.data() + score.size(), r.score);
        if (ec != std::errc() || ptr != score.data() + score.size()) {
            throw Error("format", where + ": unparsable score '" + score + "'");
        }
        set.rows.push_back(std::move(r));
    }
    validate_predictions(set);
    return set;
}

}  // namespace mst
