#include "clwf/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace clwf {

using nlohmann::ordered_json;

void EvalReport::add(EvalRow row) {
    for (const EvalRow& existing : rows) {
        if (existing.strategy == row.strategy && existing.iteration == row.iteration &&
            existing.task_id == row.task_id && existing.split == row.split) {
            throw ConflictError("report: (" + row.strategy + ", iteration " +
                                std::to_string(row.iteration) + ", " + row.task_id + ", " +
                                row.split + ") already evaluated");
        }
    }
    if (row.error_rate < 0.0 || row.error_rate > 1.0) {
        throw ArgumentError("report: error_rate outside [0,1]");
    }
    rows.push_back(std::move(row));
}

double error_rate(const ToyEncoderClassifier& model, const std::vector<Sample>& samples,
                  const std::string& task) {
    if (samples.empty()) {
        throw ArgumentError("error_rate: no samples");
    }
    constexpr std::size_t kChunk = 250;
    std::size_t wrong = 0;
    std::vector<const Sample*> chunk;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        const std::size_t end = std::min(samples.size(), start + kChunk);
        chunk.clear();
        for (std::size_t i = start; i < end; ++i) {
            chunk.push_back(&samples[i]);
        }
        const Tensor logits = model.batch_logits(chunk, task);
        const std::size_t classes = logits.cols();
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (logits.at(r, c) > logits.at(r, best)) {
                    best = c;
                }
            }
            if (static_cast<int>(best) != chunk[r]->y) {
                ++wrong;
            }
        }
    }
    return static_cast<double>(wrong) / static_cast<double>(samples.size());
}

DegradationRate degradation(double old_err, double new_err) {
    if (old_err < 0.0 || new_err < 0.0) {
        throw ArgumentError("degradation: negative error rate");
    }
    DegradationRate out;
    if (old_err == 0.0) {
        out.relative = false;
        out.value = new_err - old_err;
        return out;
    }
    out.relative = true;
    out.value = (new_err - old_err) / old_err;
    return out;
}

double group_average(const EvalReport& report, int iteration, int group,
                     const std::string& split, const std::string& strategy) {
    double acc = 0.0;
    int n = 0;
    for (const EvalRow& row : report.rows) {
        if (row.iteration != iteration || row.group != group || row.split != split) {
            continue;
        }
        if (!strategy.empty() && row.strategy != strategy) {
            continue;
        }
        acc += row.error_rate;
        ++n;
    }
    if (n == 0) {
        throw LookupError("group_average: no rows for iteration " + std::to_string(iteration) +
                          ", group " + std::to_string(group) + ", split " + split +
                          (strategy.empty() ? "" : ", strategy " + strategy));
    }
    return acc / n;
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

ordered_json report_json(const EvalReport& report) {
    ordered_json j;
    j["rows"] = ordered_json::array();
    for (const EvalRow& row : report.rows) {
        ordered_json r;
        r["iteration"] = row.iteration;
        r["strategy"] = row.strategy;
        r["task_id"] = row.task_id;
        r["group"] = row.group;
        r["split"] = row.split;
        r["error_rate"] = row.error_rate;
        r["n_samples"] = row.n_samples;
        j["rows"].push_back(std::move(r));
    }

    // one group record per (strategy, iteration) present in the history
    std::set<std::pair<std::string, int>> keys;
    for (const EvalRow& row : report.rows) {
        keys.emplace(row.strategy, row.iteration);
    }
    j["groups"] = ordered_json::array();
    for (const auto& [strategy, iteration] : keys) {
        ordered_json g;
        g["strategy"] = strategy;
        g["iteration"] = iteration;
        std::set<int> group_ids;
        for (const EvalRow& row : report.rows) {
            if (row.strategy == strategy && row.iteration == iteration) {
                group_ids.insert(row.group);
            }
        }
        g["group_averages"] = ordered_json::object();
        for (int gid : group_ids) {
            std::set<std::string> splits;
            for (const EvalRow& row : report.rows) {
                if (row.strategy == strategy && row.iteration == iteration && row.group == gid) {
                    splits.insert(row.split);
                }
            }
            ordered_json per_split;
            for (const std::string& split : splits) {
                per_split[split] = group_average(report, iteration, gid, split, strategy);
            }
            g["group_averages"][std::to_string(gid)] = std::move(per_split);
        }
        j["groups"].push_back(std::move(g));
    }

    j["importance"] = ordered_json::array();
    for (const ImportanceRow& row : report.importance) {
        ordered_json r;
        r["iteration"] = row.iteration;
        r["strategy"] = row.strategy;
        r["threshold"] = row.threshold;
        r["normalize"] = row.normalize;
        r["fraction"] = row.fraction;
        j["importance"].push_back(std::move(r));
    }
    return j;
}

} // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& dir, bool csv,
                 bool json) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("emit_report: cannot create '" + dir.string() + "': " + ec.message());
    }
    if (csv) {
        const std::filesystem::path path = dir / "report.csv";
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("emit_report: cannot open '" + path.string() + "'");
        }
        out << "iteration,strategy,task_id,group,split,error_rate,n_samples\n";
        for (const EvalRow& row : report.rows) {
            out << row.iteration << ',' << row.strategy << ',' << row.task_id << ',' << row.group
                << ',' << row.split << ',' << format_double(row.error_rate) << ','
                << row.n_samples << '\n';
        }
        if (!out) {
            throw IoError("emit_report: write failed for '" + path.string() + "'");
        }
    }
    if (json) {
        const std::filesystem::path path = dir / "report.json";
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("emit_report: cannot open '" + path.string() + "'");
        }
        out << report_json(report).dump(2) << '\n';
        if (!out) {
            throw IoError("emit_report: write failed for '" + path.string() + "'");
        }
    }
}

void save_history(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("save_history: cannot open '" + path.string() + "'");
    }
    out << report_json(report).dump(2) << '\n';
    if (!out) {
        throw IoError("save_history: write failed for '" + path.string() + "'");
    }
}

EvalReport load_history(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load_history: cannot open '" + path.string() + "'");
    }
    EvalReport report;
    try {
        const auto j = nlohmann::json::parse(in);
        for (const auto& r : j.at("rows")) {
            EvalRow row;
            row.iteration = r.at("iteration").get<int>();
            row.strategy = r.at("strategy").get<std::string>();
            row.task_id = r.at("task_id").get<std::string>();
            row.group = r.at("group").get<int>();
            row.split = r.at("split").get<std::string>();
            row.error_rate = r.at("error_rate").get<double>();
            row.n_samples = r.at("n_samples").get<std::int64_t>();
            report.rows.push_back(std::move(row));
        }
        for (const auto& r : j.at("importance")) {
            ImportanceRow row;
            row.iteration = r.at("iteration").get<int>();
            row.strategy = r.at("strategy").get<std::string>();
            row.threshold = r.at("threshold").get<double>();
            row.normalize = r.at("normalize").get<bool>();
            row.fraction = r.at("fraction").get<double>();
            report.importance.push_back(row);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_history: invalid history '" + path.string() + "': " + e.what());
    }
    return report;
}

EvalReport parse_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("parse_report_csv: cannot open '" + path.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) ||
        line != "iteration,strategy,task_id,group,split,error_rate,n_samples") {
        throw FormatError("parse_report_csv: bad header in '" + path.string() + "'");
    }
    EvalReport report;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string field;
        EvalRow row;
        std::getline(ss, field, ',');
        row.iteration = std::stoi(field);
        std::getline(ss, row.strategy, ',');
        std::getline(ss, row.task_id, ',');
        std::getline(ss, field, ',');
        row.group = std::stoi(field);
        std::getline(ss, row.split, ',');
        std::getline(ss, field, ',');
        row.error_rate = std::stod(field);
        std::getline(ss, field, ',');
        row.n_samples = std::stoll(field);
        report.rows.push_back(std::move(row));
    }
    return report;
}

} // namespace clwf
