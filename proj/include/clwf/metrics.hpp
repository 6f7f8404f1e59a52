#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clwf/model.hpp"
#include "clwf/task_suite.hpp"

namespace clwf {

struct EvalRow {
    int iteration = 0;
    std::string strategy;
    std::string task_id;
    int group = 0;
    std::string split;
    double error_rate = 0.0;
    std::int64_t n_samples = 0;
};

struct ImportanceRow {
    int iteration = 0;
    std::string strategy;
    double threshold = 0.0;
    bool normalize = true;
    double fraction = 0.0;
};

// Evaluation history with Table-1-shaped derived statistics.
struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<ImportanceRow> importance;

    // Rejects a second evaluation of the same
    // (strategy, iteration, task, split) cell.
    void add(EvalRow row);
};

// Fraction of misclassified samples.
double error_rate(const ToyEncoderClassifier& model, const std::vector<Sample>& samples,
                  const std::string& task);

struct DegradationRate {
    double value = 0.0;
    bool relative = true; // false when old_err == 0: absolute change instead
};

// (new - old) / old for old > 0; the absolute change when old == 0.
DegradationRate degradation(double old_err, double new_err);

// Unweighted mean over the group's task error rates for one strategy,
// iteration and split.
double group_average(const EvalReport& report, int iteration, int group,
                     const std::string& split = "test", const std::string& strategy = "");

// report.csv: exact column order
// iteration,strategy,task_id,group,split,error_rate,n_samples
// report.json: rows plus per-(strategy, iteration) groups and the
// importance series. Identical input produces identical bytes.
void emit_report(const EvalReport& report, const std::filesystem::path& dir, bool csv, bool json);

EvalReport parse_report_csv(const std::filesystem::path& path);

// Evaluation history attached to a checkpoint directory; same JSON shape
// as the emitted report.
void save_history(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_history(const std::filesystem::path& path);

// Shortest round-trip decimal form; the one float format used in emitted
// artifacts so they are byte-stable.
std::string format_double(double v);

} // namespace clwf
