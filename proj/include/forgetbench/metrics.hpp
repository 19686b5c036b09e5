#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace forgetbench::metrics {

// Fraction of positions where preds equals labels. Lengths must match and be
// nonzero.
double accuracy(std::span<const int> preds, std::span<const int> labels);

// Unweighted mean of per-class F1 = 2PR / (P + R) (0 when P + R = 0) over the
// classes of `class_set` that occur in labels or preds. An empty class_set means
// "every class occurring in labels or preds".
double macro_f1(std::span<const int> preds, std::span<const int> labels, std::span<const int> class_set = {});

enum class Metric { accuracy, f1 };

// R[i][j]: score on task j after training through task i, 1 <= j <= i <= T.
// Rows are filled in order and every cell is written exactly once.
class PerformanceMatrix {
public:
    explicit PerformanceMatrix(std::size_t tasks);

    std::size_t tasks() const { return tasks_; }
    // Number of complete rows.
    std::size_t rows_complete() const;
    bool complete() const { return rows_complete() == tasks_; }

    // 1-based indices. Throws StateError on out-of-order or repeated writes,
    // IndexError above the diagonal, DataError for values outside [0, 1].
    void set(std::size_t after_task, std::size_t eval_task, double acc, double f1);
    double get(Metric metric, std::size_t after_task, std::size_t eval_task) const;
    bool has(std::size_t after_task, std::size_t eval_task) const;

    // Lower-triangular CSV: one line per row i, T comma-separated cells, the
    // upper triangle left empty. Values printed with 17 significant digits.
    std::string to_csv(Metric metric) const;
    static PerformanceMatrix from_csv(const std::string& acc_csv, const std::string& f1_csv);

private:
    std::size_t index(std::size_t i, std::size_t j) const { return (i - 1) * tasks_ + (j - 1); }

    std::size_t tasks_;
    std::vector<double> acc_;
    std::vector<double> f1_;
    std::vector<bool> filled_;
    std::size_t next_row_ = 1;
    std::size_t next_col_ = 1;
};

// Mean of row T.
double compute_aa(const PerformanceMatrix& r);
double compute_af1(const PerformanceMatrix& r);
// (1/(T-1)) sum_{j<T} (R[T][j] - R[j][j]); T >= 2.
double compute_bwt(const PerformanceMatrix& r, Metric metric);
// BWT_i over the first i rows, i >= 2.
double compute_bwt_at(const PerformanceMatrix& r, Metric metric, std::size_t row);
// Mean of BWT_i over i = 2..T (BWT_1 is undefined and excluded).
double compute_avg_bwt(const PerformanceMatrix& r, Metric metric);

struct MetricSummary {
    double aa = 0.0;
    double af1 = 0.0;
    std::optional<double> bwt_acc;
    std::optional<double> bwt_f1;
    std::optional<double> avg_bwt_acc;
    std::optional<double> avg_bwt_f1;
};

// All metrics of a complete matrix; BWT fields stay empty when T = 1.
MetricSummary summarize(const PerformanceMatrix& r);

// Metrics after each task i = 1..T computed on the leading i x i block:
// AA_i, AF1_i and the running averaged BWT (undefined at i = 1).
struct CurvePoint {
    std::size_t task = 0;
    double aa = 0.0;
    double af1 = 0.0;
    std::optional<double> avg_bwt_acc;
    std::optional<double> avg_bwt_f1;
};
std::vector<CurvePoint> curves(const PerformanceMatrix& r);

}  // namespace forgetbench::metrics
