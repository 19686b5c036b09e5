#include "forgetbench/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "forgetbench/error.hpp"

namespace forgetbench::metrics {

namespace {

void check_inputs(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) {
        throw ShapeError("predictions and labels differ in length");
    }
    if (preds.empty()) {
        throw DataError("metrics need at least one prediction");
    }
}

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, sep)) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == sep) {
        out.emplace_back();
    }
    return out;
}

}  // namespace

double accuracy(std::span<const int> preds, std::span<const int> labels) {
    check_inputs(preds, labels);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        hits += preds[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::span<const int> class_set) {
    check_inputs(preds, labels);
    struct Counts {
        std::size_t tp = 0, fp = 0, fn = 0;
    };
    std::map<int, Counts> per_class;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) {
            ++per_class[preds[i]].tp;
        } else {
            ++per_class[preds[i]].fp;
            ++per_class[labels[i]].fn;
        }
    }
    std::set<int> allowed(class_set.begin(), class_set.end());
    double total = 0.0;
    std::size_t classes = 0;
    for (const auto& [label, c] : per_class) {
        if (!allowed.empty() && allowed.count(label) == 0) {
            continue;
        }
        ++classes;
        const double denom = static_cast<double>(2 * c.tp + c.fp + c.fn);
        total += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
    }
    if (classes == 0) {
        throw DataError("macro_f1: no class of the class set occurs in labels or predictions");
    }
    return total / static_cast<double>(classes);
}

PerformanceMatrix::PerformanceMatrix(std::size_t tasks)
    : tasks_(tasks), acc_(tasks * tasks, 0.0), f1_(tasks * tasks, 0.0), filled_(tasks * tasks, false) {
    if (tasks == 0) {
        throw ConfigError("a performance matrix needs at least one task");
    }
}

std::size_t PerformanceMatrix::rows_complete() const { return next_row_ - 1; }

void PerformanceMatrix::set(std::size_t after_task, std::size_t eval_task, double acc, double f1) {
    if (after_task < 1 || after_task > tasks_ || eval_task < 1) {
        throw IndexError("performance matrix index out of range");
    }
    if (eval_task > after_task) {
        throw IndexError("performance matrix is lower-triangular: R[" + std::to_string(after_task) + "][" +
                         std::to_string(eval_task) + "] is above the diagonal");
    }
    if (after_task != next_row_ || eval_task != next_col_) {
        throw StateError("performance matrix must be filled row by row; expected R[" + std::to_string(next_row_) +
                         "][" + std::to_string(next_col_) + "]");
    }
    if (!(acc >= 0.0 && acc <= 1.0 && f1 >= 0.0 && f1 <= 1.0)) {
        throw DataError("performance values must lie in [0, 1]");
    }
    const std::size_t k = index(after_task, eval_task);
    acc_[k] = acc;
    f1_[k] = f1;
    filled_[k] = true;
    if (eval_task == after_task) {
        ++next_row_;
        next_col_ = 1;
    } else {
        ++next_col_;
    }
}

bool PerformanceMatrix::has(std::size_t after_task, std::size_t eval_task) const {
    if (after_task < 1 || after_task > tasks_ || eval_task < 1 || eval_task > tasks_) {
        return false;
    }
    return filled_[index(after_task, eval_task)];
}

double PerformanceMatrix::get(Metric metric, std::size_t after_task, std::size_t eval_task) const {
    if (!has(after_task, eval_task)) {
        throw StateError("R[" + std::to_string(after_task) + "][" + std::to_string(eval_task) + "] is not filled");
    }
    const std::size_t k = index(after_task, eval_task);
    return metric == Metric::accuracy ? acc_[k] : f1_[k];
}

std::string PerformanceMatrix::to_csv(Metric metric) const {
    std::string out;
    for (std::size_t i = 1; i <= tasks_; ++i) {
        if (!has(i, 1)) {
            break;
        }
        for (std::size_t j = 1; j <= tasks_; ++j) {
            if (j > 1) {
                out.push_back(',');
            }
            if (has(i, j)) {
                out += format_value(get(metric, i, j));
            }
        }
        out.push_back('\n');
    }
    return out;
}

PerformanceMatrix PerformanceMatrix::from_csv(const std::string& acc_csv, const std::string& f1_csv) {
    auto parse_rows = [](const std::string& csv) {
        std::vector<std::vector<std::string>> rows;
        std::istringstream in(csv);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) {
                rows.push_back(split(line, ','));
            }
        }
        return rows;
    };
    const auto acc_rows = parse_rows(acc_csv);
    const auto f1_rows = parse_rows(f1_csv);
    if (acc_rows.empty() || acc_rows.size() != f1_rows.size()) {
        throw DataError("accuracy and F1 matrices differ in row count");
    }
    const std::size_t tasks = acc_rows.front().size();
    PerformanceMatrix r(tasks);
    try {
        for (std::size_t i = 0; i < acc_rows.size(); ++i) {
            if (acc_rows[i].size() != tasks || f1_rows[i].size() != tasks) {
                throw DataError("matrix row " + std::to_string(i + 1) + " has the wrong number of cells");
            }
            for (std::size_t j = 0; j <= i; ++j) {
                r.set(i + 1, j + 1, std::stod(acc_rows[i][j]), std::stod(f1_rows[i][j]));
            }
        }
    } catch (const std::invalid_argument&) {
        throw DataError("non-numeric cell in performance matrix CSV");
    }
    return r;
}

double compute_aa(const PerformanceMatrix& r) {
    const std::size_t t = r.tasks();
    double total = 0.0;
    for (std::size_t j = 1; j <= t; ++j) {
        total += r.get(Metric::accuracy, t, j);
    }
    return total / static_cast<double>(t);
}

double compute_af1(const PerformanceMatrix& r) {
    const std::size_t t = r.tasks();
    double total = 0.0;
    for (std::size_t j = 1; j <= t; ++j) {
        total += r.get(Metric::f1, t, j);
    }
    return total / static_cast<double>(t);
}

double compute_bwt_at(const PerformanceMatrix& r, Metric metric, std::size_t row) {
    if (row < 2) {
        throw DataError("backward transfer is undefined for a single task");
    }
    double total = 0.0;
    for (std::size_t j = 1; j < row; ++j) {
        total += r.get(metric, row, j) - r.get(metric, j, j);
    }
    return total / static_cast<double>(row - 1);
}

double compute_bwt(const PerformanceMatrix& r, Metric metric) { return compute_bwt_at(r, metric, r.tasks()); }

double compute_avg_bwt(const PerformanceMatrix& r, Metric metric) {
    const std::size_t t = r.tasks();
    if (t < 2) {
        throw DataError("backward transfer is undefined for a single task");
    }
    double total = 0.0;
    for (std::size_t i = 2; i <= t; ++i) {
        total += compute_bwt_at(r, metric, i);
    }
    return total / static_cast<double>(t - 1);
}

MetricSummary summarize(const PerformanceMatrix& r) {
    MetricSummary s;
    s.aa = compute_aa(r);
    s.af1 = compute_af1(r);
    if (r.tasks() >= 2) {
        s.bwt_acc = compute_bwt(r, Metric::accuracy);
        s.bwt_f1 = compute_bwt(r, Metric::f1);
        s.avg_bwt_acc = compute_avg_bwt(r, Metric::accuracy);
        s.avg_bwt_f1 = compute_avg_bwt(r, Metric::f1);
    }
    return s;
}

std::vector<CurvePoint> curves(const PerformanceMatrix& r) {
    std::vector<CurvePoint> out;
    double bwt_acc_sum = 0.0;
    double bwt_f1_sum = 0.0;
    for (std::size_t i = 1; i <= r.rows_complete(); ++i) {
        CurvePoint p;
        p.task = i;
        for (std::size_t j = 1; j <= i; ++j) {
            p.aa += r.get(Metric::accuracy, i, j);
            p.af1 += r.get(Metric::f1, i, j);
        }
        p.aa /= static_cast<double>(i);
        p.af1 /= static_cast<double>(i);
        if (i >= 2) {
            bwt_acc_sum += compute_bwt_at(r, Metric::accuracy, i);
            bwt_f1_sum += compute_bwt_at(r, Metric::f1, i);
            p.avg_bwt_acc = bwt_acc_sum / static_cast<double>(i - 1);
            p.avg_bwt_f1 = bwt_f1_sum / static_cast<double>(i - 1);
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace forgetbench::metrics
