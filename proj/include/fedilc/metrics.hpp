#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace fedilc {

/// Mann-Whitney AUROC: P(score of a random positive > score of a random
/// negative), ties counted as one half. Labels are {0,1}.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Step-wise area under the precision-recall curve, sum over descending
/// distinct thresholds of (R_k - R_{k-1}) * P_k. Tied scores form one step.
double auprc(std::span<const double> scores, std::span<const int> labels);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

struct FairnessStats {
    double variance;  // population variance of the accuracies
    double kl;        // KL(normalized accuracies || uniform)
    double entropy;   // entropy of normalized accuracies; equals log(K) - kl
};

FairnessStats fairness_stats(std::span<const double> accuracies);

struct SeedSummary {
    double mean;
    double std;  // sample standard deviation (n - 1)

    /// "mean±std" with the given number of decimals.
    std::string format(int decimals = 3) const;
};

SeedSummary seed_summary(std::span<const double> values);

struct EvalReport {
    double loss = 0.0;
    double accuracy = 0.0;
    double auroc = 0.0;  // NaN when not applicable (multi-class or single-class labels)
    double auprc = 0.0;
    std::vector<double> per_silo_accuracy;
    std::map<std::string, double> per_subenv_accuracy;  // key "silo<i>/env<j>"

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

}  // namespace fedilc
