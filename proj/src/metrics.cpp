#include "fedilc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace fedilc {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("scores/labels length mismatch");
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("labels must be 0 or 1");
    }
}

// Indices sorted by descending score; ties broken by index so the order is total.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    return order;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    check_binary(scores, labels);
    const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    const std::size_t negatives = labels.size() - positives;
    if (positives == 0 || negatives == 0) throw std::invalid_argument("auroc: both classes must be present");

    // Walk tie groups in descending order; count concordant pairs in half units
    // so the result is an exact integer ratio.
    const auto order = descending_order(scores);
    unsigned long long half_units = 0;
    unsigned long long negatives_above = 0;
    for (std::size_t start = 0; start < order.size();) {
        std::size_t end = start;
        unsigned long long pos = 0;
        unsigned long long neg = 0;
        while (end < order.size() && scores[order[end]] == scores[order[start]]) {
            (labels[order[end]] == 1 ? pos : neg) += 1;
            ++end;
        }
        // Positives in this group beat every negative below; tie with negatives in the group.
        half_units += pos * (2 * (negatives - negatives_above - neg)) + pos * neg;
        negatives_above += neg;
        start = end;
    }
    return static_cast<double>(half_units) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
    check_binary(scores, labels);
    const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (positives == 0) throw std::invalid_argument("auprc: no positive labels");

    const auto order = descending_order(scores);
    double area = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();) {
        std::size_t end = start;
        while (end < order.size() && scores[order[end]] == scores[order[start]]) {
            if (labels[order[end]] == 1) ++tp;
            ++end;
        }
        seen = end;
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        start = end;
    }
    return area;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size() || labels.empty()) throw std::invalid_argument("accuracy: bad lengths");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

FairnessStats fairness_stats(std::span<const double> accuracies) {
    if (accuracies.size() < 2) throw std::invalid_argument("fairness_stats: need at least 2 silos");
    const auto k = static_cast<double>(accuracies.size());
    double sum = 0.0;
    for (double a : accuracies) {
        if (!(a >= 0.0)) throw std::invalid_argument("fairness_stats: accuracies must be >= 0");
        sum += a;
    }
    if (sum <= 0.0) throw std::invalid_argument("fairness_stats: all accuracies are zero");
    // Deviations from the first value, so equal accuracies give exactly 0.
    double shift_sum = 0.0;
    for (double a : accuracies) shift_sum += a - accuracies[0];
    const double shift_mean = shift_sum / k;
    double var = 0.0;
    double kl = 0.0;
    double entropy = 0.0;
    for (double a : accuracies) {
        const double d = (a - accuracies[0]) - shift_mean;
        var += d * d;
        const double p = a / sum;
        if (p > 0.0) {
            kl += p * std::log(p * k);
            entropy -= p * std::log(p);
        }
    }
    return FairnessStats{var / k, kl, entropy};
}

SeedSummary seed_summary(std::span<const double> values) {
    if (values.size() < 2) throw std::invalid_argument("seed_summary: need at least 2 values");
    // Sorted copy so the summation order, and hence the result, ignores input order.
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    double sum = 0.0;
    for (double v : sorted) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : sorted) ss += (v - mean) * (v - mean);
    return SeedSummary{mean, std::sqrt(ss / (n - 1.0))};
}

std::string SeedSummary::format(int decimals) const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f±%.*f", decimals, mean, decimals, std);
    return buf;
}

}  // namespace fedilc
