#pragma once

// Confusion-matrix evaluation. Rows are ground truth, columns prediction.
// Classes whose union is zero are absent and excluded from every mean.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/image.hpp"

namespace osseg {

class ConfusionMatrix {
   public:
    explicit ConfusionMatrix(std::size_t n) : n_(n), counts_(n * n, 0) {
        if (n == 0) throw ArgumentError("ConfusionMatrix: need at least one class");
    }

    std::size_t num_classes() const { return n_; }
    std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
    std::uint64_t& operator()(std::size_t gt, std::size_t pred) { return counts_[gt * n_ + pred]; }

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.n_ != n_) throw DimensionError("ConfusionMatrix: class counts differ");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;

   private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw DimensionError("accumulate: prediction " + std::to_string(pred.height) + "x" +
                             std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                             std::to_string(gt.width));
    }
    const std::size_t n = cm.num_classes();
    // Validate first so a bad map leaves the matrix untouched.
    for (std::size_t p = 0; p < gt.ids.size(); ++p) {
        const auto g = gt.ids[p], q = pred.ids[p];
        if (g == kIgnoreLabel) continue;
        if (g >= n || q >= n) {
            throw ValidationError("accumulate: class id " + std::to_string(g >= n ? g : q) + " out of range at pixel " +
                                  std::to_string(p));
        }
    }
    for (std::size_t p = 0; p < gt.ids.size(); ++p) {
        if (gt.ids[p] != kIgnoreLabel) ++cm(gt.ids[p], pred.ids[p]);
    }
}

struct IoUReport {
    std::vector<std::optional<double>> per_class;  // nullopt when union is zero
    double miou = 0.0;
    double miou_subset = 0.0;
};

inline IoUReport iou_report(const ConfusionMatrix& cm, const std::set<std::size_t>& subset = {}) {
    const std::size_t n = cm.num_classes();
    for (auto c : subset)
        if (c >= n) throw ArgumentError("iou_report: subset class " + std::to_string(c) + " out of range");
    IoUReport r;
    r.per_class.resize(n);
    double sum = 0, sub_sum = 0;
    std::size_t count = 0, sub_count = 0;
    for (std::size_t c = 0; c < n; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t k = 0; k < n; ++k) {
            row += cm(c, k);
            col += cm(k, c);
        }
        const std::uint64_t tp = cm(c, c), uni = row + col - tp;
        if (uni == 0) continue;
        const double iou = static_cast<double>(tp) / static_cast<double>(uni);
        r.per_class[c] = iou;
        sum += iou;
        ++count;
        if (subset.count(c)) {
            sub_sum += iou;
            ++sub_count;
        }
    }
    r.miou = count ? sum / static_cast<double>(count) : 0.0;
    r.miou_subset = sub_count ? sub_sum / static_cast<double>(sub_count) : 0.0;
    return r;
}

}  // namespace osseg
