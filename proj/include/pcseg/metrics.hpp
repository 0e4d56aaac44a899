#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcseg/common.hpp"

namespace pcseg {

// C x C counts, rows = ground truth, cols = prediction. Points whose ground
// truth is the ignore class never enter the matrix; predictions must be real
// classes.
class ConfusionMatrix {
public:
    ConfusionMatrix(int class_count, std::int32_t ignore_class)
        : classes_(class_count), ignore_(ignore_class),
          m_(static_cast<std::size_t>(class_count) * class_count, 0) {
        PCSEG_CHECK(class_count >= 1, "need at least one class");
    }

    void add(std::int32_t gt, std::int32_t pred) {
        if (gt == ignore_) return;
        PCSEG_CHECK(gt >= 0 && gt < classes_, "ground-truth id " << gt << " outside [0, " << classes_ << ")");
        PCSEG_CHECK(pred >= 0 && pred < classes_ && pred != ignore_,
                    "prediction " << pred << " is not a valid class");
        ++m_[static_cast<std::size_t>(gt) * classes_ + pred];
    }

    void add_batch(const std::vector<std::int32_t>& gt, const std::vector<std::int32_t>& pred) {
        PCSEG_CHECK(gt.size() == pred.size(), "ground truth and prediction counts differ: "
                                                  << gt.size() << " vs " << pred.size());
        for (std::size_t i = 0; i < gt.size(); ++i) add(gt[i], pred[i]);
    }

    void merge(const ConfusionMatrix& o) {
        PCSEG_CHECK(o.classes_ == classes_ && o.ignore_ == ignore_, "incompatible confusion matrices");
        for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += o.m_[i];
    }

    std::int64_t at(int gt, int pred) const { return m_[static_cast<std::size_t>(gt) * classes_ + pred]; }
    std::int64_t& at(int gt, int pred) { return m_[static_cast<std::size_t>(gt) * classes_ + pred]; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : m_) t += v;
        return t;
    }

    std::int64_t tp(int c) const { return at(c, c); }
    std::int64_t fp(int c) const {
        std::int64_t s = 0;
        for (int g = 0; g < classes_; ++g)
            if (g != c) s += at(g, c);
        return s;
    }
    std::int64_t fn(int c) const {
        std::int64_t s = 0;
        for (int p = 0; p < classes_; ++p)
            if (p != c) s += at(c, p);
        return s;
    }

    int class_count() const { return classes_; }
    std::int32_t ignore_class() const { return ignore_; }

private:
    int classes_;
    std::int32_t ignore_;
    std::vector<std::int64_t> m_;
};

struct IouReport {
    std::vector<double> iou;    // per class; 0 when absent
    std::vector<bool> present;  // TP+FP+FN > 0 and not the ignore class
    double miou = 0;            // mean over present classes
    int present_count = 0;
};

// IoU_c = TP / (TP + FP + FN); classes with an empty denominator are excluded
// from the mean and reported as absent.
inline IouReport iou_per_class(const ConfusionMatrix& cm) {
    const int c = cm.class_count();
    IouReport r;
    r.iou.assign(static_cast<std::size_t>(c), 0.0);
    r.present.assign(static_cast<std::size_t>(c), false);
    double sum = 0;
    for (int i = 0; i < c; ++i) {
        if (i == cm.ignore_class()) continue;
        const std::int64_t denom = cm.tp(i) + cm.fp(i) + cm.fn(i);
        if (denom == 0) continue;
        r.present[static_cast<std::size_t>(i)] = true;
        r.iou[static_cast<std::size_t>(i)] = static_cast<double>(cm.tp(i)) / static_cast<double>(denom);
        sum += r.iou[static_cast<std::size_t>(i)];
        ++r.present_count;
    }
    PCSEG_CHECK(r.present_count > 0, "no class is present in the confusion matrix");
    r.miou = sum / r.present_count;
    return r;
}

inline double miou(const ConfusionMatrix& cm) { return iou_per_class(cm).miou; }

inline std::string metrics_csv(const ConfusionMatrix& cm) {
    const IouReport r = iou_per_class(cm);
    std::ostringstream oss;
    oss << "class,tp,fp,fn,iou\n";
    for (int c = 0; c < cm.class_count(); ++c) {
        if (c == cm.ignore_class()) continue;
        oss << c << "," << cm.tp(c) << "," << cm.fp(c) << "," << cm.fn(c) << ",";
        if (r.present[static_cast<std::size_t>(c)])
            oss << r.iou[static_cast<std::size_t>(c)];
        else
            oss << "absent";
        oss << "\n";
    }
    oss << "miou," << r.miou << "\n";
    return oss.str();
}

}  // namespace pcseg
