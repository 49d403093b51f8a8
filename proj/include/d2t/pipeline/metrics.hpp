#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2t::pipeline {

struct MetricsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Serialize a double so that parsing the text recovers the exact bits.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

struct MetricsRow {
    int64_t step;
    std::string metric;
    double value;
};

// Append-only training/evaluation log for one stage. Rows are kept in
// insertion order and steps must not decrease, so the CSV doubles as a
// determinism witness: identical runs produce identical bytes.
class MetricsWriter {
  public:
    MetricsWriter(std::string stage, uint64_t seed)
        : stage_(std::move(stage)), seed_(seed) {}

    void record(int64_t step, const std::string& metric, double value) {
        if (!rows_.empty() && step < rows_.back().step)
            throw MetricsError("metrics for " + stage_ + ": step " + std::to_string(step) +
                               " after step " + std::to_string(rows_.back().step));
        rows_.push_back({step, metric, value});
    }

    const std::vector<MetricsRow>& rows() const { return rows_; }

    std::string csv() const {
        std::string out = "stage,step,metric,value,seed\n";
        for (const auto& r : rows_) {
            out += stage_;
            out += ',';
            out += std::to_string(r.step);
            out += ',';
            out += r.metric;
            out += ',';
            out += format_double(r.value);
            out += ',';
            out += std::to_string(seed_);
            out += '\n';
        }
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw MetricsError("cannot write " + path.string());
        f << csv();
    }

  private:
    std::string stage_;
    uint64_t seed_;
    std::vector<MetricsRow> rows_;
};

}  // namespace d2t::pipeline
