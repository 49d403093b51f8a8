#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "d2t/nn/checkpoint.hpp"
#include "d2t/nn/tensor.hpp"
#include "json.hpp"

namespace d2t::dt {

using nn::Index;
using RVec = Eigen::VectorXd;
using RMat = nn::MatX<double>;

// suffix sums: rtg[t] = sum of rewards from t to the end
inline RVec compute_returns_to_go(const RVec& rewards) {
    if (rewards.size() == 0) throw nn::ShapeError("returns-to-go of an empty reward vector");
    RVec rtg(rewards.size());
    double acc = 0;
    for (Index t = rewards.size() - 1; t >= 0; --t) {
        acc += rewards[t];
        rtg[t] = acc;
    }
    return rtg;
}

// One episode: per slot the return-to-go, flattened channel state, phase
// action, reward, and the pilot vector observed before acting.
struct Trajectory {
    uint32_t env_id = 0;
    RVec returns_to_go;  // T
    RVec rewards;        // T
    RMat states;         // T x 2NM
    RMat actions;        // T x N
    RMat pilots;         // T x pilot_dim

    Index length() const { return rewards.size(); }

    void validate() const {
        const Index t = rewards.size();
        nn::require(returns_to_go.size() == t && states.rows() == t && actions.rows() == t &&
                        pilots.rows() == t,
                    "trajectory arrays disagree on length");
        for (Index i = 0; i + 1 < t; ++i)
            nn::require(std::abs(returns_to_go[i] - returns_to_go[i + 1] - rewards[i]) < 1e-9,
                        "returns-to-go do not telescope at slot " + std::to_string(i));
        if (t > 0)
            nn::require(std::abs(returns_to_go[t - 1] - rewards[t - 1]) < 1e-9,
                        "final return-to-go must equal the final reward");
    }
};

// Fixed-geometry trajectory set. Binary layout, little-endian throughout:
//   magic "D2T.BUF\0" | u32 version=1 | u64 N, M, T, pilot_dim, count
//   per trajectory: u32 env_id | f64 rtg[T] | f64 rewards[T]
//                   | f64 states[T*2NM] | f64 actions[T*N] | f64 pilots[T*pd]
class TrajectoryBuffer {
  public:
    static constexpr char kMagic[8] = {'D', '2', 'T', '.', 'B', 'U', 'F', '\0'};
    static constexpr uint32_t kVersion = 1;

    TrajectoryBuffer() = default;
    TrajectoryBuffer(Index n, Index m, Index t, Index pilot_dim)
        : n_(n), m_(m), t_(t), pilot_dim_(pilot_dim) {}

    Index n() const { return n_; }
    Index m() const { return m_; }
    Index t() const { return t_; }
    Index pilot_dim() const { return pilot_dim_; }
    Index size() const { return static_cast<Index>(items_.size()); }
    bool empty() const { return items_.empty(); }
    const Trajectory& at(Index i) const { return items_[static_cast<size_t>(i)]; }
    const std::vector<Trajectory>& items() const { return items_; }

    void add(Trajectory traj) {
        traj.validate();
        nn::require(traj.length() == t_ && traj.states.cols() == 2 * n_ * m_ &&
                        traj.actions.cols() == n_ && traj.pilots.cols() == pilot_dim_,
                    "trajectory does not match buffer geometry");
        items_.push_back(std::move(traj));
    }

    // distinct env tags present, ascending
    std::vector<uint32_t> env_ids() const {
        std::vector<uint32_t> ids;
        for (const auto& tr : items_)
            if (std::find(ids.begin(), ids.end(), tr.env_id) == ids.end())
                ids.push_back(tr.env_id);
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    double best_episode_return() const {
        double best = 0;
        for (const auto& tr : items_)
            if (tr.length() > 0) best = std::max(best, tr.returns_to_go[0]);
        return best;
    }

    double max_slot_reward() const {
        double best = 0;
        for (const auto& tr : items_) best = std::max(best, tr.rewards.maxCoeff());
        return best;
    }

    double mean_reward() const {
        double acc = 0;
        Index count = 0;
        for (const auto& tr : items_) {
            acc += tr.rewards.sum();
            count += tr.length();
        }
        return count ? acc / double(count) : 0.0;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw nn::io::IoError("cannot open for writing: " + path.string());
        os.write(kMagic, 8);
        nn::io::write_le<uint32_t>(os, kVersion);
        for (Index v : {n_, m_, t_, pilot_dim_, size()})
            nn::io::write_le<uint64_t>(os, static_cast<uint64_t>(v));
        for (const auto& tr : items_) {
            nn::io::write_le<uint32_t>(os, tr.env_id);
            auto dump = [&](const double* p, Index count) {
                for (Index i = 0; i < count; ++i) nn::io::write_le<double>(os, p[i]);
            };
            dump(tr.returns_to_go.data(), t_);
            dump(tr.rewards.data(), t_);
            dump(tr.states.data(), t_ * 2 * n_ * m_);
            dump(tr.actions.data(), t_ * n_);
            dump(tr.pilots.data(), t_ * pilot_dim_);
        }
        if (!os) throw nn::io::IoError("write failed: " + path.string());
    }

    static TrajectoryBuffer load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw nn::io::IoError("cannot open for reading: " + path.string());
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, kMagic, 8) != 0)
            throw nn::io::IoError("bad magic in " + path.string());
        const auto version = nn::io::read_le<uint32_t>(is);
        if (version != kVersion)
            throw nn::io::IoError("unsupported buffer version " + std::to_string(version));
        const auto n = static_cast<Index>(nn::io::read_le<uint64_t>(is));
        const auto m = static_cast<Index>(nn::io::read_le<uint64_t>(is));
        const auto t = static_cast<Index>(nn::io::read_le<uint64_t>(is));
        const auto pd = static_cast<Index>(nn::io::read_le<uint64_t>(is));
        const auto count = nn::io::read_le<uint64_t>(is);
        TrajectoryBuffer buf(n, m, t, pd);
        for (uint64_t i = 0; i < count; ++i) {
            Trajectory tr;
            tr.env_id = nn::io::read_le<uint32_t>(is);
            auto slurp = [&](double* p, Index cnt) {
                for (Index j = 0; j < cnt; ++j) p[j] = nn::io::read_le<double>(is);
            };
            tr.returns_to_go.resize(t);
            tr.rewards.resize(t);
            tr.states.resize(t, 2 * n * m);
            tr.actions.resize(t, n);
            tr.pilots.resize(t, pd);
            slurp(tr.returns_to_go.data(), t);
            slurp(tr.rewards.data(), t);
            slurp(tr.states.data(), t * 2 * n * m);
            slurp(tr.actions.data(), t * n);
            slurp(tr.pilots.data(), t * pd);
            buf.add(std::move(tr));
        }
        return buf;
    }

    // human-inspectable mirror of the binary container
    void export_jsonl(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw nn::io::IoError("cannot open for writing: " + path.string());
        for (const auto& tr : items_) {
            nlohmann::json j;
            j["env_id"] = tr.env_id;
            j["returns_to_go"] = std::vector<double>(tr.returns_to_go.data(),
                                                     tr.returns_to_go.data() + t_);
            j["rewards"] = std::vector<double>(tr.rewards.data(), tr.rewards.data() + t_);
            auto rows = [&](const RMat& m2) {
                std::vector<std::vector<double>> out;
                for (Index r = 0; r < m2.rows(); ++r)
                    out.emplace_back(m2.data() + r * m2.cols(),
                                     m2.data() + (r + 1) * m2.cols());
                return out;
            };
            j["states"] = rows(tr.states);
            j["actions"] = rows(tr.actions);
            j["pilots"] = rows(tr.pilots);
            os << j.dump() << '\n';
        }
    }

  private:
    Index n_ = 0, m_ = 0, t_ = 0, pilot_dim_ = 0;
    std::vector<Trajectory> items_;
};

}  // namespace d2t::dt
