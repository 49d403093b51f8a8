#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2t::nn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class S>
using VecX = Eigen::Vector<S, Eigen::Dynamic>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

// Flat row-major value store with an optional same-shape gradient accumulator.
template <class S>
struct Tensor {
    Shape shape;
    VecX<S> v;
    VecX<S> g;  // empty until grad tracking is requested

    Tensor() = default;
    Tensor(Shape s, VecX<S> values) : shape(std::move(s)), v(std::move(values)) {
        require(numel(shape) == v.size(),
                "tensor value count " + std::to_string(v.size()) +
                    " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        Index n = numel(s);
        return Tensor(std::move(s), VecX<S>::Zero(n));
    }
    static Tensor full(Shape s, S value) {
        Index n = numel(s);
        return Tensor(std::move(s), VecX<S>::Constant(n, value));
    }
    static Tensor from(Shape s, std::initializer_list<S> values) {
        VecX<S> v(static_cast<Index>(values.size()));
        Index i = 0;
        for (S x : values) v[i++] = x;
        return Tensor(std::move(s), std::move(v));
    }

    Index size() const { return v.size(); }

    void ensure_grad() {
        if (g.size() != v.size()) g = VecX<S>::Zero(v.size());
    }
    void zero_grad() {
        if (g.size()) g.setZero();
    }

    Eigen::Map<MatX<S>> mat(Index rows, Index cols) {
        return Eigen::Map<MatX<S>>(v.data(), rows, cols);
    }
    Eigen::Map<const MatX<S>> mat(Index rows, Index cols) const {
        return Eigen::Map<const MatX<S>>(v.data(), rows, cols);
    }
};

// Ordered collection of named parameters; the unit both optimizers and
// checkpoints operate on.
template <class S>
class ParamStore {
  public:
    Index add(std::string name, Tensor<S> t) {
        require(!index_.count(name), "duplicate parameter name: " + name);
        t.ensure_grad();
        index_[name] = static_cast<Index>(tensors_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(t));
        return static_cast<Index>(tensors_.size()) - 1;
    }

    Index count() const { return static_cast<Index>(tensors_.size()); }
    Tensor<S>& at(Index i) { return tensors_[static_cast<size_t>(i)]; }
    const Tensor<S>& at(Index i) const { return tensors_[static_cast<size_t>(i)]; }
    const std::string& name(Index i) const { return names_[static_cast<size_t>(i)]; }

    Index find(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "unknown parameter: " + name);
        return it->second;
    }
    Tensor<S>& operator[](const std::string& name) { return at(find(name)); }
    const Tensor<S>& operator[](const std::string& name) const { return at(find(name)); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

    Index scalar_count() const {
        Index n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<S>> tensors_;
    std::map<std::string, Index> index_;
};

}  // namespace d2t::nn
