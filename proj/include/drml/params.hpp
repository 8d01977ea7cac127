#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace drml {

/// A named block of a flat parameter vector, viewed as a column-major matrix.
struct ParamBlock {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }
};

/// Immutable descriptor mapping (layer, weight/bias) to index ranges.
class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(std::vector<ParamBlock> blocks);

    /// Single block named "theta" covering `n` entries.
    static std::shared_ptr<const ParamLayout> flat(Eigen::Index n);

    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    Eigen::Index size() const { return size_; }
    const ParamBlock& block(const std::string& name) const;

    bool operator==(const ParamLayout& other) const;

private:
    std::vector<ParamBlock> blocks_;
    Eigen::Index size_ = 0;
};

namespace detail {

// Shared implementation of ParamVector/GradVector; the tag keeps them distinct types.
template <class Tag>
class LayoutVector {
public:
    LayoutVector() : layout_(ParamLayout::flat(0)) {}
    explicit LayoutVector(Eigen::VectorXd values)
        : layout_(ParamLayout::flat(values.size())), values_(std::move(values)) {}
    LayoutVector(std::shared_ptr<const ParamLayout> layout, Eigen::VectorXd values);

    const Eigen::VectorXd& values() const { return values_; }
    Eigen::Index size() const { return values_.size(); }
    const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }
    double operator[](Eigen::Index i) const { return values_[i]; }

    Eigen::Map<const Eigen::MatrixXd> block(const std::string& name) const {
        const auto& b = layout_->block(name);
        return {values_.data() + b.offset, b.rows, b.cols};
    }

    bool all_finite() const { return values_.allFinite(); }

    /// Replaces the values, keeping the layout. Rejects wrong length or non-finite entries.
    void assign(Eigen::VectorXd values);

private:
    std::shared_ptr<const ParamLayout> layout_;
    Eigen::VectorXd values_;
};

struct ParamTag {};
struct GradTag {};

}  // namespace detail

using ParamVector = detail::LayoutVector<detail::ParamTag>;
using GradVector = detail::LayoutVector<detail::GradTag>;

extern template class detail::LayoutVector<detail::ParamTag>;
extern template class detail::LayoutVector<detail::GradTag>;

}  // namespace drml
