#include "drml/params.hpp"

#include <stdexcept>

namespace drml {

ParamLayout::ParamLayout(std::vector<ParamBlock> blocks) : blocks_(std::move(blocks)) {
    for (const auto& b : blocks_) {
        if (b.offset != size_) throw std::invalid_argument("ParamLayout: blocks must be contiguous");
        if (b.rows <= 0 || b.cols <= 0) throw std::invalid_argument("ParamLayout: empty block " + b.name);
        size_ += b.size();
    }
}

std::shared_ptr<const ParamLayout> ParamLayout::flat(Eigen::Index n) {
    if (n == 0) return std::make_shared<const ParamLayout>();
    return std::make_shared<const ParamLayout>(std::vector<ParamBlock>{{"theta", 0, n, 1}});
}

const ParamBlock& ParamLayout::block(const std::string& name) const {
    for (const auto& b : blocks_) {
        if (b.name == name) return b;
    }
    throw std::out_of_range("ParamLayout: no block named '" + name + "'");
}

bool ParamLayout::operator==(const ParamLayout& other) const {
    if (blocks_.size() != other.blocks_.size()) return false;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& a = blocks_[i];
        const auto& b = other.blocks_[i];
        if (a.name != b.name || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
}

namespace detail {

template <class Tag>
LayoutVector<Tag>::LayoutVector(std::shared_ptr<const ParamLayout> layout, Eigen::VectorXd values)
    : layout_(std::move(layout)), values_(std::move(values)) {
    if (!layout_) throw std::invalid_argument("parameter vector requires a layout");
    if (values_.size() != layout_->size()) {
        throw std::invalid_argument("parameter vector has " + std::to_string(values_.size()) +
                                    " entries but its layout declares " + std::to_string(layout_->size()));
    }
}

template <class Tag>
void LayoutVector<Tag>::assign(Eigen::VectorXd values) {
    if (values.size() != values_.size()) {
        throw std::invalid_argument("assign: expected " + std::to_string(values_.size()) + " entries, got " +
                                    std::to_string(values.size()));
    }
    if (!values.allFinite()) throw std::domain_error("assign: non-finite parameter update rejected");
    values_ = std::move(values);
}

template class LayoutVector<ParamTag>;
template class LayoutVector<GradTag>;

}  // namespace detail

}  // namespace drml
