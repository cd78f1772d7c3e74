#include "handmotion/params.hpp"

#include <cstring>
#include <stdexcept>

namespace handmotion {

Param& ParamSet::add(const std::string& name, Shape shape, std::vector<double> value,
                     bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    if (numel(shape) != static_cast<std::int64_t>(value.size())) {
        throw std::invalid_argument("parameter " + name + " shape/data mismatch");
    }
    index_[name] = items_.size();
    items_.push_back(Param{name, std::move(shape), std::move(value), trainable});
    return items_.back();
}

Param& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return items_[it->second];
}

const Param& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return items_[it->second];
}

bool ParamSet::contains(const std::string& name) const { return index_.count(name) > 0; }

std::int64_t ParamSet::total_values(bool trainable_only) const {
    std::int64_t n = 0;
    for (const Param& p : items_) {
        if (trainable_only && !p.trainable) continue;
        n += static_cast<std::int64_t>(p.value.size());
    }
    return n;
}

std::uint64_t ParamSet::checksum() const {
    // FNV-1a over names and raw value bytes
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const Param& p : items_) {
        feed(p.name.data(), p.name.size());
        feed(p.value.data(), p.value.size() * sizeof(double));
    }
    return h;
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool requires_grad)
    : params_(&params) {
    leaves_.reserve(params.size());
    for (const Param& p : params.items()) {
        index_[p.name] = leaves_.size();
        leaves_.push_back(tape.leaf(p.shape, p.value, requires_grad && p.trainable));
    }
}

Tensor BoundParams::operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no bound parameter: " + name);
    return leaves_[it->second];
}

} // namespace handmotion
