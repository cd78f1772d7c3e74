#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "handmotion/tensor.hpp"

namespace handmotion {

// One named parameter block. Non-trainable entries hold state such as
// normalization running statistics; they ride along in checkpoints but
// are skipped by the optimizer.
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    bool trainable = true;
};

// Ordered, name-indexed parameter storage. Iteration order is insertion
// order so that optimizer updates and checksums are deterministic.
class ParamSet {
public:
    Param& add(const std::string& name, Shape shape, std::vector<double> value,
               bool trainable = true);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<Param>& items() { return items_; }
    const std::vector<Param>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    std::int64_t total_values(bool trainable_only = false) const;
    // order- and content-sensitive digest, used by gradient-isolation tests
    std::uint64_t checksum() const;

private:
    std::vector<Param> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Per-tape binding of a ParamSet: one leaf per parameter, created once so
// gradients accumulate across every use inside the tape.
class BoundParams {
public:
    BoundParams(Tape& tape, const ParamSet& params, bool requires_grad);

    Tensor operator[](const std::string& name) const;
    const std::vector<Tensor>& leaves() const { return leaves_; }

private:
    const ParamSet* params_;
    std::vector<Tensor> leaves_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace handmotion
