#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

namespace einet {

/// Set of variable indices, stored as a fixed-width bitset over 0..num_vars-1.
class Scope {
public:
    Scope() = default;
    explicit Scope(std::size_t num_vars) : num_vars_(num_vars), words_((num_vars + 63) / 64, 0) {}

    Scope(std::size_t num_vars, std::span<const std::size_t> vars) : Scope(num_vars) {
        for (auto v : vars) insert(v);
    }
    Scope(std::size_t num_vars, std::initializer_list<std::size_t> vars) : Scope(num_vars) {
        for (auto v : vars) insert(v);
    }

    static Scope full(std::size_t num_vars) {
        Scope s(num_vars);
        for (std::size_t v = 0; v < num_vars; ++v) s.insert(v);
        return s;
    }

    std::size_t num_vars() const noexcept { return num_vars_; }

    void insert(std::size_t v) {
        if (v >= num_vars_) throw std::out_of_range("Scope: variable index out of range");
        words_[v / 64] |= std::uint64_t{1} << (v % 64);
    }

    bool contains(std::size_t v) const noexcept {
        return v < num_vars_ && ((words_[v / 64] >> (v % 64)) & 1U);
    }

    std::size_t size() const noexcept {
        std::size_t n = 0;
        for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
        return n;
    }

    bool empty() const noexcept {
        return std::all_of(words_.begin(), words_.end(), [](auto w) { return w == 0; });
    }

    bool intersects(const Scope& other) const noexcept {
        const auto n = std::min(words_.size(), other.words_.size());
        for (std::size_t i = 0; i < n; ++i)
            if (words_[i] & other.words_[i]) return true;
        return false;
    }

    Scope operator|(const Scope& other) const {
        Scope out(std::max(num_vars_, other.num_vars_));
        for (std::size_t i = 0; i < out.words_.size(); ++i) {
            std::uint64_t w = 0;
            if (i < words_.size()) w |= words_[i];
            if (i < other.words_.size()) w |= other.words_[i];
            out.words_[i] = w;
        }
        return out;
    }

    /// Ascending list of member variables.
    std::vector<std::size_t> indices() const {
        std::vector<std::size_t> out;
        out.reserve(size());
        for (std::size_t i = 0; i < words_.size(); ++i) {
            auto w = words_[i];
            while (w) {
                const auto bit = static_cast<std::size_t>(std::countr_zero(w));
                out.push_back(i * 64 + bit);
                w &= w - 1;
            }
        }
        return out;
    }

    friend bool operator==(const Scope& a, const Scope& b) noexcept {
        return a.num_vars_ == b.num_vars_ && a.words_ == b.words_;
    }

private:
    std::size_t num_vars_ = 0;
    std::vector<std::uint64_t> words_;
};

}  // namespace einet
