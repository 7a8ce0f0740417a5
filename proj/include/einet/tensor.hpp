#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <vector>

namespace einet {

/// High-water mark of engine tensor allocations, in bytes.
class MemoryTracker {
public:
    static void allocated(std::size_t bytes) noexcept {
        const auto now = current().fetch_add(bytes) + bytes;
        auto seen = peak().load();
        while (now > seen && !peak().compare_exchange_weak(seen, now)) {
        }
    }
    static void released(std::size_t bytes) noexcept { current().fetch_sub(bytes); }
    static std::size_t current_bytes() noexcept { return current().load(); }
    static std::size_t peak_bytes() noexcept { return peak().load(); }
    static void reset_peak() noexcept { peak().store(current().load()); }

private:
    static std::atomic<std::size_t>& current() noexcept {
        static std::atomic<std::size_t> v{0};
        return v;
    }
    static std::atomic<std::size_t>& peak() noexcept {
        static std::atomic<std::size_t> v{0};
        return v;
    }
};

template <class T>
struct TrackingAllocator {
    using value_type = T;
    TrackingAllocator() = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        auto* p = std::allocator<T>{}.allocate(n);
        MemoryTracker::allocated(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryTracker::released(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }
    template <class U>
    friend bool operator==(const TrackingAllocator&, const TrackingAllocator<U>&) noexcept {
        return true;
    }
};

/// Engine-owned tensor storage; counts toward MemoryTracker.
template <class T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Row-major sample matrix: one sample per row, one variable per column.
struct Dataset {
    std::size_t num_samples = 0;
    std::size_t num_vars = 0;
    std::vector<double> values;

    Dataset() = default;
    Dataset(std::size_t n, std::size_t d) : num_samples(n), num_vars(d), values(n * d, 0.0) {}

    std::span<const double> row(std::size_t i) const { return {values.data() + i * num_vars, num_vars}; }
    std::span<double> row(std::size_t i) { return {values.data() + i * num_vars, num_vars}; }
    double& at(std::size_t i, std::size_t d) { return values[i * num_vars + d]; }
    double at(std::size_t i, std::size_t d) const { return values[i * num_vars + d]; }

    /// Rows [first, first + count).
    Dataset slice(std::size_t first, std::size_t count) const {
        if (first + count > num_samples) throw std::out_of_range("Dataset::slice out of range");
        Dataset out(count, num_vars);
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(first * num_vars), count * num_vars,
                    out.values.begin());
        return out;
    }

    Dataset select(std::span<const std::size_t> rows) const {
        Dataset out(rows.size(), num_vars);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto src = row(rows[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return out;
    }
};

}  // namespace einet
