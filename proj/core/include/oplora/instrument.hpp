// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>

// Per-thread operation counters. Every kernel in matcore reports the flops it
// performs and every Mat allocation is recorded, so tests can audit the cost
// and memory footprint of an optimizer step without a profiler.
namespace oplora::instrument {

struct Counters {
    std::uint64_t flops = 0;
    std::uint64_t allocations = 0;
    std::uint64_t materialize_calls = 0;
    /// Largest single Mat allocation (in scalars) since the last reset.
    std::size_t peak_allocation = 0;
    /// Allocations whose shape equals the watched shape, in either orientation
    /// when watch_transposed is set.
    std::uint64_t watched_allocations = 0;
};

Counters& counters() noexcept;
void reset() noexcept;

void add_flops(std::uint64_t n) noexcept;
void on_allocation(std::size_t rows, std::size_t cols) noexcept;
void on_materialize() noexcept;

/// Flag every allocation of a rows x cols buffer. Passing 0 x 0 disables the watch.
void watch_shape(std::size_t rows, std::size_t cols, bool watch_transposed = false) noexcept;

/// Snapshots the thread's counters on construction and reports the deltas
/// accumulated since then. peak_allocation is tracked for the scope only.
class Scope {
public:
    Scope() noexcept;
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

    Counters delta() const noexcept;

private:
    Counters start_;
    std::size_t outer_peak_;
};

} // namespace oplora::instrument
