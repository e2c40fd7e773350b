// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/instrument.hpp"

#include <algorithm>

namespace oplora::instrument {

namespace {

struct ThreadState {
    Counters counters;
    std::size_t watch_rows = 0;
    std::size_t watch_cols = 0;
    bool watch_transposed = false;
};

ThreadState& state() noexcept {
    thread_local ThreadState s;
    return s;
}

} // namespace

Counters& counters() noexcept { return state().counters; }

void reset() noexcept { state().counters = Counters{}; }

void add_flops(std::uint64_t n) noexcept { state().counters.flops += n; }

void on_allocation(std::size_t rows, std::size_t cols) noexcept {
    auto& s = state();
    ++s.counters.allocations;
    s.counters.peak_allocation = std::max(s.counters.peak_allocation, rows * cols);
    if (s.watch_rows == 0 && s.watch_cols == 0) {
        return;
    }
    if ((rows == s.watch_rows && cols == s.watch_cols) ||
        (s.watch_transposed && rows == s.watch_cols && cols == s.watch_rows)) {
        ++s.counters.watched_allocations;
    }
}

void on_materialize() noexcept { ++state().counters.materialize_calls; }

void watch_shape(std::size_t rows, std::size_t cols, bool watch_transposed) noexcept {
    auto& s = state();
    s.watch_rows = rows;
    s.watch_cols = cols;
    s.watch_transposed = watch_transposed;
}

Scope::Scope() noexcept : start_(state().counters), outer_peak_(state().counters.peak_allocation) {
    state().counters.peak_allocation = 0;
}

Scope::~Scope() {
    auto& c = state().counters;
    c.peak_allocation = std::max(c.peak_allocation, outer_peak_);
}

Counters Scope::delta() const noexcept {
    const auto& c = state().counters;
    Counters d;
    d.flops = c.flops - start_.flops;
    d.allocations = c.allocations - start_.allocations;
    d.materialize_calls = c.materialize_calls - start_.materialize_calls;
    d.watched_allocations = c.watched_allocations - start_.watched_allocations;
    d.peak_allocation = c.peak_allocation;
    return d;
}

} // namespace oplora::instrument
