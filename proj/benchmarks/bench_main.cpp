// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <benchmark/benchmark.h>

BENCHMARK_MAIN();
