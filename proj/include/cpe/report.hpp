// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

namespace cpe {

/// Builds tables and figures from run directories. Reads only the config
/// snapshot and the metrics log of each run (never checkpoints), and writes
/// byte-identical output on repeated invocations:
///   accuracy_table.{json,txt}  mean +/- std of final test accuracy per cell
///   f1_bars.{csv,svg}          final per-expert group F1 per run
///   feature_stats.{csv,svg}    per-channel feature mean/std scatter
///   confusion_<run>.{csv,svg}  final confusion matrix per run
void write_report(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_dir);

}  // namespace cpe
