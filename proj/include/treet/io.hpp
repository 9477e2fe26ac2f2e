#pragma once

#include "treet/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace treet {

// --- parameter checkpoints --------------------------------------------------
// JSON map from block name to {shape, row-major float64 data}, plus the
// ModelConfig and the RNG seed the run was started with.

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     std::uint64_t seed);
ModelParams load_checkpoint(const std::filesystem::path& path, std::uint64_t* seed = nullptr);

// --- CSV --------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::size_t dropped_rows = 0;  // rows removed because of non-numeric cells

    int column_index(const std::string& name) const;  // -1 when absent
};

// Reads a CSV with a header row; non-numeric data cells mark their row as
// dropped (counted in dropped_rows).
CsvTable read_csv(const std::filesystem::path& path);

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<double>>& rows);

// --- config hashing ----------------------------------------------------------

// FNV-1a over the canonical text form of a configuration.
std::uint64_t fnv1a(const std::string& text);
std::string hash_hex(std::uint64_t h);

}  // namespace treet
